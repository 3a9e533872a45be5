//! Versioned binary checkpoint container: magic header, model config,
//! step counter, RNG state, Adam moments, and explicit little-endian
//! float32 tensor records. Save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{build_model, ModelConfig, ModelParams};
use crate::trainer::AdamState;

const MAGIC: &[u8; 4] = b"MFCP";
const VERSION: u32 = 1;

/// Complete training state as persisted on disk.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train_seed: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub params: ModelParams<f32>,
    pub opt: AdamState,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointVersion(msg.into())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| corrupt(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn write_config(w: &mut impl Write, c: &ModelConfig) -> Result<()> {
    write_u32(w, c.idb_count as u32)?;
    write_u32(w, c.tmu_count as u32)?;
    for k in c.branch_kernels {
        write_u32(w, k as u32)?;
    }
    w.write_all(&[c.use_cbam as u8])?;
    write_u32(w, c.channels as u32)?;
    write_u32(w, c.growth as u32)?;
    write_u32(w, c.embed_channels as u32)?;
    write_u32(w, c.patch as u32)?;
    write_u32(w, c.reduction as u32)?;
    write_u32(w, c.heads as u32)?;
    w.write_all(&[c.normalize_weights as u8])?;
    write_u64(w, c.seed)?;
    Ok(())
}

fn read_config(r: &mut impl Read) -> Result<ModelConfig> {
    let idb_count = read_u32(r)? as usize;
    let tmu_count = read_u32(r)? as usize;
    let branch_kernels = [
        read_u32(r)? as usize,
        read_u32(r)? as usize,
        read_u32(r)? as usize,
    ];
    let use_cbam = read_exact::<1>(r)?[0] != 0;
    let channels = read_u32(r)? as usize;
    let growth = read_u32(r)? as usize;
    let embed_channels = read_u32(r)? as usize;
    let patch = read_u32(r)? as usize;
    let reduction = read_u32(r)? as usize;
    let heads = read_u32(r)? as usize;
    let normalize_weights = read_exact::<1>(r)?[0] != 0;
    let seed = read_u64(r)?;
    Ok(ModelConfig {
        idb_count,
        tmu_count,
        branch_kernels,
        use_cbam,
        channels,
        growth,
        embed_channels,
        patch,
        reduction,
        heads,
        normalize_weights,
        seed,
    })
}

fn write_tensor(w: &mut impl Write, name: &str, t: &ArrayD<f32>) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&[t.ndim() as u8])?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, ArrayD<f32>)> {
    let name_len = u16::from_le_bytes(read_exact::<2>(r)?) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|e| corrupt(format!("truncated tensor name: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
    let ndim = read_exact::<1>(r)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r)? as usize);
    }
    let numel: usize = dims.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f32::from_le_bytes(read_exact::<4>(r)?));
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| corrupt(format!("bad tensor shape: {e}")))?;
    Ok((name, arr))
}

impl Checkpoint {
    /// Serialize to `path` atomically (write a temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(file);
            w.write_all(MAGIC)?;
            write_u32(&mut w, VERSION)?;
            write_config(&mut w, &self.config)?;
            write_u64(&mut w, self.train_seed)?;
            write_u64(&mut w, self.step)?;
            w.write_all(&self.rng.get_seed())?;
            write_u64(&mut w, self.rng.get_stream())?;
            w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
            write_u64(&mut w, self.opt.t)?;

            let mut names: Vec<String> = Vec::new();
            self.params.for_each(&mut |n, _| names.push(n.to_string()));
            write_u32(&mut w, names.len() as u32)?;
            let mut result = Ok(());
            let mut i = 0;
            self.params.for_each(&mut |n, t| {
                if result.is_ok() {
                    result = write_tensor(&mut w, n, t);
                }
                i += 1;
            });
            result?;
            for (n, t) in names.iter().zip(self.opt.m.iter()) {
                write_tensor(&mut w, n, t)?;
            }
            for (n, t) in names.iter().zip(self.opt.v.iter()) {
                write_tensor(&mut w, n, t)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Deserialize from `path`, rebuilding the parameter structure from the
    /// stored config and filling it with the stored tensors.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| {
            corrupt(format!("cannot open checkpoint {}: {e}", path.display()))
        })?;
        let mut r = std::io::BufReader::new(file);
        let magic = read_exact::<4>(&mut r)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic; not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(corrupt(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let config = read_config(&mut r)?;
        config.validate()?;
        let train_seed = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;
        let seed = read_exact::<32>(&mut r)?;
        let stream = read_u64(&mut r)?;
        let word_pos = u128::from_le_bytes(read_exact::<16>(&mut r)?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let adam_t = read_u64(&mut r)?;

        let mut params: ModelParams<f32> = build_model(&config)?;
        let count = read_u32(&mut r)? as usize;
        let mut expected = 0usize;
        params.for_each(&mut |_, _| expected += 1);
        if count != expected {
            return Err(corrupt(format!(
                "checkpoint holds {count} tensors, model needs {expected}"
            )));
        }
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(read_tensor(&mut r)?);
        }
        let mut i = 0;
        let mut fill_err: Option<Error> = None;
        params.for_each_mut(&mut |name, t| {
            if fill_err.is_some() {
                return;
            }
            let (rec_name, rec) = &records[i];
            if rec_name != name {
                fill_err = Some(corrupt(format!(
                    "tensor order mismatch: expected {name}, found {rec_name}"
                )));
            } else if rec.shape() != t.shape() {
                fill_err = Some(corrupt(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    rec.shape(),
                    t.shape()
                )));
            } else {
                t.assign(rec);
            }
            i += 1;
        });
        if let Some(e) = fill_err {
            return Err(e);
        }

        let mut m = Vec::with_capacity(count);
        for _ in 0..count {
            m.push(read_tensor(&mut r)?.1);
        }
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(read_tensor(&mut r)?.1);
        }
        Ok(Checkpoint {
            config,
            train_seed,
            step,
            rng,
            params,
            opt: AdamState {
                m,
                v,
                t: adam_t,
            },
        })
    }
}
