//! Full fusion network: two invertible dense networks, the complementary
//! feature extractor, and a 1x1-conv + HardSigmoid reconstruction head.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ycbcr_to_rgb, GrayImage, ImagePair};
use crate::error::{Error, Result};
use crate::invertible::{idn_forward, idn_forward_t, IdnParams, IdnVars};
use crate::mcfem::{mcfem_forward, mcfem_forward_t, McfemParams, McfemSpec, McfemVars};
use crate::nn::{Conv2dParams, ConvVars};
use crate::tensor::{Pad, Scalar, Tape, Var};

/// Structural configuration of the model. The ablation ranges are
/// idb_count 0..=6 and tmu_count 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub idb_count: usize,
    pub tmu_count: usize,
    pub branch_kernels: [usize; 3],
    pub use_cbam: bool,
    /// Feature width of each invertible network (split in half by coupling).
    pub channels: usize,
    /// Dense-net growth per hidden layer.
    pub growth: usize,
    /// Channels entering tokenization; token dim = embed_channels * patch^2.
    pub embed_channels: usize,
    /// Side length of a token patch.
    pub patch: usize,
    /// Channel-attention MLP reduction ratio.
    pub reduction: usize,
    /// Attention heads.
    pub heads: usize,
    /// Rescale each adaptive weight pair to sum to one.
    pub normalize_weights: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            idb_count: 6,
            tmu_count: 3,
            branch_kernels: [3, 5, 7],
            use_cbam: true,
            channels: 16,
            growth: 2,
            embed_channels: 2,
            patch: 4,
            reduction: 4,
            heads: 8,
            normalize_weights: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Token embedding width.
    pub fn embed_dim(&self) -> usize {
        self.embed_channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.idb_count > 6 {
            return Err(Error::Config(format!(
                "idb_count {} outside the ablation range 0..=6",
                self.idb_count
            )));
        }
        if self.tmu_count > 3 {
            return Err(Error::Config(format!(
                "tmu_count {} outside the ablation range 0..=3",
                self.tmu_count
            )));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "channels must be even and positive, got {}",
                self.channels
            )));
        }
        if self.growth == 0 {
            return Err(Error::Config("growth must be positive".into()));
        }
        for &k in &self.branch_kernels {
            if k == 0 || k % 2 == 0 || k > 11 {
                return Err(Error::Config(format!(
                    "branch kernels must be odd and at most 11, got {k}"
                )));
            }
        }
        if self.embed_channels == 0 || self.patch == 0 {
            return Err(Error::Config("embed_channels and patch must be positive".into()));
        }
        if self.heads == 0 || !self.embed_dim().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed dim {} must be divisible by heads {}",
                self.embed_dim(),
                self.heads
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable tensors of the network.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub idn_mri: IdnParams<S>,
    pub idn_func: IdnParams<S>,
    pub mcfem: McfemParams<S>,
    pub recon: Conv2dParams<S>,
}

pub struct ModelVars {
    pub idn_mri: IdnVars,
    pub idn_func: IdnVars,
    pub mcfem: McfemVars,
    pub recon: ConvVars,
}

impl<S: Scalar> ModelParams<S> {
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<S>)) {
        self.idn_mri.for_each("idn_mri", f);
        self.idn_func.for_each("idn_func", f);
        self.mcfem.for_each("mcfem", f);
        self.recon.for_each("recon", f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<S>)) {
        self.idn_mri.for_each_mut("idn_mri", f);
        self.idn_func.for_each_mut("idn_func", f);
        self.mcfem.for_each_mut("mcfem", f);
        self.recon.for_each_mut("recon", f);
    }

    pub fn bind(&self, tape: &mut Tape<S>, order: &mut Vec<Var>) -> ModelVars {
        ModelVars {
            idn_mri: self.idn_mri.bind(tape, order),
            idn_func: self.idn_func.bind(tape, order),
            mcfem: self.mcfem.bind(tape, order),
            recon: self.recon.bind(tape, order),
        }
    }
}

/// Initialize all weights from the config seed. He-uniform convolutions,
/// Xavier-uniform attention/MLP maps, zero biases, zero coupling heads.
pub fn build_model<S: Scalar>(config: &ModelConfig) -> Result<ModelParams<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let idn_mri = IdnParams::init(config.channels, config.growth, config.idb_count, &mut rng);
    let idn_func = IdnParams::init(config.channels, config.growth, config.idb_count, &mut rng);
    let mcfem = McfemParams::init(
        &McfemSpec {
            branch_kernels: config.branch_kernels,
            use_cbam: config.use_cbam,
            tmu_count: config.tmu_count,
            embed_channels: config.embed_channels,
            patch: config.patch,
            reduction: config.reduction,
            heads: config.heads,
            out_channels: config.channels,
        },
        &mut rng,
    );
    let recon_in = 2 * config.channels + mcfem.out_channels();
    let recon = Conv2dParams::he_uniform(1, recon_in, 1, 1, &mut rng);
    Ok(ModelParams {
        idn_mri,
        idn_func,
        mcfem,
        recon,
    })
}

/// Exact count of learnable scalar values.
pub fn count_parameters<S: Scalar>(p: &ModelParams<S>) -> usize {
    let mut n = 0;
    p.for_each(&mut |_, t| n += t.len());
    n
}

/// HardSigmoid: clip((x + 3) / 6, 0, 1).
pub fn hard_sigmoid<S: Scalar>(x: S) -> S {
    let v = (x + S::from_float(3.0)) * S::from_float(1.0 / 6.0);
    v.max(S::zero()).min(S::one())
}

/// End-to-end fused luma plane for a pair of [H,W] planes in [0,1].
pub fn forward<S: Scalar>(
    p: &ModelParams<S>,
    mri: &Array2<S>,
    func: &Array2<S>,
) -> Result<Array2<S>> {
    if mri.dim() != func.dim() {
        return Err(Error::Shape(format!(
            "fusion inputs differ: {:?} vs {:?}",
            mri.dim(),
            func.dim()
        )));
    }
    let f_mri = idn_forward(&p.idn_mri, mri)?;
    let f_func = idn_forward(&p.idn_func, func)?;
    let f_comp = mcfem_forward(&p.mcfem, mri, func)?;
    let cat = ndarray::concatenate(
        ndarray::Axis(0),
        &[f_mri.view(), f_func.view(), f_comp.view()],
    )
    .unwrap();
    let pre = crate::tensor::conv::conv2d(
        &cat.view(),
        &p.recon.weight.view().into_dimensionality().unwrap(),
        Some(&p.recon.bias.view().into_dimensionality().unwrap()),
        Pad::Same,
    );
    let fused = pre.index_axis_move(ndarray::Axis(0), 0).mapv(hard_sigmoid);
    Ok(fused)
}

/// Tape mirror of [`forward`]; inputs are [1,H,W] nodes. Returns the fused
/// [H,W] node.
pub fn forward_t<S: Scalar>(
    tape: &mut Tape<S>,
    p: &ModelParams<S>,
    vars: &ModelVars,
    mri: Var,
    func: Var,
) -> Var {
    let f_mri = idn_forward_t(tape, &vars.idn_mri, mri);
    let f_func = idn_forward_t(tape, &vars.idn_func, func);
    let f_comp = mcfem_forward_t(tape, &p.mcfem, &vars.mcfem, mri, func);
    let cat = tape.concat_c(&[f_mri, f_func, f_comp]);
    let pre = tape.conv2d(cat, vars.recon.weight, Some(vars.recon.bias), Pad::Same);
    let act = tape.hard_sigmoid(pre);
    let shape = tape.shape(act).to_vec();
    tape.reshape(act, &[shape[1], shape[2]])
}

/// Fused output: gray when the pair has no chroma, color otherwise.
#[derive(Clone, Debug)]
pub enum Fused {
    Gray(Array2<f64>),
    Rgb {
        r: Array2<f64>,
        g: Array2<f64>,
        b: Array2<f64>,
    },
}

impl Fused {
    pub fn luma(&self) -> Array2<f64> {
        match self {
            Fused::Gray(y) => y.clone(),
            Fused::Rgb { r, g, b } => crate::data::rgb_to_ycbcr(r, g, b).0,
        }
    }
}

/// Fuse a full pair: run the network on the luma planes and recombine the
/// functional chroma when present.
pub fn fuse_full<S: Scalar>(p: &ModelParams<S>, pair: &ImagePair) -> Result<Fused> {
    let mri = pair.mri.pixels().mapv(S::from_float);
    let func = pair.functional_y.pixels().mapv(S::from_float);
    let fused_y = forward(p, &mri, &func)?.mapv(S::to_float);
    match &pair.functional_chroma {
        None => Ok(Fused::Gray(fused_y)),
        Some((cb, cr)) => {
            let (r, g, b) = ycbcr_to_rgb(&fused_y, cb, cr);
            Ok(Fused::Rgb { r, g, b })
        }
    }
}

/// Convenience wrapper for [`forward`] on pipeline images.
pub fn forward_pair<S: Scalar>(p: &ModelParams<S>, pair: &ImagePair) -> Result<GrayImage> {
    let mri = pair.mri.pixels().mapv(S::from_float);
    let func = pair.functional_y.pixels().mapv(S::from_float);
    let fused = forward(p, &mri, &func)?.mapv(S::to_float);
    GrayImage::new(fused)
}

/// Lift a [H,W] plane into the [1,H,W] layout used by tape inputs.
pub fn plane3<S: Scalar>(img: &Array2<S>) -> Array3<S> {
    let (h, w) = img.dim();
    img.to_owned().into_shape_with_order((1, h, w)).unwrap()
}
