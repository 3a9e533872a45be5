//! Image loading, validation, color conversion, and patch augmentation.
//!
//! All pixel values live on the unit interval. Fusion operates on the luma
//! plane; chroma of the functional modality is carried through untouched and
//! recombined after fusion.

use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::Array2;

use crate::error::{Error, Result};

/// Optional (Cb, Cr) chroma planes carried alongside a luma plane.
pub type ChromaPlanes = Option<(Array2<f64>, Array2<f64>)>;

/// Full-range BT.601 luma/chroma coefficients.
const YCBCR_FWD: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

/// Minimum side length; fusion metrics need at least an 8x8 window footprint.
pub const MIN_SIDE: usize = 8;

/// Single-channel image with intensities in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pixels: Array2<f64>,
}

impl GrayImage {
    /// Wrap a pixel array, validating the unit-interval and minimum-size
    /// invariants.
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Size(format!(
                "image {h}x{w} is below the minimum {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Shape(
                "pixel values must lie in [0,1]".to_string(),
            ));
        }
        Ok(GrayImage { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }
}

/// Aligned (MRI, functional) sample. Chroma planes are present when the
/// functional image was color.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub mri: GrayImage,
    pub functional_y: GrayImage,
    pub functional_chroma: ChromaPlanes,
    pub identifier: String,
}

impl ImagePair {
    pub fn new(
        mri: GrayImage,
        functional_y: GrayImage,
        functional_chroma: ChromaPlanes,
        identifier: String,
    ) -> Result<Self> {
        if mri.height() != functional_y.height() || mri.width() != functional_y.width() {
            return Err(Error::PairDimension {
                mri_h: mri.height(),
                mri_w: mri.width(),
                func_h: functional_y.height(),
                func_w: functional_y.width(),
            });
        }
        if let Some((cb, cr)) = &functional_chroma {
            if cb.dim() != (functional_y.height(), functional_y.width()) || cb.dim() != cr.dim() {
                return Err(Error::Shape(
                    "chroma planes must match the functional Y plane".to_string(),
                ));
            }
        }
        Ok(ImagePair {
            mri,
            functional_y,
            functional_chroma,
            identifier,
        })
    }

    pub fn height(&self) -> usize {
        self.mri.height()
    }

    pub fn width(&self) -> usize {
        self.mri.width()
    }
}

/// The 36 patches of one 256x256 pair.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: Vec<ImagePair>,
    pub source_id: String,
}

/// Patch grid origins along each axis of a 256x256 frame: uniform stride 27
/// with the final crop flush against the edge.
pub const CROP_OFFSETS: [usize; 6] = [0, 27, 54, 81, 108, 136];
/// Side length of a training patch.
pub const PATCH_SIDE: usize = 120;

/// Load and pair two image files. The functional image keeps its chroma when
/// it is color; an RGB anatomical image is reduced to its luma plane.
pub fn load_pair(mri_path: &Path, functional_path: &Path) -> Result<ImagePair> {
    let mri_img = decode(mri_path)?;
    let func_img = decode(functional_path)?;
    let (mri_y, _) = to_luma_chroma(&mri_img, mri_path)?;
    let (func_y, func_chroma) = to_luma_chroma(&func_img, functional_path)?;
    let identifier = mri_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pair".to_string());
    ImagePair::new(
        GrayImage::new(mri_y)?,
        GrayImage::new(func_y)?,
        func_chroma,
        identifier,
    )
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Split a decoded image into a [0,1] luma plane plus optional chroma.
fn to_luma_chroma(
    img: &DynamicImage,
    path: &Path,
) -> Result<(Array2<f64>, ChromaPlanes)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = |v: Vec<f64>| Array2::from_shape_vec((h, w), v).unwrap();
    match img {
        DynamicImage::ImageLuma8(b) => Ok((
            gray(b.pixels().map(|p| p.0[0] as f64 / 255.0).collect()),
            None,
        )),
        DynamicImage::ImageLumaA8(b) => Ok((
            gray(b.pixels().map(|p| p.0[0] as f64 / 255.0).collect()),
            None,
        )),
        DynamicImage::ImageLuma16(b) => Ok((
            gray(b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()),
            None,
        )),
        DynamicImage::ImageLumaA16(b) => Ok((
            gray(b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()),
            None,
        )),
        DynamicImage::ImageRgb8(b) => {
            let planes = rgb_planes(h, w, b.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]), 255.0);
            let (y, cb, cr) = rgb_to_ycbcr(&planes[0], &planes[1], &planes[2]);
            Ok((y, Some((cb, cr))))
        }
        DynamicImage::ImageRgba8(b) => {
            let planes = rgb_planes(h, w, b.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]), 255.0);
            let (y, cb, cr) = rgb_to_ycbcr(&planes[0], &planes[1], &planes[2]);
            Ok((y, Some((cb, cr))))
        }
        DynamicImage::ImageRgb16(b) => {
            let planes = rgb_planes(h, w, b.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]), 65535.0);
            let (y, cb, cr) = rgb_to_ycbcr(&planes[0], &planes[1], &planes[2]);
            Ok((y, Some((cb, cr))))
        }
        DynamicImage::ImageRgba16(b) => {
            let planes = rgb_planes(h, w, b.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]), 65535.0);
            let (y, cb, cr) = rgb_to_ycbcr(&planes[0], &planes[1], &planes[2]);
            Ok((y, Some((cb, cr))))
        }
        other => Err(Error::Decode {
            path: path.display().to_string(),
            reason: format!("unsupported pixel format {:?}", other.color()),
        }),
    }
}

fn rgb_planes<T: Into<f64>>(
    h: usize,
    w: usize,
    pixels: impl Iterator<Item = [T; 3]>,
    max: f64,
) -> [Array2<f64>; 3] {
    let mut r = Array2::zeros((h, w));
    let mut g = Array2::zeros((h, w));
    let mut b = Array2::zeros((h, w));
    for (i, [pr, pg, pb]) in pixels.enumerate() {
        let (row, col) = (i / w, i % w);
        r[[row, col]] = pr.into() / max;
        g[[row, col]] = pg.into() / max;
        b[[row, col]] = pb.into() / max;
    }
    [r, g, b]
}

/// Full-range BT.601 RGB -> Y'CbCr, outputs clipped to [0,1].
pub fn rgb_to_ycbcr(
    r: &Array2<f64>,
    g: &Array2<f64>,
    b: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    assert_eq!(r.dim(), g.dim());
    assert_eq!(r.dim(), b.dim());
    let mut y = Array2::zeros(r.dim());
    let mut cb = Array2::zeros(r.dim());
    let mut cr = Array2::zeros(r.dim());
    for ((iy, ix), &rv) in r.indexed_iter() {
        let (gv, bv) = (g[[iy, ix]], b[[iy, ix]]);
        let m = &YCBCR_FWD;
        y[[iy, ix]] = clip01(m[0][0] * rv + m[0][1] * gv + m[0][2] * bv);
        cb[[iy, ix]] = clip01(0.5 + m[1][0] * rv + m[1][1] * gv + m[1][2] * bv);
        cr[[iy, ix]] = clip01(0.5 + m[2][0] * rv + m[2][1] * gv + m[2][2] * bv);
    }
    (y, cb, cr)
}

/// Exact algebraic inverse of [`rgb_to_ycbcr`] (output clipped to [0,1]).
pub fn ycbcr_to_rgb(
    y: &Array2<f64>,
    cb: &Array2<f64>,
    cr: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    assert_eq!(y.dim(), cb.dim());
    assert_eq!(y.dim(), cr.dim());
    let inv = invert3(&YCBCR_FWD);
    let mut r = Array2::zeros(y.dim());
    let mut g = Array2::zeros(y.dim());
    let mut b = Array2::zeros(y.dim());
    for ((iy, ix), &yv) in y.indexed_iter() {
        let cbv = cb[[iy, ix]] - 0.5;
        let crv = cr[[iy, ix]] - 0.5;
        r[[iy, ix]] = clip01(inv[0][0] * yv + inv[0][1] * cbv + inv[0][2] * crv);
        g[[iy, ix]] = clip01(inv[1][0] * yv + inv[1][1] * cbv + inv[1][2] * crv);
        b[[iy, ix]] = clip01(inv[2][0] * yv + inv[2][1] * cbv + inv[2][2] * crv);
    }
    (r, g, b)
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r: usize, s: usize| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (s1, s2) = ((s + 1) % 3, (s + 2) % 3);
        (m[r1][s1] * m[r2][s2] - m[r1][s2] * m[r2][s1]) / det
    };
    // Adjugate transpose.
    [
        [c(0, 0), c(1, 0), c(2, 0)],
        [c(0, 1), c(1, 1), c(2, 1)],
        [c(0, 2), c(1, 2), c(2, 2)],
    ]
}

/// Crop a 256x256 pair into the 6x6 grid of 120x120 training patches.
pub fn crop_augment(pair: &ImagePair) -> Result<PatchSet> {
    let (h, w) = (pair.height(), pair.width());
    if (h, w) != (256, 256) {
        return Err(Error::CropSize { h, w });
    }
    let mut patches = Vec::with_capacity(36);
    for (ri, &oy) in CROP_OFFSETS.iter().enumerate() {
        for (ci, &ox) in CROP_OFFSETS.iter().enumerate() {
            let crop = |a: &Array2<f64>| {
                a.slice(ndarray::s![oy..oy + PATCH_SIDE, ox..ox + PATCH_SIDE])
                    .to_owned()
            };
            let chroma = pair
                .functional_chroma
                .as_ref()
                .map(|(cb, cr)| (crop(cb), crop(cr)));
            patches.push(ImagePair::new(
                GrayImage::new(crop(pair.mri.pixels()))?,
                GrayImage::new(crop(pair.functional_y.pixels()))?,
                chroma,
                format!("{}_r{ri}c{ci}", pair.identifier),
            )?);
        }
    }
    Ok(PatchSet {
        patches,
        source_id: pair.identifier.clone(),
    })
}

/// Dataset manifest: one `<mri_path>\t<functional_path>` line per pair.
/// Paths are resolved relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(Error::Config(format!(
                "manifest line {}: expected two tab-separated paths",
                lineno + 1
            )));
        };
        let resolve = |p: &str| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        pairs.push((resolve(a), resolve(b)));
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} lists no pairs",
            path.display()
        )));
    }
    Ok(pairs)
}

/// Write a [0,1] gray image as an 8-bit PNG.
pub fn save_gray_png(img: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let buf: Vec<u8> = img.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Write three [0,1] planes as an 8-bit RGB PNG.
pub fn save_rgb_png(r: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = r.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for iy in 0..h {
        for ix in 0..w {
            buf.push(to_u8(r[[iy, ix]]));
            buf.push(to_u8(g[[iy, ix]]));
            buf.push(to_u8(b[[iy, ix]]));
        }
    }
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn plane(v: f64) -> Array2<f64> {
        Array2::from_elem((8, 8), v)
    }

    #[test]
    fn achromatic_points() {
        let (y, cb, cr) = rgb_to_ycbcr(&plane(1.0), &plane(1.0), &plane(1.0));
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((cb[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((cr[[0, 0]] - 0.5).abs() < 1e-12);
        let (y, cb, cr) = rgb_to_ycbcr(&plane(0.0), &plane(0.0), &plane(0.0));
        assert_eq!(y[[0, 0]], 0.0);
        assert!((cb[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((cr[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pure_red_forward_and_back() {
        let (y, cb, cr) = rgb_to_ycbcr(&plane(1.0), &plane(0.0), &plane(0.0));
        assert!((y[[0, 0]] - 0.299).abs() < 1e-12);
        assert!((cb[[0, 0]] - 0.331264).abs() < 1e-12);
        assert!((cr[[0, 0]] - 1.0).abs() < 1e-12);
        let (r, g, b) = ycbcr_to_rgb(&y, &cb, &cr);
        assert!((r[[0, 0]] - 1.0).abs() < 1e-9);
        assert!(g[[0, 0]].abs() < 1e-9);
        assert!(b[[0, 0]].abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn color_roundtrip(rv in 0.05f64..0.95, gv in 0.05f64..0.95, bv in 0.05f64..0.95) {
            let (y, cb, cr) = rgb_to_ycbcr(&plane(rv), &plane(gv), &plane(bv));
            let (r, g, b) = ycbcr_to_rgb(&y, &cb, &cr);
            prop_assert!((r[[0,0]] - rv).abs() < 1e-6);
            prop_assert!((g[[0,0]] - gv).abs() < 1e-6);
            prop_assert!((b[[0,0]] - bv).abs() < 1e-6);
        }
    }

    fn pair_256(with_chroma: bool) -> ImagePair {
        let ramp = Array2::from_shape_fn((256, 256), |(i, j)| {
            ((i * 7 + j * 13) % 256) as f64 / 255.0
        });
        let chroma = with_chroma.then(|| (plane_of(256, 0.25), plane_of(256, 0.75)));
        ImagePair::new(
            GrayImage::new(ramp.clone()).unwrap(),
            GrayImage::new(ramp.mapv(|v| 1.0 - v)).unwrap(),
            chroma,
            "t".to_string(),
        )
        .unwrap()
    }

    fn plane_of(n: usize, v: f64) -> Array2<f64> {
        Array2::from_elem((n, n), v)
    }

    #[test]
    fn crop_grid_shape_and_coverage() {
        let set = crop_augment(&pair_256(true)).unwrap();
        assert_eq!(set.patches.len(), 36);
        for p in &set.patches {
            assert_eq!((p.height(), p.width()), (120, 120));
            assert!(p.functional_chroma.is_some());
        }
        // First patch at (0,0), last flush to the edge at (136,136).
        assert_eq!(set.patches[0].identifier, "t_r0c0");
        assert_eq!(set.patches[35].identifier, "t_r5c5");
        let src = pair_256(true);
        assert_eq!(
            set.patches[35].mri.pixels()[[119, 119]],
            src.mri.pixels()[[255, 255]]
        );
        // The (row 0, col 5) patch spans columns 136..=255.
        assert_eq!(
            set.patches[5].mri.pixels()[[0, 0]],
            src.mri.pixels()[[0, 136]]
        );
        // Union of footprints covers the full frame.
        let mut hit = Array2::<u8>::zeros((256, 256));
        for &oy in CROP_OFFSETS.iter() {
            for &ox in CROP_OFFSETS.iter() {
                hit.slice_mut(ndarray::s![oy..oy + 120, ox..ox + 120])
                    .fill(1);
            }
        }
        assert!(hit.iter().all(|&v| v == 1));
    }

    #[test]
    fn crop_rejects_wrong_size() {
        let img = GrayImage::new(plane_of(128, 0.5)).unwrap();
        let pair = ImagePair::new(img.clone(), img, None, "x".into()).unwrap();
        assert!(matches!(
            crop_augment(&pair),
            Err(Error::CropSize { h: 128, w: 128 })
        ));
    }

    #[test]
    fn pair_dimension_mismatch() {
        let a = GrayImage::new(Array2::from_elem((16, 16), 0.1)).unwrap();
        let b = GrayImage::new(Array2::from_elem((16, 15), 0.1)).unwrap();
        assert!(matches!(
            ImagePair::new(a, b, None, "x".into()),
            Err(Error::PairDimension { .. })
        ));
    }

    #[test]
    fn load_pair_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("mri.png");
        let color = dir.path().join("spect.png");
        let ramp = Array2::from_shape_fn((64, 64), |(i, j)| ((i + j) % 256) as f64 / 255.0);
        save_gray_png(&ramp, &gray).unwrap();
        save_rgb_png(&ramp, &ramp.mapv(|v| 1.0 - v), &plane_of(64, 0.5), &color).unwrap();

        let pair = load_pair(&gray, &color).unwrap();
        assert_eq!((pair.height(), pair.width()), (64, 64));
        assert!(pair.functional_chroma.is_some());
        assert_eq!(pair.identifier, "mri");

        // Grayscale functional image carries no chroma.
        let pair2 = load_pair(&gray, &gray).unwrap();
        assert!(pair2.functional_chroma.is_none());

        // Determinism: identical files yield identical planes.
        let again = load_pair(&gray, &color).unwrap();
        assert_eq!(pair.mri.pixels(), again.mri.pixels());
        assert_eq!(pair.functional_y.pixels(), again.functional_y.pixels());

        // Mismatched dimensions are rejected.
        let small = dir.path().join("small.png");
        save_gray_png(&Array2::from_elem((32, 64), 0.2), &small).unwrap();
        assert!(matches!(
            load_pair(&gray, &small),
            Err(Error::PairDimension { .. })
        ));

        // Unreadable file.
        assert!(matches!(
            load_pair(&gray, &dir.path().join("missing.png")),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g16.png");
        let buf: Vec<u8> = (0..16u16 * 16)
            .flat_map(|i| ((i * 257) as u16).to_be_bytes())
            .collect();
        image::save_buffer(&path, &buf, 16, 16, image::ExtendedColorType::L16).unwrap();
        let pair = load_pair(&path, &path).unwrap();
        // Value 257*k / 65535 = k/255: the 16-bit ramp lands on 8-bit levels.
        assert!((pair.mri.pixels()[[0, 1]] - 1.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("pairs.tsv");
        std::fs::write(&m, "a.png\tb.png\n\nc.png\td.png\n").unwrap();
        let pairs = read_manifest(&m).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0, dir.path().join("a.png"));
        assert!(read_manifest(&dir.path().join("none.tsv")).is_err());
        let empty = dir.path().join("empty.tsv");
        std::fs::write(&empty, "\n").unwrap();
        assert!(read_manifest(&empty).is_err());
    }

    #[test]
    fn gray_image_invariants() {
        assert!(GrayImage::new(array![[0.5]]).is_err()); // too small
        let mut bad = Array2::from_elem((8, 8), 0.5);
        bad[[0, 0]] = 1.5;
        assert!(GrayImage::new(bad).is_err());
    }
}
