//! Task-specific guidance signals fed to the adapters.
//!
//! Two components are produced per image: the high-frequency content of the
//! image (low frequencies removed in the Fourier domain) and the linear patch
//! embedding of the image. Both are expressed on the first stage's patch grid
//! and combined with per-component weights.

use ndarray::{Array2, Array3, Axis};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::nn::Linear;

pub const DEFAULT_MASK_RATIO: f64 = 0.25;

/// Image as `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::InvalidInput(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("image has zero extent".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { data })
    }

    pub fn from_gray(rows: Array2<f64>) -> Result<Self> {
        Self::new(rows.insert_axis(Axis(0)))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    Hfc,
    PatchEmbed,
    Custom,
}

/// One guidance signal on a patch grid, `[num_patches, guidance_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceComponent {
    pub kind: GuidanceKind,
    pub data: Matrix,
    pub weight_id: usize,
}

/// Combined guidance for one encoder stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTensor {
    pub data: Matrix,
    pub stage_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    pub w: Vec<f64>,
    pub trainable: bool,
}

impl GuidanceWeights {
    /// Unit weight for each of `n` components, frozen.
    pub fn ones(n: usize) -> Self {
        Self {
            w: vec![1.0; n],
            trainable: false,
        }
    }
}

/// Zeroes a centred low-frequency block of each channel's spectrum and
/// returns the real inverse transform.
///
/// Along an axis of length `n` the block spans signed frequencies
/// `|k| <= floor(s / 2)` with `s = ceil(mask_ratio * n)`; `s = 0` removes
/// nothing. The block is symmetric under `k -> -k`, so the filtered spectrum
/// stays Hermitian and the operator is an exact projection.
pub fn extract_hfc(image: &ImageTensor, mask_ratio: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::InvalidInput(format!(
            "mask ratio {mask_ratio} outside [0, 1]"
        )));
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image"));
    }
    let (c, h, w) = image.data.dim();
    let keep_rows = low_band(h, mask_ratio);
    let keep_cols = low_band(w, mask_ratio);

    let mut planner = FftPlanner::<f64>::new();
    let fwd_w = planner.plan_fft_forward(w);
    let fwd_h = planner.plan_fft_forward(h);
    let inv_w = planner.plan_fft_inverse(w);
    let inv_h = planner.plan_fft_inverse(h);

    let mut out = Array3::zeros((c, h, w));
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for ch in 0..c {
        for (i, v) in image.data.index_axis(Axis(0), ch).iter().enumerate() {
            buf[i] = Complex64::new(*v, 0.0);
        }
        fft_2d(&mut buf, &mut col, h, w, fwd_w.as_ref(), fwd_h.as_ref());
        for r in 0..h {
            if !keep_rows(r) {
                continue;
            }
            for k in 0..w {
                if keep_cols(k) {
                    buf[r * w + k] = Complex64::new(0.0, 0.0);
                }
            }
        }
        fft_2d(&mut buf, &mut col, h, w, inv_w.as_ref(), inv_h.as_ref());
        let norm = (h * w) as f64;
        let mut plane = out.index_axis_mut(Axis(0), ch);
        for (dst, z) in plane.iter_mut().zip(&buf) {
            *dst = z.re / norm;
        }
    }
    ImageTensor::new(out)
}

/// Predicate over unshifted frequency indices selecting the zeroed band.
fn low_band(n: usize, ratio: f64) -> impl Fn(usize) -> bool {
    let side = (ratio * n as f64).ceil() as usize;
    let radius = side / 2;
    move |k: usize| {
        if side == 0 {
            return false;
        }
        let signed = if k <= n / 2 { k } else { n - k };
        signed <= radius
    }
}

fn fft_2d(
    buf: &mut [Complex64],
    col: &mut [Complex64],
    h: usize,
    w: usize,
    along_rows: &dyn rustfft::Fft<f64>,
    along_cols: &dyn rustfft::Fft<f64>,
) {
    for row in buf.chunks_exact_mut(w) {
        along_rows.process(row);
    }
    for k in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + k];
        }
        along_cols.process(col);
        for r in 0..h {
            buf[r * w + k] = col[r];
        }
    }
}

/// Splits the image into non-overlapping `patch x patch` tiles, each
/// flattened channel-major then row-major, giving `[num_patches, c*p*p]`
/// with patches in row-major grid order.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Matrix> {
    let (c, h, w) = image.data.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, c * patch * patch));
    for gi in 0..gh {
        for gj in 0..gw {
            let mut row = out.row_mut(gi * gw + gj);
            let mut k = 0;
            for ch in 0..c {
                for pi in 0..patch {
                    for pj in 0..patch {
                        row[k] = image.data[[ch, gi * patch + pi, gj * patch + pj]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Linear projection of the image's patches.
pub fn compute_patch_embedding(
    image: &ImageTensor,
    patch_size: usize,
    projection: &Linear,
) -> Result<GuidanceComponent> {
    let patches = patchify(image, patch_size)?;
    if patches.ncols() != projection.input_dim() {
        return Err(Error::Shape(format!(
            "projection expects {} inputs, patches have {}",
            projection.input_dim(),
            patches.ncols()
        )));
    }
    Ok(GuidanceComponent {
        kind: GuidanceKind::PatchEmbed,
        data: projection.apply(&patches),
        weight_id: 0,
    })
}

/// Weighted elementwise sum of the components.
pub fn compose_guidance(
    components: &[GuidanceComponent],
    weights: &GuidanceWeights,
    stage_id: usize,
) -> Result<GuidanceTensor> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidInput("no guidance components".into()))?;
    if weights.w.len() != components.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} components",
            weights.w.len(),
            components.len()
        )));
    }
    let mut data = Array2::zeros(first.data.dim());
    for (comp, &w) in components.iter().zip(&weights.w) {
        if comp.data.dim() != first.data.dim() {
            return Err(Error::Shape(format!(
                "component shapes {:?} and {:?} differ",
                comp.data.dim(),
                first.data.dim()
            )));
        }
        data.scaled_add(w, &comp.data);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("guidance"));
    }
    Ok(GuidanceTensor { data, stage_id })
}

/// Rescales a (possibly signed) image to 8-bit grayscale, channel mean then
/// min-max. A constant image maps to mid-gray.
pub fn to_gray8(image: &ImageTensor) -> Vec<u8> {
    let gray = image.data.mean_axis(Axis(0)).expect("at least one channel");
    let lo = gray.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = gray.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = hi - lo;
    gray.iter()
        .map(|&v| {
            if span <= 1e-9 {
                128
            } else {
                (((v - lo) / span) * 255.0).round() as u8
            }
        })
        .collect()
}
