//! Image corruption operators: random patch masks, Gaussian noise, Gaussian
//! blur, brightness shifts and elastic warps.
//!
//! Every operator is a pure function of `(image, spec)`; the spec's seed
//! fully determines the realized corruption.

mod image;
mod io;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};
use crate::rng;

pub use image::{Image, CHANNELS};
pub use io::{decode_vtip, encode_vtip, read_vtip, write_vtip, VTIP_MAGIC, VTIP_VERSION};

pub const DEFAULT_NOISE_SIGMA: f32 = 0.1;
pub const DEFAULT_BLUR_SIGMA: f32 = 1.0;
pub const DEFAULT_BRIGHTNESS_DELTA: f32 = 0.2;
pub const DEFAULT_ELASTIC_ALPHA: f32 = 8.0;
pub const DEFAULT_ELASTIC_SIGMA: f32 = 4.0;
pub const DEFAULT_PATCH_SIZE: usize = 4;
/// Mask ratio used for visual direction extraction.
pub const DEFAULT_MASK_RATIO: f64 = 0.99;

/// A corruption and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    PatchMask { mask_ratio: f64, patch_size: usize },
    GaussianNoise { sigma: f32 },
    GaussianBlur { sigma: f32 },
    Brightness { delta: f32 },
    Elastic { alpha: f32, sigma: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    PatchMask,
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Elastic,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 5] = [
        PerturbationKind::PatchMask,
        PerturbationKind::GaussianNoise,
        PerturbationKind::GaussianBlur,
        PerturbationKind::Brightness,
        PerturbationKind::Elastic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::PatchMask => "patch_mask",
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::GaussianBlur => "gaussian_blur",
            PerturbationKind::Brightness => "brightness",
            PerturbationKind::Elastic => "elastic",
        }
    }

    /// Default parameters for this kind. The stability analysis masks a
    /// quarter of the patches, a mild corruption compared with the
    /// direction-extraction ratio.
    pub fn default_perturbation(self) -> Perturbation {
        match self {
            PerturbationKind::PatchMask => Perturbation::PatchMask {
                mask_ratio: 0.25,
                patch_size: DEFAULT_PATCH_SIZE,
            },
            PerturbationKind::GaussianNoise => Perturbation::GaussianNoise {
                sigma: DEFAULT_NOISE_SIGMA,
            },
            PerturbationKind::GaussianBlur => Perturbation::GaussianBlur {
                sigma: DEFAULT_BLUR_SIGMA,
            },
            PerturbationKind::Brightness => Perturbation::Brightness {
                delta: DEFAULT_BRIGHTNESS_DELTA,
            },
            PerturbationKind::Elastic => Perturbation::Elastic {
                alpha: DEFAULT_ELASTIC_ALPHA,
                sigma: DEFAULT_ELASTIC_SIGMA,
            },
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = VtiError;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| VtiError::Spec(format!("unknown perturbation kind `{s}`")))
    }
}

impl Perturbation {
    pub fn kind(&self) -> PerturbationKind {
        match self {
            Perturbation::PatchMask { .. } => PerturbationKind::PatchMask,
            Perturbation::GaussianNoise { .. } => PerturbationKind::GaussianNoise,
            Perturbation::GaussianBlur { .. } => PerturbationKind::GaussianBlur,
            Perturbation::Brightness { .. } => PerturbationKind::Brightness,
            Perturbation::Elastic { .. } => PerturbationKind::Elastic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VtiError::Spec(msg));
        match *self {
            Perturbation::PatchMask {
                mask_ratio,
                patch_size,
            } => {
                if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
                    return bad(format!("mask_ratio {mask_ratio} outside (0, 1]"));
                }
                if patch_size == 0 {
                    return bad("patch_size must be positive".into());
                }
            }
            Perturbation::GaussianNoise { sigma } | Perturbation::GaussianBlur { sigma } => {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return bad(format!("sigma {sigma} must be finite and >= 0"));
                }
            }
            Perturbation::Brightness { delta } => {
                if !(delta.is_finite() && (0.0..=1.0).contains(&delta)) {
                    return bad(format!("brightness delta {delta} outside [0, 1]"));
                }
            }
            Perturbation::Elastic { alpha, sigma } => {
                if !(alpha.is_finite() && alpha >= 0.0) {
                    return bad(format!("elastic alpha {alpha} must be finite and >= 0"));
                }
                if !(sigma.is_finite() && sigma > 0.0) {
                    return bad(format!("elastic sigma {sigma} must be finite and > 0"));
                }
            }
        }
        Ok(())
    }
}

/// A perturbation plus the seed that realizes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(perturbation: Perturbation, seed: u64) -> Self {
        PerturbationSpec { perturbation, seed }
    }

    pub fn default_for(kind: PerturbationKind, seed: u64) -> Self {
        PerturbationSpec::new(kind.default_perturbation(), seed)
    }

    /// Parse a kind name and attach default parameters.
    pub fn from_kind_name(name: &str, seed: u64) -> Result<Self> {
        Ok(PerturbationSpec::default_for(name.parse()?, seed))
    }

    /// Same perturbation with a different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        PerturbationSpec {
            perturbation: self.perturbation,
            seed,
        }
    }
}

/// Binary patch mask over the patch grid of an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    /// Row-major over the patch grid; `true` means the patch is zeroed.
    masked: Vec<bool>,
}

impl PatchMask {
    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn is_masked(&self, patch_row: usize, patch_col: usize) -> bool {
        self.masked[patch_row * self.grid_w + patch_col]
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Per-pixel keep factor (0 or 1), `[H, W]` row-major.
    pub fn pixel_keep(&self) -> Vec<f32> {
        let (h, w) = (self.grid_h * self.patch_size, self.grid_w * self.patch_size);
        let mut out = vec![1.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if self.is_masked(y / self.patch_size, x / self.patch_size) {
                    out[y * w + x] = 0.0;
                }
            }
        }
        out
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        if image.height() != self.grid_h * self.patch_size
            || image.width() != self.grid_w * self.patch_size
        {
            return Err(VtiError::dim(format!(
                "mask grid {}x{} (patch {}) does not match a {}x{} image",
                self.grid_h,
                self.grid_w,
                self.patch_size,
                image.height(),
                image.width()
            )));
        }
        let keep = self.pixel_keep();
        let mut data = image.data().to_vec();
        for (px, &k) in data.chunks_exact_mut(CHANNELS).zip(&keep) {
            for v in px {
                *v *= k;
            }
        }
        Image::new(image.height(), image.width(), data)
    }
}

/// Number of patches zeroed for a given ratio: `round(ratio * patches)`.
pub fn masked_patch_count(mask_ratio: f64, num_patches: usize) -> usize {
    ((mask_ratio * num_patches as f64).round() as usize).min(num_patches)
}

/// `count` independent random patch masks. Mask `i` draws its patches
/// uniformly without replacement from the stream `(seed, i)`.
pub fn make_mask_set(
    height: usize,
    width: usize,
    mask_ratio: f64,
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchMask>> {
    Perturbation::PatchMask {
        mask_ratio,
        patch_size,
    }
    .validate()?;
    if count == 0 {
        return Err(VtiError::Spec("mask count must be at least 1".into()));
    }
    if height % patch_size != 0 || width % patch_size != 0 {
        return Err(VtiError::dim(format!(
            "patch size {patch_size} does not divide a {height}x{width} image"
        )));
    }
    let (grid_h, grid_w) = (height / patch_size, width / patch_size);
    let num_patches = grid_h * grid_w;
    let k = masked_patch_count(mask_ratio, num_patches);
    Ok((0..count as u64)
        .map(|i| {
            let mut r = rng::stream(seed, i);
            let mut masked = vec![false; num_patches];
            for p in index::sample(&mut r, num_patches, k) {
                masked[p] = true;
            }
            PatchMask {
                grid_h,
                grid_w,
                patch_size,
                masked,
            }
        })
        .collect())
}

/// Apply one corruption. The result is always clamped to `[0, 1]`.
pub fn perturb(image: &Image, spec: &PerturbationSpec) -> Result<Image> {
    spec.perturbation.validate()?;
    let (h, w) = (image.height(), image.width());
    match spec.perturbation {
        Perturbation::PatchMask {
            mask_ratio,
            patch_size,
        } => {
            let mask = make_mask_set(h, w, mask_ratio, patch_size, 1, spec.seed)?
                .pop()
                .expect("one mask");
            mask.apply(image)
        }
        Perturbation::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0f32, sigma).map_err(|e| VtiError::Spec(e.to_string()))?;
            let mut r = rng::rng(spec.seed);
            let data = image
                .data()
                .iter()
                .map(|&v| v + normal.sample(&mut r))
                .collect();
            Image::new(h, w, data)
        }
        Perturbation::GaussianBlur { sigma } => {
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let data = blur_channels(image.data(), h, w, CHANNELS, sigma);
            Image::new(h, w, data)
        }
        Perturbation::Brightness { delta } => {
            let shift: f32 = if delta == 0.0 {
                0.0
            } else {
                rng::rng(spec.seed).gen_range(-delta..=delta)
            };
            Image::new(h, w, image.data().iter().map(|&v| v + shift).collect())
        }
        Perturbation::Elastic { alpha, sigma } => Ok(elastic(image, alpha, sigma, spec.seed)),
    }
}

/// Reflect an out-of-range index into `[0, n)` without repeating the edge
/// sample (`d c b | a b c d | c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps for radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    let sigma = f64::from(sigma);
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of an interleaved `[h, w, c]` buffer with reflect
/// padding.
pub(crate) fn blur_channels(data: &[f32], h: usize, w: usize, c: usize, sigma: f32) -> Vec<f32> {
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0f64; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - radius, w);
                    acc += t * f64::from(data[(y * w + sx) * c + ch]);
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - radius, h);
                    acc += t * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    out
}

/// Elastic warp: a uniform random displacement field in `[-1, 1]`,
/// Gaussian-smoothed with `sigma` and scaled by `alpha`, sampled with
/// bilinear interpolation and edge clamping.
fn elastic(image: &Image, alpha: f32, sigma: f32, seed: u64) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut r = rng::rng(seed);
    let field: Vec<f32> = (0..h * w * 2).map(|_| r.gen_range(-1.0f32..=1.0)).collect();
    let smooth = blur_channels(&field, h, w, 2, sigma);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    let clamp = |v: f32, n: usize| v.clamp(0.0, (n - 1) as f32);
    for y in 0..h {
        for x in 0..w {
            let dy = alpha * smooth[(y * w + x) * 2];
            let dx = alpha * smooth[(y * w + x) * 2 + 1];
            let sy = clamp(y as f32 + dy, h);
            let sx = clamp(x as f32 + dx, w);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
            for ch in 0..CHANNELS {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * CHANNELS + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * w + x) * CHANNELS + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Image::new(h, w, out).expect("bilinear samples of a valid image are finite")
}
