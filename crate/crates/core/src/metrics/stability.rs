use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};
use crate::model::{HookSet, ToyLvlm};
use crate::numerics::mean_and_variance;
use crate::perturb::{perturb, Image, PerturbationSpec};
use crate::rng::derive_seed;

pub const HISTOGRAM_BINS: usize = 64;
/// `log10(variance)` range covered by the histogram; values outside land in
/// the end bins.
pub const HISTOGRAM_LOG10_RANGE: (f64, f64) = (-10.0, 2.0);
/// A feature is in the tail when its variance exceeds this multiple of the median.
pub const TAIL_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceHistogram {
    pub log10_min: f64,
    pub log10_max: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindStability {
    pub mean_var: f64,
    pub median_var: f64,
    pub tail_frac: f64,
    pub features: u64,
    pub histogram: VarianceHistogram,
}

/// Per-kind summary keyed by kind name.
pub type StabilityBlock = BTreeMap<String, KindStability>;

/// Variance of each final-layer vision feature (after the closing layer
/// norm) across `k` perturbed copies of each image. Copy `j` of image `i`
/// uses `spec.reseeded(derive_seed(derive_seed(spec.seed, i), j))`.
pub fn stability_report(
    model: &ToyLvlm,
    images: &[Image],
    specs: &[PerturbationSpec],
    k: usize,
    hooks: &HookSet,
) -> Result<StabilityBlock> {
    if k < 2 {
        return Err(VtiError::InsufficientSamples { needed: 2, got: k });
    }
    let mut block = StabilityBlock::new();
    for spec in specs {
        spec.perturbation.validate()?;
        let mut vars = Vec::new();
        for (i, image) in images.iter().enumerate() {
            let base = derive_seed(spec.seed, i as u64);
            let mut samples = Vec::new();
            let mut d = 0;
            for j in 0..k {
                let noisy = perturb(image, &spec.reseeded(derive_seed(base, j as u64)))?;
                let (_, trace) = model.encode_image(&noisy, hooks)?;
                d = trace.features.len();
                samples.extend_from_slice(trace.features.data());
            }
            vars.extend(mean_and_variance(&samples, k, d).1);
        }
        block.insert(spec.perturbation.kind().name().to_string(), summarize(&vars));
    }
    Ok(block)
}

/// Mean, median, tail fraction and log-histogram of a variance list.
pub fn summarize(vars: &[f64]) -> KindStability {
    let n = vars.len();
    let mean_var = if n == 0 { 0.0 } else { vars.iter().sum::<f64>() / n as f64 };
    let mut sorted = vars.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median_var = match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let tail = vars.iter().filter(|&&v| v > TAIL_FACTOR * median_var).count();
    KindStability {
        mean_var,
        median_var,
        tail_frac: if n == 0 { 0.0 } else { tail as f64 / n as f64 },
        features: n as u64,
        histogram: histogram(vars),
    }
}

fn histogram(vars: &[f64]) -> VarianceHistogram {
    let (lo, hi) = HISTOGRAM_LOG10_RANGE;
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &v in vars {
        // zero variance has no logarithm; it goes to the first bin
        let bin = if v > 0.0 {
            ((v.log10() - lo) / width).floor().clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
        } else {
            0
        };
        counts[bin] += 1;
    }
    VarianceHistogram {
        log10_min: lo,
        log10_max: hi,
        counts,
    }
}
