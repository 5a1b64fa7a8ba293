use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VtiError};
use crate::metrics::ProbeOptions;
use crate::model::{ModelConfig, TrainOptions};
use crate::perturb::{PerturbationKind, DEFAULT_MASK_RATIO};
use crate::rng::derive_seed;
use crate::scenes::DatasetSpec;
use crate::steering::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_EXAMPLES, DEFAULT_MASKS};

/// Everything a run needs. Unknown keys are rejected; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub extraction: ExtractionConfig,
    pub intervention: InterventionConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub p_bias: f64,
    pub scene_cooccurrence: f64,
    pub pool_size: usize,
    pub eval_size: usize,
    pub val_size: usize,
    pub qa_per_scene: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Peak learning rate.
    pub lr: f32,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub final_lr_frac: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Caption pairs (and their images) used for extraction.
    pub examples: usize,
    /// Random masks per image.
    pub masks: usize,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Chair,
    Pope,
    Stability,
    Attention,
    Probe,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Chair, Suite::Pope, Suite::Stability, Suite::Attention, Suite::Probe];

    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Suite::ALL);
                continue;
            }
            let v: Suite = serde_json::from_value(serde_json::Value::String(part.into()))
                .map_err(|_| VtiError::config("eval.suites", format!("unknown suite `{part}`")))?;
            out.push(v);
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub suites: Vec<Suite>,
    pub max_new_tokens: usize,
    /// Questions per held-out scene and sampling mode.
    pub pope_per_scene: usize,
    /// Perturbed copies per image in the stability suite.
    pub stability_k: usize,
    pub stability_images: usize,
    pub stability_kinds: Vec<PerturbationKind>,
    /// Single-object scenes for the linear probe.
    pub probe_scenes: usize,
    pub probe: ProbeOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Inclusive `start:stop:step` ranges.
    pub alphas: String,
    pub betas: String,
    /// Largest allowed recall drop relative to vanilla on the validation split.
    pub max_recall_drop: f64,
    /// Largest allowed relative change in average caption length.
    pub max_length_change: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            training: TrainingConfig::default(),
            extraction: ExtractionConfig::default(),
            intervention: InterventionConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            output: PathBuf::from("vti-out"),
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DatasetConfig {
            n_scenes: d.n_scenes,
            p_bias: d.p_bias,
            scene_cooccurrence: d.scene_cooccurrence,
            pool_size: d.pool_size,
            eval_size: d.eval_size,
            val_size: d.val_size,
            qa_per_scene: d.qa_per_scene,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        TrainingConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            final_lr_frac: t.final_lr_frac,
        }
    }
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            examples: DEFAULT_EXAMPLES,
            masks: DEFAULT_MASKS,
            mask_ratio: DEFAULT_MASK_RATIO,
        }
    }
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            suites: Suite::ALL.to_vec(),
            max_new_tokens: 24,
            pope_per_scene: 6,
            stability_k: 50,
            stability_images: 8,
            stability_kinds: PerturbationKind::ALL.to_vec(),
            probe_scenes: 240,
            probe: ProbeOptions::default(),
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: "0:0.1:0.0125".into(),
            betas: "0:0.4:0.05".into(),
            max_recall_drop: 0.05,
            max_length_change: 0.15,
        }
    }
}

/// Seeds for each stage, derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub dataset: u64,
    pub training: u64,
    pub extraction: u64,
    pub evaluation: u64,
}

impl RunConfig {
    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            dataset: derive_seed(self.seed, 0),
            training: derive_seed(self.seed, 1),
            extraction: derive_seed(self.seed, 2),
            evaluation: derive_seed(self.seed, 3),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            n_scenes: d.n_scenes,
            seed: self.seeds().dataset,
            pool_size: d.pool_size,
            eval_size: d.eval_size,
            val_size: d.val_size,
            qa_per_scene: d.qa_per_scene,
            p_bias: d.p_bias,
            scene_cooccurrence: d.scene_cooccurrence,
            ..DatasetSpec::default()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.training.epochs,
            lr: self.training.lr,
            batch_size: self.training.batch_size,
            warmup_steps: self.training.warmup_steps,
            final_lr_frac: self.training.final_lr_frac,
            seed: self.seeds().training,
            ..TrainOptions::default()
        }
    }

    /// Range checks; errors name the field and the bound.
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Err(VtiError::config(field, msg));
        self.model.validate()?;
        self.dataset_spec().validate()?;
        let i = &self.intervention;
        if !(i.alpha >= 0.0 && i.alpha.is_finite()) {
            return err("intervention.alpha", "must be finite and >= 0");
        }
        if !(i.beta >= 0.0 && i.beta.is_finite()) {
            return err("intervention.beta", "must be finite and >= 0");
        }
        let x = &self.extraction;
        if x.examples < 2 {
            return err("extraction.examples", "must be >= 2");
        }
        if x.examples > self.dataset.pool_size {
            return err("extraction.examples", "must be <= dataset.pool_size");
        }
        if x.masks < 1 {
            return err("extraction.masks", "must be >= 1");
        }
        if !(x.mask_ratio > 0.0 && x.mask_ratio <= 1.0) {
            return err("extraction.mask_ratio", "must be in (0, 1]");
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return err("training.batch_size", "must be >= 1");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return err("training.lr", "must be finite and > 0");
        }
        if !(0.0..=1.0).contains(&t.final_lr_frac) {
            return err("training.final_lr_frac", "must be in [0, 1]");
        }
        let e = &self.eval;
        if e.max_new_tokens == 0 {
            return err("eval.max_new_tokens", "must be >= 1");
        }
        if e.stability_k < 2 {
            return err("eval.stability_k", "must be >= 2");
        }
        if e.suites.contains(&Suite::Probe) && e.probe_scenes < 4 {
            return err("eval.probe_scenes", "must be >= 4");
        }
        parse_range(&self.sweep.alphas).map_err(|e| rename(e, "sweep.alphas"))?;
        parse_range(&self.sweep.betas).map_err(|e| rename(e, "sweep.betas"))?;
        Ok(())
    }

    /// Canonical JSON; equal configs give equal bytes.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hex SHA-256 of the canonical JSON with the output directory blanked,
    /// so the same run in two places hashes equally.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.portable().to_canonical_json()?.as_bytes())))
    }

    /// Copy with the output directory removed, for embedding in reports.
    pub fn portable(&self) -> RunConfig {
        RunConfig {
            output: PathBuf::new(),
            ..self.clone()
        }
    }
}

fn rename(e: VtiError, field: &str) -> VtiError {
    match e {
        VtiError::Config { message, .. } => VtiError::config(field, message),
        e => e,
    }
}

/// Reads a JSON config, fills defaults and validates.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let c = parse_config(&text)?;
    c.validate()?;
    Ok(c)
}

/// Parses config JSON without validating ranges.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    serde_json::from_str(text).map_err(|e| VtiError::config("config", e.to_string()))
}

pub fn save_config(path: impl AsRef<Path>, c: &RunConfig) -> Result<()> {
    std::fs::write(path, c.to_canonical_json()?)?;
    Ok(())
}

/// Inclusive `start:stop:step` grid. Points are `start + i * step`, rounded
/// to 10 decimals so `0.1:1.0:0.1` gives exactly ten values.
pub fn parse_range(s: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| VtiError::config("range", msg);
    let parts: Vec<&str> = s.split(':').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad(format!("`{p}` in `{s}` is not a number"))))
        .collect::<Result<Vec<_>>>()?;
    let (start, stop, step) = match nums[..] {
        [v] => (v, v, 1.0),
        [a, b, c] => (a, b, c),
        _ => return Err(bad(format!("`{s}` is not start:stop:step"))),
    };
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= 0.0 || stop < start || start < 0.0 {
        return Err(bad(format!("`{s}` needs 0 <= start <= stop and step > 0")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c = parse_config("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.extraction.mask_ratio, 0.99);
        assert_eq!((c.extraction.masks, c.extraction.examples), (50, 50));
        assert_eq!((c.intervention.alpha, c.intervention.beta), (0.9, 0.9));
        c.validate().unwrap();
    }

    #[test]
    fn negative_alpha_names_the_field() {
        let c = parse_config(r#"{"intervention":{"alpha":-1}}"#).unwrap();
        match c.validate() {
            Err(VtiError::Config { field, .. }) => assert_eq!(field, "intervention.alpha"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(r#"{"dataset":{"n_scene":3}}"#).unwrap_err();
        assert!(err.to_string().contains("n_scene"), "{err}");
    }

    #[test]
    fn save_then_load_is_canonical() {
        let mut c = RunConfig::default();
        c.intervention.alpha = 0.2;
        c.eval.suites = vec![Suite::Chair];
        let text = c.to_canonical_json().unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_canonical_json().unwrap(), text);
    }

    #[test]
    fn ranges() {
        let g = parse_range("0.1:1.0:0.1").unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[2], 0.3);
        assert_eq!(g[9], 1.0);
        assert_eq!(parse_range("0.5").unwrap(), vec![0.5]);
        assert_eq!(parse_range("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_range("1:0:0.1").is_err());
        assert!(parse_range("0:1:0").is_err());
        assert!(parse_range("a:b").is_err());
    }

    #[test]
    fn suite_lists() {
        assert_eq!(Suite::parse_list("pope,chair").unwrap(), vec![Suite::Chair, Suite::Pope]);
        assert_eq!(Suite::parse_list("all").unwrap().len(), 5);
        assert!(Suite::parse_list("nope").is_err());
    }
}
