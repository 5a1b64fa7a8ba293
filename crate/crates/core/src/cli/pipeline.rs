//! The end-to-end run: data, training, extraction, evaluation and sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{parse_range, RunConfig, Suite};
use crate::error::{Result, VtiError};
use crate::metrics::{
    attention_dependency, avg_generation_length, chair_scores, linear_probe, parse_answer, pope_scores,
    stability_report, EvalReport, StabilityBlock,
};
use crate::model::{checkpoint_hash, train, Generation, HookSet, ToyLvlm, TrainOutcome};
use crate::numerics::Tensor;
use crate::perturb::{Image, PerturbationSpec};
use crate::rng::{derive_seed, stream};
use crate::scenes::{
    build_dataset, caption_prompt, mentions_by_sentence, render_scene, training_examples, CaptionPair, Dataset,
    PopeMode, Scene, SceneObject, NUM_CELLS, NUM_COLORS, NUM_SHAPES,
};
use crate::steering::{MaskOptions, SteeringSet};

use rand::Rng;

/// The four evaluated rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Vanilla,
    VisionOnly,
    TextOnly,
    Combined,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Vanilla,
        Condition::VisionOnly,
        Condition::TextOnly,
        Condition::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Vanilla => "vanilla",
            Condition::VisionOnly => "vision_only",
            Condition::TextOnly => "text_only",
            Condition::Combined => "combined",
        }
    }

    /// Strengths actually applied under this condition.
    pub fn strengths(self, alpha: f64, beta: f64) -> (f64, f64) {
        match self {
            Condition::Vanilla => (0.0, 0.0),
            Condition::VisionOnly => (alpha, 0.0),
            Condition::TextOnly => (0.0, beta),
            Condition::Combined => (alpha, beta),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Captions generated for a list of scenes under one hook set.
#[derive(Debug, Clone)]
pub struct CaptionRun {
    pub generations: Vec<Generation>,
}

impl CaptionRun {
    pub fn new(model: &ToyLvlm, scenes: &[Scene], hooks: &HookSet, max_new: usize) -> Result<Self> {
        let prompt = caption_prompt();
        let generations = scenes
            .iter()
            .map(|s| model.generate(&render_scene(s), &prompt, hooks, max_new))
            .collect::<Result<Vec<_>>>()?;
        Ok(CaptionRun { generations })
    }

    /// Shape-level mentions per sentence of each caption.
    pub fn mentions(&self) -> Vec<Vec<Vec<usize>>> {
        self.generations
            .iter()
            .map(|g| {
                mentions_by_sentence(&g.tokens)
                    .into_iter()
                    .map(|s| s.into_iter().map(|m| m.shape).collect())
                    .collect()
            })
            .collect()
    }

    pub fn tokens(&self) -> Vec<&[crate::vocab::Token]> {
        self.generations.iter().map(|g| g.tokens.as_slice()).collect()
    }
}

/// Caption metrics of one sweep point or condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub alpha: f64,
    pub beta: f64,
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub avg_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub vanilla: CaptionScores,
    pub points: Vec<CaptionScores>,
    /// Chosen `(alpha, beta)`.
    pub best: (f64, f64),
    /// Whether the chosen point met the recall and length limits.
    pub within_limits: bool,
}

pub fn caption_scores(run: &CaptionRun, scenes: &[Scene], alpha: f64, beta: f64) -> Result<CaptionScores> {
    let truth: Vec<BTreeSet<usize>> = scenes.iter().map(Scene::shapes).collect();
    let c = chair_scores(&run.mentions(), &truth)?;
    Ok(CaptionScores {
        alpha,
        beta,
        chair_s: c.chair_s,
        chair_i: c.chair_i,
        recall: c.recall,
        avg_len: avg_generation_length(&run.tokens()),
    })
}

/// Dataset plus config; the model and directions are passed in.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub data: Dataset,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = build_dataset(&config.dataset_spec())?;
        Ok(Pipeline { config, data })
    }

    pub fn train(&self) -> Result<TrainOutcome> {
        let examples = training_examples(&self.data);
        train(self.config.model, &examples, &self.config.train_options())
    }

    /// The first `extraction.examples` pairs of the pool.
    pub fn extraction_pairs(&self) -> &[CaptionPair] {
        &self.data.pool[..self.config.extraction.examples]
    }

    pub fn extract(&self, model: &ToyLvlm) -> Result<SteeringSet> {
        let x = &self.config.extraction;
        let opts = MaskOptions {
            masks: x.masks,
            mask_ratio: x.mask_ratio,
            patch_size: model.config().patch_size,
            seed: self.config.seeds().extraction,
        };
        let mut set = SteeringSet::extract(model, self.extraction_pairs(), &opts, checkpoint_hash(model)?)?;
        set.alpha = self.config.intervention.alpha;
        set.beta = self.config.intervention.beta;
        Ok(set)
    }

    /// Evaluates one condition on the held-out split.
    pub fn evaluate(
        &self,
        model: &ToyLvlm,
        dirs: &SteeringSet,
        condition: Condition,
        alpha: f64,
        beta: f64,
    ) -> Result<EvalReport> {
        let (a, b) = condition.strengths(alpha, beta);
        let hooks = dirs.hooks_at(&model.config(), a, b)?;
        let e = &self.config.eval;
        let scenes = &self.data.eval;
        let mut report = EvalReport {
            condition: condition.name().into(),
            alpha: a,
            beta: b,
            config: serde_json::to_value(self.config.portable())?,
            ..EvalReport::default()
        };
        if dirs.meta.checkpoint != checkpoint_hash(model)? {
            report
                .warnings
                .push("directions were extracted from a different checkpoint".into());
        }
        let suites: BTreeSet<Suite> = e.suites.iter().copied().collect();
        if suites.contains(&Suite::Chair) || suites.contains(&Suite::Attention) {
            let run = CaptionRun::new(model, scenes, &hooks, e.max_new_tokens)?;
            if suites.contains(&Suite::Chair) {
                let s = caption_scores(&run, scenes, a, b)?;
                report.chair_s = Some(s.chair_s);
                report.chair_i = Some(s.chair_i);
                report.recall = Some(s.recall);
                report.avg_len = Some(s.avg_len);
            }
            if suites.contains(&Suite::Attention) {
                let traces: Vec<_> = run.generations.iter().map(|g| &g.trace).collect();
                report.attention = Some(attention_dependency(&traces, model.config().vision_tokens())?);
            }
        }
        if suites.contains(&Suite::Pope) {
            for mode in PopeMode::ALL {
                report.pope.insert(mode.name().into(), self.pope(model, &hooks, mode)?);
            }
        }
        if suites.contains(&Suite::Stability) {
            report.stability = self.stability(model, &hooks)?;
        }
        if suites.contains(&Suite::Probe) {
            report.probe_accuracy = Some(self.probe(model, &hooks)?);
        }
        report.check()?;
        Ok(report)
    }

    /// The four condition rows at the configured strengths.
    pub fn evaluate_all(&self, model: &ToyLvlm, dirs: &SteeringSet) -> Result<Vec<EvalReport>> {
        let (a, b) = (self.config.intervention.alpha, self.config.intervention.beta);
        Condition::ALL
            .into_iter()
            .map(|c| self.evaluate(model, dirs, c, a, b))
            .collect()
    }

    pub fn pope(&self, model: &ToyLvlm, hooks: &HookSet, mode: PopeMode) -> Result<crate::metrics::PopeScores> {
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for scene in &self.data.eval {
            let (emb, _) = model.encode_image(&render_scene(scene), hooks)?;
            for q in self.data.pope(scene, mode, self.config.eval.pope_per_scene)? {
                let (tokens, _) = model.generate_from_embeddings(&emb, &q.prompt(), hooks, 1)?;
                preds.push(parse_answer(&tokens));
                golds.push(q.gold);
            }
        }
        pope_scores(&preds, &golds)
    }

    /// Images used by the stability suite: the first held-out scenes.
    pub fn stability_images(&self) -> Vec<Image> {
        self.data
            .eval
            .iter()
            .take(self.config.eval.stability_images)
            .map(render_scene)
            .collect()
    }

    pub fn stability_specs(&self) -> Vec<PerturbationSpec> {
        let seed = derive_seed(self.config.seeds().evaluation, 1);
        self.config
            .eval
            .stability_kinds
            .iter()
            .map(|&k| PerturbationSpec::default_for(k, derive_seed(seed, k as u64)))
            .collect()
    }

    pub fn stability(&self, model: &ToyLvlm, hooks: &HookSet) -> Result<StabilityBlock> {
        stability_report(
            model,
            &self.stability_images(),
            &self.stability_specs(),
            self.config.eval.stability_k,
            hooks,
        )
    }

    /// Single-object scenes labelled by shape.
    pub fn probe_scenes(&self) -> Vec<Scene> {
        let seed = derive_seed(self.config.seeds().evaluation, 2);
        (0..self.config.eval.probe_scenes as u64)
            .map(|i| {
                let mut r = stream(seed, i);
                let object = SceneObject {
                    shape: (i as usize) % NUM_SHAPES,
                    color: r.gen_range(0..NUM_COLORS),
                    cell: r.gen_range(0..NUM_CELLS),
                };
                Scene::new(derive_seed(seed, i), vec![object]).expect("one object is always valid")
            })
            .collect()
    }

    /// Probe accuracy on token-averaged final vision features.
    pub fn probe(&self, model: &ToyLvlm, hooks: &HookSet) -> Result<f64> {
        let scenes = self.probe_scenes();
        let rows = scenes
            .iter()
            .map(|s| {
                let (_, trace) = model.encode_image(&render_scene(s), hooks)?;
                Ok(mean_rows(&trace.features))
            })
            .collect::<Result<Vec<_>>>()?;
        self.probe_rows(&rows, &scenes)
    }

    /// Probe accuracy when each image is replaced by the mean projector
    /// output over `m` perturbed copies.
    pub fn averaged_probe(&self, model: &ToyLvlm, spec: &PerturbationSpec, m: usize) -> Result<f64> {
        let scenes = self.probe_scenes();
        let rows = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let spec = spec.reseeded(derive_seed(spec.seed, i as u64));
                let emb = crate::steering::averaged_features_baseline(model, &render_scene(s), &spec, m)?;
                Ok(mean_rows(&emb))
            })
            .collect::<Result<Vec<_>>>()?;
        self.probe_rows(&rows, &scenes)
    }

    /// Probe accuracy on token-averaged clean projector outputs, the
    /// reference for [`Pipeline::averaged_probe`].
    pub fn embedding_probe(&self, model: &ToyLvlm) -> Result<f64> {
        let scenes = self.probe_scenes();
        let rows = scenes
            .iter()
            .map(|s| Ok(mean_rows(&model.encode_image(&render_scene(s), &HookSet::new())?.0)))
            .collect::<Result<Vec<_>>>()?;
        self.probe_rows(&rows, &scenes)
    }

    fn probe_rows(&self, rows: &[Vec<f32>], scenes: &[Scene]) -> Result<f64> {
        let labels: Vec<usize> = scenes.iter().map(|s| s.objects()[0].shape).collect();
        let mut opts = self.config.eval.probe;
        opts.seed = derive_seed(self.config.seeds().evaluation, 3);
        Ok(linear_probe(&Tensor::from_rows(rows)?, &labels, &opts)?.accuracy)
    }

    /// Caption scores on `scenes` at one strength pair.
    pub fn caption_point(
        &self,
        model: &ToyLvlm,
        dirs: &SteeringSet,
        scenes: &[Scene],
        alpha: f64,
        beta: f64,
    ) -> Result<CaptionScores> {
        let hooks = dirs.hooks_at(&model.config(), alpha, beta)?;
        let run = CaptionRun::new(model, scenes, &hooks, self.config.eval.max_new_tokens)?;
        caption_scores(&run, scenes, alpha, beta)
    }

    /// Grid search on the validation split. The chosen point has the lowest
    /// `chair_i` (then `chair_s`, then the smallest `alpha + beta`) among
    /// points whose recall drop and length change stay within the limits; if
    /// none do, the lowest `chair_i` overall.
    pub fn sweep(&self, model: &ToyLvlm, dirs: &SteeringSet, alphas: &[f64], betas: &[f64]) -> Result<SweepOutcome> {
        if alphas.is_empty() || betas.is_empty() {
            return Err(VtiError::config("sweep", "empty grid"));
        }
        let val = &self.data.val;
        let vanilla = self.caption_point(model, dirs, val, 0.0, 0.0)?;
        let mut points = Vec::with_capacity(alphas.len() * betas.len());
        for &a in alphas {
            for &b in betas {
                let p = self.caption_point(model, dirs, val, a, b)?;
                log::info!(
                    "sweep alpha {a} beta {b}: chair_i {:.4} chair_s {:.4} recall {:.4} len {:.3}",
                    p.chair_i,
                    p.chair_s,
                    p.recall,
                    p.avg_len
                );
                points.push(p);
            }
        }
        let s = &self.config.sweep;
        let ok = |p: &CaptionScores| {
            vanilla.recall - p.recall <= s.max_recall_drop
                && (p.avg_len - vanilla.avg_len).abs() <= s.max_length_change * vanilla.avg_len
        };
        let key = |p: &CaptionScores| (p.chair_i, p.chair_s, p.alpha + p.beta, p.alpha);
        let pick = |candidates: Vec<&CaptionScores>| {
            candidates
                .into_iter()
                .min_by(|x, y| key(x).partial_cmp(&key(y)).expect("scores are finite"))
                .copied()
        };
        let within: Vec<&CaptionScores> = points.iter().filter(|p| ok(p)).collect();
        let (best, within_limits) = match pick(within) {
            Some(p) => (p, true),
            None => (pick(points.iter().collect()).expect("grid is nonempty"), false),
        };
        Ok(SweepOutcome {
            vanilla,
            best: (best.alpha, best.beta),
            points,
            within_limits,
        })
    }

    pub fn sweep_grid(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((parse_range(&self.config.sweep.alphas)?, parse_range(&self.config.sweep.betas)?))
    }
}

fn mean_rows(t: &Tensor) -> Vec<f32> {
    let d = *t.shape().last().expect("rank >= 1");
    let n = t.len() / d;
    let mut out = vec![0.0f64; d];
    for row in t.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += f64::from(v);
        }
    }
    out.iter().map(|&v| (v / n as f64) as f32).collect()
}

/// Stability blocks with and without the vision intervention, for the
/// `stability` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityComparison {
    pub alpha: f64,
    pub vanilla: StabilityBlock,
    pub intervened: StabilityBlock,
    /// Kinds whose mean variance went down.
    pub reduced: Vec<String>,
    pub probe: BTreeMap<String, f64>,
}
