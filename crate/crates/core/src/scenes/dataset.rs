use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bias::CoPair;
use super::{
    caption, caption_prompt, hallucinated_caption, pope_questions, render_scene, BiasSpec,
    CaptionPair, PopeMode, PopeQuestion, Scene, SceneObject, NUM_COLORS, NUM_SHAPES,
};
use crate::error::{Result, VtiError};
use crate::model::{Segment, TrainExample};
use crate::perturb::write_vtip;
use crate::rng;
use crate::vocab::{self, Token, EOS};

const STREAM_CAPTION: u64 = 1;
const STREAM_QA: u64 = 2;
const STREAM_PAIR: u64 = 3;
const STREAM_POPE: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub seed: u64,
    /// Caption pairs used for direction extraction.
    pub pool_size: usize,
    pub eval_size: usize,
    /// Held out for choosing intervention strengths.
    pub val_size: usize,
    /// Yes/no questions added to each training scene.
    pub qa_per_scene: usize,
    pub p_bias: f64,
    pub scene_cooccurrence: f64,
    pub co_pairs: Vec<CoPair>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let b = BiasSpec::default();
        DatasetSpec {
            n_scenes: 2350,
            seed: 0,
            pool_size: 50,
            eval_size: 200,
            val_size: 100,
            qa_per_scene: 2,
            p_bias: b.p_bias,
            scene_cooccurrence: b.scene_cooccurrence,
            co_pairs: b.co_pairs,
        }
    }
}

impl DatasetSpec {
    pub fn bias(&self) -> BiasSpec {
        BiasSpec {
            co_pairs: self.co_pairs.clone(),
            p_bias: self.p_bias,
            scene_cooccurrence: self.scene_cooccurrence,
        }
    }

    pub fn train_size(&self) -> usize {
        self.n_scenes
            .saturating_sub(self.pool_size + self.eval_size + self.val_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.bias().validate()?;
        let held = self.pool_size + self.eval_size + self.val_size;
        if self.n_scenes <= held {
            return Err(VtiError::config(
                "dataset.n_scenes",
                format!("{} leaves no training scenes after {held} held out", self.n_scenes),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Val,
    Pool,
}

/// Object frequencies over the training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCounts {
    counts: Vec<u32>,
}

impl ObjectCounts {
    pub fn from_scenes<'a>(scenes: impl Iterator<Item = &'a Scene>) -> Self {
        let mut counts = vec![0u32; NUM_SHAPES * NUM_COLORS];
        for s in scenes {
            for o in s.objects() {
                counts[o.shape * NUM_COLORS + o.color] += 1;
            }
        }
        ObjectCounts { counts }
    }

    pub fn count(&self, shape: usize, color: usize) -> u32 {
        self.counts[shape * NUM_COLORS + color]
    }

    /// `(color, shape)` by descending count, ties to the lower index.
    pub fn ranked(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.counts.len()).collect();
        idx.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| (i % NUM_COLORS, i / NUM_COLORS)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Scene>,
    /// Captions as trained on, bias included.
    pub train_captions: Vec<Vec<Token>>,
    pub train_questions: Vec<Vec<PopeQuestion>>,
    pub eval: Vec<Scene>,
    pub val: Vec<Scene>,
    pub pool: Vec<CaptionPair>,
    pub counts: ObjectCounts,
}

/// Deterministic in `spec`. Scene `i` has seed `derive_seed(spec.seed, i)`;
/// the first scenes form the pool, then eval, then val, the rest train.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let bias = spec.bias();
    let scenes: Vec<Scene> = (0..spec.n_scenes as u64)
        .map(|i| Scene::random(rng::derive_seed(spec.seed, i), &bias))
        .collect();
    let (pool_scenes, rest) = scenes.split_at(spec.pool_size);
    let (eval, rest) = rest.split_at(spec.eval_size);
    let (val, train) = rest.split_at(spec.val_size);
    let counts = ObjectCounts::from_scenes(train.iter());

    let pool = pool_scenes
        .iter()
        .map(|s| hallucinated_caption(s, &bias, rng::derive_seed(s.seed, STREAM_PAIR)))
        .collect::<Result<Vec<_>>>()?;
    let train_captions = train
        .iter()
        .map(|s| bias.training_caption(s, &mut rng::stream(s.seed, STREAM_CAPTION)))
        .collect();
    let train_questions = if spec.qa_per_scene == 0 {
        vec![Vec::new(); train.len()]
    } else {
        train
            .iter()
            .map(|s| {
                let seed = rng::derive_seed(s.seed, STREAM_QA);
                pope_questions(s, PopeMode::Random, &bias, spec.qa_per_scene, &counts, seed).map(|p| p.questions)
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: train.to_vec(),
        train_captions,
        train_questions,
        eval: eval.to_vec(),
        val: val.to_vec(),
        pool,
        counts,
    })
}

impl Dataset {
    /// Probes for one held-out scene, seeded by scene and mode.
    pub fn pope(&self, scene: &Scene, mode: PopeMode, k: usize) -> Result<Vec<PopeQuestion>> {
        let seed = rng::derive_seed(scene.seed, STREAM_POPE + mode as u64);
        Ok(pope_questions(scene, mode, &self.spec.bias(), k, &self.counts, seed)?.questions)
    }
}

/// Caption segment plus one segment per training question.
pub fn training_examples(data: &Dataset) -> Vec<TrainExample> {
    data.train
        .iter()
        .zip(&data.train_captions)
        .zip(&data.train_questions)
        .map(|((scene, cap), qs)| {
            let mut tokens = caption_prompt();
            let answer_start = tokens.len();
            tokens.extend_from_slice(cap);
            tokens.push(EOS);
            let mut segments = vec![Segment { tokens, answer_start }];
            for q in qs {
                let mut tokens = q.prompt();
                let answer_start = tokens.len();
                tokens.extend([q.answer(), EOS]);
                segments.push(Segment { tokens, answer_start });
            }
            TrainExample {
                image: render_scene(scene),
                segments,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPope {
    pub mode: PopeMode,
    pub question: String,
    pub gold: String,
}

/// One JSON line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub split: Split,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucinated_caption: Option<String>,
    #[serde(default)]
    pub pope: Vec<ManifestPope>,
    /// Relative path of the rendered VTIP image.
    pub image: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const POPE_K: usize = 6;

/// Writes `manifest.jsonl` and `images/<seed>.vtip` under `dir`.
pub fn write_manifest(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST_FILE))?);
    let mut entries: Vec<(&Scene, Split, Option<Vec<Token>>)> = Vec::new();
    for p in &data.pool {
        entries.push((&p.scene, Split::Pool, Some(p.hallucinated.clone())));
    }
    for s in &data.eval {
        entries.push((s, Split::Eval, None));
    }
    for s in &data.val {
        entries.push((s, Split::Val, None));
    }
    for (s, cap) in data.train.iter().zip(&data.train_captions) {
        let clean = caption(s);
        entries.push((s, Split::Train, (*cap != clean).then(|| cap.clone())));
    }
    let mut seen = BTreeSet::new();
    for (scene, split, hall) in entries {
        if !seen.insert(scene.seed) {
            return Err(VtiError::Size(format!("scene seed {} appears twice", scene.seed)));
        }
        let image = format!("images/{:016x}.vtip", scene.seed);
        write_vtip(dir.join(&image), &render_scene(scene))?;
        let mut pope = Vec::new();
        if split == Split::Eval {
            for mode in PopeMode::ALL {
                for q in data.pope(scene, mode, POPE_K)? {
                    pope.push(ManifestPope {
                        mode,
                        question: vocab::decode(&q.prompt()[1..]),
                        gold: vocab::word(q.answer()),
                    });
                }
            }
        }
        let rec = ManifestRecord {
            seed: scene.seed,
            objects: scene.objects().to_vec(),
            split,
            caption: vocab::decode(&caption(scene)),
            hallucinated_caption: hall.map(|h| vocab::decode(&h)),
            pope,
            image,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            n_scenes: 400,
            eval_size: 60,
            val_size: 40,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn splits_are_disjoint_by_seed() {
        let d = build_dataset(&small()).unwrap();
        let mut seen = BTreeSet::new();
        let all = d.pool.iter().map(|p| &p.scene).chain(&d.eval).chain(&d.val).chain(&d.train);
        for s in all {
            assert!(seen.insert(s.seed));
        }
        assert_eq!(seen.len(), 400);
        assert_eq!(d.pool.len(), 50);
        assert_eq!(d.train.len(), 250);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = build_dataset(&small()).unwrap();
        let b = build_dataset(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train_captions, b.train_captions);
        assert_eq!(a.pool, b.pool);
    }

    #[test]
    fn no_bias_means_clean_training_captions() {
        let spec = DatasetSpec { p_bias: 0.0, ..small() };
        let d = build_dataset(&spec).unwrap();
        for (s, c) in d.train.iter().zip(&d.train_captions) {
            assert_eq!(&caption(s), c);
        }
        let biased = build_dataset(&small()).unwrap();
        let corrupted = biased
            .train
            .iter()
            .zip(&biased.train_captions)
            .filter(|(s, c)| caption(s) != **c)
            .count();
        assert!(corrupted > 20, "{corrupted}");
    }

    #[test]
    fn too_few_scenes_is_an_error() {
        let spec = DatasetSpec { n_scenes: 300, ..DatasetSpec::default() };
        assert!(build_dataset(&spec).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_dataset(&small()).unwrap();
        write_manifest(dir.path(), &d).unwrap();
        let recs = read_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(recs.len(), 400);
        assert_eq!(recs[0].split, Split::Pool);
        assert!(recs[0].hallucinated_caption.is_some());
        let eval = recs.iter().find(|r| r.split == Split::Eval).unwrap();
        assert_eq!(eval.pope.len(), 18);
        let img = crate::perturb::read_vtip(dir.path().join(&eval.image)).unwrap();
        assert_eq!(img.height(), 32);
    }
}
