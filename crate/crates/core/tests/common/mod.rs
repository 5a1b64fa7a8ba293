//! Helpers shared by the integration tests: minimal readers for the binary
//! formats, a full-SVD reference for principal directions, and a cached
//! trained model.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vti::cli::{Pipeline, RunConfig};
use vti::model::{read_vtim, write_vtim, ToyLvlm};

/// Little-endian cursor that panics on malformed input.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> &'a [u8] {
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        out
    }

    pub fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }

    pub fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    pub fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[derive(Debug, PartialEq)]
pub struct RawImage {
    pub version: u32,
    pub dims: [u32; 3],
    pub values: Vec<f32>,
}

pub fn parse_vtip(bytes: &[u8]) -> RawImage {
    let mut c = Cursor::new(bytes);
    assert_eq!(c.take(4), b"VTIP");
    let version = c.u32();
    let dims = [c.u32(), c.u32(), c.u32()];
    let values = c.f32s(dims.iter().product::<u32>() as usize);
    assert!(c.done(), "trailing bytes");
    RawImage { version, dims, values }
}

#[derive(Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub config: Vec<u32>,
    pub tensors: Vec<(Vec<u32>, Vec<f32>)>,
}

pub fn parse_vtim(bytes: &[u8]) -> RawCheckpoint {
    let mut c = Cursor::new(bytes);
    assert_eq!(c.take(4), b"VTIM");
    let version = c.u32();
    let config = (0..11).map(|_| c.u32()).collect();
    let mut tensors = Vec::new();
    while !c.done() {
        let rank = c.u32() as usize;
        let dims: Vec<u32> = (0..rank).map(|_| c.u32()).collect();
        let n = dims.iter().product::<u32>() as usize;
        tensors.push((dims, c.f32s(n)));
    }
    RawCheckpoint {
        version,
        config,
        tensors,
    }
}

#[derive(Debug, PartialEq)]
pub struct RawBlock {
    pub tag: u8,
    pub dims: [u32; 3],
    pub values: Vec<f32>,
}

#[derive(Debug)]
pub struct RawDirections {
    pub version: u32,
    pub blocks: Vec<RawBlock>,
    pub meta: serde_json::Value,
}

pub fn parse_vtid(bytes: &[u8]) -> RawDirections {
    let mut c = Cursor::new(bytes);
    assert_eq!(c.take(4), b"VTID");
    let version = c.u32();
    let blocks = (0..2)
        .map(|_| {
            let tag = c.u8();
            let dims = [c.u32(), c.u32(), c.u32()];
            let values = c.f32s(dims.iter().product::<u32>() as usize);
            RawBlock { tag, dims, values }
        })
        .collect();
    let len = c.u32() as usize;
    let meta = serde_json::from_slice(c.take(len)).unwrap();
    assert!(c.done(), "trailing bytes");
    RawDirections { version, blocks, meta }
}

/// Leading right singular vector of the `rows x cols` matrix from a full
/// SVD, oriented so its dot with the column mean is non-negative.
pub fn svd_direction(data: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, &data.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let (best, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let mut v: Vec<f64> = vt.row(best).iter().copied().collect();
    let mean: Vec<f64> = (0..cols).map(|j| m.column(j).sum() / rows as f64).collect();
    if v.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `rows x cols` Gaussian matrix around a random shared offset.
pub fn random_deltas(seed: u64, rows: usize, cols: usize) -> Vec<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let offset: Vec<f32> = (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect();
    (0..rows * cols)
        .map(|i| offset[i % cols] + r.sample::<f32, _>(rand_distr::StandardNormal) * 0.5)
        .collect()
}

/// Output of a default-config training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub loss_curve: Vec<f64>,
    pub seconds: f64,
}

pub fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Trains with `config` or loads the model a previous run cached under
/// the target directory. The key covers everything training depends on.
pub fn trained_model(config: &RunConfig) -> (ToyLvlm, TrainRecord, bool) {
    let key = serde_json::to_string(&(
        env!("CARGO_PKG_VERSION"),
        config.seed,
        config.model,
        &config.dataset,
        config.training,
    ))
    .unwrap();
    let key = &hex::encode(Sha256::digest(key.as_bytes()))[..16];
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let model_path = dir.join(format!("model-{key}.vtim"));
    let record_path = dir.join(format!("train-{key}.json"));
    if model_path.exists() && record_path.exists() {
        let record = serde_json::from_str(&std::fs::read_to_string(&record_path).unwrap()).unwrap();
        return (read_vtim(&model_path).unwrap(), record, true);
    }
    let start = Instant::now();
    let out = Pipeline::new(config.clone()).unwrap().train().unwrap();
    let record = TrainRecord {
        loss_curve: out.loss_curve,
        seconds: start.elapsed().as_secs_f64(),
    };
    let tmp = dir.join(format!("model-{key}.vtim.partial"));
    write_vtim(&tmp, &out.model).unwrap();
    std::fs::rename(&tmp, &model_path).unwrap();
    std::fs::write(&record_path, serde_json::to_string(&record).unwrap()).unwrap();
    (out.model, record, false)
}
