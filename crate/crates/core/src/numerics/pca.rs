//! Top principal direction of a stack of delta vectors.
//!
//! The direction is the leading right singular vector of the stacked matrix,
//! found by power iteration on the explicit `D x D` Gram matrix in `f64`.
//! Rows are reduced in a canonical (bit-pattern sorted) order, so the result
//! does not depend on the order in which examples were stacked.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Result, VtiError};

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;

/// Stacked per-example deltas, `rows` examples of dimension `cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    rows: usize,
    cols: usize,
    data: Tensor,
}

impl DeltaMatrix {
    pub fn new(data: Tensor) -> Result<Self> {
        let &[rows, cols] = data.shape() else {
            return Err(VtiError::dim(format!(
                "delta matrix must be rank 2, got {:?}",
                data.shape()
            )));
        };
        Ok(DeltaMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        DeltaMatrix::new(Tensor::from_rows(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data.data()[i * self.cols..(i + 1) * self.cols]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Column-wise mean in `f64`, accumulated in canonical row order.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0f64; self.cols];
        for i in self.canonical_order() {
            for (m, &v) in mean.iter_mut().zip(self.row(i)) {
                *m += f64::from(v);
            }
        }
        for m in &mut mean {
            *m /= self.rows as f64;
        }
        mean
    }

    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.rows).collect();
        order.sort_by(|&a, &b| {
            self.row(a)
                .iter()
                .zip(self.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        });
        order
    }
}

/// Whether to subtract the column mean before extracting the direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Keep the shared shift; this is the steering default.
    #[default]
    Uncentered,
    Centered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalDirection {
    /// Unit vector, oriented so its dot with the column mean is `>= 0`.
    pub vector: Vec<f64>,
    /// Leading eigenvalue of the Gram matrix (squared singular value).
    pub eigenvalue: f64,
    pub iterations: usize,
}

impl PrincipalDirection {
    pub fn to_f32(&self) -> Vec<f32> {
        self.vector.iter().map(|&v| v as f32).collect()
    }
}

/// Leading principal direction of `m`, uncentered by default.
pub fn principal_direction(m: &DeltaMatrix) -> Result<PrincipalDirection> {
    principal_direction_with(m, Centering::Uncentered)
}

pub fn principal_direction_with(m: &DeltaMatrix, centering: Centering) -> Result<PrincipalDirection> {
    if m.rows < 2 {
        return Err(VtiError::InsufficientSamples {
            needed: 2,
            got: m.rows,
        });
    }
    if m.cols == 0 {
        return Err(VtiError::dim("delta matrix has zero columns"));
    }
    if m.data.data().iter().all(|&v| v == 0.0) {
        return Err(VtiError::Degenerate("delta matrix is all zeros".into()));
    }

    let d = m.cols;
    let raw_mean = m.column_mean();
    let shift: Vec<f64> = match centering {
        Centering::Uncentered => vec![0.0; d],
        Centering::Centered => raw_mean.clone(),
    };

    let mut gram = vec![0.0f64; d * d];
    let mut row = vec![0.0f64; d];
    for i in m.canonical_order() {
        for ((r, &v), &s) in row.iter_mut().zip(m.row(i)).zip(&shift) {
            *r = f64::from(v) - s;
        }
        for a in 0..d {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            let g = &mut gram[a * d..(a + 1) * d];
            for (gb, &rb) in g.iter_mut().zip(&row) {
                *gb += ra * rb;
            }
        }
    }
    if gram.iter().all(|&g| g == 0.0) {
        return Err(VtiError::Degenerate(
            "delta matrix has no variance after centering".into(),
        ));
    }

    // Start from the (centered) column mean. If that is zero, use the first
    // canonical basis vector outside the Gram null space.
    let mut v: Vec<f64> = raw_mean.iter().zip(&shift).map(|(a, b)| a - b).collect();
    if !normalize(&mut v) {
        let first = (0..d).find(|&j| gram[j * d + j] > 0.0).unwrap_or(0);
        v = vec![0.0; d];
        v[first] = 1.0;
    }

    let mut next = vec![0.0f64; d];
    let mut last_change = f64::INFINITY;
    for iteration in 1..=POWER_MAX_ITERATIONS {
        for (a, n) in next.iter_mut().enumerate() {
            *n = gram[a * d..(a + 1) * d]
                .iter()
                .zip(&v)
                .map(|(g, x)| g * x)
                .sum();
        }
        if !normalize(&mut next) {
            return Err(VtiError::Degenerate(
                "power iteration collapsed onto the null space".into(),
            ));
        }
        last_change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        std::mem::swap(&mut v, &mut next);
        if last_change < POWER_TOLERANCE {
            let eigenvalue = rayleigh(&gram, &v);
            orient(&mut v, &raw_mean);
            return Ok(PrincipalDirection {
                vector: v,
                eigenvalue,
                iterations: iteration,
            });
        }
    }
    Err(VtiError::Convergence {
        iterations: POWER_MAX_ITERATIONS,
        last_change,
    })
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

fn rayleigh(gram: &[f64], v: &[f64]) -> f64 {
    let d = v.len();
    (0..d)
        .map(|a| v[a] * gram[a * d..(a + 1) * d].iter().zip(v).map(|(g, x)| g * x).sum::<f64>())
        .sum()
}

fn orient(v: &mut [f64], reference: &[f64]) {
    let dot: f64 = v.iter().zip(reference).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}
