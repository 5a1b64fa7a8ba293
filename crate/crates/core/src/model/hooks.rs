//! Additive shifts applied to layer outputs.
//!
//! A hook adds `coefficient * direction` to some rows of one layer's output
//! after that output has been recorded. Hooks sharing a site, a position set
//! and a direction are merged first by summing their coefficients, so that
//! `{a d, b d}` is bit-identical to `{(a + b) d}` and a zero total is a no-op.

use std::cmp::Ordering;

use crate::error::{Result, VtiError};
use crate::numerics::Tensor;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookSite {
    /// Output of vision encoder layer `l`.
    Vision(usize),
    /// Output of text decoder layer `l`.
    Decoder(usize),
}

/// Rows a hook touches. Indices are absolute positions: vision tokens for
/// encoder sites, the full `[vision ‖ text]` sequence for decoder sites.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Positions {
    All,
    Indices(Vec<usize>),
    /// The last row of each decoder feed (the token being predicted from).
    Newest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hook {
    pub site: HookSite,
    pub positions: Positions,
    pub coefficient: f32,
    /// `[D]`, broadcast over rows, or `[rows, D]` indexed by absolute position.
    pub direction: Tensor,
}

impl Hook {
    pub fn new(site: HookSite, positions: Positions, coefficient: f32, direction: Tensor) -> Self {
        Hook {
            site,
            positions,
            coefficient,
            direction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookSet {
    hooks: Vec<Hook>,
}

/// Hooks merged for one site.
#[derive(Debug, Clone)]
pub(crate) struct SiteHooks<'a> {
    groups: Vec<(&'a Positions, &'a Tensor, f32)>,
}

impl HookSet {
    pub fn new() -> Self {
        HookSet::default()
    }

    pub fn push(&mut self, hook: Hook) {
        self.hooks.push(hook);
    }

    pub fn with(mut self, hook: Hook) -> Self {
        self.push(hook);
        self
    }

    pub fn extend(&mut self, other: HookSet) {
        self.hooks.extend(other.hooks);
    }

    pub fn hooks(&self) -> &[Hook] {
        &self.hooks
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    /// Checks every hook against the model shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for h in &self.hooks {
            let (layers, width, rows, what) = match h.site {
                HookSite::Vision(_) => (config.enc_layers, config.enc_width, config.vision_tokens(), "vision"),
                HookSite::Decoder(_) => (config.dec_layers, config.dec_width, config.max_seq, "decoder"),
            };
            let l = match h.site {
                HookSite::Vision(l) | HookSite::Decoder(l) => l,
            };
            if l >= layers {
                return Err(VtiError::Hook(format!("{what} layer {l} out of range (have {layers})")));
            }
            if !h.coefficient.is_finite() {
                return Err(VtiError::Hook("coefficient is not finite".into()));
            }
            match *h.direction.shape() {
                [d] if d == width => {}
                [r, d] if d == width && r == rows => {}
                ref s => {
                    return Err(VtiError::Hook(format!(
                        "{what} direction shape {s:?} does not fit width {width}"
                    )))
                }
            }
            if let Positions::Indices(ix) = &h.positions {
                if let Some(&bad) = ix.iter().find(|&&i| i >= rows) {
                    return Err(VtiError::Hook(format!("{what} position {bad} out of range ({rows})")));
                }
            }
            if matches!(h.site, HookSite::Vision(_)) && h.positions == Positions::Newest {
                return Err(VtiError::Hook("`Newest` only applies to decoder sites".into()));
            }
        }
        Ok(())
    }

    /// Merged hooks for `site`, in a canonical order independent of insertion.
    pub(crate) fn at(&self, site: HookSite) -> SiteHooks<'_> {
        let mut groups: Vec<(&Positions, &Tensor, f64)> = Vec::new();
        for h in self.hooks.iter().filter(|h| h.site == site) {
            match groups
                .iter_mut()
                .find(|(p, d, _)| **p == h.positions && bits_eq(d, &h.direction))
            {
                Some(g) => g.2 += f64::from(h.coefficient),
                None => groups.push((&h.positions, &h.direction, f64::from(h.coefficient))),
            }
        }
        groups.sort_by(|a, b| a.0.cmp(b.0).then_with(|| cmp_bits(a.1, b.1)));
        SiteHooks {
            groups: groups
                .into_iter()
                .map(|(p, d, c)| (p, d, c as f32))
                .filter(|g| g.2 != 0.0)
                .collect(),
        }
    }
}

impl FromIterator<Hook> for HookSet {
    fn from_iter<I: IntoIterator<Item = Hook>>(iter: I) -> Self {
        HookSet {
            hooks: iter.into_iter().collect(),
        }
    }
}

impl SiteHooks<'_> {
    #[cfg(test)]
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Shifts `x` (`n` rows of width `d` at absolute positions
    /// `first_pos..first_pos + n`). `newest` enables `Positions::Newest`.
    pub fn apply(&self, x: &mut [f32], d: usize, first_pos: usize, newest: bool) {
        let n = x.len() / d;
        for &(positions, dir, coef) in &self.groups {
            let rows: Vec<usize> = match positions {
                Positions::All => (0..n).collect(),
                Positions::Indices(ix) => ix
                    .iter()
                    .filter(|&&p| p >= first_pos && p < first_pos + n)
                    .map(|&p| p - first_pos)
                    .collect(),
                Positions::Newest if newest && n > 0 => vec![n - 1],
                Positions::Newest => Vec::new(),
            };
            for r in rows {
                let delta = if dir.rank() == 1 {
                    dir.data()
                } else {
                    dir.slice(&[first_pos + r])
                };
                for (v, &e) in x[r * d..(r + 1) * d].iter_mut().zip(delta) {
                    *v += coef * e;
                }
            }
        }
    }
}

fn bits_eq(a: &Tensor, b: &Tensor) -> bool {
    cmp_bits(a, b) == Ordering::Equal
}

fn cmp_bits(a: &Tensor, b: &Tensor) -> Ordering {
    a.shape().cmp(b.shape()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.to_bits().cmp(&y.to_bits()))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir() -> Tensor {
        Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()
    }

    #[test]
    fn opposite_coefficients_cancel_exactly() {
        let set = HookSet::new()
            .with(Hook::new(HookSite::Vision(0), Positions::All, 0.37, dir()))
            .with(Hook::new(HookSite::Vision(0), Positions::All, -0.37, dir()));
        assert!(set.at(HookSite::Vision(0)).is_empty());
    }

    #[test]
    fn split_coefficients_match_the_sum() {
        let mut a = vec![1.0f32, 2.0, 3.0, 4.0];
        let mut b = a.clone();
        HookSet::new()
            .with(Hook::new(HookSite::Decoder(1), Positions::All, 0.1, dir()))
            .with(Hook::new(HookSite::Decoder(1), Positions::All, 0.25, dir()))
            .at(HookSite::Decoder(1))
            .apply(&mut a, 2, 0, true);
        HookSet::new()
            .with(Hook::new(HookSite::Decoder(1), Positions::All, 0.1 + 0.25, dir()))
            .at(HookSite::Decoder(1))
            .apply(&mut b, 2, 0, true);
        assert_eq!(a, b);
    }

    #[test]
    fn newest_touches_only_the_last_row() {
        let mut x = vec![0.0f32; 6];
        HookSet::new()
            .with(Hook::new(HookSite::Decoder(0), Positions::Newest, 1.0, dir()))
            .at(HookSite::Decoder(0))
            .apply(&mut x, 2, 5, true);
        assert_eq!(x, vec![0.0, 0.0, 0.0, 0.0, 0.3, -0.7]);
    }

    #[test]
    fn validation_catches_bad_sites() {
        let c = ModelConfig::tiny();
        let bad = HookSet::new().with(Hook::new(HookSite::Vision(9), Positions::All, 1.0, Tensor::zeros(vec![8])));
        assert!(matches!(bad.validate(&c), Err(VtiError::Hook(_))));
        let bad = HookSet::new().with(Hook::new(HookSite::Vision(0), Positions::All, 1.0, Tensor::zeros(vec![3])));
        assert!(bad.validate(&c).is_err());
    }
}
