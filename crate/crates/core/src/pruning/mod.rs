//! Magnitude pruning: L1 upload compression and the selective-pruning mask
//! algebra applied by the server after blending.
//!
//! Masks are computed either per tensor (the default) or over the whole
//! flattened vector, and either per scalar (the default) or per neuron, where
//! a neuron is a row of a weight matrix scored by its L1 norm. Ties are
//! always broken by lower index.

mod sparse;

pub use sparse::{
    from_sparse, to_sparse, SparsePayload, HEADER_BYTES, SPARSE_MAGIC, SPARSE_VERSION,
};

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerInfo, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    #[default]
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Scalar,
    Neuron,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskOptions {
    #[serde(default)]
    pub scope: MaskScope,
    #[serde(default)]
    pub granularity: Granularity,
}

/// Boolean mask aligned to a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    bits: Vec<bool>,
    kept_count: usize,
    directory: Vec<LayerInfo>,
}

impl PruneMask {
    pub fn new(bits: Vec<bool>, directory: Vec<LayerInfo>) -> Result<Self> {
        let total: usize = directory.iter().map(LayerInfo::len).sum();
        if total != bits.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} bits for {} scalars",
                bits.len(),
                total
            )));
        }
        let kept_count = bits.iter().filter(|b| **b).count();
        Ok(Self {
            bits,
            kept_count,
            directory,
        })
    }

    /// Mask over an unstructured flat vector.
    pub fn flat(bits: Vec<bool>) -> Self {
        let n = bits.len();
        Self::new(
            bits,
            vec![LayerInfo {
                name: "flat".into(),
                shape: vec![n],
            }],
        )
        .expect("flat directory matches by construction")
    }

    pub fn empty_like(params: &ParamVector) -> Self {
        Self {
            bits: vec![false; params.total_len()],
            kept_count: 0,
            directory: params.directory(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn directory(&self) -> &[LayerInfo] {
        &self.directory
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    fn check_same(&self, other: &PruneMask) -> Result<()> {
        if self.directory != other.directory {
            return Err(Error::Misaligned("mask layouts differ".into()));
        }
        Ok(())
    }

    /// `self \ other`.
    pub fn difference(&self, other: &PruneMask) -> Result<PruneMask> {
        self.check_same(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a && !*b)
            .collect();
        PruneMask::new(bits, self.directory.clone())
    }

    pub fn intersection(&self, other: &PruneMask) -> Result<PruneMask> {
        self.check_same(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a && *b)
            .collect();
        PruneMask::new(bits, self.directory.clone())
    }

    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Zero `params` wherever the mask is set; other scalars are untouched.
    pub fn zero_out(&self, params: &ParamVector) -> Result<ParamVector> {
        if params.directory() != self.directory {
            return Err(Error::Misaligned("mask does not fit parameters".into()));
        }
        let mut out = params.clone();
        for (v, &b) in out.iter_mut().zip(&self.bits) {
            if b {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

/// Elementwise `|θ_i|`, flattened in layer order.
pub fn l1_magnitudes(params: &ParamVector) -> Vec<f64> {
    params.iter().map(|v| v.abs()).collect()
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("beta {beta} not in (0, 1]")))
    }
}

fn floor_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Number of units kept by a top-β mask over `n` units.
pub fn top_count(beta: f64, n: usize) -> usize {
    floor_count(beta, n).max(1).min(n)
}

/// Descending by score, ascending by index on ties.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Keep exactly `max(1, ⌊β·n⌋)` of the largest magnitudes.
pub fn top_fraction_mask(mags: &[f64], beta: f64) -> Result<PruneMask> {
    check_beta(beta)?;
    if mags.is_empty() {
        return Err(Error::EmptyInput("no magnitudes".into()));
    }
    let mut bits = vec![false; mags.len()];
    for &i in rank_desc(mags).iter().take(top_count(beta, mags.len())) {
        bits[i] = true;
    }
    Ok(PruneMask::flat(bits))
}

struct Unit {
    score: f64,
    span: Range<usize>,
}

/// Scored units grouped by mask scope.
fn unit_groups(params: &ParamVector, opts: MaskOptions) -> Vec<Vec<Unit>> {
    let mut groups: Vec<Vec<Unit>> = Vec::new();
    let mut offset = 0;
    for t in params.layers() {
        let mut units = Vec::new();
        let row = match opts.granularity {
            Granularity::Neuron if t.shape.len() >= 2 => t.shape[1..].iter().product(),
            _ => 1,
        };
        let row = row.max(1);
        for (r, chunk) in t.values.chunks(row).enumerate() {
            units.push(Unit {
                score: chunk.iter().map(|v| v.abs()).sum(),
                span: offset + r * row..offset + r * row + chunk.len(),
            });
        }
        offset += t.len();
        match opts.scope {
            MaskScope::PerLayer => groups.push(units),
            MaskScope::Global => {
                if groups.is_empty() {
                    groups.push(Vec::new());
                }
                groups[0].extend(units);
            }
        }
    }
    groups
}

/// Top-β mask over a parameter vector under the given scope and granularity.
pub fn top_mask(params: &ParamVector, beta: f64, opts: MaskOptions) -> Result<PruneMask> {
    check_beta(beta)?;
    let mut bits = vec![false; params.total_len()];
    for group in unit_groups(params, opts) {
        if group.is_empty() {
            continue;
        }
        let scores: Vec<f64> = group.iter().map(|u| u.score).collect();
        for &u in rank_desc(&scores).iter().take(top_count(beta, group.len())) {
            bits[group[u].span.clone()]
                .iter_mut()
                .for_each(|b| *b = true);
        }
    }
    PruneMask::new(bits, params.directory())
}

/// Result of selective pruning, with the intermediate masks.
#[derive(Debug, Clone)]
pub struct SelectivePruning {
    pub pruned: ParamVector,
    /// Scalars zeroed: `ul_mask \ l_mask`.
    pub sp_mask: PruneMask,
    pub ul_mask: PruneMask,
    pub l_mask: PruneMask,
}

/// Zero the parameters of `learning` that rank in the top β by magnitude in
/// `unlearning` but not in `learning`.
pub fn selective_prune(
    learning: &ParamVector,
    unlearning: &ParamVector,
    beta: f64,
    opts: MaskOptions,
) -> Result<SelectivePruning> {
    learning.check_aligned(unlearning)?;
    let ul_mask = top_mask(unlearning, beta, opts)?;
    let l_mask = top_mask(learning, beta, opts)?;
    let sp_mask = ul_mask.difference(&l_mask)?;
    let pruned = sp_mask.zero_out(learning)?;
    Ok(SelectivePruning {
        pruned,
        sp_mask,
        ul_mask,
        l_mask,
    })
}

/// Mask of the `⌊p·n⌋` smallest magnitudes (lower index first on ties).
pub fn l1_prune_mask(params: &ParamVector, fraction: f64, scope: MaskScope) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::OutOfRange(format!(
            "prune fraction {fraction} not in [0, 1)"
        )));
    }
    let mut bits = vec![false; params.total_len()];
    let opts = MaskOptions {
        scope,
        granularity: Granularity::Scalar,
    };
    for group in unit_groups(params, opts) {
        let scores: Vec<f64> = group.iter().map(|u| u.score).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| match scores[a].total_cmp(&scores[b]) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        });
        for &u in order.iter().take(floor_count(fraction, group.len())) {
            bits[group[u].span.start] = true;
        }
    }
    PruneMask::new(bits, params.directory())
}

/// Zero the `⌊p·n⌋` smallest-magnitude scalars; everything else unchanged.
pub fn l1_prune(params: &ParamVector, fraction: f64, scope: MaskScope) -> Result<ParamVector> {
    l1_prune_mask(params, fraction, scope)?.zero_out(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::*;

    fn flat(v: &[f64]) -> ParamVector {
        ParamVector::from_flat(v.to_vec())
    }

    #[test]
    fn magnitudes() {
        assert_eq!(l1_magnitudes(&flat(&[-3.0, 0.0, 2.0])), vec![3.0, 0.0, 2.0]);
        assert_eq!(l1_magnitudes(&flat(&[0.0; 4])), vec![0.0; 4]);
        let p = flat(&[1.5, -2.0, 0.25]);
        assert_eq!(l1_magnitudes(&p), l1_magnitudes(&p.map(|v| -v)));
    }

    #[test]
    fn top_fraction_examples() {
        let m = top_fraction_mask(&[5.0, 1.0, 3.0, 2.0], 0.5).unwrap();
        assert_eq!(m.indices(), vec![0, 2]);
        assert_eq!(
            top_fraction_mask(&[1.0, 2.0, 3.0], 1.0)
                .unwrap()
                .kept_count(),
            3
        );
        let ties = top_fraction_mask(&[7.0; 8], 0.25).unwrap();
        assert_eq!(ties.indices(), vec![0, 1]);
        // Never empty.
        assert_eq!(
            top_fraction_mask(&[1.0, 2.0, 3.0], 0.1).unwrap().indices(),
            vec![2]
        );
        assert!(top_fraction_mask(&[1.0], 0.0).is_err());
        assert!(top_fraction_mask(&[1.0], 1.5).is_err());
        assert!(top_fraction_mask(&[], 0.5).is_err());
    }

    #[test]
    fn selective_prune_examples() {
        let l = flat(&[10.0, 1.0, 1.0, 1.0]);
        let ul = flat(&[1.0, 10.0, 1.0, 1.0]);
        let out = selective_prune(&l, &ul, 0.25, MaskOptions::default()).unwrap();
        assert_eq!(out.ul_mask.indices(), vec![1]);
        assert_eq!(out.l_mask.indices(), vec![0]);
        assert_eq!(out.sp_mask.indices(), vec![1]);
        assert_eq!(out.pruned.to_flat(), vec![10.0, 0.0, 1.0, 1.0]);

        let same = selective_prune(&l, &l, 0.5, MaskOptions::default()).unwrap();
        assert_eq!(same.sp_mask.kept_count(), 0);
        assert!(same.pruned.bitwise_eq(&l));

        assert!(selective_prune(&l, &flat(&[1.0]), 0.5, MaskOptions::default()).is_err());
    }

    #[test]
    fn l1_prune_examples() {
        let p = flat(&[4.0, -1.0, 3.0, -2.0]);
        assert!(l1_prune(&p, 0.0, MaskScope::Global).unwrap().bitwise_eq(&p));
        assert_eq!(
            l1_prune(&p, 0.5, MaskScope::Global).unwrap().to_flat(),
            vec![4.0, 0.0, 3.0, 0.0]
        );
        assert!(l1_prune(&p, 1.0, MaskScope::Global).is_err());
        assert!(l1_prune(&p, -0.1, MaskScope::Global).is_err());
    }

    #[test]
    fn per_layer_scope_budgets_each_tensor() {
        let p = ParamVector::new(vec![
            Tensor::new("a", vec![4], vec![100.0, 90.0, 80.0, 70.0]).unwrap(),
            Tensor::new("b", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        ]);
        let per = top_mask(&p, 0.5, MaskOptions::default()).unwrap();
        assert_eq!(per.indices(), vec![0, 1, 6, 7]);
        let global = top_mask(
            &p,
            0.5,
            MaskOptions {
                scope: MaskScope::Global,
                ..MaskOptions::default()
            },
        )
        .unwrap();
        assert_eq!(global.indices(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn neuron_granularity_selects_whole_rows() {
        let p = ParamVector::new(vec![Tensor::new(
            "w",
            vec![3, 2],
            vec![1.0, 1.0, -5.0, 0.0, 0.5, 2.0],
        )
        .unwrap()]);
        let m = top_mask(
            &p,
            0.34,
            MaskOptions {
                granularity: Granularity::Neuron,
                ..MaskOptions::default()
            },
        )
        .unwrap();
        assert_eq!(m.indices(), vec![2, 3]);
    }

    proptest! {
        #[test]
        fn l1_prune_counts_and_shrinks(v in proptest::collection::vec(-10.0f64..10.0, 1..80), p in 0.0f64..0.99) {
            let theta = flat(&v);
            let out = l1_prune(&theta, p, MaskScope::Global).unwrap();
            let zeroed = l1_prune_mask(&theta, p, MaskScope::Global).unwrap().kept_count();
            prop_assert_eq!(zeroed, (p * v.len() as f64 + 1e-9).floor() as usize);
            for (a, b) in out.iter().zip(theta.iter()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }
}
