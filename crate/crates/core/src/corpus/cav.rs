//! Attribute directions from L2-regularized logistic regression.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;

use super::{AttrId, Cav, ItemCatalog, ItemId, TagRow};
use crate::error::{Error, Result};
use crate::math::{dot, norm, rng_from_seed};

#[derive(Clone, Debug)]
pub struct CavConfig {
    pub reg: f64,
    pub iters: usize,
    pub sigma: f64,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            reg: 1e-3,
            iters: 2000,
            sigma: 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits a logistic regression separating `positives` from `negatives` in
/// item-embedding space and returns its unit-norm weight direction. The
/// fitted bias is discarded.
pub fn learn_cav(
    catalog: &ItemCatalog,
    positives: &[ItemId],
    negatives: &[ItemId],
    id: AttrId,
    name: &str,
    config: &CavConfig,
) -> Result<Cav> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data(format!(
            "attribute `{name}` needs nonempty positive and negative sets"
        )));
    }
    let pos: HashSet<ItemId> = positives.iter().copied().collect();
    if negatives.iter().any(|n| pos.contains(n)) {
        return Err(Error::Data(format!(
            "attribute `{name}`: positive and negative sets overlap"
        )));
    }
    if !(config.reg > 0.0 && config.reg.is_finite()) {
        return Err(Error::Config("cav regularization must be positive".into()));
    }

    // Labels in {+1, -1}; flipping every label flips the solution exactly.
    let mut xs: Vec<(&[f64], f64)> = Vec::with_capacity(positives.len() + negatives.len());
    for (ids, y) in [(positives, 1.0), (negatives, -1.0)] {
        for id in ids {
            xs.push((catalog.require(*id)?.embedding.as_slice(), y));
        }
    }
    let first = xs[0].0;
    if xs.iter().all(|(x, _)| x.iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-12)) {
        return Err(Error::Degenerate(format!(
            "attribute `{name}`: all training items share one embedding"
        )));
    }

    let dim = catalog.dim();
    let n = xs.len() as f64;
    let max_sq = xs.iter().map(|(x, _)| dot(x, x) + 1.0).fold(0.0, f64::max);
    let step = 1.0 / (0.25 * max_sq + config.reg);

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut grad_w = vec![0.0; dim];
    for _ in 0..config.iters {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (x, y) in &xs {
            let margin = y * (dot(&w, x) + b);
            let coef = -y * sigmoid(-margin) / n;
            for (g, xi) in grad_w.iter_mut().zip(x.iter()) {
                *g += coef * xi;
            }
            grad_b += coef;
        }
        for (wi, g) in w.iter_mut().zip(&grad_w) {
            *wi -= step * (g + config.reg * *wi);
        }
        b -= step * grad_b;
    }

    let wn = norm(&w);
    if !(wn > 1e-12) {
        return Err(Error::Degenerate(format!(
            "attribute `{name}`: logistic regression found no separating direction"
        )));
    }
    Cav::from_raw(id, name, &w, config.sigma)
}

/// Positive items are those tagged `attribute`; negatives are items never
/// tagged with it, shuffled under `seed` and truncated to the positive count.
pub fn cav_training_sets(
    tags: &[TagRow],
    catalog: &ItemCatalog,
    attribute: &str,
    seed: u64,
) -> (Vec<ItemId>, Vec<ItemId>) {
    let positives: BTreeSet<ItemId> = tags
        .iter()
        .filter(|t| t.tag == attribute && catalog.get(t.item).is_some())
        .map(|t| t.item)
        .collect();
    let mut negatives: Vec<ItemId> = catalog
        .items()
        .iter()
        .map(|i| i.id)
        .filter(|id| !positives.contains(id))
        .collect();
    let mut rng = rng_from_seed(seed);
    negatives.shuffle(&mut rng);
    negatives.truncate(positives.len());
    negatives.sort_unstable();
    (positives.into_iter().collect(), negatives)
}
