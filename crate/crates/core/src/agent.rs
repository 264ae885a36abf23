//! Recommender policy: expected utility, the sample-based surrogate for
//! posterior expected utility, query selection and slate recommendation.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::behavior::{AgentAction, Query, Slate};
use crate::belief::ModelContext;
use crate::corpus::{AttrId, ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::math::{derive_seed, dot, fast_std_normal_cdf, norm, rng_from_seed, softmax};

/// Estimates at or below this value are treated as zero.
pub const EVOI_TOLERANCE: f64 = 1e-9;

/// Catalogs up to this size enumerate every item pair for `k_q = 2`.
pub const PAIR_ENUMERATION_LIMIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    Exhaustive,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientConfig {
    pub steps: usize,
    /// Step length relative to the catalog's largest item norm.
    pub step_size: f64,
    pub restarts: usize,
    /// Central-difference step.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            step_size: 0.1,
            restarts: 10,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Recommendation slate size `k`.
    pub slate_size: usize,
    /// Item-query slate size `k_q`.
    pub query_size: usize,
    pub evoi_threshold: f64,
    pub max_turns: usize,
    pub mode: OptimizerMode,
    pub gradient: GradientConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            slate_size: 2,
            query_size: 2,
            evoi_threshold: 0.0,
            max_turns: 7,
            mode: OptimizerMode::Exhaustive,
            gradient: GradientConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slate_size < 1 {
            return Err(Error::Config("agent.slate_size must be at least 1".into()));
        }
        if self.query_size < 2 {
            return Err(Error::Config("agent.query_size must be at least 2".into()));
        }
        if self.max_turns < 1 {
            return Err(Error::Config("agent.max_turns must be at least 1".into()));
        }
        if !self.evoi_threshold.is_finite() {
            return Err(Error::Config("agent.evoi_threshold must be finite".into()));
        }
        let g = &self.gradient;
        if g.restarts < 1 {
            return Err(Error::Config("agent.gradient.restarts must be at least 1".into()));
        }
        if !(g.step_size > 0.0 && g.step_size.is_finite()) {
            return Err(Error::Config("agent.gradient.step_size must be positive".into()));
        }
        if !(g.fd_step > 0.0 && g.fd_step.is_finite()) {
            return Err(Error::Config("agent.gradient.fd_step must be positive".into()));
        }
        Ok(())
    }
}

fn check_samples(samples: &[Vec<f64>], catalog: &ItemCatalog) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Degenerate("belief has no samples".into()));
    }
    if samples.iter().any(|s| s.len() != catalog.dim()) {
        return Err(Error::Data(format!(
            "belief samples must have dimension {}",
            catalog.dim()
        )));
    }
    Ok(())
}

fn sample_mean(samples: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; samples[0].len()];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let n = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Highest expected utility of a single item under the sample belief and
/// the item attaining it (lowest catalog index on ties).
pub fn eu_star(samples: &[Vec<f64>], catalog: &ItemCatalog) -> Result<(f64, ItemId)> {
    check_samples(samples, catalog)?;
    let mean = sample_mean(samples);
    let mut best = (f64::NEG_INFINITY, catalog.items()[0].id);
    for item in catalog.items() {
        let v = dot(&item.embedding, &mean);
        if v > best.0 {
            best = (v, item.id);
        }
    }
    Ok(best)
}

/// Precomputed projections for scoring many queries against one sample set.
pub struct QueryScorer<'a> {
    ctx: ModelContext<'a>,
    samples: &'a [Vec<f64>],
    /// `max_norm / m`.
    scale: f64,
    /// `Σ_j φ_j`.
    total: Vec<f64>,
    /// `c_gᵀ φ*_j / σ_g`, row per attribute.
    target_proj: Vec<Vec<f64>>,
    /// `c_gᵀ φ_i / σ_g`, row per attribute.
    item_proj: Vec<Vec<f64>>,
    /// `φ_jᵀ φ_i / T`, row per sample.
    utils: Vec<Vec<f64>>,
    /// Samples as an `m × d` matrix.
    sample_matrix: DMatrix<f64>,
}

impl<'a> QueryScorer<'a> {
    pub fn new(samples: &'a [Vec<f64>], ctx: ModelContext<'a>) -> Result<Self> {
        let catalog = ctx.catalog;
        check_samples(samples, catalog)?;
        ctx.cavs.check_dim(catalog.dim())?;
        let max_norm = catalog.max_norm();
        let mut total = vec![0.0; catalog.dim()];
        for s in samples {
            for (t, v) in total.iter_mut().zip(s) {
                *t += v;
            }
        }
        let target_proj = ctx
            .cavs
            .as_slice()
            .iter()
            .map(|cav| {
                samples
                    .iter()
                    .map(|s| {
                        let n = norm(s);
                        if n > 0.0 {
                            max_norm * dot(&cav.direction, s) / (n * cav.sigma)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let item_proj = ctx
            .cavs
            .as_slice()
            .iter()
            .map(|cav| {
                catalog
                    .items()
                    .iter()
                    .map(|i| dot(&cav.direction, &i.embedding) / cav.sigma)
                    .collect()
            })
            .collect();
        let t = ctx.behavior.temperature;
        let utils = samples
            .iter()
            .map(|s| catalog.items().iter().map(|i| dot(&i.embedding, s) / t).collect())
            .collect();
        Ok(Self {
            ctx,
            samples,
            scale: max_norm / samples.len() as f64,
            total,
            target_proj,
            item_proj,
            utils,
            sample_matrix: DMatrix::from_fn(samples.len(), catalog.dim(), |j, k| samples[j][k]),
        })
    }

    pub fn catalog(&self) -> &'a ItemCatalog {
        self.ctx.catalog
    }

    /// `(max_norm / m) · ||Σ_j φ_j||`, the surrogate's value when no response
    /// carries information.
    pub fn baseline(&self) -> f64 {
        self.scale * norm(&self.total)
    }

    /// Attribute-query score for attribute row `g` and an anchor whose scaled
    /// projection on `c_g` is `anchor_proj`.
    fn attr_score_at(&self, g: usize, anchor_proj: f64) -> f64 {
        let mut more = vec![0.0; self.total.len()];
        for (s, tp) in self.samples.iter().zip(&self.target_proj[g]) {
            let p = fast_std_normal_cdf(tp - anchor_proj);
            for (a, v) in more.iter_mut().zip(s) {
                *a += p * v;
            }
        }
        let less: f64 = self
            .total
            .iter()
            .zip(&more)
            .map(|(t, a)| (t - a) * (t - a))
            .sum::<f64>()
            .sqrt();
        self.scale * (norm(&more) + less)
    }

    /// Scores of attribute `g` anchored at every catalog item, as one
    /// matrix product of response probabilities and samples.
    fn attr_scores(&self, g: usize) -> Vec<f64> {
        let tp = &self.target_proj[g];
        let ip = &self.item_proj[g];
        let probs = DMatrix::from_fn(ip.len(), tp.len(), |i, j| fast_std_normal_cdf(tp[j] - ip[i]));
        let more = probs * &self.sample_matrix;
        more.row_iter()
            .map(|row| {
                let (mut a, mut b) = (0.0, 0.0);
                for (m, t) in row.iter().zip(&self.total) {
                    a += m * m;
                    b += (t - m) * (t - m);
                }
                self.scale * (a.sqrt() + b.sqrt())
            })
            .collect()
    }

    fn attr_score_index(&self, item: usize, g: usize) -> f64 {
        self.attr_score_at(g, self.item_proj[g][item])
    }

    fn item_score_indices(&self, items: &[usize]) -> f64 {
        let d = self.total.len();
        let mut acc = vec![0.0; d * items.len()];
        let mut e = vec![0.0; items.len()];
        for (s, row) in self.samples.iter().zip(&self.utils) {
            let max = items.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ek, &i) in e.iter_mut().zip(items) {
                *ek = (row[i] - max).exp();
                z += *ek;
            }
            for (a, ek) in acc.chunks_mut(d).zip(&e) {
                let p = ek / z;
                for (ak, v) in a.iter_mut().zip(s) {
                    *ak += p * v;
                }
            }
        }
        self.scale * acc.chunks(d).map(norm).sum::<f64>()
    }

    /// Item-query score with free-form pseudo-embeddings in place of items.
    fn pseudo_item_score(&self, xs: &[Vec<f64>]) -> f64 {
        let t = self.ctx.behavior.temperature;
        let d = self.total.len();
        let mut acc = vec![vec![0.0; d]; xs.len()];
        let mut u = vec![0.0; xs.len()];
        for s in self.samples {
            for (uk, x) in u.iter_mut().zip(xs) {
                *uk = dot(x, s) / t;
            }
            let probs = softmax(&u, 1.0);
            for (a, p) in acc.iter_mut().zip(&probs) {
                for (ak, v) in a.iter_mut().zip(s) {
                    *ak += p * v;
                }
            }
        }
        self.scale * acc.iter().map(|a| norm(a)).sum::<f64>()
    }

    /// `F(q)` for any query over this scorer's catalog and attributes.
    pub fn score(&self, query: &Query) -> Result<f64> {
        match query {
            Query::Attr { item, attr } => {
                let i = self.index(*item)?;
                let g = self
                    .ctx
                    .cavs
                    .index_of(*attr)
                    .ok_or_else(|| Error::Data(format!("unknown attribute {attr}")))?;
                Ok(self.attr_score_index(i, g))
            }
            Query::Item(slate) => {
                let idx = slate
                    .items()
                    .iter()
                    .map(|id| self.index(*id))
                    .collect::<Result<Vec<_>>>()?;
                Ok(self.item_score_indices(&idx))
            }
        }
    }

    fn index(&self, id: ItemId) -> Result<usize> {
        self.ctx
            .catalog
            .index_of(id)
            .ok_or_else(|| Error::Data(format!("unknown item {id}")))
    }

    fn attr_query(&self, item: usize, g: usize) -> Query {
        Query::Attr {
            item: self.ctx.catalog.items()[item].id,
            attr: self.ctx.cavs.as_slice()[g].id,
        }
    }

    fn item_query(&self, items: &[usize]) -> Query {
        let ids = items.iter().map(|&i| self.ctx.catalog.items()[i].id).collect();
        Query::Item(Slate::new(ids).expect("distinct indices"))
    }
}

/// Surrogate for posterior expected utility:
/// `(max_norm / m) · Σ_ρ ||Σ_j φ_j P(ρ | q, φ_j)||`.
pub fn f_score(query: &Query, samples: &[Vec<f64>], ctx: ModelContext<'_>) -> Result<f64> {
    QueryScorer::new(samples, ctx)?.score(query)
}

/// Response probabilities of `query` for one embedding, in response order.
fn response_probs(query: &Query, phi: &[f64], ctx: ModelContext<'_>) -> Result<Vec<f64>> {
    match query {
        Query::Item(slate) => {
            crate::behavior::logit_choice_probs(slate, phi, ctx.catalog, ctx.behavior, false)
        }
        Query::Attr { item, attr } => {
            let cav = ctx.cavs.require(*attr)?;
            let p = crate::behavior::attr_more_prob(phi, &[*item], cav, ctx.catalog)?;
            Ok(vec![p, 1.0 - p])
        }
    }
}

/// Exact value of information of `query` for a discrete belief given as
/// `(weight, embedding)` atoms.
pub fn evoi_exact(query: &Query, atoms: &[(f64, Vec<f64>)], ctx: ModelContext<'_>) -> Result<f64> {
    if atoms.is_empty() {
        return Err(Error::Data("belief has no atoms".into()));
    }
    let total: f64 = atoms.iter().map(|a| a.0).sum();
    if (total - 1.0).abs() > 1e-9 || atoms.iter().any(|a| !(a.0 >= 0.0)) {
        return Err(Error::Data(format!("atom weights must sum to 1, got {total}")));
    }
    let catalog = ctx.catalog;
    let utils: Vec<Vec<f64>> = atoms
        .iter()
        .map(|(_, phi)| catalog.items().iter().map(|i| dot(&i.embedding, phi)).collect())
        .collect();
    let probs = atoms
        .iter()
        .map(|(_, phi)| response_probs(query, phi, ctx))
        .collect::<Result<Vec<_>>>()?;

    let best = |weights: &dyn Fn(usize) -> f64| -> f64 {
        (0..catalog.len())
            .map(|i| (0..atoms.len()).map(|a| weights(a) * utils[a][i]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let prior = best(&|a| atoms[a].0);
    let n_responses = probs[0].len();
    let peu: f64 = (0..n_responses)
        .map(|r| best(&|a| atoms[a].0 * probs[a][r]))
        .sum();
    Ok(peu - prior)
}

fn same_query(a: &Query, b: &Query) -> bool {
    match (a, b) {
        (Query::Item(x), Query::Item(y)) => {
            let xs: HashSet<_> = x.items().iter().collect();
            x.len() == y.len() && y.items().iter().all(|i| xs.contains(i))
        }
        _ => a == b,
    }
}

fn was_asked(q: &Query, asked: &[Query]) -> bool {
    asked.iter().any(|a| same_query(a, q))
}

struct Best {
    query: Option<Query>,
    value: f64,
}

impl Best {
    fn new() -> Self {
        Self {
            query: None,
            value: f64::NEG_INFINITY,
        }
    }

    /// Keeps the first query attaining the maximum; scores within a relative
    /// `1e-12` count as tied so rounding does not reorder equal queries.
    fn offer(&mut self, value: f64, query: impl FnOnce() -> Query) {
        if self.query.is_none() || value > self.value + 1e-12 * self.value.abs().max(1.0) {
            self.value = value;
            self.query = Some(query());
        }
    }

    fn merge(&mut self, other: Best) {
        if let Some(q) = other.query {
            self.offer(other.value, || q);
        }
    }
}

fn best_attr_query(scorer: &QueryScorer<'_>, asked: &[Query]) -> Best {
    let mut best = Best::new();
    let scores: Vec<Vec<f64>> = (0..scorer.ctx.cavs.len()).map(|g| scorer.attr_scores(g)).collect();
    for i in 0..scorer.catalog().len() {
        for (g, row) in scores.iter().enumerate() {
            let q = scorer.attr_query(i, g);
            if was_asked(&q, asked) {
                continue;
            }
            best.offer(row[i], || q);
        }
    }
    best
}

fn best_item_query(scorer: &QueryScorer<'_>, k_q: usize, asked: &[Query]) -> Best {
    let n = scorer.catalog().len();
    let mut best = Best::new();
    if k_q > n {
        return best;
    }
    if k_q == 2 && n <= PAIR_ENUMERATION_LIMIT {
        for a in 0..n {
            for b in a + 1..n {
                let q = scorer.item_query(&[a, b]);
                if was_asked(&q, asked) {
                    continue;
                }
                best.offer(scorer.item_score_indices(&[a, b]), || q);
            }
        }
        return best;
    }

    // Greedy growth from the item with the highest expected utility; a
    // single-item slate scores the same for every item and cannot seed it.
    let mean = sample_mean(scorer.samples);
    let seed = scorer
        .catalog()
        .items()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, item)| {
            let v = dot(&item.embedding, &mean);
            if v > acc.1 {
                (i, v)
            } else {
                acc
            }
        })
        .0;
    let mut slate = vec![seed];
    while slate.len() < k_q {
        let last = slate.len() + 1 == k_q;
        let mut pick: Option<(usize, f64)> = None;
        for c in 0..n {
            if slate.contains(&c) {
                continue;
            }
            slate.push(c);
            let skip = last && was_asked(&scorer.item_query(&slate), asked);
            let v = if skip { f64::NEG_INFINITY } else { scorer.item_score_indices(&slate) };
            slate.pop();
            if !skip && pick.is_none_or(|(_, bv)| v > bv) {
                pick = Some((c, v));
            }
        }
        match pick {
            Some((c, _)) => slate.push(c),
            None => return best,
        }
    }
    let v = scorer.item_score_indices(&slate);
    best.offer(v, || scorer.item_query(&slate));
    best
}

fn exhaustive(scorer: &QueryScorer<'_>, k_q: usize, asked: &[Query]) -> Best {
    let mut best = best_attr_query(scorer, asked);
    best.merge(best_item_query(scorer, k_q, asked));
    best
}

fn central_gradient(x: &mut [f64], h: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = f(x);
        x[k] = orig - h;
        let down = f(x);
        x[k] = orig;
        grad[k] = (up - down) / (2.0 * h);
    }
    grad
}

fn ascend(x: &mut [f64], cfg: &GradientConfig, step_len: f64, f: &dyn Fn(&[f64]) -> f64) {
    for _ in 0..cfg.steps {
        let g = central_gradient(x, cfg.fd_step, f);
        let gn = norm(&g);
        if !(gn > 1e-15) {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += step_len * gi / gn;
        }
    }
}

/// Catalog indices closest to `x` by dot product and by Euclidean distance,
/// skipping `taken`.
fn projections(catalog: &ItemCatalog, x: &[f64], taken: &[usize]) -> Vec<usize> {
    let mut by_dot: Option<(usize, f64)> = None;
    let mut by_dist: Option<(usize, f64)> = None;
    for (i, item) in catalog.items().iter().enumerate() {
        if taken.contains(&i) {
            continue;
        }
        let s = dot(&item.embedding, x);
        let d: f64 = item.embedding.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if by_dot.is_none_or(|(_, b)| s > b) {
            by_dot = Some((i, s));
        }
        if by_dist.is_none_or(|(_, b)| d < b) {
            by_dist = Some((i, d));
        }
    }
    let mut out: Vec<usize> = by_dot.into_iter().chain(by_dist).map(|p| p.0).collect();
    out.dedup();
    out
}

fn noisy_start(rng: &mut crate::math::SimRng, catalog: &ItemCatalog, taken: &[usize]) -> (usize, Vec<f64>) {
    let free: Vec<usize> = (0..catalog.len()).filter(|i| !taken.contains(i)).collect();
    let i = free[rng.random_range(0..free.len())];
    let jitter = 0.05 * catalog.max_norm() / (catalog.dim() as f64).sqrt();
    let x = catalog.items()[i]
        .embedding
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + jitter * z
        })
        .collect();
    (i, x)
}

fn gradient_search(scorer: &QueryScorer<'_>, config: &AgentConfig, asked: &[Query], stream: u64) -> Best {
    let catalog = scorer.catalog();
    let d = catalog.dim();
    let n_attrs = scorer.ctx.cavs.len();
    let cfg = &config.gradient;
    let step_len = cfg.step_size * catalog.max_norm();
    let mut best = Best::new();

    for r in 0..cfg.restarts {
        let mut rng = rng_from_seed(derive_seed(derive_seed(cfg.seed, stream), r as u64));

        if n_attrs > 0 {
            // Anchor pseudo-embedding followed by attribute logits.
            let (_, x0) = noisy_start(&mut rng, catalog, &[]);
            let mut z: Vec<f64> = x0;
            for _ in 0..n_attrs {
                let w: f64 = StandardNormal.sample(&mut rng);
                z.push(0.1 * w);
            }
            let objective = |z: &[f64]| -> f64 {
                let (x, w) = z.split_at(d);
                let weights = softmax(w, 1.0);
                scorer
                    .ctx
                    .cavs
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(g, cav)| weights[g] * scorer.attr_score_at(g, dot(&cav.direction, x) / cav.sigma))
                    .sum()
            };
            ascend(&mut z, cfg, step_len, &objective);
            let (x, w) = z.split_at(d);
            let g = crate::math::argmax(w).expect("attributes present");
            for i in projections(catalog, x, &[]) {
                let q = scorer.attr_query(i, g);
                if !was_asked(&q, asked) {
                    best.offer(scorer.attr_score_index(i, g), || q);
                }
            }
        }

        let k_q = config.query_size;
        if k_q <= catalog.len() {
            let mut taken = Vec::with_capacity(k_q);
            let mut z = Vec::with_capacity(k_q * d);
            for _ in 0..k_q {
                let (i, x) = noisy_start(&mut rng, catalog, &taken);
                taken.push(i);
                z.extend(x);
            }
            let objective = |z: &[f64]| -> f64 {
                let xs: Vec<Vec<f64>> = z.chunks(d).map(|c| c.to_vec()).collect();
                scorer.pseudo_item_score(&xs)
            };
            ascend(&mut z, cfg, step_len, &objective);
            // Project slot by slot, keeping the better of the two projections.
            let mut slate: Vec<usize> = Vec::with_capacity(k_q);
            for x in z.chunks(d) {
                let cands = projections(catalog, x, &slate);
                let mut pick = cands[0];
                if cands.len() > 1 {
                    let mut best_v = f64::NEG_INFINITY;
                    for c in cands {
                        slate.push(c);
                        let v = scorer.item_score_indices(&slate);
                        slate.pop();
                        if v > best_v {
                            best_v = v;
                            pick = c;
                        }
                    }
                }
                slate.push(pick);
            }
            let q = scorer.item_query(&slate);
            if !was_asked(&q, asked) {
                best.offer(scorer.item_score_indices(&slate), || q);
            }
        }
    }
    best
}

/// Picks the query with the highest surrogate score. Queries in `asked` are
/// never repeated; item queries match regardless of slate order. `stream`
/// decorrelates gradient restarts across turns.
pub fn select_query(
    samples: &[Vec<f64>],
    ctx: ModelContext<'_>,
    config: &AgentConfig,
    asked: &[Query],
    stream: u64,
) -> Result<(Query, f64)> {
    let scorer = QueryScorer::new(samples, ctx)?;
    select_with(&scorer, config, asked, stream)
}

fn select_with(scorer: &QueryScorer<'_>, config: &AgentConfig, asked: &[Query], stream: u64) -> Result<(Query, f64)> {
    if scorer.ctx.cavs.is_empty() && config.query_size > scorer.catalog().len() {
        return Err(Error::NoFeasibleQuery(
            "no attributes and the item-query slate exceeds the catalog".into(),
        ));
    }
    let mut best = match config.mode {
        OptimizerMode::Exhaustive => exhaustive(scorer, config.query_size, asked),
        OptimizerMode::Gradient => gradient_search(scorer, config, asked, stream),
    };
    if best.query.is_none() && config.mode == OptimizerMode::Gradient {
        best = exhaustive(scorer, config.query_size, asked);
    }
    match best.query {
        Some(q) => Ok((q, best.value)),
        None => Err(Error::NoFeasibleQuery("every candidate query was already asked".into())),
    }
}

/// Draws one embedding from the samples and returns the `k` highest-scoring
/// items in descending order, skipping `exclude`.
pub fn recommend<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    catalog: &ItemCatalog,
    k: usize,
    exclude: &[ItemId],
    rng: &mut R,
) -> Result<Slate> {
    check_samples(samples, catalog)?;
    let available = catalog.items().iter().filter(|i| !exclude.contains(&i.id)).count();
    if k == 0 || k > available {
        return Err(Error::Config(format!(
            "cannot recommend {k} items from {available} candidates"
        )));
    }
    let phi = &samples[rng.random_range(0..samples.len())];
    let mut scored: Vec<(f64, usize)> = catalog
        .items()
        .iter()
        .enumerate()
        .filter(|(_, i)| !exclude.contains(&i.id))
        .map(|(idx, i)| (dot(&i.embedding, phi), idx))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Slate::new(scored[..k].iter().map(|(_, i)| catalog.items()[*i].id).collect())
}

/// Numbers behind one [`step`] decision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub eu_star: f64,
    pub best_item: ItemId,
    /// Surrogate score of the best query, if one was scored.
    pub f_value: Option<f64>,
    /// Surrogate score with no informative response.
    pub f_baseline: f64,
    pub evoi_estimate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub action: AgentAction,
    pub diagnostics: StepDiagnostics,
}

/// Everything the agent may consult on one turn besides its configuration.
pub struct TurnState<'a> {
    pub samples: &'a [Vec<f64>],
    pub turn_index: usize,
    pub asked: &'a [Query],
    pub accepted: &'a [ItemId],
}

/// Asks the best query while its estimated value of information exceeds the
/// threshold, otherwise recommends. The estimate is `F(q) − F₀`, where `F₀`
/// is the surrogate's value for an uninformative query, so identical samples
/// estimate exactly zero. The final turn always recommends.
pub fn step<R: Rng + ?Sized>(
    state: &TurnState<'_>,
    ctx: ModelContext<'_>,
    config: &AgentConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    if state.turn_index >= config.max_turns {
        return Err(Error::Config(format!(
            "turn {} is past the limit of {} turns",
            state.turn_index, config.max_turns
        )));
    }
    let scorer = QueryScorer::new(state.samples, ctx)?;
    let (eu, best_item) = eu_star(state.samples, ctx.catalog)?;
    let mut diagnostics = StepDiagnostics {
        eu_star: eu,
        best_item,
        f_value: None,
        f_baseline: scorer.baseline(),
        evoi_estimate: None,
    };

    if state.turn_index + 1 < config.max_turns {
        match select_with(&scorer, config, state.asked, state.turn_index as u64) {
            Ok((query, f)) => {
                let estimate = f - diagnostics.f_baseline;
                diagnostics.f_value = Some(f);
                diagnostics.evoi_estimate = Some(estimate);
                if estimate > config.evoi_threshold && estimate > EVOI_TOLERANCE {
                    return Ok(StepOutcome {
                        action: AgentAction::Ask(query),
                        diagnostics,
                    });
                }
            }
            Err(Error::NoFeasibleQuery(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let slate = recommend(state.samples, ctx.catalog, config.slate_size, state.accepted, rng)?;
    Ok(StepOutcome {
        action: AgentAction::Recommend(slate),
        diagnostics,
    })
}

/// Every attribute query over the catalog, item-major.
pub fn all_attr_queries(catalog: &ItemCatalog, attrs: &[AttrId]) -> Vec<Query> {
    catalog
        .items()
        .iter()
        .flat_map(|i| attrs.iter().map(move |a| Query::Attr { item: i.id, attr: *a }))
        .collect()
}
