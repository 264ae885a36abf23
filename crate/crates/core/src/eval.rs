//! Pairwise-preference evaluation of a language model conditioned on a
//! text profile and a dialogue prefix.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{GroundTruthUser, ItemCatalog, ItemId, UserId, UserPrior};
use crate::dialogue::{Dialogue, Speaker};
use crate::error::{Error, LmError, Result};
use crate::lm::{DecodingParams, LmClient, LmRequest, LmResponse};
use crate::math::{derive_seed, dot, hash_str, mix64, norm, quantile_sorted, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Prior samples drawn per user.
    pub samples: usize,
    /// Total profile size.
    pub size: usize,
    pub liked_quantile: f64,
    pub disliked_quantile: f64,
    pub uncertain_low: f64,
    pub uncertain_high: f64,
    /// Liked and disliked items need a spread at or below this quantile.
    pub low_spread_quantile: f64,
    /// Uncertain items need a spread at or above this quantile.
    pub high_spread_quantile: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            size: 10,
            liked_quantile: 0.8,
            disliked_quantile: 0.2,
            uncertain_low: 0.4,
            uncertain_high: 0.6,
            low_spread_quantile: 0.5,
            high_spread_quantile: 0.7,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Config("eval.profile.samples must be at least 2".into()));
        }
        if self.size < 3 {
            return Err(Error::Config("eval.profile.size must be at least 3".into()));
        }
        let qs = [
            self.liked_quantile,
            self.disliked_quantile,
            self.uncertain_low,
            self.uncertain_high,
            self.low_spread_quantile,
            self.high_spread_quantile,
        ];
        if qs.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::Config("eval.profile quantiles must lie in [0, 1]".into()));
        }
        if self.uncertain_low > self.uncertain_high {
            return Err(Error::Config("eval.profile.uncertain_low exceeds uncertain_high".into()));
        }
        Ok(())
    }
}

/// Number of items added to each bucket by nearest-rank filling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketFill {
    pub liked: usize,
    pub disliked: usize,
    pub uncertain: usize,
}

impl BucketFill {
    pub fn any(&self) -> bool {
        self.liked + self.disliked + self.uncertain > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextProfile {
    pub user_id: UserId,
    pub liked: Vec<ItemId>,
    pub disliked: Vec<ItemId>,
    pub uncertain: Vec<ItemId>,
    pub filled: BucketFill,
    pub text: String,
}

impl TextProfile {
    pub fn items(&self) -> impl Iterator<Item = &ItemId> {
        self.liked.iter().chain(&self.disliked).chain(&self.uncertain)
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.items().any(|i| *i == id)
    }
}

fn names(ids: &[ItemId], catalog: &ItemCatalog) -> Result<String> {
    Ok(ids
        .iter()
        .map(|id| Ok(catalog.require(*id)?.display_name()))
        .collect::<Result<Vec<_>>>()?
        .join(", "))
}

/// Question-and-answer rendering of the profile buckets. Empty buckets are
/// omitted.
pub fn render_profile(liked: &[ItemId], disliked: &[ItemId], uncertain: &[ItemId], catalog: &ItemCatalog) -> Result<String> {
    let mut lines = Vec::new();
    if !liked.is_empty() {
        lines.push(format!("Q: Do you like movies {}? A: Definitely yes.", names(liked, catalog)?));
    }
    if !disliked.is_empty() {
        lines.push(format!("Q: Do you like movies {}? A: Definitely no.", names(disliked, catalog)?));
    }
    if !uncertain.is_empty() {
        lines.push(format!(
            "Q: Do you like movies {}? A: I am not sure as I have not watched them.",
            names(uncertain, catalog)?
        ));
    }
    Ok(lines.join("\n"))
}

/// Per-item mean and standard deviation of cosine similarity over prior
/// draws.
fn cosine_stats(prior: &UserPrior, catalog: &ItemCatalog, vocab: &[usize], draws: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = rng_from_seed(seed);
    let samples: Vec<Vec<f64>> = (0..draws)
        .map(|_| {
            prior
                .mean
                .iter()
                .zip(&prior.variance)
                .map(|(m, v)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + v.sqrt() * z
                })
                .collect()
        })
        .collect();
    let sample_norms: Vec<f64> = samples.iter().map(|s| norm(s)).collect();
    vocab
        .iter()
        .map(|&i| {
            let e = &catalog.items()[i].embedding;
            let en = norm(e);
            let sims: Vec<f64> = samples
                .iter()
                .zip(&sample_norms)
                .map(|(s, sn)| if *sn > 0.0 && en > 0.0 { dot(s, e) / (sn * en) } else { 0.0 })
                .collect();
            let n = sims.len() as f64;
            let mean = sims.iter().sum::<f64>() / n;
            let var = sims.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Builds liked, disliked and uncertain buckets from prior draws over the
/// profile vocabulary. Buckets hold `size / 3` items each, the remainder
/// going to uncertain; short buckets are topped up from the nearest-ranked
/// unused items and recorded in `filled`.
pub fn build_profile(
    prior: &UserPrior,
    catalog: &ItemCatalog,
    vocab: &[ItemId],
    config: &ProfileConfig,
    seed: u64,
) -> Result<TextProfile> {
    config.validate()?;
    if prior.dim() != catalog.dim() {
        return Err(Error::Data("prior and catalog dimensions differ".into()));
    }
    let idx = vocab
        .iter()
        .map(|id| catalog.index_of(*id).ok_or_else(|| Error::Data(format!("unknown vocabulary item {id}"))))
        .collect::<Result<Vec<_>>>()?;
    if idx.iter().collect::<HashSet<_>>().len() != idx.len() {
        return Err(Error::Data("profile vocabulary repeats an item".into()));
    }
    if idx.len() < config.size {
        return Err(Error::Data(format!(
            "profile vocabulary has {} items, fewer than the profile size {}",
            idx.len(),
            config.size
        )));
    }
    let stats = cosine_stats(prior, catalog, &idx, config.samples, seed);
    let means = sorted(stats.iter().map(|s| s.0));
    let spreads = sorted(stats.iter().map(|s| s.1));
    let hi_mean = quantile_sorted(&means, config.liked_quantile);
    let lo_mean = quantile_sorted(&means, config.disliked_quantile);
    let mid_lo = quantile_sorted(&means, config.uncertain_low);
    let mid_hi = quantile_sorted(&means, config.uncertain_high);
    let low_spread = quantile_sorted(&spreads, config.low_spread_quantile);
    let high_spread = quantile_sorted(&spreads, config.high_spread_quantile);

    let n_side = config.size / 3;
    let n_uncertain = config.size - 2 * n_side;
    let positions: Vec<usize> = (0..idx.len()).collect();
    let ranked = |key: &dyn Fn(usize) -> f64| -> Vec<usize> {
        let mut p = positions.clone();
        p.sort_by(|a, b| key(*b).total_cmp(&key(*a)).then(a.cmp(b)));
        p
    };
    let by_mean_desc = ranked(&|p| stats[p].0);
    let by_mean_asc = ranked(&|p| -stats[p].0);
    let by_spread_desc = ranked(&|p| stats[p].1);

    let mut used = HashSet::new();
    let take = |order: &[usize], want: usize, ok: &dyn Fn(usize) -> bool, used: &mut HashSet<usize>| {
        let mut out = Vec::with_capacity(want);
        for &p in order {
            if out.len() == want {
                break;
            }
            if ok(p) && used.insert(p) {
                out.push(p);
            }
        }
        out
    };
    let mut liked = take(&by_mean_desc, n_side, &|p| stats[p].0 >= hi_mean && stats[p].1 <= low_spread, &mut used);
    let mut disliked = take(&by_mean_asc, n_side, &|p| stats[p].0 <= lo_mean && stats[p].1 <= low_spread, &mut used);
    let mut uncertain = take(
        &by_spread_desc,
        n_uncertain,
        &|p| stats[p].0 > mid_lo && stats[p].0 < mid_hi && stats[p].1 >= high_spread && stats[p].1 > 1e-9,
        &mut used,
    );
    let filled = BucketFill {
        liked: n_side - liked.len(),
        disliked: n_side - disliked.len(),
        uncertain: n_uncertain - uncertain.len(),
    };
    liked.extend(take(&by_mean_desc, filled.liked, &|_| true, &mut used));
    disliked.extend(take(&by_mean_asc, filled.disliked, &|_| true, &mut used));
    uncertain.extend(take(&by_spread_desc, filled.uncertain, &|_| true, &mut used));

    let to_ids = |ps: Vec<usize>| -> Vec<ItemId> { ps.into_iter().map(|p| vocab[p]).collect() };
    let (liked, disliked, uncertain) = (to_ids(liked), to_ids(disliked), to_ids(uncertain));
    let text = render_profile(&liked, &disliked, &uncertain, catalog)?;
    Ok(TextProfile {
        user_id: prior.user_id,
        liked,
        disliked,
        uncertain,
        filled,
        text,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuartilePolicy {
    /// Fail when profile items cover a whole quartile.
    #[default]
    Strict,
    /// Recompute quartiles over the non-profile items instead.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTask {
    pub user_id: UserId,
    pub item_hi: ItemId,
    pub item_lo: ItemId,
    pub score_hi: f64,
    pub score_lo: f64,
}

/// Draws one item uniformly from the top quartile of true scores and one
/// from the bottom quartile. Quartiles hold `floor(n / 4)` items of the
/// candidate pool; profile items are never drawn.
pub fn sample_pair(
    user: &GroundTruthUser,
    catalog: &ItemCatalog,
    candidates: &[ItemId],
    profile: &TextProfile,
    policy: QuartilePolicy,
    seed: u64,
) -> Result<PairwiseTask> {
    let mut scored = candidates
        .iter()
        .map(|id| Ok((dot(&user.embedding, &catalog.require(*id)?.embedding), *id)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let quartiles = |pool: &[(f64, ItemId)]| {
        let q = pool.len() / 4;
        let lo: Vec<(f64, ItemId)> = pool[..q].iter().copied().filter(|(_, id)| !profile.contains(*id)).collect();
        let hi: Vec<(f64, ItemId)> = pool[pool.len() - q..]
            .iter()
            .copied()
            .filter(|(_, id)| !profile.contains(*id))
            .collect();
        (lo, hi)
    };
    let (mut lo, mut hi) = quartiles(&scored);
    if lo.is_empty() || hi.is_empty() {
        match policy {
            QuartilePolicy::Strict => {
                return Err(Error::Data(format!(
                    "user {}: a score quartile is empty after excluding profile items",
                    user.user_id
                )))
            }
            QuartilePolicy::Fallback => {
                let rest: Vec<(f64, ItemId)> = scored.iter().copied().filter(|(_, id)| !profile.contains(*id)).collect();
                (lo, hi) = quartiles(&rest);
                if lo.is_empty() || hi.is_empty() {
                    return Err(Error::Data(format!(
                        "user {}: too few non-profile items for quartiles",
                        user.user_id
                    )));
                }
            }
        }
    }
    let mut rng = rng_from_seed(seed);
    let h = *hi.choose(&mut rng).expect("nonempty");
    let l = *lo.choose(&mut rng).expect("nonempty");
    if !(h.0 > l.0) {
        return Err(Error::Degenerate(format!(
            "user {}: top and bottom quartile scores coincide",
            user.user_id
        )));
    }
    Ok(PairwiseTask {
        user_id: user.user_id,
        item_hi: h.1,
        item_lo: l.1,
        score_hi: h.0,
        score_lo: l.0,
    })
}

pub fn pairwise_question(first: &str, second: &str) -> String {
    format!("Q: Considering your preference demonstrated above do you like {first} more than {second}? Please just answer YES or NO. A:")
}

/// The dialogue lines belonging to the first `turns` agent turns.
pub fn dialogue_prefix(dialogue: &Dialogue, turns: usize) -> Vec<String> {
    let mut agent_turns = 0;
    let mut lines = Vec::new();
    for t in &dialogue.turns {
        if t.speaker == Speaker::Agent {
            agent_turns += 1;
        }
        if agent_turns > turns {
            break;
        }
        lines.push(format!("{}: {}", t.speaker.label(), t.text));
    }
    lines
}

pub fn eval_prompt(profile: &TextProfile, dialogue: &Dialogue, turns: usize, first: &str, second: &str) -> String {
    let mut parts = vec![profile.text.clone()];
    parts.extend(dialogue_prefix(dialogue, turns));
    parts.push(pairwise_question(first, second));
    parts.join("\n")
}

/// `Some(true)` for YES, `Some(false)` for NO.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let word: String = text
        .trim()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase();
    match word.as_str() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrder {
    #[default]
    Random,
    HiFirst,
    LoFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnEval {
    pub user_id: UserId,
    pub turn: usize,
    pub chose_hi: bool,
    /// No parseable answer was obtained.
    pub flagged: bool,
    pub hi_first: bool,
    pub raw: String,
}

/// Asks `lm` the pairwise question after `turns` dialogue turns. An
/// unparseable answer is retried up to `attempts` times and then counted as
/// choosing the lower item.
#[allow(clippy::too_many_arguments)]
pub fn eval_turn(
    lm: &dyn LmClient,
    profile: &TextProfile,
    dialogue: &Dialogue,
    turns: usize,
    task: &PairwiseTask,
    catalog: &ItemCatalog,
    order: PairOrder,
    attempts: usize,
    decoding: &DecodingParams,
    seed: u64,
) -> Result<TurnEval> {
    let hi_first = match order {
        PairOrder::HiFirst => true,
        PairOrder::LoFirst => false,
        PairOrder::Random => rng_from_seed(seed).random::<bool>(),
    };
    let hi = catalog.require(task.item_hi)?.display_name();
    let lo = catalog.require(task.item_lo)?.display_name();
    let (first, second) = if hi_first { (&hi, &lo) } else { (&lo, &hi) };
    let request = LmRequest::new(eval_prompt(profile, dialogue, turns, first, second), decoding);
    let mut raw = String::new();
    for _ in 0..attempts.max(1) {
        match lm.generate(&request) {
            Ok(resp) => {
                raw = resp.text;
                if let Some(yes) = parse_yes_no(&raw) {
                    return Ok(TurnEval {
                        user_id: task.user_id,
                        turn: turns,
                        chose_hi: yes == hi_first,
                        flagged: false,
                        hi_first,
                        raw,
                    });
                }
            }
            Err(e) if e.is_retryable() => raw = e.to_string(),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TurnEval {
        user_id: task.user_id,
        turn: turns,
        chose_hi: false,
        flagged: true,
        hi_first,
        raw,
    })
}

/// Extracts the two titles from a pairwise question.
fn question_titles(prompt: &str) -> Option<(&str, &str)> {
    let q = prompt.rsplit_once("do you like ")?.1;
    let body = q.split_once("? Please just answer YES or NO.")?.0;
    body.split_once(" more than ")
}

/// Answers pairwise questions from true scores, correctly with probability
/// `accuracy`. The draw is a hash of the prompt and seed, so answers do not
/// depend on call order.
#[derive(Clone, Debug)]
pub struct OracleLm {
    scores: Vec<(String, f64)>,
    accuracy: f64,
    seed: u64,
}

impl OracleLm {
    pub fn perfect(task: &PairwiseTask, catalog: &ItemCatalog) -> Result<Self> {
        Self::noisy(task, catalog, 1.0, 0)
    }

    pub fn noisy(task: &PairwiseTask, catalog: &ItemCatalog, accuracy: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Config("oracle accuracy must lie in [0, 1]".into()));
        }
        Ok(Self {
            scores: vec![
                (catalog.require(task.item_hi)?.display_name(), task.score_hi),
                (catalog.require(task.item_lo)?.display_name(), task.score_lo),
            ],
            accuracy,
            seed,
        })
    }

    fn score(&self, title: &str) -> Option<f64> {
        self.scores.iter().find(|(t, _)| t == title).map(|s| s.1)
    }
}

impl LmClient for OracleLm {
    fn generate(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let (a, b) = question_titles(&request.prompt)
            .ok_or_else(|| LmError::Malformed("prompt has no pairwise question".into()))?;
        let (sa, sb) = self
            .score(a)
            .zip(self.score(b))
            .ok_or_else(|| LmError::Malformed("question names unknown items".into()))?;
        let truthful = sa > sb;
        let u = (mix64(self.seed ^ hash_str(&request.prompt)) >> 11) as f64 / (1u64 << 53) as f64;
        let answer = if u < self.accuracy { truthful } else { !truthful };
        Ok(LmResponse::text(if answer { "YES" } else { "NO" }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Relevance {
    /// `rel_hi = 1 + g0`, `rel_lo = g0`.
    Graded {
        #[serde(default = "default_g0")]
        g0: f64,
    },
    /// `rel_hi = 1`, `rel_lo = 0`.
    Binary,
}

fn default_g0() -> f64 {
    0.5
}

impl Default for Relevance {
    fn default() -> Self {
        Relevance::Graded { g0: 0.5 }
    }
}

impl Relevance {
    pub fn name(&self) -> &'static str {
        match self {
            Relevance::Graded { .. } => "graded",
            Relevance::Binary => "binary",
        }
    }

    fn gains(&self) -> (f64, f64) {
        match *self {
            Relevance::Graded { g0 } => (1.0 + g0, g0),
            Relevance::Binary => (1.0, 0.0),
        }
    }

    /// NDCG of the two-item ranking that puts the chosen item first.
    pub fn ndcg(&self, chose_hi: bool) -> f64 {
        let (hi, lo) = self.gains();
        let discount = 1.0 / 3f64.log2();
        let ideal = hi + lo * discount;
        if chose_hi {
            1.0
        } else {
            (lo + hi * discount) / ideal
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub turn: usize,
    pub accuracy: f64,
    pub acc_ci: f64,
    pub ndcg: f64,
    pub ndcg_ci: f64,
    pub n: usize,
    pub relevance_mode: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub relevance: Relevance,
    pub n_users: usize,
    pub flagged: usize,
    pub turns: Vec<TurnReport>,
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Per-turn accuracy and NDCG over all results, turns ascending.
pub fn aggregate(results: &[TurnEval], relevance: Relevance) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Data("no evaluation results to aggregate".into()));
    }
    let mut turns: Vec<usize> = results.iter().map(|r| r.turn).collect();
    turns.sort_unstable();
    turns.dedup();
    let reports = turns
        .into_iter()
        .map(|turn| {
            let rows: Vec<&TurnEval> = results.iter().filter(|r| r.turn == turn).collect();
            let acc: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.chose_hi))).collect();
            let ndcg: Vec<f64> = rows.iter().map(|r| relevance.ndcg(r.chose_hi)).collect();
            let (accuracy, acc_ci) = mean_ci(&acc);
            let (ndcg, ndcg_ci) = mean_ci(&ndcg);
            TurnReport {
                turn,
                accuracy,
                acc_ci,
                ndcg,
                ndcg_ci,
                n: rows.len(),
                relevance_mode: relevance.name().to_string(),
            }
        })
        .collect();
    let users: HashSet<UserId> = results.iter().map(|r| r.user_id).collect();
    Ok(EvalReport {
        relevance,
        n_users: users.len(),
        flagged: results.iter().filter(|r| r.flagged).count(),
        turns: reports,
    })
}

/// Which model answers the pairwise questions.
pub enum Judge<'a> {
    Lm(&'a dyn LmClient),
    Oracle,
    NoisyOracle { accuracy: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub profile: ProfileConfig,
    pub quartiles: QuartilePolicy,
    pub order: PairOrder,
    pub attempts: usize,
    pub relevance: Relevance,
    pub decoding: DecodingParams,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            profile: ProfileConfig::default(),
            quartiles: QuartilePolicy::Strict,
            order: PairOrder::Random,
            attempts: 3,
            relevance: Relevance::default(),
            decoding: DecodingParams {
                temperature: 0.0,
                max_tokens: 8,
            },
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        if self.attempts == 0 {
            return Err(Error::Config("eval.attempts must be at least 1".into()));
        }
        if let Relevance::Graded { g0 } = self.relevance {
            if !(g0 >= 0.0 && g0.is_finite()) {
                return Err(Error::Config("eval.relevance.g0 must be a finite nonnegative number".into()));
            }
        }
        Ok(())
    }
}

/// Inputs for one evaluated user.
pub struct EvalCase<'a> {
    pub user: &'a GroundTruthUser,
    pub prior: &'a UserPrior,
    pub dialogue: &'a Dialogue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub profile: TextProfile,
    pub task: PairwiseTask,
    pub results: Vec<TurnEval>,
}

/// Builds a profile and a pair per user, evaluates every requested dialogue
/// prefix length and aggregates. Output order follows `cases`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cases: &[EvalCase<'_>],
    catalog: &ItemCatalog,
    vocab: &[ItemId],
    candidates: &[ItemId],
    turns: &[usize],
    judge: &Judge<'_>,
    config: &EvalConfig,
    parallelism: usize,
) -> Result<(EvalReport, Vec<CaseRecord>)> {
    config.validate()?;
    if cases.is_empty() || turns.is_empty() {
        return Err(Error::Config("evaluation needs at least one user and one turn".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records: Vec<CaseRecord> = pool.install(|| {
        cases
            .par_iter()
            .map(|case| {
                let uid = case.user.user_id.0;
                let user_seed = derive_seed(config.seed, uid);
                let profile = build_profile(case.prior, catalog, vocab, &config.profile, derive_seed(user_seed, 1))?;
                let task = sample_pair(case.user, catalog, candidates, &profile, config.quartiles, derive_seed(user_seed, 2))?;
                let oracle = match judge {
                    Judge::Lm(_) => None,
                    Judge::Oracle => Some(OracleLm::perfect(&task, catalog)?),
                    Judge::NoisyOracle { accuracy } => {
                        Some(OracleLm::noisy(&task, catalog, *accuracy, derive_seed(user_seed, 3))?)
                    }
                };
                let lm: &dyn LmClient = match (judge, &oracle) {
                    (Judge::Lm(lm), _) => *lm,
                    (_, Some(o)) => o,
                    _ => unreachable!("oracle built above"),
                };
                let results = turns
                    .iter()
                    .map(|&n| {
                        eval_turn(
                            lm,
                            &profile,
                            case.dialogue,
                            n,
                            &task,
                            catalog,
                            config.order,
                            config.attempts,
                            &config.decoding,
                            derive_seed(user_seed, 100 + n as u64),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CaseRecord { profile, task, results })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let all: Vec<TurnEval> = records.iter().flat_map(|r| r.results.iter().cloned()).collect();
    Ok((aggregate(&all, config.relevance)?, records))
}
