//! Measurements shared by the oracle tests and the acceptance target. Each
//! returns the observed quantities; callers decide pass or fail.

use std::sync::Arc;

use crssim::agent::{evoi_exact, f_score, select_query, AgentConfig, OptimizerMode};
use crssim::behavior::{
    attr_response_prob, choice_probs, respond_to_attr_query, respond_to_slate, AgentAction, BehaviorConfig, Direction,
    Query, Response, Slate, SlateMode,
};
use crssim::belief::{BeliefState, ModelContext, Observation, SamplerConfig};
use crssim::corpus::synthetic::{latent_corpus, SyntheticSpec};
use crssim::corpus::{AttrId, Cav, CavSet, GroundTruthUser, ItemCatalog, ItemId, UserId, UserPrior};
use crssim::math::rng_from_seed;
use crssim::trajectory::{simulate_batch, simulate_with_trace, FailurePolicy, SimConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{catalog_from, cavs_from, every_query, evoi_oracle, f_oracle, phi};

/// Effective sample size by Geyer's initial positive sequence.
pub fn ess(xs: &[f64]) -> f64 {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let rho = |k: usize| -> f64 {
        (0..n - k).map(|i| (xs[i] - mean) * (xs[i + k] - mean)).sum::<f64>() / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < n / 2 {
        let pair = rho(k) + rho(k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    n as f64 / tau.max(1e-9)
}

fn column(samples: &[Vec<f64>], k: usize) -> Vec<f64> {
    samples.iter().map(|s| s[k]).collect()
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

fn unit_corpus() -> (ItemCatalog, CavSet, BehaviorConfig) {
    let catalog = catalog_from(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.6, 0.3]]);
    let cavs = CavSet::new(vec![Cav::new(AttrId(0), "a", vec![1.0, 0.0], 0.8).unwrap()]).unwrap();
    (catalog, cavs, BehaviorConfig::default())
}

pub struct PriorMoments {
    /// `|mean − μ| / (σ / √ESS)` per dimension.
    pub mean_z: Vec<f64>,
    /// `|var / σ² − 1|` per dimension.
    pub var_rel: Vec<f64>,
    pub ess: Vec<f64>,
}

/// Empty history, d=2, m=2000.
pub fn prior_moments(seed: u64) -> PriorMoments {
    let (catalog, cavs, behavior) = unit_corpus();
    let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &behavior };
    let prior = UserPrior::new(UserId(1), vec![0.4, -1.0], vec![1.0, 2.5]).unwrap();
    let sampler = SamplerConfig { m: 2000, burn_in: 500, thinning: 10, proposal_scale: 1.5, seed };
    let mut b = BeliefState::new(prior.clone(), sampler).unwrap();
    let samples = b.mh_sample(&ctx).unwrap().to_vec();
    let mut out = PriorMoments { mean_z: vec![], var_rel: vec![], ess: vec![] };
    for k in 0..2 {
        let xs = column(&samples, k);
        let (m, v) = moments(&xs);
        let e = ess(&xs);
        let sd = prior.variance[k].sqrt();
        out.mean_z.push((m - prior.mean[k]).abs() / (sd / e.sqrt()));
        out.var_rel.push((v / prior.variance[k] - 1.0).abs());
        out.ess.push(e);
    }
    out
}

/// Prior N(0, 1) times a Gaussian pseudo-observation `y = 1.5` with noise
/// variance 0.5; the posterior is N(1, 1/3). Returns relative errors of the
/// mean and variance.
pub fn conjugate_1d(seed: u64) -> (f64, f64) {
    let catalog = catalog_from(&[vec![1.0]]);
    let cavs = CavSet::empty();
    let behavior = BehaviorConfig::default();
    let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &behavior };
    let (y, s2) = (1.5, 0.5);
    let prior = UserPrior::new(UserId(1), vec![0.0], vec![1.0]).unwrap();
    let sampler = SamplerConfig { m: 20_000, burn_in: 1000, thinning: 10, proposal_scale: 1.5, seed };
    let mut b = BeliefState::new(prior, sampler)
        .unwrap()
        .with_extra_log_lik(Arc::new(move |x: &[f64]| -(x[0] - y).powi(2) / (2.0 * s2)));
    let xs = column(b.mh_sample(&ctx).unwrap(), 0);
    let (m, v) = moments(&xs);
    let post_var = 1.0 / (1.0 + 1.0 / s2);
    let post_mean = post_var * y / s2;
    ((m / post_mean - 1.0).abs(), (v / post_var - 1.0).abs())
}

pub struct GridComparison {
    pub mh_mean: [f64; 2],
    pub grid_mean: [f64; 2],
    pub mh_var: [f64; 2],
    pub grid_var: [f64; 2],
}

impl GridComparison {
    /// Mean error relative to the larger of |mean| and the posterior sd.
    pub fn mean_err(&self) -> f64 {
        (0..2)
            .map(|k| (self.mh_mean[k] - self.grid_mean[k]).abs() / self.grid_mean[k].abs().max(self.grid_var[k].sqrt()))
            .fold(0.0, f64::max)
    }

    pub fn var_err(&self) -> f64 {
        (0..2).map(|k| (self.mh_var[k] / self.grid_var[k] - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// d=2 prior with one probit attribute answer, against a 201×201 grid over
/// ±5 prior standard deviations.
pub fn grid_2d(seed: u64) -> GridComparison {
    let (catalog, cavs, behavior) = unit_corpus();
    let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &behavior };
    let mean = [0.3, 0.2];
    let var = [1.0, 0.5];
    let prior = UserPrior::new(UserId(1), mean.to_vec(), var.to_vec()).unwrap();
    let item = ItemId(3);
    let attr = AttrId(0);
    let obs = Observation::new(
        AgentAction::Ask(Query::Attr { item, attr }),
        Response::AttrAnswer(Direction::Less),
    )
    .unwrap();
    let sampler = SamplerConfig { m: 20_000, burn_in: 1000, thinning: 10, proposal_scale: 1.2, seed };
    let mut b = BeliefState::new(prior, sampler).unwrap();
    b.update(obs).unwrap();
    let samples = b.mh_sample(&ctx).unwrap().to_vec();

    let n = 201;
    let (mut w_sum, mut m1, mut m2) = (0.0, [0.0; 2], [0.0; 2]);
    let sd = [var[0].sqrt(), var[1].sqrt()];
    for a in 0..n {
        for c in 0..n {
            let x = [
                mean[0] - 5.0 * sd[0] + 10.0 * sd[0] * a as f64 / (n - 1) as f64,
                mean[1] - 5.0 * sd[1] + 10.0 * sd[1] * c as f64 / (n - 1) as f64,
            ];
            let log_prior: f64 = (0..2).map(|k| -(x[k] - mean[k]).powi(2) / (2.0 * var[k])).sum();
            let lik = 1.0 - super::p_more(&x, item, attr, &catalog, &cavs);
            let w = log_prior.exp() * lik;
            w_sum += w;
            for k in 0..2 {
                m1[k] += w * x[k];
                m2[k] += w * x[k] * x[k];
            }
        }
    }
    let grid_mean = [m1[0] / w_sum, m1[1] / w_sum];
    let grid_var = [m2[0] / w_sum - grid_mean[0].powi(2), m2[1] / w_sum - grid_mean[1].powi(2)];
    let (a0, v0) = moments(&column(&samples, 0));
    let (a1, v1) = moments(&column(&samples, 1));
    GridComparison { mh_mean: [a0, a1], grid_mean, mh_var: [v0, v1], grid_var }
}

/// Mean per-dimension sample variance after 20 attribute answers drawn from
/// a fixed user, and the prior's mean variance.
pub fn contraction(seed: u64) -> (f64, f64) {
    let mut rng = rng_from_seed(1000 + seed);
    let d = 3;
    let gauss = |rng: &mut crssim::math::SimRng| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect()
    };
    let catalog = catalog_from(&(0..20).map(|_| gauss(&mut rng)).collect::<Vec<_>>());
    let cavs = cavs_from(&(0..4).map(|_| gauss(&mut rng)).collect::<Vec<_>>(), 0.3);
    let behavior = BehaviorConfig::default();
    let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &behavior };
    let user = GroundTruthUser::new(UserId(1), vec![1.0, -0.5, 0.8]).unwrap();
    let prior = UserPrior::new(UserId(1), vec![0.0; d], vec![1.0; d]).unwrap();
    let sampler = SamplerConfig { m: 400, burn_in: 500, thinning: 5, proposal_scale: 0.5, seed };
    let mut b = BeliefState::new(prior, sampler).unwrap();
    for _ in 0..20 {
        let item = catalog.items()[rng.random_range(0..catalog.len())].id;
        let attr = cavs.as_slice()[rng.random_range(0..cavs.len())].id;
        let q = Query::Attr { item, attr };
        let r = respond_to_attr_query(&q, &user, &cavs, &catalog, &mut rng).unwrap();
        b.update(Observation::new(AgentAction::Ask(q), r).unwrap()).unwrap();
    }
    let samples = b.mh_sample(&ctx).unwrap().to_vec();
    let post = (0..d).map(|k| moments(&column(&samples, k)).1).sum::<f64>() / d as f64;
    (post, 1.0)
}

/// Largest deviation of `attr_response_prob` from Φ over 20 evidence values
/// in [−3, 3].
pub fn probit_grid_error() -> f64 {
    // Max norm 10 from the item on e₂; the user points along (1, 1), so the
    // target sits at 10/√2 on e₁ and an anchor at `10/√2 − xσ` on e₁ gives
    // evidence `x` along the e₁ attribute.
    let sigma = 0.5;
    let t = 10.0 / 2f64.sqrt();
    let cavs = CavSet::new(vec![Cav::new(AttrId(0), "a", vec![1.0, 0.0], sigma).unwrap()]).unwrap();
    let user = GroundTruthUser::new(UserId(1), vec![1.0, 1.0]).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let x = -3.0 + 6.0 * k as f64 / 19.0;
        let catalog = catalog_from(&[vec![0.0, 10.0], vec![t - x * sigma, 0.0]]);
        let q = Query::Attr { item: ItemId(2), attr: AttrId(0) };
        let p = attr_response_prob(&q, &user, &cavs, &catalog).unwrap();
        worst = worst.max((p - phi(x)).abs());
    }
    worst
}

/// Largest gap between empirical and closed-form logit frequencies over
/// 10 000 draws, for a recommendation slate with the null item and a
/// three-item query slate.
pub fn logit_frequency_error(seed: u64) -> f64 {
    let catalog = catalog_from(&[vec![1.0, 0.2], vec![0.3, 0.9], vec![-0.5, 0.4]]);
    let cavs = CavSet::empty();
    let config = BehaviorConfig { temperature: 0.7, null_utility: 0.1, critique_prob: 0.0, ..BehaviorConfig::default() };
    let user = GroundTruthUser::new(UserId(1), vec![0.8, 0.5]).unwrap();
    let slate = Slate::new(vec![ItemId(1), ItemId(2), ItemId(3)]).unwrap();
    let utilities: Vec<f64> = catalog.items().iter().map(|i| super::dotp(&i.embedding, &user.embedding)).collect();
    let mut rng = rng_from_seed(seed);
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for mode in [SlateMode::Recommendation, SlateMode::ItemQuery] {
        let null = (mode == SlateMode::Recommendation).then_some(config.null_utility);
        // Closed form written out rather than reusing the library softmax.
        let mut ex: Vec<f64> = utilities.iter().map(|u| (u / config.temperature).exp()).collect();
        if let Some(nu) = null {
            ex.push((nu / config.temperature).exp());
        }
        let z: f64 = ex.iter().sum();
        let expected: Vec<f64> = ex.iter().map(|e| e / z).collect();
        assert!(choice_probs(&utilities, null, config.temperature)
            .iter()
            .zip(&expected)
            .all(|(a, b)| (a - b).abs() < 1e-12));
        let mut counts = vec![0usize; expected.len()];
        let null_index = utilities.len();
        for _ in 0..n {
            match respond_to_slate(&slate, &user, &cavs, &catalog, &config, mode, &mut rng).unwrap() {
                Response::ItemChoice(i) | Response::SlateAccept(i) => counts[i] += 1,
                Response::SlateReject(_) => counts[null_index] += 1,
                r => panic!("unexpected {r:?}"),
            }
        }
        for (c, e) in counts.iter().zip(&expected) {
            worst = worst.max((*c as f64 / n as f64 - e).abs());
        }
    }
    worst
}

fn random_instance(rng: &mut crssim::math::SimRng, max_items: usize, max_attrs: usize, max_atoms: usize) -> super::Instance {
    let d = rng.random_range(2..=3);
    let v = |rng: &mut crssim::math::SimRng| -> Vec<f64> {
        loop {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            if super::l2(&x) > 1e-3 {
                return x;
            }
        }
    };
    let n_items = rng.random_range(2..=max_items);
    let n_attrs = rng.random_range(1..=max_attrs);
    let n_atoms = rng.random_range(1..=max_atoms);
    super::Instance {
        items: (0..n_items).map(|_| v(rng)).collect(),
        attrs: (0..n_attrs).map(|_| v(rng)).collect(),
        samples: (0..n_atoms).map(|_| v(rng)).collect(),
        weights: (0..n_atoms).map(|_| rng.random_range(0.05..1.0)).collect(),
    }
}

pub struct EvoiSummary {
    pub min_evoi: f64,
    /// Largest gap to the independent Bayes oracle.
    pub oracle_gap: f64,
    pub single_atom_max: f64,
}

/// 1 000 random instances with at most 16 atoms, 8 items and 4 attributes.
pub fn evoi_properties(seed: u64) -> EvoiSummary {
    let mut rng = rng_from_seed(seed);
    let behavior = BehaviorConfig::default();
    let mut s = EvoiSummary { min_evoi: f64::INFINITY, oracle_gap: 0.0, single_atom_max: 0.0 };
    for _ in 0..1000 {
        let inst = random_instance(&mut rng, 8, 4, 16);
        let (catalog, cavs) = (inst.catalog(), inst.cavs());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &behavior };
        let atoms = inst.atoms();
        let queries = every_query(&catalog, &cavs);
        let q = &queries[rng.random_range(0..queries.len())];
        let v = evoi_exact(q, &atoms, ctx).unwrap();
        s.min_evoi = s.min_evoi.min(v);
        s.oracle_gap = s.oracle_gap.max((v - evoi_oracle(q, &atoms, &catalog, &cavs, &behavior)).abs());
        let single = [(1.0, atoms[0].1.clone())];
        s.single_atom_max = s.single_atom_max.max(evoi_exact(q, &single, ctx).unwrap().abs());
    }
    s
}

pub struct FSummary {
    /// Largest spread of F across queries with one sample.
    pub m1_spread: f64,
    /// Largest `F − bound`; nonpositive when the bound holds.
    pub bound_excess: f64,
    /// Largest gap to the direct formula.
    pub oracle_gap: f64,
}

pub fn f_properties(seed: u64) -> FSummary {
    let mut rng = rng_from_seed(seed);
    let behavior = BehaviorConfig::default();
    let mut s = FSummary { m1_spread: 0.0, bound_excess: f64::NEG_INFINITY, oracle_gap: 0.0 };
    for _ in 0..1000 {
        let inst = random_instance(&mut rng, 6, 3, 8);
        let (catalog, cavs) = (inst.catalog(), inst.cavs());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &behavior };
        let queries = every_query(&catalog, &cavs);
        let q = &queries[rng.random_range(0..queries.len())];
        let f = f_score(q, &inst.samples, ctx).unwrap();
        let bound = catalog.max_norm() / inst.samples.len() as f64
            * inst.samples.iter().map(|x| super::l2(x)).sum::<f64>();
        s.bound_excess = s.bound_excess.max(f - bound);
        s.oracle_gap = s.oracle_gap.max((f - f_oracle(q, &inst.samples, &catalog, &cavs, &behavior)).abs());
        let one = &inst.samples[..1];
        let values: Vec<f64> = queries.iter().map(|q| f_score(q, one, ctx).unwrap()).collect();
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        s.m1_spread = s.m1_spread.max(hi - lo);
    }
    s
}

pub struct OptimizerSummary {
    pub fixtures: usize,
    /// Fixtures where exhaustive selection missed the enumeration maximum.
    pub exhaustive_misses: usize,
    /// Smallest gradient-to-exhaustive ratio.
    pub gradient_ratio: f64,
}

/// Random fixtures with at most 12 items and pair item queries.
pub fn optimizer_equivalence(seed: u64, fixtures: usize) -> OptimizerSummary {
    let mut rng = rng_from_seed(seed);
    let behavior = BehaviorConfig::default();
    let mut s = OptimizerSummary { fixtures, exhaustive_misses: 0, gradient_ratio: f64::INFINITY };
    for k in 0..fixtures {
        let mut inst = random_instance(&mut rng, 12, 3, 1);
        inst.samples = (0..30)
            .map(|_| (0..inst.items[0].len()).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let (catalog, cavs) = (inst.catalog(), inst.cavs());
        let ctx = ModelContext { catalog: &catalog, cavs: &cavs, behavior: &behavior };
        let best = every_query(&catalog, &cavs)
            .iter()
            .map(|q| f_score(q, &inst.samples, ctx).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut config = AgentConfig::default();
        let (q, v) = select_query(&inst.samples, ctx, &config, &[], 0).unwrap();
        let check = f_score(&q, &inst.samples, ctx).unwrap();
        if (v - best).abs() > 1e-12 * best.abs().max(1.0) || (check - v).abs() > 1e-12 * v.abs().max(1.0) {
            s.exhaustive_misses += 1;
        }
        config.mode = OptimizerMode::Gradient;
        config.gradient.restarts = 10;
        config.gradient.seed = k as u64;
        let (_, g) = select_query(&inst.samples, ctx, &config, &[], 0).unwrap();
        s.gradient_ratio = s.gradient_ratio.min(g / best);
    }
    s
}

pub struct Progress {
    pub means: Vec<f64>,
    pub ses: Vec<f64>,
    /// Mean and standard error of the paired turn-7 minus turn-0 gain.
    pub gain: (f64, f64),
    pub users: usize,
}

/// True utility of the top recommendation after each turn, over 200
/// synthetic users on a 500-item corpus.
pub fn progress(seed: u64) -> Progress {
    let corpus = latent_corpus(&SyntheticSpec { n_items: 500, n_users: 200, seed, ..SyntheticSpec::default() }).unwrap();
    let config = SimConfig::default();
    let traces: Vec<Vec<f64>> = corpus
        .users
        .iter()
        .zip(&corpus.priors)
        .enumerate()
        .map(|(k, (u, p))| {
            simulate_with_trace(u, p, &corpus.catalog, &corpus.cavs, &config, seed ^ (k as u64 + 1)).unwrap().1
        })
        .collect();
    let n = traces.len();
    let turns = traces[0].len();
    let stat = |xs: Vec<f64>| {
        let (m, v) = moments(&xs);
        (m, (v * n as f64 / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt())
    };
    let (means, ses): (Vec<f64>, Vec<f64>) = (0..turns).map(|t| stat(traces.iter().map(|x| x[t]).collect())).unzip();
    let gain = stat(traces.iter().map(|x| x[turns - 1] - x[0]).collect());
    Progress { means, ses, gain, users: n }
}

pub struct Throughput {
    pub seconds: f64,
    pub identical: bool,
    pub trajectories: usize,
    pub digest: u64,
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

/// 1 000 trajectories on a 500-item corpus, timed at the first parallelism
/// level and compared byte for byte across levels.
pub fn batch_determinism(parallelism: &[usize]) -> Throughput {
    let corpus = latent_corpus(&SyntheticSpec { n_items: 500, n_users: 1000, seed: 5, ..SyntheticSpec::default() }).unwrap();
    let users: Vec<(GroundTruthUser, UserPrior)> =
        corpus.users.iter().cloned().zip(corpus.priors.iter().cloned()).collect();
    let config = SimConfig::default();
    let mut runs = Vec::new();
    let mut seconds = 0.0;
    for (k, p) in parallelism.iter().enumerate() {
        let start = std::time::Instant::now();
        let out = simulate_batch(&users, &corpus.catalog, &corpus.cavs, &config, 99, *p, FailurePolicy::Abort).unwrap();
        if k == 0 {
            seconds = start.elapsed().as_secs_f64();
        }
        let text: String = out.into_iter().map(|r| r.unwrap().to_json() + "\n").collect();
        runs.push(text);
    }
    Throughput {
        seconds,
        identical: runs.windows(2).all(|w| w[0] == w[1]),
        trajectories: runs[0].lines().count(),
        digest: fnv(runs[0].as_bytes()),
    }
}

pub struct Calibration {
    pub accuracy: f64,
    pub ndcg: f64,
    pub flagged: usize,
}

/// Pairwise accuracy of a simulated judge that is right with probability
/// `p`, over `n` distinct pairs drawn from a 500-item catalog.
pub fn eval_calibration(p: f64, n: usize, seed: u64) -> Calibration {
    use crssim::dialogue::{Dialogue, Stage, TrajectoryRef};
    use crssim::eval::{aggregate, eval_turn, BucketFill, OracleLm, PairOrder, PairwiseTask, Relevance, TextProfile};
    use crssim::lm::DecodingParams;

    let corpus = latent_corpus(&SyntheticSpec { n_items: 500, n_users: 1, seed, ..SyntheticSpec::default() }).unwrap();
    let catalog = &corpus.catalog;
    let user = &corpus.users[0];
    let mut rng = rng_from_seed(seed);
    let decoding = DecodingParams::default();
    let mut results = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b) = loop {
            let a = rng.random_range(0..catalog.len());
            let b = rng.random_range(0..catalog.len());
            if a != b {
                break (&catalog.items()[a], &catalog.items()[b]);
            }
        };
        let (sa, sb) = (super::dotp(&a.embedding, &user.embedding), super::dotp(&b.embedding, &user.embedding));
        let ((hi, s_hi), (lo, s_lo)) = if sa >= sb { ((a, sa), (b, sb)) } else { ((b, sb), (a, sa)) };
        let task = PairwiseTask { user_id: UserId(k as u64), item_hi: hi.id, item_lo: lo.id, score_hi: s_hi, score_lo: s_lo };
        let profile = TextProfile {
            user_id: task.user_id,
            liked: vec![],
            disliked: vec![],
            uncertain: vec![],
            filled: BucketFill::default(),
            text: format!("Profile of user {k}."),
        };
        let dialogue = Dialogue {
            trajectory_ref: TrajectoryRef { user_id: task.user_id, seed: 0 },
            stage: Stage::Refined,
            turns: vec![],
        };
        let lm = OracleLm::noisy(&task, catalog, p, seed).unwrap();
        let r = eval_turn(&lm, &profile, &dialogue, 0, &task, catalog, PairOrder::Random, 3, &decoding, seed ^ k as u64)
            .unwrap();
        results.push(r);
    }
    let report = aggregate(&results, Relevance::Binary).unwrap();
    Calibration { accuracy: report.turns[0].accuracy, ndcg: report.turns[0].ndcg, flagged: report.flagged }
}

/// Renders the appendix trajectory and compares it with the frozen figure
/// text.
pub fn template_fidelity() -> bool {
    use crssim::dialogue::render_templates;
    use crssim::trajectory::Trajectory;

    let (catalog, cavs) = super::appendix_corpus();
    let t = Trajectory::from_json(&super::read_fixture("appendix_trajectory.json")).unwrap();
    render_templates(&t, &catalog, &cavs).unwrap().text() == super::read_fixture("fig2_dialogue.txt")
}

pub struct InpaintContract {
    pub shape_preserved: bool,
    /// Prompts that mention a turn after the one being refined.
    pub future_leaks: usize,
    pub flagged: Vec<usize>,
    pub scripted_failures: Vec<usize>,
    /// Refined turns whose text is not the scripted rewrite.
    pub wrong_text: usize,
}

/// An eight-turn templatized dialogue with a unique token per turn, refined
/// by a scripted mock. Turns in `failing` receive only invalid outputs;
/// every other turn gets one invalid output first when `retry_first` is set.
pub fn inpaint_contract(mode: crssim::dialogue::PassMode, failing: &[usize], retry_first: bool) -> InpaintContract {
    use crssim::dialogue::{inpaint, Dialogue, DialogueTurn, InpaintPolicy, PassMode, Speaker, Stage, TrajectoryRef, TurnKind};
    use crssim::lm::{CannedLm, RecordingLm, ScriptedLm};

    let kinds = [TurnKind::AttrElicit, TurnKind::ItemElicit, TurnKind::Recommend, TurnKind::Recommend];
    let turns: Vec<DialogueTurn> = (0..8)
        .map(|i| {
            let kind = if i % 2 == 0 { kinds[i / 2] } else { TurnKind::User };
            DialogueTurn { speaker: kind.speaker(), kind, text: format!("template-token-{i}"), flagged: false }
        })
        .collect();
    let dialogue = Dialogue {
        trajectory_ref: TrajectoryRef { user_id: UserId(1), seed: 0 },
        stage: Stage::Templatized,
        turns: turns.clone(),
    };
    let policy = InpaintPolicy { mode, ..InpaintPolicy::default() };
    let order: Vec<usize> = match mode {
        PassMode::SinglePass => (0..8).collect(),
        PassMode::TwoPass => (0..8).filter(|i| i % 2 == 1).chain((0..8).filter(|i| i % 2 == 0)).collect(),
    };
    let mut script = Vec::new();
    let mut calls = Vec::new();
    for &i in &order {
        let prefix = turns[i].speaker.prefix();
        if failing.contains(&i) {
            for k in 0..policy.attempts {
                // Alternate the two invalid shapes: wrong speaker and multi-line.
                script.push(Ok(if k % 2 == 0 { format!("Narrator: refined-{i}") } else { format!("{prefix} a\nb") }));
                calls.push(i);
            }
            continue;
        }
        if retry_first {
            script.push(Ok(String::new()));
            calls.push(i);
        }
        script.push(Ok(format!("{prefix} refined-token-{i}")));
        calls.push(i);
    }
    let lm = RecordingLm::new(ScriptedLm::new(script, CannedLm::default()));
    let out = inpaint(&dialogue, &lm, &policy).unwrap();
    let prompts = lm.prompts();

    let mut future_leaks = 0;
    for (prompt, &i) in prompts.iter().zip(&calls) {
        for j in i + 1..8 {
            if prompt.contains(&format!("-token-{j}")) {
                future_leaks += 1;
            }
        }
    }
    let shape_preserved = prompts.len() == calls.len()
        && out.turns.len() == turns.len()
        && out.stage == Stage::Refined
        && out.turns.iter().zip(&turns).all(|(a, b)| a.speaker == b.speaker && a.kind == b.kind)
        && out.turns.iter().zip(&turns).all(|(a, _)| a.speaker == if a.kind == TurnKind::User { Speaker::User } else { Speaker::Agent });
    let flagged: Vec<usize> = out.turns.iter().enumerate().filter(|(_, t)| t.flagged).map(|(i, _)| i).collect();
    let wrong_text = out
        .turns
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            let want = if failing.contains(i) { format!("template-token-{i}") } else { format!("refined-token-{i}") };
            t.text != want
        })
        .count();
    let mut scripted_failures = failing.to_vec();
    scripted_failures.sort_unstable();
    InpaintContract { shape_preserved, future_leaks, flagged, scripted_failures, wrong_text }
}
