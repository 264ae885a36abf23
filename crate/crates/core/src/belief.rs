//! The recommender's posterior over the user embedding and its
//! Metropolis–Hastings sampler.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::behavior::{
    slate_mean, AgentAction, BehaviorConfig, Direction, Query, Response, Slate,
};
use crate::corpus::{CavSet, ItemCatalog, UserPrior};
use crate::error::{Error, Result};
use crate::math::{derive_seed, dot, ln_std_normal_cdf, norm, rng_from_seed};

/// Lower bound for any single log-likelihood term.
pub const LOG_FLOOR: f64 = -1e12;

/// Read-only data the likelihoods are evaluated against.
#[derive(Clone, Copy)]
pub struct ModelContext<'a> {
    pub catalog: &'a ItemCatalog,
    pub cavs: &'a CavSet,
    pub behavior: &'a BehaviorConfig,
}

/// One agent action paired with the user's response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub action: AgentAction,
    pub response: Response,
}

impl Observation {
    pub fn new(action: AgentAction, response: Response) -> Result<Self> {
        let ok = match (&action, &response) {
            (AgentAction::Ask(Query::Item(slate)), Response::ItemChoice(i)) => *i < slate.len(),
            (AgentAction::Ask(Query::Attr { .. }), Response::AttrAnswer(_)) => true,
            (AgentAction::Recommend(slate), Response::SlateAccept(i)) => *i < slate.len(),
            (AgentAction::Recommend(_), Response::SlateReject(_) | Response::Terminate) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::IncompatibleObservation(format!(
                "response {response:?} does not answer action {action:?}"
            )));
        }
        Ok(Self { action, response })
    }
}

/// Which terms a rejected recommendation contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectLikelihood {
    /// Null-item logit term for the rejection itself.
    pub null_choice: bool,
    /// Probit term for the attached critique.
    pub critique: bool,
}

impl Default for RejectLikelihood {
    fn default() -> Self {
        Self {
            null_choice: true,
            critique: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub m: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub proposal_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            m: 100,
            burn_in: 500,
            thinning: 5,
            proposal_scale: 0.25,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("sampler.m must be at least 1".into()));
        }
        if self.thinning == 0 {
            return Err(Error::Config("sampler.thinning must be at least 1".into()));
        }
        if !(self.proposal_scale > 0.0 && self.proposal_scale.is_finite()) {
            return Err(Error::Config("sampler.proposal_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Additional log-likelihood term, used to attach analytic test targets.
pub type ExtraLogLik = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Serializable view of a belief: prior and history size, no samples.
#[derive(Clone, Debug, Serialize)]
pub struct BeliefSnapshot {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub observations: usize,
}

#[derive(Clone)]
pub struct BeliefState {
    prior: UserPrior,
    history: Vec<Observation>,
    samples: Vec<Vec<f64>>,
    sampler: SamplerConfig,
    reject: RejectLikelihood,
    extra: Option<ExtraLogLik>,
    acceptance_rate: Option<f64>,
}

impl fmt::Debug for BeliefState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BeliefState")
            .field("prior", &self.prior)
            .field("history", &self.history)
            .field("samples", &self.samples.len())
            .field("sampler", &self.sampler)
            .field("reject", &self.reject)
            .field("extra", &self.extra.is_some())
            .finish()
    }
}

/// Likelihood term with everything but the candidate embedding precomputed.
enum Term {
    Logit {
        item_embeddings: Vec<Vec<f64>>,
        /// `None` means the null item was chosen.
        chosen: Option<usize>,
        include_null: bool,
    },
    Probit {
        direction: Vec<f64>,
        /// `c_gᵀ φ_S̄`.
        slate_projection: f64,
        sigma: f64,
        sign: f64,
    },
}

impl Term {
    fn log_lik(&self, phi: &[f64], phi_norm: f64, ctx: &ModelContext<'_>) -> f64 {
        let lp = match self {
            Term::Logit {
                item_embeddings,
                chosen,
                include_null,
            } => {
                let t = ctx.behavior.temperature;
                let null = ctx.behavior.null_utility / t;
                let mut max = if *include_null { null } else { f64::NEG_INFINITY };
                let mut utils = [0.0f64; 16];
                let mut heap;
                let utils: &mut [f64] = if item_embeddings.len() <= utils.len() {
                    &mut utils[..item_embeddings.len()]
                } else {
                    heap = vec![0.0; item_embeddings.len()];
                    &mut heap
                };
                for (u, e) in utils.iter_mut().zip(item_embeddings) {
                    *u = dot(e, phi) / t;
                    max = max.max(*u);
                }
                let mut z: f64 = utils.iter().map(|u| (u - max).exp()).sum();
                if *include_null {
                    z += (null - max).exp();
                }
                let picked = match chosen {
                    Some(i) => utils[*i],
                    None => null,
                };
                picked - max - z.ln()
            }
            Term::Probit {
                direction,
                slate_projection,
                sigma,
                sign,
            } => {
                let target_projection = if phi_norm > 0.0 {
                    ctx.catalog.max_norm() * dot(direction, phi) / phi_norm
                } else {
                    0.0
                };
                ln_std_normal_cdf(sign * (target_projection - slate_projection) / sigma)
            }
        };
        if lp.is_nan() {
            LOG_FLOOR
        } else {
            lp.max(LOG_FLOOR)
        }
    }
}

fn logit_term(slate: &Slate, chosen: Option<usize>, include_null: bool, ctx: &ModelContext<'_>) -> Result<Term> {
    let item_embeddings = slate
        .items()
        .iter()
        .map(|id| Ok(ctx.catalog.require(*id)?.embedding.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Term::Logit {
        item_embeddings,
        chosen,
        include_null,
    })
}

fn probit_term(
    items: &[crate::corpus::ItemId],
    attr: crate::corpus::AttrId,
    direction: Direction,
    ctx: &ModelContext<'_>,
) -> Result<Term> {
    let cav = ctx.cavs.require(attr)?;
    let mean = slate_mean(items, ctx.catalog)?;
    Ok(Term::Probit {
        direction: cav.direction.clone(),
        slate_projection: dot(&cav.direction, &mean),
        sigma: cav.sigma,
        sign: f64::from(direction.sign()),
    })
}

fn compile(obs: &Observation, reject: RejectLikelihood, ctx: &ModelContext<'_>) -> Result<Vec<Term>> {
    let mut terms = Vec::with_capacity(2);
    match (&obs.action, &obs.response) {
        (AgentAction::Ask(Query::Item(slate)), Response::ItemChoice(i)) => {
            terms.push(logit_term(slate, Some(*i), false, ctx)?);
        }
        (AgentAction::Ask(Query::Attr { item, attr }), Response::AttrAnswer(dir)) => {
            terms.push(probit_term(&[*item], *attr, *dir, ctx)?);
        }
        (AgentAction::Recommend(slate), Response::SlateAccept(i)) => {
            terms.push(logit_term(slate, Some(*i), true, ctx)?);
        }
        (AgentAction::Recommend(slate), Response::SlateReject(critique)) => {
            if reject.null_choice {
                terms.push(logit_term(slate, None, true, ctx)?);
            }
            if let (true, Some(c)) = (reject.critique, critique) {
                terms.push(probit_term(slate.items(), c.attr, c.direction, ctx)?);
            }
        }
        // Leaving the conversation carries no preference information.
        (AgentAction::Recommend(_), Response::Terminate) => {}
        _ => {
            return Err(Error::IncompatibleObservation(format!(
                "response {:?} does not answer action {:?}",
                obs.response, obs.action
            )))
        }
    }
    Ok(terms)
}

fn log_prior(phi: &[f64], prior: &UserPrior) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    phi.iter()
        .zip(&prior.mean)
        .zip(&prior.variance)
        .map(|((x, m), v)| -0.5 * ((x - m) * (x - m) / v + ln_2pi + v.ln()))
        .sum()
}

/// Metropolis acceptance: always accept uphill moves, otherwise accept with
/// probability `exp(log_ratio)` using the supplied uniform draw in `[0, 1)`.
pub fn metropolis_accept(log_ratio: f64, uniform: f64) -> bool {
    log_ratio >= 0.0 || uniform.ln() < log_ratio
}

impl BeliefState {
    pub fn new(prior: UserPrior, sampler: SamplerConfig) -> Result<Self> {
        sampler.validate()?;
        Ok(Self {
            prior,
            history: Vec::new(),
            samples: Vec::new(),
            sampler,
            reject: RejectLikelihood::default(),
            extra: None,
            acceptance_rate: None,
        })
    }

    pub fn with_reject_likelihood(mut self, reject: RejectLikelihood) -> Self {
        self.reject = reject;
        self.samples.clear();
        self
    }

    pub fn with_extra_log_lik(mut self, extra: ExtraLogLik) -> Self {
        self.extra = Some(extra);
        self.samples.clear();
        self
    }

    pub fn prior(&self) -> &UserPrior {
        &self.prior
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    /// Cached samples; empty after an update until [`Self::mh_sample`] runs.
    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn has_samples(&self) -> bool {
        !self.samples.is_empty()
    }

    /// Acceptance rate of the most recent chain.
    pub fn acceptance_rate(&self) -> Option<f64> {
        self.acceptance_rate
    }

    /// Appends an observation and invalidates the sample cache.
    pub fn update(&mut self, obs: Observation) -> Result<()> {
        let checked = Observation::new(obs.action, obs.response)?;
        self.history.push(checked);
        self.samples.clear();
        Ok(())
    }

    pub fn snapshot(&self) -> BeliefSnapshot {
        BeliefSnapshot {
            mean: self.prior.mean.clone(),
            variance: self.prior.variance.clone(),
            observations: self.history.len(),
        }
    }

    /// Log-likelihood contributed by one observation at `phi`.
    pub fn observation_log_lik(&self, obs: &Observation, phi: &[f64], ctx: &ModelContext<'_>) -> Result<f64> {
        let n = norm(phi);
        Ok(compile(obs, self.reject, ctx)?
            .iter()
            .map(|t| t.log_lik(phi, n, ctx))
            .sum())
    }

    /// `log P_U(phi) + Σ_j log P(ρ_j | q_j, phi)` plus any extra term.
    pub fn log_unnormalized_posterior(&self, phi: &[f64], ctx: &ModelContext<'_>) -> Result<f64> {
        let terms = self.compiled(ctx)?;
        Ok(self.eval(&terms, phi, ctx))
    }

    fn compiled(&self, ctx: &ModelContext<'_>) -> Result<Vec<Term>> {
        let mut all = Vec::new();
        for obs in &self.history {
            all.extend(compile(obs, self.reject, ctx)?);
        }
        Ok(all)
    }

    fn eval(&self, terms: &[Term], phi: &[f64], ctx: &ModelContext<'_>) -> f64 {
        let n = norm(phi);
        let mut lp = log_prior(phi, &self.prior);
        for t in terms {
            lp += t.log_lik(phi, n, ctx);
        }
        if let Some(extra) = &self.extra {
            lp += extra(phi);
        }
        lp
    }

    /// Runs a Gaussian random-walk chain from the prior mean and caches `m`
    /// thinned draws after burn-in. The chain seed mixes the configured seed
    /// with the history length, so each refresh within a conversation uses
    /// its own stream.
    pub fn mh_sample(&mut self, ctx: &ModelContext<'_>) -> Result<&[Vec<f64>]> {
        let terms = self.compiled(ctx)?;
        let cfg = self.sampler;
        let mut rng = rng_from_seed(derive_seed(cfg.seed, self.history.len() as u64));
        let steps: Vec<f64> = self
            .prior
            .variance
            .iter()
            .map(|v| cfg.proposal_scale * v.sqrt())
            .collect();

        let mut current = self.prior.mean.clone();
        let mut current_lp = self.eval(&terms, &current, ctx);
        let mut proposal = vec![0.0; current.len()];
        let mut samples = Vec::with_capacity(cfg.m);
        let mut accepted = 0usize;
        let total = cfg.burn_in + cfg.m * cfg.thinning;
        for step in 0..total {
            for ((p, c), s) in proposal.iter_mut().zip(&current).zip(&steps) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = c + s * z;
            }
            let lp = self.eval(&terms, &proposal, ctx);
            let u: f64 = rng.random();
            if metropolis_accept(lp - current_lp, u) {
                std::mem::swap(&mut current, &mut proposal);
                current_lp = lp;
                accepted += 1;
            }
            if step >= cfg.burn_in && (step - cfg.burn_in + 1).is_multiple_of(cfg.thinning) {
                samples.push(current.clone());
            }
        }
        self.acceptance_rate = Some(accepted as f64 / total.max(1) as f64);
        self.samples = samples;
        Ok(&self.samples)
    }
}
