//! Stochastic user response models.
//!
//! The same functions generate simulated responses from a ground-truth
//! embedding and score observed responses as likelihoods inside the
//! recommender's belief state.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttrId, Cav, CavSet, GroundTruthUser, ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::math::{argmax, dot, norm, softmax, std_normal_cdf};

/// An ordered set of distinct items shown together.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Slate(Vec<ItemId>);

impl Slate {
    pub fn new(items: Vec<ItemId>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("slate must contain at least one item".into()));
        }
        let mut seen = HashSet::with_capacity(items.len());
        if let Some(dup) = items.iter().find(|i| !seen.insert(**i)) {
            return Err(Error::Data(format!("slate repeats item {dup}")));
        }
        Ok(Self(items))
    }

    pub fn items(&self) -> &[ItemId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, catalog: &ItemCatalog) -> Result<()> {
        self.0.iter().try_for_each(|id| catalog.require(*id).map(|_| ()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    More,
    Less,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::More => 1,
            Direction::Less => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Direction::More),
            -1 => Some(Direction::Less),
            _ => None,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::More => "more",
            Direction::Less => "less",
        }
    }
}

impl Serialize for Direction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.sign())
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Direction::from_sign(v)
            .ok_or_else(|| serde::de::Error::custom(format!("direction must be 1 or -1, got {v}")))
    }
}

/// A preference-elicitation query.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Query {
    /// Which item of the slate is preferred.
    Item(Slate),
    /// More or less of `attr` than `item`.
    Attr { item: ItemId, attr: AttrId },
}

/// What the recommender does on a turn.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum AgentAction {
    Ask(Query),
    Recommend(Slate),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Critique {
    pub attr: AttrId,
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Response {
    ItemChoice(usize),
    SlateReject(Option<Critique>),
    SlateAccept(usize),
    AttrAnswer(Direction),
    Terminate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Termination {
    pub enabled: bool,
    pub p0: f64,
    pub slope: f64,
}

impl Default for Termination {
    fn default() -> Self {
        Self {
            enabled: false,
            p0: 0.0,
            slope: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub temperature: f64,
    pub null_utility: f64,
    /// Probability that a rejection carries a critique.
    pub critique_prob: f64,
    pub termination: Termination,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            null_utility: 0.0,
            critique_prob: 1.0,
            termination: Termination::default(),
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("behavior.temperature must be positive".into()));
        }
        if !self.null_utility.is_finite() {
            return Err(Error::Config("behavior.null_utility must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.critique_prob) {
            return Err(Error::Config("behavior.critique_prob must lie in [0, 1]".into()));
        }
        let t = &self.termination;
        if !(0.0..=1.0).contains(&t.p0) {
            return Err(Error::Config("behavior.termination.p0 must lie in [0, 1]".into()));
        }
        if !(t.slope >= 0.0 && t.slope.is_finite()) {
            return Err(Error::Config("behavior.termination.slope must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlateMode {
    /// Null item included; a null draw is a rejection.
    Recommendation,
    /// Forced choice among the slate items.
    ItemQuery,
}

/// `φ_I(i)ᵀ φ` for every slate item.
pub fn slate_utilities(slate: &Slate, embedding: &[f64], catalog: &ItemCatalog) -> Result<Vec<f64>> {
    slate
        .items()
        .iter()
        .map(|id| Ok(dot(&catalog.require(*id)?.embedding, embedding)))
        .collect()
}

/// Multinomial-logit probabilities over the slate, with a trailing null
/// entry when `null_utility` is given.
pub fn choice_probs(utilities: &[f64], null_utility: Option<f64>, temperature: f64) -> Vec<f64> {
    match null_utility {
        Some(nu) => {
            let mut u = utilities.to_vec();
            u.push(nu);
            softmax(&u, temperature)
        }
        None => softmax(utilities, temperature),
    }
}

pub fn logit_choice_probs(
    slate: &Slate,
    embedding: &[f64],
    catalog: &ItemCatalog,
    config: &BehaviorConfig,
    include_null: bool,
) -> Result<Vec<f64>> {
    let utilities = slate_utilities(slate, embedding, catalog)?;
    let null = include_null.then_some(config.null_utility);
    Ok(choice_probs(&utilities, null, config.temperature))
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the cumulative total; take the last positive entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// `(max_i ||φ_I(i)||) · φ / ||φ||`, the user's ideal item. `None` for a zero vector.
pub fn target_from_embedding(embedding: &[f64], max_norm: f64) -> Option<Vec<f64>> {
    let n = norm(embedding);
    (n > 0.0 && n.is_finite()).then(|| embedding.iter().map(|v| max_norm * v / n).collect())
}

pub fn target_item(user_embedding: &[f64], catalog: &ItemCatalog) -> Result<Vec<f64>> {
    target_from_embedding(user_embedding, catalog.max_norm())
        .ok_or_else(|| Error::Degenerate("target item is undefined for a zero user embedding".into()))
}

pub fn slate_mean(items: &[ItemId], catalog: &ItemCatalog) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; catalog.dim()];
    for id in items {
        for (m, v) in mean.iter_mut().zip(&catalog.require(*id)?.embedding) {
            *m += v;
        }
    }
    let k = items.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// Probit argument `c_gᵀ(φ* − φ_S̄) / σ_g`.
pub fn attr_evidence(target: &[f64], slate_mean: &[f64], cav: &Cav) -> f64 {
    (dot(&cav.direction, target) - dot(&cav.direction, slate_mean)) / cav.sigma
}

/// Probability that a user with embedding `embedding` asks for more of
/// `cav` than the items in `slate`.
pub fn attr_more_prob(embedding: &[f64], slate: &[ItemId], cav: &Cav, catalog: &ItemCatalog) -> Result<f64> {
    let target = target_item(embedding, catalog)?;
    let mean = slate_mean(slate, catalog)?;
    Ok(std_normal_cdf(attr_evidence(&target, &mean, cav)))
}

fn attr_query_parts<'a>(query: &Query, cavs: &'a CavSet) -> Result<(ItemId, &'a Cav)> {
    match query {
        Query::Attr { item, attr } => Ok((*item, cavs.require(*attr)?)),
        Query::Item(_) => Err(Error::IncompatibleObservation(
            "expected an attribute query".into(),
        )),
    }
}

/// `P(ρ = +1)` for an attribute query.
pub fn attr_response_prob(
    query: &Query,
    user: &GroundTruthUser,
    cavs: &CavSet,
    catalog: &ItemCatalog,
) -> Result<f64> {
    let (item, cav) = attr_query_parts(query, cavs)?;
    attr_more_prob(&user.embedding, &[item], cav, catalog)
}

pub fn respond_to_attr_query<R: Rng + ?Sized>(
    query: &Query,
    user: &GroundTruthUser,
    cavs: &CavSet,
    catalog: &ItemCatalog,
    rng: &mut R,
) -> Result<Response> {
    let p = attr_response_prob(query, user, cavs, catalog)?;
    let more = rng.random::<f64>() < p;
    Ok(Response::AttrAnswer(if more { Direction::More } else { Direction::Less }))
}

/// `|c_gᵀ(φ* − φ_S̄)| / σ_g` for every attribute, in set order.
pub fn critique_saliences(
    slate: &Slate,
    user: &GroundTruthUser,
    cavs: &CavSet,
    catalog: &ItemCatalog,
) -> Result<Vec<f64>> {
    let target = target_item(&user.embedding, catalog)?;
    let mean = slate_mean(slate.items(), catalog)?;
    Ok(cavs
        .as_slice()
        .iter()
        .map(|cav| attr_evidence(&target, &mean, cav).abs())
        .collect())
}

/// Critiques the most salient attribute (lowest set index on ties); the
/// direction is drawn from the attribute-response probit.
pub fn select_critique<R: Rng + ?Sized>(
    slate: &Slate,
    user: &GroundTruthUser,
    cavs: &CavSet,
    catalog: &ItemCatalog,
    rng: &mut R,
) -> Result<Critique> {
    let saliences = critique_saliences(slate, user, cavs, catalog)?;
    let best = argmax(&saliences).ok_or_else(|| Error::Config("critiques need at least one attribute".into()))?;
    let cav = &cavs.as_slice()[best];
    let p = attr_more_prob(&user.embedding, slate.items(), cav, catalog)?;
    let direction = if rng.random::<f64>() < p {
        Direction::More
    } else {
        Direction::Less
    };
    Ok(Critique {
        attr: cav.id,
        direction,
    })
}

pub fn respond_to_slate<R: Rng + ?Sized>(
    slate: &Slate,
    user: &GroundTruthUser,
    cavs: &CavSet,
    catalog: &ItemCatalog,
    config: &BehaviorConfig,
    mode: SlateMode,
    rng: &mut R,
) -> Result<Response> {
    let include_null = mode == SlateMode::Recommendation;
    let probs = logit_choice_probs(slate, &user.embedding, catalog, config, include_null)?;
    let pick = sample_index(&probs, rng);
    Ok(match mode {
        SlateMode::ItemQuery => Response::ItemChoice(pick),
        SlateMode::Recommendation if pick < slate.len() => Response::SlateAccept(pick),
        SlateMode::Recommendation => {
            let critique = if !cavs.is_empty() && rng.random::<f64>() < config.critique_prob {
                Some(select_critique(slate, user, cavs, catalog, rng)?)
            } else {
                None
            };
            Response::SlateReject(critique)
        }
    })
}

/// Linear termination hazard `clamp(p0 + slope·turn, 0, 1)`; always false when disabled.
pub fn maybe_terminate<R: Rng + ?Sized>(turn_index: usize, config: &BehaviorConfig, rng: &mut R) -> bool {
    let t = &config.termination;
    if !t.enabled {
        return false;
    }
    let p = (t.p0 + t.slope * turn_index as f64).clamp(0.0, 1.0);
    rng.random::<f64>() < p
}
