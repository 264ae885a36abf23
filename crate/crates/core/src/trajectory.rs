//! The simulation loop and the trajectory record it produces.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{eu_star, step, AgentConfig, TurnState};
use crate::behavior::{
    maybe_terminate, respond_to_attr_query, respond_to_slate, AgentAction, BehaviorConfig, Critique,
    Direction, Query, Response, Slate, SlateMode,
};
use crate::belief::{BeliefState, ModelContext, Observation, RejectLikelihood, SamplerConfig};
use crate::corpus::{AttrId, CavSet, GroundTruthUser, ItemCatalog, ItemId, UserId, UserPrior};
use crate::error::{Error, Result};
use crate::math::{derive_seed, dot, rng_from_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRef {
    pub id: ItemId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttrRef {
    pub id: AttrId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CritiqueRef {
    pub id: AttrId,
    pub name: String,
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    AttrQuery,
    ItemQuery,
    Recommend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserKind {
    AttrResp,
    ItemChoice,
    Accept,
    Reject,
    Terminate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTurn {
    pub kind: AgentKind,
    /// The anchor item for attribute queries.
    pub slate: Vec<ItemRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<AttrRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTurn {
    pub kind: UserKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_idx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique: Option<CritiqueRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub agent: AgentTurn,
    pub user: UserTurn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    MaxTurns,
    Terminated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserInfo {
    pub id: UserId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

/// One simulated conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub user_info: UserInfo,
    pub seed: u64,
    pub turns: Vec<Turn>,
    pub outcome: Outcome,
}

fn item_ref(id: ItemId, catalog: &ItemCatalog) -> Result<ItemRef> {
    Ok(ItemRef {
        id,
        name: catalog.require(id)?.display_name(),
    })
}

fn attr_name(id: AttrId, cavs: &CavSet) -> Result<String> {
    Ok(cavs.require(id)?.name.clone())
}

impl Turn {
    /// Encodes an action and its response with display names.
    pub fn encode(action: &AgentAction, response: &Response, catalog: &ItemCatalog, cavs: &CavSet) -> Result<Self> {
        let slate_refs = |s: &Slate| s.items().iter().map(|id| item_ref(*id, catalog)).collect::<Result<Vec<_>>>();
        let agent = match action {
            AgentAction::Ask(Query::Attr { item, attr }) => AgentTurn {
                kind: AgentKind::AttrQuery,
                slate: vec![item_ref(*item, catalog)?],
                attr: Some(AttrRef {
                    id: *attr,
                    name: attr_name(*attr, cavs)?,
                }),
            },
            AgentAction::Ask(Query::Item(s)) => AgentTurn {
                kind: AgentKind::ItemQuery,
                slate: slate_refs(s)?,
                attr: None,
            },
            AgentAction::Recommend(s) => AgentTurn {
                kind: AgentKind::Recommend,
                slate: slate_refs(s)?,
                attr: None,
            },
        };
        let mut user = UserTurn {
            kind: UserKind::Terminate,
            direction: None,
            item_idx: None,
            critique: None,
        };
        match response {
            Response::AttrAnswer(d) => {
                user.kind = UserKind::AttrResp;
                user.direction = Some(*d);
            }
            Response::ItemChoice(i) => {
                user.kind = UserKind::ItemChoice;
                user.item_idx = Some(*i);
            }
            Response::SlateAccept(i) => {
                user.kind = UserKind::Accept;
                user.item_idx = Some(*i);
            }
            Response::SlateReject(c) => {
                user.kind = UserKind::Reject;
                user.critique = c
                    .map(|c| {
                        Ok::<_, Error>(CritiqueRef {
                            id: c.attr,
                            name: attr_name(c.attr, cavs)?,
                            direction: c.direction,
                        })
                    })
                    .transpose()?;
            }
            Response::Terminate => {}
        }
        Ok(Turn { agent, user })
    }

    /// Decodes into the action/response pair, checking field presence and
    /// compatibility.
    pub fn decode(&self) -> Result<Observation> {
        let ids: Vec<ItemId> = self.agent.slate.iter().map(|r| r.id).collect();
        let action = match self.agent.kind {
            AgentKind::AttrQuery => {
                let attr = self
                    .agent
                    .attr
                    .as_ref()
                    .ok_or_else(|| Error::Data("attr_query turn needs `attr`".into()))?;
                if ids.len() != 1 {
                    return Err(Error::Data("attr_query slate must hold exactly one item".into()));
                }
                AgentAction::Ask(Query::Attr {
                    item: ids[0],
                    attr: attr.id,
                })
            }
            AgentKind::ItemQuery => AgentAction::Ask(Query::Item(Slate::new(ids)?)),
            AgentKind::Recommend => AgentAction::Recommend(Slate::new(ids)?),
        };
        let need_idx = || {
            self.user
                .item_idx
                .ok_or_else(|| Error::Data(format!("{:?} response needs `item_idx`", self.user.kind)))
        };
        let response = match self.user.kind {
            UserKind::AttrResp => Response::AttrAnswer(
                self.user
                    .direction
                    .ok_or_else(|| Error::Data("attr_resp response needs `direction`".into()))?,
            ),
            UserKind::ItemChoice => Response::ItemChoice(need_idx()?),
            UserKind::Accept => Response::SlateAccept(need_idx()?),
            UserKind::Reject => Response::SlateReject(self.user.critique.as_ref().map(|c| Critique {
                attr: c.id,
                direction: c.direction,
            })),
            UserKind::Terminate => Response::Terminate,
        };
        Observation::new(action, response)
    }
}

impl Trajectory {
    /// Checks every turn and the outcome against the interaction flow.
    pub fn validate(&self) -> Result<()> {
        let schema = |path: String, e: Error| Error::Schema {
            path,
            message: e.to_string(),
        };
        let last = self.turns.len().checked_sub(1);
        for (n, turn) in self.turns.iter().enumerate() {
            let obs = turn.decode().map_err(|e| schema(format!("turns[{n}]"), e))?;
            let ends = matches!(obs.response, Response::SlateAccept(_) | Response::Terminate);
            if ends && Some(n) != last {
                return Err(Error::Schema {
                    path: format!("turns[{n}].user"),
                    message: "only the final turn may accept or terminate".into(),
                });
            }
        }
        let expected = match self.turns.last().map(|t| t.user.kind) {
            Some(UserKind::Accept) => Outcome::Accepted,
            Some(UserKind::Terminate) => Outcome::Terminated,
            _ => Outcome::MaxTurns,
        };
        if self.outcome != expected {
            return Err(Error::Schema {
                path: "outcome".into(),
                message: format!("outcome {:?} does not match the final turn", self.outcome),
            });
        }
        Ok(())
    }

    pub fn observations(&self) -> Result<Vec<Observation>> {
        self.turns.iter().map(Turn::decode).collect()
    }

    /// The accepted item, if the conversation ended in acceptance.
    pub fn accepted_item(&self) -> Option<ItemId> {
        let t = self.turns.last()?;
        match (t.user.kind, t.user.item_idx) {
            (UserKind::Accept, Some(i)) => t.agent.slate.get(i).map(|r| r.id),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let t: Trajectory = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }
}

pub fn write_jsonl(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in trajectories {
        writeln!(w, "{}", t.to_json()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Trajectory::from_json(&line).map_err(|e| match e {
            Error::Schema { path: p, message } => Error::Parse {
                path: path.display().to_string(),
                line: n as u64 + 1,
                message: format!("{p}: {message}"),
            },
            other => other,
        })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub agent: AgentConfig,
    pub behavior: BehaviorConfig,
    pub sampler: SamplerConfig,
    pub reject: RejectLikelihood,
    /// Store the ground-truth embedding in `user_info`.
    pub record_embedding: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.behavior.validate()?;
        self.sampler.validate()
    }
}

/// True utility of the agent's current best item after each number of
/// observations `0..=N`, carried forward once the conversation ends.
pub type ProgressTrace = Vec<f64>;

/// Runs one conversation between the agent and a simulated user.
pub fn simulate(
    user: &GroundTruthUser,
    prior: &UserPrior,
    catalog: &ItemCatalog,
    cavs: &CavSet,
    config: &SimConfig,
    seed: u64,
) -> Result<Trajectory> {
    run(user, prior, catalog, cavs, config, seed, false).map(|(t, _)| t)
}

/// [`simulate`] plus the per-turn utility of the agent's best item.
pub fn simulate_with_trace(
    user: &GroundTruthUser,
    prior: &UserPrior,
    catalog: &ItemCatalog,
    cavs: &CavSet,
    config: &SimConfig,
    seed: u64,
) -> Result<(Trajectory, ProgressTrace)> {
    run(user, prior, catalog, cavs, config, seed, true)
}

fn run(
    user: &GroundTruthUser,
    prior: &UserPrior,
    catalog: &ItemCatalog,
    cavs: &CavSet,
    config: &SimConfig,
    seed: u64,
    trace: bool,
) -> Result<(Trajectory, ProgressTrace)> {
    config.validate()?;
    let d = catalog.dim();
    if user.embedding.len() != d || prior.dim() != d {
        return Err(Error::Data(format!(
            "user {} has dimension {} and prior {}, catalog has {d}",
            user.user_id,
            user.embedding.len(),
            prior.dim()
        )));
    }
    if user.user_id != prior.user_id {
        return Err(Error::Data(format!(
            "ground truth for user {} paired with prior for user {}",
            user.user_id, prior.user_id
        )));
    }
    cavs.check_dim(d)?;

    let ctx = ModelContext {
        catalog,
        cavs,
        behavior: &config.behavior,
    };
    let sampler = SamplerConfig {
        seed: derive_seed(seed, 1),
        ..config.sampler
    };
    let mut belief = BeliefState::new(prior.clone(), sampler)?.with_reject_likelihood(config.reject);
    let mut agent_rng = rng_from_seed(derive_seed(seed, 2));
    let mut user_rng = rng_from_seed(derive_seed(seed, 3));

    let mut turns = Vec::new();
    let mut asked: Vec<Query> = Vec::new();
    let mut accepted: Vec<ItemId> = Vec::new();
    let mut progress = Vec::new();
    let mut outcome = Outcome::MaxTurns;
    let utility = |samples: &[Vec<f64>]| -> Result<f64> {
        let (_, best) = eu_star(samples, catalog)?;
        Ok(dot(&user.embedding, &catalog.require(best)?.embedding))
    };

    for n in 0..config.agent.max_turns {
        belief.mh_sample(&ctx)?;
        if trace {
            progress.push(utility(belief.samples())?);
        }
        let state = TurnState {
            samples: belief.samples(),
            turn_index: n,
            asked: &asked,
            accepted: &accepted,
        };
        let action = step(&state, ctx, &config.agent, &mut agent_rng)?.action;
        let response = match &action {
            AgentAction::Ask(Query::Item(s)) => respond_to_slate(
                s,
                user,
                cavs,
                catalog,
                &config.behavior,
                SlateMode::ItemQuery,
                &mut user_rng,
            )?,
            AgentAction::Ask(q @ Query::Attr { .. }) => respond_to_attr_query(q, user, cavs, catalog, &mut user_rng)?,
            AgentAction::Recommend(s) => {
                if maybe_terminate(n, &config.behavior, &mut user_rng) {
                    Response::Terminate
                } else {
                    respond_to_slate(
                        s,
                        user,
                        cavs,
                        catalog,
                        &config.behavior,
                        SlateMode::Recommendation,
                        &mut user_rng,
                    )?
                }
            }
        };
        turns.push(Turn::encode(&action, &response, catalog, cavs)?);
        if let AgentAction::Ask(q) = &action {
            asked.push(q.clone());
        }
        if let (AgentAction::Recommend(s), Response::SlateAccept(i)) = (&action, &response) {
            accepted.push(s.items()[*i]);
        }
        belief.update(Observation::new(action, response)?)?;
        match response {
            Response::SlateAccept(_) => {
                outcome = Outcome::Accepted;
                break;
            }
            Response::Terminate => {
                outcome = Outcome::Terminated;
                break;
            }
            _ => {}
        }
    }

    if trace {
        belief.mh_sample(&ctx)?;
        let last = utility(belief.samples())?;
        // The value after the final observation carries forward.
        progress.resize(config.agent.max_turns + 1, last);
    }

    let trajectory = Trajectory {
        user_info: UserInfo {
            id: user.user_id,
            embedding: config.record_embedding.then(|| user.embedding.clone()),
        },
        seed,
        turns,
        outcome,
    };
    Ok((trajectory, progress))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Stop at the first failed trajectory.
    #[default]
    Abort,
    /// Record the failure and continue.
    Record,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchFailure {
    pub user_id: UserId,
    pub message: String,
}

pub type BatchResult = std::result::Result<Trajectory, BatchFailure>;

/// Seed of one user's trajectory within a batch.
pub fn user_seed(base_seed: u64, user: UserId) -> u64 {
    derive_seed(base_seed, user.0)
}

/// Simulates every user on a pool of `parallelism` threads. Results keep the
/// input order and do not depend on the thread count.
pub fn simulate_batch(
    users: &[(GroundTruthUser, UserPrior)],
    catalog: &ItemCatalog,
    cavs: &CavSet,
    config: &SimConfig,
    base_seed: u64,
    parallelism: usize,
    policy: FailurePolicy,
) -> Result<Vec<BatchResult>> {
    if users.is_empty() {
        return Err(Error::Config("batch needs at least one user".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Trajectory>> = pool.install(|| {
        users
            .par_iter()
            .map(|(u, p)| simulate(u, p, catalog, cavs, config, user_seed(base_seed, u.user_id)))
            .collect()
    });
    results
        .into_iter()
        .zip(users)
        .map(|(r, (u, _))| match (r, policy) {
            (Ok(t), _) => Ok(Ok(t)),
            (Err(e), FailurePolicy::Abort) => Err(e),
            (Err(e), FailurePolicy::Record) => Ok(Err(BatchFailure {
                user_id: u.user_id,
                message: e.to_string(),
            })),
        })
        .collect()
}
