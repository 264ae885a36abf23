//! Templated rendering of trajectories and turn-by-turn LM refinement.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::Direction;
use crate::corpus::{CavSet, ItemCatalog, UserId};
use crate::error::{Error, Result};
use crate::lm::{DecodingParams, LmClient, LmRequest};
use crate::trajectory::{AgentKind, ItemRef, Trajectory, UserKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    User,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Agent => "Agent",
            Speaker::User => "User",
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Speaker::Agent => "Agent:",
            Speaker::User => "User:",
        }
    }
}

/// Which instruction block a turn is refined with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Recommend,
    ItemElicit,
    AttrElicit,
    User,
}

impl TurnKind {
    pub fn speaker(self) -> Speaker {
        match self {
            TurnKind::User => Speaker::User,
            _ => Speaker::Agent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Templatized,
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub kind: TurnKind,
    pub text: String,
    /// Set when refinement failed and the templatized text was kept.
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRef {
    pub user_id: UserId,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub trajectory_ref: TrajectoryRef,
    pub stage: Stage,
    pub turns: Vec<DialogueTurn>,
}

impl Dialogue {
    /// `Speaker: text` lines joined by newlines.
    pub fn text(&self) -> String {
        self.turns.iter().map(turn_line).collect::<Vec<_>>().join("\n")
    }
}

fn turn_line(t: &DialogueTurn) -> String {
    format!("{}: {}", t.speaker.label(), t.text)
}

fn title_list(items: &[ItemRef], catalog: &ItemCatalog) -> Result<String> {
    Ok(items
        .iter()
        .map(|r| title(r, catalog))
        .collect::<Result<Vec<_>>>()?
        .join(", "))
}

fn title(r: &ItemRef, catalog: &ItemCatalog) -> Result<String> {
    Ok(catalog.require(r.id)?.display_name())
}

fn picked(items: &[ItemRef], idx: Option<usize>) -> Result<&ItemRef> {
    idx.and_then(|i| items.get(i))
        .ok_or_else(|| Error::Data("response index is outside the slate".into()))
}

/// Maps each action and response to its fixed template. A trajectory that
/// ends by terminating contributes no user line for its last turn.
pub fn render_templates(trajectory: &Trajectory, catalog: &ItemCatalog, cavs: &CavSet) -> Result<Dialogue> {
    let mut turns = Vec::with_capacity(2 * trajectory.turns.len());
    let attr = |id| -> Result<String> { Ok(cavs.require(id)?.name.clone()) };
    for t in &trajectory.turns {
        let slate = &t.agent.slate;
        let first = slate
            .first()
            .ok_or_else(|| Error::Data("agent turn has an empty slate".into()))?;
        let (kind, text) = match t.agent.kind {
            AgentKind::AttrQuery => {
                let a = t
                    .agent
                    .attr
                    .as_ref()
                    .ok_or_else(|| Error::Data("attr_query turn needs `attr`".into()))?;
                (
                    TurnKind::AttrElicit,
                    format!(
                        "What do you think about {}? Do you want something more {} than this?",
                        title(first, catalog)?,
                        attr(a.id)?
                    ),
                )
            }
            AgentKind::ItemQuery => (
                TurnKind::ItemElicit,
                format!("Which of these movies do you prefer? {}", title_list(slate, catalog)?),
            ),
            AgentKind::Recommend => (
                TurnKind::Recommend,
                format!(
                    "These are {} movies you might like: {}",
                    slate.len(),
                    title_list(slate, catalog)?
                ),
            ),
        };
        turns.push(DialogueTurn {
            speaker: Speaker::Agent,
            kind,
            text,
            flagged: false,
        });

        let u = &t.user;
        let reply = match u.kind {
            UserKind::AttrResp => {
                let a = t
                    .agent
                    .attr
                    .as_ref()
                    .ok_or_else(|| Error::Data("attr_query turn needs `attr`".into()))?;
                let name = attr(a.id)?;
                match u.direction {
                    Some(Direction::Less) => Some(format!("No, I want something less {name}.")),
                    Some(Direction::More) => Some(format!("Yes, I want something more {name}.")),
                    None => return Err(Error::Data("attr_resp response needs `direction`".into())),
                }
            }
            UserKind::ItemChoice => Some(format!("I'd choose {}.", title(picked(slate, u.item_idx)?, catalog)?)),
            UserKind::Accept => Some(format!(
                "{} is what I am looking for! Thanks.",
                title(picked(slate, u.item_idx)?, catalog)?
            )),
            UserKind::Reject => Some(match &u.critique {
                Some(c) => format!(
                    "No. I don't like them. Do you have something {} {} than {}?",
                    c.direction.word(),
                    attr(c.id)?,
                    title(first, catalog)?
                ),
                None => "No. I don't like them.".to_string(),
            }),
            UserKind::Terminate => None,
        };
        if let Some(text) = reply {
            turns.push(DialogueTurn {
                speaker: Speaker::User,
                kind: TurnKind::User,
                text,
                flagged: false,
            });
        }
    }
    Ok(Dialogue {
        trajectory_ref: TrajectoryRef {
            user_id: trajectory.user_info.id,
            seed: trajectory.seed,
        },
        stage: Stage::Templatized,
        turns,
    })
}

const CONTEXT: &str = "Above is a conversation between an agent and a user in turns. The agent tries to find the user's preference by asking questions and then recommends movies the user would like to watch.";

fn requirements(kind: TurnKind) -> &'static [&'static str] {
    const AGENT: [&str; 3] = [
        "1. Begin with \"Agent:\" without new lines.",
        "2. Must include the movie title followed by the released year (e.g., Gravity (2013)).",
        "3. Include short comments about movies.",
    ];
    const ITEM: [&str; 5] = [
        AGENT[0],
        AGENT[1],
        AGENT[2],
        "4. Do not recommend the movies but ask preference between them.",
        "5. Ask a comparison question at the end.",
    ];
    const ATTR: [&str; 4] = [AGENT[0], AGENT[1], AGENT[2], "4. Do not recommend the movies."];
    const USER: [&str; 3] = [
        "1. Begin with \"User:\" without new lines.",
        "2. Must be consistent with what the user said in the earlier turns in the conversation.",
        "3. Explain very briefly the rationale of the choice.",
    ];
    match kind {
        TurnKind::Recommend => &AGENT,
        TurnKind::ItemElicit => &ITEM,
        TurnKind::AttrElicit => &ATTR,
        TurnKind::User => &USER,
    }
}

/// The refinement prompt for `current`, given the turns before it. Nothing
/// after `current` is ever included.
pub fn build_prompt(context: &[DialogueTurn], current: &DialogueTurn) -> String {
    let mut lines: Vec<String> = context.iter().map(turn_line).collect();
    lines.push(turn_line(current));
    lines.push(String::new());
    lines.push(CONTEXT.to_string());
    lines.push(format!(
        "Rephrase the last {} turn and it should satisfy following requirements.",
        current.speaker.label()
    ));
    lines.extend(requirements(current.kind).iter().map(|s| s.to_string()));
    lines.join("\n")
}

pub const MAX_TURN_CHARS: usize = 1000;

/// Strips the speaker prefix and checks the single-line and length rules.
pub fn validate_output(raw: &str, speaker: Speaker) -> Option<String> {
    let rest = raw.trim().strip_prefix(speaker.prefix())?.trim();
    let ok = !rest.is_empty() && !rest.contains(['\n', '\r']) && rest.chars().count() <= MAX_TURN_CHARS;
    ok.then(|| rest.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassMode {
    /// User turns against templatized agent turns, then agent turns against
    /// refined user turns.
    #[default]
    TwoPass,
    /// One interleaved pass over all turns in order.
    SinglePass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintPolicy {
    pub mode: PassMode,
    /// Attempts per turn before keeping the templatized text.
    pub attempts: usize,
    pub decoding: DecodingParams,
}

impl InpaintPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.attempts == 0 {
            return Err(Error::Config("inpaint.attempts must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for InpaintPolicy {
    fn default() -> Self {
        Self {
            mode: PassMode::TwoPass,
            attempts: 3,
            decoding: DecodingParams::default(),
        }
    }
}

fn refine_turn(context: &[DialogueTurn], current: &DialogueTurn, lm: &dyn LmClient, policy: &InpaintPolicy) -> Result<DialogueTurn> {
    let request = LmRequest::new(build_prompt(context, current), &policy.decoding);
    for _ in 0..policy.attempts.max(1) {
        match lm.generate(&request) {
            Ok(resp) => {
                if let Some(text) = validate_output(&resp.text, current.speaker) {
                    return Ok(DialogueTurn {
                        text,
                        flagged: false,
                        ..current.clone()
                    });
                }
            }
            Err(e) if e.is_retryable() => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(DialogueTurn {
        flagged: true,
        ..current.clone()
    })
}

/// Rewrites every turn through `lm`. Turn count, order and speakers are
/// preserved; a turn whose attempts all fail keeps its text and is flagged.
pub fn inpaint(templatized: &Dialogue, lm: &dyn LmClient, policy: &InpaintPolicy) -> Result<Dialogue> {
    policy.validate()?;
    if templatized.stage != Stage::Templatized {
        return Err(Error::Data("only templatized dialogues can be refined".into()));
    }
    let source = &templatized.turns;
    let mut out: Vec<DialogueTurn> = source.clone();
    match policy.mode {
        PassMode::SinglePass => {
            for i in 0..source.len() {
                out[i] = refine_turn(&out[..i], &source[i], lm, policy)?;
            }
        }
        PassMode::TwoPass => {
            for speaker in [Speaker::User, Speaker::Agent] {
                for i in 0..source.len() {
                    if source[i].speaker == speaker {
                        out[i] = refine_turn(&out[..i], &source[i], lm, policy)?;
                    }
                }
            }
        }
    }
    Ok(Dialogue {
        trajectory_ref: templatized.trajectory_ref,
        stage: Stage::Refined,
        turns: out,
    })
}

/// Refines dialogues concurrently; output order matches input order.
pub fn inpaint_batch(
    dialogues: &[Dialogue],
    lm: &dyn LmClient,
    policy: &InpaintPolicy,
    parallelism: usize,
) -> Result<Vec<Dialogue>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dialogues.par_iter().map(|d| inpaint(d, lm, policy)).collect())
}

pub fn write_jsonl(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in dialogues {
        let line = serde_json::to_string(d).expect("dialogue serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        out.push(serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: n as u64 + 1,
            message: format!("{}: {}", e.path(), e.inner()),
        })?);
    }
    Ok(out)
}
