//! Pipeline configuration: a TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use crssim::agent::AgentConfig;
use crssim::behavior::BehaviorConfig;
use crssim::belief::{RejectLikelihood, SamplerConfig};
use crssim::dialogue::InpaintPolicy;
use crssim::eval::{PairOrder, ProfileConfig, QuartilePolicy, Relevance};
use crssim::lm::{DecodingParams, HttpConfig};
use crssim::trajectory::{FailurePolicy, SimConfig};
use crssim::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub ratings: PathBuf,
    pub tags: PathBuf,
    pub catalog: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            ratings: "data/ratings.csv".into(),
            tags: "data/tags.csv".into(),
            catalog: "data/catalog.csv".into(),
            out_dir: "out".into(),
        }
    }
}

/// Generator settings for `ingest --synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_items: usize,
    pub n_users: usize,
    pub dim: usize,
    pub n_attrs: usize,
    pub ratings_per_user: usize,
    pub tag_fraction: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            n_items: 500,
            n_users: 200,
            dim: 8,
            n_attrs: 6,
            ratings_per_user: 60,
            tag_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub min_item_ratings: usize,
    pub min_user_ratings: usize,
    pub dim: usize,
    pub reg: f64,
    pub iters: usize,
    pub prior_scale: f64,
    /// Attributes to learn directions for; empty means every tag present.
    pub attributes: Vec<String>,
    pub cav_reg: f64,
    pub cav_iters: usize,
    pub cav_sigma: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            min_item_ratings: 0,
            min_user_ratings: 0,
            dim: 128,
            reg: 0.1,
            iters: 20,
            prior_scale: 1.0,
            attributes: Vec::new(),
            cav_reg: 1e-3,
            cav_iters: 2000,
            cav_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    /// Number of users to simulate, in rating-file order; 0 means all.
    pub users: usize,
    pub failure_policy: FailurePolicy,
    pub record_embedding: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            users: 0,
            failure_policy: FailurePolicy::Abort,
            record_embedding: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueStage {
    Templatized,
    #[default]
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Inclusive range `a..b` or a single turn.
    pub turns: String,
    /// Number of dialogues to evaluate; 0 means all.
    pub users: usize,
    /// Profile vocabulary: this many most-rated items.
    pub vocab_size: usize,
    pub stage: DialogueStage,
    /// Accuracy of the seeded oracle used by `--lm mock`.
    pub mock_accuracy: f64,
    pub profile: ProfileConfig,
    pub quartiles: QuartilePolicy,
    pub order: PairOrder,
    pub attempts: usize,
    pub relevance: Relevance,
    pub decoding: DecodingParams,
}

impl Default for EvalSection {
    fn default() -> Self {
        let base = crssim::eval::EvalConfig::default();
        Self {
            turns: "0..7".into(),
            users: 0,
            vocab_size: 500,
            stage: DialogueStage::Refined,
            mock_accuracy: 0.75,
            profile: base.profile,
            quartiles: base.quartiles,
            order: base.order,
            attempts: base.attempts,
            relevance: base.relevance,
            decoding: base.decoding,
        }
    }
}

impl EvalSection {
    pub fn turn_list(&self) -> Result<Vec<usize>> {
        let bad = || Error::Config(format!("eval.turns: expected `a..b` or `n`, found `{}`", self.turns));
        let (lo, hi) = match self.turns.split_once("..") {
            Some((a, b)) => (
                a.trim().parse::<usize>().map_err(|_| bad())?,
                b.trim().parse::<usize>().map_err(|_| bad())?,
            ),
            None => {
                let n = self.turns.trim().parse::<usize>().map_err(|_| bad())?;
                (n, n)
            }
        };
        if lo > hi {
            return Err(bad());
        }
        Ok((lo..=hi).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LmMode {
    #[default]
    Mock,
    Oracle,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub mode: LmMode,
    /// Text the mock inpainting model inserts after each speaker prefix.
    pub mock_marker: String,
    pub http: HttpConfig,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            mode: LmMode::Mock,
            mock_marker: String::new(),
            http: HttpConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub parallelism: usize,
    pub paths: Paths,
    pub synthetic: SyntheticSection,
    pub corpus: CorpusSection,
    pub simulation: SimulationSection,
    pub agent: AgentConfig,
    pub behavior: BehaviorConfig,
    pub sampler: SamplerConfig,
    pub reject: RejectLikelihood,
    pub inpaint: InpaintPolicy,
    pub eval: EvalSection,
    pub lm: LmSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallelism: 1,
            paths: Paths::default(),
            synthetic: SyntheticSection::default(),
            corpus: CorpusSection::default(),
            simulation: SimulationSection::default(),
            agent: AgentConfig::default(),
            behavior: BehaviorConfig::default(),
            sampler: SamplerConfig::default(),
            reject: RejectLikelihood::default(),
            inpaint: InpaintPolicy::default(),
            eval: EvalSection::default(),
            lm: LmSection::default(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be positive, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be at least {min}, got {v}")))
    }
}

impl PipelineConfig {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            agent: self.agent,
            behavior: self.behavior,
            sampler: self.sampler,
            reject: self.reject,
            record_embedding: self.simulation.record_embedding,
        }
    }

    /// Range checks that do not depend on data files.
    pub fn validate(&self) -> Result<()> {
        at_least("parallelism", self.parallelism, 1)?;
        let s = &self.synthetic;
        at_least("synthetic.n_items", s.n_items, 2)?;
        at_least("synthetic.n_users", s.n_users, 1)?;
        at_least("synthetic.dim", s.dim, 1)?;
        at_least("synthetic.ratings_per_user", s.ratings_per_user, 1)?;
        if !(s.tag_fraction > 0.0 && s.tag_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "synthetic.tag_fraction must lie in (0, 1], got {}",
                s.tag_fraction
            )));
        }
        let c = &self.corpus;
        at_least("corpus.dim", c.dim, 1)?;
        positive("corpus.reg", c.reg)?;
        positive("corpus.prior_scale", c.prior_scale)?;
        positive("corpus.cav_reg", c.cav_reg)?;
        positive("corpus.cav_sigma", c.cav_sigma)?;
        at_least("corpus.cav_iters", c.cav_iters, 1)?;
        self.sim_config().validate()?;
        self.inpaint.validate()?;
        self.eval_config().validate()?;
        self.eval.turn_list()?;
        at_least("eval.vocab_size", self.eval.vocab_size, self.eval.profile.size)?;
        if !(0.0..=1.0).contains(&self.eval.mock_accuracy) {
            return Err(Error::Config(format!(
                "eval.mock_accuracy must lie in [0, 1], got {}",
                self.eval.mock_accuracy
            )));
        }
        if self.lm.mode == LmMode::Http && self.lm.http.url.is_empty() {
            return Err(Error::Config("lm.http.url is required when lm.mode = \"http\"".into()));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> crssim::eval::EvalConfig {
        let e = &self.eval;
        crssim::eval::EvalConfig {
            profile: e.profile,
            quartiles: e.quartiles,
            order: e.order,
            attempts: e.attempts,
            relevance: e.relevance,
            decoding: e.decoding,
            seed: crssim::math::derive_seed(self.seed, crate::pipeline::EVAL_STREAM),
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Loads a TOML config, or the `config` object of a manifest when the path
/// ends in `.json`.
pub fn load_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
        let config = doc
            .get("config")
            .ok_or_else(|| Error::Config(format!("manifest {} has no `config` object", path.display())))?;
        let table: toml::Table = serde_json::from_value(config.clone())
            .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
        return Ok(table);
    }
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
}

pub fn resolve(table: toml::Table) -> Result<PipelineConfig> {
    let config: PipelineConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("config key `{path}`: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}
