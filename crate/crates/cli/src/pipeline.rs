//! Pipeline stages. Each reads its inputs from the configured paths or the
//! output directory and writes its artifacts back to the output directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crssim::corpus::synthetic::{raw_corpus, SyntheticSpec};
use crssim::corpus::{
    cav_training_sets, learn_cav, load_ratings, read_catalog_csv, read_embeddings, read_tags_csv, train_mf,
    write_cavs, write_catalog_csv, write_embeddings, write_ratings_csv, write_tags_csv, AttrId, CavConfig, CavSet,
    GroundTruthUser, ItemCatalog, ItemId, MfConfig, UserId, UserPrior,
};
use crssim::dialogue::{self, Dialogue};
use crssim::eval::{evaluate, EvalCase, Judge};
use crssim::lm::{EchoLm, HttpLmClient, LmClient};
use crssim::math::derive_seed;
use crssim::trajectory::{self, simulate_batch};
use crssim::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DialogueStage, LmMode, PipelineConfig};

pub const RATINGS: &str = "ratings.filtered.csv";
pub const ITEMS: &str = "items.emb";
pub const USERS: &str = "users.emb";
pub const PRIORS: &str = "priors.jsonl";
pub const CAVS: &str = "cavs.json";
pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const FAILURES: &str = "failures.jsonl";
pub const TEMPLATIZED: &str = "dialogues.templatized.jsonl";
pub const REFINED: &str = "dialogues.refined.jsonl";
pub const REPORT: &str = "eval_report.json";
pub const EVAL_RECORDS: &str = "eval_records.jsonl";
pub const MANIFEST: &str = "manifest.json";

const SYNTHETIC_STREAM: u64 = 1;
const MF_STREAM: u64 = 2;
const CAV_STREAM: u64 = 3;
const SIM_STREAM: u64 = 4;
pub const EVAL_STREAM: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Ingest,
    TrainMf,
    LearnCavs,
    Simulate,
    Render,
    Inpaint,
    Evaluate,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::TrainMf => "train-mf",
            Command::LearnCavs => "learn-cavs",
            Command::Simulate => "simulate",
            Command::Render => "render",
            Command::Inpaint => "inpaint",
            Command::Evaluate => "evaluate",
            Command::All => "all",
        }
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub synthetic: bool,
    out: PathBuf,
}

fn require_input(key: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: file not found: {}", path.display())))
    }
}

fn json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub commands: Vec<String>,
    /// Artifact file name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, synthetic: bool) -> Self {
        let out = config.paths.out_dir.clone();
        Self { config, synthetic, out }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// An artifact produced by an earlier stage.
    fn dependency(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let path = self.artifact(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::Data(format!(
                "missing {}; run `{producer}` first",
                path.display()
            )))
        }
    }

    pub fn run(&self, command: Command) -> Result<Vec<&'static str>> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let written = match command {
            Command::Ingest => self.ingest()?,
            Command::TrainMf => self.train_mf()?,
            Command::LearnCavs => self.learn_cavs()?,
            Command::Simulate => self.simulate()?,
            Command::Render => self.render()?,
            Command::Inpaint => self.inpaint()?,
            Command::Evaluate => self.evaluate()?,
            Command::All => {
                let mut all = Vec::new();
                for c in [
                    Command::Ingest,
                    Command::TrainMf,
                    Command::LearnCavs,
                    Command::Simulate,
                    Command::Render,
                    Command::Inpaint,
                    Command::Evaluate,
                ] {
                    all.extend(self.run(c)?);
                }
                return Ok(all);
            }
        };
        self.write_manifest(command, &written)?;
        Ok(written)
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let s = self.config.seed;
        BTreeMap::from([
            ("base".to_string(), s),
            ("synthetic".to_string(), derive_seed(s, SYNTHETIC_STREAM)),
            ("mf".to_string(), derive_seed(s, MF_STREAM)),
            ("cav".to_string(), derive_seed(s, CAV_STREAM)),
            ("simulate".to_string(), derive_seed(s, SIM_STREAM)),
            ("eval".to_string(), derive_seed(s, EVAL_STREAM)),
        ])
    }

    /// Merges this run into the manifest. A changed config starts a fresh
    /// manifest.
    fn write_manifest(&self, command: Command, written: &[&str]) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        let config_hash = hex_digest(serde_json::to_string(&config).expect("json").as_bytes());
        let path = self.artifact(MANIFEST);
        let mut manifest = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
            .filter(|m| m.config_hash == config_hash)
            .unwrap_or_default();
        manifest.version = env!("CARGO_PKG_VERSION").to_string();
        manifest.config_hash = config_hash;
        manifest.seeds = self.seeds();
        manifest.config = config;
        if !manifest.commands.iter().any(|c| c == command.name()) {
            manifest.commands.push(command.name().to_string());
        }
        for name in written {
            let bytes = fs::read(self.artifact(name)).map_err(|e| Error::io(*name, e))?;
            manifest.artifacts.insert(name.to_string(), hex_digest(&bytes));
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    fn ingest(&self) -> Result<Vec<&'static str>> {
        let p = &self.config.paths;
        if self.synthetic {
            let s = &self.config.synthetic;
            let spec = SyntheticSpec {
                n_items: s.n_items,
                n_users: s.n_users,
                dim: s.dim,
                n_attrs: s.n_attrs,
                seed: derive_seed(self.config.seed, SYNTHETIC_STREAM),
                ..SyntheticSpec::default()
            };
            let raw = raw_corpus(&spec, s.ratings_per_user, s.tag_fraction)?;
            for path in [&p.ratings, &p.tags, &p.catalog] {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
            }
            write_ratings_csv(&p.ratings, &raw.ratings)?;
            write_tags_csv(&p.tags, &raw.tags)?;
            write_catalog_csv(&p.catalog, &raw.titles)?;
        }
        require_input("paths.ratings", &p.ratings)?;
        let c = &self.config.corpus;
        let data = load_ratings(&p.ratings, c.min_item_ratings, c.min_user_ratings)?;
        write_ratings_csv(self.artifact(RATINGS), data.records())?;
        Ok(vec![RATINGS])
    }

    fn train_mf(&self) -> Result<Vec<&'static str>> {
        let path = self.dependency(RATINGS, "ingest")?;
        let data = load_ratings(path, 0, 0)?;
        let c = &self.config.corpus;
        let model = train_mf(
            &data,
            &MfConfig {
                dim: c.dim,
                reg: c.reg,
                iters: c.iters,
                seed: derive_seed(self.config.seed, MF_STREAM),
                prior_scale: c.prior_scale,
                ..MfConfig::default()
            },
        )?;
        let items: Vec<(u64, Vec<f64>)> = model.item_embeddings.iter().map(|(id, v)| (id.0, v.clone())).collect();
        write_embeddings(self.artifact(ITEMS), model.dim, &items)?;
        let users: Vec<(u64, Vec<f64>)> = model.users.iter().map(|u| (u.user_id.0, u.embedding.clone())).collect();
        write_embeddings(self.artifact(USERS), model.dim, &users)?;
        json_lines(&self.artifact(PRIORS), &model.priors)?;
        Ok(vec![ITEMS, USERS, PRIORS])
    }

    fn catalog(&self) -> Result<ItemCatalog> {
        let path = self.dependency(ITEMS, "train-mf")?;
        require_input("paths.catalog", &self.config.paths.catalog)?;
        let titles = read_catalog_csv(&self.config.paths.catalog)?;
        let (_, rows) = read_embeddings(path)?;
        let rows: Vec<(ItemId, Vec<f64>)> = rows.into_iter().map(|(id, v)| (ItemId(id), v)).collect();
        ItemCatalog::from_embeddings(&rows, &titles)
    }

    fn cavs(&self) -> Result<CavSet> {
        crssim::corpus::read_cavs(self.dependency(CAVS, "learn-cavs")?)
    }

    fn users(&self) -> Result<Vec<(GroundTruthUser, UserPrior)>> {
        let (_, rows) = read_embeddings(self.dependency(USERS, "train-mf")?)?;
        let path = self.dependency(PRIORS, "train-mf")?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut priors = HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let p: UserPrior = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: n as u64 + 1,
                message: e.to_string(),
            })?;
            priors.insert(p.user_id, p);
        }
        rows.into_iter()
            .map(|(id, emb)| {
                let prior = priors
                    .remove(&UserId(id))
                    .ok_or_else(|| Error::Data(format!("user {id} has no prior")))?;
                Ok((GroundTruthUser::new(UserId(id), emb)?, prior))
            })
            .collect()
    }

    fn learn_cavs(&self) -> Result<Vec<&'static str>> {
        let catalog = self.catalog()?;
        require_input("paths.tags", &self.config.paths.tags)?;
        let tags = read_tags_csv(&self.config.paths.tags)?;
        let c = &self.config.corpus;
        let names: Vec<String> = if c.attributes.is_empty() {
            let mut all: Vec<String> = tags.iter().map(|t| t.tag.clone()).collect();
            all.sort();
            all.dedup();
            all
        } else {
            c.attributes.clone()
        };
        let cfg = CavConfig {
            reg: c.cav_reg,
            iters: c.cav_iters,
            sigma: c.cav_sigma,
        };
        let base = derive_seed(self.config.seed, CAV_STREAM);
        let cavs = names
            .iter()
            .enumerate()
            .map(|(g, name)| {
                let (pos, neg) = cav_training_sets(&tags, &catalog, name, derive_seed(base, g as u64));
                learn_cav(&catalog, &pos, &neg, AttrId(g as u32), name, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        write_cavs(self.artifact(CAVS), &CavSet::new(cavs)?)?;
        Ok(vec![CAVS])
    }

    fn simulate(&self) -> Result<Vec<&'static str>> {
        let catalog = self.catalog()?;
        let cavs = self.cavs()?;
        let mut users = self.users()?;
        if self.config.simulation.users > 0 {
            users.truncate(self.config.simulation.users);
        }
        let results = simulate_batch(
            &users,
            &catalog,
            &cavs,
            &self.config.sim_config(),
            derive_seed(self.config.seed, SIM_STREAM),
            self.config.parallelism,
            self.config.simulation.failure_policy,
        )?;
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for r in results {
            match r {
                Ok(t) => ok.push(t),
                Err(f) => failed.push(serde_json::json!({"user_id": f.user_id, "message": f.message})),
            }
        }
        trajectory::write_jsonl(self.artifact(TRAJECTORIES), &ok)?;
        let mut written = vec![TRAJECTORIES];
        if !failed.is_empty() {
            json_lines(&self.artifact(FAILURES), &failed)?;
            written.push(FAILURES);
        }
        Ok(written)
    }

    fn render(&self) -> Result<Vec<&'static str>> {
        let catalog = self.catalog()?;
        let cavs = self.cavs()?;
        let trajectories = trajectory::read_jsonl(self.dependency(TRAJECTORIES, "simulate")?)?;
        let dialogues = trajectories
            .iter()
            .map(|t| dialogue::render_templates(t, &catalog, &cavs))
            .collect::<Result<Vec<_>>>()?;
        dialogue::write_jsonl(self.artifact(TEMPLATIZED), &dialogues)?;
        Ok(vec![TEMPLATIZED])
    }

    fn http_client(&self) -> Result<HttpLmClient> {
        Ok(HttpLmClient::new(self.config.lm.http.clone())?)
    }

    fn inpaint(&self) -> Result<Vec<&'static str>> {
        let templatized = dialogue::read_jsonl(self.dependency(TEMPLATIZED, "render")?)?;
        let refined = match self.config.lm.mode {
            LmMode::Http => {
                let lm = self.http_client()?;
                dialogue::inpaint_batch(&templatized, &lm, &self.config.inpaint, self.config.parallelism)?
            }
            LmMode::Mock | LmMode::Oracle => {
                let lm = EchoLm::new(self.config.lm.mock_marker.clone());
                dialogue::inpaint_batch(&templatized, &lm, &self.config.inpaint, self.config.parallelism)?
            }
        };
        dialogue::write_jsonl(self.artifact(REFINED), &refined)?;
        Ok(vec![REFINED])
    }

    /// The most-rated items, ties broken by id.
    fn vocabulary(&self, catalog: &ItemCatalog) -> Result<Vec<ItemId>> {
        let data = load_ratings(self.dependency(RATINGS, "ingest")?, 0, 0)?;
        let mut counts: BTreeMap<ItemId, usize> = BTreeMap::new();
        for r in data.records() {
            *counts.entry(r.item).or_default() += 1;
        }
        let mut ranked: Vec<(usize, ItemId)> = counts
            .into_iter()
            .filter(|(id, _)| catalog.get(*id).is_some())
            .map(|(id, n)| (n, id))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(ranked
            .into_iter()
            .take(self.config.eval.vocab_size)
            .map(|(_, id)| id)
            .collect())
    }

    fn evaluate(&self) -> Result<Vec<&'static str>> {
        let catalog = self.catalog()?;
        let (name, producer) = match self.config.eval.stage {
            DialogueStage::Templatized => (TEMPLATIZED, "render"),
            DialogueStage::Refined => (REFINED, "inpaint"),
        };
        let mut dialogues: Vec<Dialogue> = dialogue::read_jsonl(self.dependency(name, producer)?)?;
        if self.config.eval.users > 0 {
            dialogues.truncate(self.config.eval.users);
        }
        let users: HashMap<UserId, (GroundTruthUser, UserPrior)> =
            self.users()?.into_iter().map(|(u, p)| (u.user_id, (u, p))).collect();
        let cases = dialogues
            .iter()
            .map(|d| {
                let (user, prior) = users
                    .get(&d.trajectory_ref.user_id)
                    .ok_or_else(|| Error::Data(format!("dialogue refers to unknown user {}", d.trajectory_ref.user_id)))?;
                Ok(EvalCase { user, prior, dialogue: d })
            })
            .collect::<Result<Vec<_>>>()?;
        let vocab = self.vocabulary(&catalog)?;
        let candidates: Vec<ItemId> = catalog.items().iter().map(|i| i.id).collect();
        let turns = self.config.eval.turn_list()?;
        let http;
        let judge = match self.config.lm.mode {
            LmMode::Mock => Judge::NoisyOracle {
                accuracy: self.config.eval.mock_accuracy,
            },
            LmMode::Oracle => Judge::Oracle,
            LmMode::Http => {
                http = self.http_client()?;
                Judge::Lm(&http as &dyn LmClient)
            }
        };
        let (report, records) = evaluate(
            &cases,
            &catalog,
            &vocab,
            &candidates,
            &turns,
            &judge,
            &self.config.eval_config(),
            self.config.parallelism,
        )?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        let path = self.artifact(REPORT);
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        json_lines(&self.artifact(EVAL_RECORDS), &records)?;
        Ok(vec![REPORT, EVAL_RECORDS])
    }
}
