//! Run configuration: TOML with one section per component, validated key by
//! key so that every violation is reported at once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use genrec::bench::Phase;
use genrec::cosette::CosetteConfig;
use genrec::marius::MariusConfig;
use genrec::sasrecpp::SasrecConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prepare,
    TrainQuantizer,
    Tokenize,
    Train,
    Evaluate,
    Bench,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Prepare, Stage::TrainQuantizer, Stage::Tokenize, Stage::Train, Stage::Evaluate, Stage::Bench];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainQuantizer => "train-quantizer",
            Stage::Tokenize => "tokenize",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Bench => "bench",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Upstream stages whose artifacts this stage reads.
    pub fn dependencies(self, family: Family) -> Vec<Stage> {
        match self {
            Stage::Prepare | Stage::Bench => vec![],
            Stage::TrainQuantizer => vec![Stage::Prepare],
            Stage::Tokenize => vec![Stage::Prepare, Stage::TrainQuantizer],
            Stage::Train if family.uses_semantic_ids() => vec![Stage::Prepare, Stage::Tokenize],
            Stage::Train => vec![Stage::Prepare],
            Stage::Evaluate if family.uses_semantic_ids() => vec![Stage::Prepare, Stage::Tokenize, Stage::Train],
            Stage::Evaluate => vec![Stage::Prepare, Stage::Train],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cosette,
    Marius,
    Sasrecpp,
    FlatSeq2seq,
}

impl Family {
    pub fn uses_semantic_ids(self) -> bool {
        matches!(self, Family::Marius | Family::FlatSeq2seq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `user, item, timestamp` rows; empty selects the planted generator.
    pub interactions: String,
    /// Raw little-endian `f32` rows aligned with first appearance of items
    /// in `interactions`.
    pub embeddings: String,
    pub min_interactions: usize,
    pub synthetic_items: usize,
    pub synthetic_users: usize,
    pub markov_order: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            interactions: String::new(),
            embeddings: String::new(),
            min_interactions: 5,
            synthetic_items: 2000,
            synthetic_users: 5000,
            markov_order: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: EvalSplit,
    pub ks: Vec<usize>,
    pub beam: usize,
    pub batch: usize,
    pub filter_seen: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: EvalSplit::Test, ks: vec![5, 10], beam: 20, batch: 64, filter_seen: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub phases: Vec<Phase>,
    pub beam: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub batches: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![25, 50, 100, 200],
            phases: vec![Phase::Train, Phase::Generate],
            beam: 10,
            batch_size: 4,
            warmup: 10,
            batches: 30,
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub family: Family,
    pub scale: String,
    pub out: String,
    pub stages: Vec<Stage>,
    pub data: DataConfig,
    pub cosette: CosetteConfig,
    pub marius: MariusConfig,
    pub sasrec: SasrecConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

const TOP_KEYS: [&str; 5] = ["seed", "family", "scale", "out", "stages"];
const SECTIONS: [&str; 6] = ["data", "cosette", "marius", "sasrec", "eval", "bench"];

fn default_stages() -> Vec<Stage> {
    vec![Stage::Prepare, Stage::TrainQuantizer, Stage::Tokenize, Stage::Train, Stage::Evaluate]
}

fn small_cosette() -> CosetteConfig {
    CosetteConfig { input_dim: 64, hidden: vec![256, 128], latent_dim: 32, ..CosetteConfig::default() }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    /// Parses and validates; every violation found is listed in one error.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(vec![e.to_string()]))?;
        let mut errors = Vec::new();
        for key in table.keys() {
            if !TOP_KEYS.contains(&key.as_str()) && !SECTIONS.contains(&key.as_str()) {
                errors.push(format!("unknown key `{key}`"));
            }
        }
        let seed = field(&table, "seed", 0u64, &mut errors);
        let family = field(&table, "family", Family::Marius, &mut errors);
        let scale = field(&table, "scale", "small".to_string(), &mut errors);
        let out = field(&table, "out", "runs/default".to_string(), &mut errors);
        let stage_names: Vec<String> =
            field(&table, "stages", default_stages().iter().map(|s| s.name().to_string()).collect(), &mut errors);
        let mut stages = Vec::new();
        for s in &stage_names {
            match Stage::parse(s) {
                Some(st) => stages.push(st),
                None => errors.push(format!("stages: unknown stage `{s}`")),
            }
        }
        let marius_base = MariusConfig::for_scale(&scale).unwrap_or_else(|e| {
            errors.push(format!("scale: {e}"));
            MariusConfig::default()
        });
        let data = section(&table, "data", DataConfig::default(), &mut errors);
        let cosette = section(&table, "cosette", small_cosette(), &mut errors);
        let marius = section(&table, "marius", marius_base, &mut errors);
        let sasrec = section(&table, "sasrec", SasrecConfig::default(), &mut errors);
        let eval = section(&table, "eval", EvalConfig::default(), &mut errors);
        let bench = section(&table, "bench", BenchConfig::default(), &mut errors);
        let cfg = RunConfig { seed, family, scale, out, stages, data, cosette, marius, sasrec, eval, bench };
        cfg.check(&mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(errors))
        }
    }

    fn check(&self, errors: &mut Vec<String>) {
        if let Err(e) = self.cosette.validate() {
            errors.push(format!("cosette: {e}"));
        }
        if let Err(e) = self.marius.validate() {
            errors.push(format!("marius: {e}"));
        }
        if self.family.uses_semantic_ids()
            && (self.marius.codebook_size, self.marius.levels) != (self.cosette.codebook_size, self.cosette.levels)
        {
            errors.push(format!(
                "marius K={} L={} must match cosette K={} L={}",
                self.marius.codebook_size, self.marius.levels, self.cosette.codebook_size, self.cosette.levels
            ));
        }
        if self.family == Family::Cosette && self.stages.iter().any(|s| matches!(s, Stage::Train | Stage::Evaluate)) {
            errors.push("family cosette only runs prepare, train-quantizer, tokenize and bench".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            errors.push("eval.ks must be non-empty and positive".into());
        }
        if self.eval.beam == 0 || self.eval.batch == 0 {
            errors.push("eval.beam and eval.batch must be positive".into());
        }
        if self.bench.lengths.is_empty() || self.bench.lengths.contains(&0) || self.bench.batches == 0 {
            errors.push("bench.lengths and bench.batches must be positive".into());
        }
        if self.data.interactions.is_empty() && (self.data.synthetic_items == 0 || self.data.synthetic_users == 0) {
            errors.push("data: the planted generator needs positive synthetic_items and synthetic_users".into());
        }
        if let Err(e) = check_stage_order(&self.stages, self.family) {
            errors.push(e);
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

/// Top-level scalar with a default; a type mismatch is recorded.
fn field<T: DeserializeOwned>(table: &Table, key: &str, default: T, errors: &mut Vec<String>) -> T {
    match table.get(key) {
        None => default,
        Some(v) => v.clone().try_into().unwrap_or_else(|e: toml::de::Error| {
            errors.push(format!("{key}: {}", e.message()));
            default
        }),
    }
}

/// Section overrides on top of `default`. Each key is tried alone against
/// the defaults so that all bad keys surface together.
fn section<T: Serialize + DeserializeOwned>(table: &Table, name: &str, default: T, errors: &mut Vec<String>) -> T {
    let Some(v) = table.get(name) else { return default };
    let Value::Table(overrides) = v else {
        errors.push(format!("`{name}` must be a section"));
        return default;
    };
    let base = match Value::try_from(&default) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config sections serialize to tables"),
    };
    let before = errors.len();
    for (key, value) in overrides {
        if !base.contains_key(key) {
            errors.push(format!("unknown key `{name}.{key}`"));
            continue;
        }
        let mut probe = base.clone();
        probe.insert(key.clone(), value.clone());
        if let Err(e) = Value::Table(probe).try_into::<T>() {
            errors.push(format!("{name}.{key}: {}", e.message()));
        }
    }
    if errors.len() > before {
        return default;
    }
    let mut merged = base;
    merged.extend(overrides.clone());
    Value::Table(merged).try_into().unwrap_or_else(|e: toml::de::Error| {
        errors.push(format!("{name}: {}", e.message()));
        default
    })
}

/// Rejects duplicate stages and any order that contradicts the dependency
/// graph, naming the cycle.
pub fn check_stage_order(stages: &[Stage], family: Family) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for s in stages {
        if !seen.insert(*s) {
            return Err(format!("stage `{s}` is listed twice"));
        }
    }
    let mut edges: BTreeMap<Stage, BTreeSet<Stage>> = BTreeMap::new();
    for &s in stages {
        for d in s.dependencies(family) {
            if seen.contains(&d) {
                edges.entry(d).or_default().insert(s);
            }
        }
    }
    for w in stages.windows(2) {
        edges.entry(w[0]).or_default().insert(w[1]);
    }
    let mut state: BTreeMap<Stage, u8> = BTreeMap::new();
    let mut path = Vec::new();
    for &s in stages {
        if let Some(cycle) = find_cycle(s, &edges, &mut state, &mut path) {
            let names: Vec<&str> = cycle.iter().map(|s| s.name()).collect();
            return Err(format!("stage order conflicts with dependencies: {}", names.join(" -> ")));
        }
    }
    Ok(())
}

fn find_cycle(
    s: Stage,
    edges: &BTreeMap<Stage, BTreeSet<Stage>>,
    state: &mut BTreeMap<Stage, u8>,
    path: &mut Vec<Stage>,
) -> Option<Vec<Stage>> {
    match state.get(&s) {
        Some(2) => return None,
        Some(1) => {
            let start = path.iter().position(|&p| p == s).expect("on path");
            let mut cycle = path[start..].to_vec();
            cycle.push(s);
            return Some(cycle);
        }
        _ => {}
    }
    state.insert(s, 1);
    path.push(s);
    for &next in edges.get(&s).into_iter().flatten() {
        if let Some(c) = find_cycle(next, edges, state, path) {
            return Some(c);
        }
    }
    path.pop();
    state.insert(s, 2);
    None
}
