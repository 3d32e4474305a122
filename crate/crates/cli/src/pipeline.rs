//! Stage execution. Every stage writes only `<out>/<stage>/` and records a
//! manifest; a stage whose inputs and settings are unchanged is skipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use genrec::bench::{
    fit_records, scaling_sweep, train_flat, write_csv, FlatBench, FlatRecommender, FlatSeq2SeqConfig, Protocol,
};
use genrec::cosette::{train_cosette, unique_ratio, Quantizer, SemanticIdTable};
use genrec::data::{
    filter_synthetic, generate_synthetic, ingest_interactions, k_core_filter, load_embedding_matrix,
    split_leave_last_out, EmbeddingMatrix, Event, InteractionDataset, SplitKind, SyntheticConfig,
};
use genrec::eval::{evaluate_model, Recommender};
use genrec::marius::{train_marius, MariusRecommender, MariusState};
use genrec::sasrecpp::{train_sasrec, SasrecState};
use genrec_substrate::checkpoint;
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalSplit, Family, RunConfig, Stage};
use crate::error::CliError;
use crate::manifest::{hash_bytes, hash_file, StageManifest};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const DATASET: &str = "interactions.tsv";
const EMBEDDINGS: &str = "embeddings.bin";
const SPLIT: &str = "split.json";
const QUANTIZER: &str = "quantizer.ckpt";
const SEMANTIC_IDS: &str = "semantic_ids.tsv";
const MODEL: &str = "model.ckpt";
const METRICS: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.name())
}

/// Runs `stages` in order, writing the effective configuration first.
pub fn run(cfg: &RunConfig, stages: &[Stage], log: &mut dyn Write) -> Result<Vec<(Stage, Outcome)>, CliError> {
    let out = cfg.out_dir();
    let wrap = |stage: Stage| move |e: anyhow::Error| CliError::Stage { stage: stage.to_string(), source: e };
    fs::create_dir_all(&out).map_err(|e| wrap(stages.first().copied().unwrap_or(Stage::Prepare))(e.into()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| wrap(Stage::Prepare)(e.into()))?;
    let mut done = Vec::with_capacity(stages.len());
    for &stage in stages {
        for dep in stage.dependencies(cfg.family) {
            if StageManifest::read(&stage_dir(&out, dep)).is_none() {
                return Err(CliError::Dependency {
                    stage: stage.to_string(),
                    upstream: dep.to_string(),
                    out: out.display().to_string(),
                });
            }
        }
        let outcome = run_stage(cfg, stage, log).map_err(wrap(stage))?;
        let _ = writeln!(log, "[{stage}] {}", if outcome == Outcome::Ran { "done" } else { "up to date" });
        done.push((stage, outcome));
    }
    Ok(done)
}

fn run_stage(cfg: &RunConfig, stage: Stage, log: &mut dyn Write) -> Result<Outcome> {
    let out = cfg.out_dir();
    let dir = stage_dir(&out, stage);
    let expected = StageManifest {
        stage: stage.to_string(),
        seed: cfg.seed,
        version: VERSION.to_string(),
        config: config_hash(cfg, stage)?,
        inputs: input_hashes(cfg, stage)?,
        outputs: BTreeMap::new(),
    };
    if StageManifest::read(&dir).is_some_and(|m| m.is_current(&expected, &dir)) {
        return Ok(Outcome::UpToDate);
    }
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let _ = writeln!(log, "[{stage}] running");
    let written = match stage {
        Stage::Prepare => prepare(cfg, &dir)?,
        Stage::TrainQuantizer => train_quantizer(cfg, &dir, log)?,
        Stage::Tokenize => tokenize(cfg, &dir)?,
        Stage::Train => train(cfg, &dir, log)?,
        Stage::Evaluate => evaluate(cfg, &dir, log)?,
        Stage::Bench => bench(cfg, &dir)?,
    };
    let mut outputs = BTreeMap::new();
    for name in written {
        outputs.insert(name.to_string(), hash_file(&dir.join(name))?);
    }
    StageManifest { outputs, ..expected }.write(&dir)?;
    Ok(Outcome::Ran)
}

fn config_hash(cfg: &RunConfig, stage: Stage) -> Result<String> {
    let slice = match stage {
        Stage::Prepare => json!({ "data": cfg.data }),
        Stage::TrainQuantizer | Stage::Tokenize => json!({ "cosette": cfg.cosette }),
        Stage::Train => json!({ "family": cfg.family, "model": model_config(cfg) }),
        Stage::Evaluate => json!({ "family": cfg.family, "model": model_config(cfg), "eval": cfg.eval }),
        Stage::Bench => json!({ "marius": cfg.marius, "bench": cfg.bench }),
    };
    Ok(hash_bytes(serde_json::to_string(&slice)?.as_bytes()))
}

fn model_config(cfg: &RunConfig) -> serde_json::Value {
    match cfg.family {
        Family::Sasrecpp => json!(cfg.sasrec),
        _ => json!(cfg.marius),
    }
}

/// Hashes of every file the stage reads: external data for `prepare`,
/// upstream artifacts otherwise.
fn input_hashes(cfg: &RunConfig, stage: Stage) -> Result<BTreeMap<String, String>> {
    let out = cfg.out_dir();
    let mut inputs = BTreeMap::new();
    if stage == Stage::Prepare {
        for path in [&cfg.data.interactions, &cfg.data.embeddings] {
            if !path.is_empty() {
                inputs.insert(path.clone(), hash_file(Path::new(path))?);
            }
        }
        return Ok(inputs);
    }
    for dep in stage.dependencies(cfg.family) {
        let dir = stage_dir(&out, dep);
        let m = StageManifest::read(&dir).ok_or_else(|| anyhow!("missing manifest of `{dep}`"))?;
        for name in m.outputs.keys() {
            inputs.insert(format!("{dep}/{name}"), hash_file(&dir.join(name))?);
        }
    }
    Ok(inputs)
}

fn prepare(cfg: &RunConfig, dir: &Path) -> Result<Vec<&'static str>> {
    let d = &cfg.data;
    let (dataset, embeddings) = if d.interactions.is_empty() {
        let planted = SyntheticConfig::new(d.synthetic_items, d.synthetic_users, d.markov_order, cfg.seed);
        let s = filter_synthetic(&generate_synthetic(&planted)?, d.min_interactions)?;
        (s.dataset, Some(s.embeddings))
    } else {
        let raw = ingest_interactions(&d.interactions)?;
        let embeddings =
            if d.embeddings.is_empty() { None } else { Some(load_embedding_matrix(&d.embeddings, raw.n_items())?) };
        let filtered = k_core_filter(&raw, d.min_interactions)?;
        let embeddings = embeddings.map(|e| {
            let index: HashMap<&str, usize> = raw.item_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let rows: Vec<usize> = filtered.item_ids().iter().map(|s| index[s.as_str()]).collect();
            e.select_rows(&rows)
        });
        (filtered, embeddings)
    };
    let mut w = BufWriter::new(File::create(dir.join(DATASET))?);
    dataset.write_tsv(&mut w)?;
    w.flush()?;
    drop(w);
    // catalog ids follow first appearance, so re-read to fix the row order
    let reread = ingest_interactions(dir.join(DATASET))?;
    let mut written = vec![DATASET, SPLIT];
    if let Some(e) = embeddings {
        let index: HashMap<&str, usize> = dataset.item_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows: Vec<usize> = reread.item_ids().iter().map(|s| index[s.as_str()]).collect();
        e.select_rows(&rows).save(dir.join(EMBEDDINGS))?;
        written.push(EMBEDDINGS);
    }
    let split = split_leave_last_out(&reread);
    let summary = json!({
        "users": reread.n_users(),
        "items": reread.n_items(),
        "interactions": reread.n_interactions(),
        "train_events": split.users.iter().map(|u| u.train.len()).sum::<usize>(),
        "validation_cases": split.cases(SplitKind::Validation).len(),
        "test_cases": split.cases(SplitKind::Test).len(),
        "min_interactions": d.min_interactions,
    });
    fs::write(dir.join(SPLIT), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(written)
}

struct Prepared {
    dataset: InteractionDataset,
    embeddings: Option<EmbeddingMatrix>,
}

impl Prepared {
    fn load(out: &Path) -> Result<Self> {
        let dir = stage_dir(out, Stage::Prepare);
        let dataset = ingest_interactions(dir.join(DATASET))?;
        let path = dir.join(EMBEDDINGS);
        let embeddings = if path.exists() { Some(load_embedding_matrix(&path, dataset.n_items())?) } else { None };
        Ok(Self { dataset, embeddings })
    }

    fn embeddings(&self) -> Result<&EmbeddingMatrix> {
        self.embeddings.as_ref().ok_or_else(|| anyhow!("no item embeddings; set data.embeddings"))
    }

    fn train(&self) -> Vec<Vec<Event>> {
        split_leave_last_out(&self.dataset).users.into_iter().map(|u| u.train).collect()
    }
}

fn csv_log<T: Serialize>(rows: &[T], header: &str, fmt: impl Fn(&T) -> String) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", fmt(r));
    }
    s
}

fn train_quantizer(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> Result<Vec<&'static str>> {
    let p = Prepared::load(&cfg.out_dir())?;
    let split = split_leave_last_out(&p.dataset);
    let (q, losses) = train_cosette(&cfg.cosette, p.embeddings()?, &split.train_sequences(), cfg.seed)?;
    if let Some(last) = losses.last() {
        let _ = writeln!(log, "[train-quantizer] final loss {:.4}", last.total);
    }
    checkpoint::save(&q.store, dir.join(QUANTIZER))?;
    let text =
        csv_log(&losses, "step,total,quantization,reconstruction,cooccurrence_quantization,collaborative", |l| {
            format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                l.step, l.total, l.quantization, l.reconstruction, l.cooccurrence_quantization, l.collaborative
            )
        });
    fs::write(dir.join("losses.csv"), text)?;
    Ok(vec![QUANTIZER, "losses.csv"])
}

fn tokenize(cfg: &RunConfig, dir: &Path) -> Result<Vec<&'static str>> {
    let out = cfg.out_dir();
    let p = Prepared::load(&out)?;
    let emb = p.embeddings()?;
    let mut q = Quantizer::new(cfg.cosette.clone(), cfg.seed)?;
    checkpoint::load_into(&mut q.store, stage_dir(&out, Stage::TrainQuantizer).join(QUANTIZER))?;
    let draft = unique_ratio(&q.draft_codes(emb));
    let table = q.tokenize(emb)?;
    let mut w = BufWriter::new(File::create(dir.join(SEMANTIC_IDS))?);
    table.write_tsv(p.dataset.item_ids(), &mut w)?;
    w.flush()?;
    let stats = json!({ "items": table.len(), "draft_unique_ratio": draft, "final_unique_ratio": unique_ratio(table.all_codes()) });
    fs::write(dir.join("tokenize.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(vec![SEMANTIC_IDS, "tokenize.json"])
}

fn load_table(cfg: &RunConfig, p: &Prepared) -> Result<SemanticIdTable> {
    let path = stage_dir(&cfg.out_dir(), Stage::Tokenize).join(SEMANTIC_IDS);
    let r = BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?);
    Ok(SemanticIdTable::read_tsv(r, p.dataset.item_ids(), cfg.cosette.codebook_size)?)
}

fn train(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> Result<Vec<&'static str>> {
    let p = Prepared::load(&cfg.out_dir())?;
    let train = p.train();
    let mut losses = Vec::new();
    let mut on_step = |step: usize, loss: f64| {
        if step.is_multiple_of(100) {
            let _ = writeln!(log, "[train] step {step} loss {loss:.4}");
        }
        losses.push((step, loss));
    };
    match cfg.family {
        Family::Marius => {
            let table = load_table(cfg, &p)?;
            let state = train_marius(&cfg.marius, &table, &train, cfg.seed, &mut on_step)?;
            checkpoint::save(&state.store, dir.join(MODEL))?;
        }
        Family::FlatSeq2seq => {
            let table = load_table(cfg, &p)?;
            let flat = train_flat(&cfg.marius, &table, &train, cfg.seed, &mut on_step)?;
            checkpoint::save(&flat.store, dir.join(MODEL))?;
        }
        Family::Sasrecpp => {
            let state = train_sasrec(&cfg.sasrec, p.dataset.n_items(), &train, cfg.seed, &mut on_step)?;
            checkpoint::save(&state.store, dir.join(MODEL))?;
        }
        Family::Cosette => bail!("family cosette has no sequence model to train"),
    }
    let text = csv_log(&losses, "step,loss", |(s, l)| format!("{s},{l:.6}"));
    fs::write(dir.join("train_log.csv"), text)?;
    Ok(vec![MODEL, "train_log.csv"])
}

fn evaluate(cfg: &RunConfig, dir: &Path, log: &mut dyn Write) -> Result<Vec<&'static str>> {
    let out = cfg.out_dir();
    let p = Prepared::load(&out)?;
    let kind = match cfg.eval.split {
        EvalSplit::Validation => SplitKind::Validation,
        EvalSplit::Test => SplitKind::Test,
    };
    let cases = split_leave_last_out(&p.dataset).cases(kind);
    let ckpt = stage_dir(&out, Stage::Train).join(MODEL);
    let e = &cfg.eval;
    let report = match cfg.family {
        Family::Marius => {
            let table = load_table(cfg, &p)?;
            let mut state = MariusState::new(cfg.marius.clone(), cfg.seed)?;
            checkpoint::load_into(&mut state.store, &ckpt)?;
            let rec = MariusRecommender {
                state: &state,
                table: &table,
                beam: e.beam,
                batch: e.batch,
                filter_seen: e.filter_seen,
            };
            score(&rec, &cases, &e.ks)?
        }
        Family::FlatSeq2seq => {
            let table = load_table(cfg, &p)?;
            let mut flat = FlatBench::new(FlatSeq2SeqConfig::matching(&cfg.marius), cfg.seed)?;
            checkpoint::load_into(&mut flat.store, &ckpt)?;
            let rec = FlatRecommender {
                flat: &flat,
                table: &table,
                beam: e.beam,
                batch: e.batch,
                filter_seen: e.filter_seen,
            };
            score(&rec, &cases, &e.ks)?
        }
        Family::Sasrecpp => {
            let sasrec = genrec::sasrecpp::SasrecConfig { filter_seen: e.filter_seen, ..cfg.sasrec.clone() };
            let mut state = SasrecState::new(sasrec, p.dataset.n_items(), cfg.seed)?;
            checkpoint::load_into(&mut state.store, &ckpt)?;
            score(&state, &cases, &e.ks)?
        }
        Family::Cosette => bail!("family cosette has no sequence model to evaluate"),
    };
    for (k, r) in &report.recall {
        let _ = writeln!(log, "[evaluate] R@{k} {r:.4}");
    }
    fs::write(dir.join(METRICS), report.to_csv())?;
    fs::write(dir.join("metrics.json"), report.to_json()? + "\n")?;
    Ok(vec![METRICS, "metrics.json"])
}

fn score(
    model: &dyn Recommender,
    cases: &[genrec::data::EvalCase],
    ks: &[usize],
) -> Result<genrec::eval::MetricReport> {
    Ok(evaluate_model(model, cases, ks)?)
}

fn bench(cfg: &RunConfig, dir: &Path) -> Result<Vec<&'static str>> {
    let b = &cfg.bench;
    let protocol = Protocol { batch_size: b.batch_size, warmup: b.warmup, batches: b.batches, seed: cfg.seed };
    let mut records = Vec::new();
    let mut fits = Vec::new();
    for &phase in &b.phases {
        let recs = scaling_sweep(&cfg.marius, phase, &b.lengths, b.beam, &protocol)?;
        if b.lengths.len() >= 3 {
            for model in ["marius", "flat_seq2seq"] {
                let fit = fit_records(&recs, model, phase)?;
                fits.push(json!({ "model": model, "phase": phase, "slope": fit.slope, "intercept": fit.intercept }));
            }
        }
        records.extend(recs);
    }
    let mut w = BufWriter::new(File::create(dir.join("bench.csv"))?);
    write_csv(&records, &mut w)?;
    w.flush()?;
    fs::write(dir.join("fits.json"), serde_json::to_string_pretty(&fits)? + "\n")?;
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    Ok(vec!["bench.csv", "fits.json", "timings.json"])
}
