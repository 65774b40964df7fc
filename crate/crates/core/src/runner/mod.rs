//! Experiment grids: generate or load data, train one model per row, decode
//! every test set, and write the result matrix with its plot data.
//!
//! A run lives in `<out>/<spec hash>/`:
//!
//! ```text
//! spec.txt            resolved spec (what the hash covers)
//! data/               the generated or bucketed data each row used
//! cells/<row>/        checkpoint.bin, report.json, train_log.csv, <col>.hyp
//! matrix.csv          train_bucket,test_bucket,metric,value,status
//! ratio.csv           hypothesis/reference length ratios, rows × columns
//! <metric>.dat        gnuplot series, one block per row
//! plot.gp             gnuplot script for the series
//! meta.txt            seeds, wall-clock, checkpoint digests
//! ```
//!
//! plus per-kind extras (`accuracy.csv`, `best_train.csv`, `retention.csv`).
//! With `resume`, a row whose `report.json` matches the spec hash and the
//! SHA-256 of its checkpoint is not retrained.

pub mod report;
pub mod spec;
pub mod surrogate;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, inject_bucket_label, ConcatOutput, CorpusError, ParallelPair};
use crate::decode::translate_all;
use crate::eval::{self, BootstrapConfig, EvalError, Metric, Smoothing};
use crate::model::{train, Checkpoint, EncodedPair, Init, ModelError, Vocab};
use crate::seed;
use crate::taskgen::{self, BucketPlan, Split, SplitCounts, TaskGenError};
use crate::BucketRange;

pub use report::{Cell, CellStatus, ResultMatrix};
pub use spec::{ExperimentKind, ExperimentSpec};
use surrogate::{Lexicon, SurrogateConfig};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("spec: {0}")]
    Spec(String),
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("report: {0}")]
    Report(String),
    #[error("{dir} holds a different spec; refusing to mix outputs")]
    HashMismatch { dir: String },
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |e| RunError::Io(path.display().to_string(), e)
}

/// A tokenized example; unlike [`ParallelPair`] the target may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl From<ParallelPair> for Example {
    fn from(p: ParallelPair) -> Self {
        let (src, tgt) = p.into_parts();
        Example { src, tgt }
    }
}

/// One model: its training data and the test sets it is scored on.
#[derive(Clone, Debug)]
pub struct Job {
    pub row: String,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    /// Warm start from this row's best checkpoint.
    pub base: Option<String>,
    /// Overrides `train.max_epochs`.
    pub epochs: Option<usize>,
    pub tests: Vec<(String, Vec<Example>)>,
}

/// Everything an experiment trains and evaluates, before any training.
#[derive(Clone, Debug)]
pub struct Plan {
    pub vocab: Vocab,
    pub jobs: Vec<Job>,
    pub cols: Vec<String>,
    /// Parallel files written under `data/`, by relative prefix.
    pub data: Vec<(String, Vec<Example>)>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowReport {
    pub spec_hash: String,
    pub row: String,
    pub seed: u64,
    /// Empty when training failed.
    pub checkpoint_sha256: String,
    pub seconds: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub cells: Vec<Cell>,
}

impl RowReport {
    fn ok(&self) -> bool {
        !self.checkpoint_sha256.is_empty() && self.cells.iter().all(|c| c.status == CellStatus::Ok)
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub resume: bool,
    /// Rows trained concurrently (at least 1).
    pub jobs: usize,
    pub progress: Option<&'a (dyn Fn(&str) + Sync)>,
}

impl RunOptions<'_> {
    fn say(&self, msg: &str) {
        if let Some(p) = self.progress {
            p(msg);
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub matrix: ResultMatrix,
    pub rows: Vec<RowReport>,
    /// Rows taken from a previous run instead of being retrained.
    pub reused: Vec<String>,
}

fn examples_from_parts(part: &taskgen::DatasetPart) -> Vec<Example> {
    part.instances
        .iter()
        .map(|i| Example {
            src: i.source_tokens().into_iter().map(str::to_string).collect(),
            tgt: i.target_tokens().into_iter().map(str::to_string).collect(),
        })
        .collect()
}

fn string_suite_plan(spec: &ExperimentSpec) -> Result<Plan> {
    let train_range = spec.range("train_bucket")?;
    let tests = spec.ranges("test_buckets")?;
    let counts = SplitCounts {
        train: spec.get("train_count")?,
        valid: spec.get("valid_count")?,
        test: spec.get("test_count")?,
    };
    let mut plans = vec![BucketPlan { range: train_range, counts }];
    for &r in &tests {
        if r != train_range {
            plans.push(BucketPlan { range: r, counts: SplitCounts { test: counts.test, ..Default::default() } });
        }
    }
    let mut jobs = Vec::new();
    let mut data = Vec::new();
    for sel in spec.tasks()? {
        let ds = taskgen::build_dataset(sel, &plans, spec.seed())?;
        let get = |split, range| ds.part(split, range).map(examples_from_parts).unwrap_or_default();
        for part in &ds.parts {
            data.push((format!("{}/{}", sel.label(), part.file_stem()), examples_from_parts(part)));
        }
        jobs.push(Job {
            row: sel.label().to_string(),
            train: get(Split::Train, train_range),
            valid: get(Split::Valid, train_range),
            base: None,
            epochs: None,
            tests: tests.iter().map(|&r| (r.label(), get(Split::Test, r))).collect(),
        });
    }
    let cols = tests.iter().map(BucketRange::label).collect();
    Ok(Plan { vocab: vocab_of(&jobs), jobs, cols, data, notes: Vec::new() })
}

/// Train, valid and test pairs of the translation kinds, by bucket.
struct Buckets {
    train: BTreeMap<BucketRange, Vec<ParallelPair>>,
    valid: BTreeMap<BucketRange, Vec<ParallelPair>>,
    test: BTreeMap<BucketRange, Vec<ParallelPair>>,
    notes: Vec<String>,
}

fn load_buckets(spec: &ExperimentSpec, train_ranges: &[BucketRange], test_ranges: &[BucketRange]) -> Result<Buckets> {
    let side = spec.side("side")?;
    let seed = spec.seed();
    let mut notes = Vec::new();
    let collect = |v: Vec<Vec<ParallelPair>>, ranges: &[BucketRange]| ranges.iter().copied().zip(v).collect::<BTreeMap<_, _>>();
    if spec.raw("data") == Some("surrogate") {
        let cfg = SurrogateConfig {
            words: spec.get("surrogate.words")?,
            max_words: spec.get("surrogate.max_words")?,
            clause_max: spec.get("surrogate.clause_max")?,
            expand: spec.get("surrogate.expand")?,
            period_rate: spec.get("surrogate.period_rate")?,
        };
        if !(0.0..=1.0).contains(&cfg.expand) || !(0.0..=1.0).contains(&cfg.period_rate) {
            return Err(RunError::Spec("surrogate.expand and surrogate.period_rate must lie in [0, 1]".into()));
        }
        let lex = Lexicon::new(&cfg, seed);
        let mut seen = HashSet::new();
        let mut draw = |ranges: &[BucketRange], key: &str, stream: &str| -> Result<BTreeMap<BucketRange, Vec<ParallelPair>>> {
            let quota: usize = spec.get(key)?;
            let out = surrogate::sample_buckets(&cfg, &lex, ranges, side, quota, &mut seen, seed, stream);
            Ok(collect(out, ranges))
        };
        // test first so its content does not depend on the training quotas
        let test = draw(test_ranges, "surrogate.test_per_bucket", "test")?;
        let valid = draw(train_ranges, "surrogate.valid_per_bucket", "valid")?;
        let train = draw(train_ranges, "surrogate.train_per_bucket", "train")?;
        for (name, m) in [("train", &train), ("valid", &valid), ("test", &test)] {
            for (r, v) in m {
                if v.is_empty() {
                    return Err(RunError::Spec(format!("surrogate cannot produce {name} pairs of length {r}")));
                }
            }
        }
        notes.push("data: synthetic surrogate corpus (clause-local reversal with a random lexicon)".into());
        Ok(Buckets { train, valid, test, notes })
    } else {
        let route = |key: &str, ranges: &[BucketRange]| -> Result<BTreeMap<BucketRange, Vec<ParallelPair>>> {
            let path = PathBuf::from(spec.raw(key).expect("checked at parse time"));
            let mut out: BTreeMap<BucketRange, Vec<ParallelPair>> = ranges.iter().map(|&r| (r, Vec::new())).collect();
            for p in corpus::read_parallel(&path)? {
                if let Some(r) = ranges.iter().find(|r| r.contains(p.len(side))) {
                    out.get_mut(r).expect("range listed").push(p);
                }
            }
            Ok(out)
        };
        let train = route("data.train", train_ranges)?;
        let valid = route("data.valid", train_ranges)?;
        let test = route("data.test", test_ranges)?;
        notes.push(format!("data: {}, {}, {}", spec.raw("data.train").unwrap_or(""), spec.raw("data.valid").unwrap_or(""), spec.raw("data.test").unwrap_or("")));
        Ok(Buckets { train, valid, test, notes })
    }
}

fn ex(pairs: &[ParallelPair]) -> Vec<Example> {
    pairs.iter().cloned().map(Example::from).collect()
}

fn union(m: &BTreeMap<BucketRange, Vec<ParallelPair>>) -> Vec<ParallelPair> {
    m.values().flatten().cloned().collect()
}

fn test_sets(b: &Buckets) -> Vec<(String, Vec<Example>)> {
    b.test.iter().map(|(r, v)| (r.label(), ex(v))).collect()
}

fn bucket_data(b: &Buckets) -> Vec<(String, Vec<Example>)> {
    let mut data = Vec::new();
    for (split, m) in [("train", &b.train), ("valid", &b.valid), ("test", &b.test)] {
        for (r, v) in m {
            data.push((format!("{split}.{}", r.label()), ex(v)));
        }
    }
    data
}

fn translation_plan(spec: &ExperimentSpec) -> Result<Plan> {
    let test_ranges = spec.ranges("test_buckets")?;
    let seed = spec.seed();
    match spec.kind {
        ExperimentKind::BucketMatrix | ExperimentKind::FinetuneMatrix => {
            let train_ranges = spec.ranges("train_buckets")?;
            let b = load_buckets(spec, &train_ranges, &test_ranges)?;
            let tests = test_sets(&b);
            let mut jobs = Vec::new();
            let mut notes = b.notes.clone();
            let full_name = if spec.kind == ExperimentKind::BucketMatrix { "full" } else { "base" };
            let with_full = spec.kind == ExperimentKind::FinetuneMatrix || spec.get::<bool>("include_full")?;
            if with_full {
                jobs.push(Job {
                    row: full_name.into(),
                    train: ex(&union(&b.train)),
                    valid: ex(&union(&b.valid)),
                    base: None,
                    epochs: None,
                    tests: tests.clone(),
                });
                notes.push(format!("row {full_name}: mixed-length model trained on every training bucket (stands in for a full-corpus baseline)"));
            }
            let ft = spec.kind == ExperimentKind::FinetuneMatrix;
            for r in &train_ranges {
                jobs.push(Job {
                    row: r.label(),
                    train: ex(&b.train[r]),
                    valid: ex(&b.valid[r]),
                    base: ft.then(|| full_name.to_string()),
                    epochs: if ft { Some(spec.get("finetune.epochs")?) } else { None },
                    tests: tests.clone(),
                });
            }
            let data = bucket_data(&b);
            Ok(Plan { vocab: vocab_of(&jobs), jobs, cols: test_ranges.iter().map(BucketRange::label).collect(), data, notes })
        }
        ExperimentKind::ConcatMatrix => {
            let window = spec.range("concat.window")?;
            let from = spec.ranges("concat.from")?;
            let mut train_ranges = from.clone();
            if !train_ranges.contains(&window) {
                train_ranges.push(window);
            }
            let b = load_buckets(spec, &train_ranges, &test_ranges)?;
            let tests = test_sets(&b);
            let mut jobs = Vec::new();
            let mut data = bucket_data(&b);
            let mut notes = b.notes.clone();
            for r in &from {
                let pack = |pairs: &[ParallelPair], stream: &str| -> Result<ConcatOutput> {
                    Ok(corpus::concat_augment(pairs, window, seed::derive(seed, &[seed::tag(stream), r.lo as u64, r.hi as u64]))?)
                };
                let train = pack(&b.train[r], "concat-train")?;
                let valid = pack(&b.valid[r], "concat-valid")?;
                if train.pairs.is_empty() || valid.pairs.is_empty() {
                    return Err(RunError::Spec(format!("no concatenation of {r} pairs lands in {window}")));
                }
                let mean = train.groups.iter().map(Vec::len).sum::<usize>() as f64 / train.groups.len() as f64;
                notes.push(format!(
                    "row concat_{}: {} synthetic pairs from {} genuine ones, {mean:.2} sentences each",
                    r.label(),
                    train.pairs.len(),
                    b.train[r].len()
                ));
                data.push((format!("train.concat_{}", r.label()), ex(&train.pairs)));
                jobs.push(Job {
                    row: format!("concat_{}", r.label()),
                    train: ex(&train.pairs),
                    valid: ex(&valid.pairs),
                    base: None,
                    epochs: None,
                    tests: tests.clone(),
                });
            }
            jobs.push(Job {
                row: format!("genuine_{}", window.label()),
                train: ex(&b.train[&window]),
                valid: ex(&b.valid[&window]),
                base: None,
                epochs: None,
                tests,
            });
            Ok(Plan { vocab: vocab_of(&jobs), jobs, cols: test_ranges.iter().map(BucketRange::label).collect(), data, notes })
        }
        ExperimentKind::BucketLabels => {
            let train_ranges = spec.ranges("train_buckets")?;
            let label_side = spec.side("label_side")?;
            let b = load_buckets(spec, &train_ranges, &test_ranges)?;
            let label = |pairs: &[ParallelPair]| -> Vec<Example> {
                pairs.iter().filter_map(|p| inject_bucket_label(p, label_side).ok()).map(Example::from).collect()
            };
            let (train, valid) = (union(&b.train), union(&b.valid));
            let mut tests = test_sets(&b);
            tests.push(("all".into(), ex(&union(&b.test))));
            let mut labelled: Vec<(String, Vec<Example>)> = b.test.iter().map(|(r, v)| (r.label(), label(v))).collect();
            labelled.push(("all".into(), label(&union(&b.test))));
            let mut notes = b.notes.clone();
            notes.push(format!("row bucket.labels: {} side bucket token prepended to every source, test sources included", label_side));
            let jobs = vec![
                Job { row: "baseline".into(), train: ex(&train), valid: ex(&valid), base: None, epochs: None, tests },
                Job {
                    row: "bucket.labels".into(),
                    train: label(&train),
                    valid: label(&valid),
                    base: None,
                    epochs: None,
                    tests: labelled,
                },
            ];
            let mut cols: Vec<String> = test_ranges.iter().map(BucketRange::label).collect();
            cols.push("all".into());
            Ok(Plan { vocab: vocab_of(&jobs), jobs, cols, data: bucket_data(&b), notes })
        }
        ExperimentKind::StringSuite => unreachable!("handled by string_suite_plan"),
    }
}

/// Shared vocabulary over every row's training and validation data.
fn vocab_of(jobs: &[Job]) -> Vocab {
    let tokens = jobs
        .iter()
        .flat_map(|j| j.train.iter().chain(&j.valid))
        .flat_map(|e| e.src.iter().chain(&e.tgt))
        .map(String::as_str);
    Vocab::build(tokens)
}

/// Builds the data and job list of a spec without training anything.
pub fn plan(spec: &ExperimentSpec) -> Result<Plan> {
    let plan = match spec.kind {
        ExperimentKind::StringSuite => string_suite_plan(spec)?,
        _ => translation_plan(spec)?,
    };
    for job in &plan.jobs {
        if job.train.is_empty() || job.valid.is_empty() {
            return Err(RunError::Spec(format!("row {} has no training or validation data", job.row)));
        }
    }
    Ok(plan)
}

fn encode(vocab: &Vocab, data: &[Example]) -> Vec<EncodedPair> {
    data.iter().map(|e| EncodedPair::new(vocab.encode(&e.src), vocab.encode(&e.tgt))).collect()
}

/// Exact match, BLEU and length ratios of one test set. Examples with an
/// empty reference are left out of the mean per-example length ratio.
pub fn cell_metrics(hyps: &[Vec<String>], refs: &[Vec<String>], bootstrap: usize, seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    m.insert("acc".into(), eval::exact_match_accuracy(hyps, refs)?);
    m.insert("bleu".into(), eval::corpus_bleu(hyps, refs, eval::DEFAULT_MAX_NGRAM, Smoothing::None)?);
    let (h, r): (Vec<Vec<String>>, Vec<Vec<String>>) =
        hyps.iter().zip(refs).filter(|(_, r)| !r.is_empty()).map(|(h, r)| (h.clone(), r.clone())).unzip();
    if !r.is_empty() {
        m.insert("len_ratio".into(), eval::length_ratio(&h, &r)?);
    }
    if refs.iter().any(|r| !r.is_empty()) {
        m.insert("len_ratio_corpus".into(), eval::corpus_length_ratio(hyps, refs)?);
    }
    if bootstrap > 0 && hyps.len() >= 2 {
        for (name, metric) in [("acc_ci", Metric::Accuracy), ("bleu_ci", Metric::Bleu)] {
            let cfg = BootstrapConfig { resamples: bootstrap, level: 0.95, seed };
            m.insert(name.into(), eval::bootstrap_ci(hyps, refs, metric, cfg)?.1);
        }
    }
    Ok(m)
}

fn row_seed(spec: &ExperimentSpec, row: &str) -> u64 {
    seed::derive(spec.seed(), &[seed::tag("row"), seed::tag(row)])
}

fn sha256_file(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| hex::encode(Sha256::digest(b)))
}

fn reusable(spec_hash: &str, dir: &Path) -> Option<RowReport> {
    let text = std::fs::read_to_string(dir.join("report.json")).ok()?;
    let rep: RowReport = serde_json::from_str(&text).ok()?;
    let digest = sha256_file(&dir.join("checkpoint.bin"))?;
    (rep.spec_hash == spec_hash && rep.ok() && rep.checkpoint_sha256 == digest).then_some(rep)
}

fn run_job(spec: &ExperimentSpec, plan: &Plan, job: &Job, run_dir: &Path, opts: &RunOptions) -> Result<RowReport> {
    let hash = spec.hash();
    let dir = run_dir.join("cells").join(&job.row);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let seed = row_seed(spec, &job.row);
    let start = Instant::now();
    let fail = |msg: String| RowReport {
        spec_hash: hash.clone(),
        row: job.row.clone(),
        seed,
        checkpoint_sha256: String::new(),
        seconds: start.elapsed().as_secs_f64(),
        epochs_run: 0,
        best_epoch: 0,
        cells: job
            .tests
            .iter()
            .map(|(col, _)| Cell { row: job.row.clone(), col: col.clone(), values: BTreeMap::new(), status: CellStatus::Failed(msg.clone()) })
            .collect(),
    };

    let mcfg = spec.model_config(plan.vocab.len())?;
    let mut tcfg = spec.train_config(seed)?;
    if let Some(e) = job.epochs {
        tcfg.max_epochs = e;
    }
    let init = match &job.base {
        None => Init::Fresh,
        Some(base) => {
            let path = run_dir.join("cells").join(base).join("checkpoint.bin");
            match Checkpoint::load(&path) {
                Ok(ck) => Init::Checkpoint(Box::new(ck)),
                Err(e) => return Ok(fail(format!("base checkpoint {base}: {e}"))),
            }
        }
    };
    let train_data = encode(&plan.vocab, &job.train);
    let valid_data = encode(&plan.vocab, &job.valid);
    let log_path = dir.join("train_log.csv");
    let mut log = String::from("epoch,step,train_loss,valid_metric,lr\n");
    let metric = spec.valid_metric()?;
    let outcome = train(&mcfg, &tcfg, &plan.vocab, &train_data, &valid_data, metric, init, &mut |r| {
        let loss = r.train_loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(log, "{},{},{},{},{}", r.epoch, r.step, loss, r.valid_metric, r.lr);
        let _ = std::fs::write(&log_path, &log);
        opts.say(&format!("{}: epoch {} valid {metric} {:.4} ({:.0}s)", job.row, r.epoch, r.valid_metric, start.elapsed().as_secs_f64()));
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(ModelError::Diverged { epoch, step, last_good }) => {
            let _ = last_good.save(&dir.join("diverged_last_good.bin"));
            return Ok(fail(format!("diverged at epoch {epoch}, step {step}")));
        }
        Err(e) => return Ok(fail(e.to_string())),
    };
    let ck_path = dir.join("checkpoint.bin");
    outcome.best.save(&ck_path)?;
    let model = outcome.best.model()?;
    let strategy = spec.strategy()?;
    let bootstrap: usize = spec.get("eval.bootstrap")?;
    let mut cells = Vec::new();
    for (col, data) in &job.tests {
        let srcs: Vec<Vec<u32>> = data.iter().map(|e| EncodedPair::new(plan.vocab.encode(&e.src), Vec::new()).src).collect();
        let cell = match translate_all(&model, &srcs, &strategy) {
            Ok(h) => {
                let hyps: Vec<Vec<String>> = h.iter().map(|h| plan.vocab.decode(&h.tokens)).collect();
                let refs: Vec<Vec<String>> = data.iter().map(|e| e.tgt.clone()).collect();
                corpus::write_lines(&dir.join(format!("{col}.hyp")), hyps.iter().map(|h| h.join(" ")))?;
                let values = cell_metrics(&hyps, &refs, bootstrap, seed::derive(seed, &[seed::tag("bootstrap"), seed::tag(col)]))?;
                Cell { row: job.row.clone(), col: col.clone(), values, status: CellStatus::Ok }
            }
            Err(e) => Cell { row: job.row.clone(), col: col.clone(), values: BTreeMap::new(), status: CellStatus::Failed(e.to_string()) },
        };
        cells.push(cell);
    }
    opts.say(&format!("{}: done in {:.0}s", job.row, start.elapsed().as_secs_f64()));
    Ok(RowReport {
        spec_hash: hash,
        row: job.row.clone(),
        seed,
        checkpoint_sha256: sha256_file(&ck_path).unwrap_or_default(),
        seconds: start.elapsed().as_secs_f64(),
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best.best_epoch,
        cells,
    })
}

/// Runs `work` over `items` on up to `threads` threads; results keep item order.
fn queue<T: Sync, R: Send>(items: &[T], threads: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = work(item);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every item ran")).collect()
}

/// Runs (or resumes) a spec and writes every report file.
pub fn run(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunOutcome> {
    let dir = spec.run_dir();
    let hash = spec.hash();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let spec_path = dir.join("spec.txt");
    match std::fs::read_to_string(&spec_path) {
        Ok(old) if old != spec.canonical() => return Err(RunError::HashMismatch { dir: dir.display().to_string() }),
        Ok(_) => {}
        Err(_) => report::write(&spec_path, &spec.canonical())?,
    }
    let started = Instant::now();
    let plan = plan(spec)?;
    for (prefix, examples) in &plan.data {
        let p = dir.join("data").join(prefix);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let with = |ext: &str| PathBuf::from(format!("{}.{ext}", p.display()));
        corpus::write_lines(&with("src"), examples.iter().map(|e| e.src.join(" ")))?;
        corpus::write_lines(&with("tgt"), examples.iter().map(|e| e.tgt.join(" ")))?;
    }

    let mut reports: BTreeMap<String, RowReport> = BTreeMap::new();
    let mut reused = Vec::new();
    // rows that warm-start from another row run after it
    let (first, second): (Vec<&Job>, Vec<&Job>) = plan.jobs.iter().partition(|j| j.base.is_none());
    for phase in [first, second] {
        let results = queue(&phase, opts.jobs, |job| -> Result<(RowReport, bool)> {
            let cell_dir = dir.join("cells").join(&job.row);
            if opts.resume {
                if let Some(rep) = reusable(&hash, &cell_dir) {
                    opts.say(&format!("{}: reusing finished row", job.row));
                    return Ok((rep, true));
                }
            }
            let rep = run_job(spec, &plan, job, &dir, opts)?;
            let json = serde_json::to_string_pretty(&rep).expect("report serializes");
            report::write(&cell_dir.join("report.json"), &json)?;
            Ok((rep, false))
        });
        for r in results {
            let (rep, was_reused): (RowReport, bool) = r?;
            if was_reused {
                reused.push(rep.row.clone());
            }
            reports.insert(rep.row.clone(), rep);
        }
    }

    let rows: Vec<RowReport> = plan.jobs.iter().map(|j| reports.remove(&j.row).expect("every row ran")).collect();
    if let Some(r) = rows.iter().find(|r| r.spec_hash != hash) {
        return Err(RunError::Report(format!("row {} belongs to spec {}", r.row, r.spec_hash)));
    }
    let matrix = ResultMatrix {
        rows: rows.iter().map(|r| r.row.clone()).collect(),
        cols: plan.cols.clone(),
        cells: rows.iter().flat_map(|r| r.cells.iter().cloned()).collect(),
    };
    write_reports(spec, &plan, &matrix, &rows, &reused, started.elapsed().as_secs_f64())?;
    Ok(RunOutcome { dir, matrix, rows, reused })
}

/// Mean drop of `metric` relative to the base row on test buckets shorter
/// and longer than each fine-tuning bucket.
pub fn retention(matrix: &ResultMatrix, base: &str, metric: &str) -> Vec<(String, Option<f64>, Option<f64>)> {
    let ranges: Vec<Option<BucketRange>> = matrix.cols.iter().map(|c| c.replace('-', ":").parse::<BucketRange>().ok()).collect();
    matrix
        .rows
        .iter()
        .map(|row| {
            let own = row.replace('-', ":").parse::<BucketRange>().ok();
            let mut shorter = Vec::new();
            let mut longer = Vec::new();
            for (col, r) in matrix.cols.iter().zip(&ranges) {
                let (Some(own), Some(r)) = (own, r) else { continue };
                let (Some(b), Some(v)) = (matrix.value(base, col, metric), matrix.value(row, col, metric)) else { continue };
                if r.hi < own.lo {
                    shorter.push(b - v);
                } else if r.lo > own.hi {
                    longer.push(b - v);
                }
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            let (s, l) = if row == base { (Some(0.0), Some(0.0)) } else { (mean(&shorter), mean(&longer)) };
            (row.clone(), s, l)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_reports(
    spec: &ExperimentSpec,
    plan: &Plan,
    matrix: &ResultMatrix,
    rows: &[RowReport],
    reused: &[String],
    seconds: f64,
) -> Result<()> {
    let dir = spec.run_dir();
    let hash = spec.hash();
    let tag = format!("# spec {hash} ({})\n", spec.kind);
    report::write(&dir.join("matrix.csv"), &matrix.to_csv())?;
    report::write(&dir.join("ratio.csv"), &matrix.wide_csv("len_ratio"))?;
    let metrics = matrix.metrics();
    for m in &metrics {
        report::write(&dir.join(format!("{m}.dat")), &format!("{tag}{}", matrix.series(m)))?;
    }
    let title = format!("{} {hash}", spec.kind);
    report::write(&dir.join("plot.gp"), &format!("{tag}{}", report::gnuplot_script(&title, &metrics, &matrix.rows, &matrix.cols)))?;

    match spec.kind {
        ExperimentKind::StringSuite => {
            report::write(&dir.join("accuracy.csv"), &matrix.wide_csv("acc"))?;
        }
        ExperimentKind::BucketMatrix | ExperimentKind::ConcatMatrix => {
            let mut s = String::from("test_bucket,best_train_bucket\n");
            for (col, best) in matrix.best_rows("bleu") {
                let _ = writeln!(s, "{col},{}", best.unwrap_or_default());
            }
            report::write(&dir.join("best_train.csv"), &s)?;
        }
        ExperimentKind::FinetuneMatrix => {
            let mut s = String::from("row,drop_shorter,drop_longer,asymmetry\n");
            for (row, sh, lo) in retention(matrix, "base", "bleu") {
                let asym = sh.zip(lo).map(|(s, l)| l - s);
                let _ = writeln!(s, "{row},{},{},{}", opt(sh), opt(lo), opt(asym));
            }
            report::write(&dir.join("retention.csv"), &s)?;
        }
        ExperimentKind::BucketLabels => {}
    }

    let mut meta = String::new();
    let _ = writeln!(meta, "spec_hash {hash}");
    let _ = writeln!(meta, "kind {}", spec.kind);
    let _ = writeln!(meta, "seed {}", spec.seed());
    let _ = writeln!(meta, "vocab_size {}", plan.vocab.len());
    let _ = writeln!(meta, "wall_clock_seconds {seconds:.1}");
    for note in &plan.notes {
        let _ = writeln!(meta, "note {note}");
    }
    for r in rows {
        let job = plan.jobs.iter().find(|j| j.row == r.row).expect("row has a job");
        let _ = writeln!(
            meta,
            "row {} seed={} train={} valid={} epochs={} best_epoch={} seconds={:.1} reused={} checkpoint_sha256={}",
            r.row,
            r.seed,
            job.train.len(),
            job.valid.len(),
            r.epochs_run,
            r.best_epoch,
            r.seconds,
            reused.contains(&r.row),
            if r.checkpoint_sha256.is_empty() { "-" } else { &r.checkpoint_sha256 }
        );
        for c in &r.cells {
            if let CellStatus::Failed(msg) = &c.status {
                let _ = writeln!(meta, "failed {} {} {msg}", c.row, c.col);
            }
        }
    }
    report::write(&dir.join("meta.txt"), &meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(text: &str, out: &Path) -> ExperimentSpec {
        let mut s = ExperimentSpec::parse(text, Path::new(".")).unwrap();
        s.set("out", out.to_str().unwrap()).unwrap();
        s
    }

    const TINY_STRING: &str = "kind = string_suite
tasks = copy,pop
train_bucket = 3:4
test_buckets = 1:2,3:4,5:6
train_count = 12
valid_count = 4
test_count = 4
model.d_model = 8
model.d_ff = 16
model.heads = 2
model.dropout = 0
train.max_epochs = 2
train.warmup_steps = 10
train.batch_tokens = 64
";

    #[test]
    fn string_suite_grid_and_resume() {
        let tmp = tempfile::tempdir().unwrap();
        let s = spec(TINY_STRING, tmp.path());
        let a = run(&s, &RunOptions { jobs: 2, ..Default::default() }).unwrap();
        assert_eq!(a.matrix.rows, vec!["copy", "pop"]);
        assert_eq!(a.matrix.cols, vec!["1-2", "3-4", "5-6"]);
        assert!(a.matrix.is_complete());
        for c in &a.matrix.cells {
            assert_eq!(c.status, CellStatus::Ok);
            let acc = c.value("acc").unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
        let csv = std::fs::read_to_string(a.dir.join("matrix.csv")).unwrap();
        assert_eq!(ResultMatrix::from_csv(&csv).unwrap().to_csv(), csv);
        for f in ["ratio.csv", "acc.dat", "plot.gp", "meta.txt", "accuracy.csv", "spec.txt", "data/copy/train.3-4.src"] {
            assert!(a.dir.join(f).exists(), "{f}");
        }

        let b = run(&s, &RunOptions { resume: true, jobs: 1, ..Default::default() }).unwrap();
        assert_eq!(b.reused, vec!["copy", "pop"]);
        assert_eq!(std::fs::read_to_string(b.dir.join("matrix.csv")).unwrap(), csv);

        // a tampered checkpoint forces that row to retrain, to the same result
        std::fs::write(a.dir.join("cells/pop/checkpoint.bin"), b"junk").unwrap();
        let c = run(&s, &RunOptions { resume: true, jobs: 1, ..Default::default() }).unwrap();
        assert_eq!(c.reused, vec!["copy"]);
        assert_eq!(std::fs::read_to_string(c.dir.join("matrix.csv")).unwrap(), csv);
    }

    #[test]
    fn foreign_spec_in_run_dir_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let s = spec(TINY_STRING, tmp.path());
        std::fs::create_dir_all(s.run_dir()).unwrap();
        std::fs::write(s.run_dir().join("spec.txt"), "kind = other\n").unwrap();
        assert!(matches!(run(&s, &RunOptions::default()), Err(RunError::HashMismatch { .. })));
    }

    #[test]
    fn retention_splits_shorter_and_longer() {
        let cols: Vec<String> = ["1-10", "11-20", "21-30"].iter().map(|s| s.to_string()).collect();
        let mut cells = Vec::new();
        let vals = [("base", [10.0, 10.0, 10.0]), ("11-20", [9.0, 12.0, 4.0])];
        for (row, v) in vals {
            for (c, x) in cols.iter().zip(v) {
                cells.push(Cell { row: row.into(), col: c.clone(), values: [("bleu".to_string(), x)].into(), status: CellStatus::Ok });
            }
        }
        let m = ResultMatrix { rows: vec!["base".into(), "11-20".into()], cols, cells };
        let r = retention(&m, "base", "bleu");
        assert_eq!(r[0], ("base".to_string(), Some(0.0), Some(0.0)));
        assert_eq!(r[1], ("11-20".to_string(), Some(1.0), Some(6.0)));
    }

    fn tiny_translation(kind: &str, extra: &str) -> String {
        format!(
            "kind = {kind}
train_buckets = 1:6,7:12
test_buckets = 1:6,7:12
surrogate.words = 6
surrogate.max_words = 10
surrogate.train_per_bucket = 20
surrogate.valid_per_bucket = 4
surrogate.test_per_bucket = 5
model.d_model = 8
model.d_ff = 16
model.heads = 2
model.dropout = 0
train.max_epochs = 1
train.warmup_steps = 10
train.batch_tokens = 128
{extra}"
        )
    }

    #[test]
    fn translation_kinds_fill_their_grids() {
        let tmp = tempfile::tempdir().unwrap();
        let cases = [
            ("bucket_matrix", "", vec!["full", "1-6", "7-12"], "best_train.csv"),
            ("concat_matrix", "concat.window = 7:12\nconcat.from = 1:6\n", vec!["concat_1-6", "genuine_7-12"], "best_train.csv"),
            ("finetune_matrix", "finetune.epochs = 1\n", vec!["base", "1-6", "7-12"], "retention.csv"),
            ("bucket_labels", "eval.bootstrap = 20\n", vec!["baseline", "bucket.labels"], "meta.txt"),
        ];
        for (kind, extra, rows, extra_file) in cases {
            let s = spec(&tiny_translation(kind, extra), tmp.path());
            let out = run(&s, &RunOptions { jobs: 1, ..Default::default() }).unwrap();
            assert_eq!(out.matrix.rows, rows, "{kind}");
            assert!(out.matrix.is_complete(), "{kind}");
            assert!(out.matrix.cells.iter().all(|c| c.status == CellStatus::Ok), "{kind}");
            assert!(out.dir.join(extra_file).exists(), "{kind}");
            let csv = std::fs::read_to_string(out.dir.join("matrix.csv")).unwrap();
            let cells = out.matrix.rows.len() * out.matrix.cols.len();
            let metrics = out.matrix.metrics().len();
            assert_eq!(csv.lines().count() - 1, cells * metrics, "{kind}");
        }
        let s = spec(&tiny_translation("finetune_matrix", "finetune.epochs = 1\n"), tmp.path());
        let log = std::fs::read_to_string(s.run_dir().join("cells/1-6/train_log.csv")).unwrap();
        assert!(log.lines().nth(1).unwrap().starts_with("0,0,,"));
        let retention = std::fs::read_to_string(s.run_dir().join("retention.csv")).unwrap();
        assert_eq!(retention.lines().count(), 4);
    }
}
