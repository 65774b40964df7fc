use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lenlab::corpus::{self, BpeModel, Bucketing, ParallelPair, Side};
use lenlab::decode::{translate_all, BeamConfig, Strategy};
use lenlab::eval::{self, BootstrapConfig, EvalOptions, Metric};
use lenlab::model::{train, Checkpoint, EncodedPair, Init, ModelConfig, TrainConfig, ValidMetric, Vocab};
use lenlab::runner::{self, ExperimentSpec, RunOptions};
use lenlab::taskgen::{self, BucketPlan, SplitCounts, TaskSelection};
use lenlab::BucketRange;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "lenlab", version, about = "Length-overfitting experiments for seq2seq Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate string-editing task data
    GenTasks(GenTasks),
    /// Split a parallel corpus into width-10 length buckets
    Bucket(BucketCmd),
    /// Concatenate short pairs into a target-length window
    Concat(ConcatCmd),
    /// Learn BPE merges
    BpeLearn(BpeLearn),
    /// Segment text with learned merges
    BpeApply(BpeApply),
    /// Prepend bucket-label tokens to the source side
    Label(LabelCmd),
    /// Train a model on a parallel corpus
    Train(TrainCmd),
    /// Translate a source file with a checkpoint
    Decode(DecodeCmd),
    /// Score hypotheses against references
    Evaluate(EvaluateCmd),
    /// Run an experiment spec
    Run(RunCmd),
}

fn parse_ranges(s: &str) -> Result<Vec<BucketRange>> {
    s.split(',').map(|r| runner::spec::parse_range(r.trim()).map_err(anyhow::Error::from)).collect()
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    PathBuf::from(format!("{}.{ext}", prefix.display()))
}

#[derive(Args)]
struct GenTasks {
    /// copy, push, pop, shift, unshift, reverse or all
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "1:10,11:15,16:20")]
    buckets: String,
    /// Bucket that gets train/valid splits; the others only get a test split
    #[arg(long, default_value = "11:15")]
    train_bucket: String,
    #[arg(long, default_value_t = 28000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    valid: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn gen_tasks(a: GenTasks) -> Result<()> {
    let sel: TaskSelection = a.task.parse()?;
    let train_bucket = runner::spec::parse_range(&a.train_bucket)?;
    let plans: Vec<BucketPlan> = parse_ranges(&a.buckets)?
        .into_iter()
        .map(|range| {
            let counts = if range == train_bucket {
                SplitCounts { train: a.train, valid: a.valid, test: a.test }
            } else {
                SplitCounts { test: a.test, ..Default::default() }
            };
            BucketPlan { range, counts }
        })
        .collect();
    if !plans.iter().any(|p| p.range == train_bucket) {
        bail!("--train-bucket {train_bucket} is not among --buckets");
    }
    let ds = taskgen::build_dataset(sel, &plans, a.seed)?;
    ds.write(&a.out)?;
    for p in &ds.parts {
        eprintln!("{}: {} examples", p.file_stem(), p.instances.len());
    }
    Ok(())
}

#[derive(Args)]
struct BucketCmd {
    #[arg(long, default_value = "tgt")]
    side: Side,
    /// Corpus prefix (reads PREFIX.src and PREFIX.tgt)
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn bucket(a: BucketCmd) -> Result<()> {
    let pairs = corpus::read_parallel(&a.input)?;
    let split = corpus::bucket_split(pairs, a.side);
    for (label, pairs) in &split.buckets {
        corpus::write_parallel(&a.out.join(label.to_string()), pairs)?;
        eprintln!("bucket {label}: {} pairs", pairs.len());
    }
    eprintln!("overflow (longer than {}): {} pairs", Bucketing::STANDARD.max, split.overflow.len());
    Ok(())
}

#[derive(Args)]
struct ConcatCmd {
    #[arg(long, default_value = "51:60")]
    window: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn concat(a: ConcatCmd) -> Result<()> {
    let window = runner::spec::parse_range(&a.window)?;
    let pairs = corpus::read_parallel(&a.input)?;
    let out = corpus::concat_augment(&pairs, window, a.seed)?;
    corpus::write_parallel(&a.out, &out.pairs)?;
    let used: usize = out.groups.iter().map(Vec::len).sum();
    eprintln!("{} synthetic pairs from {used} of {} inputs", out.pairs.len(), pairs.len());
    Ok(())
}

#[derive(Args)]
struct BpeLearn {
    #[arg(long, default_value_t = 30000)]
    merges: usize,
    /// Text files to learn from
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn bpe_learn(a: BpeLearn) -> Result<()> {
    let mut lines = Vec::new();
    for p in &a.input {
        lines.extend(corpus::read_lines(p)?);
    }
    let model = BpeModel::learn(&lines, a.merges)?;
    model.save(&a.out)?;
    eprintln!("{} merges", model.merge_count());
    Ok(())
}

#[derive(Args)]
struct BpeApply {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn bpe_apply(a: BpeApply) -> Result<()> {
    let model = BpeModel::load(&a.model)?;
    let lines = corpus::read_lines(&a.input)?;
    corpus::write_lines(&a.out, lines.iter().map(|l| model.apply(l).join(" ")))?;
    Ok(())
}

#[derive(Args)]
struct LabelCmd {
    #[arg(long, default_value = "src")]
    side: Side,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn label(a: LabelCmd) -> Result<()> {
    let pairs = corpus::read_parallel(&a.input)?;
    let labelled = pairs.iter().map(|p| corpus::inject_bucket_label(p, a.side)).collect::<Result<Vec<ParallelPair>, _>>()?;
    corpus::write_parallel(&a.out, &labelled)?;
    Ok(())
}

#[derive(Args)]
struct TrainCmd {
    /// Training corpus prefix
    #[arg(long)]
    train: PathBuf,
    /// Validation corpus prefix
    #[arg(long)]
    valid: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Warm start from this checkpoint (its vocabulary and model shape are kept)
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 512)]
    d_ff: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    #[arg(long, default_value_t = 256)]
    max_positions: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4000)]
    warmup: u64,
    #[arg(long, default_value_t = 4096)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long)]
    patience: Option<usize>,
    /// loss, acc or bleu
    #[arg(long, default_value = "loss")]
    metric: ValidMetric,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn read_examples(prefix: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let src = corpus::read_lines(&with_ext(prefix, "src"))?;
    let tgt = corpus::read_lines(&with_ext(prefix, "tgt"))?;
    if src.len() != tgt.len() {
        bail!("{} has {} source lines but {} target lines", prefix.display(), src.len(), tgt.len());
    }
    Ok((src, tgt))
}

fn encode_lines(vocab: &Vocab, src: &[String], tgt: &[String]) -> Vec<EncodedPair> {
    src.iter().zip(tgt).map(|(s, t)| EncodedPair::new(vocab.encode_line(s), vocab.encode_line(t))).collect()
}

fn train_cmd(a: TrainCmd) -> Result<()> {
    let (ts, tt) = read_examples(&a.train)?;
    let (vs, vt) = read_examples(&a.valid)?;
    let (init, vocab, mcfg) = match &a.from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (v, c) = (ck.vocab.clone(), ck.config.clone());
            (Init::Checkpoint(Box::new(ck)), v, c)
        }
        None => {
            let vocab = Vocab::from_lines(ts.iter().chain(&tt).map(String::as_str));
            let cfg = ModelConfig {
                d_model: a.d_model,
                d_ff: a.d_ff,
                heads: a.heads,
                enc_layers: a.layers,
                dec_layers: a.layers,
                dropout: a.dropout,
                max_positions: a.max_positions,
                vocab_size: vocab.len(),
            };
            (Init::Fresh, vocab, cfg)
        }
    };
    let tcfg = TrainConfig {
        lr_max: a.lr,
        warmup_steps: a.warmup,
        batch_tokens: a.batch_tokens,
        max_epochs: a.epochs,
        patience: a.patience,
        seed: a.seed,
        ..TrainConfig::string_tasks(a.seed)
    };
    let train_data = encode_lines(&vocab, &ts, &tt);
    let valid_data = encode_lines(&vocab, &vs, &vt);
    let out = train(&mcfg, &tcfg, &vocab, &train_data, &valid_data, a.metric, init, &mut |r| {
        let loss = r.train_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into());
        eprintln!("epoch {:>3} step {:>6} train_loss {loss} valid_{} {:.4} lr {:.2e}", r.epoch, r.step, a.metric, r.valid_metric, r.lr);
    })?;
    out.best.save(&a.out)?;
    eprintln!("best epoch {} saved to {}", out.best.best_epoch, a.out.display());
    Ok(())
}

#[derive(Args)]
struct DecodeCmd {
    #[arg(long)]
    model: PathBuf,
    /// One tokenized source sentence per line
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    max_len_a: f64,
    #[arg(long, default_value_t = 10)]
    max_len_b: usize,
}

fn decode(a: DecodeCmd) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let model = ck.model()?;
    let strategy = if a.greedy {
        Strategy::Greedy
    } else {
        let cfg = BeamConfig { beam_size: a.beam, alpha: a.alpha, max_len_a: a.max_len_a, max_len_b: a.max_len_b, count_eos: true };
        cfg.validate().map_err(anyhow::Error::msg)?;
        Strategy::Beam(cfg)
    };
    let lines = corpus::read_lines(&a.input)?;
    let srcs: Vec<Vec<u32>> = lines.iter().map(|l| EncodedPair::new(ck.vocab.encode_line(l), Vec::new()).src).collect();
    let hyps = translate_all(&model, &srcs, &strategy)?;
    corpus::write_lines(&a.out, hyps.iter().map(|h| ck.vocab.decode(&h.tokens).join(" ")))?;
    Ok(())
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also report per width-10 bucket of reference (or --bucket-file) length
    #[arg(long)]
    by_bucket: bool,
    /// Source file whose lengths define the buckets instead of the references
    #[arg(long)]
    bucket_file: Option<PathBuf>,
    /// Bootstrap resamples for a 95% BLEU interval (0 = off)
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn evaluate(a: EvaluateCmd) -> Result<()> {
    let split = |p: &Path| -> Result<Vec<Vec<String>>> { Ok(corpus::read_lines(p)?.iter().map(|l| corpus::split_line(l)).collect()) };
    let hyps = split(&a.hyp)?;
    let refs = split(&a.reference)?;
    let opts = EvalOptions {
        bootstrap: (a.bootstrap > 0).then(|| (Metric::Bleu, BootstrapConfig { resamples: a.bootstrap, level: 0.95, seed: a.seed })),
    };
    let report = if a.by_bucket || a.bucket_file.is_some() {
        let lens: Vec<usize> = match &a.bucket_file {
            Some(p) => split(p)?.iter().map(Vec::len).collect(),
            None => refs.iter().map(Vec::len).collect(),
        };
        if lens.len() != refs.len() {
            bail!("bucket file has {} lines, references {}", lens.len(), refs.len());
        }
        // overflow lengths share key 0 and print as bucket 0
        let keys: Vec<u32> = lens.iter().map(|&l| Bucketing::STANDARD.label(l).unwrap_or(0)).collect();
        eval::evaluate_by_key(&hyps, &refs, &keys, &opts)?
    } else {
        eval::EvalReport { records: vec![eval::evaluate("all", &hyps, &refs, &opts)?] }
    };
    print!("{}", report.to_csv());
    Ok(())
}

#[derive(Args)]
struct RunCmd {
    #[arg(long)]
    spec: PathBuf,
    /// Skip rows whose checkpoint and report digests are already in place
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output root (default: the spec's `out`, else ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a spec setting, KEY=VALUE (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn run(a: RunCmd) -> Result<()> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
        spec.set(k.trim(), v.trim())?;
    }
    if let Some(out) = &a.out {
        spec.out = out.clone();
    }
    eprintln!("spec {} -> {}", spec.hash(), spec.run_dir().display());
    let progress = |m: &str| eprintln!("{m}");
    let outcome = runner::run(&spec, &RunOptions { resume: a.resume, jobs: a.jobs, progress: Some(&progress) })?;
    let mut failed: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &outcome.matrix.cells {
        if c.status != runner::CellStatus::Ok {
            *failed.entry(c.row.as_str()).or_default() += 1;
        }
    }
    print!("{}", outcome.matrix.wide_csv(if spec.kind == runner::ExperimentKind::StringSuite { "acc" } else { "bleu" }));
    for (row, n) in failed {
        eprintln!("row {row}: {n} failed cells (see meta.txt)");
    }
    eprintln!("results in {}", outcome.dir.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenTasks(a) => gen_tasks(a),
        Command::Bucket(a) => bucket(a),
        Command::Concat(a) => concat(a),
        Command::BpeLearn(a) => bpe_learn(a),
        Command::BpeApply(a) => bpe_apply(a),
        Command::Label(a) => label(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
    }
}
