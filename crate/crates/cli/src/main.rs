//! `benh`: corpus generation, training, embedding, search and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use benh_core::artifact::write_atomic;
use benh_core::checkpoint::Model;
use benh_core::corpus::{
    generate_synthetic, load_corpus, to_bcf_bytes, Corpus, LoadOptions, Split, SynthConfig,
};
use benh_core::embed::{to_beem_bytes, EmbeddingMatrix};
use benh_core::encode::EncodedCorpus;
use benh_core::eval::{
    ablate, inlining_decline, run_pool_eval, timing_benchmark, EvalConfig, ModelScorer, PairScorer,
    ScorerKind, DEFAULT_POOLS, LARGE_POOLS,
};
use benh_core::train::{log_to_jsonl, train_with_progress, TrainConfig};

#[derive(Parser)]
#[command(
    name = "benh",
    version,
    about = "Context-enhanced binary function similarity"
)]
struct Cli {
    /// Worker threads (falls back to BENH_THREADS, then all cores).
    #[arg(long, global = true, env = "BENH_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Check a corpus file and print a summary.
    Validate(ValidateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Write enhanced embeddings of every function as a BEEM file.
    Embed(EmbedArgs),
    /// Top-k most similar functions for one query.
    Search(SearchArgs),
    /// Pool-based retrieval evaluation on the test split.
    Eval(EvalArgs),
    /// Retrain with each edge type or the combiner removed.
    Ablate(AblateArgs),
    /// Brute-force search time against embedding width.
    BenchTime(BenchArgs),
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Ignore unknown fields in the corpus file.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Generator config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Training config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    md: Option<u32>,
    #[arg(long)]
    d_t: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Query function id.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Also write the result here (stdout always receives it).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Enhanced,
    Raw,
}

impl From<ScorerArg> for ScorerKind {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Enhanced => ScorerKind::Enhanced,
            ScorerArg::Raw => ScorerKind::Raw,
        }
    }
}

#[derive(Args)]
struct PoolArgs {
    /// Pool sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pools: Option<Vec<usize>>,
    /// Add the large pool sizes.
    #[arg(long)]
    large: bool,
    /// Cap on the number of queries.
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PoolArgs {
    fn eval_config(&self) -> Result<EvalConfig> {
        let mut pools = self.pools.clone().unwrap_or_else(|| DEFAULT_POOLS.to_vec());
        if self.large {
            pools.extend(LARGE_POOLS);
        }
        pools.sort_unstable();
        pools.dedup();
        if pools.first().is_some_and(|&p| p < 2) {
            return Err(Usage("pool sizes must be at least 2".into()).into());
        }
        Ok(EvalConfig {
            pool_sizes: pools,
            n_queries: self.n_queries,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    pools: PoolArgs,
    #[arg(long, value_enum, default_value = "enhanced")]
    scorer: ScorerArg,
    /// No-inline build of the same sources: report the inlining decline at
    /// the smallest pool size instead.
    #[arg(long)]
    noinline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Training corpus; its train split is used.
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Evaluation corpus (test split); defaults to the training corpus.
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    pools: PoolArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,768")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pool: usize,
    #[arg(long, default_value_t = 2_500)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Bad flag values detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    tool_version: &'a str,
    config: Value,
    seed: Option<u64>,
    rng: &'a str,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix: f64,
    finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

struct Run {
    subcommand: &'static str,
    started: f64,
    inputs: Vec<String>,
}

impl Run {
    fn new(subcommand: &'static str, inputs: &[&Path]) -> Self {
        Run {
            subcommand,
            started: now(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    /// Write every output, then the manifest next to the primary one.
    fn finish(self, outputs: &[(&Path, &[u8])], config: Value, seed: Option<u64>) -> Result<()> {
        for (path, bytes) in outputs {
            write_atomic(path, bytes)?;
        }
        let manifest = Manifest {
            subcommand: self.subcommand,
            tool_version: benh_core::TOOL_VERSION,
            config,
            seed,
            rng: "ChaCha8",
            inputs: self.inputs,
            outputs: outputs
                .iter()
                .map(|(p, _)| p.display().to_string())
                .collect(),
            started_unix: self.started,
            finished_unix: now(),
        };
        let primary = outputs.first().expect("at least one output").0;
        write_atomic(&manifest_path(primary), &pretty(&manifest)?)?;
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    let v = serde_path_to_error::deserialize(&mut de)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(v)
}

fn corpus(a: &CorpusArgs) -> Result<Corpus> {
    load_corpus(&a.corpus, LoadOptions { lenient: a.lenient })
        .with_context(|| format!("loading corpus {}", a.corpus.display()))
}

fn model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let run = Run::new(
        "gen",
        &a.config.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
    );
    let mut cfg: SynthConfig = read_json(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let c = generate_synthetic(&cfg)?;
    eprintln!(
        "generated {} binaries, {} functions",
        c.binaries.len(),
        c.num_functions()
    );
    run.finish(
        &[(&a.out, &to_bcf_bytes(&c))],
        serde_json::to_value(&cfg)?,
        Some(cfg.seed),
    )
}

fn validate(a: ValidateArgs) -> Result<()> {
    let c = corpus(&a.corpus)?;
    let mut splits = std::collections::BTreeMap::new();
    for b in &c.binaries {
        *splits
            .entry(format!("{:?}", b.split).to_lowercase())
            .or_insert(0usize) += 1;
    }
    let summary = json!({
        "binaries": c.binaries.len(),
        "functions": c.num_functions(),
        "strings": c.binaries.iter().map(|b| b.strings.len()).sum::<usize>(),
        "globals": c.binaries.iter().map(|b| b.globals.len()).sum::<usize>(),
        "homology_groups": c.homology_groups().len(),
        "binaries_by_split": splits,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut inputs = vec![a.corpus.corpus.as_path()];
    inputs.extend(a.config.as_deref());
    let run = Run::new("train", &inputs);
    let mut cfg: TrainConfig = read_json(a.config.as_deref())?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.md = a.md.unwrap_or(cfg.md);
    cfg.d_t = a.d_t.unwrap_or(cfg.d_t);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    let c = corpus(&a.corpus)?;
    let out = train_with_progress(&c, &cfg, |_| {})?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>3}  mean loss {l:.6}", e + 1);
    }
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let ckpt = out.model.to_bytes()?;
    let log = log_to_jsonl(&out.log);
    run.finish(
        &[(&a.out, &ckpt), (&log_path, log.as_bytes())],
        serde_json::to_value(&cfg)?,
        Some(cfg.seed),
    )
}

fn embed(a: EmbedArgs) -> Result<()> {
    let run = Run::new("embed", &[&a.ckpt, &a.corpus.corpus]);
    let m = model(&a.ckpt)?;
    let c = corpus(&a.corpus)?;
    let enc = EncodedCorpus::new(&c, &m)?;
    let emb = enc.enhance_all(&m)?;
    let mut out = EmbeddingMatrix::new(m.config.sem.d_t);
    for (g, row) in emb.into_iter().enumerate() {
        out.insert(enc.function_id(g), row)?;
    }
    run.finish(
        &[(&a.out, &to_beem_bytes(&out)?)],
        json!({ "model": m.config }),
        None,
    )
}

#[derive(Serialize)]
struct Hit<'a> {
    function_id: &'a str,
    score: f64,
}

fn search(a: SearchArgs) -> Result<()> {
    let m = model(&a.ckpt)?;
    let c = corpus(&a.corpus)?;
    let enc = EncodedCorpus::new(&c, &m)?;
    let q = enc
        .find(&a.query)
        .ok_or_else(|| benh_core::Error::UnknownFunction(a.query.clone()))?;
    let emb = enc.enhance_all(&m)?;
    let scorer = ModelScorer {
        ffn: m.params.ffn(),
        mode: m.config.sim_mode,
        q_emb: &emb,
        q_feat: &enc.features,
        c_emb: &emb,
        c_feat: &enc.features,
    };
    let mut hits: Vec<Hit<'_>> = (0..enc.len())
        .filter(|&g| g != q)
        .map(|g| Hit {
            function_id: enc.function_id(g),
            score: scorer.score(q, g),
        })
        .collect();
    hits.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then_with(|| x.function_id.cmp(y.function_id))
    });
    hits.truncate(a.k);
    let bytes = pretty(&hits)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(out) = &a.out {
        Run::new("search", &[&a.ckpt, &a.corpus.corpus]).finish(
            &[(out, &bytes)],
            json!({ "query": a.query, "k": a.k }),
            None,
        )?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut inputs = vec![a.ckpt.as_path(), a.corpus.corpus.as_path()];
    inputs.extend(a.noinline.as_deref());
    let run = Run::new("eval", &inputs);
    let cfg = a.pools.eval_config()?;
    let m = model(&a.ckpt)?;
    let c = corpus(&a.corpus)?;
    let report = match &a.noinline {
        Some(path) => {
            let ni = load_corpus(
                path,
                LoadOptions {
                    lenient: a.corpus.lenient,
                },
            )
            .with_context(|| format!("loading corpus {}", path.display()))?;
            let r = inlining_decline(&m, &c, &ni, cfg.pool_sizes[0], cfg.n_queries, cfg.seed)?;
            serde_json::to_value(r)?
        }
        None => {
            let r = run_pool_eval(&m, &c, &cfg, a.scorer.into())?;
            for (p, map) in &r.map_by_pool {
                eprintln!("P={p:<6} MAP {map:.4}");
            }
            serde_json::to_value(r)?
        }
    };
    run.finish(
        &[(&a.out, &pretty(&report)?)],
        serde_json::to_value(&cfg)?,
        Some(cfg.seed),
    )
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let mut inputs = vec![a.corpus.corpus.as_path()];
    inputs.extend(a.eval_corpus.as_deref());
    inputs.extend(a.config.as_deref());
    let run = Run::new("ablate", &inputs);
    let cfg: TrainConfig = read_json(a.config.as_deref())?;
    let ecfg = a.pools.eval_config()?;
    let train_corpus = corpus(&a.corpus)?.with_split(Split::Train);
    let eval_corpus = match &a.eval_corpus {
        Some(p) => load_corpus(
            p,
            LoadOptions {
                lenient: a.corpus.lenient,
            },
        )
        .with_context(|| format!("loading corpus {}", p.display()))?,
        None => corpus(&a.corpus)?,
    };
    let table = ablate(&train_corpus, &eval_corpus, &cfg, &ecfg)?;
    for row in &table.rows {
        eprintln!("{:<18} {:?}", row.name, row.map_by_pool);
    }
    run.finish(
        &[(&a.out, &pretty(&table)?)],
        json!({ "train": cfg, "eval": ecfg }),
        Some(cfg.seed),
    )
}

fn bench(a: BenchArgs) -> Result<()> {
    let run = Run::new("bench-time", &[]);
    let t = timing_benchmark(&a.dims, a.pool, a.queries, a.seed)?;
    for r in &t.rows {
        eprintln!(
            "dim {:>5}  {:.3}s  ratio {:.3}",
            r.dim, r.seconds, r.ratio_to_largest
        );
    }
    run.finish(
        &[(&a.out, &pretty(&t)?)],
        json!({ "dims": a.dims, "pool": a.pool, "queries": a.queries }),
        Some(a.seed),
    )
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Validate(a) => validate(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::BenchTime(a) => bench(a),
    }
}

/// 1 usage, 2 bad input data, 3 internal.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<benh_core::Error>() {
            return if core.is_internal() { 3 } else { 2 };
        }
        if cause.is::<serde_json::Error>()
            || cause.is::<serde_path_to_error::Error<serde_json::Error>>()
            || cause.is::<std::io::Error>()
        {
            return 2;
        }
    }
    3
}

/// Cause chain joined by `: `, skipping causes already quoted by their
/// parent's message.
fn render(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|p| p.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
