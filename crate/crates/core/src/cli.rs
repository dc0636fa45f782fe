//! The `tracformer` command line.
//!
//! Every subcommand echoes its resolved configuration as JSON on stderr and
//! writes it next to any file it produces. Failures print one JSON line
//! `{"error": kind, "message": ..., "exit_code": n}` on stderr and exit with
//! 2 (usage), 3 (config), 4 (data or missing input) or 5 (numeric).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{lines, load_corpus, pack_sequences, BatchIterator, Vocab, MASK_ID};
use crate::diffusion::{
    conditional_nelbo_exact_small, conditional_nelbo_mc, diffusion_term_properties_check, Denoiser, LogLinear, TableDenoiser,
    TracformerAcDenoiser, UniformDenoiser, MAX_EXACT_FREE,
};
use crate::error::{Error, Result};
use crate::eval::{conditional_ppl, gap_histogram_csv, order_consistency_gap, order_deficits, unconditional_ppl, AcConditional, OrderGap};
use crate::infer::{ac_infill, car_generate};
use crate::joint::JointTable;
use crate::masking::{fixed_range_mask, parse_ranges, sample_mixed_mask, MaskSample, MaskStrategy, SpanDistribution};
use crate::masks::{dump_csv, MaskKind};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::train::{trace_csv, train_loop, trailing_mean, Objective, TrainConfig};

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "TRACFORMER_SEED";

#[derive(Parser, Debug)]
#[command(name = "tracformer", version, about = "Train, evaluate and sample Tracformer models")]
struct Cli {
    /// Worker threads for evaluation (results do not depend on it).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a character corpus.
    Train(TrainArgs),
    /// Conditional or unconditional perplexity of a checkpoint.
    EvalPpl(EvalArgs),
    /// Log-likelihood spread across factorization orders.
    OrderGap(OrderGapArgs),
    /// Generate sequences left to right.
    Sample(SampleArgs),
    /// Fill the `_` positions of a text.
    Infill(InfillArgs),
    /// Conditional NELBO of an absorbing-mask diffusion denoiser.
    Nelbo(NelboArgs),
    /// Attention layouts as CSV rows `layer,t,t'`.
    MasksDump(MasksDumpArgs),
    /// Draw context sets from a masking strategy.
    MasksSample(MasksSampleArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file or directory (overrides the config).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Override any config key, e.g. `--set train.batch_size=8`. Values are parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary JSON; defaults to `vocab.json` beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<(Model<f32>, Vocab)> {
        let model = load_checkpoint(&self.checkpoint)?;
        let vocab_path = self
            .vocab
            .clone()
            .unwrap_or_else(|| self.checkpoint.parent().unwrap_or(Path::new(".")).join("vocab.json"));
        let vocab = Vocab::load(&vocab_path)?;
        if vocab.size() != model.config.vocab_size {
            return Err(Error::Data(format!("vocabulary has {} ids but the checkpoint expects {}", vocab.size(), model.config.vocab_size)));
        }
        Ok((model, vocab))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveArg {
    Car,
    Ac,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Car => Objective::Car,
            ObjectiveArg::Ac => Objective::Ac,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistArg {
    Geometric,
    Dlogistic,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Full strategy as JSON, e.g. `{"kind":"mixed"}`.
    #[arg(long)]
    strategy: Option<String>,
    /// Fixed fractional ranges to mask, e.g. `0.25:0.75`.
    #[arg(long)]
    ranges: Option<String>,
    /// Span mask ratio.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long, value_enum, default_value = "geometric")]
    dist: DistArg,
    #[arg(long, default_value_t = 3.0)]
    span_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Mixed strategy: full, high-ratio and moderate span masks.
    #[arg(long)]
    mixed: bool,
}

impl MaskArgs {
    fn strategy(&self) -> Result<MaskStrategy> {
        if let Some(s) = &self.strategy {
            return serde_json::from_str(s).map_err(|e| Error::Config(format!("mask strategy: {e}")));
        }
        if let Some(r) = &self.ranges {
            return Ok(MaskStrategy::Ranges { ranges: parse_ranges(r)? });
        }
        if self.mixed {
            return Ok(MaskStrategy::Mixed {});
        }
        let span = match self.dist {
            DistArg::Geometric => SpanDistribution::Geometric { mean: self.span_mean },
            DistArg::Dlogistic => SpanDistribution::DLogistic { mean: self.span_mean, sigma: self.sigma },
        };
        span.validate()?;
        Ok(MaskStrategy::Span { ratio: self.ratio, span })
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "car")]
    objective: ObjectiveArg,
    /// Left-to-right perplexity with nothing given (EOS scored).
    #[arg(long)]
    unconditional: bool,
    #[command(flatten)]
    mask: MaskArgs,
    /// Sequence length; defaults to the smaller of 128 and the model's maximum.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    max_sequences: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OrderGapArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Corpus to cut windows from.
    #[arg(long, required_unless_present = "text")]
    corpus: Option<PathBuf>,
    /// Score this text instead of corpus windows.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, default_value_t = 5)]
    len: usize,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    /// Explicit orders `1,2,3;3,2,1`; required above length 6.
    #[arg(long)]
    orders: Option<String>,
    /// Histogram bucket width in nats.
    #[arg(long, default_value_t = 0.25)]
    bucket: f64,
    /// Output directory for `order_gap.json` and `gap_histogram.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Given opening text.
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InfillArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Text whose `_` characters are to be filled.
    #[arg(long)]
    text: String,
    #[arg(long, value_enum, default_value = "car")]
    objective: ObjectiveArg,
    /// CAR sampling temperature; 0 is greedy.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DenoiserKind {
    TracformerAc,
    Uniform,
    Table,
}

#[derive(Args, Debug)]
struct NelboArgs {
    #[arg(long, value_enum)]
    denoiser: DenoiserKind,
    /// Checkpoint for `tracformer-ac`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Clean text for `tracformer-ac`.
    #[arg(long)]
    text: Option<String>,
    /// Clean token ids `0,3,1` for `uniform` and `table`.
    #[arg(long)]
    tokens: Option<String>,
    /// Real tokens of the `uniform` denoiser.
    #[arg(long, default_value_t = 4)]
    num_tokens: usize,
    /// Vocabulary of the random `table` joint.
    #[arg(long, default_value_t = 3)]
    table_vocab: usize,
    /// Fractional ranges to score; everything else is given. Default: score all.
    #[arg(long)]
    ranges: Option<String>,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Also enumerate exactly (at most 8 scored positions).
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 201)]
    quad_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MasksDumpArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long = "T")]
    len: usize,
    #[arg(long)]
    nmax: usize,
    /// prefix, suffix, dec-prefix or dec-suffix.
    #[arg(long, default_value = "prefix")]
    kind: String,
}

#[derive(Args, Debug)]
struct MasksSampleArgs {
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    seed: Option<u64>,
}

/// Settings of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub seq_len: usize,
    /// Keep only the first this many packed sequences.
    pub max_sequences: Option<usize>,
    /// Treat every non-empty line as a document.
    pub split_lines: bool,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            out: PathBuf::from("run"),
            seq_len: 64,
            max_sequences: None,
            split_lines: true,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Architecture without the corpus-derived fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_max: usize,
    pub dropout: f64,
    pub allow_shallow: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::desk(4, MASK_ID);
        Self { layers: d.layers, d_model: d.d_model, heads: d.heads, n_max: d.n_max, dropout: d.dropout, allow_shallow: d.allow_shallow }
    }
}

impl ModelSpec {
    pub fn resolve(&self, max_len: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            max_len,
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            n_max: self.n_max,
            vocab_size,
            mask_token: MASK_ID,
            dropout: self.dropout,
            allow_shallow: self.allow_shallow,
        }
    }
}

/// Sets a dotted `key` of a JSON object, parsing `value` as JSON when it can.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_owned()).or_insert_with(|| json!({}));
    }
    Ok(())
}

/// Seed from the flag, else the configured value, else `TRACFORMER_SEED`, else 0.
fn resolve_seed(flag: Option<u64>, configured: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(configured) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Merges a config file, overrides and flags into one validated run config.
pub fn resolve_run_config(
    file: Option<&Path>,
    overrides: &[String],
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<RunConfig> {
    let mut root = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::MissingInput(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    if !root.is_object() {
        return Err(Error::Config("run config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let configured_seed = root.pointer("/train/seed").and_then(Value::as_u64);
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    cfg.corpus = corpus.or(cfg.corpus);
    cfg.out = out.unwrap_or(cfg.out);
    cfg.train.seed = resolve_seed(seed, configured_seed)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

/// Packed training rows and the vocabulary built over the corpus.
pub fn corpus_sequences(path: &Path, seq_len: usize, split_lines: bool, vocab: Option<&Vocab>) -> Result<(Vec<Vec<u32>>, Vocab)> {
    let docs = load_corpus(path)?;
    let docs: Vec<String> = if split_lines { docs.iter().flat_map(|d| lines(d)).collect() } else { docs };
    if docs.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", path.display())));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocab::build(&docs.concat()),
    };
    let encoded = docs.iter().map(|d| vocab.encode(d)).collect::<Result<Vec<_>>>()?;
    Ok((pack_sequences(&encoded, seq_len)?, vocab))
}

fn echo_config(config: &Value, beside: Option<&Path>) -> Result<()> {
    eprintln!("config: {config}");
    if let Some(path) = beside {
        let target = if path.is_dir() {
            path.join("config.json")
        } else {
            let mut name = path.file_name().map(OsString::from).unwrap_or_default();
            name.push(".config.json");
            path.with_file_name(name)
        };
        fs::write(target, serde_json::to_string_pretty(config)? + "\n")?;
    }
    Ok(())
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<Value> {
    let cfg = resolve_run_config(a.config.as_deref(), &a.overrides, a.corpus, a.out, a.seed, a.steps)?;
    let corpus = cfg.corpus.clone().ok_or_else(|| Error::Usage("train needs --corpus or a `corpus` config key".into()))?;
    let (mut sequences, vocab) = corpus_sequences(&corpus, cfg.seq_len, cfg.split_lines, None)?;
    if let Some(n) = cfg.max_sequences {
        sequences.truncate(n);
    }
    let model_cfg = cfg.model.resolve(cfg.seq_len, vocab.size());
    fs::create_dir_all(&cfg.out)?;
    echo_config(&json!({"run": cfg, "model": model_cfg, "sequences": sequences.len()}), Some(&cfg.out))?;
    let mut model = Model::<f32>::init(model_cfg, cfg.train.seed)?;
    vocab.save(&cfg.out.join("vocab.json"))?;
    let mut batches = BatchIterator::new(sequences, cfg.train.batch_size, cfg.train.seed)?;
    let (log_every, ckpt_every, out) = (cfg.train.log_every, cfg.train.checkpoint_every, cfg.out.clone());
    let trace = train_loop(&mut model, &mut batches, &cfg.train, &mut |rec, m| {
        if rec.step % log_every == 0 {
            eprintln!("step {} loss {:.4} lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        if ckpt_every > 0 && rec.step % ckpt_every == 0 {
            save_checkpoint(m, &out.join(format!("checkpoint-{:06}.bin", rec.step)))?;
        }
        Ok(())
    })?;
    let checkpoint = cfg.out.join("model.bin");
    save_checkpoint(&model, &checkpoint)?;
    fs::write(cfg.out.join("trace.csv"), trace_csv(&trace))?;
    Ok(json!({
        "checkpoint": checkpoint,
        "steps": trace.len(),
        "final_loss": trace.last().map(|r| r.loss),
        "trailing_mean_loss": trailing_mean(&trace, 10.min(trace.len())),
    }))
}

fn run_eval(a: EvalArgs, threads: usize) -> Result<Value> {
    let (model, vocab) = a.model.load()?;
    let len = a.len.unwrap_or(model.config.max_len.min(crate::eval::DEFAULT_EVAL_LEN));
    let (mut seqs, _) = corpus_sequences(&a.corpus, len, true, Some(&vocab))?;
    if let Some(n) = a.max_sequences {
        seqs.truncate(n);
    }
    let seed = resolve_seed(a.seed, None)?;
    let strategy = if a.unconditional { MaskStrategy::Full {} } else { a.mask.strategy()? };
    let objective = if a.unconditional { Objective::Car } else { a.objective.into() };
    echo_config(
        &json!({"command": "eval-ppl", "checkpoint": a.model.checkpoint, "corpus": a.corpus, "len": len, "sequences": seqs.len(),
                "objective": objective, "unconditional": a.unconditional, "mask": strategy, "seed": seed, "threads": threads}),
        a.out.as_deref(),
    )?;
    let report = if a.unconditional {
        unconditional_ppl(&model, &seqs, threads)?
    } else {
        conditional_ppl(&model, &seqs, objective, &strategy, seed, threads)?
    };
    if let Some(p) = &a.out {
        write_output(p, &(report.to_json()? + "\n"))?;
    }
    Ok(json!({"perplexity": report.perplexity, "tokens": report.tokens, "sequences": report.sequences, "skipped": report.skipped}))
}

fn parse_orders(text: &str) -> Result<Vec<Vec<usize>>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|o| {
            o.split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad position `{t}` in order `{o}`"))))
                .collect()
        })
        .collect()
}

fn run_order_gap(a: OrderGapArgs, threads: usize) -> Result<Value> {
    let (model, vocab) = a.model.load()?;
    let seqs: Vec<Vec<u32>> = match (&a.text, &a.corpus) {
        (Some(t), _) => vec![vocab.encode(t)?],
        (None, Some(c)) => {
            let (rows, _) = corpus_sequences(c, a.len, true, Some(&vocab))?;
            rows.into_iter().filter(|r| !r.contains(&crate::data::PAD_ID)).take(a.sequences).collect()
        }
        (None, None) => return Err(Error::Usage("order-gap needs --corpus or --text".into())),
    };
    let orders = a.orders.as_deref().map(parse_orders).transpose()?;
    echo_config(
        &json!({"command": "order-gap", "checkpoint": a.model.checkpoint, "len": a.len, "sequences": seqs.len(),
                "orders": orders, "bucket": a.bucket, "threads": threads}),
        a.out.as_deref(),
    )?;
    let cond = AcConditional { model: &model };
    let gaps: Vec<OrderGap> = crate::parallel_map(seqs.len(), threads, |i| order_consistency_gap(&cond, &seqs[i], orders.as_deref()))?;
    let deficits: Vec<f64> = gaps.iter().flat_map(order_deficits).collect();
    let histogram = gap_histogram_csv(&deficits, a.bucket)?;
    let per_seq: Vec<f64> = gaps.iter().map(|g| g.gap).collect();
    let summary = json!({
        "sequences": gaps.len(),
        "mean_gap": per_seq.iter().sum::<f64>() / per_seq.len().max(1) as f64,
        "max_gap": per_seq.iter().copied().fold(0.0, f64::max),
        "gaps": per_seq,
    });
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let texts: Vec<String> = seqs.iter().map(|s| vocab.decode(s)).collect();
        let full = json!({"summary": summary, "texts": texts, "results": gaps});
        fs::write(dir.join("order_gap.json"), serde_json::to_string_pretty(&full)? + "\n")?;
        fs::write(dir.join("gap_histogram.csv"), &histogram)?;
    } else {
        print!("{histogram}");
    }
    Ok(summary)
}

fn run_sample(a: SampleArgs) -> Result<Value> {
    let (model, vocab) = a.model.load()?;
    let len = a.len.unwrap_or(model.config.max_len);
    let prompt = vocab.encode(&a.prompt)?;
    if prompt.len() >= len {
        return Err(Error::Config(format!("prompt of {} characters leaves nothing to generate in {len}", prompt.len())));
    }
    let seed = resolve_seed(a.seed, None)?;
    echo_config(
        &json!({"command": "sample", "checkpoint": a.model.checkpoint, "len": len, "count": a.count,
                "temperature": a.temperature, "prompt": a.prompt, "seed": seed}),
        a.out.as_deref(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = prompt.clone();
    x.resize(len, MASK_ID);
    let sample = MaskSample::from_mask(&(1..=len).map(|t| t > prompt.len()).collect::<Vec<_>>());
    let mut texts = Vec::with_capacity(a.count);
    for _ in 0..a.count {
        let g = car_generate(&model, &x, &sample, a.temperature, &mut rng)?;
        let text = vocab.decode(&g.tokens);
        println!("{text}");
        texts.push(json!({"text": text, "tokens": g.tokens, "logprob": g.steps.iter().map(|s| s.logprob).sum::<f64>()}));
    }
    let out = json!({"samples": texts});
    if let Some(p) = &a.out {
        write_output(p, &(serde_json::to_string_pretty(&out)? + "\n"))?;
    }
    Ok(json!({"count": a.count}))
}

fn run_infill(a: InfillArgs) -> Result<Value> {
    let (model, vocab) = a.model.load()?;
    let chars: Vec<char> = a.text.chars().collect();
    let blanks: Vec<usize> = (1..=chars.len()).filter(|&t| chars[t - 1] == '_').collect();
    if blanks.is_empty() {
        return Err(Error::Data("the text has no `_` to fill".into()));
    }
    let mut x = Vec::with_capacity(chars.len());
    for &c in &chars {
        x.push(if c == '_' { MASK_ID } else { vocab.encode(&c.to_string())?[0] });
    }
    let sample = MaskSample::from_blanks(x.len(), &blanks)?;
    let seed = resolve_seed(a.seed, None)?;
    echo_config(
        &json!({"command": "infill", "checkpoint": a.model.checkpoint, "text": a.text, "objective": a.objective,
                "temperature": a.temperature, "seed": seed}),
        a.out.as_deref(),
    )?;
    let filled = match a.objective {
        ObjectiveArg::Car => car_generate(&model, &x, &sample, a.temperature, &mut ChaCha8Rng::seed_from_u64(seed))?.tokens,
        ObjectiveArg::Ac => ac_infill(&model, &x, &sample)?,
    };
    let text = vocab.decode(&filled);
    println!("{text}");
    let out = json!({"input": a.text, "output": text, "blanks": blanks});
    if let Some(p) = &a.out {
        write_output(p, &(serde_json::to_string_pretty(&out)? + "\n"))?;
    }
    Ok(out)
}

fn parse_tokens(text: &str) -> Result<Vec<u32>> {
    text.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| Error::Config(format!("bad token id `{t}`"))))
        .collect()
}

fn nelbo_with<D: Denoiser>(den: &D, x: &[u32], a: &NelboArgs, seed: u64, threads: usize) -> Result<Value> {
    let scored = match &a.ranges {
        Some(r) => fixed_range_mask(&parse_ranges(r)?, x.len())?,
        None => MaskSample::full(x.len()),
    };
    diffusion_term_properties_check(den, x, &scored.context, &LogLinear)?.ensure()?;
    let est = conditional_nelbo_mc(den, x, &scored.context, &LogLinear, a.samples, seed, threads)?;
    let mut out = json!({"nelbo": est.nelbo, "stderr": est.stderr, "n": est.n});
    if a.exact {
        if scored.blank_ids.len() > MAX_EXACT_FREE {
            return Err(Error::Config(format!("--exact allows at most {MAX_EXACT_FREE} scored positions")));
        }
        out["exact"] = json!(conditional_nelbo_exact_small(den, x, &scored.context, &LogLinear, a.quad_points)?);
    }
    Ok(out)
}

fn run_nelbo(a: NelboArgs, threads: usize) -> Result<Value> {
    let seed = resolve_seed(a.seed, None)?;
    echo_config(
        &json!({"command": "nelbo", "denoiser": a.denoiser, "checkpoint": a.checkpoint, "text": a.text, "tokens": a.tokens,
                "num_tokens": a.num_tokens, "table_vocab": a.table_vocab, "ranges": a.ranges, "samples": a.samples,
                "seed": seed, "exact": a.exact, "quad_points": a.quad_points, "threads": threads}),
        a.out.as_deref(),
    )?;
    let need_tokens = || a.tokens.as_deref().ok_or_else(|| Error::Usage("this denoiser needs --tokens".into())).and_then(parse_tokens);
    let out = match a.denoiser {
        DenoiserKind::TracformerAc => {
            let checkpoint = a.checkpoint.clone().ok_or_else(|| Error::Usage("tracformer-ac needs --checkpoint".into()))?;
            let (model, vocab) = ModelArgs { checkpoint, vocab: a.vocab.clone() }.load()?;
            let text = a.text.as_deref().ok_or_else(|| Error::Usage("tracformer-ac needs --text".into()))?;
            nelbo_with(&TracformerAcDenoiser { model: &model }, &vocab.encode(text)?, &a, seed, threads)?
        }
        DenoiserKind::Uniform => nelbo_with(&UniformDenoiser { num_tokens: a.num_tokens }, &need_tokens()?, &a, seed, threads)?,
        DenoiserKind::Table => {
            let x = need_tokens()?;
            // The joint is drawn from its own stream so the estimator's samples stay untouched.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX);
            let joint = JointTable::random(x.len(), a.table_vocab, &mut rng)?;
            nelbo_with(&TableDenoiser { joint }, &x, &a, seed, threads)?
        }
    };
    if let Some(p) = &a.out {
        write_output(p, &(serde_json::to_string_pretty(&out)? + "\n"))?;
    }
    Ok(out)
}

fn run_masks_dump(a: MasksDumpArgs) -> Result<Value> {
    let kind: MaskKind = a.kind.parse()?;
    echo_config(&json!({"command": "masks-dump", "layers": a.layers, "T": a.len, "nmax": a.nmax, "kind": a.kind}), None)?;
    print!("{}", dump_csv(kind, a.layers, a.len, a.nmax)?);
    Ok(Value::Null)
}

fn run_masks_sample(a: MasksSampleArgs) -> Result<Value> {
    let strategy = a.mask.strategy()?;
    let seed = resolve_seed(a.seed, None)?;
    echo_config(&json!({"command": "masks-sample", "len": a.len, "count": a.count, "strategy": strategy, "seed": seed}), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("sample,branch,masked,mask\n");
    for i in 0..a.count {
        let (branch, s) = match &strategy {
            MaskStrategy::Mixed {} => {
                let d = sample_mixed_mask(a.len, &mut rng)?;
                (format!("{:?}", d.branch).to_lowercase(), d.sample)
            }
            other => (String::new(), other.sample(a.len, &mut rng)?),
        };
        let bits: String = s.mask_vector().iter().map(|&m| if m { '1' } else { '0' }).collect();
        out.push_str(&format!("{i},{branch},{},{bits}\n", s.blank_ids.len()));
    }
    print!("{out}");
    Ok(Value::Null)
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                report(&Error::Usage(e.kind().to_string()));
                return 2;
            }
            return 0;
        }
    };
    let threads = cli.threads.max(1);
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::EvalPpl(a) => run_eval(a, threads),
        Command::OrderGap(a) => run_order_gap(a, threads),
        Command::Sample(a) => run_sample(a),
        Command::Infill(a) => run_infill(a),
        Command::Nelbo(a) => run_nelbo(a, threads),
        Command::MasksDump(a) => run_masks_dump(a),
        Command::MasksSample(a) => run_masks_sample(a),
    };
    match result {
        Ok(Value::Null) => 0,
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

fn report(e: &Error) {
    eprintln!("{}", json!({"error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()}));
}
