//! Command-line surface: corpus generation, tokenizer training, model
//! training, recognition, evaluation, benchmarking, augmentation
//! preview, and checkpoint inspection.
//!
//! Every command exits 0 on success and nonzero with a single-line
//! `error: ...` message on stderr otherwise.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lineocr::augment::{apply_named, AugmentPolicy, Transform};
use lineocr::checkpoint::{bytes_hash, Checkpoint};
use lineocr::image::{read_pgm, write_pgm};
use lineocr::metrics::evaluate_corpus;
use lineocr::runtime::{bench, recognize_batch, Recognition};
use lineocr::search::SearchConfig;
use lineocr::tensor::{Dtype, Element};
use lineocr::textgen::{
    build_corpus, default_wordlist, read_manifest, CorpusConfig, Style, TextlineSample,
};
use lineocr::tokenizer::Tokenizer;
use lineocr::trainer::{run_training, TrainConfig, TrainData};
use lineocr::{ImageTensor, OcrModel};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lineocr",
    about = "Transformer OCR for textline images",
    version
)]
struct Cli {
    /// Size of the global worker pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic textline corpus (PGM images + manifest).
    Gen(GenArgs),
    /// Train a BPE tokenizer on manifest transcripts.
    TokenizerTrain(TokenizerTrainArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Recognize textline images with a trained checkpoint.
    Recognize(RecognizeArgs),
    /// Score predictions against a manifest.
    Eval(EvalArgs),
    /// Measure recognition throughput over a manifest.
    Bench(BenchArgs),
    /// Write before/after images for every augmentation transform.
    AugmentPreview(AugmentPreviewArgs),
    /// Print a checkpoint's header and blob table.
    CheckpointInspect(CheckpointInspectArgs),
}

fn main() -> ExitCode {
    // die quietly when stdout is closed early (e.g. piped to head)
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::TokenizerTrain(args) => cmd_tokenizer_train(args),
        Command::Train(args) => cmd_train(args),
        Command::Recognize(args) => cmd_recognize(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::AugmentPreview(args) => cmd_augment_preview(args),
        Command::CheckpointInspect(args) => cmd_checkpoint_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', "; ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

// ── gen ──────────────────────────────────────────────────────────────

/// Resolved `gen` configuration; written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    out_dir: PathBuf,
    /// Word list file (one word per line); built-in 100 words when absent.
    #[serde(default)]
    wordlist: Option<PathBuf>,
    corpus: CorpusConfig,
}

#[derive(Args)]
struct GenArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lines: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// printed | sheared
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    words_min: Option<usize>,
    #[arg(long)]
    words_max: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long)]
    wordlist: Option<PathBuf>,
}

fn parse_style(s: &str) -> anyhow::Result<Style> {
    match s {
        "printed" => Ok(Style::Printed),
        "sheared" => Ok(Style::Sheared),
        other => bail!("unknown style `{other}` (expected printed|sheared)"),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {path:?}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let mut cfg: GenConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => GenConfig {
            out_dir: PathBuf::new(),
            wordlist: None,
            corpus: CorpusConfig {
                num_lines: 100,
                words_per_line: (1, 4),
                seed: 0,
                style: Style::Printed,
                scale: 2,
                pad: 2,
            },
        },
    };
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(lines) = args.lines {
        cfg.corpus.num_lines = lines;
    }
    if let Some(seed) = args.seed {
        cfg.corpus.seed = seed;
    }
    if let Some(style) = &args.style {
        cfg.corpus.style = parse_style(style)?;
    }
    if let Some(min) = args.words_min {
        cfg.corpus.words_per_line.0 = min;
    }
    if let Some(max) = args.words_max {
        cfg.corpus.words_per_line.1 = max;
    }
    if let Some(scale) = args.scale {
        cfg.corpus.scale = scale;
    }
    if let Some(pad) = args.pad {
        cfg.corpus.pad = pad;
    }
    if let Some(wl) = args.wordlist {
        cfg.wordlist = Some(wl);
    }
    if cfg.out_dir.as_os_str().is_empty() {
        bail!("gen needs --out or an out_dir in the config");
    }

    let words = match &cfg.wordlist {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading {path:?}"))?;
            let words: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(String::from)
                .collect();
            words
        }
        None => default_wordlist(),
    };
    let manifest = build_corpus(&cfg.corpus, &words, &cfg.out_dir)?;
    write_json(&cfg.out_dir.join("gen.resolved.json"), &cfg)?;
    println!(
        "wrote {} lines to {}",
        cfg.corpus.num_lines,
        manifest.display()
    );
    Ok(())
}

// ── tokenizer-train ──────────────────────────────────────────────────

#[derive(Args)]
struct TokenizerTrainArgs {
    /// Manifest whose transcripts form the training corpus.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 512)]
    target_vocab: usize,
    /// Output tokenizer file.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_tokenizer_train(args: TokenizerTrainArgs) -> anyhow::Result<()> {
    let entries = read_manifest(&args.manifest)?;
    let corpus: Vec<String> = entries.into_iter().map(|e| e.text).collect();
    let tok = Tokenizer::train(&corpus, args.target_vocab)?;
    tok.save(&args.out)?;
    println!("trained vocab of {} pieces to {}", tok.vocab_size(), args.out.display());
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load_samples_for(manifest: &Path, style: Style) -> anyhow::Result<Vec<TextlineSample>> {
    let entries = read_manifest(manifest)?;
    Ok(lineocr::textgen::load_samples(&entries, style)?)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let tokenizer = Tokenizer::load(&cfg.tokenizer)?;
    let data = TrainData {
        train: load_samples_for(&cfg.train_manifest, Style::Printed)?,
        val: match &cfg.val_manifest {
            Some(path) => load_samples_for(path, Style::Printed)?,
            None => Vec::new(),
        },
    };
    let init = match &cfg.stage_init {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {:?}", cfg.out_dir))?;
    write_json(&cfg.out_dir.join("resolved_config.json"), &cfg)?;

    match cfg.dtype {
        Dtype::F32 => train_typed::<f32>(&cfg, &data, &tokenizer, init.as_ref()),
        Dtype::F64 => train_typed::<f64>(&cfg, &data, &tokenizer, init.as_ref()),
    }
}

fn train_typed<T: Element>(
    cfg: &TrainConfig,
    data: &TrainData,
    tokenizer: &Tokenizer,
    init: Option<&Checkpoint>,
) -> anyhow::Result<()> {
    let outcome = run_training::<T>(cfg, data, tokenizer, init)?;
    for stats in &outcome.history {
        match stats.val_cer {
            Some(cer) => println!(
                "epoch {:3}  loss {:.4}  val_cer {:.4}",
                stats.epoch, stats.mean_loss, cer
            ),
            None => println!("epoch {:3}  loss {:.4}", stats.epoch, stats.mean_loss),
        }
    }
    let ckpt = Checkpoint::from_model(&outcome.model, &lineocr::checkpoint::tokenizer_hash(tokenizer));
    let path = cfg.out_dir.join("model.ckpt");
    ckpt.save(&path)?;
    write_json(&cfg.out_dir.join("history.json"), &outcome.history)?;
    if let Some(cer) = outcome.best_val_cer {
        println!("best val_cer {cer:.4}");
    }
    println!("saved checkpoint to {}", path.display());
    Ok(())
}

// ── recognize ────────────────────────────────────────────────────────

#[derive(Args)]
struct RecognizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Manifest of images to recognize (ids are manifest paths).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Individual image files (ids are the given paths).
    #[arg(value_name = "IMAGE")]
    images: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    length_penalty: f64,
    /// Output predictions TSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_tokenizer_checked(path: &Path, ckpt: &Checkpoint) -> anyhow::Result<Tokenizer> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {path:?}"))?;
    let expected = &ckpt.header.tokenizer_sha256;
    if !expected.is_empty() {
        let got = bytes_hash(&bytes);
        if &got != expected {
            bail!(
                "tokenizer {path:?} hash {got} does not match checkpoint's {expected}; \
                 use the tokenizer the model was trained with"
            );
        }
    }
    Ok(Tokenizer::from_file_string(
        std::str::from_utf8(&bytes).context("tokenizer file is not utf-8")?,
    )?)
}

fn cmd_recognize(args: RecognizeArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let tokenizer = load_tokenizer_checked(&args.tokenizer, &ckpt)?;
    let search = SearchConfig {
        beam: args.beam,
        max_len: args.max_len,
        length_penalty: args.length_penalty,
    };

    // collect inputs; unreadable files are reported but do not stop the run
    let mut inputs: Vec<(String, ImageTensor)> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    if let Some(manifest) = &args.manifest {
        for entry in read_manifest(manifest)? {
            match read_pgm(&entry.image_path) {
                Ok(img) => inputs.push((entry.id, img)),
                Err(e) => failures.push(format!("{}: {e}", entry.id)),
            }
        }
    }
    for path in &args.images {
        match read_pgm(path) {
            Ok(img) => inputs.push((path.display().to_string(), img)),
            Err(e) => failures.push(format!("{}: {e}", path.display())),
        }
    }

    let results = match ckpt.header.dtype {
        Dtype::F32 => recognize_typed::<f32>(&ckpt, &tokenizer, &inputs, &search)?,
        Dtype::F64 => recognize_typed::<f64>(&ckpt, &tokenizer, &inputs, &search)?,
    };
    let mut out = String::new();
    for r in &results {
        out.push_str(&format!("{}\t{}\n", r.id, r.text));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, out).with_context(|| format!("writing {path:?}"))?
        }
        None => print!("{out}"),
    }
    if !failures.is_empty() {
        bail!("{} unreadable image(s): {}", failures.len(), failures.join("; "));
    }
    Ok(())
}

fn recognize_typed<T: Element>(
    ckpt: &Checkpoint,
    tokenizer: &Tokenizer,
    inputs: &[(String, ImageTensor)],
    search: &SearchConfig,
) -> anyhow::Result<Vec<Recognition>> {
    let model: OcrModel<T> = ckpt.into_model()?;
    Ok(recognize_batch(&model, tokenizer, inputs, search)?)
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Predictions TSV: `<id>\t<text>` per line.
    #[arg(long)]
    predictions: PathBuf,
    /// Output report JSON (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let gt: Vec<(String, String)> = read_manifest(&args.manifest)?
        .into_iter()
        .map(|e| (e.id, e.text))
        .collect();
    let text = std::fs::read_to_string(&args.predictions)
        .with_context(|| format!("reading {:?}", args.predictions))?;
    let mut predictions = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, pred) = line
            .split_once('\t')
            .with_context(|| format!("predictions line {}: missing tab", lineno + 1))?;
        predictions.push((id.to_string(), pred.to_string()));
    }
    let report = evaluate_corpus(&gt, &predictions)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

// ── bench ────────────────────────────────────────────────────────────

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Output report JSON (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let tokenizer = load_tokenizer_checked(&args.tokenizer, &ckpt)?;
    let entries = read_manifest(&args.manifest)?;
    let mut inputs = Vec::with_capacity(entries.len());
    for e in entries {
        inputs.push((e.id, read_pgm(&e.image_path)?));
    }
    let search = SearchConfig {
        beam: args.beam,
        max_len: args.max_len,
        length_penalty: 0.0,
    };
    let report = match ckpt.header.dtype {
        Dtype::F32 => bench(&ckpt.into_model::<f32>()?, &tokenizer, &inputs, &search)?,
        Dtype::F64 => bench(&ckpt.into_model::<f64>()?, &tokenizer, &inputs, &search)?,
    };
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

// ── augment-preview ──────────────────────────────────────────────────

#[derive(Args)]
struct AugmentPreviewArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_augment_preview(args: AugmentPreviewArgs) -> anyhow::Result<()> {
    let img = read_pgm(&args.image)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {:?}", args.out_dir))?;
    write_pgm(&img, &args.out_dir.join("before.pgm"))?;
    let policy = AugmentPolicy::default();
    // one seeded draw per transform so every kind is visible
    let mut remaining: Vec<Transform> = Transform::ALL.to_vec();
    let mut seed = args.seed;
    let mut guard = 0u64;
    while !remaining.is_empty() && guard < 10_000 {
        let (chosen, out) = apply_named(&policy, &img, seed);
        if let Some(pos) = remaining.iter().position(|&t| t == chosen) {
            remaining.remove(pos);
            write_pgm(&out, &args.out_dir.join(format!("after_{}.pgm", chosen.name())))?;
        }
        seed = seed.wrapping_add(1);
        guard += 1;
    }
    println!("wrote previews to {}", args.out_dir.display());
    Ok(())
}

// ── checkpoint-inspect ───────────────────────────────────────────────

#[derive(Args)]
struct CheckpointInspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn cmd_checkpoint_inspect(args: CheckpointInspectArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&ckpt.header)?);
    let total: usize = ckpt.blobs.iter().map(|b| b.numel()).sum();
    for blob in &ckpt.blobs {
        println!("{}\t{}\t{:?}", blob.name, blob.dtype, blob.shape);
    }
    println!("total parameters: {total}");
    Ok(())
}
