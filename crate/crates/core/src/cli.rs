//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{mask_closure, probe_dependencies};
use crate::checkpoint;
use crate::masks::masks_for;
use crate::objectives::{format_pct, info_fraction, info_fraction_limit, parse_ratio};
use crate::permute::{build_layout, Mode, PermutationPlan};
use crate::tokenizer::{read_corpus, Vocab, MASK, NUM_SPECIAL};
use crate::trainer::{
    finetune, parse_tsv, run_pretraining, FinetuneConfig, Pretrainer, RunConfig, RunOutput,
};

pub const SEED_ENV: &str = "MPNET_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "mpnet-lab", version, about = "Masked and permuted pre-training at desk scale")]
pub struct Cli {
    /// Global seed; falls back to the config file, then MPNET_LAB_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train a model on a text corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a linear classifier on a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Pre-train once per objective and compare.
    Ablate(AblateArgs),
    /// Print the input layout and attention masks for one plan.
    MaskDump(MaskDumpArgs),
    /// Print the share of tokens and positions each prediction conditions on.
    Info(InfoArgs),
    /// Probe which tokens and positions each prediction depends on.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Corpus file; overrides the config's `corpus` key.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory; overrides the config's `out` key.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training rows `label<TAB>text`.
    #[arg(long)]
    pub data: PathBuf,
    /// Dev rows; without it a share of --data is held out.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Vocabulary file; defaults to vocab.txt next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MaskDumpArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub c: usize,
    /// 1-based permutation, comma separated.
    #[arg(long)]
    pub perm: String,
    #[arg(long, default_value = "mpnet")]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long)]
    pub mode: Mode,
    #[arg(long, default_value = "0.15")]
    pub ratio: String,
    /// Sentence length; omitted means the large-n limit.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub n: usize,
    /// Objectives to probe; all four when omitted.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Number of predicted tokens; defaults to half the sentence.
    #[arg(long)]
    pub predict: Option<usize>,
}

/// A runtime failure with a message naming the culprit.
#[derive(Debug)]
pub struct Failure(pub String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(Failure(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| Failure(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let seed_flag = cli.seed;
    match cli.command {
        Command::Pretrain(a) => pretrain(a, seed_flag, out, err),
        Command::Finetune(a) => finetune_cmd(a, seed_flag, out, err),
        Command::Ablate(a) => ablate(a, seed_flag, out),
        Command::MaskDump(a) => mask_dump(a, out),
        Command::Info(a) => info(a, out),
        Command::Probe(a) => probe(a, seed_flag, out),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Config file, then seed fallbacks, then command-line overrides.
fn load_run(
    config: &Path,
    overrides: &[String],
    seed_flag: Option<u64>,
) -> Result<RunConfig, Failure> {
    let mut run = RunConfig::load(config)?;
    let file_has_seed = std::fs::read_to_string(config)
        .map(|t| {
            t.lines()
                .any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("seed"))
        })
        .unwrap_or(false);
    if !file_has_seed {
        if let Some(s) = env_seed()? {
            run.train.seed = s;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure(format!("--set {o:?}: expected KEY=VALUE")))?;
        run.set(k.trim(), v.trim())
            .map_err(|e| Failure(format!("--set {o:?}: {e}")))?;
    }
    if let Some(s) = seed_flag {
        run.train.seed = s;
    }
    Ok(run)
}

fn corpus_path(run: &RunConfig, config: &Path, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    match flag {
        Some(p) => Ok(p),
        None => run
            .other
            .get("corpus")
            .map(|p| resolve(config, p))
            .ok_or_else(|| {
                Failure(format!(
                    "{}: no corpus given (set `corpus = FILE` or pass --corpus)",
                    config.display()
                ))
            }),
    }
}

fn pretrain(a: PretrainArgs, seed_flag: Option<u64>, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let mut run = load_run(&a.config, &a.overrides, seed_flag)?;
    if let Some(m) = a.mode {
        run.train.mode = m;
    }
    if let Some(s) = a.steps {
        run.train.total_steps = s;
    }
    let corpus_file = corpus_path(&run, &a.config, a.corpus)?;
    let corpus = read_corpus(&corpus_file)?;
    let dir = match a.out {
        Some(d) => d,
        None => run
            .other
            .get("out")
            .map(|p| resolve(&a.config, p))
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}", run.train.mode))),
    };
    let output = RunOutput { dir };
    let (mut trainer, vocab) = match &a.resume {
        Some(ckpt_path) => {
            let ckpt = checkpoint::load(ckpt_path)?;
            let vocab_file = ckpt_path.parent().unwrap_or(Path::new(".")).join("vocab.txt");
            let vocab = Vocab::load(&vocab_file)?;
            let mut t = Pretrainer::resume(ckpt, &vocab, &corpus)?;
            if let Some(s) = a.steps {
                t.run.train.total_steps = s;
            }
            (t, vocab)
        }
        None => {
            let vocab = Vocab::build(corpus.iter().map(String::as_str), run.train.vocab_size)?;
            (Pretrainer::new(run, &vocab, &corpus)?, vocab)
        }
    };
    std::fs::create_dir_all(&output.dir).map_err(|e| Failure(format!("{}: {e}", output.dir.display())))?;
    vocab.save(&output.vocab_path())?;
    let _ = writeln!(
        err,
        "vocab {} tokens, {} parameters, {} sentences",
        vocab.len(),
        trainer.params.parameter_count(),
        trainer.sentences().len()
    );
    run_pretraining(&mut trainer, Some(&output), out)?;
    let loss = trainer.train_loss(trainer.run.train.seed)?;
    writeln!(
        out,
        "final step={} train_loss={loss:.6} ln_v={:.6} checkpoint={}",
        trainer.step,
        (vocab.len() as f64).ln(),
        output.final_path().display()
    )?;
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs, seed_flag: Option<u64>, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let vocab_file = a
        .vocab
        .unwrap_or_else(|| a.ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
    let vocab = Vocab::load(&vocab_file)?;
    let read = |p: &Path| -> Result<_, Failure> {
        let text = std::fs::read_to_string(p).map_err(|e| Failure(format!("{}: {e}", p.display())))?;
        Ok(parse_tsv(&text, &p.display().to_string())?)
    };
    let train = read(&a.data)?;
    let dev = a.dev.as_deref().map(read).transpose()?;
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: match seed_flag {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        },
        ..Default::default()
    };
    let report = finetune(&ckpt.params, &vocab, &train, dev.as_deref(), &cfg)?;
    for w in &report.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    writeln!(
        out,
        "accuracy {:.4} dev {} majority {:.4} labels {}",
        report.accuracy,
        report.dev_size,
        report.majority_rate,
        report.labels.join(",")
    )?;
    let (before, after) = report.query_checksum;
    writeln!(
        out,
        "query vector checksum {before:016x} -> {after:016x} ({})",
        if before == after { "unchanged" } else { "CHANGED" }
    )?;
    Ok(())
}

fn ablate(a: AblateArgs, seed_flag: Option<u64>, out: &mut dyn Write) -> Outcome {
    let mut run = load_run(&a.config, &a.overrides, seed_flag)?;
    if let Some(s) = a.steps {
        run.train.total_steps = s;
    }
    let corpus = read_corpus(&corpus_path(&run, &a.config, a.corpus)?)?;
    let vocab = Vocab::build(corpus.iter().map(String::as_str), run.train.vocab_size)?;
    let rows = [
        (Mode::Mpnet, "MPNet"),
        (Mode::Plm, "- position compensation (= PLM)"),
        (Mode::MlmOd, "- permutation (= MLM + output dependency)"),
        (Mode::Mlm, "- permutation & output dependency (= MLM)"),
    ];
    writeln!(
        out,
        "{:<44} {:>10} {:>10}",
        "objective", "last 20", "final"
    )?;
    for (mode, label) in rows {
        let mut r = run.clone();
        r.train.mode = mode;
        let mut trainer = Pretrainer::new(r, &vocab, &corpus)?;
        let metrics = run_pretraining(&mut trainer, None, &mut std::io::sink())?;
        let tail = &metrics[metrics.len().saturating_sub(20)..];
        let train = tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64;
        let settled = trainer.train_loss(trainer.run.train.seed)?;
        writeln!(out, "{label:<44} {train:>10.4} {settled:>10.4}")?;
    }
    Ok(())
}

fn parse_perm(text: &str, n: usize) -> Result<Vec<usize>, Failure> {
    let z: Vec<usize> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Failure(format!("--perm {text:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if z.len() != n || z.iter().any(|&p| p == 0 || p > n) {
        return Err(Failure(format!(
            "--perm {text:?}: expected a permutation of 1..{n}"
        )));
    }
    Ok(z.into_iter().map(|p| p - 1).collect())
}

fn mask_dump(a: MaskDumpArgs, out: &mut dyn Write) -> Outcome {
    let z = parse_perm(&a.perm, a.n)?;
    let plan = PermutationPlan::new(z, a.c, a.mode).map_err(|e| Failure(format!("--perm/--c: {e}")))?;
    // placeholder ids: position i carries token id NUM_SPECIAL + i
    let ids: Vec<usize> = (0..a.n).map(|i| NUM_SPECIAL + i).collect();
    let layout = build_layout(&plan, &ids, None, NUM_SPECIAL + a.n, 0)?;
    let tokens: Vec<String> = layout
        .input_ids
        .iter()
        .map(|&id| {
            if id == MASK {
                "[M]".to_string()
            } else {
                format!("x{}", id - NUM_SPECIAL + 1)
            }
        })
        .collect();
    let positions: Vec<String> = layout
        .input_positions
        .iter()
        .map(|p| format!("p{}", p + 1))
        .collect();
    writeln!(out, "mode {} n {} c {}", a.mode, a.n, a.c)?;
    writeln!(out, "tokens ({})", tokens.join(", "))?;
    writeln!(out, "positions ({})", positions.join(", "))?;
    write!(out, "{}", masks_for(&plan).to_text())?;
    Ok(())
}

fn info(a: InfoArgs, out: &mut dyn Write) -> Outcome {
    let ratio = parse_ratio(&a.ratio).map_err(|e| Failure(format!("--ratio: {e}")))?;
    let (t, p) = match a.n {
        Some(n) => info_fraction(a.mode, n, ratio).map_err(|e| Failure(format!("--n: {e}")))?,
        None => info_fraction_limit(a.mode, ratio),
    };
    writeln!(out, "tokens {} positions {}", format_pct(t), format_pct(p))?;
    Ok(())
}

fn probe(a: ProbeArgs, seed_flag: Option<u64>, out: &mut dyn Write) -> Outcome {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let params = ckpt.params;
    if a.n < 2 || a.n > params.config.max_pos {
        return Err(Failure(format!("--n {}: expected 2..={}", a.n, params.config.max_pos)));
    }
    let seed = match seed_flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let predict = a.predict.unwrap_or(a.n / 2).clamp(1, a.n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..a.n)
        .map(|_| rng.random_range(NUM_SPECIAL..params.config.vocab))
        .collect();
    let mut z: Vec<usize> = (0..a.n).collect();
    rand::seq::SliceRandom::shuffle(z.as_mut_slice(), &mut rng);
    let modes: Vec<Mode> = a.mode.map_or(Mode::ALL.to_vec(), |m| vec![m]);
    let c = a.n - predict;
    let mut all_match = true;
    for mode in modes {
        let mut plan = PermutationPlan::new(z.clone(), c, mode)?;
        if !mode.permutes() {
            plan = plan.canonical();
        }
        let report = probe_dependencies(&params, &plan, &ids)?;
        let closure = mask_closure(&plan, params.config.layers);
        let matches = report == closure;
        all_match &= matches;
        let order: Vec<String> = plan.z().iter().map(|p| (p + 1).to_string()).collect();
        writeln!(out, "mode {mode} z ({}) c {c}", order.join(","))?;
        write!(out, "{}", report.to_table(&plan))?;
        writeln!(out, "matches mask closure: {}", if matches { "yes" } else { "no" })?;
    }
    if !all_match {
        return Err(Failure("probe disagreed with the mask closure".into()));
    }
    Ok(())
}
