//! `pmlm` command line: vocabulary building, mask inspection, pre-training,
//! fine-tuning, generation and the verification suites.
//!
//! Progress goes to stderr, results to stdout. Usage errors exit 2, runtime
//! failures exit 1.

use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pmlm::assembly::assemble_pmlm_input;
use pmlm::checkpoint::Checkpoint;
use pmlm::config::{default_seed, Precision, RunConfig, RESOLVED_CONFIG_FILE};
use pmlm::corpus::{corpus_files, load_packed_corpus, pack_pair, pack_single, read_utf8};
use pmlm::finetune::{
    decode_beam, parse_labels, read_tsv_pairs, ClassifierTrainer, Seq2SeqTrainer,
};
use pmlm::masking::{plan_corruption, sample_blockwise_mask, CorruptionPlan, FactorizationOrder};
use pmlm::objectives::{ObjectiveKind, Pretrainer};
use pmlm::seed::rng_for;
use pmlm::verification::{run_suite, Suite};
use pmlm::{Error, PackedInput, Result, Scalar, Transformer, Vocab};

const VOCAB_FILE: &str = "vocab.txt";
const METRICS_FILE: &str = "metrics.jsonl";
const FINAL_CHECKPOINT: &str = "model.ckpt";
const SAMPLE_MASK_TAG: u64 = 0x5A;

#[derive(Parser)]
#[command(name = "pmlm", version, about = "Pseudo-masked language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a corpus file or directory.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sample a factorization order and corruption plan for one input.
    SampleMask(InputArgs),
    /// Print the attention mask of one input under a given order.
    AuditMask {
        #[command(flatten)]
        input: InputArgs,
        /// Steps separated by `;`, positions by `,`, e.g. "4,5;2".
        #[arg(long)]
        order: String,
    },
    /// Pre-train from scratch (or resume) on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        objective: Option<ObjectiveKind>,
        /// Existing vocabulary; built from the corpus when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fine-tune a classifier on `text<TAB>label` lines.
    FinetuneCls(FinetuneArgs),
    /// Fine-tune sequence-to-sequence generation on `source<TAB>target` lines.
    FinetuneGen(FinetuneArgs),
    /// Decode one output per source line (from --input or stdin).
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_out: Option<usize>,
    },
    /// Run verification suites; exit 0 only if all pass.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Settings shared by commands that resolve a run config.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base-size model dimensions instead of the desk defaults.
    #[arg(long)]
    paper_size: bool,
    /// Fixed reduction order (always on; recorded in the resolved config).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct InputArgs {
    /// Segments separated by `|`; integer ids unless --vocab is given.
    input: String,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Train only the head (classification).
    #[arg(long)]
    freeze_body: bool,
    #[command(flatten)]
    run: RunArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::BuildVocab { corpus, out, run } => build_vocab(&corpus, &out, &run),
        Command::SampleMask(input) => sample_mask(&input),
        Command::AuditMask { input, order } => audit_mask(&input, &order),
        Command::Pretrain {
            corpus,
            out,
            objective,
            vocab,
            resume,
            run,
        } => {
            let mut cfg = resolve(&run, None)?;
            if let Some(o) = objective {
                cfg.objective = o;
            }
            cfg.corpus = Some(corpus);
            cfg.out = Some(out);
            match cfg.precision {
                Precision::F32 => pretrain::<f32>(cfg, vocab, resume),
                Precision::F64 => pretrain::<f64>(cfg, vocab, resume),
            }
        }
        Command::FinetuneCls(args) => finetune(&args, true),
        Command::FinetuneGen(args) => finetune(&args, false),
        Command::Generate {
            checkpoint,
            vocab,
            input,
            beam,
            alpha,
            max_out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = ck.run_config()?;
            cfg.decode.beam = beam.unwrap_or(cfg.decode.beam);
            cfg.decode.alpha = alpha.unwrap_or(cfg.decode.alpha);
            cfg.decode.max_out = max_out.unwrap_or(cfg.decode.max_out);
            cfg.validate()?;
            let vocab = Vocab::load(&vocab.unwrap_or_else(|| sibling(&checkpoint, VOCAB_FILE)))?;
            match cfg.precision {
                Precision::F32 => generate(&ck.model::<f32>()?, &cfg, &vocab, input.as_deref()),
                Precision::F64 => generate(&ck.model::<f64>()?, &cfg, &vocab, input.as_deref()),
            }
        }
        Command::Verify { suite, seed } => {
            let seed = seed.unwrap_or_else(default_seed);
            let mut ok = true;
            for r in run_suite(suite, seed)? {
                ok &= r.passed;
                println!("{r}");
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

/// Defaults, then an optional base config, then the file named by
/// `--config`, then `--set`/`--steps`/`--seed`, then `--paper-size`.
fn resolve(run: &RunArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &run.config {
        cfg.apply_kv(&read_utf8(path)?)?;
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = run.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
    if run.paper_size {
        cfg = cfg.paper_size();
    }
    cfg.deterministic |= run.deterministic;
    Ok(cfg)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.save(&dir.join(RESOLVED_CONFIG_FILE))
}

fn corpus_text(path: &Path) -> Result<String> {
    let mut text = String::new();
    for file in corpus_files(path)? {
        text.push_str(&read_utf8(&file)?);
        text.push('\n');
    }
    Ok(text)
}

fn build_vocab(corpus: &Path, out: &Path, run: &RunArgs) -> Result<ExitCode> {
    let cfg = resolve(run, None)?;
    let vocab = Vocab::build(&corpus_text(corpus)?, cfg.max_vocab, &cfg.tokenizer)?;
    vocab.save(out)?;
    eprintln!("wrote {} entries to {}", vocab.len(), out.display());
    println!("{}", vocab.len());
    Ok(ExitCode::SUCCESS)
}

fn parse_input(args: &InputArgs) -> Result<(PackedInput, Option<Vocab>)> {
    let vocab = args.vocab.as_deref().map(Vocab::load).transpose()?;
    let tokenizer = RunConfig::default().tokenizer;
    let mut segments = args.input.splitn(2, '|').map(|seg| -> Result<Vec<u32>> {
        match &vocab {
            Some(v) => Ok(v.encode(seg, &tokenizer)),
            None => seg
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| Error::Data(format!("token {t:?} is not an integer id")))
                })
                .collect(),
        }
    });
    let s1 = segments.next().transpose()?.unwrap_or_default();
    let x = match segments.next().transpose()? {
        Some(s2) => pack_pair(&s1, &s2, args.max_len)?,
        None => pack_single(&s1, args.max_len)?,
    };
    Ok((x, vocab))
}

fn sample_mask(args: &InputArgs) -> Result<ExitCode> {
    let (x, vocab) = parse_input(args)?;
    let cfg = RunConfig::default();
    let vocab = vocab.unwrap_or_else(|| {
        let max = x.token_ids.iter().copied().max().unwrap_or(0) as usize;
        pmlm::verification::synthetic_vocab(max + 1)
    });
    let mut rng = rng_for(args.seed.unwrap_or_else(default_seed), &[SAMPLE_MASK_TAG]);
    let order = sample_blockwise_mask(&x, &cfg.masking, &mut rng);
    let plan = plan_corruption(&order, &vocab, &cfg.corruption, &mut rng);
    println!("input {}", join(&x.token_ids));
    println!("order {order}");
    for (i, step) in order.steps().iter().enumerate() {
        let actions: Vec<String> = step
            .iter()
            .map(|&p| plan.action(p).map_or("-".into(), |a| a.to_string()))
            .collect();
        println!("step {i} positions {} actions {}", join(step), actions.join(","));
    }
    Ok(ExitCode::SUCCESS)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_order(text: &str, x: &PackedInput) -> Result<FactorizationOrder> {
    let steps = text
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Data(format!("bad position {p:?} in order")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    FactorizationOrder::new(steps, x)
}

fn audit_mask(args: &InputArgs, order: &str) -> Result<ExitCode> {
    let (x, vocab) = parse_input(args)?;
    let order = parse_order(order, &x)?;
    let plan = CorruptionPlan::all_mask(&order.masked_positions());
    let inst = assemble_pmlm_input(&x, &order, &plan)?;
    print!("{}", inst.render(vocab.as_ref()));
    Ok(ExitCode::SUCCESS)
}

struct MetricsLog(BufWriter<File>);

impl MetricsLog {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(MetricsLog(BufWriter::new(file)))
    }

    fn write(&mut self, line: &str) -> Result<()> {
        writeln!(self.0, "{line}")
            .and_then(|_| self.0.flush())
            .map_err(|e| Error::io(METRICS_FILE, e))
    }
}

fn pretrain<T: Scalar>(
    mut cfg: RunConfig,
    vocab_path: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<ExitCode> {
    let out = cfg.out.clone().expect("set by caller");
    let corpus = cfg.corpus.clone().expect("set by caller");
    create_dir(&out)?;
    let vocab = match &vocab_path {
        Some(p) => Vocab::load(p)?,
        None => {
            eprintln!("building vocabulary from {}", corpus.display());
            Vocab::build(&corpus_text(&corpus)?, cfg.max_vocab, &cfg.tokenizer)?
        }
    };
    vocab.save(&out.join(VOCAB_FILE))?;
    cfg.model = cfg.model_for_vocab(vocab.len());
    cfg.validate()?;
    let data = load_packed_corpus(&corpus, &vocab, &cfg.tokenizer, cfg.max_len)?;
    eprintln!(
        "{} packed inputs, vocab {}, objective {}, {} steps",
        data.len(),
        vocab.len(),
        cfg.objective,
        cfg.train.steps
    );

    let (model, optimizer) = match &resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.model::<T>()?, Some(ck.optimizer::<T>()?))
        }
        None => (Transformer::<T>::new(cfg.model.clone(), cfg.train.seed)?, None),
    };
    let mut trainer = Pretrainer::new(model, vocab, data, cfg.pretrain_config())?;
    if let Some(opt) = optimizer {
        eprintln!("resuming at step {}", opt.step);
        trainer.optimizer = opt;
    }
    write_resolved(&cfg, &out)?;
    let mut log = MetricsLog::open(&out, resume.is_some())?;
    let started = Instant::now();
    trainer.run(|t, m| {
        log.write(&m.to_json())?;
        if m.step % cfg.log_every.max(1) == 0 || m.step == cfg.train.steps {
            eprintln!(
                "step {} loss {:.4} (ae {:.4}, par {:.4}) lr {:.2e} [{:.1}s]",
                m.step,
                m.loss,
                m.loss_ae,
                m.loss_par,
                m.lr,
                started.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            save_pretrain(t, &cfg, &out.join(format!("checkpoint-{}.ckpt", m.step)))?;
        }
        Ok(())
    })?;
    let path = out.join(FINAL_CHECKPOINT);
    save_pretrain(&trainer, &cfg, &path)?;
    eprintln!("saved {}", path.display());
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn save_pretrain<T: Scalar>(t: &Pretrainer<T>, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_model(&t.model, cfg);
    ck.set_meta("kind", "pretrain");
    ck.push_optimizer(&t.optimizer);
    ck.save(path)
}

fn finetune(args: &FinetuneArgs, classify: bool) -> Result<ExitCode> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = resolve(&args.run, Some(ck.run_config()?))?;
    cfg.freeze_body |= args.freeze_body;
    cfg.corpus = Some(args.data.clone());
    cfg.out = Some(args.out.clone());
    cfg.validate()?;
    let vocab_path = args
        .vocab
        .clone()
        .unwrap_or_else(|| sibling(&args.checkpoint, VOCAB_FILE));
    let vocab = Vocab::load(&vocab_path)?;
    create_dir(&args.out)?;
    vocab.save(&args.out.join(VOCAB_FILE))?;
    write_resolved(&cfg, &args.out)?;
    let pairs = read_tsv_pairs(&args.data)?;
    match (cfg.precision, classify) {
        (Precision::F32, true) => finetune_cls(ck.model::<f32>()?, &cfg, &vocab, &pairs),
        (Precision::F64, true) => finetune_cls(ck.model::<f64>()?, &cfg, &vocab, &pairs),
        (Precision::F32, false) => finetune_gen(ck.model::<f32>()?, &cfg, &vocab, &pairs),
        (Precision::F64, false) => finetune_gen(ck.model::<f64>()?, &cfg, &vocab, &pairs),
    }
}

fn finetune_cls<T: Scalar>(
    model: Transformer<T>,
    cfg: &RunConfig,
    vocab: &Vocab,
    pairs: &[(String, String)],
) -> Result<ExitCode> {
    let out = cfg.out.as_deref().expect("set by caller");
    let raw: Vec<String> = pairs.iter().map(|(_, l)| l.clone()).collect();
    let (labels, count) = parse_labels(&raw)?;
    let mut data = Vec::new();
    let mut skipped = 0;
    for ((text, _), label) in pairs.iter().zip(labels) {
        match pack_single(&vocab.encode(text, &cfg.tokenizer), cfg.max_len) {
            Ok(x) => data.push((x, label)),
            Err(Error::SequenceTooLong { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} examples longer than max_len {}", cfg.max_len);
    }
    let mut trainer = ClassifierTrainer::new(model, count, data, cfg.train.clone(), cfg.freeze_body)?;
    let mut log = MetricsLog::open(out, false)?;
    while trainer.step() < cfg.train.steps {
        let m = trainer.train_step()?;
        log.write(&m.to_json())?;
        if m.step % cfg.log_every.max(1) == 0 {
            eprintln!("step {} loss {:.4} acc {:.3} lr {:.2e}", m.step, m.loss, m.accuracy, m.lr);
        }
    }
    let (loss, acc) = trainer.evaluate()?;
    trainer.to_checkpoint(cfg).save(&out.join(FINAL_CHECKPOINT))?;
    println!(
        "{}",
        serde_json::json!({ "loss": loss, "accuracy": acc, "labels": count })
    );
    Ok(ExitCode::SUCCESS)
}

fn finetune_gen<T: Scalar>(
    model: Transformer<T>,
    cfg: &RunConfig,
    vocab: &Vocab,
    pairs: &[(String, String)],
) -> Result<ExitCode> {
    let out = cfg.out.as_deref().expect("set by caller");
    let encoded: Vec<(Vec<u32>, Vec<u32>)> = pairs
        .iter()
        .map(|(s, t)| (vocab.encode(s, &cfg.tokenizer), vocab.encode(t, &cfg.tokenizer)))
        .collect();
    let mut trainer =
        Seq2SeqTrainer::new(model, &encoded, cfg.max_len, cfg.train.clone(), cfg.label_smoothing)?;
    if trainer.skipped() > 0 {
        eprintln!("skipped {} pairs longer than max_len {}", trainer.skipped(), cfg.max_len);
    }
    let mut log = MetricsLog::open(out, false)?;
    let mut last = None;
    while trainer.step() < cfg.train.steps {
        let m = trainer.train_step()?;
        log.write(&m.to_json())?;
        if m.step % cfg.log_every.max(1) == 0 {
            eprintln!("step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.lr);
        }
        last = Some(m.loss);
    }
    let mut ck = Checkpoint::from_model(&trainer.model, cfg);
    ck.set_meta("kind", "seq2seq");
    ck.save(&out.join(FINAL_CHECKPOINT))?;
    println!(
        "{}",
        serde_json::json!({ "pairs": trainer.len(), "skipped": trainer.skipped(), "loss": last })
    );
    Ok(ExitCode::SUCCESS)
}

fn generate<T: Scalar>(
    model: &Transformer<T>,
    cfg: &RunConfig,
    vocab: &Vocab,
    input: Option<&Path>,
) -> Result<ExitCode> {
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(io::BufReader::new(
            File::open(p).map_err(|e| Error::io(format!("opening {}", p.display()), e))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("reading input", e))?;
        let src = vocab.encode(&line, &cfg.tokenizer);
        let out = decode_beam(model, &src, &cfg.decode)?;
        writeln!(stdout, "{}", vocab.decode(out.best.output(), &cfg.tokenizer))
            .map_err(|e| Error::io("writing output", e))?;
    }
    Ok(ExitCode::SUCCESS)
}
