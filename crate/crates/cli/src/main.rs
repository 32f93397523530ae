use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cap_core::audio::{read_wav, Frontend};
use cap_core::autodiff::fault::{self, Fault};
use cap_core::checkpoint;
use cap_core::config::ExperimentConfig;
use cap_core::episodes::{read_manifest, Corpus};
use cap_core::eval::{build_trials, dump_attention, format_scores, read_trials, write_trials, EvalConfig, Evaluator, ScoreMetric};
use cap_core::gradsuite::{check_ops, check_pipeline, GRAD_TOL};
use cap_core::model::{Model, ModelConfig};
use cap_core::pooling::PoolingMode;
use cap_core::synth::{generate_corpus, SynthConfig};
use cap_core::trainer::{load_validation, train, TrainOutputs};
use cap_core::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "cap", version, about = "Cross-attentive pooling for pair-wise speaker verification")]
struct Cli {
    /// Worker threads for feature extraction and scoring; 0 uses every core.
    /// The CAP_THREADS environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-speaker corpus, its manifest and a trial list.
    Synth(SynthArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Score a trial list with a checkpoint and report EER and MinDCF.
    Eval(EvalArgs),
    /// Finite-difference check of every op and of a full CAP episode.
    Gradcheck(GradcheckArgs),
    /// Write the cross-attention weights of one utterance pair as JSON.
    Attention(AttentionArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 10)]
    utts: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Utterance length.
    #[arg(long, default_value_t = 4.0)]
    seconds: f64,
    /// Fraction of each utterance replaced by silence.
    #[arg(long, default_value_t = 0.3)]
    silence_fraction: f64,
    /// Speech-to-noise ratio of the background noise.
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML). Unset keys take their defaults: SGD with
    /// Nesterov momentum 0.9, lr 0.1, weight decay 1e-4, lr divided by 10
    /// after 10 epochs without improvement, stop below 1e-6; episodes of
    /// N=10 speakers with M=3 utterances, 2 s crops; CAP pooling with
    /// H=128 and tau=0.05; global classification on.
    config: Option<PathBuf>,
    /// Print the full default config and exit.
    #[arg(long)]
    print_config: bool,
    /// Override `pooling.mode` (tap, sap, cap).
    #[arg(long)]
    pooling: Option<PoolingMode>,
    /// Train without the global classification term.
    #[arg(long)]
    no_gc: bool,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `optim.max_epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override `paths.train_manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Override `paths.val_trials`.
    #[arg(long)]
    val_trials: Option<PathBuf>,
    /// Override `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Lines of `label enroll.wav test.wav`, label 1 for same speaker.
    #[arg(long)]
    trials: PathBuf,
    /// Write `score label enroll test` per scored trial.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Trial score: cosine, or the prototype distance (np) used in training.
    #[arg(long, default_value = "cosine")]
    score_metric: ScoreMetric,
    /// Segments cropped per utterance.
    #[arg(long, default_value_t = 10)]
    segments: usize,
    #[arg(long, default_value_t = 3.5)]
    segment_seconds: f64,
    /// Fail unless the checkpoint uses this pooling mode.
    #[arg(long)]
    pooling: Option<PoolingMode>,
    /// Accept audio at other sample rates.
    #[arg(long)]
    allow_sr: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Problem size; only `tiny` is defined.
    #[arg(long, default_value = "tiny", value_parser = ["tiny"])]
    scale: String,
    /// Random seeds for the full-episode check.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Corrupt one backward rule to demonstrate detection.
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct AttentionArgs {
    /// A checkpoint trained with cap pooling.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Utterance in the support role.
    #[arg(long)]
    enroll: PathBuf,
    /// Utterance in the query role.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<enroll stem>:<test stem>`.
    #[arg(long)]
    pair_id: Option<String>,
    /// Whether the pair is same-speaker, if known.
    #[arg(long)]
    same: Option<bool>,
    #[arg(long)]
    allow_sr: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

fn configure_threads(flag: usize) -> Result<(), Error> {
    let n = match std::env::var("CAP_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("CAP_THREADS must be a thread count, got `{v}`")))?,
        Err(_) => flag,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let cfg = SynthConfig {
        num_speakers: a.speakers,
        utts_per_speaker: a.utts,
        utt_seconds: a.seconds,
        silence_fraction: a.silence_fraction,
        snr_db: a.snr_db,
        seed: a.seed,
        ..Default::default()
    };
    let manifest = generate_corpus(&a.out, &cfg)?;
    let entries = read_manifest(&manifest)?;
    let trials = build_trials(&entries, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let trials_path = a.out.join("trials.txt");
    write_trials(&trials_path, &trials, &a.out)?;
    println!(
        "{} utterances from {} speakers -> {}; {} trials -> {}",
        entries.len(),
        a.speakers,
        manifest.display(),
        trials.len(),
        trials_path.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Error> {
    if a.print_config {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = a.pooling {
        cfg.pooling.mode = m;
    }
    if a.no_gc {
        cfg.global_classification = false;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.optim.max_epochs = e;
    }
    if a.manifest.is_some() {
        cfg.paths.train_manifest = a.manifest;
    }
    if a.val_trials.is_some() {
        cfg.paths.val_trials = a.val_trials;
    }
    if a.out.is_some() {
        cfg.paths.out_dir = a.out;
    }
    cfg.validate()?;
    let manifest = cfg
        .paths
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("paths.train_manifest is not set".into()))?;
    if !manifest.is_file() {
        return Err(Error::Config(format!("corpus manifest {} not found", manifest.display())));
    }
    let front = Frontend::new(&cfg.features)?;
    let corpus = Corpus::load(&manifest, &front)?;
    let val = cfg.paths.val_trials.as_deref().map(|p| load_validation(p, &front)).transpose()?;
    if let Some(dir) = &cfg.paths.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        fs::write(dir.join("config.toml"), cfg.to_toml())
            .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    let mcfg = ModelConfig {
        trunk: cfg.trunk.clone(),
        pooling: cfg.pooling.clone(),
        global_classification: cfg.global_classification,
        n_classes: corpus.speakers.len(),
    };
    let mut model = Model::new(mcfg, cfg.seed)?;
    log::info!(
        "{} utterances, {} speakers, {} parameters",
        corpus.len(),
        corpus.speakers.len(),
        model.params.values().iter().map(|p| p.len()).sum::<usize>()
    );
    let out = TrainOutputs {
        dir: cfg.paths.out_dir.clone(),
        features: cfg.features.clone(),
    };
    let summary = train(&mut model, &corpus, val.as_ref(), &cfg.train_config(), &out)?;
    let last = summary.epochs.last();
    println!(
        "trained {} epochs ({:?}); final loss np {} gc {}; best val EER {}",
        summary.epochs.len(),
        summary.stop,
        last.map_or("-".into(), |m| format!("{:.4}", m.loss_np)),
        last.and_then(|m| m.loss_gc).map_or("-".into(), |g| format!("{g:.4}")),
        summary.best_val_eer.map_or("-".into(), |e| format!("{:.2}%", 100.0 * e)),
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    if let Some(want) = a.pooling {
        if want != ckpt.model.mode() {
            return Err(Error::Config(format!(
                "checkpoint uses {} pooling, --pooling asked for {want}",
                ckpt.model.mode()
            )));
        }
    }
    let trials = read_trials(&a.trials)?;
    if trials.is_empty() {
        return Err(Error::Config(format!("{}: no trials", a.trials.display())));
    }
    let mut features = ckpt.features.clone();
    features.allow_sr |= a.allow_sr;
    let front = Frontend::new(&features)?;
    let cfg = EvalConfig {
        segments: a.segments,
        segment_seconds: a.segment_seconds,
        metric: a.score_metric,
        ..Default::default()
    };
    let ev = Evaluator::new(&ckpt.model, cfg)?;
    let out = ev.evaluate(&trials, |p| front.features(&read_wav(p)?))?;
    if let Some(path) = &a.scores {
        fs::write(path, format_scores(&trials, &out.scores)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if out.skipped > 0 {
        eprintln!("skipped {} trials with too-short audio", out.skipped);
    }
    println!("EER={:.2}% MinDCF={:.3}", 100.0 * out.eer, out.min_dcf);
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool, Error> {
    let _guard = a.inject_fault.map(fault::inject);
    let mut ok = true;
    println!("{:<16} {:>12} {:>8} {:>8}", "op", "max rel err", "checked", "kinks");
    let mut row = |name: &str, c: &cap_core::autodiff::GradCheck| {
        let pass = c.passes(GRAD_TOL);
        ok &= pass;
        println!(
            "{name:<16} {:>12.3e} {:>8} {:>8}{}",
            c.max_rel_err,
            c.checked,
            c.skipped_kinks,
            if pass { "" } else { "  FAIL" }
        );
    };
    for r in check_ops(0)? {
        row(r.name, &r.check);
    }
    for s in 0..a.seeds {
        row(&format!("cap episode #{s}"), &check_pipeline(s)?);
    }
    println!("{} (tolerance {GRAD_TOL:e})", if ok { "all gradients match" } else { "gradient mismatch" });
    Ok(ok)
}

fn attention_cmd(a: AttentionArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let mut features = ckpt.features.clone();
    features.allow_sr |= a.allow_sr;
    let front = Frontend::new(&features)?;
    let load = |p: &Path| front.features(&read_wav(p)?);
    let stem = |p: &Path| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let pair_id = a.pair_id.unwrap_or_else(|| format!("{}:{}", stem(&a.enroll), stem(&a.test)));
    let dump = dump_attention(&ckpt.model, &load(&a.enroll)?, &load(&a.test)?, &pair_id, a.same)?;
    let json = serde_json::to_string(&dump).expect("plain data serialises");
    fs::write(&a.out, json).map_err(|e| Error::Config(format!("{}: {e}", a.out.display())))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = configure_threads(cli.threads).and_then(|()| match cli.cmd {
        Cmd::Synth(a) => synth(a).map(|()| true),
        Cmd::Train(a) => train_cmd(a).map(|()| true),
        Cmd::Eval(a) => eval_cmd(a).map(|()| true),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
        Cmd::Attention(a) => attention_cmd(a).map(|()| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
