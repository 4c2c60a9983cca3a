//! `hbaf`: synthesize datasets, train, evaluate, check gradients and run
//! ablation sweeps.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
//! 4 failed check.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hbaf::config::Ablations;
use hbaf::feature_store::{
    dataset_digest, generate_synthetic, load_dataset, write_dataset, SignalMode, Split, SynthSpec,
};
use hbaf::train_eval::{
    ablation_sweep, ablation_table, evaluate, grad_check, train_observed, AblationData, GradCheckOptions,
    HbafModel, TrainConfig,
};
use hbaf::HbafError;
use run_config::RunConfig;
use serde_json::json;

const OUTPUT_ROOT_VAR: &str = "HBAF_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "hbaf", version, about = "Bimodal attention fusion for emotion recognition in conversation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history and validation report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a width-reduced network.
    Gradcheck(GradcheckArgs),
    /// Train the full model and single-component removals over several seeds.
    Ablate(TrainArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    dialogues: usize,
    /// Utterances per dialogue.
    #[arg(long = "len", default_value_t = 6)]
    utterances: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// audio_only, text_only, agreement or lagged_audio.
    #[arg(long, default_value = "agreement")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    audio_dim: usize,
    #[arg(long, default_value_t = 16)]
    text_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    val: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Flat TOML config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Ablation flag to switch on; repeatable.
    #[arg(long = "ablate", value_name = "FLAG")]
    ablate: Vec<String>,
    /// Contrastive weight.
    #[arg(long)]
    mu: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dialogues per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Reduced model width.
    #[arg(long)]
    width: Option<usize>,
    /// Run directory; defaults to `<output root>/<subcommand>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// One of train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    mu: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Lower bound on the relative-error denominator.
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    /// Perturb one analytic gradient entry of this tensor.
    #[arg(long)]
    corrupt: Option<String>,
    /// Ablation flag to switch on; repeatable.
    #[arg(long = "ablate", value_name = "FLAG")]
    ablate: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Error(HbafError),
    Check(String),
}

impl From<HbafError> for Failure {
    fn from(e: HbafError) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}

fn output_dir(given: Option<PathBuf>, command: &str) -> hbaf::Result<PathBuf> {
    let dir = given.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(command)
    });
    fs::create_dir_all(&dir).map_err(|e| HbafError::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> hbaf::Result<()> {
    fs::write(path, text).map_err(|e| HbafError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let spec = SynthSpec {
        n_dialogues: a.dialogues,
        utterances_per_dialogue: a.utterances,
        num_classes: a.classes,
        audio_dim: a.audio_dim,
        text_dim: a.text_dim,
        signal_mode: SignalMode::parse(&a.mode)?,
        noise_std: a.noise,
        seed: a.seed,
        val_dialogues: a.val,
        test_dialogues: a.test,
    };
    let (manifest, records) = generate_synthetic(&spec)?;
    let out = output_dir(a.out, "synth")?;
    write_dataset(&out, &manifest, &records)?;
    println!("dataset     {}", out.display());
    println!("mode        {}", a.mode);
    println!("classes     {}", manifest.num_classes());
    println!("dims        audio {} text {}", spec.audio_dim, spec.text_dim);
    for split in [Split::Train, Split::Val, Split::Test] {
        let c = manifest.count(split);
        println!("{:<11} {} dialogues, {} utterances", split.name(), c.dialogues, c.utterances);
    }
    println!("sha256      {}", dataset_digest(&manifest, &records));
    Ok(())
}

fn resolve_run(a: &TrainArgs) -> hbaf::Result<RunConfig> {
    let mut sets = a.sets.clone();
    let mut push = |k: &str, v: String| sets.push(format!("{k}={v}"));
    if let Some(v) = a.mu {
        push("train.mu", format!("{v:?}"));
    }
    if let Some(v) = a.lr {
        push("train.learning_rate", format!("{v:?}"));
    }
    if let Some(v) = a.epochs {
        push("train.max_epochs", v.to_string());
    }
    if let Some(v) = a.seed {
        push("train.seed", v.to_string());
    }
    if let Some(v) = a.batch_size {
        push("train.batch_size", v.to_string());
    }
    if let Some(v) = a.width {
        push("model.width", v.to_string());
    }
    for flag in &a.ablate {
        Ablations::single(flag)?;
        push(&format!("ablate.{flag}"), "true".into());
    }
    RunConfig::load(a.config.as_deref(), &sets)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut run = resolve_run(&a)?;
    let data = load_dataset(&a.data)?;
    let m = &data.manifest;
    let model_cfg = run.resolve_model(m.dims.audio, m.dims.text, m.num_classes())?;
    let cfg = run.train_config();
    let echoed = run.to_flat_toml();
    print!("{echoed}");
    let out = output_dir(a.out, "train")?;
    write(&out.join("config.toml"), &echoed)?;

    let train_split = data.split_owned(Split::Train);
    let val_split = data.split_owned(Split::Val);
    let mut model = HbafModel::new(model_cfg, m.label_set.clone(), cfg.seed)?;
    let header = json!({
        "kind": "run",
        "seed": cfg.seed,
        "ablations": cfg.ablations.active(),
        "dataset": m.dataset_name,
        "train_dialogues": train_split.len(),
        "val_dialogues": val_split.len(),
    });
    let mut history = vec![header.to_string()];
    let outcome = train_observed(&mut model, &train_split, &val_split, &cfg, &mut |_| {});
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            write(&out.join("history.jsonl"), &(history.join("\n") + "\n"))?;
            return Err(e.into());
        }
    };
    for rec in &outcome.history {
        let mut v = serde_json::to_value(rec).expect("epoch serializes");
        v.as_object_mut().expect("object").insert("kind".into(), json!("epoch"));
        history.push(v.to_string());
        println!(
            "epoch {:>4}  train {:.6}  val {:.6}  val_f1 {:.4}{}",
            rec.epoch,
            rec.train.total,
            rec.val.total,
            rec.val_f1,
            if rec.improved { "  *" } else { "" }
        );
    }
    history.push(
        json!({
            "kind": "summary",
            "best_epoch": outcome.best_epoch,
            "stopped_early": outcome.stopped_early,
            "steps": outcome.steps,
        })
        .to_string(),
    );
    write(&out.join("history.jsonl"), &(history.join("\n") + "\n"))?;
    let ckpt = out.join("checkpoint.hbaf");
    model.save(&ckpt, cfg.ablations)?;
    let (report, loss) = evaluate(&model, &val_split, &cfg)?;
    write(&out.join("eval_val.txt"), &report.to_table())?;
    write(&out.join("eval_val.json"), &to_json(&json!({"report": report, "loss": loss})))?;
    println!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    println!("checkpoint {}", ckpt.display());
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let split = Split::parse(&a.split)?;
    let (model, ablations) = HbafModel::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let m = &data.manifest;
    for (what, expected, found) in [
        ("audio dim", model.cfg.audio_dim, m.dims.audio),
        ("text dim", model.cfg.text_dim, m.dims.text),
        ("class count", model.cfg.num_classes, m.num_classes()),
    ] {
        if expected != found {
            return Err(HbafError::DimMismatch {
                context: format!("checkpoint vs dataset {what}"),
                expected,
                found,
            }
            .into());
        }
    }
    let records = data.split_owned(split);
    let cfg = TrainConfig {
        ablations,
        standardize: false,
        ..TrainConfig::default()
    };
    let (report, loss) = evaluate(&model, &records, &cfg)?;
    let out = output_dir(a.out, "eval")?;
    let table = report.to_table();
    write(&out.join(format!("eval_{}.txt", split.name())), &table)?;
    write(
        &out.join(format!("eval_{}.json", split.name())),
        &to_json(&json!({"split": split.name(), "report": report, "loss": loss})),
    )?;
    println!("split {} ({} dialogues)", split.name(), records.len());
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut ablations = Ablations::default();
    for flag in &a.ablate {
        ablations.set(flag)?;
    }
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        floor: a.floor,
        corrupt: a.corrupt,
    };
    println!(
        "width {} seed {} mu {} step {:e} floor {:e} tolerance {:e}",
        a.width, a.seed, a.mu, opts.step, opts.floor, opts.tolerance
    );
    let report = grad_check(a.width, a.seed, a.mu, &ablations, &opts)?;
    print!("{}", report.to_table());
    println!("max_rel_err {:.3e}", report.max_rel_err());
    if let Some(dir) = a.out {
        let dir = output_dir(Some(dir), "gradcheck")?;
        write(&dir.join("gradcheck.json"), &to_json(&report))?;
    }
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Check(format!("tensors over tolerance: {}", report.failing().join(", "))))
    }
}

fn cmd_ablate(a: TrainArgs) -> CmdResult {
    let mut run = resolve_run(&a)?;
    let data = load_dataset(&a.data)?;
    let m = &data.manifest;
    let model_cfg = run.resolve_model(m.dims.audio, m.dims.text, m.num_classes())?;
    let base = run.train_config();
    let echoed = run.to_flat_toml();
    print!("{echoed}");
    let out = output_dir(a.out, "ablate")?;
    write(&out.join("config.toml"), &echoed)?;
    let train_split = data.split_owned(Split::Train);
    let val_split = data.split_owned(Split::Val);
    let sweep = AblationData {
        labels: &m.label_set,
        train: &train_split,
        val: &val_split,
    };
    let rows = ablation_sweep(&sweep, &model_cfg, &base, &run.sweep.variants, &run.sweep.seeds)?;
    let table = ablation_table(&rows);
    write(&out.join("ablation.txt"), &table)?;
    write(&out.join("ablation.json"), &to_json(&rows))?;
    print!("{table}");
    Ok(())
}
