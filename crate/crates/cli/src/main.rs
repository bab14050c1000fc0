//! `sokd`: pretrain teachers, run distillation experiments, compare runs.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad keys, missing
//! files, incompatible inputs), 1 for anything that fails at runtime.

mod compare;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sokd_core::data::Dataset;
use sokd_core::nn::{load_checkpoint, save_checkpoint, CheckpointMeta, Network, SequentialModel};
use sokd_core::trainer::{
    compare_networks, evaluate, load_data, prepare, run_with, AblationMask, ExperimentConfig, ExperimentInputs, Mode,
    RunOutput,
};

#[derive(Parser)]
#[command(name = "sokd", version, about = "Semi-online knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a key after the file is read, e.g. `--set loss.tau=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory that receives the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train the `[teacher]` architecture from scratch and save `teacher.ckpt`.
    Pretrain(RunArgs),
    /// Train a student in the configured mode.
    Distill(RunArgs),
    /// Accuracy of a checkpoint on the configured data.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Model checkpoint to score; its architecture must fit the configured data.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// CKA, IER and MR between two checkpoints.
    Metrics {
        #[command(flatten)]
        run: RunArgs,
        /// Reference network, usually a pretrained teacher.
        #[arg(long)]
        teacher: PathBuf,
        /// Network compared against the reference.
        #[arg(long)]
        student: PathBuf,
        /// Layer whose output feeds CKA; defaults to the penultimate activation.
        #[arg(long)]
        teacher_tap: Option<String>,
        /// As `--teacher-tap`, for the student.
        #[arg(long)]
        student_tap: Option<String>,
        /// Dataset split the metrics are computed on.
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Median/min/max table over several `run.csv` files or run directories.
    Compare {
        /// Run directories or `run.csv` files, grouped by their recorded mode.
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// One semi-online run per entry of `sweep.masks` or `sweep.split_indices`.
    Ablate(RunArgs),
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn config(field: &str, msg: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            err: anyhow::anyhow!("config error in `{field}`: {msg}"),
        }
    }
}

impl From<sokd_core::Error> for Failure {
    fn from(e: sokd_core::Error) -> Self {
        Failure {
            code: if e.is_config() { 2 } else { 1 },
            err: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        match err.downcast_ref::<sokd_core::Error>() {
            Some(e) if e.is_config() => Failure { code: 2, err },
            _ => Failure { code: 1, err },
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(&a),
        Command::Distill(a) => distill(&a),
        Command::Eval { run, checkpoint } => eval(&run, &checkpoint),
        Command::Metrics {
            run,
            teacher,
            student,
            teacher_tap,
            student_tap,
            split,
        } => metrics(&run, &teacher, &student, teacher_tap.as_deref(), student_tap.as_deref(), split),
        Command::Compare { runs, out } => compare::run(&runs, &out),
        Command::Ablate(a) => ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Creates `<out>/<tag>_<seed>_<unix millis>` and points `<out>/latest` at it.
fn create_run_dir(out: &Path, tag: &str, seed: u64) -> CliResult<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    loop {
        let name = format!("{tag}_{seed}_{stamp}");
        let dir = out.join(&name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                write(&out.join("latest"), format!("{name}\n"))?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => stamp += 1,
            Err(e) => return Err(anyhow::Error::new(e).context(format!("creating {}", dir.display())).into()),
        }
    }
}

fn meta(cfg: &ExperimentConfig, mode: &str) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        epoch: cfg.epochs,
        mode: mode.to_string(),
    }
}

fn save_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> CliResult {
    out.log.save_csv(&dir.join("run.csv"))?;
    out.log.save_summary(&dir.join("summary.toml"))?;
    let mode = cfg.mode.name();
    save_checkpoint(&out.student, &meta(cfg, mode), &dir.join("student.ckpt"))?;
    if let Some(p) = &out.partner {
        let name = if cfg.mode == Mode::Dml { "peer.ckpt" } else { "kbm.ckpt" };
        save_checkpoint(p, &meta(cfg, mode), &dir.join(name))?;
    }
    if let Some(r) = &out.reconstructed {
        save_checkpoint(r, &meta(cfg, mode), &dir.join("teacher_reconstructed.ckpt"))?;
    }
    Ok(())
}

fn pretrain(a: &RunArgs) -> CliResult {
    let cfg = ExperimentConfig::load_unvalidated(&a.config, &a.overrides)?;
    if cfg.teacher.layers.is_empty() {
        return Err(Failure::config("teacher.layers", "pretraining needs a teacher architecture"));
    }
    let view = cfg.pretrain_view();
    view.validate_with(false)?;
    let dir = create_run_dir(&a.out, "pretrain", cfg.seed)?;
    write(&dir.join("config.toml"), cfg.echo())?;
    let (train, test) = load_data(&view)?;
    let out = run_with(
        &view,
        &ExperimentInputs {
            train,
            test,
            teacher: None,
        },
    )?;
    out.log.save_csv(&dir.join("run.csv"))?;
    out.log.save_summary(&dir.join("summary.toml"))?;
    save_checkpoint(&out.student, &meta(&cfg, "pretrain"), &dir.join("teacher.ckpt"))?;
    let s = &out.log.summary;
    println!("{}", dir.display());
    println!("teacher test accuracy {:.2} (best {:.2})", s.final_acc_student, s.best_acc_student);
    Ok(())
}

fn distill(a: &RunArgs) -> CliResult {
    let cfg = ExperimentConfig::load(&a.config, &a.overrides)?;
    let dir = create_run_dir(&a.out, cfg.mode.name(), cfg.seed)?;
    write(&dir.join("config.toml"), cfg.echo())?;
    let inputs = prepare(&cfg)?;
    let out = run_with(&cfg, &inputs)?;
    save_run(&dir, &cfg, &out)?;
    let s = &out.log.summary;
    println!("{}", dir.display());
    println!("student test accuracy {:.2} (best {:.2})", s.final_acc_student, s.best_acc_student);
    if let Some(r) = s.final_acc_reconstructed {
        println!(
            "reconstructed teacher {:.2} (frozen teacher {:.2})",
            r,
            s.teacher_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn load_model(path: &Path, flag: &str) -> CliResult<SequentialModel> {
    if !path.exists() {
        return Err(Failure::config(flag, format!("{} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?.model)
}

fn check_accepts(model: &SequentialModel, ds: &Dataset, flag: &str) -> CliResult {
    if model.input_shape() != ds.sample_shape() || model.output_shape() != [ds.classes] {
        return Err(Failure::config(
            flag,
            format!(
                "network maps {:?} to {:?} but the data has samples {:?} and {} classes",
                model.input_shape(),
                model.output_shape(),
                ds.sample_shape(),
                ds.classes
            ),
        ));
    }
    Ok(())
}

fn eval(a: &RunArgs, checkpoint: &Path) -> CliResult {
    let cfg = ExperimentConfig::load_unvalidated(&a.config, &a.overrides)?;
    let model = load_model(checkpoint, "--checkpoint")?;
    let (train, test) = load_data(&cfg)?;
    check_accepts(&model, &test, "--checkpoint")?;
    let dir = create_run_dir(&a.out, "eval", cfg.seed)?;
    write(&dir.join("config.toml"), cfg.echo())?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv")).context("creating eval.csv")?;
    w.write_record(["split", "samples", "accuracy"]).context("writing eval.csv")?;
    println!("{}", dir.display());
    for (name, ds) in [("train", &train), ("test", &test)] {
        let (acc, _) = evaluate(&model, ds)?;
        w.write_record([name.to_string(), ds.len().to_string(), acc.to_string()])
            .context("writing eval.csv")?;
        println!("{name} accuracy {acc:.2} on {} samples", ds.len());
    }
    w.flush().context("writing eval.csv")?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics(
    a: &RunArgs,
    teacher: &Path,
    student: &Path,
    teacher_tap: Option<&str>,
    student_tap: Option<&str>,
    split: SplitArg,
) -> CliResult {
    let cfg = ExperimentConfig::load_unvalidated(&a.config, &a.overrides)?;
    let t = load_model(teacher, "--teacher")?;
    let s = load_model(student, "--student")?;
    let (train, test) = load_data(&cfg)?;
    let (name, ds) = match split {
        SplitArg::Train => ("train", &train),
        SplitArg::Test => ("test", &test),
    };
    check_accepts(&t, ds, "--teacher")?;
    check_accepts(&s, ds, "--student")?;
    let tt = teacher_tap.or(cfg.metrics.teacher_tap.as_deref());
    let st = student_tap.or(cfg.metrics.student_tap.as_deref());
    let m = compare_networks(&t, tt, &s, st, ds)?;
    let dir = create_run_dir(&a.out, "metrics", cfg.seed)?;
    write(&dir.join("config.toml"), cfg.echo())?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv")).context("creating metrics.csv")?;
    w.write_record(["split", "acc_teacher", "acc_student", "cka", "ier", "mr"])
        .context("writing metrics.csv")?;
    w.write_record([
        name.to_string(),
        m.acc_reference.to_string(),
        m.acc_student.to_string(),
        opt(m.cka),
        m.ier.to_string(),
        opt(m.mr),
    ])
    .context("writing metrics.csv")?;
    w.flush().context("writing metrics.csv")?;
    println!("{}", dir.display());
    println!(
        "{name}: teacher {:.2}  student {:.2}  cka {}  ier {:.2}  mr {}",
        m.acc_reference,
        m.acc_student,
        m.cka.map_or("-".into(), |c| format!("{c:.4}")),
        m.ier,
        m.mr.map_or("-".into(), |r| format!("{r:.2}"))
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Variant {
    Mask(AblationMask),
    Split(usize),
}

impl Variant {
    fn label(&self) -> String {
        match self {
            Variant::Mask(m) => m.label(),
            Variant::Split(l) => format!("split_{l}"),
        }
    }
}

fn ablate(a: &RunArgs) -> CliResult {
    let cfg = ExperimentConfig::load(&a.config, &a.overrides)?;
    if !cfg.mode.is_sokd() {
        return Err(Failure::config("mode", "ablate needs `sokd` or `sokd_feature`"));
    }
    let axes = &cfg.sweep;
    let requested: Vec<Variant> = match (axes.masks.is_empty(), axes.split_indices.is_empty()) {
        (true, true) => return Err(Failure::config("sweep", "no variants given")),
        (false, false) => return Err(Failure::config("sweep", "give either masks or split_indices, not both")),
        (false, true) => axes.masks.iter().copied().map(Variant::Mask).collect(),
        (true, false) => axes.split_indices.iter().copied().map(Variant::Split).collect(),
    };
    let mut variants: Vec<Variant> = Vec::new();
    for v in requested {
        if variants.contains(&v) {
            eprintln!("warning: duplicate variant `{}` ignored", v.label());
        } else {
            variants.push(v);
        }
    }
    let inputs = prepare(&cfg)?;
    let blocks = inputs.teacher.as_ref().map_or(0, |t| t.block_count());
    for v in &variants {
        if let Variant::Split(l) = v {
            if *l == 0 || *l >= blocks {
                return Err(Failure::config(
                    "sweep.split_indices",
                    format!("split {l} is outside 1..{blocks} for this teacher"),
                ));
            }
        }
    }

    let dir = create_run_dir(&a.out, "ablate", cfg.seed)?;
    write(&dir.join("config.toml"), cfg.echo())?;
    let mut results = Vec::new();
    for v in &variants {
        let mut vc = cfg.clone();
        vc.sweep = Default::default();
        match *v {
            Variant::Mask(m) => vc.ablation = m,
            Variant::Split(l) => vc.split_index = Some(l),
        }
        let sub = dir.join(v.label());
        fs::create_dir(&sub).with_context(|| format!("creating {}", sub.display()))?;
        write(&sub.join("config.toml"), vc.echo())?;
        eprintln!("running {}", v.label());
        let out = run_with(&vc, &inputs)?;
        save_run(&sub, &vc, &out)?;
        results.push((v.label(), out.log.summary));
    }

    let mut w = csv::Writer::from_path(dir.join("ablation.csv")).context("creating ablation.csv")?;
    w.write_record([
        "variant",
        "final_acc_student",
        "best_acc_student",
        "final_acc_reconstructed",
        "best_acc_reconstructed",
        "cka",
        "ier",
        "mr",
    ])
    .context("writing ablation.csv")?;
    let mut text = format!("{:<28} {:>9} {:>9} {:>9} {:>8} {:>8}\n", "variant", "student", "best", "teacher", "cka", "ier");
    for (label, s) in &results {
        w.write_record([
            label.clone(),
            s.final_acc_student.to_string(),
            s.best_acc_student.to_string(),
            opt(s.final_acc_reconstructed),
            opt(s.best_acc_reconstructed),
            opt(s.final_cka),
            opt(s.final_ier),
            opt(s.final_mr),
        ])
        .context("writing ablation.csv")?;
        text.push_str(&format!(
            "{:<28} {:>9.2} {:>9.2} {:>9.2} {:>8.4} {:>8.2}\n",
            label,
            s.final_acc_student,
            s.best_acc_student,
            s.final_acc_reconstructed.unwrap_or(f64::NAN),
            s.final_cka.unwrap_or(f64::NAN),
            s.final_ier.unwrap_or(f64::NAN)
        ));
    }
    w.flush().context("writing ablation.csv")?;
    write(&dir.join("ablation.txt"), &text)?;
    println!("{}", dir.display());
    print!("{text}");
    Ok(())
}
