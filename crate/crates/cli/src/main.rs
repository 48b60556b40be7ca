//! `itosr`: synthesize data, run the iterative open-set loop, evaluate
//! predictions and self-check gradients.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 check
//! failure.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use itosr_core::dataset::{load_dataset, read_table, save_dataset, synth_openset, Encoding};
use itosr_core::gradcheck::{clip_discipline_check, run_gradient_suite, FdConfig, SuiteConfig};
use itosr_core::metrics::evaluate;
use itosr_core::pipeline::{run_it_osr, PipelineError};
use itosr_core::{PipelineConfig, SynthConfig};

use manifest::{FileDigest, Manifest};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "itosr",
    version,
    about = "Iterative transductive open-set recognition over feature tables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic open-set dataset (train and test tables).
    Synth(SynthArgs),
    /// Run the iterative loop on a dataset and write report and predictions.
    Run(RunArgs),
    /// Score a predictions file against a test table carrying truth labels.
    Eval(EvalArgs),
    /// Finite-difference gradient checks and the critic clip check.
    GanCheck(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Binary,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of known classes.
    #[arg(long, default_value_t = 6)]
    known: usize,
    /// Number of unknown classes (test table only).
    #[arg(long, default_value_t = 4)]
    unknown: usize,
    /// Rows per class.
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Train table.
    #[arg(long)]
    train: PathBuf,
    /// Test table.
    #[arg(long)]
    test: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, visible_alias = "T")]
    iterations: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Neighbours in the consistency filter.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    lr_embedder: Option<String>,
    #[arg(long)]
    lr_head: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long)]
    gan_epochs: Option<String>,
    #[arg(long)]
    gan_batch: Option<String>,
    #[arg(long)]
    n_critic: Option<String>,
    #[arg(long)]
    gan_lr: Option<String>,
    #[arg(long)]
    noise_dim: Option<String>,
    #[arg(long)]
    gan_hidden: Option<String>,
    #[arg(long)]
    clip_bound: Option<String>,
    /// true|false
    #[arg(long)]
    use_dual_space_sampling: Option<String>,
    /// true|false
    #[arg(long)]
    use_d2: Option<String>,
    /// true|false
    #[arg(long)]
    use_c2: Option<String>,
    /// previous|initial
    #[arg(long)]
    retrain_from: Option<String>,
    /// reinit|fine-tune
    #[arg(long)]
    head_init: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Score-only sampling (same as --use-dual-space-sampling false).
    #[arg(long)]
    ablate_dscs: bool,
    /// Same as --use-d2 false.
    #[arg(long)]
    no_d2: bool,
    /// Same as --use-c2 false.
    #[arg(long)]
    no_c2: bool,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: &Option<String>| {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        };
        push("iterations", &self.iterations);
        push("alpha", &self.alpha);
        push("k", &self.k);
        push("lambda", &self.lambda);
        push("lr_embedder", &self.lr_embedder);
        push("lr_head", &self.lr_head);
        push("epochs", &self.epochs);
        push("batch", &self.batch);
        push("hidden", &self.hidden);
        push("latent_dim", &self.latent_dim);
        push("gan_epochs", &self.gan_epochs);
        push("gan_batch", &self.gan_batch);
        push("n_critic", &self.n_critic);
        push("gan_lr", &self.gan_lr);
        push("noise_dim", &self.noise_dim);
        push("gan_hidden", &self.gan_hidden);
        push("clip_bound", &self.clip_bound);
        push("use_dual_space_sampling", &self.use_dual_space_sampling);
        push("use_d2", &self.use_d2);
        push("use_c2", &self.use_c2);
        push("retrain_from", &self.retrain_from);
        push("head_init", &self.head_init);
        push("seed", &self.seed);
        for (on, key) in [
            (self.ablate_dscs, "use_dual_space_sampling"),
            (self.no_d2, "use_d2"),
            (self.no_c2, "use_c2"),
        ] {
            if on {
                out.push((key, "false".into()));
            }
        }
        out
    }
}

#[derive(Args)]
struct EvalArgs {
    /// predictions.csv written by `run`.
    #[arg(long)]
    predictions: PathBuf,
    /// Test table with a truth column.
    #[arg(long)]
    truth: PathBuf,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Random instances per network.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the generator gradient to exercise the failure path.
    #[arg(long)]
    inject_bug: bool,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        c_known: a.known,
        c_unknown: a.unknown,
        d: a.dim,
        per_class_n: a.per_class,
        center_scale: a.center_scale,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = synth_openset(&cfg).map_err(data_err)?;
    fs::create_dir_all(&a.out).map_err(|e| data_err(format!("{}: {e}", a.out.display())))?;
    let (enc, ext) = match a.format {
        Format::Text => (Encoding::Text, "txt"),
        Format::Binary => (Encoding::Binary, "bin"),
    };
    let train = a.out.join(format!("train.{ext}"));
    let test = a.out.join(format!("test.{ext}"));
    save_dataset(&ds, &train, &test, enc).map_err(data_err)?;
    let m = Manifest::new(
        "synth",
        a.seed,
        serde_json::to_value(&cfg).expect("serialisable"),
    )
    .outputs(vec![
        FileDigest::of(&train).map_err(data_err)?,
        FileDigest::of(&test).map_err(data_err)?,
    ]);
    write_file(&a.out.join("manifest.json"), m.to_json())?;
    println!("{}\n{}", train.display(), test.display());
    Ok(())
}

fn resolve_config(a: &RunArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        config::apply_text(&mut cfg, &text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in a.overrides() {
        config::set_key(&mut cfg, k, &v)
            .map_err(|e| CliError::Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(a)?;
    let inputs = vec![
        FileDigest::of(&a.train).map_err(data_err)?,
        FileDigest::of(&a.test).map_err(data_err)?,
    ];
    let ds = load_dataset(&a.train, &a.test).map_err(data_err)?;
    let out = run_it_osr(&ds, &cfg).map_err(|e| match e {
        PipelineError::Config(m) => CliError::Usage(m),
        other => data_err(other),
    })?;
    out.write_outputs(&cfg, &a.out).map_err(data_err)?;
    let m = Manifest::new(
        "run",
        cfg.seed,
        serde_json::to_value(&cfg).expect("serialisable"),
    )
    .inputs(inputs)
    .outputs(vec![
        FileDigest::of(&a.out.join("report.json")).map_err(data_err)?,
        FileDigest::of(&a.out.join("predictions.csv")).map_err(data_err)?,
    ]);
    write_file(&a.out.join("manifest.json"), m.to_json())?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    if let Some(m0) = &out.initial.metrics {
        println!(
            "M_0: auroc={} acc={} macro_f1={:.4}",
            fmt(m0.auroc),
            fmt(m0.acc),
            m0.macro_f1
        );
    }
    for r in &out.reports {
        let mut line = format!(
            "t={} known={} unknown={} undetermined={} selected={} generated={} sampling={}{}",
            r.t,
            r.n_known,
            r.n_unknown,
            r.n_undetermined,
            r.n_selected,
            r.n_generated,
            r.sampling_mode,
            if r.gan_skipped { " gan=skipped" } else { "" }
        );
        if let Some(m) = &r.metrics {
            line += &format!(
                " auroc={} acc={} macro_f1={:.4}",
                fmt(m.auroc),
                fmt(m.acc),
                m.macro_f1
            );
        }
        println!("{line}");
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<(Vec<u32>, Vec<f64>), CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("row_id,predicted_label,confidence") {
        return Err(data_err(format!(
            "{}: missing predictions header",
            path.display()
        )));
    }
    let (mut labels, mut conf) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let bad = || data_err(format!("{}: malformed row {}", path.display(), i + 1));
        let mut f = line.split(',');
        let id: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let label: u32 = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let s: f64 = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if id != i || f.next().is_some() {
            return Err(bad());
        }
        labels.push(label);
        conf.push(s);
    }
    Ok((labels, conf))
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let (labels, conf) = read_predictions(&a.predictions)?;
    let table = read_table(&a.truth).map_err(data_err)?;
    let truth: Vec<u32> = table
        .truth
        .ok_or_else(|| data_err(format!("{}: no truth column", a.truth.display())))?
        .into_iter()
        .map(|t| t as u32)
        .collect();
    if truth.len() != labels.len() {
        return Err(data_err(format!(
            "{} predictions but {} truth rows",
            labels.len(),
            truth.len()
        )));
    }
    let res = evaluate(&labels, &conf, &truth, table.c).map_err(data_err)?;
    let mut json = serde_json::to_string_pretty(&res).expect("serialisable");
    json.push('\n');
    match &a.out {
        Some(p) => write_file(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn cmd_gan_check(a: &CheckArgs) -> Result<(), CliError> {
    if !(a.tolerance > 0.0) || a.instances == 0 {
        return Err(CliError::Usage(
            "tolerance must be positive and instances >= 1".into(),
        ));
    }
    let cfg = SuiteConfig {
        instances: a.instances,
        tolerance: a.tolerance,
        fd: FdConfig::default(),
        seed: a.seed,
        inject_bug: a.inject_bug,
    };
    let checks = run_gradient_suite(&cfg).map_err(CliError::Check)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.passed(a.tolerance);
        failed += usize::from(!ok);
        println!(
            "{} gradient {}: instances={} checked={} skipped={} max_rel_err={:.3e} tolerance={:.1e}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.instances,
            c.checked,
            c.skipped,
            c.max_rel_err,
            a.tolerance
        );
    }
    let clip = clip_discipline_check(200, a.seed).map_err(CliError::Check)?;
    let ok = clip.passed(200);
    failed += usize::from(!ok);
    println!(
        "{} critic clip: steps={} worst_max_abs={:.3e} bound={:.1e}",
        if ok { "PASS" } else { "FAIL" },
        clip.critic_steps,
        clip.worst,
        clip.bound
    );
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} check(s) failed")));
    }
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
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GanCheck(a) => cmd_gan_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
