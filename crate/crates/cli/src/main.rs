//! rnlab: gradient checks, training runs, evaluation, analysis export, and
//! ablation sweeps over the cross-domain normalization layers.

mod sweep;

use clap::{Parser, Subcommand};
use rnlab_core::analysis::export_reports;
use rnlab_core::config::{self, ExperimentConfig};
use rnlab_core::gradcheck::CheckSettings;
use rnlab_core::layercheck::{check_layer, LayerCheckSpec};
use rnlab_core::model::Mlp;
use rnlab_core::norm::{Domain, NormKind};
use rnlab_core::train::{evaluate, train_run, MetricsRow, RunCheckpoint};
use rnlab_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rnlab", version, about = "Cross-domain normalization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients of one layer (or all) to finite differences.
    Gradcheck {
        /// bn | adabn | autodial | dsbn | tn | rn | all
        #[arg(long, default_value = "all")]
        layer: String,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Relative tolerance on each coordinate.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for a gradcheck.txt report copy.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed key in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the out key in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a two-domain CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Accepted for interface uniformity; evaluation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for an eval.csv metrics copy.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export theory diagnostics and gate/correlation reports for a run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra directory to copy analysis.json into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the cross product of one config and one varied axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// normalizer | gate | measure
        #[arg(long)]
        vary: String,
        /// Comma-separated seed list; defaults to five seeds from the base.
        #[arg(long)]
        seeds: Option<String>,
        /// Base seed when --seeds is not given; overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Root directory for variant run directories and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 2 for problems with what the user handed us, 1 for runs that fail.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidInput(_) | Error::Io { .. } | Error::Json { .. } => 2,
        Error::ShapeMismatch { .. } | Error::NonFinite { .. } => 1,
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gradcheck { layer, channels, batch, tol, seed, out } => {
            cmd_gradcheck(&layer, channels, batch, tol, seed, out.as_deref())
        }
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref()),
        Command::Eval { checkpoint, data, seed: _, out } => {
            cmd_eval(&checkpoint, &data, out.as_deref())
        }
        Command::Analyze { run, seed, out } => cmd_analyze(&run, seed, out.as_deref()),
        Command::Sweep { config, vary, seeds, seed, out } => {
            sweep::cmd_sweep(&config, &vary, seeds.as_deref(), seed, out.as_deref())
        }
    }
}

fn parse_layer_set(layer: &str) -> Result<Vec<NormKind>> {
    if layer == "all" {
        return Ok(vec![
            NormKind::Bn,
            NormKind::AdaBn,
            NormKind::AutoDial,
            NormKind::Dsbn,
            NormKind::Tn,
            NormKind::Rn,
        ]);
    }
    Ok(vec![NormKind::parse(layer)?])
}

fn cmd_gradcheck(
    layer: &str,
    channels: usize,
    batch: usize,
    tol: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    if channels == 0 || batch == 0 {
        return Err(Error::invalid("--channels and --batch must be at least 1"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("--tol must be a nonnegative number"));
    }
    let kinds = parse_layer_set(layer)?;
    let mut lines = Vec::new();
    let mut all_passed = true;
    for kind in kinds {
        let mut spec = LayerCheckSpec::new(kind, channels, batch, seed);
        spec.settings = CheckSettings {
            rel_tol: tol,
            abs_tol: tol.min(CheckSettings::default().abs_tol),
            ..CheckSettings::default()
        };
        let report = check_layer(&spec)?;
        all_passed &= report.passed;
        lines.push(format!(
            "{} layer={} C={} N={} tol={:e} seed={}: {}",
            if report.passed { "PASS" } else { "FAIL" },
            kind.as_str(),
            channels,
            batch,
            tol,
            seed,
            report.describe(),
        ));
    }
    for line in &lines {
        println!("{line}");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e.to_string()))?;
        let path = dir.join("gradcheck.txt");
        std::fs::write(&path, lines.join("\n") + "\n")
            .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
    }
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_with_overrides(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut cfg = config::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = Some(o.display().to_string());
    }
    Ok(cfg)
}

fn print_epoch(rows: &[MetricsRow]) {
    let Some(last) = rows.last() else { return };
    for row in rows.iter().filter(|r| r.epoch == last.epoch) {
        println!(
            "epoch {} {}: class_loss {:.4} domain_loss {:.4} accuracy {:.4}",
            row.epoch, row.split, row.class_loss, row.domain_loss, row.accuracy
        );
    }
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_with_overrides(config, seed, out)?;
    let out_dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::invalid("no output directory: set out= in the config or pass --out"))?;
    let (source, target) = cfg.generate()?;
    let outcome = train_run(
        &cfg.train_config(),
        &source,
        &target,
        Some(Path::new(&out_dir)),
        &cfg.to_text(),
    )?;
    print_epoch(&outcome.metrics);
    println!("run artifacts in {out_dir}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let body = std::fs::read_to_string(checkpoint)
        .map_err(|e| Error::io(checkpoint.display().to_string(), e.to_string()))?;
    let ck: RunCheckpoint = serde_json::from_str(&body)
        .map_err(|e| Error::json(checkpoint.display().to_string(), e))?;
    let model = Mlp::from_checkpoint(&ck.model)?;
    let (source, target) = rnlab_core::data::read_csv(data)?;
    if source.feature_dim() != model.spec.input {
        return Err(Error::invalid(format!(
            "model expects {} features, {} has {} (a run's data.csv matches its checkpoint)",
            model.spec.input,
            data.display(),
            source.feature_dim()
        )));
    }

    let mut lines = vec!["split,class_loss,accuracy".to_string()];
    for (split, ds, domain) in
        [("eval_s", &source, Domain::Source), ("eval_t", &target, Domain::Target)]
    {
        let (acc, loss) = evaluate(&model, ds, domain)?;
        println!("{split}: class_loss {loss:.4} accuracy {acc:.4}");
        lines.push(format!("{split},{loss},{acc}"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e.to_string()))?;
        let path = dir.join("eval.csv");
        std::fs::write(&path, lines.join("\n") + "\n")
            .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(run: &Path, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    let report = export_reports(run, seed)?;
    println!(
        "a_distance {:.4} (epsilon {:.4})",
        report.theory.a_distance, report.theory.epsilon
    );
    println!("lambda_risk {:.4}", report.theory.lambda_risk);
    for layer in &report.channel_distances {
        println!(
            "layer {}: nearest-channel sum {:.4}, corresponding {:.1}%",
            layer.layer, layer.report.sum, layer.report.ratio_percent
        );
    }
    println!("analysis written to {}", run.join("analysis.json").display());
    if let Some(dir) = out {
        if dir != run {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(dir.display().to_string(), e.to_string()))?;
            std::fs::copy(run.join("analysis.json"), dir.join("analysis.json"))
                .map_err(|e| Error::io(dir.display().to_string(), e.to_string()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
