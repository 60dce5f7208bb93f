//! Config-driven command-line entry point: data generation, training,
//! evaluation, probes, and plot rendering.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use stssl::config::{load_config, preset, preset_names, ExperimentConfig};
use stssl::dataset::{generate_synthetic, save_manifest, MetadataBaselineNote};
use stssl::error::{Error, Result};
use stssl::eval::{
    evaluate_metadata_baseline, ood_metadata_eval, prior_probe, verify_ood,
    ProbeResult,
};
use stssl::train::{load_checkpoint, prepare, run_training};

#[derive(Parser)]
#[command(name = "stssl", about = "Teacher-student SSL with spatiotemporal metadata", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the experiment seed (and the synthetic world seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenerateData(ConfigArgs),
    /// Run the training loop; writes checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split, including the OOD-metadata
    /// substitutions configured under [eval].
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Feed a gray image over a metadata grid to a trained teacher and dump
    /// the confidence surfaces as CSV.
    Probe {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render CSV artifacts to PNG (probe heatmaps, metric curves).
    Plot {
        /// Input CSV produced by probe or train.
        #[arg(long)]
        input: PathBuf,
        /// "heatmap" or "curves".
        #[arg(long)]
        kind: String,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Class index for heatmaps.
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Pixels per grid cell for heatmaps.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        /// Comma-separated column names for curve panels.
        #[arg(long, default_value = "pseudo_quality,pseudo_quantity")]
        columns: String,
    },
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), None) => load_config(path)?,
        (None, Some(name)) => preset(name).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown preset {name:?}; available: {}",
                preset_names().join(", ")
            ))
        })?,
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig(
                "--config and --preset are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidConfig(
                "one of --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
        if let Some(syn) = &mut config.dataset.synthetic {
            syn.seed = seed;
        }
    }
    config.validate()?;
    Ok(config)
}

fn cmd_generate_data(args: &ConfigArgs) -> Result<()> {
    let config = resolve_config(args)?;
    let out_dir = args.out.clone().unwrap_or_else(|| config.dataset.dir.clone());
    let world = config.dataset.synthetic.as_ref().ok_or_else(|| {
        Error::InvalidConfig("config has no [dataset.synthetic] section".into())
    })?;
    let mut manifest = generate_synthetic(world, &out_dir)?;

    // Annotate the sidecar with the metadata-only baseline.
    let pairs: Vec<_> = manifest
        .records
        .iter()
        .map(|r| (r.meta, r.labels[0]))
        .collect();
    let baseline = evaluate_metadata_baseline(&pairs, world.num_classes)?;
    let informative = baseline.advantage() >= 0.05;
    manifest.sidecar.metadata_baseline = Some(MetadataBaselineNote {
        baseline_accuracy: baseline.baseline_accuracy,
        majority_accuracy: baseline.majority_accuracy,
        note: if informative {
            "metadata is informative for labels".into()
        } else {
            "labels and images are independent of the spatiotemporal context; \
             metadata conveys no useful information"
                .into()
        },
    });
    save_manifest(&manifest)?;

    println!("config_hash: {}", config.hash());
    println!(
        "wrote {} records ({} classes, image size {}) to {}",
        manifest.records.len(),
        manifest.num_classes,
        manifest.image_size,
        out_dir.display()
    );
    println!(
        "metadata baseline: {:.3} accuracy vs {:.3} majority ({})",
        baseline.baseline_accuracy,
        baseline.majority_accuracy,
        if informative { "informative" } else { "uninformative" }
    );
    Ok(())
}

fn cmd_train(common: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let config = resolve_config(common)?;
    let setup = prepare(&config)?;
    let out_dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(setup.config_hash.clone()));
    println!("config_hash: {}", setup.config_hash);
    println!(
        "training for {} steps ({} labeled / {} unlabeled samples)",
        config.train.total_steps,
        setup.train_labeled.len(),
        setup.train_unlabeled.len()
    );
    let output = run_training(&setup, Some(&out_dir), resume)?;
    if let Some(record) = output.evals.last() {
        match record.student.accuracy {
            Some(acc) => println!("final student accuracy: {acc:.4}  (mAP {:.4})", record.student.map),
            None => println!("final student mAP: {:.4}", record.student.map),
        }
    }
    for (label, path) in [
        ("final checkpoint", &output.final_checkpoint),
        ("best checkpoint", &output.best_checkpoint),
        ("metrics log", &output.metrics_path),
    ] {
        if let Some(p) = path {
            println!("{label}: {}", p.display());
        }
    }
    Ok(())
}

fn cmd_evaluate(common: &ConfigArgs, checkpoint: &Path) -> Result<()> {
    let config = resolve_config(common)?;
    let setup = prepare(&config)?;
    let (state, _) = load_checkpoint(checkpoint, Some(&setup))?;
    let out_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("eval-out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let record = stssl::train::eval_snapshot(&setup, &state)?;
    println!("config_hash: {}", setup.config_hash);
    match record.student.accuracy {
        Some(acc) => println!("student: accuracy {acc:.4}, mAP {:.4}", record.student.map),
        None => println!("student: mAP {:.4}", record.student.map),
    }

    let mut report = serde_json::json!({
        "config_hash": setup.config_hash,
        "step": state.step,
        "student": record.student,
        "teacher": record.teacher,
    });

    if !config.eval.ood_overrides.is_empty() {
        let (student_cfg, student_params) = match (setup.student_config.as_ref(), state.student.as_ref()) {
            (Some(cfg), Some(slot)) => (cfg, &slot.ema.shadow),
            // Single-model runs: the single network fills both roles.
            _ => (&setup.teacher_config, &state.teacher.ema.shadow),
        };
        let train_metas: Vec<_> = setup
            .train_labeled
            .iter()
            .chain(setup.train_unlabeled.iter())
            .map(|&i| setup.data.manifest.records[i].meta)
            .collect();
        verify_ood(&train_metas, &config.eval.ood_overrides)?;
        let ood = ood_metadata_eval(
            &setup.teacher_config,
            &state.teacher.ema.shadow,
            student_cfg,
            student_params,
            &setup.data,
            &setup.test,
            &config.eval.ood_overrides,
            &setup.mask,
        )?;
        println!(
            "teacher under OOD metadata: mAP {:.4} ± {:.4} (baseline {:.4}); student invariant: {}",
            ood.teacher_map_mean, ood.teacher_map_std, ood.teacher_baseline.map, ood.student_invariant
        );
        // Table-style CSV: one row per override.
        let csv_path = out_dir.join("ood_report.csv");
        let mut csv = String::from("# config_hash=");
        csv.push_str(&setup.config_hash);
        csv.push_str("\noverride,teacher_map,teacher_accuracy,student_map,student_accuracy\n");
        for row in &ood.rows {
            csv.push_str(&format!(
                "{:?},{},{},{},{}\n",
                row.spec,
                row.teacher.map,
                row.teacher.accuracy.map(|v| v.to_string()).unwrap_or_default(),
                row.student.map,
                row.student.accuracy.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
        report["ood"] = serde_json::to_value(&ood).map_err(|e| Error::Other(e.to_string()))?;
    }

    let json_path = out_dir.join("report.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Other(e.to_string()))?,
    )
    .map_err(|e| Error::io(&json_path, e))?;
    println!("report: {}", json_path.display());
    Ok(())
}

fn cmd_probe(common: &ConfigArgs, checkpoint: &Path) -> Result<()> {
    let config = resolve_config(common)?;
    let setup = prepare(&config)?;
    let (state, _) = load_checkpoint(checkpoint, Some(&setup))?;
    let out_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("probe-out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let probe_cfg = config.eval.probe.unwrap_or_default();
    let train_metas: Vec<_> = setup
        .train_labeled
        .iter()
        .chain(setup.train_unlabeled.iter())
        .map(|&i| setup.data.manifest.records[i].meta)
        .collect();
    let result = prior_probe(
        &setup.teacher_config,
        &state.teacher.ema.shadow,
        &train_metas,
        &probe_cfg,
        &setup.mask,
    )?;
    let hash = setup.config_hash.as_str();
    let spatial = out_dir.join("probe_spatial.csv");
    let temporal = out_dir.join("probe_temporal.csv");
    ProbeResult::write_csv(&result.spatial, &spatial, Some(hash))?;
    ProbeResult::write_csv(&result.temporal, &temporal, Some(hash))?;
    println!("config_hash: {hash}");
    println!(
        "probe grid {}x{} (+{} day points) over {} classes",
        result.grid,
        result.grid,
        result.temporal.len(),
        result.num_classes
    );
    println!("wrote {} and {}", spatial.display(), temporal.display());
    Ok(())
}

fn cmd_plot(
    input: &Path,
    kind: &str,
    out: &Path,
    class: usize,
    scale: usize,
    columns: &str,
) -> Result<()> {
    match kind {
        "heatmap" => stssl::plot::render_heatmap(input, out, class, scale)?,
        "curves" => {
            let cols: Vec<String> = columns
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            stssl::plot::render_curves(input, out, &cols)?;
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown plot kind {other:?} (heatmap, curves)"
            )))
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenerateData(args) => cmd_generate_data(args),
        Command::Train { common, resume } => cmd_train(common, resume.as_deref()),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint),
        Command::Probe { common, checkpoint } => cmd_probe(common, checkpoint),
        Command::Plot { input, kind, out, class, scale, columns } => {
            cmd_plot(input, kind, out, *class, *scale, columns)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
