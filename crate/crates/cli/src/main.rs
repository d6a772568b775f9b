//! Experiment driver: deterministic pipeline stages over a single JSON
//! configuration.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 missing artifact (e.g. running `adapt` before `distill`).

use clap::{Parser, Subcommand};
use fedveil::attack::{attack_experiment, distance_matrix_csv, AttackDefenses};
use fedveil::config::ExperimentConfig;
use fedveil::data::synthetic_clusters;
use fedveil::he::{ciphertext_bytes, EncryptionParams, KeyRegistry};
use fedveil::kernels::{CalibrationStats, KernelConfig};
use fedveil::model::{
    block_forward_approx, calibrate_for_variant, calibrate_kernels, two_stage_distill,
    TransformerModel, Variant,
};
use fedveil::protocol::{
    comm_cost_model, dirichlet_partition, run_adaptation, run_oracle_adaptation, setup_federation,
    ExperimentReport,
};
use fedveil::seeding::{derive_rng, derive_seed};
use fedveil::tensor::Tensor;
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedveil", about = "Double-blind federated adaptation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    parallel: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on auxiliary data and distill the approximated
    /// student; writes checkpoints, calibration, and a loss CSV.
    Distill,
    /// Run federated adaptation against a distilled student checkpoint.
    Adapt {
        /// Also run the plaintext reference and compare (requires the
        /// defense toggles to be off for exact agreement).
        #[arg(long)]
        oracle: bool,
    },
    /// Pairing attacks on client-visible views of a distilled model.
    Attack,
    /// Per-block homomorphic cost table.
    #[command(name = "bench-he")]
    BenchHe,
    /// Summarize an existing adaptation report.
    Report,
}

enum CliError {
    Config(String),
    MissingArtifact(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::MissingArtifact(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: fedveil::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    if !path.exists() {
        return Err(CliError::Config(format!("config file {} not found", path.display())));
    }
    let mut cfg = ExperimentConfig::from_path(path).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Auxiliary (public) data stands in for the distillation corpus; it shares
/// the generator but not the seed with the downstream task data.
fn aux_dataset(cfg: &ExperimentConfig) -> fedveil::data::Dataset {
    let mut spec = cfg.data;
    spec.train_per_class = cfg.aux_per_class;
    spec.test_per_class = 1;
    synthetic_clusters(&spec, derive_seed(cfg.seed, "aux-data", &[])).0
}

fn downstream_datasets(cfg: &ExperimentConfig) -> (fedveil::data::Dataset, fedveil::data::Dataset) {
    synthetic_clusters(&cfg.data, derive_seed(cfg.seed, "downstream-data", &[]))
}

fn cmd_distill(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = ensure_out_dir(cfg)?;
    let aux = aux_dataset(cfg);
    let mut teacher = TransformerModel::init(
        cfg.model,
        Variant::Exact,
        cfg.kernels,
        cfg.init_scale,
        derive_seed(cfg.seed, "teacher-init", &[]),
    )
    .map_err(runtime)?;
    let teacher_losses = teacher
        .train_classifier(
            &aux,
            cfg.teacher_epochs,
            cfg.teacher_lr,
            cfg.distill.batch_size,
            derive_seed(cfg.seed, "teacher-train", &[]),
        )
        .map_err(runtime)?;
    let stats = calibrate_kernels(&teacher, &aux.inputs).map_err(runtime)?;
    teacher.kernels = cfg.kernels.calibrated(&stats);
    let mut student = teacher.clone();
    student.variant = Variant::Approximated;
    let student_stats = calibrate_for_variant(&student, &aux.inputs).map_err(runtime)?;
    student.kernels = cfg.kernels.calibrated(&student_stats);
    let trajectory = two_stage_distill(
        &teacher,
        &mut student,
        &aux,
        &cfg.distill,
        derive_seed(cfg.seed, "distill", &[]),
    )
    .map_err(runtime)?;
    // refresh the constants against the distilled weights
    let stats = calibrate_for_variant(&student, &aux.inputs).map_err(runtime)?;
    student.kernels = student.kernels.calibrated(&stats);

    teacher.save(&dir.join("teacher.ckpt")).map_err(runtime)?;
    student.save(&dir.join("student.ckpt")).map_err(runtime)?;
    let calibration = json!({
        "kernels": student.kernels,
        "stats": stats,
    });
    write_text(
        &dir.join("calibration.json"),
        &serde_json::to_string_pretty(&calibration).unwrap(),
    )?;
    let mut csv = String::from("epoch,stage,loss\n");
    for e in &trajectory {
        writeln!(csv, "{},{},{}", e.epoch, e.stage, e.loss).unwrap();
    }
    write_text(&dir.join("distill_metrics.csv"), &csv)?;
    let mut teacher_csv = String::from("epoch,loss\n");
    for (i, l) in teacher_losses.iter().enumerate() {
        writeln!(teacher_csv, "{i},{l}").unwrap();
    }
    write_text(&dir.join("teacher_metrics.csv"), &teacher_csv)?;
    println!(
        "distill: teacher loss {:.4} -> student stage-2 loss {:.4} ({} epochs), artifacts in {}",
        teacher_losses.last().copied().unwrap_or(f64::NAN),
        trajectory.last().map(|e| e.loss).unwrap_or(f64::NAN),
        trajectory.len(),
        dir.display()
    );
    Ok(())
}

struct LoadedStudent {
    model: TransformerModel,
    activation_scale: f64,
}

fn load_student(cfg: &ExperimentConfig, dir: &Path) -> Result<LoadedStudent, CliError> {
    let ckpt = dir.join("student.ckpt");
    if !ckpt.exists() {
        return Err(CliError::MissingArtifact(format!(
            "student checkpoint {} not found (run the distill stage first)",
            ckpt.display()
        )));
    }
    let calibration_path = dir.join("calibration.json");
    let (kernels, scale) = if calibration_path.exists() {
        let text = std::fs::read_to_string(&calibration_path)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.to_string()))?;
        let kernels: KernelConfig = serde_json::from_value(v["kernels"].clone())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let stats: CalibrationStats = serde_json::from_value(v["stats"].clone())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        (kernels, stats.max_abs_activation.max(1.0))
    } else {
        (cfg.kernels, 1.0)
    };
    let model = TransformerModel::load(&ckpt, kernels).map_err(|e| match e {
        fedveil::Error::Io(io) => CliError::MissingArtifact(io.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    Ok(LoadedStudent {
        model,
        activation_scale: scale,
    })
}

fn report_csv(report: &ExperimentReport) -> String {
    let mut csv = String::from("round,mean_client_loss,balanced_accuracy,bytes_to_clients,bytes_to_server\n");
    for r in &report.rounds {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.round, r.mean_client_loss, r.balanced_accuracy, r.bytes_to_clients, r.bytes_to_server
        )
        .unwrap();
    }
    csv
}

fn cmd_adapt(cfg: &ExperimentConfig, oracle: bool) -> Result<(), CliError> {
    let dir = ensure_out_dir(cfg)?;
    let student = load_student(cfg, &dir)?;
    let (train, test) = downstream_datasets(cfg);
    let parts = dirichlet_partition(
        &train.labels,
        cfg.federation.num_clients,
        cfg.federation.dirichlet_alpha,
        derive_seed(cfg.seed, "partition", &[]),
    )
    .map_err(runtime)?;
    let datasets: Vec<_> = parts.iter().map(|p| train.subset(p)).collect();
    let mut federation = setup_federation(
        &student.model,
        datasets.clone(),
        cfg.he,
        cfg.federation.adapter_rank,
        cfg.seed,
    )
    .map_err(runtime)?;
    federation.server.activation_scale = student.activation_scale;
    let report = run_adaptation(
        &mut federation.server,
        &mut federation.clients,
        &cfg.federation,
        &test,
        cfg.seed,
    )
    .map_err(runtime)?;

    let mut doc = serde_json::to_value(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    if oracle {
        let (oracle_report, _) = run_oracle_adaptation(
            &student.model,
            &datasets,
            &cfg.federation,
            &test,
            cfg.seed,
            cfg.seed,
        )
        .map_err(runtime)?;
        doc["oracle"] =
            serde_json::to_value(&oracle_report).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    write_text(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&doc).unwrap(),
    )?;
    write_text(&dir.join("rounds.csv"), &report_csv(&report))?;
    // line-delimited round logs
    let mut jsonl = String::new();
    for log in &report.round_logs {
        for c in &log.clients {
            let rec = json!({
                "round": log.round,
                "client": c.client,
                "loss": c.loss,
                "mask": c.mask,
                "batch": c.batch,
                "bytes_to_client": c.bytes_to_client,
                "bytes_to_server": c.bytes_to_server,
                "perm_seed": c.perm_seed,
                "mask_seed": c.mask_seed,
            });
            jsonl.push_str(&rec.to_string());
            jsonl.push('\n');
        }
    }
    write_text(&dir.join("round_log.jsonl"), &jsonl)?;
    // raw ledger
    let mut ledger_csv = String::from("round,client,direction,kind,block,bytes\n");
    for m in federation.server.comm.messages() {
        writeln!(
            ledger_csv,
            "{},{},{:?},{:?},{},{}",
            m.round,
            m.client,
            m.direction,
            m.kind,
            m.block.map(|b| b.to_string()).unwrap_or_default(),
            m.bytes
        )
        .unwrap();
    }
    write_text(&dir.join("comm_ledger.csv"), &ledger_csv)?;
    println!(
        "adapt: {} rounds, balanced accuracy {:.4} -> {:.4}, {} bytes total, reports in {}",
        report.rounds.len(),
        report.initial_accuracy,
        report.final_accuracy,
        report.total_bytes,
        dir.display()
    );
    Ok(())
}

fn cmd_attack(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = ensure_out_dir(cfg)?;
    let student = load_student(cfg, &dir)?;
    let (_, test) = downstream_datasets(cfg);
    let n = cfg.federation.batch_size.min(test.len());
    let batch: Vec<Tensor> = test.inputs.iter().take(n).cloned().collect();
    let trials = 10;
    let mut summary = Vec::new();
    for (label, gap, sbs) in [
        ("sequential", 1usize, false),
        ("gap2", 2, false),
        ("sbs", 2, true),
    ] {
        let result = attack_experiment(
            &student.model,
            &batch,
            gap,
            AttackDefenses {
                stochastic_blocks: sbs,
                constrained: true,
            },
            trials,
            derive_seed(cfg.seed, "attack", &[gap as u64, sbs as u64]),
        )
        .map_err(runtime)?;
        if let Some(first) = result.results.first() {
            write_text(
                &dir.join(format!("attack_{label}_distances.csv")),
                &distance_matrix_csv(&first.distance_matrix),
            )?;
        }
        println!(
            "attack[{label}]: gap {} mean accuracy {:.3} over {} pairs (chance {:.3})",
            gap, result.mean_accuracy, result.pairs_attacked, result.chance
        );
        summary.push(json!({
            "setting": label,
            "gap": result.gap,
            "batch_size": result.batch_size,
            "chance": result.chance,
            "mean_accuracy": result.mean_accuracy,
            "pairs_attacked": result.pairs_attacked,
            "degenerate_batch": result.degenerate_batch,
        }));
    }
    write_text(
        &dir.join("attack_summary.json"),
        &serde_json::to_string_pretty(&json!({ "settings": summary })).unwrap(),
    )?;
    Ok(())
}

fn cmd_bench_he(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = ensure_out_dir(cfg)?;
    // configured profile: one approximated block over one encrypted sample
    let registry = KeyRegistry::new();
    let key = registry
        .keygen("bench", cfg.he)
        .map_err(runtime)?;
    let model = TransformerModel::init(
        cfg.model,
        Variant::Approximated,
        KernelConfig {
            rescale_max: 8.0,
            ..cfg.kernels
        },
        cfg.init_scale,
        cfg.seed,
    )
    .map_err(runtime)?;
    let mut rng = derive_rng(cfg.seed, "bench", &[]);
    let x = Tensor::uniform(&[cfg.model.seq_len, cfg.model.model_dim], -0.5, 0.5, &mut rng);
    let ct = registry.encrypt(&key, &x, &mut rng).map_err(runtime)?;
    registry.stats().reset();
    let out = block_forward_approx(&ct, &model.blocks[0], &cfg.model, &model.kernels)
        .map_err(runtime)?;
    let ops = registry.stats().snapshot();
    let configured = json!({
        "profile": "configured",
        "ir_shape": [cfg.model.seq_len, cfg.model.model_dim],
        "plain_bytes": ct.plain_bytes(),
        "ciphertext_bytes": ciphertext_bytes(&ct),
        "block_depth_used": out.out.depth_used(),
        "depth_budget": cfg.he.max_depth,
        "ops": ops,
    });

    // reference profile: ViT-Base sized intermediate representation under
    // the measured packing (14 bytes per f32 element) and 2.79x expansion
    let reference_params = EncryptionParams {
        plain_bytes_per_elem: 14.0,
        expansion_ratio: 2.79,
        ..cfg.he
    };
    let ref_registry = KeyRegistry::new();
    let ref_key = ref_registry.keygen("bench", reference_params).map_err(runtime)?;
    let ref_ct = ref_registry
        .encrypt(&ref_key, &Tensor::zeros(&[577, 768]), &mut rng)
        .map_err(runtime)?;
    let ref_plain_mb = ref_ct.plain_bytes() as f64 / 1e6;
    let ref_cipher_mb = ciphertext_bytes(&ref_ct) as f64 / 1e6;
    let reference = json!({
        "profile": "vit-base-reference",
        "ir_shape": [577, 768],
        "plain_mb": ref_plain_mb,
        "ciphertext_mb": ref_cipher_mb,
        "per_sample_per_block_cost_12_blocks_mb":
            comm_cost_model(1, 12, ref_cipher_mb, false),
        "sbs_cost_12_blocks_mb": comm_cost_model(1, 12, ref_cipher_mb, true),
    });
    let doc = json!({ "profiles": [configured, reference] });
    write_text(&dir.join("bench_he.json"), &serde_json::to_string_pretty(&doc).unwrap())?;
    println!("bench-he: configured IR {} B plain / {} B cipher, block depth {} (budget {})",
        ct.plain_bytes(), ciphertext_bytes(&ct), out.out.depth_used(), cfg.he.max_depth);
    println!(
        "bench-he: reference IR 577x768 -> {ref_plain_mb:.2} MB plain / {ref_cipher_mb:.2} MB cipher"
    );
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = PathBuf::from(&cfg.out_dir);
    let path = dir.join("report.json");
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "no report at {} (run adapt first)",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "report {}: accuracy {} -> {}, total bytes {}, audit violations: {}",
        dir.display(),
        v["initial_accuracy"],
        v["final_accuracy"],
        v["total_bytes"],
        v["audit"]["violations"].as_array().map_or(0, |a| a.len())
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.parallel {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    let result = load_config(&cli).and_then(|cfg| match &cli.command {
        Command::Distill => cmd_distill(&cfg),
        Command::Adapt { oracle } => cmd_adapt(&cfg, *oracle),
        Command::Attack => cmd_attack(&cfg),
        Command::BenchHe => cmd_bench_he(&cfg),
        Command::Report => cmd_report(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
