//! `cxit` — batch driver for the compression pipeline.
//!
//! Every subcommand reads one TOML config (plus `--set` overrides), writes
//! its outputs into `--out-dir`, and drops the fully resolved config next
//! to them so the run can be reproduced from the echo alone.
//!
//! Exit codes: 0 success, 2 bad config/usage, 3 missing input file,
//! 4 numerical divergence, 1 anything else. Errors are single JSON lines
//! on stderr.

use clap::{Args, Parser, Subcommand};
use cxit::config::RunConfig;
use cxit::diag;
use cxit::slots;
use cxit::states::{self, RetrievalTask, SyntheticEncoder};
use cxit::train::{self, ModuleParams, ParamSpec};
use cxit::width::WidthVariant;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cxit", version, about = "Context compression over frozen hidden states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set ot.epsilon=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for --set run.seed=<SEED>.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic retrieval tasks as JSONL.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of tasks (defaults to data.train_tasks).
        #[arg(long)]
        count: Option<usize>,
        /// Seed sub-stream label; tasks come from "tasks/<label>".
        #[arg(long, default_value = "train")]
        label: String,
    },
    /// Encode token sequences into .hst hidden-state files.
    Encode {
        #[command(flatten)]
        common: Common,
        /// Task JSONL whose token sequences are encoded (one .hst per line).
        #[arg(long, conflicts_with = "tokens")]
        tasks: Option<PathBuf>,
        /// Whitespace-separated token ids for a single sequence.
        #[arg(long)]
        tokens: Option<String>,
    },
    /// Compress a .hst file into slot vectors and a transmission plan.
    Compress {
        #[command(flatten)]
        common: Common,
        /// Input hidden states.
        #[arg(long)]
        states: PathBuf,
        /// Checkpoint with trained parameters; fresh seeded init if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the compression parameters on a task file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training tasks (JSONL).
        #[arg(long)]
        tasks: PathBuf,
    },
    /// Allocation diagnostics for one sequence: correlation, spectrum, gates.
    Diag {
        #[command(flatten)]
        common: Common,
        /// Input hidden states.
        #[arg(long)]
        states: PathBuf,
        /// Checkpoint with trained parameters; fresh seeded init if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate both width variants under identical seeds/budgets.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Training tasks (JSONL).
        #[arg(long)]
        tasks: PathBuf,
        /// Held-out tasks (JSONL).
        #[arg(long)]
        heldout: PathBuf,
    },
    /// Finite-difference gradient report on the built-in small config.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

enum CliError {
    Config(String),
    MissingFile(String),
    Divergence(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingFile(_) => "missing-file",
            CliError::Divergence(_) => "divergence",
            CliError::Other(_) => "error",
        }
    }

    fn detail(&self) -> &str {
        match self {
            CliError::Config(d)
            | CliError::MissingFile(d)
            | CliError::Divergence(d)
            | CliError::Other(d) => d,
        }
    }
}

impl From<cxit::config::ConfigError> for CliError {
    fn from(e: cxit::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<cxit::states::StatesError> for CliError {
    fn from(e: cxit::states::StatesError) -> Self {
        match e {
            states::StatesError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<cxit::train::TrainError> for CliError {
    fn from(e: cxit::train::TrainError) -> Self {
        match e {
            train::TrainError::Divergence { .. } | train::TrainError::NonFiniteGradient { .. } => {
                CliError::Divergence(e.to_string())
            }
            train::TrainError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<cxit::slots::SlotsError> for CliError {
    fn from(e: cxit::slots::SlotsError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<cxit::diag::DiagError> for CliError {
    fn from(e: cxit::diag::DiagError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            let first_line = e.to_string().lines().next().unwrap_or("usage error").to_string();
            emit_error(&CliError::Config(first_line));
            std::process::exit(2);
        }
    };
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            emit_error(&e);
            std::process::exit(e.exit_code());
        }
    }
}

fn emit_error(e: &CliError) {
    eprintln!(
        "{}",
        serde_json::json!({
            "error": e.kind(),
            "exit": e.exit_code(),
            "detail": e.detail(),
        })
    );
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingFile(format!("config file {}: {e}", path.display()))
            } else {
                CliError::Other(e.to_string())
            }
        })?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for raw in &common.overrides {
        let (key, value) = raw.split_once('=').ok_or_else(|| {
            CliError::Config(format!("override {raw:?} is not of the form key=value"))
        })?;
        overrides.push((key.to_string(), value.to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("run.seed".into(), seed.to_string()));
    }
    Ok(RunConfig::from_toml_with_overrides(&text, &overrides)?)
}

/// Creates the output directory and drops the resolved config echo into it.
fn prepare_out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&common.out_dir)?;
    std::fs::write(
        common.out_dir.join("resolved_config.toml"),
        cfg.to_toml_string(),
    )?;
    Ok(common.out_dir.clone())
}

fn load_params(
    cfg: &RunConfig,
    spec: &ParamSpec,
    checkpoint: &Option<PathBuf>,
) -> Result<ModuleParams, CliError> {
    match checkpoint {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    CliError::MissingFile(format!("checkpoint {}: {e}", path.display()))
                } else {
                    CliError::Other(e.to_string())
                }
            })?;
            let raw = train::checkpoint_from_bytes(&bytes)?;
            Ok(train::params_from_checkpoint(&raw, spec)?)
        }
        None => Ok(ModuleParams::init(spec, &cfg.root_rng().derive("params"))),
    }
}

fn read_tasks(path: &Path) -> Result<Vec<RetrievalTask>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(format!("task file {}: {e}", path.display()))
        } else {
            CliError::Other(e.to_string())
        }
    })?;
    states::tasks_from_jsonl(&text).map_err(|e| CliError::Other(e.to_string()))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen {
            common,
            count,
            label,
        } => {
            let cfg = load_config(&common)?;
            let out = prepare_out_dir(&common, &cfg)?;
            let count = count.unwrap_or(cfg.data.train_tasks);
            let mut rng = cfg.root_rng().derive(&format!("tasks/{label}"));
            let tasks = states::gen_retrieval_batch(&mut rng, &cfg.task_config(), count)
                .map_err(|e| CliError::Config(e.to_string()))?;
            states::save_tasks(&tasks, &out.join("tasks.jsonl"))?;
            println!("wrote {} tasks to {}", count, out.join("tasks.jsonl").display());
            Ok(())
        }
        Command::Encode {
            common,
            tasks,
            tokens,
        } => {
            let cfg = load_config(&common)?;
            let out = prepare_out_dir(&common, &cfg)?;
            let encoder = cfg.build_encoder();
            match (tasks, tokens) {
                (Some(path), None) => {
                    let tasks = read_tasks(&path)?;
                    for (i, task) in tasks.iter().enumerate() {
                        let h = encode_tokens(&encoder, &task.tokens)?;
                        states::save_states(&h, &out.join(format!("{i:05}.hst")))?;
                    }
                    println!("encoded {} sequences into {}", tasks.len(), out.display());
                }
                (None, Some(list)) => {
                    let tokens = parse_token_list(&list)?;
                    let h = encode_tokens(&encoder, &tokens)?;
                    states::save_states(&h, &out.join("states.hst"))?;
                    println!("encoded 1 sequence into {}", out.display());
                }
                _ => {
                    return Err(CliError::Config(
                        "encode needs exactly one of --tasks or --tokens".into(),
                    ))
                }
            }
            Ok(())
        }
        Command::Compress {
            common,
            states: states_path,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let out = prepare_out_dir(&common, &cfg)?;
            let spec = cfg.param_spec();
            let params = load_params(&cfg, &spec, &checkpoint)?;
            let h = states::load_states(&states_path)?;
            let result = slots::compress_variant(
                &h,
                &params.depth,
                &params.width,
                &params.slot,
                cfg.variant(),
            )?;
            std::fs::write(
                out.join("slots.csv"),
                diag::slots_to_csv(&result.slots.aligned),
            )?;
            std::fs::write(out.join("plan.csv"), diag::plan_to_csv(&result.plan))?;
            std::fs::write(out.join("plan.json"), diag::plan_to_json(&result.plan))?;
            println!(
                "compressed {} tokens into {} slots ({})",
                h.seq_len(),
                result.plan.num_slots(),
                out.display()
            );
            Ok(())
        }
        Command::Train { common, tasks } => {
            let cfg = load_config(&common)?;
            let out = prepare_out_dir(&common, &cfg)?;
            let task_list = read_tasks(&tasks)?;
            let spec = cfg.param_spec();
            let encoder = cfg.build_encoder();
            let init = ModuleParams::init(&spec, &cfg.root_rng().derive("params"));
            let result = train::train(
                &cfg.train_config(),
                &encoder,
                &task_list,
                &init,
                cfg.variant(),
            );
            match result {
                Ok(output) => {
                    train::save_checkpoint(
                        &output.params,
                        output.history.len() as u64,
                        cfg.run.seed,
                        &out.join("checkpoint.cxt"),
                    )?;
                    std::fs::write(out.join("loss.csv"), train::history_to_csv(&output.history))?;
                    let last = output.history.last().unwrap();
                    println!(
                        "trained {} steps, final loss {:.6} ({})",
                        output.history.len(),
                        last.loss,
                        out.display()
                    );
                    Ok(())
                }
                Err(train::TrainError::Divergence { step, loss }) => {
                    Err(CliError::Divergence(format!(
                        "loss became {loss} at step {step}"
                    )))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Diag {
            common,
            states: states_path,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let out = prepare_out_dir(&common, &cfg)?;
            let spec = cfg.param_spec();
            let params = load_params(&cfg, &spec, &checkpoint)?;
            let h = states::load_states(&states_path)?;
            let result = slots::compress_variant(
                &h,
                &params.depth,
                &params.width,
                &params.slot,
                cfg.variant(),
            )?;
            let report = diag::DiagReport {
                correlation: diag::plan_correlation(&result.plan)?,
                spectrum: diag::plan_spectrum(&result.plan)?,
                gate_heatmap: result.anchors.gates.clone(),
                meta: report_meta(&cfg),
            };
            diag::export_report(&report, &out)?;
            println!(
                "diagnostics for {} slots written to {} (erank {:.4})",
                result.plan.num_slots(),
                out.display(),
                report.spectrum.erank
            );
            Ok(())
        }
        Command::Ablate {
            common,
            tasks,
            heldout,
        } => {
            let cfg = load_config(&common)?;
            let out = prepare_out_dir(&common, &cfg)?;
            let task_list = read_tasks(&tasks)?;
            let heldout_list = read_tasks(&heldout)?;
            let spec = cfg.param_spec();
            let encoder = cfg.build_encoder();
            let init = ModuleParams::init(&spec, &cfg.root_rng().derive("params"));

            let mut rows = Vec::new();
            for (variant, name) in [
                (WidthVariant::Transport, "transport"),
                (WidthVariant::WindowAttention, "window"),
            ] {
                let output = train::train(&cfg.train_config(), &encoder, &task_list, &init, variant)?;
                train::save_checkpoint(
                    &output.params,
                    output.history.len() as u64,
                    cfg.run.seed,
                    &out.join(format!("{name}.cxt")),
                )?;
                std::fs::write(
                    out.join(format!("loss_{name}.csv")),
                    train::history_to_csv(&output.history),
                )?;
                let stats = train::evaluate(&output.params, &encoder, &heldout_list, variant)?;
                let erank = mean_plan_erank(&output.params, &encoder, &heldout_list, variant)?;
                rows.push((
                    name,
                    output.history.last().unwrap().loss,
                    stats.mean_loss,
                    stats.accuracy,
                    erank,
                ));
            }
            let mut csv =
                String::from("variant,final_train_loss,heldout_loss,heldout_accuracy,mean_plan_erank\n");
            for (name, train_loss, held_loss, acc, erank) in &rows {
                csv.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    *train_loss as f32, *held_loss as f32, *acc as f32, *erank as f32
                ));
            }
            std::fs::write(out.join("comparison.csv"), csv)?;
            for (name, train_loss, held_loss, acc, erank) in &rows {
                println!(
                    "{name}: train {:.4} heldout {:.4} acc {:.3} erank {:.3}",
                    train_loss, held_loss, acc, erank
                );
            }
            Ok(())
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let out = prepare_out_dir(&common, &cfg)?;
            let report = gradcheck_small(&cfg)?;
            let mut csv = String::from("group,max_rel_err,max_abs_err,analytic_inf,numeric_inf\n");
            let mut worst: f64 = 0.0;
            for g in &report {
                csv.push_str(&format!(
                    "{},{:e},{:e},{:e},{:e}\n",
                    g.name, g.max_rel_err, g.max_abs_err, g.analytic_inf_norm, g.numeric_inf_norm
                ));
                worst = worst.max(g.max_rel_err);
                println!("{:22} max_rel_err {:.3e}", g.name, g.max_rel_err);
            }
            std::fs::write(out.join("gradcheck.csv"), csv)?;
            println!("worst group relative error: {worst:.3e}");
            if worst > 1e-4 {
                return Err(CliError::Divergence(format!(
                    "gradient check failed: max relative error {worst:e} > 1e-4"
                )));
            }
            Ok(())
        }
    }
}

fn encode_tokens(
    encoder: &SyntheticEncoder,
    tokens: &[u32],
) -> Result<cxit::HiddenStates, CliError> {
    encoder
        .encode(tokens)
        .map_err(|e| CliError::Config(e.to_string()))
}

fn parse_token_list(list: &str) -> Result<Vec<u32>, CliError> {
    list.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| CliError::Config(format!("bad token id {t:?}")))
        })
        .collect()
}

fn report_meta(cfg: &RunConfig) -> diag::ReportMeta {
    diag::ReportMeta {
        version: format!("cxit-v{}", env!("CARGO_PKG_VERSION")),
        seed: cfg.run.seed,
        config_sha256: cfg.sha256(),
        config: serde_json::to_value(cfg).expect("config to json"),
    }
}

/// Mean effective rank of the plan over held-out sequences.
fn mean_plan_erank(
    params: &ModuleParams,
    encoder: &SyntheticEncoder,
    tasks: &[RetrievalTask],
    variant: WidthVariant,
) -> Result<f64, CliError> {
    let mut total = 0.0;
    for task in tasks {
        let h = encoder
            .encode(&task.tokens)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let out = slots::compress_variant(&h, &params.depth, &params.width, &params.slot, variant)?;
        total += diag::plan_spectrum(&out.plan)?.erank;
    }
    Ok(total / tasks.len() as f64)
}

/// The pinned small configuration for finite-difference verification:
/// L=3, N=16, d=d_a=d_u=p=m=d_dec=8, T=16, r=4, vocab=10.
fn gradcheck_small(cfg: &RunConfig) -> Result<Vec<train::GradCheckGroup>, CliError> {
    let spec = ParamSpec {
        num_layers: 3,
        hidden_dim: 8,
        gate_hidden: 8,
        anchor_dim: 8,
        util_dim: 8,
        mlp_hidden: 8,
        dec_dim: 8,
        vocab_size: 10,
        tau: 1.0,
        shared_layer_proj: false,
        epsilon: cfg.ot.epsilon,
        segment_len: 16,
        sinkhorn_iters: 30,
        ratio: 4,
    };
    let rng = cxit::Rng::new(cfg.run.seed);
    let encoder = SyntheticEncoder::new(10, 3, 8, &rng.derive("encoder"));
    let mut task_rng = rng.derive("tasks/gradcheck");
    let tasks = states::gen_retrieval_batch(
        &mut task_rng,
        &states::TaskConfig {
            seq_len: 16,
            vocab_size: 10,
            num_pairs: 2,
        },
        1,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let params = ModuleParams::init(&spec, &rng.derive("params"));
    let h = encoder
        .encode(&tasks[0].tokens)
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(train::gradient_check(
        &h,
        &tasks[0],
        &params,
        cfg.variant(),
        1e-4,
    )?)
}
