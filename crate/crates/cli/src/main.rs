use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ttmoe_core::bench::{bench_contract_vs_reconstruct, BenchConfig};
use ttmoe_core::checkpoint::{load_bank, load_expert, load_router, save_bank, save_router};
use ttmoe_core::config::{resolve_seed, ExperimentConfig};
use ttmoe_core::data::{build_mixed, gen_synthetic_tasks, Split, TaskDataset};
use ttmoe_core::model::{adapter_param_count, AdapterSpec, BaseModel, ExpertAdapter, ModelConfig};
use ttmoe_core::report::ReportSink;
use ttmoe_core::router::{moe_forward, router_param_count, train_router, ExpertBank, GateMode};
use ttmoe_core::train::{evaluate, train_expert, TrainReport};
use ttmoe_core::tt::TtShape;
use ttmoe_core::Error;

const BUILTIN_PRESETS: &[(&str, &str)] = &[
    ("toy-tt", include_str!("../../../presets/toy-tt.toml")),
    ("toy-lora", include_str!("../../../presets/toy-lora.toml")),
    ("paper-tt", include_str!("../../../presets/paper-tt.toml")),
    ("paper-lora", include_str!("../../../presets/paper-lora.toml")),
];

#[derive(Parser)]
#[command(name = "ttmoe", version, about = "TT-LoRA experts and a noisy top-1 router on a toy transformer")]
struct Cli {
    /// Append machine-readable JSON-lines records to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Global seed; falls back to TTMOE_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task suite and write it as JSON.
    GenTasks {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one expert per selected task and write a bank directory.
    TrainExpert {
        /// Task index or name; repeatable. Omit to train every task.
        #[arg(long)]
        task: Vec<String>,
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory for expert files and bank.json.
        #[arg(long)]
        out: PathBuf,
        /// Number of experts trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Train the router over a frozen bank.
    TrainRouter {
        /// bank.json written by train-expert.
        #[arg(long)]
        bank: PathBuf,
        /// Preset or TOML file with the task suite and router settings.
        #[arg(long = "mixed-config", default_value = "toy-tt")]
        mixed_config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validation accuracy of one expert, or of the routed mixture.
    Eval {
        #[arg(long, conflicts_with = "moe", required_unless_present = "moe")]
        expert: Option<PathBuf>,
        /// Router file; requires --bank.
        #[arg(long, requires = "bank")]
        moe: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Task index or name; repeatable. Omit for all tasks.
        #[arg(long)]
        task: Vec<String>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Time direct contraction against reconstruct-then-multiply.
    Bench(BenchArgs),
    /// Print trainable-parameter counts.
    CountParams {
        /// paper-tt, paper-lora, paper-router-N, or custom (with --config).
        #[arg(long)]
        preset: String,
        #[command(flatten)]
        config: ConfigArg,
        /// Router expert count for custom counts.
        #[arg(long)]
        experts: Option<usize>,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Preset name (toy-tt, toy-lora, paper-tt, paper-lora) or TOML path.
    #[arg(long, default_value = "toy-tt")]
    config: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Matrix size as D_INxD_OUT.
    #[arg(long, default_value = "2048x2048")]
    dims: String,
    /// Factor lists as "IN,IN,...|OUT,OUT,...".
    #[arg(long, default_value = "16,8,4,4|4,4,8,16")]
    shape: String,
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64,128")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
}

/// Bad arguments or missing inputs; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(Error::Io { source, .. }) = cause.downcast_ref::<Error>() {
            if source.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = resolve_seed(cli.seed).map_err(|e| usage(e.to_string()))?;
    let mut sink = ReportSink::create(cli.report.as_deref())?;
    match cli.command {
        Command::GenTasks { config, out } => gen_tasks(&load_config(&config.config, seed)?, out, &mut sink)?,
        Command::TrainExpert {
            task,
            config,
            out,
            parallel,
        } => train_experts(&load_config(&config.config, seed)?, &task, &out, parallel, &mut sink)?,
        Command::TrainRouter {
            bank,
            mixed_config,
            out,
        } => train_router_cmd(&load_config(&mixed_config, seed)?, &bank, &out, &mut sink)?,
        Command::Eval {
            expert,
            moe,
            bank,
            task,
            config,
        } => {
            let config = load_config(&config.config, seed)?;
            match (expert, moe, bank) {
                (Some(path), _, _) => eval_expert(&config, &path, &task, &mut sink)?,
                (None, Some(router), Some(bank)) => eval_moe(&config, &router, &bank, &task, &mut sink)?,
                _ => return Err(usage("eval needs --expert FILE or --moe FILE --bank FILE")),
            }
        }
        Command::Bench(args) => bench(&args, seed, &mut sink)?,
        Command::CountParams {
            preset,
            config,
            experts,
        } => count_params(&preset, &config.config, experts, &mut sink)?,
    }
    sink.finish()?;
    Ok(())
}

fn load_config(name: &str, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let path = Path::new(name);
    let config = if path.exists() {
        ExperimentConfig::load(path)?
    } else if let Some((_, text)) = BUILTIN_PRESETS.iter().find(|(n, _)| *n == name) {
        ExperimentConfig::from_toml_str(text)?
    } else {
        return Err(usage(format!("config file not found: {}", path.display())));
    };
    Ok(match seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("file not found: {}", path.display())))
    }
}

fn setup(config: &ExperimentConfig) -> anyhow::Result<(BaseModel, Vec<TaskDataset>)> {
    let base = BaseModel::new(config.model.clone())?;
    let tasks = gen_synthetic_tasks(&base, config.tasks.count, config.tasks.seed, &config.generator)?;
    Ok((base, tasks))
}

fn select_tasks(tasks: &[TaskDataset], wanted: &[String]) -> anyhow::Result<Vec<usize>> {
    if wanted.is_empty() {
        return Ok((0..tasks.len()).collect());
    }
    wanted
        .iter()
        .map(|w| {
            let found = match w.parse::<usize>() {
                Ok(i) if i < tasks.len() => Some(i),
                _ => tasks.iter().position(|t| &t.name == w),
            };
            found.ok_or_else(|| {
                let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
                usage(format!("unknown task {w:?}; known: {}", names.join(", ")))
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TaskRecord<'a> {
    index: usize,
    name: &'a str,
    rule: ttmoe_core::data::Rule,
    band_start: u32,
    band_width: usize,
    seed: u64,
    train: usize,
    validation: usize,
    probe_accuracy: f64,
}

fn gen_tasks(config: &ExperimentConfig, out: Option<PathBuf>, sink: &mut ReportSink) -> anyhow::Result<()> {
    let (_, tasks) = setup(config)?;
    println!("{:<4} {:<22} {:>6} {:>6} {:>6} {:>6}", "idx", "task", "band", "width", "train", "probe");
    for (i, t) in tasks.iter().enumerate() {
        println!(
            "{:<4} {:<22} {:>6} {:>6} {:>6} {:>6.3}",
            i,
            t.name,
            t.band_start,
            t.band_width,
            t.train.len(),
            t.probe_accuracy
        );
        sink.emit(
            "task",
            &TaskRecord {
                index: i,
                name: &t.name,
                rule: t.rule,
                band_start: t.band_start,
                band_width: t.band_width,
                seed: t.seed,
                train: t.train.len(),
                validation: t.validation.len(),
                probe_accuracy: t.probe_accuracy,
            },
        )?;
    }
    if let Some(path) = out {
        let json = serde_json::to_string(&tasks)?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn train_experts(
    config: &ExperimentConfig,
    wanted: &[String],
    out: &Path,
    parallel: usize,
    sink: &mut ReportSink,
) -> anyhow::Result<()> {
    if parallel == 0 {
        return Err(usage("--parallel must be at least 1"));
    }
    let (base, tasks) = setup(config)?;
    let selected = select_tasks(&tasks, wanted)?;
    let train_one = |i: usize| train_expert(&base, &tasks[i], &config.train, i as u32);

    let mut results: Vec<Option<ttmoe_core::Result<(ExpertAdapter, TrainReport)>>> =
        (0..selected.len()).map(|_| None).collect();
    for chunk in selected.chunks(parallel).zip(results.chunks_mut(parallel)) {
        let (ids, slots) = chunk;
        std::thread::scope(|s| {
            let handles: Vec<_> = ids.iter().map(|&i| s.spawn(move || train_one(i))).collect();
            for (slot, h) in slots.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("training thread panicked"));
            }
        });
    }

    let mut experts = Vec::with_capacity(selected.len());
    println!(
        "{:<4} {:<22} {:>8} {:>6} {:>6} {:>7} {:>8}",
        "idx", "task", "val_acc", "best", "epochs", "params", "secs"
    );
    for (&i, result) in selected.iter().zip(results) {
        let (adapter, report) = result.expect("every slot filled")?;
        println!(
            "{:<4} {:<22} {:>8.4} {:>6} {:>6} {:>7} {:>8.2}",
            i,
            tasks[i].name,
            report.best_val_accuracy,
            report.best_epoch,
            report.epochs_run,
            report.trainable_params,
            report.wall_clock_secs
        );
        sink.emit("train_expert", &report)?;
        experts.push(adapter);
    }
    let manifest = save_bank(out, &ExpertBank::new(experts)?)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Tasks in the bank's gate order, matched by expert id.
fn bank_tasks<'a>(bank: &ExpertBank, tasks: &'a [TaskDataset]) -> anyhow::Result<Vec<&'a TaskDataset>> {
    bank.experts()
        .iter()
        .map(|e| {
            let t = tasks
                .get(e.expert_id as usize)
                .ok_or_else(|| anyhow!("expert {} has no task in this config", e.expert_id))?;
            if t.name != e.task_name {
                bail!("expert {} was trained on {:?}, config yields {:?}", e.expert_id, e.task_name, t.name);
            }
            Ok(t)
        })
        .collect()
}

#[derive(Serialize)]
struct RouterRecord<'a> {
    #[serde(flatten)]
    report: &'a ttmoe_core::router::RouterReport,
    out: &'a Path,
}

fn train_router_cmd(config: &ExperimentConfig, bank_path: &Path, out: &Path, sink: &mut ReportSink) -> anyhow::Result<()> {
    require_file(bank_path)?;
    let (base, tasks) = setup(config)?;
    let bank = load_bank::<f32>(bank_path, base.config_hash())?;
    let owned: Vec<TaskDataset> = bank_tasks(&bank, &tasks)?.into_iter().cloned().collect();
    let train = build_mixed(&owned, config.mixed.per_task, Split::Train, config.mixed.seed)?;
    let held_out = build_mixed(&owned, None, Split::Validation, config.mixed.seed.wrapping_add(1))?;
    let (router, report) = train_router(&base, &bank, &train, &held_out, &config.router)?;
    save_router(out, &router)?;
    println!(
        "experts {}  params {}  routing accuracy {:.4} (epoch {} of {})",
        report.num_experts, report.trainable_params, report.best_routing_accuracy, report.best_epoch, report.epochs_run
    );
    for (t, acc) in owned.iter().zip(&report.per_task_routing_accuracy) {
        println!("  {:<22} {:.4}", t.name, acc);
    }
    sink.emit("train_router", &RouterRecord { report: &report, out })?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    mode: &'a str,
    task: &'a str,
    accuracy: f64,
    standalone_accuracy: Option<f64>,
    routing_accuracy: Option<f64>,
    samples: usize,
}

fn eval_expert(config: &ExperimentConfig, path: &Path, wanted: &[String], sink: &mut ReportSink) -> anyhow::Result<()> {
    require_file(path)?;
    let (base, tasks) = setup(config)?;
    let expert: ExpertAdapter = load_expert(path, Some(base.config_hash()))?;
    let selected = if wanted.is_empty() {
        vec![tasks
            .iter()
            .position(|t| t.name == expert.task_name)
            .ok_or_else(|| anyhow!("no task named {:?} in this config", expert.task_name))?]
    } else {
        select_tasks(&tasks, wanted)?
    };
    println!("{:<22} {:>8}", "task", "val_acc");
    for i in selected {
        let task = &tasks[i];
        if task.num_classes != expert.num_classes() {
            bail!("{} has {} classes, expert head has {}", task.name, task.num_classes, expert.num_classes());
        }
        let accuracy = evaluate(&base, &expert, task, Split::Validation)?;
        println!("{:<22} {:>8.4}", task.name, accuracy);
        sink.emit(
            "eval",
            &EvalRecord {
                mode: "expert",
                task: &task.name,
                accuracy,
                standalone_accuracy: None,
                routing_accuracy: None,
                samples: task.validation.len(),
            },
        )?;
    }
    Ok(())
}

fn eval_moe(
    config: &ExperimentConfig,
    router_path: &Path,
    bank_path: &Path,
    wanted: &[String],
    sink: &mut ReportSink,
) -> anyhow::Result<()> {
    require_file(router_path)?;
    require_file(bank_path)?;
    let (base, tasks) = setup(config)?;
    let bank = load_bank::<f32>(bank_path, base.config_hash())?;
    let router = load_router::<f32>(router_path)?;
    if router.experts != bank.table() {
        bail!("router was trained for experts {:?}, bank holds {:?}", router.experts, bank.table());
    }
    let ordered = bank_tasks(&bank, &tasks)?;
    let selected = select_tasks(&tasks, wanted)?;
    // eval mode draws no noise; the generator only satisfies the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:<22} {:>8} {:>10} {:>8}", "task", "moe_acc", "standalone", "routing");
    for i in selected {
        let task = &tasks[i];
        let gate = ordered
            .iter()
            .position(|t| t.name == task.name)
            .ok_or_else(|| anyhow!("bank has no expert for {}", task.name))?;
        let (batch, labels) = task.split(Split::Validation);
        let out = moe_forward(&batch, &base, &bank, &router.params, GateMode::Eval, &mut rng)?;
        let preds = out.predictions();
        let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        let routed = out.decisions.iter().filter(|d| d.selected == gate).count();
        let n = labels.len().max(1) as f64;
        let standalone = evaluate(&base, bank.get(gate), task, Split::Validation)?;
        let record = EvalRecord {
            mode: "moe",
            task: &task.name,
            accuracy: hits as f64 / n,
            standalone_accuracy: Some(standalone),
            routing_accuracy: Some(routed as f64 / n),
            samples: labels.len(),
        };
        println!(
            "{:<22} {:>8.4} {:>10.4} {:>8.4}",
            task.name,
            record.accuracy,
            standalone,
            routed as f64 / n
        );
        sink.emit("eval", &record)?;
    }
    Ok(())
}

fn parse_dims(s: &str) -> anyhow::Result<(usize, usize)> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("--dims expects D_INxD_OUT, got {s:?}")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| usage(format!("bad dimension {v:?}")));
    Ok((parse(a)?, parse(b)?))
}

fn parse_factors(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| usage(format!("bad factor {v:?}"))))
        .collect()
}

fn parse_shape(s: &str, rank: usize) -> anyhow::Result<TtShape> {
    let (i, o) = s
        .split_once('|')
        .ok_or_else(|| usage(format!("--shape expects \"IN,...|OUT,...\", got {s:?}")))?;
    Ok(TtShape::new(parse_factors(i)?, parse_factors(o)?, rank))
}

#[derive(Serialize)]
struct BenchHeader<'a> {
    timing: &'a str,
    threads: usize,
}

fn bench(args: &BenchArgs, seed: Option<u64>, sink: &mut ReportSink) -> anyhow::Result<()> {
    let (d_in, d_out) = parse_dims(&args.dims)?;
    let shape = parse_shape(&args.shape, args.rank)?;
    shape.validate(d_in, d_out).map_err(|e| usage(e.to_string()))?;
    let config = BenchConfig {
        reps: args.reps,
        warmup: args.warmup,
        seed: seed.unwrap_or(0),
        ..BenchConfig::default()
    };
    let results =
        bench_contract_vs_reconstruct::<f32>(&shape, &args.batches, &config).map_err(|e| match e {
            Error::Config(m) => usage(m),
            other => other.into(),
        })?;
    sink.emit(
        "bench_header",
        &BenchHeader {
            timing: "monotonic clock per forward call; reconstruction rebuilds the dense delta on every call; warm-up discarded",
            threads: 1,
        },
    )?;
    println!("{d_in}x{d_out}  shape {}  reps {}  warmup {}", args.shape, args.reps, args.warmup);
    println!("{:>6} {:>14} {:>14} {:>9}", "batch", "reconstruct_s", "contract_s", "speedup");
    for r in &results {
        println!(
            "{:>6} {:>14.6} {:>14.6} {:>8.2}x",
            r.batch, r.reconstruct_median_s, r.contract_median_s, r.speedup
        );
        sink.emit("bench", r)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CountRecord<'a> {
    preset: &'a str,
    what: &'a str,
    params: usize,
}

fn count_params(preset: &str, config: &str, experts: Option<usize>, sink: &mut ReportSink) -> anyhow::Result<()> {
    let paper = ModelConfig::paper();
    let mut rows: Vec<(&str, usize)> = Vec::new();
    match preset {
        "paper-tt" => rows.push(("tt-lora adapter", adapter_param_count(&paper, &AdapterSpec::paper_tt())?)),
        "paper-lora" => rows.push(("lora adapter", adapter_param_count(&paper, &AdapterSpec::paper_lora())?)),
        "custom" => {
            let c = load_config(config, None)?;
            rows.push(("adapter", adapter_param_count(&c.model, &c.train.adapter)?));
            if let Some(n) = experts {
                rows.push(("router", router_param_count(c.model.d_model, n)));
            }
        }
        other => match other.strip_prefix("paper-router-").map(str::parse::<usize>) {
            Some(Ok(n)) if n >= 1 => rows.push(("router", router_param_count(paper.d_model, n))),
            _ => {
                return Err(usage(format!(
                    "unknown preset {other:?}; expected paper-tt, paper-lora, paper-router-N or custom"
                )))
            }
        },
    }
    for (what, params) in rows {
        println!("{params}");
        sink.emit("count_params", &CountRecord { preset, what, params })?;
    }
    Ok(())
}
