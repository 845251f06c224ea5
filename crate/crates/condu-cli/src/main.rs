//! `condu`: command-line surface for the fusion library.
//!
//! Exit codes: 0 on success, 1 on a domain error (the error name goes to
//! stderr), 2 on a usage error. Artifacts are only written to paths given
//! by flags; report-style commands print to stdout when `--out` is
//! omitted.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use condu::convergence_lab::iterate_until;
use condu::fusion_core::{decouple, run_session, DeltaModel, FusionError, SessionState};
use condu::routing::route;
use condu::sim_harness::{sweep_k, BenchmarkConfig, TrainMode};
use condu::tensor_store::{Container, Dtype, FlatVector};
use condu::triggers::storage_report;

#[derive(Parser)]
#[command(
    name = "condu",
    version,
    about = "Continual model fusion: one unified delta model plus per-task triggers and prototype routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    R32,
    R64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Dtype {
        match d {
            DtypeArg::R32 => Dtype::R32,
            DtypeArg::R64 => Dtype::R64,
        }
    }
}

/// Shared flags for the synthetic-benchmark commands.
#[derive(Args)]
struct SimFlags {
    /// Experiment seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of tasks (sessions).
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Classes per task.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Training mode: full or lora:<r>.
    #[arg(long, default_value = "full")]
    mode: String,
    /// Top-K tasks aggregated on the task-agnostic path.
    #[arg(long, default_value_t = 4)]
    k: usize,
}

impl SimFlags {
    fn to_config(&self) -> Result<BenchmarkConfig, CliError> {
        if self.k == 0 {
            return Err(CliError::new("BadConfig", "K must be at least 1"));
        }
        Ok(BenchmarkConfig {
            seed: self.seed,
            task_count: self.tasks,
            feature_dim: self.dim,
            class_count: self.classes,
            mode: TrainMode::parse(&self.mode).map_err(CliError::from_harness)?,
            k: self.k,
            ..Default::default()
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fold delta models into a session state (unified delta + triggers).
    Unify {
        /// Base model container the deltas are offsets of.
        #[arg(long)]
        base: PathBuf,
        /// Delta containers, in task order (repeatable).
        #[arg(long = "delta", required = true)]
        delta: Vec<PathBuf>,
        /// Output session-state container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct one task's delta model from a session state.
    Decouple {
        #[arg(long)]
        state: PathBuf,
        /// Task number, 1-based.
        #[arg(long)]
        task: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Advance a session state with one new delta model.
    Session {
        /// Previous session state; omit for the first session.
        #[arg(long, conflicts_with = "base")]
        state: Option<PathBuf>,
        /// Base model container; required for the first session.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fixed-set iteration over delta models and report the trace.
    Iterate {
        #[arg(long = "delta", required = true)]
        delta: Vec<PathBuf>,
        /// Stop once the mean L1 step difference drops below this.
        #[arg(long, default_value_t = 1e-10)]
        eps: f64,
        #[arg(long = "max-steps", default_value_t = 200)]
        max_steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Route query feature vectors (CSV rows on stdin) against a state.
    Route {
        /// Session state with prototype sets.
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Run the synthetic continual-learning benchmark.
    Simulate {
        #[command(flatten)]
        sim: SimFlags,
        /// Write the accuracy matrix CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also save the final session state here.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Re-evaluate the routing phase for every K from 1 to the task count.
    SweepK {
        #[command(flatten)]
        sim: SimFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Compare dense per-task storage against unified-plus-trigger storage.
    StorageReport {
        /// Model parameter count.
        #[arg(long)]
        params: u64,
        #[arg(long, value_enum)]
        dtype: DtypeArg,
        #[arg(long)]
        tasks: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Print a summary of any container file.
    Inspect {
        /// Container file (.cdt).
        file: PathBuf,
    },
}

struct CliError {
    name: &'static str,
    message: String,
}

impl CliError {
    fn new(name: &'static str, message: impl Into<String>) -> Self {
        CliError {
            name,
            message: message.into(),
        }
    }

    fn from_store(e: condu::tensor_store::StoreError) -> Self {
        CliError::new(e.name(), e.to_string())
    }

    fn from_fusion(e: FusionError) -> Self {
        CliError::new(e.name(), e.to_string())
    }

    fn from_routing(e: condu::routing::RoutingError) -> Self {
        CliError::new(e.name(), e.to_string())
    }

    fn from_harness(e: condu::sim_harness::HarnessError) -> Self {
        CliError::new(e.name(), e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.name, e.message);
            ExitCode::from(1)
        }
    }
}

fn load_base(path: &Path) -> Result<FlatVector, CliError> {
    match Container::load(path).map_err(CliError::from_store)? {
        Container::BaseModel(v) => Ok(v),
        other => Err(CliError::new(
            "WrongKind",
            format!(
                "{} holds a {} container, expected base-model",
                path.display(),
                other.kind().as_str()
            ),
        )),
    }
}

fn load_delta(path: &Path, task_id: u32) -> Result<DeltaModel, CliError> {
    match Container::load(path).map_err(CliError::from_store)? {
        Container::DeltaModel(vec) => Ok(DeltaModel { vec, task_id }),
        other => Err(CliError::new(
            "WrongKind",
            format!(
                "{} holds a {} container, expected delta-model",
                path.display(),
                other.kind().as_str()
            ),
        )),
    }
}

fn load_state(path: &Path) -> Result<SessionState, CliError> {
    match Container::load(path).map_err(CliError::from_store)? {
        Container::SessionState(s) => Ok(s),
        other => Err(CliError::new(
            "WrongKind",
            format!(
                "{} holds a {} container, expected session-state",
                path.display(),
                other.kind().as_str()
            ),
        )),
    }
}

/// Writes to the given path, or stdout when no path is given.
fn emit(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::new("IoError", format!("{}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Unify { base, delta, out } => {
            let base = load_base(&base)?;
            let base_hash = base.content_hash();
            let mut state: Option<SessionState> = None;
            for (i, path) in delta.iter().enumerate() {
                let d = load_delta(path, i as u32)?;
                if !d.vec.same_layout(&base) {
                    return Err(CliError::from_fusion(FusionError::LayoutMismatch));
                }
                state = Some(
                    run_session(state.as_ref(), &d, None, base_hash)
                        .map_err(CliError::from_fusion)?,
                );
            }
            let state = state.expect("at least one delta is required");
            Container::SessionState(state)
                .save(&out)
                .map_err(CliError::from_store)
        }
        Command::Decouple { state, task, out } => {
            let state = load_state(&state)?;
            if task == 0 || task as usize > state.task_count() {
                return Err(CliError::new(
                    "UnknownTask",
                    format!("task {task} not in 1..={}", state.task_count()),
                ));
            }
            let delta = decouple(&state.unified, &state.triggers[task as usize - 1])
                .map_err(CliError::from_fusion)?;
            Container::DeltaModel(delta.vec)
                .save(&out)
                .map_err(CliError::from_store)
        }
        Command::Session {
            state,
            base,
            delta,
            out,
        } => {
            let (prev, base_hash) = match (state, base) {
                (Some(path), _) => {
                    let prev = load_state(&path)?;
                    let hash = prev.base_hash;
                    (Some(prev), hash)
                }
                (None, Some(path)) => (None, load_base(&path)?.content_hash()),
                (None, None) => {
                    return Err(CliError::new(
                        "BadConfig",
                        "either --state (to advance) or --base (first session) is required",
                    ))
                }
            };
            let task_id = prev.as_ref().map(|s| s.task_count() as u32).unwrap_or(0);
            let d = load_delta(&delta, task_id)?;
            let next =
                run_session(prev.as_ref(), &d, None, base_hash).map_err(CliError::from_fusion)?;
            Container::SessionState(next)
                .save(&out)
                .map_err(CliError::from_store)
        }
        Command::Iterate {
            delta,
            eps,
            max_steps,
            out,
            report,
        } => {
            if eps <= 0.0 {
                return Err(CliError::new("BadConfig", "eps must be positive"));
            }
            if max_steps == 0 {
                return Err(CliError::new("BadConfig", "max-steps must be at least 1"));
            }
            let deltas: Vec<DeltaModel> = delta
                .iter()
                .enumerate()
                .map(|(i, p)| load_delta(p, i as u32))
                .collect::<Result<_, _>>()?;
            let (_, trace) =
                iterate_until(&deltas, eps, max_steps).map_err(CliError::from_fusion)?;
            let content = match report {
                ReportFormat::Csv => trace.to_csv(),
                ReportFormat::Text => trace.to_text(),
            };
            emit(out.as_deref(), &content)
        }
        Command::Route {
            state,
            k,
            out,
            report,
        } => {
            if k == 0 {
                return Err(CliError::new("BadConfig", "K must be at least 1"));
            }
            let state = load_state(&state)?;
            if state.prototypes.is_empty() {
                return Err(CliError::new(
                    "BadConfig",
                    "state carries no prototype sets; routing needs a state built with prototypes",
                ));
            }
            let mut input = String::new();
            std::io::stdin()
                .read_to_string(&mut input)
                .map_err(|e| CliError::new("IoError", e.to_string()))?;
            let mut content = String::new();
            if matches!(report, ReportFormat::Csv) {
                content.push_str("query,selected,best_sims\n");
            }
            for (idx, line) in input.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let feature: Vec<f64> = line
                    .split(',')
                    .map(|f| {
                        f.trim().parse::<f64>().map_err(|_| {
                            CliError::new(
                                "BadConfig",
                                format!("query {}: '{f}' is not a number", idx + 1),
                            )
                        })
                    })
                    .collect::<Result<_, _>>()?;
                let decision =
                    route(&feature, &state.prototypes, k).map_err(CliError::from_routing)?;
                let selected: Vec<String> = decision
                    .selected_tasks
                    .iter()
                    .map(|t| (t + 1).to_string())
                    .collect();
                match report {
                    ReportFormat::Csv => {
                        let sims: Vec<String> = decision
                            .per_task_best_sim
                            .iter()
                            .map(|s| s.to_string())
                            .collect();
                        content.push_str(&format!(
                            "{},{},{}\n",
                            idx + 1,
                            selected.join(";"),
                            sims.join(";")
                        ));
                    }
                    ReportFormat::Text => {
                        content.push_str(&format!(
                            "query {:>4}: tasks [{}]  best sims [{}]\n",
                            idx + 1,
                            selected.join(", "),
                            decision
                                .per_task_best_sim
                                .iter()
                                .map(|s| format!("{s:.4}"))
                                .collect::<Vec<_>>()
                                .join(", ")
                        ));
                    }
                }
            }
            emit(out.as_deref(), &content)
        }
        Command::Simulate {
            sim,
            out,
            state,
            report,
        } => {
            let config = sim.to_config()?;
            let tasks = config.gen_tasks().map_err(CliError::from_harness)?;
            let result = condu::sim_harness::run_benchmark(&tasks, &config)
                .map_err(CliError::from_harness)?;
            if let Some(path) = &out {
                emit(Some(path), &result.matrix.to_csv())?;
            }
            if let Some(path) = &state {
                Container::SessionState(result.state.clone())
                    .save(path)
                    .map_err(CliError::from_store)?;
            }
            let summary = match report {
                ReportFormat::Text => result.metrics.to_text(),
                ReportFormat::Csv => {
                    let transfer = result
                        .metrics
                        .transfer
                        .map(|t| t.to_string())
                        .unwrap_or_default();
                    format!(
                        "metric,value\ntransfer,{transfer}\naverage,{}\nlast,{}\ntask_agnostic,{}\nzero_shot,{}\n",
                        result.metrics.average,
                        result.metrics.last,
                        result.metrics.task_agnostic,
                        result.metrics.zero_shot
                    )
                }
            };
            print!("{summary}");
            Ok(())
        }
        Command::SweepK { sim, out, report } => {
            let config = sim.to_config()?;
            let tasks = config.gen_tasks().map_err(CliError::from_harness)?;
            let k_values: Vec<usize> = (1..=config.task_count).collect();
            let (table, _) = sweep_k(&tasks, &config, &k_values).map_err(CliError::from_harness)?;
            let content = match report {
                ReportFormat::Csv => table.to_csv(),
                ReportFormat::Text => table.to_text(),
            };
            emit(out.as_deref(), &content)
        }
        Command::StorageReport {
            params,
            dtype,
            tasks,
            out,
            report,
        } => {
            if params == 0 || tasks == 0 {
                return Err(CliError::new(
                    "BadConfig",
                    "params and tasks must be positive",
                ));
            }
            let r = storage_report(params, dtype.into(), tasks);
            let content = match report {
                ReportFormat::Csv => r.to_csv(),
                ReportFormat::Text => r.to_string(),
            };
            emit(out.as_deref(), &content)
        }
        Command::Inspect { file } => {
            let container = Container::load(&file).map_err(CliError::from_store)?;
            print!("{}", describe(&container));
            Ok(())
        }
    }
}

fn describe(container: &Container) -> String {
    use std::fmt::Write as _;
    let mut out = format!("kind: {}\n", container.kind().as_str());
    let describe_vec = |out: &mut String, v: &FlatVector| {
        let dtype = match v.dtype() {
            Dtype::R32 => "r32",
            Dtype::R64 => "r64",
        };
        writeln!(out, "dtype: {dtype}, elements: {}", v.len()).unwrap();
        for e in v.layout().entries() {
            writeln!(
                out,
                "  tensor {} dims {:?} offset {}",
                e.name, e.dims, e.offset
            )
            .unwrap();
        }
    };
    match container {
        Container::BaseModel(v) | Container::DeltaModel(v) => describe_vec(&mut out, v),
        Container::SessionState(s) => {
            writeln!(out, "tasks: {}", s.task_count()).unwrap();
            let hash: String = s.base_hash[..8]
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            writeln!(out, "base hash: {hash}..").unwrap();
            describe_vec(&mut out, &s.unified.vec);
            for t in &s.triggers {
                writeln!(
                    out,
                    "  trigger task {}: lambda {:.6}, mask popcount {}/{}",
                    t.task_id + 1,
                    t.lambda,
                    t.mask.popcount(),
                    t.mask.bit_len()
                )
                .unwrap();
            }
            if s.prototypes.is_empty() {
                writeln!(out, "prototypes: none (fusion-only state)").unwrap();
            }
            for p in &s.prototypes {
                writeln!(
                    out,
                    "  prototypes task {}: {} categories, dim {}",
                    p.task_id + 1,
                    p.prototypes.len(),
                    p.feature_dim()
                )
                .unwrap();
            }
        }
        Container::PrototypeBundle(sets) => {
            writeln!(out, "prototype sets: {}", sets.len()).unwrap();
            for p in sets {
                writeln!(
                    out,
                    "  task {}: {} categories, dim {}",
                    p.task_id + 1,
                    p.prototypes.len(),
                    p.feature_dim()
                )
                .unwrap();
            }
        }
    }
    out
}
