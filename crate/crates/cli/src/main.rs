//! `adaswitch`: step-level local/cloud collaborative inference from the
//! command line.
//!
//! Subcommands mirror the pipeline: `compile-data` turns gold rationales
//! into trajectories, `examine` runs the collaborative examination,
//! `export-train` writes the loss-masked training files, `infer` runs a
//! dataset under a switching policy, `sweep` scans activation thresholds,
//! `simulate` generates a synthetic benchmark and runs the standard mode
//! comparison, and `report` folds run summaries into CSV/JSON/SVG.
//!
//! Exit code 0 covers completed batches even when individual records
//! failed; configuration problems exit nonzero.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use adaswitch_core::agent::{spawn_agent, AgentEnv};
use adaswitch_core::config::Config;
use adaswitch_core::exam::{
    compile_rationale, compile_with_annotator, emit_training_sets, exam_report_rows, read_dataset,
    run_examination_batch, write_exam_report, CompileFlag, DatasetRecord, ExamConfig,
};
use adaswitch_core::metrics::TaskKind;
use adaswitch_core::orchestrator::{
    run_batch, write_run_results, BatchOptions, InferenceConfig, InferenceMode, RunContext,
};
use adaswitch_core::policy::PolicyConfig;
use adaswitch_core::report::{
    read_summary, summarize, sweep_threshold, write_report, write_summary, write_sweep_csv,
    write_sweep_json, MethodSummary, ReportFormat,
};
use adaswitch_core::synth::{dataset_records, gen_synthetic_tasks, SyntheticTaskSet};
use adaswitch_core::trajectory::{read_trajectories, write_trajectories, Trajectory};

#[derive(Parser)]
#[command(name = "adaswitch", version, about = "Local/cloud collaborative inference harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile gold rationales into interaction trajectories.
    CompileData(CompileDataArgs),
    /// Run the collaborative examination over a dataset.
    Examine(ExamineArgs),
    /// Export loss-masked training files from gold and revised trajectories.
    ExportTrain(ExportTrainArgs),
    /// Run inference over a dataset under a switching policy.
    Infer(InferArgs),
    /// Sweep the activation threshold and tabulate accuracy against cost.
    Sweep(SweepArgs),
    /// Generate a synthetic benchmark and run the standard mode comparison.
    Simulate(SimulateArgs),
    /// Fold run summaries into a report.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; per-record seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Process only the first N dataset records.
    #[arg(long)]
    limit: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompileDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input dataset JSONL: {question_id, question, rationale, answer}.
    #[arg(long)]
    dataset: PathBuf,
    /// Profile name of an agent-backed annotator replacing the
    /// deterministic compiler.
    #[arg(long)]
    annotator: Option<String>,
}

#[derive(Args)]
struct ExamineArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Local agent profile name.
    #[arg(long)]
    local: String,
    /// Cloud agent profile name.
    #[arg(long)]
    cloud: String,
    /// Trajectories sampled per question (1..=4).
    #[arg(long, default_value_t = 4)]
    samples: u32,
    /// Oracle mode.
    #[arg(long, value_enum, default_value_t = GradeArg::Math)]
    oracle_mode: GradeArg,
    /// Local sampling temperature during the exam.
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    /// Local top-k during the exam.
    #[arg(long)]
    top_k: Option<u32>,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct ExportTrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Gold trajectories JSONL (from compile-data).
    #[arg(long)]
    gold: PathBuf,
    /// Revised trajectories JSONL (from examine).
    #[arg(long)]
    revised: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Inference mode.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Escalation policy, e.g. `adaptive:p=0.5`, `random:p=0.3,seed=17`,
    /// `sequential:k=3`, `never`, `always`.
    #[arg(long, default_value = "adaptive:p=0.5")]
    policy: String,
    /// Local agent profile name.
    #[arg(long)]
    local: String,
    /// Cloud agent profile name (required for cloud and adaswitch modes).
    #[arg(long)]
    cloud: Option<String>,
    /// Answer grading mode.
    #[arg(long, value_enum, default_value_t = GradeArg::Math)]
    grade: GradeArg,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    local: String,
    #[arg(long)]
    cloud: String,
    /// Comma-separated activation thresholds.
    #[arg(long, default_value = "0.1,0.3,0.5,0.7,0.9")]
    thresholds: String,
    #[arg(long, value_enum, default_value_t = GradeArg::Math)]
    grade: GradeArg,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of synthetic tasks.
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Chain steps per task.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Bound on chain values.
    #[arg(long, default_value_t = 10_000)]
    value_range: i64,
    /// Activation threshold for the adaswitch arm.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Generate the benchmark files without running the comparison.
    #[arg(long)]
    generate_only: bool,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated summary.json paths from previous runs.
    #[arg(long)]
    inputs: String,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Local,
    Cloud,
    SelfReflection,
    Adaswitch,
}

impl From<ModeArg> for InferenceMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Local => InferenceMode::LocalOnly,
            ModeArg::Cloud => InferenceMode::CloudOnly,
            ModeArg::SelfReflection => InferenceMode::SelfReflection,
            ModeArg::Adaswitch => InferenceMode::AdaSwitch,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GradeArg {
    Math,
    Text,
}

impl From<GradeArg> for TaskKind {
    fn from(grade: GradeArg) -> Self {
        match grade {
            GradeArg::Math => TaskKind::Math,
            GradeArg::Text => TaskKind::Text,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    SvgPlot,
}

impl From<FormatArg> for ReportFormat {
    fn from(format: FormatArg) -> Self {
        match format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::SvgPlot => ReportFormat::SvgPlot,
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::CompileData(args) => compile_data(args),
        Command::Examine(args) => examine(args),
        Command::ExportTrain(args) => export_train(args),
        Command::Infer(args) => infer(args),
        Command::Sweep(args) => sweep(args),
        Command::Simulate(args) => simulate(args),
        Command::Report(args) => report(args),
    }
}

fn load_config(common: &CommonArgs) -> Result<Config> {
    let path = common
        .config
        .as_ref()
        .context("this subcommand requires --config")?;
    Ok(Config::load(path)?)
}

fn load_records(path: &Path, limit: Option<usize>) -> Result<Vec<DatasetRecord>> {
    let mut records = read_dataset(path)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    Ok(records)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn compile_data(args: CompileDataArgs) -> Result<()> {
    ensure_out(&args.common.out)?;
    let records = load_records(&args.dataset, args.common.limit)?;
    // Optional agent-backed annotator; falls back to the deterministic
    // compiler per record when the annotator's output fails validation.
    let annotator_setup = match &args.annotator {
        Some(name) => {
            let config = load_config(&args.common)?;
            let profile = config.profile(name)?.clone();
            let env = AgentEnv::for_profiles(&[&profile])?;
            Some((profile, env, config.defaults.max_steps))
        }
        None => None,
    };
    let mut trajectories = Vec::with_capacity(records.len());
    let mut flagged = Vec::new();
    for record in &records {
        if let Some((profile, env, max_steps)) = &annotator_setup {
            let seed =
                adaswitch_core::orchestrator::record_seed(args.common.seed, &record.question_id);
            let annotated = spawn_agent(profile, env, &record.question_id, seed)
                .map_err(anyhow::Error::from)
                .and_then(|mut agent| {
                    compile_with_annotator(record, agent.as_mut(), *max_steps)
                        .map_err(anyhow::Error::from)
                });
            match annotated {
                Ok(compiled) => {
                    trajectories.push(compiled.trajectory);
                    continue;
                }
                Err(e) => {
                    log::warn!(
                        "{}: annotator failed ({e}); using the deterministic compiler",
                        record.question_id
                    );
                }
            }
        }
        let compiled = compile_rationale(record);
        if compiled.is_flagged() {
            log::warn!(
                "{}: compile flags {:?}",
                record.question_id,
                compiled.flags
            );
            flagged.push((record.question_id.clone(), compiled.flags.clone()));
        }
        trajectories.push(compiled.trajectory);
    }
    let out_path = args.common.out.join("gold_trajectories.jsonl");
    write_trajectories(&out_path, &trajectories)?;
    write_compile_flags(&args.common.out.join("compile_flags.jsonl"), &flagged)?;
    println!(
        "compiled {} trajectories ({} flagged) -> {}",
        trajectories.len(),
        flagged.len(),
        out_path.display()
    );
    Ok(())
}

fn write_compile_flags(path: &Path, flagged: &[(String, Vec<CompileFlag>)]) -> Result<()> {
    use std::io::Write as _;
    let mut file = std::fs::File::create(path)?;
    for (question_id, flags) in flagged {
        let line = serde_json::json!({"question_id": question_id, "flags": flags});
        writeln!(file, "{line}")?;
    }
    Ok(())
}

fn examine(args: ExamineArgs) -> Result<()> {
    ensure_out(&args.common.out)?;
    let config = load_config(&args.common)?;
    let records = load_records(&args.dataset, args.common.limit)?;
    let local = config.profile(&args.local)?;
    let cloud = config.profile(&args.cloud)?;
    let env = AgentEnv::for_profiles(&[local, cloud])?;
    let tools = config.tool_context()?;
    let mut sampling = local.sampling.clone();
    sampling.temperature = args.temperature;
    if args.top_k.is_some() {
        sampling.top_k = args.top_k;
    }
    let exam = ExamConfig {
        samples_per_question: args.samples,
        sampling,
        mode: args.oracle_mode.into(),
        max_steps: config.defaults.max_steps,
        max_retries: config.defaults.retries,
    };
    let outcomes = run_examination_batch(
        &records,
        local,
        cloud,
        &exam,
        &env,
        &tools,
        None,
        args.common.seed,
        args.parallelism,
    )?;

    let gold: Vec<Trajectory> = outcomes.iter().map(|o| o.gold.clone()).collect();
    let revised: Vec<Trajectory> = outcomes
        .iter()
        .flat_map(|o| o.retained_trajectories().cloned())
        .collect();
    let rows: Vec<_> = outcomes.iter().flat_map(exam_report_rows).collect();
    write_trajectories(&args.common.out.join("gold_trajectories.jsonl"), &gold)?;
    write_trajectories(&args.common.out.join("revised_trajectories.jsonl"), &revised)?;
    write_exam_report(&args.common.out.join("exam_report.jsonl"), &rows)?;
    let retained = rows.iter().filter(|r| r.retained).count();
    println!(
        "examined {} questions: {} samples, {} retained -> {}",
        outcomes.len(),
        rows.len(),
        retained,
        args.common.out.display()
    );
    Ok(())
}

fn export_train(args: ExportTrainArgs) -> Result<()> {
    ensure_out(&args.common.out)?;
    let gold = read_trajectories(&args.gold)?;
    let revised = read_trajectories(&args.revised)?;
    let (self_practicing, reflective) = emit_training_sets(&gold, &revised, &args.common.out)?;
    println!(
        "wrote {} gold examples -> {}",
        gold.len(),
        self_practicing.display()
    );
    println!(
        "wrote {} revised examples -> {}",
        revised.len(),
        reflective.display()
    );
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    ensure_out(&args.common.out)?;
    let config = load_config(&args.common)?;
    let records = load_records(&args.dataset, args.common.limit)?;
    let mode: InferenceMode = args.mode.into();
    let policy: PolicyConfig = args
        .policy
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid --policy: {e}"))?;
    let local = config.profile(&args.local)?;
    let cloud = match &args.cloud {
        Some(name) => Some(config.profile(name)?),
        None => None,
    };
    let mut profiles = vec![local];
    profiles.extend(cloud);
    let env = AgentEnv::for_profiles(&profiles)?;
    let tools = config.tool_context()?;
    let cfg = InferenceConfig {
        mode,
        policy: policy.clone(),
        max_steps: config.defaults.max_steps,
        max_self_retries: config.defaults.retries,
        grade_mode: args.grade.into(),
    };
    let rc = RunContext {
        env: &env,
        local,
        cloud,
        base_tools: &tools,
        cfg: &cfg,
    };
    let batch = run_batch(
        &records,
        rc,
        BatchOptions {
            parallelism: args.parallelism,
            global_seed: args.common.seed,
        },
    )?;
    write_run_results(&args.common.out.join("results.jsonl"), &batch.results)?;
    let summary = summarize(mode, &policy, &batch.aggregate, args.common.seed);
    write_summary(&args.common.out.join("summary.json"), &summary)?;
    println!(
        "{}: accuracy {:.4} mean_flops {:.3e} escalation_rate {:.4} failures {} -> {}",
        summary.method,
        summary.accuracy,
        summary.mean_flops,
        summary.escalation_rate,
        summary.failures,
        args.common.out.display()
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    ensure_out(&args.common.out)?;
    let config = load_config(&args.common)?;
    let records = load_records(&args.dataset, args.common.limit)?;
    let thresholds: Vec<f64> = args
        .thresholds
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("invalid --thresholds")?;
    let local = config.profile(&args.local)?;
    let cloud = config.profile(&args.cloud)?;
    let env = AgentEnv::for_profiles(&[local, cloud])?;
    let tools = config.tool_context()?;
    let template = InferenceConfig {
        mode: InferenceMode::AdaSwitch,
        policy: PolicyConfig::Adaptive { p: 0.5 },
        max_steps: config.defaults.max_steps,
        max_self_retries: config.defaults.retries,
        grade_mode: args.grade.into(),
    };
    let rows = sweep_threshold(
        &records,
        &env,
        local,
        cloud,
        &tools,
        &thresholds,
        &template,
        BatchOptions {
            parallelism: args.parallelism,
            global_seed: args.common.seed,
        },
    )?;
    write_sweep_csv(&args.common.out.join("sweep.csv"), &rows)?;
    write_sweep_json(&args.common.out.join("sweep.json"), &rows)?;
    for row in &rows {
        println!(
            "p={} accuracy {:.4} mean_cost {:.3e} escalation_rate {:.4}",
            row.p, row.accuracy, row.mean_cost, row.escalation_rate
        );
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    ensure_out(&args.common.out)?;
    let tasks = gen_synthetic_tasks(args.count, args.steps, args.value_range, args.common.seed);
    let records = dataset_records(&tasks);
    let task_set = SyntheticTaskSet::from_tasks(tasks);
    let tasks_path = args.common.out.join("tasks.jsonl");
    task_set.save(&tasks_path)?;
    adaswitch_core::exam::write_dataset(&args.common.out.join("dataset.jsonl"), &records)?;

    let config = match &args.common.config {
        Some(path) => Config::load(path)?,
        None => {
            let absolute = std::fs::canonicalize(&tasks_path).unwrap_or(tasks_path.clone());
            let config = Config::default_synthetic(Some(absolute));
            config.save(&args.common.out.join("config.json"))?;
            config
        }
    };
    println!(
        "generated {} tasks of {} steps -> {}",
        args.count,
        args.steps,
        tasks_path.display()
    );
    if args.generate_only {
        return Ok(());
    }

    let local = config.profile("local")?;
    let cloud = config.profile("cloud")?;
    let env = AgentEnv::for_profiles(&[local, cloud])?.with_tasks(task_set);
    let tools = config.tool_context()?;
    let arms = [
        (InferenceMode::LocalOnly, PolicyConfig::Never, None),
        (
            InferenceMode::AdaSwitch,
            PolicyConfig::Adaptive { p: args.p },
            Some(cloud),
        ),
        (InferenceMode::CloudOnly, PolicyConfig::Never, Some(cloud)),
    ];
    let mut summaries = Vec::new();
    for (mode, policy, cloud_profile) in arms {
        let cfg = InferenceConfig {
            mode,
            policy: policy.clone(),
            max_steps: config.defaults.max_steps,
            max_self_retries: config.defaults.retries,
            grade_mode: TaskKind::Math,
        };
        let rc = RunContext {
            env: &env,
            local,
            cloud: cloud_profile,
            base_tools: &tools,
            cfg: &cfg,
        };
        let batch = run_batch(
            &records,
            rc,
            BatchOptions {
                parallelism: args.parallelism,
                global_seed: args.common.seed,
            },
        )?;
        let summary = summarize(mode, &policy, &batch.aggregate, args.common.seed);
        let arm_dir = args.common.out.join(&summary.method);
        ensure_out(&arm_dir)?;
        write_run_results(&arm_dir.join("results.jsonl"), &batch.results)?;
        write_summary(&arm_dir.join("summary.json"), &summary)?;
        println!(
            "{}: accuracy {:.4} mean_flops {:.3e} escalation_rate {:.4}",
            summary.method, summary.accuracy, summary.mean_flops, summary.escalation_rate
        );
        summaries.push(summary);
    }
    let csv = write_report(&args.common.out, &summaries, ReportFormat::Csv)?;
    write_report(&args.common.out, &summaries, ReportFormat::SvgPlot)?;
    println!("report -> {}", csv.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    ensure_out(&args.common.out)?;
    let summaries: Vec<MethodSummary> = args
        .inputs
        .split(',')
        .map(|p| read_summary(Path::new(p.trim())))
        .collect::<Result<_, _>>()?;
    let path = write_report(&args.common.out, &summaries, args.format.into())?;
    println!("report -> {}", path.display());
    Ok(())
}
