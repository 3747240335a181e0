//! `gridprobe`: runs the latent causal probing experiment stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gridprobe_core::causal::{umbrella_scm, Intervention};
use gridprobe_core::experiment::{
    check_criteria, CriterionStatus, ExperimentConfig, ExperimentError, Pipeline, Stage,
};
use gridprobe_core::probes::ProbeArchitecture;

#[derive(Parser)]
#[command(
    name = "gridprobe",
    version,
    about = "Latent causal probing on a grid-world navigation language"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training, held-out and auxiliary datasets.
    GenData(Common),
    /// Train the LMs and checkpoint them.
    TrainLm(Common),
    /// Held-out generation accuracy of every LM (trains first if needed).
    EvalGen(Common),
    /// Extract LM representations of the auxiliary datasets.
    Extract(Common),
    /// Train and score probes for every quadrant.
    Probe(Common),
    /// Bootstrap the mediated measurements and baseline checks.
    Mediate(Common),
    /// Write the per-quadrant CSVs and the verdict summary.
    Report(Common),
    /// Run all stages, or only `--stage`.
    Run(RunArgs),
    /// Print the exact indirect effect in the umbrella example.
    DemoUmbrella,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Baseline semantics id; repeat for several.
    #[arg(long = "baseline")]
    baselines: Vec<String>,
    /// Probe architecture; repeat for several.
    #[arg(long = "arch", value_enum)]
    archs: Vec<Arch>,
    /// No progress messages.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Only this stage: gen-data, train-lm, extract, probe-quadrants, mediate or report.
    #[arg(long)]
    stage: Option<String>,
    /// Check the end-to-end criteria afterwards; exit with 4 if one fails.
    #[arg(long)]
    check: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Linear,
    Mlp1,
    Mlp2,
}

impl From<Arch> for ProbeArchitecture {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Linear => ProbeArchitecture::Linear,
            Arch::Mlp1 => ProbeArchitecture::Mlp1,
            Arch::Mlp2 => ProbeArchitecture::Mlp2,
        }
    }
}

fn pipeline(c: &Common) -> Result<Pipeline, ExperimentError> {
    let config = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let archs: Vec<ProbeArchitecture> = c.archs.iter().map(|&a| a.into()).collect();
    let config = config.with_overrides(c.seed, c.out.clone(), &c.baselines, &archs);
    Ok(Pipeline::new(config)?.quiet(c.quiet))
}

fn run_stage(c: &Common, stage: Stage) -> Result<(), ExperimentError> {
    let p = pipeline(c)?;
    let outcome = p.run_stage(stage)?;
    println!("{stage}: {outcome:?}");
    Ok(())
}

fn eval_gen(c: &Common) -> Result<(), ExperimentError> {
    let p = pipeline(c)?;
    p.run_stage(Stage::TrainLm)?;
    for g in p.generation()? {
        println!(
            "{} (random programs {:.4}, threshold {:.4}):",
            g.semantics, g.random_baseline, g.threshold
        );
        for point in &g.checkpoints {
            println!("  step {:>8}  {:.4}", point.step, point.accuracy);
        }
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<u8, ExperimentError> {
    let p = pipeline(&args.common)?;
    match &args.stage {
        Some(name) => {
            let stage = Stage::from_name(name)
                .ok_or_else(|| ExperimentError::Config(format!("unknown stage `{name}`")))?;
            let outcome = p.run_stage(stage)?;
            println!("{stage}: {outcome:?}");
        }
        None => {
            for (stage, outcome) in p.run_all()? {
                println!("{stage}: {outcome:?}");
            }
        }
    }
    if !args.check {
        return Ok(0);
    }
    let mut failed = false;
    for c in check_criteria(&p.summary()?) {
        let tag = match c.status {
            CriterionStatus::Pass => "PASS",
            CriterionStatus::Fail => "FAIL",
            CriterionStatus::Warn => "WARN",
            CriterionStatus::NotApplicable => "N/A",
        };
        failed |= c.status == CriterionStatus::Fail;
        println!(
            "[{tag}] criterion {}: {} ({})",
            c.criterion, c.description, c.detail
        );
    }
    Ok(if failed { 4 } else { 0 })
}

fn demo_umbrella() -> Result<(), gridprobe_core::causal::CausalError> {
    let scm = umbrella_scm();
    let rain = [("Weather", "rain")];
    let observed = scm.exact_expectation("Umbrella", &rain, &[])?;
    let cut = Intervention::new("Forecast", "sun");
    let intervened = scm.exact_expectation("Umbrella", &rain, std::slice::from_ref(&cut))?;
    let nie = scm.necessary_indirect_effect("Umbrella", &rain, &cut)?;
    println!("Weather -> Forecast -> Umbrella <- LateStart");
    println!("P(Forecast = Weather) = 0.9, P(LateStart) = 0.3, Umbrella = [Forecast = rain and not LateStart]");
    println!("E[Umbrella | Weather = rain]                    = {observed:.6}");
    println!("E[Umbrella | Weather = rain, do(Forecast = sun)] = {intervened:.6}");
    println!("indirect effect through Forecast                = {nie:.6}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => run_stage(c, Stage::GenData).map(|_| 0),
        Command::TrainLm(c) => run_stage(c, Stage::TrainLm).map(|_| 0),
        Command::EvalGen(c) => eval_gen(c).map(|_| 0),
        Command::Extract(c) => run_stage(c, Stage::Extract).map(|_| 0),
        Command::Probe(c) => run_stage(c, Stage::ProbeQuadrants).map(|_| 0),
        Command::Mediate(c) => run_stage(c, Stage::Mediate).map(|_| 0),
        Command::Report(c) => run_stage(c, Stage::Report).map(|_| 0),
        Command::Run(args) => run(args),
        Command::DemoUmbrella => {
            return match demo_umbrella() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(3)
                }
            }
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
