use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gmtrack::affinity::build_affinity;
use gmtrack::diffmatch::gm_forward_with;
use gmtrack::gcn::{read_params, write_params};
use gmtrack::graphkit::{Bbox, ViewGraph};
use gmtrack::qpsolve::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use gmtrack::tracker::{run_tracker, Solver, TrackerConfig};
use gmtrack_bench::features::{read_features, rows_f64};
use gmtrack_bench::gstbench::{run_gst_bench, GstBenchConfig, TimingRow};
use gmtrack_bench::metrics::{evaluate, Metrics};
use gmtrack_bench::mot::{format_mot, read_mot, trajectory_records};
use gmtrack_bench::scenario::{detections_by_frame, gen_scenario, ScenarioConfig};
use gmtrack_bench::toy::{train_toy, ToyConfig};
use gmtrack_bench::{BenchError, Result};

#[derive(Parser)]
#[command(name = "gmtrack", version, about = "Graph-matching multi-object tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track detections from files or a generated scenario; writes MOT results.
    Track(TrackArgs),
    /// Toy end-to-end training; writes a checkpoint and the loss curve.
    Train(TrainArgs),
    /// Solve one matching instance between two feature files; writes the score map.
    Solve(SolveArgs),
    /// Time GST against the interior-point solver on random gated instances.
    BenchGst(BenchArgs),
    /// Generate a synthetic scenario (gt.txt, det.txt, det.feat).
    Gen(GenArgs),
    /// Score tracking results against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Qp,
    Gst,
}

#[derive(Args)]
struct ScenarioSource {
    /// Preset name (no-noise, crossing, occlusion) or a key-value config file.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// MOT detection file (used with --features).
    #[arg(long, conflicts_with = "scenario", requires = "features")]
    detections: Option<PathBuf>,
    /// GMFEAT01 file, one row per detection line.
    #[arg(long, requires = "detections")]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SolverArg::Qp)]
    solver: SolverArg,
    #[arg(long, default_value_t = 0.6)]
    sigma: f64,
    #[arg(long, default_value_t = gmtrack::tracker::CHI2_95_4DOF)]
    kappa: f64,
    #[arg(long, default_value_t = 100)]
    max_age: u32,
    /// Use box overlap in the GCN cross weights.
    #[arg(long)]
    geo: bool,
    #[arg(long)]
    interpolate: bool,
    /// Match on vertex affinities only.
    #[arg(long)]
    bipartite: bool,
    /// GMPARAM1 checkpoint for the GCN.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = gmtrack::diffmatch::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value = "params.bin")]
    out: PathBuf,
    #[arg(long, default_value = "loss.csv")]
    loss_csv: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    det_features: PathBuf,
    #[arg(long)]
    trk_features: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 40)]
    n: usize,
    #[arg(long, default_value_t = 4.0)]
    avg_component: f64,
    #[arg(long, default_value_t = 3)]
    instances: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    source: ScenarioSource,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    results: PathBuf,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn scenario_config(name: &str) -> Result<ScenarioConfig> {
    match ScenarioConfig::preset(name) {
        Some(c) => Ok(c),
        None if Path::new(name).exists() => ScenarioConfig::from_kv(&std::fs::read_to_string(name)?),
        None => Err(BenchError::Format(format!("'{name}' is neither a preset nor a config file"))),
    }
}

fn sink(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn track(a: TrackArgs) -> Result<()> {
    let frames = match (&a.source.scenario, &a.detections, &a.features) {
        (Some(name), _, _) => gen_scenario(&scenario_config(name)?, a.source.seed)?.frames(),
        (None, Some(d), Some(f)) => {
            let recs = read_mot(d)?;
            let feats = read_features(f)?;
            if feats.nrows() != recs.len() {
                return Err(BenchError::Format(format!(
                    "{} detections but {} feature rows",
                    recs.len(),
                    feats.nrows()
                )));
            }
            detections_by_frame(&recs, &feats, 0)
        }
        _ => return Err(BenchError::Format("give --scenario or --detections with --features".into())),
    };
    let params = match &a.params {
        Some(p) => Some(read_params(BufReader::new(File::open(p)?))?),
        None => None,
    };
    let cfg = TrackerConfig {
        sigma: a.sigma,
        kappa: a.kappa,
        max_age: a.max_age,
        solver: match a.solver {
            SolverArg::Qp => Solver::Qp,
            SolverArg::Gst => Solver::Gst,
        },
        use_geo: a.geo,
        interpolation: a.interpolate,
        bipartite: a.bipartite,
        ..TrackerConfig::default()
    };
    let traj = run_tracker(&frames, &cfg, params.as_ref())?;
    sink(&a.output)?.write_all(format_mot(&trajectory_records(&traj)).as_bytes())?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ToyConfig {
        steps: a.steps,
        batch: a.batch,
        seed: a.seed,
        ..ToyConfig::default()
    };
    cfg.train.lr = a.lr;
    cfg.train.tau = a.tau;
    let report = train_toy(&cfg)?;
    write_params(BufWriter::new(File::create(&a.out)?), &report.params)?;
    let mut w = BufWriter::new(File::create(&a.loss_csv)?);
    writeln!(w, "step,loss,grad_norm,rejected")?;
    for r in &report.curve {
        writeln!(w, "{},{:.9},{:.9},{}", r.step, r.loss, r.grad_norm, r.rejected as u8)?;
    }
    eprintln!(
        "held-out loss {:.6} -> {:.6} ({:.1}% lower)",
        report.initial_loss,
        report.final_loss,
        100.0 * report.reduction()
    );
    Ok(())
}

fn solve(a: SolveArgs) -> Result<()> {
    let graph = |p: &Path| -> Result<ViewGraph> {
        let rows = rows_f64(&read_features(p)?);
        let boxes = vec![Bbox::new(0.0, 0.0, 1.0, 1.0); rows.len()];
        Ok(ViewGraph::from_vertices(&rows, boxes)?)
    };
    let (g_d, g_t) = (graph(&a.det_features)?, graph(&a.trk_features)?);
    let aff = build_affinity(&g_d, &g_t)?;
    let score = gm_forward_with(&aff.m, &aff.b, a.tol, DEFAULT_MAX_ITER)?;
    let mut w = sink(&a.output)?;
    for r in 0..score.x.nrows() {
        let row: Vec<String> = (0..score.x.ncols()).map(|c| format!("{:.9}", score.x[(r, c)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let rows = run_gst_bench(&GstBenchConfig {
        n: a.n,
        avg_component: a.avg_component,
        instances: a.instances,
        repeats: a.repeats,
        seed: a.seed,
        ..GstBenchConfig::default()
    })?;
    let mut w = sink(&a.output)?;
    writeln!(w, "{}", TimingRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

fn generate(a: GenArgs) -> Result<()> {
    let name = a.source.scenario.as_deref().unwrap_or("no-noise");
    gen_scenario(&scenario_config(name)?, a.source.seed)?.write(&a.out_dir)
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = evaluate(&read_mot(&a.gt)?, &read_mot(&a.results)?);
    let mut w = sink(&a.output)?;
    writeln!(w, "{}", Metrics::CSV_HEADER)?;
    writeln!(w, "{}", m.csv_row())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("GM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set GM_THREADS={n}: {e}");
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Track(a) => track(a),
        Command::Train(a) => train(a),
        Command::Solve(a) => solve(a),
        Command::BenchGst(a) => bench(a),
        Command::Gen(a) => generate(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
