use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use survbal::config::RunConfig;
use survbal::dataset::{read_covariates, Dataset};
use survbal::metrics::{write_metrics_csv, MetricsRow};
use survbal::model::Model;
use survbal::pipeline::{
    evaluate, run_hyper, run_theory, search_run, simulate_run, summarize, sweep, write_summary_csv, write_sweep_csv,
};
use survbal::simulate::{initial_wasserstein, SimTruth};
use survbal::theory::write_bound_csv;
use survbal::train::{fit, StopReason};
use survbal::Error;

/// Counterfactual survival estimation with representation balancing.
#[derive(Parser)]
#[command(name = "survbal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its ground truth.
    Simulate(Common),
    /// Fit a model on the train/validation splits.
    Train(Common),
    /// Score a checkpoint against the truth on the test split.
    Evaluate(Common),
    /// Replicated runs over `gamma_wd` and `p_wd` grids.
    Sweep(Common),
    /// Numerical checks of the PEHE and Pinsker bounds.
    Theory(Common),
    /// Random hyperparameter search.
    Search(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_BOUND: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::BoundViolation(_) => EXIT_BOUND,
        _ => EXIT_VALIDATION,
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn open(path: &Path, what: &str) -> Result<File, Error> {
    File::open(path).map_err(|e| Error::Config(format!("cannot open {what} {}: {e}", path.display())))
}

fn covariates(cfg: &RunConfig) -> Result<Option<ndarray::Array2<f64>>, Error> {
    match &cfg.paths.covariates {
        Some(_) => {
            let path = cfg.resolve(&cfg.paths.covariates, "");
            Ok(Some(read_covariates(open(&path, "covariates")?)?))
        }
        None => Ok(None),
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, Error> {
    let path = cfg.data_path();
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} not found; run `survbal simulate` first", path.display())));
    }
    Dataset::load(path)
}

fn load_truth(cfg: &RunConfig) -> Result<SimTruth, Error> {
    let meta_path = cfg.truth_meta_path();
    let meta = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::Config(format!("cannot read truth {}: {e}", meta_path.display())))?;
    SimTruth::from_parts(&meta, open(&cfg.truth_scores_path(), "truth scores")?)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<(), Error> {
    let x = covariates(cfg)?;
    let sim = simulate_run(cfg, x.as_ref())?;
    let dir = &cfg.out_dir;
    sim.dataset.write_csv(create(dir, "data.csv")?)?;
    std::fs::write(cfg.truth_meta_path(), sim.truth.meta_toml())?;
    sim.truth.write_scores(BufWriter::new(File::create(cfg.truth_scores_path())?))?;
    let tau = sim.truth.tau_min;
    let times: Vec<f64> = (0..=20).map(|k| tau * k as f64 / 20.0).collect();
    let rows: Vec<usize> = (0..sim.dataset.len()).collect();
    sim.truth.write_csv(create(dir, "truth.csv")?, &rows, &times)?;
    println!("rows {}", sim.dataset.len());
    println!("censored_fraction {:.4}", sim.censored_fraction());
    println!("treated_fraction {:.4}", sim.treated_fraction());
    println!("d_wd_init {:.4}", sim.d_wd_init);
    println!("tau_min {:.4}", tau);
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Error> {
    let data = load_data(cfg)?.partition_by_tags()?;
    let out = fit(&data.train, &data.val, &run_hyper(cfg))?;
    out.model.save(cfg.checkpoint_path())?;
    out.report.write_csv(create(&cfg.out_dir, "report.csv")?, cfg.timing)?;
    let r = &out.report;
    println!("best_epoch {}", r.best_epoch);
    println!("stop_reason {}", r.stop_reason.as_str());
    println!("val_nll {:.6}", r.best_val.nll);
    println!("val_objective {:.6}", r.best_val.total);
    if r.stop_reason == StopReason::Divergence {
        let why = r.divergence.clone().unwrap_or_default();
        return Err(Error::Divergence(format!("{why}; checkpoint of epoch {} saved", r.best_epoch)));
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<(), Error> {
    let ckpt = cfg.checkpoint_path();
    if !ckpt.exists() {
        return Err(Error::Config(format!("checkpoint {} not found; run `survbal train` first", ckpt.display())));
    }
    let model = Model::load(&ckpt)?;
    let dataset = load_data(cfg)?;
    let truth = load_truth(cfg)?;
    if truth.s_values.len() != dataset.len() {
        return Err(Error::DimensionMismatch { expected: dataset.len(), got: truth.s_values.len() });
    }
    let data = dataset.partition_by_tags()?;
    let test_truth = truth.subset(&data.test_idx);
    let (ev, grid) = evaluate(&model, data.test.features(), &test_truth)?;
    let row = MetricsRow {
        run_id: "evaluate".into(),
        seed: cfg.seed,
        gamma_wd: cfg.model.gamma_wd,
        p_wd: cfg.simulate.p_wd,
        d_wd_init: initial_wasserstein(&dataset)?,
        mcate: ev.mcate,
        mpehe: ev.mpehe,
        fsm: ev.fsm,
    };
    let dir = &cfg.out_dir;
    write_metrics_csv(create(dir, "metrics.csv")?, std::slice::from_ref(&row))?;
    model.write_predictions(create(dir, "predictions.csv")?, data.test.features(), &data.test_idx, grid.times())?;
    ev.write_squares_csv(create(dir, "squares.csv")?, &data.test_idx)?;
    println!("test_rows {}", data.test.len());
    println!("mcate {:.6}", ev.mcate);
    println!("mpehe {:.6}", ev.mpehe);
    println!("fsm {:.6}", ev.fsm);
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), Error> {
    let x = covariates(cfg)?;
    let rows = sweep(cfg, x.as_ref())?;
    let summary = summarize(&rows);
    write_sweep_csv(create(&cfg.out_dir, "sweep_runs.csv")?, &rows)?;
    write_summary_csv(create(&cfg.out_dir, "sweep_summary.csv")?, &summary)?;
    for s in &summary {
        println!(
            "{} p_wd {} gamma_wd {}: fsm {:.4} +- {:.4} mpehe {:.4} ({} ok, {} failed)",
            s.kind.as_str(),
            s.p_wd,
            s.gamma_wd,
            s.fsm.0,
            s.fsm.1,
            s.mpehe.0,
            s.n_ok,
            s.n_failed
        );
    }
    Ok(())
}

fn cmd_theory(cfg: &RunConfig) -> Result<(), Error> {
    let outcome = run_theory(cfg)?;
    for (stem, rows) in outcome.tables() {
        write_bound_csv(create(&cfg.out_dir, &format!("{stem}.csv"))?, &rows)?;
        let bad = rows.iter().filter(|r| !r.report.holds()).count();
        let worst = rows.iter().map(|r| r.report.slack()).fold(f64::INFINITY, f64::min);
        println!("{stem}: {} rows, {bad} violations, min slack {worst:.3e}", rows.len());
    }
    println!("eta {:.6}", outcome.theorem1.eta);
    match outcome.violations() {
        0 => Ok(()),
        n => Err(Error::BoundViolation(format!("{n} bound checks failed"))),
    }
}

fn cmd_search(cfg: &RunConfig) -> Result<(), Error> {
    let data = load_data(cfg)?.partition_by_tags()?;
    let result = search_run(cfg, &data)?;
    result.write_csv(create(&cfg.out_dir, "leaderboard.csv")?)?;
    let best = RunConfig { model: result.best.clone(), ..cfg.clone() };
    let text = toml::to_string(&best).map_err(|e| Error::Config(e.to_string()))?;
    create(&cfg.out_dir, "best.toml")?.write_all(text.as_bytes())?;
    let top = &result.leaderboard[0];
    println!("best candidate {} score {:.6} (epoch {})", top.candidate, top.score, top.best_epoch);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (common, f): (&Common, fn(&RunConfig) -> Result<(), Error>) = match &cli.command {
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Train(c) => (c, cmd_train),
        Command::Evaluate(c) => (c, cmd_evaluate),
        Command::Sweep(c) => (c, cmd_sweep),
        Command::Theory(c) => (c, cmd_theory),
        Command::Search(c) => (c, cmd_search),
    };
    let cfg = common.load()?;
    cfg.validate()?;
    f(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
