use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flgap::ck::cumulative_power;
use flgap::datasets::{dataset_to_csv, save_dataset};
use flgap::experiments::{
    self, prepare_cell, result_from_csv, run_gamma_sweep, run_learning_curve, run_shuffle_compare,
    run_width_depth_sweep, sweep_to_csv, write_outputs, CellSpec, ExperimentConfig,
    ExperimentResult,
};
use flgap::network::{load_checkpoint, save_checkpoint};
use flgap::ntk::{empirical_ntk, ntk_predict, save_kernel, RidgeRule};
use flgap::numerics::sym_eig;
use flgap::training::{gen_error, save_report, train_with_test};

#[derive(Parser)]
#[command(
    name = "flgap",
    version,
    about = "Feature-learning gap experiments on small MLPs"
)]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides `seed` and clears per-repeat seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for grid cells; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CellArgs {
    /// Training-set size.
    #[arg(long)]
    m: usize,
    /// Output scale; the first configured γ when omitted.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    shuffled: bool,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test sets of one grid point.
    GenData {
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Train one network and save θ₀, θ and the training report.
    Train(CellArgs),
    /// Empirical NTK on the training set, its spectrum and the kernel
    /// predictor's test error.
    Ntk {
        #[command(flatten)]
        cell: CellArgs,
        /// Evaluate the kernel at a saved checkpoint instead of θ₀.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learning curves over the m grid for every configured γ and label arm.
    LearningCurve,
    /// Paired true/shuffled-label runs.
    ShuffleCompare,
    /// The full metric grid per γ (needs at least two).
    GammaSweep,
    /// m* over the width/depth/learning-rate grid.
    SweepMstar,
    /// Power-law fits of the median learning curves in a results.csv.
    FitBeta {
        #[arg(long)]
        results: PathBuf,
    },
    /// Re-render the SVG plots from a results.csv.
    Plot {
        #[arg(long)]
        results: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cell_spec(cfg: &ExperimentConfig, args: &CellArgs) -> Result<CellSpec> {
    let seeds = cfg.repeat_seeds();
    let Some(&seed) = seeds.get(args.repeat) else {
        bail!(
            "repeat {} out of range (config has {})",
            args.repeat,
            seeds.len()
        );
    };
    Ok(CellSpec {
        m: args.m,
        gamma: args.gamma.unwrap_or(cfg.gammas[0]),
        shuffled: args.shuffled,
        repeat: args.repeat,
        seed,
    })
}

fn write(path: impl AsRef<Path>, body: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(result: &ExperimentResult, dir: &Path) {
    for c in &result.curves {
        let fit = |f: &Option<experiments::PowerLawFit>| {
            f.map_or("n/a".to_string(), |f| format!("β={:.3}", f.beta))
        };
        println!(
            "γ={} {}: m*={} nn {} ntk {}",
            c.gamma,
            if c.shuffled { "shuffled" } else { "true" },
            c.m_star.map_or("none".to_string(), |m| m.to_string()),
            fit(&c.nn_fit),
            fit(&c.ntk_fit)
        );
    }
    let failed = result.rows.iter().filter(|r| !r.status.usable()).count();
    if failed > 0 {
        println!("{failed} cell(s) not usable, see status column");
    }
    println!("wrote {}", dir.display());
}

fn gen_data(cfg: &ExperimentConfig, m: usize, repeat: usize) -> Result<()> {
    let args = CellArgs {
        m,
        gamma: None,
        shuffled: false,
        repeat,
    };
    let spec = cell_spec(cfg, &args)?;
    let (train, test) = experiments::cell_data(cfg, m, spec.seed)?;
    let dir = Path::new(&cfg.output_dir).join(format!("data/m{m}_r{repeat}"));
    save_dataset(dir.join("train"), &train)?;
    save_dataset(dir.join("test"), &test)?;
    write(dir.join("train.csv"), dataset_to_csv(&train))?;
    write(dir.join("test.csv"), dataset_to_csv(&test))?;
    println!(
        "{} train / {} test samples in {}",
        train.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, args: &CellArgs) -> Result<()> {
    let spec = cell_spec(cfg, args)?;
    let cell = prepare_cell(cfg, &spec)?;
    let id = experiments::run_id(spec.m, spec.gamma, spec.shuffled, spec.repeat);
    let dir = Path::new(&cfg.output_dir).join("train").join(&id);
    let (trained, report) = train_with_test(
        &cell.theta0,
        &cell.train,
        Some(&cell.test),
        &cell.train_config,
    )?;
    save_checkpoint(dir.join("theta0"), &cell.theta0, Some(spec.seed))?;
    save_checkpoint(dir.join("theta"), &trained, Some(spec.seed))?;
    save_report(&dir, &report)?;
    println!(
        "{id}: {} steps, train loss {:.4e}, test MSE {:.4e}",
        report.steps,
        report.final_train_loss,
        report.final_test_loss.unwrap_or(f64::NAN)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn ntk(cfg: &ExperimentConfig, args: &CellArgs, checkpoint: Option<&Path>) -> Result<()> {
    let spec = cell_spec(cfg, args)?;
    let cell = prepare_cell(cfg, &spec)?;
    let state = match checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => cell.theta0.clone(),
    };
    let k = empirical_ntk(&state, &cell.train.x, &cell.train.x)?;
    let kt = empirical_ntk(&state, &cell.test.x, &cell.train.x)?;
    let pred = ntk_predict(
        &k,
        &cell.train.y,
        &kt,
        RidgeRule::TraceScaled(cfg.metrics.ridge),
    )?;
    let err = cell.train_config.loss.evaluate(&pred, &cell.test.y);

    let id = experiments::run_id(spec.m, spec.gamma, spec.shuffled, spec.repeat);
    let dir = Path::new(&cfg.output_dir).join("ntk").join(&id);
    save_kernel(&dir, &k)?;
    let spectrum = sym_eig(&k.entries)?;
    let mut eig = String::from("mode,eigenvalue\n");
    for (i, v) in spectrum.values.iter().enumerate() {
        eig.push_str(&format!("{},{v}\n", i + 1));
    }
    write(dir.join("spectrum.csv"), eig)?;
    let power = cumulative_power(&spectrum, &cell.train.y.column(0))?;
    write(dir.join("cumpower.csv"), flgap::ck::cumpower_csv(&power))?;
    println!("{id}: NTK predictor test MSE {err:.4e}");
    if checkpoint.is_some() {
        let nn = gen_error(&state, &cell.test, cell.train_config.loss)?;
        println!("{id}: checkpoint network test MSE {nn:.4e}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_grid(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
    runner: fn(&ExperimentConfig) -> Result<ExperimentResult, experiments::ExperimentError>,
) -> Result<()> {
    let result = experiments::with_threads(threads, || runner(cfg))??;
    let dir = PathBuf::from(&cfg.output_dir);
    write_outputs(&result, &dir)?;
    print_summary(&result, &dir);
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<()> {
    let sweep = experiments::with_threads(threads, || run_width_depth_sweep(cfg))??;
    let dir = PathBuf::from(&cfg.output_dir);
    for (cell, run) in sweep.cells.iter().zip(&sweep.runs) {
        let sub = dir.join(format!("w{}_d{}_lr{}", cell.width, cell.depth, cell.lr));
        write_outputs(run, &sub)?;
        let flagged = if cell.flagged.is_empty() {
            String::new()
        } else {
            format!(" ({} flagged)", cell.flagged.len())
        };
        println!(
            "width {} depth {} lr {}: m*={}{flagged}",
            cell.width,
            cell.depth,
            cell.lr,
            cell.m_star.map_or("none".to_string(), |m| m.to_string())
        );
    }
    write(dir.join("mstar.csv"), sweep_to_csv(&sweep))?;
    println!("wrote {}", dir.join("mstar.csv").display());
    Ok(())
}

fn read_results(cfg: &ExperimentConfig, path: &Path) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(result_from_csv(&text, cfg)?)
}

fn fit_beta(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let result = read_results(cfg, path)?;
    let mut csv = format!(
        "# config_sha256={}\ngamma,shuffled,curve,c,beta,residual\n",
        result.config_hash
    );
    for c in &result.curves {
        for (name, fit) in [("nn", &c.nn_fit), ("ntk", &c.ntk_fit)] {
            let arm = if c.shuffled { "shuffled" } else { "true" };
            match fit {
                Some(f) => {
                    println!(
                        "γ={} {arm} {name}: C={:.4e} β={:.4} (rms {:.3e})",
                        c.gamma, f.c, f.beta, f.residual
                    );
                    csv.push_str(&format!(
                        "{},{},{name},{},{},{}\n",
                        c.gamma, c.shuffled, f.c, f.beta, f.residual
                    ));
                }
                None => println!("γ={} {arm} {name}: not enough usable points", c.gamma),
            }
        }
    }
    let out = PathBuf::from(&cfg.output_dir).join("beta.csv");
    write(&out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn plot(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let result = read_results(cfg, path)?;
    let dir = PathBuf::from(&cfg.output_dir).join("plots");
    for (name, svg) in experiments::emit_plots(&result)? {
        write(dir.join(&name), svg)?;
        println!("wrote {}", dir.join(&name).display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    log::info!("config sha256 {}", cfg.hash());
    match &cli.command {
        Command::GenData { m, repeat } => gen_data(&cfg, *m, *repeat),
        Command::Train(args) => train(&cfg, args),
        Command::Ntk { cell, checkpoint } => ntk(&cfg, cell, checkpoint.as_deref()),
        Command::LearningCurve => run_grid(&cfg, cli.threads, run_learning_curve),
        Command::ShuffleCompare => run_grid(&cfg, cli.threads, run_shuffle_compare),
        Command::GammaSweep => run_grid(&cfg, cli.threads, run_gamma_sweep),
        Command::SweepMstar => sweep(&cfg, cli.threads),
        Command::FitBeta { results } => fit_beta(&cfg, results),
        Command::Plot { results } => plot(&cfg, results),
    }
}
