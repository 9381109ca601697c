use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mocolab::augment::{tile_grid, two_views_traced, write_ppm, AugConfig};
use mocolab::bench::{cost_report, CostPlan};
use mocolab::eval::{ablation_grid, probe_params, tau_sweep, write_text, ProbeConfig, ProbeSolver, TAU_GRID};
use mocolab::par::{set_exec_mode, ExecMode};
use mocolab::rng::{Domain, StreamKey};
use mocolab::trainer::config::parse_pairs;
use mocolab::trainer::{load_query_params, resume_run, train_run, RunConfig};
use mocolab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mocolab", version, about = "Momentum-contrastive learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory; every artifact is written here.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the init, data-order and augmentation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Run every inner loop on the calling thread.
    #[arg(long)]
    sequential: bool,
    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args, Debug, Clone)]
struct ProbeArgs {
    #[arg(long, default_value_t = 30)]
    probe_epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    probe_lr: f64,
    /// `sgd` or `lstsq` (closed-form cross-check).
    #[arg(long, default_value = "sgd")]
    solver: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the descriptor of a synthetic dataset.
    Synth(Common),
    /// Pretrain an encoder; writes metrics, checkpoints and the data-order log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen backbone features of a checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// One run per temperature, each probed.
    SweepTau {
        #[command(flatten)]
        common: Common,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[command(flatten)]
        probe: ProbeArgs,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Head / augmentation / schedule ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to seed, seed+1, seed+2.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Memory and step-time comparison of the two mechanisms.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64, 128])]
        batches: Vec<usize>,
        /// Queue sizes additionally timed at the first batch size.
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 4096, 16384])]
        k_sweep: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Dump augmented view pairs as PPM images.
    InspectAug {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) => c,
            Command::Train { common, .. }
            | Command::Probe { common, .. }
            | Command::SweepTau { common, .. }
            | Command::Ablate { common, .. }
            | Command::Bench { common, .. }
            | Command::InspectAug { common, .. } => common,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

fn config_error(msg: String) -> Error {
    Error::Config(msg)
}

/// Config file, then `--seed`, then `--set`, later values winning.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut pairs = match &common.config {
        Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(io(p))?)?,
        None => Vec::new(),
    };
    if let Some(s) = common.seed {
        for k in ["seed_init", "seed_data", "seed_aug"] {
            pairs.push((k.to_string(), s.to_string()));
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    RunConfig::from_pairs(&pairs)
}

fn prepare_out(common: &Common) -> Result<()> {
    let out = &common.out;
    if out.exists() {
        if !out.is_dir() {
            return Err(config_error(format!("--out {} exists and is not a directory", out.display())));
        }
        let occupied = std::fs::read_dir(out).map_err(io(out))?.next().is_some();
        if occupied && !common.force {
            return Err(config_error(format!(
                "--out {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(io(out))
}

fn probe_config(args: &ProbeArgs, seed: u64) -> Result<ProbeConfig> {
    let solver = match args.solver.as_str() {
        "sgd" => ProbeSolver::Sgd,
        "lstsq" => ProbeSolver::LeastSquares,
        s => return Err(config_error(format!("unknown probe solver `{s}` (expected sgd or lstsq)"))),
    };
    Ok(ProbeConfig { epochs: args.probe_epochs, lr: args.probe_lr, seed, solver, ..ProbeConfig::default() })
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    if common.sequential {
        set_exec_mode(ExecMode::Sequential)?;
    }
    let cfg = resolve(&common)?;
    prepare_out(&common)?;
    let out = common.out.as_path();
    write_text(&out.join("resolved.cfg"), &cfg.to_text())?;

    match cli.command {
        Command::Synth(_) => {
            let ds = cfg.load_dataset()?;
            let descriptor: String = cfg
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| *k == "dataset" || k.starts_with("synth_") || *k == "input_hw" || *k == "cifar_files")
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            write_text(&out.join("dataset.cfg"), &descriptor)?;
            println!("{} images, {} classes, side {}", ds.len(), ds.class_count(), ds.side());
        }
        Command::Train { resume, .. } => {
            let ds = cfg.load_dataset()?;
            let run = match resume {
                Some(ckpt) => resume_run(&cfg, &ds, &ckpt, Some(out))?,
                None => train_run(&cfg, &ds, Some(out))?,
            };
            if let Some(last) = run.metrics.last() {
                println!("step {} loss {} pos_sim {} neg_sim {}", last.step, last.loss, last.pos_sim, last.neg_sim);
            }
        }
        Command::Probe { checkpoint, probe, .. } => {
            let ds = cfg.load_dataset()?;
            let params = load_query_params(&checkpoint, &cfg.encoder)?;
            let r = probe_params(&params, &ds, &probe_config(&probe, cfg.seed_init)?)?;
            let mut csv = String::from("class,accuracy\n");
            for (c, a) in r.per_class_acc.iter().enumerate() {
                csv.push_str(&format!("{c},{a}\n"));
            }
            write_text(&out.join("probe_per_class.csv"), &csv)?;
            write_text(
                &out.join("probe.txt"),
                &format!("top1 = {}\nfeature_dim = {}\nn_train = {}\nn_test = {}\n", r.top1, r.feature_dim, r.n_train, r.n_test),
            )?;
            println!("top1 {}", r.top1);
        }
        Command::SweepTau { taus, probe, jobs, .. } => {
            let ds = cfg.load_dataset()?;
            let taus = taus.unwrap_or_else(|| TAU_GRID.to_vec());
            let sweep = tau_sweep(&cfg, &ds, &taus, &probe_config(&probe, cfg.seed_init)?, jobs)?;
            write_text(&out.join("tau_sweep.csv"), &sweep.csv())?;
            write_text(&out.join("tau_best.txt"), &sweep.summary())?;
            print!("{}", sweep.summary());
        }
        Command::Ablate { seeds, probe, jobs, .. } => {
            let ds = cfg.load_dataset()?;
            let seeds = seeds.unwrap_or_else(|| (0..3).map(|i| cfg.seed_init + i).collect());
            let table = ablation_grid(&cfg, &ds, &seeds, &probe_config(&probe, cfg.seed_init)?, jobs)?;
            write_text(&out.join("ablation.csv"), &table.csv())?;
            write_text(&out.join("ablation.md"), &table.markdown())?;
            print!("{}", table.markdown());
        }
        Command::Bench { batches, k_sweep, steps, .. } => {
            let plan = CostPlan { batches, k: cfg.k, k_sweep, steps, ..CostPlan::default() };
            let report = cost_report(&cfg.encoder, &plan)?;
            write_text(&out.join("cost.csv"), &report.csv())?;
            write_text(&out.join("cost.md"), &report.markdown())?;
            print!("{}", report.markdown());
        }
        Command::InspectAug { count, .. } => {
            let ds = cfg.load_dataset()?;
            let aug = AugConfig::new(cfg.aug);
            let key = StreamKey::new(Domain::Augment, cfg.seed_aug).derive(0);
            let mut rows = Vec::new();
            let mut trace = String::from("sample,view,steps\n");
            for i in 0..count.min(ds.len()) {
                let img = ds.image(i);
                let (pair, [tq, tk]) = two_views_traced(&img, &aug, key.derive(i as u64), i)?;
                for (name, t) in [("q", tq), ("k", tk)] {
                    let steps: Vec<String> = t.iter().map(|s| format!("{s:?}").to_lowercase()).collect();
                    trace.push_str(&format!("{i},{name},{}\n", steps.join(" ")));
                }
                write_ppm(&out.join(format!("sample{i:03}_q.ppm")), &pair.view_q)?;
                write_ppm(&out.join(format!("sample{i:03}_k.ppm")), &pair.view_k)?;
                rows.push(vec![img, pair.view_q, pair.view_k]);
            }
            if !rows.is_empty() {
                write_ppm(&out.join("views.ppm"), &tile_grid(&rows, 1)?)?;
            }
            write_text(&out.join("trace.csv"), &trace)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let level = if cli.command.common().verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 2 } else { 1 })
        }
    }
}
