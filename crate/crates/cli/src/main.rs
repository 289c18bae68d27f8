//! `unfold`: generate data, train unrolled networks, benchmark them, and run
//! the photometric-stereo study, all driven by one TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use unfold_core::config::RunConfig;
use unfold_core::eval::{benchmark_on, format_table, Method, TestSet, TrainedNets};
use unfold_core::experiment::{cells, format_stereo_table, run_stereo, Cell};
use unfold_core::io::{
    load_dictionary, load_params, load_samples, load_train_state, save_dictionary, save_params,
    save_samples, save_train_state, write_bench_csv, write_log_csv, write_matrix_csv,
    write_normal_map_ppm, write_params_csv, write_stereo_csv, SampleSet, StereoRow,
};
use unfold_core::problem::gen_dictionary;
use unfold_core::training::{SyntheticSource, Trainer};
use unfold_core::unrolled::NetKind;
use unfold_core::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  invalid config, arguments or parameters
  3  missing or unreadable input, or an output that cannot be written
  4  failure while running (e.g. training diverged)";

#[derive(Parser, Debug)]
#[command(name = "unfold", version, about = "Classical and unrolled sparse-coding solvers")]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write dictionaries and test sets for every (kappa, SNR) cell.
    Gen,
    /// Train every configured network on every cell and seed; resumes from
    /// saved state.
    Train {
        /// Stop each job after this many further steps, saving state.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Also write each trained tensor as a CSV file.
        #[arg(long)]
        dump_params: bool,
    },
    /// Evaluate classical solvers and trained networks; writes bench.csv.
    Bench,
    /// Synthetic-sphere photometric stereo; writes stereo.csv.
    Stereo,
}

fn main() -> ExitCode {
    let keys = format!(
        "Config keys (TOML; dotted names are [section] keys):\n{}\n{EXIT_HELP}",
        RunConfig::key_help()
    );
    let cmd = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_validation() => EXIT_VALIDATION,
        Error::Io { .. } | Error::Archive { .. } | Error::MissingCheckpoint(_) | Error::Csv(_) => {
            EXIT_IO
        }
        _ => EXIT_RUNTIME,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train {
            max_steps,
            dump_params,
        } => cmd_train(&cfg, max_steps, dump_params),
        Command::Bench => cmd_bench(&cfg),
        Command::Stereo => cmd_stereo(&cfg),
    }
}

fn dict_path(dir: &Path, kappa: f64) -> PathBuf {
    dir.join(format!("dict_k{kappa}.unfd"))
}

fn test_path(dir: &Path, cell: &Cell, seed: u64) -> PathBuf {
    dir.join(format!("test_{}_s{seed}.unfd", cell.tag()))
}

fn job_name(kind: NetKind, cell: &Cell, seed: u64) -> String {
    format!("{kind}_{}_s{seed}", cell.tag())
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.data_dir();
    let class = cfg.problem.class()?;
    for &kappa in &cfg.problem.kappa {
        let dict = gen_dictionary(cfg.problem.m, cfg.problem.n, kappa, cfg.problem.dict_seed)?;
        save_dictionary(&dict, &dict_path(&dir, kappa))?;
        write_matrix_csv(dict.matrix(), &dir.join(format!("dict_k{kappa}.csv")))?;
        println!(
            "dictionary m={} n={} kappa target={kappa} achieved={:.6} L={:.6}",
            dict.m(),
            dict.n(),
            dict.kappa(),
            dict.lipschitz()
        );
        for cell in cells(cfg).iter().filter(|c| c.kappa == kappa) {
            for &seed in &cfg.seeds {
                let set = unfold_core::eval::test_set(&dict, &class, cell.snr_db, cfg.problem.n_test, seed);
                let noise = &set.y - dict.matrix() * &set.x_star;
                let samples = SampleSet {
                    x_star: set.x_star,
                    y: set.y,
                    noise,
                    snr_db: cell.snr_db,
                };
                save_samples(&samples, &test_path(&dir, cell, seed))?;
            }
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, max_steps: Option<u64>, dump_params: bool) -> Result<()> {
    let data = cfg.data_dir();
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let log_dir = cfg.out_dir.join("logs");
    let class = cfg.problem.class()?;
    for cell in cells(cfg) {
        let dict = load_dictionary(&dict_path(&data, cell.kappa))?;
        if (dict.m(), dict.n()) != (cfg.problem.m, cfg.problem.n) {
            return Err(Error::Config(format!(
                "dictionary in {} is {} x {}, config says {} x {}",
                data.display(),
                dict.m(),
                dict.n(),
                cfg.problem.m,
                cfg.problem.n
            )));
        }
        let source = SyntheticSource {
            dict: &dict,
            class,
            snr_db: cell.snr_db,
        };
        let jobs: Vec<(NetKind, u64)> = cfg
            .network
            .kinds
            .iter()
            .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
            .collect();
        let lines: Vec<String> = jobs
            .into_par_iter()
            .map(|(kind, seed)| -> Result<String> {
                let name = job_name(kind, &cell, seed);
                let state_path = ckpt_dir.join(format!("{name}.state.unfd"));
                let tcfg = cfg.train_for(seed);
                let mut trainer = if state_path.exists() {
                    let state = load_train_state(&state_path)?;
                    if state.params.kind() != kind || state.params.depth() != cfg.network.depth {
                        return Err(Error::Config(format!(
                            "{} holds a different network; remove it to retrain",
                            state_path.display()
                        )));
                    }
                    Trainer::resume(dict.matrix(), &source, tcfg, state)?
                } else {
                    Trainer::new(kind, dict.matrix(), dict.lipschitz(), &source, tcfg, cfg.network.depth)?
                };
                let done = trainer.run(max_steps)?;
                save_train_state(trainer.state(), &state_path)?;
                let steps = trainer.state().global_step;
                if !done {
                    return Ok(format!("{name}: paused at step {steps}"));
                }
                let outcome = trainer.into_outcome()?;
                save_params(&outcome.params, &ckpt_dir.join(format!("{name}.unfd")))?;
                write_log_csv(&outcome.log, &log_dir.join(format!("{name}.csv")))?;
                if dump_params {
                    write_params_csv(&outcome.params, &cfg.out_dir.join("params").join(&name))?;
                }
                Ok(format!(
                    "{name}: done after {steps} steps, validation NMSE {:.3} dB",
                    outcome.val_nmse_db
                ))
            })
            .collect::<Result<_>>()?;
        for l in lines {
            println!("{l}");
        }
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let data = cfg.data_dir();
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let mut reports = Vec::new();
    for cell in cells(cfg) {
        let dict = load_dictionary(&dict_path(&data, cell.kappa))?;
        let mut sets = Vec::new();
        for &seed in &cfg.seeds {
            let s = load_samples(&test_path(&data, &cell, seed))?;
            sets.push(TestSet {
                seed,
                x_star: s.x_star,
                y: s.y,
            });
        }
        let mut trained = TrainedNets::new();
        for &method in &cfg.bench.methods {
            if let Method::Net(kind) = method {
                for &seed in &cfg.seeds {
                    let path = ckpt_dir.join(format!("{}.unfd", job_name(kind, &cell, seed)));
                    if !path.exists() {
                        return Err(Error::MissingCheckpoint(format!(
                            "{kind}: {} (run `unfold train` first)",
                            path.display()
                        )));
                    }
                    trained.insert((kind, seed), load_params(&path)?);
                }
            }
        }
        reports.push(benchmark_on(
            &cfg.bench.methods,
            &dict,
            cell.snr_db,
            &sets,
            cfg.network.depth,
            &trained,
        )?);
    }
    let path = cfg.out_dir.join("bench.csv");
    write_bench_csv(&reports, &path)?;
    print!("{}", format_table(&reports));
    println!("final-layer NMSE in dB (mean ± std over seeds); per-layer data in {}", path.display());
    Ok(())
}

fn cmd_stereo(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.stereo;
    let trials = run_stereo(s, &cfg.seeds)?;
    let mut rows = Vec::new();
    for t in &trials {
        for (pixel, ((w_true, w_hat), err)) in t.w_true.iter().zip(&t.w_hat).zip(&t.errors).enumerate() {
            rows.push(StereoRow {
                method: t.method.to_string(),
                q: t.q,
                seed: t.seed,
                pixel,
                w_true: *w_true,
                w_hat: *w_hat,
                angular_error: *err,
            });
        }
        if s.normal_maps {
            let dir = cfg.out_dir.join("normal_maps");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let name = format!("{}_q{}_s{}.ppm", t.method, t.q, t.seed);
            write_normal_map_ppm(t.resolution, &t.coords, &t.w_hat, &dir.join(name))?;
        }
        if let Some(p) = &t.params {
            let dir = cfg.out_dir.join("checkpoints");
            save_params(p, &dir.join(format!("stereo_{}_q{}_s{}.unfd", t.method, t.q, t.seed)))?;
        }
    }
    let path = cfg.out_dir.join("stereo.csv");
    write_stereo_csv(&rows, &path)?;
    print!("{}", format_stereo_table(&trials, &s.methods, &s.q));
    println!("median over seeds of mean angular error (rad); per-pixel data in {}", path.display());
    Ok(())
}
