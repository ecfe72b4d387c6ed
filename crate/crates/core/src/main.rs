use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use glarma_mixed::benchmark::benchmark_q;
use glarma_mixed::config::ModelConfig;
use glarma_mixed::fit::{fit, posterior_means};
use glarma_mixed::io;
use glarma_mixed::kernel::Derivs;
use glarma_mixed::marginal::Evaluator;
use glarma_mixed::model::{ModelSpec, PanelData};
use glarma_mixed::sim::{covariate_rng, generate_matrix, simulate_panel, SimSpec};
use glarma_mixed::{Error, Result};

#[derive(Parser)]
#[command(name = "glarma-mixed", version, about = "GLARMA mixed-effects models for panels of count and binary series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Model configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for per-series work; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write the report files.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Fit with a single quadrature size instead of the configured schedule.
        #[arg(long)]
        q: Option<usize>,
        /// Starting values (`parameter,estimate` CSV).
        #[arg(long)]
        psi: Option<PathBuf>,
    },
    /// Simulate a panel from the `[simulation]` and `[truth]` tables.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Log-likelihood and gradient at given parameters.
    Loglik {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        psi: PathBuf,
        #[arg(long, default_value_t = 5)]
        q: usize,
    },
    /// Posterior random-effect means at given parameters.
    Posterior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        psi: PathBuf,
        #[arg(long, default_value_t = 5)]
        q: usize,
    },
    /// One Newton iteration per quadrature size, with timing and accuracy changes.
    BenchmarkQ {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Parameters to start from; fitted first when omitted.
        #[arg(long)]
        psi: Option<PathBuf>,
        /// Comma-separated quadrature sizes.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7")]
        q_list: Vec<usize>,
        /// Timing repetitions per size; the fastest is reported.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn prepare(common: &Common) -> Result<ModelConfig> {
    std::fs::create_dir_all(&common.out_dir)?;
    ModelConfig::load(&common.config)
}

fn load(common: &Common, data: &Path) -> Result<(ModelConfig, PanelData, ModelSpec)> {
    let cfg = prepare(common)?;
    let (panel, spec) = io::read_panel_file(data, &cfg)?;
    info!("read {} series, {} observations", panel.len(), panel.total_observations());
    Ok((cfg, panel, spec))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit { common, data, q, psi } => {
            let (cfg, panel, spec) = load(&common, &data)?;
            let mut opts = cfg.fit_options()?;
            if let Some(q) = q {
                opts = opts.with_single_q(q);
            }
            let eval = Evaluator::new(&panel, &spec, common.workers)?.with_inner(cfg.inner_options());
            let start = psi.map(|p| io::read_params(&p, &spec)).transpose()?;
            let result = fit(&eval, start, &opts)?;
            let out = &common.out_dir;
            io::write_estimates(&out.join("estimates.csv"), &result)?;
            io::write_matrix(&out.join("vcov.csv"), &result.names, &result.vcov)?;
            io::write_trace(&out.join("trace.csv"), &result.trace)?;
            io::write_timing(&out.join("timing.csv"), &result.trace)?;
            io::write_posterior(&out.join("posterior.csv"), &spec.random_names, &result.posterior)?;
            io::write_summary(&out.join("summary.txt"), &result)?;
            if let Some(basis) = cfg.lag_basis()? {
                io::write_basis(&out.join("basis.csv"), &basis)?;
                io::write_transfer(&out.join("transfer.csv"), &cfg, &spec, &result.psi, &result.posterior)?;
            }
            println!("loglik {}", io::num(result.loglik));
            println!("converged {}", result.converged);
            if result.converged {
                Ok(ExitCode::SUCCESS)
            } else {
                for d in &result.diagnostics {
                    eprintln!("diagnostic: {d}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Simulate { common, seed } => {
            let cfg = prepare(&common)?;
            let sim = cfg
                .simulation
                .as_ref()
                .ok_or_else(|| Error::Config("simulate needs a [simulation] table".into()))?;
            let seed = seed.unwrap_or(cfg.seed);
            let ids = cfg.simulated_ids()?;
            let spec = cfg.build_spec(&ids)?;
            let psi = cfg.truth_vector(&spec)?;
            let gens = cfg.covariate_generators()?;
            let n = sim.length;
            let mut x = Vec::with_capacity(ids.len());
            let mut r = Vec::with_capacity(ids.len());
            let mut inputs: Vec<(String, Vec<Vec<f64>>)> = gens.iter().map(|(name, _)| (name.clone(), Vec::new())).collect();
            for j in 0..ids.len() {
                let g: Vec<_> = gens.iter().map(|(_, g)| g.clone()).collect();
                let raw = generate_matrix(&g, n, &mut covariate_rng(seed, j))?;
                let mut cols = std::collections::HashMap::new();
                for (c, (name, _)) in gens.iter().enumerate() {
                    let v: Vec<f64> = raw.column(c).iter().copied().collect();
                    inputs[c].1.push(v.clone());
                    cols.insert(name.clone(), v);
                }
                let (xj, rj) = cfg.design(&cols, n)?;
                x.push(xj);
                r.push(rj);
            }
            let spec_sim = SimSpec { model: &spec, psi, ids: ids.clone(), x, r, m: vec![vec![sim.trials; n]; ids.len()], seed };
            let out = simulate_panel(&spec_sim)?;
            let dir = &common.out_dir;
            io::write_panel(&dir.join("data.csv"), &cfg, &out.data, &inputs)?;
            io::write_latents(&dir.join("latents.csv"), &out.data, &out.latents)?;
            io::write_random_effects(&dir.join("random_effects.csv"), &spec.random_names, &out.data, &out.latents)?;
            println!("simulated {} series of length {n}", ids.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Loglik { common, data, psi, q } => {
            let (cfg, panel, spec) = load(&common, &data)?;
            let psi = io::read_params(&psi, &spec)?;
            let eval = Evaluator::new(&panel, &spec, common.workers)?.with_inner(cfg.inner_options());
            let pe = eval.panel(&psi, q, Derivs::Gradient)?;
            io::write_gradient(&common.out_dir.join("gradient.csv"), &spec.param_names(), &psi, pe.grad.as_ref().unwrap())?;
            println!("loglik {}", io::num(pe.loglik));
            Ok(ExitCode::SUCCESS)
        }
        Command::Posterior { common, data, psi, q } => {
            let (cfg, panel, spec) = load(&common, &data)?;
            let psi = io::read_params(&psi, &spec)?;
            let eval = Evaluator::new(&panel, &spec, common.workers)?.with_inner(cfg.inner_options());
            let post = posterior_means(&eval, &psi, q)?;
            io::write_posterior(&common.out_dir.join("posterior.csv"), &spec.random_names, &post)?;
            if cfg.lag_basis.is_some() {
                io::write_transfer(&common.out_dir.join("transfer.csv"), &cfg, &spec, &psi, &post)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchmarkQ { common, data, psi, q_list, repeats } => {
            let (cfg, panel, spec) = load(&common, &data)?;
            let eval = Evaluator::new(&panel, &spec, common.workers)?.with_inner(cfg.inner_options());
            let psi = match psi {
                Some(p) => io::read_params(&p, &spec)?,
                None => fit(&eval, None, &cfg.fit_options()?)?.psi,
            };
            let rows = benchmark_q(&eval, &psi, &q_list, repeats)?;
            io::write_benchmark(&common.out_dir.join("benchmark.csv"), &rows)?;
            println!("q,grid_points,seconds,loglik,param_change_pct,se_change_pct");
            for r in &rows {
                println!(
                    "{},{},{:.4},{:.6},{:.4},{:.4}",
                    r.q, r.grid_points, r.seconds, r.loglik, r.param_change_pct, r.se_change_pct
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
