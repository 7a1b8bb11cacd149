use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ece_core::eval::{goal_distance_stats, kl_divergence_per_feature, trajectory_rmse};
use ece_core::features::WeightVector;
use ece_core::game::{sample_batch, AffineGaussianPolicySet};
use ece_core::ilq::{solve_ece, SolverConfig};
use ece_core::io::policyfile::{load_policies, save_policies};
use ece_core::io::tables::{self, WeightsFile};
use ece_core::io::trajfile::{check_batch_against, load_batch, save_batch};
use ece_core::io::{Scenario, ScenarioConfig};
use ece_core::irl::{run_mairl, LearnMode};
use ece_core::Error;

/// Entropic cost equilibria: solve games, sample demonstrations, learn costs.
///
/// Trial `k` of any sampling command uses the RNG seed `seed + k`.
#[derive(Debug, Parser)]
#[command(name = "ece", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    Independent,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve under the scenario's true costs and sample demonstrations.
    GenDemos {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve for equilibrium policies and write them with the solver trace.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_policy: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Drop the linear cost terms the printed recursion omits.
        #[arg(long)]
        strict_paper: bool,
    },
    /// Sample rollouts of a stored policy.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn feature weights from demonstrations.
    Learn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Compare demonstrations with rollouts under given weights.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for kl.csv, goal_distance_*.csv and rmse.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario and, optionally, a trajectory file against it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
}

fn scenario(path: &Path) -> Result<Scenario> {
    let cfg = ScenarioConfig::load(path).with_context(|| format!("loading scenario {}", path.display()))?;
    cfg.build().with_context(|| format!("building scenario {}", path.display()))
}

fn demos(path: &Path, sc: &Scenario) -> Result<ece_core::game::TrajectoryBatch> {
    let batch = load_batch(path).with_context(|| format!("reading trajectories {}", path.display()))?;
    check_batch_against(&batch, &sc.shape_game()?).with_context(|| format!("{} does not fit the scenario", path.display()))?;
    Ok(batch)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos { config, trials, seed, out } => {
            let sc = scenario(&config)?;
            let game = sc.game()?;
            let sol = solve_ece(&game, None, &sc.config.solver).context("solving the equilibrium under the true costs")?;
            let batch = sample_batch(&game, &sol.policies, trials as usize, seed).context("sampling demonstrations")?;
            save_batch(&out, &batch)?;
            println!("wrote {} trajectories of {} steps to {}", batch.len(), game.horizon, out.display());
        }
        Command::Solve { config, out_policy, trace, strict_paper } => {
            let sc = scenario(&config)?;
            let game = sc.game()?;
            let cfg = SolverConfig { strict_paper: strict_paper || sc.config.solver.strict_paper, ..sc.config.solver };
            match solve_ece(&game, None, &cfg) {
                Ok(sol) => {
                    tables::write_iteration_trace(&trace, &sol.trace, game.num_agents())?;
                    save_policies(&out_policy, &sol.policies)?;
                    let last = sol.trace.last().expect("at least one iteration");
                    println!("converged after {} iterations (deviation {:e})", sol.trace.len(), last.max_deviation);
                }
                Err(Error::NonConvergence { trace: partial }) => {
                    tables::write_iteration_trace(&trace, &partial, game.num_agents())?;
                    bail!("solver did not converge within {} iterations; partial trace written", partial.len());
                }
                Err(e) => return Err(e).context("solving the equilibrium"),
            }
        }
        Command::Sample { config, policy, trials, seed, out } => {
            let sc = scenario(&config)?;
            let game = sc.shape_game()?;
            let policies = load_policies(&policy).with_context(|| format!("reading policy {}", policy.display()))?;
            policies.check_game(&game).context("policy does not fit the scenario")?;
            let batch = sample_batch(&game, &policies, trials as usize, seed)?;
            save_batch(&out, &batch)?;
            println!("wrote {} trajectories to {}", batch.len(), out.display());
        }
        Command::Learn { config, demos: demo_path, mode, lr, samples, seed, out_weights, trace } => {
            let sc = scenario(&config)?;
            let basis = sc.require_basis()?.clone();
            let batch = demos(&demo_path, &sc)?;
            let mut cfg = sc.config.learner;
            if let Some(m) = mode {
                cfg.mode = match m {
                    Mode::Joint => LearnMode::Joint,
                    Mode::Independent => LearnMode::Independent,
                };
            }
            cfg.learning_rate = lr.unwrap_or(cfg.learning_rate);
            cfg.samples = samples.unwrap_or(cfg.samples);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let init = WeightVector::ones(&basis);
            let game = sc.game_with_weights(&init)?;
            let outcome = run_mairl(&game, &basis, &batch, &init, &cfg, &sc.config.solver)?;
            tables::write_learn_trace(&trace, &outcome.trace, &basis)?;
            let mut file = WeightsFile::new(&basis, &outcome.weights);
            file.converged = Some(outcome.converged);
            file.iteration = Some(outcome.iteration);
            file.save(&out_weights)?;
            let residuals: Vec<String> = outcome
                .trace
                .records
                .iter()
                .filter(|r| r.iteration == outcome.iteration)
                .map(|r| format!("agent {}: {:.4}", r.agent + 1, r.residual))
                .collect();
            println!(
                "{} at iteration {}; feature-matching residuals {}",
                if outcome.converged { "converged" } else { "not converged, best sweep" },
                outcome.iteration,
                residuals.join(", ")
            );
        }
        Command::Eval { config, demos: demo_path, weights, trials, seed, out } => {
            let sc = scenario(&config)?;
            let basis = sc.require_basis()?.clone();
            let batch = demos(&demo_path, &sc)?;
            let w = WeightsFile::load(&weights, &basis).with_context(|| format!("reading weights {}", weights.display()))?;
            let game = sc.game_with_weights(&w)?;
            // Start at the demonstrated mean so the equilibrium near observed play is evaluated.
            let start = AffineGaussianPolicySet::along(&batch.mean_trajectory()?);
            let sol = solve_ece(&game, Some(&start), &sc.config.solver).context("solving under the given weights")?;
            let model = sample_batch(&game, &sol.policies, trials as usize, seed)?;
            std::fs::create_dir_all(&out)?;
            let kl = kl_divergence_per_feature(&batch, &model, &basis, &sc.config.histogram)?;
            tables::write_kl(&out.join("kl.csv"), &kl, &basis)?;
            let goals: Option<Vec<Vec<f64>>> = (0..basis.num_agents()).map(|i| basis.goal(i).map(<[f64]>::to_vec)).collect();
            if let Some(goals) = goals {
                tables::write_goal_distances(&out.join("goal_distance_demo.csv"), &goal_distance_stats(&batch, &sc.positions, &goals)?)?;
                tables::write_goal_distances(&out.join("goal_distance_model.csv"), &goal_distance_stats(&model, &sc.positions, &goals)?)?;
            }
            let reference = batch.mean_trajectory()?;
            tables::write_rmse(&out.join("rmse.csv"), &trajectory_rmse(&reference, &model, &sc.positions, game.horizon)?)?;
            let worst = kl.iter().flatten().cloned().fold(0.0, f64::max);
            println!("KL(demo || model) max over features {worst:.4}; tables written to {}", out.display());
        }
        Command::Validate { config, trajectories } => {
            let sc = scenario(&config)?;
            let game = sc.shape_game()?;
            println!(
                "scenario ok: {} agents, state dimension {}, horizon {}",
                game.num_agents(),
                game.state_dim(),
                game.horizon
            );
            if let Some(path) = trajectories {
                let batch = demos(&path, &sc)?;
                println!("trajectories ok: {} trials of {} steps", batch.len(), game.horizon);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
