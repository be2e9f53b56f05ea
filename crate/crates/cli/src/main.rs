use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use crl_core::analysis::{
    central_free_cell, export_representations, gradient_similarity, probe_critic,
    write_similarity_csv, ProbeReport, DEFAULT_PROBE_SAMPLES, DEFAULT_RIDGE,
};
use crl_core::critic::ContrastiveCritic;
use crl_core::envs::{Cell, MazeLayout, TabularMdp};
use crl_core::harness::{
    default_threads, evaluate, generate_expert_dataset, load_agent, resume_online, train_offline,
    train_online, EnvConfig, ExperimentConfig, ExpertConfig,
};
use crl_core::numcore::{rng_stream, Streams};
use crl_core::oracle::{identity_checks, policy_improvement_audit, CriticSource, TabularPolicy};
use crl_core::replay::{sidecar_path, write_dataset};
use ndarray::Array2;

#[derive(Parser)]
#[command(
    name = "crl",
    version,
    about = "Contrastive goal-conditioned RL experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Online training run.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint of an earlier run; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Training on a fixed dataset.
    TrainOffline {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `offline.dataset` from the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic-policy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Defaults to the run's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Exact tabular identities and the policy-improvement audit.
    OracleCheck {
        /// `<maze>`, `grid:<maze>`, `chain:<n>` or `random:<S>x<A>`.
        #[arg(long)]
        env: String,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `uniform` or `random`.
        #[arg(long, default_value = "uniform")]
        policy: String,
    },
    /// Linear probe of the critic's state-action features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Point maze name; defaults to the checkpoint's environment.
        #[arg(long)]
        env: Option<String>,
        /// Goal cell as `row,col`; defaults to the free cell nearest the maze centre.
        #[arg(long)]
        goal: Option<String>,
        #[arg(long, default_value_t = DEFAULT_PROBE_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_RIDGE)]
        ridge: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also probe a freshly initialized critic of the same shape.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes representation CSVs and a gradient-similarity matrix.
    ExportRepr {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Noisy shortest-path expert trajectories for offline training.
    GenerateDataset {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        #[arg(long, default_value_t = 0.0)]
        start_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let c = ExperimentConfig::load(path)?;
    c.validate()?;
    Ok(c)
}

fn first_critic(path: &Path) -> Result<(ExperimentConfig, ContrastiveCritic)> {
    let (config, agent, _) = load_agent(path)?;
    let critic = agent.critics.first().cloned().ok_or_else(|| {
        crl_core::Error::Config(format!("{} agents have no critic", config.agent.variant))
    })?;
    Ok((config, critic))
}

fn parse_cell(s: &str) -> Result<Cell> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| crl_core::Error::Config(format!("goal `{s}` is not `row,col`")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| crl_core::Error::Config(format!("goal `{s}`: {e}")))
    };
    Ok((parse(r)?, parse(c)?))
}

fn maze_layout(name: &str) -> Result<MazeLayout> {
    Ok(MazeLayout::builtin(name).ok_or_else(|| {
        crl_core::Error::Config(format!(
            "`{name}` is not a point maze ({:?})",
            MazeLayout::BUILTIN
        ))
    })??)
}

fn oracle_mdp(env: &str, gamma: f64, seed: u64) -> Result<TabularMdp> {
    let bad = || crl_core::Error::Config(format!("cannot parse environment `{env}`"));
    if let Some(n) = env.strip_prefix("chain:") {
        return Ok(TabularMdp::chain(n.parse().map_err(|_| bad())?, gamma)?);
    }
    if let Some(dims) = env.strip_prefix("random:") {
        let (s, a) = dims.split_once('x').ok_or_else(bad)?;
        let mut rng = rng_stream(seed, Streams::Env);
        return Ok(TabularMdp::random(
            s.parse().map_err(|_| bad())?,
            a.parse().map_err(|_| bad())?,
            gamma,
            &mut rng,
        )?);
    }
    let name = env.strip_prefix("grid:").unwrap_or(env);
    Ok(TabularMdp::from_maze(&maze_layout(name)?, gamma)?)
}

fn oracle_check(env: &str, gamma: f64, seed: u64, policy: &str) -> Result<bool> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(
            crl_core::Error::Config(format!("gamma must lie in [0, 1), got {gamma}")).into(),
        );
    }
    let mdp = oracle_mdp(env, gamma, seed)?;
    let (n, na) = (mdp.num_states(), mdp.num_actions());
    let pol = match policy {
        "uniform" => TabularPolicy::uniform(n, na),
        "random" => TabularPolicy::random(n, na, &mut rng_stream(seed, Streams::Init)),
        other => return Err(crl_core::Error::Config(format!("unknown policy `{other}`")).into()),
    };
    println!("{env}: {n} states, {na} actions, gamma {gamma}");
    let mut ok = true;
    for c in identity_checks(&mdp, &pol, gamma)? {
        ok &= c.passed;
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<36} max_abs_error {:.3e} (tol {:.0e})",
            c.name, c.max_abs_error, c.tolerance
        );
    }
    for source in [CriticSource::AveragedPolicy, CriticSource::PerGoal] {
        let r = policy_improvement_audit(&mdp, &pol, gamma, source)?;
        ok &= r.passed;
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} audit {:<30} epsilon_hat {:.3e} worst_improvement {:.3e} bound {:.3e}",
            format!("{source:?}"),
            r.epsilon_hat,
            r.worst_improvement,
            -r.slack
        );
    }
    Ok(ok)
}

/// Point-maze cell centres or tabular one-hot states.
fn export_inputs(env: &EnvConfig, observation_dim: usize) -> Result<Array2<f64>> {
    if let Some(layout) = MazeLayout::builtin(&env.name) {
        let cells = layout?.free_cells();
        Ok(Array2::from_shape_fn((cells.len(), 2), |(i, j)| {
            let (r, c) = cells[i];
            if j == 0 {
                c as f64 + 0.5
            } else {
                r as f64 + 0.5
            }
        }))
    } else {
        Ok(Array2::eye(observation_dim))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
        } => {
            let summary = match (resume, config) {
                (Some(ckpt), config) => {
                    if let Some(path) = config {
                        let given = load_config(&path)?;
                        let (stored, _, _) = load_agent(&ckpt)?;
                        if given.hash() != stored.hash() {
                            bail!(crl_core::Error::Config(
                                "--config differs from the checkpoint's configuration".into()
                            ));
                        }
                    }
                    resume_online(&ckpt, &out)?
                }
                (None, Some(path)) => train_online(&load_config(&path)?, &out)?,
                (None, None) => bail!(crl_core::Error::Config(
                    "train needs --config or --resume".into()
                )),
            };
            print_json(&summary)
        }
        Command::TrainOffline {
            config,
            dataset,
            out,
        } => {
            let c = load_config(&config)?;
            let ds = match dataset {
                Some(p) => p,
                None if !c.offline.dataset.is_empty() => PathBuf::from(&c.offline.dataset),
                None => bail!(crl_core::Error::Config(
                    "no dataset given (--dataset or offline.dataset)".into()
                )),
            };
            print_json(&train_offline(&c, &ds, &out)?)
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            threads,
        } => {
            if episodes == 0 {
                bail!(crl_core::Error::Config(
                    "--episodes must be positive".into()
                ));
            }
            let (config, agent, _) = load_agent(&checkpoint)?;
            let report = evaluate(
                &config.env,
                &agent.policy,
                episodes,
                seed.unwrap_or(config.seed),
                threads.unwrap_or_else(default_threads),
            )?;
            print_json(&report)
        }
        Command::OracleCheck {
            env,
            gamma,
            seed,
            policy,
        } => {
            if oracle_check(&env, gamma, seed, &policy)? {
                Ok(())
            } else {
                Err(anyhow!("oracle checks failed"))
            }
        }
        Command::Probe {
            checkpoint,
            env,
            goal,
            samples,
            ridge,
            seed,
            baseline,
            out,
        } => {
            let (config, critic) = first_critic(&checkpoint)?;
            let name = env.unwrap_or_else(|| config.env.name.clone());
            let layout = maze_layout(&name)?;
            let goal = match goal {
                Some(g) => parse_cell(&g)?,
                None => {
                    central_free_cell(&layout).ok_or_else(|| anyhow!("maze has no free cell"))?
                }
            };
            let mut reports: Vec<ProbeReport> = vec![probe_critic(
                &critic, &layout, goal, samples, ridge, seed, "trained",
            )?];
            if baseline {
                let a = &config.agent;
                let mut rng = rng_stream(config.seed.wrapping_add(1), Streams::Init);
                let fresh = ContrastiveCritic::new(
                    critic.observation_dim(),
                    critic.action_dim(),
                    critic.goal_dim(),
                    &a.hidden,
                    a.repr_dim,
                    &mut rng,
                )?;
                reports.push(probe_critic(
                    &fresh,
                    &layout,
                    goal,
                    samples,
                    ridge,
                    seed,
                    "random_init",
                )?);
            }
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&reports)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            print_json(&reports)
        }
        Command::ExportRepr { checkpoint, out } => {
            let (config, critic) = first_critic(&checkpoint)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let states = export_inputs(&config.env, critic.observation_dim())?;
            let actions = Array2::zeros((states.nrows(), critic.action_dim()));
            let goals = states
                .slice(ndarray::s![.., ..critic.goal_dim()])
                .to_owned();
            export_representations(
                &critic,
                &states.view(),
                &actions.view(),
                &goals.view(),
                &out.join("sa_repr.csv"),
                &out.join("g_repr.csv"),
            )?;
            let probe_state = states.row(0).to_vec();
            let sim = gradient_similarity(&critic, &probe_state, &goals.view())?;
            write_similarity_csv(&out.join("similarity.csv"), &sim)?;
            println!("wrote {} inputs to {}", states.nrows(), out.display());
            Ok(())
        }
        Command::GenerateDataset {
            env,
            episodes,
            noise,
            horizon,
            start_noise,
            seed,
            out,
        } => {
            let env_config = EnvConfig {
                name: env,
                horizon,
                start_noise,
                ..EnvConfig::default()
            };
            let (meta, trajs) = generate_expert_dataset(
                &env_config,
                &ExpertConfig {
                    episodes,
                    action_noise: noise,
                    seed,
                },
            )?;
            write_dataset(&out, &meta, &trajs)?;
            println!(
                "wrote {} trajectories to {} (+ {})",
                trajs.len(),
                out.display(),
                sidecar_path(&out).display()
            );
            Ok(())
        }
    }
}

/// 1 for invalid input (arguments, config, dataset, checkpoint contents),
/// 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    use crl_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::Dataset(_) | E::Integrity(_) | E::Shape { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
