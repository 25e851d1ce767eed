//! `fewb`: train, evaluate and analyse agents from TOML run configs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fewb_core::agent::{build_agent, evaluate, run_training, AgentError, EvalPolicy, RunPaths, METRICS_HEADER};
use fewb_core::cka::{capture_activations, cka_matrix, sample_probe, CkaError};
use fewb_core::config::{presets, RunConfig};
use fewb_core::nets::checkpoint::{self, CheckpointError};
use fewb_core::tabular;

const SEED_VAR: &str = "FEWB_SEED";

#[derive(Parser)]
#[command(name = "fewb", version, about = "Deep active inference workbench")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Planner {
    Mcts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Uniformize,
    PriorShift,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent; writes run.json, metrics.csv and checkpoints/.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override training.iterations.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Play fresh episodes with a trained agent and print a JSON summary.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to load (defaults to checkpoints/final.fewb).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, value_enum)]
        planner: Option<Planner>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CKA similarity between the layers of one or more trained runs.
    Cka {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        probe: usize,
        /// Comma-separated layer labels (default: all).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact tabular epistemic-value experiments.
    Tabular {
        #[arg(long, value_enum)]
        experiment: Experiment,
        /// Number of trace points (defaults: 101 for uniformize, 24 for prior-shift).
        #[arg(long)]
        steps: Option<usize>,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project one metrics column (or `actions` for the histogram) to CSV.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        series: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one config under several seeds, each in its own process.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List the shipped presets, or write them as TOML files.
    Presets {
        #[arg(long)]
        write: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn config_err(m: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: m.to_string(),
    }
}

fn io_err(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: format!("{context}: {e}"),
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        let code = match &e {
            AgentError::Config(_) | AgentError::Env(_) => 2,
            AgentError::Io { .. } => 3,
            AgentError::Checkpoint(CheckpointError::Io(_)) => 3,
            AgentError::Checkpoint(_) => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        AgentError::Checkpoint(e).into()
    }
}

impl From<CkaError> for Failure {
    fn from(e: CkaError) -> Self {
        let code = match e {
            CkaError::UnknownLayer(_) | CkaError::EmptyProbe | CkaError::TooFewExamples(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| config_err(format!("{SEED_VAR} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(format!("reading {}", path.display()), e))?;
    let mut cfg = RunConfig::from_toml_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override()? {
        cfg.training.seed = seed;
        cfg.env.seed = Some(seed);
    }
    Ok(cfg)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn run_config(run: &Path) -> Result<RunConfig, Failure> {
    let path = run.join("run.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(format!("reading {}", path.display()), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_value(value["config"].clone())
        .map_err(|e| config_err(format!("{}: config: {e}", path.display())))?;
    cfg.validate().map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(format!("writing {}", p.display()), e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err("writing stdout", e)),
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, iterations: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(n) = iterations {
        cfg.training.iterations = n;
    }
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| config_err("no output directory: pass --out or set output_dir"))?;
    let paths = RunPaths {
        dir,
        git_describe: git_describe(),
    };
    let outcome = run_training(&cfg, Some(&paths))?;
    let m = &outcome.metrics;
    match &m.crash_reason {
        Some(reason) => eprintln!("run crashed after {} iterations: {reason}", m.iterations()),
        None => eprintln!(
            "completed {} iterations, {} episodes, cumulative reward {:.3}",
            m.iterations(),
            m.episodes.len(),
            m.cumulative_reward()
        ),
    }
    Ok(())
}

fn cmd_evaluate(
    run: &Path,
    checkpoint_path: Option<PathBuf>,
    episodes: usize,
    planner: Option<Planner>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = run_config(run)?;
    let mut agent = build_agent(&cfg)?;
    let ckpt = checkpoint_path.unwrap_or_else(|| run.join("checkpoints").join("final.fewb"));
    checkpoint::load(&mut agent.nets, &ckpt)?;
    let policy = match planner {
        Some(Planner::Mcts) => EvalPolicy::Planner(cfg.planner.clone()),
        None => EvalPolicy::Greedy(cfg.objective.selection_polarity),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let summary = evaluate(&agent.nets, &cfg.env, episodes, &policy, &mut rng)?;
    let text = serde_json::to_string_pretty(&json!({
        "run": run.display().to_string(),
        "checkpoint": ckpt.display().to_string(),
        "seed": seed,
        "summary": summary,
    }))
    .expect("summary serializes");
    write_output(out.as_deref(), &(text + "\n"))
}

fn cmd_cka(runs: &[PathBuf], probe: usize, layers: Option<Vec<String>>, seed: u64, out: &Path) -> Result<(), Failure> {
    let configs = runs.iter().map(|r| run_config(r)).collect::<Result<Vec<_>, _>>()?;
    let env = &configs[0].env;
    if let Some(c) = configs.iter().find(|c| c.env.obs_dim() != env.obs_dim()) {
        return Err(config_err(format!(
            "runs observe different shapes ({} vs {})",
            env.obs_dim(),
            c.env.obs_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_set = sample_probe(env, probe, &mut rng).map_err(config_err)?;
    let mut mats = Vec::new();
    for (i, (run, cfg)) in runs.iter().zip(&configs).enumerate() {
        let mut agent = build_agent(cfg)?;
        checkpoint::load(&mut agent.nets, &run.join("checkpoints").join("final.fewb"))?;
        let prefix = if runs.len() > 1 { format!("run{i}/") } else { String::new() };
        mats.extend(capture_activations(&agent.nets, &probe_set, layers.as_deref(), &prefix)?);
    }
    let matrix = cka_matrix(&mats)?;
    fs::create_dir_all(out).map_err(|e| io_err(format!("creating {}", out.display()), e))?;
    let csv_path = out.join("cka.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(format!("writing {}", csv_path.display()), e))?;
    let write = |w: &mut csv::Writer<fs::File>| -> csv::Result<()> {
        w.write_record(["label_row", "label_col", "value"])?;
        for (i, a) in matrix.labels.iter().enumerate() {
            for (j, b) in matrix.labels.iter().enumerate() {
                w.write_record([a.as_str(), b.as_str(), &matrix.values[i][j].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).map_err(|e| io_err(format!("writing {}", csv_path.display()), e))?;
    let meta = json!({
        "runs": runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>(),
        "probe": probe,
        "seed": seed,
        "capture": "post-activation",
        "probe_source": "uniform resets followed by random-policy steps",
        "transition_input": "encoder mean with action 0",
        "labels": matrix.labels,
    });
    let meta_path = out.join("cka.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializes") + "\n")
        .map_err(|e| io_err(format!("writing {}", meta_path.display()), e))
}

fn cmd_tabular(experiment: Experiment, steps: Option<usize>, out: Option<PathBuf>) -> Result<(), Failure> {
    let trace = match experiment {
        Experiment::Uniformize => tabular::run_experiment_uniformize(steps.unwrap_or(101)),
        Experiment::PriorShift => tabular::run_experiment_prior_shift(steps.unwrap_or(24)),
    }
    .map_err(config_err)?;
    let mut buf = Vec::new();
    tabular::write_trace_csv(&trace, &mut buf).map_err(|e| io_err("formatting trace", e))?;
    write_output(out.as_deref(), &String::from_utf8(buf).expect("utf-8"))
}

fn cmd_export(run: &Path, series: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    let wanted: Vec<&str> = match series {
        "actions" => vec!["a0", "a1", "a2", "a3"],
        s if METRICS_HEADER.contains(&s) && s != "iter" => vec![s],
        s => {
            return Err(config_err(format!(
                "unknown series {s:?}; choose one of {} or actions",
                METRICS_HEADER[1..].join(", ")
            )))
        }
    };
    let path = run.join("metrics.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| io_err(format!("reading {}", path.display()), e))?;
    let headers = r.headers().map_err(|e| io_err(format!("reading {}", path.display()), e))?.clone();
    let mut cols = vec![0];
    for name in &wanted {
        let i = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| io_err(path.display(), format!("missing column {name}")))?;
        cols.push(i);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iter"];
    header.extend(&wanted);
    w.write_record(&header).expect("in-memory write");
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(format!("reading {}", path.display()), e))?;
        w.write_record(cols.iter().map(|&i| &rec[i])).expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    write_output(out.as_deref(), &String::from_utf8(bytes).expect("utf-8"))
}

fn cmd_sweep(config: &Path, seeds: &[u64], out: &Path, jobs: usize) -> Result<(), Failure> {
    load_config(config)?;
    let exe = std::env::current_exe().map_err(|e| io_err("locating fewb", e))?;
    let mut pending: Vec<u64> = seeds.iter().rev().copied().collect();
    let mut running = Vec::new();
    let mut failed = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs.max(1) {
            let Some(seed) = pending.pop() else { break };
            let child = Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(config)
                .arg("--out")
                .arg(out.join(format!("seed{seed}")))
                .env(SEED_VAR, seed.to_string())
                .spawn()
                .map_err(|e| io_err("spawning a training run", e))?;
            running.push((seed, child));
        }
        let (seed, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| io_err("waiting for a training run", e))?;
        if !status.success() {
            failed.push((seed, status.code()));
        }
    }
    if let Some(&(seed, code)) = failed.first() {
        return Err(Failure {
            code: code.and_then(|c| u8::try_from(c).ok()).unwrap_or(1),
            message: format!("{} of {} runs failed (first: seed {seed})", failed.len(), seeds.len()),
        });
    }
    Ok(())
}

fn cmd_presets(write: Option<PathBuf>) -> Result<(), Failure> {
    let all = presets();
    match write {
        None => {
            for p in all {
                println!("{}", p.name);
            }
        }
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| io_err(format!("creating {}", dir.display()), e))?;
            for p in all {
                let path = dir.join(format!("{}.toml", p.name));
                fs::write(&path, p.config.to_toml_string())
                    .map_err(|e| io_err(format!("writing {}", path.display()), e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train { config, out, iterations } => cmd_train(&config, out, iterations),
        Cmd::Evaluate {
            run,
            checkpoint,
            episodes,
            planner,
            seed,
            out,
        } => cmd_evaluate(&run, checkpoint, episodes, planner, seed, out),
        Cmd::Cka {
            runs,
            probe,
            layers,
            seed,
            out,
        } => cmd_cka(&runs, probe, layers, seed, &out),
        Cmd::Tabular { experiment, steps, out } => cmd_tabular(experiment, steps, out),
        Cmd::Export { run, series, out } => cmd_export(&run, &series, out),
        Cmd::Sweep {
            config,
            seeds,
            out,
            jobs,
        } => cmd_sweep(&config, &seeds, &out, jobs),
        Cmd::Presets { write } => cmd_presets(write),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
