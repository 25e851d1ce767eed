use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::metrics::Episode;
use super::{push_and_sample, select_action, Agent, AgentError, Experience, MetricsWriter, ReplayBuffer, RunMetrics};
use crate::autodiff::Adam;
use crate::config::RunConfig;
use crate::distributions::precision_softmax;
use crate::env::{Action, DSpritesEnv};
use crate::nets::checkpoint;
use crate::objectives::Polarity;

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
    /// Recorded in `run.json`.
    pub git_describe: String,
}

impl RunPaths {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("run.json")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.fewb")
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    git_describe: &'a str,
    seed: u64,
    status: &'a str,
    iterations: u64,
    crashed: bool,
    crash_reason: Option<&'a str>,
}

fn write_manifest(paths: &RunPaths, cfg: &RunConfig, metrics: &RunMetrics, status: &str) -> Result<(), AgentError> {
    let manifest = Manifest {
        config: cfg,
        git_describe: &paths.git_describe,
        seed: cfg.training.seed,
        status,
        iterations: metrics.iterations(),
        crashed: metrics.crashed,
        crash_reason: metrics.crash_reason.as_deref(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(paths.manifest(), text + "\n").map_err(|e| AgentError::io(format!("writing {}", paths.manifest().display()), e))
}

pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub agent: Agent,
}

/// Builds the agent a run config describes, with freshly initialized weights.
pub fn build_agent(cfg: &RunConfig) -> Result<Agent, AgentError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    init_rng.set_stream(1);
    Agent::new(
        cfg.agent,
        &cfg.networks,
        cfg.env.obs_dim(),
        cfg.env.frame_dim(),
        cfg.objective.clone(),
        cfg.selection.clone(),
        Adam::with_lr(cfg.training.lr),
        cfg.training.target_sync,
        &mut init_rng,
    )
}

fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("iter_{iteration:08}.fewb"))
}

/// Runs the action-perception loop for `cfg.training.iterations` steps:
/// select, execute, store, learn, and reset when an episode ends.
///
/// With `paths`, metrics are streamed to CSV, checkpoints are written
/// periodically and at the end, and `run.json` records the outcome. A
/// numerical failure stops the loop and is recorded as a crash rather than
/// returned as an error.
pub fn run_training(cfg: &RunConfig, paths: Option<&RunPaths>) -> Result<RunOutcome, AgentError> {
    cfg.validate().map_err(|e| AgentError::Config(e.to_string()))?;
    let t = &cfg.training;
    let mut agent = build_agent(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut env_rng = ChaCha8Rng::seed_from_u64(cfg.env.seed.unwrap_or(t.seed));
    env_rng.set_stream(2);
    let mut env = DSpritesEnv::new(cfg.env.clone())?;
    let mut buffer = ReplayBuffer::new(t.buffer_capacity);
    let mut metrics = RunMetrics::new(cfg.agent);

    let mut writer = match paths {
        Some(p) => {
            fs::create_dir_all(p.checkpoints())
                .map_err(|e| AgentError::io(format!("creating {}", p.checkpoints().display()), e))?;
            write_manifest(p, cfg, &metrics, "running")?;
            let file = fs::File::create(p.metrics())
                .map_err(|e| AgentError::io(format!("creating {}", p.metrics().display()), e))?;
            Some(MetricsWriter::new(file).map_err(|e| AgentError::io("writing metrics", e.into()))?)
        }
        None => None,
    };
    let log = |writer: &mut Option<MetricsWriter<fs::File>>, metrics: &RunMetrics| -> Result<(), AgentError> {
        if let Some(w) = writer {
            w.log(metrics).map_err(|e| AgentError::io("writing metrics", e.into()))?;
        }
        Ok(())
    };

    let polarity = cfg.objective.selection_polarity;
    let mut obs = env.reset(&mut env_rng);
    let (mut ep_reward, mut ep_len) = (0.0, 0u32);
    for i in 0..t.iterations {
        if t.fault_at == Some(i) {
            agent.poison();
        }
        let sel = match select_action(&agent.selection, &agent.nets, &obs, i, polarity, &mut rng) {
            Ok(s) if s.critic.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite())) => s,
            Ok(_) => {
                metrics.crashed = true;
                metrics.crash_reason = Some(format!("non-finite critic output at iteration {i}"));
                break;
            }
            Err(e) if e.is_numeric() => {
                metrics.crashed = true;
                metrics.crash_reason = Some(format!("iteration {i}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let entropy = sel.critic.as_ref().map_or(f64::NAN, |g| {
            precision_softmax(g, cfg.objective.zeta, polarity == Polarity::Min).entropy()
        });
        let step = env.step(Action::from_index(sel.action).expect("action in range"))?;
        ep_reward += step.reward;
        ep_len += 1;
        let exp = Experience {
            obs: obs.clone(),
            action: sel.action,
            next_obs: step.observation.clone(),
            reward: step.reward,
            done: step.done,
        };
        let batch = push_and_sample(&mut buffer, exp, t.batch_size, t.warmup, &mut rng);
        if !batch.is_empty() {
            match agent.learn(&batch, &mut rng) {
                Ok(stats) => {
                    if let Some(v) = stats.vfe {
                        metrics.vfe.push((i, v));
                    }
                    if let Some(l) = stats.critic_loss {
                        metrics.critic_loss.push((i, l));
                    }
                }
                Err(e) if e.is_numeric() => {
                    metrics.crashed = true;
                    metrics.crash_reason = Some(format!("iteration {i}: {e}"));
                }
                Err(e) => return Err(e),
            }
        }
        metrics.actions.push(sel.action as u8);
        metrics.explored.push(sel.explored);
        metrics.entropy_prior.push(entropy);
        metrics.epsilon.push(sel.epsilon);
        if step.done {
            metrics.episodes.push(Episode {
                end: i + 1,
                reward: ep_reward,
                length: ep_len,
            });
            ep_reward = 0.0;
            ep_len = 0;
            obs = env.reset(&mut env_rng);
        } else {
            obs = step.observation;
        }
        if metrics.crashed {
            break;
        }
        if (i + 1) % t.log_every == 0 {
            log(&mut writer, &metrics)?;
        }
        if let Some(p) = paths {
            if t.checkpoint_every > 0 && (i + 1) % t.checkpoint_every == 0 {
                checkpoint::save(&agent.nets, &checkpoint_path(&p.checkpoints(), i + 1))?;
            }
        }
    }
    log(&mut writer, &metrics)?;
    if let Some(p) = paths {
        checkpoint::save(&agent.nets, &p.final_checkpoint())?;
        write_manifest(p, cfg, &metrics, if metrics.crashed { "crashed" } else { "completed" })?;
    }
    Ok(RunOutcome { metrics, agent })
}
