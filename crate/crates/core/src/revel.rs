//! The training loop: lift the initial shield into a blended policy, then
//! alternate shielded DDPG phases with shield projections.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blend::{lift, rollout, rollout_actor, rollout_shield, BlendedPolicy, RolloutStats};
use crate::envmodel::{make_env, ENV_NAMES};
use crate::error::{Error, Result};
use crate::neural::{
    dagger_imitate, ddpg_update, new_actor, Behaviour, DaggerConfig, Ddpg, TrainConfig,
    UpdateReport,
};
use crate::project::{project, ProjectConfig, SynthesisRecord};
use crate::shield::{shipped, PwlShield};
use crate::verifier::{safe_space_detailed, Invariant, DEFAULT_MAX_TRIM};

/// Extra cost of an unsafe state for the unshielded baseline.
pub const VIOLATION_PENALTY: f64 = 100.0;

pub const METRICS_HEADER: &str = "episode,cost,cum_violations,zeta,phase";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevelConfig {
    pub env: String,
    pub seed: u64,
    /// Environment steps of DDPG training, split evenly over the syntheses.
    pub total_steps: usize,
    /// Number of training phases, each followed by a shield projection.
    pub syntheses: usize,
    /// Episodes of the initial shield alone, logged before training.
    pub reference_episodes: usize,
    /// Noise-free episodes of the final policy, logged after training.
    pub eval_episodes: usize,
    /// Re-imitate the new shield with a fresh network after each projection.
    pub relift: bool,
    pub train: TrainConfig,
    pub project: ProjectConfig,
    pub dagger: DaggerConfig,
    pub out: Option<PathBuf>,
}

impl Default for RevelConfig {
    fn default() -> Self {
        RevelConfig {
            env: "road".into(),
            seed: 0,
            total_steps: 20_000,
            syntheses: 5,
            reference_episodes: 10,
            eval_episodes: 10,
            relift: false,
            train: TrainConfig::default(),
            project: ProjectConfig::default(),
            dagger: DaggerConfig::default(),
            out: None,
        }
    }
}

impl RevelConfig {
    pub fn validate(&self) -> Result<()> {
        if !ENV_NAMES.contains(&self.env.as_str()) {
            return Err(Error::UnknownEnv {
                name: self.env.clone(),
                available: ENV_NAMES.join(", "),
            });
        }
        if self.syntheses == 0 {
            return Err(Error::Config("syntheses must be positive".into()));
        }
        if !self.total_steps.is_multiple_of(self.syntheses) {
            return Err(Error::Config(format!(
                "total_steps ({}) must be divisible by syntheses ({})",
                self.total_steps, self.syntheses
            )));
        }
        self.train.validate()?;
        self.project.validate()?;
        self.dagger.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Revel,
    /// REVEL with the projection replaced by the identity.
    StaticShield,
    /// Plain DDPG with a violation penalty and no monitor.
    DdpgUnshielded,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Revel, Method::StaticShield, Method::DdpgUnshielded];

    pub fn name(self) -> &'static str {
        match self {
            Method::Revel => "revel",
            Method::StaticShield => "static-shield",
            Method::DdpgUnshielded => "ddpg-unshielded",
        }
    }

    pub fn is_shielded(self) -> bool {
        self != Method::DdpgUnshielded
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    /// Discounted episode cost.
    pub cost: f64,
    pub cum_violations: usize,
    /// Fraction of steps on which the shield acted.
    pub zeta: f64,
    pub phase: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub network_update_secs: f64,
    pub shield_update_secs: f64,
}

/// A shield with the invariant certified for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShieldCheckpoint {
    #[serde(flatten)]
    pub shield: PwlShield,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant: Option<Invariant>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub method: Method,
    pub env: String,
    pub seed: u64,
    pub episodes: Vec<EpisodeRow>,
    pub timing: Timing,
    pub violations: usize,
    /// Training and evaluation steps on which the network acted.
    pub network_steps: usize,
    /// Network steps whose realised successor left the invariant.
    pub monitor_failures: usize,
    pub reference_cost: f64,
    pub final_cost: f64,
    pub final_zeta: f64,
    pub syntheses: Vec<SynthesisRecord>,
    /// The initial shield and every projection result, in order.
    pub checkpoints: Vec<ShieldCheckpoint>,
    #[serde(skip)]
    unlogged: usize,
}

impl RunMetrics {
    fn push_episode(&mut self, cost: f64, violations: usize, zeta: f64, phase: &str) {
        self.violations += violations;
        self.episodes.push(EpisodeRow {
            episode: self.episodes.len(),
            cost,
            cum_violations: self.violations,
            zeta,
            phase: phase.into(),
        });
    }

    fn push_rollout(
        &mut self,
        stats: &RolloutStats,
        phase: &str,
        per_episode_violations: &[usize],
    ) {
        for (k, (c, z)) in stats.costs.iter().zip(&stats.zetas).enumerate() {
            self.push_episode(
                *c,
                per_episode_violations.get(k).copied().unwrap_or(0),
                *z,
                phase,
            );
        }
        self.monitor_failures += stats.monitor_failures;
    }

    fn push_update(&mut self, report: &UpdateReport) {
        for ep in &report.episodes {
            self.push_episode(ep.cost, ep.violations, ep.zeta, "train");
        }
        // An episode can straddle phases; its violations are logged when it ends.
        let logged: usize = report.episodes.iter().map(|e| e.violations).sum();
        self.unlogged = (self.unlogged + report.violations).saturating_sub(logged);
        self.network_steps += report.network_steps;
        self.monitor_failures += report.monitor_failures;
    }

    /// `metrics.csv` contents.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.episode, r.cost, r.cum_violations, r.zeta, r.phase
            );
        }
        out
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.method,
            env: self.env.clone(),
            seed: self.seed,
            violations: self.violations,
            monitor_failures: self.monitor_failures,
            reference_cost: self.reference_cost,
            final_cost: self.final_cost,
            final_zeta: self.final_zeta,
            shield_components: self.checkpoints.last().map_or(0, |c| c.shield.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub env: String,
    pub seed: u64,
    pub violations: usize,
    pub monitor_failures: usize,
    pub reference_cost: f64,
    pub final_cost: f64,
    pub final_zeta: f64,
    pub shield_components: usize,
}

pub struct RunOutput {
    pub policy: BlendedPolicy,
    pub critic: crate::neural::Mlp,
    pub metrics: RunMetrics,
}

/// Full REVEL training run.
pub fn train_revel(cfg: &RevelConfig) -> Result<RunOutput> {
    train(Method::Revel, cfg)
}

/// One of the two baselines, with the same logging as [`train_revel`].
pub fn train_baseline(method: Method, cfg: &RevelConfig) -> Result<RunOutput> {
    if method == Method::Revel {
        return Err(Error::Config("`revel` is not a baseline".into()));
    }
    train(method, cfg)
}

pub fn train(method: Method, cfg: &RevelConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let env = make_env(&cfg.env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = RunMetrics {
        method,
        env: cfg.env.clone(),
        seed: cfg.seed,
        episodes: Vec::new(),
        timing: Timing::default(),
        violations: 0,
        network_steps: 0,
        monitor_failures: 0,
        reference_cost: 0.0,
        final_cost: 0.0,
        final_zeta: 0.0,
        syntheses: Vec::new(),
        checkpoints: Vec::new(),
        unlogged: 0,
    };

    let clock = Instant::now();
    let g0 = shipped(&cfg.env)?;
    let phi0 = safe_space_detailed(&env, &g0, DEFAULT_MAX_TRIM)?.invariant;
    metrics.timing.shield_update_secs += clock.elapsed().as_secs_f64();
    metrics.checkpoints.push(ShieldCheckpoint {
        shield: g0.clone(),
        invariant: Some(phi0.clone()),
    });

    let reference = rollout_shield(&g0, &env, cfg.reference_episodes, &mut rng)?;
    metrics.reference_cost = reference.mean_cost;
    metrics.push_rollout(&reference, "reference", &reference.episode_violations);

    let clock = Instant::now();
    let mut h = if method.is_shielded() {
        lift(g0, phi0, &env, &cfg.train.hidden, &cfg.dagger, &mut rng)?
    } else {
        BlendedPolicy {
            actor: new_actor(&env, &cfg.train.hidden, &mut rng)?,
            shield: g0,
            invariant: phi0,
        }
    };
    let mut agent = Ddpg::new(&env, h.actor.clone(), cfg.train.clone(), &mut rng)?;
    metrics.timing.network_update_secs += clock.elapsed().as_secs_f64();

    let interval = cfg.total_steps / cfg.syntheses;
    for _ in 0..cfg.syntheses {
        let clock = Instant::now();
        let behaviour = if method.is_shielded() {
            Behaviour::Shielded {
                shield: &h.shield,
                invariant: &h.invariant,
            }
        } else {
            Behaviour::Raw {
                penalty: VIOLATION_PENALTY,
            }
        };
        let report = ddpg_update(&mut agent, behaviour, &env, interval, &mut rng)?;
        metrics.timing.network_update_secs += clock.elapsed().as_secs_f64();
        metrics.push_update(&report);

        if method != Method::Revel {
            continue;
        }
        let clock = Instant::now();
        h.actor = agent.actor.clone();
        let proj = project(&env, &h, agent.visited.states(), &cfg.project, &mut rng)?;
        let changed = proj.record.chosen.is_some() && !proj.record.reverted;
        h.shield = proj.shield;
        h.invariant = proj.invariant;
        metrics.timing.shield_update_secs += clock.elapsed().as_secs_f64();
        metrics.syntheses.push(proj.record);
        metrics.checkpoints.push(ShieldCheckpoint {
            shield: h.shield.clone(),
            invariant: Some(h.invariant.clone()),
        });
        if cfg.relift && changed {
            let clock = Instant::now();
            let student = new_actor(&env, &cfg.train.hidden, &mut rng)?;
            let shield = &h.shield;
            agent.actor = dagger_imitate(
                student,
                |s| shield.eval(s, &env.action_bounds),
                &env,
                &cfg.dagger,
                &mut rng,
            )?;
            metrics.timing.network_update_secs += clock.elapsed().as_secs_f64();
        }
    }
    h.actor = agent.actor.clone();
    metrics.violations += std::mem::take(&mut metrics.unlogged);

    let eval = if method.is_shielded() {
        rollout(&h, &env, cfg.eval_episodes, &mut rng)?
    } else {
        rollout_actor(&h.actor, &env, cfg.eval_episodes, &mut rng)?
    };
    metrics.final_cost = eval.mean_cost;
    metrics.final_zeta = eval.zeta;
    metrics.network_steps += eval.steps - (eval.zeta * eval.steps as f64).round() as usize;
    metrics.push_rollout(&eval, "eval", &eval.episode_violations);

    Ok(RunOutput {
        policy: h,
        critic: agent.critic.clone(),
        metrics,
    })
}

/// Writes `metrics.csv`, `timing.json`, `summary.json`, `synthesis_log.json`,
/// `policy.json`, `critic.json` and `checkpoints/shield_<k>.json` under `dir`.
pub fn write_outputs(dir: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    let m = &run.metrics;
    fs::write(dir.join("metrics.csv"), m.to_csv())?;
    fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&m.timing)?,
    )?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&m.summary())?,
    )?;
    fs::write(
        dir.join("synthesis_log.json"),
        serde_json::to_string_pretty(&m.syntheses)?,
    )?;
    fs::write(dir.join("policy.json"), serde_json::to_string(&run.policy)?)?;
    fs::write(dir.join("critic.json"), serde_json::to_string(&run.critic)?)?;
    for (k, c) in m.checkpoints.iter().enumerate() {
        fs::write(
            dir.join("checkpoints").join(format!("shield_{k}.json")),
            serde_json::to_string_pretty(c)?,
        )?;
    }
    Ok(())
}
