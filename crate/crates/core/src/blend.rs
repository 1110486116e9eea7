//! The blended policy `h = (g, φ, f)`: the network acts when the monitor can
//! show its successor box stays inside `φ`, otherwise the shield acts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envmodel::EnvModel;
use crate::error::{check_dim, Result};
use crate::geometry::Hyperbox;
use crate::neural::{dagger_imitate, new_actor, DaggerConfig, Mlp};
use crate::shield::PwlShield;
use crate::verifier::Invariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendedPolicy {
    pub shield: PwlShield,
    pub invariant: Invariant,
    pub actor: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActLog {
    pub action: Vec<f64>,
    /// The safety indicator `Z`: true when the network's action was executed.
    pub used_network: bool,
}

/// Executes `proposed` if `P#(s, proposed)` is covered by `invariant`,
/// otherwise the shield's action.
pub fn monitor(
    env: &EnvModel,
    shield: &PwlShield,
    invariant: &Invariant,
    s: &[f64],
    proposed: &[f64],
) -> Result<ActLog> {
    check_dim(env.state_dim, s.len())?;
    check_dim(env.action_dim, proposed.len())?;
    let post = env.worst_case_post(&Hyperbox::point(s), &Hyperbox::point(proposed))?;
    if invariant.covers_box(&post) {
        Ok(ActLog {
            action: env.clip_action(proposed),
            used_network: true,
        })
    } else {
        Ok(ActLog {
            action: shield.eval(s, &env.action_bounds)?,
            used_network: false,
        })
    }
}

impl BlendedPolicy {
    pub fn act(&self, env: &EnvModel, s: &[f64]) -> Result<ActLog> {
        let proposed = self.actor.forward(s)?;
        monitor(env, &self.shield, &self.invariant, s, &proposed)
    }
}

/// `(g, φ, f)` with `f` a fresh network trained by DAgger to imitate `g`.
pub fn lift<R: Rng + ?Sized>(
    shield: PwlShield,
    invariant: Invariant,
    env: &EnvModel,
    hidden: &[usize],
    cfg: &DaggerConfig,
    rng: &mut R,
) -> Result<BlendedPolicy> {
    let student = new_actor(env, hidden, rng)?;
    let actor = dagger_imitate(
        student,
        |s| shield.eval(s, &env.action_bounds),
        env,
        cfg,
        rng,
    )?;
    Ok(BlendedPolicy {
        shield,
        invariant,
        actor,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RolloutStats {
    pub episodes: usize,
    pub steps: usize,
    /// Discounted cost of each episode.
    pub costs: Vec<f64>,
    pub mean_cost: f64,
    pub violations: usize,
    pub episode_violations: Vec<usize>,
    /// Fraction of steps on which the shield acted, `mean(1 − Z)`.
    pub zeta: f64,
    /// Per-episode shield fraction.
    pub zetas: Vec<f64>,
    /// Network steps whose realised successor left the invariant.
    pub monitor_failures: usize,
}

/// Runs full episodes of `h`, checking after each network step that the
/// realised successor lies in `φ`.
pub fn rollout<R: Rng + ?Sized>(
    h: &BlendedPolicy,
    env: &EnvModel,
    episodes: usize,
    rng: &mut R,
) -> Result<RolloutStats> {
    run_episodes(env, episodes, rng, Some(&h.invariant), |s| h.act(env, s))
}

/// Runs full episodes of the shield alone (`Z = 0` throughout).
pub fn rollout_shield<R: Rng + ?Sized>(
    g: &PwlShield,
    env: &EnvModel,
    episodes: usize,
    rng: &mut R,
) -> Result<RolloutStats> {
    run_episodes(env, episodes, rng, None, |s| {
        Ok(ActLog {
            action: g.eval(s, &env.action_bounds)?,
            used_network: false,
        })
    })
}

/// Runs full episodes of the bare network with no monitor (`Z = 1`).
pub fn rollout_actor<R: Rng + ?Sized>(
    actor: &Mlp,
    env: &EnvModel,
    episodes: usize,
    rng: &mut R,
) -> Result<RolloutStats> {
    run_episodes(env, episodes, rng, None, |s| {
        Ok(ActLog {
            action: env.clip_action(&actor.forward(s)?),
            used_network: true,
        })
    })
}

fn run_episodes<R, F>(
    env: &EnvModel,
    episodes: usize,
    rng: &mut R,
    invariant: Option<&Invariant>,
    mut policy: F,
) -> Result<RolloutStats>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<ActLog>,
{
    let mut stats = RolloutStats::default();
    let mut shield_steps = 0usize;
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let (mut cost, mut discount, mut ep_shield, mut ep_viol) = (0.0, 1.0, 0usize, 0usize);
        for _ in 0..env.episode_len {
            let log = policy(&s)?;
            let tr = env.step(&s, &log.action, rng)?;
            cost += discount * tr.cost;
            discount *= env.gamma;
            if tr.violated {
                ep_viol += 1;
            }
            if !log.used_network {
                ep_shield += 1;
            } else if invariant.is_some_and(|inv| !inv.contains(&tr.next_state)) {
                stats.monitor_failures += 1;
            }
            s = tr.next_state;
        }
        stats.costs.push(cost);
        stats.violations += ep_viol;
        stats.episode_violations.push(ep_viol);
        stats.zetas.push(ep_shield as f64 / env.episode_len as f64);
        shield_steps += ep_shield;
        stats.steps += env.episode_len;
        stats.episodes += 1;
    }
    if episodes > 0 {
        stats.mean_cost = stats.costs.iter().sum::<f64>() / episodes as f64;
        stats.zeta = shield_steps as f64 / stats.steps as f64;
    }
    Ok(stats)
}
