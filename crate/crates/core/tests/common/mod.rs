//! Helpers shared by the integration tests: concrete simulation that stays
//! inside the worst-case disturbance but pushes it to its corners.
#![allow(dead_code)]

use rand::Rng;
use shieldcraft::envmodel::{EnvModel, Simulator};
use shieldcraft::geometry::Hyperbox;
use shieldcraft::shield::PwlShield;

/// A uniform point of `bx`, or one of its vertices a quarter of the time.
pub fn sample_start<R: Rng + ?Sized>(bx: &Hyperbox, rng: &mut R) -> Vec<f64> {
    if rng.random_bool(0.25) {
        vertex(bx, rng)
    } else {
        bx.sample(rng)
    }
}

pub fn vertex<R: Rng + ?Sized>(bx: &Hyperbox, rng: &mut R) -> Vec<f64> {
    (0..bx.dim())
        .map(|k| {
            if rng.random_bool(0.5) {
                bx.lo()[k]
            } else {
                bx.hi()[k]
            }
        })
        .collect()
}

/// One concrete transition. Affine modes draw the disturbance from a vertex
/// of its box half the time; the pendulum uses its exact simulator.
pub fn adversarial_step<R: Rng + ?Sized>(
    env: &EnvModel,
    s: &[f64],
    a: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    match env.simulator {
        Simulator::PiecewiseAffine => {
            let mode = &env.modes[env.mode_index(s).expect("state in some mode")];
            let a = env.clip_action(a);
            let x: Vec<f64> = s.iter().chain(&a).copied().collect();
            let w = if rng.random_bool(0.5) {
                vertex(&mode.disturbance, rng)
            } else {
                mode.disturbance.sample(rng)
            };
            let next: Vec<f64> = mode
                .dynamics
                .apply(&x)
                .iter()
                .zip(&w)
                .map(|(n, w)| n + w)
                .collect();
            env.clip_state(&next)
        }
        Simulator::Pendulum { .. } => env.step(s, a, rng).unwrap().next_state,
    }
}

/// Number of `rollouts` closed-loop runs of `g` from `start` that reach an
/// unsafe state within `horizon` steps.
pub fn mc_unsafe_hits<R: Rng + ?Sized>(
    env: &EnvModel,
    g: &PwlShield,
    start: &Hyperbox,
    horizon: usize,
    rollouts: usize,
    rng: &mut R,
) -> usize {
    let mut hits = 0;
    for _ in 0..rollouts {
        let mut s = sample_start(start, rng);
        let mut bad = env.is_unsafe(&s);
        for _ in 0..horizon {
            if bad {
                break;
            }
            let a = g.eval(&s, &env.action_bounds).unwrap();
            s = adversarial_step(env, &s, &a, rng);
            bad = env.is_unsafe(&s);
        }
        hits += bad as usize;
    }
    hits
}
