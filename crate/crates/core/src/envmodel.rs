//! Benchmark environments.
//!
//! Every environment pairs a sampled simulator with a sound piecewise-affine
//! worst-case transformer: a list of modes `(region, M, disturbance)` such that
//! any sampled successor of `(s, a)` lies in `M·[s; a] + disturbance` for the
//! mode whose region contains `s`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};
use crate::geometry::{AffineMap, Hyperbox, IntervalMatrix, LinPred, Region, FP_SLACK};

pub const ENV_NAMES: [&str; 4] = ["acc", "pendulum", "road", "obstacle2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub region: Region,
    /// Affine map over the concatenated `[state; action]` vector.
    pub dynamics: AffineMap,
    pub disturbance: Hyperbox,
}

/// Per-step cost `c(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    /// `max(s[index], floor)`
    ClippedState { index: usize, floor: f64 },
    /// `Σ q_k s_k² + Σ r_k a_k²`
    Quadratic {
        state_weights: Vec<f64>,
        action_weights: Vec<f64>,
    },
    /// `|s[index] − target|`
    AbsError { index: usize, target: f64 },
    /// Euclidean distance from `s[indices]` to `target`.
    Distance {
        indices: Vec<usize>,
        target: Vec<f64>,
    },
}

impl CostSpec {
    pub fn eval(&self, s: &[f64], a: &[f64]) -> f64 {
        match self {
            CostSpec::ClippedState { index, floor } => s[*index].max(*floor),
            CostSpec::Quadratic {
                state_weights,
                action_weights,
            } => {
                let qs: f64 = state_weights.iter().zip(s).map(|(q, x)| q * x * x).sum();
                let ra: f64 = action_weights.iter().zip(a).map(|(r, u)| r * u * u).sum();
                qs + ra
            }
            CostSpec::AbsError { index, target } => (s[*index] - target).abs(),
            CostSpec::Distance { indices, target } => indices
                .iter()
                .zip(target)
                .map(|(&k, t)| (s[k] - t).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// How the sampled simulator draws the additive disturbance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    Uniform,
    /// Zero-mean normal with per-axis standard deviation, clipped into the
    /// disturbance box.
    ClippedNormal {
        std: Vec<f64>,
    },
}

/// Concrete successor function used by `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Simulator {
    /// Use the mode's affine map plus a sampled disturbance.
    PiecewiseAffine,
    /// Exact Euler-integrated pendulum; the modes only bound `sin θ`.
    Pendulum {
        gravity_over_length: f64,
        inertia: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvModel {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub init_box: Hyperbox,
    pub unsafe_boxes: Vec<Hyperbox>,
    pub state_bounds: Hyperbox,
    pub action_bounds: Hyperbox,
    pub dt: f64,
    pub horizon: usize,
    pub episode_len: usize,
    pub gamma: f64,
    pub modes: Vec<Mode>,
    pub cost: CostSpec,
    pub noise: NoiseModel,
    pub simulator: Simulator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub cost: f64,
    pub violated: bool,
}

impl EnvModel {
    /// Checks the structural invariants every shipped model must satisfy.
    pub fn validate(&self) -> Result<()> {
        check_dim(self.state_dim, self.state_bounds.dim())?;
        check_dim(self.state_dim, self.init_box.dim())?;
        check_dim(self.action_dim, self.action_bounds.dim())?;
        if !self.state_bounds.contains_box(&self.init_box) {
            return Err(Error::InvalidBox("init_box not inside state_bounds".into()));
        }
        for u in &self.unsafe_boxes {
            check_dim(self.state_dim, u.dim())?;
            if u.intersects(&self.init_box) {
                return Err(Error::InvalidBox(format!(
                    "unsafe box {u:?} meets the initial set"
                )));
            }
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidBox("environment has no modes".into()));
        }
        for m in &self.modes {
            m.dynamics.validate()?;
            check_dim(self.state_dim + self.action_dim, m.dynamics.in_dim())?;
            check_dim(self.state_dim, m.dynamics.out_dim())?;
            check_dim(self.state_dim, m.disturbance.dim())?;
            if !m.disturbance.contains_point(&vec![0.0; self.state_dim]) {
                return Err(Error::InvalidBox(
                    "disturbance box must contain zero".into(),
                ));
            }
        }
        if self.horizon == 0 || self.episode_len == 0 {
            return Err(Error::Config(
                "horizon and episode_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.init_box.sample(rng)
    }

    pub fn mode_index(&self, s: &[f64]) -> Option<usize> {
        self.modes.iter().position(|m| m.region.contains(s))
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        clip(a, &self.action_bounds)
    }

    pub fn clip_state(&self, s: &[f64]) -> Vec<f64> {
        clip(s, &self.state_bounds)
    }

    pub fn is_unsafe(&self, s: &[f64]) -> bool {
        self.unsafe_boxes.iter().any(|u| u.contains_point(s))
    }

    pub fn box_meets_unsafe(&self, b: &Hyperbox) -> Option<&Hyperbox> {
        self.unsafe_boxes.iter().find(|u| u.intersects(b))
    }

    pub fn step<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Result<Transition> {
        check_dim(self.state_dim, s.len())?;
        check_dim(self.action_dim, a.len())?;
        let a = self.clip_action(a);
        let mode = &self.modes[self
            .mode_index(s)
            .ok_or_else(|| Error::NoMode(s.to_vec()))?];

        let mut next = match &self.simulator {
            Simulator::PiecewiseAffine => {
                let x: Vec<f64> = s.iter().chain(&a).copied().collect();
                let mut next = mode.dynamics.apply(&x);
                let w = self.sample_disturbance(&mode.disturbance, rng);
                next.iter_mut().zip(&w).for_each(|(n, w)| *n += w);
                next
            }
            Simulator::Pendulum {
                gravity_over_length,
                inertia,
            } => {
                let (theta, omega) = (s[0], s[1]);
                let accel = -gravity_over_length * theta.sin() + a[0] / inertia;
                vec![theta + self.dt * omega, omega + self.dt * accel]
            }
        };
        next = self.clip_state(&next);
        let violated = self.is_unsafe(&next);
        Ok(Transition {
            cost: self.cost.eval(s, &a),
            next_state: next,
            violated,
        })
    }

    fn sample_disturbance<R: Rng + ?Sized>(&self, bx: &Hyperbox, rng: &mut R) -> Vec<f64> {
        match &self.noise {
            NoiseModel::Uniform => bx.sample(rng),
            NoiseModel::ClippedNormal { std } => (0..bx.dim())
                .map(|k| {
                    let v = if std[k] > 0.0 {
                        Normal::new(0.0, std[k]).expect("positive std").sample(rng)
                    } else {
                        0.0
                    };
                    v.clamp(bx.lo()[k], bx.hi()[k])
                })
                .collect(),
        }
    }

    /// Sound box over `P#(s, a)` for all `s ∈ states`, `a ∈ actions`.
    pub fn worst_case_post(&self, states: &Hyperbox, actions: &Hyperbox) -> Result<Hyperbox> {
        check_dim(self.state_dim, states.dim())?;
        check_dim(self.action_dim, actions.dim())?;
        let states = states.meet(&self.state_bounds)?;
        if states.is_empty() || actions.is_empty() {
            return Ok(Hyperbox::empty(self.state_dim));
        }
        let actions = actions.clamp_into(&self.action_bounds)?;
        let mut out = Hyperbox::empty(self.state_dim);
        for m in &self.modes {
            let slice = m.region.meet_box(&states)?;
            if slice.is_empty() {
                continue;
            }
            let img = m.dynamics.image(&slice.product(&actions))?;
            out = out.join(&img.add(&m.disturbance)?)?;
        }
        out.clamp_into(&self.state_bounds)
    }

    /// Sound successor box of `states` under every controller `a = Ks + c`
    /// with `K ∈ gains`, `c ∈ offsets`.
    ///
    /// On slices where no action can saturate, the controller is folded into
    /// each mode's dynamics (`M_s + M_a·K`), which keeps the state/action
    /// correlation that a separate action box would lose. Where an action
    /// may saturate, the state space is refined on a fixed grid before
    /// falling back to the clamped action box.
    pub fn closed_loop_post(
        &self,
        states: &Hyperbox,
        gains: &IntervalMatrix,
        offsets: &Hyperbox,
    ) -> Result<Hyperbox> {
        check_dim(self.state_dim, states.dim())?;
        check_dim(self.action_dim, gains.rows())?;
        check_dim(self.state_dim, gains.cols())?;
        let states = states.meet(&self.state_bounds)?;
        if states.is_empty() {
            return Ok(Hyperbox::empty(self.state_dim));
        }
        let mut out = Hyperbox::empty(self.state_dim);
        for mode in &self.modes {
            let slice = mode.region.meet_box(&states)?;
            if slice.is_empty() {
                continue;
            }
            let img = self.closed_loop_cells(
                mode,
                &slice,
                &self.state_bounds,
                gains,
                offsets,
                SATURATION_SPLITS,
            )?;
            out = out.join(&img)?;
        }
        out.clamp_into(&self.state_bounds)
    }

    /// Closed-loop image of one mode over `slice`, refined on a dyadic grid
    /// of the state bounds. A grid cell is bisected while some action row is
    /// partly saturated on the whole cell, so the partition never depends on
    /// `slice` and the image is monotone in it.
    fn closed_loop_cells(
        &self,
        mode: &Mode,
        slice: &Hyperbox,
        cell: &Hyperbox,
        gains: &IntervalMatrix,
        offsets: &Hyperbox,
        depth: u32,
    ) -> Result<Hyperbox> {
        let part = slice.meet(cell)?;
        if part.is_empty() {
            return Ok(Hyperbox::empty(self.state_dim));
        }
        if depth > 0 {
            let actions = gains.image(offsets, cell)?;
            let (alo, ahi) = (self.action_bounds.lo(), self.action_bounds.hi());
            let partial = (0..self.action_dim).find(|&l| {
                let (lo, hi) = (actions.lo()[l], actions.hi()[l]);
                lo < ahi[l] && hi > alo[l] && (lo < alo[l] || hi > ahi[l])
            });
            if let Some(l) = partial {
                // Split the axis that drives the saturating row hardest.
                let drive =
                    |a: usize| gains.lo[l][a].abs().max(gains.hi[l][a].abs()) * cell.width(a);
                let axis = (0..self.state_dim)
                    .max_by(|&a, &b| drive(a).total_cmp(&drive(b)))
                    .unwrap_or(0);
                if drive(axis) > 0.0 {
                    let (left, right) = cell.bisect(axis);
                    let a =
                        self.closed_loop_cells(mode, slice, &left, gains, offsets, depth - 1)?;
                    let b =
                        self.closed_loop_cells(mode, slice, &right, gains, offsets, depth - 1)?;
                    return a.join(&b);
                }
            }
        }
        self.closed_loop_slice(mode, &part, gains, offsets)
    }

    /// Unrefined closed-loop image of one mode over `slice`. Action rows that
    /// are fully saturated become constants; if any row is only partly
    /// saturated, the decoupled (state box × clamped action box) image is used.
    fn closed_loop_slice(
        &self,
        mode: &Mode,
        slice: &Hyperbox,
        gains: &IntervalMatrix,
        offsets: &Hyperbox,
    ) -> Result<Hyperbox> {
        let (n, m) = (self.state_dim, self.action_dim);
        let actions = gains.image(offsets, slice)?;
        let (alo, ahi) = (self.action_bounds.lo(), self.action_bounds.hi());
        let mut k_lo = gains.lo.clone();
        let mut k_hi = gains.hi.clone();
        let mut c_lo = offsets.lo().to_vec();
        let mut c_hi = offsets.hi().to_vec();
        let mut partial = false;
        for l in 0..m {
            let (lo, hi) = (actions.lo()[l], actions.hi()[l]);
            let fixed = if lo >= ahi[l] {
                Some(ahi[l])
            } else if hi <= alo[l] {
                Some(alo[l])
            } else {
                partial |= lo < alo[l] || hi > ahi[l];
                None
            };
            if let Some(v) = fixed {
                k_lo[l].iter_mut().for_each(|x| *x = 0.0);
                k_hi[l].iter_mut().for_each(|x| *x = 0.0);
                c_lo[l] = v;
                c_hi[l] = v;
            }
        }
        if partial {
            let clamped = actions.clamp_into(&self.action_bounds)?;
            let img = mode.dynamics.image(&slice.product(&clamped))?;
            return img.add(&mode.disturbance);
        }
        let dyn_ = &mode.dynamics;
        let mut cl_lo = vec![vec![0.0; n]; n];
        let mut cl_hi = vec![vec![0.0; n]; n];
        let mut bias_lo = vec![0.0; n];
        let mut bias_hi = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let (mut lo, mut hi) = (dyn_.matrix[i][j], dyn_.matrix[i][j]);
                for l in 0..m {
                    let ma = dyn_.matrix[i][n + l];
                    let (a, b) = (ma * k_lo[l][j], ma * k_hi[l][j]);
                    lo += a.min(b);
                    hi += a.max(b);
                }
                cl_lo[i][j] = lo;
                cl_hi[i][j] = hi;
            }
            let (mut lo, mut hi) = (dyn_.bias[i], dyn_.bias[i]);
            for l in 0..m {
                let ma = dyn_.matrix[i][n + l];
                let (a, b) = (ma * c_lo[l], ma * c_hi[l]);
                lo += a.min(b);
                hi += a.max(b);
            }
            bias_lo[i] = lo - FP_SLACK;
            bias_hi[i] = hi + FP_SLACK;
        }
        let closed = IntervalMatrix {
            lo: cl_lo,
            hi: cl_hi,
        };
        let bias = Hyperbox::new(bias_lo, bias_hi)?;
        closed.image(&bias, slice)?.add(&mode.disturbance)
    }
}

fn clip(v: &[f64], bx: &Hyperbox) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(k, x)| x.clamp(bx.lo()[k], bx.hi()[k]))
        .collect()
}

/// Grid depth for partly saturated actions in the closed-loop post.
const SATURATION_SPLITS: u32 = 8;

pub fn make_env(name: &str) -> Result<EnvModel> {
    let env = match name {
        "acc" => acc(),
        "pendulum" => pendulum(),
        "road" => road(),
        "obstacle2" => obstacle2(),
        _ => {
            return Err(Error::UnknownEnv {
                name: name.to_string(),
                available: ENV_NAMES.join(", "),
            })
        }
    };
    env.validate()?;
    Ok(env)
}

const DT: f64 = 0.1;
const EPISODE_LEN: usize = 100;
const GAMMA: f64 = 0.99;
const HORIZON: usize = 50;

fn single_mode(dynamics: AffineMap, disturbance: Hyperbox) -> Vec<Mode> {
    vec![Mode {
        region: Region::all(),
        dynamics,
        disturbance,
    }]
}

/// Adaptive cruise control. State `(d, v_rel)`, action `a_ego`; the lead car's
/// acceleration `a_lead ∈ [−1, 1]` is the disturbance.
fn acc() -> EnvModel {
    // d' = d + dt·v_rel ; v_rel' = v_rel − dt·a_ego + dt·a_lead
    let dynamics = AffineMap {
        matrix: vec![vec![1.0, DT, 0.0], vec![0.0, 1.0, -DT]],
        bias: vec![0.0, 0.0],
    };
    EnvModel {
        name: "acc".into(),
        state_dim: 2,
        action_dim: 1,
        init_box: Hyperbox::from_bounds(&[(9.9, 10.1), (-0.1, 0.1)]),
        unsafe_boxes: vec![Hyperbox::from_bounds(&[(-1.0, 0.0), (-5.0, 5.0)])],
        state_bounds: Hyperbox::from_bounds(&[(-1.0, 30.0), (-5.0, 5.0)]),
        action_bounds: Hyperbox::from_bounds(&[(-2.0, 2.0)]),
        dt: DT,
        horizon: HORIZON,
        episode_len: EPISODE_LEN,
        gamma: GAMMA,
        modes: single_mode(dynamics, Hyperbox::from_bounds(&[(0.0, 0.0), (-DT, DT)])),
        cost: CostSpec::ClippedState {
            index: 0,
            floor: 0.0,
        },
        noise: NoiseModel::ClippedNormal {
            std: vec![0.0, 0.5 * DT],
        },
        simulator: Simulator::PiecewiseAffine,
    }
}

/// Affine envelope `sin θ ∈ slope·θ + offset ± half_width` on `[a, b]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineEnvelope {
    pub slope: f64,
    pub offset: f64,
    pub half_width: f64,
}

/// Fits the chord slope on `[a, b]` and centres the residual band by brute
/// force over a 10⁴-point grid. The band is widened by the grid spacing, which
/// bounds the residual's variation between grid points (its derivative is at
/// most `1 + |slope| ≤ 2`).
pub fn sine_envelope(a: f64, b: f64) -> SineEnvelope {
    const GRID: usize = 10_000;
    let slope = (b.sin() - a.sin()) / (b - a);
    let h = (b - a) / (GRID - 1) as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..GRID {
        let t = a + h * i as f64;
        let r = t.sin() - slope * t;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    SineEnvelope {
        slope,
        offset: 0.5 * (lo + hi),
        half_width: 0.5 * (hi - lo) + h,
    }
}

/// Pendulum with `θ = 0` hanging down. State `(θ, ω)`, torque `u`.
fn pendulum() -> EnvModel {
    const G_OVER_L: f64 = 10.0;
    const INERTIA: f64 = 1.0;
    let segments = [(-PI, -1.0), (-1.0, 1.0), (1.0, PI)];
    let mut modes = Vec::new();
    let mut earlier: Vec<LinPred> = Vec::new();
    for (i, &(a, b)) in segments.iter().enumerate() {
        let env = sine_envelope(a, b);
        // ω' = ω + dt·(−g/l·(slope·θ + offset + e) + u/I), e ∈ ±half_width
        let dynamics = AffineMap {
            matrix: vec![
                vec![1.0, DT, 0.0],
                vec![-DT * G_OVER_L * env.slope, 1.0, DT / INERTIA],
            ],
            bias: vec![0.0, -DT * G_OVER_L * env.offset],
        };
        let spread = DT * G_OVER_L * env.half_width;
        let mut region = Region::all();
        if i + 1 < segments.len() {
            region = region.and(LinPred::axis_le(2, 0, b));
        }
        for p in &earlier {
            region = region.and_not(std::slice::from_ref(p));
        }
        earlier.push(LinPred::axis_le(2, 0, b));
        modes.push(Mode {
            region,
            dynamics,
            disturbance: Hyperbox::from_bounds(&[(0.0, 0.0), (-spread, spread)]),
        });
    }
    EnvModel {
        name: "pendulum".into(),
        state_dim: 2,
        action_dim: 1,
        init_box: Hyperbox::from_bounds(&[(-0.3, 0.3), (-0.1, 0.1)]),
        unsafe_boxes: vec![
            Hyperbox::from_bounds(&[(-PI, PI), (1.5, 2.0)]),
            Hyperbox::from_bounds(&[(-PI, PI), (-2.0, -1.5)]),
        ],
        state_bounds: Hyperbox::from_bounds(&[(-PI, PI), (-2.0, 2.0)]),
        action_bounds: Hyperbox::from_bounds(&[(-8.0, 8.0)]),
        dt: DT,
        horizon: HORIZON,
        episode_len: EPISODE_LEN,
        gamma: GAMMA,
        modes,
        cost: CostSpec::Quadratic {
            state_weights: vec![1.0, 0.1],
            action_weights: vec![0.001],
        },
        noise: NoiseModel::Uniform,
        simulator: Simulator::Pendulum {
            gravity_over_length: G_OVER_L,
            inertia: INERTIA,
        },
    }
}

/// Point mass on a road with a speed limit. State `(p, v)`, action `a`.
fn road() -> EnvModel {
    let dynamics = AffineMap {
        matrix: vec![vec![1.0, DT, 0.0], vec![0.0, 1.0, DT]],
        bias: vec![0.0, 0.0],
    };
    EnvModel {
        name: "road".into(),
        state_dim: 2,
        action_dim: 1,
        init_box: Hyperbox::from_bounds(&[(0.0, 0.1), (0.0, 0.1)]),
        unsafe_boxes: vec![Hyperbox::from_bounds(&[(-5.0, 20.0), (2.0, 3.0)])],
        state_bounds: Hyperbox::from_bounds(&[(-5.0, 20.0), (-3.0, 3.0)]),
        action_bounds: Hyperbox::from_bounds(&[(-2.0, 2.0)]),
        dt: DT,
        horizon: HORIZON,
        episode_len: EPISODE_LEN,
        gamma: GAMMA,
        modes: single_mode(dynamics, Hyperbox::from_bounds(&[(0.0, 0.0), (0.0, 0.0)])),
        cost: CostSpec::AbsError {
            index: 0,
            target: 10.0,
        },
        noise: NoiseModel::Uniform,
        simulator: Simulator::PiecewiseAffine,
    }
}

/// Planar double integrator that must reach (5, 5) past an obstacle.
/// State `(x, y, vx, vy)`, action `(ax, ay)`.
fn obstacle2() -> EnvModel {
    let dynamics = AffineMap {
        matrix: vec![
            vec![1.0, 0.0, DT, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, DT, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, DT, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, DT],
        ],
        bias: vec![0.0; 4],
    };
    let w = 0.02;
    EnvModel {
        name: "obstacle2".into(),
        state_dim: 4,
        action_dim: 2,
        init_box: Hyperbox::from_bounds(&[(0.0, 0.2), (0.0, 0.2), (-0.05, 0.05), (-0.05, 0.05)]),
        unsafe_boxes: vec![Hyperbox::from_bounds(&[
            (2.0, 3.0),
            (2.0, 3.0),
            (-2.0, 2.0),
            (-2.0, 2.0),
        ])],
        state_bounds: Hyperbox::from_bounds(&[(-1.0, 7.0), (-1.0, 7.0), (-2.0, 2.0), (-2.0, 2.0)]),
        action_bounds: Hyperbox::from_bounds(&[(-1.0, 1.0), (-1.0, 1.0)]),
        dt: DT,
        horizon: HORIZON,
        episode_len: EPISODE_LEN,
        gamma: GAMMA,
        modes: single_mode(
            dynamics,
            Hyperbox::from_bounds(&[(0.0, 0.0), (0.0, 0.0), (-w, w), (-w, w)]),
        ),
        cost: CostSpec::Distance {
            indices: vec![0, 1],
            target: vec![5.0, 5.0],
        },
        noise: NoiseModel::Uniform,
        simulator: Simulator::PiecewiseAffine,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn make_env_shapes() {
        let acc = make_env("acc").unwrap();
        assert_eq!((acc.state_dim, acc.action_dim, acc.horizon), (2, 1, 50));
        let pend = make_env("pendulum").unwrap();
        assert_eq!(
            (pend.state_dim, pend.action_dim, pend.modes.len()),
            (2, 1, 3)
        );
        let err = make_env("unknown").unwrap_err().to_string();
        assert!(err.contains("acc") && err.contains("obstacle2"));
    }

    #[test]
    fn acc_reset_inside_init() {
        let env = make_env("acc").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let s = env.reset(&mut rng);
            assert!((9.9..=10.1).contains(&s[0]) && (-0.1..=0.1).contains(&s[1]));
        }
    }

    #[test]
    fn reset_degenerate_and_deterministic() {
        let mut env = make_env("road").unwrap();
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(42));
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        env.init_box = Hyperbox::point(&[0.05, 0.05]);
        assert_eq!(
            env.reset(&mut ChaCha8Rng::seed_from_u64(1)),
            vec![0.05, 0.05]
        );
    }

    #[test]
    fn acc_step_band() {
        let env = make_env("acc").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = env.step(&[10.0, 0.0], &[0.0], &mut rng).unwrap();
            assert_eq!(t.next_state[0], 10.0);
            assert!(t.next_state[1].abs() <= 0.1);
            assert!(!t.violated);
        }
    }

    #[test]
    fn road_step_euler() {
        let env = make_env("road").unwrap();
        let t = env
            .step(&[0.0, 0.0], &[1.0], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(t.next_state[0], 0.0);
        assert!((t.next_state[1] - 0.1).abs() < 1e-15);
        assert_eq!(t.cost, 10.0);
    }

    #[test]
    fn fixed_point_mode() {
        let mut env = make_env("road").unwrap();
        let s = [1.5, -0.5];
        env.modes = single_mode(
            AffineMap::constant(3, s.to_vec()),
            Hyperbox::from_bounds(&[(0.0, 0.0), (0.0, 0.0)]),
        );
        let t = env
            .step(&s, &[1.0], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(t.next_state, s.to_vec());
    }

    #[test]
    fn step_outside_modes_is_error() {
        let mut env = make_env("road").unwrap();
        env.modes[0].region = Region::from_preds(vec![LinPred::axis_le(2, 0, 0.0)]);
        let r = env.step(&[1.0, 0.0], &[0.0], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::NoMode(_))));
    }

    #[test]
    fn worst_case_post_examples() {
        let env = make_env("acc").unwrap();
        assert!(env
            .worst_case_post(&Hyperbox::empty(2), &Hyperbox::point(&[0.0]))
            .unwrap()
            .is_empty());

        let out = env
            .worst_case_post(
                &Hyperbox::from_bounds(&[(5.0, 6.0), (0.0, 0.0)]),
                &Hyperbox::point(&[0.0]),
            )
            .unwrap();
        let tol = 1e-8;
        assert!((out.lo()[0] - 5.0).abs() < tol && (out.hi()[0] - 6.0).abs() < tol);
        assert!((out.lo()[1] + 0.1).abs() < tol && (out.hi()[1] - 0.1).abs() < tol);

        // 1-D integrator x' = x + dt·a.
        let mut integ = make_env("road").unwrap();
        integ.state_dim = 1;
        integ.state_bounds = Hyperbox::from_bounds(&[(-10.0, 10.0)]);
        integ.init_box = Hyperbox::from_bounds(&[(0.0, 0.0)]);
        integ.unsafe_boxes.clear();
        integ.modes = single_mode(
            AffineMap::new(vec![vec![1.0, 0.1]], vec![0.0]).unwrap(),
            Hyperbox::from_bounds(&[(0.0, 0.0)]),
        );
        integ.validate().unwrap();
        let out = integ
            .worst_case_post(
                &Hyperbox::from_bounds(&[(0.0, 1.0)]),
                &Hyperbox::from_bounds(&[(-1.0, 1.0)]),
            )
            .unwrap();
        assert!((out.lo()[0] + 0.1).abs() < tol && (out.hi()[0] - 1.1).abs() < tol);
    }

    #[test]
    fn is_unsafe_examples() {
        assert!(make_env("acc").unwrap().is_unsafe(&[-0.5, 0.0]));
        assert!(!make_env("pendulum").unwrap().is_unsafe(&[0.0, 0.0]));
        assert!(make_env("obstacle2")
            .unwrap()
            .is_unsafe(&[2.5, 2.5, 0.0, 0.0]));
    }

    #[test]
    fn sine_envelope_contains_sine() {
        let env = make_env("pendulum").unwrap();
        for (a, b) in [(-PI, -1.0), (-1.0, 1.0), (1.0, PI)] {
            let e = sine_envelope(a, b);
            for i in 0..=100_000 {
                let t = a + (b - a) * i as f64 / 100_000.0;
                let r = t.sin() - e.slope * t - e.offset;
                assert!(r.abs() <= e.half_width, "{t}: {r} vs {}", e.half_width);
            }
        }
        // Mode regions follow the three segments.
        assert_eq!(env.mode_index(&[-2.0, 0.0]), Some(0));
        assert_eq!(env.mode_index(&[0.0, 0.0]), Some(1));
        assert_eq!(env.mode_index(&[2.0, 0.0]), Some(2));
    }
}
