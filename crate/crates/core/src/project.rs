//! Projection of a blended policy back onto certified piecewise-affine
//! shields: cutting-plane refinement plus safe projected gradient descent on
//! each new linear piece.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blend::BlendedPolicy;
use crate::envmodel::EnvModel;
use crate::error::{Error, Result};
use crate::geometry::{dot, AffineMap, Hyperbox, IntervalMatrix, LinPred, Region};
use crate::neural::Mlp;
use crate::shield::PwlShield;
use crate::verifier::{
    safe_space_detailed, verify_bounded, Invariant, ParamFamily, SafeSpace, DEFAULT_MAX_TRIM,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// Cutting-plane candidates per projection.
    pub candidates: usize,
    pub pgd_iters: usize,
    /// PGD step size α.
    pub pgd_step: f64,
    /// At most this many visited states per region feed the imitation loss.
    pub max_states: usize,
    /// Initial half-width of the parameter box around the current piece.
    pub init_half_width: f64,
    /// Halvings allowed while searching for a certified parameter box.
    pub trims: usize,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            candidates: 8,
            pgd_iters: 6,
            pgd_step: 0.002,
            max_states: 2_000,
            init_half_width: 0.25,
            trims: 8,
        }
    }
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pgd_step.is_finite() && self.pgd_step >= 0.0) {
            return Err(Error::Config(
                "project.pgd_step must be non-negative".into(),
            ));
        }
        if !(self.init_half_width.is_finite() && self.init_half_width > 0.0) {
            return Err(Error::Config(
                "project.init_half_width must be positive".into(),
            ));
        }
        if self.max_states == 0 {
            return Err(Error::Config("project.max_states must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared action distance `(1/N)·Σ ‖g(s) − t‖²` against precomputed
/// targets.
pub fn divergence_to(
    g: &PwlShield,
    action_bounds: &Hyperbox,
    states: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Config("divergence needs at least one state".into()));
    }
    let mut total = 0.0;
    for (s, t) in states.iter().zip(targets) {
        let a = g.eval(s, action_bounds)?;
        total += a.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / states.len() as f64)
}

/// Sampled squared-L2 divergence between shield `g` and the network of `h`.
pub fn divergence(
    g: &PwlShield,
    h: &BlendedPolicy,
    env: &EnvModel,
    states: &[Vec<f64>],
) -> Result<f64> {
    let targets = network_targets(&h.actor, states)?;
    divergence_to(g, &env.action_bounds, states, &targets)
}

pub fn network_targets(actor: &Mlp, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    states.iter().map(|s| actor.forward(s)).collect()
}

/// Mean squared error of the unclipped affine map `θ = (K, c)` against the
/// targets, and its gradient with respect to `θ` in [`AffineMap::params`]
/// order.
pub fn linear_divergence(
    map: &AffineMap,
    states: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> (f64, Vec<f64>) {
    let (m, n) = (map.out_dim(), map.in_dim());
    let mut grad = vec![0.0; m * n + m];
    if states.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / states.len() as f64;
    let mut value = 0.0;
    for (s, t) in states.iter().zip(targets) {
        let a = map.apply(s);
        for l in 0..m {
            let r = a[l] - t[l];
            value += r * r * inv;
            let g = 2.0 * r * inv;
            for j in 0..n {
                grad[l * n + j] += g * s[j];
            }
            grad[m * n + l] += g;
        }
    }
    (value, grad)
}

/// A plane `w·s ≤ b` with unit normal through the median of the visited
/// states in `region`: an axis with probability ½, else a random direction.
/// With fewer than two such states, the plane bisects the widest axis of the
/// region's hull within `bounds`.
pub fn cutting_plane<R: Rng + ?Sized>(
    region: &Region,
    visited: &[Vec<f64>],
    bounds: &Hyperbox,
    rng: &mut R,
) -> Result<LinPred> {
    let n = bounds.dim();
    let inside: Vec<&Vec<f64>> = visited.iter().filter(|s| region.contains(s)).collect();
    if inside.len() < 2 {
        let hull = region.meet_box(bounds)?;
        let hull = if hull.is_empty() {
            bounds.clone()
        } else {
            hull
        };
        let k = (0..n)
            .max_by(|&a, &b| hull.width(a).total_cmp(&hull.width(b)).then(b.cmp(&a)))
            .unwrap_or(0);
        return Ok(LinPred::axis_le(n, k, hull.center()[k]));
    }
    let w: Vec<f64> = if rng.random_bool(0.5) {
        let k = rng.random_range(0..n);
        (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
    } else {
        loop {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        }
    };
    let mut proj: Vec<f64> = inside.iter().map(|s| dot(&w, s)).collect();
    proj.sort_by(f64::total_cmp);
    let b = proj[(proj.len() - 1) / 2];
    LinPred::new(w, b)
}

/// Index of the component whose visited states contribute the most squared
/// action distance; ties go to the lowest index.
pub fn select_component(
    g: &PwlShield,
    action_bounds: &Hyperbox,
    states: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<usize> {
    let mut contrib = vec![0.0; g.len()];
    for (s, t) in states.iter().zip(targets) {
        let i = g.region_index(s)?;
        let a = g.eval(s, action_bounds)?;
        contrib[i] += a.iter().zip(t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    let mut best = 0;
    for (i, c) in contrib.iter().enumerate() {
        if *c > contrib[best] {
            best = i;
        }
    }
    Ok(best)
}

/// A certified box of affine controllers around a piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub gains: IntervalMatrix,
    pub offsets: Hyperbox,
}

impl ParamBox {
    pub fn degenerate(map: &AffineMap) -> Self {
        ParamBox {
            gains: IntervalMatrix::degenerate(&map.matrix),
            offsets: Hyperbox::point(&map.bias),
        }
    }

    fn around(map: &AffineMap, half: &[f64]) -> Result<Self> {
        let theta = map.params();
        let lo: Vec<f64> = theta.iter().zip(half).map(|(t, h)| t - h).collect();
        let hi: Vec<f64> = theta.iter().zip(half).map(|(t, h)| t + h).collect();
        let (m, n) = (map.out_dim(), map.in_dim());
        let rows = |v: &[f64]| {
            (0..m)
                .map(|l| v[l * n..(l + 1) * n].to_vec())
                .collect::<Vec<_>>()
        };
        Ok(ParamBox {
            gains: IntervalMatrix::new(rows(&lo), rows(&hi))?,
            offsets: Hyperbox::new(lo[m * n..].to_vec(), hi[m * n..].to_vec())?,
        })
    }

    /// Parameter-space bounds in [`AffineMap::params`] order.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo: Vec<f64> = self.gains.lo.iter().flatten().copied().collect();
        let mut hi: Vec<f64> = self.gains.hi.iter().flatten().copied().collect();
        lo.extend_from_slice(self.offsets.lo());
        hi.extend_from_slice(self.offsets.hi());
        (lo, hi)
    }

    pub fn contains(&self, map: &AffineMap) -> bool {
        let (lo, hi) = self.bounds();
        map.params()
            .iter()
            .zip(lo.iter().zip(&hi))
            .all(|(t, (l, h))| *l <= *t && *t <= *h)
    }

    pub fn family(&self, index: usize) -> ParamFamily<'_> {
        ParamFamily {
            index,
            gains: &self.gains,
            offsets: &self.offsets,
        }
    }
}

/// Searches for a parameter box around `g_lin` (substituted for component
/// `index` of `g`) whose every controller is certified from `φ`. Starts at
/// half-width `max(init_half_width, 2·α·grad_norm)` and halves the widest
/// interval toward `g_lin` until certified; falls back to the degenerate box
/// when the trims run out.
pub fn compute_safe_region(
    env: &EnvModel,
    g: &PwlShield,
    index: usize,
    g_lin: &AffineMap,
    phi: &Invariant,
    cfg: &ProjectConfig,
    grad_norm: f64,
) -> Result<ParamBox> {
    let point = ParamBox::degenerate(g_lin);
    if !crate::verifier::verify_param_box(env, g, &point.family(index), phi, phi.horizon)? {
        return Err(Error::NotImitable);
    }
    let r = cfg.init_half_width.max(2.0 * cfg.pgd_step * grad_norm);
    let mut half = vec![r; g_lin.params().len()];
    for _ in 0..=cfg.trims {
        let bx = ParamBox::around(g_lin, &half)?;
        if crate::verifier::verify_param_box(env, g, &bx.family(index), phi, phi.horizon)? {
            return Ok(bx);
        }
        let k = (0..half.len())
            .max_by(|&a, &b| half[a].total_cmp(&half[b]).then(b.cmp(&a)))
            .expect("at least one parameter");
        half[k] *= 0.5;
    }
    Ok(point)
}

/// Outcome of [`imitate_safely`].
#[derive(Clone, Debug, PartialEq)]
pub struct Imitation {
    pub policy: AffineMap,
    /// The last certified parameter box; `policy` lies inside it.
    pub region: ParamBox,
    pub divergence: f64,
}

/// Projected gradient descent on the affine piece `index` of `g`: each
/// iteration certifies a parameter box around the current piece, takes a
/// gradient step on the squared error to `targets`, and clamps back into the
/// box.
#[allow(clippy::too_many_arguments)]
pub fn imitate_safely(
    env: &EnvModel,
    g: &PwlShield,
    index: usize,
    g_lin: &AffineMap,
    phi: &Invariant,
    states: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &ProjectConfig,
) -> Result<Imitation> {
    let mut current = g_lin.clone();
    let (mut value, mut grad) = linear_divergence(&current, states, targets);
    let mut region = compute_safe_region(env, g, index, &current, phi, cfg, norm(&grad))?;
    if states.is_empty() || cfg.pgd_step == 0.0 {
        return Ok(Imitation {
            policy: current,
            region,
            divergence: value,
        });
    }
    for it in 0..cfg.pgd_iters {
        if it > 0 {
            region = compute_safe_region(env, g, index, &current, phi, cfg, norm(&grad))?;
        }
        let (lo, hi) = region.bounds();
        let theta: Vec<f64> = current
            .params()
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(k, (t, d))| (t - cfg.pgd_step * d).clamp(lo[k], hi[k]))
            .collect();
        current = AffineMap::from_params(current.out_dim(), current.in_dim(), &theta);
        (value, grad) = linear_divergence(&current, states, targets);
    }
    Ok(Imitation {
        policy: current,
        region,
        divergence: value,
    })
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub component: usize,
    pub plane: LinPred,
    pub score: f64,
    /// Whether each side was imitated (false: kept the parent piece).
    pub imitated: [bool; 2],
    /// Every imitated piece re-checked as a degenerate family and found
    /// inside its certified parameter box.
    pub pieces_certified: bool,
}

/// One projection, as written to the synthesis log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub states: usize,
    pub incumbent_score: f64,
    pub candidates: Vec<CandidateRecord>,
    /// Index into `candidates` of the kept split, if any beat the incumbent.
    pub chosen: Option<usize>,
    pub final_score: f64,
    /// The winner failed re-verification and the incumbent was kept.
    pub reverted: bool,
    pub components: usize,
    pub trims: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub shield: PwlShield,
    pub invariant: Invariant,
    /// Certificates for the invariant's pieces; empty when the incumbent was
    /// kept unchanged.
    pub safe_space: Option<SafeSpace>,
    pub record: SynthesisRecord,
}

/// Cutting-plane projection of `h` onto certified shields: tries
/// `cfg.candidates` single splits of `h.shield`, keeps the one with the
/// lowest divergence on `visited` (the incumbent wins ties), and rebuilds the
/// invariant for the winner. Falls back to `(h.shield, h.invariant)` if the
/// winner cannot be certified.
pub fn project<R: Rng + ?Sized>(
    env: &EnvModel,
    h: &BlendedPolicy,
    visited: &[Vec<f64>],
    cfg: &ProjectConfig,
    rng: &mut R,
) -> Result<Projection> {
    cfg.validate()?;
    let targets = network_targets(&h.actor, visited)?;
    let incumbent_score = if visited.is_empty() {
        0.0
    } else {
        divergence_to(&h.shield, &env.action_bounds, visited, &targets)?
    };
    let mut record = SynthesisRecord {
        states: visited.len(),
        incumbent_score,
        candidates: Vec::new(),
        chosen: None,
        final_score: incumbent_score,
        reverted: false,
        components: h.shield.len(),
        trims: Vec::new(),
    };
    let keep = |record: SynthesisRecord| Projection {
        shield: h.shield.clone(),
        invariant: h.invariant.clone(),
        safe_space: None,
        record,
    };
    if visited.is_empty() || cfg.candidates == 0 {
        return Ok(keep(record));
    }
    let i = select_component(&h.shield, &env.action_bounds, visited, &targets)?;
    let parent = h.shield.components()[i].policy.clone();
    let mut best: Option<(f64, PwlShield)> = None;
    for _ in 0..cfg.candidates {
        let psi = cutting_plane(h.shield.region(i), visited, &env.state_bounds, rng)?;
        let mut split = h
            .shield
            .split(i, psi.clone(), parent.clone(), parent.clone())?;
        let mut imitated = [false; 2];
        let mut pieces_certified = true;
        for (side, idx) in [i, i + 1].into_iter().enumerate() {
            let (xs, ts) = region_sample(split.region(idx), visited, &targets, cfg.max_states);
            match imitate_safely(env, &split, idx, &parent, &h.invariant, &xs, &ts, cfg) {
                Ok(im) => {
                    let ok = im.region.contains(&im.policy)
                        && crate::verifier::verify_param_box(
                            env,
                            &split,
                            &ParamBox::degenerate(&im.policy).family(idx),
                            &h.invariant,
                            h.invariant.horizon,
                        )?;
                    pieces_certified &= ok;
                    if ok {
                        split = split.with_policy(idx, im.policy)?;
                        imitated[side] = true;
                    }
                }
                Err(Error::NotImitable) => {}
                Err(e) => return Err(e),
            }
        }
        let score = divergence_to(&split, &env.action_bounds, visited, &targets)?;
        record.candidates.push(CandidateRecord {
            component: i,
            plane: psi,
            score,
            imitated,
            pieces_certified,
        });
        let bar = best.as_ref().map_or(incumbent_score, |(s, _)| *s);
        if score < bar {
            record.chosen = Some(record.candidates.len() - 1);
            best = Some((score, split));
        }
    }
    let Some((score, shield)) = best else {
        return Ok(keep(record));
    };
    match safe_space_detailed(env, &shield, DEFAULT_MAX_TRIM) {
        Ok(space)
            if space.invariant.covers_box(&env.init_box)
                && verify_bounded(env, &shield, &env.init_box, env.horizon)?.is_certified() =>
        {
            record.final_score = score;
            record.components = shield.len();
            record.trims = space.trims.clone();
            Ok(Projection {
                shield,
                invariant: space.invariant.clone(),
                safe_space: Some(space),
                record,
            })
        }
        Ok(_) | Err(Error::NotCoverable(_)) => {
            record.reverted = true;
            Ok(keep(record))
        }
        Err(e) => Err(e),
    }
}

/// Visited states inside `region` with their targets, evenly thinned to at
/// most `max` entries.
fn region_sample(
    region: &Region,
    states: &[Vec<f64>],
    targets: &[Vec<f64>],
    max: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let idx: Vec<usize> = (0..states.len())
        .filter(|&k| region.contains(&states[k]))
        .collect();
    let stride = idx.len().div_ceil(max).max(1);
    idx.iter()
        .step_by(stride)
        .map(|&k| (states[k].clone(), targets[k].clone()))
        .unzip()
}
