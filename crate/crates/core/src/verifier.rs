//! Bounded-horizon safety verification by box abstract interpretation.
//!
//! Reach sets are single boxes: `B₀ = start`, `B_{k+1} = post(B_k)` where the
//! post joins, over every shield component whose region can meet `B_k`, the
//! worst-case successor box of that slice under that component's action box.

use serde::{Deserialize, Serialize};

use crate::envmodel::EnvModel;
use crate::error::{Error, Result};
use crate::geometry::{Hyperbox, IntervalMatrix};
use crate::shield::PwlShield;

pub const DEFAULT_MAX_TRIM: usize = 40;
pub const COVER_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantPiece {
    pub component: usize,
    pub boxes: Vec<Hyperbox>,
}

/// Union of boxes, grouped by the shield component whose region they refine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invariant {
    pub horizon: usize,
    pub pieces: Vec<InvariantPiece>,
}

impl Invariant {
    pub fn empty(horizon: usize) -> Self {
        Invariant {
            horizon,
            pieces: Vec::new(),
        }
    }

    pub fn boxes(&self) -> impl Iterator<Item = &Hyperbox> {
        self.pieces.iter().flat_map(|p| p.boxes.iter())
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        self.boxes().any(|b| b.contains_point(s))
    }

    /// Sound test that `bx` lies in the union of the invariant's boxes. Splits
    /// along the longest axis up to [`COVER_DEPTH`] levels; may answer `false`
    /// for a box that is in fact covered.
    pub fn covers_box(&self, bx: &Hyperbox) -> bool {
        if bx.is_empty() {
            return true;
        }
        self.covers_rec(bx, COVER_DEPTH)
    }

    fn covers_rec(&self, bx: &Hyperbox, depth: usize) -> bool {
        let mut touches = false;
        for b in self.boxes() {
            if b.contains_box(bx) {
                return true;
            }
            touches |= b.intersects(bx);
        }
        if !touches || depth == 0 {
            return false;
        }
        let (left, right) = bx.bisect(bx.longest_axis());
        self.covers_rec(&left, depth - 1) && self.covers_rec(&right, depth - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub component: Option<usize>,
    pub start: Hyperbox,
    pub horizon: usize,
    /// `B₀ … B_T`.
    pub reach_trace: Vec<Hyperbox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub component: Option<usize>,
    pub step: usize,
    pub reach: Hyperbox,
    pub unsafe_box: Hyperbox,
}

impl Counterexample {
    pub fn overlap(&self) -> Hyperbox {
        self.reach
            .meet(&self.unsafe_box)
            .expect("dimensions checked at construction")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Verdict {
    Certificate(Certificate),
    Counterexample(Counterexample),
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certificate(_))
    }
}

/// Component `index` of the shield replaced by every affine controller with
/// `K ∈ gains`, `c ∈ offsets`.
#[derive(Clone, Debug)]
pub struct ParamFamily<'a> {
    pub index: usize,
    pub gains: &'a IntervalMatrix,
    pub offsets: &'a Hyperbox,
}

fn post_with(
    env: &EnvModel,
    g: &PwlShield,
    states: &Hyperbox,
    family: Option<&ParamFamily<'_>>,
) -> Result<Hyperbox> {
    let states = states.meet(&env.state_bounds)?;
    let mut out = Hyperbox::empty(env.state_dim);
    if states.is_empty() {
        return Ok(out);
    }
    for (i, comp) in g.components().iter().enumerate() {
        let slice = g.region(i).meet_box(&states)?;
        if slice.is_empty() {
            continue;
        }
        let next = match family {
            Some(f) if f.index == i => env.closed_loop_post(&slice, f.gains, f.offsets)?,
            _ => env.closed_loop_post(
                &slice,
                &IntervalMatrix::degenerate(&comp.policy.matrix),
                &Hyperbox::point(&comp.policy.bias),
            )?,
        };
        out = out.join(&next)?;
    }
    Ok(out)
}

/// One abstract step of the closed loop `env ∘ g`.
pub fn shield_post(env: &EnvModel, g: &PwlShield, states: &Hyperbox) -> Result<Hyperbox> {
    post_with(env, g, states, None)
}

fn iterate(
    env: &EnvModel,
    g: &PwlShield,
    start: &Hyperbox,
    horizon: usize,
    family: Option<&ParamFamily<'_>>,
) -> Result<Verdict> {
    let mut trace = Vec::with_capacity(horizon + 1);
    let mut current = start.clone();
    for k in 0..=horizon {
        if let Some(u) = env.box_meets_unsafe(&current) {
            return Ok(Verdict::Counterexample(Counterexample {
                component: None,
                step: k,
                reach: current,
                unsafe_box: u.clone(),
            }));
        }
        if k < horizon {
            let next = post_with(env, g, &current, family)?;
            trace.push(current);
            current = next;
        } else {
            trace.push(current.clone());
        }
    }
    Ok(Verdict::Certificate(Certificate {
        component: None,
        start: start.clone(),
        horizon,
        reach_trace: trace,
    }))
}

/// Certifies that no state reachable from `start` within `horizon` steps
/// under `g` is unsafe, or reports the first step whose reach box meets an
/// unsafe box.
pub fn verify_bounded(
    env: &EnvModel,
    g: &PwlShield,
    start: &Hyperbox,
    horizon: usize,
) -> Result<Verdict> {
    iterate(env, g, start, horizon, None)
}

/// Certifies every controller in the family on its component's region:
/// starting from the part of each `phi` box inside that region, the closed loop (with
/// the family substituted for the component) stays clear of unsafe states for
/// `horizon` steps.
pub fn verify_param_box(
    env: &EnvModel,
    g: &PwlShield,
    family: &ParamFamily<'_>,
    phi: &Invariant,
    horizon: usize,
) -> Result<bool> {
    let region = g.region(family.index);
    for b in phi.boxes() {
        let start = region.meet_box(b)?;
        if !start.is_empty() && !iterate(env, g, &start, horizon, Some(family))?.is_certified() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Invariant construction result, with the certificate backing each piece.
#[derive(Clone, Debug)]
pub struct SafeSpace {
    pub invariant: Invariant,
    pub certificates: Vec<Certificate>,
    pub trims: Vec<usize>,
}

pub fn safe_space(env: &EnvModel, g: &PwlShield) -> Result<Invariant> {
    Ok(safe_space_detailed(env, g, DEFAULT_MAX_TRIM)?.invariant)
}

/// Builds one invariant box per component: the region's box hull, trimmed by
/// repeated halving toward the initial states it must keep until the box is
/// certified for `env.horizon` steps.
pub fn safe_space_detailed(env: &EnvModel, g: &PwlShield, max_trim: usize) -> Result<SafeSpace> {
    let mut pieces = Vec::new();
    let mut certificates = Vec::new();
    let mut trims = Vec::new();
    for i in 0..g.len() {
        let region = g.region(i);
        let mut candidate = region.meet_box(&env.state_bounds)?;
        if candidate.is_empty() {
            trims.push(0);
            continue;
        }
        let anchor = region.meet_box(&env.init_box)?;
        let mut used = 0;
        let mut verdict = verify_bounded(env, g, &candidate, env.horizon)?;
        loop {
            match verdict {
                Verdict::Certificate(mut cert) => {
                    cert.component = Some(i);
                    pieces.push(InvariantPiece {
                        component: i,
                        boxes: vec![candidate.clone()],
                    });
                    certificates.push(cert);
                    break;
                }
                Verdict::Counterexample(_) if used >= max_trim => {
                    if anchor.is_empty() {
                        break;
                    }
                    return Err(Error::NotCoverable(anchor));
                }
                Verdict::Counterexample(cex) => {
                    match best_trim(env, g, &candidate, &anchor, &cex)? {
                        Some((next, v)) => {
                            candidate = next;
                            verdict = v;
                            used += 1;
                        }
                        None if anchor.is_empty() => break,
                        None => return Err(Error::NotCoverable(anchor)),
                    }
                }
            }
        }
        trims.push(used);
    }
    Ok(SafeSpace {
        invariant: Invariant {
            horizon: env.horizon,
            pieces,
        },
        certificates,
        trims,
    })
}

const MIN_GAP: f64 = 1e-6;

/// Candidate boxes obtained by moving one face of `current` halfway toward the
/// anchor (or toward the centre when there is no anchor).
fn trim_candidates(current: &Hyperbox, anchor: &Hyperbox) -> Vec<Hyperbox> {
    let mut out = Vec::new();
    let center = current.center();
    for (k, &mid) in center.iter().enumerate() {
        let (lo, hi) = (current.lo()[k], current.hi()[k]);
        let (target_lo, target_hi) = if anchor.is_empty() {
            (mid, mid)
        } else {
            (anchor.lo()[k].max(lo), anchor.hi()[k].min(hi))
        };
        if target_lo - lo > MIN_GAP {
            out.push(current.with_axis(k, 0.5 * (lo + target_lo), hi));
        }
        if hi - target_hi > MIN_GAP {
            out.push(current.with_axis(k, lo, 0.5 * (hi + target_hi)));
        }
    }
    out
}

/// Trim ranking: (certified, -overlap, failure step, size), larger is better.
type TrimKey = (u8, f64, f64, f64);

fn best_trim(
    env: &EnvModel,
    g: &PwlShield,
    current: &Hyperbox,
    anchor: &Hyperbox,
    failure: &Counterexample,
) -> Result<Option<(Hyperbox, Verdict)>> {
    // Rank: certified (largest first), then least unsafe overlap at the
    // current failing step, then later failure, then larger box.
    let mut best: Option<(Hyperbox, Verdict, TrimKey)> = None;
    for cand in trim_candidates(current, anchor) {
        let v = verify_bounded(env, g, &cand, env.horizon)?;
        let size = cand.normalized_size(&env.state_bounds);
        let key = match &v {
            Verdict::Certificate(_) => (1, 0.0, 0.0, size),
            Verdict::Counterexample(c) => {
                let reach = if c.step == failure.step {
                    c.reach.clone()
                } else {
                    reach_at(env, g, &cand, failure.step)?
                };
                (0, -total_penetration(env, &reach)?, c.step as f64, size)
            }
        };
        if best.as_ref().is_none_or(|(_, _, k)| key > *k) {
            best = Some((cand, v, key));
        }
    }
    // Single faces can stall, e.g. when symmetric overlaps need both faces
    // of an axis cut. Without a clear gain, shrink every face at once.
    let current_pen = total_penetration(env, &failure.reach)?;
    let stalled = match &best {
        None => true,
        Some((_, _, key)) => {
            key.0 == 0
                && key.2 as usize == failure.step
                && current_pen + key.1 < STALL_GAIN * current_pen
        }
    };
    if stalled {
        if let Some(cand) = uniform_shrink(current, anchor) {
            let v = verify_bounded(env, g, &cand, env.horizon)?;
            return Ok(Some((cand, v)));
        }
    }
    Ok(best.map(|(b, v, _)| (b, v)))
}

/// Minimum relative overlap reduction for a single-face trim to count as progress.
const STALL_GAIN: f64 = 0.1;

fn uniform_shrink(current: &Hyperbox, anchor: &Hyperbox) -> Option<Hyperbox> {
    let center = current.center();
    let mut lo = current.lo().to_vec();
    let mut hi = current.hi().to_vec();
    let mut moved = false;
    for k in 0..current.dim() {
        let (tl, th) = if anchor.is_empty() {
            (center[k], center[k])
        } else {
            (anchor.lo()[k].max(lo[k]), anchor.hi()[k].min(hi[k]))
        };
        if tl - lo[k] > MIN_GAP {
            lo[k] = 0.5 * (lo[k] + tl);
            moved = true;
        }
        if hi[k] - th > MIN_GAP {
            hi[k] = 0.5 * (hi[k] + th);
            moved = true;
        }
    }
    if moved {
        Hyperbox::new(lo, hi).ok()
    } else {
        None
    }
}

fn reach_at(env: &EnvModel, g: &PwlShield, start: &Hyperbox, step: usize) -> Result<Hyperbox> {
    let mut current = start.clone();
    for _ in 0..step {
        current = shield_post(env, g, &current)?;
    }
    Ok(current)
}

/// Penetration summed over every unsafe box the reach box meets, so a trim
/// that clears one of several overlaps still ranks above one that clears none.
fn total_penetration(env: &EnvModel, reach: &Hyperbox) -> Result<f64> {
    let mut total = 0.0;
    for u in &env.unsafe_boxes {
        let o = reach.meet(u)?;
        if !o.is_empty() {
            total += penetration(&o, &env.state_bounds);
        }
    }
    Ok(total)
}

/// Smallest normalised overlap width: how far the reach box must shrink along
/// its cheapest axis to clear the unsafe box.
fn penetration(overlap: &Hyperbox, scale: &Hyperbox) -> f64 {
    (0..overlap.dim())
        .map(|k| overlap.width(k) / scale.width(k).max(f64::MIN_POSITIVE))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmodel::make_env;
    use crate::geometry::{AffineMap, LinPred};
    use crate::shield::{shipped, ShieldComponent};

    fn road_brake() -> PwlShield {
        shipped("road").unwrap()
    }

    fn integrator() -> EnvModel {
        let mut env = make_env("road").unwrap();
        env.state_dim = 1;
        env.state_bounds = Hyperbox::from_bounds(&[(-10.0, 10.0)]);
        env.init_box = Hyperbox::from_bounds(&[(0.0, 0.0)]);
        env.unsafe_boxes.clear();
        env.modes[0].dynamics = AffineMap::new(vec![vec![1.0, 0.1]], vec![0.0]).unwrap();
        env.modes[0].disturbance = Hyperbox::from_bounds(&[(0.0, 0.0)]);
        env.validate().unwrap();
        env
    }

    #[test]
    fn shield_post_examples() {
        let env = integrator();
        let g = PwlShield::constant_policy(AffineMap::constant(1, vec![0.0])).unwrap();
        let out = shield_post(&env, &g, &Hyperbox::from_bounds(&[(0.0, 1.0)])).unwrap();
        assert!((out.lo()[0]).abs() < 1e-8 && (out.hi()[0] - 1.0).abs() < 1e-8);
        assert!(shield_post(&env, &g, &Hyperbox::empty(1))
            .unwrap()
            .is_empty());

        let road = make_env("road").unwrap();
        let s = Hyperbox::from_bounds(&[(0.0, 1.0), (1.5, 1.9)]);
        let out = shield_post(&road, &road_brake(), &s).unwrap();
        assert!(
            out.lo()[1] >= 1.3 - 1e-8 && out.hi()[1] <= 1.7 + 1e-8,
            "{out:?}"
        );
    }

    #[test]
    fn verify_bounded_examples() {
        let env = integrator();
        let g = PwlShield::constant_policy(AffineMap::constant(1, vec![1.0])).unwrap();
        let v = verify_bounded(&env, &g, &Hyperbox::from_bounds(&[(0.0, 1.0)]), 50).unwrap();
        assert!(v.is_certified());

        let road = make_env("road").unwrap();
        let start = Hyperbox::from_bounds(&[(0.0, 1.0), (1.0, 2.5)]);
        match verify_bounded(&road, &road_brake(), &start, 50).unwrap() {
            Verdict::Counterexample(c) => {
                assert_eq!(c.step, 0);
                assert!(!c.overlap().is_empty());
            }
            v => panic!("expected counterexample, got {v:?}"),
        }

        let v = verify_bounded(&road, &road_brake(), &road.init_box, 50).unwrap();
        match v {
            Verdict::Certificate(c) => assert_eq!(c.reach_trace.len(), 51),
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn safe_space_examples() {
        // Empty unsafe set: pieces are the full region hulls.
        let mut free = make_env("road").unwrap();
        free.unsafe_boxes.clear();
        let phi = safe_space(&free, &road_brake()).unwrap();
        assert_eq!(phi.pieces.len(), 2);
        assert_eq!(
            phi.pieces[1].boxes[0],
            Hyperbox::from_bounds(&[(-5.0, 20.0), (-3.0, 1.0)])
        );

        let road = make_env("road").unwrap();
        let phi = safe_space(&road, &road_brake()).unwrap();
        assert!(phi.boxes().all(|b| b.hi()[1] < 2.0));
        assert!(phi.contains(&road.init_box.center()));

        let gas = PwlShield::constant_policy(AffineMap::constant(2, vec![2.0])).unwrap();
        assert!(matches!(
            safe_space(&road, &gas),
            Err(Error::NotCoverable(_))
        ));
    }

    #[test]
    fn invariant_membership() {
        let road = make_env("road").unwrap();
        let phi = safe_space(&road, &road_brake()).unwrap();
        assert!(phi.contains(&[0.05, 0.05]));
        assert!(!phi.contains(&[0.0, 2.5]));
        assert!(!Invariant::empty(50).contains(&[0.0, 0.0]));
    }

    #[test]
    fn covers_box_examples() {
        let phi = Invariant {
            horizon: 1,
            pieces: vec![
                InvariantPiece {
                    component: 0,
                    boxes: vec![Hyperbox::from_bounds(&[(0.0, 1.0), (0.0, 1.0)])],
                },
                InvariantPiece {
                    component: 1,
                    boxes: vec![Hyperbox::from_bounds(&[(1.0, 2.0), (0.0, 1.0)])],
                },
            ],
        };
        assert!(phi.covers_box(&Hyperbox::from_bounds(&[(0.2, 0.8), (0.1, 0.9)])));
        // Straddles the seam at x = 1; the first split lands exactly on it.
        assert!(phi.covers_box(&Hyperbox::from_bounds(&[(0.5, 1.5), (0.2, 0.3)])));
        assert!(!phi.covers_box(&Hyperbox::from_bounds(&[(0.5, 1.5), (0.5, 1.5)])));
        assert!(!phi.covers_box(&Hyperbox::from_bounds(&[(5.0, 6.0), (0.0, 1.0)])));

        let road = make_env("road").unwrap();
        let phi = safe_space(&road, &road_brake()).unwrap();
        assert!(!phi.covers_box(&Hyperbox::from_bounds(&[(0.0, 1.0), (1.9, 2.1)])));
    }

    #[test]
    fn verify_param_box_examples() {
        let road = make_env("road").unwrap();
        let g = road_brake();
        let phi = safe_space(&road, &g).unwrap();
        for (i, comp) in g.components().iter().enumerate() {
            let gains = IntervalMatrix::degenerate(&comp.policy.matrix);
            let offsets = Hyperbox::point(&comp.policy.bias);
            let fam = ParamFamily {
                index: i,
                gains: &gains,
                offsets: &offsets,
            };
            assert!(verify_param_box(&road, &g, &fam, &phi, 50).unwrap());
        }
        // A family containing constant full throttle on the slow region.
        let gains = IntervalMatrix::degenerate(&[vec![0.0, 0.0]]);
        let offsets = Hyperbox::from_bounds(&[(-1.0, 2.0)]);
        let fam = ParamFamily {
            index: 1,
            gains: &gains,
            offsets: &offsets,
        };
        let no_brake = PwlShield::constant_policy(AffineMap::constant(2, vec![0.0])).unwrap();
        let phi_all = safe_space(&road, &no_brake).unwrap();
        let fam0 = ParamFamily { index: 0, ..fam };
        assert!(!verify_param_box(&road, &no_brake, &fam0, &phi_all, 50).unwrap());

        // Empty region: vacuously true.
        let impossible = PwlShield::new(
            2,
            1,
            vec![
                ShieldComponent {
                    guard: vec![LinPred::axis_ge(2, 1, 10.0)],
                    policy: AffineMap::constant(2, vec![2.0]),
                },
                ShieldComponent {
                    guard: vec![],
                    policy: AffineMap::constant(2, vec![0.0]),
                },
            ],
        )
        .unwrap();
        let fam = ParamFamily {
            index: 0,
            gains: &gains,
            offsets: &offsets,
        };
        assert!(verify_param_box(&road, &impossible, &fam, &phi, 50).unwrap());
    }
}
