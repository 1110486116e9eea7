//! Piecewise-affine shields with first-match guard semantics.
//!
//! Component `i` acts on its effective region
//! `guard_i ∧ ¬guard_0 ∧ … ∧ ¬guard_{i−1}`, so the regions are pairwise
//! disjoint. The last component always has an empty guard, which makes the
//! regions cover the whole state space.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{AffineMap, Hyperbox, LinPred, Region};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShieldComponent {
    /// Conjunction of closed half-spaces; empty means "always".
    pub guard: Vec<LinPred>,
    #[serde(flatten)]
    pub policy: AffineMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShieldRepr", into = "ShieldRepr")]
pub struct PwlShield {
    state_dim: usize,
    action_dim: usize,
    components: Vec<ShieldComponent>,
    regions: Vec<Region>,
}

#[derive(Serialize, Deserialize)]
struct ShieldRepr {
    state_dim: usize,
    action_dim: usize,
    components: Vec<ShieldComponent>,
}

impl TryFrom<ShieldRepr> for PwlShield {
    type Error = Error;

    fn try_from(r: ShieldRepr) -> Result<Self> {
        PwlShield::new(r.state_dim, r.action_dim, r.components)
    }
}

impl From<PwlShield> for ShieldRepr {
    fn from(g: PwlShield) -> Self {
        ShieldRepr {
            state_dim: g.state_dim,
            action_dim: g.action_dim,
            components: g.components,
        }
    }
}

impl PwlShield {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        components: Vec<ShieldComponent>,
    ) -> Result<Self> {
        let Some(last) = components.last() else {
            return Err(Error::InvalidShield("shield has no components".into()));
        };
        if !last.guard.is_empty() {
            return Err(Error::InvalidShield(
                "last component must be a catch-all (empty guard)".into(),
            ));
        }
        for (i, c) in components.iter().enumerate() {
            c.policy
                .validate()
                .map_err(|e| Error::InvalidShield(format!("component {i}: {e}")))?;
            if c.policy.out_dim() != action_dim || c.policy.in_dim() != state_dim {
                return Err(Error::InvalidShield(format!(
                    "component {i}: policy is {}x{}, expected {action_dim}x{state_dim}",
                    c.policy.out_dim(),
                    c.policy.in_dim()
                )));
            }
            for p in &c.guard {
                check_dim(state_dim, p.dim())
                    .map_err(|e| Error::InvalidShield(format!("component {i}: {e}")))?;
                if p.w.iter().all(|w| *w == 0.0) {
                    return Err(Error::ZeroNormal);
                }
            }
        }
        let regions = effective_regions(&components);
        Ok(PwlShield {
            state_dim,
            action_dim,
            components,
            regions,
        })
    }

    /// A shield with a single catch-all component.
    pub fn constant_policy(policy: AffineMap) -> Result<Self> {
        let (n, m) = (policy.in_dim(), policy.out_dim());
        PwlShield::new(
            n,
            m,
            vec![ShieldComponent {
                guard: Vec::new(),
                policy,
            }],
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[ShieldComponent] {
        &self.components
    }

    pub fn region(&self, i: usize) -> &Region {
        &self.regions[i]
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region_index(&self, s: &[f64]) -> Result<usize> {
        check_dim(self.state_dim, s.len())?;
        self.components
            .iter()
            .position(|c| c.guard.iter().all(|p| p.holds(s)))
            .ok_or_else(|| Error::NoComponent(s.to_vec()))
    }

    /// Unclipped action of the matching component.
    pub fn raw_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        let i = self.region_index(s)?;
        Ok(self.components[i].policy.apply(s))
    }

    /// Action of the first matching component, clipped into `action_bounds`.
    pub fn eval(&self, s: &[f64], action_bounds: &Hyperbox) -> Result<Vec<f64>> {
        let a = self.raw_action(s)?;
        Ok(a.iter()
            .enumerate()
            .map(|(k, v)| v.clamp(action_bounds.lo()[k], action_bounds.hi()[k]))
            .collect())
    }

    /// Replaces component `i` by `(guard_i ∧ ψ, g1)` followed by `(guard_i, g2)`;
    /// first-match hands the `¬ψ` part of the old region to `g2`.
    pub fn split(&self, i: usize, psi: LinPred, g1: AffineMap, g2: AffineMap) -> Result<Self> {
        if i >= self.components.len() {
            return Err(Error::BadIndex {
                index: i,
                len: self.components.len(),
            });
        }
        let old = &self.components[i];
        let mut first_guard = old.guard.clone();
        first_guard.push(psi);
        let mut components = self.components.clone();
        components.splice(
            i..=i,
            [
                ShieldComponent {
                    guard: first_guard,
                    policy: g1,
                },
                ShieldComponent {
                    guard: old.guard.clone(),
                    policy: g2,
                },
            ],
        );
        PwlShield::new(self.state_dim, self.action_dim, components)
    }

    /// Copy with component `i`'s policy replaced.
    pub fn with_policy(&self, i: usize, policy: AffineMap) -> Result<Self> {
        if i >= self.components.len() {
            return Err(Error::BadIndex {
                index: i,
                len: self.components.len(),
            });
        }
        let mut components = self.components.clone();
        components[i].policy = policy;
        PwlShield::new(self.state_dim, self.action_dim, components)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn effective_regions(components: &[ShieldComponent]) -> Vec<Region> {
    components
        .iter()
        .enumerate()
        .map(|(i, c)| {
            components[..i]
                .iter()
                .fold(Region::from_preds(c.guard.clone()), |r, earlier| {
                    r.and_not(&earlier.guard)
                })
        })
        .collect()
}

/// The hand-written initial shield shipped for each benchmark.
pub fn shipped(env: &str) -> Result<PwlShield> {
    let text = match env {
        "acc" => include_str!("../shields/acc.json"),
        "pendulum" => include_str!("../shields/pendulum.json"),
        "road" => include_str!("../shields/road.json"),
        "obstacle2" => include_str!("../shields/obstacle2.json"),
        _ => {
            return Err(Error::UnknownEnv {
                name: env.to_string(),
                available: crate::envmodel::ENV_NAMES.join(", "),
            })
        }
    };
    PwlShield::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> Hyperbox {
        Hyperbox::from_bounds(&[(-10.0, 10.0)])
    }

    fn sign_shield() -> PwlShield {
        PwlShield::constant_policy(AffineMap::constant(1, vec![0.0]))
            .unwrap()
            .split(
                0,
                LinPred::axis_le(1, 0, 0.0),
                AffineMap::constant(1, vec![-1.0]),
                AffineMap::constant(1, vec![1.0]),
            )
            .unwrap()
    }

    #[test]
    fn catch_all_zero() {
        let g = PwlShield::constant_policy(AffineMap::constant(2, vec![0.0])).unwrap();
        for s in [[0.0, 0.0], [3.0, -7.0]] {
            assert_eq!(g.eval(&s, &bounds()).unwrap(), vec![0.0]);
            assert_eq!(g.region_index(&s).unwrap(), 0);
        }
    }

    #[test]
    fn first_match_and_boundary() {
        let g = sign_shield();
        assert_eq!(g.len(), 2);
        assert_eq!(g.eval(&[-1.0], &bounds()).unwrap(), vec![-1.0]);
        assert_eq!(g.eval(&[1.0], &bounds()).unwrap(), vec![1.0]);
        assert_eq!(g.eval(&[0.0], &bounds()).unwrap(), vec![-1.0]);
        assert_eq!(g.region_index(&[-1.0]).unwrap(), 0);
        assert_eq!(g.region_index(&[1.0]).unwrap(), 1);
        assert_eq!(g.region_index(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn eval_clips_to_action_bounds() {
        let g = PwlShield::constant_policy(AffineMap::constant(1, vec![5.0])).unwrap();
        let ab = Hyperbox::from_bounds(&[(-2.0, 2.0)]);
        assert_eq!(g.eval(&[0.0], &ab).unwrap(), vec![2.0]);
    }

    #[test]
    fn split_bad_index() {
        let g = sign_shield();
        let r = g.split(
            5,
            LinPred::axis_le(1, 0, 0.0),
            AffineMap::constant(1, vec![0.0]),
            AffineMap::constant(1, vec![0.0]),
        );
        assert!(matches!(r, Err(Error::BadIndex { index: 5, len: 2 })));
    }

    #[test]
    fn regions_follow_first_match() {
        let g = sign_shield()
            .split(
                1,
                LinPred::axis_le(1, 0, 5.0),
                AffineMap::constant(1, vec![2.0]),
                AffineMap::constant(1, vec![3.0]),
            )
            .unwrap();
        for x in [-3.0, 0.0, 0.5, 5.0, 5.5] {
            let i = g.region_index(&[x]).unwrap();
            let hits: Vec<usize> = (0..g.len())
                .filter(|&j| g.region(j).contains(&[x]))
                .collect();
            assert_eq!(hits, vec![i], "x = {x}");
        }
    }

    #[test]
    fn json_errors() {
        let e = PwlShield::from_json(r#"{"state_dim":1,"action_dim":1}"#).unwrap_err();
        assert!(e.to_string().contains("components"), "{e}");
        let zero = r#"{"state_dim":1,"action_dim":1,"components":[
            {"guard":[{"w":[0.0],"b":1.0}],"K":[[0.0]],"c":[0.0]},
            {"guard":[],"K":[[0.0]],"c":[0.0]}]}"#;
        assert!(PwlShield::from_json(zero).is_err());
        let no_catch_all = r#"{"state_dim":1,"action_dim":1,"components":[
            {"guard":[{"w":[1.0],"b":1.0}],"K":[[0.0]],"c":[0.0]}]}"#;
        assert!(PwlShield::from_json(no_catch_all).is_err());
        let bad_shape = r#"{"state_dim":2,"action_dim":1,"components":[
            {"guard":[],"K":[[0.0]],"c":[0.0]}]}"#;
        assert!(PwlShield::from_json(bad_shape).is_err());
    }

    #[test]
    fn shipped_shields_load() {
        for name in crate::envmodel::ENV_NAMES {
            let g = shipped(name).unwrap();
            let env = crate::envmodel::make_env(name).unwrap();
            assert_eq!(g.state_dim(), env.state_dim);
            assert_eq!(g.action_dim(), env.action_dim);
        }
        assert!(shipped("nope").is_err());
    }
}
