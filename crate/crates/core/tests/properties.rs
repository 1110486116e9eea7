//! Property tests over the geometry, environment, shield and verifier layers.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shieldcraft::blend::{rollout, BlendedPolicy};
use shieldcraft::envmodel::{make_env, EnvModel, ENV_NAMES};
use shieldcraft::geometry::{AffineMap, Hyperbox, IntervalMatrix, LinPred, Tri};
use shieldcraft::neural::new_actor;
use shieldcraft::project::{compute_safe_region, ProjectConfig};
use shieldcraft::shield::{shipped, PwlShield};
use shieldcraft::verifier::{safe_space, shield_post, verify_bounded, verify_param_box};

use common::mc_unsafe_hits;

const DIM: usize = 3;

fn arb_box(dim: usize) -> impl Strategy<Value = Hyperbox> {
    prop::collection::vec((-10.0..10.0f64, 0.0..5.0f64), dim).prop_map(|axes| {
        Hyperbox::new(
            axes.iter().map(|a| a.0).collect(),
            axes.iter().map(|a| a.0 + a.1).collect(),
        )
        .unwrap()
    })
}

fn arb_pred(dim: usize) -> impl Strategy<Value = LinPred> {
    (prop::collection::vec(-1.0..1.0f64, dim), -5.0..5.0f64)
        .prop_filter("nonzero normal", |(w, _)| w.iter().any(|x| x.abs() > 1e-3))
        .prop_map(|(w, b)| LinPred::new(w, b).unwrap())
}

fn arb_map(out: usize, inp: usize) -> impl Strategy<Value = AffineMap> {
    (
        prop::collection::vec(prop::collection::vec(-3.0..3.0f64, inp), out),
        prop::collection::vec(-3.0..3.0f64, out),
    )
        .prop_map(|(m, b)| AffineMap::new(m, b).unwrap())
}

/// Shipped shield for one environment, split up to three times at random.
fn arb_shield() -> impl Strategy<Value = (String, PwlShield)> {
    (
        0..ENV_NAMES.len(),
        prop::collection::vec((0usize..8, 0usize..4, 0.0..1.0f64, -1.0..1.0f64), 0..4),
    )
        .prop_map(|(e, cuts)| {
            let env = make_env(ENV_NAMES[e]).unwrap();
            let mut g = shipped(ENV_NAMES[e]).unwrap();
            for (i, axis, frac, gain) in cuts {
                let i = i % g.len();
                let axis = axis % env.state_dim;
                let at = env.state_bounds.lo()[axis] + frac * env.state_bounds.width(axis);
                let mut k = vec![vec![0.0; env.state_dim]; env.action_dim];
                k[0][axis] = gain;
                let piece = AffineMap::new(k, env.action_bounds.center()).unwrap();
                let keep = g.components()[i].policy.clone();
                g = g
                    .split(i, LinPred::axis_le(env.state_dim, axis, at), piece, keep)
                    .unwrap();
            }
            (ENV_NAMES[e].to_string(), g)
        })
}

fn corners(bx: &Hyperbox) -> Vec<Vec<f64>> {
    (0..1usize << bx.dim())
        .map(|mask| {
            (0..bx.dim())
                .map(|k| {
                    if mask >> k & 1 == 1 {
                        bx.hi()[k]
                    } else {
                        bx.lo()[k]
                    }
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn join_meet_lattice(a in arb_box(DIM), b in arb_box(DIM), c in arb_box(DIM)) {
        prop_assert_eq!(a.join(&b).unwrap(), b.join(&a).unwrap());
        prop_assert_eq!(a.meet(&b).unwrap(), b.meet(&a).unwrap());
        prop_assert_eq!(a.join(&b).unwrap().join(&c).unwrap(), a.join(&b.join(&c).unwrap()).unwrap());
        prop_assert_eq!(a.meet(&b).unwrap().meet(&c).unwrap(), a.meet(&b.meet(&c).unwrap()).unwrap());
        prop_assert_eq!(a.join(&a.meet(&b).unwrap()).unwrap(), a.clone());
        prop_assert_eq!(a.meet(&a.join(&b).unwrap()).unwrap(), a.clone());
        let j = a.join(&b).unwrap();
        prop_assert!(j.contains_box(&a) && j.contains_box(&b));
        let m = a.meet(&b).unwrap();
        prop_assert!(m.is_empty() || (a.contains_box(&m) && b.contains_box(&m)));
    }

    #[test]
    fn affine_image_is_the_corner_hull(bx in arb_box(DIM), map in arb_map(2, DIM)) {
        let img = map.image(&bx).unwrap();
        let pts: Vec<Vec<f64>> = corners(&bx).iter().map(|x| map.apply(x)).collect();
        for l in 0..2 {
            let lo = pts.iter().map(|p| p[l]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p[l]).fold(f64::NEG_INFINITY, f64::max);
            // Outward rounding only, and no more than a few nanounits of it.
            let tol = 1e-8 * (1.0 + lo.abs().max(hi.abs()));
            prop_assert!(img.lo()[l] <= lo && lo - img.lo()[l] <= tol, "lo {} vs {}", img.lo()[l], lo);
            prop_assert!(img.hi()[l] >= hi && img.hi()[l] - hi <= tol, "hi {} vs {}", img.hi()[l], hi);
        }
    }

    #[test]
    fn interval_image_contains_sampled_maps(bx in arb_box(DIM), a in arb_map(2, DIM), b in arb_map(2, DIM), seed in any::<u64>()) {
        let lo: Vec<Vec<f64>> = a.matrix.iter().zip(&b.matrix).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x.min(*y)).collect()).collect();
        let hi: Vec<Vec<f64>> = a.matrix.iter().zip(&b.matrix).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x.max(*y)).collect()).collect();
        let gains = IntervalMatrix::new(lo.clone(), hi.clone()).unwrap();
        let bias = Hyperbox::point(&a.bias).join(&Hyperbox::point(&b.bias)).unwrap();
        let img = gains.image(&bias, &bx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let k: Vec<Vec<f64>> = lo.iter().zip(&hi).map(|(l, h)| l.iter().zip(h).map(|(l, h)| rand::Rng::random_range(&mut rng, *l..=*h)).collect()).collect();
            let c = bias.sample(&mut rng);
            let x = common::sample_start(&bx, &mut rng);
            prop_assert!(img.contains_point(&AffineMap::new(k, c).unwrap().apply(&x)));
        }
    }

    #[test]
    fn pred_eval_box_agrees_with_samples(p in arb_pred(DIM), bx in arb_box(DIM), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let verdict = p.eval_box(&bx).unwrap();
        for _ in 0..1000 {
            let x = common::sample_start(&bx, &mut rng);
            match verdict {
                Tri::True => prop_assert!(p.holds(&x)),
                Tri::False => prop_assert!(!p.holds(&x)),
                Tri::Unknown => {}
            }
        }
    }

    #[test]
    fn regions_partition_the_space((name, g) in arb_shield(), seed in any::<u64>()) {
        let env = make_env(&name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let s = env.state_bounds.sample(&mut rng);
            let matching = (0..g.len()).filter(|&i| g.region(i).contains(&s)).count();
            prop_assert_eq!(matching, 1);
        }
    }

    #[test]
    fn split_refines_only_the_cut_component((name, g) in arb_shield(), i in 0usize..8, axis in 0usize..4, frac in 0.0..1.0f64, seed in any::<u64>()) {
        let env = make_env(&name).unwrap();
        let i = i % g.len();
        let axis = axis % env.state_dim;
        let at = env.state_bounds.lo()[axis] + frac * env.state_bounds.width(axis);
        let g1 = AffineMap::constant(env.state_dim, env.action_bounds.lo().to_vec());
        let g2 = AffineMap::constant(env.state_dim, env.action_bounds.hi().to_vec());
        let split = g.split(i, LinPred::axis_le(env.state_dim, axis, at), g1.clone(), g2.clone()).unwrap();
        prop_assert_eq!(split.len(), g.len() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let s = env.state_bounds.sample(&mut rng);
            let after = split.eval(&s, &env.action_bounds).unwrap();
            if g.region(i).contains(&s) {
                let expect = if s[axis] <= at { env.clip_action(&g1.apply(&s)) } else { env.clip_action(&g2.apply(&s)) };
                prop_assert_eq!(after, expect);
            } else {
                prop_assert_eq!(after, g.eval(&s, &env.action_bounds).unwrap());
            }
        }
    }

    #[test]
    fn shield_json_round_trip((_, g) in arb_shield()) {
        let back = PwlShield::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn shield_post_is_monotone((name, g) in arb_shield(), fa in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 4), shrink in prop::collection::vec(0.0..1.0f64, 8)) {
        let env = make_env(&name).unwrap();
        let n = env.state_dim;
        let sb = &env.state_bounds;
        let lo: Vec<f64> = (0..n).map(|k| sb.lo()[k] + fa[k].0.min(fa[k].1) * sb.width(k)).collect();
        let hi: Vec<f64> = (0..n).map(|k| sb.lo()[k] + fa[k].0.max(fa[k].1) * sb.width(k)).collect();
        let outer = Hyperbox::new(lo.clone(), hi.clone()).unwrap();
        let ilo: Vec<f64> = (0..n).map(|k| lo[k] + 0.5 * shrink[k] * (hi[k] - lo[k])).collect();
        let ihi: Vec<f64> = (0..n).map(|k| hi[k] - 0.5 * shrink[n + k] * (hi[k] - lo[k])).collect();
        let inner = Hyperbox::new(ilo, ihi).unwrap();
        let big = shield_post(&env, &g, &outer).unwrap();
        let small = shield_post(&env, &g, &inner).unwrap();
        prop_assert!(big.contains_box(&small), "{:?} not within {:?}", small, big);
    }
}

#[test]
fn every_state_has_exactly_one_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        for _ in 0..10_000 {
            let s = env.state_bounds.sample(&mut rng);
            assert_eq!(
                env.modes.iter().filter(|m| m.region.contains(&s)).count(),
                1,
                "{name} at {s:?}"
            );
        }
    }
}

#[test]
fn sampled_steps_stay_in_the_worst_case_post() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        for _ in 0..10_000 {
            let s = env.state_bounds.sample(&mut rng);
            let a = env.action_bounds.sample(&mut rng);
            let post = env
                .worst_case_post(&Hyperbox::point(&s), &Hyperbox::point(&a))
                .unwrap();
            let next = env.step(&s, &a, &mut rng).unwrap().next_state;
            assert!(
                post.contains_point(&next),
                "{name}: {next:?} outside {post:?}"
            );
            assert!(env.state_bounds.contains_box(&post));
        }
    }
}

#[test]
fn same_seed_same_trajectory() {
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        let g = shipped(name).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = env.reset(&mut rng);
            let mut out = vec![s.clone()];
            for _ in 0..env.episode_len {
                let a = g.eval(&s, &env.action_bounds).unwrap();
                s = env.step(&s, &a, &mut rng).unwrap().next_state;
                out.push(s.clone());
            }
            out
        };
        assert_eq!(run(5), run(5));
    }
}

#[test]
fn shipped_shields_pass_the_monte_carlo_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        let g = shipped(name).unwrap();
        assert!(verify_bounded(&env, &g, &env.init_box, env.horizon)
            .unwrap()
            .is_certified());
        assert_eq!(
            mc_unsafe_hits(&env, &g, &env.init_box, env.horizon, 10_000, &mut rng),
            0,
            "{name}"
        );
    }
}

#[test]
fn safe_space_holds_init_and_excludes_unsafe() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for name in ENV_NAMES {
        let env = make_env(name).unwrap();
        let phi = safe_space(&env, &shipped(name).unwrap()).unwrap();
        for _ in 0..1000 {
            assert!(phi.contains(&env.init_box.sample(&mut rng)), "{name}");
        }
        for u in &env.unsafe_boxes {
            let u = u.meet(&env.state_bounds).unwrap();
            if u.is_empty() {
                continue;
            }
            for _ in 0..1000 {
                let s = u.sample(&mut rng);
                assert!(!phi.contains(&s), "{name}: unsafe {s:?} in invariant");
            }
        }
    }
}

#[test]
fn certified_parameter_box_certifies_each_member() {
    let env = make_env("road").unwrap();
    let g = shipped("road").unwrap();
    let phi = safe_space(&env, &g).unwrap();
    let brake = g.components()[0].policy.clone();
    let bx =
        compute_safe_region(&env, &g, 0, &brake, &phi, &ProjectConfig::default(), 0.0).unwrap();
    assert!(verify_param_box(&env, &g, &bx.family(0), &phi, phi.horizon).unwrap());
    let (lo, hi) = bx.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let theta: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| rand::Rng::random_range(&mut rng, *l..=*h))
            .collect();
        let member = g
            .with_policy(0, AffineMap::from_params(1, 2, &theta))
            .unwrap();
        for b in phi.boxes() {
            let start = g.region(0).meet_box(b).unwrap();
            if !start.is_empty() {
                assert!(
                    verify_bounded(&env, &member, &start, phi.horizon)
                        .unwrap()
                        .is_certified(),
                    "{theta:?}"
                );
            }
        }
    }
}

/// Untrained networks behind the monitor: no unsafe state in 100,000 steps
/// per environment.
#[test]
fn monitored_random_networks_never_violate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for name in ENV_NAMES {
        let env: EnvModel = make_env(name).unwrap();
        let g = shipped(name).unwrap();
        let phi = safe_space(&env, &g).unwrap();
        let mut actor = new_actor(&env, &[16], &mut rng).unwrap();
        // Large output weights make the untrained actor aggressive.
        let n = actor.num_params();
        for p in &mut actor.params_mut()[n - 17 * env.action_dim..] {
            *p = rand::Rng::random_range(&mut rng, -20.0..20.0);
        }
        let h = BlendedPolicy {
            shield: g,
            invariant: phi,
            actor,
        };
        let episodes = 100_000 / env.episode_len;
        let stats = rollout(&h, &env, episodes, &mut rng).unwrap();
        assert!(stats.steps >= 100_000);
        assert_eq!(stats.violations, 0, "{name}");
        assert_eq!(stats.monitor_failures, 0, "{name}");
    }
}
