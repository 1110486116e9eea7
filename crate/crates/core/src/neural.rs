//! Small fully connected networks with hand-written backprop, a DDPG-style
//! actor-critic trainer and DAgger imitation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blend;
use crate::envmodel::EnvModel;
use crate::error::{check_dim, Error, Result};
use crate::geometry::Hyperbox;
use crate::shield::PwlShield;
use crate::verifier::Invariant;

/// Multi-layer perceptron: tanh hidden layers, linear output layer, and an
/// optional `mid + half·tanh(z)` squash for actors. Inputs are rescaled to
/// roughly `[-1, 1]` by a fixed per-coordinate affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    input_center: Vec<f64>,
    input_scale: Vec<f64>,
    squash: Option<Squash>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Squash {
    mid: Vec<f64>,
    half: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    /// `acts[0]` is the normalised input; `acts[l + 1]` is the output of layer
    /// `l` (tanh for hidden layers, pre-squash for the last one).
    acts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Fan-in uniform initialisation; the last layer starts small so fresh
    /// actors and critics output values near zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Mlp::zeros(sizes)?;
        let layers = sizes.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (inp, out) = (sizes[l], sizes[l + 1]);
            let bound = if l + 1 == layers {
                3e-3
            } else {
                1.0 / (inp as f64).sqrt()
            };
            for p in &mut net.params[offset..offset + out * inp + out] {
                *p = rng.random_range(-bound..=bound);
            }
            offset += out * inp + out;
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
            input_center: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
            squash: None,
        })
    }

    /// Rescales inputs so `bx` maps onto `[-1, 1]` per coordinate.
    pub fn with_input_box(mut self, bx: &Hyperbox) -> Result<Self> {
        check_dim(self.in_dim(), bx.dim())?;
        self.input_center = bx.center();
        self.input_scale = (0..bx.dim())
            .map(|k| (0.5 * bx.width(k)).max(1e-12))
            .collect();
        Ok(self)
    }

    /// Squashes outputs into `bounds` with a scaled tanh.
    pub fn with_squash(mut self, bounds: &Hyperbox) -> Result<Self> {
        check_dim(self.out_dim(), bounds.dim())?;
        self.squash = Some(Squash {
            mid: bounds.center(),
            half: (0..bounds.dim()).map(|k| 0.5 * bounds.width(k)).collect(),
        });
        Ok(self)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Checks shapes and finiteness, e.g. after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let fresh = Mlp::zeros(&self.sizes)?;
        if fresh.params.len() != self.params.len()
            || self.input_center.len() != self.in_dim()
            || self.input_scale.len() != self.in_dim()
        {
            return Err(Error::Config(
                "network parameter shapes do not match layer sizes".into(),
            ));
        }
        if let Some(sq) = &self.squash {
            check_dim(self.out_dim(), sq.mid.len())?;
            check_dim(self.out_dim(), sq.half.len())?;
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.in_dim(), x.len())?;
        Ok(self.trace(x).output)
    }

    /// Forward pass keeping the activations; `x` must have the input size.
    pub fn trace(&self, x: &[f64]) -> Trace {
        debug_assert_eq!(x.len(), self.in_dim());
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(
            x.iter()
                .zip(&self.input_center)
                .zip(&self.input_scale)
                .map(|((v, c), s)| (v - c) / s)
                .collect::<Vec<_>>(),
        );
        let mut offset = 0;
        for l in 0..layers {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + out * inp];
            let b = &self.params[offset + out * inp..offset + out * inp + out];
            let a = &acts[l];
            let mut z: Vec<f64> = (0..out)
                .map(|i| b[i] + dot4(&w[i * inp..(i + 1) * inp], a))
                .collect();
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
            offset += out * inp + out;
        }
        let last = acts.last().expect("nonempty");
        let output = match &self.squash {
            Some(sq) => last
                .iter()
                .enumerate()
                .map(|(k, z)| sq.mid[k] + sq.half[k] * z.tanh())
                .collect(),
            None => last.clone(),
        };
        Trace { acts, output }
    }

    /// Adds `∂L/∂θ` into `grads` given `∂L/∂output`, and returns `∂L/∂x`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.params.len());
        self.backprop(trace, grad_out, 0.0, Some(grads))
    }

    /// As [`Mlp::backward`] for the loss `L + λ·‖z‖²`, where `z` is the
    /// output layer before the squash.
    pub fn backward_penalized(
        &self,
        trace: &Trace,
        grad_out: &[f64],
        lambda: f64,
        grads: &mut [f64],
    ) -> Vec<f64> {
        self.backprop(trace, grad_out, lambda, Some(grads))
    }

    /// `∂L/∂x` only.
    pub fn input_gradient(&self, trace: &Trace, grad_out: &[f64]) -> Vec<f64> {
        self.backprop(trace, grad_out, 0.0, None)
    }

    fn backprop(
        &self,
        trace: &Trace,
        grad_out: &[f64],
        lambda: f64,
        mut grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut delta: Vec<f64> = match &self.squash {
            Some(sq) => trace.acts[layers]
                .iter()
                .enumerate()
                .map(|(k, z)| {
                    let t = z.tanh();
                    grad_out[k] * sq.half[k] * (1.0 - t * t)
                })
                .collect(),
            None => grad_out.to_vec(),
        };
        if lambda != 0.0 {
            for (d, z) in delta.iter_mut().zip(&trace.acts[layers]) {
                *d += 2.0 * lambda * z;
            }
        }
        let mut offset = self.params.len();
        for l in (0..layers).rev() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= out * inp + out;
            let a = &trace.acts[l];
            let mut da = vec![0.0; inp];
            for i in 0..out {
                let d = delta[i];
                if d == 0.0 {
                    continue;
                }
                let row = offset + i * inp;
                let w = &self.params[row..row + inp];
                for (dj, wj) in da.iter_mut().zip(w) {
                    *dj += wj * d;
                }
                if let Some(grads) = grads.as_deref_mut() {
                    for (gj, aj) in grads[row..row + inp].iter_mut().zip(a) {
                        *gj += d * aj;
                    }
                    grads[offset + out * inp + i] += d;
                }
            }
            delta = if l > 0 {
                da.iter().zip(a).map(|(g, t)| g * (1.0 - t * t)).collect()
            } else {
                da
            };
        }
        delta
            .iter()
            .zip(&self.input_scale)
            .map(|(g, s)| g / s)
            .collect()
    }

    /// `self ← τ·other + (1 − τ)·self`.
    pub fn soft_update(&mut self, other: &Mlp, tau: f64) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            *p += tau * (q - *p);
        }
    }
}

/// Dot product with four independent accumulators, which lets the compiler
/// vectorise the reduction.
#[inline]
fn dot4(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for k in 0..4 {
            acc[k] += a[k] * b[k];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Max relative error between backprop and central finite differences
/// (`h = 1e-5`) for the scalar loss `v·net(x)`, over every parameter and
/// input coordinate, with random `x` and `v`. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<R: Rng + ?Sized>(net: &Mlp, rng: &mut R) -> f64 {
    const H: f64 = 1e-5;
    let x: Vec<f64> = (0..net.in_dim())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let v: Vec<f64> = (0..net.out_dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss =
        |n: &Mlp, x: &[f64]| -> f64 { n.trace(x).output.iter().zip(&v).map(|(y, v)| y * v).sum() };
    let mut grads = vec![0.0; net.num_params()];
    let gx = net.backward(&net.trace(&x), &v, &mut grads);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for (k, &gk) in grads.iter().enumerate() {
        let orig = probe.params[k];
        probe.params[k] = orig + H;
        let up = loss(&probe, &x);
        probe.params[k] = orig - H;
        let down = loss(&probe, &x);
        probe.params[k] = orig;
        worst = worst.max(rel(gk, (up - down) / (2.0 * H)));
    }
    let mut xp = x.clone();
    for k in 0..x.len() {
        xp[k] = x[k] + H;
        let up = loss(net, &xp);
        xp[k] = x[k] - H;
        let down = loss(net, &xp);
        xp[k] = x[k];
        worst = worst.max(rel(gx[k], (up - down) / (2.0 * H)));
    }
    worst
}

/// Runs [`grad_check`] on `count` random networks (1–3 hidden layers of
/// width 1–16, random input scaling, half of them squashed) and returns the
/// largest error seen.
pub fn grad_check_random<R: Rng + ?Sized>(count: usize, rng: &mut R) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..count {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=6)];
        sizes.extend((0..depth).map(|_| rng.random_range(1..=16)));
        sizes.push(rng.random_range(1..=3));
        let mut net = Mlp::new(&sizes, rng).expect("valid sizes");
        // Larger weights than the default init so tanh saturation is exercised.
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let lo: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-3.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.5..4.0)).collect();
        net = net
            .with_input_box(&Hyperbox::new(lo, hi).expect("ordered"))
            .expect("dims match");
        if rng.random_bool(0.5) {
            let m = net.out_dim();
            net = net
                .with_squash(&Hyperbox::new(vec![-2.0; m], vec![1.0; m]).expect("ordered"))
                .expect("dims match");
        }
        worst = worst.max(grad_check(&net, rng));
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with classical momentum.
    Sgd,
    /// Adam with `β₁ = momentum`, `β₂ = 0.999`.
    Adam,
}

/// First-order optimiser with optional gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        lr: f64,
        momentum: f64,
        clip_norm: Option<f64>,
        n: usize,
    ) -> Self {
        Optimizer {
            kind,
            lr,
            momentum,
            clip_norm,
            first: vec![0.0; n],
            second: match kind {
                OptimizerKind::Sgd => Vec::new(),
                OptimizerKind::Adam => vec![0.0; n],
            },
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grads) {
                    *v = self.momentum * *v - self.lr * scale * g;
                    *p += *v;
                }
            }
            OptimizerKind::Adam => {
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t = self.t.saturating_add(1);
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for (((p, m), v), g) in params
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grads)
                {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.items[i]
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect()
    }
}

/// Uniform reservoir sample of visited states.
#[derive(Clone, Debug)]
pub struct Reservoir {
    capacity: usize,
    seen: u64,
    items: Vec<Vec<f64>>,
}

impl Reservoir {
    pub fn new(capacity: usize) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            items: Vec::new(),
        }
    }

    pub fn offer<R: Rng + ?Sized>(&mut self, s: &[f64], rng: &mut R) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(s.to_vec());
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = s.to_vec();
            }
        }
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.items
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Actor learning rate η.
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Exploration noise standard deviation as a fraction of the action range.
    pub noise_frac: f64,
    /// Target-network smoothing τ.
    pub tau: f64,
    pub hidden: Vec<usize>,
    /// Gradient steps happen every `update_every` environment steps.
    pub update_every: usize,
    /// Environment steps before the first gradient step.
    pub warmup: usize,
    /// Costs are multiplied by this before entering the critic's TD target.
    pub cost_scale: f64,
    pub grad_clip: f64,
    /// Weight of the penalty on the actor's pre-squash outputs, which keeps
    /// the squash away from its flat tails.
    pub preact_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            buffer_capacity: 50_000,
            noise_frac: 0.1,
            tau: 0.005,
            hidden: vec![64, 64],
            update_every: 4,
            warmup: 500,
            cost_scale: 0.01,
            grad_clip: 10.0,
            preact_penalty: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("noise_frac", self.noise_frac),
            ("tau", self.tau),
            ("cost_scale", self.cost_scale),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "train.{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if self.tau > 1.0 {
            return Err(Error::Config("train.tau must be at most 1".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.update_every == 0 {
            return Err(Error::Config(
                "train.batch_size, buffer_capacity and update_every must be positive".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "train.hidden needs at least one positive layer width".into(),
            ));
        }
        Ok(())
    }
}

/// A fresh actor for `env`: state-box input scaling, action-box squash.
pub fn new_actor<R: Rng + ?Sized>(env: &EnvModel, hidden: &[usize], rng: &mut R) -> Result<Mlp> {
    let mut sizes = vec![env.state_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(env.action_dim);
    Mlp::new(&sizes, rng)?
        .with_input_box(&env.state_bounds)?
        .with_squash(&env.action_bounds)
}

pub fn new_critic<R: Rng + ?Sized>(env: &EnvModel, hidden: &[usize], rng: &mut R) -> Result<Mlp> {
    let mut sizes = vec![env.state_dim + env.action_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    Mlp::new(&sizes, rng)?.with_input_box(&env.state_bounds.product(&env.action_bounds))
}

/// How environment actions are chosen during [`ddpg_update`].
#[derive(Clone, Copy, Debug)]
pub enum Behaviour<'a> {
    /// Noisy actor output gated by the safety monitor of `(shield, invariant)`.
    Shielded {
        shield: &'a PwlShield,
        invariant: &'a Invariant,
    },
    /// Noisy actor output executed as is; unsafe states cost `penalty` extra
    /// and end the episode.
    Raw { penalty: f64 },
}

/// One finished episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeLog {
    /// Discounted cost `Σ γ^t c_t`.
    pub cost: f64,
    pub steps: usize,
    pub violations: usize,
    /// Fraction of steps on which the shield acted.
    pub zeta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub episodes: Vec<EpisodeLog>,
    pub steps: usize,
    pub violations: usize,
    /// Steps on which the network acted (Z = 1).
    pub network_steps: usize,
    /// Z = 1 steps whose realised successor fell outside the invariant.
    pub monitor_failures: usize,
}

#[derive(Clone, Debug, Default)]
struct EpisodeState {
    state: Vec<f64>,
    t: usize,
    cost: f64,
    discount: f64,
    violations: usize,
    shield_steps: usize,
}

/// DDPG learner state. The episode in progress survives across calls so the
/// training schedule can be split into phases without truncating episodes.
#[derive(Clone, Debug)]
pub struct Ddpg {
    pub actor: Mlp,
    pub critic: Mlp,
    actor_target: Mlp,
    critic_target: Mlp,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    buffer: ReplayBuffer,
    pub visited: Reservoir,
    cfg: TrainConfig,
    episode: Option<EpisodeState>,
    total_steps: usize,
}

/// Size of the visited-state reservoir.
pub const VISITED_CAPACITY: usize = 10_000;

impl Ddpg {
    pub fn new<R: Rng + ?Sized>(
        env: &EnvModel,
        actor: Mlp,
        cfg: TrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        check_dim(env.state_dim, actor.in_dim())?;
        check_dim(env.action_dim, actor.out_dim())?;
        let critic = new_critic(env, &cfg.hidden, rng)?;
        Ok(Ddpg {
            actor_opt: Optimizer::new(
                cfg.optimizer,
                cfg.actor_lr,
                cfg.momentum,
                Some(cfg.grad_clip),
                actor.num_params(),
            ),
            critic_opt: Optimizer::new(
                cfg.optimizer,
                cfg.critic_lr,
                cfg.momentum,
                Some(cfg.grad_clip),
                critic.num_params(),
            ),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            visited: Reservoir::new(VISITED_CAPACITY),
            actor,
            critic,
            cfg,
            episode: None,
            total_steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    fn gradient_step<R: Rng + ?Sized>(&mut self, gamma: f64, rng: &mut R) {
        let batch = self.buffer.sample(self.cfg.batch_size, rng);
        let inv_b = 1.0 / batch.len() as f64;
        let n = self.actor.in_dim();

        let mut cgrad = vec![0.0; self.critic.num_params()];
        let mut sa = Vec::with_capacity(n + self.actor.out_dim());
        for &i in &batch {
            let e = self.buffer.get(i);
            let mut target = self.cfg.cost_scale * e.cost;
            if !e.done {
                let a2 = self.actor_target.trace(&e.next_state).output;
                sa.clear();
                sa.extend_from_slice(&e.next_state);
                sa.extend_from_slice(&a2);
                target += gamma * self.critic_target.trace(&sa).output[0];
            }
            sa.clear();
            sa.extend_from_slice(&e.state);
            sa.extend_from_slice(&e.action);
            let tr = self.critic.trace(&sa);
            let err = tr.output[0] - target;
            self.critic.backward(&tr, &[2.0 * err * inv_b], &mut cgrad);
        }
        self.critic_opt.step(&mut self.critic.params, &cgrad);

        // The actor descends Q: costs are minimised.
        let mut agrad = vec![0.0; self.actor.num_params()];
        for &i in &batch {
            let e = self.buffer.get(i);
            let ta = self.actor.trace(&e.state);
            sa.clear();
            sa.extend_from_slice(&e.state);
            sa.extend_from_slice(&ta.output);
            let tq = self.critic.trace(&sa);
            let dq = self.critic.input_gradient(&tq, &[inv_b]);
            self.actor.backward_penalized(
                &ta,
                &dq[n..],
                self.cfg.preact_penalty * inv_b,
                &mut agrad,
            );
        }
        self.actor_opt.step(&mut self.actor.params, &agrad);

        self.actor_target.soft_update(&self.actor, self.cfg.tau);
        self.critic_target.soft_update(&self.critic, self.cfg.tau);
    }
}

/// Runs `steps` environment steps under `behaviour` with Gaussian exploration
/// noise (added before the monitor), storing transitions and taking gradient
/// steps on the critic (TD) and actor (deterministic policy gradient).
pub fn ddpg_update<R: Rng + ?Sized>(
    agent: &mut Ddpg,
    behaviour: Behaviour<'_>,
    env: &EnvModel,
    steps: usize,
    rng: &mut R,
) -> Result<UpdateReport> {
    let mut report = UpdateReport::default();
    let noise: Vec<Normal<f64>> = (0..env.action_dim)
        .map(|k| {
            Normal::new(0.0, agent.cfg.noise_frac * env.action_bounds.width(k))
                .map_err(|e| Error::Config(e.to_string()))
        })
        .collect::<Result<_>>()?;
    for _ in 0..steps {
        let mut ep = match agent.episode.take() {
            Some(ep) => ep,
            None => EpisodeState {
                state: env.reset(rng),
                discount: 1.0,
                ..EpisodeState::default()
            },
        };
        let s = ep.state.clone();
        let proposal: Vec<f64> = agent
            .actor
            .trace(&s)
            .output
            .iter()
            .zip(&noise)
            .map(|(a, d)| a + d.sample(rng))
            .collect();
        let proposal = env.clip_action(&proposal);
        let (action, used_network) = match behaviour {
            Behaviour::Shielded { shield, invariant } => {
                let log = blend::monitor(env, shield, invariant, &s, &proposal)?;
                (log.action, log.used_network)
            }
            Behaviour::Raw { .. } => (proposal, true),
        };
        let tr = env.step(&s, &action, rng)?;
        let mut cost = tr.cost;
        let mut done = false;
        if tr.violated {
            ep.violations += 1;
            report.violations += 1;
            if let Behaviour::Raw { penalty } = behaviour {
                cost += penalty;
                done = true;
            }
        }
        if let Behaviour::Shielded { invariant, .. } = behaviour {
            if used_network && !invariant.contains(&tr.next_state) {
                report.monitor_failures += 1;
            }
        }
        if used_network {
            report.network_steps += 1;
        } else {
            ep.shield_steps += 1;
        }
        agent.visited.offer(&s, rng);
        agent.buffer.push(Experience {
            state: s,
            action,
            cost,
            next_state: tr.next_state.clone(),
            done,
        });
        ep.cost += ep.discount * cost;
        ep.discount *= env.gamma;
        ep.t += 1;
        ep.state = tr.next_state;
        report.steps += 1;
        agent.total_steps += 1;

        if agent.total_steps >= agent.cfg.warmup
            && agent.buffer.len() >= agent.cfg.batch_size
            && agent.total_steps.is_multiple_of(agent.cfg.update_every)
        {
            agent.gradient_step(env.gamma, rng);
        }

        if done || ep.t >= env.episode_len {
            report.episodes.push(EpisodeLog {
                cost: ep.cost,
                steps: ep.t,
                violations: ep.violations,
                zeta: ep.shield_steps as f64 / ep.t as f64,
            });
        } else {
            agent.episode = Some(ep);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaggerConfig {
    pub rounds: usize,
    pub episodes_per_round: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            rounds: 4,
            episodes_per_round: 4,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl DaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_round == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "dagger.episodes_per_round, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "dagger.lr must be positive and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error of `net` on `(x, y)` pairs, each output coordinate
/// divided by `scale` (half the action range) so errors are unitless.
fn regression_loss(net: &Mlp, xs: &[Vec<f64>], ys: &[Vec<f64>], scale: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            net.trace(x)
                .output
                .iter()
                .zip(y)
                .zip(scale)
                .map(|((p, t), s)| ((p - t) / s).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / xs.len() as f64
}

/// DAgger: each round rolls out the current student on the model (no shield,
/// states clipped to the bounds; the first round follows the teacher), labels
/// every visited state with the teacher's action, and refits on the
/// aggregated data. Returns the snapshot with the lowest loss on a
/// validation set held out from the first round.
pub fn dagger_imitate<R, F>(
    student: Mlp,
    teacher: F,
    env: &EnvModel,
    cfg: &DaggerConfig,
    rng: &mut R,
) -> Result<Mlp>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if cfg.rounds == 0 {
        return Ok(student);
    }
    let scale: Vec<f64> = (0..env.action_dim)
        .map(|k| (0.5 * env.action_bounds.width(k)).max(1e-12))
        .collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let (mut vx, mut vy) = (Vec::new(), Vec::new());
    let mut net = student;
    let mut best: Option<(f64, Mlp)> = None;
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd,
        cfg.lr,
        cfg.momentum,
        Some(10.0),
        net.num_params(),
    );
    let mut labelled = 0usize;
    for round in 0..cfg.rounds {
        for _ in 0..cfg.episodes_per_round {
            let mut s = env.reset(rng);
            for _ in 0..env.episode_len {
                let label = env.clip_action(&teacher(&s)?);
                let act = if round == 0 {
                    label.clone()
                } else {
                    net.trace(&s).output
                };
                labelled += 1;
                if round == 0 && labelled.is_multiple_of(5) {
                    vx.push(s.clone());
                    vy.push(label);
                } else {
                    xs.push(s.clone());
                    ys.push(label);
                }
                s = env.step(&s, &act, rng)?.next_state;
            }
        }
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut grads = vec![0.0; net.num_params()];
                let inv = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let tr = net.trace(&xs[i]);
                    let g: Vec<f64> = tr
                        .output
                        .iter()
                        .zip(&ys[i])
                        .zip(&scale)
                        .map(|((p, t), s)| 2.0 * (p - t) / (s * s) * inv)
                        .collect();
                    net.backward(&tr, &g, &mut grads);
                }
                opt.step(&mut net.params, &grads);
            }
        }
        let val = if vx.is_empty() {
            regression_loss(&net, &xs, &ys, &scale)
        } else {
            regression_loss(&net, &vx, &vy, &scale)
        };
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, net.clone()));
        }
    }
    Ok(best.expect("at least one round").1)
}
