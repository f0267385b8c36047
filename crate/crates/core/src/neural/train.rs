//! Discriminator, dual value, f-advantage regression and the GCSL/WGCSL
//! baselines on vector-valued data.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::RelabelSpec;
use crate::error::{GofarError, Result};
use crate::fdiv::FDivergence;
use crate::mdp::{derive_seed, rng_from_seed, Rng};
use crate::tabular::baselines::is_unstable;
use crate::tabular::system::LOGIT_CLAMP;

use super::adam::Adam;
use super::data::{goal_reached, Batch, BatchSource, Moments, VecDataset};
use super::mlp::{concat_cols, Mlp, OutputAct};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_value: f64,
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub batch: usize,
    pub gamma: f64,
    pub grad_penalty: f64,
    pub hidden: usize,
    pub disc_steps: usize,
    pub value_steps: usize,
    pub policy_steps: usize,
    /// Fixed deviation of the Gaussian policy.
    pub sigma: f64,
    /// Upper clip on `exp(A)` in WGCSL.
    pub exp_clip: f64,
    /// Soft target update rate for the WGCSL critic.
    pub tau: f64,
    /// Standardise network inputs with dataset moments.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_value: 5e-4,
            lr_policy: 5e-4,
            lr_disc: 5e-4,
            batch: 256,
            gamma: 0.98,
            grad_penalty: 0.01,
            hidden: 256,
            disc_steps: 10_000,
            value_steps: 10_000,
            policy_steps: 10_000,
            sigma: 0.1,
            exp_clip: 10.0,
            tau: 0.05,
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_value, self.lr_policy, self.lr_disc, self.sigma, self.exp_clip];
        let ok = rates.iter().all(|&x| x > 0.0 && x.is_finite())
            && self.batch > 0
            && self.hidden > 0
            && self.gamma > 0.0
            && self.gamma < 1.0
            && self.grad_penalty >= 0.0
            && self.tau > 0.0
            && self.tau <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(GofarError::Config(format!("invalid training config {self:?}")))
        }
    }

    fn net(&self, input: &Moments, d_out: usize, out: OutputAct, rng: &mut Rng) -> Mlp {
        let net = Mlp::new(&[input.mean.len(), self.hidden, self.hidden, d_out], out, rng);
        if self.standardize {
            net.with_standardization(&input.mean, &input.std)
        } else {
            net
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−log(1/c − 1)` with `c` clamped to `[1e-6, 1 − 1e-6]`, i.e. the clamped logit.
pub fn reward_from_logit(logit: f64) -> f64 {
    logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

pub fn reward_from_prob(c: f64) -> f64 {
    let c = c.clamp(1e-6, 1.0 - 1e-6);
    -(1.0 / c - 1.0).ln()
}

/// Logistic classifier `c(φ(s), g)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
}

impl Discriminator {
    pub fn prob(&self, achieved: &Array2<f64>, goal: &Array2<f64>) -> Result<Vec<f64>> {
        let out = self.net.predict(&concat_cols(&[achieved, goal]))?;
        Ok(out.column(0).iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn reward(&self, achieved: &Array2<f64>, goal: &Array2<f64>) -> Result<Vec<f64>> {
        let out = self.net.predict(&concat_cols(&[achieved, goal]))?;
        Ok(out.column(0).iter().map(|&l| reward_from_logit(l)).collect())
    }
}

/// Positives `(g, g)` (the Dirac target), negatives `(φ(s), g)` from data:
/// mean logistic loss of both plus `λ · mean ‖∇_x logit‖²` over all inputs.
pub fn disc_loss_grad(net: &Mlp, achieved: &Array2<f64>, goal: &Array2<f64>, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let b = goal.nrows() as f64;
    let pos = concat_cols(&[goal, goal]);
    let neg = concat_cols(&[achieved, goal]);
    let x = concatenate(Axis(0), &[pos.view(), neg.view()]).expect("same width");
    let cache = net.forward(&x)?;
    let n = goal.nrows();
    let mut loss = 0.0;
    let mut dout = Array2::zeros((2 * n, 1));
    for i in 0..n {
        let lp = cache.out[[i, 0]];
        let ln = cache.out[[n + i, 0]];
        loss += (softplus(-lp) + softplus(ln)) / b;
        dout[[i, 0]] = (sigmoid(lp) - 1.0) / b;
        dout[[n + i, 0]] = sigmoid(ln) / b;
    }
    let (mut grad, _) = net.backward(&cache, &dout)?;
    if lambda > 0.0 {
        let (pen, gp) = net.input_grad_penalty(&cache)?;
        loss += lambda * pen;
        for (g, p) in grad.iter_mut().zip(gp) {
            *g += lambda * p;
        }
    }
    Ok((loss, grad))
}

/// Per-row `f⋆(y)` terms of the dual and the matching `∂/∂y`, in the
/// normalised form the losses use.
fn conjugate_terms(div: FDivergence, y: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    match div {
        FDivergence::ChiSquared => {
            let loss = y.iter().zip(w).map(|(y, w)| w * div.f_star(*y)).sum();
            (loss, y.iter().zip(w).map(|(y, w)| w * div.f_star_prime(*y)).collect())
        }
        FDivergence::Kl => {
            // log Σ w exp(y), shifted by the max
            let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = y.iter().zip(w).map(|(y, w)| w * (y - m).exp()).sum();
            let loss = m + z.ln() - w.iter().sum::<f64>().ln();
            (loss, y.iter().zip(w).map(|(y, w)| w * (y - m).exp() / z).collect())
        }
    }
}

/// `(1−γ) Σ iw·V(s0, g) + Σ w·f⋆(R + γV(s′) − V(s))` and its gradient.
pub fn value_loss_grad(
    net: &Mlp,
    batch: &Batch,
    reward: &[f64],
    div: FDivergence,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    let m = batch.init_weight.len();
    let cur = concat_cols(&[&batch.obs, &batch.goal]);
    let next = concat_cols(&[&batch.next_obs, &batch.goal]);
    let init = concat_cols(&[&batch.init_obs, &batch.init_goal]);
    let x = concatenate(Axis(0), &[cur.view(), next.view(), init.view()]).expect("same width");
    let cache = net.forward(&x)?;
    let v = cache.out.column(0);
    let y: Vec<f64> = (0..n).map(|i| reward[i] + gamma * v[n + i] - v[i]).collect();
    let (mut loss, dy) = conjugate_terms(div, &y, &batch.weight);
    let mut dout = Array2::zeros((2 * n + m, 1));
    for i in 0..n {
        dout[[i, 0]] = -dy[i];
        dout[[n + i, 0]] = gamma * dy[i];
    }
    for j in 0..m {
        loss += (1.0 - gamma) * batch.init_weight[j] * v[2 * n + j];
        dout[[2 * n + j, 0]] = (1.0 - gamma) * batch.init_weight[j];
    }
    let (grad, _) = net.backward(&cache, &dout)?;
    Ok((loss, grad))
}

/// `f⋆′` advantage weights with the `≥ 0` clamp; the KL form is self-normalised.
pub fn advantage_weights(div: FDivergence, y: &[f64]) -> Vec<f64> {
    match div {
        FDivergence::ChiSquared => y.iter().map(|&y| div.weight(y)).collect(),
        FDivergence::Kl => {
            let ones = vec![1.0; y.len()];
            let (_, p) = conjugate_terms(div, y, &ones);
            p.iter().map(|p| p * y.len() as f64).collect()
        }
    }
}

/// Deterministic Gaussian-mean policy `μ = scale · tanh(net(s, g))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub action_scale: f64,
    pub sigma: f64,
}

impl GaussianPolicy {
    pub fn mean(&self, obs: &Array2<f64>, goal: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.net.predict(&concat_cols(&[obs, goal]))? * self.action_scale)
    }

    pub fn act(&self, obs: &[f64], goal: &[f64]) -> Result<Vec<f64>> {
        let o = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| GofarError::Shape(e.to_string()))?;
        let g = Array2::from_shape_vec((1, goal.len()), goal.to_vec()).map_err(|e| GofarError::Shape(e.to_string()))?;
        Ok(self.mean(&o, &g)?.row(0).to_vec())
    }
}

/// `Σ_i (w_i / B) ‖a_i − μ_i‖² / (2σ²)`, the negative weighted log-likelihood
/// up to a constant.
pub fn policy_loss_grad(pi: &GaussianPolicy, batch: &Batch, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cache = pi.net.forward(&concat_cols(&[&batch.obs, &batch.goal]))?;
    let b = batch.len() as f64;
    let s2 = pi.sigma * pi.sigma;
    let mut loss = 0.0;
    let mut dout = Array2::zeros(cache.out.dim());
    for i in 0..batch.len() {
        for j in 0..cache.out.ncols() {
            let diff = pi.action_scale * cache.out[[i, j]] - batch.action[[i, j]];
            loss += weights[i] / b * diff * diff / (2.0 * s2);
            dout[[i, j]] = weights[i] / b * diff / s2 * pi.action_scale;
        }
    }
    let (grad, _) = pi.net.backward(&cache, &dout)?;
    Ok((loss, grad))
}

/// Squared TD error `Σ_i (1/B)·½(Q(s,a,g) − target_i)²`.
pub fn q_loss_grad(q: &Mlp, batch: &Batch, target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cache = q.forward(&concat_cols(&[&batch.obs, &batch.goal, &batch.action]))?;
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut dout = Array2::zeros((batch.len(), 1));
    for i in 0..batch.len() {
        let e = cache.out[[i, 0]] - target[i];
        loss += 0.5 * e * e / b;
        dout[[i, 0]] = e / b;
    }
    let (grad, _) = q.backward(&cache, &dout)?;
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardSource {
    /// The task's binary goal indicator.
    Binary,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeuralAlgo {
    Gofar,
    GofarHer,
    GofarBinary,
    GofarKl,
    Gcsl,
    GcslNoHer,
    Wgcsl,
    WgcslNoHer,
}

impl NeuralAlgo {
    pub const ALL: [NeuralAlgo; 8] = [
        NeuralAlgo::Gofar,
        NeuralAlgo::GofarHer,
        NeuralAlgo::GofarBinary,
        NeuralAlgo::GofarKl,
        NeuralAlgo::Gcsl,
        NeuralAlgo::GcslNoHer,
        NeuralAlgo::Wgcsl,
        NeuralAlgo::WgcslNoHer,
    ];

    pub fn name(self) -> &'static str {
        crate::tabular::baselines::Algo::from(self).name()
    }

    pub fn her_ratio(self) -> f64 {
        crate::tabular::baselines::Algo::from(self).her_ratio()
    }
}

impl From<NeuralAlgo> for crate::tabular::baselines::Algo {
    fn from(a: NeuralAlgo) -> Self {
        use crate::tabular::baselines::Algo;
        match a {
            NeuralAlgo::Gofar => Algo::Gofar,
            NeuralAlgo::GofarHer => Algo::GofarHer,
            NeuralAlgo::GofarBinary => Algo::GofarBinary,
            NeuralAlgo::GofarKl => Algo::GofarKl,
            NeuralAlgo::Gcsl => Algo::Gcsl,
            NeuralAlgo::GcslNoHer => Algo::GcslNoHer,
            NeuralAlgo::Wgcsl => Algo::Wgcsl,
            NeuralAlgo::WgcslNoHer => Algo::WgcslNoHer,
        }
    }
}

impl std::str::FromStr for NeuralAlgo {
    type Err = GofarError;

    fn from_str(s: &str) -> Result<Self> {
        NeuralAlgo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| GofarError::Config(format!("unknown algorithm '{s}'")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub disc: Vec<f64>,
    pub value: Vec<f64>,
    pub policy: Vec<f64>,
    pub critic: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralRun {
    pub algo: NeuralAlgo,
    pub policy: GaussianPolicy,
    pub value: Option<Mlp>,
    pub disc: Option<Discriminator>,
    pub losses: Losses,
    /// Value loss went non-finite or above 10× its first value.
    pub unstable: bool,
    /// Policy batches whose weights were all clamped to zero.
    pub skipped_batches: usize,
    pub relabeled_served: usize,
    /// Share of sampled goals never achieved anywhere in the data.
    pub unreached_goal_mass: f64,
}

pub fn train_discriminator(
    src: &mut BatchSource,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Discriminator, Vec<f64>, f64)> {
    let st = src.data().stats()?;
    let mut net = cfg.net(&Moments::concat(&[&st.goal, &st.goal]), 1, OutputAct::Identity, rng);
    let mut adam = Adam::with_lr(net.n_params(), cfg.lr_disc);
    let mut params = net.flat();
    let mut losses = Vec::with_capacity(cfg.disc_steps);
    for _ in 0..cfg.disc_steps {
        let b = src.sample(cfg.batch, rng);
        let (loss, grad) = disc_loss_grad(&net, &b.achieved, &b.goal, cfg.grad_penalty)?;
        losses.push(loss);
        adam.step(&mut params, &grad);
        net.set_flat(&params);
    }
    let unreached = unreached_goal_mass(src, cfg.batch, rng);
    Ok((Discriminator { net }, losses, unreached))
}

fn unreached_goal_mass(src: &mut BatchSource, n: usize, rng: &mut Rng) -> f64 {
    let b = src.sample(n, rng);
    let data = src.data();
    let missed = b
        .goal
        .rows()
        .into_iter()
        .filter(|g| {
            let g = g.to_vec();
            !data.trajectories.iter().any(|t| t.achieved.iter().any(|a| goal_reached(a, &g, data.success_tol)))
        })
        .count();
    missed as f64 / n as f64
}

fn batch_rewards(b: &Batch, reward: &RewardSource, disc: Option<&Discriminator>) -> Result<Vec<f64>> {
    match (reward, disc) {
        (RewardSource::Binary, _) => Ok(b.reward.clone()),
        (RewardSource::Discriminator, Some(d)) => d.reward(&b.achieved, &b.goal),
        (RewardSource::Discriminator, None) => Err(GofarError::Config("discriminator reward without a discriminator".into())),
    }
}

/// Value phase. A non-finite or runaway loss stops training and flags the
/// run; the last finite parameters are kept.
#[allow(clippy::too_many_arguments)]
pub fn train_value(
    src: &mut BatchSource,
    reward: &RewardSource,
    disc: Option<&Discriminator>,
    div: FDivergence,
    cfg: &TrainConfig,
    full_batch: bool,
    rng: &mut Rng,
) -> Result<(Mlp, Vec<f64>, bool)> {
    let st = src.data().stats()?;
    let mut net = cfg.net(&Moments::concat(&[&st.obs, &st.goal]), 1, OutputAct::Identity, rng);
    let mut adam = Adam::with_lr(net.n_params(), cfg.lr_value);
    let mut params = net.flat();
    let mut losses = Vec::with_capacity(cfg.value_steps);
    let fixed = full_batch.then(|| src.full_batch());
    let fixed_reward = match &fixed {
        Some(b) => Some(batch_rewards(b, reward, disc)?),
        None => None,
    };
    for _ in 0..cfg.value_steps {
        let sampled;
        let (b, r) = match (&fixed, &fixed_reward) {
            (Some(b), Some(r)) => (b, r.clone()),
            _ => {
                sampled = src.sample(cfg.batch, rng);
                let r = batch_rewards(&sampled, reward, disc)?;
                (&sampled, r)
            }
        };
        let (loss, grad) = value_loss_grad(&net, b, &r, div, cfg.gamma)?;
        losses.push(loss);
        if is_unstable(&losses) || grad.iter().any(|g| !g.is_finite()) {
            return Ok((net, losses, true));
        }
        let before = params.clone();
        adam.step(&mut params, &grad);
        if params.iter().any(|p| !p.is_finite()) {
            net.set_flat(&before);
            return Ok((net, losses, true));
        }
        net.set_flat(&params);
    }
    Ok((net, losses, false))
}

/// f-advantage weighted regression on commanded goals; `value` is only read.
#[allow(clippy::too_many_arguments)]
pub fn train_policy_far(
    src: &mut BatchSource,
    value: &Mlp,
    reward: &RewardSource,
    disc: Option<&Discriminator>,
    div: FDivergence,
    cfg: &TrainConfig,
    action_scale: f64,
    full_batch: bool,
    rng: &mut Rng,
) -> Result<(GaussianPolicy, Vec<f64>, usize)> {
    let st = src.data().stats()?;
    let d_act = st.action.mean.len();
    let mut pi =
        GaussianPolicy { net: cfg.net(&Moments::concat(&[&st.obs, &st.goal]), d_act, OutputAct::Tanh, rng), action_scale, sigma: cfg.sigma };
    let mut adam = Adam::with_lr(pi.net.n_params(), cfg.lr_policy);
    let mut params = pi.net.flat();
    let mut losses = Vec::with_capacity(cfg.policy_steps);
    let mut skipped = 0;
    let weights_of = |b: &Batch| -> Result<Vec<f64>> {
        let r = batch_rewards(b, reward, disc)?;
        let v = value.predict(&concat_cols(&[&b.obs, &b.goal]))?;
        let vn = value.predict(&concat_cols(&[&b.next_obs, &b.goal]))?;
        let y: Vec<f64> = (0..b.len()).map(|i| r[i] + cfg.gamma * vn[[i, 0]] - v[[i, 0]]).collect();
        Ok(advantage_weights(div, &y))
    };
    let fixed = full_batch.then(|| src.full_batch());
    let fixed_w = match &fixed {
        Some(b) => {
            // frequencies enter the regression as weights
            let w = weights_of(b)?;
            Some(w.iter().zip(&b.weight).map(|(a, f)| a * f * b.len() as f64).collect::<Vec<_>>())
        }
        None => None,
    };
    for _ in 0..cfg.policy_steps {
        let sampled;
        let (b, w) = match (&fixed, &fixed_w) {
            (Some(b), Some(w)) => (b, w.clone()),
            _ => {
                sampled = src.sample(cfg.batch, rng);
                let w = weights_of(&sampled)?;
                (&sampled, w)
            }
        };
        if w.iter().all(|&x| x == 0.0) || w.iter().any(|x| !x.is_finite()) {
            skipped += 1;
            continue;
        }
        let (loss, grad) = policy_loss_grad(&pi, b, &w)?;
        losses.push(loss);
        adam.step(&mut params, &grad);
        pi.net.set_flat(&params);
    }
    Ok((pi, losses, skipped))
}

/// Maximum-likelihood regression on (relabeled) batches, optionally weighted
/// by `γ^{gap} · min(exp A, clip)` from an interleaved TD critic.
fn train_supervised(
    src: &mut BatchSource,
    cfg: &TrainConfig,
    action_scale: f64,
    weighted: bool,
    rng: &mut Rng,
) -> Result<(GaussianPolicy, Losses)> {
    let st = src.data().stats()?;
    let d_act = st.action.mean.len();
    let mut pi =
        GaussianPolicy { net: cfg.net(&Moments::concat(&[&st.obs, &st.goal]), d_act, OutputAct::Tanh, rng), action_scale, sigma: cfg.sigma };
    let mut q = cfg.net(&Moments::concat(&[&st.obs, &st.goal, &st.action]), 1, OutputAct::Identity, rng);
    let mut q_target = q.clone();
    let mut adam_pi = Adam::with_lr(pi.net.n_params(), cfg.lr_policy);
    let mut adam_q = Adam::with_lr(q.n_params(), cfg.lr_value);
    let (mut p_pi, mut p_q) = (pi.net.flat(), q.flat());
    let mut losses = Losses::default();
    for _ in 0..cfg.policy_steps {
        let b = src.sample(cfg.batch, rng);
        let w = if weighted {
            let next_a = pi.mean(&b.next_obs, &b.goal)?;
            let q_next = q_target.predict(&concat_cols(&[&b.next_obs, &b.goal, &next_a]))?;
            let target: Vec<f64> = (0..b.len()).map(|i| b.reward[i] + cfg.gamma * q_next[[i, 0]]).collect();
            let (loss, grad) = q_loss_grad(&q, &b, &target)?;
            if !loss.is_finite() {
                return Err(GofarError::Diverged(format!("critic loss {loss}")));
            }
            losses.critic.push(loss);
            adam_q.step(&mut p_q, &grad);
            q.set_flat(&p_q);
            let mut t_flat = q_target.flat();
            for (t, p) in t_flat.iter_mut().zip(&p_q) {
                *t += cfg.tau * (p - *t);
            }
            q_target.set_flat(&t_flat);
            let q_next_cur = q.predict(&concat_cols(&[&b.next_obs, &b.goal, &next_a]))?;
            let q_cur = q.predict(&concat_cols(&[&b.obs, &b.goal, &b.action]))?;
            (0..b.len())
                .map(|i| {
                    let adv = b.reward[i] + cfg.gamma * q_next_cur[[i, 0]] - q_cur[[i, 0]];
                    let disc = b.goal_gap[i].map_or(1.0, |k| cfg.gamma.powi(k as i32));
                    disc * adv.exp().min(cfg.exp_clip)
                })
                .collect()
        } else {
            vec![1.0; b.len()]
        };
        let (loss, grad) = policy_loss_grad(&pi, &b, &w)?;
        losses.policy.push(loss);
        adam_pi.step(&mut p_pi, &grad);
        pi.net.set_flat(&p_pi);
    }
    Ok((pi, losses))
}

/// Trains `algo` on `data`. Phases draw from independent streams derived from
/// `cfg.seed`; the GoFAR family never requests relabeled rows unless it is the
/// HER variant.
pub fn train_neural(algo: NeuralAlgo, data: &VecDataset, cfg: &TrainConfig, action_scale: f64) -> Result<NeuralRun> {
    train_neural_with(algo, data, cfg, action_scale, false)
}

/// As [`train_neural`]; with `full_batch` the value and policy phases of the
/// GoFAR family use the aggregated empirical distribution instead of sampled
/// minibatches.
pub fn train_neural_with(
    algo: NeuralAlgo,
    data: &VecDataset,
    cfg: &TrainConfig,
    action_scale: f64,
    full_batch: bool,
) -> Result<NeuralRun> {
    cfg.validate()?;
    data.check_shapes()?;
    let spec = RelabelSpec::her(algo.her_ratio())?;
    let mut src = BatchSource::new(data, spec)?;
    let mut rng_disc = rng_from_seed(derive_seed(cfg.seed, &[0]));
    let mut rng_value = rng_from_seed(derive_seed(cfg.seed, &[1]));
    let mut rng_policy = rng_from_seed(derive_seed(cfg.seed, &[2]));
    let mut losses = Losses::default();
    match algo {
        NeuralAlgo::Gcsl | NeuralAlgo::GcslNoHer | NeuralAlgo::Wgcsl | NeuralAlgo::WgcslNoHer => {
            let weighted = matches!(algo, NeuralAlgo::Wgcsl | NeuralAlgo::WgcslNoHer);
            let (policy, l) = train_supervised(&mut src, cfg, action_scale, weighted, &mut rng_policy)?;
            Ok(NeuralRun {
                algo,
                policy,
                value: None,
                disc: None,
                losses: l,
                unstable: false,
                skipped_batches: 0,
                relabeled_served: src.relabeled_served(),
                unreached_goal_mass: 0.0,
            })
        }
        _ => {
            let div = if algo == NeuralAlgo::GofarKl { FDivergence::Kl } else { FDivergence::ChiSquared };
            let reward = if algo == NeuralAlgo::GofarBinary { RewardSource::Binary } else { RewardSource::Discriminator };
            let (disc, unreached) = if reward == RewardSource::Discriminator {
                let (d, l, u) = train_discriminator(&mut src, cfg, &mut rng_disc)?;
                losses.disc = l;
                (Some(d), u)
            } else {
                (None, 0.0)
            };
            let (value, lv, unstable) =
                train_value(&mut src, &reward, disc.as_ref(), div, cfg, full_batch, &mut rng_value)?;
            losses.value = lv;
            let fingerprint = value.fingerprint();
            let (policy, lp, skipped) = train_policy_far(
                &mut src,
                &value,
                &reward,
                disc.as_ref(),
                div,
                cfg,
                action_scale,
                full_batch,
                &mut rng_policy,
            )?;
            if value.fingerprint() != fingerprint {
                return Err(GofarError::Assumption("policy phase changed the value parameters".into()));
            }
            losses.policy = lp;
            if algo.her_ratio() == 0.0 && src.relabeled_served() != 0 {
                return Err(GofarError::Assumption(format!("{} consumed relabeled samples", algo.name())));
            }
            Ok(NeuralRun {
                algo,
                policy,
                value: Some(value),
                disc,
                losses,
                unstable,
                skipped_batches: skipped,
                relabeled_served: src.relabeled_served(),
                unreached_goal_mass: unreached,
            })
        }
    }
}

/// `V(s, g)` for a batch of rows.
pub fn value_of(value: &Mlp, obs: &Array2<f64>, goal: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(value.predict(&concat_cols(&[obs, goal]))?.column(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::max_relative_error;
    use crate::neural::pointreach::PointReachEnv;
    use crate::neural::data::VecTrajectory;

    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;

    fn small_batch(seed: u64) -> (VecDataset, Batch) {
        let data = PointReachEnv::default().collect(20, 10, 0.3, seed).unwrap();
        let b = BatchSource::new(&data, RelabelSpec::NONE).unwrap().sample(16, &mut rng_from_seed(seed));
        (data, b)
    }

    fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
        let mut n = net.clone();
        n.set_flat(p);
        n
    }

    #[test]
    fn value_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (_, b) = small_batch(seed);
            let net = Mlp::new(&[4, 8, 8, 1], OutputAct::Identity, &mut rng_from_seed(100 + seed));
            let r: Vec<f64> = (0..b.len()).map(|i| (i as f64 * 0.37).sin()).collect();
            for div in [FDivergence::ChiSquared, FDivergence::Kl] {
                let (_, g) = value_loss_grad(&net, &b, &r, div, 0.9).unwrap();
                let f = |p: &[f64]| value_loss_grad(&with_params(&net, p), &b, &r, div, 0.9).unwrap().0;
                let err = max_relative_error(f, &net.flat(), &g, H, FLOOR);
                assert!(err < 1e-4, "seed {seed} {div:?}: {err}");
            }
        }
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (_, b) = small_batch(seed);
            let pi = GaussianPolicy {
                net: Mlp::new(&[4, 8, 8, 2], OutputAct::Tanh, &mut rng_from_seed(200 + seed)),
                action_scale: 0.05,
                sigma: 0.1,
            };
            let w: Vec<f64> = (0..b.len()).map(|i| (i % 3) as f64).collect();
            let (_, g) = policy_loss_grad(&pi, &b, &w).unwrap();
            let f = |p: &[f64]| {
                let q = GaussianPolicy { net: with_params(&pi.net, p), ..pi.clone() };
                policy_loss_grad(&q, &b, &w).unwrap().0
            };
            let err = max_relative_error(f, &pi.net.flat(), &g, H, FLOOR);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (_, b) = small_batch(seed);
            let net = Mlp::new(&[4, 8, 8, 1], OutputAct::Identity, &mut rng_from_seed(300 + seed));
            for lambda in [0.0, 0.01, 1.0] {
                let (_, g) = disc_loss_grad(&net, &b.achieved, &b.goal, lambda).unwrap();
                let f = |p: &[f64]| disc_loss_grad(&with_params(&net, p), &b.achieved, &b.goal, lambda).unwrap().0;
                let err = max_relative_error(f, &net.flat(), &g, H, FLOOR);
                assert!(err < 1e-4, "seed {seed} λ={lambda}: {err}");
            }
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        for seed in 0..10 {
            let (_, b) = small_batch(seed);
            let q = Mlp::new(&[6, 8, 8, 1], OutputAct::Identity, &mut rng_from_seed(400 + seed));
            let t: Vec<f64> = (0..b.len()).map(|i| i as f64 * 0.1).collect();
            let (_, g) = q_loss_grad(&q, &b, &t).unwrap();
            let f = |p: &[f64]| q_loss_grad(&with_params(&q, p), &b, &t).unwrap().0;
            let err = max_relative_error(f, &q.flat(), &g, H, FLOOR);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn reward_transform_examples() {
        assert_eq!(reward_from_prob(0.5), 0.0);
        assert!((reward_from_prob(0.731) - 1.0).abs() < 1e-3);
        assert!((reward_from_prob(1.0) - LOGIT_CLAMP).abs() < 1e-6);
        assert_eq!(reward_from_logit(0.0), 0.0);
        assert_eq!(reward_from_logit(50.0), LOGIT_CLAMP);
    }

    #[test]
    fn unit_weights_reduce_to_behavior_cloning() {
        let (_, b) = small_batch(1);
        let pi = GaussianPolicy {
            net: Mlp::new(&[4, 8, 8, 2], OutputAct::Tanh, &mut rng_from_seed(7)),
            action_scale: 0.05,
            sigma: 0.1,
        };
        let y = vec![0.0; b.len()];
        let w = advantage_weights(FDivergence::ChiSquared, &y);
        assert!(w.iter().all(|&x| x == 1.0));
        assert_eq!(policy_loss_grad(&pi, &b, &w).unwrap(), policy_loss_grad(&pi, &b, &vec![1.0; b.len()]).unwrap());
    }

    #[test]
    fn chi_squared_weights_are_nonnegative() {
        let y: Vec<f64> = (-50..50).map(|i| i as f64 * 0.1).collect();
        assert!(advantage_weights(FDivergence::ChiSquared, &y).iter().all(|&w| w >= 0.0));
    }

    fn toy_dataset(achieved: impl Fn(usize, usize) -> Vec<f64>, goal: impl Fn(usize) -> Vec<f64>) -> VecDataset {
        let trajectories = (0..40)
            .map(|i| VecTrajectory {
                obs: (0..=5).map(|t| achieved(i, t)).collect(),
                achieved: (0..=5).map(|t| achieved(i, t)).collect(),
                actions: vec![vec![0.0, 0.0]; 5],
                goal: goal(i),
                seed: i as u64,
            })
            .collect();
        VecDataset { trajectories, success_tol: 0.05, env_fingerprint: "toy".into(), behavior_descriptor: "toy".into() }
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig { hidden: 16, batch: 64, disc_steps: steps, value_steps: steps, policy_steps: steps, ..TrainConfig::default() }
    }

    #[test]
    fn discriminator_separates_disjoint_supports() {
        let u = |k: usize| (k as f64 * 0.618_033_988_7).fract();
        // achieved goals in the lower-left quarter, commanded goals in the upper-right
        let data = toy_dataset(|i, t| vec![0.4 * u(7 * i + t), 0.4 * u(11 * i + 3 * t + 1)], |i| vec![0.6 + 0.4 * u(i + 5), 0.6 + 0.4 * u(3 * i + 2)]);
        let cfg = small_cfg(1500);
        let mut src = BatchSource::new(&data, RelabelSpec::NONE).unwrap();
        let (d, _, unreached) = train_discriminator(&mut src, &cfg, &mut rng_from_seed(0)).unwrap();
        assert!(unreached > 0.99);
        let b = BatchSource::new(&data, RelabelSpec::NONE).unwrap().sample(500, &mut rng_from_seed(1));
        let pos = d.prob(&b.goal, &b.goal).unwrap();
        let neg = d.prob(&b.achieved, &b.goal).unwrap();
        let correct = pos.iter().filter(|&&c| c > 0.5).count() + neg.iter().filter(|&&c| c < 0.5).count();
        assert!(correct as f64 / 1000.0 > 0.95, "accuracy {}", correct as f64 / 1000.0);
    }

    #[test]
    fn discriminator_is_indifferent_on_identical_classes() {
        let u = |k: usize| (k as f64 * 0.754_877_666).fract();
        // the agent always sits on its goal, so positives and negatives coincide
        let data = toy_dataset(|i, _| vec![u(2 * i), u(2 * i + 1)], |i| vec![u(2 * i), u(2 * i + 1)]);
        let mut src = BatchSource::new(&data, RelabelSpec::NONE).unwrap();
        let (d, losses, _) = train_discriminator(&mut src, &small_cfg(2000), &mut rng_from_seed(2)).unwrap();
        let b = src.sample(200, &mut rng_from_seed(3));
        for c in d.prob(&b.achieved, &b.goal).unwrap() {
            assert!((c - 0.5).abs() < 0.02, "{c}");
        }
        assert!((losses.last().unwrap() - 2.0 * std::f64::consts::LN_2).abs() < 0.01);
    }

    #[test]
    fn half_probability_gives_zero_reward() {
        let mut net = Mlp::new(&[4, 8, 8, 1], OutputAct::Identity, &mut rng_from_seed(0));
        net.set_flat(&vec![0.0; net.n_params()]);
        let d = Discriminator { net };
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64 * 0.1);
        assert_eq!(d.prob(&x, &x).unwrap(), vec![0.5; 5]);
        assert_eq!(d.reward(&x, &x).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn zero_reward_value_loss_settles_at_half() {
        // on-policy data whose goals are never reached: the optimal dual value is 1/2
        let data = PointReachEnv::default().collect(200, 20, 0.0, 4).unwrap();
        let far: Vec<VecTrajectory> = data.trajectories.iter().map(|t| VecTrajectory { goal: vec![5.0, 5.0], ..t.clone() }).collect();
        let data = VecDataset { trajectories: far, ..data };
        let mut src = BatchSource::new(&data, RelabelSpec::NONE).unwrap();
        let cfg = small_cfg(2000);
        let (_, losses, unstable) =
            train_value(&mut src, &RewardSource::Binary, None, FDivergence::ChiSquared, &cfg, false, &mut rng_from_seed(5)).unwrap();
        assert!(!unstable);
        let tail = &losses[losses.len() - 200..];
        let avg = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!((avg - 0.5).abs() < 0.02, "{avg}");
    }

    #[test]
    fn fixed_seed_repeats_losses_bit_for_bit() {
        let data = PointReachEnv::default().collect(30, 10, 0.1, 6).unwrap();
        for algo in [NeuralAlgo::Gofar, NeuralAlgo::Wgcsl] {
            let a = train_neural(algo, &data, &small_cfg(50), 0.05).unwrap();
            let b = train_neural(algo, &data, &small_cfg(50), 0.05).unwrap();
            assert_eq!(a.losses, b.losses);
            assert_eq!(a.policy.net.fingerprint(), b.policy.net.fingerprint());
        }
    }

    #[test]
    fn gofar_never_sees_relabeled_goals() {
        let data = PointReachEnv::default().collect(30, 10, 0.1, 7).unwrap();
        let run = train_neural(NeuralAlgo::Gofar, &data, &small_cfg(30), 0.05).unwrap();
        assert_eq!(run.relabeled_served, 0);
        let her = train_neural(NeuralAlgo::GofarHer, &data, &small_cfg(30), 0.05).unwrap();
        assert!(her.relabeled_served > 0);
    }
}
