//! Adversarial policy gradient: noisy, partly random rollouts scored by a
//! differentiable backtest, ascended with Adam.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::error::{invalid, Result};
use crate::features::{build_observation, FeatureConfig, Normalization, Observation};
use crate::policy::{check_finite_in, Policy, PolicyParams, Tape};
use crate::rewards::{EpisodeReturns, RewardKind};
use crate::simulator::{backprop_to_decisions, daily_returns_fast, BacktestConfig, MarketReturns};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Episodes averaged per update when `episode_length` is set.
    pub batch_size: usize,
    pub l2_coeff: f64,
    /// Std of the Gaussian noise added to observations during rollouts.
    pub noise_std: f64,
    /// Probability of taking the policy's action instead of a random one.
    pub explore_prob: f64,
    pub max_iterations: usize,
    pub early_stop_patience: usize,
    pub reward: RewardKind,
    pub seed: u64,
    /// Days per sampled episode; `None` trains on the whole window each iteration.
    pub episode_length: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 50,
            l2_coeff: 1e-8,
            noise_std: 0.002,
            explore_prob: 0.9,
            max_iterations: 500,
            early_stop_patience: 50,
            reward: RewardKind::NetProfit,
            seed: 0,
            episode_length: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_iterations == 0 || self.early_stop_patience == 0 {
            return Err(invalid("batch size, iterations and patience must be positive"));
        }
        if !(self.l2_coeff >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(invalid("l2 coefficient and noise std must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.explore_prob) {
            return Err(invalid(format!("explore probability {} outside [0, 1]", self.explore_prob)));
        }
        if self.episode_length == Some(0) {
            return Err(invalid("episode length must be at least one day"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Vec<f64>,
    /// Noisy observation of the following row; `None` on the last row.
    pub next_obs: Option<Observation>,
    /// False when the action was drawn at random.
    pub from_policy: bool,
}

/// Transitions of the current episode in chronological order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().map(|t| t.action.clone()).collect()
    }
}

/// Observations and returns of a training window, computed once per fit.
#[derive(Debug, Clone)]
pub struct TrainingData {
    first_row: usize,
    norm: Normalization,
    obs: Vec<Observation>,
    /// Day `k` is the move from row `first_row + k` to `first_row + k + 1`.
    market: MarketReturns,
}

impl TrainingData {
    /// Rows `first..=last`, clipped below to the first row with full history.
    pub fn new(
        series: &PriceSeries,
        first: usize,
        last: usize,
        features: &FeatureConfig,
        norm: &Normalization,
    ) -> Result<Self> {
        let first_row = first.max(features.first_valid_row());
        if last >= series.len() || first_row >= last {
            return Err(invalid(format!(
                "training window {first}..={last} leaves no day after row {} (history needed) in {} rows",
                features.first_valid_row(),
                series.len()
            )));
        }
        let obs = (first_row..=last)
            .map(|t| build_observation(series, t, features, norm))
            .collect::<Result<_>>()?;
        let market = MarketReturns::from_series(series, first_row, last)?;
        Ok(Self {
            first_row,
            norm: norm.clone(),
            obs,
            market,
        })
    }

    pub fn first_row(&self) -> usize {
        self.first_row
    }

    /// Number of daily returns in the window.
    pub fn days(&self) -> usize {
        self.market.days()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    /// Returns of the episode starting at local row `start` spanning `days` days.
    fn market_slice(&self, start: usize, days: usize) -> MarketReturns {
        MarketReturns {
            risky: self.market.risky[start..start + days].to_vec(),
            strategies: self.market.strategies[start..start + days].to_vec(),
        }
    }
}

/// One rollout: buffer plus the recorded forward passes of policy actions.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Local start row inside the training data.
    pub start: usize,
    pub buffer: ReplayBuffer,
    tape: Tape,
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // normalized unit exponentials are Dirichlet(1, ..., 1)
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Plays local rows `start..=start + days`, taking the policy's action with
/// probability `explore_prob` and adding noise to every next observation.
pub fn rollout_episode<R: Rng + ?Sized>(
    policy: &Policy,
    params: &PolicyParams,
    data: &TrainingData,
    start: usize,
    days: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Episode> {
    if days == 0 || start + days > data.days() {
        return Err(invalid(format!(
            "episode of {days} days from local row {start} exceeds the {} available",
            data.days()
        )));
    }
    let l = policy.shape().strategies;
    let mut buffer = ReplayBuffer::new();
    let mut tape = Tape::new();
    let mut obs = data.obs[start].clone();
    for t in start..=start + days {
        let from_policy = cfg.explore_prob >= 1.0 || rng.random::<f64>() < cfg.explore_prob;
        let action = if from_policy {
            policy.forward_recorded(params, &obs, &mut tape)?
        } else {
            random_simplex(rng, l)
        };
        let next_obs = (t < start + days).then(|| {
            let mut o = data.obs[t + 1].clone();
            data.norm.add_noise(&mut o, rng, cfg.noise_std);
            o
        });
        buffer.push(Transition {
            obs,
            action,
            next_obs: next_obs.clone(),
            from_policy,
        });
        match next_obs {
            Some(o) => obs = o,
            None => break,
        }
    }
    Ok(Episode { start, buffer, tape })
}

/// Episode reward and the gradient of `reward - l2 * |theta|^2`.
pub fn compute_episode_gradient(
    policy: &Policy,
    params: &PolicyParams,
    episode: &Episode,
    data: &TrainingData,
    backtest: &BacktestConfig,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if episode.buffer.is_empty() {
        return Err(invalid("empty replay buffer"));
    }
    let days = episode.buffer.len() - 1;
    let market = data.market_slice(episode.start, days);
    let actions = episode.buffer.actions();
    let rets = daily_returns_fast(&market, &actions, backtest);
    let (reward, ret_grad) = cfg.reward.value_and_grad(&EpisodeReturns::from_daily(rets)?)?;
    let weight_grad = backprop_to_decisions(&market, &actions, backtest, &ret_grad);
    let out_grads: Vec<Vec<f64>> = episode
        .buffer
        .transitions()
        .iter()
        .zip(weight_grad)
        .filter(|(t, _)| t.from_policy)
        .map(|(_, g)| g)
        .collect();
    let mut grad = if out_grads.is_empty() {
        vec![0.0; params.len()]
    } else {
        policy.backward(params, &episode.tape, &out_grads)?
    };
    for (g, p) in grad.iter_mut().zip(&params.values) {
        *g -= 2.0 * cfg.l2_coeff * p;
    }
    Ok((reward, grad))
}

/// Reward of the deterministic policy over the whole window, with its exact
/// gradient (including the L2 term).
pub fn deterministic_gradient(
    policy: &Policy,
    params: &PolicyParams,
    data: &TrainingData,
    backtest: &BacktestConfig,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let actions = data
        .obs
        .iter()
        .map(|o| policy.forward_recorded(params, o, &mut tape))
        .collect::<Result<Vec<_>>>()?;
    let rets = daily_returns_fast(&data.market, &actions, backtest);
    let (reward, ret_grad) = cfg.reward.value_and_grad(&EpisodeReturns::from_daily(rets)?)?;
    let weight_grad = backprop_to_decisions(&data.market, &actions, backtest, &ret_grad);
    let mut grad = policy.backward(params, &tape, &weight_grad)?;
    for (g, p) in grad.iter_mut().zip(&params.values) {
        *g -= 2.0 * cfg.l2_coeff * p;
    }
    Ok((reward, grad))
}

/// Reward of the deterministic policy over the whole window.
pub fn evaluate_reward(
    policy: &Policy,
    params: &PolicyParams,
    data: &TrainingData,
    backtest: &BacktestConfig,
    reward: RewardKind,
) -> Result<f64> {
    let actions = data
        .obs
        .iter()
        .map(|o| policy.forward(params, o))
        .collect::<Result<Vec<_>>>()?;
    let rets = daily_returns_fast(&data.market, &actions, backtest);
    reward.value(&EpisodeReturns::from_daily(rets)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam step in the ascent direction.
pub fn adam_step(
    params: &mut PolicyParams,
    grad: &[f64],
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(invalid(format!(
            "gradient of {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    check_finite_in(grad, params.layout())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..grad.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params.values[i] += learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    params.check_finite()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Deterministic train-window reward after this iteration's update.
    pub reward: f64,
    pub best: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "reward", "best"])?;
        for p in &self.points {
            out.write_record([p.iteration.to_string(), p.reward.to_string(), p.best.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub best_reward: f64,
    pub curve: TrainingCurve,
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One iteration's averaged gradient over its episodes.
fn iteration_gradient(
    policy: &Policy,
    params: &PolicyParams,
    data: &TrainingData,
    backtest: &BacktestConfig,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Vec<f64>> {
    let (count, days) = match cfg.episode_length {
        None => (1, data.days()),
        Some(len) => (cfg.batch_size, len.min(data.days())),
    };
    let grads = (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = episode_rng(cfg.seed, (iteration * count + k) as u64);
            let start = rng.random_range(0..=data.days() - days);
            let ep = rollout_episode(policy, params, data, start, days, cfg, &mut rng)?;
            compute_episode_gradient(policy, params, &ep, data, backtest, cfg).map(|(_, g)| g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; params.len()];
    for g in &grads {
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x / count as f64;
        }
    }
    Ok(mean)
}

/// Runs Adam ascent from `init` and returns the best parameters seen.
pub fn train(
    policy: &Policy,
    init: PolicyParams,
    data: &TrainingData,
    backtest: &BacktestConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    backtest.validate()?;
    let mut params = init;
    let mut adam = AdamState::new(params.len());
    let mut best = params.clone();
    let mut best_reward = f64::NEG_INFINITY;
    let mut curve = TrainingCurve::default();
    let mut stale = 0;
    for iteration in 0..cfg.max_iterations {
        let grad = iteration_gradient(policy, &params, data, backtest, cfg, iteration)?;
        adam_step(&mut params, &grad, &mut adam, cfg.learning_rate)?;
        let reward = evaluate_reward(policy, &params, data, backtest, cfg.reward)?;
        if reward > best_reward {
            best_reward = reward;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        curve.points.push(CurvePoint {
            iteration,
            reward,
            best: best_reward,
        });
        if stale >= cfg.early_stop_patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_reward,
        curve,
    })
}
