//! The trained policy network exposed as a walk-forward model.

use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::error::{invalid, Result};
use crate::evaluation::{AllocationModel, Decider};
use crate::features::{build_observation, FeatureConfig, Normalization};
use crate::policy::{InputShape, NetworkConfig, Policy, PolicyParams, DEFAULT_SEED};
use crate::simulator::BacktestConfig;
use crate::trainer::{train, TrainConfig, TrainingCurve, TrainingData};

/// SplitMix64 step; gives well-separated seeds for related runs.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrlConfig {
    pub network: NetworkConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    /// Seed of the initial weights.
    pub init_seed: u64,
}

impl Default for DrlConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            init_seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DrlModel {
    pub name: String,
    pub config: DrlConfig,
    /// Costs and lag seen during training; should match the evaluation backtest.
    pub backtest: BacktestConfig,
}

impl DrlModel {
    pub fn new(name: impl Into<String>, config: DrlConfig, backtest: BacktestConfig) -> Self {
        Self {
            name: name.into(),
            config,
            backtest,
        }
    }

    /// Trains on every row of `train`; `step` only varies the training seed.
    pub fn fit_policy(&self, train_series: &PriceSeries, step: usize) -> Result<DrlDecider> {
        let cfg = &self.config;
        let last = train_series.len().saturating_sub(1);
        let first = cfg.features.first_valid_row();
        if last <= first {
            return Err(invalid(format!(
                "{} training rows, need more than {first} for the feature history",
                train_series.len()
            )));
        }
        let norm = Normalization::fit(train_series, first, last, cfg.features.vol_window)?;
        let mut network = cfg.network.clone();
        network.strategies = train_series.n_strategies();
        let shape = InputShape::new(network.strategies, train_series.n_context(), &cfg.features);
        let policy = Policy::new(network, shape)?;
        let data = TrainingData::new(train_series, first, last, &cfg.features, &norm)?;
        let mut tc = cfg.train.clone();
        tc.seed = derive_seed(tc.seed, step as u64);
        let out = train(&policy, policy.init_params(cfg.init_seed), &data, &self.backtest, &tc)?;
        Ok(DrlDecider {
            policy,
            params: out.params,
            features: cfg.features.clone(),
            norm,
            curve: out.curve,
        })
    }
}

impl AllocationModel for DrlModel {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn fit(&self, train: &PriceSeries, step: usize) -> Result<Box<dyn Decider>> {
        Ok(Box::new(self.fit_policy(train, step)?))
    }
}

/// A fitted policy with the normalization of its training window.
#[derive(Debug, Clone)]
pub struct DrlDecider {
    pub policy: Policy,
    pub params: PolicyParams,
    pub features: FeatureConfig,
    pub norm: Normalization,
    pub curve: TrainingCurve,
}

impl Decider for DrlDecider {
    fn decide(&self, series: &PriceSeries, first: usize, last: usize) -> Result<Vec<Vec<f64>>> {
        (first..=last)
            .map(|t| {
                let obs = build_observation(series, t, &self.features, &self.norm)?;
                self.policy.forward(&self.params, &obs)
            })
            .collect()
    }

    fn training_curve(&self) -> Option<&TrainingCurve> {
        Some(&self.curve)
    }
}
