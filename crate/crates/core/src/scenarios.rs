//! Synthetic market scenarios with known structure, used for learning checks
//! and desk-scale experiments.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{business_days, PriceSeries};
use crate::error::{invalid, Result};

/// Builds levels starting at 100 from per-day returns (the first row has none).
fn levels(returns: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(returns.len() + 1);
    p.push(100.0);
    for r in returns {
        let last = *p.last().unwrap();
        p.push(last * (1.0 + r));
    }
    p
}

fn assemble(
    start: NaiveDate,
    risky: Vec<f64>,
    strategies: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
) -> Result<PriceSeries> {
    let n = risky.len() + 1;
    let mut names = vec!["risky".to_string()];
    names.extend((0..strategies.len()).map(|i| format!("strategy_{i}")));
    names.extend((0..context.len()).map(|i| format!("context_{i}")));
    let l = strategies.len();
    let mut columns = vec![levels(&risky)];
    columns.extend(strategies.iter().map(|r| levels(r)));
    columns.extend(context);
    PriceSeries::new(business_days(start, n), names, columns, l)
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("valid normal parameters")
}

/// A stationary context level that carries no information.
fn noise_context(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let d = normal(0.0, 1.0);
    (0..n).map(|_| d.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Strategy 0 beats the others every single day.
    Dominant,
    /// Strategy 0 dominates until the switch row, strategy 1 afterwards.
    TwoRegime,
    /// A hidden alternating regime drives two mirror strategies; the context
    /// column reveals the next day's regime.
    Prescient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub rows: usize,
    pub start: NaiveDate,
    pub seed: u64,
    /// Row at which dominance switches (two-regime only); defaults to mid-sample.
    pub switch_row: Option<usize>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::TwoRegime,
            rows: 1000,
            start: NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"),
            seed: 7,
            switch_row: None,
        }
    }
}

impl ScenarioSpec {
    pub fn generate(&self) -> Result<PriceSeries> {
        if self.rows < 2 {
            return Err(invalid("scenario needs at least two rows"));
        }
        match self.scenario {
            Scenario::Dominant => dominant(self.rows, self.start, self.seed),
            Scenario::TwoRegime => {
                two_regime(self.rows, self.switch_row.unwrap_or(self.rows / 2), self.start, self.seed)
            }
            Scenario::Prescient => prescient(self.rows, self.start, self.seed),
        }
    }
}

/// Three strategies sharing a common shock; strategy 0 is at least 0.15%
/// ahead of the others every day.
pub fn dominant(rows: usize, start: NaiveDate, seed: u64) -> Result<PriceSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = rows - 1;
    let risky_d = normal(0.0003, 0.01);
    let common = normal(0.0, 0.005);
    let mut risky = Vec::with_capacity(days);
    let mut s: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(days)).collect();
    for _ in 0..days {
        risky.push(risky_d.sample(&mut rng));
        let z = common.sample(&mut rng);
        s[0].push(z + 0.001);
        for lagging in s.iter_mut().skip(1) {
            lagging.push(z - 0.0005 - rng.random_range(0.0..0.002));
        }
    }
    let ctx = noise_context(&mut rng, rows);
    assemble(start, risky, s, vec![ctx])
}

/// Daily return gap between the leading and the lagging strategy.
pub const TWO_REGIME_GAP: f64 = 0.004;

/// Two strategies whose leadership flips at `switch_row`.
pub fn two_regime(rows: usize, switch_row: usize, start: NaiveDate, seed: u64) -> Result<PriceSeries> {
    if switch_row == 0 || switch_row >= rows {
        return Err(invalid(format!("switch row {switch_row} outside 1..{rows}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = rows - 1;
    let risky_d = normal(0.0003, 0.01);
    let common = normal(0.0, 0.005);
    let idio = normal(0.0, 0.0005);
    let mut risky = Vec::with_capacity(days);
    let mut a = Vec::with_capacity(days);
    let mut b = Vec::with_capacity(days);
    for day in 1..=days {
        risky.push(risky_d.sample(&mut rng));
        let z = common.sample(&mut rng);
        let lead = if day <= switch_row { TWO_REGIME_GAP / 2.0 } else { -TWO_REGIME_GAP / 2.0 };
        a.push(z + lead + idio.sample(&mut rng));
        b.push(z - lead + idio.sample(&mut rng));
    }
    let ctx = noise_context(&mut rng, rows);
    assemble(start, risky, vec![a, b], vec![ctx])
}

/// Hidden regime signs: runs of a random sign for `L` days followed by the
/// opposite sign for `L` days, `L` uniform in 1..=5.
pub fn regime_signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(n + 10);
    while s.len() < n {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let len = rng.random_range(1..=5);
        s.extend(std::iter::repeat_n(sign, len));
        s.extend(std::iter::repeat_n(-sign, len));
    }
    s.truncate(n);
    s
}

/// Per-day move of each mirror strategy.
pub const PRESCIENT_MOVE: f64 = 0.005;
/// Extra daily drift of strategy 0, large enough to keep it the trailing-year winner.
pub const PRESCIENT_DRIFT: f64 = 0.001;

/// Strategy 0 returns `x s + d`, strategy 1 returns `-x s`, where `s` is the
/// hidden regime of the day. The context level at row `t` is the regime of
/// day `t + 1`, so a lag-free decision at `t` can hold the right strategy.
pub fn prescient(rows: usize, start: NaiveDate, seed: u64) -> Result<PriceSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = rows - 1;
    // regime[k] drives day k + 1; one extra sign for the last row's context
    let regime = regime_signs(&mut rng, days + 1);
    let risky_d = normal(0.0003, 0.01);
    let risky: Vec<f64> = (0..days).map(|_| risky_d.sample(&mut rng)).collect();
    let a: Vec<f64> = regime[..days]
        .iter()
        .map(|s| PRESCIENT_MOVE * s + PRESCIENT_DRIFT)
        .collect();
    let b: Vec<f64> = regime[..days].iter().map(|s| -PRESCIENT_MOVE * s).collect();
    // context at row t reveals the regime of day t + 1
    let ctx = regime.clone();
    assemble(start, risky, vec![a, b], vec![ctx])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2010, 1, 4).unwrap()
    }

    #[test]
    fn dominant_strategy_wins_every_day() {
        let s = dominant(300, start(), 1).unwrap();
        for t in 1..s.len() {
            let r0 = s.column_return(1, t);
            for i in 1..3 {
                assert!(r0 > s.column_return(1 + i, t));
            }
        }
    }

    #[test]
    fn two_regime_switches_leadership() {
        let s = two_regime(400, 200, start(), 2).unwrap();
        let cum = |i: usize, a: usize, b: usize| s.strategy(i)[b] / s.strategy(i)[a];
        assert!(cum(0, 0, 200) > cum(1, 0, 200));
        assert!(cum(1, 200, 399) > cum(0, 200, 399));
        assert!(two_regime(400, 400, start(), 2).is_err());
    }

    #[test]
    fn regime_runs_are_paired_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = regime_signs(&mut rng, 5000);
        let mut partial: f64 = 0.0;
        for x in &s {
            partial += x;
            assert!(partial.abs() <= 5.0);
        }
    }

    #[test]
    fn prescient_context_reveals_next_day() {
        let s = prescient(500, start(), 4).unwrap();
        for t in 0..s.len() - 1 {
            let next = s.column_return(1, t + 1) - PRESCIENT_DRIFT;
            assert_eq!(next > 0.0, s.context(0)[t] > 0.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ScenarioSpec::default();
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
    }
}
