//! Daily backtest of a hedging overlay on top of a fully held risky asset.
//!
//! A weight row decided at the close of row `t` earns the strategy returns of
//! day `t + lag + 1`. Turnover is the L1 change of the applied weights and is
//! charged at `commission` on the day the new weights apply.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::error::{invalid, Result};
use crate::rewards::EpisodeReturns;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    /// Cost per unit of turnover (0.0030 = 30 bps).
    pub commission: f64,
    /// Days between decision and execution, 0 or 1.
    pub action_lag: usize,
    /// Notional of the overlay relative to the risky position.
    pub overlay_budget: f64,
    /// Holdings before the first day. `None` means the first applied row is
    /// already held, so the first day pays nothing.
    #[serde(skip)]
    pub initial_weights: Option<Vec<f64>>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            commission: 0.0030,
            action_lag: 1,
            overlay_budget: 1.0,
            initial_weights: None,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.commission >= 0.0) || !self.commission.is_finite() {
            return Err(invalid(format!("commission {} must be >= 0", self.commission)));
        }
        if self.action_lag > 1 {
            return Err(invalid(format!(
                "action lag {} not supported (0 or 1)",
                self.action_lag
            )));
        }
        if !(self.overlay_budget > 0.0 && self.overlay_budget <= 1.0) {
            return Err(invalid(format!(
                "overlay budget {} must be in (0, 1]",
                self.overlay_budget
            )));
        }
        Ok(())
    }
}

/// Per-day returns of the risky asset and of each strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketReturns {
    /// `risky[s - 1]` is the return of day `s` (row `s - 1` to row `s`).
    pub risky: Vec<f64>,
    /// `strategies[s - 1][i]`.
    pub strategies: Vec<Vec<f64>>,
}

impl MarketReturns {
    /// Returns of days `first + 1 ..= last` of the series.
    pub fn from_series(series: &PriceSeries, first: usize, last: usize) -> Result<Self> {
        if first >= last || last >= series.len() {
            return Err(invalid(format!(
                "backtest window {first}..={last} needs at least one day inside {} rows",
                series.len()
            )));
        }
        let l = series.n_strategies();
        let risky = (first + 1..=last).map(|t| series.column_return(0, t)).collect();
        let strategies = (first + 1..=last)
            .map(|t| (0..l).map(|i| series.column_return(1 + i, t)).collect())
            .collect();
        Ok(Self { risky, strategies })
    }

    pub fn days(&self) -> usize {
        self.risky.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    /// `days + 1` dates; the first is the starting row.
    pub dates: Vec<NaiveDate>,
    /// Portfolio level per row, starting at 1.0.
    pub values: Vec<f64>,
    /// Weights earning each day's return.
    pub weights_applied: Vec<Vec<f64>>,
    pub daily_returns: Vec<f64>,
    pub turnover: Vec<f64>,
    pub cost_paid: Vec<f64>,
}

impl BacktestResult {
    pub fn days(&self) -> usize {
        self.daily_returns.len()
    }

    pub fn total_return(&self) -> f64 {
        self.values.last().copied().unwrap_or(1.0) / self.values[0] - 1.0
    }

    /// Days `first..=last` (1-based day numbers), values rebased to 1.0.
    pub fn slice_days(&self, first: usize, last: usize) -> Result<Self> {
        if first == 0 || first > last || last > self.days() {
            return Err(invalid(format!(
                "day range {first}..={last} outside 1..={}",
                self.days()
            )));
        }
        let base = self.values[first - 1];
        Ok(Self {
            dates: self.dates[first - 1..=last].to_vec(),
            values: self.values[first - 1..=last].iter().map(|v| v / base).collect(),
            weights_applied: self.weights_applied[first - 1..last].to_vec(),
            daily_returns: self.daily_returns[first - 1..last].to_vec(),
            turnover: self.turnover[first - 1..last].to_vec(),
            cost_paid: self.cost_paid[first - 1..last].to_vec(),
        })
    }

    /// CSV with one row per date: value, applied weights, turnover, cost, return.
    /// The first row carries the starting level and no trading.
    pub fn write_csv<W: Write>(&self, w: W, strategy_names: &[String]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["date".to_string(), "value".to_string()];
        header.extend(strategy_names.iter().map(|n| format!("w_{n}")));
        header.extend(["turnover", "cost", "daily_return"].map(String::from));
        out.write_record(&header)?;
        let l = strategy_names.len();
        for (row, date) in self.dates.iter().enumerate() {
            let mut rec = vec![date.format("%Y-%m-%d").to_string(), self.values[row].to_string()];
            if row == 0 {
                rec.extend(std::iter::repeat_n(String::new(), l));
                rec.extend(["0", "0", "0"].map(String::from));
            } else {
                let d = row - 1;
                rec.extend(self.weights_applied[d].iter().map(f64::to_string));
                rec.push(self.turnover[d].to_string());
                rec.push(self.cost_paid[d].to_string());
                rec.push(self.daily_returns[d].to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, strategy_names: &[String]) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, strategy_names)
    }
}

/// Packages daily returns with `year_fraction = days / 250`.
pub fn episode_returns(result: &BacktestResult) -> Result<EpisodeReturns> {
    EpisodeReturns::from_daily(result.daily_returns.clone())
}

fn check_rows(decided: &[Vec<f64>], l: usize) -> Result<()> {
    for (t, row) in decided.iter().enumerate() {
        if row.len() != l {
            return Err(invalid(format!(
                "weight row {t} has {} entries, expected {l}",
                row.len()
            )));
        }
        if row.iter().all(|&w| w == 0.0) {
            // empty overlay
            continue;
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&w| !w.is_finite() || w < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("weight row {t} is off the simplex (sum {sum})")));
        }
    }
    Ok(())
}

/// Where the weights applied on a given day come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Decided(usize),
    Initial,
}

fn source(day: usize, lag: usize, has_initial: bool) -> Source {
    // day is 1-based; decided row index is day - 1 - lag
    match (day - 1).checked_sub(lag) {
        Some(d) => Source::Decided(d),
        None if has_initial => Source::Initial,
        None => Source::Decided(0),
    }
}

/// Simulates `market.days()` days from `days + 1` decided rows.
pub fn simulate(
    market: &MarketReturns,
    decided: &[Vec<f64>],
    cfg: &BacktestConfig,
    dates: Vec<NaiveDate>,
) -> Result<BacktestResult> {
    cfg.validate()?;
    let days = market.days();
    let l = market.strategies.first().map_or(0, Vec::len);
    if decided.len() != days + 1 {
        return Err(invalid(format!(
            "{} weight rows for {} series rows",
            decided.len(),
            days + 1
        )));
    }
    if dates.len() != days + 1 {
        return Err(invalid("dates misaligned with returns"));
    }
    check_rows(decided, l)?;
    if let Some(init) = &cfg.initial_weights {
        check_rows(std::slice::from_ref(init), l)?;
    }
    let has_initial = cfg.initial_weights.is_some();
    let applied_row = |day: usize| -> &Vec<f64> {
        match source(day, cfg.action_lag, has_initial) {
            Source::Decided(d) => &decided[d],
            Source::Initial => cfg.initial_weights.as_ref().unwrap(),
        }
    };

    let mut values = Vec::with_capacity(days + 1);
    values.push(1.0);
    let mut weights_applied = Vec::with_capacity(days);
    let mut daily_returns = Vec::with_capacity(days);
    let mut turnover = Vec::with_capacity(days);
    let mut cost_paid = Vec::with_capacity(days);
    let mut prev: &Vec<f64> = cfg.initial_weights.as_ref().unwrap_or_else(|| applied_row(1));
    for day in 1..=days {
        let a = applied_row(day);
        let to: f64 = a.iter().zip(prev).map(|(x, y)| (x - y).abs()).sum();
        let cost = cfg.commission * to;
        let overlay: f64 = a
            .iter()
            .zip(&market.strategies[day - 1])
            .map(|(w, r)| w * r)
            .sum();
        let ret = market.risky[day - 1] + cfg.overlay_budget * overlay - cost;
        let v = values[day - 1] * (1.0 + ret);
        if !(v > 0.0) {
            return Err(invalid(format!("portfolio value non-positive on day {day}")));
        }
        values.push(v);
        weights_applied.push(a.clone());
        daily_returns.push(ret);
        turnover.push(to);
        cost_paid.push(cost);
        prev = a;
    }
    Ok(BacktestResult {
        dates,
        values,
        weights_applied,
        daily_returns,
        turnover,
        cost_paid,
    })
}

/// Backtests the whole series with one decided row per series row.
pub fn run_backtest(
    series: &PriceSeries,
    decided: &[Vec<f64>],
    cfg: &BacktestConfig,
) -> Result<BacktestResult> {
    if decided.len() != series.len() {
        return Err(invalid(format!(
            "{} weight rows for a series of {} rows",
            decided.len(),
            series.len()
        )));
    }
    let market = MarketReturns::from_series(series, 0, series.len() - 1)?;
    simulate(&market, decided, cfg, series.dates().to_vec())
}

/// Daily portfolio returns only, without validation or bookkeeping.
pub(crate) fn daily_returns_fast(market: &MarketReturns, decided: &[Vec<f64>], cfg: &BacktestConfig) -> Vec<f64> {
    let has_initial = cfg.initial_weights.is_some();
    let row = |day: usize| match source(day, cfg.action_lag, has_initial) {
        Source::Decided(d) => decided[d].as_slice(),
        Source::Initial => cfg.initial_weights.as_deref().unwrap(),
    };
    let mut prev = cfg.initial_weights.as_deref().unwrap_or_else(|| row(1));
    (1..=market.days())
        .map(|day| {
            let a = row(day);
            let to: f64 = a.iter().zip(prev).map(|(x, y)| (x - y).abs()).sum();
            let overlay: f64 = a.iter().zip(&market.strategies[day - 1]).map(|(w, r)| w * r).sum();
            prev = a;
            market.risky[day - 1] + cfg.overlay_budget * overlay - cfg.commission * to
        })
        .collect()
}

/// Chain rule through the simulator: maps `d reward / d daily_return[s]` to
/// `d reward / d decided[t]` for every decided row (`|x|` uses `sign(0) = 0`).
pub fn backprop_to_decisions(
    market: &MarketReturns,
    decided: &[Vec<f64>],
    cfg: &BacktestConfig,
    return_grads: &[f64],
) -> Vec<Vec<f64>> {
    let days = market.days();
    let l = decided.first().map_or(0, Vec::len);
    let has_initial = cfg.initial_weights.is_some();
    let src = |day: usize| source(day, cfg.action_lag, has_initial);
    let row = |s: Source| -> &[f64] {
        match s {
            Source::Decided(d) => &decided[d],
            Source::Initial => cfg.initial_weights.as_deref().unwrap(),
        }
    };
    let mut out = vec![vec![0.0; l]; decided.len()];
    for day in 1..=days {
        let g = return_grads[day - 1];
        if g == 0.0 {
            continue;
        }
        let cur = src(day);
        let a = row(cur);
        if let Source::Decided(d) = cur {
            for i in 0..l {
                out[d][i] += g * cfg.overlay_budget * market.strategies[day - 1][i];
            }
        }
        // turnover against the previous day's holdings
        let prev = if day == 1 {
            if has_initial {
                Some(Source::Initial)
            } else {
                None
            }
        } else {
            Some(src(day - 1))
        };
        if let Some(prev) = prev {
            let b = row(prev);
            for i in 0..l {
                let s = (a[i] - b[i]).signum() * f64::from(a[i] != b[i]);
                let c = g * cfg.commission * s;
                if let Source::Decided(d) = cur {
                    out[d][i] -= c;
                }
                if let Source::Decided(d) = prev {
                    out[d][i] += c;
                }
            }
        }
    }
    out
}
