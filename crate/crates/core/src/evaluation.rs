//! Performance metrics and walk-forward evaluation.

use std::io::Write;

use chrono::{Months, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PriceSeries;
use crate::error::{invalid, Result};
use crate::rewards::{self, EpisodeReturns, RATIO_CAP, TRADING_DAYS};
use crate::simulator::{simulate, BacktestConfig, BacktestResult, MarketReturns};
use crate::trainer::TrainingCurve;

fn check_values(values: &[f64], min_len: usize) -> Result<()> {
    if values.len() < min_len {
        return Err(invalid(format!(
            "need at least {min_len} values, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid(format!("value {} at index {i} is not positive", values[i])));
    }
    Ok(())
}

fn daily_returns(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

/// `(P_T / P_0)^(1/tau) - 1` with `tau = (values.len() - 1) / 250`.
pub fn annualized_return(values: &[f64]) -> Result<f64> {
    check_values(values, 2)?;
    let tau = (values.len() - 1) as f64 / TRADING_DAYS;
    Ok((values[values.len() - 1] / values[0]).powf(1.0 / tau) - 1.0)
}

/// Annualized return over `sqrt(250)` times the population std of daily returns.
pub fn sharpe(values: &[f64]) -> Result<f64> {
    check_values(values, 3)?;
    let mu = annualized_return(values)?;
    let r = daily_returns(values);
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Ok(if mu == 0.0 {
            0.0
        } else {
            RATIO_CAP.copysign(mu)
        });
    }
    Ok((mu / (TRADING_DAYS.sqrt() * sd)).clamp(-RATIO_CAP, RATIO_CAP))
}

/// Largest peak-to-trough loss as a fraction of the peak.
pub fn max_drawdown(values: &[f64]) -> Result<f64> {
    check_values(values, 1)?;
    let mut peak = values[0];
    let mut mdd: f64 = 0.0;
    for &v in values {
        peak = peak.max(v);
        mdd = mdd.max((peak - v) / peak);
    }
    Ok(mdd)
}

pub fn sortino(values: &[f64]) -> Result<f64> {
    check_values(values, 2)?;
    rewards::sortino(&EpisodeReturns::from_daily(daily_returns(values))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub annualized_return: f64,
    pub sharpe: f64,
    pub sortino: f64,
    pub max_drawdown: f64,
}

impl MetricsReport {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        Ok(Self {
            annualized_return: annualized_return(values)?,
            sharpe: sharpe(values)?,
            sortino: sortino(values)?,
            max_drawdown: max_drawdown(values)?,
        })
    }

    /// Metrics of the last `years * 250` days of a path.
    pub fn trailing(values: &[f64], years: usize) -> Result<Self> {
        let days = years * TRADING_DAYS as usize;
        if values.len() < days + 1 {
            return Err(invalid(format!(
                "{years}-year window needs {} values, path has {}",
                days + 1,
                values.len()
            )));
        }
        Self::from_values(&values[values.len() - days - 1..])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Extending,
    Sliding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSpan {
    Days(usize),
    Months(u32),
    Years(u32),
}

/// Inclusive row ranges of one train/test step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Step {
    pub train_start: usize,
    pub train_end: usize,
    pub test_start: usize,
    pub test_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkForwardSchedule {
    pub mode: ScheduleMode,
    pub steps: Vec<Step>,
    pub dates: Vec<NaiveDate>,
}

impl WalkForwardSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(train_start, train_end, test_start, test_end)` dates of a step.
    pub fn step_dates(&self, k: usize) -> [NaiveDate; 4] {
        let s = &self.steps[k];
        [s.train_start, s.train_end, s.test_start, s.test_end].map(|r| self.dates[r])
    }
}

/// Consecutive test blocks after `first_train_end`, each trained on
/// everything before it (extending) or on a fixed-length window (sliding).
pub fn build_schedule(
    dates: &[NaiveDate],
    mode: ScheduleMode,
    first_train_end: NaiveDate,
    span: TestSpan,
) -> Result<WalkForwardSchedule> {
    let train_end0 = match dates.iter().rposition(|d| *d <= first_train_end) {
        Some(r) => r,
        None => return Err(invalid(format!("no dates on or before {first_train_end}"))),
    };
    if train_end0 + 1 >= dates.len() {
        return Err(invalid(format!(
            "no dates after the first train end {first_train_end}; schedule would be empty"
        )));
    }
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    match span {
        TestSpan::Days(0) | TestSpan::Months(0) | TestSpan::Years(0) => {
            return Err(invalid("test span must be at least one unit"));
        }
        TestSpan::Days(n) => {
            let mut a = train_end0 + 1;
            while a < dates.len() {
                let b = (a + n - 1).min(dates.len() - 1);
                blocks.push((a, b));
                a = b + 1;
            }
        }
        TestSpan::Months(_) | TestSpan::Years(_) => {
            let months = match span {
                TestSpan::Months(m) => m,
                TestSpan::Years(y) => 12 * y,
                TestSpan::Days(_) => unreachable!(),
            };
            let mut a = train_end0 + 1;
            let mut k = 1;
            while a < dates.len() {
                let edge = first_train_end
                    .checked_add_months(Months::new(months * k))
                    .ok_or_else(|| invalid("schedule date overflow"))?;
                k += 1;
                let Some(b) = dates.iter().rposition(|d| *d <= edge) else { continue };
                if b >= a {
                    blocks.push((a, b));
                    a = b + 1;
                }
            }
        }
    }
    let train_len = train_end0 + 1;
    let steps = blocks
        .into_iter()
        .map(|(a, b)| Step {
            train_start: match mode {
                ScheduleMode::Extending => 0,
                ScheduleMode::Sliding => a - train_len,
            },
            train_end: a - 1,
            test_start: a,
            test_end: b,
        })
        .collect::<Vec<_>>();
    if steps.is_empty() {
        return Err(invalid("empty walk-forward schedule"));
    }
    Ok(WalkForwardSchedule {
        mode,
        steps,
        dates: dates.to_vec(),
    })
}

/// Shuffle-free k-fold split of `n` rows: each fold is a test block and the
/// rest (before and after it) is training data. Ignores chronology, so it is
/// only offered for comparison and never used by the walk-forward runner.
pub fn kfold_schedule(n: usize, k: usize) -> Result<Vec<(Vec<std::ops::Range<usize>>, std::ops::Range<usize>)>> {
    if k < 2 || k > n {
        return Err(invalid(format!("cannot split {n} rows into {k} folds")));
    }
    Ok((0..k)
        .map(|i| {
            let test = i * n / k..(i + 1) * n / k;
            let train = [0..test.start, test.end..n]
                .into_iter()
                .filter(|r| !r.is_empty())
                .collect();
            (train, test)
        })
        .collect())
}

/// Produces weight rows from data up to each decision row.
pub trait Decider: Send + Sync {
    /// One weight row per series row `first..=last`; the series given ends at `last`.
    fn decide(&self, series: &PriceSeries, first: usize, last: usize) -> Result<Vec<Vec<f64>>>;

    fn training_curve(&self) -> Option<&TrainingCurve> {
        None
    }
}

/// A model fitted on a training prefix.
pub trait AllocationModel: Send + Sync {
    fn name(&self) -> String;

    /// `train` holds rows up to the step's train end only.
    fn fit(&self, train: &PriceSeries, step: usize) -> Result<Box<dyn Decider>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub dates: [NaiveDate; 4],
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct WalkForwardResult {
    pub model: String,
    /// Out-of-sample path starting one row before the first test row.
    pub path: BacktestResult,
    /// Decided rows backing `path`, starting at `first_decision_row`.
    pub decisions: Vec<Vec<f64>>,
    pub first_decision_row: usize,
    pub steps: Vec<StepReport>,
    pub overall: MetricsReport,
    pub curves: Vec<Option<TrainingCurve>>,
}

/// Fits each step on its training prefix, decides its test rows, and runs one
/// backtest over the concatenated decisions.
pub fn run_walk_forward(
    series: &PriceSeries,
    schedule: &WalkForwardSchedule,
    model: &dyn AllocationModel,
    backtest: &BacktestConfig,
) -> Result<WalkForwardResult> {
    backtest.validate()?;
    if schedule.dates.as_slice() != series.dates() {
        return Err(invalid("schedule was built for different dates"));
    }
    let n_steps = schedule.steps.len();
    let last_row = schedule.steps[n_steps - 1].test_end;
    let outputs = schedule
        .steps
        .par_iter()
        .enumerate()
        .map(|(k, step)| {
            let train = series.truncate_to(step.train_end)?;
            let decider = model.fit(&train, k)?;
            // rows a-1 ..= b-1 decide the days a ..= b; the last step also covers row b
            let first = step.test_start - 1;
            let last = if k + 1 == n_steps { step.test_end } else { step.test_end - 1 };
            let visible = series.truncate_to(last)?;
            let rows = decider.decide(&visible, first, last)?;
            if rows.len() != last - first + 1 {
                return Err(invalid(format!(
                    "model {} returned {} rows for {} decisions",
                    model.name(),
                    rows.len(),
                    last - first + 1
                )));
            }
            Ok((rows, decider.training_curve().cloned()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut decisions = Vec::new();
    let mut curves = Vec::new();
    for (rows, curve) in outputs {
        decisions.extend(rows);
        curves.push(curve);
    }
    let first_row = schedule.steps[0].test_start - 1;
    let market = MarketReturns::from_series(series, first_row, last_row)?;
    let path = simulate(
        &market,
        &decisions,
        backtest,
        series.dates()[first_row..=last_row].to_vec(),
    )?;
    let steps = schedule
        .steps
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let slice = path.slice_days(s.test_start - first_row, s.test_end - first_row)?;
            let values = &slice.values;
            let metrics = if values.len() >= 3 {
                MetricsReport::from_values(values)?
            } else {
                // too short for a volatility estimate
                MetricsReport {
                    annualized_return: annualized_return(values)?,
                    sharpe: 0.0,
                    sortino: sortino(values)?,
                    max_drawdown: max_drawdown(values)?,
                }
            };
            Ok(StepReport {
                step: k,
                dates: schedule.step_dates(k),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = MetricsReport::from_values(&path.values)?;
    Ok(WalkForwardResult {
        model: model.name(),
        path,
        decisions,
        first_decision_row: first_row,
        steps,
        overall,
        curves,
    })
}

/// One row per model and step plus one `overall` row per model.
pub fn write_step_reports<W: Write>(w: W, results: &[WalkForwardResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "model",
        "step",
        "train_start",
        "train_end",
        "test_start",
        "test_end",
        "annualized_return",
        "sortino",
        "sharpe",
        "max_drawdown",
    ])?;
    let fmt = |d: NaiveDate| d.format("%Y-%m-%d").to_string();
    for r in results {
        for s in &r.steps {
            let m = &s.metrics;
            out.write_record([
                r.model.clone(),
                s.step.to_string(),
                fmt(s.dates[0]),
                fmt(s.dates[1]),
                fmt(s.dates[2]),
                fmt(s.dates[3]),
                m.annualized_return.to_string(),
                m.sortino.to_string(),
                m.sharpe.to_string(),
                m.max_drawdown.to_string(),
            ])?;
        }
        let m = &r.overall;
        let (first, last) = (r.steps[0].dates, r.steps[r.steps.len() - 1].dates);
        out.write_record([
            r.model.clone(),
            "overall".to_string(),
            fmt(first[0]),
            fmt(last[1]),
            fmt(first[2]),
            fmt(last[3]),
            m.annualized_return.to_string(),
            m.sortino.to_string(),
            m.sharpe.to_string(),
            m.max_drawdown.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
