//! Experiment specification and runner: walk-forward runs of the DRL model and
//! the baselines, the reward x network x adversarial x context x lag ablation
//! matrix, and the CSV / SVG reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{derive_seed, DrlConfig, DrlModel};
use crate::baselines::{Baseline, MarkowitzConfig};
use crate::data::{load_csv, synthesize, write_csv, PriceSeries, RegimeSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_schedule, run_walk_forward, write_step_reports, AllocationModel, MetricsReport, ScheduleMode,
    TestSpan, WalkForwardResult, WalkForwardSchedule,
};
use crate::plot::line_chart;
use crate::policy::Variant;
use crate::rewards::RewardKind;
use crate::scenarios::ScenarioSpec;
use crate::simulator::BacktestConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Price file: date column, risky asset, strategies, then context.
    pub csv: Option<PathBuf>,
    /// Number of strategy columns in the csv.
    pub strategies: Option<usize>,
    pub synthetic: Option<ScenarioSpec>,
    /// Piecewise random walks per column.
    pub regime: Option<RegimeSpec>,
}

impl DataConfig {
    fn sources(&self) -> usize {
        usize::from(self.csv.is_some()) + usize::from(self.synthetic.is_some()) + usize::from(self.regime.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Drl,
    RiskyOnly,
    Markowitz,
    FollowWinner,
    FollowLoser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub first_train_end: Option<NaiveDate>,
    /// Share of rows in the first training window when no end date is given.
    pub train_fraction: f64,
    pub test_span: TestSpan,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Extending,
            first_train_end: None,
            train_fraction: 0.5,
            test_span: TestSpan::Years(1),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, series: &PriceSeries) -> Result<WalkForwardSchedule> {
        let end = match self.first_train_end {
            Some(d) => d,
            None => {
                let row = ((series.len() as f64 * self.train_fraction) as usize).clamp(1, series.len()) - 1;
                series.dates()[row]
            }
        };
        build_schedule(series.dates(), self.mode, end, self.test_span)
    }
}

/// Values enumerated by the ablation matrix; the full matrix has 32 cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub rewards: Vec<RewardKind>,
    pub networks: Vec<Variant>,
    pub adversarial: Vec<bool>,
    pub context: Vec<bool>,
    pub lags: Vec<usize>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            rewards: vec![RewardKind::NetProfit, RewardKind::Sortino],
            networks: vec![Variant::Convolutional, Variant::Recurrent],
            adversarial: vec![true, false],
            context: vec![true, false],
            lags: vec![1, 0],
        }
    }
}

impl AblationAxes {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &reward in &self.rewards {
            for &network in &self.networks {
                for &adversarial in &self.adversarial {
                    for &context in &self.context {
                        for &lag in &self.lags {
                            out.push(Cell {
                                reward,
                                network,
                                adversarial,
                                context,
                                lag,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One DRL configuration of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub reward: RewardKind,
    pub network: Variant,
    pub adversarial: bool,
    pub context: bool,
    pub lag: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "drl_{}_{}_{}_{}_lag{}",
            self.reward.label(),
            self.network.label(),
            if self.adversarial { "adv" } else { "noadv" },
            if self.context { "ctx" } else { "noctx" },
            self.lag
        )
    }

    /// Applies the cell to a base configuration. Without adversarial training
    /// observations are clean and every action comes from the policy.
    pub fn apply(&self, base: &DrlConfig, backtest: &BacktestConfig) -> (DrlConfig, BacktestConfig) {
        let mut cfg = base.clone();
        cfg.train.reward = self.reward;
        cfg.network.variant = self.network;
        cfg.network.use_context = self.context;
        if !self.adversarial {
            cfg.train.noise_std = 0.0;
            cfg.train.explore_prob = 1.0;
        }
        let mut bt = backtest.clone();
        bt.action_lag = self.lag;
        (cfg, bt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataConfig,
    pub models: Vec<ModelKind>,
    pub drl: DrlConfig,
    pub backtest: BacktestConfig,
    pub schedule: ScheduleConfig,
    pub markowitz: MarkowitzConfig,
    /// Overrides the DRL training and initialization seeds when set.
    pub seed: Option<u64>,
    /// Present means the DRL model runs once per cell instead of once.
    pub ablation: Option<AblationAxes>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            data: DataConfig {
                synthetic: Some(ScenarioSpec::default()),
                ..Default::default()
            },
            models: vec![
                ModelKind::Drl,
                ModelKind::RiskyOnly,
                ModelKind::Markowitz,
                ModelKind::FollowWinner,
                ModelKind::FollowLoser,
            ],
            drl: DrlConfig::default(),
            backtest: BacktestConfig::default(),
            schedule: ScheduleConfig::default(),
            markowitz: MarkowitzConfig::default(),
            seed: None,
            ablation: None,
            output: None,
        }
    }
}

impl ExperimentSpec {
    /// Every problem with the spec; empty when it can run.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |r: Result<()>, what: &str| {
            if let Err(e) = r {
                out.push(format!("{what}: {e}"));
            }
        };
        match self.data.sources() {
            0 => check(Err(Error::Validation("no data source (csv, synthetic or regime)".into())), "data"),
            1 => {}
            _ => check(Err(Error::Validation("give exactly one data source".into())), "data"),
        }
        if let Some(path) = &self.data.csv {
            if self.data.strategies.is_none() {
                check(Err(Error::Validation("csv data needs `strategies`".into())), "data");
            }
            if !path.is_file() {
                check(
                    Err(Error::Validation(format!("{} is not a readable file", path.display()))),
                    "data",
                );
            }
        }
        if let Some(s) = &self.data.synthetic {
            if s.rows < 2 {
                check(Err(Error::Validation("synthetic rows must be at least 2".into())), "data");
            }
        }
        if let Some(r) = &self.data.regime {
            check(r.validate().map(|_| ()), "data.regime");
        }
        if self.models.is_empty() {
            check(Err(Error::Validation("at least one model is required".into())), "models");
        }
        check(self.backtest.validate(), "backtest");
        check(self.drl.train.validate(), "drl.train");
        check(self.drl.network.validate(), "drl.network");
        if self.drl.features.vol_window < 2 {
            check(
                Err(Error::Validation("volatility window must be at least 2".into())),
                "drl.features",
            );
        }
        check(self.markowitz.validate(), "markowitz");
        if self.schedule.first_train_end.is_none() && !(self.schedule.train_fraction > 0.0 && self.schedule.train_fraction < 1.0) {
            check(
                Err(Error::Validation(format!(
                    "train fraction {} outside (0, 1)",
                    self.schedule.train_fraction
                ))),
                "schedule",
            );
        }
        if let Some(ax) = &self.ablation {
            if ax.rewards.is_empty()
                || ax.networks.is_empty()
                || ax.adversarial.is_empty()
                || ax.context.is_empty()
                || ax.lags.is_empty()
            {
                check(Err(Error::Validation("every ablation axis needs a value".into())), "ablation");
            }
            for &lag in &ax.lags {
                if lag > 1 {
                    check(
                        Err(Error::Validation(format!("lag {lag} not supported, use 0 or 1"))),
                        "ablation",
                    );
                }
            }
            let cells = ax.cells();
            if cells.len() > 32 {
                check(Err(Error::Validation(format!("{} cells, at most 32", cells.len()))), "ablation");
            }
            let mut labels: Vec<String> = cells.iter().map(Cell::label).collect();
            labels.sort();
            labels.dedup();
            if labels.len() != cells.len() {
                check(Err(Error::Validation("duplicate values on an ablation axis".into())), "ablation");
            }
        }
        out
    }

    /// Validates, turning every diagnostic into a single error.
    pub fn check(&self) -> Result<()> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn load_data(&self) -> Result<PriceSeries> {
        match (&self.data.csv, &self.data.synthetic, &self.data.regime) {
            (Some(path), None, None) => load_csv(path, self.data.strategies.unwrap_or(0)),
            (None, Some(s), None) => s.generate(),
            (None, None, Some(r)) => synthesize(r),
            _ => Err(Error::Validation("exactly one data source is required".into())),
        }
    }

    /// DRL configuration with the seed override applied.
    pub fn drl_config(&self) -> DrlConfig {
        let mut cfg = self.drl.clone();
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.init_seed = derive_seed(seed, 1);
        }
        cfg
    }

    fn baseline(&self, kind: ModelKind) -> Option<Baseline> {
        let (lookback, rebalance_period) = (self.markowitz.lookback, self.markowitz.rebalance_period);
        match kind {
            ModelKind::Drl => None,
            ModelKind::RiskyOnly => Some(Baseline::RiskyOnly),
            ModelKind::Markowitz => Some(Baseline::Markowitz(self.markowitz)),
            ModelKind::FollowWinner => Some(Baseline::FollowWinner {
                lookback,
                rebalance_period,
            }),
            ModelKind::FollowLoser => Some(Baseline::FollowLoser {
                lookback,
                rebalance_period,
            }),
        }
    }

    /// Every model run of the experiment, in report order.
    pub fn runs(&self) -> Vec<RunPlan> {
        let drl = self.drl_config();
        let mut plans = Vec::new();
        let lags = match &self.ablation {
            Some(ax) => ax.lags.clone(),
            None => vec![self.backtest.action_lag],
        };
        for &kind in &self.models {
            match (kind, &self.ablation) {
                (ModelKind::Drl, Some(ax)) => {
                    for cell in ax.cells() {
                        let (cfg, bt) = cell.apply(&drl, &self.backtest);
                        plans.push(RunPlan {
                            label: cell.label(),
                            kind,
                            lag: cell.lag,
                            cell: Some(cell),
                            drl: Some(cfg),
                            backtest: bt,
                        });
                    }
                }
                (ModelKind::Drl, None) => plans.push(RunPlan {
                    label: "drl".into(),
                    kind,
                    lag: self.backtest.action_lag,
                    cell: None,
                    drl: Some(drl.clone()),
                    backtest: self.backtest.clone(),
                }),
                _ => {
                    for &lag in &lags {
                        let mut bt = self.backtest.clone();
                        bt.action_lag = lag;
                        let name = self.baseline(kind).map(|b| b.name()).unwrap_or_default();
                        plans.push(RunPlan {
                            label: if self.ablation.is_some() { format!("{name}_lag{lag}") } else { name },
                            kind,
                            lag,
                            cell: None,
                            drl: None,
                            backtest: bt,
                        });
                    }
                }
            }
        }
        plans
    }
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub label: String,
    pub kind: ModelKind,
    pub lag: usize,
    pub cell: Option<Cell>,
    pub drl: Option<DrlConfig>,
    pub backtest: BacktestConfig,
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub label: String,
    pub kind: ModelKind,
    pub lag: usize,
    pub cell: Option<Cell>,
    pub result: WalkForwardResult,
}

/// One line of the ablation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: Cell,
    pub label: String,
    pub metrics: MetricsReport,
    /// Annualized return at lag 1 minus lag 0 for the cell's other settings.
    pub lag_impact: Option<f64>,
    /// Annualized return with context minus without.
    pub context_impact: Option<f64>,
}

/// Performance of one model at both lags.
#[derive(Debug, Clone, PartialEq)]
pub struct LagRow {
    pub model: String,
    pub lag1: f64,
    pub lag0: f64,
    pub impact: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub series: PriceSeries,
    pub schedule: WalkForwardSchedule,
    pub runs: Vec<ModelRun>,
    pub ablation: Vec<AblationRow>,
    pub lag_rows: Vec<LagRow>,
}

impl ExperimentReport {
    pub fn run(&self, label: &str) -> Option<&ModelRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

/// Runs every model of the spec through the walk-forward harness.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.check()?;
    let series = spec.load_data()?;
    let schedule = spec.schedule.build(&series)?;
    let plans = spec.runs();
    let results = plans
        .par_iter()
        .map(|plan| {
            let mut result = match &plan.drl {
                Some(cfg) => {
                    let model = DrlModel::new(plan.label.clone(), cfg.clone(), plan.backtest.clone());
                    run_walk_forward(&series, &schedule, &model, &plan.backtest)?
                }
                None => {
                    let model = spec.baseline(plan.kind).expect("baseline plan");
                    run_walk_forward(&series, &schedule, &model, &plan.backtest)?
                }
            };
            result.model = plan.label.clone();
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<ModelRun> = plans
        .into_iter()
        .zip(results)
        .map(|(p, result)| ModelRun {
            label: p.label,
            kind: p.kind,
            lag: p.lag,
            cell: p.cell,
            result,
        })
        .collect();
    let ablation = ablation_rows(&runs);
    let lag_rows = lag_rows(&runs);
    Ok(ExperimentReport {
        series,
        schedule,
        runs,
        ablation,
        lag_rows,
    })
}

fn performance(r: &ModelRun) -> f64 {
    r.result.overall.annualized_return
}

fn ablation_rows(runs: &[ModelRun]) -> Vec<AblationRow> {
    let find = |c: Cell| runs.iter().find(|r| r.cell == Some(c)).map(performance);
    runs.iter()
        .filter_map(|r| r.cell.map(|c| (r, c)))
        .map(|(r, c)| {
            let lag_impact = match (find(Cell { lag: 1, ..c }), find(Cell { lag: 0, ..c })) {
                (Some(one), Some(zero)) => Some(one - zero),
                _ => None,
            };
            let context_impact = match (find(Cell { context: true, ..c }), find(Cell { context: false, ..c })) {
                (Some(with), Some(without)) => Some(with - without),
                _ => None,
            };
            AblationRow {
                cell: c,
                label: r.label.clone(),
                metrics: r.result.overall,
                lag_impact,
                context_impact,
            }
        })
        .collect()
}

fn lag_rows(runs: &[ModelRun]) -> Vec<LagRow> {
    let mut out = Vec::new();
    for r in runs.iter().filter(|r| r.lag == 1) {
        let zero = runs.iter().find(|o| {
            o.lag == 0
                && o.kind == r.kind
                && match (o.cell, r.cell) {
                    (Some(a), Some(b)) => a == Cell { lag: 0, ..b },
                    (None, None) => true,
                    _ => false,
                }
        });
        if let Some(zero) = zero {
            let model = r.label.strip_suffix("_lag1").unwrap_or(&r.label).to_string();
            out.push(LagRow {
                model,
                lag1: performance(r),
                lag0: performance(zero),
                impact: performance(r) - performance(zero),
            });
        }
    }
    out
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metric_fields(m: &MetricsReport) -> [String; 4] {
    [
        m.annualized_return.to_string(),
        m.sortino.to_string(),
        m.sharpe.to_string(),
        m.max_drawdown.to_string(),
    ]
}

/// Ablation matrix, one row per cell.
pub fn write_ablation_summary<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "model",
        "reward",
        "network",
        "adversarial",
        "context",
        "lag",
        "annualized_return",
        "sortino",
        "sharpe",
        "max_drawdown",
        "lag_impact",
        "context_impact",
    ])?;
    for r in rows {
        let c = r.cell;
        let mut rec = vec![
            r.label.clone(),
            c.reward.label().to_string(),
            c.network.label().to_string(),
            c.adversarial.to_string(),
            c.context.to_string(),
            c.lag.to_string(),
        ];
        rec.extend(metric_fields(&r.metrics));
        rec.push(opt(r.lag_impact));
        rec.push(opt(r.context_impact));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_lag_summary<W: Write>(w: W, rows: &[LagRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "lag1", "lag0", "lag_impact"])?;
    for r in rows {
        out.write_record([r.model.clone(), r.lag1.to_string(), r.lag0.to_string(), r.impact.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Overall metrics per model, with trailing 3- and 5-year windows when the
/// out-of-sample path is long enough.
pub fn write_summary<W: Write>(w: W, runs: &[ModelRun]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["model".to_string(), "lag".to_string()];
    for prefix in ["", "3y_", "5y_"] {
        for m in ["annualized_return", "sortino", "sharpe", "max_drawdown"] {
            header.push(format!("{prefix}{m}"));
        }
    }
    out.write_record(&header)?;
    for r in runs {
        let mut rec = vec![r.label.clone(), r.lag.to_string()];
        rec.extend(metric_fields(&r.result.overall));
        for years in [3, 5] {
            match MetricsReport::trailing(&r.result.path.values, years) {
                Ok(m) => rec.extend(metric_fields(&m)),
                Err(_) => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes every report of the experiment under `dir`.
pub fn write_reports(report: &ExperimentReport, spec: &ExperimentSpec, dir: &Path) -> Result<()> {
    for sub in ["paths", "plots", "curves"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let json = serde_json::to_string_pretty(spec).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(dir.join("spec.json"), json + "\n")?;
    write_csv(&report.series, dir.join("data.csv"))?;
    let names: Vec<String> = (0..report.series.n_strategies())
        .map(|i| report.series.names()[1 + i].clone())
        .collect();
    for run in &report.runs {
        let path = &run.result.path;
        path.save_csv(dir.join("paths").join(format!("{}.csv", run.label)), &names)?;
        fs::write(
            dir.join("plots").join(format!("{}.svg", run.label)),
            line_chart(&run.label, &path.dates, &path.values),
        )?;
        for (k, curve) in run.result.curves.iter().enumerate() {
            if let Some(c) = curve {
                c.save_csv(dir.join("curves").join(format!("{}_step{k}.csv", run.label)))?;
            }
        }
    }
    let results: Vec<WalkForwardResult> = report.runs.iter().map(|r| r.result.clone()).collect();
    write_step_reports(fs::File::create(dir.join("steps.csv"))?, &results)?;
    write_summary(fs::File::create(dir.join("summary.csv"))?, &report.runs)?;
    if spec.ablation.is_some() {
        write_ablation_summary(fs::File::create(dir.join("ablation_summary.csv"))?, &report.ablation)?;
        write_lag_summary(fs::File::create(dir.join("lag_summary.csv"))?, &report.lag_rows)?;
    }
    Ok(())
}
