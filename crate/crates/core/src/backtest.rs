//! Portfolio evaluation: decile stratification, ad-hoc and automatic
//! construction, walk-forward metrics against an equal-weight benchmark,
//! monotonicity and attention-heatmap reports, and the stepwise and
//! classical baselines.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::diffcore::Tape;
use crate::marketdata::{CvSplit, FactorPanel, ForwardReturns};
use crate::model::{self, ModelConfig, ModelError, ModelParams};
use crate::stockgraph::GraphSource;
use crate::training::{
    information_coefficient, DirectionalBuffers, SgdMomentum, TrainError, TrainSettings,
};

/// Trading days per year assumed when annualizing.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("cannot stratify {n} stocks into {groups} groups")]
    Stratification { n: usize, groups: usize },
    #[error("need at least 2 periods to compute metrics, got {0}")]
    TooFewPeriods(usize),
    #[error("no rebalance dates with forward returns at horizon {0}")]
    NoRebalances(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] crate::marketdata::DataError),
    #[error("empty training window for stepwise selection")]
    EmptyWindow,
}

/// Sort stocks by exposure descending and cut into `n_groups` contiguous
/// groups, the first `n % n_groups` groups one stock larger. Ties break by
/// stock id ascending. Returns the group index per stock.
pub fn stratify_decile(
    exposure: &[f64],
    stock_ids: &[String],
    n_groups: usize,
) -> Result<Vec<usize>, BacktestError> {
    let n = exposure.len();
    assert_eq!(n, stock_ids.len());
    if n < n_groups || n_groups == 0 {
        return Err(BacktestError::Stratification {
            n,
            groups: n_groups,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        exposure[b]
            .partial_cmp(&exposure[a])
            .unwrap()
            .then_with(|| stock_ids[a].cmp(&stock_ids[b]))
    });
    let base = n / n_groups;
    let rem = n % n_groups;
    let mut assignment = vec![0usize; n];
    let mut cursor = 0;
    for g in 0..n_groups {
        let size = base + usize::from(g < rem);
        for _ in 0..size {
            assignment[order[cursor]] = g;
            cursor += 1;
        }
    }
    Ok(assignment)
}

/// Equal weights on the extreme group: the top-exposure group for
/// direction +1, the bottom group for -1.
pub fn adhoc_portfolio(
    exposure: &[f64],
    stock_ids: &[String],
    direction: f64,
    n_groups: usize,
) -> Result<Vec<f64>, BacktestError> {
    let assignment = stratify_decile(exposure, stock_ids, n_groups)?;
    let target = if direction >= 0.0 { 0 } else { n_groups - 1 };
    let members: Vec<usize> = (0..exposure.len())
        .filter(|&i| assignment[i] == target)
        .collect();
    let w = 1.0 / members.len() as f64;
    let mut weights = vec![0.0; exposure.len()];
    for i in members {
        weights[i] = w;
    }
    Ok(weights)
}

/// One rebalance: weights over the rebalance date's universe.
#[derive(Debug, Clone)]
pub struct Rebalance {
    pub date_idx: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    /// Annualized active return.
    pub alpha: f64,
    /// Annualized information ratio; 0 when the active series is flat.
    pub ir: f64,
    /// Maximum drawdown of the cumulative active-wealth curve, in [0, 1].
    pub md: f64,
    /// Mean both-sided turnover across consecutive rebalances.
    pub tt: f64,
    /// Mean count of strictly positive holdings.
    pub n_avg: f64,
}

#[derive(Debug, Clone)]
pub struct BacktestReport {
    pub horizon: usize,
    /// Date index and weights actually evaluated, in order.
    pub rebalances: Vec<Rebalance>,
    /// Active return per holding period (portfolio minus equal-weight
    /// benchmark).
    pub active_returns: Vec<f64>,
    pub metrics: Metrics,
    pub warnings: Vec<String>,
}

/// Evaluate a weight series, rebalancing every `k` trading days, against
/// the equal-weight universe benchmark. Rebalance dates without forward
/// returns are skipped with a warning.
pub fn run_backtest(
    rebalances: &[Rebalance],
    panel: &FactorPanel,
    returns: &ForwardReturns,
    k: usize,
) -> Result<BacktestReport, BacktestError> {
    let mut kept = Vec::new();
    let mut active = Vec::new();
    let mut warnings = Vec::new();
    for rb in rebalances {
        let Some(r) = returns.get(rb.date_idx, k) else {
            warnings.push(format!(
                "rebalance on {} skipped: no {k}-day forward returns",
                panel.dates[rb.date_idx]
            ));
            continue;
        };
        debug_assert_eq!(rb.weights.len(), r.len());
        let portfolio: f64 = rb.weights.iter().zip(r).map(|(w, ri)| w * ri).sum();
        // Same multiply-then-sum path as the portfolio, so an equal-weight
        // portfolio is flat against its benchmark bitwise.
        let uniform = 1.0 / r.len() as f64;
        let benchmark: f64 = r.iter().map(|ri| uniform * ri).sum();
        active.push(portfolio - benchmark);
        kept.push(rb.clone());
    }
    if kept.is_empty() {
        return Err(BacktestError::NoRebalances(k));
    }
    let weight_history: Vec<(&[String], &[f64])> = kept
        .iter()
        .map(|rb| {
            (
                panel.day(rb.date_idx).stock_ids.as_slice(),
                rb.weights.as_slice(),
            )
        })
        .collect();
    let periods_per_year = TRADING_DAYS_PER_YEAR / k as f64;
    let metrics = compute_metrics(&active, &weight_history, periods_per_year)?;
    Ok(BacktestReport {
        horizon: k,
        rebalances: kept,
        active_returns: active,
        metrics,
        warnings,
    })
}

/// Metric definitions:
/// alpha = mean(active) * periods_per_year;
/// IR = mean/std * sqrt(periods_per_year), 0 when std < 1e-12 (std uses
/// denominator n);
/// MD = max peak-to-trough fractional decline of the cumulative
/// active-wealth curve (initial wealth 1.0 included);
/// TT = mean over consecutive rebalances of the both-sided sum of absolute
/// weight changes, aligned by stock id;
/// n_avg = mean count of strictly positive weights.
pub fn compute_metrics(
    active: &[f64],
    weight_history: &[(&[String], &[f64])],
    periods_per_year: f64,
) -> Result<Metrics, BacktestError> {
    if active.len() < 2 {
        return Err(BacktestError::TooFewPeriods(active.len()));
    }
    let n = active.len() as f64;
    let mean = active.iter().sum::<f64>() / n;
    let std = (active.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    let alpha = mean * periods_per_year;
    let ir = if std < 1e-12 {
        0.0
    } else {
        mean / std * periods_per_year.sqrt()
    };

    let mut wealth = 1.0f64;
    let mut peak = 1.0f64;
    let mut md = 0.0f64;
    for a in active {
        wealth *= 1.0 + a;
        peak = peak.max(wealth);
        md = md.max((peak - wealth) / peak);
    }

    let mut tt = 0.0;
    if weight_history.len() >= 2 {
        let mut total = 0.0;
        for pair in weight_history.windows(2) {
            let (old_ids, old_w) = pair[0];
            let (new_ids, new_w) = pair[1];
            let old: BTreeMap<&String, f64> =
                old_ids.iter().zip(old_w.iter().copied()).collect();
            let new: BTreeMap<&String, f64> =
                new_ids.iter().zip(new_w.iter().copied()).collect();
            let mut change = 0.0;
            for (id, w) in &new {
                change += (w - old.get(id).copied().unwrap_or(0.0)).abs();
            }
            for (id, w) in &old {
                if !new.contains_key(id) {
                    change += w.abs();
                }
            }
            total += change;
        }
        tt = total / (weight_history.len() - 1) as f64;
    }

    let n_avg = weight_history
        .iter()
        .map(|(_, w)| w.iter().filter(|&&v| v > 0.0).count() as f64)
        .sum::<f64>()
        / weight_history.len() as f64;

    Ok(Metrics {
        alpha,
        ir,
        md,
        tt,
        n_avg,
    })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = ranks(x);
    let ry = ranks(y);
    information_coefficient(&rx, &ry).value
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Per-decile mean forward returns, ordered from lowest (rank 1) to
/// highest direction-adjusted exposure (rank n_groups), plus the Spearman
/// correlation of rank against mean return.
#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub n_groups: usize,
    pub deep_mean_returns: Vec<f64>,
    pub estimate_mean_returns: Vec<f64>,
    pub deep_spearman: f64,
    pub estimate_spearman: f64,
}

/// Accumulates per-decile returns over a set of evaluation dates for one
/// exposure series (already direction-adjusted).
pub struct DecileAccumulator {
    n_groups: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl DecileAccumulator {
    pub fn new(n_groups: usize) -> Self {
        DecileAccumulator {
            n_groups,
            sums: vec![0.0; n_groups],
            counts: vec![0; n_groups],
        }
    }

    /// Group 0 of the stratification holds the largest exposure; the
    /// report orders deciles ascending, so group g maps to rank index
    /// n_groups - 1 - g.
    pub fn add_date(
        &mut self,
        exposure: &[f64],
        stock_ids: &[String],
        returns: &[f64],
    ) -> Result<(), BacktestError> {
        let assignment = stratify_decile(exposure, stock_ids, self.n_groups)?;
        for (i, &g) in assignment.iter().enumerate() {
            let rank_idx = self.n_groups - 1 - g;
            self.sums[rank_idx] += returns[i];
            self.counts[rank_idx] += 1;
        }
        Ok(())
    }

    pub fn mean_returns(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn spearman_vs_rank(&self) -> f64 {
        let means = self.mean_returns();
        let rank: Vec<f64> = (1..=self.n_groups).map(|r| r as f64).collect();
        spearman(&rank, &means)
    }
}

/// A trained artifact: parameters plus the buffer state they shipped with.
pub struct TrainedModel<'a> {
    pub params: &'a ModelParams,
    pub buffers: &'a DirectionalBuffers,
    pub config: &'a ModelConfig,
}

/// Per-date model outputs needed by evaluation.
pub struct EvalOutputs {
    pub deep: BTreeMap<usize, Vec<f64>>,
    pub estimate: BTreeMap<usize, Vec<f64>>,
    pub attention: BTreeMap<usize, Vec<f64>>,
    pub auto_weights: BTreeMap<usize, Vec<f64>>,
    pub selection_mask: Vec<f64>,
}

/// Frozen forward pass at one date.
pub fn evaluate_date(
    model: &TrainedModel,
    panel: &FactorPanel,
    graphs: &GraphSource,
    t: usize,
) -> Result<EvalOutputs, BacktestError> {
    let day = panel.day(t);
    let industry = graphs.industry(panel, t)?;
    let universe = graphs.universe(panel, t)?;
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, false);
    let dirs = model.buffers.directions();
    let out = model::forward_full(
        &mut tape,
        &vars,
        model.config,
        &day.factors,
        day.n_stocks(),
        &industry,
        &universe,
        &dirs,
    )?;
    let mut deep = BTreeMap::new();
    let mut estimate = BTreeMap::new();
    let mut attention = BTreeMap::new();
    let mut auto_weights = BTreeMap::new();
    for &k in &model.config.horizons {
        deep.insert(k, tape.value(out.core.deep[&k]).to_vec());
        estimate.insert(k, tape.value(out.estimate[&k]).to_vec());
        attention.insert(k, tape.value(out.attention[&k]).to_vec());
        auto_weights.insert(k, tape.value(out.weights[&k].weights).to_vec());
    }
    Ok(EvalOutputs {
        deep,
        estimate,
        attention,
        auto_weights,
        selection_mask: out.core.mask,
    })
}

/// Rebalance dates: every k-th test date.
pub fn rebalance_dates(test_dates: &[usize], k: usize) -> Vec<usize> {
    test_dates.iter().copied().step_by(k.max(1)).collect()
}

/// Decile mean-return monotonicity of the trained deep factor and its
/// attention estimate at horizon k over the test window.
pub fn monotonicity_report(
    model: &TrainedModel,
    panel: &FactorPanel,
    graphs: &GraphSource,
    returns: &ForwardReturns,
    test_dates: &[usize],
    k: usize,
    n_groups: usize,
) -> Result<MonotonicityReport, BacktestError> {
    let d = model.buffers.deep_direction(k);
    let mut deep_acc = DecileAccumulator::new(n_groups);
    let mut est_acc = DecileAccumulator::new(n_groups);
    let mut any = false;
    for &t in rebalance_dates(test_dates, k).iter() {
        let Some(r) = returns.get(t, k) else { continue };
        let out = evaluate_date(model, panel, graphs, t)?;
        let ids = &panel.day(t).stock_ids;
        let deep_adj: Vec<f64> = out.deep[&k].iter().map(|v| d * v).collect();
        let est_adj: Vec<f64> = out.estimate[&k].iter().map(|v| d * v).collect();
        deep_acc.add_date(&deep_adj, ids, r)?;
        est_acc.add_date(&est_adj, ids, r)?;
        any = true;
    }
    if !any {
        return Err(BacktestError::NoRebalances(k));
    }
    Ok(MonotonicityReport {
        n_groups,
        deep_mean_returns: deep_acc.mean_returns(),
        estimate_mean_returns: est_acc.mean_returns(),
        deep_spearman: deep_acc.spearman_vs_rank(),
        estimate_spearman: est_acc.spearman_vs_rank(),
    })
}

/// Signed group-level attention heatmap: rows are time buckets, columns
/// factor groups, values the mean over dates and group members of
/// a_bar_j * d_j.
#[derive(Debug, Clone)]
pub struct AttentionHeatmap {
    pub buckets: Vec<String>,
    pub groups: Vec<String>,
    /// Row-major buckets x groups.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapBucketing {
    PerDate,
    SemiAnnual,
}

pub fn attention_heatmap(
    model: &TrainedModel,
    panel: &FactorPanel,
    graphs: &GraphSource,
    eval_dates: &[usize],
    k: usize,
    bucketing: HeatmapBucketing,
) -> Result<AttentionHeatmap, BacktestError> {
    let groups: Vec<String> = panel
        .factor_names
        .iter()
        .map(|f| f.group.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let dirs = model.buffers.directions();

    // bucket label -> per-group (sum, count)
    let mut acc: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    for &t in eval_dates {
        let date = panel.dates[t];
        let bucket = match bucketing {
            HeatmapBucketing::PerDate => date.format("%Y-%m-%d").to_string(),
            HeatmapBucketing::SemiAnnual => {
                use chrono::Datelike;
                format!("{}H{}", date.year(), if date.month() <= 6 { 1 } else { 2 })
            }
        };
        let out = evaluate_date(model, panel, graphs, t)?;
        let a_bar = &out.attention[&k];
        let row = acc
            .entry(bucket)
            .or_insert_with(|| vec![(0.0, 0usize); groups.len()]);
        for (j, fname) in panel.factor_names.iter().enumerate() {
            let gi = groups.iter().position(|g| *g == fname.group).unwrap();
            row[gi].0 += a_bar[j] * dirs.factor[j];
            row[gi].1 += 1;
        }
    }

    let buckets: Vec<String> = acc.keys().cloned().collect();
    let mut values = Vec::with_capacity(buckets.len() * groups.len());
    for bucket in &buckets {
        for (sum, count) in &acc[bucket] {
            values.push(if *count == 0 { 0.0 } else { sum / *count as f64 });
        }
    }
    Ok(AttentionHeatmap {
        buckets,
        groups,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepwiseCriterion {
    Best,
    Avg,
    T20,
}

/// Stepwise factor selection on the training window by mean-|IC| rank.
///
/// best: union over horizons of each horizon's top-q factors;
/// avg: top-q by |mean IC| averaged across horizons;
/// t20: top-q at k = 20 only (one-month horizon).
pub fn stepwise_select(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    train_dates: &[usize],
    criterion: StepwiseCriterion,
    horizons: &[usize],
    q: Option<usize>,
) -> Result<Vec<usize>, BacktestError> {
    let m = panel.n_factors();
    let q = q.unwrap_or(m.div_ceil(3)).min(m).max(1);
    // mean IC per (factor, horizon) over the window.
    let mut mean_ics = vec![vec![0.0f64; horizons.len()]; m];
    let mut counts = vec![0usize; horizons.len()];
    for &t in train_dates {
        for (hi, &k) in horizons.iter().enumerate() {
            let Some(r) = returns.get(t, k) else { continue };
            counts[hi] += 1;
            for j in 0..m {
                let col = panel.day(t).factor_column(j, m);
                mean_ics[j][hi] += information_coefficient(&col, r).value;
            }
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(BacktestError::EmptyWindow);
    }
    for j in 0..m {
        for (hi, &c) in counts.iter().enumerate() {
            if c > 0 {
                mean_ics[j][hi] /= c as f64;
            }
        }
    }

    let top_q = |scores: &[f64]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .abs()
                .partial_cmp(&scores[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.truncate(q);
        idx
    };

    let mut selected: Vec<usize> = match criterion {
        StepwiseCriterion::Best => {
            let mut set = std::collections::BTreeSet::new();
            for hi in 0..horizons.len() {
                let scores: Vec<f64> = (0..m).map(|j| mean_ics[j][hi]).collect();
                set.extend(top_q(&scores));
            }
            set.into_iter().collect()
        }
        StepwiseCriterion::Avg => {
            let scores: Vec<f64> = (0..m)
                .map(|j| mean_ics[j].iter().map(|v| v.abs()).sum::<f64>() / horizons.len() as f64)
                .collect();
            top_q(&scores)
        }
        StepwiseCriterion::T20 => {
            let hi = horizons
                .iter()
                .position(|&k| k == 20)
                .unwrap_or(horizons.len() - 1);
            let scores: Vec<f64> = (0..m).map(|j| mean_ics[j][hi]).collect();
            top_q(&scores)
        }
    };
    selected.sort_unstable();
    Ok(selected)
}

/// Composite stepwise score at one date: the mean over the selected
/// factors of the direction-signed cross-sectional z-score.
pub fn stepwise_score(
    panel: &FactorPanel,
    t: usize,
    selected: &[usize],
    directions: &[f64],
) -> Vec<f64> {
    let m = panel.n_factors();
    let day = panel.day(t);
    let n = day.n_stocks();
    let mut score = vec![0.0; n];
    for (si, &j) in selected.iter().enumerate() {
        let col = day.factor_column(j, m);
        let mean = col.iter().sum::<f64>() / n as f64;
        let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        if std < 1e-12 {
            continue;
        }
        for i in 0..n {
            score[i] += directions[si] * (col[i] - mean) / std;
        }
    }
    score.iter_mut().for_each(|s| *s /= selected.len() as f64);
    score
}

/// IC-sign directions of chosen factors on the training window at the
/// evaluation horizon.
pub fn window_ic_directions(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    train_dates: &[usize],
    factors: &[usize],
    k: usize,
) -> Vec<f64> {
    let m = panel.n_factors();
    factors
        .iter()
        .map(|&j| {
            let mut s = 0.0;
            for &t in train_dates {
                if let Some(r) = returns.get(t, k) {
                    let col = panel.day(t).factor_column(j, m);
                    s += information_coefficient(&col, r).value;
                }
            }
            if s >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Linear,
    EqualWeight,
    Mlp,
}

/// Pooled cross-sectional OLS of returns on factors plus intercept,
/// solved by Gaussian elimination on the normal equations.
pub fn fit_pooled_ols(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    train_dates: &[usize],
    k: usize,
) -> Option<Vec<f64>> {
    let m = panel.n_factors();
    let dim = m + 1;
    let mut xtx = vec![0.0f64; dim * dim];
    let mut xty = vec![0.0f64; dim];
    let mut rows = 0usize;
    for &t in train_dates {
        let Some(r) = returns.get(t, k) else { continue };
        let day = panel.day(t);
        for i in 0..day.n_stocks() {
            let mut x = vec![1.0f64];
            x.extend_from_slice(&day.factors[i * m..(i + 1) * m]);
            for a in 0..dim {
                for b in 0..dim {
                    xtx[a * dim + b] += x[a] * x[b];
                }
                xty[a] += x[a] * r[i];
            }
            rows += 1;
        }
    }
    if rows <= dim {
        return None;
    }
    solve_linear(&mut xtx, &mut xty, dim)
}

/// In-place Gaussian elimination with partial pivoting; returns None on a
/// singular system.
fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    Some(x)
}

/// Linear-baseline score: the fitted pooled OLS applied to one date.
pub fn linear_baseline_scores(beta: &[f64], panel: &FactorPanel, t: usize) -> Vec<f64> {
    let m = panel.n_factors();
    let day = panel.day(t);
    (0..day.n_stocks())
        .map(|i| {
            beta[0]
                + (0..m)
                    .map(|j| beta[1 + j] * day.factors[i * m + j])
                    .sum::<f64>()
        })
        .collect()
}

/// MLP baseline: context encoder plus a single linear head for the
/// evaluation horizon, no graphs and no gating, trained on mean-squared
/// error against forward returns.
pub struct MlpBaseline {
    pub params: ModelParams,
    pub config: ModelConfig,
}

pub fn train_mlp_baseline(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    train_dates: &[usize],
    base_cfg: &ModelConfig,
    settings: &TrainSettings,
    k: usize,
) -> Result<MlpBaseline, BacktestError> {
    let cfg = ModelConfig {
        horizons: vec![k],
        ..base_cfg.clone()
    };
    cfg.validate()?;
    let mut params = ModelParams::init(&cfg, settings.seed)?;
    let mut optimizer = SgdMomentum::new(&params, settings);
    let usable: Vec<usize> = train_dates
        .iter()
        .copied()
        .filter(|&t| returns.has(t, k))
        .collect();
    if usable.is_empty() {
        return Err(BacktestError::EmptyWindow);
    }
    for _epoch in 0..settings.max_epochs {
        for chunk in usable.chunks(settings.batch_dates.max(1)) {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let mut losses = Vec::new();
            for &t in chunk {
                let pred = mlp_forward(&mut tape, &vars, &cfg, panel, t, k)?;
                let r = returns.get(t, k).expect("usable date");
                let target = tape.input(r.to_vec(), &[r.len()]);
                let diff = tape.sub(pred, target).map_err(ModelError::from)?;
                let sq = tape.mul(diff, diff).map_err(ModelError::from)?;
                losses.push(tape.mean_all(sq));
            }
            let stacked = tape.stack_scalars(&losses);
            let loss = tape.mean_all(stacked);
            tape.backward(loss).map_err(ModelError::from)?;
            optimizer.step(&mut params, &tape, &vars);
        }
    }
    Ok(MlpBaseline {
        params,
        config: cfg,
    })
}

fn mlp_forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, crate::diffcore::Var>,
    cfg: &ModelConfig,
    panel: &FactorPanel,
    t: usize,
    k: usize,
) -> Result<crate::diffcore::Var, BacktestError> {
    let day = panel.day(t);
    let raw = tape.input(day.factors.clone(), &[day.n_stocks(), cfg.n_factors]);
    let ctx = model::encode_context(tape, vars, cfg, raw)?;
    // The head expects the three-context concatenation width.
    let cat = tape.concat_cols(&[ctx, ctx, ctx]).map_err(ModelError::from)?;
    let y = tape
        .linear(
            cat,
            vars[&format!("head.k{k}.w")],
            Some(vars[&format!("head.k{k}.b")]),
        )
        .map_err(ModelError::from)?;
    Ok(tape
        .reshape(y, &[day.n_stocks()])
        .map_err(ModelError::from)?)
}

pub fn mlp_baseline_scores(
    baseline: &MlpBaseline,
    panel: &FactorPanel,
    t: usize,
    k: usize,
) -> Result<Vec<f64>, BacktestError> {
    let mut tape = Tape::new();
    let vars = baseline.params.register(&mut tape, false);
    let pred = mlp_forward(&mut tape, &vars, &baseline.config, panel, t, k)?;
    Ok(tape.value(pred).to_vec())
}

/// Run a baseline over a split's test window at horizon k.
pub fn baseline_models(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    split: &CvSplit,
    kind: BaselineKind,
    n_groups: usize,
    base_cfg: &ModelConfig,
    settings: &TrainSettings,
    k: usize,
) -> Result<BacktestReport, BacktestError> {
    let rdates = rebalance_dates(&split.test_dates, k);
    let mut rebalances = Vec::new();
    match kind {
        BaselineKind::EqualWeight => {
            for &t in &rdates {
                let n = panel.day(t).n_stocks();
                rebalances.push(Rebalance {
                    date_idx: t,
                    weights: vec![1.0 / n as f64; n],
                });
            }
        }
        BaselineKind::Linear => {
            let beta = fit_pooled_ols(panel, returns, &split.train_dates, k)
                .ok_or(BacktestError::EmptyWindow)?;
            for &t in &rdates {
                let scores = linear_baseline_scores(&beta, panel, t);
                let w = adhoc_portfolio(&scores, &panel.day(t).stock_ids, 1.0, n_groups)?;
                rebalances.push(Rebalance {
                    date_idx: t,
                    weights: w,
                });
            }
        }
        BaselineKind::Mlp => {
            let mlp =
                train_mlp_baseline(panel, returns, &split.train_dates, base_cfg, settings, k)?;
            for &t in &rdates {
                let scores = mlp_baseline_scores(&mlp, panel, t, k)?;
                let w = adhoc_portfolio(&scores, &panel.day(t).stock_ids, 1.0, n_groups)?;
                rebalances.push(Rebalance {
                    date_idx: t,
                    weights: w,
                });
            }
        }
    }
    run_backtest(&rebalances, panel, returns, k)
}
