//! The composite training objective and its loop: portfolio return and
//! weight-bound losses, directional stability, factor return via
//! cross-sectional regression, the attention-estimate penalty, directional
//! buffers, and SGD-with-momentum over date batches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};
use crate::marketdata::{CvSplit, FactorPanel, ForwardReturns};
use crate::model::{
    self, Directions, ModelConfig, ModelError, ModelParams,
};
use crate::stockgraph::GraphSource;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] crate::marketdata::DataError),
    #[error("loss term '{term}' became NaN at epoch {epoch}")]
    NanLoss { term: &'static str, epoch: usize },
    #[error("no usable training dates (forward returns missing everywhere)")]
    NoTrainingDates,
}

/// Pearson correlation with a degeneracy flag instead of a panic: dead
/// factors must not crash training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcValue {
    pub value: f64,
    pub degenerate: bool,
}

/// Cross-sectional information coefficient: the Pearson correlation of
/// exposures and subsequent returns. Standard deviations below 1e-12 on
/// either side yield 0 with the degenerate flag set.
pub fn information_coefficient(x: &[f64], y: &[f64]) -> IcValue {
    assert_eq!(x.len(), y.len(), "IC inputs must have equal length");
    let n = x.len();
    if n < 2 {
        return IcValue {
            value: 0.0,
            degenerate: true,
        };
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let sx = (sxx / nf).sqrt();
    let sy = (syy / nf).sqrt();
    if sx < 1e-12 || sy < 1e-12 {
        return IcValue {
            value: 0.0,
            degenerate: true,
        };
    }
    // Single square root keeps perfectly correlated inputs at exactly 1.
    IcValue {
        value: sxy / (sxx * syy).sqrt(),
        degenerate: false,
    }
}

/// Differentiable IC of a tape vector against constant returns. Returns a
/// constant zero node when either side is degenerate.
pub fn ic_on_tape(tape: &mut Tape, f: Var, returns: &[f64]) -> Result<(Var, bool), DiffError> {
    let f_vals = tape.value(f).to_vec();
    let plain = information_coefficient(&f_vals, returns);
    if plain.degenerate {
        return Ok((tape.scalar_input(0.0), true));
    }
    let n = returns.len() as f64;
    let r = tape.input(returns.to_vec(), &[returns.len()]);
    let cf = tape.center(f);
    let cr = tape.center(r);
    let sxy = tape.dot(cf, cr)?;
    let sxx = tape.dot(cf, cf)?;
    let syy = tape.dot(cr, cr)?;
    let sx = tape.sqrt(sxx);
    let sy = tape.sqrt(syy);
    let denom = tape.mul(sx, sy)?;
    let ic = tape.div(sxy, denom)?;
    debug_assert!((tape.scalar(ic) - plain.value).abs() < 1e-9 * n.max(1.0));
    Ok((ic, false))
}

/// Closed-form cross-sectional regression slope psi = cov(f, r) / var(f),
/// differentiable through f. Degenerate variance gives a constant zero.
pub fn cross_sectional_fit(
    tape: &mut Tape,
    f: Var,
    returns: &[f64],
) -> Result<(Var, bool), DiffError> {
    let f_vals = tape.value(f).to_vec();
    let n = f_vals.len() as f64;
    let mf = f_vals.iter().sum::<f64>() / n;
    let var = f_vals.iter().map(|v| (v - mf) * (v - mf)).sum::<f64>() / n;
    if var < 1e-12 {
        return Ok((tape.scalar_input(0.0), true));
    }
    let r = tape.input(returns.to_vec(), &[returns.len()]);
    let cf = tape.center(f);
    let cr = tape.center(r);
    let num = tape.dot(cf, cr)?;
    let den = tape.dot(cf, cf)?;
    let psi = tape.div(num, den)?;
    Ok((psi, false))
}

/// Iterative local-optimizer route to the same slope: gradient descent on
/// the MSE of `r ~ psi * f + intercept`. `learning_rate = None` picks a
/// stable step from the normal matrix. Converges to the closed form.
pub fn cross_sectional_fit_iterative(
    f: &[f64],
    returns: &[f64],
    learning_rate: Option<f64>,
    n_iter: usize,
) -> f64 {
    assert_eq!(f.len(), returns.len());
    let n = f.len() as f64;
    let m2 = f.iter().map(|v| v * v).sum::<f64>() / n;
    let m1 = f.iter().sum::<f64>() / n;
    // Largest eigenvalue of the 2x2 normal matrix [[m2, m1], [m1, 1]].
    let tr = m2 + 1.0;
    let det = m2 - m1 * m1;
    let lam_max = 0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt());
    let lr = learning_rate.unwrap_or(0.9 / lam_max.max(1e-12));
    let (mut psi, mut intercept) = (0.0f64, 0.0f64);
    for _ in 0..n_iter {
        let mut g_psi = 0.0;
        let mut g_b = 0.0;
        for (fi, ri) in f.iter().zip(returns) {
            let err = psi * fi + intercept - ri;
            g_psi += err * fi;
            g_b += err;
        }
        psi -= lr * g_psi / n;
        intercept -= lr * g_b / n;
    }
    psi
}

/// Per-factor and per-horizon signed IC accumulators. Fresh buffers start
/// at epsilon = 1e-6, so an untouched direction reads +1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DirectionalBuffers {
    pub factor: Vec<f64>,
    pub deep: BTreeMap<usize, f64>,
}

pub const BUFFER_EPSILON: f64 = 1e-6;

impl DirectionalBuffers {
    pub fn new(n_factors: usize, horizons: &[usize]) -> Self {
        DirectionalBuffers {
            factor: vec![BUFFER_EPSILON; n_factors],
            deep: horizons.iter().map(|&k| (k, BUFFER_EPSILON)).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.factor.iter_mut().for_each(|b| *b = BUFFER_EPSILON);
        self.deep.values_mut().for_each(|b| *b = BUFFER_EPSILON);
    }

    pub fn factor_direction(&self, i: usize) -> f64 {
        if self.factor[i] >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn deep_direction(&self, k: usize) -> f64 {
        if self.deep[&k] >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn directions(&self) -> Directions {
        Directions {
            factor: (0..self.factor.len())
                .map(|i| self.factor_direction(i))
                .collect(),
            deep: self
                .deep
                .keys()
                .map(|&k| (k, self.deep_direction(k)))
                .collect(),
        }
    }
}

/// Accumulate one batch of IC sums into the buffers.
///
/// `deep_factors[k]` are per-date deep-factor vectors for horizon k;
/// `raw_factors` are the per-date n*m exposure matrices. Updates happen
/// outside the differentiation tape.
pub fn update_directional_buffers(
    buffers: &mut DirectionalBuffers,
    batch_dates: &[usize],
    deep_factors: &BTreeMap<usize, Vec<Vec<f64>>>,
    panel: &FactorPanel,
    returns: &ForwardReturns,
) {
    let m = panel.n_factors();
    for (&k, per_date) in deep_factors {
        for (bi, &t) in batch_dates.iter().enumerate() {
            let Some(r) = returns.get(t, k) else { continue };
            let entry = buffers.deep.get_mut(&k).expect("horizon in buffers");
            *entry += information_coefficient(r, &per_date[bi]).value;
            for j in 0..m {
                let col = panel.day(t).factor_column(j, m);
                buffers.factor[j] += information_coefficient(r, &col).value;
            }
        }
    }
}

/// All scalar loss terms of one batch, on tape.
pub struct LossTerms {
    pub l_ret: Var,
    pub l_up: Var,
    pub l_s: Var,
    pub l_f: Var,
    pub l_e: Var,
    pub total: Var,
}

/// The loss values of one epoch (batch means), mirrored into the log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ret: f64,
    pub l_up: f64,
    pub l_s: f64,
    pub l_f: f64,
    pub l_e: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub lambda_e: f64,
    /// Upper weight bound theta for the hinge penalty.
    pub theta: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Local (cross-sectional) optimizer learning rate; 0 = auto.
    pub local_learning_rate: f64,
    /// Iterations of the local optimizer when used in iterative mode;
    /// 0 selects the closed form.
    pub local_iters: usize,
    pub batch_dates: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lambda_s: 0.1,
            lambda_f: 0.1,
            lambda_e: 0.1,
            theta: 0.10,
            learning_rate: 1e-3,
            momentum: 0.9,
            grad_clip: 0.0,
            local_learning_rate: 0.0,
            local_iters: 0,
            batch_dates: 8,
            max_epochs: 50,
            patience: 8,
            seed: 42,
        }
    }
}

/// SGD with momentum over the named parameter tensors.
pub struct SgdMomentum {
    velocity: BTreeMap<String, Vec<f64>>,
    learning_rate: f64,
    momentum: f64,
    grad_clip: f64,
}

impl SgdMomentum {
    pub fn new(params: &ModelParams, settings: &TrainSettings) -> Self {
        SgdMomentum {
            velocity: params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.values.len()]))
                .collect(),
            learning_rate: settings.learning_rate,
            momentum: settings.momentum,
            grad_clip: settings.grad_clip,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
    ) {
        let mut scale = 1.0;
        if self.grad_clip > 0.0 {
            let norm_sq: f64 = vars
                .values()
                .map(|&v| tape.grad(v).iter().map(|g| g * g).sum::<f64>())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > self.grad_clip {
                scale = self.grad_clip / norm;
            }
        }
        for (name, tensor) in params.tensors.iter_mut() {
            let var = vars[name];
            let grad = tape.grad(var);
            let vel = self.velocity.get_mut(name).expect("velocity slot");
            for ((v, g), p) in vel.iter_mut().zip(grad).zip(tensor.values.iter_mut()) {
                *v = self.momentum * *v + scale * g;
                *p -= self.learning_rate * *v;
            }
        }
    }
}

/// l_ret = -mean over (t, k) of w . r ; l_up = mean over (t, k) of the
/// hinge sum of weights above theta.
pub fn portfolio_loss(
    tape: &mut Tape,
    weights: &[(Var, Vec<f64>)],
    theta: f64,
) -> Result<(Var, Var), DiffError> {
    assert!(!weights.is_empty());
    let mut rets = Vec::with_capacity(weights.len());
    let mut hinges = Vec::with_capacity(weights.len());
    for (w, r) in weights {
        let r_node = tape.input(r.clone(), &[r.len()]);
        rets.push(tape.dot(*w, r_node)?);
        hinges.push(tape.hinge_sum(*w, theta));
    }
    let ret_vec = tape.stack_scalars(&rets);
    let mean_ret = tape.mean_all(ret_vec);
    let l_ret = tape.scale(mean_ret, -1.0);
    let hinge_vec = tape.stack_scalars(&hinges);
    let l_up = tape.mean_all(hinge_vec);
    Ok((l_ret, l_up))
}

/// Directional stability loss: minus the mean over horizons of
/// d_k * ICIR_k, where ICIR is the mean of the window's per-date ICs over
/// their standard deviation (denominator n). Horizons with fewer than two
/// dates or an IC spread under 1e-12 contribute zero.
pub fn stability_loss(
    tape: &mut Tape,
    ics_per_horizon: &BTreeMap<usize, Vec<Var>>,
    buffers: &DirectionalBuffers,
) -> Result<Var, DiffError> {
    let mut contributions = Vec::new();
    for (&k, ics) in ics_per_horizon {
        if ics.len() < 2 {
            contributions.push(tape.scalar_input(0.0));
            continue;
        }
        let vals: Vec<f64> = ics.iter().map(|&v| tape.scalar(v)).collect();
        let nf = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / nf;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf).sqrt();
        if std < 1e-12 {
            contributions.push(tape.scalar_input(0.0));
            continue;
        }
        let vec = tape.stack_scalars(ics);
        let mean_node = tape.mean_all(vec);
        let centered = tape.center(vec);
        let ss = tape.dot(centered, centered)?;
        let var = tape.scale(ss, 1.0 / nf);
        let std_node = tape.sqrt(var);
        let icir = tape.div(mean_node, std_node)?;
        contributions.push(tape.scale(icir, buffers.deep_direction(k)));
    }
    let stacked = tape.stack_scalars(&contributions);
    let mean = tape.mean_all(stacked);
    Ok(tape.scale(mean, -1.0))
}

/// l_f = -mean over (t, k) of psi * d_k.
pub fn factor_return_loss(
    tape: &mut Tape,
    psis: &[(usize, Var)],
    buffers: &DirectionalBuffers,
) -> Result<Var, DiffError> {
    assert!(!psis.is_empty());
    let signed: Vec<Var> = psis
        .iter()
        .map(|&(k, psi)| tape.scale(psi, buffers.deep_direction(k)))
        .collect();
    let stacked = tape.stack_scalars(&signed);
    let mean = tape.mean_all(stacked);
    Ok(tape.scale(mean, -1.0))
}

/// l_e = mean over (t, k) of the Euclidean norm of f - f_hat.
pub fn attention_estimate_loss(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
) -> Result<Var, DiffError> {
    assert!(!pairs.is_empty());
    let mut norms = Vec::with_capacity(pairs.len());
    for &(f, f_hat) in pairs {
        let diff = tape.sub(f, f_hat)?;
        norms.push(tape.l2_norm(diff));
    }
    let stacked = tape.stack_scalars(&norms);
    Ok(tape.mean_all(stacked))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ret: f64,
    pub l_up: f64,
    pub l_s: f64,
    pub l_f: f64,
    pub l_e: f64,
    pub total: f64,
    pub val_l_ret: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub buffers: DirectionalBuffers,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

struct BatchLoss {
    breakdown: LossBreakdown,
}

struct DateForward {
    t: usize,
    selected: Var,
    deep: BTreeMap<usize, Var>,
    weights: BTreeMap<usize, Var>,
}

/// Forward a batch of dates: core pipeline plus portfolio weights under
/// the given directions.
fn forward_batch(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    panel: &FactorPanel,
    graphs: &GraphSource,
    model_cfg: &ModelConfig,
    batch_dates: &[usize],
    dirs: &Directions,
) -> Result<Vec<DateForward>, TrainError> {
    let mut forwards = Vec::with_capacity(batch_dates.len());
    for &t in batch_dates {
        let day = panel.day(t);
        let industry = graphs.industry(panel, t)?;
        let universe = graphs.universe(panel, t)?;
        let core = model::forward_core(
            tape,
            vars,
            model_cfg,
            &day.factors,
            day.n_stocks(),
            &industry,
            &universe,
        )?;
        let mut weights = BTreeMap::new();
        for &k in &model_cfg.horizons {
            let port = model::construct_portfolio(
                tape,
                vars,
                model_cfg,
                core.context,
                core.deep[&k],
                k,
                dirs.deep[&k],
            )?;
            weights.insert(k, port.weights);
        }
        forwards.push(DateForward {
            t,
            selected: core.selected,
            deep: core.deep,
            weights,
        });
    }
    Ok(forwards)
}

/// Attach the four loss terms to an already-forwarded batch. The attention
/// estimates use `dirs`; the stability and factor-return signs come from
/// `buffers`. Returns None when no (date, horizon) pair has returns.
#[allow(clippy::too_many_arguments)]
fn assemble_losses(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    forwards: &[DateForward],
    returns: &ForwardReturns,
    model_cfg: &ModelConfig,
    settings: &TrainSettings,
    dirs: &Directions,
    buffers: &DirectionalBuffers,
) -> Result<Option<LossTerms>, TrainError> {
    let mut weighted: Vec<(Var, Vec<f64>)> = Vec::new();
    let mut psis: Vec<(usize, Var)> = Vec::new();
    let mut ics: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    let mut estimate_pairs: Vec<(Var, Var)> = Vec::new();
    for fwd in forwards {
        for &k in &model_cfg.horizons {
            let (_a_bar, f_hat) = model::directional_attention_estimate(
                tape,
                vars,
                model_cfg,
                fwd.selected,
                k,
                &dirs.factor,
            )?;
            estimate_pairs.push((fwd.deep[&k], f_hat));
            if let Some(r) = returns.get(fwd.t, k) {
                weighted.push((fwd.weights[&k], r.to_vec()));
                let (psi, _) = cross_sectional_fit(tape, fwd.deep[&k], r)?;
                psis.push((k, psi));
                let (ic, degenerate) = ic_on_tape(tape, fwd.deep[&k], r)?;
                if !degenerate {
                    ics.entry(k).or_default().push(ic);
                }
            }
        }
    }
    if weighted.is_empty() {
        return Ok(None);
    }

    let (l_ret, l_up) = portfolio_loss(tape, &weighted, settings.theta)?;
    let l_s = stability_loss(tape, &ics, buffers)?;
    let l_f = factor_return_loss(tape, &psis, buffers)?;
    let l_e = attention_estimate_loss(tape, &estimate_pairs)?;

    let l_p = tape.add(l_ret, l_up)?;
    let s_term = tape.scale(l_s, settings.lambda_s);
    let f_term = tape.scale(l_f, settings.lambda_f);
    let e_term = tape.scale(l_e, settings.lambda_e);
    let sf = tape.add(s_term, f_term)?;
    let sfe = tape.add(sf, e_term)?;
    let total = tape.add(l_p, sfe)?;
    Ok(Some(LossTerms {
        l_ret,
        l_up,
        l_s,
        l_f,
        l_e,
        total,
    }))
}

/// Composite batch loss with buffers and directions held fixed — the full
/// objective as a differentiable function of the parameters alone.
pub fn composite_loss(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    panel: &FactorPanel,
    returns: &ForwardReturns,
    graphs: &GraphSource,
    buffers: &DirectionalBuffers,
    model_cfg: &ModelConfig,
    settings: &TrainSettings,
    batch_dates: &[usize],
) -> Result<Option<LossTerms>, TrainError> {
    let dirs = buffers.directions();
    let forwards = forward_batch(tape, vars, panel, graphs, model_cfg, batch_dates, &dirs)?;
    assemble_losses(
        tape, vars, &forwards, returns, model_cfg, settings, &dirs, buffers,
    )
}

/// Forward one batch, update buffers per the batch protocol (weights use
/// the pre-update directions, interpretation losses the refreshed ones),
/// assemble the composite loss, and optionally step the optimizer.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    graphs: &GraphSource,
    params: &mut ModelParams,
    buffers: &mut DirectionalBuffers,
    optimizer: Option<&mut SgdMomentum>,
    model_cfg: &ModelConfig,
    settings: &TrainSettings,
    batch_dates: &[usize],
    epoch: usize,
) -> Result<Option<BatchLoss>, TrainError> {
    let train = optimizer.is_some();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, train);
    let dirs_pre = buffers.directions();
    let forwards = forward_batch(
        &mut tape, &vars, panel, graphs, model_cfg, batch_dates, &dirs_pre,
    )?;

    // Detached buffer update from the realized deep-factor values.
    let mut deep_values: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for &k in &model_cfg.horizons {
        deep_values.insert(
            k,
            forwards
                .iter()
                .map(|f| tape.value(f.deep[&k]).to_vec())
                .collect(),
        );
    }
    update_directional_buffers(buffers, batch_dates, &deep_values, panel, returns);
    let dirs_post = buffers.directions();

    let Some(terms) = assemble_losses(
        &mut tape, &vars, &forwards, returns, model_cfg, settings, &dirs_post, buffers,
    )?
    else {
        return Ok(None);
    };

    let breakdown = LossBreakdown {
        l_ret: tape.scalar(terms.l_ret),
        l_up: tape.scalar(terms.l_up),
        l_s: tape.scalar(terms.l_s),
        l_f: tape.scalar(terms.l_f),
        l_e: tape.scalar(terms.l_e),
        total: tape.scalar(terms.total),
    };
    for (name, value) in [
        ("l_ret", breakdown.l_ret),
        ("l_up", breakdown.l_up),
        ("l_s", breakdown.l_s),
        ("l_f", breakdown.l_f),
        ("l_e", breakdown.l_e),
    ] {
        if value.is_nan() {
            return Err(TrainError::NanLoss { term: name, epoch });
        }
    }

    if let Some(opt) = optimizer {
        tape.backward(terms.total)?;
        opt.step(params, &tape, &vars);
    }

    Ok(Some(BatchLoss { breakdown }))
}

/// Mean negated portfolio return over a date set with frozen parameters.
fn evaluate_l_ret(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    graphs: &GraphSource,
    params: &ModelParams,
    buffers: &DirectionalBuffers,
    model_cfg: &ModelConfig,
    dates: &[usize],
) -> Result<f64, TrainError> {
    let dirs = buffers.directions();
    let mut acc = 0.0;
    let mut count = 0usize;
    for &t in dates {
        let any = model_cfg.horizons.iter().any(|&k| returns.has(t, k));
        if !any {
            continue;
        }
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let day = panel.day(t);
        let industry = graphs.industry(panel, t)?;
        let universe = graphs.universe(panel, t)?;
        let core = model::forward_core(
            &mut tape,
            &vars,
            model_cfg,
            &day.factors,
            day.n_stocks(),
            &industry,
            &universe,
        )?;
        for &k in &model_cfg.horizons {
            let Some(r) = returns.get(t, k) else { continue };
            let port = model::construct_portfolio(
                &mut tape,
                &vars,
                model_cfg,
                core.context,
                core.deep[&k],
                k,
                dirs.deep[&k],
            )?;
            let w = tape.value(port.weights);
            acc += w.iter().zip(r).map(|(wi, ri)| wi * ri).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(-acc / count as f64)
}

/// Train on one chronological split, returning the best-validation
/// checkpoint, its buffers, and the per-epoch log.
pub fn train(
    panel: &FactorPanel,
    returns: &ForwardReturns,
    graphs: &GraphSource,
    split: &CvSplit,
    model_cfg: &ModelConfig,
    settings: &TrainSettings,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    let train_dates: Vec<usize> = split
        .train_dates
        .iter()
        .copied()
        .filter(|&t| model_cfg.horizons.iter().any(|&k| returns.has(t, k)))
        .collect();
    if train_dates.is_empty() {
        return Err(TrainError::NoTrainingDates);
    }

    let mut params = ModelParams::init(model_cfg, settings.seed)?;
    let mut optimizer = SgdMomentum::new(&params, settings);
    let mut buffers = DirectionalBuffers::new(model_cfg.n_factors, &model_cfg.horizons);
    let mut warnings = Vec::new();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, DirectionalBuffers)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..settings.max_epochs {
        buffers.reset();
        let mut sums = LossBreakdown {
            l_ret: 0.0,
            l_up: 0.0,
            l_s: 0.0,
            l_f: 0.0,
            l_e: 0.0,
            total: 0.0,
        };
        let mut n_batches = 0usize;
        for chunk in train_dates.chunks(settings.batch_dates.max(1)) {
            let outcome = run_batch(
                panel,
                returns,
                graphs,
                &mut params,
                &mut buffers,
                Some(&mut optimizer),
                model_cfg,
                settings,
                chunk,
                epoch,
            )?;
            match outcome {
                Some(batch) => {
                    sums.l_ret += batch.breakdown.l_ret;
                    sums.l_up += batch.breakdown.l_up;
                    sums.l_s += batch.breakdown.l_s;
                    sums.l_f += batch.breakdown.l_f;
                    sums.l_e += batch.breakdown.l_e;
                    sums.total += batch.breakdown.total;
                    n_batches += 1;
                }
                None => {
                    warnings.push(format!(
                        "epoch {epoch}: batch starting at date index {} skipped (no forward returns)",
                        chunk[0]
                    ));
                }
            }
        }
        if n_batches == 0 {
            return Err(TrainError::NoTrainingDates);
        }
        let nb = n_batches as f64;

        let val_dates: &[usize] = if split.valid_dates.is_empty() {
            &split.train_dates
        } else {
            &split.valid_dates
        };
        let val_l_ret = evaluate_l_ret(
            panel, returns, graphs, &params, &buffers, model_cfg, val_dates,
        )?;

        log.push(EpochLog {
            epoch,
            l_ret: sums.l_ret / nb,
            l_up: sums.l_up / nb,
            l_s: sums.l_s / nb,
            l_f: sums.l_f / nb,
            l_e: sums.l_e / nb,
            total: sums.total / nb,
            val_l_ret,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _, _)| val_l_ret < *b);
        if improved {
            best = Some((val_l_ret, epoch, params.clone(), buffers.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= settings.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_params, best_buffers) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        buffers: best_buffers,
        log,
        best_epoch,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{generate_synthetic_market, make_cv_splits, SyntheticConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ic_of_self_is_one_and_of_negation_minus_one() {
        let x = vec![0.3, -1.2, 0.8, 2.4, -0.6];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((information_coefficient(&x, &x).value - 1.0).abs() < 1e-12);
        assert!((information_coefficient(&x, &neg).value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ic_matches_hand_computed_pearson() {
        let ic = information_coefficient(&[1.0, 2.0, 4.0], &[1.0, 3.0, 2.0]);
        assert!(!ic.degenerate);
        assert!((ic.value - 0.3273268353539886).abs() < 1e-12);
    }

    #[test]
    fn ic_degenerate_inputs_flagged_not_crashed() {
        let flat = vec![2.0; 5];
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let ic = information_coefficient(&flat, &y);
        assert_eq!(ic.value, 0.0);
        assert!(ic.degenerate);
    }

    #[test]
    fn ic_on_tape_matches_plain_and_is_differentiable() {
        let x = vec![0.5, -0.2, 1.3, 0.8];
        let y = vec![0.1, 0.0, 0.9, -0.4];
        let mut tape = Tape::new();
        let f = tape.param(x.clone(), &[4]);
        let (ic, degenerate) = ic_on_tape(&mut tape, f, &y).unwrap();
        assert!(!degenerate);
        let plain = information_coefficient(&x, &y).value;
        assert!((tape.scalar(ic) - plain).abs() < 1e-12);
        tape.backward(ic).unwrap();
        assert!(tape.grad(f).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn fresh_buffers_read_plus_one() {
        let buffers = DirectionalBuffers::new(3, &[3, 5]);
        assert_eq!(buffers.factor_direction(0), 1.0);
        assert_eq!(buffers.deep_direction(5), 1.0);
    }

    #[test]
    fn buffer_arithmetic_flips_sign() {
        // Fresh buffer plus one batch at IC -0.3: b = -0.3 + 1e-6 < 0.
        let mut buffers = DirectionalBuffers::new(1, &[3]);
        *buffers.deep.get_mut(&3).unwrap() += -0.3;
        assert!(buffers.deep[&3] < 0.0);
        assert_eq!(buffers.deep_direction(3), -1.0);
        // All-zero ICs: epsilon keeps the +1 tie-break.
        let fresh = DirectionalBuffers::new(1, &[3]);
        assert_eq!(fresh.deep_direction(3), 1.0);
    }

    #[test]
    fn portfolio_loss_hand_values() {
        // weights [0.5, 0.5] on returns [0.02, 0.04]: l_ret = -0.03.
        let mut tape = Tape::new();
        let w = tape.input(vec![0.5, 0.5], &[2]);
        let (l_ret, l_up) = portfolio_loss(
            &mut tape,
            &[(w, vec![0.02, 0.04])],
            0.10,
        )
        .unwrap();
        assert!((tape.scalar(l_ret) + 0.03).abs() < 1e-15);
        // Both weights above theta: hinge = 0.4 + 0.4 = 0.8.
        assert!((tape.scalar(l_up) - 0.8).abs() < 1e-15);

        // All weights at or below theta: hinge inactive.
        let mut tape2 = Tape::new();
        let w2 = tape2.input(vec![0.05, 0.05, 0.9], &[3]);
        let (_, up2) = portfolio_loss(&mut tape2, &[(w2, vec![0.0, 0.0, 0.0])], 0.95).unwrap();
        assert_eq!(tape2.scalar(up2), 0.0);
    }

    #[test]
    fn hinge_arithmetic_from_weight_bound() {
        // weights [0.15, 0.85], theta = 0.10: hinge sum = 0.05 + 0.75 = 0.80.
        let mut tape = Tape::new();
        let w = tape.input(vec![0.15, 0.85], &[2]);
        let h = tape.hinge_sum(w, 0.10);
        assert!((tape.scalar(h) - 0.80).abs() < 1e-15);
    }

    #[test]
    fn stability_loss_hand_values() {
        // ICs [0.1, 0.3] with d = +1: ICIR = 0.2/0.1 = 2, contribution -2.
        let mut tape = Tape::new();
        let ic1 = tape.scalar_input(0.1);
        let ic2 = tape.scalar_input(0.3);
        let mut ics = BTreeMap::new();
        ics.insert(3usize, vec![ic1, ic2]);
        let buffers = DirectionalBuffers::new(1, &[3]);
        let l_s = stability_loss(&mut tape, &ics, &buffers).unwrap();
        assert!((tape.scalar(l_s) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn stability_loss_constant_ics_contribute_zero() {
        let mut tape = Tape::new();
        let ics_vec: Vec<Var> = (0..4).map(|_| tape.scalar_input(0.05)).collect();
        let mut ics = BTreeMap::new();
        ics.insert(5usize, ics_vec);
        let buffers = DirectionalBuffers::new(1, &[5]);
        let l_s = stability_loss(&mut tape, &ics, &buffers).unwrap();
        assert_eq!(tape.scalar(l_s), 0.0);
    }

    #[test]
    fn stability_loss_sign_symmetric() {
        // Negating deep-factor values and the direction together leaves the
        // loss unchanged: IC is odd in f, and d flips with it.
        let r = vec![0.02, -0.01, 0.03, 0.0, -0.02];
        let f1 = vec![0.5, -0.1, 0.8, 0.2, -0.4];
        let f2 = vec![0.1, 0.3, 0.5, -0.2, 0.25];

        let run = |sign: f64| -> f64 {
            let mut tape = Tape::new();
            let mut ics = BTreeMap::new();
            let mut list = Vec::new();
            for f in [&f1, &f2] {
                let fv: Vec<f64> = f.iter().map(|v| sign * v).collect();
                let node = tape.input(fv, &[5]);
                let (ic, _) = ic_on_tape(&mut tape, node, &r).unwrap();
                list.push(ic);
            }
            ics.insert(3usize, list);
            let mut buffers = DirectionalBuffers::new(1, &[3]);
            buffers.deep.insert(3, sign);
            let l_s = stability_loss(&mut tape, &ics, &buffers).unwrap();
            tape.scalar(l_s)
        };
        assert!((run(1.0) - run(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_sectional_fit_hand_values() {
        // r = 2f recovers slope 2; orthogonal r gives 0.
        let mut tape = Tape::new();
        let f = tape.input(vec![1.0, 2.0, 3.0], &[3]);
        let r: Vec<f64> = vec![2.0, 4.0, 6.0];
        let (psi, _) = cross_sectional_fit(&mut tape, f, &r).unwrap();
        assert!((tape.scalar(psi) - 2.0).abs() < 1e-12);

        let f2 = tape.input(vec![-1.0, 0.0, 1.0], &[3]);
        let (psi2, _) = cross_sectional_fit(&mut tape, f2, &[1.0, 0.0, 1.0]).unwrap();
        assert!(tape.scalar(psi2).abs() < 1e-12);

        // f = [1,2,3], r = [1,1,4]: cov = 1, var = 2/3, psi = 1.5.
        let f3 = tape.input(vec![1.0, 2.0, 3.0], &[3]);
        let (psi3, _) = cross_sectional_fit(&mut tape, f3, &[1.0, 1.0, 4.0]).unwrap();
        assert!((tape.scalar(psi3) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cross_sectional_fit_degenerate_variance_flagged() {
        let mut tape = Tape::new();
        let f = tape.input(vec![1.0, 1.0, 1.0], &[3]);
        let (psi, degenerate) = cross_sectional_fit(&mut tape, f, &[1.0, 2.0, 3.0]).unwrap();
        assert!(degenerate);
        assert_eq!(tape.scalar(psi), 0.0);
    }

    #[test]
    fn iterative_local_optimizer_converges_to_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(5..30);
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let spread = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - f.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread < 0.5 {
                continue;
            }
            let mut tape = Tape::new();
            let fv = tape.input(f.clone(), &[n]);
            let (psi, _) = cross_sectional_fit(&mut tape, fv, &r).unwrap();
            let closed = tape.scalar(psi);
            let iterative = cross_sectional_fit_iterative(&f, &r, None, 20_000);
            assert!(
                (closed - iterative).abs() < 1e-6,
                "closed {closed} vs iterative {iterative}"
            );
        }
    }

    #[test]
    fn factor_return_loss_direction_flip() {
        let mut tape = Tape::new();
        let psi = tape.scalar_input(0.01);
        let mut buffers = DirectionalBuffers::new(1, &[3]);
        let l_plus = factor_return_loss(&mut tape, &[(3, psi)], &buffers).unwrap();
        assert!((tape.scalar(l_plus) + 0.01).abs() < 1e-15);
        buffers.deep.insert(3, -1.0);
        let l_minus = factor_return_loss(&mut tape, &[(3, psi)], &buffers).unwrap();
        assert!((tape.scalar(l_minus) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn factor_return_loss_mixed_horizons_average() {
        let mut tape = Tape::new();
        let psi_a = tape.scalar_input(0.02);
        let psi_b = tape.scalar_input(0.04);
        let buffers = DirectionalBuffers::new(1, &[3, 5]);
        let l = factor_return_loss(&mut tape, &[(3, psi_a), (5, psi_b)], &buffers).unwrap();
        assert!((tape.scalar(l) + 0.03).abs() < 1e-15);
    }

    #[test]
    fn attention_loss_hand_values() {
        let mut tape = Tape::new();
        let f = tape.input(vec![3.0, 4.0], &[2]);
        let zero = tape.input(vec![0.0, 0.0], &[2]);
        // 3-4-5 triangle.
        let l = attention_estimate_loss(&mut tape, &[(f, zero)]).unwrap();
        assert!((tape.scalar(l) - 5.0).abs() < 1e-15);

        // Equal pair gives zero; doubling both doubles the loss.
        let l0 = attention_estimate_loss(&mut tape, &[(f, f)]).unwrap();
        assert_eq!(tape.scalar(l0), 0.0);
        let f2 = tape.scale(f, 2.0);
        let zero2 = tape.input(vec![0.0, 0.0], &[2]);
        let l2 = attention_estimate_loss(&mut tape, &[(f2, zero2)]).unwrap();
        assert!((tape.scalar(l2) - 10.0).abs() < 1e-15);
    }

    #[test]
    fn ic_icir_invariant_under_positive_scaling() {
        let f = vec![0.4, -0.2, 0.9, 0.1, -0.6];
        let r = vec![0.01, -0.02, 0.03, 0.0, -0.01];
        let scaled: Vec<f64> = f.iter().map(|v| 3.7 * v).collect();
        let a = information_coefficient(&f, &r).value;
        let b = information_coefficient(&scaled, &r).value;
        assert!((a - b).abs() < 1e-12);
        // Rank order is preserved.
        let rank = |v: &[f64]| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
            idx
        };
        assert_eq!(rank(&f), rank(&scaled));
    }

    fn smoke_setup() -> (
        FactorPanel,
        ForwardReturns,
        GraphSource,
        CvSplit,
        ModelConfig,
        TrainSettings,
    ) {
        let cfg = SyntheticConfig {
            n_stocks: 8,
            n_factors: 3,
            n_days: 60,
            n_sectors: 2,
            signal_strength: 1.0,
            seed: 21,
        };
        let (panel, _) = generate_synthetic_market(&cfg).unwrap();
        let model_cfg = ModelConfig {
            n_factors: 3,
            context_dim: 4,
            encoder_hidden: 6,
            selection_hidden: 4,
            leaky_slope: 0.01,
            gamma_f: None,
            gamma_p: 0.5,
            horizons: vec![3, 5],
        };
        let returns = crate::marketdata::compute_forward_returns(&panel, &model_cfg.horizons).unwrap();
        let splits = make_cv_splits(&panel, 4, 0.2).unwrap();
        let split = splits.last().unwrap().clone();
        let settings = TrainSettings {
            max_epochs: 2,
            batch_dates: 8,
            learning_rate: 0.01,
            ..TrainSettings::default()
        };
        (panel, returns, GraphSource::derived(), split, model_cfg, settings)
    }

    #[test]
    fn train_smoke_runs_and_logs_every_epoch() {
        let (panel, returns, graphs, split, model_cfg, settings) = smoke_setup();
        let outcome = train(&panel, &returns, &graphs, &split, &model_cfg, &settings).unwrap();
        assert_eq!(outcome.log.len(), 2);
        assert!(outcome.log.iter().all(|e| e.total.is_finite()));
    }

    #[test]
    fn train_is_deterministic_for_fixed_seed() {
        let (panel, returns, graphs, split, model_cfg, settings) = smoke_setup();
        let a = train(&panel, &returns, &graphs, &split, &model_cfg, &settings).unwrap();
        let b = train(&panel, &returns, &graphs, &split, &model_cfg, &settings).unwrap();
        for (ea, eb) in a.log.iter().zip(&b.log) {
            assert_eq!(ea.total, eb.total);
            assert_eq!(ea.l_ret, eb.l_ret);
            assert_eq!(ea.val_l_ret, eb.val_l_ret);
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_lambdas_reduce_to_portfolio_objective() {
        let (panel, returns, graphs, split, model_cfg, mut settings) = smoke_setup();
        settings.lambda_s = 0.0;
        settings.lambda_f = 0.0;
        settings.lambda_e = 0.0;
        let outcome = train(&panel, &returns, &graphs, &split, &model_cfg, &settings).unwrap();
        for e in &outcome.log {
            assert!((e.total - (e.l_ret + e.l_up)).abs() < 1e-12);
        }
    }
}
