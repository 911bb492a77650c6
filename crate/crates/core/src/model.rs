//! The end-to-end network: gated factor selection, context encoding,
//! relational neutralization via graph attention, multi-horizon deep-factor
//! heads, a directional attention estimate of each deep factor, and the
//! gated portfolio head.
//!
//! Parameters live in a [`ModelParams`] map keyed by stable names; a
//! forward pass registers them on a [`Tape`] and builds the graph for one
//! trading date. Forward evaluation with frozen parameters is pure.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};
use crate::stockgraph::StockGraph;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("factor set is empty")]
    EmptyFactorSet,
    #[error("stock universe is empty")]
    EmptyUniverse,
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("graph dimension {graph_n} does not match universe size {n}")]
    GraphDimension { graph_n: usize, n: usize },
}

/// The five forward horizons, in trading days.
pub const DEFAULT_HORIZONS: [usize; 5] = [3, 5, 10, 15, 20];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_factors: usize,
    /// Width of the stock-context embedding (m1).
    pub context_dim: usize,
    pub encoder_hidden: usize,
    pub selection_hidden: usize,
    pub leaky_slope: f64,
    /// Attention floor for factor survival. `None` resolves to 1/(2m).
    pub gamma_f: Option<f64>,
    /// Attention floor for stock survival, relative to the uniform weight.
    pub gamma_p: f64,
    pub horizons: Vec<usize>,
}

impl ModelConfig {
    pub fn with_defaults(n_factors: usize) -> Self {
        ModelConfig {
            n_factors,
            context_dim: 32,
            encoder_hidden: 64,
            selection_hidden: 32,
            leaky_slope: 0.01,
            gamma_f: None,
            gamma_p: 0.5,
            horizons: DEFAULT_HORIZONS.to_vec(),
        }
    }

    pub fn resolved_gamma_f(&self) -> f64 {
        self.gamma_f
            .unwrap_or(1.0 / (2.0 * self.n_factors as f64))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_factors == 0 {
            return Err(ModelError::EmptyFactorSet);
        }
        if self.context_dim == 0 || self.encoder_hidden == 0 || self.selection_hidden == 0 {
            return Err(ModelError::BadConfig(
                "hidden widths must be positive".into(),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::BadConfig(format!(
                "leaky_slope must lie in (0,1), got {}",
                self.leaky_slope
            )));
        }
        let gf = self.resolved_gamma_f();
        if !(0.0..1.0).contains(&gf) {
            return Err(ModelError::BadConfig(format!(
                "gamma_f must lie in [0,1), got {gf}"
            )));
        }
        if !(self.gamma_p > 0.0 && self.gamma_p <= 1.0) {
            return Err(ModelError::BadConfig(format!(
                "gamma_p must lie in (0,1], got {}",
                self.gamma_p
            )));
        }
        if self.horizons.is_empty() {
            return Err(ModelError::BadConfig("horizons must be non-empty".into()));
        }
        let mut sorted = self.horizons.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.horizons {
            return Err(ModelError::BadConfig(
                "horizons must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter arrays. Iteration order is the key order, which keeps
/// optimizer state and checkpoints deterministic.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, ParamTensor>,
}

impl ModelParams {
    /// Uniform init in +-sqrt(1/fan_in), drawn in a fixed key order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, m1, he, hs) = (
            cfg.n_factors,
            cfg.context_dim,
            cfg.encoder_hidden,
            cfg.selection_hidden,
        );
        let mut tensors = BTreeMap::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let count: usize = shape.iter().product();
            let values: Vec<f64> = (0..count).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.insert(name, ParamTensor { shape, values });
        };

        add("selection.w1".into(), vec![m, hs], m, &mut rng);
        add("selection.b1".into(), vec![hs], m, &mut rng);
        add("selection.w2".into(), vec![hs, m], hs, &mut rng);
        add("selection.b2".into(), vec![m], hs, &mut rng);

        add("encoder.w1".into(), vec![m, he], m, &mut rng);
        add("encoder.b1".into(), vec![he], m, &mut rng);
        add("encoder.w2".into(), vec![he, m1], he, &mut rng);
        add("encoder.b2".into(), vec![m1], he, &mut rng);

        for rel in ["industry", "universe"] {
            add(format!("gat_{rel}.w"), vec![m1, m1], m1, &mut rng);
            add(format!("gat_{rel}.a_src"), vec![m1], m1, &mut rng);
            add(format!("gat_{rel}.a_dst"), vec![m1], m1, &mut rng);
        }

        for &k in &cfg.horizons {
            add(format!("head.k{k}.w"), vec![3 * m1, 1], 3 * m1, &mut rng);
            add(format!("head.k{k}.b"), vec![1], 3 * m1, &mut rng);
            add(format!("attn.k{k}.w"), vec![m, m], m, &mut rng);
            add(format!("attn.k{k}.b"), vec![m], m, &mut rng);
            add(format!("port.k{k}.w"), vec![m1 + 1, 1], m1 + 1, &mut rng);
            add(format!("port.k{k}.b"), vec![1], m1 + 1, &mut rng);
        }

        Ok(ModelParams { tensors })
    }

    /// Register every tensor on the tape. `trainable` decides whether the
    /// leaves accumulate gradient.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let var = if trainable {
                    tape.param(t.values.clone(), &t.shape)
                } else {
                    tape.input(t.values.clone(), &t.shape)
                };
                (name.clone(), var)
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamTensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }
}

/// Looks up a registered parameter Var by name.
fn pv(vars: &BTreeMap<String, Var>, name: &str) -> Var {
    *vars
        .get(name)
        .unwrap_or_else(|| panic!("parameter '{name}' not registered"))
}

/// Directions read from the directional buffers: one sign per original
/// factor and one per deep-factor horizon.
#[derive(Debug, Clone)]
pub struct Directions {
    pub factor: Vec<f64>,
    pub deep: BTreeMap<usize, f64>,
}

impl Directions {
    pub fn neutral(cfg: &ModelConfig) -> Self {
        Directions {
            factor: vec![1.0; cfg.n_factors],
            deep: cfg.horizons.iter().map(|&k| (k, 1.0)).collect(),
        }
    }
}

pub struct SelectionOutput {
    pub selected: Var,
    /// Per-factor softmax scores (on tape).
    pub scores: Var,
    /// The realized 0/1 mask.
    pub mask: Vec<f64>,
}

/// Score factors by a stock-pooled MLP, gate at `gamma_f`, and zero the
/// non-surviving columns. At least one factor always survives: if every
/// score falls below the gate, the argmax factor is kept (ties resolve to
/// the lowest index).
pub fn select_factors(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    raw: Var,
) -> Result<SelectionOutput, ModelError> {
    let shape = tape.shape(raw).to_vec();
    let m = shape[1];
    if m == 0 {
        return Err(ModelError::EmptyFactorSet);
    }
    let gamma_f = cfg.resolved_gamma_f();
    let h = tape.linear(raw, pv(vars, "selection.w1"), Some(pv(vars, "selection.b1")))?;
    let h = tape.leaky_relu(h, cfg.leaky_slope);
    let logits = tape.linear(h, pv(vars, "selection.w2"), Some(pv(vars, "selection.b2")))?;
    let pooled = tape.mean_axis0(logits)?;
    let scores = tape.softmax_axis(pooled, 0)?;

    let gate = tape.gate_mask(scores, gamma_f)?;
    let mut mask = tape.value(gate).to_vec();
    if mask.iter().all(|&v| v == 0.0) {
        let score_vals = tape.value(scores);
        let argmax = score_vals
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
        mask = vec![0.0; m];
        mask[argmax] = 1.0;
    }
    let mask_node = tape.input(mask.clone(), &[m]);
    let selected = tape.scale_columns(raw, mask_node)?;
    Ok(SelectionOutput {
        selected,
        scores,
        mask,
    })
}

/// Cross-sectional z-score followed by a two-layer row-wise MLP
/// (m -> hidden -> m1) producing the stock-context matrix.
pub fn encode_context(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    selected: Var,
) -> Result<Var, ModelError> {
    let normed = tape.crosssec_norm(selected)?;
    let h = tape.linear(normed, pv(vars, "encoder.w1"), Some(pv(vars, "encoder.b1")))?;
    let h = tape.leaky_relu(h, cfg.leaky_slope);
    let context = tape.linear(h, pv(vars, "encoder.w2"), Some(pv(vars, "encoder.b2")))?;
    Ok(context)
}

/// Single-head graph attention: per-node linear transform, additive
/// pairwise logits through LeakyReLU, softmax over each node's neighbors,
/// attention-weighted sum of transformed neighbor features.
pub fn gat_layer(
    tape: &mut Tape,
    w: Var,
    a_src: Var,
    a_dst: Var,
    slope: f64,
    context: Var,
    graph: &StockGraph,
) -> Result<Var, ModelError> {
    let n = tape.shape(context)[0];
    if graph.n != n {
        return Err(ModelError::GraphDimension { graph_n: graph.n, n });
    }
    for i in 0..n {
        assert_eq!(
            graph.at(i, i),
            1.0,
            "adjacency diagonal must be 1 (self-loops)"
        );
    }
    let h = tape.matmul(context, w)?;
    let src_scores = tape.matvec(h, a_src)?;
    let dst_scores = tape.matvec(h, a_dst)?;
    let logits = tape.outer_sum(src_scores, dst_scores)?;
    let logits = tape.leaky_relu(logits, slope);
    let attn = tape.masked_softmax_axis(logits, &graph.adjacency, 1)?;
    Ok(tape.matmul(attn, h)?)
}

/// Neutralized context: the input minus its graph-attention reconstruction.
pub fn relational_neutralize(
    tape: &mut Tape,
    w: Var,
    a_src: Var,
    a_dst: Var,
    slope: f64,
    context: Var,
    graph: &StockGraph,
) -> Result<Var, ModelError> {
    let gat = gat_layer(tape, w, a_src, a_dst, slope, context, graph)?;
    Ok(tape.sub(context, gat)?)
}

/// One linear head per horizon over the concatenated contexts, LeakyReLU
/// activated, yielding an n-vector deep factor per horizon.
pub fn deep_factor_heads(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    context: Var,
    neutral_industry: Var,
    neutral_universe: Var,
) -> Result<BTreeMap<usize, Var>, ModelError> {
    let n = tape.shape(context)[0];
    let cat = tape.concat_cols(&[context, neutral_industry, neutral_universe])?;
    let mut deep = BTreeMap::new();
    for &k in &cfg.horizons {
        let y = tape.linear(
            cat,
            pv(vars, &format!("head.k{k}.w")),
            Some(pv(vars, &format!("head.k{k}.b"))),
        )?;
        let y = tape.reshape(y, &[n])?;
        let f = tape.leaky_relu(y, cfg.leaky_slope);
        deep.insert(k, f);
    }
    Ok(deep)
}

/// Directional attention over the original factors.
///
/// Each stock's attention row over the m factors sums to one; the
/// stock-mean attention, signed by the factor directions, gives the linear
/// approximation `f_hat = selected . (a_bar o d)`.
pub fn directional_attention_estimate(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    selected: Var,
    k: usize,
    factor_directions: &[f64],
) -> Result<(Var, Var), ModelError> {
    debug_assert!(factor_directions.iter().all(|&d| d == 1.0 || d == -1.0));
    let logits = tape.linear(
        selected,
        pv(vars, &format!("attn.k{k}.w")),
        Some(pv(vars, &format!("attn.k{k}.b"))),
    )?;
    let act = tape.leaky_relu(logits, cfg.leaky_slope);
    let attn = tape.softmax_axis(act, 1)?;
    let a_bar = tape.mean_axis0(attn)?;
    let d = tape.input(factor_directions.to_vec(), &[factor_directions.len()]);
    let signed = tape.mul(a_bar, d)?;
    let f_hat = tape.matvec(selected, signed)?;
    Ok((a_bar, f_hat))
}

pub struct PortfolioOutput {
    pub weights: Var,
    /// Softmax attention over all stocks (pre-gate).
    pub attention: Vec<f64>,
    /// Realized 0/1 survivor mask.
    pub mask: Vec<f64>,
}

/// Gate attention at tau = gamma_p / n and re-softmax the survivors'
/// pre-softmax scores, so excluded stocks get exactly zero weight. Falls
/// back to the top ceil(0.05 n) stocks by attention if nothing survives.
pub fn gated_allocation(
    tape: &mut Tape,
    scores: Var,
    gamma_p: f64,
) -> Result<PortfolioOutput, ModelError> {
    let n = tape.shape(scores)[0];
    if n == 0 {
        return Err(ModelError::EmptyUniverse);
    }
    let attention_var = tape.softmax_axis(scores, 0)?;
    let attention = tape.value(attention_var).to_vec();
    let tau = gamma_p / n as f64;
    let gate = tape.gate_mask(attention_var, tau)?;
    let mut mask = tape.value(gate).to_vec();
    if mask.iter().all(|&v| v == 0.0) {
        let keep = (0.05 * n as f64).ceil() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| attention[b].partial_cmp(&attention[a]).unwrap());
        mask = vec![0.0; n];
        for &i in order.iter().take(keep.max(1)) {
            mask[i] = 1.0;
        }
    }
    let weights = tape.masked_softmax_axis(scores, &mask, 0)?;
    Ok(PortfolioOutput {
        weights,
        attention,
        mask,
    })
}

/// Score stocks from the context joined with the direction-adjusted deep
/// factor, then allocate through the gated softmax.
pub fn construct_portfolio(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    context: Var,
    deep: Var,
    k: usize,
    deep_direction: f64,
) -> Result<PortfolioOutput, ModelError> {
    let n = tape.shape(deep)[0];
    if n == 0 {
        return Err(ModelError::EmptyUniverse);
    }
    let signed = tape.scale(deep, deep_direction);
    let signed_col = tape.reshape(signed, &[n, 1])?;
    let joined = tape.concat_cols(&[context, signed_col])?;
    let raw_scores = tape.linear(
        joined,
        pv(vars, &format!("port.k{k}.w")),
        Some(pv(vars, &format!("port.k{k}.b"))),
    )?;
    let raw_scores = tape.reshape(raw_scores, &[n])?;
    let scores = tape.leaky_relu(raw_scores, cfg.leaky_slope);
    gated_allocation(tape, scores, cfg.gamma_p)
}

/// Everything up to the deep factors (no directions needed).
pub struct CoreOutputs {
    pub selected: Var,
    pub scores: Var,
    pub mask: Vec<f64>,
    pub context: Var,
    pub neutral_industry: Var,
    pub neutral_universe: Var,
    pub deep: BTreeMap<usize, Var>,
}

pub fn forward_core(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    raw_values: &[f64],
    n: usize,
    industry: &StockGraph,
    universe: &StockGraph,
) -> Result<CoreOutputs, ModelError> {
    let raw = tape.input(raw_values.to_vec(), &[n, cfg.n_factors]);
    let selection = select_factors(tape, vars, cfg, raw)?;
    let context = encode_context(tape, vars, cfg, selection.selected)?;
    let neutral_industry = relational_neutralize(
        tape,
        pv(vars, "gat_industry.w"),
        pv(vars, "gat_industry.a_src"),
        pv(vars, "gat_industry.a_dst"),
        cfg.leaky_slope,
        context,
        industry,
    )?;
    let neutral_universe = relational_neutralize(
        tape,
        pv(vars, "gat_universe.w"),
        pv(vars, "gat_universe.a_src"),
        pv(vars, "gat_universe.a_dst"),
        cfg.leaky_slope,
        neutral_industry,
        universe,
    )?;
    let deep = deep_factor_heads(tape, vars, cfg, context, neutral_industry, neutral_universe)?;
    Ok(CoreOutputs {
        selected: selection.selected,
        scores: selection.scores,
        mask: selection.mask,
        context,
        neutral_industry,
        neutral_universe,
        deep,
    })
}

/// Forward pass producing every per-horizon output for one date.
pub struct FullOutputs {
    pub core: CoreOutputs,
    pub attention: BTreeMap<usize, Var>,
    pub estimate: BTreeMap<usize, Var>,
    pub weights: BTreeMap<usize, PortfolioOutput>,
}

pub fn forward_full(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    raw_values: &[f64],
    n: usize,
    industry: &StockGraph,
    universe: &StockGraph,
    dirs: &Directions,
) -> Result<FullOutputs, ModelError> {
    let core = forward_core(tape, vars, cfg, raw_values, n, industry, universe)?;
    let mut attention = BTreeMap::new();
    let mut estimate = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for &k in &cfg.horizons {
        let (a_bar, f_hat) =
            directional_attention_estimate(tape, vars, cfg, core.selected, k, &dirs.factor)?;
        attention.insert(k, a_bar);
        estimate.insert(k, f_hat);
        let port = construct_portfolio(
            tape,
            vars,
            cfg,
            core.context,
            core.deep[&k],
            k,
            dirs.deep[&k],
        )?;
        weights.insert(k, port);
    }
    Ok(FullOutputs {
        core,
        attention,
        estimate,
        weights,
    })
}
