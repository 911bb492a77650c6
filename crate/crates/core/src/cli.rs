//! Config-driven command entry points: dataset generation, training,
//! backtesting, and interpretation.
//!
//! Every run artifact directory embeds the resolved config and its hash,
//! and identical (config, seed) pairs reproduce byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backtest::{
    self, adhoc_portfolio, attention_heatmap, monotonicity_report, rebalance_dates, run_backtest,
    BacktestError, BacktestReport, BaselineKind, HeatmapBucketing, Rebalance, StepwiseCriterion,
    TrainedModel,
};
use crate::marketdata::{
    self, compute_forward_returns, generate_synthetic_market, load_panel, make_cv_splits,
    CvSplit, DataError, FactorPanel, ForwardReturns, PanelPaths, SyntheticConfig,
};
use crate::model::{ModelConfig, ModelError, ModelParams, DEFAULT_HORIZONS};
use crate::stockgraph::{GraphError, GraphSource};
use crate::training::{self, DirectionalBuffers, TrainError, TrainSettings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit code: 1 for validation failures, 2 for runtime ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Csv { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } => CliError::Runtime(e.to_string()),
            TrainError::Model(m) => CliError::from(m),
            TrainError::Data(d) => CliError::from(d),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::Model(m) => CliError::from(m),
            BacktestError::Train(t) => CliError::from(t),
            BacktestError::Data(d) => CliError::from(d),
            BacktestError::Stratification { .. } | BacktestError::EmptyWindow => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

// ── Config ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "synthetic" or "csv".
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default = "default_n_stocks")]
    pub n_stocks: usize,
    #[serde(default = "default_n_factors")]
    pub n_factors: usize,
    #[serde(default = "default_n_days")]
    pub n_days: usize,
    #[serde(default = "default_n_sectors")]
    pub n_sectors: usize,
    #[serde(default = "default_signal_strength")]
    pub signal_strength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prices: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sectors: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<PathBuf>,
    /// Optional explicit-adjacency edge list overriding the graph builders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_edges: Option<PathBuf>,
}

fn default_source() -> String {
    "synthetic".into()
}
fn default_n_stocks() -> usize {
    100
}
fn default_n_factors() -> usize {
    8
}
fn default_n_days() -> usize {
    500
}
fn default_n_sectors() -> usize {
    10
}
fn default_signal_strength() -> f64 {
    1.0
}

impl Default for DataSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_context_dim")]
    pub context_dim: usize,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "default_selection_hidden")]
    pub selection_hidden: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    /// Omitted: resolves to 1/(2m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_f: Option<f64>,
    #[serde(default = "default_gamma_p")]
    pub gamma_p: f64,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
}

fn default_context_dim() -> usize {
    32
}
fn default_encoder_hidden() -> usize {
    64
}
fn default_selection_hidden() -> usize {
    32
}
fn default_leaky_slope() -> f64 {
    0.01
}
fn default_gamma_p() -> f64 {
    0.5
}
fn default_horizons() -> Vec<usize> {
    DEFAULT_HORIZONS.to_vec()
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_lambda")]
    pub lambda_s: f64,
    #[serde(default = "default_lambda")]
    pub lambda_f: f64,
    #[serde(default = "default_lambda")]
    pub lambda_e: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub grad_clip: f64,
    #[serde(default)]
    pub local_learning_rate: f64,
    #[serde(default)]
    pub local_iters: usize,
    #[serde(default = "default_batch_dates")]
    pub batch_dates: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_n_folds")]
    pub n_folds: usize,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    /// Fold indices to train; empty trains every usable fold.
    #[serde(default)]
    pub folds: Vec<usize>,
}

fn default_lambda() -> f64 {
    0.1
}
fn default_theta() -> f64 {
    0.10
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_dates() -> usize {
    8
}
fn default_max_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    8
}
fn default_n_folds() -> usize {
    14
}
fn default_valid_fraction() -> f64 {
    0.2
}

impl Default for TrainingSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_eval_horizon")]
    pub horizon: usize,
    #[serde(default = "default_n_deciles")]
    pub n_deciles: usize,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<String>,
    /// "date" or "semiannual".
    #[serde(default = "default_heatmap_bucket")]
    pub heatmap_bucket: String,
}

fn default_eval_horizon() -> usize {
    5
}
fn default_n_deciles() -> usize {
    10
}
fn default_baselines() -> Vec<String> {
    vec!["linear".into(), "ew".into()]
}
fn default_heatmap_bucket() -> String {
    "semiannual".into()
}

impl Default for EvaluationSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {path:?}: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Validation(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.data.source.as_str() {
            "synthetic" => {
                if self.data.n_sectors > self.data.n_stocks {
                    return Err(CliError::Validation(format!(
                        "n_sectors ({}) exceeds n_stocks ({})",
                        self.data.n_sectors, self.data.n_stocks
                    )));
                }
            }
            "csv" => {
                for (name, path) in [
                    ("data.factors", &self.data.factors),
                    ("data.prices", &self.data.prices),
                    ("data.sectors", &self.data.sectors),
                ] {
                    if path.is_none() {
                        return Err(CliError::Validation(format!(
                            "csv source requires {name}"
                        )));
                    }
                }
            }
            other => {
                return Err(CliError::Validation(format!(
                    "unknown data source '{other}' (expected synthetic or csv)"
                )))
            }
        }
        self.model_config().validate()?;
        if self.evaluation.n_deciles < 2 {
            return Err(CliError::Validation("n_deciles must be >= 2".into()));
        }
        if !["date", "semiannual"].contains(&self.evaluation.heatmap_bucket.as_str()) {
            return Err(CliError::Validation(format!(
                "heatmap_bucket must be 'date' or 'semiannual', got '{}'",
                self.evaluation.heatmap_bucket
            )));
        }
        for b in &self.evaluation.baselines {
            if !["linear", "ew", "mlp", "s_best", "s_avg", "s_t20"].contains(&b.as_str()) {
                return Err(CliError::Validation(format!("unknown baseline '{b}'")));
            }
        }
        if !self.model.horizons.contains(&self.evaluation.horizon) {
            return Err(CliError::Validation(format!(
                "evaluation horizon {} is not one of the model horizons {:?}",
                self.evaluation.horizon, self.model.horizons
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_factors: self.data.n_factors,
            context_dim: self.model.context_dim,
            encoder_hidden: self.model.encoder_hidden,
            selection_hidden: self.model.selection_hidden,
            leaky_slope: self.model.leaky_slope,
            gamma_f: self.model.gamma_f,
            gamma_p: self.model.gamma_p,
            horizons: self.model.horizons.clone(),
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            lambda_s: self.training.lambda_s,
            lambda_f: self.training.lambda_f,
            lambda_e: self.training.lambda_e,
            theta: self.training.theta,
            learning_rate: self.training.learning_rate,
            momentum: self.training.momentum,
            grad_clip: self.training.grad_clip,
            local_learning_rate: self.training.local_learning_rate,
            local_iters: self.training.local_iters,
            batch_dates: self.training.batch_dates,
            max_epochs: self.training.max_epochs,
            patience: self.training.patience,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash over seed, data, model, and training; evaluation settings can
    /// change without invalidating a checkpoint.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seed: u64,
            data: &'a DataSection,
            model: &'a ModelSection,
            training: &'a TrainingSection,
        }
        let canonical = toml::to_string(&Hashed {
            seed: self.seed,
            data: &self.data,
            model: &self.model,
            training: &self.training,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

// ── Data acquisition ────────────────────────────────────────────────

pub struct LoadedData {
    pub panel: FactorPanel,
    pub returns: ForwardReturns,
    pub graphs: GraphSource,
    pub splits: Vec<CvSplit>,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let panel = match cfg.data.source.as_str() {
        "synthetic" => {
            let (panel, _) = generate_synthetic_market(&synthetic_config(cfg))?;
            panel
        }
        _ => load_panel(&PanelPaths {
            factors: cfg.data.factors.clone().expect("validated"),
            prices: cfg.data.prices.clone().expect("validated"),
            sectors: cfg.data.sectors.clone().expect("validated"),
            groups: cfg.data.groups.clone(),
        })?,
    };
    let returns = compute_forward_returns(&panel, &cfg.model.horizons)?;
    let graphs = match &cfg.data.graph_edges {
        Some(path) => GraphSource::with_explicit_csv(&panel, path)?,
        None => GraphSource::derived(),
    };
    let splits = make_cv_splits(&panel, cfg.training.n_folds, cfg.training.valid_fraction)?;
    Ok(LoadedData {
        panel,
        returns,
        graphs,
        splits,
    })
}

fn synthetic_config(cfg: &RunConfig) -> SyntheticConfig {
    SyntheticConfig {
        n_stocks: cfg.data.n_stocks,
        n_factors: cfg.data.n_factors,
        n_days: cfg.data.n_days,
        n_sectors: cfg.data.n_sectors,
        signal_strength: cfg.data.signal_strength,
        seed: cfg.seed,
    }
}

// ── Output helpers ──────────────────────────────────────────────────

fn prepare_out_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(runtime)?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Validation(format!(
                "output directory {out:?} is not empty; pass --force to overwrite"
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(runtime)?;
    Ok(())
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(runtime)?;
    }
    std::fs::write(path, content).map_err(runtime)?;
    Ok(())
}

fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    write_file(&out.join("resolved_config.toml"), &cfg.to_toml())
}

// ── Checkpoints ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub fold_index: usize,
    pub best_epoch: usize,
    pub horizons: Vec<usize>,
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub buffers: DirectionalBuffers,
    pub factor_names: Vec<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string(self).map_err(runtime)?;
        write_file(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read checkpoint {path:?}: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("malformed checkpoint {path:?}: {e}")))
    }
}

// ── Commands ────────────────────────────────────────────────────────

/// Write the synthetic dataset (factors/prices/sectors/groups CSVs plus a
/// manifest) to `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<String, CliError> {
    if cfg.data.source != "synthetic" {
        return Err(CliError::Validation(
            "gen-data requires data.source = \"synthetic\"".into(),
        ));
    }
    prepare_out_dir(out, force)?;
    let syn = synthetic_config(cfg);
    let (panel, truth) = generate_synthetic_market(&syn)?;

    let mut factors = String::from("date,stock_id");
    for f in &panel.factor_names {
        write!(factors, ",{}", f.name).unwrap();
    }
    factors.push('\n');
    let mut prices = String::from("date,stock_id,vwap\n");
    let mut sectors = String::from("date,stock_id,sector\n");
    let m = panel.n_factors();
    for t in 0..panel.n_dates() {
        let date = panel.dates[t];
        let day = panel.day(t);
        for i in 0..day.n_stocks() {
            write!(factors, "{date},{}", day.stock_ids[i]).unwrap();
            for j in 0..m {
                write!(factors, ",{}", day.factors[i * m + j]).unwrap();
            }
            factors.push('\n');
            writeln!(prices, "{date},{},{}", day.stock_ids[i], day.prices[i]).unwrap();
            writeln!(sectors, "{date},{},{}", day.stock_ids[i], day.sectors[i]).unwrap();
        }
    }
    let mut groups = String::from("factor_name,group\n");
    for f in &panel.factor_names {
        writeln!(groups, "{},{}", f.name, f.group).unwrap();
    }

    write_file(&out.join("factors.csv"), &factors)?;
    write_file(&out.join("prices.csv"), &prices)?;
    write_file(&out.join("sectors.csv"), &sectors)?;
    write_file(&out.join("factor_groups.csv"), &groups)?;

    let manifest = serde_json::json!({
        "config_hash": cfg.config_hash(),
        "n_stocks": syn.n_stocks,
        "n_factors": syn.n_factors,
        "n_days": syn.n_days,
        "n_sectors": syn.n_sectors,
        "signal_strength": syn.signal_strength,
        "seed": syn.seed,
        "planted_factors": truth.planted.iter()
            .map(|&j| panel.factor_names[j].name.clone()).collect::<Vec<_>>(),
        "planted_betas": truth.betas,
        "planted_quadratic": truth.quads,
    });
    write_file(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).map_err(runtime)?,
    )?;
    write_resolved_config(cfg, out)?;

    Ok(format!(
        "dataset: {} stocks x {} factors x {} dates, {} sectors; planted factors {:?} (signal_strength {})",
        syn.n_stocks,
        syn.n_factors,
        syn.n_days,
        syn.n_sectors,
        truth.planted,
        syn.signal_strength
    ))
}

fn usable_folds(cfg: &RunConfig, splits: &[CvSplit]) -> Result<Vec<usize>, CliError> {
    let available: Vec<usize> = splits.iter().map(|s| s.fold_index).collect();
    if cfg.training.folds.is_empty() {
        return Ok(available);
    }
    for f in &cfg.training.folds {
        if !available.contains(f) {
            return Err(CliError::Validation(format!(
                "fold {f} not in usable folds {available:?} (fold 0 has no training data)"
            )));
        }
    }
    Ok(cfg.training.folds.clone())
}

fn training_log_csv(log: &[training::EpochLog]) -> String {
    let mut text = String::from("epoch,l_ret,l_up,l_s,l_f,l_e,total,val_l_ret\n");
    for e in log {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.l_ret, e.l_up, e.l_s, e.l_f, e.l_e, e.total, e.val_l_ret
        )
        .unwrap();
    }
    text
}

fn buffers_csv(buffers: &DirectionalBuffers, factor_names: &[String]) -> String {
    let mut text = String::from("factor,direction,accumulator\n");
    for (j, name) in factor_names.iter().enumerate() {
        writeln!(
            text,
            "{name},{},{}",
            buffers.factor_direction(j) as i64,
            buffers.factor[j]
        )
        .unwrap();
    }
    for (&k, &b) in &buffers.deep {
        writeln!(text, "deep_k{k},{},{}", buffers.deep_direction(k) as i64, b).unwrap();
    }
    text
}

/// Train the configured folds; each fold writes `fold_<i>/checkpoint.json`,
/// `training_log.csv`, and `buffers.csv`. `jobs` > 1 trains folds in
/// parallel (outputs are identical regardless).
pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool, jobs: usize) -> Result<String, CliError> {
    prepare_out_dir(out, force)?;
    let data = load_data(cfg)?;
    let fold_ids = usable_folds(cfg, &data.splits)?;
    let model_cfg = cfg.model_config();
    let settings = cfg.train_settings();
    let config_hash = cfg.config_hash();
    let factor_names: Vec<String> = data
        .panel
        .factor_names
        .iter()
        .map(|f| f.name.clone())
        .collect();

    let results: Mutex<Vec<(usize, usize)>> = Mutex::new(Vec::new());
    let errors: Mutex<Vec<CliError>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = jobs.max(1).min(fold_ids.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= fold_ids.len() {
                    break;
                }
                let fold = fold_ids[idx];
                let split = data
                    .splits
                    .iter()
                    .find(|s| s.fold_index == fold)
                    .expect("fold validated");
                let run = (|| -> Result<usize, CliError> {
                    let outcome = training::train(
                        &data.panel,
                        &data.returns,
                        &data.graphs,
                        split,
                        &model_cfg,
                        &settings,
                    )?;
                    let fold_dir = out.join(format!("fold_{fold}"));
                    write_file(
                        &fold_dir.join("training_log.csv"),
                        &training_log_csv(&outcome.log),
                    )?;
                    write_file(
                        &fold_dir.join("buffers.csv"),
                        &buffers_csv(&outcome.buffers, &factor_names),
                    )?;
                    let checkpoint = Checkpoint {
                        config_hash: config_hash.clone(),
                        fold_index: fold,
                        best_epoch: outcome.best_epoch,
                        horizons: model_cfg.horizons.clone(),
                        model_config: model_cfg.clone(),
                        params: outcome.params,
                        buffers: outcome.buffers,
                        factor_names: factor_names.clone(),
                    };
                    checkpoint.save(&fold_dir.join("checkpoint.json"))?;
                    for w in &outcome.warnings {
                        eprintln!("fold {fold}: {w}");
                    }
                    Ok(outcome.best_epoch)
                })();
                match run {
                    Ok(best) => results.lock().unwrap().push((fold, best)),
                    Err(e) => errors.lock().unwrap().push(e),
                }
            });
        }
    });

    if let Some(err) = errors.into_inner().unwrap().into_iter().next() {
        return Err(err);
    }
    write_resolved_config(cfg, out)?;
    let mut done = results.into_inner().unwrap();
    done.sort();
    Ok(done
        .iter()
        .map(|(fold, best)| format!("fold {fold}: best epoch {best}"))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn strategy_weights_csv(panel: &FactorPanel, report: &BacktestReport) -> String {
    let mut text = String::from("date,stock_id,weight\n");
    for rb in &report.rebalances {
        let day = panel.day(rb.date_idx);
        for (i, id) in day.stock_ids.iter().enumerate() {
            writeln!(text, "{},{},{}", panel.dates[rb.date_idx], id, rb.weights[i]).unwrap();
        }
    }
    text
}

fn strategy_report_files(
    panel: &FactorPanel,
    name: &str,
    report: &BacktestReport,
    out: &Path,
) -> Result<(), CliError> {
    let m = &report.metrics;
    let metrics = format!(
        "metric,value\nalpha,{}\nir,{}\nmd,{}\ntt,{}\nn_avg,{}\n",
        m.alpha, m.ir, m.md, m.tt, m.n_avg
    );
    write_file(&out.join(format!("{name}_metrics.csv")), &metrics)?;
    let mut active = String::from("date,active_return\n");
    for (rb, a) in report.rebalances.iter().zip(&report.active_returns) {
        writeln!(active, "{},{}", panel.dates[rb.date_idx], a).unwrap();
    }
    write_file(&out.join(format!("{name}_active.csv")), &active)?;
    write_file(
        &out.join(format!("{name}_weights.csv")),
        &strategy_weights_csv(panel, report),
    )?;
    Ok(())
}

/// Evaluate the checkpoint plus the configured baselines on its fold's
/// test window, writing per-strategy reports and a comparison table.
pub fn cmd_backtest(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    out: &Path,
    force: bool,
) -> Result<String, CliError> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    if checkpoint.config_hash != cfg.config_hash() {
        return Err(CliError::Validation(format!(
            "checkpoint config hash {} does not match the resolved config hash {}; retrain or restore the original config",
            checkpoint.config_hash,
            cfg.config_hash()
        )));
    }
    prepare_out_dir(out, force)?;
    let data = load_data(cfg)?;
    let split = data
        .splits
        .iter()
        .find(|s| s.fold_index == checkpoint.fold_index)
        .ok_or_else(|| {
            CliError::Validation(format!(
                "checkpoint fold {} not available under the current split config",
                checkpoint.fold_index
            ))
        })?;
    let k = cfg.evaluation.horizon;
    let n_deciles = cfg.evaluation.n_deciles;
    let model = TrainedModel {
        params: &checkpoint.params,
        buffers: &checkpoint.buffers,
        config: &checkpoint.model_config,
    };

    let rdates = rebalance_dates(&split.test_dates, k);
    let d_k = checkpoint.buffers.deep_direction(k);
    let mut auto = Vec::new();
    let mut deep = Vec::new();
    let mut linear_approx = Vec::new();
    for &t in &rdates {
        let outputs = backtest::evaluate_date(&model, &data.panel, &data.graphs, t)
            .map_err(CliError::from)?;
        let ids = &data.panel.day(t).stock_ids;
        auto.push(Rebalance {
            date_idx: t,
            weights: outputs.auto_weights[&k].clone(),
        });
        deep.push(Rebalance {
            date_idx: t,
            weights: adhoc_portfolio(&outputs.deep[&k], ids, d_k, n_deciles)
                .map_err(CliError::from)?,
        });
        linear_approx.push(Rebalance {
            date_idx: t,
            weights: adhoc_portfolio(&outputs.estimate[&k], ids, d_k, n_deciles)
                .map_err(CliError::from)?,
        });
    }

    let mut reports: Vec<(String, BacktestReport)> = vec![
        (
            "e2e_auto".into(),
            run_backtest(&auto, &data.panel, &data.returns, k).map_err(CliError::from)?,
        ),
        (
            "e2e_deep".into(),
            run_backtest(&deep, &data.panel, &data.returns, k).map_err(CliError::from)?,
        ),
        (
            "e2e_linear".into(),
            run_backtest(&linear_approx, &data.panel, &data.returns, k)
                .map_err(CliError::from)?,
        ),
    ];

    let settings = cfg.train_settings();
    for baseline in &cfg.evaluation.baselines {
        let report = match baseline.as_str() {
            "linear" => backtest::baseline_models(
                &data.panel,
                &data.returns,
                split,
                BaselineKind::Linear,
                n_deciles,
                &checkpoint.model_config,
                &settings,
                k,
            ),
            "ew" => backtest::baseline_models(
                &data.panel,
                &data.returns,
                split,
                BaselineKind::EqualWeight,
                n_deciles,
                &checkpoint.model_config,
                &settings,
                k,
            ),
            "mlp" => backtest::baseline_models(
                &data.panel,
                &data.returns,
                split,
                BaselineKind::Mlp,
                n_deciles,
                &checkpoint.model_config,
                &settings,
                k,
            ),
            stepwise => {
                let criterion = match stepwise {
                    "s_best" => StepwiseCriterion::Best,
                    "s_avg" => StepwiseCriterion::Avg,
                    _ => StepwiseCriterion::T20,
                };
                stepwise_baseline(&data, split, criterion, &cfg.model.horizons, k, n_deciles)
            }
        }
        .map_err(CliError::from)?;
        reports.push((baseline.clone(), report));
    }

    // Every strategy must have been evaluated on the same test dates.
    let reference: Vec<usize> = reports[0].1.rebalances.iter().map(|r| r.date_idx).collect();
    for (name, report) in &reports {
        let dates: Vec<usize> = report.rebalances.iter().map(|r| r.date_idx).collect();
        if dates != reference {
            return Err(CliError::Runtime(format!(
                "strategy {name} evaluated on different test dates than e2e_auto"
            )));
        }
    }

    let mut comparison = String::from("strategy,alpha,ir,md,tt,n_avg\n");
    for (name, report) in &reports {
        let m = &report.metrics;
        writeln!(
            comparison,
            "{name},{},{},{},{},{}",
            m.alpha, m.ir, m.md, m.tt, m.n_avg
        )
        .unwrap();
        strategy_report_files(&data.panel, name, report, out)?;
        for w in &report.warnings {
            eprintln!("{name}: {w}");
        }
    }
    write_file(&out.join("comparison.csv"), &comparison)?;
    write_resolved_config(cfg, out)?;
    Ok(comparison)
}

fn stepwise_baseline(
    data: &LoadedData,
    split: &CvSplit,
    criterion: StepwiseCriterion,
    horizons: &[usize],
    k: usize,
    n_deciles: usize,
) -> Result<BacktestReport, BacktestError> {
    let selected = backtest::stepwise_select(
        &data.panel,
        &data.returns,
        &split.train_dates,
        criterion,
        horizons,
        None,
    )?;
    let directions = backtest::window_ic_directions(
        &data.panel,
        &data.returns,
        &split.train_dates,
        &selected,
        k,
    );
    let mut rebalances = Vec::new();
    for &t in &rebalance_dates(&split.test_dates, k) {
        let score = backtest::stepwise_score(&data.panel, t, &selected, &directions);
        let w = adhoc_portfolio(&score, &data.panel.day(t).stock_ids, 1.0, n_deciles)?;
        rebalances.push(Rebalance {
            date_idx: t,
            weights: w,
        });
    }
    run_backtest(&rebalances, &data.panel, &data.returns, k)
}

/// Export the attention heatmap and per-horizon monotonicity tables for
/// the checkpoint's fold.
pub fn cmd_interpret(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    out: &Path,
    force: bool,
) -> Result<String, CliError> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    if checkpoint.config_hash != cfg.config_hash() {
        return Err(CliError::Validation(format!(
            "checkpoint config hash {} does not match the resolved config hash {}",
            checkpoint.config_hash,
            cfg.config_hash()
        )));
    }
    prepare_out_dir(out, force)?;
    let data = load_data(cfg)?;
    let split = data
        .splits
        .iter()
        .find(|s| s.fold_index == checkpoint.fold_index)
        .ok_or_else(|| {
            CliError::Validation(format!(
                "checkpoint fold {} not available under the current split config",
                checkpoint.fold_index
            ))
        })?;
    let model = TrainedModel {
        params: &checkpoint.params,
        buffers: &checkpoint.buffers,
        config: &checkpoint.model_config,
    };
    let bucketing = if cfg.evaluation.heatmap_bucket == "date" {
        HeatmapBucketing::PerDate
    } else {
        HeatmapBucketing::SemiAnnual
    };

    let mut summary = String::new();
    for &k in &checkpoint.model_config.horizons {
        let heatmap = attention_heatmap(
            &model,
            &data.panel,
            &data.graphs,
            &split.test_dates,
            k,
            bucketing,
        )
        .map_err(CliError::from)?;
        let mut text = String::from("bucket");
        for g in &heatmap.groups {
            write!(text, ",{g}").unwrap();
        }
        text.push('\n');
        for (bi, bucket) in heatmap.buckets.iter().enumerate() {
            write!(text, "{bucket}").unwrap();
            for gi in 0..heatmap.groups.len() {
                write!(text, ",{}", heatmap.values[bi * heatmap.groups.len() + gi]).unwrap();
            }
            text.push('\n');
        }
        write_file(&out.join(format!("heatmap_k{k}.csv")), &text)?;

        let mono = monotonicity_report(
            &model,
            &data.panel,
            &data.graphs,
            &data.returns,
            &split.test_dates,
            k,
            cfg.evaluation.n_deciles,
        )
        .map_err(CliError::from)?;
        let mut mtext = String::from("decile,deep_mean_return,estimate_mean_return\n");
        for g in 0..mono.n_groups {
            writeln!(
                mtext,
                "{},{},{}",
                g + 1,
                mono.deep_mean_returns[g],
                mono.estimate_mean_returns[g]
            )
            .unwrap();
        }
        writeln!(
            mtext,
            "spearman,{},{}",
            mono.deep_spearman, mono.estimate_spearman
        )
        .unwrap();
        write_file(&out.join(format!("monotonicity_k{k}.csv")), &mtext)?;
        writeln!(
            summary,
            "k={k}: deep spearman {:.3}, estimate spearman {:.3}",
            mono.deep_spearman, mono.estimate_spearman
        )
        .unwrap();
    }
    write_resolved_config(cfg, out)?;
    Ok(summary)
}

// ── Shared data derivation used by tests ────────────────────────────

/// In-memory synthetic data keyed by a config, mirroring what the
/// commands build from disk.
pub fn derive_market(cfg: &RunConfig) -> Result<(FactorPanel, marketdata::SyntheticTruth), CliError> {
    Ok(generate_synthetic_market(&synthetic_config(cfg))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_parses_and_validates() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.data.source, "synthetic");
        assert_eq!(cfg.model.horizons, vec![3, 5, 10, 15, 20]);
        assert_eq!(cfg.evaluation.horizon, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[training]\nwarp_speed = true\n").unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        let err2 = RunConfig::from_toml("banana = 1\n").unwrap_err();
        assert!(matches!(err2, CliError::Validation(_)));
    }

    #[test]
    fn sector_count_validation() {
        let err = RunConfig::from_toml("[data]\nn_stocks = 5\nn_sectors = 9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_sectors"), "{msg}");
    }

    #[test]
    fn eval_horizon_must_be_a_model_horizon() {
        let err = RunConfig::from_toml("[evaluation]\nhorizon = 7\n").unwrap_err();
        assert!(err.to_string().contains("horizon"));
    }

    #[test]
    fn csv_source_requires_paths() {
        let err = RunConfig::from_toml("[data]\nsource = \"csv\"\n").unwrap_err();
        assert!(err.to_string().contains("data.factors"));
    }

    #[test]
    fn config_hash_ignores_evaluation_but_not_training() {
        let a = RunConfig::from_toml("").unwrap();
        let b = RunConfig::from_toml("[evaluation]\nn_deciles = 5\n").unwrap();
        let c = RunConfig::from_toml("[training]\nmax_epochs = 7\n").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn mlp_baseline_requires_positive_hidden_width() {
        let err = RunConfig::from_toml("[model]\nencoder_hidden = 0\n").unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 2);
    }
}
