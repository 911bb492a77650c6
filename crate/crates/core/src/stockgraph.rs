//! Dated multi-relational stock graphs: industry (same-sector) and
//! universe (all-constituent) adjacencies, recomputed per date so that
//! constituent churn simply changes the dimension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::marketdata::{DataError, FactorPanel};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}: expected columns date,src_stock,dst_stock,relation, found {found}")]
    Schema { file: String, found: String },
    #[error("unknown relation '{0}' (expected industry or universe)")]
    UnknownRelation(String),
    #[error("edge references stock '{stock}' absent on {date}")]
    UnknownStock { stock: String, date: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Relation {
    Industry,
    Universe,
}

impl Relation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::Industry => "industry",
            Relation::Universe => "universe",
        }
    }
}

/// Dense 0/1 adjacency over one date's constituents, aligned to the
/// panel's stock order. Diagonal is always 1.
#[derive(Debug, Clone)]
pub struct StockGraph {
    pub date_idx: usize,
    pub relation: Relation,
    pub n: usize,
    pub adjacency: Vec<f64>,
}

impl StockGraph {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }
}

/// adjacency(i, j) = 1 iff sector(i) == sector(j), including i = j.
pub fn build_industry_graph(panel: &FactorPanel, t: usize) -> Result<StockGraph, DataError> {
    if t >= panel.n_dates() {
        return Err(DataError::UnknownDate(
            *panel.dates.last().expect("panel has dates"),
        ));
    }
    let day = panel.day(t);
    let n = day.n_stocks();
    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if day.sectors[i] == day.sectors[j] {
                adjacency[i * n + j] = 1.0;
            }
        }
    }
    Ok(StockGraph {
        date_idx: t,
        relation: Relation::Industry,
        n,
        adjacency,
    })
}

/// All-ones adjacency: every constituent relates to every other.
pub fn build_universe_graph(panel: &FactorPanel, t: usize) -> Result<StockGraph, DataError> {
    if t >= panel.n_dates() {
        return Err(DataError::UnknownDate(
            *panel.dates.last().expect("panel has dates"),
        ));
    }
    let n = panel.day(t).n_stocks();
    Ok(StockGraph {
        date_idx: t,
        relation: Relation::Universe,
        n,
        adjacency: vec![1.0; n * n],
    })
}

/// Where graphs come from: the per-date builders, optionally overridden by
/// explicit edges loaded from CSV.
#[derive(Debug, Clone, Default)]
pub struct GraphSource {
    explicit: BTreeMap<(usize, Relation), StockGraph>,
}

impl GraphSource {
    pub fn derived() -> Self {
        GraphSource::default()
    }

    /// Load `date,src_stock,dst_stock,relation` edges. Listed (date,
    /// relation) pairs override the builders; self-loops are added so the
    /// diagonal invariant holds.
    pub fn with_explicit_csv(panel: &FactorPanel, path: &Path) -> Result<Self, GraphError> {
        let file = std::fs::File::open(path).map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let headers = reader
            .headers()
            .map_err(|source| GraphError::Csv {
                path: path.to_path_buf(),
                source,
            })?
            .clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols != ["date", "src_stock", "dst_stock", "relation"] {
            return Err(GraphError::Schema {
                file: path.display().to_string(),
                found: cols.join(","),
            });
        }
        let mut explicit: BTreeMap<(usize, Relation), StockGraph> = BTreeMap::new();
        for record in reader.records() {
            let record = record.map_err(|source| GraphError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            let date_str = record.get(0).unwrap_or("");
            let date = chrono::NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| {
                GraphError::Data(DataError::BadDate {
                    file: path.display().to_string(),
                    value: date_str.to_string(),
                })
            })?;
            let t = panel.date_index(date)?;
            let relation = match record.get(3).unwrap_or("") {
                "industry" => Relation::Industry,
                "universe" => Relation::Universe,
                other => return Err(GraphError::UnknownRelation(other.to_string())),
            };
            let day = panel.day(t);
            let n = day.n_stocks();
            let graph = explicit.entry((t, relation)).or_insert_with(|| {
                let mut adjacency = vec![0.0; n * n];
                for i in 0..n {
                    adjacency[i * n + i] = 1.0;
                }
                StockGraph {
                    date_idx: t,
                    relation,
                    n,
                    adjacency,
                }
            });
            let src = record.get(1).unwrap_or("");
            let dst = record.get(2).unwrap_or("");
            let si = day
                .stock_ids
                .iter()
                .position(|s| s == src)
                .ok_or_else(|| GraphError::UnknownStock {
                    stock: src.to_string(),
                    date: date_str.to_string(),
                })?;
            let di = day
                .stock_ids
                .iter()
                .position(|s| s == dst)
                .ok_or_else(|| GraphError::UnknownStock {
                    stock: dst.to_string(),
                    date: date_str.to_string(),
                })?;
            // Edge src -> dst: row di attends over column si.
            graph.adjacency[di * n + si] = 1.0;
        }
        Ok(GraphSource { explicit })
    }

    pub fn industry(&self, panel: &FactorPanel, t: usize) -> Result<StockGraph, DataError> {
        if let Some(g) = self.explicit.get(&(t, Relation::Industry)) {
            return Ok(g.clone());
        }
        build_industry_graph(panel, t)
    }

    pub fn universe(&self, panel: &FactorPanel, t: usize) -> Result<StockGraph, DataError> {
        if let Some(g) = self.explicit.get(&(t, Relation::Universe)) {
            return Ok(g.clone());
        }
        build_universe_graph(panel, t)
    }
}
