//! Point-in-time factor panels, forward returns, and chronological
//! cross-validation splits.
//!
//! A panel row for date t only ever uses information available at t. The
//! loaders enforce alignment across the factor, price, and sector files;
//! missing factor cells are imputed to the per-date cross-sectional median.

mod synthetic;

pub use synthetic::{generate_synthetic_market, SyntheticConfig, SyntheticTruth};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{file}: expected columns {expected}, found {found}")]
    Schema {
        file: String,
        expected: String,
        found: String,
    },
    #[error("unparseable date '{value}' in {file}")]
    BadDate { file: String, value: String },
    #[error("unparseable number '{value}' for {column} in {file}")]
    BadNumber {
        file: String,
        column: String,
        value: String,
    },
    #[error("date misalignment across panel files; offending dates: {dates:?}")]
    Alignment { dates: Vec<String> },
    #[error("duplicate stock '{stock}' on {date}")]
    DuplicateStock { stock: String, date: NaiveDate },
    #[error("date {date} has {n} stocks; at least 2 required")]
    TooFewStocks { date: NaiveDate, n: usize },
    #[error("degenerate price for stock '{stock}' on {date}")]
    DegeneratePrice { stock: String, date: NaiveDate },
    #[error("horizon {k} outside the calendar of {len} dates")]
    BadHorizon { k: usize, len: usize },
    #[error("unknown date {0}")]
    UnknownDate(NaiveDate),
    #[error("cannot build {n_folds} folds from {n_dates} dates; need at least {min} dates")]
    TooFewDates {
        n_folds: usize,
        n_dates: usize,
        min: usize,
    },
    #[error("invalid synthetic config: {0}")]
    BadSyntheticConfig(String),
}

/// Name of a raw factor plus its style-group tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorName {
    pub name: String,
    pub group: String,
}

/// The six style groups used for grouping factors in reports.
pub const FACTOR_GROUPS: [&str; 6] = [
    "Value",
    "Growth",
    "Momentum",
    "Quality",
    "Size",
    "Liquidity",
];

/// One trading day's cross-section.
#[derive(Debug, Clone)]
pub struct PanelDay {
    pub stock_ids: Vec<String>,
    /// Row-major n*m factor exposures.
    pub factors: Vec<f64>,
    /// Volume-weighted average price per stock.
    pub prices: Vec<f64>,
    pub sectors: Vec<String>,
}

impl PanelDay {
    pub fn n_stocks(&self) -> usize {
        self.stock_ids.len()
    }

    pub fn factor_column(&self, j: usize, m: usize) -> Vec<f64> {
        (0..self.n_stocks()).map(|i| self.factors[i * m + j]).collect()
    }
}

/// Point-in-time panel of factor exposures, prices, and sector labels.
#[derive(Debug, Clone)]
pub struct FactorPanel {
    pub dates: Vec<NaiveDate>,
    pub factor_names: Vec<FactorName>,
    days: Vec<PanelDay>,
}

impl FactorPanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        factor_names: Vec<FactorName>,
        days: Vec<PanelDay>,
    ) -> Result<Self, DataError> {
        assert_eq!(dates.len(), days.len());
        for w in dates.windows(2) {
            assert!(w[0] < w[1], "dates must be strictly increasing");
        }
        let m = factor_names.len();
        for (t, day) in days.iter().enumerate() {
            let n = day.n_stocks();
            if n < 2 {
                return Err(DataError::TooFewStocks { date: dates[t], n });
            }
            let mut seen = std::collections::BTreeSet::new();
            for id in &day.stock_ids {
                if !seen.insert(id) {
                    return Err(DataError::DuplicateStock {
                        stock: id.clone(),
                        date: dates[t],
                    });
                }
            }
            assert_eq!(day.factors.len(), n * m);
            assert_eq!(day.prices.len(), n);
            assert_eq!(day.sectors.len(), n);
            assert!(
                day.factors.iter().all(|v| v.is_finite()),
                "factors must be finite after ingestion"
            );
        }
        Ok(FactorPanel {
            dates,
            factor_names,
            days,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn day(&self, t: usize) -> &PanelDay {
        &self.days[t]
    }

    pub fn date_index(&self, date: NaiveDate) -> Result<usize, DataError> {
        self.dates
            .binary_search(&date)
            .map_err(|_| DataError::UnknownDate(date))
    }

    /// Price of `stock` on date index `t`, if listed that day.
    pub fn price_of(&self, t: usize, stock: &str) -> Option<f64> {
        let day = &self.days[t];
        day.stock_ids
            .iter()
            .position(|s| s == stock)
            .map(|i| day.prices[i])
    }
}

/// Forward simple returns r_{t+k} = (p_{t+k} - p_{t+1}) / p_{t+1}, keyed by
/// (date index, horizon) and aligned to date t's stock order.
#[derive(Debug, Clone)]
pub struct ForwardReturns {
    pub horizons: Vec<usize>,
    table: BTreeMap<(usize, usize), Vec<f64>>,
}

impl ForwardReturns {
    pub fn get(&self, t: usize, k: usize) -> Option<&[f64]> {
        self.table.get(&(t, k)).map(|v| v.as_slice())
    }

    pub fn has(&self, t: usize, k: usize) -> bool {
        self.table.contains_key(&(t, k))
    }

    /// Date indices with returns available at every requested horizon.
    pub fn dates_with_all_horizons<'a>(
        &'a self,
        dates: impl IntoIterator<Item = usize> + 'a,
    ) -> Vec<usize> {
        dates
            .into_iter()
            .filter(|&t| self.horizons.iter().all(|&k| self.has(t, k)))
            .collect()
    }
}

/// Compute forward returns for each horizon.
///
/// An entry (t, k) exists only when dates t+1 and t+k are both in the
/// calendar and every stock listed at t has a price on both of them;
/// boundary dates are absent rather than NaN-padded.
pub fn compute_forward_returns(
    panel: &FactorPanel,
    horizons: &[usize],
) -> Result<ForwardReturns, DataError> {
    let len = panel.n_dates();
    for &k in horizons {
        if k < 1 || k > len {
            return Err(DataError::BadHorizon { k, len });
        }
    }
    let mut table = BTreeMap::new();
    for t in 0..len {
        for &k in horizons {
            if t + 1 >= len || t + k >= len {
                continue;
            }
            let day_t = panel.day(t);
            let mut rets = Vec::with_capacity(day_t.n_stocks());
            let mut complete = true;
            for (i, stock) in day_t.stock_ids.iter().enumerate() {
                let p_entry = panel.price_of(t + 1, stock);
                let p_exit = panel.price_of(t + k, stock);
                match (p_entry, p_exit) {
                    (Some(pe), Some(px)) => {
                        if pe == 0.0 {
                            return Err(DataError::DegeneratePrice {
                                stock: stock.clone(),
                                date: panel.dates[t + 1],
                            });
                        }
                        let _ = i;
                        rets.push((px - pe) / pe);
                    }
                    _ => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                table.insert((t, k), rets);
            }
        }
    }
    Ok(ForwardReturns {
        horizons: horizons.to_vec(),
        table,
    })
}

/// One chronological train/validation/test split. Indices refer to
/// positions in the panel's date vector.
#[derive(Debug, Clone)]
pub struct CvSplit {
    pub fold_index: usize,
    pub train_dates: Vec<usize>,
    pub valid_dates: Vec<usize>,
    pub test_dates: Vec<usize>,
}

/// Partition the calendar into `n_folds` contiguous groups and build one
/// split per group: fold i trains on all earlier groups, holds out the
/// trailing `valid_fraction` of that range for validation, and tests on
/// group i. Fold 0 has no training data and is skipped. Validation dates
/// that fall inside the test range are removed.
pub fn make_cv_splits(
    panel: &FactorPanel,
    n_folds: usize,
    valid_fraction: f64,
) -> Result<Vec<CvSplit>, DataError> {
    let n_dates = panel.n_dates();
    if n_folds < 2 || n_dates < n_folds {
        return Err(DataError::TooFewDates {
            n_folds,
            n_dates,
            min: n_folds.max(2),
        });
    }
    assert!((0.0..1.0).contains(&valid_fraction));
    let base = n_dates / n_folds;
    let rem = n_dates % n_folds;
    let mut groups = Vec::with_capacity(n_folds);
    let mut start = 0;
    for g in 0..n_folds {
        let size = base + usize::from(g < rem);
        groups.push((start, start + size));
        start += size;
    }
    let mut splits = Vec::new();
    for fold in 1..n_folds {
        let (test_start, test_end) = groups[fold];
        let train_range: Vec<usize> = (0..test_start).collect();
        let n_valid = ((train_range.len() as f64 * valid_fraction).floor() as usize)
            .min(train_range.len().saturating_sub(1));
        let split_at = train_range.len() - n_valid;
        let train_dates = train_range[..split_at].to_vec();
        let mut valid_dates = train_range[split_at..].to_vec();
        let test_dates: Vec<usize> = (test_start..test_end).collect();
        valid_dates.retain(|d| !test_dates.contains(d));
        splits.push(CvSplit {
            fold_index: fold,
            train_dates,
            valid_dates,
            test_dates,
        });
    }
    Ok(splits)
}

/// File locations for a CSV-backed panel.
#[derive(Debug, Clone)]
pub struct PanelPaths {
    pub factors: PathBuf,
    pub prices: PathBuf,
    pub sectors: PathBuf,
    /// Optional `factor_name,group` mapping.
    pub groups: Option<PathBuf>,
}

/// Load a panel from the factors/prices/sectors CSVs.
///
/// Missing factor cells (empty or `NaN`) are imputed to the per-date
/// cross-sectional median of that factor.
pub fn load_panel(paths: &PanelPaths) -> Result<FactorPanel, DataError> {
    let factors = read_factor_csv(&paths.factors)?;
    let prices = read_keyed_csv(&paths.prices, "vwap")?;
    let sectors = read_keyed_string_csv(&paths.sectors, "sector")?;
    let group_map = match &paths.groups {
        Some(p) => Some(read_group_csv(p)?),
        None => None,
    };

    // All three files must cover the same dates.
    let fd: Vec<NaiveDate> = factors.rows.keys().cloned().collect();
    let pd: Vec<NaiveDate> = prices.keys().cloned().collect();
    let sd: Vec<NaiveDate> = sectors.keys().cloned().collect();
    if fd != pd || fd != sd {
        let mut offending: Vec<String> = Vec::new();
        for d in fd.iter().chain(&pd).chain(&sd) {
            let in_all = factors.rows.contains_key(d)
                && prices.contains_key(d)
                && sectors.contains_key(d);
            let label = d.to_string();
            if !in_all && !offending.contains(&label) {
                offending.push(label);
            }
        }
        offending.sort();
        return Err(DataError::Alignment { dates: offending });
    }

    let m = factors.names.len();
    let mut dates = Vec::new();
    let mut days = Vec::new();
    for (date, stock_rows) in &factors.rows {
        let price_rows = &prices[date];
        let sector_rows = &sectors[date];
        let mut stock_ids: Vec<String> = stock_rows.keys().cloned().collect();
        stock_ids.sort();
        let pids: Vec<String> = {
            let mut v: Vec<String> = price_rows.keys().cloned().collect();
            v.sort();
            v
        };
        let sids: Vec<String> = {
            let mut v: Vec<String> = sector_rows.keys().cloned().collect();
            v.sort();
            v
        };
        if stock_ids != pids || stock_ids != sids {
            return Err(DataError::Alignment {
                dates: vec![date.to_string()],
            });
        }
        let n = stock_ids.len();
        if n < 2 {
            return Err(DataError::TooFewStocks { date: *date, n });
        }
        // Median imputation per factor column.
        let mut matrix = vec![0.0; n * m];
        for j in 0..m {
            let mut present: Vec<f64> = stock_ids
                .iter()
                .filter_map(|s| stock_rows[s][j])
                .collect();
            present.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = median_of_sorted(&present);
            for (i, s) in stock_ids.iter().enumerate() {
                matrix[i * m + j] = stock_rows[s][j].unwrap_or(median);
            }
        }
        let day_prices: Vec<f64> = stock_ids.iter().map(|s| price_rows[s]).collect();
        let day_sectors: Vec<String> = stock_ids.iter().map(|s| sector_rows[s].clone()).collect();
        dates.push(*date);
        days.push(PanelDay {
            stock_ids,
            factors: matrix,
            prices: day_prices,
            sectors: day_sectors,
        });
    }

    let factor_names = factors
        .names
        .iter()
        .map(|name| FactorName {
            name: name.clone(),
            group: group_map
                .as_ref()
                .and_then(|g| g.get(name).cloned())
                .unwrap_or_else(|| "Ungrouped".to_string()),
        })
        .collect();
    FactorPanel::new(dates, factor_names, days)
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

struct FactorCsv {
    names: Vec<String>,
    /// date -> stock -> per-factor optional value (None = missing cell).
    rows: BTreeMap<NaiveDate, BTreeMap<String, Vec<Option<f64>>>>,
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn csv_err(path: &Path, source: csv::Error) -> DataError {
    DataError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn read_factor_csv(path: &Path) -> Result<FactorCsv, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "date" || cols[1] != "stock_id" {
        return Err(DataError::Schema {
            file: path.display().to_string(),
            expected: "date,stock_id,<factor...>".into(),
            found: cols.join(","),
        });
    }
    let names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut rows: BTreeMap<NaiveDate, BTreeMap<String, Vec<Option<f64>>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let date = parse_date(path, record.get(0).unwrap_or(""))?;
        let stock = record.get(1).unwrap_or("").to_string();
        let mut vals = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            let raw = record.get(2 + j).unwrap_or("").trim();
            if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
                vals.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| DataError::BadNumber {
                    file: path.display().to_string(),
                    column: name.clone(),
                    value: raw.to_string(),
                })?;
                vals.push(if v.is_nan() { None } else { Some(v) });
            }
        }
        rows.entry(date).or_default().insert(stock, vals);
    }
    Ok(FactorCsv { names, rows })
}

fn read_keyed_csv(
    path: &Path,
    value_col: &str,
) -> Result<BTreeMap<NaiveDate, BTreeMap<String, f64>>, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["date", "stock_id", value_col] {
        return Err(DataError::Schema {
            file: path.display().to_string(),
            expected: format!("date,stock_id,{value_col}"),
            found: cols.join(","),
        });
    }
    let mut rows: BTreeMap<NaiveDate, BTreeMap<String, f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let date = parse_date(path, record.get(0).unwrap_or(""))?;
        let stock = record.get(1).unwrap_or("").to_string();
        let raw = record.get(2).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| DataError::BadNumber {
            file: path.display().to_string(),
            column: value_col.to_string(),
            value: raw.to_string(),
        })?;
        rows.entry(date).or_default().insert(stock, v);
    }
    Ok(rows)
}

fn read_keyed_string_csv(
    path: &Path,
    value_col: &str,
) -> Result<BTreeMap<NaiveDate, BTreeMap<String, String>>, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["date", "stock_id", value_col] {
        return Err(DataError::Schema {
            file: path.display().to_string(),
            expected: format!("date,stock_id,{value_col}"),
            found: cols.join(","),
        });
    }
    let mut rows: BTreeMap<NaiveDate, BTreeMap<String, String>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let date = parse_date(path, record.get(0).unwrap_or(""))?;
        let stock = record.get(1).unwrap_or("").to_string();
        let v = record.get(2).unwrap_or("").to_string();
        rows.entry(date).or_default().insert(stock, v);
    }
    Ok(rows)
}

fn read_group_csv(path: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["factor_name", "group"] {
        return Err(DataError::Schema {
            file: path.display().to_string(),
            expected: "factor_name,group".into(),
            found: cols.join(","),
        });
    }
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        map.insert(
            record.get(0).unwrap_or("").to_string(),
            record.get(1).unwrap_or("").to_string(),
        );
    }
    Ok(map)
}

fn parse_date(path: &Path, raw: &str) -> Result<NaiveDate, DataError> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| DataError::BadDate {
        file: path.display().to_string(),
        value: raw.to_string(),
    })
}
