use std::collections::HashMap;
use std::path::Path;

use anyhow::Context;
use fin_core::model::select_k;
use fin_core::sampler::{CellStatus, Dataset};
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

/// Per-column affine maps from the raw scale to the modeling scale:
/// `(log10(v) if flagged) - mean) / sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub y_mean: f64,
    pub y_sd: f64,
    pub x_log10: Vec<bool>,
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_sd: Vec<f64>,
}

impl Transform {
    pub fn x(&self, j: usize, raw: f64) -> f64 {
        let v = if self.x_log10[j] { raw.log10() } else { raw };
        (v - self.x_mean[j]) / self.x_sd[j]
    }

    pub fn y_back(&self, v: f64) -> f64 {
        v * self.y_sd + self.y_mean
    }
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub exposure_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub transform: Transform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cell {
    Value(f64),
    Missing,
    BelowLod,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> anyhow::Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.with_context(|| format!("reading {}", path.display()))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str, file: &Path) -> Result<usize, CliError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("column {name:?} not found in {}", file.display())))
    }

    fn cells(&self, col: usize) -> Result<Vec<Cell>, CliError> {
        let name = &self.headers[col];
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = r[col].as_str();
                match s {
                    "" | "NA" => Ok(Cell::Missing),
                    "<LOD" => Ok(Cell::BelowLod),
                    _ => s.parse::<f64>().map(Cell::Value).map_err(|_| {
                        CliError::Data(format!("row {}, column {name:?}: cannot parse {s:?} as a number", i + 1))
                    }),
                }
            })
            .collect()
    }
}

fn read_lod_file(path: &Path) -> anyhow::Result<HashMap<String, f64>> {
    let t = Table::read(path)?;
    let c = t.column("column", path)?;
    let v = t.column("lod", path)?;
    let mut out = HashMap::new();
    for (i, r) in t.rows.iter().enumerate() {
        let lod: f64 = r[v]
            .parse()
            .map_err(|_| CliError::Data(format!("{} row {}: bad detection limit {:?}", path.display(), i + 1, r[v])))?;
        out.insert(r[c].clone(), lod);
    }
    Ok(out)
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    (m, var.sqrt(), n)
}

fn scale(standardize: bool, name: &str, values: impl Iterator<Item = f64>) -> Result<(f64, f64), CliError> {
    if !standardize {
        return Ok((0.0, 1.0));
    }
    let (m, sd, n) = mean_sd(values);
    if n < 2 || !(sd > 0.0) {
        return Err(CliError::Data(format!("column {name:?} has zero observed variance")));
    }
    Ok((m, sd))
}

fn fully_observed(name: &str, cells: &[Cell]) -> Result<Vec<f64>, CliError> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| match c {
            Cell::Value(v) => Ok(*v),
            _ => Err(CliError::Data(format!("row {}, column {name:?}: value required", i + 1))),
        })
        .collect()
}

/// Reads the response, exposures and covariates named in `config`, applies
/// `log10` to flagged exposures and then standardizes every column.
pub fn load_dataset(config: &RunConfig) -> anyhow::Result<LoadedData> {
    let table = Table::read(&config.data)?;
    let n = table.rows.len();
    let y_col = table.column(&config.response, &config.data)?;
    let cov_table = config.covariate_file.as_ref().map(|p| Table::read(p).map(|t| (t, p))).transpose()?;
    let exposure_names: Vec<String> = if config.exposures.is_empty() {
        table
            .headers
            .iter()
            .filter(|h| **h != config.response && !config.covariates.contains(h))
            .cloned()
            .collect()
    } else {
        config.exposures.clone()
    };
    if exposure_names.is_empty() {
        return Err(CliError::Config("no exposure columns".into()).into());
    }
    for name in &config.log10 {
        if !exposure_names.contains(name) {
            return Err(CliError::Config(format!("log10 column {name:?} is not an exposure")).into());
        }
    }
    let lods = config.lod_file.as_deref().map(read_lod_file).transpose()?.unwrap_or_default();
    for name in lods.keys() {
        if !exposure_names.contains(name) {
            return Err(CliError::Config(format!("detection limit given for unknown exposure {name:?}")).into());
        }
    }

    let y_raw = fully_observed(&config.response, &table.cells(y_col)?)?;
    let (y_mean, y_sd) = scale(config.standardize, &config.response, y_raw.iter().copied())?;
    let y = DVector::from_iterator(n, y_raw.iter().map(|v| (v - y_mean) / y_sd));

    let p = exposure_names.len();
    let mut x = DMatrix::zeros(n, p);
    let mut status = DMatrix::from_element(n, p, CellStatus::Observed);
    let mut lod = vec![None; p];
    let mut x_log10 = vec![false; p];
    let mut x_mean = vec![0.0; p];
    let mut x_sd = vec![1.0; p];
    for (j, name) in exposure_names.iter().enumerate() {
        let col = table.column(name, &config.data)?;
        let log = config.log10.contains(name);
        x_log10[j] = log;
        let cells = table.cells(col)?;
        let tf = |v: f64, what: &str| -> Result<f64, CliError> {
            if !log {
                return Ok(v);
            }
            if !(v > 0.0) {
                return Err(CliError::Data(format!("{what} in column {name:?}: log10 of non-positive value {v}")));
            }
            Ok(v.log10())
        };
        if !lods.contains_key(name) && cells.contains(&Cell::BelowLod) {
            return Err(CliError::Config(format!(
                "column {name:?} has \"<LOD\" cells but no detection limit in the LOD file"
            ))
            .into());
        }
        let mut logged = Vec::with_capacity(n);
        for (i, c) in cells.iter().enumerate() {
            logged.push(match c {
                Cell::Value(v) => Cell::Value(tf(*v, &format!("row {}", i + 1))?),
                other => *other,
            });
        }
        let (m, sd) = scale(
            config.standardize,
            name,
            logged.iter().filter_map(|c| if let Cell::Value(v) = c { Some(*v) } else { None }),
        )?;
        x_mean[j] = m;
        x_sd[j] = sd;
        if let Some(&l) = lods.get(name) {
            lod[j] = Some((tf(l, "detection limit")? - m) / sd);
        }
        for (i, c) in logged.iter().enumerate() {
            match c {
                Cell::Value(v) => x[(i, j)] = (v - m) / sd,
                Cell::Missing => status[(i, j)] = CellStatus::Missing,
                Cell::BelowLod => status[(i, j)] = CellStatus::BelowLod,
            }
        }
    }

    let (z_table, z_path) = match &cov_table {
        Some((t, p)) => (t, p.as_path()),
        None => (&table, config.data.as_path()),
    };
    if z_table.rows.len() != n {
        return Err(CliError::Data(format!(
            "covariate file has {} rows but the data file has {n}",
            z_table.rows.len()
        ))
        .into());
    }
    let q = config.covariates.len();
    let mut z_mean = vec![0.0; q];
    let mut z_sd = vec![1.0; q];
    let z = if q == 0 {
        None
    } else {
        let mut z = DMatrix::zeros(n, q);
        for (c, name) in config.covariates.iter().enumerate() {
            let col = z_table.column(name, z_path)?;
            let vals = fully_observed(name, &z_table.cells(col)?)?;
            let (m, sd) = scale(config.standardize, name, vals.iter().copied())?;
            z_mean[c] = m;
            z_sd[c] = sd;
            for i in 0..n {
                z[(i, c)] = (vals[i] - m) / sd;
            }
        }
        Some(z)
    };

    let dataset = Dataset::new(y, x, status, lod, z)?;
    let n_inc = dataset.incomplete_cells().len();
    info!("loaded {n} rows, {p} exposures, {q} covariates, {n_inc} missing or below-LOD cells");
    Ok(LoadedData {
        dataset,
        exposure_names,
        covariate_names: config.covariates.clone(),
        transform: Transform { y_mean, y_sd, x_log10, x_mean, x_sd, z_mean, z_sd },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSelection {
    pub k: usize,
    /// Share of the singular-value total captured by the first `k`.
    pub explained: f64,
    pub singular_values: Vec<f64>,
}

/// Pairwise-complete correlation matrix of the observed exposure cells.
pub fn pairwise_correlation(data: &LoadedData) -> anyhow::Result<DMatrix<f64>> {
    let d = &data.dataset;
    let (n, p) = (d.n(), d.p());
    let obs = |i: usize, j: usize| d.status[(i, j)] == CellStatus::Observed;
    for j in 0..p {
        let (_, sd, m) = mean_sd((0..n).filter(|&i| obs(i, j)).map(|i| d.x[(i, j)]));
        if m < 2 || !(sd > 0.0) {
            return Err(CliError::Data(format!("column {:?} has zero observed variance", data.exposure_names[j])).into());
        }
    }
    let mut r = DMatrix::identity(p, p);
    for a in 0..p {
        for b in a + 1..p {
            let rows: Vec<usize> = (0..n).filter(|&i| obs(i, a) && obs(i, b)).collect();
            let (ma, sa, m) = mean_sd(rows.iter().map(|&i| d.x[(i, a)]));
            let (mb, sb, _) = mean_sd(rows.iter().map(|&i| d.x[(i, b)]));
            let c = if m < 3 || !(sa > 0.0 && sb > 0.0) {
                warn!(
                    "too few joint observations for {:?} and {:?}; correlation set to 0",
                    data.exposure_names[a], data.exposure_names[b]
                );
                0.0
            } else {
                rows.iter().map(|&i| (d.x[(i, a)] - ma) * (d.x[(i, b)] - mb)).sum::<f64>() / ((m - 1) as f64 * sa * sb)
            };
            r[(a, b)] = c;
            r[(b, a)] = c;
        }
    }
    Ok(r)
}

/// Smallest `k` whose leading singular values of the pairwise-complete
/// correlation matrix exceed `threshold` of their total.
pub fn auto_select_k(data: &LoadedData, threshold: f64) -> anyhow::Result<KSelection> {
    if data.dataset.p() < 2 {
        return Err(CliError::Data("automatic k needs at least two exposures".into()).into());
    }
    let r = pairwise_correlation(data)?;
    let mut sv: Vec<f64> = r.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let k = select_k(&sv, threshold)?;
    let explained = sv[..k].iter().sum::<f64>() / sv.iter().sum::<f64>();
    info!("selected k = {k} explaining {:.1}% of the variation", 100.0 * explained);
    Ok(KSelection { k, explained, singular_values: sv })
}
