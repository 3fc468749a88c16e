use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, FinError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellStatus {
    Observed,
    Missing,
    BelowLod,
}

/// Response, exposures with per-cell status, detection limits and optional
/// covariates, all on the modeling scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    /// `n x p`; entries whose status is not `Observed` are ignored.
    pub x: DMatrix<f64>,
    pub status: DMatrix<CellStatus>,
    /// Per-column detection limit, required for columns holding below-LOD cells.
    pub lod: Vec<Option<f64>>,
    /// `n x q` covariates entering the response only.
    pub z: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        status: DMatrix<CellStatus>,
        lod: Vec<Option<f64>>,
        z: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 {
            return Err(invalid(format!("need at least 2 rows, got {n}")));
        }
        if y.len() != n {
            return Err(invalid(format!("y has {} entries but X has {n} rows", y.len())));
        }
        if status.shape() != (n, p) {
            return Err(invalid(format!("status is {:?} but X is {:?}", status.shape(), (n, p))));
        }
        if lod.len() != p {
            return Err(invalid(format!("lod has {} entries but p = {p}", lod.len())));
        }
        if let Some(z) = &z {
            if z.nrows() != n {
                return Err(invalid(format!("Z has {} rows but n = {n}", z.nrows())));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(invalid("Z must be finite"));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("y must be finite"));
        }
        for j in 0..p {
            for i in 0..n {
                match status[(i, j)] {
                    CellStatus::Observed if !x[(i, j)].is_finite() => {
                        return Err(invalid(format!("observed cell ({i}, {j}) is not finite")));
                    }
                    CellStatus::BelowLod if !lod[j].is_some_and(f64::is_finite) => {
                        return Err(FinError::Config(format!(
                            "column {j} has below-LOD cells but no finite detection limit"
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { y, x, status, lod, z })
    }

    pub fn fully_observed(y: DVector<f64>, x: DMatrix<f64>, z: Option<DMatrix<f64>>) -> Result<Self> {
        let (n, p) = x.shape();
        Self::new(y, x, DMatrix::from_element(n, p, CellStatus::Observed), vec![None; p], z)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.as_ref().map_or(0, |z| z.ncols())
    }

    pub fn is_complete(&self) -> bool {
        self.status.iter().all(|s| *s == CellStatus::Observed)
    }

    pub fn incomplete_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.p() {
            for i in 0..self.n() {
                if self.status[(i, j)] != CellStatus::Observed {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Column means over observed cells (0 for a column with none).
    pub fn observed_column_means(&self) -> DVector<f64> {
        DVector::from_fn(self.p(), |j, _| {
            let vals: Vec<f64> = (0..self.n())
                .filter(|&i| self.status[(i, j)] == CellStatus::Observed)
                .map(|i| self.x[(i, j)])
                .collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
    }
}
