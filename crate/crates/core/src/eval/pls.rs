//! PLS2 regression by NIPALS.

use nalgebra::{DMatrix, DVector};

use super::{EvalError, Result};

const MAX_ITER: usize = 500;
const TOL: f64 = 1e-12;
const RANK_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PlsModel {
    /// Components actually extracted (≤ requested).
    pub n_components: usize,
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
    /// X weights `W` (d × k), loadings `P` (d × k), Y loadings `C` (F × k).
    pub weights: DMatrix<f64>,
    pub x_loadings: DMatrix<f64>,
    pub y_loadings: DMatrix<f64>,
    /// Training scores `T` (N × k).
    pub scores: DMatrix<f64>,
    /// Regression coefficients `W (PᵀW)⁻¹ Cᵀ` (d × F).
    pub coef: DMatrix<f64>,
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn center(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut c) in out.column_iter_mut().enumerate() {
        c.add_scalar_mut(-mean[j]);
    }
    out
}

/// Fits PLS2 on mean-centred data. Extraction stops early when the
/// residual covariance vanishes.
pub fn pls_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, n_components: usize) -> Result<PlsModel> {
    let (n, d) = x.shape();
    if y.nrows() != n || n < 2 {
        return Err(EvalError::Input(format!("PLS needs matching row counts ≥ 2 (X {n}, Y {})", y.nrows())));
    }
    if n_components == 0 || n_components > (n - 1).min(d) {
        return Err(EvalError::Input(format!(
            "PLS components {n_components} outside 1..={}",
            (n - 1).min(d)
        )));
    }
    let f = y.ncols();
    let x_mean = column_means(x);
    let y_mean = column_means(y);
    let mut xr = center(x, &x_mean);
    let mut yr = center(y, &y_mean);
    let (mut ws, mut ps, mut cs, mut ts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_components {
        // start from the Y column with the largest residual variance
        let start = (0..f)
            .max_by(|&a, &b| yr.column(a).norm_squared().total_cmp(&yr.column(b).norm_squared()))
            .unwrap_or(0);
        if f == 0 || yr.column(start).norm() < RANK_EPS {
            break;
        }
        let mut u: DVector<f64> = yr.column(start).into_owned();
        let mut t = DVector::zeros(n);
        let mut w = DVector::zeros(d);
        let mut ok = false;
        for _ in 0..MAX_ITER {
            w = xr.tr_mul(&u);
            let wn = w.norm();
            if wn < RANK_EPS {
                break;
            }
            w /= wn;
            let t_new = &xr * &w;
            let tt = t_new.norm_squared();
            if tt < RANK_EPS {
                break;
            }
            let c = yr.tr_mul(&t_new) / tt;
            let cc = c.norm_squared();
            if cc < RANK_EPS * RANK_EPS {
                break;
            }
            u = &yr * &c / cc;
            let delta = (&t_new - &t).norm() / t_new.norm();
            t = t_new;
            ok = true;
            if delta < TOL {
                break;
            }
        }
        if !ok {
            break;
        }
        let tt = t.norm_squared();
        let p = xr.tr_mul(&t) / tt;
        let c = yr.tr_mul(&t) / tt;
        xr -= &t * p.transpose();
        yr -= &t * c.transpose();
        ws.push(w);
        ps.push(p);
        cs.push(c);
        ts.push(t);
    }
    let k = ws.len();
    let cols = |v: &[DVector<f64>], rows: usize| {
        if v.is_empty() {
            DMatrix::zeros(rows, 0)
        } else {
            DMatrix::from_columns(v)
        }
    };
    let weights = cols(&ws, d);
    let x_loadings = cols(&ps, d);
    let y_loadings = cols(&cs, f);
    let scores = cols(&ts, n);
    let coef = if k == 0 {
        DMatrix::zeros(d, f)
    } else {
        let ptw = x_loadings.tr_mul(&weights);
        let inv = ptw
            .try_inverse()
            .ok_or_else(|| EvalError::Input("PLS loadings are singular".into()))?;
        &weights * inv * y_loadings.transpose()
    };
    Ok(PlsModel {
        n_components: k,
        x_mean,
        y_mean,
        weights,
        x_loadings,
        y_loadings,
        scores,
        coef,
    })
}

impl PlsModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = center(x, &self.x_mean) * &self.coef;
        for (j, mut c) in out.column_iter_mut().enumerate() {
            c.add_scalar_mut(self.y_mean[j]);
        }
        out
    }
}
