//! Ridge and L2-penalized logistic regression with an unpenalized intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::gbt::{sigmoid, softplus};
use crate::matrix::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Ridge,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub l2_lambda: f64,
    pub kind: LinearKind,
}

impl LinearModel {
    pub fn decision_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Fitted value (ridge) or positive-class probability (logistic).
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let z = self.decision_row(x);
        match self.kind {
            LinearKind::Ridge => z,
            LinearKind::Logistic => sigmoid(z),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.rows().map(|r| self.predict_row(r)).collect()
    }
}

/// Solves `a z = b` for symmetric `a`, refusing numerically singular systems.
fn spd_solve(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = a.cholesky().ok_or_else(|| singular(what))?;
    let l = chol.l_dirty();
    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(singular(what));
    }
    Ok(chol.solve(&b))
}

fn singular(what: &str) -> Error {
    Error::Singular(format!(
        "{what}: normal equations are singular; use a positive L2 penalty (lambda > 0)"
    ))
}

pub fn ridge_fit(x: &Matrix, y: &[f64], lambda: f64) -> Result<LinearModel> {
    ridge_fit_weighted(x, y, None, lambda)
}

/// Minimizes `sum_i w_i (x_i . beta + b - y_i)^2 + lambda |beta|^2`.
pub fn ridge_fit_weighted(
    x: &Matrix,
    y: &[f64],
    weights: Option<&[f64]>,
    lambda: f64,
) -> Result<LinearModel> {
    let (n, d) = (x.n_rows(), x.n_cols());
    if n == 0 || y.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::invalid("ridge needs at least one row with matching targets"));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid("ridge lambda must be a finite value >= 0"));
    }
    let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..n).map(w_of).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("ridge weights must have a positive sum"));
    }
    let mut mean_x = vec![0.0; d];
    let mut mean_y = 0.0;
    for i in 0..n {
        let wi = w_of(i);
        for (m, v) in mean_x.iter_mut().zip(x.row(i)) {
            *m += wi * v;
        }
        mean_y += wi * y[i];
    }
    mean_x.iter_mut().for_each(|m| *m /= total);
    mean_y /= total;

    let xc = DMatrix::from_fn(n, d, |i, j| (x.get(i, j) - mean_x[j]) * w_of(i).sqrt());
    let yc = DVector::from_fn(n, |i, _| (y[i] - mean_y) * w_of(i).sqrt());
    let mut a = xc.tr_mul(&xc);
    for j in 0..d {
        a[(j, j)] += lambda;
    }
    let rhs = xc.tr_mul(&yc);
    let beta = if d == 0 {
        DVector::zeros(0)
    } else {
        spd_solve(a, rhs, "ridge")?
    };
    let intercept = mean_y - beta.iter().zip(&mean_x).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearModel {
        weights: beta.iter().copied().collect(),
        intercept,
        l2_lambda: lambda,
        kind: LinearKind::Ridge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub l2_lambda: f64,
    pub max_iter: usize,
    /// Converged once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1.0,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

/// Penalized negative log-likelihood: `sum_i logloss_i + lambda/2 |w|^2`.
pub fn logistic_objective(x: &Matrix, y: &[f64], m: &LinearModel) -> f64 {
    let nll: f64 = x
        .rows()
        .zip(y)
        .map(|(r, t)| {
            let z = m.decision_row(r);
            softplus(z) - t * z
        })
        .sum();
    nll + 0.5 * m.l2_lambda * m.weights.iter().map(|w| w * w).sum::<f64>()
}

pub fn logistic_fit(x: &Matrix, y: &[f64], cfg: &LogisticConfig) -> Result<LinearModel> {
    let (n, d) = (x.n_rows(), x.n_cols());
    if n == 0 || y.len() != n {
        return Err(Error::invalid("logistic fit needs rows with matching targets"));
    }
    if y.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid("logistic fit needs 0/1 targets"));
    }
    let pos = y.iter().filter(|&&t| t == 1.0).count();
    if pos == 0 || pos == n {
        return Err(Error::invalid("logistic fit needs both classes in the targets"));
    }
    if !(cfg.l2_lambda >= 0.0) {
        return Err(Error::invalid("logistic lambda must be >= 0"));
    }
    let mut model = LinearModel {
        weights: vec![0.0; d],
        intercept: 0.0,
        l2_lambda: cfg.l2_lambda,
        kind: LinearKind::Logistic,
    };
    if cfg.max_iter == 0 {
        return Ok(model);
    }
    // Column d is the intercept.
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x.get(i, j) } else { 1.0 });
    let yv = DVector::from_column_slice(y);
    let mut obj = logistic_objective(x, y, &model);
    for _ in 0..cfg.max_iter {
        let theta = params(&model);
        let z = &xa * &theta;
        let p = z.map(sigmoid);
        let mut grad = xa.tr_mul(&(&p - &yv));
        for j in 0..d {
            grad[j] += cfg.l2_lambda * theta[j];
        }
        if grad.norm() < cfg.tol {
            break;
        }
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let xs = DMatrix::from_fn(n, d + 1, |i, j| xa[(i, j)] * s[i]);
        let mut h = xa.tr_mul(&xs);
        for j in 0..d {
            h[(j, j)] += cfg.l2_lambda;
        }
        // keeps separable data at lambda = 0 solvable
        let ridge = 1e-10 * h.diagonal().amax().max(1.0);
        for j in 0..=d {
            h[(j, j)] += ridge;
        }
        let step = spd_solve(h, grad.clone(), "logistic")?;
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = set_params(&model, &(&theta - &step * t));
            let c_obj = logistic_objective(x, y, &cand);
            if c_obj <= obj - 1e-4 * t * slope {
                model = cand;
                obj = c_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(model)
}

fn params(m: &LinearModel) -> DVector<f64> {
    let d = m.weights.len();
    DVector::from_fn(d + 1, |j, _| if j < d { m.weights[j] } else { m.intercept })
}

fn set_params(m: &LinearModel, theta: &DVector<f64>) -> LinearModel {
    let d = m.weights.len();
    LinearModel {
        weights: theta.rows(0, d).iter().copied().collect(),
        intercept: theta[d],
        ..m.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    /// Gaussian elimination with partial pivoting on the augmented normal
    /// equations `[X 1]^T [X 1] z = [X 1]^T y` plus the ridge term.
    fn oracle(x: &Matrix, y: &[f64], lambda: f64) -> Vec<f64> {
        let (n, d) = (x.n_rows(), x.n_cols());
        let col = |i: usize, j: usize| if j < d { x.get(i, j) } else { 1.0 };
        let m = d + 1;
        let mut a = vec![vec![0.0; m + 1]; m];
        for r in 0..m {
            for c in 0..m {
                a[r][c] = (0..n).map(|i| col(i, r) * col(i, c)).sum();
            }
            if r < d {
                a[r][r] += lambda;
            }
            a[r][m] = (0..n).map(|i| col(i, r) * y[i]).sum();
        }
        for k in 0..m {
            let piv = (k..m)
                .max_by(|&p, &q| a[p][k].abs().total_cmp(&a[q][k].abs()))
                .unwrap();
            a.swap(k, piv);
            for r in 0..m {
                if r != k {
                    let f = a[r][k] / a[k][k];
                    for c in k..=m {
                        a[r][c] -= f * a[k][c];
                    }
                }
            }
        }
        (0..m).map(|r| a[r][m] / a[r][r]).collect()
    }

    fn random(n: usize, d: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = rng_from(seed);
        let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        (x, y)
    }

    #[test]
    fn ridge_zero_lambda_matches_oracle() {
        let (x, y) = random(10, 5, 1);
        let m = ridge_fit(&x, &y, 0.0).unwrap();
        let z = oracle(&x, &y, 0.0);
        for j in 0..5 {
            assert!((m.weights[j] - z[j]).abs() < 1e-8);
        }
        assert!((m.intercept - z[5]).abs() < 1e-8);
    }

    #[test]
    fn ridge_positive_lambda_matches_oracle() {
        let (x, y) = random(30, 4, 2);
        let m = ridge_fit(&x, &y, 3.5).unwrap();
        let z = oracle(&x, &y, 3.5);
        for j in 0..4 {
            assert!((m.weights[j] - z[j]).abs() < 1e-8);
        }
        assert!((m.intercept - z[4]).abs() < 1e-8);
    }

    #[test]
    fn identity_design() {
        let x = Matrix::new(4, 4, vec![
            1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ])
        .unwrap();
        let y = [3.0, -1.0, 4.0, 2.0];
        let err = ridge_fit(&x, &y, 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert!(err.to_string().contains("lambda > 0"));
        // With a vanishing penalty the fit interpolates: w = y - mean(y), b = mean(y).
        let m = ridge_fit(&x, &y, 1e-9).unwrap();
        let mean = 2.0;
        for (w, t) in m.weights.iter().zip(&y) {
            assert!((w - (t - mean)).abs() < 1e-6);
        }
        assert!((m.intercept - mean).abs() < 1e-6);
        for (p, t) in m.predict(&x).iter().zip(&y) {
            assert!((p - t).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_lambda_shrinks_to_mean() {
        let (x, y) = random(20, 3, 3);
        let m = ridge_fit(&x, &y, 1e12).unwrap();
        let norm: f64 = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-6);
        let mean = y.iter().sum::<f64>() / 20.0;
        assert!(m.predict(&x).iter().all(|p| (p - mean).abs() < 1e-4));
    }

    #[test]
    fn duplicates_equal_weights() {
        let (x, y) = random(8, 2, 4);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut w = Vec::new();
        for i in 0..8 {
            let times = 1 + i % 3;
            w.push(times as f64);
            for _ in 0..times {
                rows.push(x.row(i).to_vec());
                ys.push(y[i]);
            }
        }
        let dup = ridge_fit(&Matrix::from_rows(&rows).unwrap(), &ys, 0.5).unwrap();
        let wtd = ridge_fit_weighted(&x, &y, Some(&w), 0.5).unwrap();
        for (a, b) in dup.weights.iter().zip(&wtd.weights) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((dup.intercept - wtd.intercept).abs() < 1e-10);
    }

    #[test]
    fn logistic_zero_iterations() {
        let (x, _) = random(10, 3, 5);
        let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let cfg = LogisticConfig {
            max_iter: 0,
            ..LogisticConfig::default()
        };
        let m = logistic_fit(&x, &y, &cfg).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert!(m.predict(&x).iter().all(|&p| p == 0.5));
    }

    #[test]
    fn logistic_separable_ranks_perfectly() {
        let x = Matrix::new(10, 1, (0..10).map(f64::from).collect()).unwrap();
        let y: Vec<f64> = (0..10).map(|i| (i >= 5) as u8 as f64).collect();
        let m = logistic_fit(&x, &y, &LogisticConfig::default()).unwrap();
        let p = m.predict(&x);
        for i in 0..5 {
            for j in 5..10 {
                assert!(p[j] > p[i]);
            }
        }
    }

    #[test]
    fn logistic_improves_on_zero_and_single_class_errors() {
        let mut rng = rng_from(6);
        let (x, _) = random(200, 4, 6);
        let y: Vec<f64> = x
            .rows()
            .map(|r| (rng.random::<f64>() < sigmoid(r[0] - 0.5 * r[1])) as u8 as f64)
            .collect();
        let cfg = LogisticConfig::default();
        let m = logistic_fit(&x, &y, &cfg).unwrap();
        let zero = LinearModel {
            weights: vec![0.0; 4],
            intercept: 0.0,
            ..m.clone()
        };
        assert!(logistic_objective(&x, &y, &m) <= logistic_objective(&x, &y, &zero));
        assert!(logistic_fit(&x, &[1.0; 200], &cfg).is_err());
    }
}
