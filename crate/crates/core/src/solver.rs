//! L2-regularized hinge-loss linear classifier trained by dual coordinate
//! descent, with an optional non-negativity constraint on the weights.
//!
//! The primal is `lambda/2 ||w||^2 + sum_i max(0, 1 - y_i w.x_i)` with no
//! bias term. Dividing by `lambda` gives the usual `1/2 ||w||^2 + C sum_i
//! hinge_i` with `C = 1/lambda`, whose dual is solved over `0 <= a_i <= C`
//! with `w = sum_i a_i y_i x_i`. Under `w >= 0` the stationarity condition
//! becomes `w = max(0, sum_i a_i y_i x_i)`; the dual stays concave with
//! curvature bounded by `||x_i||^2` per coordinate, so the same clipped
//! Newton step on each `a_i` still ascends.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GmpError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow<T> {
    pub indices: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseRow<T> {
    pub fn from_dense(x: &[T]) -> Self {
        let (indices, values) = x
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != T::zero())
            .map(|(i, &v)| (i as u32, v))
            .unzip();
        Self { indices, values }
    }

    #[inline]
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| w[i as usize] * v.widen())
            .sum()
    }

    fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v.widen() * v.widen()).sum()
    }
}

/// A binary classification problem with labels in {-1, +1}.
#[derive(Debug, Clone)]
pub struct SvmProblem<T> {
    dim: usize,
    rows: Vec<SparseRow<T>>,
    labels: Vec<i8>,
    pub lambda: T,
    pub nonneg: bool,
}

impl<T: Scalar> SvmProblem<T> {
    pub fn new(dim: usize, rows: Vec<SparseRow<T>>, labels: Vec<i8>, lambda: T, nonneg: bool) -> Result<Self> {
        if rows.is_empty() {
            return Err(GmpError::arg("SVM problem needs at least one example"));
        }
        if rows.len() != labels.len() {
            return Err(GmpError::arg("one label per example required"));
        }
        if labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(GmpError::arg("labels must be -1 or +1"));
        }
        if !(lambda >= T::zero()) {
            return Err(GmpError::arg(format!("lambda must be >= 0, got {lambda}")));
        }
        for r in &rows {
            if r.indices.len() != r.values.len() || r.indices.iter().any(|&i| i as usize >= dim) {
                return Err(GmpError::arg("feature index out of range"));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(GmpError::arg("features must be finite"));
            }
        }
        Ok(Self {
            dim,
            rows,
            labels,
            lambda,
            nonneg,
        })
    }

    pub fn from_dense(features: &[Vec<T>], labels: Vec<i8>, lambda: T, nonneg: bool) -> Result<Self> {
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != dim) {
            return Err(GmpError::arg("feature vectors differ in length"));
        }
        let rows = features.iter().map(|f| SparseRow::from_dense(f)).collect();
        Self::new(dim, rows, labels, lambda, nonneg)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[SparseRow<T>] {
        &self.rows
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmSolution<T> {
    pub weights: Vec<T>,
    pub objective: f64,
    /// Completed passes over the data.
    pub iterations: usize,
    /// Objective of the retained iterate after each pass.
    pub trace: Vec<f64>,
}

fn objective_f64<T: Scalar>(prob: &SvmProblem<T>, w: &[f64]) -> f64 {
    let reg = 0.5 * prob.lambda.widen() * w.iter().map(|x| x * x).sum::<f64>();
    let loss: f64 = prob
        .rows
        .iter()
        .zip(&prob.labels)
        .map(|(r, &y)| (1.0 - y as f64 * r.dot(w)).max(0.0))
        .sum();
    reg + loss
}

/// Exact primal objective at `w`.
pub fn primal_objective<T: Scalar>(prob: &SvmProblem<T>, w: &[T]) -> Result<f64> {
    if w.len() != prob.dim {
        return Err(GmpError::arg(format!(
            "weight vector has length {}, problem dimension is {}",
            w.len(),
            prob.dim
        )));
    }
    let w: Vec<f64> = w.iter().map(|v| v.widen()).collect();
    Ok(objective_f64(prob, &w))
}

/// Dual coordinate descent. Stops once the largest projected-gradient
/// magnitude seen in a pass falls below `tol`, or after `max_pass` passes.
/// Returns the iterate with the lowest primal objective among those seen at
/// the end of each pass (and `w = 0`).
pub fn svm_train<T: Scalar>(prob: &SvmProblem<T>, tol: f64, max_pass: usize, seed: u64) -> Result<SvmSolution<T>> {
    if !(tol > 0.0) {
        return Err(GmpError::arg("tolerance must be positive"));
    }
    let n = prob.rows.len();
    let lambda = prob.lambda.widen();
    let upper = if lambda > 0.0 { 1.0 / lambda } else { f64::INFINITY };
    let q: Vec<f64> = prob.rows.iter().map(SparseRow::sq_norm).collect();
    let mut alpha = vec![0f64; n];
    let mut v = vec![0f64; prob.dim];
    let mut w = vec![0f64; prob.dim];
    let mut order: Vec<usize> = (0..n).filter(|&i| q[i] > 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best_w = w.clone();
    let mut best = objective_f64(prob, &w);
    let mut trace = Vec::new();
    let mut passes = 0;
    while passes < max_pass {
        order.shuffle(&mut rng);
        let mut max_pg = 0f64;
        for &i in &order {
            let row = &prob.rows[i];
            let y = prob.labels[i] as f64;
            let g = y * row.dot(&w) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= upper {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg.abs());
            if pg == 0.0 {
                continue;
            }
            let old = alpha[i];
            alpha[i] = (old - g / q[i]).clamp(0.0, upper);
            let step = (alpha[i] - old) * y;
            if step == 0.0 {
                continue;
            }
            for (&j, &x) in row.indices.iter().zip(&row.values) {
                let j = j as usize;
                v[j] += step * x.widen();
                w[j] = if prob.nonneg { v[j].max(0.0) } else { v[j] };
            }
        }
        passes += 1;
        let obj = objective_f64(prob, &w);
        if obj < best {
            best = obj;
            best_w.copy_from_slice(&w);
        }
        trace.push(best);
        if max_pg < tol {
            break;
        }
    }
    if !best.is_finite() {
        return Err(GmpError::Numerical("SVM objective is not finite".into()));
    }
    Ok(SvmSolution {
        weights: best_w.into_iter().map(T::narrow).collect(),
        objective: best,
        iterations: passes,
        trace,
    })
}
