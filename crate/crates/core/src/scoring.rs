//! Bilinear group-membership scores over the implicit co-occurrence tensor.
//!
//! For two appearance maps `a` (view i) and `b` (view j) the pairwise
//! feature matrix has one row per word pair and one column per location,
//! `phi[(zi, zj), h] = a[zi, h] * b[zj, h]`. It is never materialized: the
//! score `w^T phi w_h` is evaluated location by location as
//! `sum_h w_h[h] * a_h^T W b_h`, and the two linear slices needed by the
//! alternating trainer are produced directly in collapsed form.

use serde::{Deserialize, Serialize};

use crate::encoding::{AppearanceMap, KernelParams};
use crate::error::{GmpError, Result};
use crate::scalar::Scalar;
use crate::vocab::Vocabulary;

/// Unordered view pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn view_pairs(n_views: usize) -> Vec<(usize, usize)> {
    (0..n_views)
        .flat_map(|i| (i + 1..n_views).map(move |j| (i, j)))
        .collect()
}

/// Word-pair weights for one view pair, a row-major `rows x cols` matrix
/// with rows indexed by words of the first view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWeights<T> {
    pub views: (u32, u32),
    pub rows: usize,
    pub cols: usize,
    pub matrix: Vec<T>,
}

impl<T: Scalar> PairWeights<T> {
    pub fn new(views: (u32, u32), rows: usize, cols: usize, matrix: Vec<T>) -> Result<Self> {
        if views.0 >= views.1 {
            return Err(GmpError::arg(format!("view pair {views:?} must be ordered i < j")));
        }
        if matrix.len() != rows * cols {
            return Err(GmpError::arg(format!(
                "pair weights: expected {} entries, got {}",
                rows * cols,
                matrix.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GmpError::arg("pair weights must be finite"));
        }
        Ok(Self {
            views,
            rows,
            cols,
            matrix,
        })
    }

    pub fn filled(views: (u32, u32), rows: usize, cols: usize, value: T) -> Self {
        Self {
            views,
            rows,
            cols,
            matrix: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.matrix[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut m = Vec::with_capacity(self.matrix.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                m.push(self.matrix[r * self.cols + c]);
            }
        }
        Self {
            views: self.views,
            rows: self.cols,
            cols: self.rows,
            matrix: m,
        }
    }
}

/// Location weights shared by every view pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedWeights<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> SharedWeights<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GmpError::arg("shared weights must be finite"));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Non-negative importance of each view pair, ordered as [`view_pairs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCoefficients<T> {
    pub beta: Vec<T>,
}

impl<T: Scalar> PairCoefficients<T> {
    pub fn new(beta: Vec<T>) -> Result<Self> {
        if beta.iter().any(|b| !(*b >= T::zero()) || !b.is_finite()) {
            return Err(GmpError::arg("pair coefficients must be finite and >= 0"));
        }
        Ok(Self { beta })
    }

    /// Coefficients rescaled to unit sum; for reporting only.
    pub fn normalized(&self) -> Vec<T> {
        let s: T = self.beta.iter().copied().sum();
        if s > T::zero() {
            self.beta.iter().map(|&b| b / s).collect()
        } else {
            self.beta.clone()
        }
    }
}

/// A trained pairwise-decomposed bilinear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearModel<T> {
    pub n_views: usize,
    /// Word count per view.
    pub view_k: Vec<usize>,
    /// One entry per view pair, ordered as [`view_pairs`].
    pub pair_weights: Vec<PairWeights<T>>,
    pub shared: SharedWeights<T>,
    pub coeffs: PairCoefficients<T>,
    /// Empty when words were supplied directly (synthetic data).
    pub vocabs: Vec<Vocabulary>,
    pub kernel: KernelParams<T>,
    /// Training configuration snapshot.
    pub meta: serde_json::Value,
}

impl<T: Scalar> BilinearModel<T> {
    /// Model with every weight and coefficient set to one.
    pub fn ones(view_k: &[usize], n_locations: usize, kernel: KernelParams<T>) -> Result<Self> {
        if view_k.len() < 2 {
            return Err(GmpError::arg("a model needs at least two views"));
        }
        let pairs = view_pairs(view_k.len());
        Ok(Self {
            n_views: view_k.len(),
            view_k: view_k.to_vec(),
            pair_weights: pairs
                .iter()
                .map(|&(i, j)| PairWeights::filled((i as u32, j as u32), view_k[i], view_k[j], T::one()))
                .collect(),
            shared: SharedWeights {
                values: vec![T::one(); n_locations],
            },
            coeffs: PairCoefficients {
                beta: vec![T::one(); pairs.len()],
            },
            vocabs: Vec::new(),
            kernel,
            meta: serde_json::Value::Null,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = view_pairs(self.n_views);
        if self.view_k.len() != self.n_views {
            return Err(GmpError::arg("view_k length differs from view count"));
        }
        if self.pair_weights.len() != pairs.len() || self.coeffs.beta.len() != pairs.len() {
            return Err(GmpError::arg("every view pair needs weights and a coefficient"));
        }
        for (w, &(i, j)) in self.pair_weights.iter().zip(&pairs) {
            if w.views != (i as u32, j as u32) || w.rows != self.view_k[i] || w.cols != self.view_k[j] {
                return Err(GmpError::arg(format!("pair weights for ({i}, {j}) have wrong shape")));
            }
        }
        PairCoefficients::new(self.coeffs.beta.clone())?;
        self.kernel.validate()
    }
}

fn check_pair<T: Scalar>(
    a: &AppearanceMap<T>,
    b: &AppearanceMap<T>,
    rows: usize,
    cols: usize,
    n_loc: Option<usize>,
) -> Result<()> {
    if !a.same_grid(b) {
        return Err(GmpError::arg("appearance maps sample different location grids"));
    }
    if a.k() != rows || b.k() != cols {
        return Err(GmpError::arg(format!(
            "word counts ({}, {}) do not match weights {rows}x{cols}",
            a.k(),
            b.k()
        )));
    }
    if let Some(n) = n_loc {
        if n != a.locations() {
            return Err(GmpError::arg(format!(
                "shared weights have {n} entries for {} locations",
                a.locations()
            )));
        }
    }
    Ok(())
}

#[inline]
fn bilinear_at<T: Scalar>(a: &AppearanceMap<T>, b: &AppearanceMap<T>, w: &PairWeights<T>, h: usize) -> f64 {
    let (aw, av) = a.column(h);
    let (bw, bv) = b.column(h);
    if bw.is_empty() {
        return 0.0;
    }
    let mut s = 0f64;
    for (&za, &va) in aw.iter().zip(av) {
        let row = w.row(za as usize);
        let mut inner = 0f64;
        for (&zb, &vb) in bw.iter().zip(bv) {
            inner += row[zb as usize].widen() * vb.widen();
        }
        s += va.widen() * inner;
    }
    s
}

/// `w^T phi(a, b) w_h`, accumulated in 64-bit precision.
pub fn pair_score<T: Scalar>(
    a: &AppearanceMap<T>,
    b: &AppearanceMap<T>,
    w: &PairWeights<T>,
    wh: &SharedWeights<T>,
) -> Result<T> {
    check_pair(a, b, w.rows, w.cols, Some(wh.len()))?;
    Ok(T::narrow(pair_score_f64(a, b, w, wh)))
}

pub(crate) fn pair_score_f64<T: Scalar>(
    a: &AppearanceMap<T>,
    b: &AppearanceMap<T>,
    w: &PairWeights<T>,
    wh: &SharedWeights<T>,
) -> f64 {
    let mut s = 0f64;
    for (h, &weight) in wh.values.iter().enumerate() {
        if weight != T::zero() {
            s += weight.widen() * bilinear_at(a, b, w, h);
        }
    }
    s
}

/// Pairwise-decomposed membership score of one tuple, one map per view.
/// A tuple is predicted to share a label when the score is `>= 0`.
pub fn group_score<T: Scalar>(maps: &[&AppearanceMap<T>], model: &BilinearModel<T>) -> Result<T> {
    if maps.len() != model.n_views {
        return Err(GmpError::arg(format!(
            "expected one map per view ({}), got {}",
            model.n_views,
            maps.len()
        )));
    }
    let mut total = 0f64;
    for (p, &(i, j)) in view_pairs(model.n_views).iter().enumerate() {
        let beta = model.coeffs.beta[p];
        let w = &model.pair_weights[p];
        check_pair(maps[i], maps[j], w.rows, w.cols, Some(model.shared.len()))?;
        if beta != T::zero() {
            total += beta.widen() * pair_score_f64(maps[i], maps[j], w, &model.shared);
        }
    }
    Ok(T::narrow(total))
}

/// The linear slice of the score in `W` for fixed `w_h`:
/// `v[zi * cols + zj] = sum_h w_h[h] a[zi, h] b[zj, h]`.
pub fn collapsed_pair_feature<T: Scalar>(
    a: &AppearanceMap<T>,
    b: &AppearanceMap<T>,
    wh: &SharedWeights<T>,
) -> Result<Vec<T>> {
    check_pair(a, b, a.k(), b.k(), Some(wh.len()))?;
    let mut acc = SparseAccumulator::new(a.k() * b.k());
    accumulate_pair_feature(a, b, wh, 1.0, &mut acc);
    let mut out = vec![T::zero(); a.k() * b.k()];
    for (i, v) in acc.drain() {
        out[i as usize] = T::narrow(v);
    }
    Ok(out)
}

/// The linear slice of the score in `w_h` for fixed `W`:
/// `u[h] = a_h^T W b_h`.
pub fn collapsed_location_feature<T: Scalar>(
    a: &AppearanceMap<T>,
    b: &AppearanceMap<T>,
    w: &PairWeights<T>,
) -> Result<Vec<T>> {
    check_pair(a, b, w.rows, w.cols, None)?;
    Ok((0..a.locations())
        .map(|h| T::narrow(bilinear_at(a, b, w, h)))
        .collect())
}

pub(crate) fn location_feature_f64<T: Scalar>(
    a: &AppearanceMap<T>,
    b: &AppearanceMap<T>,
    w: &PairWeights<T>,
    scale: f64,
    out: &mut [f64],
) {
    for (h, o) in out.iter_mut().enumerate() {
        *o += scale * bilinear_at(a, b, w, h);
    }
}

/// Dense scratch buffer that remembers which slots were written.
pub(crate) struct SparseAccumulator {
    dense: Vec<f64>,
    touched: Vec<u32>,
    seen: Vec<bool>,
}

impl SparseAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dense: vec![0.0; dim],
            touched: Vec::new(),
            seen: vec![false; dim],
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, v: f64) {
        if !self.seen[i] {
            self.seen[i] = true;
            self.touched.push(i as u32);
        }
        self.dense[i] += v;
    }

    /// Sorted non-zero entries; leaves the accumulator empty.
    pub fn drain(&mut self) -> Vec<(u32, f64)> {
        self.touched.sort_unstable();
        let out = self
            .touched
            .iter()
            .filter_map(|&i| {
                let v = std::mem::take(&mut self.dense[i as usize]);
                self.seen[i as usize] = false;
                (v != 0.0).then_some((i, v))
            })
            .collect();
        self.touched.clear();
        out
    }
}

pub(crate) fn accumulate_pair_feature<T: Scalar>(
    a: &AppearanceMap<T>,
    b: &AppearanceMap<T>,
    wh: &SharedWeights<T>,
    scale: f64,
    acc: &mut SparseAccumulator,
) {
    let cols = b.k();
    for (h, &weight) in wh.values.iter().enumerate() {
        if weight == T::zero() {
            continue;
        }
        let s = scale * weight.widen();
        let (aw, av) = a.column(h);
        let (bw, bv) = b.column(h);
        for (&za, &va) in aw.iter().zip(av) {
            let base = za as usize * cols;
            let sa = s * va.widen();
            for (&zb, &vb) in bw.iter().zip(bv) {
                acc.add(base + zb as usize, sa * vb.widen());
            }
        }
    }
}
