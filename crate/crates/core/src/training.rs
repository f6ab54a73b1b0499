//! Alternating optimization of bilinear group-membership models.
//!
//! Each block of parameters (word-pair weights, shared location weights,
//! pair coefficients) enters the score linearly once the other blocks are
//! fixed, so every half-step is an ordinary hinge-loss SVM over collapsed
//! features. A half-step's solution is kept only if it does not raise the
//! block objective, which makes the full objective non-increasing.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{AppearanceMap, KernelParams};
use crate::error::{GmpError, Result};
use crate::scalar::Scalar;
use crate::scoring::{
    accumulate_pair_feature, location_feature_f64, view_pairs, BilinearModel, PairWeights, SparseAccumulator,
};
use crate::solver::{primal_objective, svm_train, SparseRow, SvmProblem};
use crate::vocab::Vocabulary;

/// One training tuple: an entity index per view plus its labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSample {
    pub entities: Vec<usize>,
    /// +1 when every member shares one identity, -1 otherwise.
    pub group_label: i8,
    /// Per view pair in [`view_pairs`] order: +1 on identity match, else -1.
    pub pair_labels: Vec<i8>,
}

impl GroupSample {
    pub fn from_identities(entities: Vec<usize>, identities: &[u64]) -> Self {
        let pair_labels: Vec<i8> = view_pairs(identities.len())
            .into_iter()
            .map(|(i, j)| if identities[i] == identities[j] { 1 } else { -1 })
            .collect();
        let group_label = pair_labels.iter().copied().min().unwrap_or(1);
        Self {
            entities,
            group_label,
            pair_labels,
        }
    }
}

/// Draw `n` training tuples. `identities[v][e]` is the identity of entity
/// `e` in view `v`. Exactly `round(n * pos_fraction)` tuples are positive.
pub fn sample_groups(identities: &[Vec<u64>], n: usize, pos_fraction: f64, seed: u64) -> Result<Vec<GroupSample>> {
    if identities.len() < 2 {
        return Err(GmpError::arg("group sampling needs at least two views"));
    }
    if !(0.0..=1.0).contains(&pos_fraction) {
        return Err(GmpError::arg(format!("pos_fraction {pos_fraction} outside [0, 1]")));
    }
    for (v, ids) in identities.iter().enumerate() {
        let mut distinct = ids.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(GmpError::arg(format!("view {v} has fewer than two identities")));
        }
    }
    // identity -> entities, per view
    let by_identity: Vec<std::collections::BTreeMap<u64, Vec<usize>>> = identities
        .iter()
        .map(|ids| {
            let mut m = std::collections::BTreeMap::<u64, Vec<usize>>::new();
            for (e, &id) in ids.iter().enumerate() {
                m.entry(id).or_default().push(e);
            }
            m
        })
        .collect();
    let shared: Vec<u64> = by_identity[0]
        .keys()
        .copied()
        .filter(|id| by_identity.iter().all(|m| m.contains_key(id)))
        .collect();

    let n_pos = (n as f64 * pos_fraction).round() as usize;
    if n_pos > 0 && shared.is_empty() {
        return Err(GmpError::arg("no identity appears in every view; positives impossible"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_pos {
        let id = shared[rng.gen_range(0..shared.len())];
        let entities: Vec<usize> = by_identity
            .iter()
            .map(|m| {
                let es = &m[&id];
                es[rng.gen_range(0..es.len())]
            })
            .collect();
        let ids = vec![id; identities.len()];
        out.push(GroupSample::from_identities(entities, &ids));
    }
    while out.len() < n {
        let entities: Vec<usize> = identities.iter().map(|ids| rng.gen_range(0..ids.len())).collect();
        let ids: Vec<u64> = entities.iter().zip(identities).map(|(&e, v)| v[e]).collect();
        if ids.iter().all(|&i| i == ids[0]) {
            continue;
        }
        out.push(GroupSample::from_identities(entities, &ids));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Pairwise decomposition, group-label loss.
    MultiView,
    /// Pairwise decomposition, per-pair label loss.
    DoubleView,
    /// Single bilinear classifier over two views, no pair coefficients.
    DirectTwoView,
}

impl std::str::FromStr for TrainMode {
    type Err = GmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-view" => Ok(Self::MultiView),
            "double-view" => Ok(Self::DoubleView),
            "direct-two-view" | "direct" => Ok(Self::DirectTwoView),
            other => Err(GmpError::arg(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mode: TrainMode,
    pub max_outer: usize,
    /// Stop once the relative objective change over an outer iteration is below this.
    pub outer_tol: f64,
    pub n_samples: usize,
    pub pos_fraction: f64,
    pub seed: u64,
    pub svm_tol: f64,
    pub svm_max_pass: usize,
    /// After each outer iteration, move scale between the multiplicatively
    /// coupled blocks (`beta_p` vs `W_p`, `W` vs `w_h`) so the regularizer is
    /// minimal while every score stays unchanged.
    #[serde(default = "default_true")]
    pub rebalance: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            mode: TrainMode::MultiView,
            max_outer: 20,
            outer_tol: 1e-4,
            n_samples: 30_000,
            pos_fraction: 0.5,
            seed: 0,
            svm_tol: 1e-3,
            svm_max_pass: 1000,
            rebalance: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(GmpError::arg(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return Err(GmpError::arg("pos_fraction must lie strictly between 0 and 1"));
        }
        if self.max_outer == 0 {
            return Err(GmpError::arg("max_outer must be >= 1"));
        }
        if !(self.svm_tol > 0.0) || !(self.outer_tol >= 0.0) {
            return Err(GmpError::arg("tolerances must be positive"));
        }
        Ok(())
    }
}

/// Encoded entities per view plus the tuples to learn from.
#[derive(Debug, Clone)]
pub struct TrainingSet<T> {
    /// `maps[v][e]`: appearance map of entity `e` in view `v`.
    pub maps: Vec<Vec<AppearanceMap<T>>>,
    pub samples: Vec<GroupSample>,
    pub kernel: KernelParams<T>,
    pub vocabs: Vec<Vocabulary>,
}

impl<T: Scalar> TrainingSet<T> {
    pub fn new(maps: Vec<Vec<AppearanceMap<T>>>, samples: Vec<GroupSample>, kernel: KernelParams<T>) -> Result<Self> {
        let set = Self {
            maps,
            samples,
            kernel,
            vocabs: Vec::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn n_views(&self) -> usize {
        self.maps.len()
    }

    /// Word count per view and number of locations.
    fn shape(&self) -> Result<(Vec<usize>, usize)> {
        let first = self
            .maps
            .iter()
            .find_map(|v| v.first())
            .ok_or_else(|| GmpError::arg("training set has no entities"))?;
        let mut ks = Vec::with_capacity(self.maps.len());
        for (v, maps) in self.maps.iter().enumerate() {
            let k = maps
                .first()
                .ok_or_else(|| GmpError::arg(format!("view {v} has no entities")))?
                .k();
            if maps.iter().any(|m| m.k() != k || !m.same_grid(first)) {
                return Err(GmpError::arg(format!("view {v} mixes vocabularies or location grids")));
            }
            ks.push(k);
        }
        Ok((ks, first.locations()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.len() < 2 {
            return Err(GmpError::arg("training needs at least two views"));
        }
        self.shape()?;
        if self.samples.is_empty() {
            return Err(GmpError::arg("training set has no samples"));
        }
        let n_pairs = view_pairs(self.maps.len()).len();
        for s in &self.samples {
            if s.entities.len() != self.maps.len() || s.pair_labels.len() != n_pairs {
                return Err(GmpError::arg("sample arity does not match the view count"));
            }
            if s.entities.iter().zip(&self.maps).any(|(&e, m)| e >= m.len()) {
                return Err(GmpError::arg("sample references a missing entity"));
            }
            let all_pos = s.pair_labels.iter().all(|&y| y == 1);
            if (s.group_label == 1) != all_pos {
                return Err(GmpError::arg("group label disagrees with pair labels"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Block {
    Init,
    PairWeights,
    Shared,
    Beta,
    Rebalance,
}

impl Block {
    pub fn as_str(self) -> &'static str {
        match self {
            Block::Init => "init",
            Block::PairWeights => "pair-weights",
            Block::Shared => "shared",
            Block::Beta => "beta",
            Block::Rebalance => "rebalance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub outer: usize,
    pub block: Block,
    pub objective: f64,
    pub wall_ms: f64,
    /// Parameter summary after this step.
    pub pair_weight_norms: Vec<f64>,
    pub shared_norm: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    pub model: BilinearModel<T>,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub outer_iterations: usize,
}

impl<T> TrainingRun<T> {
    pub fn objectives(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.objective).collect()
    }

    /// Training log as CSV: `outer_iter,block,objective,wall_ms`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("outer_iter,block,objective,wall_ms\n");
        for t in &self.trace {
            s.push_str(&format!("{},{},{:e},{:.3}\n", t.outer, t.block.as_str(), t.objective, t.wall_ms));
        }
        s
    }
}

/// Relative slack allowed when checking that an objective did not increase.
pub const MONOTONE_SLACK: f64 = 1e-9;

pub fn within_slack(prev: f64, next: f64) -> bool {
    next <= prev + MONOTONE_SLACK * (1.0 + prev.abs())
}

struct Trainer<'a, T> {
    set: &'a TrainingSet<T>,
    cfg: &'a TrainConfig,
    pairs: Vec<(usize, usize)>,
    model: BilinearModel<T>,
    /// `scores[k][p]`: unweighted pair score `W_p . phi . w_h` of sample k.
    scores: Vec<Vec<f64>>,
    trace: Vec<TraceEntry>,
    started: Instant,
}

fn hinge(y: i8, f: f64) -> f64 {
    (1.0 - y as f64 * f).max(0.0)
}

fn sq_norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.widen() * x.widen()).sum()
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn solve_seed(&self, outer: usize, block: Block, pair: usize) -> u64 {
        let b = block as u64;
        self.cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(((outer as u64) << 16) | (b << 8) | pair as u64)
    }

    fn uses_beta(&self) -> bool {
        self.cfg.mode != TrainMode::DirectTwoView
    }

    fn beta(&self, p: usize) -> f64 {
        self.model.coeffs.beta[p].widen()
    }

    fn objective(&self) -> f64 {
        let mut reg = 0.5 * self.cfg.lambda1 * self.model.pair_weights.iter().map(|w| sq_norm(&w.matrix)).sum::<f64>()
            + 0.5 * self.cfg.lambda2 * sq_norm(&self.model.shared.values);
        if self.uses_beta() {
            reg += 0.5 * self.cfg.lambda3 * sq_norm(&self.model.coeffs.beta);
        }
        let loss: f64 = match self.cfg.mode {
            TrainMode::DoubleView => self
                .set
                .samples
                .iter()
                .zip(&self.scores)
                .map(|(s, sc)| {
                    (0..self.pairs.len())
                        .map(|p| hinge(s.pair_labels[p], self.beta(p) * sc[p]))
                        .sum::<f64>()
                })
                .sum(),
            _ => self
                .set
                .samples
                .iter()
                .zip(&self.scores)
                .map(|(s, sc)| {
                    let f: f64 = (0..self.pairs.len()).map(|p| self.beta(p) * sc[p]).sum();
                    hinge(s.group_label, f)
                })
                .sum(),
        };
        reg + loss
    }

    fn record(&mut self, outer: usize, block: Block) -> Result<f64> {
        let objective = self.objective();
        if !objective.is_finite() {
            return Err(GmpError::Numerical(format!("objective became {objective}")));
        }
        if let Some(prev) = self.trace.last() {
            if !within_slack(prev.objective, objective) {
                return Err(GmpError::Numerical(format!(
                    "objective increased from {} to {objective} in {} step",
                    prev.objective,
                    block.as_str()
                )));
            }
        }
        self.trace.push(TraceEntry {
            outer,
            block,
            objective,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            pair_weight_norms: self.model.pair_weights.iter().map(|w| sq_norm(&w.matrix).sqrt()).collect(),
            shared_norm: sq_norm(&self.model.shared.values).sqrt(),
            beta: self.model.coeffs.beta.iter().map(|b| b.widen()).collect(),
        });
        Ok(objective)
    }

    fn maps(&self, s: &GroupSample, p: usize) -> (&AppearanceMap<T>, &AppearanceMap<T>) {
        let (i, j) = self.pairs[p];
        (&self.set.maps[i][s.entities[i]], &self.set.maps[j][s.entities[j]])
    }

    /// Collapsed pair features `v[k][p]` for the current shared weights.
    fn pair_features(&self) -> Vec<Vec<SparseRow<f64>>> {
        let mut accs: Vec<SparseAccumulator> = self
            .model
            .pair_weights
            .iter()
            .map(|w| SparseAccumulator::new(w.rows * w.cols))
            .collect();
        self.set
            .samples
            .iter()
            .map(|s| {
                (0..self.pairs.len())
                    .map(|p| {
                        let (a, b) = self.maps(s, p);
                        accumulate_pair_feature(a, b, &self.model.shared, 1.0, &mut accs[p]);
                        let (indices, values) = accs[p].drain().into_iter().unzip();
                        SparseRow { indices, values }
                    })
                    .collect()
            })
            .collect()
    }

    /// Collapsed location features `u[k][p]` for the current pair weights.
    fn location_features(&self) -> Vec<Vec<Vec<f64>>> {
        let n_loc = self.model.shared.len();
        self.set
            .samples
            .iter()
            .map(|s| {
                (0..self.pairs.len())
                    .map(|p| {
                        let (a, b) = self.maps(s, p);
                        let mut u = vec![0.0; n_loc];
                        location_feature_f64(a, b, &self.model.pair_weights[p], 1.0, &mut u);
                        u
                    })
                    .collect()
            })
            .collect()
    }

    fn solve(&self, prob: &SvmProblem<f64>, current: &[f64], seed: u64) -> Result<Option<Vec<f64>>> {
        let sol = svm_train(prob, self.cfg.svm_tol, self.cfg.svm_max_pass, seed)?;
        let before = primal_objective(prob, current)?;
        Ok((sol.objective <= before).then_some(sol.weights))
    }

    fn pair_weight_step(&mut self, outer: usize, v: &[Vec<SparseRow<f64>>]) -> Result<()> {
        let n_pairs = self.pairs.len();
        match self.cfg.mode {
            TrainMode::DoubleView => {
                for p in 0..n_pairs {
                    let beta = self.beta(p);
                    let rows = v
                        .iter()
                        .map(|vk| SparseRow {
                            indices: vk[p].indices.clone(),
                            values: vk[p].values.iter().map(|x| beta * x).collect(),
                        })
                        .collect();
                    let labels = self.set.samples.iter().map(|s| s.pair_labels[p]).collect();
                    let w = &self.model.pair_weights[p];
                    let prob = SvmProblem::new(w.rows * w.cols, rows, labels, self.cfg.lambda1, false)?;
                    let current: Vec<f64> = w.matrix.iter().map(|x| x.widen()).collect();
                    if let Some(new) = self.solve(&prob, &current, self.solve_seed(outer, Block::PairWeights, p))? {
                        self.model.pair_weights[p].matrix = new.into_iter().map(T::narrow).collect();
                    }
                }
            }
            _ => {
                let offsets: Vec<usize> = self
                    .model
                    .pair_weights
                    .iter()
                    .scan(0, |acc, w| {
                        let o = *acc;
                        *acc += w.rows * w.cols;
                        Some(o)
                    })
                    .collect();
                let dim: usize = self.model.pair_weights.iter().map(|w| w.rows * w.cols).sum();
                let rows = v
                    .iter()
                    .map(|vk| {
                        let mut row = SparseRow {
                            indices: Vec::new(),
                            values: Vec::new(),
                        };
                        for p in 0..n_pairs {
                            let beta = self.beta(p);
                            row.indices.extend(vk[p].indices.iter().map(|&i| i + offsets[p] as u32));
                            row.values.extend(vk[p].values.iter().map(|x| beta * x));
                        }
                        row
                    })
                    .collect();
                let labels = self.set.samples.iter().map(|s| s.group_label).collect();
                let prob = SvmProblem::new(dim, rows, labels, self.cfg.lambda1, false)?;
                let current: Vec<f64> = self
                    .model
                    .pair_weights
                    .iter()
                    .flat_map(|w| w.matrix.iter().map(|x| x.widen()))
                    .collect();
                if let Some(new) = self.solve(&prob, &current, self.solve_seed(outer, Block::PairWeights, 0))? {
                    for (p, w) in self.model.pair_weights.iter_mut().enumerate() {
                        let o = offsets[p];
                        w.matrix = new[o..o + w.rows * w.cols].iter().map(|&x| T::narrow(x)).collect();
                    }
                }
            }
        }
        for (sc, vk) in self.scores.iter_mut().zip(v) {
            for (p, row) in vk.iter().enumerate() {
                let w = &self.model.pair_weights[p].matrix;
                sc[p] = row
                    .indices
                    .iter()
                    .zip(&row.values)
                    .map(|(&i, &x)| w[i as usize].widen() * x)
                    .sum();
            }
        }
        Ok(())
    }

    fn shared_step(&mut self, outer: usize, u: &[Vec<Vec<f64>>]) -> Result<()> {
        let n_loc = self.model.shared.len();
        let n_pairs = self.pairs.len();
        let betas: Vec<f64> = (0..n_pairs).map(|p| self.beta(p)).collect();
        let betas = &betas;
        let (rows, labels): (Vec<SparseRow<f64>>, Vec<i8>) = match self.cfg.mode {
            TrainMode::DoubleView => self
                .set
                .samples
                .iter()
                .zip(u)
                .flat_map(|(s, uk)| {
                    (0..n_pairs).map(move |p| {
                        let beta = betas[p];
                        let x: Vec<f64> = uk[p].iter().map(|v| beta * v).collect();
                        (SparseRow::from_dense(&x), s.pair_labels[p])
                    })
                })
                .unzip(),
            _ => self
                .set
                .samples
                .iter()
                .zip(u)
                .map(|(s, uk)| {
                    let mut x = vec![0.0; n_loc];
                    for (p, up) in uk.iter().enumerate() {
                        let beta = betas[p];
                        for (xi, v) in x.iter_mut().zip(up) {
                            *xi += beta * v;
                        }
                    }
                    (SparseRow::from_dense(&x), s.group_label)
                })
                .unzip(),
        };
        let prob = SvmProblem::new(n_loc, rows, labels, self.cfg.lambda2, false)?;
        let current: Vec<f64> = self.model.shared.values.iter().map(|x| x.widen()).collect();
        if let Some(new) = self.solve(&prob, &current, self.solve_seed(outer, Block::Shared, 0))? {
            self.model.shared.values = new.into_iter().map(T::narrow).collect();
        }
        let wh = &self.model.shared.values;
        for (sc, uk) in self.scores.iter_mut().zip(u) {
            for (p, up) in uk.iter().enumerate() {
                sc[p] = up.iter().zip(wh).map(|(x, w)| x * w.widen()).sum();
            }
        }
        Ok(())
    }

    fn beta_step(&mut self, outer: usize) -> Result<()> {
        let n_pairs = self.pairs.len();
        let (rows, labels): (Vec<SparseRow<f64>>, Vec<i8>) = match self.cfg.mode {
            TrainMode::DoubleView => self
                .set
                .samples
                .iter()
                .zip(&self.scores)
                .flat_map(|(s, sc)| {
                    (0..n_pairs).map(move |p| {
                        let row = if sc[p] != 0.0 {
                            SparseRow {
                                indices: vec![p as u32],
                                values: vec![sc[p]],
                            }
                        } else {
                            SparseRow {
                                indices: vec![],
                                values: vec![],
                            }
                        };
                        (row, s.pair_labels[p])
                    })
                })
                .unzip(),
            _ => self
                .set
                .samples
                .iter()
                .zip(&self.scores)
                .map(|(s, sc)| (SparseRow::from_dense(sc), s.group_label))
                .unzip(),
        };
        let prob = SvmProblem::new(n_pairs, rows, labels, self.cfg.lambda3, true)?;
        let current: Vec<f64> = self.model.coeffs.beta.iter().map(|x| x.widen()).collect();
        if let Some(new) = self.solve(&prob, &current, self.solve_seed(outer, Block::Beta, 0))? {
            // exact zero floor: narrowing cannot produce negatives from non-negatives
            self.model.coeffs.beta = new.into_iter().map(|b| T::narrow(b.max(0.0))).collect();
        }
        Ok(())
    }

    /// Closed-form optimal rescaling of each coupled pair of blocks; scores
    /// are invariant, so only the regularizer moves. Reverted if rounding
    /// would raise the objective.
    fn rebalance_step(&mut self) {
        let (l1, l2, l3) = (self.cfg.lambda1, self.cfg.lambda2, self.cfg.lambda3);
        let before = self.objective();
        let saved = (self.model.clone(), self.scores.clone());
        if self.uses_beta() && l1 > 0.0 && l3 > 0.0 {
            self.balance_beta(l1, l3);
        }
        if l1 > 0.0 && l2 > 0.0 {
            let a: f64 = self.model.pair_weights.iter().map(|w| sq_norm(&w.matrix)).sum();
            let b = sq_norm(&self.model.shared.values);
            if a > 0.0 && b > 0.0 {
                let c = (l2 * b / (l1 * a)).sqrt().sqrt();
                for w in &mut self.model.pair_weights {
                    w.matrix.iter_mut().for_each(|x| *x = T::narrow(x.widen() * c));
                }
                self.model.shared.values.iter_mut().for_each(|x| *x = T::narrow(x.widen() / c));
            }
            if self.uses_beta() && l3 > 0.0 {
                self.balance_beta(l1, l3);
            }
        }
        if self.objective() > before {
            (self.model, self.scores) = saved;
        }
    }

    fn balance_beta(&mut self, l1: f64, l3: f64) {
        for p in 0..self.pairs.len() {
            let beta = self.beta(p);
            let wn = sq_norm(&self.model.pair_weights[p].matrix);
            if wn == 0.0 {
                continue;
            }
            if beta == 0.0 {
                // a switched-off pair contributes nothing but regularization
                self.model.pair_weights[p].matrix.iter_mut().for_each(|x| *x = T::zero());
                self.scores.iter_mut().for_each(|sc| sc[p] = 0.0);
                continue;
            }
            let d = (l1 * wn / (l3 * beta * beta)).sqrt().sqrt();
            self.model.coeffs.beta[p] = T::narrow(beta * d);
            self.model.pair_weights[p]
                .matrix
                .iter_mut()
                .for_each(|x| *x = T::narrow(x.widen() / d));
            self.scores.iter_mut().for_each(|sc| sc[p] /= d);
        }
    }

    fn run(mut self) -> Result<TrainingRun<T>> {
        let mut converged = false;
        let mut outer_done = 0;
        let mut prev_outer = f64::NAN;
        for outer in 1..=self.cfg.max_outer {
            let v = self.pair_features();
            if outer == 1 {
                // scores at the initial parameters, then the starting objective
                for (sc, vk) in self.scores.iter_mut().zip(&v) {
                    for (p, row) in vk.iter().enumerate() {
                        let w = &self.model.pair_weights[p].matrix;
                        sc[p] = row.indices.iter().zip(&row.values).map(|(&i, &x)| w[i as usize].widen() * x).sum();
                    }
                }
                prev_outer = self.record(0, Block::Init)?;
            }
            self.pair_weight_step(outer, &v)?;
            drop(v);
            self.record(outer, Block::PairWeights)?;

            let u = self.location_features();
            self.shared_step(outer, &u)?;
            drop(u);
            let mut obj = self.record(outer, Block::Shared)?;

            if self.uses_beta() {
                self.beta_step(outer)?;
                obj = self.record(outer, Block::Beta)?;
            }
            if self.cfg.rebalance {
                self.rebalance_step();
                obj = self.record(outer, Block::Rebalance)?;
            }
            outer_done = outer;
            let rel = (prev_outer - obj).abs() / prev_outer.abs().max(f64::MIN_POSITIVE);
            prev_outer = obj;
            if rel < self.cfg.outer_tol {
                converged = true;
                break;
            }
        }
        Ok(TrainingRun {
            model: self.model,
            trace: self.trace,
            converged,
            outer_iterations: outer_done,
        })
    }
}

fn build_trainer<'a, T: Scalar>(set: &'a TrainingSet<T>, cfg: &'a TrainConfig) -> Result<Trainer<'a, T>> {
    cfg.validate()?;
    set.validate()?;
    let (ks, n_loc) = set.shape()?;
    let mut model = BilinearModel::ones(&ks, n_loc, set.kernel)?;
    model.vocabs = set.vocabs.clone();
    model.meta = serde_json::to_value(cfg).expect("config serializes");
    let pairs = view_pairs(ks.len());
    Ok(Trainer {
        set,
        cfg,
        scores: vec![vec![0.0; pairs.len()]; set.samples.len()],
        pairs,
        model,
        trace: Vec::new(),
        started: Instant::now(),
    })
}

/// Fit the pair coefficients alone: a non-negative hinge SVM whose
/// features are the unweighted pair scores `scores[k][p]` of each sample.
pub fn fit_pair_coefficients(
    scores: &[Vec<f64>],
    labels: &[i8],
    lambda3: f64,
    tol: f64,
    max_pass: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let dim = scores.first().map_or(0, Vec::len);
    let rows = scores.iter().map(|s| SparseRow::from_dense(s)).collect();
    let prob = SvmProblem::new(dim, rows, labels.to_vec(), lambda3, true)?;
    Ok(svm_train(&prob, tol, max_pass, seed)?
        .weights
        .into_iter()
        .map(|b: f64| b.max(0.0))
        .collect())
}

/// Two-view bilinear classifier trained directly on the group label.
pub fn train_direct_two_view<T: Scalar>(set: &TrainingSet<T>, cfg: &TrainConfig) -> Result<TrainingRun<T>> {
    if set.n_views() != 2 {
        return Err(GmpError::arg(format!(
            "direct training needs exactly two views, got {}",
            set.n_views()
        )));
    }
    let cfg = TrainConfig {
        mode: TrainMode::DirectTwoView,
        ..cfg.clone()
    };
    build_trainer(set, &cfg)?.run()
}

/// Pairwise-decomposition training in multi-view or double-view mode.
pub fn train_pairwise<T: Scalar>(set: &TrainingSet<T>, cfg: &TrainConfig) -> Result<TrainingRun<T>> {
    if cfg.mode == TrainMode::DirectTwoView {
        return Err(GmpError::arg("train_pairwise expects multi-view or double-view mode"));
    }
    build_trainer(set, cfg)?.run()
}

/// Dispatch on `cfg.mode`.
pub fn train<T: Scalar>(set: &TrainingSet<T>, cfg: &TrainConfig) -> Result<TrainingRun<T>> {
    match cfg.mode {
        TrainMode::DirectTwoView => train_direct_two_view(set, cfg),
        _ => train_pairwise(set, cfg),
    }
}

/// Fraction of samples whose group-score sign matches the group label.
pub fn training_accuracy<T: Scalar>(model: &BilinearModel<T>, set: &TrainingSet<T>) -> Result<f64> {
    let mut correct = 0usize;
    for s in &set.samples {
        let maps: Vec<&AppearanceMap<T>> = s.entities.iter().zip(&set.maps).map(|(&e, m)| &m[e]).collect();
        let f = crate::scoring::group_score(&maps, model)?;
        if (f >= T::zero()) == (s.group_label == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.samples.len() as f64)
}

/// Pair weights for view pair `(i, j)` of `model`.
pub fn pair_weights_for<T: Scalar>(model: &BilinearModel<T>, i: usize, j: usize) -> Option<&PairWeights<T>> {
    view_pairs(model.n_views)
        .iter()
        .position(|&p| p == (i, j))
        .map(|p| &model.pair_weights[p])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u64]) -> Vec<u64> {
        v.to_vec()
    }

    #[test]
    fn all_positive_sampling() {
        let views = vec![ids(&[0, 1, 2]), ids(&[2, 1, 0]), ids(&[1, 0, 2, 2])];
        let s = sample_groups(&views, 200, 1.0, 4).unwrap();
        assert_eq!(s.len(), 200);
        for g in &s {
            assert_eq!(g.group_label, 1);
            let first = views[0][g.entities[0]];
            assert!(g.entities.iter().zip(&views).all(|(&e, v)| v[e] == first));
        }
    }

    #[test]
    fn labels_are_consistent() {
        let views = vec![ids(&[0, 1, 2, 3]), ids(&[3, 2, 1, 0]), ids(&[0, 0, 1, 1])];
        for g in sample_groups(&views, 500, 0.3, 1).unwrap() {
            assert_eq!(g.group_label, *g.pair_labels.iter().min().unwrap());
            for (p, &(i, j)) in view_pairs(3).iter().enumerate() {
                let same = views[i][g.entities[i]] == views[j][g.entities[j]];
                assert_eq!(g.pair_labels[p] == 1, same);
            }
        }
    }

    #[test]
    fn positive_fraction_and_determinism() {
        let views = vec![(0..40).collect::<Vec<u64>>(), (0..40).rev().collect()];
        let s = sample_groups(&views, 10_000, 0.5, 8).unwrap();
        let pos = s.iter().filter(|g| g.group_label == 1).count();
        assert!((pos as i64 - 5000).abs() <= 200);
        assert_eq!(s, sample_groups(&views, 10_000, 0.5, 8).unwrap());
    }

    #[test]
    fn sampling_errors() {
        let disjoint = vec![ids(&[0, 1]), ids(&[2, 3])];
        assert!(sample_groups(&disjoint, 10, 0.5, 0).is_err());
        let single = vec![ids(&[0, 0]), ids(&[0, 1])];
        assert!(sample_groups(&single, 10, 0.5, 0).is_err());
    }

    fn separable_set(mode_views: usize) -> TrainingSet<f64> {
        // entity i carries word i at every location in every view
        let n = 6;
        let maps: Vec<Vec<AppearanceMap<f64>>> = (0..mode_views)
            .map(|v| {
                (0..n as u32)
                    .map(|i| AppearanceMap::from_triplets(v as u32, n, 2, 2, 1, (0..4).map(|h| (i, h, 1.0)).collect()).unwrap())
                    .collect()
            })
            .collect();
        let identities: Vec<Vec<u64>> = (0..mode_views).map(|_| (0..n as u64).collect()).collect();
        let samples = sample_groups(&identities, 300, 0.5, 1).unwrap();
        TrainingSet::new(maps, samples, KernelParams::default()).unwrap()
    }

    #[test]
    fn separable_data_is_fit_quickly() {
        for (views, mode) in [(2, TrainMode::MultiView), (3, TrainMode::MultiView), (3, TrainMode::DoubleView), (2, TrainMode::DirectTwoView)] {
            let set = separable_set(views);
            let cfg = TrainConfig {
                mode,
                max_outer: 3,
                ..TrainConfig::default()
            };
            let run = train(&set, &cfg).unwrap();
            assert_eq!(training_accuracy(&run.model, &set).unwrap(), 1.0, "{mode:?} with {views} views");
            assert!(run.outer_iterations <= 3);
            assert!(run.objectives().windows(2).all(|w| within_slack(w[0], w[1])));
        }
    }

    #[test]
    fn rebalancing_preserves_scores() {
        let set = separable_set(3);
        let cfg = TrainConfig {
            max_outer: 1,
            rebalance: false,
            ..TrainConfig::default()
        };
        let plain = train(&set, &cfg).unwrap();
        let balanced = train(&set, &TrainConfig { rebalance: true, ..cfg }).unwrap();
        let n = balanced.trace.len();
        assert_eq!(balanced.trace[n - 1].block, Block::Rebalance);
        assert!(balanced.trace[n - 1].objective <= balanced.trace[n - 2].objective);
        for s in &set.samples {
            let maps: Vec<&AppearanceMap<f64>> = s.entities.iter().zip(&set.maps).map(|(&e, m)| &m[e]).collect();
            let a = crate::scoring::group_score(&maps, &plain.model).unwrap();
            let b = crate::scoring::group_score(&maps, &balanced.model).unwrap();
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn direct_mode_needs_two_views() {
        let set = separable_set(3);
        assert!(train_direct_two_view(&set, &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            mode: TrainMode::DirectTwoView,
            ..TrainConfig::default()
        };
        assert!(train_pairwise(&separable_set(2), &cfg).is_err());
        assert!(train(&set, &TrainConfig { lambda1: -1.0, ..TrainConfig::default() }).is_err());
    }

    #[test]
    fn informative_pair_gets_larger_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<i8> = (0..400).map(|k| if k % 2 == 0 { 1 } else { -1 }).collect();
        let scores: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| vec![y as f64 * rng.gen_range(0.5..1.5), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let beta = fit_pair_coefficients(&scores, &labels, 1.0, 1e-6, 10_000, 0).unwrap();
        assert!(beta.iter().all(|&b| b >= 0.0));
        assert!(beta[0] > beta[1] && beta[0] > beta[2], "{beta:?}");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("double-view".parse::<TrainMode>().unwrap(), TrainMode::DoubleView);
        assert!("triple-view".parse::<TrainMode>().is_err());
    }
}
