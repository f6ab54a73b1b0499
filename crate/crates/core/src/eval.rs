//! Ranking and verification metrics, multi-view score tensors, and the
//! probe/gallery evaluation protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::AppearanceMap;
use crate::error::{GmpError, Result};
use crate::scalar::Scalar;
use crate::scoring::{pair_score_f64, view_pairs, BilinearModel};

/// Dense probe-by-gallery score matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(GmpError::arg("score matrix size mismatch"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Scores over every candidate tuple, one axis per view, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl ScoreTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(GmpError::arg("score tensor needs at least two axes"));
        }
        if dims.iter().product::<usize>() != values.len() {
            return Err(GmpError::arg("score tensor shape does not match its values"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GmpError::arg("score tensor values must be finite"));
        }
        Ok(Self { dims, values })
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims.len()];
        for a in (0..self.dims.len() - 1).rev() {
            s[a] = s[a + 1] * self.dims[a + 1];
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Max,
}

impl std::str::FromStr for Reduction {
    type Err = GmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            other => Err(GmpError::arg(format!("unknown reduction {other:?}"))),
        }
    }
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Max => "max",
        }
    }
}

/// Marginalize every axis except `keep = (row_axis, col_axis)`.
pub fn reduce_tensor(t: &ScoreTensor, keep: (usize, usize), op: Reduction) -> Result<ScoreMatrix> {
    let (ra, ca) = keep;
    if ra == ca {
        return Err(GmpError::arg("kept views must differ"));
    }
    if ra >= t.dims.len() || ca >= t.dims.len() {
        return Err(GmpError::arg("kept view out of range"));
    }
    let (rows, cols) = (t.dims[ra], t.dims[ca]);
    let init = match op {
        Reduction::Sum => 0.0,
        Reduction::Max => f64::NEG_INFINITY,
    };
    let mut out = vec![init; rows * cols];
    let strides = t.strides();
    for (flat, &v) in t.values.iter().enumerate() {
        let r = (flat / strides[ra]) % rows;
        let c = (flat / strides[ca]) % cols;
        let o = &mut out[r * cols + c];
        match op {
            Reduction::Sum => *o += v,
            Reduction::Max => *o = o.max(v),
        }
    }
    ScoreMatrix::new(rows, cols, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    /// `rates[r - 1]` is the matching rate at rank `r`.
    pub rates: Vec<f64>,
}

impl CmcCurve {
    pub fn rank(&self, r: usize) -> f64 {
        self.rates[r - 1]
    }
}

/// 1-based rank of gallery item `truth` within `scores`; higher scores rank
/// first and ties go to the lower gallery index.
pub fn match_rank(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(g, &s)| s > t || (s == t && g < truth))
        .count()
}

fn cmc_from_ranks(ranks: &[usize], n_ranks: usize) -> CmcCurve {
    let mut hist = vec![0usize; n_ranks + 1];
    for &r in ranks {
        if r <= n_ranks {
            hist[r] += 1;
        }
    }
    let n = ranks.len() as f64;
    let mut acc = 0;
    let rates = (1..=n_ranks)
        .map(|r| {
            acc += hist[r];
            acc as f64 / n
        })
        .collect();
    CmcCurve { rates }
}

/// CMC over all gallery ranks. `truth[p]` is the gallery index matching probe `p`.
pub fn cmc(scores: &ScoreMatrix, truth: &[usize]) -> Result<CmcCurve> {
    if scores.rows == 0 || scores.cols == 0 {
        return Err(GmpError::arg("empty probe or gallery"));
    }
    if truth.len() != scores.rows {
        return Err(GmpError::arg(format!(
            "{} probes but {} truth entries",
            scores.rows,
            truth.len()
        )));
    }
    if let Some(t) = truth.iter().find(|&&t| t >= scores.cols) {
        return Err(GmpError::arg(format!("truth index {t} outside the gallery")));
    }
    let ranks: Vec<usize> = truth
        .iter()
        .enumerate()
        .map(|(p, &t)| match_rank(scores.row(p), t))
        .collect();
    Ok(cmc_from_ranks(&ranks, scores.cols))
}

/// Discrete area under the CMC curve: the mean rate over its ranks.
pub fn cmc_auc(curve: &CmcCurve) -> Result<f64> {
    if curve.rates.is_empty() {
        return Err(GmpError::arg("empty CMC curve"));
    }
    Ok(curve.rates.iter().sum::<f64>() / curve.rates.len() as f64)
}

/// Fraction of `(score, label)` pairs where `score >= threshold` agrees
/// with `label == +1`.
pub fn verification_rate(scores: &[(f64, i8)], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(GmpError::arg("no scored pairs"));
    }
    let hits = scores
        .iter()
        .filter(|&&(s, y)| (s >= threshold) == (y == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Score matrix of every `(probe, gallery)` pair under one view pair.
pub fn pair_score_matrix<T: Scalar>(
    model: &BilinearModel<T>,
    view_a: usize,
    view_b: usize,
    a: &[&AppearanceMap<T>],
    b: &[&AppearanceMap<T>],
) -> Result<ScoreMatrix> {
    let pairs = view_pairs(model.n_views);
    let (lo, hi, swapped) = if view_a < view_b {
        (view_a, view_b, false)
    } else {
        (view_b, view_a, true)
    };
    let p = pairs
        .iter()
        .position(|&q| q == (lo, hi))
        .ok_or_else(|| GmpError::arg(format!("model has no view pair ({lo}, {hi})")))?;
    let w = &model.pair_weights[p];
    let mut values = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            let (m_lo, m_hi) = if swapped { (*y, *x) } else { (*x, *y) };
            if m_lo.k() != w.rows || m_hi.k() != w.cols || !m_lo.same_grid(m_hi) || m_lo.locations() != model.shared.len()
            {
                return Err(GmpError::arg("entity maps do not match the model"));
            }
            values.push(pair_score_f64(m_lo, m_hi, w, &model.shared));
        }
    }
    ScoreMatrix::new(a.len(), b.len(), values)
}

/// Group scores of every tuple of candidates, one candidate list per view.
pub fn score_tensor<T: Scalar>(model: &BilinearModel<T>, candidates: &[Vec<&AppearanceMap<T>>]) -> Result<ScoreTensor> {
    if candidates.len() != model.n_views {
        return Err(GmpError::arg("one candidate list per view required"));
    }
    let dims: Vec<usize> = candidates.iter().map(Vec::len).collect();
    if dims.contains(&0) {
        return Err(GmpError::arg("empty candidate list"));
    }
    let pairs = view_pairs(model.n_views);
    let mats = pairs
        .iter()
        .map(|&(i, j)| pair_score_matrix(model, i, j, &candidates[i], &candidates[j]))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = dims.iter().product();
    let mut idx = vec![0usize; dims.len()];
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        let mut s = 0f64;
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let beta = model.coeffs.beta[p];
            if beta != T::zero() {
                s += beta.widen() * mats[p].get(idx[i], idx[j]);
            }
        }
        values.push(s);
        for a in (0..dims.len()).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    ScoreTensor::new(dims, values)
}

/// How extra views are marginalized when more than two views are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceChoice {
    Sum,
    Max,
    /// Two-fold cross-validation over probes picks sum or max per fold.
    Auto,
}

impl std::str::FromStr for ReduceChoice {
    type Err = GmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            "auto" => Ok(Self::Auto),
            other => Err(GmpError::arg(format!("unknown reduction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub probe_view: usize,
    pub gallery_view: usize,
    pub reduce: ReduceChoice,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_view: 1,
            gallery_view: 0,
            reduce: ReduceChoice::Auto,
            threshold: 0.0,
            seed: 0,
        }
    }
}

/// Entities available for evaluation, one list per view with identities.
#[derive(Debug, Clone)]
pub struct EvalSplit<'a, T> {
    pub maps: Vec<Vec<&'a AppearanceMap<T>>>,
    pub identities: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub cmc: CmcCurve,
    pub auc: f64,
    pub verification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_probe: usize,
    pub n_gallery: usize,
    /// Primary result first; for more than two views the individual
    /// reductions follow.
    pub methods: Vec<MethodResult>,
}

impl EvalReport {
    pub fn primary(&self) -> &MethodResult {
        &self.methods[0]
    }

    pub fn rank1(&self) -> f64 {
        self.primary().cmc.rates[0]
    }
}

fn verification_of(scores: &ScoreMatrix, truth: &[usize], threshold: f64) -> Result<f64> {
    let mut pairs = Vec::with_capacity(scores.values.len());
    for (p, &t) in truth.iter().enumerate() {
        for g in 0..scores.cols {
            pairs.push((scores.get(p, g), if g == t { 1 } else { -1 }));
        }
    }
    verification_rate(&pairs, threshold)
}

fn method_result(name: &str, scores: &ScoreMatrix, truth: &[usize], threshold: f64) -> Result<MethodResult> {
    let curve = cmc(scores, truth)?;
    Ok(MethodResult {
        method: name.to_string(),
        auc: cmc_auc(&curve)?,
        verification: verification_of(scores, truth, threshold)?,
        cmc: curve,
    })
}

/// Score the probe view against the gallery view and compute CMC, AUC and
/// verification rate. Probes whose identity is absent from the gallery
/// are left out.
pub fn evaluate_protocol<T: Scalar>(
    model: &BilinearModel<T>,
    split: &EvalSplit<'_, T>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let m = model.n_views;
    if split.maps.len() != m || split.identities.len() != m {
        return Err(GmpError::arg("split must provide every model view"));
    }
    let (pv, gv) = (cfg.probe_view, cfg.gallery_view);
    if pv >= m || gv >= m || pv == gv {
        return Err(GmpError::arg("probe and gallery views must be distinct model views"));
    }
    for (maps, ids) in split.maps.iter().zip(&split.identities) {
        if maps.len() != ids.len() {
            return Err(GmpError::arg("one identity per entity required"));
        }
    }
    if split.maps[pv].is_empty() || split.maps[gv].is_empty() {
        return Err(GmpError::arg("empty probe or gallery"));
    }

    let probes: Vec<(usize, usize)> = split.identities[pv]
        .iter()
        .enumerate()
        .filter_map(|(p, id)| split.identities[gv].iter().position(|g| g == id).map(|t| (p, t)))
        .collect();
    if probes.is_empty() {
        return Err(GmpError::arg("no probe has a gallery match"));
    }
    let truth: Vec<usize> = probes.iter().map(|&(_, t)| t).collect();
    let probe_maps: Vec<&AppearanceMap<T>> = probes.iter().map(|&(p, _)| split.maps[pv][p]).collect();
    let n_gallery = split.maps[gv].len();

    if m == 2 {
        let raw = pair_score_matrix(model, pv, gv, &probe_maps, &split.maps[gv])?;
        let beta = model.coeffs.beta[0].widen();
        let scores = ScoreMatrix::new(raw.rows, raw.cols, raw.values.iter().map(|v| beta * v).collect())?;
        return Ok(EvalReport {
            n_probe: probes.len(),
            n_gallery,
            methods: vec![method_result("pairwise", &scores, &truth, cfg.threshold)?],
        });
    }

    let mut candidates: Vec<Vec<&AppearanceMap<T>>> = split.maps.clone();
    candidates[pv] = probe_maps;
    let tensor = score_tensor(model, &candidates)?;
    let sum = reduce_tensor(&tensor, (pv, gv), Reduction::Sum)?;
    let max = reduce_tensor(&tensor, (pv, gv), Reduction::Max)?;
    let sum_res = method_result("sum", &sum, &truth, cfg.threshold)?;
    let max_res = method_result("max", &max, &truth, cfg.threshold)?;
    let primary = match cfg.reduce {
        ReduceChoice::Sum => sum_res.clone(),
        ReduceChoice::Max => max_res.clone(),
        ReduceChoice::Auto => cross_validated(&sum, &max, &truth, cfg)?,
    };
    Ok(EvalReport {
        n_probe: probes.len(),
        n_gallery,
        methods: vec![primary, sum_res, max_res],
    })
}

fn cross_validated(sum: &ScoreMatrix, max: &ScoreMatrix, truth: &[usize], cfg: &EvalConfig) -> Result<MethodResult> {
    let n = truth.len();
    let rank_sum: Vec<usize> = (0..n).map(|p| match_rank(sum.row(p), truth[p])).collect();
    let rank_max: Vec<usize> = (0..n).map(|p| match_rank(max.row(p), truth[p])).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut fold = vec![0usize; n];
    for (i, &p) in order.iter().enumerate() {
        fold[p] = i % 2;
    }
    // lower mean rank on the other fold wins; ties prefer sum
    let mut use_max = [false; 2];
    for (f, choice) in use_max.iter_mut().enumerate() {
        let others: Vec<usize> = (0..n).filter(|&p| fold[p] != f).collect();
        let s: usize = others.iter().map(|&p| rank_sum[p]).sum();
        let m: usize = others.iter().map(|&p| rank_max[p]).sum();
        *choice = m < s;
    }
    let ranks: Vec<usize> = (0..n)
        .map(|p| if use_max[fold[p]] { rank_max[p] } else { rank_sum[p] })
        .collect();
    let curve = cmc_from_ranks(&ranks, sum.cols);
    let mut pairs = Vec::with_capacity(sum.values.len());
    for p in 0..n {
        let src = if use_max[fold[p]] { max } else { sum };
        for g in 0..sum.cols {
            pairs.push((src.get(p, g), if g == truth[p] { 1 } else { -1 }));
        }
    }
    Ok(MethodResult {
        method: "auto".into(),
        auc: cmc_auc(&curve)?,
        verification: verification_rate(&pairs, cfg.threshold)?,
        cmc: curve,
    })
}

/// Element-wise mean of reports from repeated trials.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| GmpError::arg("no reports to average"))?;
    let n = reports.len() as f64;
    let mut methods = Vec::with_capacity(first.methods.len());
    for (i, m) in first.methods.iter().enumerate() {
        let len = reports.iter().map(|r| r.methods[i].cmc.rates.len()).min().unwrap();
        let rates = (0..len)
            .map(|r| reports.iter().map(|rep| rep.methods[i].cmc.rates[r]).sum::<f64>() / n)
            .collect();
        methods.push(MethodResult {
            method: m.method.clone(),
            cmc: CmcCurve { rates },
            auc: reports.iter().map(|r| r.methods[i].auc).sum::<f64>() / n,
            verification: reports.iter().map(|r| r.methods[i].verification).sum::<f64>() / n,
        });
    }
    Ok(EvalReport {
        n_probe: first.n_probe,
        n_gallery: first.n_gallery,
        methods,
    })
}

/// CSV with a `rank` column followed by one rate column per method.
pub fn cmc_csv(report: &EvalReport) -> String {
    let mut s = String::from("rank");
    for m in &report.methods {
        s.push(',');
        s.push_str(&m.method);
    }
    s.push('\n');
    let len = report.methods.iter().map(|m| m.cmc.rates.len()).max().unwrap_or(0);
    for r in 0..len {
        s.push_str(&(r + 1).to_string());
        for m in &report.methods {
            s.push(',');
            if let Some(v) = m.cmc.rates.get(r) {
                s.push_str(&format!("{v}"));
            }
        }
        s.push('\n');
    }
    s
}

/// CSV of `method,rank1,auc_percent,verification`.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut s = String::from("method,rank1,auc_percent,verification\n");
    for m in &report.methods {
        s.push_str(&format!("{},{},{},{}\n", m.method, m.cmc.rates[0], 100.0 * m.auc, m.verification));
    }
    s
}

/// Standalone SVG line plot of the CMC curves.
pub fn cmc_svg(report: &EvalReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let len = report.methods.iter().map(|m| m.cmc.rates.len()).max().unwrap_or(1).max(2);
    let x = |r: usize| PAD + (W - 2.0 * PAD) * (r as f64 - 1.0) / (len as f64 - 1.0);
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{mid}\" y=\"{lx}\" text-anchor=\"middle\" font-size=\"12\">rank</text>\n\
         <text x=\"12\" y=\"{PAD}\" font-size=\"12\">rate</text>\n",
        b = H - PAD,
        r = W - PAD,
        mid = W / 2.0,
        lx = H - 10.0,
    );
    for (i, m) in report.methods.iter().enumerate() {
        let pts: Vec<String> = m
            .cmc
            .rates
            .iter()
            .enumerate()
            .map(|(r, &v)| format!("{:.2},{:.2}", x(r + 1), y(v)))
            .collect();
        let colour = COLOURS[i % COLOURS.len()];
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{colour}\">{}</text>\n",
            pts.join(" "),
            W - PAD - 60.0,
            PAD + 14.0 * (i as f64 + 1.0),
            m.method
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perfect_scores_give_unit_cmc() {
        let n = 6;
        let values = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        let m = ScoreMatrix::new(n, n, values).unwrap();
        let c = cmc(&m, &(0..n).collect::<Vec<_>>()).unwrap();
        assert!(c.rates.iter().all(|&r| r == 1.0));
        assert_eq!(cmc_auc(&c).unwrap(), 1.0);
    }

    #[test]
    fn step_function_cmc() {
        let m = ScoreMatrix::new(1, 5, vec![0.9, 0.1, 0.5, 0.7, 0.2]).unwrap();
        let c = cmc(&m, &[2]).unwrap();
        assert_eq!(c.rates, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((cmc_auc(&c).unwrap() - 0.6).abs() < 1e-15);
        assert!(cmc(&m, &[]).is_err());
        assert!(cmc(&m, &[7]).is_err());
        assert!(cmc_auc(&CmcCurve { rates: vec![] }).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let m = ScoreMatrix::new(2, 3, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(match_rank(m.row(0), 0), 1);
        assert_eq!(match_rank(m.row(1), 2), 3);
    }

    #[test]
    fn verification_basics() {
        let s = vec![(1.0, 1), (2.0, 1), (-1.0, -1), (-0.5, -1)];
        assert_eq!(verification_rate(&s, 0.0).unwrap(), 1.0);
        let flipped: Vec<_> = s.iter().map(|&(v, y)| (v, -y)).collect();
        assert_eq!(verification_rate(&flipped, 0.0).unwrap(), 0.0);
        assert_eq!(verification_rate(&[(0.0, 1)], 0.0).unwrap(), 1.0);
        assert!(verification_rate(&[], 0.0).is_err());
    }

    #[test]
    fn two_axis_reduction_is_identity() {
        let t = ScoreTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        for op in [Reduction::Sum, Reduction::Max] {
            let m = reduce_tensor(&t, (0, 1), op).unwrap();
            assert_eq!(m.values, t.values);
        }
        let tr = reduce_tensor(&t, (1, 0), Reduction::Sum).unwrap();
        assert_eq!(tr.values, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(reduce_tensor(&t, (1, 1), Reduction::Max).is_err());
    }

    #[test]
    fn three_axis_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = vec![3, 4, 5];
        let values: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = ScoreTensor::new(dims, values.clone()).unwrap();
        let m = reduce_tensor(&t, (0, 1), Reduction::Max).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want = (0..5).map(|k| values[(i * 4 + j) * 5 + k]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(m.get(i, j), want);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn cmc_invariant_under_monotone_transform(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = (rng.gen_range(1..10), rng.gen_range(1..12));
            let values: Vec<f64> = (0..p * g).map(|_| (rng.gen_range(0..6) as f64) * 0.5).collect();
            let truth: Vec<usize> = (0..p).map(|_| rng.gen_range(0..g)).collect();
            let m = ScoreMatrix::new(p, g, values.clone()).unwrap();
            let mt = ScoreMatrix::new(p, g, values.iter().map(|v| (3.0 * v).exp() - 7.0).collect()).unwrap();
            let c = cmc(&m, &truth).unwrap();
            proptest::prop_assert_eq!(&c, &cmc(&mt, &truth).unwrap());
            proptest::prop_assert!(c.rates.windows(2).all(|w| w[0] <= w[1]));
            proptest::prop_assert_eq!(*c.rates.last().unwrap(), 1.0);
        }

        #[test]
        fn verification_shift_invariant(seed in 0u64..500, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // dyadic values keep the shift exact
            let s: Vec<(f64, i8)> = (0..30)
                .map(|_| (rng.gen_range(-8i32..8) as f64 * 0.25, if rng.gen_bool(0.5) { 1 } else { -1 }))
                .collect();
            let shift = (shift * 4.0).round() / 4.0;
            let shifted: Vec<(f64, i8)> = s.iter().map(|&(v, y)| (v + shift, y)).collect();
            proptest::prop_assert_eq!(
                verification_rate(&s, 0.5).unwrap(),
                verification_rate(&shifted, 0.5 + shift).unwrap()
            );
        }

        #[test]
        fn sum_reduction_linear_max_monotone(seed in 0u64..300, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = vec![2, 3, 4];
            let a: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ta = ScoreTensor::new(dims.clone(), a.clone()).unwrap();
            let tb = ScoreTensor::new(dims.clone(), b.clone()).unwrap();
            let tab = ScoreTensor::new(dims.clone(), a.iter().zip(&b).map(|(x, y)| x + c * y).collect()).unwrap();
            let ra = reduce_tensor(&ta, (0, 2), Reduction::Sum).unwrap();
            let rb = reduce_tensor(&tb, (0, 2), Reduction::Sum).unwrap();
            let rab = reduce_tensor(&tab, (0, 2), Reduction::Sum).unwrap();
            for i in 0..ra.values.len() {
                proptest::prop_assert!((rab.values[i] - ra.values[i] - c * rb.values[i]).abs() < 1e-12);
            }
            let up = ScoreTensor::new(dims, a.iter().map(|x| x + c.abs()).collect()).unwrap();
            let ma = reduce_tensor(&ta, (0, 2), Reduction::Max).unwrap();
            let mu = reduce_tensor(&up, (0, 2), Reduction::Max).unwrap();
            proptest::prop_assert!(ma.values.iter().zip(&mu.values).all(|(x, y)| x <= y));
        }
    }
}
