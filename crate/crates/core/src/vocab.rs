//! Per-view visual vocabularies: K-Means fitting and nearest-centroid
//! quantization of feature fields into word grids.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmpError, Result};
use crate::imaging::FeatureField;

/// Default vocabulary size per view.
pub const DEFAULT_K: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub view: u32,
    pub k: usize,
    pub dim: usize,
    /// `k * dim` values, one centroid per row.
    pub centroids: Vec<f32>,
    pub seed: u64,
}

impl Vocabulary {
    pub fn new(view: u32, dim: usize, centroids: Vec<f32>, seed: u64) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(GmpError::arg("centroid buffer does not match dimension"));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(GmpError::arg("centroids must be finite"));
        }
        Ok(Self {
            view,
            k: centroids.len() / dim,
            dim,
            centroids,
            seed,
        })
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        nearest(&self.centroids, self.dim, v).0
    }

    /// One centroid per line, comma separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.k {
            let row: Vec<String> = self.centroid(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Outcome of a K-Means run, including the per-iteration inertia.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub vocab: Vocabulary,
    /// Inertia after the initial assignment and after every Lloyd step.
    pub inertia: Vec<f64>,
    pub assignments: Vec<usize>,
    pub converged: bool,
}

fn distinct_count(samples: &[Vec<f32>]) -> usize {
    let mut keys: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| s.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn fit_kmeans(samples: &[Vec<f32>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansFit> {
    if samples.is_empty() {
        return Err(GmpError::arg("K-Means needs at least one sample"));
    }
    if k == 0 {
        return Err(GmpError::arg("K-Means needs k >= 1"));
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(GmpError::arg("samples must share a positive dimension"));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GmpError::arg("samples must be finite"));
    }
    let distinct = distinct_count(samples);
    if k > distinct {
        return Err(GmpError::arg(format!(
            "k = {k} exceeds the {distinct} distinct samples"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(samples, k, &mut rng);

    let (mut assign, mut dists) = assign_all(samples, &centroids, dim);
    let mut inertia = vec![dists.iter().sum::<f64>()];
    let mut converged = false;
    for _ in 0..max_iter {
        update_centroids(samples, &assign, &mut dists, &mut centroids, k, dim);
        let (next, next_dists) = assign_all(samples, &centroids, dim);
        inertia.push(next_dists.iter().sum());
        dists = next_dists;
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }
    Ok(KMeansFit {
        vocab: Vocabulary::new(0, dim, centroids, seed)?,
        inertia,
        assignments: assign,
        converged,
    })
}

/// K-Means vocabulary for one view.
pub fn kmeans_fit(samples: &[Vec<f32>], k: usize, seed: u64, max_iter: usize) -> Result<Vocabulary> {
    fit_kmeans(samples, k, seed, max_iter).map(|f| f.vocab)
}

fn plus_plus_init(samples: &[Vec<f32>], k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dim = samples[0].len();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&samples[rng.gen_range(0..samples.len())]);
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        // distinct-count check guarantees total > 0 here
        let mut target = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let start = centroids.len();
        centroids.extend_from_slice(&samples[pick]);
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &centroids[start..]));
        }
    }
    centroids
}

fn assign_all(samples: &[Vec<f32>], centroids: &[f32], dim: usize) -> (Vec<usize>, Vec<f64>) {
    samples.iter().map(|s| nearest(centroids, dim, s)).unzip()
}

fn update_centroids(
    samples: &[Vec<f32>],
    assign: &[usize],
    dists: &mut [f64],
    centroids: &mut [f32],
    k: usize,
    dim: usize,
) {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (s, &a) in samples.iter().zip(assign) {
        counts[a] += 1;
        for (acc, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(s) {
            *acc += v as f64;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            // reseed to the sample farthest from its current centroid
            let far = dists
                .iter()
                .enumerate()
                .fold(0, |best, (i, &d)| if d > dists[best] { i } else { best });
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&samples[far]);
            dists[far] = 0.0;
            continue;
        }
        let n = counts[c] as f64;
        for (dst, &s) in centroids[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(&sums[c * dim..(c + 1) * dim])
        {
            *dst = (s / n) as f32;
        }
    }
}

/// A grid of visual-word indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordGrid {
    width: usize,
    height: usize,
    k: usize,
    words: Vec<u32>,
}

impl WordGrid {
    pub fn new(width: usize, height: usize, k: usize, words: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GmpError::arg("word grid must be non-empty"));
        }
        if words.len() != width * height {
            return Err(GmpError::arg(format!(
                "expected {} words, got {}",
                width * height,
                words.len()
            )));
        }
        if let Some(w) = words.iter().find(|&&w| w as usize >= k) {
            return Err(GmpError::arg(format!("word {w} out of range for k = {k}")));
        }
        Ok(Self {
            width,
            height,
            k,
            words,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.words[y * self.width + x]
    }
}

/// Map every location of `field` to its nearest centroid.
pub fn quantize(field: &FeatureField, vocab: &Vocabulary) -> Result<WordGrid> {
    if field.dim() != vocab.dim {
        return Err(GmpError::arg(format!(
            "feature dimension {} does not match vocabulary dimension {}",
            field.dim(),
            vocab.dim
        )));
    }
    let words = field.iter().map(|v| vocab.nearest(v) as u32).collect();
    WordGrid::new(field.width(), field.height(), vocab.k, words)
}

/// Draw `n` descriptors uniformly from the union of `fields`; without
/// replacement when possible, with replacement when `n` exceeds the pool.
pub fn sample_training_features(fields: &[FeatureField], n: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if fields.is_empty() {
        return Err(GmpError::arg("no feature fields to sample from"));
    }
    let mut offsets = Vec::with_capacity(fields.len());
    let mut total = 0usize;
    for f in fields {
        offsets.push(total);
        total += f.len();
    }
    if total == 0 {
        return Err(GmpError::arg("feature fields are empty"));
    }
    let lookup = |i: usize| {
        let f = offsets.partition_point(|&o| o <= i) - 1;
        fields[f].vector(i - offsets[f]).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n <= total {
        index::sample(&mut rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..total)).collect()
    };
    Ok(picks.into_iter().map(lookup).collect())
}
