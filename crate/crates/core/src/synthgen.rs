//! Synthetic multi-view data built from latent parts on a lattice, and
//! direct-summation oracles for small instances.
//!
//! Each identity draws one latent appearance per part. Every view maps
//! latent appearances to its own words through a fixed random permutation,
//! so views disagree on words but share the spatial layout. Images jitter
//! each part anchor independently and corrupt pixels with probability
//! `word_noise`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{kernel_value, sampled_len, KernelParams, DROP_THRESHOLD};
use crate::error::{GmpError, Result};
use crate::scoring::{view_pairs, BilinearModel};
use crate::vocab::WordGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_views: usize,
    pub n_identities: usize,
    pub images_per_entity: usize,
    /// `(width, height)` in pixels.
    pub grid: (usize, usize),
    pub n_parts: usize,
    pub k_words: usize,
    pub word_noise: f64,
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_views: 2,
            n_identities: 100,
            images_per_entity: 1,
            grid: (40, 32),
            n_parts: 20,
            k_words: 50,
            word_noise: 0.1,
            jitter: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.grid;
        if self.n_views < 2 {
            return Err(GmpError::arg("at least two views required"));
        }
        if self.n_identities == 0 || self.images_per_entity == 0 {
            return Err(GmpError::arg("identity and image counts must be positive"));
        }
        if w < 2 || h < 2 {
            return Err(GmpError::arg("grid must be at least 2x2"));
        }
        if self.n_parts == 0 || self.n_parts > w * h {
            return Err(GmpError::arg(format!("n_parts must be in 1..={}", w * h)));
        }
        if self.k_words == 0 || self.k_words > u32::MAX as usize {
            return Err(GmpError::arg("k_words must be positive"));
        }
        if !(0.0..=1.0).contains(&self.word_noise) {
            return Err(GmpError::arg("word_noise must lie in [0, 1]"));
        }
        if 2 * self.jitter >= w.min(h) {
            return Err(GmpError::arg("jitter must be below half the smaller grid side"));
        }
        Ok(())
    }
}

/// One view of a generated dataset: `entities[e]` is the image stack of
/// identity `identities[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub entities: Vec<Vec<WordGrid>>,
    pub identities: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub views: Vec<SynthView>,
    /// Anchor pixel of each part, before jitter.
    pub anchors: Vec<(usize, usize)>,
    /// Latent appearance of each part, per identity.
    pub signatures: Vec<Vec<u32>>,
    /// `word_maps[m][a]` is the word view `m` renders latent appearance `a` as.
    pub word_maps: Vec<Vec<u32>>,
}

impl SynthData {
    /// Keep identities in `range`, in every view.
    pub fn subset(&self, range: std::ops::Range<usize>) -> SynthData {
        SynthData {
            spec: SynthSpec {
                n_identities: range.len(),
                ..self.spec.clone()
            },
            views: self
                .views
                .iter()
                .map(|v| SynthView {
                    entities: v.entities[range.clone()].to_vec(),
                    identities: v.identities[range.clone()].to_vec(),
                })
                .collect(),
            anchors: self.anchors.clone(),
            signatures: self.signatures[range].to_vec(),
            word_maps: self.word_maps.clone(),
        }
    }
}

/// Evenly spaced anchors on the smallest near-square lattice holding `n` parts.
pub fn lattice_anchors(n: usize, (w, h): (usize, usize)) -> Vec<(usize, usize)> {
    let aspect = w as f64 / h as f64;
    let mut cols = ((n as f64 * aspect).sqrt().round() as usize).clamp(1, n.min(w));
    let mut rows = n.div_ceil(cols);
    while rows > h {
        cols += 1;
        rows = n.div_ceil(cols);
    }
    (0..n)
        .map(|i| {
            let (c, r) = (i % cols, i / cols);
            let x = ((2 * c + 1) * w) / (2 * cols);
            let y = ((2 * r + 1) * h) / (2 * rows);
            (x.min(w - 1), y.min(h - 1))
        })
        .collect()
}

fn render(
    anchors: &[(isize, isize)],
    words: &[u32],
    (w, h): (usize, usize),
    k: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<WordGrid> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            // nearest anchor in squared Euclidean distance, lowest index on ties
            let mut best = 0;
            let mut best_d = isize::MAX;
            for (p, &(ax, ay)) in anchors.iter().enumerate() {
                let d = (x - ax).pow(2) + (y - ay).pow(2);
                if d < best_d {
                    best_d = d;
                    best = p;
                }
            }
            let word = if noise > 0.0 && rng.gen_bool(noise) {
                rng.gen_range(0..k as u32)
            } else {
                words[best]
            };
            out.push(word);
        }
    }
    WordGrid::new(w, h, k, out)
}

/// Generate a dataset. Identity `i` appears once in every view.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.k_words;
    let anchors = lattice_anchors(spec.n_parts, spec.grid);
    let signatures: Vec<Vec<u32>> = (0..spec.n_identities)
        .map(|_| (0..spec.n_parts).map(|_| rng.gen_range(0..k as u32)).collect())
        .collect();
    let word_maps: Vec<Vec<u32>> = (0..spec.n_views)
        .map(|_| {
            let mut m: Vec<u32> = (0..k as u32).collect();
            m.shuffle(&mut rng);
            m
        })
        .collect();

    let j = spec.jitter as isize;
    let mut views = Vec::with_capacity(spec.n_views);
    for (m, map) in word_maps.iter().enumerate() {
        let mut entities = Vec::with_capacity(spec.n_identities);
        for (i, sig) in signatures.iter().enumerate() {
            // per-image stream so images do not depend on generation order
            let mut img_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            img_rng.set_stream(1 + (m as u64) * spec.n_identities as u64 + i as u64);
            let words: Vec<u32> = sig.iter().map(|&a| map[a as usize]).collect();
            let stack = (0..spec.images_per_entity)
                .map(|_| {
                    let moved: Vec<(isize, isize)> = anchors
                        .iter()
                        .map(|&(x, y)| {
                            let dx = if j > 0 { img_rng.gen_range(-j..=j) } else { 0 };
                            let dy = if j > 0 { img_rng.gen_range(-j..=j) } else { 0 };
                            (x as isize + dx, y as isize + dy)
                        })
                        .collect();
                    render(&moved, &words, spec.grid, k, spec.word_noise, &mut img_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            entities.push(stack);
        }
        views.push(SynthView {
            entities,
            identities: (0..spec.n_identities as u64).collect(),
        });
    }
    Ok(SynthData {
        spec: spec.clone(),
        views,
        anchors,
        signatures,
        word_maps,
    })
}

/// Labels CSV: `entity_id,view,identity`, with entity ids numbered view-major.
pub fn labels_csv(data: &SynthData) -> String {
    let mut s = String::from("entity_id,view,identity\n");
    let mut id = 0;
    for (m, v) in data.views.iter().enumerate() {
        for &ident in &v.identities {
            s.push_str(&format!("{id},{m},{ident}\n"));
            id += 1;
        }
    }
    s
}

/// Largest instance the oracles accept.
pub const ORACLE_MAX_K: usize = 10;
pub const ORACLE_MAX_LOCATIONS: usize = 30;
pub const ORACLE_MAX_VIEWS: usize = 3;

/// Dense `k x L` appearance map (word-major) by direct summation: for every
/// image, word and sampled location, the largest kernel value over all
/// pixels carrying that word; then the mean over images.
pub fn oracle_dense_map(stack: &[WordGrid], kernel: &KernelParams<f64>) -> Result<Vec<f64>> {
    let first = stack.first().ok_or_else(|| GmpError::arg("entity has no images"))?;
    let (w, h, k) = (first.width(), first.height(), first.k());
    let nx = sampled_len(w, kernel.stride);
    let ny = sampled_len(h, kernel.stride);
    let n_loc = nx * ny;
    let mut out = vec![0f64; k * n_loc];
    for g in stack {
        if (g.width(), g.height(), g.k()) != (w, h, k) {
            return Err(GmpError::arg("image shapes differ"));
        }
        for z in 0..k {
            for loc in 0..n_loc {
                let (hx, hy) = ((loc % nx) * kernel.stride, (loc / nx) * kernel.stride);
                let mut best = 0f64;
                for py in 0..h {
                    for px in 0..w {
                        if g.get(px, py) as usize == z {
                            let d = hx.abs_diff(px).max(hy.abs_diff(py)) as f64;
                            best = best.max(kernel_value(d, kernel));
                        }
                    }
                }
                if best >= DROP_THRESHOLD {
                    out[z * n_loc + loc] += best;
                }
            }
        }
    }
    let n = stack.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

fn check_oracle_size(model: &BilinearModel<f64>, n_loc: usize) -> Result<()> {
    if model.n_views > ORACLE_MAX_VIEWS
        || n_loc > ORACLE_MAX_LOCATIONS
        || model.view_k.iter().any(|&k| k > ORACLE_MAX_K)
    {
        return Err(GmpError::arg(format!(
            "instance too large for the oracle (limits k <= {ORACLE_MAX_K}, locations <= {ORACLE_MAX_LOCATIONS}, views <= {ORACLE_MAX_VIEWS})"
        )));
    }
    Ok(())
}

/// Group score from dense maps by materializing every pair's full
/// `(z_i, z_j, h)` co-occurrence tensor.
pub fn dense_group_score(maps: &[Vec<f64>], n_loc: usize, model: &BilinearModel<f64>) -> Result<f64> {
    check_oracle_size(model, n_loc)?;
    if maps.len() != model.n_views || model.shared.len() != n_loc {
        return Err(GmpError::arg("maps do not match the model"));
    }
    for (m, map) in maps.iter().enumerate() {
        if map.len() != model.view_k[m] * n_loc {
            return Err(GmpError::arg("dense map has the wrong size"));
        }
    }
    let mut total = 0f64;
    for (p, &(i, j)) in view_pairs(model.n_views).iter().enumerate() {
        let (ki, kj) = (model.view_k[i], model.view_k[j]);
        let mut phi = vec![0f64; ki * kj * n_loc];
        for zi in 0..ki {
            for zj in 0..kj {
                for h in 0..n_loc {
                    phi[(zi * kj + zj) * n_loc + h] = maps[i][zi * n_loc + h] * maps[j][zj * n_loc + h];
                }
            }
        }
        let w = &model.pair_weights[p].matrix;
        let mut s = 0f64;
        for (idx, &v) in phi.iter().enumerate() {
            let h = idx % n_loc;
            let z = idx / n_loc;
            s += w[z] * model.shared.values[h] * v;
        }
        total += model.coeffs.beta[p] * s;
    }
    Ok(total)
}

/// Group score straight from raw word grids, one image stack per view.
pub fn oracle_group_score(stacks: &[&[WordGrid]], model: &BilinearModel<f64>) -> Result<f64> {
    let first = stacks
        .first()
        .and_then(|s| s.first())
        .ok_or_else(|| GmpError::arg("no images"))?;
    let n_loc = sampled_len(first.width(), model.kernel.stride) * sampled_len(first.height(), model.kernel.stride);
    check_oracle_size(model, n_loc)?;
    let maps = stacks
        .iter()
        .map(|s| oracle_dense_map(s, &model.kernel))
        .collect::<Result<Vec<_>>>()?;
    dense_group_score(&maps, n_loc, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode_entity;
    use crate::scoring::group_score;

    fn small() -> SynthSpec {
        SynthSpec {
            n_views: 2,
            n_identities: 6,
            images_per_entity: 2,
            grid: (12, 10),
            n_parts: 6,
            k_words: 8,
            word_noise: 0.0,
            jitter: 0,
            seed: 11,
        }
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(small().validate().is_ok());
        let bad = [
            SynthSpec { word_noise: 1.5, ..small() },
            SynthSpec { jitter: 5, ..small() },
            SynthSpec { n_parts: 121, ..small() },
            SynthSpec { n_views: 1, ..small() },
            SynthSpec { k_words: 0, ..small() },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(GmpError::InvalidArgument(_))), "{s:?}");
        }
    }

    #[test]
    fn deterministic() {
        let s = SynthSpec { word_noise: 0.3, jitter: 2, ..small() };
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = generate(&SynthSpec { seed: 12, ..s.clone() }).unwrap();
        assert_ne!(generate(&s).unwrap().views, other.views);
    }

    #[test]
    fn noiseless_images_follow_identity() {
        let d = generate(&small()).unwrap();
        for v in &d.views {
            for stack in &v.entities {
                assert!(stack.iter().all(|g| g == &stack[0]));
            }
        }
        // the view word maps are bijections, so a pixel's word in view 1 is
        // a fixed function of its word in view 0
        let inv0: Vec<usize> = {
            let mut inv = vec![0; 8];
            for (a, &w) in d.word_maps[0].iter().enumerate() {
                inv[w as usize] = a;
            }
            inv
        };
        for e in 0..6 {
            let (g0, g1) = (&d.views[0].entities[e][0], &d.views[1].entities[e][0]);
            for (&w0, &w1) in g0.words().iter().zip(g1.words()) {
                assert_eq!(d.word_maps[1][inv0[w0 as usize]], w1);
            }
        }
    }

    #[test]
    fn anchors_are_distinct_and_inside() {
        for (n, grid) in [(20, (40, 32)), (7, (12, 10)), (1, (2, 2)), (30, (6, 5))] {
            let a = lattice_anchors(n, grid);
            assert_eq!(a.len(), n);
            let mut s = a.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), n, "{n} {grid:?}");
            assert!(a.iter().all(|&(x, y)| x < grid.0 && y < grid.1));
        }
    }

    #[test]
    fn labels_layout() {
        let d = generate(&SynthSpec { n_identities: 2, ..small() }).unwrap();
        assert_eq!(labels_csv(&d), "entity_id,view,identity\n0,0,0\n1,0,1\n2,1,0\n3,1,1\n");
    }

    #[test]
    fn oracle_matches_implicit_scoring() {
        let d = generate(&SynthSpec { word_noise: 0.4, jitter: 1, ..small() }).unwrap();
        let kernel = KernelParams::new(2.0, 3.0, 3).unwrap();
        let n_loc = sampled_len(12, 3) * sampled_len(10, 3);
        let mut model = BilinearModel::ones(&[8, 8], n_loc, kernel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        model.pair_weights[0].matrix.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        model.shared.values.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        model.coeffs.beta[0] = 0.7;
        for e in 0..6 {
            let s0 = &d.views[0].entities[e];
            let s1 = &d.views[1].entities[(e + 1) % 6];
            let a = encode_entity(s0, &kernel).unwrap();
            let b = encode_entity(s1, &kernel).unwrap();
            let fast = group_score(&[&a, &b], &model).unwrap();
            let slow = oracle_group_score(&[s0, s1], &model).unwrap();
            assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0), "{fast} {slow}");
        }
    }

    #[test]
    fn oracle_counting_and_guardrail() {
        let g = WordGrid::new(5, 5, 1, vec![0; 25]).unwrap();
        let kernel = KernelParams::new(1.0, 2.0, 1).unwrap();
        let model = BilinearModel::ones(&[1, 1], 25, kernel).unwrap();
        assert_eq!(oracle_group_score(&[&[g.clone()], &[g.clone()]], &model).unwrap(), 25.0);
        let zero = vec![vec![0.0; 25], vec![0.0; 25]];
        assert_eq!(dense_group_score(&zero, 25, &model).unwrap(), 0.0);
        let big = WordGrid::new(7, 7, 1, vec![0; 49]).unwrap();
        let model49 = BilinearModel::ones(&[1, 1], 49, kernel).unwrap();
        assert!(oracle_group_score(&[&[big.clone()], &[big]], &model49).is_err());
        let model_k = BilinearModel::ones(&[11, 1], 25, kernel).unwrap();
        assert!(dense_group_score(&[vec![0.0; 275], vec![0.0; 25]], 25, &model_k).is_err());
    }
}
