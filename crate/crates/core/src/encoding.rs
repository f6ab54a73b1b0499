//! Appearance maps: for every visual word and sampled location, the
//! truncated exponential kernel of the chessboard distance to the nearest
//! pixel carrying that word, averaged over an entity's images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{GmpError, Result};
use crate::scalar::Scalar;
use crate::vocab::WordGrid;

/// Kernel values below this are not stored.
pub const DROP_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    /// Window size: the kernel decays as `exp(-d / sigma)`.
    pub sigma: T,
    /// Distances above `alpha` give zero.
    pub alpha: T,
    /// Location-grid subsampling step in pixels.
    pub stride: usize,
}

impl<T: Scalar> Default for KernelParams<T> {
    fn default() -> Self {
        Self {
            sigma: T::lit(3.0),
            alpha: T::lit(6.0),
            stride: 4,
        }
    }
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(sigma: T, alpha: T, stride: usize) -> Result<Self> {
        let p = Self { sigma, alpha, stride };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > T::zero()) || !self.sigma.is_finite() {
            return Err(GmpError::arg(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.alpha >= T::zero()) {
            return Err(GmpError::arg(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.stride == 0 {
            return Err(GmpError::arg("stride must be >= 1"));
        }
        Ok(())
    }
}

/// Truncated exponential kernel. Infinite distance maps to 0.
#[inline]
pub fn kernel_value<T: Scalar>(d: T, params: &KernelParams<T>) -> T {
    if d.is_infinite() || d > params.alpha {
        T::zero()
    } else {
        (-d / params.sigma).exp()
    }
}

/// Marker for locations with no seed.
pub const UNREACHABLE: u32 = u32::MAX;

/// Chessboard distance from every pixel to the nearest seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    /// Row-major; [`UNREACHABLE`] where there is no seed at all.
    pub distances: Vec<u32>,
}

impl DistanceField {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.distances[y * self.width + x]
    }
}

/// Exact chessboard distance transform by a forward and a backward raster
/// sweep over the 8-neighbourhood.
pub fn chessboard_dt(seeds: &[bool], width: usize, height: usize) -> Result<DistanceField> {
    if seeds.len() != width * height {
        return Err(GmpError::arg(format!(
            "seed mask has {} entries for a {width}x{height} grid",
            seeds.len()
        )));
    }
    let mut d: Vec<u32> = seeds.iter().map(|&s| if s { 0 } else { UNREACHABLE }).collect();
    let relax = |cur: u32, n: u32| if n == UNREACHABLE { cur } else { cur.min(n + 1) };

    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let mut v = d[i];
            if v == 0 {
                continue;
            }
            if x > 0 {
                v = relax(v, d[i - 1]);
            }
            if y > 0 {
                let up = i - width;
                v = relax(v, d[up]);
                if x > 0 {
                    v = relax(v, d[up - 1]);
                }
                if x + 1 < width {
                    v = relax(v, d[up + 1]);
                }
            }
            d[i] = v;
        }
    }
    for y in (0..height).rev() {
        for x in (0..width).rev() {
            let i = y * width + x;
            let mut v = d[i];
            if v == 0 {
                continue;
            }
            if x + 1 < width {
                v = relax(v, d[i + 1]);
            }
            if y + 1 < height {
                let down = i + width;
                v = relax(v, d[down]);
                if x > 0 {
                    v = relax(v, d[down - 1]);
                }
                if x + 1 < width {
                    v = relax(v, d[down + 1]);
                }
            }
            d[i] = v;
        }
    }
    Ok(DistanceField {
        width,
        height,
        distances: d,
    })
}

/// Distance transform of the pixels of `grid` carrying `word`.
pub fn word_distance(grid: &WordGrid, word: u32) -> DistanceField {
    let seeds: Vec<bool> = grid.words().iter().map(|&w| w == word).collect();
    chessboard_dt(&seeds, grid.width(), grid.height()).expect("mask matches grid")
}

/// Sparse word-by-location matrix of kernel responses for one entity.
///
/// Stored column-wise by location: the words of location `h` are
/// `words[start[h]..start[h + 1]]`, strictly increasing, with matching
/// `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceMap<T> {
    view: u32,
    k: usize,
    grid_w: usize,
    grid_h: usize,
    stride: usize,
    start: Vec<u32>,
    words: Vec<u32>,
    values: Vec<T>,
}

/// Number of sampled locations along an axis of `len` pixels.
#[inline]
pub fn sampled_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

impl<T: Scalar> AppearanceMap<T> {
    /// A map without any entries.
    pub fn empty(view: u32, k: usize, grid_w: usize, grid_h: usize, stride: usize) -> Self {
        let n = sampled_len(grid_w, stride) * sampled_len(grid_h, stride);
        Self {
            view,
            k,
            grid_w,
            grid_h,
            stride,
            start: vec![0; n + 1],
            words: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from `(word, location, value)` triplets in any order.
    pub fn from_triplets(
        view: u32,
        k: usize,
        grid_w: usize,
        grid_h: usize,
        stride: usize,
        mut triplets: Vec<(u32, u32, T)>,
    ) -> Result<Self> {
        if k == 0 || grid_w == 0 || grid_h == 0 || stride == 0 {
            return Err(GmpError::arg("appearance map needs k, grid and stride >= 1"));
        }
        let n_loc = sampled_len(grid_w, stride) * sampled_len(grid_h, stride);
        triplets.sort_by_key(|&(w, h, _)| (h, w));
        let mut start = vec![0u32; n_loc + 1];
        let mut words = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(u32, u32)> = None;
        for (w, h, v) in triplets {
            if w as usize >= k || h as usize >= n_loc {
                return Err(GmpError::arg(format!("entry ({w}, {h}) out of range")));
            }
            if !(v > T::zero() && v <= T::one()) {
                return Err(GmpError::arg(format!("entry value {v} outside (0, 1]")));
            }
            if prev == Some((w, h)) {
                return Err(GmpError::arg(format!("duplicate entry ({w}, {h})")));
            }
            prev = Some((w, h));
            start[h as usize + 1] += 1;
            words.push(w);
            values.push(v);
        }
        for i in 0..n_loc {
            start[i + 1] += start[i];
        }
        Ok(Self {
            view,
            k,
            grid_w,
            grid_h,
            stride,
            start,
            words,
            values,
        })
    }

    pub fn with_view(mut self, view: u32) -> Self {
        self.view = view;
        self
    }

    pub fn view(&self) -> u32 {
        self.view
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_w, self.grid_h)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of sampled locations `|h|`.
    pub fn locations(&self) -> usize {
        self.start.len() - 1
    }

    /// Pixel coordinates of sampled location `h`.
    pub fn location_xy(&self, h: usize) -> (usize, usize) {
        let nx = sampled_len(self.grid_w, self.stride);
        ((h % nx) * self.stride, (h / nx) * self.stride)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Sparse word column at location `h`.
    #[inline]
    pub fn column(&self, h: usize) -> (&[u32], &[T]) {
        let (a, b) = (self.start[h] as usize, self.start[h + 1] as usize);
        (&self.words[a..b], &self.values[a..b])
    }

    /// Value at `(word, h)`, zero when absent.
    pub fn get(&self, word: u32, h: usize) -> T {
        let (w, v) = self.column(h);
        w.binary_search(&word).map_or(T::zero(), |i| v[i])
    }

    /// True when both maps sample the same location grid.
    pub fn same_grid(&self, other: &AppearanceMap<T>) -> bool {
        self.grid_w == other.grid_w && self.grid_h == other.grid_h && self.stride == other.stride
    }

    /// Entries ordered by `(word, location)`.
    pub fn triplets(&self) -> Vec<(u32, u32, T)> {
        let mut out = Vec::with_capacity(self.nnz());
        for h in 0..self.locations() {
            let (w, v) = self.column(h);
            out.extend(w.iter().zip(v).map(|(&w, &v)| (w, h as u32, v)));
        }
        out.sort_by_key(|&(w, h, _)| (w, h));
        out
    }

    /// Dense `k x |h|` matrix, word-major.
    pub fn to_dense(&self) -> Vec<T> {
        let n = self.locations();
        let mut out = vec![T::zero(); self.k * n];
        for h in 0..n {
            let (w, v) = self.column(h);
            for (&w, &v) in w.iter().zip(v) {
                out[w as usize * n + h] = v;
            }
        }
        out
    }

    /// Same entries converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> AppearanceMap<U> {
        AppearanceMap {
            view: self.view,
            k: self.k,
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            stride: self.stride,
            start: self.start.clone(),
            words: self.words.clone(),
            values: self.values.iter().map(|&v| U::narrow(v.widen())).collect(),
        }
    }
}

/// Appearance map of a single image.
pub fn encode_image<T: Scalar>(grid: &WordGrid, params: &KernelParams<T>) -> Result<AppearanceMap<T>> {
    params.validate()?;
    let (w, h) = (grid.width(), grid.height());
    let nx = sampled_len(w, params.stride);
    let ny = sampled_len(h, params.stride);
    let mut present = vec![false; grid.k()];
    for &word in grid.words() {
        present[word as usize] = true;
    }
    // value cache: distances are small integers
    let mut cache: Vec<T> = Vec::new();
    let mut columns: Vec<Vec<(u32, T)>> = vec![Vec::new(); nx * ny];
    let drop = T::lit(DROP_THRESHOLD);
    for word in (0..grid.k() as u32).filter(|&z| present[z as usize]) {
        let field = word_distance(grid, word);
        for (yi, y) in (0..h).step_by(params.stride).enumerate() {
            for (xi, x) in (0..w).step_by(params.stride).enumerate() {
                let d = field.get(x, y);
                if d == UNREACHABLE {
                    continue;
                }
                let d = d as usize;
                while cache.len() <= d {
                    cache.push(kernel_value(T::lit(cache.len() as f64), params));
                }
                let v = cache[d];
                if v >= drop {
                    columns[yi * nx + xi].push((word, v));
                }
            }
        }
    }
    Ok(from_columns(0, grid.k(), w, h, params.stride, columns))
}

fn from_columns<T: Scalar>(
    view: u32,
    k: usize,
    grid_w: usize,
    grid_h: usize,
    stride: usize,
    columns: Vec<Vec<(u32, T)>>,
) -> AppearanceMap<T> {
    let mut start = Vec::with_capacity(columns.len() + 1);
    start.push(0u32);
    let total = columns.iter().map(Vec::len).sum();
    let mut words = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total);
    for col in columns {
        for (w, v) in col {
            words.push(w);
            values.push(v);
        }
        start.push(words.len() as u32);
    }
    AppearanceMap {
        view,
        k,
        grid_w,
        grid_h,
        stride,
        start,
        words,
        values,
    }
}

/// Multi-instance appearance map: the entry-wise mean of the per-image maps.
pub fn encode_entity<T: Scalar>(stack: &[WordGrid], params: &KernelParams<T>) -> Result<AppearanceMap<T>> {
    let first = stack
        .first()
        .ok_or_else(|| GmpError::arg("entity has no images"))?;
    let shape = (first.width(), first.height(), first.k());
    if let Some(g) = stack.iter().find(|g| (g.width(), g.height(), g.k()) != shape) {
        return Err(GmpError::arg(format!(
            "image of shape {}x{} (k = {}) does not match {}x{} (k = {})",
            g.width(),
            g.height(),
            g.k(),
            shape.0,
            shape.1,
            shape.2
        )));
    }
    if stack.len() == 1 {
        return encode_image(first, params);
    }
    let maps = stack
        .iter()
        .map(|g| encode_image(g, params))
        .collect::<Result<Vec<_>>>()?;
    let n_loc = maps[0].locations();
    let k = shape.2;
    let inv = stack.len() as f64;
    let mut acc = vec![0f64; k];
    let mut touched: Vec<u32> = Vec::new();
    let mut columns = Vec::with_capacity(n_loc);
    for h in 0..n_loc {
        for m in &maps {
            let (w, v) = m.column(h);
            for (&w, &v) in w.iter().zip(v) {
                if acc[w as usize] == 0.0 {
                    touched.push(w);
                }
                acc[w as usize] += v.widen();
            }
        }
        touched.sort_unstable();
        let col = touched
            .iter()
            .map(|&w| {
                let v = acc[w as usize] / inv;
                acc[w as usize] = 0.0;
                (w, T::narrow(v))
            })
            .collect();
        touched.clear();
        columns.push(col);
    }
    Ok(from_columns(0, k, shape.0, shape.1, params.stride, columns))
}

pub const ENTITY_MAGIC: &[u8; 4] = b"GMPE";
pub const ENTITY_VERSION: u32 = 1;

/// Serialize to the encoded-entity container. Values are stored as `f32`.
pub fn encode_entity_bytes<T: Scalar>(map: &AppearanceMap<T>) -> Vec<u8> {
    let triplets = map.triplets();
    let mut w = ByteWriter::with_capacity(36 + 12 * triplets.len());
    w.bytes(ENTITY_MAGIC);
    w.u32(ENTITY_VERSION);
    w.u32(map.view);
    w.u32(map.k as u32);
    w.u32(map.grid_w as u32);
    w.u32(map.grid_h as u32);
    w.u32(map.stride as u32);
    w.u64(triplets.len() as u64);
    for (word, loc, v) in triplets {
        w.u32(word);
        w.u32(loc);
        w.f32(v.to_f32().unwrap());
    }
    w.into_inner()
}

pub fn decode_entity_bytes<T: Scalar>(bytes: &[u8]) -> Result<AppearanceMap<T>> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(ENTITY_MAGIC)?;
    r.expect_version(ENTITY_VERSION)?;
    let view = r.u32()?;
    let header_at = r.offset();
    let k = r.u32()? as usize;
    let grid_w = r.u32()? as usize;
    let grid_h = r.u32()? as usize;
    let stride = r.u32()? as usize;
    if k == 0 || grid_w == 0 || grid_h == 0 || stride == 0 {
        return Err(GmpError::format(header_at, "k, grid and stride must be positive"));
    }
    let n_loc = sampled_len(grid_w, stride) * sampled_len(grid_h, stride);
    let count_at = r.offset();
    let count = r.u64()?;
    if count > (k as u64).saturating_mul(n_loc as u64) {
        return Err(GmpError::format(count_at, format!("entry count {count} exceeds k * |h|")));
    }
    let count = count as usize;
    r.require(count * 12, "entry payload")?;
    let mut triplets = Vec::with_capacity(count);
    let mut prev: Option<(u32, u32)> = None;
    for _ in 0..count {
        let at = r.offset();
        let word = r.u32()?;
        let loc = r.u32()?;
        let v = r.f32()?;
        if word as usize >= k || loc as usize >= n_loc {
            return Err(GmpError::format(at, format!("entry ({word}, {loc}) out of range")));
        }
        if prev.is_some_and(|p| p >= (word, loc)) {
            return Err(GmpError::format(at, "entry keys not strictly increasing"));
        }
        if !(v > 0.0 && v <= 1.0) {
            return Err(GmpError::format(at, format!("entry value {v} outside (0, 1]")));
        }
        prev = Some((word, loc));
        triplets.push((word, loc, T::narrow(v as f64)));
    }
    r.expect_end()?;
    AppearanceMap::from_triplets(view, k, grid_w, grid_h, stride, triplets)
}

pub fn write_entity<T: Scalar>(path: &Path, map: &AppearanceMap<T>) -> Result<()> {
    std::fs::write(path, encode_entity_bytes(map)).map_err(|e| GmpError::io(path, e))
}

pub fn read_entity<T: Scalar>(path: &Path) -> Result<AppearanceMap<T>> {
    let bytes = std::fs::read(path).map_err(|e| GmpError::io(path, e))?;
    decode_entity_bytes(&bytes)
}
