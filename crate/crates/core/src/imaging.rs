//! Image loading, HSV conversion, dense patch features and the binary
//! feature-field container used to ingest externally computed descriptors.

use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{GmpError, Result};

/// A decoded image with channel values in `[0, 1]`, stored row-major with
/// the channel index innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(GmpError::arg(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(GmpError::arg(format!("unsupported channel count {channels}")));
        }
        if values.len() != width * height * channels {
            return Err(GmpError::arg(format!(
                "expected {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GmpError::arg(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    /// Same-size resampling is an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GmpError::arg("target dimensions must be non-zero"));
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let taps = |dst: usize, scale: f64, len: usize| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        };
        let mut out = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let (y0, y1, ty) = taps(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, tx) = taps(x, sx, self.width);
                for c in 0..self.channels {
                    let top = lerp(self.get(x0, y0, c), self.get(x1, y0, c), tx);
                    let bottom = lerp(self.get(x0, y1, c), self.get(x1, y1, c), tx);
                    out.push(lerp(top, bottom, ty).clamp(0.0, 1.0));
                }
            }
        }
        ImageGrid::new(width, height, self.channels, out)
    }
}

// a + t(b - a) returns `a` exactly when a == b or t == 0
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Decode an 8-bit grayscale or RGB image and resample it to
/// `(width, height)`.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<ImageGrid> {
    let (tw, th) = target;
    if tw == 0 || th == 0 {
        return Err(GmpError::arg("target dimensions must be non-zero"));
    }
    let img = image::open(path).map_err(|e| GmpError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (channels, raw): (usize, Vec<u8>) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = raw.into_iter().map(|b| b as f32 / 255.0).collect();
    let grid = ImageGrid::new(w, h, channels, values).map_err(|e| GmpError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    grid.resize(tw, th)
}

/// Hexcone RGB to HSV. Hue is scaled to `[0, 1)` and is 0 for achromatic
/// pixels.
pub fn rgb_to_hsv(grid: &ImageGrid) -> Result<ImageGrid> {
    if grid.channels != 3 {
        return Err(GmpError::arg(format!(
            "HSV conversion needs 3 channels, got {}",
            grid.channels
        )));
    }
    let mut out = Vec::with_capacity(grid.values.len());
    for px in grid.values.chunks_exact(3) {
        let (h, s, v) = hsv_pixel(px[0], px[1], px[2]);
        out.extend_from_slice(&[h, s, v]);
    }
    ImageGrid::new(grid.width, grid.height, 3, out)
}

fn hsv_pixel(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta <= 0.0 {
        return (0.0, 0.0, v);
    }
    let s = delta / max;
    let sector = if max == r {
        let h = (g - b) / delta;
        if h < 0.0 {
            h + 6.0
        } else {
            h
        }
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = sector / 6.0;
    (if h >= 1.0 { 0.0 } else { h }, s, v)
}

/// Dense local descriptors on the grid of patch anchors.
///
/// `vectors` is row-major over anchors with the feature dimension innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    width: usize,
    height: usize,
    dim: usize,
    vectors: Vec<f32>,
}

impl FeatureField {
    pub fn new(width: usize, height: usize, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(GmpError::arg("feature dimension must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(GmpError::arg("feature field must be non-empty"));
        }
        if vectors.len() != width * height * dim {
            return Err(GmpError::arg(format!(
                "expected {} feature values, got {}",
                width * height * dim,
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(GmpError::arg("feature values must be finite"));
        }
        Ok(Self {
            width,
            height,
            dim,
            vectors,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw(&self) -> &[f32] {
        &self.vectors
    }

    /// Descriptor at anchor `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        self.vector(y * self.width + x)
    }

    /// Descriptor at row-major location index `i`.
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }
}

/// Concatenate channel values over every `patch = (pw, ph)` window,
/// anchored at each top-left position with stride 1.
///
/// Layout within a vector is channel-major: index `c * pw * ph + dy * pw + dx`.
pub fn hsv_patch_features(grid: &ImageGrid, patch: (usize, usize)) -> Result<FeatureField> {
    let (pw, ph) = patch;
    if pw == 0 || ph == 0 || pw > grid.width || ph > grid.height {
        return Err(GmpError::arg(format!(
            "patch {pw}x{ph} does not fit a {}x{} image",
            grid.width, grid.height
        )));
    }
    let aw = grid.width - pw + 1;
    let ah = grid.height - ph + 1;
    let dim = grid.channels * pw * ph;
    let mut vectors = Vec::with_capacity(aw * ah * dim);
    for ay in 0..ah {
        for ax in 0..aw {
            for c in 0..grid.channels {
                for dy in 0..ph {
                    for dx in 0..pw {
                        vectors.push(grid.get(ax + dx, ay + dy, c));
                    }
                }
            }
        }
    }
    FeatureField::new(aw, ah, dim, vectors)
}

pub const FEATURE_FIELD_MAGIC: &[u8; 4] = b"GMPF";
pub const FEATURE_FIELD_VERSION: u32 = 1;

pub fn encode_feature_field(field: &FeatureField) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(20 + 4 * field.vectors.len());
    w.bytes(FEATURE_FIELD_MAGIC);
    w.u32(FEATURE_FIELD_VERSION);
    w.u32(field.width as u32);
    w.u32(field.height as u32);
    w.u32(field.dim as u32);
    for &v in &field.vectors {
        w.f32(v);
    }
    w.into_inner()
}

pub fn decode_feature_field(bytes: &[u8]) -> Result<FeatureField> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(FEATURE_FIELD_MAGIC)?;
    r.expect_version(FEATURE_FIELD_VERSION)?;
    let extent_offset = r.offset();
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let dim_offset = r.offset();
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(GmpError::format(dim_offset, "feature dimension is zero"));
    }
    if width == 0 || height == 0 {
        return Err(GmpError::format(extent_offset, "feature field has a zero extent"));
    }
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| GmpError::format(extent_offset, "declared payload size overflows"))?;
    r.require(count.saturating_mul(4), "feature payload")?;
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(GmpError::format(at, "non-finite feature value"));
        }
        vectors.push(v);
    }
    r.expect_end()?;
    FeatureField::new(width, height, dim, vectors)
}

pub fn write_feature_field(path: &Path, field: &FeatureField) -> Result<()> {
    std::fs::write(path, encode_feature_field(field)).map_err(|e| GmpError::io(path, e))
}

pub fn ingest_feature_field(path: &Path) -> Result<FeatureField> {
    let bytes = std::fs::read(path).map_err(|e| GmpError::io(path, e))?;
    decode_feature_field(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..w * h * c).map(|_| rng.gen::<f32>()).collect();
        ImageGrid::new(w, h, c, values).unwrap()
    }

    #[test]
    fn resize_black_identity() {
        let g = ImageGrid::new(2, 2, 1, vec![0.0; 4]).unwrap();
        assert!(g.resize(2, 2).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_preserves_constant() {
        let gray = 128.0 / 255.0;
        let g = ImageGrid::new(4, 4, 3, vec![gray; 48]).unwrap();
        let r = g.resize(2, 2).unwrap();
        assert_eq!(r.values().len(), 12);
        assert!(r.values().iter().all(|&v| v == gray));
    }

    #[test]
    fn resize_same_size_is_exact() {
        let g = random_grid(8, 8, 3, 7);
        assert_eq!(g.resize(8, 8).unwrap(), g);
    }

    #[test]
    fn resize_rejects_zero() {
        let g = random_grid(4, 4, 1, 1);
        assert!(matches!(g.resize(0, 4), Err(GmpError::InvalidArgument(_))));
    }

    #[test]
    fn load_image_roundtrip_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 7]));
        img.save(&path).unwrap();
        let g = load_image(&path, (8, 8)).unwrap();
        assert_eq!(g.channels(), 3);
        assert_eq!(g.get(3, 2, 0), 90.0 / 255.0);
        assert_eq!(g.get(3, 2, 1), 60.0 / 255.0);

        let gray = image::GrayImage::from_pixel(4, 4, image::Luma([128]));
        let gp = dir.path().join("g.png");
        gray.save(&gp).unwrap();
        let g = load_image(&gp, (2, 2)).unwrap();
        assert_eq!(g.channels(), 1);
        assert!(g.values().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn load_image_corrupt_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not an image").unwrap();
        match load_image(&path, (4, 4)) {
            Err(GmpError::Decode { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_image(&path, (0, 4)).is_err());
    }

    #[test]
    fn hsv_reference_colours() {
        let g = ImageGrid::new(
            2,
            2,
            3,
            vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let hsv = rgb_to_hsv(&g).unwrap();
        let v = hsv.values();
        assert_eq!(&v[0..3], &[0.0, 1.0, 1.0]);
        assert_eq!(&v[3..6], &[0.0, 0.0, 0.5]);
        assert!((v[6] - 2.0 / 3.0).abs() < 1e-7 && v[7] == 1.0 && v[8] == 1.0);
        assert!((v[9] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn hsv_needs_three_channels() {
        let g = random_grid(3, 3, 1, 2);
        assert!(rgb_to_hsv(&g).is_err());
    }

    #[test]
    fn patch_features_constant_image() {
        let g = ImageGrid::new(3, 3, 3, [0.1, 0.2, 0.3].repeat(9)).unwrap();
        let f = hsv_patch_features(&g, (2, 2)).unwrap();
        assert_eq!((f.width(), f.height(), f.dim()), (2, 2, 12));
        for v in f.iter() {
            assert_eq!(v, &[0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3, 0.3]);
        }
    }

    #[test]
    fn patch_features_direct_indexing() {
        let g = random_grid(4, 4, 3, 11);
        let f = hsv_patch_features(&g, (2, 2)).unwrap();
        assert_eq!(f.len(), 9);
        let mut expected = Vec::new();
        for c in 0..3 {
            for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                expected.push(g.values()[(y * 4 + x) * 3 + c]);
            }
        }
        assert_eq!(f.at(0, 0), expected.as_slice());
        assert!(hsv_patch_features(&g, (5, 2)).is_err());
    }

    #[test]
    fn feature_field_rejects_zero_dim_and_truncation() {
        let f = FeatureField::new(2, 3, 4, (0..24).map(|i| i as f32).collect()).unwrap();
        let mut bytes = encode_feature_field(&f);
        assert_eq!(decode_feature_field(&bytes).unwrap(), f);

        let mut zero_dim = bytes.clone();
        zero_dim[16..20].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_feature_field(&zero_dim),
            Err(GmpError::Format { offset: 16, .. })
        ));

        bytes.truncate(bytes.len() - 6);
        assert!(matches!(decode_feature_field(&bytes), Err(GmpError::Format { .. })));

        let mut bad_magic = encode_feature_field(&f);
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_feature_field(&bad_magic),
            Err(GmpError::Format { offset: 0, .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn patch_count_and_range(w in 2usize..9, h in 2usize..9, pw in 1usize..4, ph in 1usize..4, seed in 0u64..1000) {
            proptest::prop_assume!(pw <= w && ph <= h);
            let g = rgb_to_hsv(&random_grid(w, h, 3, seed)).unwrap();
            let f = hsv_patch_features(&g, (pw, ph)).unwrap();
            proptest::prop_assert_eq!(f.len(), (h - ph + 1) * (w - pw + 1));
            proptest::prop_assert!(f.raw().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn feature_field_roundtrip(w in 1usize..6, h in 1usize..6, d in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = (0..w * h * d).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
            let f = FeatureField::new(w, h, d, v).unwrap();
            let bytes = encode_feature_field(&f);
            let back = decode_feature_field(&bytes).unwrap();
            proptest::prop_assert_eq!(encode_feature_field(&back), bytes);
            proptest::prop_assert_eq!(back, f);
        }
    }
}
