//! Model container: `GMPM` magic, format version, a JSON header, then a
//! little-endian payload holding every numeric parameter. The header carries
//! a SHA-256 digest of the payload, checked on load.
//!
//! Payload order: per view pair the `rows * cols` weight matrix (f64), the
//! shared location weights (f64), the pair coefficients (f64), kernel sigma
//! and alpha (f64), then each vocabulary's centroids (f32).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bytes::{ByteReader, ByteWriter};
use crate::encoding::KernelParams;
use crate::error::{GmpError, Result};
use crate::scalar::Scalar;
use crate::scoring::{view_pairs, BilinearModel, PairCoefficients, PairWeights, SharedWeights};
use crate::vocab::Vocabulary;

pub const MODEL_MAGIC: &[u8; 4] = b"GMPM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabHeader {
    pub view: u32,
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    /// Scalar type the model was trained with: `"f32"` or `"f64"`.
    pub dtype: String,
    pub n_views: usize,
    pub view_k: Vec<usize>,
    pub n_locations: usize,
    pub view_pairs: Vec<(usize, usize)>,
    /// Informational copy; the payload value is authoritative.
    pub sigma: f64,
    pub alpha: f64,
    pub stride: usize,
    pub vocabs: Vec<VocabHeader>,
    pub meta: serde_json::Value,
    pub payload_bytes: u64,
    /// Lowercase hex SHA-256 of the payload.
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn dtype_of<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Serialize a model. Output is deterministic for a given model.
pub fn encode_model<T: Scalar>(model: &BilinearModel<T>) -> Result<Vec<u8>> {
    model.validate()?;
    let mut p = ByteWriter::with_capacity(0);
    for w in &model.pair_weights {
        for &v in &w.matrix {
            p.f64(v.widen());
        }
    }
    for &v in &model.shared.values {
        p.f64(v.widen());
    }
    for &v in &model.coeffs.beta {
        p.f64(v.widen());
    }
    p.f64(model.kernel.sigma.widen());
    p.f64(model.kernel.alpha.widen());
    for voc in &model.vocabs {
        for &c in &voc.centroids {
            p.f32(c);
        }
    }
    let payload = p.into_inner();

    let header = ModelHeader {
        format_version: MODEL_VERSION,
        dtype: dtype_of::<T>().into(),
        n_views: model.n_views,
        view_k: model.view_k.clone(),
        n_locations: model.shared.len(),
        view_pairs: view_pairs(model.n_views),
        sigma: model.kernel.sigma.widen(),
        alpha: model.kernel.alpha.widen(),
        stride: model.kernel.stride,
        vocabs: model
            .vocabs
            .iter()
            .map(|v| VocabHeader {
                view: v.view,
                k: v.k,
                dim: v.dim,
                seed: v.seed,
            })
            .collect(),
        meta: model.meta.clone(),
        payload_bytes: payload.len() as u64,
        digest: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| GmpError::arg(format!("header serialization: {e}")))?;
    let mut out = ByteWriter::with_capacity(16 + json.len() + payload.len());
    out.bytes(MODEL_MAGIC);
    out.u32(MODEL_VERSION);
    out.u64(json.len() as u64);
    out.bytes(&json);
    out.bytes(&payload);
    Ok(out.into_inner())
}

/// Read only the header, without checking the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(ModelHeader, usize)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MODEL_MAGIC)?;
    r.expect_version(MODEL_VERSION)?;
    let len_at = r.offset();
    let len = r.u64()?;
    let len = usize::try_from(len).map_err(|_| GmpError::format(len_at, "header length overflows"))?;
    r.require(len, "model header")?;
    let at = r.offset();
    let header: ModelHeader =
        serde_json::from_slice(r.slice(len)?).map_err(|e| GmpError::format(at, format!("bad model header: {e}")))?;
    Ok((header, r.offset() as usize))
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<BilinearModel<T>> {
    let (h, start) = decode_header(bytes)?;
    if h.dtype != dtype_of::<T>() {
        return Err(GmpError::format(
            16,
            format!("model stores {} parameters, requested {}", h.dtype, dtype_of::<T>()),
        ));
    }
    let payload = &bytes[start..];
    if payload.len() as u64 != h.payload_bytes {
        return Err(GmpError::format(
            start as u64,
            format!("payload is {} bytes, header says {}", payload.len(), h.payload_bytes),
        ));
    }
    if sha256_hex(payload) != h.digest {
        return Err(GmpError::format(start as u64, "payload digest mismatch"));
    }
    if h.n_views < 2 || h.view_k.len() != h.n_views || h.view_pairs != view_pairs(h.n_views) {
        return Err(GmpError::format(16, "inconsistent view layout in header"));
    }

    let n_pairs = h.view_pairs.len();
    let mut expect: u64 = 0;
    for &(i, j) in &h.view_pairs {
        expect += 8 * (h.view_k[i] as u64) * (h.view_k[j] as u64);
    }
    expect += 8 * (h.n_locations as u64 + n_pairs as u64 + 2);
    expect += h.vocabs.iter().map(|v| 4 * (v.k as u64) * (v.dim as u64)).sum::<u64>();
    if expect != h.payload_bytes {
        return Err(GmpError::format(
            start as u64,
            format!("header implies {expect} payload bytes, found {}", h.payload_bytes),
        ));
    }

    let mut r = ByteReader::new(payload);
    let mut f64s = |n: usize| -> Result<Vec<T>> { (0..n).map(|_| r.f64().map(T::narrow)).collect() };
    let mut pair_weights = Vec::with_capacity(n_pairs);
    for &(i, j) in &h.view_pairs {
        let m = f64s(h.view_k[i] * h.view_k[j])?;
        pair_weights.push(PairWeights::new((i as u32, j as u32), h.view_k[i], h.view_k[j], m)?);
    }
    let shared = SharedWeights::new(f64s(h.n_locations)?)?;
    let coeffs = PairCoefficients::new(f64s(n_pairs)?)?;
    let sa = f64s(2)?;
    let kernel = KernelParams::new(sa[0], sa[1], h.stride)?;
    let mut vocabs = Vec::with_capacity(h.vocabs.len());
    for v in &h.vocabs {
        let c = (0..v.k * v.dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        vocabs.push(Vocabulary::new(v.view, v.dim, c, v.seed)?);
    }
    r.expect_end()?;

    let model = BilinearModel {
        n_views: h.n_views,
        view_k: h.view_k,
        pair_weights,
        shared,
        coeffs,
        vocabs,
        kernel,
        meta: h.meta,
    };
    model.validate()?;
    Ok(model)
}

/// Write the model and return the payload digest.
pub fn save_model<T: Scalar>(path: &Path, model: &BilinearModel<T>) -> Result<String> {
    let bytes = encode_model(model)?;
    std::fs::write(path, &bytes).map_err(|e| GmpError::io(path, e))?;
    let (h, _) = decode_header(&bytes)?;
    Ok(h.digest)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<BilinearModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| GmpError::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> BilinearModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BilinearModel::ones(&[3, 4, 2], 5, KernelParams::new(1.7, 4.0, 2).unwrap()).unwrap();
        for w in &mut m.pair_weights {
            w.matrix.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
        }
        m.shared.values.iter_mut().for_each(|x| *x = rng.gen::<f64>() - 0.3);
        m.coeffs.beta = vec![0.25, 0.0, 1.0 / 3.0];
        m.vocabs = vec![Vocabulary::new(0, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 9).unwrap()];
        m.meta = serde_json::json!({"lambda1": 1.0});
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = random_model(3);
        let bytes = encode_model(&m).unwrap();
        let back: BilinearModel<f64> = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn f32_round_trip() {
        let m = random_model(4);
        let m32 = BilinearModel::<f32> {
            n_views: m.n_views,
            view_k: m.view_k.clone(),
            pair_weights: m
                .pair_weights
                .iter()
                .map(|w| PairWeights::new(w.views, w.rows, w.cols, w.matrix.iter().map(|&x| x as f32).collect()).unwrap())
                .collect(),
            shared: SharedWeights::new(m.shared.values.iter().map(|&x| x as f32).collect()).unwrap(),
            coeffs: PairCoefficients::new(m.coeffs.beta.iter().map(|&x| x as f32).collect()).unwrap(),
            vocabs: m.vocabs.clone(),
            kernel: KernelParams::new(1.7f32, 4.0, 2).unwrap(),
            meta: m.meta.clone(),
        };
        let bytes = encode_model(&m32).unwrap();
        assert_eq!(decode_model::<f32>(&bytes).unwrap(), m32);
        assert!(decode_model::<f64>(&bytes).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_model(&random_model(5)).unwrap();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(decode_model::<f64>(&flipped), Err(GmpError::Format { .. })));
        assert!(decode_model::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_model::<f64>(&bad_magic), Err(GmpError::Format { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_model::<f64>(&extra).is_err());
    }

    #[test]
    fn file_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gmpm");
        let m = random_model(6);
        let d1 = save_model(&path, &m).unwrap();
        assert_eq!(d1.len(), 64);
        assert_eq!(load_model::<f64>(&path).unwrap(), m);
        assert_eq!(save_model(&path, &m).unwrap(), d1);
        assert!(matches!(load_model::<f64>(&dir.path().join("missing")), Err(GmpError::Io { .. })));
    }
}
