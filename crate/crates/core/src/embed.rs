//! Initial node embeddings.
//!
//! Two deterministic feature-hashing embedders stand in for learned
//! internal-code and sentence encoders; externally computed embeddings are
//! read from BEEM files.
//!
//! BEEM layout (little endian): `"BEEM"`, version `u32 = 1`, row count
//! `u64`, dim `u32`, then per row: id length `u16`, id UTF-8 bytes, `dim`
//! × `f32`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::corpus::{FunctionRecord, StringRecord};
use crate::{Error, Result};

pub const BEEM_MAGIC: &[u8; 4] = b"BEEM";
pub const BEEM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    ToyFunction,
    ToyString,
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
    #[serde(default)]
    pub hash_seed: u64,
    #[serde(default)]
    pub external_path: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn toy_function(dim: usize, hash_seed: u64) -> Self {
        ProviderConfig {
            kind: ProviderKind::ToyFunction,
            dim,
            hash_seed,
            external_path: None,
        }
    }

    pub fn toy_string(dim: usize, hash_seed: u64) -> Self {
        ProviderConfig {
            kind: ProviderKind::ToyString,
            dim,
            hash_seed,
            external_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("provider dim {} < 2", self.dim)));
        }
        if self.kind == ProviderKind::External && self.external_path.is_none() {
            return Err(Error::Config(
                "external provider requires external_path".into(),
            ));
        }
        Ok(())
    }
}

/// Row vectors keyed by node id, all of length `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    rows: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            rows: BTreeMap::new(),
        }
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

    pub fn insert(&mut self, id: impl Into<String>, row: Vec<f64>) -> Result<()> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(Error::Dimension {
                context: format!("embedding row `{id}`"),
                expected: self.dim,
                found: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row `{id}`")));
        }
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seeded bucket and sign for a feature key.
fn bucket(seed: u64, key: u64, dim: usize) -> (usize, f64) {
    let h = mix(seed ^ mix(key));
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    (((h & (u64::MAX >> 1)) % dim as u64) as usize, sign)
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn hash_features(keys: impl IntoIterator<Item = u64>, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for key in keys {
        let (i, s) = bucket(seed, key, dim);
        v[i] += s;
    }
    l2_normalize(&mut v);
    v
}

/// Signed feature hashing of the token multiset; zero vector for no tokens.
pub fn embed_function_toy(f: &FunctionRecord, cfg: &ProviderConfig) -> Vec<f64> {
    debug_assert_eq!(cfg.kind, ProviderKind::ToyFunction);
    hash_features(f.tokens.iter().map(|&t| t as u64), cfg.dim, cfg.hash_seed)
}

pub fn embed_string_toy(s: &StringRecord, cfg: &ProviderConfig) -> Vec<f64> {
    debug_assert_eq!(cfg.kind, ProviderKind::ToyString);
    embed_text(&s.content, cfg.dim, cfg.hash_seed)
}

/// Signed feature hashing of character 3-grams. Text shorter than three
/// characters is hashed as a single gram.
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < 3 {
        return hash_features([fnv1a(text.as_bytes())], dim, seed);
    }
    let mut buf = String::new();
    let grams = chars.windows(3).map(|w| {
        buf.clear();
        buf.extend(w);
        fnv1a(buf.as_bytes())
    });
    let keys: Vec<u64> = grams.collect();
    hash_features(keys, dim, seed)
}

/// Source of function-node embeddings.
#[derive(Clone, Debug)]
pub enum FunctionProvider {
    Toy(ProviderConfig),
    External(EmbeddingMatrix),
}

impl FunctionProvider {
    /// Build from config; external providers read their file here.
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            ProviderKind::ToyFunction => Ok(FunctionProvider::Toy(cfg.clone())),
            ProviderKind::External => {
                let path = cfg.external_path.as_deref().expect("validated");
                Ok(FunctionProvider::External(load_external_embeddings(
                    path, cfg.dim,
                )?))
            }
            ProviderKind::ToyString => Err(Error::Config(
                "toy_string provider cannot embed functions".into(),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FunctionProvider::Toy(c) => c.dim,
            FunctionProvider::External(m) => m.dim(),
        }
    }

    pub fn embed(&self, f: &FunctionRecord) -> Result<Vec<f64>> {
        match self {
            FunctionProvider::Toy(c) => Ok(embed_function_toy(f, c)),
            FunctionProvider::External(m) => m
                .get(&f.function_id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::MissingEmbedding(f.function_id.clone())),
        }
    }
}

pub fn to_beem_bytes(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + m.len() * (m.dim * 4 + 16));
    out.extend_from_slice(BEEM_MAGIC);
    out.extend_from_slice(&BEEM_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    let dim = u32::try_from(m.dim).map_err(|_| Error::Config("dim exceeds u32".into()))?;
    out.extend_from_slice(&dim.to_le_bytes());
    for (id, row) in m.iter() {
        let len = u16::try_from(id.len()).map_err(|_| Error::Malformed {
            format: "BEEM",
            msg: format!("node id `{id}` longer than 65535 bytes"),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    artifact::write_atomic(path, &to_beem_bytes(m)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Malformed {
            format: "BEEM",
            msg: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn parse_beem(bytes: &[u8], expected_dim: usize) -> Result<EmbeddingMatrix> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Magic {
        format: "BEEM",
        found: bytes.to_vec(),
    })?;
    if magic != BEEM_MAGIC {
        return Err(Error::Magic {
            format: "BEEM",
            found: magic.to_vec(),
        });
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != BEEM_VERSION {
        return Err(Error::Version {
            format: "BEEM",
            found: version as u64,
            expected: BEEM_VERSION as u64,
        });
    }
    let rows = u64::from_le_bytes(r.array()?);
    let dim = u32::from_le_bytes(r.array()?) as usize;
    if dim != expected_dim {
        return Err(Error::Dimension {
            context: "BEEM header".into(),
            expected: expected_dim,
            found: dim,
        });
    }
    let mut m = EmbeddingMatrix::new(dim);
    for _ in 0..rows {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let id = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Malformed {
            format: "BEEM",
            msg: format!("node id is not UTF-8: {e}"),
        })?;
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(f32::from_le_bytes(r.array()?) as f64);
        }
        if m.get(id).is_some() {
            return Err(Error::Malformed {
                format: "BEEM",
                msg: format!("duplicate node id `{id}`"),
            });
        }
        m.insert(id, row)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed {
            format: "BEEM",
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(m)
}

pub fn load_external_embeddings(path: &Path, expected_dim: usize) -> Result<EmbeddingMatrix> {
    parse_beem(&artifact::read(path)?, expected_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn func(tokens: Vec<u32>) -> FunctionRecord {
        FunctionRecord {
            function_id: "f".into(),
            binary_id: String::new(),
            name: None,
            start_address: 0,
            size: 0,
            callees: vec![],
            string_refs: vec![],
            global_refs: vec![],
            tokens,
            source_key: None,
        }
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn empty_tokens_give_zero_vector() {
        let v = embed_function_toy(&func(vec![]), &ProviderConfig::toy_function(64, 1));
        assert_eq!(v, vec![0.0; 64]);
    }

    #[test]
    fn identical_multisets_identical_vectors() {
        let cfg = ProviderConfig::toy_function(64, 9);
        // order within the multiset is irrelevant
        let a = embed_function_toy(&func(vec![3, 1, 4, 1, 5]), &cfg);
        let b = embed_function_toy(&func(vec![1, 1, 3, 4, 5]), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn one_token_difference_detected_across_seeds() {
        let dim = 64;
        let base = vec![10, 20, 30, 40, 50];
        let mut changed = base.clone();
        changed[2] = 31;
        let differing = (0..1000u64)
            .filter(|&seed| {
                let cfg = ProviderConfig::toy_function(dim, seed);
                embed_function_toy(&func(base.clone()), &cfg)
                    != embed_function_toy(&func(changed.clone()), &cfg)
            })
            .count();
        assert!(
            differing as f64 / 1000.0 >= 1.0 - 1.0 / dim as f64,
            "{differing}"
        );
    }

    #[test]
    fn string_embedding_is_deterministic_and_similar_for_near_duplicates() {
        let a = embed_text("error: %s", 768, 7);
        assert_eq!(a, embed_text("error: %s", 768, 7));
        let b = embed_text("error: %d", 768, 7);
        let c = cos(&a, &b);
        // 6 of 7 trigrams shared; frozen regression value
        assert!(c > 0.5, "{c}");
        assert!((c - 0.857_142_857_142_857_1).abs() < 1e-12, "{c}");
    }

    #[test]
    fn short_text_hashes_as_single_gram() {
        let v = embed_text("ab", 16, 0);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn beem_three_rows() {
        let mut m = EmbeddingMatrix::new(64);
        for id in ["a", "b", "c"] {
            m.insert(id, vec![0.5; 64]).unwrap();
        }
        let back = parse_beem(&to_beem_bytes(&m).unwrap(), 64).unwrap();
        assert_eq!(back.len(), 3);
    }

    #[test]
    fn beem_dim_mismatch() {
        let mut m = EmbeddingMatrix::new(768);
        m.insert("a", vec![0.0; 768]).unwrap();
        let err = parse_beem(&to_beem_bytes(&m).unwrap(), 128).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 128,
                found: 768,
                ..
            }
        ));
    }

    #[test]
    fn beem_rejects_bad_magic_version_and_nan() {
        let mut m = EmbeddingMatrix::new(2);
        m.insert("a", vec![1.0, 2.0]).unwrap();
        let good = to_beem_bytes(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(parse_beem(&bad, 2), Err(Error::Magic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            parse_beem(&bad, 2),
            Err(Error::Version { found: 2, .. })
        ));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse_beem(&bad, 2), Err(Error::NonFinite(_))));

        assert!(matches!(
            parse_beem(&good[..good.len() - 1], 2),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn beem_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut m = EmbeddingMatrix::new(33);
        for i in 0..50 {
            let row = (0..33)
                .map(|_| rng.random_range(-10.0f32..10.0) as f64)
                .collect();
            m.insert(format!("node_{i}"), row).unwrap();
        }
        let back = parse_beem(&to_beem_bytes(&m).unwrap(), 33).unwrap();
        for ((ia, ra), (ib, rb)) in m.iter().zip(back.iter()) {
            assert_eq!(ia, ib);
            assert!(ra.iter().zip(rb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    proptest! {
        #[test]
        fn toy_embeddings_unit_norm_unless_zero(tokens in proptest::collection::vec(0u32..500, 0..40), seed in any::<u64>()) {
            let v = embed_function_toy(&func(tokens), &ProviderConfig::toy_function(32, seed));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }
}
