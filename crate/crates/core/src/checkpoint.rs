//! Trained model state and its on-disk container.
//!
//! Layout: magic `BENH`, format version (u32 LE), header length (u64 LE),
//! a JSON header holding the model configuration and a tensor directory,
//! then every tensor as raw f64 LE values at the offsets the directory
//! names (relative to the end of the header).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eesg::EesgOptions;
use crate::embed::{ProviderConfig, ProviderKind};
use crate::sem::{SemConfig, SemParams, Tensor};
use crate::simcombine::SimMode;
use crate::whitening::{WhiteningMode, WhiteningTransform};
use crate::{artifact, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BENH";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Vector fed to the residual block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualInput {
    /// The target's whitened embedding (width `d_t`).
    #[default]
    Whitened,
    /// The provider's raw embedding, projected by a learned matrix.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub function_provider: ProviderConfig,
    pub string_provider: ProviderConfig,
    pub whitening_mode: WhiteningMode,
    pub residual: ResidualInput,
    pub eesg: EesgOptions,
    pub sem: SemConfig,
    pub sim_mode: SimMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            function_provider: ProviderConfig::toy_function(256, 0),
            string_provider: ProviderConfig::toy_string(768, 1),
            whitening_mode: WhiteningMode::Literal,
            residual: ResidualInput::Whitened,
            eesg: EesgOptions::default(),
            sem: SemConfig::default(),
            sim_mode: SimMode::Combined,
        }
    }
}

impl ModelConfig {
    /// Check internal consistency and align `sem.residual_dim` with the
    /// residual input choice.
    pub fn resolved(mut self) -> Result<Self> {
        self.function_provider.validate()?;
        self.string_provider.validate()?;
        if self.function_provider.kind == ProviderKind::ToyString {
            return Err(Error::Config(
                "function_provider cannot be toy_string".into(),
            ));
        }
        if self.string_provider.kind != ProviderKind::ToyString {
            return Err(Error::Config("string_provider must be toy_string".into()));
        }
        let d_t = self.sem.d_t;
        for (what, dim) in [
            ("function_provider", self.function_provider.dim),
            ("string_provider", self.string_provider.dim),
        ] {
            if d_t > dim {
                return Err(Error::Config(format!(
                    "d_t = {d_t} exceeds {what} dim {dim}"
                )));
            }
        }
        self.sem.residual_dim = match self.residual {
            ResidualInput::Whitened => None,
            ResidualInput::Raw => Some(self.function_provider.dim),
        };
        self.sem.validate()?;
        Ok(self)
    }
}

/// Everything needed to score functions: configuration, frozen whitening
/// transforms and trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub func_whitening: WhiteningTransform,
    pub string_whitening: WhiteningTransform,
    pub params: SemParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tool_version: String,
    config: ModelConfig,
    whitening: WhiteningMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhiteningMeta {
    func: TransformMeta,
    string: TransformMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformMeta {
    d: usize,
    d_t: usize,
    eig_floor: f64,
    mode: WhiteningMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: (usize, usize),
    offset: u64,
}

fn meta(t: &WhiteningTransform) -> TransformMeta {
    TransformMeta {
        d: t.input_dim(),
        d_t: t.output_dim(),
        eig_floor: t.eig_floor(),
        mode: t.mode(),
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Malformed {
        format: "checkpoint",
        msg: msg.into(),
    }
}

impl Model {
    fn named_tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out: Vec<(String, (usize, usize), &[f64])> = self
            .params
            .block_names()
            .into_iter()
            .zip(self.params.tensors())
            .map(|(n, t)| (n, t.shape(), t.data.as_slice()))
            .collect();
        for (tag, t) in [
            ("func", &self.func_whitening),
            ("str", &self.string_whitening),
        ] {
            out.push((format!("whiten.{tag}.mu"), (t.input_dim(), 1), t.mean()));
            out.push((
                format!("whiten.{tag}.w"),
                (t.input_dim(), t.output_dim()),
                t.matrix(),
            ));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: *shape,
                offset,
            });
            offset += 8 * data.len() as u64;
        }
        let header = Header {
            tool_version: crate::TOOL_VERSION.to_string(),
            config: self.config.clone(),
            whitening: WhiteningMeta {
                func: meta(&self.func_whitening),
                string: meta(&self.string_whitening),
            },
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| malformed(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 16 {
            return Err(malformed("file shorter than the fixed preamble"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Magic {
                format: "checkpoint",
                found: bytes[..4].to_vec(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                format: "checkpoint",
                found: version.into(),
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        let hlen = usize::try_from(hlen)
            .ok()
            .filter(|&h| h <= body.len())
            .ok_or_else(|| malformed("header length exceeds file size"))?;
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| malformed(format!("header: {e}")))?;
        let payload = &body[hlen..];

        let mut expected_end = 0u64;
        let mut read = |e: &TensorEntry| -> Result<Tensor> {
            let n = e
                .shape
                .0
                .checked_mul(e.shape.1)
                .ok_or_else(|| malformed(format!("{}: shape overflow", e.name)))?;
            let start = usize::try_from(e.offset).map_err(|_| malformed("offset overflow"))?;
            let end = start
                .checked_add(8 * n)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| malformed(format!("{}: payload truncated", e.name)))?;
            expected_end = expected_end.max(end as u64);
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {}", e.name)));
            }
            Tensor::from_vec(e.shape.0, e.shape.1, data)
        };

        let config = header.config.clone().resolved()?;
        let mut by_name = std::collections::BTreeMap::new();
        for e in &header.tensors {
            if by_name.insert(e.name.clone(), read(e)?).is_some() {
                return Err(malformed(format!("duplicate tensor {}", e.name)));
            }
        }
        if expected_end != payload.len() as u64 {
            return Err(malformed("trailing bytes after the last tensor"));
        }
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| malformed(format!("missing tensor {name}")))
        };

        let layout = crate::sem::init_params(&SemConfig {
            init_scale: 0.0,
            ..config.sem.clone()
        })?
        .block_names();
        let mut tensors = Vec::with_capacity(layout.len());
        for name in &layout {
            tensors.push(take(name)?);
        }
        let params = SemParams::from_tensors(config.sem.clone(), tensors)
            .map_err(|e| malformed(e.to_string()))?;

        let mut transform = |tag: &str, m: &TransformMeta| -> Result<WhiteningTransform> {
            let mu = take(&format!("whiten.{tag}.mu"))?;
            let w = take(&format!("whiten.{tag}.w"))?;
            if mu.shape() != (m.d, 1) || w.shape() != (m.d, m.d_t) {
                return Err(malformed(format!(
                    "whitening `{tag}` shapes disagree with header"
                )));
            }
            WhiteningTransform::from_parts(mu.data, w.data, m.d_t, m.eig_floor, m.mode)
        };
        let func_whitening = transform("func", &header.whitening.func)?;
        let string_whitening = transform("str", &header.whitening.string)?;
        if let Some(extra) = by_name.keys().next() {
            return Err(malformed(format!("unexpected tensor {extra}")));
        }
        Ok(Model {
            config,
            func_whitening,
            string_whitening,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_bytes(&artifact::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sem::init_params;
    use crate::whitening::fit_rows;

    fn small_model() -> Model {
        let config = ModelConfig {
            function_provider: ProviderConfig::toy_function(6, 2),
            string_provider: ProviderConfig::toy_string(5, 3),
            sem: SemConfig {
                d_t: 4,
                n_layers: 2,
                seed: 9,
                ..SemConfig::default()
            },
            ..ModelConfig::default()
        }
        .resolved()
        .unwrap();
        let rows = |d: usize| -> Vec<Vec<f64>> {
            (0..12)
                .map(|i| (0..d).map(|k| ((i * 7 + k * 3) as f64).sin()).collect())
                .collect()
        };
        Model {
            func_whitening: fit_rows(&rows(6), 4, WhiteningMode::Literal).unwrap(),
            string_whitening: fit_rows(&rows(5), 4, WhiteningMode::Pca).unwrap(),
            params: init_params(&config.sem).unwrap(),
            config,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small_model();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"BENH");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.benh");
        let m = small_model();
        m.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = small_model().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Magic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Model::from_bytes(&bad),
            Err(Error::Version { .. })
        ));
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Malformed { .. })
        ));
        let mut bad = bytes.clone();
        bad.extend_from_slice(&[0; 8]);
        assert!(matches!(
            Model::from_bytes(&bad),
            Err(Error::Malformed { .. })
        ));
        let mut bad = bytes;
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(Model::from_bytes(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn resolved_checks_dims() {
        let mut c = ModelConfig::default();
        c.sem.d_t = 1000;
        assert!(matches!(c.resolved(), Err(Error::Config(_))));
        let c = ModelConfig {
            residual: ResidualInput::Raw,
            ..ModelConfig::default()
        }
        .resolved()
        .unwrap();
        assert_eq!(c.sem.residual_dim, Some(256));
    }
}
