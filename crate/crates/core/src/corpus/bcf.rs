//! JSON corpus file format (`bcf_version` 1).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryImage, Corpus};
use crate::artifact;
use crate::{Error, Result};

pub const BCF_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Ignore unknown fields instead of rejecting them.
    pub lenient: bool,
}

#[derive(Serialize, Deserialize)]
struct Document {
    bcf_version: u64,
    binaries: Vec<BinaryImage>,
}

#[derive(Serialize)]
struct DocumentRef<'a> {
    bcf_version: u64,
    binaries: &'a [BinaryImage],
}

#[derive(Deserialize)]
struct VersionProbe {
    bcf_version: Option<u64>,
}

pub fn load_corpus(path: &Path, opts: LoadOptions) -> Result<Corpus> {
    parse_corpus(&artifact::read(path)?, opts)
}

/// Parse and fully validate a corpus document.
pub fn parse_corpus(bytes: &[u8], opts: LoadOptions) -> Result<Corpus> {
    let probe: VersionProbe = serde_json::from_slice(bytes).map_err(|e| json_error(e, ""))?;
    match probe.bcf_version {
        Some(BCF_VERSION) => {}
        Some(found) => {
            return Err(Error::Version {
                format: "corpus",
                found,
                expected: BCF_VERSION,
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                field: "bcf_version".into(),
                msg: "missing field `bcf_version`".into(),
            })
        }
    }

    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let doc: Document = {
        let mut record = |path: serde_ignored::Path<'_>| unknown.push(path.to_string());
        let ignored = serde_ignored::Deserializer::new(&mut de, &mut record);
        serde_path_to_error::deserialize(ignored).map_err(|e| {
            let field = e.path().to_string();
            json_error(e.into_inner(), &field)
        })?
    };
    de.end().map_err(|e| json_error(e, ""))?;
    if !opts.lenient {
        if let Some(first) = unknown.into_iter().next() {
            return Err(Error::UnknownField(first));
        }
    }

    let mut corpus = Corpus {
        binaries: doc.binaries,
    };
    corpus.normalize();
    corpus.validate()?;
    Ok(corpus)
}

fn json_error(e: serde_json::Error, field: &str) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        field: if field.is_empty() {
            ".".into()
        } else {
            field.into()
        },
        msg: e.to_string(),
    }
}

/// Canonical serialization: compact JSON, fields in declaration order, trailing newline.
pub fn to_bcf_bytes(corpus: &Corpus) -> Vec<u8> {
    let doc = DocumentRef {
        bcf_version: BCF_VERSION,
        binaries: &corpus.binaries,
    };
    let mut out = serde_json::to_vec(&doc).expect("corpus serialization is infallible");
    out.push(b'\n');
    out
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    artifact::write_atomic(path, &to_bcf_bytes(corpus))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"bcf_version":1,"binaries":[{"binary_id":"b0","arch":"X64","opt_level":"O2","split":"train",
        "functions":[{"function_id":"f_0000","name":null,"start_address":4096,"size":32,"callees":[],
        "string_refs":[],"global_refs":[],"tokens":[1,2,3],"source_key":"k0"}],"strings":[],"globals":[]}]}"#;

    #[test]
    fn minimal_document_loads() {
        let c = parse_corpus(MINIMAL.as_bytes(), LoadOptions::default()).unwrap();
        assert_eq!(c.binaries.len(), 1);
        assert_eq!(c.binaries[0].functions[0].binary_id, "b0");
    }

    #[test]
    fn dangling_callee_is_reference_error() {
        let doc = MINIMAL.replace(r#""callees":[]"#, r#""callees":["f_9999"]"#);
        let err = parse_corpus(doc.as_bytes(), LoadOptions::default()).unwrap_err();
        match err {
            Error::DanglingRef { id, kind, .. } => {
                assert_eq!(id, "f_9999");
                assert_eq!(kind, "function");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let doc = MINIMAL.replace(r#""bcf_version":1"#, r#""bcf_version":2"#);
        let err = parse_corpus(doc.as_bytes(), LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 2, .. }));
    }

    #[test]
    fn unknown_field_strict_vs_lenient() {
        let doc = MINIMAL.replace(r#""size":32"#, r#""size":32,"colour":"red""#);
        let err = parse_corpus(doc.as_bytes(), LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        parse_corpus(doc.as_bytes(), LoadOptions { lenient: true }).unwrap();
    }

    #[test]
    fn parse_error_carries_line_and_field() {
        let doc = MINIMAL.replace(r#""size":32"#, r#""size":"big""#);
        match parse_corpus(doc.as_bytes(), LoadOptions::default()).unwrap_err() {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert!(field.contains("size"), "{field}");
            }
            other => panic!("unexpected {other}"),
        }
    }
}
