//! Corpus data model: binaries, their functions and data features.

mod bcf;
mod filter;
mod relations;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use bcf::{load_corpus, parse_corpus, save_corpus, to_bcf_bytes, LoadOptions, BCF_VERSION};
pub use filter::{filter_strings, MIN_STRING_LEN};
pub use relations::{index_relations, RelationIndex};
pub use synth::{generate_synthetic, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    ARM,
    MIPS,
    X86,
    X64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3];
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StringRecord {
    pub string_id: String,
    pub content: String,
    /// Number of functions referencing this string; recomputed, never read from disk.
    #[serde(skip)]
    pub ref_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalDataRecord {
    pub global_id: String,
    pub address: u64,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub function_id: String,
    /// Owning binary; implied by nesting in the file format.
    #[serde(skip)]
    pub binary_id: String,
    pub name: Option<String>,
    pub start_address: u64,
    pub size: u64,
    pub callees: Vec<String>,
    pub string_refs: Vec<String>,
    pub global_refs: Vec<String>,
    pub tokens: Vec<u32>,
    pub source_key: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryImage {
    pub binary_id: String,
    pub arch: Arch,
    pub opt_level: OptLevel,
    pub split: Split,
    pub functions: Vec<FunctionRecord>,
    pub strings: Vec<StringRecord>,
    pub globals: Vec<GlobalDataRecord>,
}

impl BinaryImage {
    pub fn setting(&self) -> (Arch, OptLevel) {
        (self.arch, self.opt_level)
    }

    pub fn string(&self, id: &str) -> Option<&StringRecord> {
        self.strings.iter().find(|s| s.string_id == id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub binaries: Vec<BinaryImage>,
}

/// Location of a function inside a [`Corpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FunctionRef {
    pub binary: u32,
    pub function: u32,
}

impl Corpus {
    pub fn function(&self, r: FunctionRef) -> &FunctionRecord {
        &self.binaries[r.binary as usize].functions[r.function as usize]
    }

    pub fn binary_of(&self, r: FunctionRef) -> &BinaryImage {
        &self.binaries[r.binary as usize]
    }

    pub fn function_refs(&self) -> impl Iterator<Item = FunctionRef> + '_ {
        self.binaries.iter().enumerate().flat_map(|(b, bin)| {
            (0..bin.functions.len()).map(move |f| FunctionRef {
                binary: b as u32,
                function: f as u32,
            })
        })
    }

    pub fn find_function(&self, id: &str) -> Option<FunctionRef> {
        self.function_refs()
            .find(|&r| self.function(r).function_id == id)
    }

    pub fn num_functions(&self) -> usize {
        self.binaries.iter().map(|b| b.functions.len()).sum()
    }

    /// Keep only binaries tagged with `split`.
    pub fn with_split(&self, split: Split) -> Corpus {
        Corpus {
            binaries: self
                .binaries
                .iter()
                .filter(|b| b.split == split)
                .cloned()
                .collect(),
        }
    }

    /// Group functions by `source_key`; functions without a key are omitted.
    pub fn homology_groups(&self) -> BTreeMap<String, Vec<FunctionRef>> {
        let mut groups: BTreeMap<String, Vec<FunctionRef>> = BTreeMap::new();
        for r in self.function_refs() {
            if let Some(key) = &self.function(r).source_key {
                groups.entry(key.clone()).or_default().push(r);
            }
        }
        groups
    }

    /// Fill derived fields (`binary_id` on functions, string `ref_count`).
    pub(crate) fn normalize(&mut self) {
        for bin in &mut self.binaries {
            for f in &mut bin.functions {
                f.binary_id.clone_from(&bin.binary_id);
            }
            recompute_ref_counts(bin);
        }
    }

    /// Check every structural invariant of the corpus.
    pub fn validate(&self) -> Result<()> {
        let mut binary_ids = HashSet::new();
        let mut function_ids = HashSet::new();
        for bin in &self.binaries {
            if !binary_ids.insert(bin.binary_id.as_str()) {
                return Err(Error::InvalidCorpus(format!(
                    "duplicate binary_id `{}`",
                    bin.binary_id
                )));
            }
            validate_binary(bin, &mut function_ids)?;
        }

        let mut key_splits: HashMap<&str, (bool, bool)> = HashMap::new();
        for bin in &self.binaries {
            for f in &bin.functions {
                if let Some(key) = &f.source_key {
                    let e = key_splits.entry(key).or_default();
                    match bin.split {
                        Split::Train => e.0 = true,
                        Split::Test => e.1 = true,
                        Split::Valid => {}
                    }
                }
            }
        }
        if let Some((key, _)) = key_splits.iter().find(|(_, &(tr, te))| tr && te) {
            return Err(Error::InvalidCorpus(format!(
                "homology group `{key}` straddles train and test splits"
            )));
        }
        Ok(())
    }
}

fn validate_binary<'a>(bin: &'a BinaryImage, function_ids: &mut HashSet<&'a str>) -> Result<()> {
    let ctx = |msg: String| Error::InvalidCorpus(format!("binary `{}`: {msg}", bin.binary_id));

    let mut string_ids = HashSet::new();
    for s in &bin.strings {
        if !string_ids.insert(s.string_id.as_str()) {
            return Err(ctx(format!("duplicate string_id `{}`", s.string_id)));
        }
    }
    let mut global_ids = HashSet::new();
    for g in &bin.globals {
        if !global_ids.insert(g.global_id.as_str()) {
            return Err(ctx(format!("duplicate global_id `{}`", g.global_id)));
        }
    }
    let local_functions: HashSet<&str> = bin
        .functions
        .iter()
        .map(|f| f.function_id.as_str())
        .collect();
    let mut starts = HashSet::new();
    for f in &bin.functions {
        if !function_ids.insert(f.function_id.as_str()) {
            return Err(ctx(format!("duplicate function_id `{}`", f.function_id)));
        }
        if f.start_address.checked_add(f.size).is_none() {
            return Err(ctx(format!(
                "function `{}`: start_address + size overflows 64 bits",
                f.function_id
            )));
        }
        if !starts.insert(f.start_address) {
            return Err(ctx(format!(
                "function `{}` shares start_address {} with another function",
                f.function_id, f.start_address
            )));
        }
        let dangling = |kind: &'static str, id: &String| Error::DanglingRef {
            binary: bin.binary_id.clone(),
            function: f.function_id.clone(),
            kind,
            id: id.clone(),
        };
        if let Some(c) = f
            .callees
            .iter()
            .find(|c| !local_functions.contains(c.as_str()))
        {
            return Err(dangling("function", c));
        }
        if let Some(s) = f
            .string_refs
            .iter()
            .find(|s| !string_ids.contains(s.as_str()))
        {
            return Err(dangling("string", s));
        }
        if let Some(g) = f
            .global_refs
            .iter()
            .find(|g| !global_ids.contains(g.as_str()))
        {
            return Err(dangling("global", g));
        }
    }
    Ok(())
}

pub(crate) fn recompute_ref_counts(bin: &mut BinaryImage) {
    let mut counts: HashMap<&str, u32> = HashMap::new();
    for f in &bin.functions {
        let distinct: HashSet<&str> = f.string_refs.iter().map(String::as_str).collect();
        for s in distinct {
            *counts.entry(s).or_default() += 1;
        }
    }
    let counts: HashMap<String, u32> = counts.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
    for s in &mut bin.strings {
        s.ref_count = counts.get(&s.string_id).copied().unwrap_or(0);
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn duplicate_start_address_rejected() {
        let bin = binary("b", vec![func("a", 0x100), func("b", 0x100)], vec![]);
        let err = Corpus {
            binaries: vec![bin],
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("start_address"), "{err}");
    }

    #[test]
    fn address_overflow_rejected() {
        let mut f = func("a", u64::MAX - 1);
        f.size = 2;
        let err = Corpus {
            binaries: vec![binary("b", vec![f], vec![])],
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("overflows"));
    }

    #[test]
    fn dangling_string_ref_names_the_id() {
        let mut f = func("a", 0);
        f.string_refs.push("s_missing".into());
        let err = Corpus {
            binaries: vec![binary("b", vec![f], vec![])],
        }
        .validate()
        .unwrap_err();
        assert!(matches!(err, Error::DanglingRef { ref id, .. } if id == "s_missing"));
    }

    #[test]
    fn homology_group_may_not_straddle_train_and_test() {
        let mut f1 = func("a", 0);
        f1.source_key = Some("k".into());
        let mut f2 = func("b", 0);
        f2.source_key = Some("k".into());
        let b1 = binary("b1", vec![f1], vec![]);
        let mut b2 = binary("b2", vec![f2], vec![]);
        b2.split = Split::Test;
        let err = Corpus {
            binaries: vec![b1, b2],
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("straddles"));
    }

    #[test]
    fn ref_counts_count_distinct_functions() {
        let mut a = func("a", 0);
        a.string_refs = vec!["s".into(), "s".into()];
        let mut b = func("b", 0x10);
        b.string_refs = vec!["s".into()];
        let mut c = Corpus {
            binaries: vec![binary("x", vec![a, b], vec![string("s", "hello")])],
        };
        c.normalize();
        assert_eq!(c.binaries[0].strings[0].ref_count, 2);
        assert_eq!(c.binaries[0].functions[0].binary_id, "x");
    }
}
