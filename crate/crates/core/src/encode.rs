//! A corpus prepared for scoring under one model: strings filtered,
//! relations indexed, node embeddings computed and whitened, data features
//! extracted and context graphs cached.

use rayon::prelude::*;

use crate::checkpoint::{Model, ModelConfig, ResidualInput};
use crate::corpus::{filter_strings, index_relations, Corpus, FunctionRef, RelationIndex};
use crate::eesg::{build_eesg_at, Eesg, EesgOptions, NodeRef};
use crate::embed::{embed_string_toy, fnv1a, FunctionProvider};
use crate::sem::{sem_embed, NodeEmbeddings};
use crate::simcombine::DataFeatures;
use crate::whitening::WhiteningTransform;
use crate::Result;

/// Raw provider output for every function and string of a corpus.
#[derive(Clone, Debug)]
pub struct RawEmbeddings {
    /// One row per function, in [`Corpus::function_refs`] order.
    pub functions: Vec<Vec<f64>>,
    /// Per binary, one row per string.
    pub strings: Vec<Vec<Vec<f64>>>,
}

/// Embed every function and string of an already filtered corpus.
pub fn raw_embeddings(corpus: &Corpus, cfg: &ModelConfig) -> Result<RawEmbeddings> {
    let provider = FunctionProvider::from_config(&cfg.function_provider)?;
    let refs: Vec<FunctionRef> = corpus.function_refs().collect();
    let functions = refs
        .par_iter()
        .map(|&r| provider.embed(corpus.function(r)))
        .collect::<Result<Vec<_>>>()?;
    let strings = corpus
        .binaries
        .par_iter()
        .map(|b| {
            b.strings
                .iter()
                .map(|s| embed_string_toy(s, &cfg.string_provider))
                .collect()
        })
        .collect();
    Ok(RawEmbeddings { functions, strings })
}

fn whiten_all(t: &WhiteningTransform, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.par_iter().map(|r| t.apply(r)).collect()
}

/// Sorted, deduplicated feature keys of one function.
pub fn data_features(corpus: &Corpus, r: FunctionRef) -> DataFeatures {
    let bin = corpus.binary_of(r);
    let f = corpus.function(r);
    let mut strings: Vec<u64> = f
        .string_refs
        .iter()
        .filter_map(|id| bin.string(id))
        .map(|s| fnv1a(s.content.as_bytes()))
        .collect();
    strings.sort_unstable();
    strings.dedup();
    let mut globals: Vec<u64> = f.global_refs.iter().map(|g| fnv1a(g.as_bytes())).collect();
    globals.sort_unstable();
    globals.dedup();
    DataFeatures { strings, globals }
}

#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    /// The corpus after string filtering.
    pub corpus: Corpus,
    pub indexes: Vec<RelationIndex>,
    pub refs: Vec<FunctionRef>,
    offsets: Vec<usize>,
    pub raw: RawEmbeddings,
    pub h0_functions: Vec<Vec<f64>>,
    pub h0_strings: Vec<Vec<Vec<f64>>>,
    pub features: Vec<DataFeatures>,
    pub graphs: Vec<Eesg>,
}

impl EncodedCorpus {
    pub fn new(corpus: &Corpus, model: &Model) -> Result<Self> {
        let corpus = filter_strings(corpus);
        let raw = raw_embeddings(&corpus, &model.config)?;
        Self::with_raw(corpus, raw, model)
    }

    /// `corpus` must already be filtered and `raw` computed from it.
    pub fn with_raw(corpus: Corpus, raw: RawEmbeddings, model: &Model) -> Result<Self> {
        let indexes: Vec<RelationIndex> = corpus.binaries.par_iter().map(index_relations).collect();
        let refs: Vec<FunctionRef> = corpus.function_refs().collect();
        let mut offsets = Vec::with_capacity(corpus.binaries.len());
        let mut acc = 0;
        for b in &corpus.binaries {
            offsets.push(acc);
            acc += b.functions.len();
        }
        let h0_functions = whiten_all(&model.func_whitening, &raw.functions)?;
        let h0_strings = raw
            .strings
            .iter()
            .map(|rows| whiten_all(&model.string_whitening, rows))
            .collect::<Result<Vec<_>>>()?;
        let features = refs.iter().map(|&r| data_features(&corpus, r)).collect();
        let graphs = build_graphs(&indexes, &refs, &model.config.eesg);
        Ok(EncodedCorpus {
            corpus,
            indexes,
            refs,
            offsets,
            raw,
            h0_functions,
            h0_strings,
            features,
            graphs,
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn global_index(&self, r: FunctionRef) -> usize {
        self.offsets[r.binary as usize] + r.function as usize
    }

    pub fn function_id(&self, g: usize) -> &str {
        &self.corpus.function(self.refs[g]).function_id
    }

    pub fn source_key(&self, g: usize) -> Option<&str> {
        self.corpus.function(self.refs[g]).source_key.as_deref()
    }

    pub fn find(&self, function_id: &str) -> Option<usize> {
        self.corpus
            .find_function(function_id)
            .map(|r| self.global_index(r))
    }

    /// Rebuild the cached graphs with different options.
    pub fn regraph(&mut self, opts: &EesgOptions) {
        self.graphs = build_graphs(&self.indexes, &self.refs, opts);
    }

    pub fn view(&self, binary: u32) -> BinaryView<'_> {
        BinaryView { enc: self, binary }
    }

    pub fn residual_input(&self, model: &Model, g: usize) -> &[f64] {
        match model.config.residual {
            ResidualInput::Whitened => &self.h0_functions[g],
            ResidualInput::Raw => &self.raw.functions[g],
        }
    }

    /// Enhanced embedding of function `g`.
    pub fn enhance(&self, model: &Model, g: usize) -> Result<Vec<f64>> {
        let view = self.view(self.refs[g].binary);
        sem_embed(
            &model.params,
            &self.graphs[g],
            &view,
            self.residual_input(model, g),
        )
    }

    pub fn enhance_all(&self, model: &Model) -> Result<Vec<Vec<f64>>> {
        (0..self.len())
            .into_par_iter()
            .map(|g| self.enhance(model, g))
            .collect()
    }
}

fn build_graphs(indexes: &[RelationIndex], refs: &[FunctionRef], opts: &EesgOptions) -> Vec<Eesg> {
    refs.par_iter()
        .map(|r| build_eesg_at(&indexes[r.binary as usize], r.function, opts))
        .collect()
}

/// Whitened node embeddings of one binary.
pub struct BinaryView<'a> {
    enc: &'a EncodedCorpus,
    binary: u32,
}

impl NodeEmbeddings for BinaryView<'_> {
    fn embedding(&self, node: NodeRef) -> Option<&[f64]> {
        let b = self.binary as usize;
        match node {
            NodeRef::Function(i) => {
                let bin = self.enc.corpus.binaries.get(b)?;
                if i as usize >= bin.functions.len() {
                    return None;
                }
                Some(&self.enc.h0_functions[self.enc.offsets[b] + i as usize])
            }
            NodeRef::String(j) => self
                .enc
                .h0_strings
                .get(b)?
                .get(j as usize)
                .map(Vec::as_slice),
        }
    }
}
