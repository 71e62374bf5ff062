//! Final similarity: a small feed-forward combiner over the cosine of the
//! enhanced embeddings and Jaccard overlaps of the functions' data features.

use serde::{Deserialize, Serialize};

use crate::sem::tape::leaky_relu;
use crate::sem::{SemParams, Tape, Tensor, Var};
use crate::{Error, Result};

/// `u·v / (‖u‖‖v‖)`, 0 when either vector is zero.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            context: "cosine operands".into(),
            expected: u.len(),
            found: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Jaccard index of two sorted, duplicate-free slices; 0 when both are empty.
pub fn jaccard<T: Ord>(a: &[T], b: &[T]) -> f64 {
    debug_assert!(a.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(b.windows(2).all(|w| w[0] < w[1]));
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub sim_cos: f64,
    pub jaccard_strings: f64,
    pub jaccard_globals: f64,
    #[serde(rename = "final")]
    pub final_score: f64,
}

impl SimilarityBreakdown {
    pub fn inputs(&self) -> [f64; 3] {
        [self.sim_cos, self.jaccard_strings, self.jaccard_globals]
    }
}

/// Borrowed combiner weights.
#[derive(Clone, Copy, Debug)]
pub struct Ffn<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
    pub slope: f64,
}

impl Ffn<'_> {
    /// `tanh(W2·LeakyReLU(W1·x + b1) + b2)`, same arithmetic order as the
    /// taped version.
    pub fn combine(&self, x: [f64; 3]) -> f64 {
        let mut h = self.w1.matvec(&x);
        for (v, b) in h.iter_mut().zip(&self.b1.data) {
            *v = leaky_relu(*v + b, self.slope);
        }
        let o = self.w2.matvec(&h)[0] + self.b2.data[0];
        o.tanh()
    }
}

/// Whether scoring goes through the combiner or uses the bare cosine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Combined,
    CosineOnly,
}

/// Data features of one function as sorted content hashes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataFeatures {
    pub strings: Vec<u64>,
    pub globals: Vec<u64>,
}

pub fn breakdown(
    ffn: &Ffn<'_>,
    u: &[f64],
    v: &[f64],
    fu: &DataFeatures,
    fv: &DataFeatures,
) -> Result<SimilarityBreakdown> {
    let sim_cos = cosine(u, v)?;
    let jaccard_strings = jaccard(&fu.strings, &fv.strings);
    let jaccard_globals = jaccard(&fu.globals, &fv.globals);
    let final_score = ffn.combine([sim_cos, jaccard_strings, jaccard_globals]);
    Ok(SimilarityBreakdown {
        sim_cos,
        jaccard_strings,
        jaccard_globals,
        final_score,
    })
}

/// Score under `mode`.
pub fn combine_similarity(
    ffn: &Ffn<'_>,
    mode: SimMode,
    u: &[f64],
    v: &[f64],
    fu: &DataFeatures,
    fv: &DataFeatures,
) -> Result<f64> {
    match mode {
        SimMode::Combined => Ok(breakdown(ffn, u, v, fu, fv)?.final_score),
        SimMode::CosineOnly => cosine(u, v),
    }
}

/// Taped combiner: `a` and `b` are enhanced embeddings on `tape`.
pub fn combine_on_tape(
    tape: &mut Tape<'_>,
    p: &SemParams,
    a: Var,
    b: Var,
    jaccard_strings: f64,
    jaccard_globals: f64,
) -> Var {
    let cos = tape.cosine(a, b);
    let data = tape.input(vec![jaccard_strings, jaccard_globals]);
    let x = tape.concat(&[cos, data]);
    let h = tape.matvec(p.ffn_w1(), x);
    let b1 = tape.param(p.ffn_b1());
    let h = tape.add(h, b1);
    let h = tape.leaky_relu(h, p.config().leaky_slope);
    let o = tape.matvec(p.ffn_w2(), h);
    let b2 = tape.param(p.ffn_b2());
    let o = tape.add(o, b2);
    tape.tanh(o)
}
