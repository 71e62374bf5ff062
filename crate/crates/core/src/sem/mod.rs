//! Semantic enhancement model: a relational graph convolution over the
//! target's context graph plus a residual path carrying the target's own
//! embedding.
//!
//! Layer update for node `i`:
//!
//! ```text
//! h_i^(l+1) = LeakyReLU( Σ_r Σ_{j ∈ N_i^r} (1 / |N_i^r|) · W_r^(l) · h_j^(l) )
//! ```
//!
//! where `N_i^r` are the sources of type-`r` edges ending at `i`. After the
//! last layer the enhanced embedding is `h_target + (W_res · x + b_res)`
//! with `x` the target's initial embedding.

pub mod gradcheck;
pub mod tape;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eesg::{Eesg, NodeRef, NUM_EDGE_TYPES};
use crate::{Error, Result};

pub use tape::{Gradients, ParamId, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemConfig {
    pub d_t: usize,
    pub n_layers: usize,
    pub n_relations: usize,
    pub leaky_slope: f64,
    pub init_scale: f64,
    pub seed: u64,
    /// Hidden width of the similarity combiner.
    pub ffn_hidden: usize,
    /// Input width of the residual block; `None` means `d_t`.
    pub residual_dim: Option<usize>,
}

impl Default for SemConfig {
    fn default() -> Self {
        SemConfig {
            d_t: 128,
            n_layers: 4,
            n_relations: NUM_EDGE_TYPES,
            leaky_slope: 0.01,
            init_scale: 1.0,
            seed: 0,
            ffn_hidden: 8,
            residual_dim: None,
        }
    }
}

/// Width of the similarity vector fed to the combiner.
pub const FFN_INPUT: usize = 3;

impl SemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.d_t < 2 || self.n_relations < 1 || self.ffn_hidden < 1 {
            return Err(Error::Config(
                "SEM needs n_layers ≥ 1, d_t ≥ 2, n_relations ≥ 1, ffn_hidden ≥ 1".into(),
            ));
        }
        if self.residual_dim == Some(0) {
            return Err(Error::Config("residual_dim must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::Config(
                "init_scale must be ≥ 0 and leaky_slope finite".into(),
            ));
        }
        Ok(())
    }

    pub fn residual_in(&self) -> usize {
        self.residual_dim.unwrap_or(self.d_t)
    }
}

/// Trainable state: relation weights per layer, residual block and combiner.
#[derive(Clone, Debug, PartialEq)]
pub struct SemParams {
    cfg: SemConfig,
    tensors: Vec<Tensor>,
}

impl SemParams {
    fn layout(cfg: &SemConfig) -> Vec<(String, usize, usize)> {
        let d = cfg.d_t;
        let mut v = Vec::new();
        for l in 0..cfg.n_layers {
            for r in 0..cfg.n_relations {
                v.push((format!("sem.w_rel.{l}.{r}"), d, d));
            }
        }
        v.push(("sem.w_res".into(), d, cfg.residual_in()));
        v.push(("sem.b_res".into(), d, 1));
        v.push(("ffn.w1".into(), cfg.ffn_hidden, FFN_INPUT));
        v.push(("ffn.b1".into(), cfg.ffn_hidden, 1));
        v.push(("ffn.w2".into(), 1, cfg.ffn_hidden));
        v.push(("ffn.b2".into(), 1, 1));
        v
    }

    /// Assemble from tensors in [`SemParams::block_names`] order.
    pub fn from_tensors(cfg: SemConfig, tensors: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let layout = Self::layout(&cfg);
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in layout.iter().zip(&tensors) {
            if t.shape() != (*r, *c) {
                return Err(Error::Shape(format!(
                    "{name}: expected {r}×{c}, got {}×{}",
                    t.rows, t.cols
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(SemParams { cfg, tensors })
    }

    pub fn config(&self) -> &SemConfig {
        &self.cfg
    }

    pub fn block_names(&self) -> Vec<String> {
        Self::layout(&self.cfg)
            .into_iter()
            .map(|(n, _, _)| n)
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, p: ParamId) -> &Tensor {
        &self.tensors[p.0]
    }

    pub fn tensor_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.tensors[p.0]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn w_rel(&self, layer: usize, rel: usize) -> ParamId {
        debug_assert!(layer < self.cfg.n_layers && rel < self.cfg.n_relations);
        ParamId(layer * self.cfg.n_relations + rel)
    }

    fn base(&self) -> usize {
        self.cfg.n_layers * self.cfg.n_relations
    }

    pub fn w_res(&self) -> ParamId {
        ParamId(self.base())
    }

    pub fn b_res(&self) -> ParamId {
        ParamId(self.base() + 1)
    }

    pub fn ffn_w1(&self) -> ParamId {
        ParamId(self.base() + 2)
    }

    pub fn ffn_b1(&self) -> ParamId {
        ParamId(self.base() + 3)
    }

    pub fn ffn_w2(&self) -> ParamId {
        ParamId(self.base() + 4)
    }

    pub fn ffn_b2(&self) -> ParamId {
        ParamId(self.base() + 5)
    }

    pub fn ffn(&self) -> crate::simcombine::Ffn<'_> {
        crate::simcombine::Ffn {
            w1: self.tensor(self.ffn_w1()),
            b1: self.tensor(self.ffn_b1()),
            w2: self.tensor(self.ffn_w2()),
            b2: self.tensor(self.ffn_b2()),
            slope: self.cfg.leaky_slope,
        }
    }
}

/// Seeded uniform initialisation in `±init_scale/√d_t`; biases start at zero.
pub fn init_params(cfg: &SemConfig) -> Result<SemParams> {
    cfg.validate()?;
    let bound = cfg.init_scale / (cfg.d_t as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors = SemParams::layout(cfg)
        .into_iter()
        .map(|(name, r, c)| {
            let mut t = Tensor::zeros(r, c);
            let is_bias = name.contains(".b");
            if !is_bias && bound > 0.0 {
                t.data
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..=bound));
            }
            t
        })
        .collect();
    SemParams::from_tensors(cfg.clone(), tensors)
}

/// Initial embeddings of graph nodes.
pub trait NodeEmbeddings {
    fn embedding(&self, node: NodeRef) -> Option<&[f64]>;
}

impl NodeEmbeddings for HashMap<NodeRef, Vec<f64>> {
    fn embedding(&self, node: NodeRef) -> Option<&[f64]> {
        self.get(&node).map(Vec::as_slice)
    }
}

/// In-neighbour lists per node and relation, positions in `eesg.nodes`.
struct Adjacency {
    in_nbrs: Vec<Vec<Vec<usize>>>,
}

impl Adjacency {
    fn new(g: &Eesg, n_rel: usize) -> Result<Self> {
        let pos = |n: NodeRef| {
            g.nodes
                .binary_search_by(|x| x.node.cmp(&n))
                .map_err(|_| Error::Shape(format!("edge endpoint {n:?} is not a graph node")))
        };
        let mut in_nbrs = vec![vec![Vec::new(); n_rel]; g.nodes.len()];
        for e in &g.edges {
            let r = e.etype as usize;
            if r >= n_rel {
                return Err(Error::Shape(format!(
                    "edge type {r} ≥ relation count {n_rel}"
                )));
            }
            in_nbrs[pos(e.dst)?][r].push(pos(e.src)?);
        }
        for lists in &mut in_nbrs {
            for l in lists.iter_mut() {
                l.sort_unstable();
                l.dedup();
            }
        }
        Ok(Adjacency { in_nbrs })
    }
}

/// Record the forward pass for `g` on `tape` and return the enhanced
/// embedding of the target. `residual_input` is the vector fed to the
/// residual block (the target's whitened embedding unless the model is
/// configured with a raw residual input).
pub fn sem_forward(
    tape: &mut Tape<'_>,
    p: &SemParams,
    g: &Eesg,
    h0: &dyn NodeEmbeddings,
    residual_input: &[f64],
) -> Result<Var> {
    let cfg = &p.cfg;
    let d = cfg.d_t;
    if residual_input.len() != cfg.residual_in() {
        return Err(Error::Dimension {
            context: "residual input".into(),
            expected: cfg.residual_in(),
            found: residual_input.len(),
        });
    }
    let adj = Adjacency::new(g, cfg.n_relations)?;
    let n = g.nodes.len();
    let target = g
        .nodes
        .binary_search_by(|x| x.node.cmp(&g.target))
        .map_err(|_| Error::Shape("target is not a graph node".into()))?;

    // needed[l]: nodes whose layer-l state feeds the target's final state
    let layers = cfg.n_layers;
    let mut needed = vec![vec![false; n]; layers + 1];
    needed[layers][target] = true;
    for l in (0..layers).rev() {
        for i in 0..n {
            if needed[l + 1][i] {
                for list in &adj.in_nbrs[i] {
                    for &j in list {
                        needed[l][j] = true;
                    }
                }
            }
        }
    }

    let mut h: Vec<Option<Var>> = vec![None; n];
    for i in 0..n {
        if needed[0][i] {
            let node = g.nodes[i].node;
            let e = h0
                .embedding(node)
                .ok_or_else(|| Error::MissingEmbedding(format!("{node:?}")))?;
            if e.len() != d {
                return Err(Error::Dimension {
                    context: format!("initial embedding of {node:?}"),
                    expected: d,
                    found: e.len(),
                });
            }
            h[i] = Some(tape.input(e.to_vec()));
        }
    }

    let mut zero: Option<Var> = None;
    for l in 0..layers {
        let mut next: Vec<Option<Var>> = vec![None; n];
        for i in 0..n {
            if !needed[l + 1][i] {
                continue;
            }
            let mut terms = Vec::new();
            for (r, list) in adj.in_nbrs[i].iter().enumerate() {
                if list.is_empty() {
                    continue;
                }
                let msgs: Vec<Var> = list.iter().map(|&j| h[j].expect("needed state")).collect();
                let mut agg = tape.sum(&msgs);
                if msgs.len() > 1 {
                    agg = tape.scale(agg, 1.0 / msgs.len() as f64);
                }
                terms.push(tape.matvec(p.w_rel(l, r), agg));
            }
            next[i] = Some(if terms.is_empty() {
                *zero.get_or_insert_with(|| tape.input(vec![0.0; d]))
            } else {
                let pre = tape.sum(&terms);
                tape.leaky_relu(pre, cfg.leaky_slope)
            });
        }
        h = next;
    }

    let external = h[target].expect("target state");
    let x = tape.input(residual_input.to_vec());
    let wx = tape.matvec(p.w_res(), x);
    let b = tape.param(p.b_res());
    let internal = tape.add(wx, b);
    Ok(tape.add(external, internal))
}

/// Forward pass without keeping the tape.
pub fn sem_embed(
    p: &SemParams,
    g: &Eesg,
    h0: &dyn NodeEmbeddings,
    residual_input: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(p.tensors());
    let out = sem_forward(&mut tape, p, g, h0, residual_input)?;
    Ok(tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eesg::{EesgEdge, EesgNode};

    fn cfg(d: usize, layers: usize) -> SemConfig {
        SemConfig {
            d_t: d,
            n_layers: layers,
            seed: 3,
            ..SemConfig::default()
        }
    }

    fn graph(n_funcs: u32, edges: &[(u32, u32, u8)]) -> Eesg {
        Eesg {
            target: NodeRef::Function(0),
            max_depth: 4,
            nodes: (0..n_funcs)
                .map(|i| EesgNode {
                    node: NodeRef::Function(i),
                    depth: (i > 0) as u32,
                })
                .collect(),
            edges: edges
                .iter()
                .map(|&(s, d, t)| EesgEdge {
                    src: NodeRef::Function(s),
                    dst: NodeRef::Function(d),
                    etype: t,
                })
                .collect(),
        }
    }

    fn embeddings(vs: &[Vec<f64>]) -> HashMap<NodeRef, Vec<f64>> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| (NodeRef::Function(i as u32), v.clone()))
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = SemConfig::default();
        let a = init_params(&c).unwrap();
        assert_eq!(a, init_params(&c).unwrap());
        assert_eq!(a.tensors().len(), 4 * 6 + 6);
        for l in 0..4 {
            for r in 0..6 {
                assert_eq!(a.tensor(a.w_rel(l, r)).shape(), (128, 128));
            }
        }
        let bound = 1.0 / 128f64.sqrt();
        assert!(a
            .tensor(a.w_rel(2, 3))
            .data
            .iter()
            .all(|v| v.abs() <= bound));
        assert!(a.tensor(a.b_res()).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_init_scale_gives_zero_weights() {
        let p = init_params(&SemConfig {
            init_scale: 0.0,
            ..cfg(8, 2)
        })
        .unwrap();
        assert!(p.tensors().iter().all(|t| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn single_node_graph_is_residual_only() {
        let p = init_params(&cfg(4, 4)).unwrap();
        let g = graph(1, &[]);
        let x = vec![0.1, -0.4, 0.3, 0.9];
        let out = sem_embed(&p, &g, &embeddings(std::slice::from_ref(&x)), &x).unwrap();
        let mut want = p.tensor(p.w_res()).matvec(&x);
        for (w, b) in want.iter_mut().zip(&p.tensor(p.b_res()).data) {
            *w += b;
        }
        assert_eq!(out, want);
    }

    #[test]
    fn two_node_hand_example() {
        // A ← B via type 0, identity weights, slope 1: E_A = h_B + h_A
        let c = SemConfig {
            leaky_slope: 1.0,
            init_scale: 0.0,
            ..cfg(3, 1)
        };
        let mut p = init_params(&c).unwrap();
        *p.tensor_mut(p.w_rel(0, 0)) = Tensor::identity(3);
        *p.tensor_mut(p.w_res()) = Tensor::identity(3);
        let g = graph(2, &[(1, 0, 0)]);
        let ha = vec![1.0, 2.0, -3.0];
        let hb = vec![0.5, -1.0, 4.0];
        let out = sem_embed(&p, &g, &embeddings(&[ha.clone(), hb.clone()]), &ha).unwrap();
        assert_eq!(out, vec![1.5, 1.0, 1.0]);
    }

    #[test]
    fn duplicated_identical_neighbours_do_not_change_output() {
        let p = init_params(&cfg(4, 1)).unwrap();
        let hn = vec![0.3, 0.1, -0.2, 0.5];
        let h0 = vec![0.0, 1.0, 0.0, 0.0];
        let one = sem_embed(
            &p,
            &graph(2, &[(1, 0, 2)]),
            &embeddings(&[h0.clone(), hn.clone()]),
            &h0,
        )
        .unwrap();
        let two = sem_embed(
            &p,
            &graph(3, &[(1, 0, 2), (2, 0, 2)]),
            &embeddings(&[h0.clone(), hn.clone(), hn.clone()]),
            &h0,
        )
        .unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_relation_weights_leave_residual() {
        let mut p = init_params(&cfg(4, 3)).unwrap();
        for l in 0..3 {
            for r in 0..6 {
                let id = p.w_rel(l, r);
                p.tensor_mut(id).data.fill(0.0);
            }
        }
        let g = graph(3, &[(1, 0, 0), (2, 1, 3), (0, 2, 4)]);
        let hs = [vec![1.0, 0.0, 0.0, 2.0], vec![0.5; 4], vec![-0.5; 4]];
        let out = sem_embed(&p, &g, &embeddings(&hs), &hs[0]).unwrap();
        let single = sem_embed(&p, &graph(1, &[]), &embeddings(&hs[..1]), &hs[0]).unwrap();
        assert_eq!(out, single);
    }

    #[test]
    fn missing_embedding_and_bad_dims() {
        let p = init_params(&cfg(4, 1)).unwrap();
        let g = graph(2, &[(1, 0, 0)]);
        let h = embeddings(&[vec![0.0; 4]]);
        assert!(matches!(
            sem_embed(&p, &g, &h, &[0.0; 4]),
            Err(Error::MissingEmbedding(_))
        ));
        let h = embeddings(&[vec![0.0; 4], vec![0.0; 3]]);
        assert!(matches!(
            sem_embed(&p, &g, &h, &[0.0; 4]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            sem_embed(&p, &graph(1, &[]), &embeddings(&[vec![0.0; 4]]), &[0.0; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn edge_order_does_not_matter() {
        let p = init_params(&cfg(5, 2)).unwrap();
        let edges = [(1, 0, 0), (2, 0, 0), (2, 1, 3), (3, 2, 4), (0, 3, 1)];
        let hs: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..5).map(|k| ((i * 5 + k) as f64).sin()).collect())
            .collect();
        let g1 = graph(4, &edges);
        let mut g2 = g1.clone();
        g2.edges.reverse();
        let a = sem_embed(&p, &g1, &embeddings(&hs), &hs[0]).unwrap();
        let b = sem_embed(&p, &g2, &embeddings(&hs), &hs[0]).unwrap();
        assert_eq!(a, b);
    }
}
