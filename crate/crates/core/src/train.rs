//! End-to-end fitting of the graph model and similarity combiner on
//! homologous / non-homologous function triples.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Model, ModelConfig};
use crate::corpus::{filter_strings, Corpus, FunctionRef, Split};
use crate::encode::{raw_embeddings, EncodedCorpus};
use crate::sem::{init_params, sem_forward, Gradients, SemParams, Tape, Tensor, Var};
use crate::simcombine::{combine_on_tape, jaccard, SimMode};
use crate::whitening::fit_rows;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Triples per optimisation step.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Context graph depth.
    pub md: u32,
    pub d_t: usize,
    /// Providers, graph options and model shape. `md`, `d_t` and `seed`
    /// above take precedence over the matching fields here.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            md: crate::eesg::DEFAULT_MAX_DEPTH,
            d_t: 128,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration with the top-level overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.sem.d_t = self.d_t;
        m.sem.seed = self.seed;
        m.eesg.max_depth = self.md;
        m.resolved()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TrainTriple {
    pub anchor: FunctionRef,
    pub positive: FunctionRef,
    pub negative: FunctionRef,
}

/// Per-step loss record, written as one JSON line each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
}

/// Homology bookkeeping for triple sampling.
struct Groups {
    /// Group index of every function, `None` for functions without a key.
    group_of: Vec<Option<usize>>,
    members: Vec<Vec<usize>>,
    /// Functions that have at least one homologue.
    anchors: Vec<usize>,
    all: Vec<FunctionRef>,
}

impl Groups {
    fn new(corpus: &Corpus) -> Result<Groups> {
        let all: Vec<FunctionRef> = corpus.function_refs().collect();
        let mut by_key: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, &r) in all.iter().enumerate() {
            if let Some(k) = &corpus.function(r).source_key {
                by_key.entry(k).or_default().push(i);
            }
        }
        let mut group_of = vec![None; all.len()];
        let mut members = Vec::with_capacity(by_key.len());
        for (g, (_, m)) in by_key.into_iter().enumerate() {
            for &i in &m {
                group_of[i] = Some(g);
            }
            members.push(m);
        }
        let anchors: Vec<usize> = (0..all.len())
            .filter(|&i| group_of[i].is_some_and(|g| members[g].len() >= 2))
            .collect();
        if anchors.is_empty() {
            return Err(Error::Insufficient(
                "no homology group with at least two functions".into(),
            ));
        }
        if anchors
            .iter()
            .all(|&a| members[group_of[a].unwrap()].len() == all.len())
        {
            return Err(Error::Insufficient(
                "every function is homologous; no negatives available".into(),
            ));
        }
        Ok(Groups {
            group_of,
            members,
            anchors,
            all,
        })
    }

    fn triple(&self, anchor: usize, rng: &mut ChaCha8Rng) -> TrainTriple {
        let g = self.group_of[anchor].expect("anchor has a group");
        let group = &self.members[g];
        let positive = loop {
            let p = *group.choose(rng).expect("group non-empty");
            if p != anchor {
                break p;
            }
        };
        let negative = loop {
            let n = rng.random_range(0..self.all.len());
            if self.group_of[n] != Some(g) {
                break n;
            }
        };
        TrainTriple {
            anchor: self.all[anchor],
            positive: self.all[positive],
            negative: self.all[negative],
        }
    }
}

/// Draw `m` triples: anchors uniformly among functions with a homologue,
/// positives uniformly from the anchor's group, negatives uniformly from
/// all functions outside it.
pub fn sample_triples(corpus: &Corpus, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainTriple>> {
    let groups = Groups::new(corpus)?;
    Ok((0..m)
        .map(|_| {
            let a = *groups.anchors.choose(rng).expect("anchors non-empty");
            groups.triple(a, rng)
        })
        .collect())
}

/// `½(1 − sim_p)² + ½(1 + sim_n)²`.
pub fn pair_loss(sim_p: f64, sim_n: f64) -> f64 {
    0.5 * (1.0 - sim_p).powi(2) + 0.5 * (1.0 + sim_n).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows, p.cols))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let shapes_ok = params.len() == grads.tensors.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(&grads.tensors)
            .zip(&state.m)
            .all(|((p, g), m)| p.shape() == g.shape() && p.shape() == m.shape());
    if !shapes_ok {
        return Err(Error::Shape(
            "Adam parameter, gradient and state shapes differ".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
            v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m.data[k] / c1;
            let v_hat = v.data[k] / c2;
            p.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fit whitening on the training split and draw initial parameters.
pub fn init_model(train: &Corpus, cfg: &ModelConfig) -> Result<Model> {
    let filtered = filter_strings(train);
    let raw = raw_embeddings(&filtered, cfg)?;
    let func_whitening = fit_rows(&raw.functions, cfg.sem.d_t, cfg.whitening_mode)?;
    let strings: Vec<&Vec<f64>> = raw.strings.iter().flatten().collect();
    let string_whitening = fit_rows(&strings, cfg.sem.d_t, cfg.whitening_mode)?;
    Ok(Model {
        config: cfg.clone(),
        func_whitening,
        string_whitening,
        params: init_params(&cfg.sem)?,
    })
}

/// Record the loss of `triples` on a tape over `params`. Returns the tape
/// and the loss variable (mean over the triples).
pub fn triple_loss<'p>(
    enc: &EncodedCorpus,
    model: &Model,
    params: &'p SemParams,
    triples: &[TrainTriple],
    batch_divisor: f64,
) -> Result<(Tape<'p>, Var)> {
    let mut tape = Tape::new(params.tensors());
    let mut terms = Vec::with_capacity(2 * triples.len());
    let embed = |tape: &mut Tape<'p>, r: FunctionRef| -> Result<Var> {
        let g = enc.global_index(r);
        let view = enc.view(r.binary);
        sem_forward(
            tape,
            params,
            &enc.graphs[g],
            &view,
            enc.residual_input(model, g),
        )
    };
    for t in triples {
        let a = embed(&mut tape, t.anchor)?;
        let p = embed(&mut tape, t.positive)?;
        let n = embed(&mut tape, t.negative)?;
        let sim =
            |tape: &mut Tape<'p>, x: Var, y: Var, other: FunctionRef| match model.config.sim_mode {
                SimMode::CosineOnly => tape.cosine(x, y),
                SimMode::Combined => {
                    let fa = &enc.features[enc.global_index(t.anchor)];
                    let fo = &enc.features[enc.global_index(other)];
                    combine_on_tape(
                        tape,
                        params,
                        x,
                        y,
                        jaccard(&fa.strings, &fo.strings),
                        jaccard(&fa.globals, &fo.globals),
                    )
                }
            };
        let sp = sim(&mut tape, a, p, t.positive);
        let sn = sim(&mut tape, a, n, t.negative);
        let dp = tape.affine(sp, -1.0, 1.0);
        let dn = tape.affine(sn, 1.0, 1.0);
        terms.push(tape.square(dp));
        terms.push(tape.square(dn));
    }
    let total = tape.sum(&terms);
    let loss = tape.scale(total, 0.5 / batch_divisor);
    Ok((tape, loss))
}

/// Loss and gradient of one batch. Per-triple work runs in parallel; the
/// gradients are reduced in triple order.
pub fn batch_gradient(
    enc: &EncodedCorpus,
    model: &Model,
    triples: &[TrainTriple],
) -> Result<(f64, Gradients)> {
    let m = triples.len() as f64;
    let parts = triples
        .par_iter()
        .map(|t| {
            let (tape, loss) = triple_loss(enc, model, &model.params, std::slice::from_ref(t), m)?;
            let value = tape.scalar(loss);
            Ok((value, tape.backward(loss)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::zeros_like(model.params.tensors());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grads.add_assign(g);
    }
    Ok((loss, grads))
}

/// Train on the `train` split of `corpus`.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(corpus, cfg, |_| {})
}

pub fn train_with_progress(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let train_split = corpus.with_split(Split::Train);
    if train_split.binaries.is_empty() {
        return Err(Error::Insufficient(
            "corpus has no train-split binaries".into(),
        ));
    }
    let mut model = init_model(&train_split, &model_cfg)?;
    let enc = EncodedCorpus::new(&train_split, &model)?;
    let groups = Groups::new(&enc.corpus)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut adam = AdamState::new(model.params.tensors());
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order = groups.anchors.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let triples: Vec<TrainTriple> =
                chunk.iter().map(|&a| groups.triple(a, &mut rng)).collect();
            let (loss, grads) = batch_gradient(&enc, &model, &triples)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {}",
                    log.len() + 1
                )));
            }
            adam_step(
                model.params.tensors_mut(),
                &grads,
                &mut adam,
                cfg.lr,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )?;
            let entry = StepLog {
                step: log.len() + 1,
                loss,
            };
            on_step(&entry);
            log.push(entry);
            sum += loss;
            steps += 1;
        }
        epoch_losses.push(if steps > 0 { sum / steps as f64 } else { 0.0 });
    }
    Ok(TrainOutcome {
        model,
        log,
        epoch_losses,
    })
}

/// JSON-lines rendering of a training log.
pub fn log_to_jsonl(log: &[StepLog]) -> String {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e).expect("plain struct"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_util::*;

    fn keyed(id: &str, addr: u64, key: Option<&str>) -> crate::corpus::FunctionRecord {
        let mut f = func(id, addr);
        f.source_key = key.map(str::to_string);
        f
    }

    #[test]
    fn only_possible_triples_from_one_pair() {
        let corpus = Corpus {
            binaries: vec![
                binary(
                    "b1",
                    vec![keyed("f1", 0, Some("k")), keyed("g", 64, Some("z"))],
                    vec![],
                ),
                binary("b2", vec![keyed("f2", 0, Some("k"))], vec![]),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = sample_triples(&corpus, 200, &mut rng).unwrap();
        let id = |r: FunctionRef| corpus.function(r).function_id.as_str();
        let mut seen = std::collections::BTreeSet::new();
        for t in &ts {
            let tri = (id(t.anchor), id(t.positive), id(t.negative));
            assert!(
                tri == ("f1", "f2", "g") || tri == ("f2", "f1", "g"),
                "{tri:?}"
            );
            seen.insert(tri);
        }
        assert_eq!(seen.len(), 2);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_triples(&corpus, 200, &mut rng2).unwrap(), ts);
    }

    #[test]
    fn singletons_only_is_an_error() {
        let corpus = Corpus {
            binaries: vec![binary(
                "b",
                vec![keyed("a", 0, Some("x")), keyed("b", 64, Some("y"))],
                vec![],
            )],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_triples(&corpus, 4, &mut rng),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn pair_loss_values() {
        assert_eq!(pair_loss(1.0, -1.0), 0.0);
        assert_eq!(pair_loss(0.0, 0.0), 1.0);
        assert_eq!(pair_loss(-1.0, 1.0), 4.0);
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![Tensor::zeros(1, 1)];
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.tensors[0].data[0] = 1.0;
        adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0].data[0] + 0.1).abs() < 1e-8);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_shape_checked() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![0.3, -0.7]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = Gradients::zeros_like(&p);
        adam_step(&mut p, &g, &mut st, 0.5, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, before);
        let wrong = Gradients::zeros_like(&[Tensor::zeros(2, 2)]);
        assert!(matches!(
            adam_step(&mut p, &wrong, &mut st, 0.5, 0.9, 0.999, 1e-8),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
