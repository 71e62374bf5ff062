//! Pool-based retrieval evaluation.
//!
//! For every query the candidate pool holds its homologues from other
//! compile settings (at most half the pool) and uniformly drawn
//! non-homologous distractors. Each query's homologues and distractors are
//! shuffled once, and every pool size takes a prefix of both lists, so
//! smaller pools are subsets of larger ones.

pub mod timing;

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::Model;
use crate::corpus::{Corpus, Split};
use crate::eesg::{EdgeMask, NUM_EDGE_TYPES};
use crate::encode::EncodedCorpus;
use crate::simcombine::{combine_similarity, DataFeatures, Ffn, SimMode};
use crate::train::{train, TrainConfig};
use crate::{Error, Result};

pub use timing::{timing_benchmark, TimingRow, TimingTable};

pub const DEFAULT_POOLS: [usize; 3] = [2, 128, 1024];
pub const LARGE_POOLS: [usize; 2] = [4096, 10000];

/// AP of one ranking given per-rank relevance flags.
pub fn average_precision_flags(relevant_at_rank: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant_at_rank.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Insufficient(
            "average precision needs a relevant item".into(),
        ));
    }
    Ok(sum / hits as f64)
}

/// AP of `ranked` against `relevant`; every relevant item is expected to
/// appear in the ranking.
pub fn average_precision<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Insufficient("empty relevant set".into()));
    }
    let flags: Vec<bool> = ranked.iter().map(|x| relevant.contains(x)).collect();
    let found = flags.iter().filter(|&&f| f).count();
    if found != relevant.len() {
        return Err(Error::Insufficient(format!(
            "{} of {} relevant items are missing from the ranking",
            relevant.len() - found,
            relevant.len()
        )));
    }
    average_precision_flags(&flags)
}

pub fn mean_average_precision(aps: &[f64]) -> f64 {
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// `(MAP_NI − MAP_NO) / MAP_NI`, 0 when `map_ni` is 0.
pub fn decline_ratio(map_ni: f64, map_no: f64) -> f64 {
    if map_ni == 0.0 {
        0.0
    } else {
        (map_ni - map_no) / map_ni
    }
}

/// Similarity of query `q` to candidate `c`, both as global indices.
pub trait PairScorer: Sync {
    fn score(&self, q: usize, c: usize) -> f64;
}

/// Plain cosine over unit-normalised copies of the inputs.
pub struct CosineScorer {
    queries: Vec<Vec<f64>>,
    candidates: Vec<Vec<f64>>,
}

fn unit(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|x| x / n).collect()
            } else {
                r.clone()
            }
        })
        .collect()
}

impl CosineScorer {
    pub fn new(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Self {
        CosineScorer {
            queries: unit(queries),
            candidates: unit(candidates),
        }
    }
}

impl PairScorer for CosineScorer {
    fn score(&self, q: usize, c: usize) -> f64 {
        self.queries[q]
            .iter()
            .zip(&self.candidates[c])
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Model scoring: combiner over enhanced embeddings and data features, or
/// bare cosine when the model was trained without the combiner.
pub struct ModelScorer<'a> {
    pub ffn: Ffn<'a>,
    pub mode: SimMode,
    pub q_emb: &'a [Vec<f64>],
    pub q_feat: &'a [DataFeatures],
    pub c_emb: &'a [Vec<f64>],
    pub c_feat: &'a [DataFeatures],
}

impl PairScorer for ModelScorer<'_> {
    fn score(&self, q: usize, c: usize) -> f64 {
        combine_similarity(
            &self.ffn,
            self.mode,
            &self.q_emb[q],
            &self.c_emb[c],
            &self.q_feat[q],
            &self.c_feat[c],
        )
        .expect("embeddings share one dimension")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryTask {
    pub query: usize,
    pub pool: Vec<usize>,
    pub relevant: Vec<usize>,
}

/// Per-query shuffled candidate lists from which nested pools are cut.
#[derive(Clone, Debug)]
pub struct QueryPlan {
    pub query: usize,
    homologues: Vec<usize>,
    distractors: Vec<usize>,
}

impl QueryPlan {
    pub fn task(&self, pool_size: usize) -> Result<QueryTask> {
        if pool_size < 2 {
            return Err(Error::Config("pool size must be at least 2".into()));
        }
        let h = self.homologues.len().min(pool_size / 2);
        let d = pool_size - h;
        if d > self.distractors.len() {
            return Err(Error::Insufficient(format!(
                "pool of {pool_size} needs {d} distractors, only {} available",
                self.distractors.len()
            )));
        }
        let relevant = self.homologues[..h].to_vec();
        let mut pool = relevant.clone();
        pool.extend_from_slice(&self.distractors[..d]);
        Ok(QueryTask {
            query: self.query,
            pool,
            relevant,
        })
    }
}

/// Function identities of the candidate universe.
pub struct Universe<'a> {
    pub ids: Vec<&'a str>,
    pub keys: Vec<Option<&'a str>>,
}

impl<'a> Universe<'a> {
    pub fn of(enc: &'a EncodedCorpus) -> Self {
        Universe {
            ids: (0..enc.len()).map(|g| enc.function_id(g)).collect(),
            keys: (0..enc.len()).map(|g| enc.source_key(g)).collect(),
        }
    }

    /// Functions with at least one homologue.
    pub fn eligible_queries(&self) -> Vec<usize> {
        let mut count: BTreeMap<&str, usize> = BTreeMap::new();
        for k in self.keys.iter().flatten() {
            *count.entry(k).or_default() += 1;
        }
        (0..self.keys.len())
            .filter(|&i| self.keys[i].is_some_and(|k| count[k] >= 2))
            .collect()
    }

    /// Shuffled homologue and distractor lists for each query, sized for
    /// `max_pool`.
    pub fn plan(&self, queries: &[usize], max_pool: usize, seed: u64) -> Vec<QueryPlan> {
        queries
            .par_iter()
            .map(|&q| {
                let key = self.keys[q];
                let mut homologues = Vec::new();
                let mut distractors = Vec::new();
                for c in 0..self.keys.len() {
                    if c == q {
                        continue;
                    }
                    if key.is_some() && self.keys[c] == key {
                        homologues.push(c);
                    } else {
                        distractors.push(c);
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (q as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                homologues.shuffle(&mut rng);
                let want = max_pool.saturating_sub(homologues.len().min(max_pool / 2));
                let take = want.min(distractors.len());
                let distractors = distractors.partial_shuffle(&mut rng, take).0.to_vec();
                QueryPlan {
                    query: q,
                    homologues,
                    distractors,
                }
            })
            .collect()
    }

    /// Rank the pool (score descending, ties by ascending function id) and
    /// return its AP.
    pub fn rank_ap(&self, task: &QueryTask, scorer: &dyn PairScorer) -> Result<f64> {
        let mut scored: Vec<(f64, usize)> = task
            .pool
            .iter()
            .map(|&c| (scorer.score(task.query, c), c))
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.ids[a.1].cmp(self.ids[b.1]))
        });
        let rel: HashSet<usize> = task.relevant.iter().copied().collect();
        let flags: Vec<bool> = scored.iter().map(|(_, c)| rel.contains(c)).collect();
        average_precision_flags(&flags)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub pool_sizes: Vec<usize>,
    /// Cap on the number of queries; `None` uses every eligible function.
    pub n_queries: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool_sizes: DEFAULT_POOLS.to_vec(),
            n_queries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Nearest-rank quantiles.
    pub fn of(values: &[f64]) -> Quantiles {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |p: f64| {
            if v.is_empty() {
                return 0.0;
            }
            let i = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            v[i]
        };
        Quantiles {
            min: v.first().copied().unwrap_or(0.0),
            q25: at(0.25),
            median: at(0.5),
            q75: at(0.75),
            max: v.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryAp {
    pub query: String,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub map_by_pool: BTreeMap<usize, f64>,
    pub ap_quantiles: BTreeMap<usize, Quantiles>,
    /// Wall-clock seconds spent scoring and ranking per pool size.
    pub timing: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub per_query: BTreeMap<usize, Vec<QueryAp>>,
}

impl EvalReport {
    /// The report without its timing section, for reproducibility checks.
    pub fn payload(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("plain report");
        v.as_object_mut().expect("object").remove("timing");
        v
    }
}

/// Choose the query set: all eligible, or a seeded sample of `n`.
pub fn select_queries(eligible: &[usize], n: Option<usize>, seed: u64) -> Vec<usize> {
    match n {
        Some(n) if n < eligible.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7175_6572_7900);
            let mut picked: Vec<usize> = eligible.choose_multiple(&mut rng, n).copied().collect();
            picked.sort_unstable();
            picked
        }
        _ => eligible.to_vec(),
    }
}

/// Evaluate `scorer` over pools cut from `plans`.
pub fn evaluate_pools(
    universe: &Universe<'_>,
    plans: &[QueryPlan],
    scorer: &dyn PairScorer,
    cfg: &EvalConfig,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if plans.is_empty() {
        return Err(Error::Insufficient(
            "no query has a homologue in the corpus".into(),
        ));
    }
    let mut report = EvalReport {
        config: config_echo,
        map_by_pool: BTreeMap::new(),
        ap_quantiles: BTreeMap::new(),
        timing: BTreeMap::new(),
        per_query: BTreeMap::new(),
    };
    for &p in &cfg.pool_sizes {
        let tasks = plans
            .iter()
            .map(|pl| pl.task(p))
            .collect::<Result<Vec<_>>>()?;
        let start = Instant::now();
        let aps = tasks
            .par_iter()
            .map(|t| universe.rank_ap(t, scorer))
            .collect::<Result<Vec<f64>>>()?;
        report.timing.insert(p, start.elapsed().as_secs_f64());
        report.map_by_pool.insert(p, mean_average_precision(&aps));
        report.ap_quantiles.insert(p, Quantiles::of(&aps));
        report.per_query.insert(
            p,
            tasks
                .iter()
                .zip(&aps)
                .map(|(t, &ap)| QueryAp {
                    query: universe.ids[t.query].to_string(),
                    ap,
                })
                .collect(),
        );
    }
    Ok(report)
}

/// Which similarity the pool evaluation ranks by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// The trained model's similarity.
    #[default]
    Enhanced,
    /// Cosine of the raw provider embeddings.
    Raw,
}

fn eval_split(corpus: &Corpus) -> Result<Corpus> {
    let test = corpus.with_split(Split::Test);
    if test.binaries.is_empty() {
        return Err(Error::Insufficient(
            "corpus has no test-split binaries".into(),
        ));
    }
    Ok(test)
}

/// Pool evaluation on the test split of `corpus`.
pub fn run_pool_eval(
    model: &Model,
    corpus: &Corpus,
    cfg: &EvalConfig,
    kind: ScorerKind,
) -> Result<EvalReport> {
    let enc = EncodedCorpus::new(&eval_split(corpus)?, model)?;
    eval_encoded(model, &enc, cfg, kind)
}

pub fn eval_encoded(
    model: &Model,
    enc: &EncodedCorpus,
    cfg: &EvalConfig,
    kind: ScorerKind,
) -> Result<EvalReport> {
    let universe = Universe::of(enc);
    let queries = select_queries(&universe.eligible_queries(), cfg.n_queries, cfg.seed);
    let max_pool = cfg.pool_sizes.iter().copied().max().unwrap_or(2);
    let plans = universe.plan(&queries, max_pool, cfg.seed);
    let echo = serde_json::json!({
        "pool_sizes": cfg.pool_sizes,
        "n_queries": queries.len(),
        "seed": cfg.seed,
        "scorer": kind,
        "model": model.config,
    });
    match kind {
        ScorerKind::Raw => {
            let s = CosineScorer::new(&enc.raw.functions, &enc.raw.functions);
            evaluate_pools(&universe, &plans, &s, cfg, echo)
        }
        ScorerKind::Enhanced => {
            let emb = enc.enhance_all(model)?;
            let s = ModelScorer {
                ffn: model.params.ffn(),
                mode: model.config.sim_mode,
                q_emb: &emb,
                q_feat: &enc.features,
                c_emb: &emb,
                c_feat: &enc.features,
            };
            evaluate_pools(&universe, &plans, &s, cfg, echo)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DeclineRow {
    pub map_ni: f64,
    pub map_no: f64,
    pub decline_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InliningReport {
    pub pool_size: usize,
    pub n_queries: usize,
    pub baseline: DeclineRow,
    pub enhanced: DeclineRow,
}

/// Normal-vs-normal and normal-vs-noinline retrieval on the test splits of
/// two corpora generated from the same sources. Queries are normal-build
/// functions whose code or calls differ from their no-inline counterpart;
/// when no function differs, every eligible function is a query.
pub fn inlining_decline(
    model: &Model,
    norm: &Corpus,
    noinline: &Corpus,
    pool_size: usize,
    n_queries: Option<usize>,
    seed: u64,
) -> Result<InliningReport> {
    let ni = EncodedCorpus::new(&eval_split(norm)?, model)?;
    let no = EncodedCorpus::new(&eval_split(noinline)?, model)?;
    let same = ni.len() == no.len()
        && (0..ni.len()).all(|g| {
            ni.function_id(g) == no.function_id(g) && ni.source_key(g) == no.source_key(g)
        });
    if !same {
        return Err(Error::InvalidCorpus(
            "normal and no-inline corpora do not share function ids and source keys".into(),
        ));
    }
    let universe = Universe::of(&ni);
    let eligible = universe.eligible_queries();
    let affected: Vec<usize> = eligible
        .iter()
        .copied()
        .filter(|&g| {
            let a = ni.corpus.function(ni.refs[g]);
            let b = no.corpus.function(no.refs[g]);
            a.tokens != b.tokens || a.callees != b.callees
        })
        .collect();
    let pick = if affected.is_empty() {
        eligible
    } else {
        affected
    };
    let queries = select_queries(&pick, n_queries, seed);
    let plans = universe.plan(&queries, pool_size, seed);
    let cfg = EvalConfig {
        pool_sizes: vec![pool_size],
        n_queries,
        seed,
    };
    let map = |s: &dyn PairScorer| -> Result<f64> {
        Ok(
            evaluate_pools(&universe, &plans, s, &cfg, serde_json::Value::Null)?.map_by_pool
                [&pool_size],
        )
    };
    let row = |ni_map: f64, no_map: f64| DeclineRow {
        map_ni: ni_map,
        map_no: no_map,
        decline_ratio: decline_ratio(ni_map, no_map),
    };

    let baseline = row(
        map(&CosineScorer::new(&ni.raw.functions, &ni.raw.functions))?,
        map(&CosineScorer::new(&ni.raw.functions, &no.raw.functions))?,
    );
    let e_ni = ni.enhance_all(model)?;
    let e_no = no.enhance_all(model)?;
    let scorer = |c_emb, c_feat| ModelScorer {
        ffn: model.params.ffn(),
        mode: model.config.sim_mode,
        q_emb: &e_ni,
        q_feat: &ni.features,
        c_emb,
        c_feat,
    };
    let enhanced = row(
        map(&scorer(&e_ni, &ni.features))?,
        map(&scorer(&e_no, &no.features))?,
    );
    Ok(InliningReport {
        pool_size,
        n_queries: queries.len(),
        baseline,
        enhanced,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub edge_mask: u8,
    pub sim_mode: SimMode,
    pub map_by_pool: BTreeMap<usize, f64>,
    /// This row's MAP minus the full model's.
    pub delta_by_pool: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const EDGE_ABLATION_NAMES: [&str; NUM_EDGE_TYPES] = [
    "-call",
    "-be_called",
    "-address_pre",
    "-address_post",
    "-data_co_use",
    "-string_use",
];

/// The full model, one row per removed edge type, and one without the
/// similarity combiner; every row is retrained from scratch.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = vec![("full".to_string(), base.clone())];
    for (e, name) in EDGE_ABLATION_NAMES.iter().enumerate() {
        let mut c = base.clone();
        c.model.eesg.mask = base.model.eesg.mask.without(e as u8);
        out.push((name.to_string(), c));
    }
    let mut c = base.clone();
    c.model.sim_mode = SimMode::CosineOnly;
    out.push(("-sim_combination".to_string(), c));
    out
}

/// Train each variant on `train_corpus` and evaluate on the test split of
/// `eval_corpus`.
pub fn ablate(
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    base: &TrainConfig,
    eval: &EvalConfig,
) -> Result<AblationTable> {
    let test = eval_split(eval_corpus)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        let model = train(train_corpus, &cfg)?.model;
        let enc = EncodedCorpus::new(&test, &model)?;
        let rep = eval_encoded(&model, &enc, eval, ScorerKind::Enhanced)?;
        let delta = match rows.first() {
            Some(full) => rep
                .map_by_pool
                .iter()
                .map(|(p, m)| (*p, m - full.map_by_pool[p]))
                .collect(),
            None => rep.map_by_pool.keys().map(|&p| (p, 0.0)).collect(),
        };
        rows.push(AblationRow {
            name,
            edge_mask: cfg.model.eesg.mask.bits(),
            sim_mode: cfg.model.sim_mode,
            map_by_pool: rep.map_by_pool,
            delta_by_pool: delta,
        });
    }
    Ok(AblationTable { rows })
}

/// Evaluate a trained model with some edge types masked out at graph
/// construction time, without retraining.
pub fn eval_with_mask(
    model: &Model,
    corpus: &Corpus,
    mask: EdgeMask,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut enc = EncodedCorpus::new(&eval_split(corpus)?, model)?;
    let mut opts = model.config.eesg;
    opts.mask = mask;
    enc.regraph(&opts);
    eval_encoded(model, &enc, cfg, ScorerKind::Enhanced)
}
