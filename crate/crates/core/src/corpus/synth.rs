//! Synthetic compilation-variant corpora.
//!
//! Each project is a set of source functions with a call graph, string and
//! global-data references and a contiguous address layout. Every compile
//! setting re-emits the project as one binary: tokens are perturbed, some
//! call edges are inlined (callee tokens merged into the caller, edge
//! removed) and the layout is re-based.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{
    Arch, BinaryImage, Corpus, FunctionRecord, GlobalDataRecord, OptLevel, Split, StringRecord,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_projects: usize,
    pub funcs_per_project: usize,
    /// Expected number of static callees per function.
    pub call_density: f64,
    /// Strings per project.
    pub n_strings: usize,
    /// Global data items per project.
    pub n_globals: usize,
    pub settings: Vec<(Arch, OptLevel)>,
    pub inline_prob_by_opt: BTreeMap<OptLevel, f64>,
    /// Fraction of tokens replaced per compile setting.
    pub token_noise: f64,
    pub seed: u64,
    pub vocab_size: u32,
    pub zipf_exponent: f64,
    pub tokens_per_function: (usize, usize),
    /// Fraction of generated strings shorter than the filter threshold.
    pub short_string_frac: f64,
    /// Maximum number of functions sharing one string or global.
    pub max_data_users: usize,
    /// Project-level train:valid:test weights.
    pub split_ratio: (u32, u32, u32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        let settings = [Arch::ARM, Arch::MIPS, Arch::X64]
            .into_iter()
            .flat_map(|a| OptLevel::ALL.into_iter().map(move |o| (a, o)))
            .collect();
        SynthConfig {
            n_projects: 10,
            funcs_per_project: 10,
            call_density: 1.5,
            n_strings: 8,
            n_globals: 4,
            settings,
            inline_prob_by_opt: BTreeMap::from([
                (OptLevel::O0, 0.0),
                (OptLevel::O1, 0.1),
                (OptLevel::O2, 0.3),
                (OptLevel::O3, 0.5),
            ]),
            token_noise: 0.2,
            seed: 0,
            vocab_size: 2000,
            zipf_exponent: 1.1,
            tokens_per_function: (16, 48),
            short_string_frac: 0.15,
            max_data_users: 3,
            split_ratio: (8, 1, 1),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_projects == 0 || self.funcs_per_project == 0 {
            return bad("n_projects and funcs_per_project must be positive".into());
        }
        if self.settings.len() < 2 {
            return bad("at least 2 compile settings are required".into());
        }
        let mut seen = self.settings.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.settings.len() {
            return bad("compile settings must be distinct".into());
        }
        for (opt, p) in &self.inline_prob_by_opt {
            if !(0.0..=1.0).contains(p) {
                return bad(format!("inline probability for {opt} is outside [0,1]"));
            }
        }
        for (name, p) in [
            ("token_noise", self.token_noise),
            ("short_string_frac", self.short_string_frac),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} is outside [0,1]"));
            }
        }
        if !(self.call_density >= 0.0 && self.call_density.is_finite()) {
            return bad("call_density must be finite and non-negative".into());
        }
        if self.vocab_size < 2 || self.zipf_exponent.is_nan() || self.zipf_exponent <= 0.0 {
            return bad("vocab_size must be ≥ 2 and zipf_exponent positive".into());
        }
        let (lo, hi) = self.tokens_per_function;
        if lo == 0 || lo > hi {
            return bad("tokens_per_function must satisfy 1 ≤ min ≤ max".into());
        }
        if self.max_data_users == 0 {
            return bad("max_data_users must be positive".into());
        }
        let (a, b, c) = self.split_ratio;
        if a as u64 + b as u64 + c as u64 == 0 {
            return bad("split_ratio must have a positive weight".into());
        }
        Ok(())
    }

    fn inline_prob(&self, opt: OptLevel) -> f64 {
        self.inline_prob_by_opt.get(&opt).copied().unwrap_or(0.0)
    }
}

/// One project as written by its developers, before compilation.
#[derive(Clone, Debug)]
pub(crate) struct SourceProject {
    pub index: usize,
    pub tokens: Vec<Vec<u32>>,
    /// (caller, callee, inline draw in [0,1))
    pub calls: Vec<(usize, usize, f64)>,
    pub strings: Vec<String>,
    pub string_users: Vec<Vec<usize>>,
    pub global_users: Vec<Vec<usize>>,
}

const WORDS: &[&str] = &[
    "error",
    "failed",
    "open",
    "file",
    "socket",
    "connect",
    "invalid",
    "argument",
    "memory",
    "buffer",
    "overflow",
    "config",
    "usage",
    "version",
    "read",
    "write",
    "timeout",
    "certificate",
    "handshake",
    "password",
    "session",
    "packet",
    "header",
    "checksum",
    "cannot",
    "allocate",
    "unable",
    "parse",
    "token",
    "stream",
    "device",
    "firmware",
    "upgrade",
    "network",
    "address",
    "interface",
    "request",
    "response",
    "cipher",
    "digest",
    "length",
    "mismatch",
    "unknown",
    "option",
    "directory",
    "permission",
    "denied",
    "closed",
    "pipe",
    "signal",
    "thread",
    "mutex",
    "queue",
    "table",
    "index",
    "record",
    "format",
    "decode",
    "encode",
    "compress",
];
const FORMATS: &[&str] = &["%s", "%d", "0x%08x", "%u", "%ld"];
const SHORT: &[&str] = &[
    "time", "err", "ok", "%d", "yes", "no", "id", "rb", "wb", "%s\n",
];

/// Independent, order-insensitive RNG stream for (seed, purpose, a, b).
fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [purpose, a, b] {
        h = splitmix(h ^ v.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const P_SOURCE: u64 = 1;
const P_NOISE: u64 = 2;
const P_LAYOUT: u64 = 3;
const P_SPLIT: u64 = 4;

pub(crate) fn generate_source(cfg: &SynthConfig, index: usize) -> SourceProject {
    let mut rng = stream(cfg.seed, P_SOURCE, index as u64, 0);
    let k = cfg.funcs_per_project;
    let zipf = Zipf::new(cfg.vocab_size as f64, cfg.zipf_exponent).expect("validated zipf params");
    let (lo, hi) = cfg.tokens_per_function;

    let tokens = (0..k)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            (0..len).map(|_| zipf.sample(&mut rng) as u32 - 1).collect()
        })
        .collect();

    let mut calls = Vec::new();
    if k > 1 {
        let p = (cfg.call_density / (k - 1) as f64).min(1.0);
        for caller in 0..k {
            for callee in 0..k {
                if caller != callee && rng.random_bool(p) {
                    calls.push((caller, callee, rng.random::<f64>()));
                }
            }
        }
    }

    let users = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..=cfg.max_data_users.min(k));
        let mut all: Vec<usize> = (0..k).collect();
        all.shuffle(rng);
        let mut chosen = all[..n].to_vec();
        chosen.sort_unstable();
        chosen
    };
    let mut strings = Vec::with_capacity(cfg.n_strings);
    let mut string_users = Vec::with_capacity(cfg.n_strings);
    for _ in 0..cfg.n_strings {
        let content = if rng.random_bool(cfg.short_string_frac) {
            SHORT.choose(&mut rng).unwrap().to_string()
        } else {
            let n_words = rng.random_range(2..=4);
            let mut words: Vec<&str> = (0..n_words)
                .map(|_| *WORDS.choose(&mut rng).unwrap())
                .collect();
            if rng.random_bool(0.4) {
                words.push(FORMATS.choose(&mut rng).unwrap());
            }
            words.join(" ")
        };
        strings.push(content);
        string_users.push(users(&mut rng));
    }
    let global_users = (0..cfg.n_globals).map(|_| users(&mut rng)).collect();

    SourceProject {
        index,
        tokens,
        calls,
        strings,
        string_users,
        global_users,
    }
}

/// Compile one source project under one setting.
pub(crate) fn emit_binary(
    cfg: &SynthConfig,
    src: &SourceProject,
    setting_index: usize,
    (arch, opt): (Arch, OptLevel),
    split: Split,
    next_function_id: &mut usize,
) -> BinaryImage {
    let p = src.index;
    let k = src.tokens.len();
    let mut noise = stream(cfg.seed, P_NOISE, p as u64, setting_index as u64);
    let perturbed: Vec<Vec<u32>> = src
        .tokens
        .iter()
        .map(|toks| {
            toks.iter()
                .map(|&t| {
                    if cfg.token_noise > 0.0 && noise.random_bool(cfg.token_noise) {
                        noise.random_range(0..cfg.vocab_size)
                    } else {
                        t
                    }
                })
                .collect()
        })
        .collect();

    let threshold = cfg.inline_prob(opt);
    let mut tokens = perturbed.clone();
    let mut callees: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &(caller, callee, draw) in &src.calls {
        if draw < threshold {
            tokens[caller].extend_from_slice(&perturbed[callee]);
        } else {
            callees[caller].push(callee);
        }
    }

    let mut layout = stream(cfg.seed, P_LAYOUT, p as u64, setting_index as u64);
    let code_base: u64 = 0x0001_0000 + layout.random_range(0..4096u64) * 0x1000;
    let data_base: u64 = 0x4000_0000 + layout.random_range(0..4096u64) * 0x1000;

    let ids: Vec<String> = (0..k)
        .map(|_| {
            let id = format!("f_{:04}", *next_function_id);
            *next_function_id += 1;
            id
        })
        .collect();
    let string_ids: Vec<String> = (0..src.strings.len())
        .map(|i| format!("s_{i:04}"))
        .collect();
    let global_ids: Vec<String> = (0..src.global_users.len())
        .map(|i| format!("g_p{p:03}_{i:04}"))
        .collect();

    let mut string_refs = vec![Vec::new(); k];
    for (s, users) in src.string_users.iter().enumerate() {
        for &u in users {
            string_refs[u].push(string_ids[s].clone());
        }
    }
    let mut global_refs = vec![Vec::new(); k];
    for (g, users) in src.global_users.iter().enumerate() {
        for &u in users {
            global_refs[u].push(global_ids[g].clone());
        }
    }

    let binary_id = format!("p{p:03}-{arch}-{opt}");
    let mut addr = code_base;
    let functions = (0..k)
        .map(|i| {
            let size = (4 * tokens[i].len() as u64 + 16 + 15) & !15;
            let rec = FunctionRecord {
                function_id: ids[i].clone(),
                binary_id: binary_id.clone(),
                name: None,
                start_address: addr,
                size,
                callees: callees[i].iter().map(|&c| ids[c].clone()).collect(),
                string_refs: std::mem::take(&mut string_refs[i]),
                global_refs: std::mem::take(&mut global_refs[i]),
                tokens: std::mem::take(&mut tokens[i]),
                source_key: Some(format!("p{p:03}:fn{i:04}")),
            };
            addr += size;
            rec
        })
        .collect();

    let strings = src
        .strings
        .iter()
        .zip(&string_ids)
        .map(|(content, id)| StringRecord {
            string_id: id.clone(),
            content: content.clone(),
            ref_count: 0,
        })
        .collect();
    let globals = global_ids
        .iter()
        .enumerate()
        .map(|(i, id)| GlobalDataRecord {
            global_id: id.clone(),
            address: data_base + 8 * i as u64,
            label: None,
        })
        .collect();

    let mut bin = BinaryImage {
        binary_id,
        arch,
        opt_level: opt,
        split,
        functions,
        strings,
        globals,
    };
    super::recompute_ref_counts(&mut bin);
    bin
}

fn project_splits(cfg: &SynthConfig) -> Vec<Split> {
    let n = cfg.n_projects;
    let (a, b, c) = cfg.split_ratio;
    let total = (a + b + c) as f64;
    let n_train = (n as f64 * a as f64 / total).round() as usize;
    let n_valid = ((n as f64 * (a + b) as f64 / total).round() as usize).saturating_sub(n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, P_SPLIT, 0, 0));
    let mut splits = vec![Split::Test; n];
    for (rank, &p) in order.iter().enumerate() {
        splits[p] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    splits
}

/// Deterministic in `cfg` (including `cfg.seed`).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let splits = project_splits(cfg);
    let mut next_id = 0usize;
    let mut binaries = Vec::with_capacity(cfg.n_projects * cfg.settings.len());
    for p in 0..cfg.n_projects {
        let src = generate_source(cfg, p);
        for (si, &setting) in cfg.settings.iter().enumerate() {
            binaries.push(emit_binary(cfg, &src, si, setting, splits[p], &mut next_id));
        }
    }
    Ok(Corpus { binaries })
}
