use std::collections::BTreeMap;

use proptest::prelude::*;

use benh_core::corpus::{
    filter_strings, generate_synthetic, index_relations, parse_corpus, to_bcf_bytes, Arch,
    LoadOptions, OptLevel, SynthConfig,
};
use benh_core::eesg::{build_eesg_at, EdgeMask, EesgOptions, NodeRef};
use benh_core::eval::average_precision_flags;
use benh_core::simcombine::{cosine, jaccard};

fn synth(
    funcs: usize,
    density: f64,
    strings: usize,
    globals: usize,
    seed: u64,
) -> benh_core::corpus::Corpus {
    generate_synthetic(&SynthConfig {
        n_projects: 1,
        funcs_per_project: funcs,
        call_density: density,
        n_strings: strings,
        n_globals: globals,
        settings: vec![(Arch::X86, OptLevel::O1), (Arch::MIPS, OptLevel::O3)],
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn context_graph_invariants(
        funcs in 1usize..25,
        density in 0.0f64..3.0,
        strings in 0usize..10,
        globals in 0usize..5,
        md in 0u32..5,
        mask in 0u8..64,
        seed in any::<u64>(),
    ) {
        let corpus = filter_strings(&synth(funcs, density, strings, globals, seed));
        let opts = EesgOptions { max_depth: md, mask: EdgeMask::from_bits(mask), ..EesgOptions::default() };
        for bin in &corpus.binaries {
            let idx = index_relations(bin);
            for t in 0..bin.functions.len() as u32 {
                let g = build_eesg_at(&idx, t, &opts);
                prop_assert_eq!(g.target, NodeRef::Function(t));
                prop_assert!(g.nodes.iter().any(|n| n.node == g.target && n.depth == 0));
                prop_assert!(g.nodes.iter().all(|n| n.depth <= md));
                prop_assert!(g.nodes.windows(2).all(|w| w[0].node < w[1].node));
                prop_assert!(g.edges.windows(2).all(|w| w[0] < w[1]));
                let mut in_deg: BTreeMap<NodeRef, usize> = BTreeMap::new();
                let mut out_deg: BTreeMap<NodeRef, usize> = BTreeMap::new();
                for e in &g.edges {
                    prop_assert!(e.etype < 6 && opts.mask.contains(e.etype));
                    prop_assert!(e.src != e.dst);
                    prop_assert_eq!(!e.src.is_function(), e.etype == 5);
                    prop_assert!(e.dst.is_function());
                    prop_assert!(g.nodes.binary_search_by(|n| n.node.cmp(&e.src)).is_ok());
                    prop_assert!(g.nodes.binary_search_by(|n| n.node.cmp(&e.dst)).is_ok());
                    *in_deg.entry(e.dst).or_default() += 1;
                    *out_deg.entry(e.src).or_default() += 1;
                }
                for n in g.nodes.iter().filter(|n| !n.node.is_function()) {
                    prop_assert_eq!(in_deg.get(&n.node), None);
                    prop_assert!(out_deg.get(&n.node).copied().unwrap_or(0) >= 1);
                }
                if md == 0 || mask == 0 {
                    prop_assert_eq!(g.nodes.len(), 1);
                    prop_assert!(g.edges.is_empty());
                }
            }
        }
    }

    #[test]
    fn corpus_bytes_round_trip(funcs in 1usize..15, strings in 0usize..6, seed in any::<u64>()) {
        let c = synth(funcs, 1.0, strings, 2, seed);
        let bytes = to_bcf_bytes(&c);
        let back = parse_corpus(&bytes, LoadOptions::default()).unwrap();
        prop_assert_eq!(to_bcf_bytes(&back), bytes);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        pair in (1usize..20).prop_flat_map(|n| (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(-1e3f64..1e3, n),
        )),
    ) {
        let (u, v) = pair;
        let a = cosine(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert_eq!(a, cosine(&v, &u).unwrap());
    }

    #[test]
    fn jaccard_is_bounded_and_symmetric(
        a in prop::collection::btree_set(0u64..40, 0..15),
        b in prop::collection::btree_set(0u64..40, 0..15),
    ) {
        let (a, b): (Vec<u64>, Vec<u64>) = (a.into_iter().collect(), b.into_iter().collect());
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        if !a.is_empty() {
            prop_assert_eq!(jaccard(&a, &a), 1.0);
        }
    }

    #[test]
    fn average_precision_bounds(flags in prop::collection::vec(any::<bool>(), 1..60)) {
        prop_assume!(flags.iter().any(|&f| f));
        let ap = average_precision_flags(&flags).unwrap();
        let n_rel = flags.iter().filter(|&&f| f).count();
        let first = flags.iter().position(|&f| f).unwrap() + 1;
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let mut worst = flags.clone();
        worst.sort();
        prop_assert!(ap >= average_precision_flags(&worst).unwrap() - 1e-12);
        prop_assert!(ap >= 1.0 / first as f64 / n_rel as f64 - 1e-12);
        let mut sorted = flags.clone();
        sorted.sort_by(|a, b| b.cmp(a));
        prop_assert_eq!(average_precision_flags(&sorted).unwrap(), 1.0);
    }
}
