//! Per-binary relation maps: calls, address adjacency, data co-use, string use.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::BinaryImage;

/// Immutable per-function relation maps of one binary.
///
/// Functions and strings are addressed by their position in the binary's
/// `functions` / `strings` vectors. All neighbour lists are sorted and
/// deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationIndex {
    pub binary_id: String,
    function_ids: Vec<String>,
    string_ids: Vec<String>,
    by_id: HashMap<String, u32>,
    call_out: Vec<Vec<u32>>,
    call_in: Vec<Vec<u32>>,
    pred: Vec<Option<u32>>,
    succ: Vec<Option<u32>>,
    /// Ordered by ascending function_id, not by index.
    co_use: Vec<Vec<u32>>,
    strings_used: Vec<Vec<u32>>,
}

pub fn index_relations(binary: &BinaryImage) -> RelationIndex {
    let n = binary.functions.len();
    let by_id: HashMap<String, u32> = binary
        .functions
        .iter()
        .enumerate()
        .map(|(i, f)| (f.function_id.clone(), i as u32))
        .collect();
    let string_pos: HashMap<&str, u32> = binary
        .strings
        .iter()
        .enumerate()
        .map(|(i, s)| (s.string_id.as_str(), i as u32))
        .collect();

    let mut call_out = vec![BTreeSet::new(); n];
    let mut call_in = vec![BTreeSet::new(); n];
    for (i, f) in binary.functions.iter().enumerate() {
        for callee in &f.callees {
            if let Some(&j) = by_id.get(callee) {
                // recursion is internal, not external context
                if j as usize != i {
                    call_out[i].insert(j);
                    call_in[j as usize].insert(i as u32);
                }
            }
        }
    }

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&i| binary.functions[i as usize].start_address);
    let mut pred = vec![None; n];
    let mut succ = vec![None; n];
    for w in order.windows(2) {
        succ[w[0] as usize] = Some(w[1]);
        pred[w[1] as usize] = Some(w[0]);
    }

    // data item -> users; strings and globals live in separate key spaces
    let mut users: BTreeMap<(u8, &str), BTreeSet<u32>> = BTreeMap::new();
    let mut strings_used = vec![Vec::new(); n];
    for (i, f) in binary.functions.iter().enumerate() {
        for s in &f.string_refs {
            if let Some(&p) = string_pos.get(s.as_str()) {
                users.entry((0, s)).or_default().insert(i as u32);
                strings_used[i].push(p);
            }
        }
        for g in &f.global_refs {
            users.entry((1, g)).or_default().insert(i as u32);
        }
        strings_used[i].sort_unstable();
        strings_used[i].dedup();
    }
    let mut co_use = vec![BTreeSet::new(); n];
    for group in users.values() {
        for &a in group {
            for &b in group {
                if a != b {
                    co_use[a as usize].insert(b);
                }
            }
        }
    }
    let co_use = co_use
        .into_iter()
        .map(|set| {
            let mut v: Vec<u32> = set.into_iter().collect();
            v.sort_by(|&a, &b| {
                binary.functions[a as usize]
                    .function_id
                    .cmp(&binary.functions[b as usize].function_id)
            });
            v
        })
        .collect();

    RelationIndex {
        binary_id: binary.binary_id.clone(),
        function_ids: binary
            .functions
            .iter()
            .map(|f| f.function_id.clone())
            .collect(),
        string_ids: binary.strings.iter().map(|s| s.string_id.clone()).collect(),
        by_id,
        call_out: call_out
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect(),
        call_in: call_in
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect(),
        pred,
        succ,
        co_use,
        strings_used,
    }
}

impl RelationIndex {
    pub fn num_functions(&self) -> usize {
        self.function_ids.len()
    }

    pub fn num_strings(&self) -> usize {
        self.string_ids.len()
    }

    pub fn function_index(&self, id: &str) -> Option<u32> {
        self.by_id.get(id).copied()
    }

    pub fn function_id(&self, i: u32) -> &str {
        &self.function_ids[i as usize]
    }

    pub fn string_id(&self, i: u32) -> &str {
        &self.string_ids[i as usize]
    }

    pub fn call_out(&self, i: u32) -> &[u32] {
        &self.call_out[i as usize]
    }

    pub fn call_in(&self, i: u32) -> &[u32] {
        &self.call_in[i as usize]
    }

    /// Function immediately below `i` in address order.
    pub fn address_pred(&self, i: u32) -> Option<u32> {
        self.pred[i as usize]
    }

    /// Function immediately above `i` in address order.
    pub fn address_succ(&self, i: u32) -> Option<u32> {
        self.succ[i as usize]
    }

    /// Functions sharing at least one string or global with `i`, by ascending function_id.
    pub fn co_use(&self, i: u32) -> &[u32] {
        &self.co_use[i as usize]
    }

    pub fn strings_used(&self, i: u32) -> &[u32] {
        &self.strings_used[i as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use super::*;

    #[test]
    fn single_function_has_no_relations() {
        let idx = index_relations(&binary("b", vec![func("a", 0)], vec![]));
        assert!(idx.call_out(0).is_empty() && idx.call_in(0).is_empty());
        assert_eq!((idx.address_pred(0), idx.address_succ(0)), (None, None));
        assert!(idx.co_use(0).is_empty() && idx.strings_used(0).is_empty());
    }

    #[test]
    fn adjacency_follows_sorted_addresses() {
        // declared out of address order on purpose
        let bin = binary(
            "b",
            vec![func("c", 0x300), func("a", 0x100), func("b", 0x200)],
            vec![],
        );
        let idx = index_relations(&bin);
        let (c, a, b) = (0, 1, 2);
        assert_eq!(
            (idx.address_pred(b), idx.address_succ(b)),
            (Some(a), Some(c))
        );
        assert_eq!((idx.address_pred(a), idx.address_succ(a)), (None, Some(b)));
        assert_eq!((idx.address_pred(c), idx.address_succ(c)), (Some(b), None));
    }

    #[test]
    fn shared_string_creates_co_use_pair() {
        let mut a = func("A", 0x100);
        a.string_refs.push("s".into());
        let b = func("B", 0x200);
        let mut c = func("C", 0x300);
        c.string_refs.push("s".into());
        let idx = index_relations(&binary("b", vec![a, b, c], vec![string("s", "shared")]));
        assert_eq!(idx.co_use(0), [2]);
        assert_eq!(idx.co_use(2), [0]);
        assert!(idx.co_use(1).is_empty());
        assert_eq!(idx.strings_used(0), [0]);
    }

    #[test]
    fn self_calls_and_duplicate_calls_collapse() {
        let mut a = func("A", 0);
        a.callees = vec!["A".into(), "B".into(), "B".into()];
        let idx = index_relations(&binary("b", vec![a, func("B", 0x10)], vec![]));
        assert_eq!(idx.call_out(0), [1]);
        assert_eq!(idx.call_in(1), [0]);
        assert!(idx.call_in(0).is_empty());
    }
}
