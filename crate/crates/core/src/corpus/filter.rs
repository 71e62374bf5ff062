use std::collections::HashSet;

use super::{recompute_ref_counts, Corpus};

/// Strings shorter than this many characters are dropped as unspecific.
pub const MIN_STRING_LEN: usize = 5;

/// Drop short strings, prune references to them and recompute `ref_count`.
pub fn filter_strings(corpus: &Corpus) -> Corpus {
    let mut out = corpus.clone();
    for bin in &mut out.binaries {
        bin.strings
            .retain(|s| s.content.chars().count() >= MIN_STRING_LEN);
        let kept: HashSet<String> = bin.strings.iter().map(|s| s.string_id.clone()).collect();
        for f in &mut bin.functions {
            f.string_refs.retain(|s| kept.contains(s));
        }
        recompute_ref_counts(bin);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::test_util::*;
    use super::*;

    fn contents(c: &Corpus) -> Vec<&str> {
        c.binaries[0]
            .strings
            .iter()
            .map(|s| s.content.as_str())
            .collect()
    }

    #[test]
    fn short_and_empty_strings_removed() {
        let mut f = func("a", 0);
        f.string_refs = vec![
            "s0".into(),
            "s1".into(),
            "s2".into(),
            "s3".into(),
            "s4".into(),
        ];
        let bin = binary(
            "b",
            vec![f],
            vec![
                string("s0", "time"),
                string("s1", ""),
                string("s2", "hello"),
                string("s3", "hi"),
                string("s4", "opensslerr"),
            ],
        );
        let out = filter_strings(&Corpus {
            binaries: vec![bin],
        });
        assert_eq!(contents(&out), ["hello", "opensslerr"]);
        assert_eq!(out.binaries[0].functions[0].string_refs, ["s2", "s4"]);
        assert!(out.binaries[0].strings.iter().all(|s| s.ref_count == 1));
        out.validate().unwrap();
    }

    #[test]
    fn length_counts_characters_not_bytes() {
        // four characters, twelve bytes
        let bin = binary(
            "b",
            vec![],
            vec![string("s", "日本語字"), string("t", "日本語字体")],
        );
        let out = filter_strings(&Corpus {
            binaries: vec![bin],
        });
        assert_eq!(contents(&out), ["日本語字体"]);
    }

    #[test]
    fn idempotent() {
        let mut f = func("a", 0);
        f.string_refs = vec!["s0".into(), "s1".into()];
        let bin = binary(
            "b",
            vec![f],
            vec![string("s0", "abc"), string("s1", "abcdef")],
        );
        let once = filter_strings(&Corpus {
            binaries: vec![bin],
        });
        assert_eq!(filter_strings(&once), once);
    }
}
