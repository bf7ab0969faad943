/// Per-character simple case folding: a character folds to its lowercase
/// form only when that form is a single character.
pub fn fold(s: &str) -> Vec<char> {
    s.chars()
        .map(|c| {
            let mut lower = c.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(l), None) => l,
                _ => c,
            }
        })
        .collect()
}

/// Edit distance with unit-cost insertion, deletion and substitution.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub(crate) fn similarity_from(distance: usize, longest: usize) -> f64 {
    if longest == 0 {
        1.0
    } else {
        1.0 - distance as f64 / longest as f64
    }
}

/// `1 - lev(a', b') / max(|a'|, |b'|)` over case-folded inputs; two empty
/// strings are identical.
pub fn normalized_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (fold(a), fold(b));
    similarity_from(levenshtein(&a, &b), a.len().max(b.len()))
}

/// Upper bound on [`normalized_similarity`] from lengths alone; never below
/// the true value because the distance is at least the length difference.
pub(crate) fn similarity_upper_bound(a_len: usize, b_len: usize) -> f64 {
    similarity_from(a_len.abs_diff(b_len), a_len.max(b_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Plain recursion straight from the definition.
    fn lev_oracle(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ca, ra)), Some((cb, rb))) => {
                if ca == cb {
                    lev_oracle(ra, rb)
                } else {
                    1 + lev_oracle(ra, b).min(lev_oracle(a, rb)).min(lev_oracle(ra, rb))
                }
            }
        }
    }

    #[test]
    fn examples() {
        assert_eq!(normalized_similarity("x", "x"), 1.0);
        assert!((normalized_similarity("johnsmith", "john-smith") - 0.9).abs() < 1e-12);
        assert!((normalized_similarity("abc", "abd") - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(normalized_similarity("", "abc"), 0.0);
        assert_eq!(normalized_similarity("", ""), 1.0);
    }

    #[test]
    fn case_is_ignored() {
        assert_eq!(normalized_similarity("John Smith", "john smith"), 1.0);
        assert_eq!(normalized_similarity("ÉMILE", "émile"), 1.0);
    }

    #[test]
    fn distance_counts_characters() {
        assert_eq!(levenshtein(&fold("kitten"), &fold("sitting")), 3);
        assert_eq!(levenshtein(&fold("naïve"), &fold("naive")), 1);
    }

    proptest! {
        #[test]
        fn agrees_with_recursive_oracle(a in "[abc]{0,7}", b in "[abc]{0,7}") {
            let (fa, fb) = (fold(&a), fold(&b));
            prop_assert_eq!(levenshtein(&fa, &fb), lev_oracle(&fa, &fb));
        }

        #[test]
        fn symmetric_bounded_and_exact_on_identity(a in "[a-cA-C ]{0,10}", b in "[a-cA-C ]{0,10}") {
            let s = normalized_similarity(&a, &b);
            prop_assert_eq!(s, normalized_similarity(&b, &a));
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, a.to_lowercase() == b.to_lowercase());
        }

        #[test]
        fn length_bound_never_undershoots(a in "[a-d]{0,9}", b in "[a-d]{0,9}") {
            let ub = similarity_upper_bound(a.chars().count(), b.chars().count());
            prop_assert!(normalized_similarity(&a, &b) <= ub);
        }
    }
}
