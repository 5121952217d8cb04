#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hand-computed corpus BLEU values (hypotheses, references, score).
pub const BLEU_CASES: [(&[&str], &[&str], f64); 11] = [
    (&["a b c d e"], &["a b c d e"], 100.0),
    // p1..p4 = 1, BP = exp(1 - 5/4)
    (&["a b c d"], &["a b c d e"], 77.8801),
    (&["x y z w"], &["a b c d"], 0.0),
    // (5/6 * 4/5 * 3/4 * 2/3)^(1/4) = (1/3)^(1/4)
    (&["a b c d e f"], &["a b c d e g"], 75.9836),
    // longer hypothesis: no penalty, (4/5 * 3/4 * 2/3 * 1/2)^(1/4)
    (&["a b c d e"], &["a b c d"], 66.8740),
    // clipped unigram counts, (1 * 3/4 * 2/3 * 1/2)^(1/4)
    (&["a a b c d"], &["a b c d a"], 70.7107),
    // corpus-level pooling: (7/8 * 4/6 * 2/4 * 1/2)^(1/4)
    (&["a b c d", "e f g h"], &["a b c d", "e f x h"], 61.7965),
    // only orders 1 and 2 exist; BP = exp(1 - 3/2)
    (&["a b"], &["a b c"], 60.6531),
    // empty hypothesis still counts toward ref length: BP = exp(1 - 7/5)
    (&["", "a b c d e"], &["x y", "a b c d e"], 67.0320),
    // clipping leaves no bigram match
    (&["the the the the the"], &["the cat the mat the"], 0.0),
    // (7/7 * 4/5 * 2/3 * 1/2)^(1/4) * exp(1 - 9/7)
    (&["b c d e a", "q r"], &["a b c d e", "q r s t"], 54.0018),
];

pub fn bleu4(hyps: &[&str], refs: &[&str]) -> f64 {
    (s2tt_core::bleu::corpus_bleu(hyps, refs).unwrap() * 1e4).round() / 1e4
}

/// 1 to 12 characters from `letters` with the odd single space.
pub fn random_text(rng: &mut ChaCha8Rng, letters: &[char]) -> String {
    let n = rng.random_range(1..=12);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 && i + 1 < n && !s.ends_with(' ') && rng.random_bool(0.2) {
            s.push(' ');
        } else {
            s.push(letters[rng.random_range(0..letters.len())]);
        }
    }
    s
}
