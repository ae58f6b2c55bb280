//! Dictionary matcher against a naive per-term scan.

use std::collections::BTreeSet;

use mindlens_core::rng::{seeded, uniform_below};
use mindlens_core::{DisorderLabel, LabelSet, Lexicon};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

const VOCAB: &[&str] = &[
    "sad", "panic", "attack", "attacks", "voices", "manic", "low", "mood", "focus", "cant", "eat",
    "sleep", "flash", "backs", "ocd", "ptsd", "adhd", "spectrum", "on", "the", "empty", "inside",
    "worry", "ing", "día", "straße", "naïve",
];
const FILLER: &[&str] = &[
    " ", "  ", "\n", "\t", ".", ",", "-", "'", "!", " (", ") ", "1", "x", "é", "🙂", "_", "İ",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[uniform_below(rng, items.len() as u64) as usize]
}

fn random_lexicon(rng: &mut ChaCha8Rng, size: usize) -> Lexicon {
    let mut lexicon = Lexicon::default();
    let mut seen = BTreeSet::new();
    while seen.len() < size {
        let words = 1 + uniform_below(rng, 3) as usize;
        let term: Vec<&str> = (0..words).map(|_| pick(rng, VOCAB)).collect();
        let term = term.join(" ");
        let disorder = DisorderLabel::DISORDERS[uniform_below(rng, 9) as usize];
        if seen.insert((disorder, term.clone())) {
            lexicon.insert(disorder, &term).unwrap();
        }
    }
    lexicon
}

fn random_post(rng: &mut ChaCha8Rng) -> String {
    let tokens = uniform_below(rng, 60) as usize;
    let mut out = String::new();
    for _ in 0..tokens {
        let mut word = pick(rng, VOCAB).to_string();
        if uniform_below(rng, 4) == 0 {
            word = word.to_uppercase();
        }
        out.push_str(&word);
        let sep = if uniform_below(rng, 5) == 0 {
            pick(rng, FILLER)
        } else {
            " "
        };
        out.push_str(sep);
    }
    out
}

/// Lowercased text with whitespace runs collapsed to one space, plus the
/// source char index of every byte.
fn oracle_fold(text: &str) -> (String, Vec<usize>) {
    let mut folded = String::new();
    let mut origin = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            if !folded.is_empty() && i < chars.len() {
                folded.push(' ');
                origin.push(i - 1);
            }
            continue;
        }
        for lc in chars[i].to_lowercase() {
            let mut buf = [0u8; 4];
            let n = lc.encode_utf8(&mut buf).len();
            folded.push(lc);
            origin.extend(std::iter::repeat_n(i, n));
        }
        i += 1;
    }
    (folded, origin)
}

fn alnum(c: Option<char>) -> bool {
    c.is_some_and(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

/// Every (offset, term, disorder) found by trying each term at each byte.
fn naive_scan(lexicon: &Lexicon, text: &str) -> (LabelSet, Vec<(usize, String, DisorderLabel)>) {
    let (folded, origin) = oracle_fold(text);
    let mut hits = Vec::new();
    for (disorder, terms) in lexicon.entries() {
        for term in terms {
            for start in 0..folded.len() {
                if !folded.is_char_boundary(start) || !folded[start..].starts_with(term.as_str()) {
                    continue;
                }
                let end = start + term.len();
                if alnum(folded[..start].chars().next_back()) || alnum(folded[end..].chars().next())
                {
                    continue;
                }
                hits.push((origin[start], term.clone(), disorder));
            }
        }
    }
    hits.sort();
    let labels = hits.iter().map(|h| h.2).collect();
    (labels, hits)
}

#[test]
fn matcher_agrees_with_naive_scan() {
    let mut rng = seeded(20240817);
    let lexicon = random_lexicon(&mut rng, 200);
    let matcher = lexicon.matcher();
    let mut disagreements = Vec::new();
    let mut labeled = 0;
    for _ in 0..1000 {
        let post = random_post(&mut rng);
        let (want_labels, want_hits) = naive_scan(&lexicon, &post);
        let got = matcher.annotate_text(&post);
        let got_hits: Vec<_> = got
            .hits
            .iter()
            .map(|h| (h.offset, h.term.clone(), h.disorder))
            .collect();
        if got.labels != want_labels || got_hits != want_hits {
            disagreements.push(post);
        }
        labeled += usize::from(!want_labels.is_none());
    }
    assert!(
        disagreements.is_empty(),
        "{} disagreements, first: {:?}",
        disagreements.len(),
        disagreements[0]
    );
    // The generator must exercise both outcomes for the agreement to mean anything.
    assert!(labeled > 100 && labeled < 1000, "labeled {labeled}");
}

#[test]
fn shipped_lexicon_loads_and_matches() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/lexicon.json");
    let lexicon = Lexicon::load(path).unwrap();
    assert_eq!(lexicon.term_count(), 40);
    let matcher = lexicon.matcher();
    let r = matcher.annotate_text("Panic attacks and FLASHBACKS again, I feel empty   inside.");
    let keys: Vec<_> = r
        .labels
        .labels()
        .into_iter()
        .map(DisorderLabel::key)
        .collect();
    assert_eq!(keys, ["anxiety", "depression", "ptsd"]);
    assert!(matcher
        .annotate_text("Nothing relevant here")
        .labels
        .is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Labels are exactly the disorders of the hits, or {None} without hits.
    #[test]
    fn labels_follow_hits(seed in any::<u64>(), text in ".{0,200}") {
        let mut rng = seeded(seed);
        let lexicon = random_lexicon(&mut rng, 20);
        let r = lexicon.matcher().annotate_text(&text);
        let from_hits: LabelSet = r.hits.iter().map(|h| h.disorder).collect();
        prop_assert_eq!(r.labels, from_hits);
        prop_assert_eq!(r.labels.is_none(), r.hits.is_empty());
        let (want, _) = naive_scan(&lexicon, &text);
        prop_assert_eq!(r.labels, want);
    }
}
