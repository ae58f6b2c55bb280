//! Synthetic inputs for benchmarks.

use mindlens_core::rng::{seeded, uniform_below};
use mindlens_core::{DisorderLabel, LabelSet, Lexicon};

const WORDS: &[&str] = &[
    "i",
    "feel",
    "so",
    "tired",
    "every",
    "day",
    "and",
    "cant",
    "sleep",
    "panic",
    "attack",
    "at",
    "work",
    "my",
    "mood",
    "swings",
    "are",
    "bad",
    "hearing",
    "voices",
    "lately",
    "flashbacks",
    "from",
    "the",
    "war",
    "focus",
    "on",
    "anything",
    "hopeless",
    "empty",
    "worry",
    "constantly",
    "binge",
    "eating",
    "again",
    "today",
];

/// A lexicon of `n` distinct one- to three-word terms drawn from the bench vocabulary.
pub fn lexicon(n: usize, seed: u64) -> Lexicon {
    let mut rng = seeded(seed);
    let mut lexicon = Lexicon::default();
    while lexicon.term_count() < n {
        let len = 1 + uniform_below(&mut rng, 3) as usize;
        let term: Vec<&str> = (0..len)
            .map(|_| WORDS[uniform_below(&mut rng, WORDS.len() as u64) as usize])
            .collect();
        let d = DisorderLabel::DISORDERS[uniform_below(&mut rng, 9) as usize];
        let _ = lexicon.insert(d, &term.join(" "));
    }
    lexicon
}

/// `n` posts of roughly `words` words each.
pub fn posts(n: usize, words: usize, seed: u64) -> Vec<String> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            (0..words)
                .map(|_| WORDS[uniform_below(&mut rng, WORDS.len() as u64) as usize])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Mixed LLM-style responses covering every parser.
pub fn responses(n: usize, seed: u64) -> Vec<String> {
    const SHAPES: &[&str] = &[
        "Yes, the author describes panic attacks.",
        "No.",
        "The post suggests Depression and Anxiety. There is no indication of self-harm.",
        "Severity: Moderate (the user is struggling but functioning)",
        "1. Cognitive Behavioral Therapy (CBT) - 85%\n2. Acceptance and Commitment Therapy (ACT): 70%\n3. Mindfulness-based therapy",
        "I cannot help with that.",
    ];
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| SHAPES[uniform_below(&mut rng, SHAPES.len() as u64) as usize].to_string())
        .collect()
}

/// Paired gold and predicted label sets where each label is present with probability 1/4.
pub fn label_pairs(n: usize, seed: u64) -> (Vec<LabelSet>, Vec<LabelSet>) {
    let mut rng = seeded(seed);
    let mut draw = || -> LabelSet {
        DisorderLabel::DISORDERS
            .into_iter()
            .filter(|_| uniform_below(&mut rng, 4) == 0)
            .collect()
    };
    let gold = (0..n).map(|_| draw()).collect();
    let pred = (0..n).map(|_| draw()).collect();
    (gold, pred)
}
