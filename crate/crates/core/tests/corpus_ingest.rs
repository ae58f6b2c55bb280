//! Ingest against a re-filter oracle, corruption accounting, and sampling
//! statistics.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use mindlens_core::corpus::{ingest_files, read_corpus, sample, write_corpus};
use mindlens_core::rng::{seeded, uniform_below};
use mindlens_core::{CorpusFilter, Post, SampleSpec};
use proptest::prelude::*;
use serde_json::{json, Value};

const COMMUNITIES: [&str; 4] = ["depression", "Anxiety", "gaming", "ADHD"];

/// Random dump lines: valid records, duplicates, blanks, and corrupted lines.
fn random_dump(seed: u64, lines: usize) -> Vec<String> {
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(lines);
    for i in 0..lines {
        let id = format!("x{}", uniform_below(&mut rng, lines as u64 * 3 / 4 + 1));
        let sub = COMMUNITIES[uniform_below(&mut rng, 4) as usize];
        let t = 1_577_836_800 + uniform_below(&mut rng, 86_400 * 400) as i64;
        let title = if uniform_below(&mut rng, 8) == 0 {
            ""
        } else {
            "a title"
        };
        let body = if uniform_below(&mut rng, 8) == 0 {
            ""
        } else {
            "some body text"
        };
        let line = match uniform_below(&mut rng, 20) {
            0 => String::new(),
            1 => format!("{{\"id\": \"{id}\", \"subreddit\": "),
            2 => json!({"id": id, "subreddit": sub, "created_utc": t}).to_string(),
            3 => "not json at all".into(),
            _ => json!({"id": id, "subreddit": sub, "created_utc": t, "title": title, "selftext": body, "n": i})
                .to_string(),
        };
        out.push(line);
    }
    out
}

/// Expected admitted ids: first parseable occurrence wins, then the window
/// and community filter, then the empty-text rule.
fn oracle(lines: &[String], communities: &BTreeSet<String>, start: i64, end: i64) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in lines {
        let Ok(v) = serde_json::from_str::<Value>(line) else {
            continue;
        };
        let fields =
            ["id", "subreddit", "title", "selftext"].map(|k| v.get(k).and_then(Value::as_str));
        let (Some(id), Some(sub), Some(title), Some(body)) =
            (fields[0], fields[1], fields[2], fields[3])
        else {
            continue;
        };
        let Some(t) = v.get("created_utc").and_then(Value::as_i64) else {
            continue;
        };
        if !seen.insert(id.to_string()) {
            continue;
        }
        if !communities.contains(&sub.to_lowercase()) || t < start || t > end {
            continue;
        }
        if title.trim().is_empty() && body.trim().is_empty() {
            continue;
        }
        out.push(id.to_string());
    }
    out
}

fn write_lines(dir: &std::path::Path, name: &str, lines: &[String]) -> std::path::PathBuf {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    path
}

#[test]
fn ingest_matches_refilter_oracle() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        let lines = random_dump(seed, 800);
        let path = write_lines(dir.path(), &format!("d{seed}.ndjson"), &lines);
        let communities: BTreeSet<String> = ["depression", "anxiety"].map(String::from).into();
        let (start, end) = (1_580_000_000, 1_600_000_000);
        let filter = CorpusFilter::new(Some(["Depression", "anxiety"]), start, end).unwrap();
        let (posts, stats) = ingest_files(&[&path], &filter).unwrap();
        let got: Vec<&str> = posts.iter().map(Post::id).collect();
        assert_eq!(got, oracle(&lines, &communities, start, end), "seed {seed}");
        assert_eq!(stats.total_lines, lines.len());
        assert_eq!(stats.accounted(), stats.total_lines);
        assert_eq!(stats.admitted, posts.len());
    }
}

#[test]
fn corrupted_lines_are_counted_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded(37);
    let mut corrupt = BTreeSet::new();
    while corrupt.len() < 37 {
        corrupt.insert(uniform_below(&mut rng, 1000) as usize);
    }
    let lines: Vec<String> = (0..1000)
        .map(|i| {
            let good = json!({"id": format!("p{i}"), "subreddit": "depression", "created_utc": 1_600_000_000 + i,
                "title": "t", "selftext": "b"})
            .to_string();
            if corrupt.contains(&i) {
                good[..good.len() / 2].to_string()
            } else {
                good
            }
        })
        .collect();
    let path = write_lines(dir.path(), "dump.ndjson", &lines);
    let (posts, stats) = ingest_files(&[&path], &CorpusFilter::any()).unwrap();
    assert_eq!(stats.parse_failures, 37);
    assert_eq!(posts.len(), 963);
    assert_eq!(stats.accounted(), 1000);
}

#[test]
fn corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let posts = vec![
        Post::new("a", "depression", 1, "Title", "Body\twith tab").unwrap(),
        Post::new("b", "anxiety", 2, "", "Only body é").unwrap(),
    ];
    let path = dir.path().join("c.ndjson");
    write_corpus(&path, &posts).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), posts);
    assert_eq!(posts[0].text(), "Title\n\nBody\twith tab");
}

fn synthetic_posts(n: usize) -> Vec<Post> {
    (0..n)
        .map(|i| Post::new(format!("s{i:06}"), "c", 0, "t", "").unwrap())
        .collect()
}

/// Two independent seeds draw 5000 of 334,197 posts; the overlap is
/// hypergeometric with mean n^2/N and variance n^2/N (1 - n/N)^2 (N/(N-1)).
#[test]
fn sample_overlap_is_hypergeometric() {
    let big_n = 334_197usize;
    let n = 5000usize;
    let posts = synthetic_posts(big_n);
    let (nf, bf) = (n as f64, big_n as f64);
    let mean = nf * nf / bf;
    let var = nf * (nf / bf) * (1.0 - nf / bf) * (bf - nf) / (bf - 1.0);
    assert!((mean - 74.8).abs() < 0.1 && (var.sqrt() - 8.5).abs() < 0.1);
    let pairs = 8;
    let mut total = 0.0;
    for p in 0..pairs {
        let a: HashSet<String> = sample(&posts, SampleSpec::new(n, 2 * p).unwrap())
            .iter()
            .map(|x| x.id().to_string())
            .collect();
        let b = sample(&posts, SampleSpec::new(n, 2 * p + 1).unwrap());
        assert_eq!(a.len(), n);
        let overlap = b.iter().filter(|x| a.contains(x.id())).count() as f64;
        assert!(
            (overlap - mean).abs() < 5.0 * var.sqrt(),
            "pair {p}: overlap {overlap}"
        );
        total += overlap;
    }
    let avg = total / pairs as f64;
    assert!(
        (avg - mean).abs() < 4.0 * var.sqrt() / (pairs as f64).sqrt(),
        "mean overlap {avg}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_is_sorted_distinct_subset(n in 1usize..300, size in 1usize..400, seed in any::<u64>()) {
        let posts = synthetic_posts(n);
        let s = sample(&posts, SampleSpec::new(size, seed).unwrap());
        prop_assert_eq!(s.len(), size.min(n));
        prop_assert!(s.windows(2).all(|w| w[0].id() < w[1].id()));
        let mut reversed = posts.clone();
        reversed.reverse();
        prop_assert_eq!(sample(&reversed, SampleSpec::new(size, seed).unwrap()), s);
    }
}
