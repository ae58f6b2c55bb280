//! Post model, dump ingestion and seeded sampling.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid post: {0}")]
    InvalidPost(String),
    #[error("date window start {start} is after end {end}")]
    InvalidWindow { start: i64, end: i64 },
    #[error("sample size must be at least 1")]
    InvalidSampleSize,
}

/// One submission. `text` is derived from title and body and never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPost", into = "RawPost")]
pub struct Post {
    id: String,
    community: String,
    created_at: i64,
    title: String,
    body: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct RawPost {
    id: String,
    community: String,
    created_at: i64,
    title: String,
    body: String,
}

impl TryFrom<RawPost> for Post {
    type Error = CorpusError;

    fn try_from(raw: RawPost) -> Result<Self, Self::Error> {
        Post::new(raw.id, raw.community, raw.created_at, &raw.title, &raw.body)
    }
}

impl From<Post> for RawPost {
    fn from(p: Post) -> Self {
        RawPost {
            id: p.id,
            community: p.community,
            created_at: p.created_at,
            title: p.title,
            body: p.body,
        }
    }
}

/// NFC-normalizes and drops control characters other than newline and tab.
pub fn clean_field(raw: &str) -> String {
    raw.nfc()
        .filter(|c| !c.is_control() || *c == '\n' || *c == '\t')
        .collect::<String>()
        .trim()
        .to_string()
}

impl Post {
    pub fn new(
        id: impl Into<String>,
        community: impl Into<String>,
        created_at: i64,
        title: &str,
        body: &str,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(CorpusError::InvalidPost("empty id".into()));
        }
        let title = clean_field(title);
        let body = clean_field(body);
        let text = match (title.is_empty(), body.is_empty()) {
            (true, true) => return Err(CorpusError::InvalidPost(format!("post {id} has no text"))),
            (false, true) => title.clone(),
            (true, false) => body.clone(),
            (false, false) => format!("{title}\n\n{body}"),
        };
        Ok(Self {
            id,
            community: community.into(),
            created_at,
            title,
            body,
            text,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn community(&self) -> &str {
        &self.community
    }

    pub fn created_at(&self) -> i64 {
        self.created_at
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Community set (`None` admits any) and an inclusive epoch-second window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFilter {
    communities: Option<BTreeSet<String>>,
    start: i64,
    end: i64,
}

impl CorpusFilter {
    pub fn new<I, S>(communities: Option<I>, start: i64, end: i64) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if start > end {
            return Err(CorpusError::InvalidWindow { start, end });
        }
        let communities = communities.map(|c| {
            c.into_iter()
                .map(|s| s.as_ref().trim().to_ascii_lowercase())
                .filter(|s| !s.is_empty())
                .collect()
        });
        Ok(Self {
            communities,
            start,
            end,
        })
    }

    pub fn any() -> Self {
        Self {
            communities: None,
            start: i64::MIN,
            end: i64::MAX,
        }
    }

    pub fn window(&self) -> (i64, i64) {
        (self.start, self.end)
    }

    /// Community names compare ASCII-case-insensitively.
    pub fn admits(&self, community: &str, created_at: i64) -> bool {
        let community_ok = self
            .communities
            .as_ref()
            .is_none_or(|set| set.contains(&community.to_ascii_lowercase()));
        community_ok && self.start <= created_at && created_at <= self.end
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total_lines: usize,
    pub blank_lines: usize,
    pub parse_failures: usize,
    pub duplicates: usize,
    pub filtered_out: usize,
    pub empty_text: usize,
    pub admitted: usize,
}

impl IngestStats {
    pub fn accounted(&self) -> usize {
        self.blank_lines
            + self.parse_failures
            + self.duplicates
            + self.filtered_out
            + self.empty_text
            + self.admitted
    }
}

/// Pushshift submission fields; anything else on the line is ignored.
#[derive(Deserialize)]
struct DumpRecord {
    id: String,
    subreddit: String,
    created_utc: serde_json::Value,
    title: String,
    selftext: String,
}

fn epoch_seconds(v: &serde_json::Value) -> Option<i64> {
    match v {
        serde_json::Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.is_finite()).map(|f| f as i64)),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Streams posts from a newline-delimited dump.
///
/// Malformed lines are counted and skipped. Records are checked in this
/// order: parse, duplicate id (first occurrence wins), filter, empty text.
pub struct Ingest<R> {
    reader: R,
    filter: CorpusFilter,
    seen: HashSet<String>,
    stats: IngestStats,
    buf: Vec<u8>,
    source: String,
}

impl Ingest<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, filter: CorpusFilter) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| CorpusError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Ingest::new(
            BufReader::new(file),
            filter,
            path.display().to_string(),
        ))
    }
}

impl<R: BufRead> Ingest<R> {
    pub fn new(reader: R, filter: CorpusFilter, source: impl Into<String>) -> Self {
        Self {
            reader,
            filter,
            seen: HashSet::new(),
            stats: IngestStats::default(),
            buf: Vec::new(),
            source: source.into(),
        }
    }

    /// Continues a previous stream's duplicate tracking and counters.
    pub fn resume_from<S>(mut self, other: Ingest<S>) -> Self {
        self.seen = other.seen;
        self.stats = other.stats;
        self
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    fn classify(&mut self, line: &[u8]) -> Option<Post> {
        let Ok(line) = std::str::from_utf8(line) else {
            self.stats.parse_failures += 1;
            return None;
        };
        if line.trim().is_empty() {
            self.stats.blank_lines += 1;
            return None;
        }
        let record: DumpRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) => {
                self.stats.parse_failures += 1;
                return None;
            }
        };
        let Some(created_at) = epoch_seconds(&record.created_utc) else {
            self.stats.parse_failures += 1;
            return None;
        };
        if record.id.trim().is_empty() {
            self.stats.parse_failures += 1;
            return None;
        }
        if !self.seen.insert(record.id.clone()) {
            self.stats.duplicates += 1;
            return None;
        }
        if !self.filter.admits(&record.subreddit, created_at) {
            self.stats.filtered_out += 1;
            return None;
        }
        match Post::new(
            record.id,
            record.subreddit,
            created_at,
            &record.title,
            &record.selftext,
        ) {
            Ok(post) => {
                self.stats.admitted += 1;
                Some(post)
            }
            Err(_) => {
                self.stats.empty_text += 1;
                None
            }
        }
    }
}

impl<R: BufRead> Iterator for Ingest<R> {
    type Item = Result<Post, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(source) => {
                    return Some(Err(CorpusError::Read {
                        path: self.source.clone(),
                        source,
                    }))
                }
            }
            self.stats.total_lines += 1;
            let mut line = std::mem::take(&mut self.buf);
            while matches!(line.last(), Some(b'\n' | b'\r')) {
                line.pop();
            }
            let post = self.classify(&line);
            self.buf = line;
            if let Some(post) = post {
                return Some(Ok(post));
            }
        }
    }
}

/// Ingests one or more dumps in order, sharing duplicate tracking.
pub fn ingest_files<P: AsRef<Path>>(
    paths: &[P],
    filter: &CorpusFilter,
) -> Result<(Vec<Post>, IngestStats), CorpusError> {
    let mut posts = Vec::new();
    let mut previous: Option<Ingest<BufReader<File>>> = None;
    for path in paths {
        let mut stream = Ingest::open(path, filter.clone())?;
        if let Some(prev) = previous.take() {
            stream = stream.resume_from(prev);
        }
        for post in stream.by_ref() {
            posts.push(post?);
        }
        previous = Some(stream);
    }
    let stats = previous.map(|s| s.stats()).unwrap_or_default();
    Ok((posts, stats))
}

/// Reads canonical corpus NDJSON (the format written by [`write_corpus`]).
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Post>, CorpusError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Read {
        path: display.clone(),
        source,
    })?;
    let mut posts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Read {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let post: Post = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        posts.push(post);
    }
    Ok(posts)
}

pub fn write_corpus(path: impl AsRef<Path>, posts: &[Post]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let wrap = |source| CorpusError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    for post in posts {
        serde_json::to_writer(&mut out, post).map_err(|e| wrap(e.into()))?;
        out.write_all(b"\n").map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSpec {
    size: usize,
    seed: u64,
}

impl SampleSpec {
    pub fn new(size: usize, seed: u64) -> Result<Self, CorpusError> {
        if size == 0 {
            return Err(CorpusError::InvalidSampleSize);
        }
        Ok(Self { size, seed })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Uniform sample without replacement, sorted by id.
///
/// Input is first sorted by id so the result depends only on the post set and
/// the seed; the sorted list is shuffled with [`rng::shuffle`] and truncated.
pub fn sample(posts: &[Post], spec: SampleSpec) -> Vec<Post> {
    let mut pool: Vec<&Post> = posts.iter().collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    rng::shuffle(&mut pool, spec.seed);
    pool.truncate(spec.size);
    let mut out: Vec<Post> = pool.into_iter().cloned().collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, sub: &str, t: i64, title: &str, body: &str) -> String {
        serde_json::json!({"id": id, "subreddit": sub, "created_utc": t, "title": title, "selftext": body})
            .to_string()
    }

    fn run(lines: &[String], filter: CorpusFilter) -> (Vec<Post>, IngestStats) {
        let data = lines.join("\n");
        let mut it = Ingest::new(data.as_bytes(), filter, "mem");
        let posts: Vec<Post> = it.by_ref().map(Result::unwrap).collect();
        (posts, it.stats())
    }

    fn mh_filter() -> CorpusFilter {
        CorpusFilter::new(Some(["mentalhealth"]), 0, 1_000).unwrap()
    }

    #[test]
    fn text_joins_title_and_body() {
        let p = Post::new("a", "x", 0, "Title", "Body").unwrap();
        assert_eq!(p.text(), "Title\n\nBody");
        assert_eq!(Post::new("a", "x", 0, "", "Body").unwrap().text(), "Body");
        assert_eq!(
            Post::new("a", "x", 0, "T\u{0007}i", "  ").unwrap().text(),
            "Ti"
        );
        // NFC: e + combining acute becomes a single char
        assert_eq!(
            Post::new("a", "x", 0, "e\u{301}", "").unwrap().text(),
            "\u{e9}"
        );
        assert!(Post::new("a", "x", 0, " ", "").is_err());
        assert!(Post::new("", "x", 0, "t", "").is_err());
    }

    #[test]
    fn three_good_lines() {
        let lines: Vec<String> = (0..3)
            .map(|i| line(&format!("p{i}"), "mentalhealth", 10 + i, "t", "b"))
            .collect();
        let (posts, stats) = run(&lines, mh_filter());
        assert_eq!(posts.len(), 3);
        assert_eq!(stats.parse_failures, 0);
        assert_eq!(stats.admitted, 3);
    }

    #[test]
    fn out_of_window_is_filtered() {
        let lines = vec![
            line("a", "mentalhealth", 5, "t", ""),
            line("b", "mentalhealth", 5_000, "t", ""),
        ];
        let (posts, stats) = run(&lines, mh_filter());
        assert_eq!(posts.len(), 1);
        assert_eq!(stats.filtered_out, 1);
    }

    #[test]
    fn counts_every_outcome() {
        let lines = vec![
            line("a", "MentalHealth", 5, "t", ""),
            "{not json".to_string(),
            String::new(),
            line("a", "mentalhealth", 6, "dup", ""),
            line("b", "cooking", 6, "t", ""),
            line("c", "mentalhealth", 6, "", "  "),
            r#"{"id":"d","subreddit":"mentalhealth","created_utc":1,"title":"x"}"#.to_string(),
            r#"{"id":"e","subreddit":"mentalhealth","created_utc":"7","title":"x","selftext":"","extra":1}"#
                .to_string(),
        ];
        let (posts, stats) = run(&lines, mh_filter());
        assert_eq!(posts.iter().map(Post::id).collect::<Vec<_>>(), ["a", "e"]);
        assert_eq!(
            stats,
            IngestStats {
                total_lines: 8,
                blank_lines: 1,
                parse_failures: 2,
                duplicates: 1,
                filtered_out: 1,
                empty_text: 1,
                admitted: 2,
            }
        );
        assert_eq!(stats.accounted(), stats.total_lines);
    }

    #[test]
    fn invalid_utf8_is_a_parse_failure() {
        let mut data = line("a", "mentalhealth", 1, "t", "").into_bytes();
        data.extend_from_slice(b"\n\xff\xfe\n");
        let mut it = Ingest::new(&data[..], mh_filter(), "mem");
        assert_eq!(it.by_ref().count(), 1);
        assert_eq!(it.stats().parse_failures, 1);
    }

    #[test]
    fn rejects_inverted_window() {
        assert!(CorpusFilter::new(None::<Vec<&str>>, 5, 4).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ndjson");
        let posts = vec![Post::new("a", "depression", 3, "t", "b").unwrap()];
        write_corpus(&path, &posts).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            raw,
            "{\"id\":\"a\",\"community\":\"depression\",\"created_at\":3,\"title\":\"t\",\"body\":\"b\"}\n"
        );
        assert_eq!(read_corpus(&path).unwrap(), posts);
    }

    fn corpus(n: usize) -> Vec<Post> {
        (0..n)
            .map(|i| Post::new(format!("id{i:06}"), "x", 0, "t", "").unwrap())
            .collect()
    }

    #[test]
    fn exhaustive_sample() {
        let posts = corpus(10);
        let s = sample(&posts, SampleSpec::new(10, 3).unwrap());
        assert_eq!(s, posts);
        let s = sample(&posts, SampleSpec::new(50, 3).unwrap());
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn sample_is_deterministic_and_order_free() {
        let posts = corpus(100);
        let spec = SampleSpec::new(17, 99).unwrap();
        let a = sample(&posts, spec);
        let mut reversed = posts.clone();
        reversed.reverse();
        assert_eq!(a, sample(&reversed, spec));
        assert_eq!(a.len(), 17);
        assert!(a.windows(2).all(|w| w[0].id() < w[1].id()));
        assert!(SampleSpec::new(0, 1).is_err());
    }
}
