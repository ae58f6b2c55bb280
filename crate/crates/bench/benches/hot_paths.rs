//! Benchmarks for the dictionary matcher, response parsers, scoring and fold assignment.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mindlens_bench::{label_pairs, lexicon, posts, responses};
use mindlens_core::evaluate::{make_folds, score};
use mindlens_core::tasks::{parse_binary, ResponseParser};
use mindlens_core::{BinaryVerdict, SeverityLevel};

fn matcher(c: &mut Criterion) {
    let posts = posts(1000, 120, 1);
    let mut group = c.benchmark_group("dictionary_matcher");
    group.throughput(Throughput::Elements(posts.len() as u64));
    for terms in [40, 200, 1000] {
        let m = lexicon(terms, 2).matcher();
        group.bench_with_input(BenchmarkId::from_parameter(terms), &posts, |b, posts| {
            b.iter(|| {
                posts
                    .iter()
                    .map(|p| m.annotate_text(black_box(p)).labels.len())
                    .sum::<usize>()
            })
        });
    }
    group.finish();
}

fn parsers(c: &mut Criterion) {
    let parser = ResponseParser::default();
    let responses = responses(1000, 3);
    let mut group = c.benchmark_group("parsers");
    group.throughput(Throughput::Elements(responses.len() as u64));
    group.bench_function("binary", |b| {
        b.iter(|| {
            responses
                .iter()
                .filter(|r| parse_binary(black_box(r)) == BinaryVerdict::Yes)
                .count()
        })
    });
    group.bench_function("disorder", |b| {
        b.iter(|| {
            responses
                .iter()
                .map(|r| parser.parse_disorders_detailed(black_box(r)).labels.len())
                .sum::<usize>()
        })
    });
    group.bench_function("severity", |b| {
        b.iter(|| {
            responses
                .iter()
                .filter(|r| parser.parse_severity(black_box(r)) == SeverityLevel::Severe)
                .count()
        })
    });
    group.bench_function("therapy", |b| {
        b.iter(|| {
            responses
                .iter()
                .map(|r| parser.parse_therapies(black_box(r)).len())
                .sum::<usize>()
        })
    });
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let (gold, pred) = label_pairs(5000, 4);
    c.bench_function("score_5000", |b| {
        b.iter(|| score(black_box(&gold), black_box(&pred)).unwrap())
    });
}

fn folds(c: &mut Criterion) {
    let ids: Vec<String> = (0..5000).map(|i| format!("t{i:05}")).collect();
    c.bench_function("make_folds_5000_k5", |b| {
        b.iter(|| make_folds(black_box(&ids), 5, 42).unwrap())
    });
}

criterion_group!(benches, matcher, parsers, scoring, folds);
criterion_main!(benches);
