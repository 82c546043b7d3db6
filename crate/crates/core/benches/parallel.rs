use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ranstruct_core::corpus::ChunkRef;
use ranstruct_core::corpus::{recursive_split, ChunkKind, Document, RegexTokenCounter, SourceKind, DEFAULT_SEPARATORS};
use ranstruct_core::exec::{self, Exec};
use ranstruct_core::index::VectorIndex;
use ranstruct_core::qlora::{nf4_dequantize, nf4_quantize, DenseMatrix, ScaleMode};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn unit_vectors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("search");
    for &(n, dim) in &[(10_000usize, 384usize), (50_000, 768)] {
        let mut index = VectorIndex::new(dim);
        for (i, v) in unit_vectors(n, dim, &mut rng).iter().enumerate() {
            index.insert(ChunkRef(format!("d:rag:{i}")), v).unwrap();
        }
        let query = unit_vectors(1, dim, &mut rng).remove(0);
        group.throughput(Throughput::Elements(n as u64));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, format!("{n}x{dim}")), &mode, |b, &mode| {
                b.iter(|| index.search_with(black_box(&query), 3, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("nf4");
    for &side in &[256usize, 1024] {
        let w = DenseMatrix::random(side, side, &mut rng);
        group.throughput(Throughput::Elements((side * side) as u64));
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(format!("quantize/{name}"), side), &mode, |b, &mode| {
                b.iter(|| nf4_quantize(black_box(&w), 64, ScaleMode::default(), mode).unwrap())
            });
            let q = nf4_quantize(&w, 64, ScaleMode::default(), mode).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("dequantize/{name}"), side), &mode, |b, &mode| {
                b.iter(|| nf4_dequantize(black_box(&q), mode))
            });
        }
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("matmul");
    group.sample_size(20);
    for &side in &[128usize, 384] {
        let a = DenseMatrix::random(side, side, &mut rng);
        let b = DenseMatrix::random(side, side, &mut rng);
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, side), &mode, |bench, &mode| {
                bench.iter(|| a.matmul(black_box(&b), mode).unwrap())
            });
        }
    }
    group.finish();
}

fn split(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words = ["fronthaul", "slot", "symbol", "O-RAN", "near-RT", "RIC", "xApp", "timing", "E2"];
    let docs: Vec<Document> = (0..64)
        .map(|d| {
            let mut text = String::new();
            for i in 0..6_000 {
                text.push_str(words[rng.gen_range(0..words.len())]);
                text.push_str(match i % 97 {
                    0 => "\n\n",
                    n if n % 13 == 0 => ". ",
                    _ => " ",
                });
            }
            Document::new(SourceKind::Spec, format!("doc{d}.txt"), text)
        })
        .collect();
    let mut group = c.benchmark_group("split");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                exec::map(mode, &docs, |d| {
                    recursive_split(d, ChunkKind::Rag, 1024, &DEFAULT_SEPARATORS, &RegexTokenCounter).len()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, search, quantize, matmul, split);
criterion_main!(benches);
