use criterion::{criterion_group, criterion_main, Criterion, Throughput};

use aurasim_core::compress;
use aurasim_core::delta::{delta_decode, delta_encode, Reference};
use aurasim_core::wire::schema::{agent_registry, BatchEncoder};
use aurasim_core::wire::{encode, BufferAccounting};

fn bench(c: &mut Criterion) {
    let (_, agents) = aurasim_bench::population(5000, 20.0);
    let next = aurasim_bench::jitter(&agents, 0.05);
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let refr = delta_encode(0, &agents, None, &reg, &acc).unwrap();
    let reference = Reference::from_matched(refr.matched, 1, &reg).unwrap();
    let frame = delta_encode(1, &next, Some(&reference), &reg, &acc).unwrap().frame;
    let slots: Vec<Option<&_>> = next.iter().map(Some).collect();
    let plain = encode(&BatchEncoder { iteration: 1, slots: &slots }, &reg, &acc).unwrap();
    let packed = compress::compress(plain.as_bytes());

    let mut g = c.benchmark_group("delta");
    g.throughput(Throughput::Bytes(plain.len() as u64));
    g.bench_function("lz4_compress_5000", |b| b.iter(|| compress::compress(plain.as_bytes())));
    g.bench_function("lz4_decompress_5000", |b| b.iter(|| compress::decompress(&packed).unwrap()));
    g.bench_function("delta_encode_5000", |b| {
        b.iter(|| delta_encode(1, &next, Some(&reference), &reg, &acc).unwrap())
    });
    g.bench_function("delta_decode_5000", |b| {
        b.iter(|| delta_decode(&frame, Some(&reference), &reg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
