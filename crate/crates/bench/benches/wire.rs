use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use aurasim_core::wire::schema::{self, agent_registry, AgentLike, AgentView, BatchEncoder};
use aurasim_core::wire::{decode, encode, BufferAccounting};

fn bench(c: &mut Criterion) {
    let (_, agents) = aurasim_bench::population(5000, 20.0);
    let slots: Vec<Option<&_>> = agents.iter().map(Some).collect();
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let batch = BatchEncoder { iteration: 1, slots: &slots };
    let len = encode(&batch, &reg, &acc).unwrap().len() as u64;

    let mut g = c.benchmark_group("wire");
    g.throughput(Throughput::Bytes(len));
    g.bench_function("encode_5000", |b| b.iter(|| encode(&batch, &reg, &acc).unwrap()));
    g.bench_function("decode_5000", |b| {
        b.iter_batched(
            || encode(&batch, &reg, &acc).unwrap(),
            |buf| decode(buf, &reg).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.bench_function("decode_and_read_positions_5000", |b| {
        b.iter_batched(
            || encode(&batch, &reg, &acc).unwrap(),
            |buf| {
                let msg = decode(buf, &reg).unwrap();
                let root = msg.root();
                let mut sum = 0.0;
                for i in 0..agents.len() {
                    if let Some(nd) = msg.seq_node(root, schema::field::AGENTS, i) {
                        sum += AgentView::new(&msg, nd).position().x();
                    }
                }
                sum
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
