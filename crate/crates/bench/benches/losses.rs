use criterion::{criterion_group, criterion_main};

criterion_group!(benches, eril_bench::losses);
criterion_main!(benches);
