use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ragcap_core::corpus::synthetic::random_pairs;
use ragcap_core::retriever::retrieve_filtered;
use ragcap_core::{FilterPolicy, Index, IndexConfig, RetrievalQuery};

const DIM: usize = 64;

fn knn(c: &mut Criterion) {
    let corpus = random_pairs(20_000, DIM, 7);
    let queries: Vec<_> = random_pairs(64, DIM, 8).records.into_iter().map(|r| r.embedding).collect();
    let exact = Index::build(corpus.records.clone(), IndexConfig::exact(DIM)).unwrap();
    let ivf = Index::build(corpus.records.clone(), IndexConfig::ivf(DIM, 64, 8, 1)).unwrap();

    let mut g = c.benchmark_group("knn_k10");
    for (name, index) in [("exact", &exact), ("ivf_64_8", &ivf)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), index, |b, index| {
            let mut i = 0;
            b.iter(|| {
                i = (i + 1) % queries.len();
                index.knn(&queries[i], 10).unwrap()
            })
        });
    }
    g.finish();

    let policy = FilterPolicy::default();
    let records = &corpus.records;
    c.bench_function("retrieve_filtered_k2", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % 512;
            let r = &records[i];
            let q = RetrievalQuery::new(r.embedding.clone()).with_image_id(r.id).with_ground_truth(r.caption.clone());
            retrieve_filtered(&exact, &q, 2, &policy).unwrap()
        })
    });
}

criterion_group!(benches, knn);
criterion_main!(benches);
