mod oracle;

use proptest::prelude::*;
use ragcap_core::retriever::retrieve_filtered;
use ragcap_core::{normalize, FilterPolicy, ImageTextRecord, Index, IndexConfig, RetrievalQuery};

const WORDS: [&str; 4] = ["red", "bus", "cat", "dog"];

/// Records from raw vectors; coarse values make exact score ties common.
fn records(rows: &[(Vec<i8>, usize)]) -> Vec<ImageTextRecord> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, (v, w))| {
            let f: Vec<f32> = v.iter().map(|x| f32::from(*x)).collect();
            let e = normalize(&f).ok()?;
            Some(ImageTextRecord::new(i as u64 * 3 + 1, format!("img{i}"), WORDS[*w].to_string(), e))
        })
        .collect()
}

fn corpus_strategy(dim: usize) -> impl Strategy<Value = Vec<(Vec<i8>, usize)>> {
    prop::collection::vec((prop::collection::vec(-2i8..=2, dim), 0..WORDS.len()), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_knn_matches_full_scan(rows in corpus_strategy(4), q in prop::collection::vec(-2i8..=2, 4), k in 1usize..50) {
        let recs = records(&rows);
        let qf: Vec<f32> = q.iter().map(|x| f32::from(*x)).collect();
        prop_assume!(!recs.is_empty());
        let Ok(qv) = normalize(&qf) else { return Ok(()) };
        let index = Index::build(recs.clone(), IndexConfig::exact(4)).unwrap();
        let got: Vec<u64> = index.knn(&qv, k).unwrap().iter().map(|n| n.record_id).collect();
        prop_assert_eq!(got, oracle::knn(&recs, qv.as_slice(), k));
    }

    #[test]
    fn full_probe_ivf_matches_exact(rows in corpus_strategy(3), q in prop::collection::vec(-2i8..=2, 3), nlist in 1usize..6, seed in any::<u64>()) {
        let recs = records(&rows);
        prop_assume!(!recs.is_empty());
        let qf: Vec<f32> = q.iter().map(|x| f32::from(*x)).collect();
        let Ok(qv) = normalize(&qf) else { return Ok(()) };
        let exact = Index::build(recs.clone(), IndexConfig::exact(3)).unwrap();
        let nlist = nlist.min(recs.len());
        let ivf = Index::build(recs.clone(), IndexConfig::ivf(3, nlist, nlist, seed)).unwrap();
        prop_assert_eq!(exact.knn(&qv, 10).unwrap(), ivf.knn(&qv, 10).unwrap());
    }

    #[test]
    fn filtered_retrieval_matches_oracle(rows in corpus_strategy(3), pick in any::<prop::sample::Index>(), w in 0..WORDS.len(), k in 1usize..8) {
        let recs = records(&rows);
        prop_assume!(!recs.is_empty());
        let me = &recs[pick.index(recs.len())];
        let caption = format!("  {} ", WORDS[w]);
        let index = Index::build(recs.clone(), IndexConfig::exact(3)).unwrap();
        let q = RetrievalQuery::new(me.embedding.clone()).with_image_id(me.id).with_ground_truth(caption.clone());
        let res = retrieve_filtered(&index, &q, k, &FilterPolicy::default()).unwrap();
        for n in &res.neighbors {
            prop_assert_ne!(n.record_id, me.id);
            prop_assert_ne!(n.caption.as_str(), WORDS[w]);
        }
        let got: Vec<u64> = res.neighbors.iter().map(|n| n.record_id).collect();
        prop_assert_eq!(got, oracle::filtered_knn(&recs, me.embedding.as_slice(), me.id, &caption, k));
        prop_assert_eq!(res.k_returned, res.neighbors.len());
    }

    #[test]
    fn index_bytes_round_trip(rows in corpus_strategy(5), ivf in any::<bool>()) {
        let recs = records(&rows);
        prop_assume!(!recs.is_empty());
        let cfg = if ivf && recs.len() >= 3 { IndexConfig::ivf(5, 3, 2, 7) } else { IndexConfig::exact(5) };
        let index = Index::build(recs, cfg).unwrap();
        let bytes = index.to_bytes();
        prop_assert_eq!(Index::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}
