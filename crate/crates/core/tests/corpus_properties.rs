mod oracle;

use proptest::prelude::*;
use ragcap_core::corpus::{build_interleaved, duplicate_caption_ratio, CaptionEmbeddings, InterleaveConfig};
use ragcap_core::{normalize, Corpus, EmbeddingVector, ImageTextRecord};

fn unit(v: &[i8]) -> Option<EmbeddingVector> {
    normalize(&v.iter().map(|x| f32::from(*x)).collect::<Vec<_>>()).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_matches_recount(caps in prop::collection::vec(prop::sample::select(vec!["a", "a ", "b", "c", "d e", "d  e", "B"]), 1..60)) {
        let recs: Vec<ImageTextRecord> = caps
            .iter()
            .enumerate()
            .map(|(i, c)| ImageTextRecord::new(i as u64, "x", *c, normalize(&[1.0, i as f32]).unwrap()))
            .collect();
        let report = duplicate_caption_ratio(&Corpus::new(recs).unwrap()).unwrap();
        let owned: Vec<String> = caps.iter().map(|s| s.to_string()).collect();
        prop_assert_eq!(report.ratio, oracle::dedup_ratio(&owned));
    }

    #[test]
    fn interleave_matches_two_step_oracle(
        rows in prop::collection::vec((prop::collection::vec(-3i8..=3, 4), prop::collection::vec(-3i8..=3, 4)), 5..30),
        shots in 1usize..5,
        lo in 0.0f64..0.5,
        width in 0.05f64..0.5,
    ) {
        let mut recs = Vec::new();
        let mut caps = Vec::new();
        for (i, (img, cap)) in rows.iter().enumerate() {
            if let (Some(e), Some(c)) = (unit(img), unit(cap)) {
                recs.push(ImageTextRecord::new(100 - i as u64, format!("i{i}"), format!("c{i}"), e));
                caps.push(c);
            }
        }
        prop_assume!(recs.len() > shots);
        let cfg = InterleaveConfig { band_low: lo, band_high: (lo + width).min(1.0), shots, widen_step: 0.05, widen_limit: 0.2 };
        let corpus = Corpus::new(recs.clone()).unwrap();
        let out = build_interleaved(&corpus, &cfg, CaptionEmbeddings::Supplied(&caps)).unwrap();
        let cap_rows: Vec<Vec<f32>> = caps.iter().map(|c| c.as_slice().to_vec()).collect();
        let want = oracle::interleave(&recs, &cap_rows, (cfg.band_low, cfg.band_high), shots, 0.05, 0.2);
        prop_assert_eq!(out.samples.len(), want.len());
        prop_assert_eq!(out.samples.len() + out.skipped.len(), recs.len());
        for (s, w) in out.samples.iter().zip(&want) {
            prop_assert_eq!(s.query.id, w.query);
            prop_assert_eq!(s.shots.iter().map(|p| p.id).collect::<Vec<_>>(), w.shots.clone());
            prop_assert!((s.band_used.0 - w.band.0).abs() < 1e-12 && (s.band_used.1 - w.band.1).abs() < 1e-12);
            let mut ids: Vec<u64> = s.shots.iter().map(|p| p.id).chain([s.query.id]).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), shots + 1);
        }
    }
}
