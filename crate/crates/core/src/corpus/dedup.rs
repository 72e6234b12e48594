use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};

const TOP_GROUPS: usize = 10;

/// How many records share their normalized caption with another record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub total: usize,
    /// Records whose normalized caption occurs at least twice.
    pub duplicated: usize,
    pub ratio: f64,
    /// Largest caption groups, by count then caption.
    pub top_groups: Vec<(String, usize)>,
}

pub fn duplicate_caption_ratio(corpus: &Corpus) -> Result<DedupReport, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut groups: HashMap<&str, usize> = HashMap::new();
    for r in &corpus.records {
        *groups.entry(r.caption_norm.as_str()).or_default() += 1;
    }
    let duplicated = groups.values().filter(|c| **c >= 2).sum();
    let mut top: Vec<(String, usize)> = groups
        .into_iter()
        .filter(|(_, c)| *c >= 2)
        .map(|(s, c)| (s.to_string(), c))
        .collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top.truncate(TOP_GROUPS);
    let total = corpus.len();
    Ok(DedupReport { total, duplicated, ratio: duplicated as f64 / total as f64, top_groups: top })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_embed;
    use crate::index::ImageTextRecord;

    fn corpus(captions: &[&str]) -> Corpus {
        Corpus::new(
            captions
                .iter()
                .enumerate()
                .map(|(i, c)| ImageTextRecord::new(i as u64, "", *c, synth_embed(c, 8, 0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn half_duplicated() {
        let r = duplicate_caption_ratio(&corpus(&["a", "a", "b", "c"])).unwrap();
        assert_eq!(r.duplicated, 2);
        assert_eq!(r.ratio, 0.5);
        assert_eq!(r.top_groups, vec![("a".to_string(), 2)]);
    }

    #[test]
    fn all_distinct() {
        let r = duplicate_caption_ratio(&corpus(&["a", "b", "c"])).unwrap();
        assert_eq!(r.ratio, 0.0);
        assert!(r.top_groups.is_empty());
    }

    #[test]
    fn whitespace_variants_group_together() {
        let r = duplicate_caption_ratio(&corpus(&["a dog", " a  dog", "cat"])).unwrap();
        assert_eq!(r.duplicated, 2);
    }
}
