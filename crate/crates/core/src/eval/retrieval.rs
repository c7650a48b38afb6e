//! Embedding retrieval of topics from generated descriptions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text embedding function used by the retrieval index.
pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Bag of hashed character n-grams (FNV-1a), signed, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub n: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 4096, n: 3 }
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TextEmbedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let norm: String = text
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        let chars: Vec<char> = format!(" {norm} ").chars().collect();
        let mut v = vec![0.0; self.dim];
        if chars.len() >= self.n {
            for gram in chars.windows(self.n) {
                let s: String = gram.iter().collect();
                let h = fnv1a(s.bytes());
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v[(h % self.dim as u64) as usize] += sign;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Index document: the title followed by one `- ` bullet per description.
pub fn topic_document(title: &str, descriptions: &[String]) -> String {
    let mut s = title.to_string();
    for d in descriptions {
        s.push_str("\n- ");
        s.push_str(d);
    }
    s
}

/// One document per topic, searched by cosine similarity.
pub struct RetrievalIndex<'a> {
    embedder: &'a dyn TextEmbedder,
    keys: Vec<String>,
    position: BTreeMap<String, usize>,
    embeddings: Vec<Vec<f64>>,
}

impl<'a> RetrievalIndex<'a> {
    /// `topics` maps a topic key to its title and descriptions.
    pub fn build(embedder: &'a dyn TextEmbedder, topics: &[(String, String, Vec<String>)]) -> Result<Self> {
        let mut position = BTreeMap::new();
        let mut keys = Vec::with_capacity(topics.len());
        let mut embeddings = Vec::with_capacity(topics.len());
        for (key, title, descs) in topics {
            if position.insert(key.clone(), keys.len()).is_some() {
                return Err(Error::invalid(format!("duplicate topic {key}")));
            }
            keys.push(key.clone());
            embeddings.push(embedder.embed(&topic_document(title, descs)));
        }
        Ok(Self {
            embedder,
            keys,
            position,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.position.contains_key(key)
    }

    /// 1-based rank of `topic` among all documents for `query`. Equal
    /// similarities rank by index order.
    pub fn rank(&self, query: &str, topic: &str) -> Result<usize> {
        let t = *self
            .position
            .get(topic)
            .ok_or_else(|| Error::UnknownIds {
                ids: vec![topic.to_string()],
            })?;
        let q = self.embedder.embed(query);
        let sims: Vec<f64> = self.embeddings.iter().map(|e| cosine(&q, e)).collect();
        let target = sims[t];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s > target || (s == target && i < t))
            .count();
        Ok(ahead + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    /// `(k, recall@k)` in the order requested.
    pub recall_at: Vec<(usize, f64)>,
    pub mrr: f64,
}

pub fn rank_metrics(ranks: &[usize], ks: &[usize]) -> Result<RankMetrics> {
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to score"));
    }
    if ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    let n = ranks.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    Ok(RankMetrics { recall_at, mrr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub topic: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Rank of every candidate, per query.
    pub candidate_ranks: Vec<Vec<usize>>,
    /// Best (smallest) rank per query.
    pub ranks: Vec<usize>,
    pub metrics: RankMetrics,
}

/// Rank each query's candidates; best-of-N keeps the minimum rank.
pub fn retrieval_score(queries: &[RetrievalQuery], index: &RetrievalIndex<'_>, ks: &[usize]) -> Result<RetrievalResult> {
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !index.contains(&q.topic))
        .map(|q| q.topic.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnknownIds { ids: missing });
    }
    let mut candidate_ranks = Vec::with_capacity(queries.len());
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        if q.candidates.is_empty() {
            return Err(Error::invalid(format!("topic {} has no candidates", q.topic)));
        }
        let r: Vec<usize> = q
            .candidates
            .iter()
            .map(|c| index.rank(c, &q.topic))
            .collect::<Result<_>>()?;
        ranks.push(*r.iter().min().expect("non-empty"));
        candidate_ranks.push(r);
    }
    let metrics = rank_metrics(&ranks, ks)?;
    Ok(RetrievalResult {
        candidate_ranks,
        ranks,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn worked_metrics() {
        let m = rank_metrics(&[1, 5, 200], &[1, 100]).unwrap();
        assert_relative_eq!(m.recall_at[0].1, 1.0 / 3.0);
        assert_relative_eq!(m.recall_at[1].1, 2.0 / 3.0);
        assert_relative_eq!(m.mrr, (1.0 + 0.2 + 0.005) / 3.0);
        assert!((m.mrr - 0.4017).abs() < 1e-4);
    }

    #[test]
    fn document_layout() {
        assert_eq!(
            topic_document("Banana", &["a fruit".into(), "yellow".into()]),
            "Banana\n- a fruit\n- yellow"
        );
    }

    fn topics() -> Vec<(String, String, Vec<String>)> {
        vec![
            ("t0".into(), "Banana".into(), vec!["a long yellow fruit".into()]),
            ("t1".into(), "Volcano".into(), vec!["a mountain that erupts lava".into()]),
            ("t2".into(), "Chess".into(), vec!["a board game with kings and pawns".into()]),
        ]
    }

    #[test]
    fn identical_text_ranks_first() {
        let e = HashingEmbedder::default();
        let idx = RetrievalIndex::build(&e, &topics()).unwrap();
        let q = topic_document("Volcano", &["a mountain that erupts lava".into()]);
        assert_eq!(idx.rank(&q, "t1").unwrap(), 1);
        assert_eq!(idx.rank("board game pawns", "t2").unwrap(), 1);
        assert!(idx.rank("x", "nope").is_err());
    }

    #[test]
    fn best_of_n_uses_min_rank() {
        let e = HashingEmbedder::default();
        let idx = RetrievalIndex::build(&e, &topics()).unwrap();
        let r = retrieval_score(
            &[RetrievalQuery {
                topic: "t0".into(),
                candidates: vec!["lava mountain".into(), "yellow fruit banana".into()],
            }],
            &idx,
            &[1],
        )
        .unwrap();
        assert_eq!(r.ranks, vec![1]);
        assert!(r.candidate_ranks[0][0] > 1);
        let missing = retrieval_score(
            &[RetrievalQuery {
                topic: "zz".into(),
                candidates: vec!["a".into()],
            }],
            &idx,
            &[1],
        );
        assert!(matches!(missing, Err(Error::UnknownIds { .. })));
    }

    #[test]
    fn embedder_is_deterministic_and_normalized() {
        let e = HashingEmbedder::default();
        let a = e.embed("Hello   World");
        assert_eq!(a, e.embed("hello world"));
        assert_relative_eq!(a.iter().map(|x| x * x).sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(e.embed("").len(), 4096);
    }
}
