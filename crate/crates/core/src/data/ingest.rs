//! Building datasets from SAE decoders and from contrastive topic prompts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pool, Dataset, DatasetBuilder, Origin, RecordMeta, VectorBank};
use crate::error::{Error, Result};
use crate::lm::{extract_activation, FrozenLm, PositionRule};

/// One decoder row per latent, unit-normalized, labelled from `labels`
/// (keyed by row index). Record ids are the row indices.
pub fn ingest_sae(decoder: &VectorBank, labels: &BTreeMap<usize, String>, layer: usize) -> Result<Dataset> {
    let unknown: Vec<String> = labels
        .keys()
        .filter(|&&k| k >= decoder.n)
        .map(|k| k.to_string())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownIds { ids: unknown });
    }
    let missing: Vec<String> = (0..decoder.n)
        .filter(|i| !labels.contains_key(i))
        .map(|i| i.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("latents without a label: {}", missing.join(", "))));
    }
    let mut b = DatasetBuilder::new(decoder.d);
    for i in 0..decoder.n {
        let row: Vec<f64> = decoder.row(i).iter().map(|&x| x as f64).collect();
        let meta = RecordMeta {
            id: i.to_string(),
            layer,
            labels: vec![labels[&i].clone()],
            origin: Origin::SaeDecoder,
            extras: [("latent".to_string(), serde_json::json!(i))].into(),
        };
        b.push(meta, &row, 0.0)?;
    }
    b.finish()
}

/// Topic-file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub original_title: String,
    pub prompt: String,
    pub labels: Vec<String>,
}

pub fn read_topics(path: impl AsRef<Path>) -> Result<Vec<Topic>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Contrastive vectors plus the per-layer means that were subtracted.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrastive {
    pub dataset: Dataset,
    pub means: BTreeMap<usize, Vec<f64>>,
}

/// `normalize(h_raw - mean over all topics)` for each topic's final token.
pub fn extract_contrastive(lm: &dyn FrozenLm, topics: &[Topic], layer: usize) -> Result<Contrastive> {
    let (dataset, mean) = contrastive_layer(lm, topics, layer, false)?;
    Ok(Contrastive {
        dataset,
        means: [(layer, mean)].into(),
    })
}

/// Contrastive extraction at several layers, pooled. Means are per layer and
/// record ids carry an `@layer` suffix.
pub fn extract_contrastive_pooled(lm: &dyn FrozenLm, topics: &[Topic], layers: &[usize]) -> Result<Contrastive> {
    let mut parts = Vec::with_capacity(layers.len());
    let mut means = BTreeMap::new();
    for &layer in layers {
        let (ds, mean) = contrastive_layer(lm, topics, layer, true)?;
        parts.push(ds);
        means.insert(layer, mean);
    }
    Ok(Contrastive {
        dataset: pool(&parts)?,
        means,
    })
}

fn contrastive_layer(lm: &dyn FrozenLm, topics: &[Topic], layer: usize, suffix: bool) -> Result<(Dataset, Vec<f64>)> {
    if topics.len() < 2 {
        return Err(Error::invalid("contrastive extraction needs at least two topics"));
    }
    let raw: Vec<Vec<f64>> = topics
        .iter()
        .map(|t| extract_activation(lm, &t.prompt, layer, PositionRule::FinalToken))
        .collect::<Result<_>>()?;
    let d = raw[0].len();
    let mut mean = vec![0.0; d];
    for v in &raw {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= raw.len() as f64);
    let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut b = DatasetBuilder::new(d);
    for (i, (t, h)) in topics.iter().zip(&raw).enumerate() {
        let centered: Vec<f64> = h.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let raw_norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        let id = if suffix {
            format!("topic-{i}@{layer}")
        } else {
            format!("topic-{i}")
        };
        let meta = RecordMeta {
            id,
            layer,
            labels: t.labels.clone(),
            origin: Origin::ContrastiveTopic,
            extras: [
                ("title".to_string(), serde_json::json!(t.original_title)),
                ("activation_norm".to_string(), serde_json::json!(raw_norm)),
            ]
            .into(),
        };
        b.push(meta, &centered, raw_norm.max(mean_norm))?;
    }
    Ok((b.finish()?, mean))
}

/// Layers `L/4 ..= 3L/4 - 1`, the middle half of an `L`-layer model.
pub fn middle_half_layers(layers: usize) -> Vec<usize> {
    (layers / 4..(3 * layers) / 4).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ToyLm;
    use approx::assert_relative_eq;

    #[test]
    fn sae_rows_normalized() {
        let bank = VectorBank::new(2, 2, vec![3.0, 4.0, 0.0, 5.0]).unwrap();
        let labels: BTreeMap<usize, String> = [(0, "a".into()), (1, "b".into())].into();
        let ds = ingest_sae(&bank, &labels, 12).unwrap();
        assert_eq!(ds.vector(0), &[0.6f32, 0.8]);
        assert_eq!(ds.vector(1), &[0.0f32, 1.0]);
        assert_eq!(ds.records()[0].extras["raw_norm"], serde_json::json!(5.0));
        assert_eq!(ds.records()[1].origin, Origin::SaeDecoder);
    }

    #[test]
    fn sae_zero_row_named() {
        let bank = VectorBank::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let labels: BTreeMap<usize, String> = (0..3).map(|i| (i, "x".to_string())).collect();
        match ingest_sae(&bank, &labels, 0) {
            Err(Error::DegenerateVectors { ids }) => assert_eq!(ids, vec!["1"]),
            other => panic!("{other:?}"),
        }
    }

    fn topic(prompt: &str) -> Topic {
        Topic {
            original_title: prompt.into(),
            prompt: prompt.into(),
            labels: vec!["l".into()],
        }
    }

    #[test]
    fn two_topics_are_antipodal() {
        let lm = ToyLm::echo(8, 8, 0).unwrap();
        let c = extract_contrastive(&lm, &[topic("w4"), topic("w5")], 1).unwrap();
        let e1 = lm.embedding_row(4);
        let e2 = lm.embedding_row(5);
        let diff: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| (a - b) / 2.0).collect();
        let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..8 {
            assert_relative_eq!(c.dataset.vector(0)[j] as f64, diff[j] / n, epsilon = 1e-6);
            assert_relative_eq!(c.dataset.vector(1)[j] as f64, -diff[j] / n, epsilon = 1e-6);
        }
    }

    #[test]
    fn centered_vectors_sum_to_zero_and_identical_prompts_fail() {
        let lm = ToyLm::echo(10, 6, 1).unwrap();
        let topics = [topic("w4"), topic("w5 w6"), topic("w7 w8 w9")];
        let c = extract_contrastive(&lm, &topics, 0).unwrap();
        let mut sum = vec![0.0; 6];
        for (i, r) in c.dataset.records().iter().enumerate() {
            let norm = r.extras["raw_norm"].as_f64().unwrap();
            for (s, &x) in sum.iter_mut().zip(c.dataset.vector(i)) {
                *s += x as f64 * norm;
            }
        }
        assert!(sum.iter().all(|s| s.abs() < 1e-6), "{sum:?}");
        assert!(matches!(
            extract_contrastive(&lm, &[topic("w4"), topic("w4")], 0),
            Err(Error::DegenerateVectors { .. })
        ));
        assert!(extract_contrastive(&lm, &[topic("w4")], 0).is_err());
    }

    #[test]
    fn pooled_count_is_topics_times_layers() {
        let lm = ToyLm::new(
            crate::lm::ToyVariant::Echo,
            &crate::lm::ToyLmConfig {
                vocab_size: 10,
                d: 6,
                layers: 28,
                tau: 1.0,
                seed: 0,
                words: None,
            },
        )
        .unwrap();
        let layers = middle_half_layers(28);
        assert_eq!(layers, (7..21).collect::<Vec<_>>());
        let topics = [topic("w4"), topic("w5"), topic("w6 w7")];
        let c = extract_contrastive_pooled(&lm, &topics, &layers).unwrap();
        assert_eq!(c.dataset.len(), 3 * 14);
        assert_eq!(c.means.len(), 14);
        assert_eq!(c.dataset.records()[3].layer, 8);
    }
}
