//! Synthetic vector-label tasks with known structure, for toy backends.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetBuilder, Origin, RecordMeta};
use crate::error::{Error, Result};
use crate::lm::tokenizer::{TokenId, TOY_RESERVED};
use crate::lm::ToyLm;

/// Haar-distributed orthogonal `d x d` matrix.
pub fn random_rotation(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix column signs so the distribution is uniform
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Word tokens of a toy backend (every id past the reserved ones).
pub fn word_classes(lm: &ToyLm) -> Vec<TokenId> {
    (TOY_RESERVED as TokenId..lm.readout().nrows() as TokenId).collect()
}

/// Rotated-readout recovery task: `h = normalize(R^T e_y + noise)`.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub rotation: DMatrix<f64>,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_train: 4096,
            n_val: 512,
            sigma: 0.05,
            seed: 0,
        }
    }
}

pub fn planted_rotation(lm: &ToyLm, spec: &PlantedSpec) -> Result<PlantedTask> {
    let d = lm.readout().ncols();
    let classes = word_classes(lm);
    if classes.is_empty() {
        return Err(Error::invalid("backend has no word tokens"));
    }
    let rotation = random_rotation(d, spec.seed ^ 0x5e_ed0f_7a7e);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |n: usize, prefix: &str| -> Result<Dataset> {
        let mut b = DatasetBuilder::new(d);
        for i in 0..n {
            let y = classes[rng.random_range(0..classes.len())];
            let e = DVector::from_vec(lm.readout_row(y));
            let mut h = rotation.transpose() * e;
            h.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            let meta = RecordMeta {
                id: format!("{prefix}{i}"),
                layer: 0,
                labels: vec![piece(lm, y)],
                origin: Origin::Synthetic,
                extras: [("class".to_string(), serde_json::json!(y))].into(),
            };
            b.push(meta, h.as_slice(), 1.0)?;
        }
        b.finish()
    };
    let train = make(spec.n_train, "train-")?;
    let val = make(spec.n_val, "val-")?;
    Ok(PlantedTask { rotation, train, val })
}

fn piece(lm: &ToyLm, y: TokenId) -> String {
    lm.toy_tokenizer().piece(y).expect("class id in vocabulary").to_string()
}

/// Inputs drawn from a `k`-dimensional subspace (isotropic when `k = d`),
/// labelled by a fixed random linear teacher read through the backend's
/// readout, with a fraction of labels replaced uniformly at random.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub intrinsic_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub label_noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub train: Dataset,
    pub val: Dataset,
}

pub fn teacher_task(lm: &ToyLm, spec: &TeacherSpec) -> Result<TeacherTask> {
    let d = lm.readout().ncols();
    let k = spec.intrinsic_dim;
    if k == 0 || k > d {
        return Err(Error::invalid(format!("intrinsic dimension {k} not in 1..={d}")));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(Error::invalid("label noise must be in [0, 1]"));
    }
    let classes = word_classes(lm);
    let basis = random_rotation(d, spec.seed ^ 0xba5e).columns(0, k).into_owned();
    let teacher = random_rotation(d, spec.seed ^ 0x7ea_c4e7);
    let readout = lm.readout();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |n: usize, prefix: &str| -> Result<Dataset> {
        let mut b = DatasetBuilder::new(d);
        for i in 0..n {
            let z = DVector::<f64>::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            let h = &basis * z;
            let h = &h / h.norm();
            let scores = readout * (&teacher * &h);
            let mut y = *classes
                .iter()
                .max_by(|&&a, &&b| scores[a as usize].total_cmp(&scores[b as usize]).then(b.cmp(&a)))
                .expect("non-empty classes");
            if rng.random::<f64>() < spec.label_noise {
                y = classes[rng.random_range(0..classes.len())];
            }
            let meta = RecordMeta {
                id: format!("{prefix}{i}"),
                layer: 0,
                labels: vec![piece(lm, y)],
                origin: Origin::Synthetic,
                extras: [("class".to_string(), serde_json::json!(y))].into(),
            };
            b.push(meta, h.as_slice(), 1.0)?;
        }
        b.finish()
    };
    let train = make(spec.n_train, "train-")?;
    let val = make(spec.n_val, "val-")?;
    Ok(TeacherTask { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_is_orthogonal() {
        let r = random_rotation(7, 3);
        let i = r.transpose() * &r;
        for a in 0..7 {
            for b in 0..7 {
                assert_relative_eq!(i[(a, b)], (a == b) as u8 as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn planted_task_oracle_recovers_labels() {
        let lm = ToyLm::echo(16, 16, 0).unwrap();
        let task = planted_rotation(
            &lm,
            &PlantedSpec {
                n_train: 50,
                n_val: 10,
                sigma: 0.05,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(task.train.len(), 50);
        for i in 0..task.train.len() {
            let h = DVector::from_vec(task.train.vector_f64(i));
            let scores = lm.readout() * (&task.rotation * h);
            let best = scores.argmax().0 as TokenId;
            let want = task.train.records()[i].extras["class"].as_u64().unwrap() as TokenId;
            assert_eq!(best, want);
        }
    }

    #[test]
    fn teacher_subspace_rank() {
        let lm = ToyLm::echo(16, 16, 0).unwrap();
        let t = teacher_task(
            &lm,
            &TeacherSpec {
                intrinsic_dim: 3,
                n_train: 40,
                n_val: 5,
                label_noise: 0.1,
                seed: 2,
            },
        )
        .unwrap();
        let cum = crate::data::pca_cumulative_variance(&t.train).unwrap();
        assert!((cum[2] - 1.0).abs() < 1e-6 || cum[3] - cum[2] < 1e-6, "{cum:?}");
    }
}
