//! Adapter training against a frozen backend.

pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{Adapter, AdapterInit, AdapterKind, Params};
use crate::data::{Dataset, LabelFormat};
use crate::error::{Error, Result};
use crate::lm::{loss_with_injection, FrozenLm, InjectionSpec, RenderedTemplate, TargetTemplate, TokenId};

pub use optim::{clip_global_norm, AdamW, AdamWConfig, CosineSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    #[default]
    ReshuffleEachEpoch,
    FixedOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub alpha_init: f64,
    pub seed: u64,
    pub shuffle_mode: ShuffleMode,
    /// Validation passes per epoch.
    pub val_per_epoch: usize,
    pub label_format: LabelFormat,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            min_learning_rate: 0.0,
            batch_size: 256,
            epochs: 1,
            weight_decay: 0.01,
            warmup_steps: 10,
            grad_clip_norm: 0.5,
            alpha_init: 5.0,
            seed: 42,
            shuffle_mode: ShuffleMode::ReshuffleEachEpoch,
            val_per_epoch: 8,
            label_format: LabelFormat::QuoteEot,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return Err(Error::invalid("min_learning_rate must lie in [0, learning_rate]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.val_per_epoch == 0 {
            return Err(Error::invalid("batch_size, epochs and val_per_epoch must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Hex digest of the serialized config, stored in checkpoint headers.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of `curve.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurvePoint {
    Train {
        step: usize,
        epoch: usize,
        loss: f64,
        lr: f64,
        grad_norm_pre: f64,
        grad_norm_post: f64,
    },
    Val {
        step: usize,
        epoch: usize,
        split: String,
        loss: f64,
    },
}

/// Wall-clock stamp for a step, kept apart from the curve so the curve stays
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub step: usize,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
    pub timing: Vec<TimingPoint>,
}

impl LossCurve {
    pub fn to_jsonl(&self) -> String {
        jsonl(&self.points)
    }

    pub fn timing_jsonl(&self) -> String {
        jsonl(&self.timing)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.points
            .iter()
            .filter_map(|p| match p {
                CurvePoint::Train { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn val_losses(&self) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter_map(|p| match p {
                CurvePoint::Val { step, loss, .. } => Some((*step, *loss)),
                _ => None,
            })
            .collect()
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("row serializes"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_adapter: Adapter,
    pub best_adapter: Adapter,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub final_val_loss: f64,
    /// Mean loss over the whole training split with the final adapter.
    pub final_train_loss: f64,
    pub curve: LossCurve,
    pub backend_checksum: String,
    pub steps: usize,
}

/// A tokenized training pair.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub h: Vec<f64>,
    pub tokens: Vec<TokenId>,
}

pub(crate) fn examples(lm: &dyn FrozenLm, ds: &Dataset, format: LabelFormat) -> Result<Vec<Example>> {
    let d = lm.info().dims.d();
    if ds.d() != d {
        return Err(Error::Dimension {
            expected: d,
            got: ds.d(),
        });
    }
    let tok = lm.tokenizer();
    ds.pairs()
        .into_iter()
        .map(|(i, j)| {
            let text = format.apply(&ds.records()[i].labels[j])?;
            let tokens = tok.encode(&text);
            if tokens.is_empty() {
                return Err(Error::EmptyLabel);
            }
            Ok(Example {
                h: ds.vector_f64(i),
                tokens,
            })
        })
        .collect()
}

/// Examples processed sequentially within a chunk; chunk sums are then added
/// in index order so results do not depend on the thread count.
const CHUNK: usize = 16;

fn example_loss_grad(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    ex: &Example,
) -> Result<(f64, Params<f64>)> {
    let out = adapter.apply(&ex.h)?;
    let l = loss_with_injection(lm, template, &InjectionSpec::new(out, 1.0), &ex.tokens)?;
    let g = adapter.gradients(&ex.h, &l.grad)?;
    Ok((l.loss, g))
}

/// Mean loss and gradient over `batch`.
fn batch_loss_grad(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    batch: &[&Example],
) -> Result<(f64, Params<f64>)> {
    let chunk_sum = |chunk: &[&Example]| -> Result<(f64, Params<f64>)> {
        let mut loss = 0.0;
        let mut grad = Params::<f64>::zeros_like(adapter.params());
        for ex in chunk {
            let (l, g) = example_loss_grad(adapter, lm, template, ex)?;
            loss += l;
            grad.add_assign(&g);
        }
        Ok((loss, grad))
    };
    let parts: Vec<(f64, Params<f64>)> = if lm.info().capabilities.concurrent_safe {
        batch.par_chunks(CHUNK).map(chunk_sum).collect::<Result<_>>()?
    } else {
        batch.chunks(CHUNK).map(chunk_sum).collect::<Result<_>>()?
    };
    let mut loss = 0.0;
    let mut grad = Params::<f64>::zeros_like(adapter.params());
    for (l, g) in &parts {
        loss += l;
        grad.add_assign(g);
    }
    let n = batch.len() as f64;
    grad.scale_in_place(1.0 / n);
    Ok((loss / n, grad))
}

fn mean_loss(adapter: &Adapter, lm: &dyn FrozenLm, template: &RenderedTemplate, exs: &[Example]) -> Result<f64> {
    if exs.is_empty() {
        return Err(Error::invalid("cannot validate on an empty dataset"));
    }
    let chunk_sum = |chunk: &[Example]| -> Result<f64> {
        chunk.iter().try_fold(0.0, |acc, ex| {
            let out = adapter.apply(&ex.h)?;
            Ok(acc + loss_with_injection(lm, template, &InjectionSpec::new(out, 1.0), &ex.tokens)?.loss)
        })
    };
    let parts: Vec<f64> = if lm.info().capabilities.concurrent_safe {
        exs.par_chunks(CHUNK).map(chunk_sum).collect::<Result<_>>()?
    } else {
        exs.chunks(CHUNK).map(chunk_sum).collect::<Result<_>>()?
    };
    Ok(parts.iter().sum::<f64>() / exs.len() as f64)
}

/// Mean teacher-forced loss over every (vector, label) pair at external scale 1.
pub fn validate(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &TargetTemplate,
    ds: &Dataset,
    format: LabelFormat,
) -> Result<f64> {
    let rendered = template.render(lm)?;
    mean_loss(adapter, lm, &rendered, &examples(lm, ds, format)?)
}

/// Order in which the flattened pairs are visited during `epoch`.
pub fn epoch_order(n: usize, epoch: usize, seed: u64, mode: ShuffleMode) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let stream = match mode {
        ShuffleMode::ReshuffleEachEpoch => epoch as u64,
        ShuffleMode::FixedOrder => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    order.shuffle(&mut rng);
    order
}

/// Steps (0-based, within an epoch) after which validation runs.
fn val_steps(steps_per_epoch: usize, per_epoch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=per_epoch)
        .map(|k| (k * steps_per_epoch).div_ceil(per_epoch).max(1) - 1)
        .collect();
    out.dedup();
    out
}

fn to_f64(p: &Params<f32>) -> Params<f64> {
    let c = |v: &Vec<f32>| v.iter().map(|&x| x as f64).collect();
    Params {
        alpha: c(&p.alpha),
        bias: c(&p.bias),
        u: c(&p.u),
        v: c(&p.v),
        w: c(&p.w),
    }
}

fn to_f32(p: &Params<f64>) -> Params<f32> {
    let c = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect();
    Params {
        alpha: c(&p.alpha),
        bias: c(&p.bias),
        u: c(&p.u),
        v: c(&p.v),
        w: c(&p.w),
    }
}

/// Train `adapter` on `train`, validating on `val`.
///
/// Parameters are kept in `f64` during optimization and rounded to `f32`
/// for every forward pass and snapshot.
pub fn train(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &TargetTemplate,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = lm.info().dims.d();
    if adapter.dims().d() != d {
        return Err(Error::Dimension {
            expected: d,
            got: adapter.dims().d(),
        });
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let train_ids: std::collections::BTreeSet<&str> = train_set.ids().collect();
    let overlap: Vec<String> = val_set
        .ids()
        .filter(|id| train_ids.contains(id))
        .map(String::from)
        .collect();
    if !overlap.is_empty() {
        return Err(Error::invalid(format!(
            "train and validation sets share ids: {}",
            overlap.join(", ")
        )));
    }

    let checksum = lm.weights_checksum();
    let started = Instant::now();
    let rendered = template.render(lm)?;
    let train_ex = examples(lm, train_set, cfg.label_format)?;
    let val_ex = examples(lm, val_set, cfg.label_format)?;

    let kind = adapter.kind();
    let dims = adapter.dims();
    let mut master = to_f64(adapter.params());
    let mut current = adapter.clone();
    let mut opt = AdamW::new(cfg.adamw(), &master);

    let steps_per_epoch = train_ex.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let schedule = CosineSchedule {
        peak: cfg.learning_rate,
        floor: cfg.min_learning_rate,
        warmup: cfg.warmup_steps,
        total,
    };
    let val_at = val_steps(steps_per_epoch, cfg.val_per_epoch);

    let mut curve = LossCurve::default();
    let mut best = (f64::INFINITY, 0usize, current.clone());
    let mut last_val = f64::NAN;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train_ex.len(), epoch, cfg.seed, cfg.shuffle_mode);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_ex[i]).collect();
            let (loss, mut grad) = batch_loss_grad(&current, lm, &rendered, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NanLoss { step });
            }
            let (pre, post) = clip_global_norm(&mut grad, cfg.grad_clip_norm);
            let lr = schedule.lr(step);
            opt.step(&mut master, &grad, lr);
            let rounded = to_f32(&master);
            if rounded.iter().any(|x| !x.is_finite()) {
                return Err(Error::NanLoss { step });
            }
            current = Adapter::from_params(kind, dims, rounded)?;
            curve.points.push(CurvePoint::Train {
                step,
                epoch,
                loss,
                lr,
                grad_norm_pre: pre,
                grad_norm_post: post,
            });
            curve.timing.push(TimingPoint {
                step,
                elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            if val_at.binary_search(&b).is_ok() {
                let v = mean_loss(&current, lm, &rendered, &val_ex)?;
                if !v.is_finite() {
                    return Err(Error::NanLoss { step });
                }
                curve.points.push(CurvePoint::Val {
                    step,
                    epoch,
                    split: "val".into(),
                    loss: v,
                });
                if v < best.0 {
                    best = (v, step, current.clone());
                }
                last_val = v;
            }
            step += 1;
        }
    }
    let final_train_loss = mean_loss(&current, lm, &rendered, &train_ex)?;
    if lm.weights_checksum() != checksum {
        return Err(Error::BackendMutated);
    }
    Ok(TrainOutcome {
        final_adapter: current,
        best_adapter: best.2,
        best_val_loss: best.0,
        best_step: best.1,
        final_val_loss: last_val,
        final_train_loss,
        curve,
        backend_checksum: checksum,
        steps: step,
    })
}

/// One row of an architecture comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arch: String,
    pub kind: AdapterKind,
    pub params: usize,
    /// Best validation loss seen during training.
    pub val_loss: f64,
    pub final_val_loss: f64,
    pub train_loss: f64,
    /// `final_val_loss - train_loss`.
    pub gap: f64,
    /// `val_loss` minus the Identity adapter's validation loss.
    pub delta: f64,
}

/// Train each kind on shared data and tabulate, ordered from least to most
/// expressive.
pub fn architecture_sweep(
    kinds: &[AdapterKind],
    lm: &dyn FrozenLm,
    template: &TargetTemplate,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let dims = lm.info().dims;
    let identity = Adapter::identity(dims);
    let identity_val = validate(&identity, lm, template, val_set, cfg.label_format)?;
    let mut sorted = kinds.to_vec();
    sorted.sort_by_key(|k| k.table_order());
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for kind in sorted {
        let init = Adapter::init(
            kind,
            dims,
            &AdapterInit {
                alpha0: cfg.alpha_init,
                seed: cfg.seed,
            },
        )?;
        let (val_loss, final_val, train_loss) = if kind == AdapterKind::Identity {
            let t = validate(&init, lm, template, train_set, cfg.label_format)?;
            (identity_val, identity_val, t)
        } else {
            let out = train(&init, lm, template, train_set, val_set, cfg)?;
            (out.best_val_loss, out.final_val_loss, out.final_train_loss)
        };
        rows.push(SweepRow {
            arch: kind.to_string(),
            kind,
            params: kind.parameter_count(dims.d()),
            val_loss,
            final_val_loss: final_val,
            train_loss,
            gap: final_val - train_loss,
            delta: val_loss - identity_val,
        });
    }
    Ok(rows)
}

/// `arch,params,val_loss,delta` CSV of a sweep.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("arch,params,val_loss,delta,final_val_loss,train_loss,gap\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.arch, r.params, r.val_loss, r.delta, r.final_val_loss, r.train_loss, r.gap
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::ModelDims;
    use crate::data::synth::{planted_rotation, PlantedSpec};
    use crate::data::{DatasetBuilder, Origin, RecordMeta};
    use crate::lm::ToyLm;

    fn small_task() -> (ToyLm, Dataset, Dataset) {
        let lm = ToyLm::echo(12, 8, 0).unwrap();
        let t = planted_rotation(
            &lm,
            &PlantedSpec {
                n_train: 200,
                n_val: 40,
                sigma: 0.05,
                seed: 3,
            },
        )
        .unwrap();
        (lm, t.train, t.val)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs: 3,
            label_format: LabelFormat::Raw,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn val_cadence() {
        assert_eq!(val_steps(16, 8), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(val_steps(3, 8), vec![0, 1, 2]);
        assert_eq!(val_steps(1, 8), vec![0]);
    }

    #[test]
    fn shuffle_modes() {
        let a0 = epoch_order(50, 0, 1, ShuffleMode::ReshuffleEachEpoch);
        let a1 = epoch_order(50, 1, 1, ShuffleMode::ReshuffleEachEpoch);
        assert_ne!(a0[..10], a1[..10]);
        let f0 = epoch_order(50, 0, 1, ShuffleMode::FixedOrder);
        let f1 = epoch_order(50, 1, 1, ShuffleMode::FixedOrder);
        assert_eq!(f0, f1);
    }

    #[test]
    fn rerun_is_bit_identical_and_backend_untouched() {
        let (lm, tr, va) = small_task();
        let init = Adapter::init(AdapterKind::FullRank, ModelDims::new(8).unwrap(), &AdapterInit::default()).unwrap();
        let before = lm.weights_checksum();
        let a = train(&init, &lm, &TargetTemplate::default(), &tr, &va, &cfg()).unwrap();
        let b = train(&init, &lm, &TargetTemplate::default(), &tr, &va, &cfg()).unwrap();
        assert_eq!(a.curve.to_jsonl(), b.curve.to_jsonl());
        assert_eq!(a.final_adapter, b.final_adapter);
        assert_eq!(lm.weights_checksum(), before);
        assert_eq!(a.backend_checksum, before);
        assert!(a.final_adapter.is_finite());
        let losses = a.curve.train_losses();
        assert!(a.final_train_loss < losses[0], "{} vs {:?}", a.final_train_loss, losses);
    }

    #[test]
    fn clipping_is_recorded() {
        let (lm, tr, va) = small_task();
        let init = Adapter::init(AdapterKind::ScalarAffine, ModelDims::new(8).unwrap(), &AdapterInit::default()).unwrap();
        let out = train(&init, &lm, &TargetTemplate::default(), &tr, &va, &cfg()).unwrap();
        let mut clipped = 0;
        for p in &out.curve.points {
            if let CurvePoint::Train {
                grad_norm_pre,
                grad_norm_post,
                ..
            } = p
            {
                if *grad_norm_pre > 0.5 {
                    clipped += 1;
                    assert!((grad_norm_post - 0.5).abs() <= 1e-6);
                } else {
                    assert_eq!(grad_norm_pre, grad_norm_post);
                }
            }
        }
        assert!(clipped > 0);
    }

    /// Backend whose readout rows are the first `v` basis vectors of R^d.
    fn basis_lm(v: usize, d: usize) -> ToyLm {
        let readout = nalgebra::DMatrix::<f64>::from_fn(v, d, |i, j| (i == j) as u8 as f64);
        ToyLm::from_parts(
            crate::lm::ToyVariant::Echo,
            crate::lm::ToyTokenizer::numbered(v).unwrap(),
            readout.clone(),
            readout,
            1.0,
            2,
        )
        .unwrap()
    }

    fn constant_set(prefix: &str, h: &[f64], label: &str, n: usize) -> Dataset {
        let mut b = DatasetBuilder::new(h.len());
        for i in 0..n {
            b.push(
                RecordMeta {
                    id: format!("{prefix}{i}"),
                    layer: 0,
                    labels: vec![label.into()],
                    origin: Origin::Synthetic,
                    extras: Default::default(),
                },
                h,
                1.0,
            )
            .unwrap();
        }
        b.finish().unwrap()
    }

    #[test]
    fn zero_gradient_data_keeps_alpha() {
        // h is orthogonal to every readout row, so dL/dalpha = <upstream, h> = 0 exactly
        let lm = basis_lm(4, 8);
        let mut h = vec![0.0; 8];
        h[6] = 1.0;
        let init = Adapter::scale_only(ModelDims::new(8).unwrap(), 5.0);
        let out = train(
            &init,
            &lm,
            &TargetTemplate::default(),
            &constant_set("t", &h, "<unk>", 4),
            &constant_set("v", &h, "<unk>", 2),
            &cfg(),
        )
        .unwrap();
        assert_eq!(out.final_adapter.alpha(), Some(5.0));
    }

    #[test]
    fn sweep_rows() {
        let (lm, tr, va) = small_task();
        let kinds = [
            AdapterKind::FullRank,
            AdapterKind::Identity,
            AdapterKind::ScalarAffine,
            AdapterKind::LowRankOnly { rank: 2 },
        ];
        let rows = architecture_sweep(&kinds, &lm, &TargetTemplate::default(), &tr, &va, &cfg()).unwrap();
        assert_eq!(rows[0].kind, AdapterKind::Identity);
        assert_eq!(rows[0].delta, 0.0);
        for r in &rows {
            assert_eq!(r.params, r.kind.parameter_count(8));
        }
        assert!(sweep_csv(&rows).starts_with("arch,params,val_loss,delta"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (lm, tr, va) = small_task();
        let wrong = Adapter::identity(ModelDims::new(4).unwrap());
        assert!(matches!(
            train(&wrong, &lm, &TargetTemplate::default(), &tr, &va, &cfg()),
            Err(Error::Dimension { .. })
        ));
        let init = Adapter::identity(ModelDims::new(8).unwrap());
        assert!(train(&init, &lm, &TargetTemplate::default(), &tr, &tr, &cfg()).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        };
        assert!(train(&init, &lm, &TargetTemplate::default(), &tr, &va, &bad).is_err());
    }

    #[test]
    fn nan_aborts_with_step() {
        let (lm, tr, va) = small_task();
        let init = Adapter::init(AdapterKind::ScalarAffine, ModelDims::new(8).unwrap(), &AdapterInit::default()).unwrap();
        let huge = TrainConfig {
            learning_rate: 1e300,
            warmup_steps: 0,
            ..cfg()
        };
        match train(&init, &lm, &TargetTemplate::default(), &tr, &va, &huge) {
            Err(Error::NanLoss { step }) => assert!(step <= 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn untrained_identity_on_zero_information_vectors() {
        let lm = basis_lm(4, 8);
        let mut h = vec![0.0; 8];
        h[5] = 0.6;
        h[7] = 0.8;
        let ds = constant_set("z", &h, "\"", 3);
        let id = Adapter::identity(ModelDims::new(8).unwrap());
        let l = validate(&id, &lm, &TargetTemplate::default(), &ds, LabelFormat::Raw).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12, "{l}");
        assert_eq!(l, validate(&id, &lm, &TargetTemplate::default(), &ds, LabelFormat::Raw).unwrap());
    }
}
