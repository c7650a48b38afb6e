//! Activation-to-embedding adapters.
//!
//! Six parameterizations of `f: R^d -> R^d`, ordered by expressivity:
//!
//! | kind                     | formula            | parameters   |
//! |--------------------------|--------------------|--------------|
//! | `Identity`               | `h`                | 0            |
//! | `ScaleOnly`              | `a*h`              | 1            |
//! | `ScalarAffine`           | `a*h + b`          | d + 1        |
//! | `ScalarAffineLowRank(r)` | `a*h + U V^T h + b`| d + 1 + 2dr  |
//! | `LowRankOnly(r)`         | `U V^T h + b`      | d + 2dr      |
//! | `FullRank`               | `W h + b`          | d^2 + d      |
//!
//! Parameters are stored as `f32` (the checkpoint precision); all arithmetic
//! is carried out in `f64`.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default initial scale for adapters with a learned `alpha`.
pub const DEFAULT_ALPHA_INIT: f64 = 5.0;

/// Residual-stream width of the subject model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelDims(usize);

impl ModelDims {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("model width must be at least 1"));
        }
        Ok(Self(d))
    }

    #[inline]
    pub fn d(self) -> usize {
        self.0
    }
}

/// Which adapter family, with its rank where applicable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    Identity,
    ScaleOnly,
    ScalarAffine,
    ScalarAffineLowRank { rank: usize },
    LowRankOnly { rank: usize },
    FullRank,
}

impl AdapterKind {
    /// Stable identifier used in checkpoint headers.
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Identity => "identity",
            AdapterKind::ScaleOnly => "scale_only",
            AdapterKind::ScalarAffine => "scalar_affine",
            AdapterKind::ScalarAffineLowRank { .. } => "scalar_affine_low_rank",
            AdapterKind::LowRankOnly { .. } => "low_rank_only",
            AdapterKind::FullRank => "full_rank",
        }
    }

    /// Rebuild a kind from its header name and rank (ignored for non-low-rank kinds).
    pub fn from_name(name: &str, rank: Option<usize>) -> Result<Self> {
        let need_rank = || {
            rank.filter(|&r| r > 0)
                .ok_or_else(|| Error::invalid(format!("adapter kind `{name}` needs a positive rank")))
        };
        Ok(match name {
            "identity" => AdapterKind::Identity,
            "scale_only" => AdapterKind::ScaleOnly,
            "scalar_affine" => AdapterKind::ScalarAffine,
            "scalar_affine_low_rank" => AdapterKind::ScalarAffineLowRank { rank: need_rank()? },
            "low_rank_only" => AdapterKind::LowRankOnly { rank: need_rank()? },
            "full_rank" => AdapterKind::FullRank,
            other => return Err(Error::invalid(format!("unknown adapter kind `{other}`"))),
        })
    }

    pub fn rank(self) -> Option<usize> {
        match self {
            AdapterKind::ScalarAffineLowRank { rank } | AdapterKind::LowRankOnly { rank } => {
                Some(rank)
            }
            _ => None,
        }
    }

    pub fn has_alpha(self) -> bool {
        matches!(
            self,
            AdapterKind::ScaleOnly
                | AdapterKind::ScalarAffine
                | AdapterKind::ScalarAffineLowRank { .. }
        )
    }

    pub fn has_bias(self) -> bool {
        !matches!(self, AdapterKind::Identity | AdapterKind::ScaleOnly)
    }

    /// Closed-form trainable parameter count for width `d`.
    pub fn parameter_count(self, d: usize) -> usize {
        match self {
            AdapterKind::Identity => 0,
            AdapterKind::ScaleOnly => 1,
            AdapterKind::ScalarAffine => d + 1,
            AdapterKind::ScalarAffineLowRank { rank } => d + 1 + 2 * d * rank,
            AdapterKind::LowRankOnly { rank } => d + 2 * d * rank,
            AdapterKind::FullRank => d * d + d,
        }
    }

    /// Position in the architecture comparison table.
    pub(crate) fn table_order(self) -> (u8, usize) {
        match self {
            AdapterKind::Identity => (0, 0),
            AdapterKind::ScaleOnly => (1, 0),
            AdapterKind::ScalarAffine => (2, 0),
            AdapterKind::ScalarAffineLowRank { rank } => (3, rank),
            AdapterKind::LowRankOnly { rank } => (4, rank),
            AdapterKind::FullRank => (5, 0),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::Identity => f.write_str("Identity"),
            AdapterKind::ScaleOnly => f.write_str("Scale-only"),
            AdapterKind::ScalarAffine => f.write_str("Scalar affine"),
            AdapterKind::ScalarAffineLowRank { rank } => write!(f, "SA + LR (r={rank})"),
            AdapterKind::LowRankOnly { rank } => write!(f, "LR only (r={rank})"),
            AdapterKind::FullRank => f.write_str("Full-rank affine"),
        }
    }
}

/// Parses the short CLI spelling: `identity`, `scale_only`, `scalar_affine`,
/// `sa_lr:<r>`, `lr:<r>`, `full_rank`.
impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, rank) = match s.split_once(':') {
            Some((h, r)) => {
                let r: usize = r
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad rank in `{s}`")))?;
                (h.to_string(), Some(r))
            }
            None => (s.clone(), None),
        };
        let name = match head.as_str() {
            "sa_lr" | "sa+lr" => "scalar_affine_low_rank",
            "lr" | "lr_only" => "low_rank_only",
            "full" => "full_rank",
            "scale" => "scale_only",
            "sa" => "scalar_affine",
            other => other,
        };
        AdapterKind::from_name(name, rank)
    }
}

/// Tensors of an adapter (or of a gradient bundle), in checkpoint order.
///
/// Absent tensors are empty. `u` and `v` are `d x r` and `w` is `d x d`, all
/// row-major.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Params<T> {
    pub alpha: Vec<T>,
    pub bias: Vec<T>,
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub w: Vec<T>,
}

/// Names of the tensor slots, in checkpoint order.
pub const SLOT_NAMES: [&str; 5] = ["alpha", "bias", "u", "v", "w"];

impl<T> Params<T> {
    pub fn slots(&self) -> [&[T]; 5] {
        [&self.alpha, &self.bias, &self.u, &self.v, &self.w]
    }

    pub fn slots_mut(&mut self) -> [&mut Vec<T>; 5] {
        [
            &mut self.alpha,
            &mut self.bias,
            &mut self.u,
            &mut self.v,
            &mut self.w,
        ]
    }

    pub fn len(&self) -> usize {
        self.slots().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.alpha
            .iter()
            .chain(&self.bias)
            .chain(&self.u)
            .chain(&self.v)
            .chain(&self.w)
    }
}

impl<T: Copy + Default> Params<T> {
    /// Zero-filled tensors shaped like `other`.
    pub fn zeros_like<U>(other: &Params<U>) -> Self {
        Params {
            alpha: vec![T::default(); other.alpha.len()],
            bias: vec![T::default(); other.bias.len()],
            u: vec![T::default(); other.u.len()],
            v: vec![T::default(); other.v.len()],
            w: vec![T::default(); other.w.len()],
        }
    }
}

impl Params<f64> {
    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for slot in self.slots_mut() {
            slot.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn add_assign(&mut self, other: &Params<f64>) {
        for (a, b) in self.slots_mut().into_iter().zip(other.slots()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

/// Expected tensor lengths for a kind: `[alpha, bias, u, v, w]`.
pub(crate) fn slot_lengths(kind: AdapterKind, d: usize) -> [usize; 5] {
    match kind {
        AdapterKind::Identity => [0, 0, 0, 0, 0],
        AdapterKind::ScaleOnly => [1, 0, 0, 0, 0],
        AdapterKind::ScalarAffine => [1, d, 0, 0, 0],
        AdapterKind::ScalarAffineLowRank { rank } => [1, d, d * rank, d * rank, 0],
        AdapterKind::LowRankOnly { rank } => [0, d, d * rank, d * rank, 0],
        AdapterKind::FullRank => [0, d, 0, 0, d * d],
    }
}

/// Initialization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    pub alpha0: f64,
    pub seed: u64,
}

impl Default for AdapterInit {
    fn default() -> Self {
        Self {
            alpha0: DEFAULT_ALPHA_INIT,
            seed: 42,
        }
    }
}

/// A trained (or freshly initialized) adapter.
///
/// Values are immutable through the public API; only the training loop
/// updates parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    kind: AdapterKind,
    dims: ModelDims,
    params: Params<f32>,
}

impl Adapter {
    /// Initialize an adapter: `alpha = alpha0`, zero bias, `W = alpha0 * I`,
    /// and `U`, `V` uniform in `[-1/sqrt(d), 1/sqrt(d)]` from `init.seed`.
    pub fn init(kind: AdapterKind, dims: ModelDims, init: &AdapterInit) -> Result<Self> {
        if let Some(0) = kind.rank() {
            return Err(Error::invalid("low-rank adapters need rank >= 1"));
        }
        let d = dims.d();
        let [na, nb, nu, nv, nw] = slot_lengths(kind, d);
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| rng.random_range(-bound..=bound) as f32)
                .collect()
        };
        let u = uniform(nu);
        let v = uniform(nv);
        let mut w = vec![0.0f32; nw];
        if nw > 0 {
            for i in 0..d {
                w[i * d + i] = init.alpha0 as f32;
            }
        }
        let params = Params {
            alpha: vec![init.alpha0 as f32; na],
            bias: vec![0.0; nb],
            u,
            v,
            w,
        };
        Ok(Self { kind, dims, params })
    }

    /// Build an adapter from explicit tensors, validating their shapes.
    pub fn from_params(kind: AdapterKind, dims: ModelDims, params: Params<f32>) -> Result<Self> {
        let expected = slot_lengths(kind, dims.d());
        for ((slot, want), name) in params.slots().iter().zip(expected).zip(SLOT_NAMES) {
            if slot.len() != want {
                return Err(Error::Shape(format!(
                    "{kind}: tensor `{name}` has {} entries, expected {want}",
                    slot.len()
                )));
            }
        }
        if let Some(pos) = params.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite parameter at flat index {pos}"
            )));
        }
        Ok(Self { kind, dims, params })
    }

    /// Untrained scale-only adapter (`f(h) = alpha * h`).
    pub fn scale_only(dims: ModelDims, alpha: f32) -> Self {
        Self {
            kind: AdapterKind::ScaleOnly,
            dims,
            params: Params {
                alpha: vec![alpha],
                ..Params::default()
            },
        }
    }

    pub fn identity(dims: ModelDims) -> Self {
        Self {
            kind: AdapterKind::Identity,
            dims,
            params: Params::default(),
        }
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut Params<f32> {
        &mut self.params
    }

    pub fn alpha(&self) -> Option<f32> {
        self.params.alpha.first().copied()
    }

    pub fn bias(&self) -> Option<&[f32]> {
        (!self.params.bias.is_empty()).then_some(self.params.bias.as_slice())
    }

    pub fn parameter_count(&self) -> usize {
        self.kind.parameter_count(self.dims.d())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dims.d() {
            return Err(Error::Dimension {
                expected: self.dims.d(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `f(h)`. The external injection scale is never applied here.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(h)?;
        let d = self.dims.d();
        let p = &self.params;
        if self.kind == AdapterKind::Identity {
            return Ok(h.to_vec());
        }
        let mut out = vec![0.0f64; d];
        if let Some(&a) = p.alpha.first() {
            let a = a as f64;
            out.iter_mut().zip(h).for_each(|(o, x)| *o = a * x);
        }
        if let Some(r) = self.kind.rank() {
            let z = low_rank_project(&p.v, h, d, r);
            for (i, o) in out.iter_mut().enumerate() {
                let row = &p.u[i * r..(i + 1) * r];
                *o += row.iter().zip(&z).map(|(&u, z)| u as f64 * z).sum::<f64>();
            }
        }
        if !p.w.is_empty() {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &p.w[i * d..(i + 1) * d];
                *o += row.iter().zip(h).map(|(&w, x)| w as f64 * x).sum::<f64>();
            }
        }
        if !p.bias.is_empty() {
            out.iter_mut().zip(&p.bias).for_each(|(o, &b)| *o += b as f64);
        }
        Ok(out)
    }

    /// Gradients of a loss with respect to every parameter, given the input
    /// `h` and `upstream = dL/df(h)`.
    pub fn gradients(&self, h: &[f64], upstream: &[f64]) -> Result<Params<f64>> {
        self.check_dim(h)?;
        self.check_dim(upstream)?;
        let d = self.dims.d();
        let p = &self.params;
        let mut g = Params::<f64>::zeros_like(p);
        if !g.alpha.is_empty() {
            g.alpha[0] = dot(upstream, h);
        }
        if !g.bias.is_empty() {
            g.bias.copy_from_slice(upstream);
        }
        if let Some(r) = self.kind.rank() {
            // dU = g z^T with z = V^T h; dV = h (U^T g)^T
            let z = low_rank_project(&p.v, h, d, r);
            let mut ut_g = vec![0.0f64; r];
            for i in 0..d {
                for k in 0..r {
                    g.u[i * r + k] = upstream[i] * z[k];
                    ut_g[k] += p.u[i * r + k] as f64 * upstream[i];
                }
            }
            for j in 0..d {
                for k in 0..r {
                    g.v[j * r + k] = h[j] * ut_g[k];
                }
            }
        }
        if !g.w.is_empty() {
            for i in 0..d {
                for j in 0..d {
                    g.w[i * d + j] = upstream[i] * h[j];
                }
            }
        }
        Ok(g)
    }
}

/// `V^T h` for a row-major `d x r` matrix `V`.
fn low_rank_project(v: &[f32], h: &[f64], d: usize, r: usize) -> Vec<f64> {
    let mut z = vec![0.0f64; r];
    for j in 0..d {
        let hj = h[j];
        for k in 0..r {
            z[k] += v[j * r + k] as f64 * hj;
        }
    }
    z
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
