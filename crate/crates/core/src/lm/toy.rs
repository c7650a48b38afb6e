//! Deterministic toy backends.
//!
//! Both share a readout `E` (V×d) and an input embedding table. The hidden
//! state at every layer is the mean of the prefix's input embeddings.
//!
//! * `Echo`: logits at position p are `tau * E x`, where `x` is the injected
//!   embedding if any slot lies at or before p, and zero otherwise. The
//!   prefix never matters.
//! * `Mix`: logits are `tau * E (mean of non-slot prefix embeddings + k x)`,
//!   where k counts the slots at or before p.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{TokenId, Tokenizer, ToyTokenizer};
use super::{BackendConfig, Capabilities, FrozenLm, InjectedSequence, LmInfo};
use crate::adapter::ModelDims;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyVariant {
    Echo,
    Mix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub tau: f64,
    pub seed: u64,
    pub words: Option<Vec<String>>,
}

impl From<&BackendConfig> for ToyLmConfig {
    fn from(c: &BackendConfig) -> Self {
        Self {
            vocab_size: c.vocab_size,
            d: c.d,
            layers: c.layers,
            tau: c.tau,
            seed: c.seed,
            words: c.words.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    variant: ToyVariant,
    tokenizer: ToyTokenizer,
    /// V×d readout.
    readout: DMatrix<f64>,
    /// V×d input embeddings.
    embeddings: DMatrix<f64>,
    tau: f64,
    layers: usize,
}

/// Seeded V×d matrix. Rows are orthonormal when V ≤ d. Otherwise columns are
/// orthonormal and scaled by √(V/d) so rows have unit norm on average.
pub fn seeded_readout(vocab: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if vocab <= d {
        let g = DMatrix::<f64>::from_fn(d, vocab, |_, _| StandardNormal.sample(&mut rng));
        g.qr().q().transpose()
    } else {
        let g = DMatrix::<f64>::from_fn(vocab, d, |_, _| StandardNormal.sample(&mut rng));
        g.qr().q() * (vocab as f64 / d as f64).sqrt()
    }
}

impl ToyLm {
    pub fn new(variant: ToyVariant, cfg: &ToyLmConfig) -> Result<Self> {
        let tokenizer = match &cfg.words {
            Some(words) => ToyTokenizer::with_words(words.clone())?,
            None => ToyTokenizer::numbered(cfg.vocab_size)?,
        };
        if cfg.words.is_some() && tokenizer.vocab_size() != cfg.vocab_size {
            return Err(Error::invalid(format!(
                "word list gives vocabulary {} but vocab_size is {}",
                tokenizer.vocab_size(),
                cfg.vocab_size
            )));
        }
        let readout = seeded_readout(tokenizer.vocab_size(), cfg.d, cfg.seed);
        Self::from_parts(variant, tokenizer, readout.clone(), readout, cfg.tau, cfg.layers)
    }

    pub fn from_parts(
        variant: ToyVariant,
        tokenizer: ToyTokenizer,
        readout: DMatrix<f64>,
        embeddings: DMatrix<f64>,
        tau: f64,
        layers: usize,
    ) -> Result<Self> {
        let v = tokenizer.vocab_size();
        if readout.nrows() != v || embeddings.nrows() != v || readout.ncols() != embeddings.ncols() {
            return Err(Error::Shape(format!(
                "readout {}x{} and embeddings {}x{} do not match vocabulary {v}",
                readout.nrows(),
                readout.ncols(),
                embeddings.nrows(),
                embeddings.ncols()
            )));
        }
        ModelDims::new(readout.ncols())?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau must be positive"));
        }
        if readout.iter().chain(embeddings.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("toy weights must be finite"));
        }
        Ok(Self {
            variant,
            tokenizer,
            readout,
            embeddings,
            tau,
            layers,
        })
    }

    pub fn echo(vocab_size: usize, d: usize, seed: u64) -> Result<Self> {
        Self::new(
            ToyVariant::Echo,
            &ToyLmConfig {
                vocab_size,
                d,
                layers: 4,
                tau: 1.0,
                seed,
                words: None,
            },
        )
    }

    /// Replace the input embedding table (V×d).
    pub fn with_input_embeddings(self, embeddings: DMatrix<f64>) -> Result<Self> {
        Self::from_parts(
            self.variant,
            self.tokenizer,
            self.readout,
            embeddings,
            self.tau,
            self.layers,
        )
    }

    pub fn variant(&self) -> ToyVariant {
        self.variant
    }

    pub fn toy_tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    pub fn readout(&self) -> &DMatrix<f64> {
        &self.readout
    }

    pub fn readout_row(&self, token: TokenId) -> Vec<f64> {
        self.readout.row(token as usize).iter().copied().collect()
    }

    pub fn embedding_row(&self, token: TokenId) -> Vec<f64> {
        self.embeddings.row(token as usize).iter().copied().collect()
    }

    fn d(&self) -> usize {
        self.readout.ncols()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let v = self.tokenizer.vocab_size();
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(t) => Err(Error::invalid(format!("token {t} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn check_seq(&self, seq: &InjectedSequence<'_>, positions: &[usize]) -> Result<()> {
        self.check_tokens(seq.tokens)?;
        let len = seq.tokens.len();
        if let Some(&p) = positions.iter().chain(seq.slots).find(|&&p| p >= len) {
            return Err(Error::PositionOutOfRange { position: p, len });
        }
        if let Some(x) = seq.embedding {
            if x.len() != self.d() {
                return Err(Error::Dimension {
                    expected: self.d(),
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    /// Multiplicity of the injected embedding in the state read at `p`.
    fn injection_weight(&self, seq: &InjectedSequence<'_>, p: usize) -> f64 {
        if seq.embedding.is_none() {
            return 0.0;
        }
        let k = seq.slots.iter().filter(|&&s| s <= p).count();
        match self.variant {
            ToyVariant::Echo => (k > 0) as u8 as f64,
            ToyVariant::Mix => k as f64,
        }
    }

    /// State at `p` excluding the injected part.
    fn base_state(&self, seq: &InjectedSequence<'_>, p: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.d()];
        if self.variant == ToyVariant::Echo {
            return x;
        }
        let mut n = 0usize;
        for (q, &t) in seq.tokens[..=p].iter().enumerate() {
            if seq.embedding.is_some() && seq.slots.contains(&q) {
                continue;
            }
            for (xi, e) in x.iter_mut().zip(self.embeddings.row(t as usize).iter()) {
                *xi += e;
            }
            n += 1;
        }
        if n > 0 {
            x.iter_mut().for_each(|xi| *xi /= n as f64);
        }
        x
    }
}

impl FrozenLm for ToyLm {
    fn info(&self) -> LmInfo {
        LmInfo {
            name: match self.variant {
                ToyVariant::Echo => "echo".into(),
                ToyVariant::Mix => "mix".into(),
            },
            vocab_size: self.tokenizer.vocab_size(),
            dims: ModelDims::new(self.d()).expect("validated at construction"),
            layers: self.layers,
            capabilities: Capabilities {
                supports_extraction: true,
                supports_chat_template: false,
                concurrent_safe: true,
            },
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn hidden_state(&self, tokens: &[TokenId], layer: usize, position: usize) -> Result<Vec<f64>> {
        if layer > self.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                layers: self.layers,
            });
        }
        if position >= tokens.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        self.check_tokens(tokens)?;
        let mut x = vec![0.0; self.d()];
        for &t in &tokens[..=position] {
            for (xi, e) in x.iter_mut().zip(self.embeddings.row(t as usize).iter()) {
                *xi += e;
            }
        }
        let n = (position + 1) as f64;
        x.iter_mut().for_each(|xi| *xi /= n);
        Ok(x)
    }

    fn logits(&self, seq: &InjectedSequence<'_>, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_seq(seq, positions)?;
        Ok(positions
            .iter()
            .map(|&p| {
                let mut x = self.base_state(seq, p);
                let w = self.injection_weight(seq, p);
                if let Some(e) = seq.embedding {
                    if w != 0.0 {
                        x.iter_mut().zip(e).for_each(|(xi, ei)| *xi += w * ei);
                    }
                }
                let x = nalgebra::DVector::from_vec(x);
                (&self.readout * x).iter().map(|z| z * self.tau).collect()
            })
            .collect())
    }

    fn injection_vjp(
        &self,
        seq: &InjectedSequence<'_>,
        positions: &[usize],
        cotangents: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        self.check_seq(seq, positions)?;
        if cotangents.len() != positions.len() {
            return Err(Error::Shape(format!(
                "{} cotangents for {} positions",
                cotangents.len(),
                positions.len()
            )));
        }
        let v = self.tokenizer.vocab_size();
        let mut acc = vec![0.0; v];
        for (&p, cot) in positions.iter().zip(cotangents) {
            if cot.len() != v {
                return Err(Error::Dimension {
                    expected: v,
                    got: cot.len(),
                });
            }
            let w = self.injection_weight(seq, p);
            if w != 0.0 {
                acc.iter_mut().zip(cot).for_each(|(a, c)| *a += w * c);
            }
        }
        let acc = nalgebra::DVector::from_vec(acc);
        Ok((self.readout.transpose() * acc)
            .iter()
            .map(|g| g * self.tau)
            .collect())
    }

    fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self.variant {
            ToyVariant::Echo => b"echo",
            ToyVariant::Mix => b"mix\0",
        });
        h.update(self.tau.to_le_bytes());
        h.update((self.layers as u64).to_le_bytes());
        for m in [&self.readout, &self.embeddings] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                h.update(x.to_le_bytes());
            }
        }
        for id in 0..self.tokenizer.vocab_size() as TokenId {
            h.update(self.tokenizer.piece(id).unwrap_or_default().as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}
