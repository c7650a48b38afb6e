//! Frozen language-model abstraction.
//!
//! A backend exposes tokenization, hidden-state extraction, and next-token
//! logits for a token sequence whose placeholder slots carry an injected
//! embedding. Backends also provide the pullback of logit cotangents onto the
//! injected embedding, which is all the training loop needs: the model
//! itself never changes.

pub mod template;
pub mod tokenizer;
pub mod toy;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::ModelDims;
use crate::error::{Error, Result};

pub use template::{InjectionSites, RenderedTemplate, TargetTemplate};
pub use tokenizer::{SpecialTokens, TokenId, Tokenizer, ToyTokenizer};
pub use toy::{ToyLm, ToyLmConfig, ToyVariant};

/// What a backend can do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_extraction: bool,
    pub supports_chat_template: bool,
    pub concurrent_safe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmInfo {
    pub name: String,
    pub vocab_size: usize,
    pub dims: ModelDims,
    pub layers: usize,
    pub capabilities: Capabilities,
}

/// A token sequence with an embedding spliced in at `slots`.
#[derive(Debug, Clone, Copy)]
pub struct InjectedSequence<'a> {
    pub tokens: &'a [TokenId],
    pub slots: &'a [usize],
    /// Replacement embedding for every slot, already multiplied by the
    /// external scale. `None` means a plain prompt.
    pub embedding: Option<&'a [f64]>,
}

impl<'a> InjectedSequence<'a> {
    pub fn plain(tokens: &'a [TokenId]) -> Self {
        Self {
            tokens,
            slots: &[],
            embedding: None,
        }
    }
}

/// Interface every backend implements. Weights are immutable.
pub trait FrozenLm: Send + Sync {
    fn info(&self) -> LmInfo;

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Token ids for a chat turn ending in a partially written assistant
    /// message. Backends with a chat template apply it here.
    fn render_chat(&self, system: Option<&str>, user: &str, assistant_prefix: &str) -> Vec<TokenId> {
        let tok = self.tokenizer();
        let mut out: Vec<TokenId> = tok.special().bos.into_iter().collect();
        if let Some(sys) = system {
            out.extend(tok.encode(sys));
        }
        out.extend(tok.encode(user));
        out.extend(tok.encode(assistant_prefix));
        out
    }

    /// Tokens of a source prompt whose final-token activation is extracted.
    fn encode_for_extraction(&self, prompt: &str) -> Vec<TokenId> {
        self.tokenizer().encode(prompt)
    }

    /// Residual-stream state after `layer` at `position`.
    fn hidden_state(&self, tokens: &[TokenId], layer: usize, position: usize) -> Result<Vec<f64>>;

    /// Next-token logits at each requested position.
    fn logits(&self, seq: &InjectedSequence<'_>, positions: &[usize]) -> Result<Vec<Vec<f64>>>;

    /// Pullback of logit cotangents (one per position) onto the injected embedding.
    fn injection_vjp(
        &self,
        seq: &InjectedSequence<'_>,
        positions: &[usize],
        cotangents: &[Vec<f64>],
    ) -> Result<Vec<f64>>;

    /// Digest of all weights; must never change.
    fn weights_checksum(&self) -> String;
}

/// Vector injected at the placeholder slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub vector: Vec<f64>,
    pub external_scale: f64,
}

impl InjectionSpec {
    pub fn new(vector: Vec<f64>, external_scale: f64) -> Self {
        Self {
            vector,
            external_scale,
        }
    }

    /// The embedding written into each slot.
    pub fn embedding(&self) -> Vec<f64> {
        self.vector.iter().map(|x| x * self.external_scale).collect()
    }
}

/// Where the external inference-time scale enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Scale the input vector: `f(s * h)`. The bias is left alone, so it
    /// dominates at small scales.
    #[default]
    Input,
    /// Scale the adapter output: `s * f(h)`.
    Output,
}

/// Injection for activation `h` pushed through `adapter` at external scale `scale`.
pub fn adapter_injection(
    adapter: &crate::adapter::Adapter,
    h: &[f64],
    scale: f64,
    mode: ScaleMode,
) -> Result<InjectionSpec> {
    match mode {
        ScaleMode::Input => {
            let scaled: Vec<f64> = h.iter().map(|x| x * scale).collect();
            Ok(InjectionSpec::new(adapter.apply(&scaled)?, 1.0))
        }
        ScaleMode::Output => Ok(InjectionSpec::new(adapter.apply(h)?, scale)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRule {
    #[default]
    FinalToken,
}

fn check_dims(lm: &dyn FrozenLm, v: &[f64]) -> Result<()> {
    let d = lm.info().dims.d();
    if v.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: v.len(),
        });
    }
    Ok(())
}

/// Hidden state of the prompt's final token after `layer`.
pub fn extract_activation(
    lm: &dyn FrozenLm,
    prompt: &str,
    layer: usize,
    rule: PositionRule,
) -> Result<Vec<f64>> {
    let info = lm.info();
    if !info.capabilities.supports_extraction {
        return Err(Error::Unsupported {
            backend: info.name,
            capability: "activation extraction",
        });
    }
    if layer > info.layers {
        return Err(Error::LayerOutOfRange {
            layer,
            layers: info.layers,
        });
    }
    let tokens = lm.encode_for_extraction(prompt);
    if tokens.is_empty() {
        return Err(Error::invalid("cannot extract from an empty prompt"));
    }
    let position = match rule {
        PositionRule::FinalToken => tokens.len() - 1,
    };
    lm.hidden_state(&tokens, layer, position)
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Teacher-forced loss on `label_tokens` following the rendered template.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionLoss {
    /// Mean over label positions of `-log p(true token)`.
    pub loss: f64,
    /// Gradient of `loss` with respect to `spec.vector` (through the external scale).
    pub grad: Vec<f64>,
}

pub fn loss_with_injection(
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    spec: &InjectionSpec,
    label_tokens: &[TokenId],
) -> Result<InjectionLoss> {
    if label_tokens.is_empty() {
        return Err(Error::EmptyLabel);
    }
    check_dims(lm, &spec.vector)?;
    let vocab = lm.info().vocab_size;
    if let Some(&bad) = label_tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!("label token {bad} outside vocabulary of {vocab}")));
    }
    let prompt_len = template.tokens.len();
    let mut tokens = template.tokens.clone();
    tokens.extend_from_slice(&label_tokens[..label_tokens.len() - 1]);
    let positions: Vec<usize> = (0..label_tokens.len()).map(|j| prompt_len - 1 + j).collect();
    let embedding = spec.embedding();
    let seq = InjectedSequence {
        tokens: &tokens,
        slots: &template.slots,
        embedding: Some(&embedding),
    };
    let logits = lm.logits(&seq, &positions)?;

    let n = label_tokens.len() as f64;
    let mut loss = 0.0;
    let mut cotangents = Vec::with_capacity(logits.len());
    for (row, &target) in logits.iter().zip(label_tokens) {
        let lsm = log_softmax(row);
        loss -= lsm[target as usize];
        let mut cot: Vec<f64> = lsm.iter().map(|l| l.exp() / n).collect();
        cot[target as usize] -= 1.0 / n;
        cotangents.push(cot);
    }
    loss /= n;
    let d_embedding = lm.injection_vjp(&seq, &positions, &cotangents)?;
    let grad = d_embedding
        .into_iter()
        .map(|g| g * spec.external_scale)
        .collect();
    Ok(InjectionLoss { loss, grad })
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    /// Temperature sampling restricted to the smallest nucleus with mass `>= top_p`.
    Nucleus { temperature: f64, top_p: f64 },
}

impl Sampling {
    pub fn temperature(temperature: f64) -> Self {
        Sampling::Nucleus {
            temperature,
            top_p: 1.0,
        }
    }
}

pub const DEFAULT_MAX_TOKENS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub sampling: Sampling,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            sampling: Sampling::Greedy,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Closing double quote followed by end-of-turn.
    QuoteEot,
    /// End-of-turn without a closing quote.
    Eot,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub stop_reason: StopReason,
    pub sampling: Sampling,
    pub seed: u64,
    #[serde(skip)]
    pub injection: Option<InjectionSpec>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pick the next token from `logits`.
pub fn sample_token(logits: &[f64], sampling: Sampling, rng: &mut impl Rng) -> Result<TokenId> {
    match sampling {
        Sampling::Greedy => Ok(argmax(logits) as TokenId),
        Sampling::Nucleus { temperature, top_p } => {
            if !(temperature > 0.0) || !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::invalid(format!(
                    "bad sampling parameters: temperature {temperature}, top_p {top_p}"
                )));
            }
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            let probs = softmax(&scaled);
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut kept = Vec::new();
            let mut mass = 0.0;
            for &i in &order {
                kept.push(i);
                mass += probs[i];
                if mass >= top_p {
                    break;
                }
            }
            let mut u = rng.random::<f64>() * mass;
            for &i in &kept {
                u -= probs[i];
                if u < 0.0 {
                    return Ok(i as TokenId);
                }
            }
            Ok(*kept.last().expect("nucleus is never empty") as TokenId)
        }
    }
}

/// Autoregressive decoding from `prompt`, optionally with an injected
/// embedding at `slots`.
pub fn generate_tokens(
    lm: &dyn FrozenLm,
    prompt: &[TokenId],
    slots: &[usize],
    injection: Option<&InjectionSpec>,
    cfg: &GenerationConfig,
) -> Result<GenerationRecord> {
    if cfg.max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be at least 1"));
    }
    if let Some(spec) = injection {
        check_dims(lm, &spec.vector)?;
    }
    let embedding = injection.map(InjectionSpec::embedding);
    let tok = lm.tokenizer();
    let eot = tok.special().eot;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq = prompt.to_vec();
    let mut generated = Vec::new();
    let mut stop = StopReason::MaxTokens;
    while generated.len() < cfg.max_tokens {
        let view = InjectedSequence {
            tokens: &seq,
            slots: if embedding.is_some() { slots } else { &[] },
            embedding: embedding.as_deref(),
        };
        let logits = lm.logits(&view, &[seq.len() - 1])?;
        let next = sample_token(&logits[0], cfg.sampling, &mut rng)?;
        generated.push(next);
        seq.push(next);
        if next == eot {
            stop = StopReason::Eot;
            break;
        }
    }
    let body = match stop {
        StopReason::MaxTokens => &generated[..],
        _ => &generated[..generated.len() - 1],
    };
    let mut text = tok.decode(body).trim_end().to_string();
    if stop == StopReason::Eot && text.ends_with('"') {
        stop = StopReason::QuoteEot;
        text.pop();
        text.truncate(text.trim_end().len());
    }
    Ok(GenerationRecord {
        tokens: generated,
        text,
        stop_reason: stop,
        sampling: cfg.sampling,
        seed: cfg.seed,
        injection: injection.cloned(),
    })
}

/// Continue the rendered target template with `spec` injected at its slots.
pub fn generate(
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    spec: &InjectionSpec,
    cfg: &GenerationConfig,
) -> Result<GenerationRecord> {
    generate_tokens(lm, &template.tokens, &template.slots, Some(spec), cfg)
}

/// Plain (hard-prompt) generation with no injection.
pub fn generate_plain(
    lm: &dyn FrozenLm,
    system: Option<&str>,
    user: &str,
    cfg: &GenerationConfig,
) -> Result<GenerationRecord> {
    let prompt = lm.render_chat(system, user, "");
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    generate_tokens(lm, &prompt, &[], None, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    External,
}

/// Backend section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers", alias = "L")]
    pub layers: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Weights location for external backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Word list for the toy tokenizer (replaces numbered words).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
}

fn default_vocab() -> usize {
    32
}
fn default_d() -> usize {
    32
}
fn default_layers() -> usize {
    4
}
fn default_tau() -> f64 {
    1.0
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            name: "echo".into(),
            kind: BackendKind::Toy,
            seed: 0,
            vocab_size: default_vocab(),
            d: default_d(),
            layers: default_layers(),
            tau: default_tau(),
            path: None,
            words: None,
        }
    }
}

pub type BackendFactory = Box<dyn Fn(&BackendConfig) -> Result<Box<dyn FrozenLm>> + Send + Sync>;

/// Named backend constructors. `echo` and `mix` are always present.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("echo", |cfg| {
            Ok(Box::new(ToyLm::new(ToyVariant::Echo, &ToyLmConfig::from(cfg))?))
        });
        r.register("mix", |cfg| {
            Ok(Box::new(ToyLm::new(ToyVariant::Mix, &ToyLmConfig::from(cfg))?))
        });
        r
    }
}

impl BackendRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&BackendConfig) -> Result<Box<dyn FrozenLm>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, cfg: &BackendConfig) -> Result<Box<dyn FrozenLm>> {
        let factory = self
            .factories
            .get(&cfg.name)
            .ok_or_else(|| Error::UnknownBackend(cfg.name.clone()))?;
        if cfg.kind == BackendKind::External && matches!(cfg.name.as_str(), "echo" | "mix") {
            return Err(Error::invalid(format!(
                "`{}` is a toy backend; set kind = \"toy\"",
                cfg.name
            )));
        }
        factory(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn echo(vocab: usize, d: usize, tau: f64) -> ToyLm {
        ToyLm::new(
            ToyVariant::Echo,
            &ToyLmConfig {
                vocab_size: vocab,
                d,
                layers: 2,
                tau,
                seed: 3,
                words: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn uniform_loss_with_zero_vector() {
        let lm = echo(4, 4, 1.0);
        let t = TargetTemplate::default().render(&lm).unwrap();
        let spec = InjectionSpec::new(vec![0.0; 4], 1.0);
        let out = loss_with_injection(&lm, &t, &spec, &[2]).unwrap();
        assert_relative_eq!(out.loss, 4f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(out.loss, 1.3863, epsilon = 1e-4);
    }

    #[test]
    fn saturated_loss_is_tiny() {
        let lm = echo(8, 8, 1.0);
        let t = TargetTemplate::default().render(&lm).unwrap();
        let row = lm.readout_row(5);
        let spec = InjectionSpec::new(row.iter().map(|x| x * 40.0).collect(), 1.0);
        let out = loss_with_injection(&lm, &t, &spec, &[5]).unwrap();
        assert!(out.loss <= 1e-8, "loss {}", out.loss);
    }

    #[test]
    fn empty_label_rejected() {
        let lm = echo(8, 8, 1.0);
        let t = TargetTemplate::default().render(&lm).unwrap();
        let spec = InjectionSpec::new(vec![0.0; 8], 1.0);
        assert!(matches!(
            loss_with_injection(&lm, &t, &spec, &[]),
            Err(Error::EmptyLabel)
        ));
    }

    #[test]
    fn template_without_placeholders_in_backend_fails() {
        let lm = echo(8, 8, 1.0);
        let t = TargetTemplate {
            user_text: "no marker".into(),
            assistant_prefix: "also none".into(),
            sites: InjectionSites::Both,
        };
        assert!(matches!(t.render(&lm), Err(Error::Placeholder { .. })));
    }

    #[test]
    fn greedy_echo_repeats_forced_token() {
        let lm = echo(12, 12, 1.0);
        let t = TargetTemplate::default().render(&lm).unwrap();
        let v: Vec<f64> = lm.readout_row(7).iter().map(|x| x * 10.0).collect();
        let cfg = GenerationConfig {
            max_tokens: 5,
            ..GenerationConfig::default()
        };
        let rec = generate(&lm, &t, &InjectionSpec::new(v, 1.0), &cfg).unwrap();
        assert_eq!(rec.tokens, vec![7; 5]);
        assert_eq!(rec.stop_reason, StopReason::MaxTokens);
        assert_eq!(rec.text, "w7 w7 w7 w7 w7");
    }

    #[test]
    fn stop_on_quote_then_eot() {
        // vector pointing at `"` then eot cannot be expressed by a
        // prefix-free echo model, so decode a fixed sequence by hand.
        let lm = echo(6, 6, 1.0);
        let tok = lm.tokenizer();
        let text = tok.decode(&[4, 2]);
        assert_eq!(text, "w4 \"");
        // eot directly
        let v: Vec<f64> = lm.readout_row(1).iter().map(|x| x * 30.0).collect();
        let t = TargetTemplate::default().render(&lm).unwrap();
        let rec = generate(&lm, &t, &InjectionSpec::new(v, 1.0), &GenerationConfig::default()).unwrap();
        assert_eq!(rec.stop_reason, StopReason::Eot);
        assert_eq!(rec.tokens, vec![1]);
        assert_eq!(rec.text, "");
    }

    #[test]
    fn seeded_sampling_reproduces() {
        let lm = echo(16, 16, 1.0);
        let t = TargetTemplate::default().render(&lm).unwrap();
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let cfg = GenerationConfig {
            sampling: Sampling::Nucleus {
                temperature: 0.7,
                top_p: 0.9,
            },
            max_tokens: 10,
            seed: 11,
        };
        let spec = InjectionSpec::new(v, 2.0);
        let a = generate(&lm, &t, &spec, &cfg).unwrap();
        let b = generate(&lm, &t, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&lm, &t, &spec, &GenerationConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn nucleus_keeps_only_top_mass() {
        let logits = [10.0, 0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let t = sample_token(
                &logits,
                Sampling::Nucleus {
                    temperature: 1.0,
                    top_p: 0.5,
                },
                &mut rng,
            )
            .unwrap();
            assert_eq!(t, 0);
        }
        assert!(sample_token(&logits, Sampling::temperature(0.0), &mut rng).is_err());
    }

    #[test]
    fn extraction_checks_layer_and_capability() {
        let lm = echo(8, 8, 1.0);
        let v = extract_activation(&lm, "w5", 2, PositionRule::FinalToken).unwrap();
        assert_eq!(v, lm.embedding_row(5));
        assert!(matches!(
            extract_activation(&lm, "w5", 3, PositionRule::FinalToken),
            Err(Error::LayerOutOfRange { .. })
        ));
        let a = extract_activation(&lm, "w5 w6", 1, PositionRule::FinalToken).unwrap();
        let b = extract_activation(&lm, "w5 w6", 1, PositionRule::FinalToken).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn registry_builds_toys_and_rejects_unknown() {
        let reg = BackendRegistry::default();
        let lm = reg.build(&BackendConfig::default()).unwrap();
        assert_eq!(lm.info().dims.d(), 32);
        let err = reg.build(&BackendConfig {
            name: "llama".into(),
            kind: BackendKind::External,
            ..BackendConfig::default()
        });
        assert!(matches!(err, Err(Error::UnknownBackend(_))));
    }
}
