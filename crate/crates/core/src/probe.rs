//! Probes: bridge-entity heatmaps, zero-vector readout, novel-prompt descriptions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::eval::{cell_seed, mean_sem, MeanSem, ScaleGrid};
use crate::lm::template::{immediate_answer_prompt, IMMEDIATE_ANSWER_EXAMPLE};
use crate::lm::{
    adapter_injection, generate, generate_plain, FrozenLm, GenerationConfig, InjectionSpec, RenderedTemplate, Sampling,
    ScaleMode, TokenId,
};

/// Detection threshold used for position alignment.
pub const ALIGN_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeCase {
    pub prompt: String,
    pub bridge_aliases: Vec<String>,
    pub category: String,
    pub expected_answer: String,
}

impl BridgeCase {
    pub fn validate(&self) -> Result<()> {
        if self.bridge_aliases.iter().all(|a| a.trim().is_empty()) {
            return Err(Error::invalid(format!("case {:?} has no bridge aliases", self.prompt)));
        }
        Ok(())
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
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

/// Read a JSON-lines case file.
pub fn read_cases(path: impl AsRef<Path>) -> Result<Vec<BridgeCase>> {
    let cases: Vec<BridgeCase> = read_jsonl(path.as_ref())?;
    for c in &cases {
        c.validate()?;
    }
    Ok(cases)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Case-insensitive substring match on whitespace-normalized text.
pub fn alias_match(text: &str, aliases: &[String]) -> bool {
    let t = normalize(text);
    aliases.iter().map(|a| normalize(a)).any(|a| !a.is_empty() && t.contains(&a))
}

/// Which scale each bridge sample uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "scale")]
pub enum BridgeScales {
    /// Sample `k` uses the `k mod N`-th scale of the active window.
    WindowCycle,
    Single(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    pub samples: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub scales: BridgeScales,
    pub scale_mode: ScaleMode,
    pub seed: u64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: crate::lm::DEFAULT_MAX_TOKENS,
            scales: BridgeScales::WindowCycle,
            scale_mode: ScaleMode::default(),
            seed: 0,
        }
    }
}

/// Detection rates over (layer, position), with the raw hit counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub layers: Vec<usize>,
    pub positions: Vec<usize>,
    pub samples_per_cell: usize,
    pub temperature: f64,
    /// Row-major `[layer][position]`.
    pub counts: Vec<usize>,
    pub rates: Vec<f64>,
    pub alignment_offset: Option<usize>,
}

impl HeatmapGrid {
    /// Grid from raw counts.
    pub fn from_counts(
        layers: Vec<usize>,
        positions: Vec<usize>,
        samples_per_cell: usize,
        temperature: f64,
        counts: Vec<usize>,
    ) -> Result<Self> {
        if samples_per_cell == 0 {
            return Err(Error::invalid("samples per cell must be at least 1"));
        }
        if counts.len() != layers.len() * positions.len() {
            return Err(Error::Shape(format!(
                "{} counts for a {}x{} grid",
                counts.len(),
                layers.len(),
                positions.len()
            )));
        }
        if let Some(c) = counts.iter().find(|&&c| c > samples_per_cell) {
            return Err(Error::invalid(format!("count {c} exceeds {samples_per_cell} samples")));
        }
        let rates = counts.iter().map(|&c| c as f64 / samples_per_cell as f64).collect();
        Ok(Self {
            layers,
            positions,
            samples_per_cell,
            temperature,
            counts,
            rates,
            alignment_offset: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.layers.len(), self.positions.len())
    }

    pub fn rate(&self, layer_idx: usize, pos_idx: usize) -> f64 {
        self.rates[layer_idx * self.positions.len() + pos_idx]
    }

    pub fn any_hit(&self) -> bool {
        self.counts.iter().any(|&c| c > 0)
    }

    /// Per position, the maximum detection over layers.
    pub fn position_series(&self) -> Vec<f64> {
        (0..self.positions.len())
            .map(|p| {
                (0..self.layers.len())
                    .map(|l| self.rate(l, p))
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Drop the positions before `offset` so that `offset` becomes position 0.
    pub fn aligned(&self, offset: usize) -> Result<Self> {
        let np = self.positions.len();
        if offset >= np {
            return Err(Error::PositionOutOfRange { position: offset, len: np });
        }
        let mut counts = Vec::with_capacity(self.layers.len() * (np - offset));
        for l in 0..self.layers.len() {
            counts.extend_from_slice(&self.counts[l * np + offset..(l + 1) * np]);
        }
        let mut g = Self::from_counts(
            self.layers.clone(),
            self.positions[offset..].to_vec(),
            self.samples_per_cell,
            self.temperature,
            counts,
        )?;
        g.alignment_offset = Some(offset);
        Ok(g)
    }

    /// Keep the first `n` positions.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let np = self.positions.len();
        if n > np {
            return Err(Error::Shape(format!("cannot keep {n} of {np} positions")));
        }
        let mut counts = Vec::with_capacity(self.layers.len() * n);
        for l in 0..self.layers.len() {
            counts.extend_from_slice(&self.counts[l * np..l * np + n]);
        }
        let mut g = Self::from_counts(
            self.layers.clone(),
            self.positions[..n].to_vec(),
            self.samples_per_cell,
            self.temperature,
            counts,
        )?;
        g.alignment_offset = self.alignment_offset;
        Ok(g)
    }
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::DegenerateVectors {
            ids: vec!["extracted activation".into()],
        });
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn check_extraction(lm: &dyn FrozenLm, layers: &[usize]) -> Result<()> {
    let info = lm.info();
    if !info.capabilities.supports_extraction {
        return Err(Error::Unsupported {
            backend: info.name,
            capability: "activation extraction",
        });
    }
    if let Some(&layer) = layers.iter().find(|&&l| l > info.layers) {
        return Err(Error::LayerOutOfRange {
            layer,
            layers: info.layers,
        });
    }
    Ok(())
}

/// Detection heatmap of the case's bridge entity over layers and token positions.
#[allow(clippy::too_many_arguments)]
pub fn bridge_heatmap(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    case: &BridgeCase,
    layers: &[usize],
    positions: &[usize],
    grid: &ScaleGrid,
    cfg: &HeatmapConfig,
) -> Result<HeatmapGrid> {
    case.validate()?;
    if cfg.samples == 0 {
        return Err(Error::invalid("samples per cell must be at least 1"));
    }
    check_extraction(lm, layers)?;
    let tokens: Vec<TokenId> = lm.encode_for_extraction(&case.prompt);
    if let Some(&p) = positions.iter().find(|&&p| p >= tokens.len()) {
        return Err(Error::PositionOutOfRange {
            position: p,
            len: tokens.len(),
        });
    }
    let cells: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| positions.iter().map(move |&p| (l, p)))
        .collect();
    let counts: Vec<usize> = cells
        .par_iter()
        .map(|&(layer, position)| {
            let h = unit(lm.hidden_state(&tokens, layer, position)?)?;
            let key = format!("{layer}:{position}");
            let mut hits = 0;
            for k in 0..cfg.samples {
                let scale = match cfg.scales {
                    BridgeScales::WindowCycle => grid.active()[k % grid.window()],
                    BridgeScales::Single(s) => s,
                };
                let spec = adapter_injection(adapter, &h, scale, cfg.scale_mode)?;
                let gen = GenerationConfig {
                    sampling: Sampling::Nucleus {
                        temperature: cfg.temperature,
                        top_p: cfg.top_p,
                    },
                    max_tokens: cfg.max_tokens,
                    seed: cell_seed(cfg.seed, &key, k),
                };
                let text = generate(lm, template, &spec, &gen)?.text;
                hits += alias_match(&text, &case.bridge_aliases) as usize;
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;
    HeatmapGrid::from_counts(layers.to_vec(), positions.to_vec(), cfg.samples, cfg.temperature, counts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "offset")]
pub enum Alignment {
    Offset(usize),
    NoSignal,
}

/// First position where any method's detection exceeds the threshold.
pub fn align_position_zero(series: &BTreeMap<String, Vec<f64>>) -> Result<Alignment> {
    if series.is_empty() {
        return Err(Error::invalid("alignment needs at least one method series"));
    }
    let first = series
        .values()
        .filter_map(|s| s.iter().position(|&v| v > ALIGN_THRESHOLD))
        .min();
    Ok(first.map_or(Alignment::NoSignal, Alignment::Offset))
}

/// Cases by (trained detected, untrained detected).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub both: usize,
    pub trained_only: usize,
    /// Reverse pattern: untrained succeeded where trained failed.
    pub untrained_only: usize,
    pub neither: usize,
}

impl Contingency {
    pub fn total(&self) -> usize {
        self.both + self.trained_only + self.untrained_only + self.neither
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDetection {
    pub prompts_detected: usize,
    pub detection_rate: MeanSem,
    /// Row-major mean of the per-case rates.
    pub mean_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub cases: usize,
    pub shape: (usize, usize),
    pub trained: MethodDetection,
    pub untrained: MethodDetection,
    pub contingency: Contingency,
}

fn method_detection(grids: &[HeatmapGrid]) -> MethodDetection {
    let detected: Vec<f64> = grids.iter().map(|g| g.any_hit() as u8 as f64).collect();
    let cells = grids[0].rates.len();
    let mean_grid = (0..cells)
        .map(|i| grids.iter().map(|g| g.rates[i]).sum::<f64>() / grids.len() as f64)
        .collect();
    MethodDetection {
        prompts_detected: detected.iter().filter(|&&d| d > 0.0).count(),
        detection_rate: mean_sem(&detected).expect("non-empty"),
        mean_grid,
    }
}

/// Summaries for paired per-case grids of the trained and untrained methods.
pub fn aggregate_detection(trained: &[HeatmapGrid], untrained: &[HeatmapGrid]) -> Result<DetectionSummary> {
    if trained.is_empty() {
        return Err(Error::invalid("no cases to aggregate"));
    }
    if trained.len() != untrained.len() {
        return Err(Error::Shape(format!(
            "{} trained grids vs {} untrained",
            trained.len(),
            untrained.len()
        )));
    }
    let shape = trained[0].shape();
    if let Some(g) = trained.iter().chain(untrained).find(|g| g.shape() != shape) {
        return Err(Error::Shape(format!(
            "grid {:?} differs from {:?} after alignment",
            g.shape(),
            shape
        )));
    }
    let mut contingency = Contingency::default();
    for (t, u) in trained.iter().zip(untrained) {
        match (t.any_hit(), u.any_hit()) {
            (true, true) => contingency.both += 1,
            (true, false) => contingency.trained_only += 1,
            (false, true) => contingency.untrained_only += 1,
            (false, false) => contingency.neither += 1,
        }
    }
    Ok(DetectionSummary {
        cases: trained.len(),
        shape,
        trained: method_detection(trained),
        untrained: method_detection(untrained),
        contingency,
    })
}

/// Align each case pair on the either-method rule and cut every grid to the
/// shortest aligned length. No-signal cases keep offset 0.
pub fn align_pairs(trained: &[HeatmapGrid], untrained: &[HeatmapGrid]) -> Result<(Vec<HeatmapGrid>, Vec<HeatmapGrid>)> {
    if trained.len() != untrained.len() {
        return Err(Error::Shape(format!(
            "{} trained grids vs {} untrained",
            trained.len(),
            untrained.len()
        )));
    }
    let mut t_out = Vec::with_capacity(trained.len());
    let mut u_out = Vec::with_capacity(trained.len());
    for (t, u) in trained.iter().zip(untrained) {
        let mut series = BTreeMap::new();
        series.insert("trained".to_string(), t.position_series());
        series.insert("untrained".to_string(), u.position_series());
        let offset = match align_position_zero(&series)? {
            Alignment::Offset(o) => o,
            Alignment::NoSignal => 0,
        };
        t_out.push(t.aligned(offset)?);
        u_out.push(u.aligned(offset)?);
    }
    let min = t_out.iter().chain(&u_out).map(|g| g.positions.len()).min().unwrap_or(0);
    let cut = |v: Vec<HeatmapGrid>| v.iter().map(|g| g.truncated(min)).collect::<Result<Vec<_>>>();
    Ok((cut(t_out)?, cut(u_out)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroProbe {
    pub kind: String,
    pub injected_vector: Vec<f64>,
    /// Whether the injected vector bit-equals the adapter's bias (None when
    /// the kind has no bias).
    pub equals_bias: Option<bool>,
    pub greedy_text: String,
    pub sampled_texts: Vec<String>,
}

/// Inject `f(0)` and read out what the adapter encodes on its own.
pub fn zero_vector_probe(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    sampling: Sampling,
    samples: usize,
    max_tokens: usize,
    seed: u64,
) -> Result<ZeroProbe> {
    let d = adapter.dims().d();
    let v = adapter.apply(&vec![0.0; d])?;
    let equals_bias = adapter.bias().map(|b| {
        b.len() == v.len() && b.iter().zip(&v).all(|(&b, &x)| (b as f64).to_bits() == x.to_bits())
    });
    let spec = InjectionSpec::new(v.clone(), 1.0);
    let greedy = GenerationConfig {
        sampling: Sampling::Greedy,
        max_tokens,
        seed,
    };
    let greedy_text = generate(lm, template, &spec, &greedy)?.text;
    let sampled_texts = (0..samples)
        .map(|k| {
            let cfg = GenerationConfig {
                sampling,
                max_tokens,
                seed: cell_seed(seed, "zero", k),
            };
            Ok(generate(lm, template, &spec, &cfg)?.text)
        })
        .collect::<Result<_>>()?;
    Ok(ZeroProbe {
        kind: adapter.kind().name().to_string(),
        injected_vector: v,
        equals_bias,
        greedy_text,
        sampled_texts,
    })
}

/// Per-layer dataset means subtracted during contrastive extraction.
pub type LayerMeans = BTreeMap<usize, Vec<f64>>;

/// Sidecar holding the dataset means next to a checkpoint or manifest.
pub fn dataset_mean_path(path: &Path) -> PathBuf {
    path.with_extension("mean.json")
}

pub fn write_dataset_mean(path: &Path, means: &LayerMeans) -> Result<PathBuf> {
    let p = dataset_mean_path(path);
    std::fs::write(&p, serde_json::to_string(means)?).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

/// The stored means, or `None` when there is no sidecar.
pub fn read_dataset_mean(path: &Path) -> Result<Option<LayerMeans>> {
    let p = dataset_mean_path(path);
    match std::fs::read_to_string(&p) {
        Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&p, e)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NovelConfig {
    pub n: usize,
    pub temperature: f64,
    pub scale: f64,
    pub scale_mode: ScaleMode,
    pub max_tokens: usize,
    pub seed: u64,
    /// Subtract the stored dataset mean before normalizing.
    pub contrastive: bool,
}

impl Default for NovelConfig {
    fn default() -> Self {
        Self {
            n: 5,
            temperature: 0.5,
            scale: 1.0,
            scale_mode: ScaleMode::default(),
            max_tokens: crate::lm::DEFAULT_MAX_TOKENS,
            seed: 0,
            contrastive: false,
        }
    }
}

/// Sampled descriptions of the final-token activation of `prompt`.
pub fn describe_novel_prompt(
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    prompt: &str,
    layer: usize,
    dataset_mean: Option<&[f64]>,
    cfg: &NovelConfig,
) -> Result<Vec<String>> {
    let mut h = crate::lm::extract_activation(lm, prompt, layer, crate::lm::PositionRule::FinalToken)?;
    if cfg.contrastive {
        let mean = dataset_mean.ok_or_else(|| {
            Error::invalid("contrastive preprocessing requested but the adapter has no stored dataset mean")
        })?;
        if mean.len() != h.len() {
            return Err(Error::Dimension {
                expected: h.len(),
                got: mean.len(),
            });
        }
        h.iter_mut().zip(mean).for_each(|(x, m)| *x -= m);
    }
    let h = unit(h)?;
    let spec = adapter_injection(adapter, &h, cfg.scale, cfg.scale_mode)?;
    (0..cfg.n)
        .map(|k| {
            let gen = GenerationConfig {
                sampling: Sampling::temperature(cfg.temperature),
                max_tokens: cfg.max_tokens,
                seed: cell_seed(cfg.seed, prompt, k),
            };
            Ok(generate(lm, template, &spec, &gen)?.text)
        })
        .collect()
}

/// A two-hop question with its first hop, as supplied by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHopRecord {
    #[serde(flatten)]
    pub case: BridgeCase,
    pub first_hop_prompt: String,
    pub first_hop_category: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TwoHopFilter {
    pub kept: Vec<BridgeCase>,
    pub failed_first_hop: usize,
    pub failed_two_hop: usize,
}

/// One-shot prompt asking for an immediate answer.
pub fn one_shot_prompt(category: &str, prompt: &str) -> String {
    let (q, a) = IMMEDIATE_ANSWER_EXAMPLE;
    format!("{q} {a}\n{}", immediate_answer_prompt(category, prompt))
}

/// Keep records whose first hop names the bridge entity and whose two-hop
/// question is answered correctly without reasoning (greedy).
pub fn filter_two_hop(lm: &dyn FrozenLm, records: &[TwoHopRecord], max_tokens: usize) -> Result<TwoHopFilter> {
    let gen = GenerationConfig {
        sampling: Sampling::Greedy,
        max_tokens,
        seed: 0,
    };
    let mut out = TwoHopFilter::default();
    for r in records {
        r.case.validate()?;
        let first = generate_plain(lm, None, &one_shot_prompt(&r.first_hop_category, &r.first_hop_prompt), &gen)?;
        if !alias_match(&first.text, &r.case.bridge_aliases) {
            out.failed_first_hop += 1;
            continue;
        }
        let two = generate_plain(lm, None, &one_shot_prompt(&r.case.category, &r.case.prompt), &gen)?;
        if !alias_match(&two.text, std::slice::from_ref(&r.case.expected_answer)) {
            out.failed_two_hop += 1;
            continue;
        }
        out.kept.push(r.case.clone());
    }
    Ok(out)
}

pub fn read_two_hop(path: impl AsRef<Path>) -> Result<Vec<TwoHopRecord>> {
    read_jsonl(path.as_ref())
}
