//! Evaluation: multi-scale generation, best-of-N scoring, baselines and reports.

pub mod grid;
pub mod retrieval;
pub mod scoring;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, ModelDims};
use crate::data::{Dataset, LabelFormat, Record};
use crate::error::{Error, Result};
use crate::lm::template::{taboo_prompt, TargetTemplate};
use crate::lm::{generate_plain, FrozenLm, GenerationConfig, RenderedTemplate, ScaleMode};

pub use grid::{
    best_of_n, calibrate_window, calibrate_window_scores, cell_seed, generate_multiscale, GridScope, ScaleGrid,
    ScaledGeneration, DEFAULT_SCALES, DEFAULT_WINDOW,
};
pub use retrieval::{
    rank_metrics, retrieval_score, topic_document, HashingEmbedder, RankMetrics, RetrievalIndex, RetrievalQuery,
    RetrievalResult, TextEmbedder,
};
pub use scoring::{
    generation_score, parse_conversation, score_activations, ActivationOracle, Conversation, ConversationSource,
    GenerationScore, KeywordOracle, LmConversations, ScriptedConversations,
};

/// `counts[c]` is the number of items valid at exactly `c` scales.
pub fn scale_sensitivity_histogram(valid: &[Vec<bool>]) -> Result<Vec<usize>> {
    let n = valid.first().map_or(0, Vec::len);
    if let Some(row) = valid.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "ragged scale rows: {} and {n} scales",
            row.len()
        )));
    }
    let mut counts = vec![0; n + 1];
    for row in valid {
        counts[row.iter().filter(|&&v| v).count()] += 1;
    }
    Ok(counts)
}

/// True iff the text has at least one alphabetic character and all of them
/// are uppercase.
pub fn allcaps_classify(text: &str) -> bool {
    let mut any = false;
    for c in text.chars().filter(|c| c.is_alphabetic()) {
        if !c.is_uppercase() {
            return false;
        }
        any = true;
    }
    any
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero when `n < 2`.
    pub sem: f64,
    pub n: usize,
}

pub fn mean_sem(values: &[f64]) -> Option<MeanSem> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Some(MeanSem { mean, sem, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    RepeatX6,
    OriginalPlusParaphrases,
    UntrainedSelfie,
    Taboo,
}

impl BaselineMode {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMode::RepeatX6 => "repeat_x6",
            BaselineMode::OriginalPlusParaphrases => "original_plus_paraphrases",
            BaselineMode::UntrainedSelfie => "untrained_selfie",
            BaselineMode::Taboo => "taboo",
        }
    }
}

/// The stored label repeated `n` times.
pub fn repeat_label(label: &str, n: usize) -> Vec<String> {
    vec![label.to_string(); n]
}

/// The stored label followed by its `n - 1` paraphrases.
pub fn original_plus_paraphrases(label: &str, paraphrases: Option<&[String]>, n: usize) -> Result<Vec<String>> {
    let p = paraphrases.ok_or_else(|| Error::invalid(format!("no paraphrases for label {label:?}")))?;
    if p.len() + 1 < n {
        return Err(Error::invalid(format!(
            "label {label:?} has {} paraphrases, need {}",
            p.len(),
            n - 1
        )));
    }
    let mut out = vec![label.to_string()];
    out.extend(p.iter().take(n - 1).cloned());
    Ok(out)
}

/// Generations of the untrained method `f(h) = h`, scaled over the grid window.
pub fn untrained_selfie(
    lm: &dyn FrozenLm,
    template: &RenderedTemplate,
    vector_id: &str,
    h: &[f64],
    grid: &ScaleGrid,
    gen: &GenerationConfig,
    mode: ScaleMode,
) -> Result<Vec<ScaledGeneration>> {
    let adapter = Adapter::scale_only(ModelDims::new(h.len())?, 1.0);
    generate_multiscale(&adapter, lm, template, vector_id, h, grid, GridScope::Window, gen, mode)
}

/// Metrics an evaluation can compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Teacher-forced loss of the stored labels (adapter methods only).
    Loss,
    /// Candidate equals a stored label, ignoring case and spacing.
    LabelMatch,
    /// Rank of the item's topic for the candidate in the retrieval index.
    Retrieval,
    /// Candidate is classified ALL-CAPS.
    Allcaps,
    /// Oracle-scored synthetic conversations exhibiting the candidate.
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub selections: Vec<Selection>,
    pub grid: ScaleGrid,
    pub scale_mode: ScaleMode,
    pub generation: GenerationConfig,
    pub ks: Vec<usize>,
    /// Conversations per candidate for generation scoring.
    pub trials: usize,
    pub exclude_first_token: bool,
    /// Metric for window calibration. Required when a calibration set is given.
    pub calibration_metric: Option<Selection>,
    pub label_format: LabelFormat,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            selections: vec![Selection::LabelMatch],
            grid: ScaleGrid::default(),
            scale_mode: ScaleMode::default(),
            generation: GenerationConfig::default(),
            ks: vec![1, 10, 100],
            trials: 10,
            exclude_first_token: true,
            calibration_metric: None,
            label_format: LabelFormat::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.selections.is_empty() {
            return Err(Error::invalid("eval selection is empty"));
        }
        if self.selections.contains(&Selection::Generation) && self.trials == 0 {
            return Err(Error::invalid("generation scoring needs at least one trial"));
        }
        if self.selections.contains(&Selection::Retrieval) && (self.ks.is_empty() || self.ks.contains(&0)) {
            return Err(Error::invalid("retrieval needs positive k values"));
        }
        Ok(())
    }
}

/// Pluggable parts of an evaluation.
#[derive(Default, Clone, Copy)]
pub struct EvalResources<'a> {
    pub embedder: Option<&'a dyn TextEmbedder>,
    pub oracle: Option<&'a dyn ActivationOracle>,
    pub conversations: Option<&'a dyn ConversationSource>,
    /// Paraphrases keyed by the stored label, for the paraphrase baseline.
    pub paraphrases: Option<&'a BTreeMap<String, Vec<String>>>,
}

/// One candidate label and what it scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_match: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allcaps: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse_errors: Option<usize>,
}

/// Best-of-N values for one item.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BestOf {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allcaps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub any_hit: Option<bool>,
}

/// items.jsonl line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub topic: String,
    pub best: BestOf,
    /// Scale of the first candidate achieving the best value of the first
    /// generation-based selection.
    pub winning_scale: Option<f64>,
    /// Number of candidates counted as valid (for the scale histogram).
    pub valid_scales: usize,
    pub candidates: Vec<CandidateRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<MeanSem>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_match: Option<MeanSem>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allcaps: Option<MeanSem>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RankMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<MeanSem>,
    /// Mean of per-item `any_hit`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    pub parse_errors: usize,
}

/// report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub items: usize,
    pub best_of: usize,
    pub window_start: usize,
    pub scales: Vec<f64>,
    pub selections: Vec<Selection>,
    pub aggregates: Aggregates,
    /// `histogram[c]`: items valid at exactly `c` of the candidates.
    pub histogram: Option<Vec<usize>>,
    pub backend_checksum: String,
}

/// Candidate labels for one item, before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCandidates {
    pub index: usize,
    pub candidates: Vec<(Option<f64>, String)>,
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Topic key of a record: its `title` extra, else its id.
pub fn topic_key(record: &Record) -> String {
    match record.extras.get("title").and_then(|v| v.as_str()) {
        Some(t) => t.to_string(),
        None => record.id.clone(),
    }
}

/// Latent name given to the activation oracle: the `latent` extra, else the id.
pub fn latent_name(record: &Record) -> String {
    match record.extras.get("latent") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(v) if !v.is_null() => v.to_string(),
        _ => record.id.clone(),
    }
}

/// One index document per topic, built from every record's labels.
pub fn topic_documents(ds: &Dataset) -> Vec<(String, String, Vec<String>)> {
    let mut docs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in ds.records() {
        let e = docs.entry(topic_key(r)).or_default();
        for l in &r.labels {
            if !e.contains(l) {
                e.push(l.clone());
            }
        }
    }
    docs.into_iter().map(|(k, d)| (k.clone(), k, d)).collect()
}

struct Scorer<'a> {
    cfg: &'a EvalConfig,
    res: EvalResources<'a>,
    index: Option<RetrievalIndex<'a>>,
}

impl<'a> Scorer<'a> {
    fn new(cfg: &'a EvalConfig, res: EvalResources<'a>, topics_from: &Dataset) -> Result<Self> {
        let wants = |s| cfg.selections.contains(&s) || cfg.calibration_metric == Some(s);
        let index = if wants(Selection::Retrieval) {
            let emb = res
                .embedder
                .ok_or_else(|| Error::invalid("retrieval selected without a text embedder"))?;
            Some(RetrievalIndex::build(emb, &topic_documents(topics_from))?)
        } else {
            None
        };
        if wants(Selection::Generation) && (res.oracle.is_none() || res.conversations.is_none()) {
            return Err(Error::invalid(
                "generation scoring selected without an oracle and conversation source",
            ));
        }
        Ok(Self { cfg, res, index })
    }

    fn score(&self, record: &Record, scale: Option<f64>, text: &str, with: &[Selection]) -> Result<CandidateRow> {
        let mut row = CandidateRow {
            scale,
            text: text.to_string(),
            label_match: None,
            allcaps: None,
            rank: None,
            hit_rate: None,
            parse_errors: None,
        };
        for sel in with {
            match sel {
                Selection::Loss => {}
                Selection::LabelMatch => {
                    let t = normalize_text(text);
                    row.label_match = Some(record.labels.iter().any(|l| normalize_text(l) == t));
                }
                Selection::Allcaps => row.allcaps = Some(allcaps_classify(text)),
                Selection::Retrieval => {
                    let idx = self.index.as_ref().expect("index built when retrieval is selected");
                    row.rank = Some(idx.rank(text, &topic_key(record))?);
                }
                Selection::Generation => {
                    let s = generation_score(
                        text,
                        &latent_name(record),
                        self.res.conversations.expect("checked"),
                        self.res.oracle.expect("checked"),
                        self.cfg.trials,
                        self.cfg.exclude_first_token,
                    )?;
                    row.hit_rate = Some(s.hit_rate);
                    row.parse_errors = Some(s.parse_errors);
                }
            }
        }
        Ok(row)
    }

    /// Scalar used for calibration: higher is better.
    fn calibration_value(&self, sel: Selection, row: &CandidateRow) -> Result<f64> {
        Ok(match sel {
            Selection::LabelMatch => row.label_match.map_or(0.0, |b| b as u8 as f64),
            Selection::Allcaps => row.allcaps.map_or(0.0, |b| b as u8 as f64),
            Selection::Retrieval => row.rank.map_or(0.0, |r| 1.0 / r as f64),
            Selection::Generation => row.hit_rate.unwrap_or(0.0),
            Selection::Loss => return Err(Error::invalid("loss cannot calibrate the scale window")),
        })
    }
}

fn is_valid(row: &CandidateRow, selections: &[Selection]) -> bool {
    if selections.contains(&Selection::Generation) {
        row.hit_rate.is_some_and(|h| h > 0.0)
    } else if selections.contains(&Selection::LabelMatch) {
        row.label_match == Some(true)
    } else if selections.contains(&Selection::Retrieval) {
        row.rank == Some(1)
    } else if selections.contains(&Selection::Allcaps) {
        row.allcaps == Some(true)
    } else {
        false
    }
}

fn first_best<T: PartialOrd + Copy>(rows: &[CandidateRow], value: impl Fn(&CandidateRow) -> Option<T>, higher: bool) -> Option<(T, Option<f64>)> {
    let mut best: Option<(T, Option<f64>)> = None;
    for r in rows {
        if let Some(v) = value(r) {
            let better = match best {
                None => true,
                Some((b, _)) => {
                    if higher {
                        v > b
                    } else {
                        v < b
                    }
                }
            };
            if better {
                best = Some((v, r.scale));
            }
        }
    }
    best
}

fn item_row(record: &Record, candidates: Vec<CandidateRow>, loss: Option<f64>, selections: &[Selection]) -> Result<ItemRow> {
    if candidates.is_empty() {
        return Err(Error::invalid(format!("item {} has no candidates", record.id)));
    }
    let flag = |b: Option<bool>| b.map(|b| b as u8 as f64);
    let lm = first_best(&candidates, |r| flag(r.label_match), true);
    let caps = first_best(&candidates, |r| flag(r.allcaps), true);
    let rank = first_best(&candidates, |r| r.rank, false);
    let hit = first_best(&candidates, |r| r.hit_rate, true);
    let mut winning_scale = None;
    for sel in selections {
        let s = match sel {
            Selection::LabelMatch => lm.map(|x| x.1),
            Selection::Allcaps => caps.map(|x| x.1),
            Selection::Retrieval => rank.map(|x| x.1),
            Selection::Generation => hit.map(|x| x.1),
            Selection::Loss => None,
        };
        if let Some(s) = s {
            winning_scale = s;
            break;
        }
    }
    Ok(ItemRow {
        id: record.id.clone(),
        topic: topic_key(record),
        best: BestOf {
            loss,
            label_match: lm.map(|x| x.0),
            allcaps: caps.map(|x| x.0),
            rank: rank.map(|x| x.0),
            hit_rate: hit.map(|x| x.0),
            any_hit: hit.map(|x| x.0 > 0.0),
        },
        winning_scale,
        valid_scales: candidates.iter().filter(|r| is_valid(r, selections)).count(),
        candidates,
    })
}

/// Recompute the report aggregates from per-item rows.
pub fn aggregate(rows: &[ItemRow], selections: &[Selection], ks: &[usize]) -> Result<Aggregates> {
    let collect = |f: &dyn Fn(&BestOf) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(&r.best)).collect() };
    let mut agg = Aggregates {
        parse_errors: rows
            .iter()
            .flat_map(|r| r.candidates.iter().filter_map(|c| c.parse_errors))
            .sum(),
        ..Aggregates::default()
    };
    for sel in selections {
        match sel {
            Selection::Loss => agg.loss = mean_sem(&collect(&|b| b.loss)),
            Selection::LabelMatch => agg.label_match = mean_sem(&collect(&|b| b.label_match)),
            Selection::Allcaps => agg.allcaps = mean_sem(&collect(&|b| b.allcaps)),
            Selection::Retrieval => {
                let ranks: Vec<usize> = rows.iter().filter_map(|r| r.best.rank).collect();
                agg.retrieval = Some(rank_metrics(&ranks, ks)?);
            }
            Selection::Generation => {
                agg.hit_rate = mean_sem(&collect(&|b| b.hit_rate));
                let any = collect(&|b| b.any_hit.map(|x| x as u8 as f64));
                agg.coverage = mean_sem(&any).map(|m| m.mean);
            }
        }
    }
    Ok(agg)
}

/// Report plus per-item rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rows: Vec<ItemRow>,
}

impl Evaluation {
    pub fn report_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.report)? + "\n")
    }

    pub fn items_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// `count,items` rows of the scale-sensitivity histogram.
    pub fn histogram_csv(&self) -> Option<String> {
        self.report.histogram.as_ref().map(|h| {
            let mut s = String::from("valid_scales,items\n");
            for (c, n) in h.iter().enumerate() {
                s.push_str(&format!("{c},{n}\n"));
            }
            s
        })
    }

    /// One row per item with its best-of-N value for each selection.
    pub fn best_of_csv(&self) -> String {
        let n = self.report.best_of;
        let mut header = vec!["id".to_string()];
        for sel in &self.report.selections {
            header.push(match sel {
                Selection::Loss => "loss".into(),
                Selection::LabelMatch => format!("label_match_best_of_{n}"),
                Selection::Allcaps => format!("allcaps_best_of_{n}"),
                Selection::Retrieval => format!("rank_best_of_{n}"),
                Selection::Generation => format!("hit_rate_best_of_{n}"),
            });
        }
        header.push("winning_scale".into());
        let mut s = header.join(",") + "\n";
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            let mut cells = vec![csv_field(&r.id)];
            for sel in &self.report.selections {
                cells.push(opt(match sel {
                    Selection::Loss => r.best.loss.map(|v| v.to_string()),
                    Selection::LabelMatch => r.best.label_match.map(|v| v.to_string()),
                    Selection::Allcaps => r.best.allcaps.map(|v| v.to_string()),
                    Selection::Retrieval => r.best.rank.map(|v| v.to_string()),
                    Selection::Generation => r.best.hit_rate.map(|v| v.to_string()),
                }));
            }
            cells.push(opt(r.winning_scale.map(|v| v.to_string())));
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn check_disjoint(eval: &Dataset, calibration: &Dataset) -> Result<()> {
    let ids: std::collections::BTreeSet<&str> = eval.ids().collect();
    let shared: Vec<String> = calibration.ids().filter(|i| ids.contains(i)).map(String::from).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "calibration subset overlaps the eval set: {}",
            shared.join(", ")
        )))
    }
}

/// Score precomputed candidates for every item of `ds`.
fn score_items(
    method: &str,
    ds: &Dataset,
    items: Vec<ItemCandidates>,
    losses: Option<Vec<f64>>,
    cfg: &EvalConfig,
    scorer: &Scorer<'_>,
    window_start: usize,
    lm: &dyn FrozenLm,
) -> Result<Evaluation> {
    let scored: Vec<Vec<CandidateRow>> = items
        .par_iter()
        .map(|it| {
            let rec = &ds.records()[it.index];
            it.candidates
                .iter()
                .map(|(scale, text)| scorer.score(rec, *scale, text, &cfg.selections))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(items.len());
    for (k, (it, cands)) in items.iter().zip(scored).enumerate() {
        let loss = losses.as_ref().map(|l| l[k]);
        rows.push(item_row(&ds.records()[it.index], cands, loss, &cfg.selections)?);
    }
    let aggregates = aggregate(&rows, &cfg.selections, &cfg.ks)?;
    let best_of = items.iter().map(|i| i.candidates.len()).max().unwrap_or(0);
    let generation_based = cfg.selections.iter().any(|s| *s != Selection::Loss);
    let histogram = if generation_based {
        let valid: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| r.candidates.iter().map(|c| is_valid(c, &cfg.selections)).collect())
            .collect();
        scale_sensitivity_histogram(&valid).ok()
    } else {
        None
    };
    let grid = cfg.grid.clone().with_start(window_start)?;
    Ok(Evaluation {
        report: EvalReport {
            method: method.to_string(),
            items: rows.len(),
            best_of,
            window_start,
            scales: grid.active().to_vec(),
            selections: cfg.selections.clone(),
            aggregates,
            histogram,
            backend_checksum: lm.weights_checksum(),
        },
        rows,
    })
}

/// Evaluate a trained adapter on `ds`. With a `calibration` set, the scale
/// window is chosen on it first using `cfg.calibration_metric`.
pub fn evaluate(
    method: &str,
    adapter: &Adapter,
    lm: &dyn FrozenLm,
    template: &TargetTemplate,
    ds: &Dataset,
    calibration: Option<&Dataset>,
    cfg: &EvalConfig,
    res: EvalResources<'_>,
) -> Result<Evaluation> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("eval set is empty"));
    }
    let d = lm.info().dims.d();
    if adapter.dims().d() != d || ds.d() != d {
        return Err(Error::Dimension {
            expected: d,
            got: if adapter.dims().d() != d { adapter.dims().d() } else { ds.d() },
        });
    }
    let rendered = template.render(lm)?;
    let scorer = Scorer::new(cfg, res, ds)?;

    let mut window_start = cfg.grid.window_start();
    if let Some(cal) = calibration {
        check_disjoint(ds, cal)?;
        let metric = cfg
            .calibration_metric
            .ok_or_else(|| Error::invalid("calibration set given without a calibration metric"))?;
        let subset: Vec<(String, Vec<f64>)> = (0..cal.len())
            .map(|i| (cal.records()[i].id.clone(), cal.vector_f64(i)))
            .collect();
        let cal_scorer = Scorer::new(cfg, res, cal)?;
        window_start = calibrate_window(
            adapter,
            lm,
            &rendered,
            &subset,
            &cfg.grid,
            &cfg.generation,
            cfg.scale_mode,
            &|item, g| {
                let row = cal_scorer.score(&cal.records()[item], Some(g.scale), &g.record.text, &[metric])?;
                cal_scorer.calibration_value(metric, &row)
            },
        )?;
    }
    let grid = cfg.grid.clone().with_start(window_start)?;

    let items: Vec<ItemCandidates> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let gens = generate_multiscale(
                adapter,
                lm,
                &rendered,
                &ds.records()[i].id,
                &ds.vector_f64(i),
                &grid,
                GridScope::Window,
                &cfg.generation,
                cfg.scale_mode,
            )?;
            Ok(ItemCandidates {
                index: i,
                candidates: gens.into_iter().map(|g| (Some(g.scale), g.record.text)).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let losses = if cfg.selections.contains(&Selection::Loss) {
        Some(
            (0..ds.len())
                .into_par_iter()
                .map(|i| crate::train::validate(adapter, lm, template, &ds.select(&[i])?, cfg.label_format))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    score_items(method, ds, items, losses, cfg, &scorer, window_start, lm)
}

/// Evaluate a baseline on `ds` with the same scoring as [`evaluate`].
pub fn evaluate_baseline(
    mode: BaselineMode,
    lm: &dyn FrozenLm,
    template: &TargetTemplate,
    ds: &Dataset,
    cfg: &EvalConfig,
    res: EvalResources<'_>,
) -> Result<Evaluation> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("eval set is empty"));
    }
    let mut cfg = cfg.clone();
    cfg.selections.retain(|s| *s != Selection::Loss);
    if cfg.selections.is_empty() {
        return Err(Error::invalid("baselines have no loss; select a generation-based metric"));
    }
    let scorer = Scorer::new(&cfg, res, ds)?;
    let n = cfg.grid.window();
    let rendered = match mode {
        BaselineMode::UntrainedSelfie => Some(template.render(lm)?),
        _ => None,
    };
    let items: Vec<ItemCandidates> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let rec = &ds.records()[i];
            let label = rec
                .labels
                .first()
                .ok_or_else(|| Error::invalid(format!("record {} has no label", rec.id)))?;
            let candidates: Vec<(Option<f64>, String)> = match mode {
                BaselineMode::RepeatX6 => repeat_label(label, n).into_iter().map(|t| (None, t)).collect(),
                BaselineMode::OriginalPlusParaphrases => {
                    let p = res.paraphrases.and_then(|m| m.get(label)).map(Vec::as_slice);
                    original_plus_paraphrases(label, p, n)?
                        .into_iter()
                        .map(|t| (None, t))
                        .collect()
                }
                BaselineMode::UntrainedSelfie => untrained_selfie(
                    lm,
                    rendered.as_ref().expect("rendered"),
                    &rec.id,
                    &ds.vector_f64(i),
                    &cfg.grid,
                    &cfg.generation,
                    cfg.scale_mode,
                )?
                .into_iter()
                .map(|g| (Some(g.scale), g.record.text))
                .collect(),
                BaselineMode::Taboo => {
                    let title = topic_key(rec);
                    let prompt = taboo_prompt(&title, &title, None)?;
                    let copies = if cfg.generation.sampling == crate::lm::Sampling::Greedy { 1 } else { n };
                    (0..copies)
                        .map(|k| {
                            let g = GenerationConfig {
                                seed: cell_seed(cfg.generation.seed, &rec.id, k),
                                ..cfg.generation
                            };
                            Ok((None, generate_plain(lm, None, &prompt, &g)?.text))
                        })
                        .collect::<Result<_>>()?
                }
            };
            Ok(ItemCandidates { index: i, candidates })
        })
        .collect::<Result<_>>()?;
    let window_start = cfg.grid.window_start();
    score_items(mode.name(), ds, items, None, &cfg, &scorer, window_start, lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetBuilder, Origin, RecordMeta};
    use crate::lm::toy::ToyLm;
    use crate::lm::Sampling;
    use proptest::prelude::*;

    #[test]
    fn histogram_examples() {
        let h = scale_sensitivity_histogram(&[vec![true, true, false], vec![false, false, false]]).unwrap();
        assert_eq!(h, vec![1, 0, 1, 0]);
        assert_eq!(scale_sensitivity_histogram(&vec![vec![true; 6]; 4]).unwrap(), vec![0, 0, 0, 0, 0, 0, 4]);
        assert!(scale_sensitivity_histogram(&[vec![true], vec![true, false]]).is_err());
    }

    #[test]
    fn allcaps_examples() {
        assert!(allcaps_classify("QUEUE DRAINING AND RETRIES IN NETWORKING"));
        assert!(!allcaps_classify("by\" or \"with\" in Dutch. It's an adverb"));
        assert!(!allcaps_classify("1234 - !"));
        assert!(!allcaps_classify(""));
        assert!(allcaps_classify("C3PO!"));
    }

    #[test]
    fn mean_sem_values() {
        let m = mean_sem(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.sem - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sem(&[7.0]).unwrap().sem, 0.0);
        assert!(mean_sem(&[]).is_none());
    }

    #[test]
    fn baseline_label_lists() {
        assert_eq!(repeat_label("a", 6), vec!["a"; 6]);
        let p: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let got = original_plus_paraphrases("a", Some(&p), 6).unwrap();
        assert_eq!(got.len(), 6);
        assert_eq!(got[0], "a");
        assert!(original_plus_paraphrases("a", None, 6).is_err());
        assert!(original_plus_paraphrases("a", Some(&p[..2]), 6).is_err());
    }

    #[test]
    fn untrained_matches_identity_path() {
        let lm = ToyLm::echo(16, 16, 3).unwrap();
        let t = TargetTemplate::default().render(&lm).unwrap();
        let h: Vec<f64> = lm.readout_row(6);
        let grid = ScaleGrid::default().with_start(3).unwrap();
        let gen = GenerationConfig {
            sampling: Sampling::temperature(0.7),
            max_tokens: 4,
            seed: 9,
        };
        for mode in [ScaleMode::Input, ScaleMode::Output] {
            let a = untrained_selfie(&lm, &t, "x", &h, &grid, &gen, mode).unwrap();
            let id = Adapter::identity(ModelDims::new(16).unwrap());
            let b = generate_multiscale(&id, &lm, &t, "x", &h, &grid, GridScope::Window, &gen, mode).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 6);
        }
    }

    fn toy_dataset(lm: &ToyLm, ids: &[usize]) -> Dataset {
        let mut b = DatasetBuilder::new(lm.info().dims.d());
        for &t in ids {
            let mut extras = BTreeMap::new();
            extras.insert("title".into(), serde_json::json!(format!("topic {t}")));
            b.push(
                RecordMeta {
                    id: format!("r{t}"),
                    layer: 0,
                    labels: vec![lm.toy_tokenizer().piece(t as u32).unwrap().to_string()],
                    origin: Origin::Synthetic,
                    extras,
                },
                &lm.readout_row(t as u32),
                1.0,
            )
            .unwrap();
        }
        b.finish().unwrap()
    }

    #[test]
    fn identity_adapter_on_echo_matches_labels() {
        let lm = ToyLm::echo(16, 16, 3).unwrap();
        let ds = toy_dataset(&lm, &[4, 5, 6, 7]);
        let cfg = EvalConfig {
            selections: vec![Selection::LabelMatch, Selection::Retrieval, Selection::Loss],
            generation: GenerationConfig {
                max_tokens: 1,
                ..Default::default()
            },
            ks: vec![1, 4],
            label_format: LabelFormat::Raw,
            ..Default::default()
        };
        let emb = HashingEmbedder::default();
        let res = EvalResources {
            embedder: Some(&emb),
            ..Default::default()
        };
        let id = Adapter::identity(ModelDims::new(16).unwrap());
        let ev = evaluate("identity", &id, &lm, &TargetTemplate::default(), &ds, None, &cfg, res).unwrap();
        assert_eq!(ev.rows.len(), 4);
        for r in &ev.rows {
            assert_eq!(r.best.label_match, Some(1.0));
            assert_eq!(r.candidates.len(), 6);
        }
        let again = aggregate(&ev.rows, &cfg.selections, &cfg.ks).unwrap();
        assert_eq!(again, ev.report.aggregates);
        assert_eq!(ev.report.histogram.as_ref().unwrap().iter().sum::<usize>(), 4);
        assert!(ev.best_of_csv().starts_with("id,label_match_best_of_6,rank_best_of_6,loss,winning_scale\n"));

        let cal = toy_dataset(&lm, &[8, 9]);
        let cfg2 = EvalConfig {
            calibration_metric: Some(Selection::LabelMatch),
            ..cfg.clone()
        };
        assert!(evaluate("x", &id, &lm, &TargetTemplate::default(), &ds, Some(&cal), &cfg, res).is_err());
        let ev2 = evaluate("x", &id, &lm, &TargetTemplate::default(), &ds, Some(&cal), &cfg2, res).unwrap();
        assert_eq!(ev2.report.window_start, 0);
        assert!(evaluate("x", &id, &lm, &TargetTemplate::default(), &ds, Some(&ds), &cfg2, res).is_err());
    }

    #[test]
    fn baselines_pipeline() {
        let lm = ToyLm::echo(16, 16, 3).unwrap();
        let ds = toy_dataset(&lm, &[4, 5]);
        let cfg = EvalConfig {
            selections: vec![Selection::LabelMatch, Selection::Generation],
            generation: GenerationConfig {
                max_tokens: 2,
                ..Default::default()
            },
            trials: 3,
            ..Default::default()
        };
        let oracle = KeywordOracle::new().with_latent("r4", &["w4"]).with_latent("r5", &["w5"]);
        let convs = ScriptedConversations(vec!["[USER] say w4\n[ASSISTANT] w4".into()]);
        let res = EvalResources {
            oracle: Some(&oracle),
            conversations: Some(&convs),
            ..Default::default()
        };
        let ev = evaluate_baseline(BaselineMode::RepeatX6, &lm, &TargetTemplate::default(), &ds, &cfg, res).unwrap();
        assert_eq!(ev.report.best_of, 6);
        assert_eq!(ev.report.aggregates.label_match.unwrap().mean, 1.0);
        assert_eq!(ev.rows[0].best.hit_rate, Some(1.0));
        assert_eq!(ev.rows[1].best.hit_rate, Some(0.0));
        assert_eq!(ev.report.aggregates.coverage, Some(0.5));
        assert_eq!(ev.report.histogram, Some(vec![1, 0, 0, 0, 0, 0, 1]));
        assert!(evaluate_baseline(BaselineMode::OriginalPlusParaphrases, &lm, &TargetTemplate::default(), &ds, &cfg, res).is_err());
        let u = evaluate_baseline(BaselineMode::UntrainedSelfie, &lm, &TargetTemplate::default(), &ds, &cfg, res).unwrap();
        assert_eq!(u.rows[0].candidates.len(), 6);
        let empty = EvalConfig {
            selections: vec![],
            ..cfg.clone()
        };
        assert!(evaluate_baseline(BaselineMode::RepeatX6, &lm, &TargetTemplate::default(), &ds, &empty, res).is_err());
        let none = EvalResources::default();
        assert!(evaluate_baseline(BaselineMode::RepeatX6, &lm, &TargetTemplate::default(), &ds, &cfg, none).is_err());
    }

    proptest! {
        #[test]
        fn histogram_conserves_items(rows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 6), 0..20)) {
            let h = scale_sensitivity_histogram(&rows).unwrap();
            prop_assert_eq!(h.iter().sum::<usize>(), rows.len());
        }

        #[test]
        fn coverage_at_least_mean_hit_rate(hits in proptest::collection::vec(0usize..=10, 1..30)) {
            let rows: Vec<ItemRow> = hits.iter().enumerate().map(|(i, &h)| ItemRow {
                id: i.to_string(),
                topic: i.to_string(),
                best: BestOf { hit_rate: Some(h as f64 / 10.0), any_hit: Some(h > 0), ..Default::default() },
                winning_scale: None,
                valid_scales: 0,
                candidates: vec![],
            }).collect();
            let a = aggregate(&rows, &[Selection::Generation], &[]).unwrap();
            prop_assert!(a.coverage.unwrap() >= a.hit_rate.unwrap().mean - 1e-15);
        }
    }
}
