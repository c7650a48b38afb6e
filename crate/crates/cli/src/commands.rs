//! The train, eval, probe, data and plot commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use selfie_core::adapter::checkpoint::{self, CheckpointMeta};
use selfie_core::data::synth::{planted_rotation, teacher_task, PlantedSpec};
use selfie_core::data::{
    extract_contrastive, extract_contrastive_pooled, ingest_sae, middle_half_layers, pca_cumulative_variance, split,
    subsample, transform_labels, Dataset, LabelTransform, VectorBank,
};
use selfie_core::data::ingest::read_topics;
use selfie_core::eval::{
    evaluate, evaluate_baseline, latent_name, ActivationOracle, ConversationSource, EvalResources, Evaluation,
    HashingEmbedder, KeywordOracle, LmConversations, ScriptedConversations,
};
use selfie_core::lm::{BackendKind, BackendRegistry, FrozenLm, ToyLm, ToyLmConfig, ToyVariant};
use selfie_core::probe::{
    aggregate_detection, align_pairs, bridge_heatmap, dataset_mean_path, describe_novel_prompt, read_cases,
    read_dataset_mean, write_dataset_mean, zero_vector_probe, HeatmapGrid,
};
use selfie_core::train::{architecture_sweep, sweep_csv, train};
use selfie_core::{Adapter, AdapterInit};

use crate::args::{Cli, Command, DataCommand, ProbeCommand};
use crate::config::{read_json, KeywordMap, RunConfig, SyntheticTask};
use crate::{plot, write_file, write_json, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// Resolve the configuration and run the command.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    run_with(&cfg, &cli.command, cli.global.plot)
}

pub fn run_with(cfg: &RunConfig, command: &Command, plot: bool) -> Result<()> {
    match command {
        Command::Train => cmd_train(cfg, plot).map(|_| ()),
        Command::Eval => cmd_eval(cfg, plot),
        Command::Probe { probe } => cmd_probe(cfg, probe, plot),
        Command::Data { op } => cmd_data(cfg, op),
        Command::Plot { input } => {
            for p in input {
                for out in plot::plot_artifact(p, &cfg.out)? {
                    println!("{}", out.display());
                }
            }
            Ok(())
        }
    }
}

fn toy_variant(name: &str) -> Option<ToyVariant> {
    match name {
        "echo" => Some(ToyVariant::Echo),
        "mix" => Some(ToyVariant::Mix),
        _ => None,
    }
}

/// The configured backend; toy backends are also returned concretely so
/// synthetic tasks can read their readout.
pub fn backend(cfg: &RunConfig) -> Result<(Box<dyn FrozenLm>, Option<ToyLm>)> {
    if cfg.backend.kind == BackendKind::Toy {
        if let Some(v) = toy_variant(&cfg.backend.name) {
            let toy = ToyLm::new(v, &ToyLmConfig::from(&cfg.backend))?;
            return Ok((Box::new(toy.clone()), Some(toy)));
        }
    }
    Ok((BackendRegistry::default().build(&cfg.backend)?, None))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load(path)?)
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    /// Manifest the training set came from, for sidecar lookup.
    pub train_path: Option<PathBuf>,
}

/// Training and validation data from files, a split manifest, or a synthetic task.
pub fn load_splits(cfg: &RunConfig, toy: Option<&ToyLm>) -> Result<Splits> {
    let d = &cfg.data;
    if let (Some(tr), Some(va)) = (&d.train, &d.val) {
        return Ok(Splits {
            train: load_dataset(tr)?,
            val: load_dataset(va)?,
            test: None,
            train_path: Some(tr.clone()),
        });
    }
    if let Some(path) = &d.dataset {
        let s = split(&load_dataset(path)?, &d.split.unwrap_or_default())?;
        return Ok(Splits {
            train: s.train,
            val: s.val,
            test: Some(s.test),
            train_path: Some(path.clone()),
        });
    }
    if let Some(task) = &d.synthetic {
        let toy = toy.ok_or_else(|| {
            CliError::Usage(format!(
                "synthetic tasks need a toy backend (echo or mix), not `{}`",
                cfg.backend.name
            ))
        })?;
        let (train, val) = match task {
            SyntheticTask::Planted(p) => {
                let t = planted_rotation(toy, p)?;
                (t.train, t.val)
            }
            SyntheticTask::Teacher(t) => {
                let t = teacher_task(toy, t)?;
                (t.train, t.val)
            }
        };
        return Ok(Splits {
            train,
            val,
            test: None,
            train_path: None,
        });
    }
    Err(CliError::Usage(
        "no data: set data.train and data.val, data.dataset, or data.synthetic".into(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub kind: String,
    pub params: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub backend_checksum: String,
    pub backend_unchanged: bool,
}

pub fn cmd_train(cfg: &RunConfig, plot_flag: bool) -> Result<TrainSummary> {
    let (lm, toy) = backend(cfg)?;
    let data = load_splits(cfg, toy.as_ref())?;
    let checksum_before = lm.weights_checksum();
    let dims = lm.info().dims;
    let init = Adapter::init(
        cfg.adapter,
        dims,
        &AdapterInit {
            alpha0: cfg.train.alpha_init,
            seed: cfg.train.seed,
        },
    )?;
    let out = train(&init, lm.as_ref(), &cfg.template, &data.train, &data.val, &cfg.train)?;
    let dir = &cfg.out;
    write_json(
        &dir.join("config.json"),
        &json!({
            "config": cfg,
            "inputs": {
                "train_digest": data.train.digest(),
                "val_digest": data.val.digest(),
                "train_config_digest": cfg.train.digest(),
                "backend_checksum": checksum_before,
            }
        }),
    )?;
    write_file(&dir.join("curve.jsonl"), out.curve.to_jsonl())?;
    write_file(&dir.join("timing.jsonl"), out.curve.timing_jsonl())?;
    let meta = CheckpointMeta {
        alpha_init: cfg.train.alpha_init,
        training_config_digest: cfg.train.digest(),
        seed: cfg.train.seed,
    };
    let ck = dir.join("checkpoints");
    std::fs::create_dir_all(&ck).map_err(|e| CliError::Io {
        path: ck.clone(),
        source: e,
    })?;
    let final_path = ck.join("final.siad");
    let best_path = ck.join("best.siad");
    checkpoint::save(&out.final_adapter, &meta, &final_path)?;
    checkpoint::save(&out.best_adapter, &meta, &best_path)?;
    if let Some(means) = data.train_path.as_deref().map(read_dataset_mean).transpose()?.flatten() {
        write_dataset_mean(&final_path, &means)?;
        write_dataset_mean(&best_path, &means)?;
    }
    let summary = TrainSummary {
        kind: cfg.adapter.name().to_string(),
        params: out.final_adapter.parameter_count(),
        steps: out.steps,
        final_train_loss: out.final_train_loss,
        final_val_loss: out.final_val_loss,
        best_val_loss: out.best_val_loss,
        best_step: out.best_step,
        backend_unchanged: lm.weights_checksum() == checksum_before,
        backend_checksum: out.backend_checksum.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if plot_flag {
        plot::loss_curve(&out.curve.points, &dir.join("plots/curve.png"))?;
    }
    Ok(summary)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --checkpoint (or `checkpoint` in the config)".into()))
}

fn load_adapter(cfg: &RunConfig, lm: &dyn FrozenLm) -> Result<Adapter> {
    let (adapter, _) = checkpoint::load(checkpoint_path(cfg)?)?;
    let d = lm.info().dims.d();
    if adapter.dims().d() != d {
        return Err(selfie_core::Error::Dimension {
            expected: d,
            got: adapter.dims().d(),
        }
        .into());
    }
    Ok(adapter)
}

fn keyword_oracle(cfg: &RunConfig, ds: &Dataset) -> Result<KeywordOracle> {
    let labels: Vec<(String, String)> = ds
        .records()
        .iter()
        .map(|r| (latent_name(r), r.labels.first().cloned().unwrap_or_default()))
        .collect();
    let mut oracle = KeywordOracle::from_labels(labels.iter().map(|(a, b)| (a.as_str(), b.as_str())));
    if let Some(p) = &cfg.eval.keywords {
        let map: KeywordMap = read_json(p)?;
        for (latent, words) in &map {
            let w: Vec<&str> = words.iter().map(String::as_str).collect();
            oracle = oracle.with_latent(latent, &w);
        }
    }
    Ok(oracle)
}

fn method_csv(method: &str, csv: &str, first: bool) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            if first {
                out.push_str(&format!("method,{line}\n"));
            }
        } else {
            out.push_str(&format!("{method},{line}\n"));
        }
    }
    out
}

pub fn cmd_eval(cfg: &RunConfig, plot_flag: bool) -> Result<()> {
    let ev = &cfg.eval;
    if ev.config.selections.is_empty() && ev.sweep.is_empty() {
        return Err(CliError::Usage("eval selection is empty".into()));
    }
    let (lm, toy) = backend(cfg)?;
    if !ev.sweep.is_empty() {
        let data = load_splits(cfg, toy.as_ref())?;
        let rows = architecture_sweep(&ev.sweep, lm.as_ref(), &cfg.template, &data.train, &data.val, &cfg.train)?;
        write_file(&cfg.out.join("sweep.csv"), sweep_csv(&rows))?;
        write_json(&cfg.out.join("sweep.json"), &rows)?;
        return Ok(());
    }
    let adapter = load_adapter(cfg, lm.as_ref())?;
    let eval_set = match &cfg.data.eval {
        Some(p) => load_dataset(p)?,
        None => {
            let s = load_splits(cfg, toy.as_ref())?;
            s.test.filter(|t| !t.is_empty()).unwrap_or(s.val)
        }
    };
    let calibration = cfg.data.calibration.as_deref().map(load_dataset).transpose()?;
    let embedder = HashingEmbedder {
        dim: ev.embedder_dim,
        n: ev.embedder_ngram,
    };
    let oracle = keyword_oracle(cfg, &eval_set)?;
    let scripted = match &ev.conversations {
        Some(p) => Some(ScriptedConversations(read_json(p)?)),
        None => None,
    };
    let generated = LmConversations::new(lm.as_ref(), ev.config.generation.seed);
    let conversations: &dyn ConversationSource = match &scripted {
        Some(s) => s,
        None => &generated,
    };
    let paraphrases: Option<BTreeMap<String, Vec<String>>> =
        ev.paraphrases.as_deref().map(read_json).transpose()?;
    let res = EvalResources {
        embedder: Some(&embedder),
        oracle: Some(&oracle as &dyn ActivationOracle),
        conversations: Some(conversations),
        paraphrases: paraphrases.as_ref(),
    };
    let mut evals: Vec<Evaluation> = vec![evaluate(
        "adapter",
        &adapter,
        lm.as_ref(),
        &cfg.template,
        &eval_set,
        calibration.as_ref(),
        &ev.config,
        res,
    )?];
    for &b in &ev.baselines {
        let mut bcfg = ev.config.clone();
        bcfg.grid = bcfg.grid.with_start(evals[0].report.window_start)?;
        evals.push(evaluate_baseline(b, lm.as_ref(), &cfg.template, &eval_set, &bcfg, res)?);
    }
    write_outputs(&cfg.out, &evals, plot_flag)
}

fn write_outputs(dir: &Path, evals: &[Evaluation], plot_flag: bool) -> Result<()> {
    let reports: Vec<_> = evals.iter().map(|e| &e.report).collect();
    write_json(&dir.join("report.json"), &json!({ "methods": reports }))?;
    let mut items = String::new();
    let mut best = String::new();
    let mut hist = String::new();
    for (i, e) in evals.iter().enumerate() {
        for r in &e.rows {
            let mut v = serde_json::to_value(r).map_err(selfie_core::Error::from)?;
            v.as_object_mut()
                .expect("row is an object")
                .insert("method".into(), json!(e.report.method));
            items.push_str(&serde_json::to_string(&v).map_err(selfie_core::Error::from)?);
            items.push('\n');
        }
        best.push_str(&method_csv(&e.report.method, &e.best_of_csv(), i == 0));
        if let Some(h) = e.histogram_csv() {
            hist.push_str(&method_csv(&e.report.method, &h, hist.is_empty()));
            if plot_flag {
                let counts: Vec<f64> = e.report.histogram.iter().flatten().map(|&c| c as f64).collect();
                plot::bar_plot(&counts, &dir.join(format!("plots/histogram_{}.png", e.report.method)))?;
            }
        }
    }
    write_file(&dir.join("items.jsonl"), items)?;
    write_file(&dir.join("best_of.csv"), best)?;
    if !hist.is_empty() {
        write_file(&dir.join("histogram.csv"), hist)?;
    }
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, probe: &ProbeCommand, plot_flag: bool) -> Result<()> {
    let (lm, _) = backend(cfg)?;
    let lm = lm.as_ref();
    let p = &cfg.probe;
    match probe {
        ProbeCommand::Bridge { cases } => {
            let path = cases.as_ref().or(p.cases.as_ref()).ok_or_else(|| {
                CliError::Usage("bridge probe needs a case file: pass --cases (or set probe.cases)".into())
            })?;
            let cases = read_cases(path)?;
            let adapter = load_adapter(cfg, lm)?;
            let untrained = Adapter::identity(lm.info().dims);
            let rendered = cfg.template.render(lm)?;
            let layers: Vec<usize> = if p.layers.is_empty() {
                (0..=lm.info().layers).collect()
            } else {
                p.layers.clone()
            };
            let grid = &cfg.eval.config.grid;
            let mut trained_grids = Vec::new();
            let mut untrained_grids = Vec::new();
            let mut rows = Vec::new();
            for case in &cases {
                let positions: Vec<usize> = if p.positions.is_empty() {
                    (0..lm.encode_for_extraction(&case.prompt).len()).collect()
                } else {
                    p.positions.clone()
                };
                let t = bridge_heatmap(&adapter, lm, &rendered, case, &layers, &positions, grid, &p.heatmap)?;
                let u = if p.untrained {
                    Some(bridge_heatmap(&untrained, lm, &rendered, case, &layers, &positions, grid, &p.heatmap)?)
                } else {
                    None
                };
                rows.push(json!({"prompt": case.prompt, "trained": t, "untrained": u}));
                trained_grids.push(t);
                if let Some(u) = u {
                    untrained_grids.push(u);
                }
            }
            write_json(&cfg.out.join("heatmaps.json"), &json!({ "cases": rows }))?;
            let base: Vec<HeatmapGrid> = if p.untrained {
                untrained_grids
            } else {
                trained_grids.iter().map(zero_like).collect::<Result<_>>()?
            };
            let (t, u) = align_pairs(&trained_grids, &base)?;
            write_json(&cfg.out.join("summary.json"), &aggregate_detection(&t, &u)?)?;
            if plot_flag {
                plot::plot_artifact(&cfg.out.join("heatmaps.json"), &cfg.out.join("plots"))?;
            }
            Ok(())
        }
        ProbeCommand::Zero => {
            let adapter = load_adapter(cfg, lm)?;
            let rendered = cfg.template.render(lm)?;
            let z = zero_vector_probe(
                &adapter,
                lm,
                &rendered,
                p.zero_sampling,
                p.zero_samples,
                p.max_tokens,
                cfg.eval.config.generation.seed,
            )?;
            match z.equals_bias {
                Some(eq) => println!("injected vector equals bias: {eq}"),
                None => println!("adapter has no bias; injected vector is f(0)"),
            }
            println!("greedy: {}", z.greedy_text);
            write_json(&cfg.out.join("zero_probe.json"), &z)
        }
        ProbeCommand::Novel {
            prompt,
            layer,
            contrastive,
        } => {
            let text = prompt
                .as_ref()
                .or(p.prompt.as_ref())
                .ok_or_else(|| CliError::Usage("novel probe needs --prompt (or probe.prompt)".into()))?;
            let layer = layer.unwrap_or(p.layer);
            let adapter = load_adapter(cfg, lm)?;
            let rendered = cfg.template.render(lm)?;
            let mut ncfg = p.novel.clone();
            ncfg.contrastive |= *contrastive;
            let means = read_dataset_mean(checkpoint_path(cfg)?)?;
            let mean = means.as_ref().and_then(|m| m.get(&layer)).map(Vec::as_slice);
            if ncfg.contrastive && mean.is_none() {
                return Err(selfie_core::Error::InvalidArgument(format!(
                    "contrastive preprocessing requested but {} has no mean for layer {layer}",
                    dataset_mean_path(checkpoint_path(cfg)?).display()
                ))
                .into());
            }
            let texts = describe_novel_prompt(&adapter, lm, &rendered, text, layer, mean, &ncfg)?;
            for t in &texts {
                println!("{t}");
            }
            write_json(
                &cfg.out.join("novel.json"),
                &json!({"prompt": text, "layer": layer, "config": ncfg, "texts": texts}),
            )
        }
    }
}

fn zero_like(g: &HeatmapGrid) -> Result<HeatmapGrid> {
    Ok(HeatmapGrid::from_counts(
        g.layers.clone(),
        g.positions.clone(),
        g.samples_per_cell,
        g.temperature,
        vec![0; g.counts.len()],
    )?)
}

pub fn cmd_data(cfg: &RunConfig, op: &DataCommand) -> Result<()> {
    let manifest = cfg.out.join("dataset.jsonl");
    let ensure_out = || {
        std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io {
            path: cfg.out.clone(),
            source: e,
        })
    };
    match op {
        DataCommand::IngestSae { bank, labels, layer } => {
            let bank = VectorBank::read(bank)?;
            let raw: BTreeMap<String, String> = read_json(labels)?;
            let mut map = BTreeMap::new();
            for (k, v) in raw {
                let idx = k.parse::<usize>().map_err(|_| CliError::Config {
                    path: labels.clone(),
                    reason: format!("`{k}` is not a row index"),
                })?;
                map.insert(idx, v);
            }
            let ds = ingest_sae(&bank, &map, *layer)?;
            ensure_out()?;
            ds.save(&manifest)?;
        }
        DataCommand::ExtractContrastive { topics, layers } => {
            let (lm, _) = backend(cfg)?;
            let topics = read_topics(topics)?;
            let layers = if layers.is_empty() {
                middle_half_layers(lm.info().layers)
            } else {
                layers.clone()
            };
            let c = if layers.len() == 1 {
                extract_contrastive(lm.as_ref(), &topics, layers[0])?
            } else {
                extract_contrastive_pooled(lm.as_ref(), &topics, &layers)?
            };
            ensure_out()?;
            c.dataset.save(&manifest)?;
            write_dataset_mean(&manifest, &c.means)?;
        }
        DataCommand::Transform {
            input,
            uppercase,
            paraphrases,
        } => {
            let mut ds = load_dataset(input)?;
            if !uppercase && paraphrases.is_none() {
                return Err(CliError::Usage("transform needs --uppercase or --paraphrases".into()));
            }
            if let Some(p) = paraphrases {
                let map: BTreeMap<String, Vec<String>> = read_json(p)?;
                ds = transform_labels(&ds, &LabelTransform::ParaphraseImport(map))?;
            }
            if *uppercase {
                ds = transform_labels(&ds, &LabelTransform::Uppercase)?;
            }
            ensure_out()?;
            ds.save(&manifest)?;
            copy_means(input, &manifest)?;
        }
        DataCommand::Subsample { input, fraction } => {
            let seed = cfg.seed.unwrap_or(0);
            let ds = subsample(&load_dataset(input)?, *fraction, seed)?;
            ensure_out()?;
            ds.save(&manifest)?;
            copy_means(input, &manifest)?;
        }
        DataCommand::Pca { input } => {
            let cum = pca_cumulative_variance(&load_dataset(input)?)?;
            let mut s = String::from("component,cumulative_variance\n");
            for (i, v) in cum.iter().enumerate() {
                s.push_str(&format!("{},{v}\n", i + 1));
            }
            write_file(&cfg.out.join("pca.csv"), s)?;
        }
        DataCommand::Synth => {
            let (_, toy) = backend(cfg)?;
            let toy = toy.ok_or_else(|| CliError::Usage("synth needs a toy backend (echo or mix)".into()))?;
            let task = cfg
                .data
                .synthetic
                .clone()
                .unwrap_or(SyntheticTask::Planted(PlantedSpec {
                    seed: cfg.seed.unwrap_or(0),
                    ..Default::default()
                }));
            let (train, val) = match &task {
                SyntheticTask::Planted(p) => {
                    let t = planted_rotation(&toy, p)?;
                    (t.train, t.val)
                }
                SyntheticTask::Teacher(t) => {
                    let t = teacher_task(&toy, t)?;
                    (t.train, t.val)
                }
            };
            ensure_out()?;
            train.save(cfg.out.join("train.jsonl"))?;
            val.save(cfg.out.join("val.jsonl"))?;
        }
    }
    Ok(())
}

fn copy_means(from: &Path, to: &Path) -> Result<()> {
    if let Some(m) = read_dataset_mean(from)? {
        write_dataset_mean(to, &m)?;
    }
    Ok(())
}
