use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use promptlab::config::ExperimentConfig;
use promptlab::data::{generate_synthetic, load_dataset, Dataset};
use promptlab::diagnostics::{
    attention_response_map, gain_vs_variance_table, inter_class_text_variance_rows, intra_class_visual_variance,
    save_attention_map, write_gain_csv, VarianceReport,
};
use promptlab::encoder::{load_backbone, save_backbone, DualEncoder};
use promptlab::harness::{
    evaluate, evaluate_shifted, run_episode, run_matrix, summarize, write_csv, write_jsonl, write_summary_csv, CellResult,
    EpisodeSpec, RunRecord,
};
use promptlab::prompts::{load_strategy, save_strategy, PromptStrategy, StrategyKind};
use promptlab::{Error, Result, Scalar, Tensor};

use crate::Command;

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("cannot serialize: {e}")))?;
    fs::write(path, json + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset<f32>> {
    match &cfg.dataset.path {
        Some(p) => Ok(load_dataset(p)?.1),
        None => Ok(generate_synthetic(&cfg.dataset.synthetic, &cfg.output_dir.join("data"))?.1),
    }
}

fn backbone<S: Scalar>(cfg: &ExperimentConfig) -> Result<DualEncoder<S>> {
    match &cfg.backbone {
        Some(p) => load_backbone(p),
        None => DualEncoder::init(&cfg.encoder, cfg.seed),
    }
}

fn prompts_dir(cfg: &ExperimentConfig, kind: StrategyKind) -> PathBuf {
    cfg.output_dir.join("prompts").join(kind.name())
}

/// Trains the configured strategy on one episode and saves its prompts.
fn train_one<S: Scalar>(
    cfg: &ExperimentConfig,
    data: &Dataset<f32>,
    encoder: &DualEncoder<S>,
) -> Result<(RunRecord, PromptStrategy<S>)> {
    let episode = EpisodeSpec::new(cfg.shots, cfg.seed)?;
    let (record, strategy) = run_episode(
        data,
        encoder,
        cfg.strategy,
        &cfg.strategy_config,
        &cfg.train,
        &episode,
        &cfg.shifts,
    )?;
    save_strategy(&strategy, encoder, &prompts_dir(cfg, cfg.strategy))?;
    write_json(&record, &cfg.output_dir.join("run.json"))?;
    Ok((record, strategy))
}

fn strategy_for<S: Scalar>(
    cfg: &ExperimentConfig,
    prompts: Option<&Path>,
    data: &Dataset<f32>,
    encoder: &DualEncoder<S>,
) -> Result<PromptStrategy<S>> {
    match prompts {
        Some(p) => load_strategy(p, encoder),
        None => Ok(train_one(cfg, data, encoder)?.1),
    }
}

pub fn run<S: Scalar>(command: &Command, cfg: &ExperimentConfig) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    cfg.save(&cfg.output_dir.join("config.json"))?;
    match command {
        Command::GenData { .. } => {
            let dir = cfg.output_dir.join("data");
            let (manifest, _) = generate_synthetic(&cfg.dataset.synthetic, &dir)?;
            println!("manifest={}", dir.join("manifest.json").display());
            println!("classes={}", manifest.class_names.join(","));
        }
        Command::InitBackbone => {
            let encoder = DualEncoder::<S>::init(&cfg.encoder, cfg.seed)?;
            let dir = cfg.output_dir.join("backbone");
            save_backbone(&encoder, &dir)?;
            println!("backbone={}", dir.display());
            println!("params={}", encoder.num_params());
            println!("checksum={}", encoder.checksum());
        }
        Command::Train { .. } => {
            let data = dataset(cfg)?;
            let encoder = backbone::<S>(cfg)?;
            let (record, _) = train_one(cfg, &data, &encoder)?;
            println!(
                "strategy={} shots={} seed={} train_accuracy={} test_accuracy={}",
                record.strategy, record.episode.shots, record.episode.seed, record.train_accuracy, record.test_accuracy
            );
        }
        Command::Eval { prompts, .. } => {
            let data = dataset(cfg)?;
            let encoder = backbone::<S>(cfg)?;
            let strategy = match prompts {
                Some(p) => load_strategy(p, &encoder)?,
                None if cfg.strategy == StrategyKind::ZeroShot => {
                    PromptStrategy::init(StrategyKind::ZeroShot, &cfg.strategy_config, &encoder, cfg.seed)?
                }
                None => {
                    return Err(Error::Config(format!(
                        "eval of {} needs --prompts from a previous train run",
                        cfg.strategy
                    )))
                }
            };
            let acc = evaluate(&strategy, &encoder, &data.class_names, &data.test.cast())?;
            println!("strategy={} accuracy={acc}", strategy.kind());
        }
        Command::Matrix { .. } => {
            let data = dataset(cfg)?;
            let encoder = backbone::<S>(cfg)?;
            let cells = run_matrix(
                &data,
                &encoder,
                &cfg.matrix,
                &cfg.strategy_config,
                &cfg.train,
                &cfg.shifts,
                cfg.threads,
            )?;
            write_jsonl(&cells, &cfg.output_dir.join("results.jsonl"))?;
            write_csv(&cells, &cfg.output_dir.join("results.csv"))?;
            let summary = summarize(&cells);
            write_summary_csv(&summary, &cfg.output_dir.join("summary.csv"))?;
            for row in &summary {
                let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.4}"));
                println!(
                    "strategy={} shots={} completed={}/{} accuracy={} ood_average={}",
                    row.strategy,
                    row.shots,
                    row.completed,
                    row.seeds,
                    fmt(row.mean_accuracy),
                    fmt(row.mean_ood_average)
                );
            }
            let failed = cells.iter().filter(|c| c.record.is_none()).count();
            if failed > 0 {
                eprintln!("warning: {failed} of {} cells failed", cells.len());
            }
        }
        Command::Variance { prompts, records, .. } => {
            let data = dataset(cfg)?;
            let encoder = backbone::<S>(cfg)?;
            let strategy = match prompts {
                Some(p) => load_strategy(p, &encoder)?,
                None => PromptStrategy::init(StrategyKind::ZeroShot, &cfg.strategy_config, &encoder, cfg.seed)?,
            };
            let report = variance_report(&strategy, &encoder, &data)?;
            write_json(&report, &cfg.output_dir.join("variance.json"))?;
            let mut w = csv::Writer::from_path(cfg.output_dir.join("variance.csv")).map_err(Error::from)?;
            w.write_record(["dataset", "strategy", "statistic", "class", "value"]).map_err(Error::from)?;
            for (c, v) in report.var_c.iter().enumerate() {
                w.write_record([&report.dataset, &report.strategy, "var_c", &c.to_string(), &v.to_string()])
                    .map_err(Error::from)?;
            }
            w.write_record([&report.dataset, &report.strategy, "var_v", "", &report.var_v.to_string()])
                .map_err(Error::from)?;
            w.write_record([&report.dataset, &report.strategy, "var_t", "", &report.var_t.to_string()])
                .map_err(Error::from)?;
            w.flush().map_err(|e| Error::Io {
                path: cfg.output_dir.join("variance.csv"),
                source: e,
            })?;
            println!("dataset={} strategy={} var_v={} var_t={}", report.dataset, report.strategy, report.var_v, report.var_t);
            if let Some(path) = records {
                let rows = gain_vs_variance_table(&read_records(path)?, std::slice::from_ref(&report))?;
                write_gain_csv(&rows, &cfg.output_dir.join("gain_vs_variance.csv"))?;
                println!("gain_rows={}", rows.len());
            }
        }
        Command::AttnMap { prompts, .. } => {
            let data = dataset(cfg)?;
            let encoder = backbone::<S>(cfg)?;
            let strategy = strategy_for(cfg, prompts.as_deref(), &data, &encoder)?;
            let layer = cfg.attention_layer.unwrap_or(encoder.config().vision.layers - 1);
            let test = &data.test;
            let images = cfg
                .attention_images
                .iter()
                .map(|&i| {
                    test.images
                        .get(i)
                        .map(|t| t.cast::<S>())
                        .ok_or_else(|| Error::Index(format!("test image {i} outside 0..{}", test.len())))
                })
                .collect::<Result<Vec<Tensor<S>>>>()?;
            let maps = attention_response_map(&encoder, &strategy, &images, layer)?;
            let dir = cfg.output_dir.join("attention");
            for (map, &id) in maps.iter().zip(&cfg.attention_images) {
                let mut map = map.clone();
                map.image = id;
                save_attention_map(&map, &dir, &format!("image{id}_layer{layer}"))?;
            }
            println!("maps={} layer={layer} dir={}", maps.len(), dir.display());
        }
        Command::ShiftEval { prompts, .. } => {
            let data = dataset(cfg)?;
            let encoder = backbone::<S>(cfg)?;
            if cfg.shifts.is_empty() {
                return Err(Error::Config("no shift targets configured".into()));
            }
            let strategy = match prompts {
                Some(p) => load_strategy(p, &encoder)?,
                None => {
                    let mut no_shift = cfg.clone();
                    no_shift.shifts.clear();
                    train_one(&no_shift, &data, &encoder)?.1
                }
            };
            let targets = cfg
                .shifts
                .iter()
                .map(|s| Ok((s.name.clone(), data.class_names.clone(), s.apply(&data.test)?.cast::<S>())))
                .collect::<Result<Vec<_>>>()?;
            let source = evaluate(&strategy, &encoder, &data.class_names, &data.test.cast())?;
            let report = evaluate_shifted(&strategy, &encoder, &data.class_names, &targets)?;
            let path = cfg.output_dir.join("shift.csv");
            let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
            w.write_record(["target", "accuracy"]).map_err(Error::from)?;
            w.write_record(["source", &source.to_string()]).map_err(Error::from)?;
            for t in &report.targets {
                w.write_record([&t.name, &t.accuracy.to_string()]).map_err(Error::from)?;
            }
            w.write_record(["ood_average", &report.ood_average.to_string()]).map_err(Error::from)?;
            w.flush().map_err(|e| Error::Io { path, source: e })?;
            write_json(&report, &cfg.output_dir.join("shift.json"))?;
            println!("target=source accuracy={source}");
            for t in &report.targets {
                println!("target={} accuracy={}", t.name, t.accuracy);
            }
            println!("ood_average={}", report.ood_average);
        }
    }
    Ok(())
}

fn variance_report<S: Scalar>(
    strategy: &PromptStrategy<S>,
    encoder: &DualEncoder<S>,
    data: &Dataset<f32>,
) -> Result<VarianceReport> {
    let test = data.test.cast::<S>();
    let mut g = promptlab::autodiff::Graph::new();
    let plan = strategy.plan(&mut g)?;
    let w = encoder.encode_text(&mut g, &data.class_names, plan.text.as_ref())?;
    let w = g.value(w).clone();
    let mut parts = Vec::new();
    for chunk in test.images.chunks(64) {
        let mut g = promptlab::autodiff::Graph::new();
        let plan = strategy.plan(&mut g)?;
        let z = encoder.encode_images(&mut g, chunk, plan.visual.as_ref())?;
        parts.push(g.value(z).clone());
    }
    let z = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
    let (var_c, var_v) = intra_class_visual_variance(&z, &test.labels, data.num_classes())?;
    let var_t = inter_class_text_variance_rows(&w)?;
    Ok(VarianceReport::new(
        &data.name,
        &encoder.checksum(),
        strategy.kind().name(),
        var_c,
        var_v,
        var_t,
    ))
}

fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cell: CellResult = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.extend(cell.record);
    }
    Ok(out)
}
