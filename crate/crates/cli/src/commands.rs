use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use stressnet::baseline::{
    evaluate as score_baseline, extract_features, fit_centroids, BaselineConfig, BaselineScore,
    CentroidTable, FeatureKind, FeatureSample,
};
use stressnet::dataset::{
    load_dataset_index, read_thermal_pgm, split_plants, DiskSource, ImageSource, Modality, PlantId,
    Split, SplitConfig, TreatmentLabel,
};
use stressnet::experiment::{
    evaluate_combo, train_model, validation_fold, ComboReport, ExperimentConfig, ModelKey,
    TrainedModel,
};
use stressnet::fusion::{write_per_day_csv, write_sequence_csv, SequenceRow};
use stressnet::imaging::erode;
use stressnet::network::{load_checkpoint, save_checkpoint, write_loss_log};
use stressnet::pipeline::TensorCache;
use stressnet::simulator::{simulate_experiment, SimulatedSource};

use crate::config::RunConfig;
use crate::plot::{bar_chart, line_chart, Series};
use crate::{usage, Failure};

type CmdResult = Result<(), Failure>;

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// An on-disk dataset and its train/test split. Generates the data first
/// when the config asks for it and the root is absent.
fn open_dataset(cfg: &RunConfig) -> anyhow::Result<(DiskSource, Split)> {
    let root = &cfg.dataset.root;
    if !root.exists() {
        if !cfg.dataset.simulate_if_missing {
            bail!("dataset root {} does not exist", root.display());
        }
        log::info!("simulating dataset into {}", root.display());
        simulate_experiment(&cfg.simulator(), root)?;
    }
    let index = load_dataset_index(
        root,
        &SplitConfig {
            root: Some(root.clone()),
            test_indices: cfg.dataset.test_indices.clone(),
            days: cfg.dataset.days,
        },
    )?;
    for w in &index.warnings {
        log::warn!("{w}");
    }
    // every thermal frame must match the first one's size
    let first = index
        .records
        .iter()
        .find(|(k, _)| k.modality == Modality::Thermal)
        .ok_or_else(|| anyhow!("no thermal images under {}", root.display()))?;
    let raw = read_thermal_pgm(&first.1.image)?;
    let split = index.split.clone();
    Ok((DiskSource::new(index, (raw.width, raw.height))?, split))
}

fn plants(set: &std::collections::BTreeSet<PlantId>) -> Vec<PlantId> {
    set.iter().copied().collect()
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Sensor noise standard deviation in degrees Celsius.
    #[arg(long)]
    noise: Option<f64>,
    /// Plants per treatment.
    #[arg(long)]
    plants: Option<u8>,
    #[arg(long)]
    days: Option<u32>,
    /// Canvas size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    canvas: Option<(usize, usize)>,
    /// Add the day-13 treatment-D cooling anomaly.
    #[arg(long)]
    anomaly: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

/// `out`, when given, names the dataset directory; otherwise the configured
/// dataset root is used.
pub fn simulate(mut cfg: RunConfig, args: SimulateArgs, out: Option<PathBuf>) -> CmdResult {
    if let Some(n) = args.noise {
        cfg.simulator.sensor_noise_sigma = n;
    }
    if let Some(p) = args.plants {
        cfg.simulator.plants_per_treatment = p;
    }
    if let Some(d) = args.days {
        cfg.simulator.days = d;
    }
    if let Some(c) = args.canvas {
        cfg.simulator.canvas = c;
    }
    if args.anomaly {
        cfg.simulator.anomaly = Some(stressnet::simulator::Anomaly::irrigation_fault());
    }
    let sim = cfg.simulator();
    sim.validate().map_err(usage)?;
    let root = out.unwrap_or_else(|| cfg.dataset.root.clone());
    let source = simulate_experiment(&sim, &root)?;
    let plants = source.plants().len();
    println!(
        "wrote {} plants x {} days ({} images) to {}",
        plants,
        sim.days,
        2 * plants * sim.days as usize,
        root.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Also write each frame's mask as a PBM image (contour mask for RGB,
    /// eroded mask for thermal).
    #[arg(long)]
    dump_masks: bool,
}

pub fn ingest(cfg: RunConfig, args: IngestArgs) -> CmdResult {
    let (source, split) = open_dataset(&cfg)?;
    let index = source.index();
    create_dir(&cfg.out)?;
    let mut csv = String::from("plant,day,modality,image,contour\n");
    for (k, rec) in &index.records {
        let contour = rec
            .contour
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            k.plant,
            k.day,
            k.modality,
            rec.image.display(),
            contour
        ));
    }
    write_text(&cfg.out.join("index.csv"), &csv)?;
    let mut warnings = index.warnings.join("\n");
    if !warnings.is_empty() {
        warnings.push('\n');
    }
    write_text(&cfg.out.join("ingest_warnings.txt"), &warnings)?;
    if args.dump_masks {
        dump_masks(&source, &cfg)?;
    }
    println!(
        "{} records, {} plants ({} train, {} test), {} warnings",
        index.len(),
        index.plants().len(),
        split.train.len(),
        split.test.len(),
        index.warnings.len()
    );
    Ok(())
}

fn dump_masks(source: &DiskSource, cfg: &RunConfig) -> anyhow::Result<()> {
    use stressnet::dataset::rasterize_contour;
    let radius = cfg.experiment.input.erosion_radius;
    for key in source.index().records.keys() {
        let dir = cfg
            .out
            .join("masks")
            .join(key.plant.treatment.to_string())
            .join(format!("{:02}", key.plant.index()));
        create_dir(&dir)?;
        let mask = match key.modality {
            Modality::Rgb => match source.rgb(key.plant, key.day) {
                Ok(f) => rasterize_contour(
                    &f.contour,
                    f.image.width() as usize,
                    f.image.height() as usize,
                )?,
                Err(stressnet::Error::Missing(_)) => continue,
                Err(e) => return Err(e.into()),
            },
            Modality::Thermal => match source.thermal(key.plant, key.day) {
                Ok(f) => erode(
                    &rasterize_contour(&f.contour, f.grid.width, f.grid.height)?,
                    radius,
                ),
                Err(stressnet::Error::Missing(_)) => continue,
                Err(e) => return Err(e.into()),
            },
        };
        mask.write_pbm(&dir.join(format!("{:02}.{}.pbm", key.day, key.modality.tag())))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model to train: single_rgb, single_thermal, triplet_rgb or
    /// triplet_thermal.
    #[arg(long)]
    model: String,
    /// Overrides the configured epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
}

/// Validation accuracy stored next to a checkpoint.
#[derive(Serialize, Deserialize)]
struct ModelMeta {
    validation_accuracy: Option<u32>,
}

fn model_paths(out: &Path, key: ModelKey) -> (PathBuf, PathBuf) {
    let dir = out.join("models");
    (
        dir.join(format!("{key}.ckpt")),
        dir.join(format!("{key}.toml")),
    )
}

fn save_model(out: &Path, key: ModelKey, model: &TrainedModel) -> anyhow::Result<()> {
    create_dir(&out.join("models"))?;
    let (ckpt, meta) = model_paths(out, key);
    save_checkpoint(&ckpt, &model.network)?;
    let text = toml::to_string(&ModelMeta {
        validation_accuracy: model.validation_accuracy,
    })?;
    write_text(&meta, &text)?;
    write_loss_log(
        &out.join("models").join(format!("{key}.loss.csv")),
        &model.log,
    )?;
    Ok(())
}

/// A previously trained model whose checkpoint matches the configured
/// architecture, if any.
fn load_model(
    out: &Path,
    key: ModelKey,
    exp: &ExperimentConfig,
) -> anyhow::Result<Option<TrainedModel>> {
    let (ckpt, meta) = model_paths(out, key);
    if !ckpt.exists() {
        return Ok(None);
    }
    let network = load_checkpoint(&ckpt, Some(&exp.spec(key)?)).with_context(|| {
        format!(
            "{} does not match the configured model; retrain it",
            ckpt.display()
        )
    })?;
    let meta: ModelMeta = match fs::read_to_string(&meta) {
        Ok(text) => toml::from_str(&text)?,
        Err(_) => ModelMeta {
            validation_accuracy: None,
        },
    };
    Ok(Some(TrainedModel {
        network,
        log: Vec::new(),
        validation_accuracy: meta.validation_accuracy,
    }))
}

pub fn train(mut cfg: RunConfig, args: TrainArgs) -> CmdResult {
    let key: ModelKey = args.model.parse().map_err(usage)?;
    if let Some(e) = args.epochs {
        if e == 0 {
            return Err(usage(anyhow!("--epochs must be at least 1")));
        }
        match key.modality {
            Modality::Rgb => cfg.experiment.rgb.train.epochs = e,
            Modality::Thermal => cfg.experiment.thermal.train.epochs = e,
        }
    }
    let exp = cfg.experiment();
    exp.spec(key).map_err(usage)?;
    let (source, split) = open_dataset(&cfg)?;
    let (fit, val) = validation_fold(&split.train, exp.validation_per_treatment)?;
    let cache = TensorCache::build(&source, &plants(&split.train), &[key.modality], exp.input)?;
    let model = train_model(&exp, &cache, key, &fit, &val, source.days())?;
    save_model(&cfg.out, key, &model)?;
    let last = model.log.last().expect("at least one epoch");
    println!(
        "{key}: {} epochs, final loss {:.4}, train accuracy {:.3}, validation accuracy {}",
        model.log.len(),
        last.loss,
        last.train_acc,
        model
            .validation_accuracy
            .map_or("n/a".to_string(), |a| format!("{a}%"))
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalModel {
    /// The configured model combos with temporal fusion.
    Fusion,
    /// The temperature-centroid baseline.
    Baseline,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, default_value_t = EvalModel::Fusion)]
    model: EvalModel,
    /// Retrain models even when matching checkpoints exist.
    #[arg(long)]
    retrain: bool,
}

pub fn evaluate(cfg: RunConfig, args: EvaluateArgs) -> CmdResult {
    let (source, split) = open_dataset(&cfg)?;
    if split.test.is_empty() {
        return Err(anyhow!("the test set is empty").into());
    }
    create_dir(&cfg.out)?;
    match args.model {
        EvalModel::Baseline => evaluate_baseline(&cfg, &source, &split),
        EvalModel::Fusion => evaluate_fusion(&cfg, &source, &split, args.retrain),
    }
}

fn evaluate_baseline(cfg: &RunConfig, source: &DiskSource, split: &Split) -> CmdResult {
    let bcfg = cfg.baseline.config(cfg.baseline.feature_kind);
    let (table, score) = run_baseline(source, split, &bcfg)?;
    table.write_csv(&cfg.out.join("centroids.csv"))?;
    let csv = format!(
        "feature_kind,single_day_accuracy,single_day_n,sequence_accuracy,sequence_n\n{},{:.4},{},{:.4},{}\n",
        feature_name(bcfg.feature_kind),
        100.0 * score.single_day_acc,
        score.single_day_n,
        100.0 * score.sequence_acc,
        score.sequence_n
    );
    write_text(&cfg.out.join("baseline_eval.csv"), &csv)?;
    println!(
        "baseline accuracy: single-day {:.1}% ({} images), {}-day {:.1}% ({} windows)",
        100.0 * score.single_day_acc,
        score.single_day_n,
        bcfg.sequence_days,
        100.0 * score.sequence_acc,
        score.sequence_n
    );
    Ok(())
}

fn feature_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::PlantMean => "plant_mean",
        FeatureKind::PlantMinusContour => "plant_minus_contour",
    }
}

fn run_baseline(
    source: &dyn ImageSource,
    split: &Split,
    cfg: &BaselineConfig,
) -> anyhow::Result<(CentroidTable, BaselineScore)> {
    let train: Vec<FeatureSample> = extract_features(source, &plants(&split.train), cfg)?;
    let test: Vec<FeatureSample> = extract_features(source, &plants(&split.test), cfg)?;
    let days = train.iter().map(|s| s.day).collect();
    let table = fit_centroids(&train, cfg.feature_kind, &days)?;
    let score = score_baseline(&table, &test, cfg.sequence_days)?;
    Ok((table, score))
}

fn evaluate_fusion(
    cfg: &RunConfig,
    source: &DiskSource,
    split: &Split,
    retrain: bool,
) -> CmdResult {
    let exp = cfg.experiment();
    let days = source.days();
    let (fit, val) = validation_fold(&split.train, exp.validation_per_treatment)?;
    let required = exp.required_models();
    let modalities: Vec<Modality> = required
        .iter()
        .map(|k| k.modality)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let all: Vec<PlantId> = split.train.union(&split.test).copied().collect();
    let cache = TensorCache::build(source, &all, &modalities, exp.input)?;

    let mut models = BTreeMap::new();
    for key in required {
        let cached = if retrain {
            None
        } else {
            load_model(&cfg.out, key, &exp)?
        };
        let model = match cached {
            Some(m) => {
                log::info!("using saved {key} model");
                m
            }
            None => {
                let m = train_model(&exp, &cache, key, &fit, &val, days)?;
                save_model(&cfg.out, key, &m)?;
                m
            }
        };
        models.insert(key, model);
    }
    let test = plants(&split.test);
    let reports = exp
        .combos
        .iter()
        .map(|c| evaluate_combo(&exp, c, &models, &cache, &test, days))
        .collect::<stressnet::Result<Vec<_>>>()?;
    write_fusion_outputs(&cfg.out, &models, &reports)?;
    for r in &reports {
        let first = r.four_class.first().map_or(0.0, |s| s.percent());
        let last = r.four_class.last().map_or(0.0, |s| s.percent());
        println!(
            "{:<30} P:Q={}:{}  N=1 {:>5.1}%  N={} {:>5.1}%",
            r.combo.to_string(),
            r.ratio.p,
            r.ratio.q,
            first,
            days,
            last
        );
    }
    render_plots(&cfg.out)?;
    Ok(())
}

fn write_fusion_outputs(
    out: &Path,
    models: &BTreeMap<ModelKey, TrainedModel>,
    reports: &[ComboReport],
) -> anyhow::Result<()> {
    let sequence: Vec<SequenceRow> = reports
        .iter()
        .flat_map(ComboReport::sequence_rows)
        .collect();
    let binary: Vec<SequenceRow> = reports.iter().flat_map(ComboReport::binary_rows).collect();
    write_sequence_csv(&out.join("sequence.csv"), &sequence)?;
    write_sequence_csv(&out.join("binary.csv"), &binary)?;

    let mut windows = String::from("model_combo,N,correct,windows\n");
    for r in reports {
        for (i, s) in r.four_class.iter().enumerate() {
            windows.push_str(&format!(
                "{},{},{},{}\n",
                r.combo,
                i + 1,
                s.correct,
                s.total
            ));
        }
    }
    write_text(&out.join("windows.csv"), &windows)?;

    let mut ratios = String::from("model_combo,p,q\n");
    for r in reports {
        ratios.push_str(&format!("{},{},{}\n", r.combo, r.ratio.p, r.ratio.q));
    }
    write_text(&out.join("ratios.csv"), &ratios)?;

    let mut acc = String::from("model,validation_accuracy\n");
    for (key, m) in models {
        let v = m
            .validation_accuracy
            .map_or(String::new(), |a| a.to_string());
        acc.push_str(&format!("{key},{v}\n"));
    }
    write_text(&out.join("models.csv"), &acc)?;

    let per_day = out.join("per_day");
    create_dir(&per_day)?;
    for r in reports {
        write_per_day_csv(&per_day.join(format!("{}.csv", r.combo)), &r.per_day)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// Skip the simulated noise sweep.
    #[arg(long)]
    no_sweep: bool,
}

struct Ladder {
    single: BaselineScore,
    difference: BaselineScore,
}

fn ladder(
    source: &dyn ImageSource,
    split: &Split,
    cfg: &RunConfig,
) -> anyhow::Result<(CentroidTable, Ladder)> {
    let (table, single) =
        run_baseline(source, split, &cfg.baseline.config(FeatureKind::PlantMean))?;
    let (_, difference) = run_baseline(
        source,
        split,
        &cfg.baseline.config(FeatureKind::PlantMinusContour),
    )?;
    Ok((table, Ladder { single, difference }))
}

pub fn baseline(cfg: RunConfig, args: BaselineArgs) -> CmdResult {
    let (source, split) = open_dataset(&cfg)?;
    create_dir(&cfg.out)?;
    let (table, l) = ladder(&source, &split, &cfg)?;
    table.write_csv(&cfg.out.join("centroids.csv"))?;
    let k = cfg.baseline.sequence_days;
    let csv = format!(
        "entry,accuracy,n\nsingle_day,{:.4},{}\ndifference,{:.4},{}\nsequence_{k}_day,{:.4},{}\n",
        100.0 * l.single.single_day_acc,
        l.single.single_day_n,
        100.0 * l.difference.single_day_acc,
        l.difference.single_day_n,
        100.0 * l.single.sequence_acc,
        l.single.sequence_n
    );
    write_text(&cfg.out.join("baseline_ladder.csv"), &csv)?;
    println!(
        "single-day {:.1}%, plant-minus-contour {:.1}%, {k}-day {:.1}%",
        100.0 * l.single.single_day_acc,
        100.0 * l.difference.single_day_acc,
        100.0 * l.single.sequence_acc
    );

    if !args.no_sweep {
        let mut sweep = String::from("sigma,single_day,difference,sequence\n");
        for &sigma in &cfg.baseline.noise_sweep {
            let mut sim = cfg.simulator();
            sim.sensor_noise_sigma = sigma;
            let source = SimulatedSource::new(sim)?;
            let split = split_plants(
                &source.plants().into_iter().collect(),
                &cfg.dataset.test_indices,
            )?;
            let (_, l) = ladder(&source, &split, &cfg)?;
            sweep.push_str(&format!(
                "{sigma},{:.4},{:.4},{:.4}\n",
                100.0 * l.single.single_day_acc,
                100.0 * l.difference.single_day_acc,
                100.0 * l.single.sequence_acc
            ));
        }
        write_text(&cfg.out.join("noise_sweep.csv"), &sweep)?;
    }
    Ok(())
}

fn read_rows(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    reader
        .records()
        .map(|r| Ok(r?.iter().map(str::to_string).collect()))
        .collect()
}

fn series_by_name(rows: &[Vec<String>]) -> anyhow::Result<Vec<Series>> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let (name, n, acc) = (&r[0], r[1].parse::<u32>()?, r[2].parse::<f64>()?);
        match out.iter_mut().find(|s| &s.name == name) {
            Some(s) => s.points.push((n, acc)),
            None => out.push(Series {
                name: name.clone(),
                points: vec![(n, acc)],
            }),
        }
    }
    Ok(out)
}

/// Renders every plot that has its CSV in `out`.
fn render_plots(out: &Path) -> anyhow::Result<usize> {
    let mut written = 0;
    for (csv, svg, title) in [
        (
            "sequence.csv",
            "sequence.svg",
            "Rolling-window accuracy (4 classes)",
        ),
        (
            "binary.csv",
            "binary.svg",
            "Rolling-window accuracy (A vs rest)",
        ),
    ] {
        let path = out.join(csv);
        if path.exists() {
            let series = series_by_name(&read_rows(&path)?)?;
            write_text(
                &out.join(svg),
                &line_chart(title, "sequence length N", &series),
            )?;
            written += 1;
        }
    }
    let per_day = out.join("per_day");
    if per_day.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&per_day)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.sort();
        for f in files
            .iter()
            .filter(|f| f.extension().is_some_and(|e| e == "csv"))
        {
            let rows = read_rows(f)?;
            let mut series: Vec<Series> = Vec::new();
            for class in TreatmentLabel::ALL
                .iter()
                .map(ToString::to_string)
                .chain(["mean".to_string()])
            {
                let points = rows
                    .iter()
                    .filter(|r| r[1] == class)
                    .map(|r| Ok((r[0].parse::<u32>()?, r[2].parse::<f64>()?)))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                if !points.is_empty() {
                    series.push(Series {
                        name: class,
                        points,
                    });
                }
            }
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("per_day");
            let title = format!("Per-day accuracy, {stem}");
            write_text(&f.with_extension("svg"), &bar_chart(&title, "day", &series))?;
            written += 1;
        }
    }
    Ok(written)
}

pub fn report(cfg: RunConfig) -> CmdResult {
    let written = render_plots(&cfg.out)?;
    if written == 0 {
        return Err(anyhow!(
            "no report CSVs found in {}; run evaluate first",
            cfg.out.display()
        )
        .into());
    }
    let mut summary = String::new();
    let seq = cfg.out.join("sequence.csv");
    if seq.exists() {
        let series = series_by_name(&read_rows(&seq)?)?;
        summary.push_str("model_combo,N=1,N=max,best,best_N\n");
        for s in &series {
            let first = s.points.first().map_or(0.0, |p| p.1);
            let last = s.points.last().map_or(0.0, |p| p.1);
            let best = s
                .points
                .iter()
                .copied()
                .fold((0, f64::MIN), |b, p| if p.1 > b.1 { p } else { b });
            summary.push_str(&format!(
                "{},{first:.4},{last:.4},{:.4},{}\n",
                s.name, best.1, best.0
            ));
        }
        write_text(&cfg.out.join("summary.csv"), &summary)?;
    }
    let mut stdout = std::io::stdout();
    let _ = stdout.write_all(summary.as_bytes());
    println!("rendered {written} plots in {}", cfg.out.display());
    Ok(())
}
