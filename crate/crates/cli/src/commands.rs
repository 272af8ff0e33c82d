//! The six pipeline stages. Each reads its inputs from the run directory,
//! checks them against the manifest and records what it wrote.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use peepscope_core::anomaly::{calibrate, corrupt_dataset, inject_step_event};
use peepscope_core::autoencoder::{load_model, model_hash, save_model, train, EpochLoss, Standardization};
use peepscope_core::eval::{
    auc, bias_report, confusion, export_heatmap, matrix_csv, write_stream_report, AucResult, ConfusionMatrix,
    StreamTrace, WheelOutcome,
};
use peepscope_core::peephole::{fit_pipeline, load_pipeline, save_pipeline};
use peepscope_core::telemetry::{
    chunk_stream, generate_stream, read_labeled_csv, read_stream_csv, write_labeled_csv, write_stream_csv, WINDOW,
};
use peepscope_core::{
    derive_seed, AnomalyKind, ArchitectureDescriptor, AutoencoderModel, Dataset, Error, IntensityCalibration,
    PeepholePipeline, Result, Scenario, Split, Stream, TagSet,
};

use crate::config::RunConfig;
use crate::manifest::{Manifest, StageLog};

pub const RESULTS_DIR: &str = "results";
pub const MODEL_FILE: &str = "model.peep";
pub const LOSS_FILE: &str = "loss.csv";
pub const CALIBRATION_FILE: &str = "calibration.toml";

pub fn split_file(split: Split) -> String {
    format!("{}.csv", split.name())
}

pub fn corrupted_file(scenario: Scenario, split: Split) -> String {
    format!("corrupted_{}_{}.csv", scenario.name(), split.name())
}

pub fn pipeline_file(scenario: Scenario, tag_set: TagSet) -> String {
    format!("peephole_{}_{}.pphl", scenario.name(), tag_set.name())
}

fn results_file(name: &str) -> String {
    format!("{RESULTS_DIR}/{name}")
}

/// Tag set explained for `scenario` unless overridden.
pub fn default_tag_set(cfg: &RunConfig, scenario: Scenario) -> TagSet {
    match scenario {
        Scenario::I => TagSet::Kinds,
        Scenario::II => cfg.peephole.tag_set,
    }
}

fn write_text(dir: &Path, rel: &str, text: &str) -> Result<()> {
    let path = dir.join(rel);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn split_len(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.dataset.train_chunks,
        Split::Validation => cfg.dataset.val_chunks,
        Split::Test => cfg.dataset.test_chunks,
    }
}

fn load_split(log: &mut StageLog<'_>, cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let path = log.input(&split_file(split))?;
    let chunks = chunk_stream(&read_stream_csv(path)?, cfg.dataset.stride)?;
    if chunks.len() != split_len(cfg, split) {
        return Err(Error::Mismatch(format!(
            "{} holds {} chunks, config expects {}",
            split_file(split),
            chunks.len(),
            split_len(cfg, split)
        )));
    }
    Ok(Dataset::nominal(chunks, split))
}

fn load_trained_model(log: &mut StageLog<'_>) -> Result<AutoencoderModel> {
    let model = load_model(log.input(MODEL_FILE)?)?;
    if model.threshold.is_none() {
        return Err(Error::Input(format!("{MODEL_FILE} carries no detection threshold")));
    }
    Ok(model)
}

fn load_fitted_pipeline(
    log: &mut StageLog<'_>,
    model: &AutoencoderModel,
    scenario: Scenario,
    tag_set: TagSet,
) -> Result<PeepholePipeline> {
    let pipeline = load_pipeline(log.input(&pipeline_file(scenario, tag_set))?)?;
    pipeline.check_model(model)?;
    Ok(pipeline)
}

/// Uses `n` worker threads for batched inference. Only the first call in a process takes effect.
pub fn init_threads(n: usize) {
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already initialized");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub chunks: [(Split, usize); 3],
    pub samples: usize,
}

/// Writes `train.csv`, `val.csv` and `test.csv` and starts a fresh manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    let dir = cfg.out_dir.as_path();
    create_dir(dir)?;
    let seed = derive_seed(cfg.seed, "generate");
    let stream = generate_stream(&cfg.generator.generator(seed, cfg.stream_samples()))?;
    let stride = cfg.dataset.stride;

    let mut manifest = Manifest::new(cfg.hash(), cfg.seed);
    let mut log = StageLog::new(dir, &manifest, seed);
    let splits = [Split::Train, Split::Validation, Split::Test];
    let mut first = 0;
    for split in splits {
        let n = split_len(cfg, split);
        let start = first * stride;
        let end = (first + n - 1) * stride + WINDOW;
        let part = Stream::new(
            stream.start_index + start as u64,
            stream.samples.slice(ndarray::s![start..end, ..]).to_owned(),
        )?;
        let rel = split_file(split);
        write_stream_csv(dir.join(&rel), &part)?;
        log.output(&rel)?;
        log.count(split.name(), n);
        info!("wrote {rel}: {n} chunks");
        first += n;
    }
    let record = log.finish();
    manifest.record("generate", record);
    manifest.save(dir)?;
    Ok(GenerateSummary {
        chunks: splits.map(|s| (s, split_len(cfg, s))),
        samples: stream.len(),
    })
}

#[derive(Clone, Debug)]
pub struct InjectSummary {
    pub scenario: Scenario,
    pub split: Split,
    pub file: String,
    pub dataset: Dataset,
}

fn read_calibration(path: &Path) -> Result<IntensityCalibration> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", path.display(), e.message())))
}

/// Writes `corrupted_<scenario>_{val,test}.csv` for each requested scenario.
///
/// `kinds` overrides the `[anomaly]` kind list.
pub fn cmd_inject(cfg: &RunConfig, scenarios: &[Scenario], kinds: Option<&str>) -> Result<Vec<InjectSummary>> {
    let dir = cfg.out_dir.as_path();
    let mut manifest = Manifest::open(dir, &cfg.hash())?;
    let kinds = match kinds {
        Some(spec) => AnomalyKind::parse_list(spec)?,
        None => cfg.anomaly.kinds()?,
    };

    let mut summaries = Vec::new();
    for &scenario in scenarios {
        let stage = format!("inject_{}", scenario.name());
        let mut log = StageLog::new(dir, &manifest, derive_seed(cfg.seed, &stage));
        let train = load_split(&mut log, cfg, Split::Train)?;
        let mut cal = calibrate(&train)?;
        let scale = cfg.anomaly.intensity_scale;
        cal.gwn *= scale;
        cal.offset *= scale;
        cal.impulse *= scale;
        cal.step *= scale;
        cal.psa *= scale;
        cal.validate()?;
        write_text(dir, CALIBRATION_FILE, &toml::to_string(&cal).expect("calibration serializes"))?;
        log.output(CALIBRATION_FILE)?;

        for (split, limit) in [
            (Split::Validation, cfg.anomaly.val_chunks),
            (Split::Test, cfg.anomaly.test_chunks),
        ] {
            let nominal = load_split(&mut log, cfg, split)?;
            let nominal = nominal.truncated(limit.unwrap_or(nominal.len()));
            let seed = derive_seed(cfg.seed, &format!("inject/{}/{}", scenario.name(), split.name()));
            let corrupted = corrupt_dataset(&nominal, scenario, &kinds, &cal, seed)?;
            let rel = corrupted_file(scenario, split);
            write_labeled_csv(dir.join(&rel), &corrupted)?;
            log.output(&rel)?;
            log.count(split.name(), corrupted.len());
            info!("wrote {rel}: {} corrupted chunks", corrupted.len());
            summaries.push(InjectSummary {
                scenario,
                split,
                file: rel,
                dataset: corrupted,
            });
        }
        let record = log.finish();
        manifest.record(&stage, record);
        manifest.save(dir)?;
    }
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub model_hash: String,
    pub threshold: f64,
    pub history: Vec<EpochLoss>,
}

fn loss_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,best_val_loss\n");
    let mut best = f64::INFINITY;
    for e in history {
        best = best.min(e.val_loss);
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, best);
    }
    s
}

/// Trains the detector, calibrates its threshold on nominal validation data
/// and writes `model.peep` and `loss.csv`.
pub fn cmd_train(cfg: &RunConfig, small: bool) -> Result<TrainSummary> {
    let dir = cfg.out_dir.as_path();
    let mut manifest = Manifest::open(dir, &cfg.hash())?;
    let seed = derive_seed(cfg.seed, "train");
    let mut log = StageLog::new(dir, &manifest, seed);
    let train_ds = load_split(&mut log, cfg, Split::Train)?;
    let val = load_split(&mut log, cfg, Split::Validation)?;

    let arch = if small {
        ArchitectureDescriptor::small()
    } else {
        cfg.train.architecture()
    };
    if cfg.peephole.kappa > arch.latent_dim {
        return Err(Error::Config(format!(
            "[peephole] kappa {} exceeds the latent width {}",
            cfg.peephole.kappa, arch.latent_dim
        )));
    }
    info!("training {:?} on {} chunks", arch, train_ds.len());
    let mut model = AutoencoderModel::new(arch, Standardization::fit(&train_ds)?, seed)?;
    let history = train(&mut model, &train_ds, &val, &cfg.train.train_config(seed))?;
    let threshold = model.calibrate_threshold(&val, cfg.train.target_fpr)?;
    info!("threshold {threshold:e} at target FPR {}", cfg.train.target_fpr);

    save_model(&model, dir.join(MODEL_FILE))?;
    log.output(MODEL_FILE)?;
    write_text(dir, LOSS_FILE, &loss_csv(&history))?;
    log.output(LOSS_FILE)?;
    log.count("epochs", history.len());
    log.count("small", usize::from(small));
    let record = log.finish();
    manifest.record("train", record);
    manifest.save(dir)?;
    Ok(TrainSummary {
        model_hash: model_hash(&model),
        threshold,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub scenario: Scenario,
    pub tag_set: TagSet,
    pub file: String,
    pub n_fit: usize,
    pub pipeline_id: String,
}

/// Fits one peephole pipeline per requested scenario on its corrupted
/// validation set. `tag_set` overrides the per-scenario default.
pub fn cmd_fit_peephole(cfg: &RunConfig, scenarios: &[Scenario], tag_set: Option<TagSet>) -> Result<Vec<FitSummary>> {
    let dir = cfg.out_dir.as_path();
    let mut manifest = Manifest::open(dir, &cfg.hash())?;
    let mut out = Vec::new();
    for &scenario in scenarios {
        let tags = tag_set.unwrap_or_else(|| default_tag_set(cfg, scenario));
        if scenario == Scenario::I && tags == TagSet::Wheels {
            if scenarios.len() > 1 {
                warn!("scenario I carries no wheel labels; skipped");
                continue;
            }
            return Err(Error::Config("scenario I carries no wheel labels".into()));
        }
        let stage = format!("peephole_{}_{}", scenario.name(), tags.name());
        let seed = derive_seed(cfg.seed, &stage);
        let mut log = StageLog::new(dir, &manifest, seed);
        let model = load_trained_model(&mut log)?;
        let ds = read_labeled_csv(log.input(&corrupted_file(scenario, Split::Validation))?, Split::Validation)?;
        let pipeline = fit_pipeline(&model, &ds, cfg.peephole.kappa, cfg.peephole.components, tags, seed)?;
        let rel = pipeline_file(scenario, tags);
        save_pipeline(&pipeline, dir.join(&rel))?;
        log.output(&rel)?;
        log.count("fitted", pipeline.n_fit);
        info!("wrote {rel}: fitted on {} flagged chunks", pipeline.n_fit);
        let record = log.finish();
        manifest.record(&stage, record);
        manifest.save(dir)?;
        out.push(FitSummary {
            scenario,
            tag_set: tags,
            file: rel,
            n_fit: pipeline.n_fit,
            pipeline_id: pipeline.id,
        });
    }
    Ok(out)
}

/// One confusion matrix of the results bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct ScopeResult {
    /// File stem after `confusion_`, e.g. `II_wheels_psa`.
    pub scope: String,
    pub scenario: Scenario,
    pub tag_set: TagSet,
    /// `None` pools every kind.
    pub kind: Option<AnomalyKind>,
    pub matrix: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRate {
    pub scenario: Scenario,
    pub n: usize,
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub threshold: f64,
    pub n_nominal: usize,
    pub false_positives: usize,
    pub aucs: Vec<AucResult>,
    pub detection: Vec<DetectionRate>,
    pub scopes: Vec<ScopeResult>,
}

impl EvalSummary {
    pub fn fpr(&self) -> f64 {
        self.false_positives as f64 / self.n_nominal.max(1) as f64
    }

    pub fn scope(&self, name: &str) -> Option<&ScopeResult> {
        self.scopes.iter().find(|s| s.scope == name)
    }
}

fn auc_csv(aucs: &[AucResult]) -> String {
    let mut s = String::from("scenario,kind,auc,n\n");
    for a in aucs {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            a.scenario.map_or("", Scenario::name),
            a.kind.map_or("", AnomalyKind::name),
            a.value,
            a.n_anomalous
        );
    }
    s
}

fn bias_csv(scopes: &[ScopeResult]) -> String {
    let mut s = String::from("scope,kind,n,accuracy,mean_diagonal,bias_index\n");
    for r in scopes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.scope,
            r.kind.map_or("all", AnomalyKind::name),
            r.matrix.total(),
            r.matrix.accuracy(),
            r.matrix.mean_diagonal(),
            r.matrix.bias_index()
        );
    }
    s
}

fn detection_csv(summary: &EvalSummary) -> String {
    let mut s = String::from("set,n,flagged,rate\n");
    let _ = writeln!(
        s,
        "nominal_test,{},{},{}",
        summary.n_nominal,
        summary.false_positives,
        summary.fpr()
    );
    for d in &summary.detection {
        let _ = writeln!(s, "{},{},{},{}", d.scenario.name(), d.n, d.flagged, d.flagged as f64 / d.n.max(1) as f64);
    }
    s
}

/// Scores held-out data and writes the results bundle: `auc.csv`,
/// `detection.csv`, `bias.csv` and `confusion_<scope>.{csv,svg}`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalSummary> {
    let dir = cfg.out_dir.as_path();
    let mut manifest = Manifest::open(dir, &cfg.hash())?;
    let mut log = StageLog::new(dir, &manifest, cfg.seed);
    let model = load_trained_model(&mut log)?;
    let threshold = model.threshold.expect("checked on load");
    let test = load_split(&mut log, cfg, Split::Test)?;
    let nominal_scores = model.score_batch(test.chunks());
    let false_positives = nominal_scores.iter().filter(|&&s| model.flag(s)).count();
    info!("nominal test FPR {false_positives}/{}", test.len());

    let results = dir.join(RESULTS_DIR);
    create_dir(&results)?;
    let mut aucs = Vec::new();
    let mut detection = Vec::new();
    let mut scopes = Vec::new();
    for scenario in [Scenario::I, Scenario::II] {
        let tags = default_tag_set(cfg, scenario);
        let pipeline = load_fitted_pipeline(&mut log, &model, scenario, tags)?;
        let ds = read_labeled_csv(log.input(&corrupted_file(scenario, Split::Test))?, Split::Test)?;
        let labels = ds.labels().expect("labeled file");
        let explained = pipeline.explain_chunks(&model, ds.chunks())?;
        detection.push(DetectionRate {
            scenario,
            n: ds.len(),
            flagged: explained.iter().filter(|e| e.flagged).count(),
        });

        for kind in AnomalyKind::INJECTED {
            let scores: Vec<f64> = explained
                .iter()
                .zip(labels)
                .filter(|(_, t)| t.kind == kind)
                .map(|(e, _)| e.score)
                .collect();
            if scores.is_empty() {
                warn!("scenario {}: no {} chunks, AUC row omitted", scenario.name(), kind.name());
                continue;
            }
            let mut a = auc(&nominal_scores, &scores)?;
            a.scenario = Some(scenario);
            a.kind = Some(kind);
            aucs.push(a);
        }

        let mut truth = Vec::new();
        let mut predicted = Vec::new();
        let mut outcomes = Vec::new();
        for (e, tag) in explained.iter().zip(labels) {
            let (Some(report), Some(t)) = (&e.report, tags.label(tag)) else {
                continue;
            };
            truth.push(t);
            predicted.push(report.predicted);
            outcomes.push(WheelOutcome {
                kind: tag.kind,
                true_wheel: t,
                predicted_wheel: report.predicted,
            });
        }
        if truth.is_empty() {
            return Err(Error::Input(format!(
                "scenario {}: no flagged test chunks to explain",
                scenario.name()
            )));
        }
        let base = format!("{}_{}", scenario.name(), tags.name());
        match tags {
            TagSet::Kinds => scopes.push(ScopeResult {
                scope: base,
                scenario,
                tag_set: tags,
                kind: None,
                matrix: confusion(&truth, &predicted, pipeline.vocabulary())?,
            }),
            TagSet::Wheels => {
                for panel in bias_report(&outcomes, pipeline.vocabulary())? {
                    let scope = match panel.kind {
                        None => base.clone(),
                        Some(k) => format!("{base}_{}", k.name().to_ascii_lowercase()),
                    };
                    scopes.push(ScopeResult {
                        scope,
                        scenario,
                        tag_set: tags,
                        kind: panel.kind,
                        matrix: panel.matrix,
                    });
                }
            }
        }
    }

    for s in &scopes {
        let stem = results_file(&format!("confusion_{}", s.scope));
        export_heatmap(
            s.matrix.probabilities.view(),
            &s.matrix.labels,
            &s.matrix.labels,
            dir.join(&stem),
        )?;
        log.output(&format!("{stem}.csv"))?;
        log.output(&format!("{stem}.svg"))?;
    }
    let summary = EvalSummary {
        threshold,
        n_nominal: test.len(),
        false_positives,
        aucs,
        detection,
        scopes,
    };
    for (name, text) in [
        ("auc.csv", auc_csv(&summary.aucs)),
        ("bias.csv", bias_csv(&summary.scopes)),
        ("detection.csv", detection_csv(&summary)),
    ] {
        let rel = results_file(name);
        write_text(dir, &rel, &text)?;
        log.output(&rel)?;
    }
    log.count("nominal_test", test.len());
    let record = log.finish();
    manifest.record("evaluate", record);
    manifest.save(dir)?;
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExplainOptions {
    /// Telemetry CSV to explain; a synthetic stream with one step event when absent.
    pub stream: Option<PathBuf>,
    pub stride: Option<usize>,
    pub scenario: Option<Scenario>,
    pub tag_set: Option<TagSet>,
    /// Selects the seed of the synthetic stream.
    pub trial: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainOutcome {
    pub trace: StreamTrace,
    /// `(start sample, length)` of the injected event in a synthetic stream.
    pub event: Option<(u64, u64)>,
}

/// Builds the nominal stream of one trial with a step event on every channel.
fn synthetic_stream(cfg: &RunConfig, cal: &IntensityCalibration, trial: u64) -> Result<(Stream, (u64, u64))> {
    let seed = derive_seed(cfg.seed, &format!("explain/{trial}"));
    let mut stream = generate_stream(&cfg.generator.generator(seed, cfg.eval.stream_samples))?;
    let e = &cfg.eval;
    inject_step_event(&mut stream, e.event_start, e.event_length, cal.step, seed)?;
    let start = stream.start_index + e.event_start as u64;
    Ok((stream, (start, e.event_length as u64)))
}

/// Sliding-window explanation of a stream: writes `stream_trace.csv`,
/// `stream_heatmap.csv` and `stream_report.svg`.
pub fn cmd_explain(cfg: &RunConfig, opts: &ExplainOptions) -> Result<ExplainOutcome> {
    let dir = cfg.out_dir.as_path();
    let mut manifest = Manifest::open(dir, &cfg.hash())?;
    let seed = derive_seed(cfg.seed, &format!("explain/{}", opts.trial));
    let mut log = StageLog::new(dir, &manifest, seed);
    let model = load_trained_model(&mut log)?;
    let scenario = opts.scenario.unwrap_or(Scenario::I);
    let tags = opts.tag_set.unwrap_or_else(|| default_tag_set(cfg, scenario));
    let pipeline = load_fitted_pipeline(&mut log, &model, scenario, tags)?;

    let results = dir.join(RESULTS_DIR);
    create_dir(&results)?;
    let (stream, event) = match &opts.stream {
        Some(path) => {
            log.external_input(path)?;
            (read_stream_csv(path)?, None)
        }
        None => {
            let cal = read_calibration(&log.input(CALIBRATION_FILE)?)?;
            let (stream, event) = synthetic_stream(cfg, &cal, opts.trial)?;
            let rel = results_file("stream.csv");
            write_stream_csv(dir.join(&rel), &stream)?;
            log.output(&rel)?;
            (stream, Some(event))
        }
    };
    let stride = opts.stride.unwrap_or(cfg.eval.stride);
    let trace = peepscope_core::eval::explain_stream(&model, &pipeline, &stream, stride)?;
    write_stream_report(&results, &stream, &trace)?;
    write_text(dir, &results_file("stream_heatmap.csv"), &matrix_csv(trace.heatmap().view()))?;
    for name in ["stream_trace.csv", "stream_report.svg", "stream_heatmap.csv"] {
        log.output(&results_file(name))?;
    }
    log.count("windows", trace.rows.len());
    log.count("stride", stride);
    info!(
        "{} windows, {} flagged regions",
        trace.rows.len(),
        trace.regions.len()
    );
    let record = log.finish();
    manifest.record("explain", record);
    manifest.save(dir)?;
    Ok(ExplainOutcome { trace, event })
}
