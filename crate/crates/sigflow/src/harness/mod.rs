//! Experiment harness: protocol runners (fidelity, TSTR, augmentation,
//! scans, bench), subject-level aggregation, config loading, and atomic
//! report output.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::classifier::{train_classifier, Classifier, ClassifierConfig, Purpose};
use crate::data::{
    augment_baseline, drop_rest_and_split, segment_windows, synth_generate, zscore_apply,
    zscore_fit, AugmentMethod, AugmentParams, Split, SynthConfig, WindowDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{
    cas, extract_features, fid, inception_score, knn_realism, macro_scores, prdc,
    prototype_concentration, MetricReport,
};
use crate::model::{ModelConfig, VelocityNet};
use crate::rng;
use crate::sampler::{bench_throughput, sample_batch, Method, SampleRequest, SolverConfig};
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor};
use crate::train::{train_generator, TimeSampler, TrainConfig};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_GUIDANCE_GRID: [f32; 5] = [1.0, 1.25, 1.5, 2.0, 2.5];
pub const PROTO_THRESHOLDS: [f64; 2] = [0.8, 0.6];
pub const PROTO_TOP_M: [usize; 2] = [1, 10];

fn d_window_ms() -> f64 {
    200.0
}
fn d_stride_ms() -> f64 {
    50.0
}
fn d_train_trials() -> Vec<u16> {
    vec![1, 3, 4, 6]
}
fn d_test_trials() -> Vec<u16> {
    vec![2, 5]
}

/// Where the real data comes from: a dataset path (directory of windowed
/// `*_train.emgw`/`*_test.emgw` pairs or a raw CSV recording) or an
/// in-process synthetic corpus. Exactly one must be set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default = "d_window_ms")]
    pub window_ms: f64,
    #[serde(default = "d_stride_ms")]
    pub stride_ms: f64,
    #[serde(default = "d_train_trials")]
    pub train_trials: Vec<u16>,
    #[serde(default = "d_test_trials")]
    pub test_trials: Vec<u16>,
    #[serde(default)]
    pub synth_seed: u64,
}

impl DataSource {
    pub fn from_synth(cfg: SynthConfig) -> Self {
        DataSource {
            path: None,
            synth: Some(cfg),
            window_ms: d_window_ms(),
            stride_ms: d_stride_ms(),
            train_trials: d_train_trials(),
            test_trials: d_test_trials(),
            synth_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synth) {
            (Some(_), Some(_)) => Err(Error::Config(
                "data source must set exactly one of path and synth, got both".into(),
            )),
            (None, None) => Err(Error::Config(
                "data source must set one of path and synth".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Fidelity,
    Tstr,
    Augmentation,
    ScanGuidance,
    ScanSolver,
    ScanTimeSampling,
    Bench,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Fidelity => "fidelity",
            Protocol::Tstr => "tstr",
            Protocol::Augmentation => "augmentation",
            Protocol::ScanGuidance => "scan_guidance",
            Protocol::ScanSolver => "scan_solver",
            Protocol::ScanTimeSampling => "scan_time_sampling",
            Protocol::Bench => "bench",
        }
    }
}

/// What gets added to the real training set in the augmentation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationSource {
    Generator,
    Replicate,
    JitterScale,
    Mixup,
    None,
}

fn d_classifier() -> ClassifierConfig {
    ClassifierConfig::for_purpose(Purpose::Downstream)
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_eval_samples() -> usize {
    5000
}
fn d_prdc_k() -> usize {
    5
}
fn d_augment() -> AugmentationSource {
    AugmentationSource::Generator
}
fn d_guidance_grid() -> Vec<f32> {
    DEFAULT_GUIDANCE_GRID.to_vec()
}
fn d_nfe_grid() -> Vec<usize> {
    vec![4, 8, 16, 32]
}
fn d_scan_methods() -> Vec<Method> {
    vec![Method::Euler, Method::Heun, Method::Rk4]
}
fn d_bench_samples() -> usize {
    8
}

/// Top-level experiment description, loaded from a JSON document with keys
/// {data, model, train, solver, classifier, protocol, seeds, out}.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "d_classifier")]
    pub classifier: ClassifierConfig,
    pub protocol: Protocol,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "d_prdc_k")]
    pub prdc_k: usize,
    #[serde(default = "d_augment")]
    pub augment: AugmentationSource,
    #[serde(default)]
    pub augment_params: AugmentParams,
    #[serde(default = "d_guidance_grid")]
    pub guidance_grid: Vec<f32>,
    #[serde(default = "d_nfe_grid")]
    pub nfe_grid: Vec<usize>,
    #[serde(default = "d_scan_methods")]
    pub scan_methods: Vec<Method>,
    #[serde(default = "d_bench_samples")]
    pub bench_samples: usize,
    /// Training epochs for the evaluation feature extractor; falls back to
    /// the classifier's epoch count. A lightly trained extractor keeps more
    /// within-class structure in its features, which the manifold metrics
    /// need; the downstream classifier usually wants more epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor_epochs: Option<usize>,
    /// Optional pre-trained generator checkpoint; protocols train from
    /// scratch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Restrict the run to one subject id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must be non-empty".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        if self.prdc_k == 0 {
            return Err(Error::Config("prdc_k must be positive".into()));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {}", e)))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// A conditional window source: the trained flow model, a replay oracle,
/// or pure noise. All produce Synthetic-split datasets with zero trial ids.
pub trait Generator {
    fn generate(&self, labels: &[u16], seed: u64) -> Result<WindowDataset>;
    fn describe(&self) -> String;
}

pub struct FlowGenerator<'a> {
    pub net: &'a VelocityNet,
    pub solver: SolverConfig,
}

impl Generator for FlowGenerator<'_> {
    fn generate(&self, labels: &[u16], seed: u64) -> Result<WindowDataset> {
        sample_batch(
            self.net,
            &SampleRequest {
                labels: labels.to_vec(),
                seed,
                solver: self.solver,
            },
        )
    }

    fn describe(&self) -> String {
        format!(
            "flow/{}@{}w{}",
            self.solver.method.name(),
            self.solver.nfe_budget,
            self.solver.guidance_weight
        )
    }
}

/// Oracle generator: replays real windows of the requested class, cycling
/// through each class's pool in order.
pub struct ReplayGenerator<'a> {
    pub source: &'a WindowDataset,
}

impl Generator for ReplayGenerator<'_> {
    fn generate(&self, labels: &[u16], _seed: u64) -> Result<WindowDataset> {
        let (c, l) = (self.source.channels(), self.source.window_len());
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); self.source.num_classes as usize + 1];
        for (i, &lab) in self.source.labels.iter().enumerate() {
            pools[lab as usize].push(i);
        }
        let mut cursors = vec![0usize; pools.len()];
        let mut data = Vec::with_capacity(labels.len() * c * l);
        for &lab in labels {
            let pool = pools
                .get(lab as usize)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no source windows for class {}", lab))
                })?;
            let idx = pool[cursors[lab as usize] % pool.len()];
            cursors[lab as usize] += 1;
            data.extend_from_slice(self.source.window(idx));
        }
        Ok(WindowDataset {
            windows: Tensor::from_vec(vec![labels.len(), c, l], data)?,
            labels: labels.to_vec(),
            subject_id: self.source.subject_id.clone(),
            split: Split::Synthetic,
            trial_ids: vec![0; labels.len()],
            num_classes: self.source.num_classes,
        })
    }

    fn describe(&self) -> String {
        "replay".into()
    }
}

/// Control generator: standard normal noise, labels passed through.
pub struct NoiseGenerator {
    pub channels: usize,
    pub window_len: usize,
    pub num_classes: u16,
}

impl Generator for NoiseGenerator {
    fn generate(&self, labels: &[u16], seed: u64) -> Result<WindowDataset> {
        let (c, l) = (self.channels, self.window_len);
        let mut data = Vec::with_capacity(labels.len() * c * l);
        for i in 0..labels.len() {
            let mut r = rng::stream(seed, "noise_generator", i as u64);
            for _ in 0..c * l {
                data.push(
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r) as f32,
                );
            }
        }
        Ok(WindowDataset {
            windows: Tensor::from_vec(vec![labels.len(), c, l], data)?,
            labels: labels.to_vec(),
            subject_id: "noise".into(),
            split: Split::Synthetic,
            trial_ids: vec![0; labels.len()],
            num_classes: self.num_classes,
        })
    }

    fn describe(&self) -> String {
        "noise".into()
    }
}

/// Class-balanced label list of exactly n entries; per-class counts differ
/// by at most one.
pub fn balanced_fill(k: u16, n: usize) -> Vec<u16> {
    let ku = k as usize;
    let base = n / ku;
    let extra = n % ku;
    let mut out = Vec::with_capacity(n);
    for c in 1..=k {
        let count = base + usize::from((c as usize) <= extra);
        out.extend(std::iter::repeat(c).take(count));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject: String,
    pub seed: u64,
    pub protocol: String,
    pub report: MetricReport,
}

fn shaped_classifier(
    base: &ClassifierConfig,
    purpose: Purpose,
    data: &WindowDataset,
    seed: u64,
) -> ClassifierConfig {
    let defaults = ClassifierConfig::for_purpose(purpose);
    ClassifierConfig {
        channels: data.channels(),
        window_len: data.window_len(),
        num_classes: data.num_classes,
        purpose,
        smoothing: defaults.smoothing,
        warmup_epochs: defaults.warmup_epochs,
        weight_decay: defaults.weight_decay,
        seed,
        ..base.clone()
    }
}

pub fn shaped_model(base: &ModelConfig, data: &WindowDataset) -> ModelConfig {
    ModelConfig {
        channels: data.channels(),
        window_len: data.window_len(),
        num_classes: data.num_classes,
        ..base.clone()
    }
}

fn guard_no_real_train(clf: &Classifier, what: &str) -> Result<()> {
    if clf.provenance.real_train_windows > 0 || clf.provenance.real_test_windows > 0 {
        return Err(Error::Contamination(format!(
            "{} classifier saw {} real train and {} real test windows; synthetic only allowed",
            what, clf.provenance.real_train_windows, clf.provenance.real_test_windows
        )));
    }
    Ok(())
}

fn guard_real_train_only(clf: &Classifier, what: &str) -> Result<()> {
    if clf.provenance.synthetic_windows > 0 || clf.provenance.real_test_windows > 0 {
        return Err(Error::Contamination(format!(
            "{} classifier saw {} synthetic and {} real test windows; real train only allowed",
            what, clf.provenance.synthetic_windows, clf.provenance.real_test_windows
        )));
    }
    if clf.provenance.real_train_windows == 0 {
        return Err(Error::Contamination(format!(
            "{} classifier saw no real training windows",
            what
        )));
    }
    Ok(())
}

fn score_downstream(
    clf: &Classifier,
    real_test: &WindowDataset,
) -> Result<MetricReport> {
    let preds = clf.predict(&real_test.windows)?;
    let (acc, f1, rec) = macro_scores(&preds, &real_test.labels, real_test.num_classes)?;
    Ok(MetricReport {
        acc: Some(acc),
        macro_f1: Some(f1),
        macro_recall: Some(rec),
        extractor_fingerprint: Some(clf.fingerprint()),
        ..MetricReport::default()
    })
}

/// Real-data control: downstream classifier on the real training split,
/// scored on the real test split.
pub fn run_baseline(
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SubjectResult> {
    let ccfg = shaped_classifier(&cfg.classifier, Purpose::Downstream, real_train, seed);
    let clf = train_classifier(&ccfg, real_train)?;
    Ok(SubjectResult {
        subject: real_train.subject_id.clone(),
        seed,
        protocol: "baseline".into(),
        report: score_downstream(&clf, real_test)?,
    })
}

/// Train on synthetic, test on real: a class-balanced synthetic set of the
/// real training size, a downstream classifier trained on it alone, scored
/// on the real test split. Fails loudly if the classifier provenance shows
/// any real windows.
pub fn run_tstr(
    gen: &dyn Generator,
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SubjectResult> {
    let labels = balanced_fill(real_train.num_classes, real_train.len());
    let synth = gen.generate(&labels, seed)?;
    let ccfg = shaped_classifier(&cfg.classifier, Purpose::Downstream, &synth, seed);
    let clf = train_classifier(&ccfg, &synth)?;
    guard_no_real_train(&clf, "tstr")?;
    Ok(SubjectResult {
        subject: real_train.subject_id.clone(),
        seed,
        protocol: "tstr".into(),
        report: score_downstream(&clf, real_test)?,
    })
}

/// Augmentation protocol: real training set plus one extra volume of
/// windows (so replicate, the baseline controls, and generated data all
/// train on 2N windows), downstream classifier on the union, scored on the
/// real test split. `AugmentationSource::None` is the untouched baseline.
pub fn run_augmentation(
    gen: Option<&dyn Generator>,
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SubjectResult> {
    let train_set = match cfg.augment {
        AugmentationSource::None => real_train.clone(),
        AugmentationSource::Replicate => {
            augment_baseline(real_train, AugmentMethod::Replicate, &cfg.augment_params, seed)?
        }
        AugmentationSource::JitterScale => {
            augment_baseline(real_train, AugmentMethod::JitterScale, &cfg.augment_params, seed)?
        }
        AugmentationSource::Mixup => {
            augment_baseline(real_train, AugmentMethod::Mixup, &cfg.augment_params, seed)?
        }
        AugmentationSource::Generator => {
            let gen = gen.ok_or_else(|| {
                Error::InvalidArgument("augmentation source generator needs a generator".into())
            })?;
            let labels = balanced_fill(real_train.num_classes, real_train.len());
            real_train.concat(&gen.generate(&labels, seed)?)?
        }
    };
    let ccfg = shaped_classifier(&cfg.classifier, Purpose::Downstream, &train_set, seed);
    let clf = train_classifier(&ccfg, &train_set)?;
    Ok(SubjectResult {
        subject: real_train.subject_id.clone(),
        seed,
        protocol: "augmentation".into(),
        report: score_downstream(&clf, real_test)?,
    })
}

/// Train the evaluation feature extractor on the real training split only.
pub fn train_extractor(
    cfg: &ExperimentConfig,
    real_train: &WindowDataset,
    seed: u64,
) -> Result<Classifier> {
    let mut ccfg = shaped_classifier(&cfg.classifier, Purpose::FeatureExtractor, real_train, seed);
    if let Some(epochs) = cfg.extractor_epochs {
        ccfg.epochs = epochs;
    }
    let clf = train_classifier(&ccfg, real_train)?;
    guard_real_train_only(&clf, "feature extractor")?;
    Ok(clf)
}

/// Fidelity protocol with a caller-supplied extractor (so scans can reuse
/// one extractor across grid points without changing the scores).
pub fn run_fidelity_with(
    extractor: &Classifier,
    gen: &dyn Generator,
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SubjectResult> {
    guard_real_train_only(extractor, "fidelity extractor")?;
    let n = cfg.eval_samples.min(5000);
    let labels = balanced_fill(real_train.num_classes, n);
    let synth = gen.generate(&labels, seed)?;

    let f_train = extract_features(extractor, real_train)?;
    let f_test = extract_features(extractor, real_test)?;
    let f_synth = extract_features(extractor, &synth)?;

    let fid_v = fid(&f_train, &f_synth)?;
    let anchor = fid(&f_train, &f_test)?;
    let probs_f32 = extractor.probs(&synth.windows)?;
    let k = synth.num_classes as usize;
    let probs: Vec<f64> = probs_f32.data().iter().map(|&v| v as f64).collect();
    let (is_mean, is_std) = inception_score(&probs, synth.len(), k, 10.min(synth.len()))?;
    let cas_v = cas(extractor, &synth)?;
    let p = prdc(&f_train, &f_synth, cfg.prdc_k)?;
    let (rt, rs, gap) = knn_realism(&f_synth, &f_train, &f_test)?;
    let proto = prototype_concentration(&f_synth, &f_train, &PROTO_THRESHOLDS, &PROTO_TOP_M)?;

    let report = MetricReport {
        fid: Some(fid_v),
        fid_anchor: Some(anchor),
        is_mean: Some(is_mean),
        is_std: Some(is_std),
        cas: Some(cas_v),
        precision: Some(p.precision),
        recall: Some(p.recall),
        density: Some(p.density),
        coverage: Some(p.coverage),
        realism_train: Some(rt),
        realism_test: Some(rs),
        traintest_gap: Some(gap),
        proto_top1: Some(proto.top_shares[0].1),
        proto_top10: Some(proto.top_shares[1].1),
        proto_frac_r_lt_08: Some(proto.frac_r_lt[0].1),
        proto_frac_r_lt_06: Some(proto.frac_r_lt[1].1),
        proto_median_share: Some(proto.median_hit_share),
        extractor_fingerprint: Some(extractor.fingerprint()),
        ..MetricReport::default()
    };
    report.validate()?;
    Ok(SubjectResult {
        subject: real_train.subject_id.clone(),
        seed,
        protocol: "fidelity".into(),
        report,
    })
}

/// Full fidelity protocol: trains the extractor, generates a class-balanced
/// evaluation set, and reports FID (with the train-vs-test anchor), IS,
/// CAS, PRDC, realism, and prototype statistics.
pub fn run_fidelity(
    gen: &dyn Generator,
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SubjectResult> {
    let extractor = train_extractor(cfg, real_train, seed)?;
    run_fidelity_with(&extractor, gen, real_train, real_test, cfg, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRow {
    pub subject: String,
    pub seed: u64,
    pub point: String,
    pub value: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendSummary {
    pub metric: String,
    pub spearman: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanTable {
    pub kind: String,
    pub rows: Vec<ScanRow>,
    pub trends: Vec<TrendSummary>,
}

impl ScanTable {
    pub fn csv(&self) -> String {
        let mut s = format!("subject,seed,point,value,{}\n", MetricReport::csv_header());
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.subject,
                r.seed,
                r.point,
                r.value,
                r.report.csv_row()
            ));
        }
        s
    }
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0f64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j + 2) as f64 / 2.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        0.0
    } else {
        num / (dx * dy).sqrt()
    }
}

fn compute_trends(rows: &[ScanRow]) -> Vec<TrendSummary> {
    let mut trends = Vec::new();
    if rows.len() < 2 {
        return trends;
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    for (name, _) in rows[0].report.fields() {
        let ys: Vec<Option<f64>> = rows
            .iter()
            .map(|r| r.report.fields().iter().find(|(n, _)| *n == name).unwrap().1)
            .collect();
        if ys.iter().all(|v| v.is_some()) {
            let ys: Vec<f64> = ys.into_iter().map(|v| v.unwrap()).collect();
            trends.push(TrendSummary {
                metric: name.to_string(),
                spearman: spearman(&xs, &ys),
            });
        }
    }
    trends
}

/// Guidance-weight scan: one trained generator, one extractor, sampling
/// repeated per weight. Each row carries fidelity metrics plus TSTR scores.
pub fn run_guidance_scan(
    net: &VelocityNet,
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ScanTable> {
    if cfg.guidance_grid.is_empty() {
        return Err(Error::InvalidArgument("empty guidance grid".into()));
    }
    let extractor = train_extractor(cfg, real_train, seed)?;
    let mut rows = Vec::new();
    for &w in &cfg.guidance_grid {
        let gen = FlowGenerator {
            net,
            solver: SolverConfig {
                guidance_weight: w,
                ..cfg.solver
            },
        };
        let fidelity = run_fidelity_with(&extractor, &gen, real_train, real_test, cfg, seed)?;
        let tstr = run_tstr(&gen, real_train, real_test, cfg, seed)?;
        let mut report = fidelity.report;
        report.acc = tstr.report.acc;
        report.macro_f1 = tstr.report.macro_f1;
        report.macro_recall = tstr.report.macro_recall;
        rows.push(ScanRow {
            subject: real_train.subject_id.clone(),
            seed,
            point: format!("w={}", w),
            value: w as f64,
            report,
        });
    }
    let trends = compute_trends(&rows);
    Ok(ScanTable { kind: "guidance".into(), rows, trends })
}

/// Matched-NFE solver scan: every (method, budget) pair at the configured
/// guidance weight, fidelity metrics only.
pub fn run_solver_scan(
    net: &VelocityNet,
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ScanTable> {
    if cfg.scan_methods.is_empty() || cfg.nfe_grid.is_empty() {
        return Err(Error::InvalidArgument("empty solver grid".into()));
    }
    let extractor = train_extractor(cfg, real_train, seed)?;
    let mut rows = Vec::new();
    for &method in &cfg.scan_methods {
        for &budget in &cfg.nfe_grid {
            let gen = FlowGenerator {
                net,
                solver: SolverConfig {
                    method,
                    nfe_budget: budget,
                    ..cfg.solver
                },
            };
            let sr = run_fidelity_with(&extractor, &gen, real_train, real_test, cfg, seed)?;
            rows.push(ScanRow {
                subject: real_train.subject_id.clone(),
                seed,
                point: format!("{}@{}", method.name(), budget),
                value: budget as f64,
                report: sr.report,
            });
        }
    }
    let trends = compute_trends(&rows);
    Ok(ScanTable { kind: "solver_nfe".into(), rows, trends })
}

/// Time-sampling scan: two generators trained identically except for the
/// training-time distribution over t.
pub fn run_time_sampling_scan(
    net_logit: &VelocityNet,
    net_uniform: &VelocityNet,
    real_train: &WindowDataset,
    real_test: &WindowDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ScanTable> {
    let extractor = train_extractor(cfg, real_train, seed)?;
    let mut rows = Vec::new();
    for (name, value, net) in [
        ("uniform", 0.0f64, net_uniform),
        ("logit_normal", 1.0, net_logit),
    ] {
        let gen = FlowGenerator { net, solver: cfg.solver };
        let fidelity = run_fidelity_with(&extractor, &gen, real_train, real_test, cfg, seed)?;
        let tstr = run_tstr(&gen, real_train, real_test, cfg, seed)?;
        let mut report = fidelity.report;
        report.acc = tstr.report.acc;
        report.macro_f1 = tstr.report.macro_f1;
        report.macro_recall = tstr.report.macro_recall;
        rows.push(ScanRow {
            subject: real_train.subject_id.clone(),
            seed,
            point: name.into(),
            value,
            report,
        });
    }
    let trends = compute_trends(&rows);
    Ok(ScanTable { kind: "time_sampling".into(), rows, trends })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n: usize,
    pub mean: MetricReport,
    pub std: MetricReport,
}

/// Unweighted mean and sample standard deviation (n-1) per metric over
/// subject results. A metric missing from any row is omitted, never
/// imputed. A single row reports std 0.
pub fn aggregate_subjects(results: &[SubjectResult]) -> Result<AggregateReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no results to aggregate".into()));
    }
    let n = results.len();
    let mut mean = MetricReport::default();
    let mut std = MetricReport::default();
    for (name, _) in results[0].report.fields() {
        let vals: Vec<Option<f64>> = results
            .iter()
            .map(|r| r.report.fields().iter().find(|(f, _)| *f == name).unwrap().1)
            .collect();
        if vals.iter().any(|v| v.is_none()) {
            continue;
        }
        let vals: Vec<f64> = vals.into_iter().map(|v| v.unwrap()).collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let s = if n > 1 {
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        mean.set(name, m);
        std.set(name, s);
    }
    Ok(AggregateReport { n, mean, std })
}

/// One subject's preprocessed splits.
pub struct SubjectData {
    pub subject: String,
    pub train: WindowDataset,
    pub test: WindowDataset,
}

fn preprocess_session(
    session: &crate::data::RecordingSession,
    src: &DataSource,
) -> Result<SubjectData> {
    let windows = segment_windows(session, src.window_ms, src.stride_ms)?;
    let train_trials: BTreeSet<u16> = src.train_trials.iter().cloned().collect();
    let test_trials: BTreeSet<u16> = src.test_trials.iter().cloned().collect();
    let (train, test, _) = drop_rest_and_split(&windows, &train_trials, &test_trials)?;
    let stats = zscore_fit(&train, 1e-8)?;
    Ok(SubjectData {
        subject: session.subject_id.clone(),
        train: zscore_apply(&train, &stats)?,
        test: zscore_apply(&test, &stats)?,
    })
}

/// Resolve the data source into per-subject windowed, z-scored splits.
pub fn load_subjects(src: &DataSource) -> Result<Vec<SubjectData>> {
    src.validate()?;
    if let Some(synth) = &src.synth {
        let sessions = synth_generate(synth, src.synth_seed)?;
        return sessions.iter().map(|s| preprocess_session(s, src)).collect();
    }
    let path = src.path.as_ref().unwrap();
    if path.is_dir() {
        let mut subjects = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(path)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix("_train.emgw") {
                names.push(stem.to_string());
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(Error::Config(format!(
                "no *_train.emgw files under {}",
                path.display()
            )));
        }
        for stem in names {
            let train = crate::data::dataset_load(&path.join(format!("{}_train.emgw", stem)))?;
            let test = crate::data::dataset_load(&path.join(format!("{}_test.emgw", stem)))?;
            subjects.push(SubjectData { subject: stem, train, test });
        }
        return Ok(subjects);
    }
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("subject")
            .to_string();
        let session = crate::data::session_from_csv(path, &stem)?;
        return Ok(vec![preprocess_session(&session, src)?]);
    }
    Err(Error::Config(format!(
        "data path {} is neither a dataset directory nor a .csv recording",
        path.display()
    )))
}

/// Save a trained generator: parameter group 0 is the raw model, group 1
/// the EMA weights used for sampling.
pub fn save_generator(path: &Path, net: &VelocityNet, ema: &VelocityNet) -> Result<()> {
    save_checkpoint(path, &[net.param_group(), ema.param_group()])
}

pub fn load_generator(path: &Path, cfg: &ModelConfig) -> Result<(VelocityNet, VelocityNet)> {
    let groups = load_checkpoint(path)?;
    if groups.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "generator checkpoint holds {} parameter groups, expected 2",
            groups.len()
        )));
    }
    let mut net = VelocityNet::new(cfg.clone(), 0)?;
    let mut ema = VelocityNet::new(cfg.clone(), 0)?;
    net.load_param_group(&groups[0])?;
    ema.load_param_group(&groups[1])?;
    Ok((net, ema))
}

/// Load subjects and apply the configured subject filter.
pub fn selected_subjects(cfg: &ExperimentConfig) -> Result<Vec<SubjectData>> {
    let mut subjects = load_subjects(&cfg.data)?;
    if let Some(want) = &cfg.subject {
        subjects.retain(|s| &s.subject == want);
        if subjects.is_empty() {
            return Err(Error::Config(format!("subject {} not found in data source", want)));
        }
    }
    Ok(subjects)
}

fn rename_into(tmp: &Path, path: &Path) -> Result<()> {
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Materialize the preprocessed corpus as `<subject>_train.emgw` and
/// `<subject>_test.emgw` files under the output directory.
pub fn run_synth_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    for sub in selected_subjects(cfg)? {
        for (suffix, ds) in [("train", &sub.train), ("test", &sub.test)] {
            let path = cfg.out.join(format!("{}_{}.emgw", sub.subject, suffix));
            let tmp = cfg.out.join(format!(".{}_{}.emgw.tmp", sub.subject, suffix));
            crate::data::dataset_save(ds, &tmp)?;
            rename_into(&tmp, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Train one generator per subject; writes `<subject>.fmck` checkpoints
/// and `<subject>_loss.csv` training histories.
pub fn run_gen_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    for sub in selected_subjects(cfg)? {
        let model_cfg = shaped_model(&cfg.model, &sub.train);
        let (net, ema, history) = train_generator(&model_cfg, &cfg.train, &sub.train)?;
        let ckpt = cfg.out.join(format!("{}.fmck", sub.subject));
        let tmp = cfg.out.join(format!(".{}.fmck.tmp", sub.subject));
        save_generator(&tmp, &net, &ema)?;
        rename_into(&tmp, &ckpt)?;
        let csv = cfg.out.join(format!("{}_loss.csv", sub.subject));
        write_atomic(&csv, crate::train::loss_history_csv(&history).as_bytes())?;
        written.push(ckpt);
        written.push(csv);
    }
    Ok(written)
}

/// Sample class-balanced windows from a trained (or freshly trained)
/// generator into `<subject>_seed<seed>_samples.emgw` files.
pub fn run_sample(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut written = Vec::new();
    for sub in selected_subjects(cfg)? {
        let model_cfg = shaped_model(&cfg.model, &sub.train);
        let ema = obtain_generator(cfg, &model_cfg, &sub.train)?;
        let labels = balanced_fill(sub.train.num_classes, cfg.eval_samples);
        for &seed in &cfg.seeds {
            let gen = FlowGenerator { net: &ema, solver: cfg.solver };
            let ds = gen.generate(&labels, seed)?;
            let path = cfg.out.join(format!("{}_seed{}_samples.emgw", sub.subject, seed));
            let tmp = cfg.out.join(format!(".{}_seed{}.emgw.tmp", sub.subject, seed));
            crate::data::dataset_save(&ds, &tmp)?;
            rename_into(&tmp, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn obtain_generator(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    train_set: &WindowDataset,
) -> Result<VelocityNet> {
    if let Some(ckpt) = &cfg.checkpoint {
        let (_, ema) = load_generator(ckpt, model_cfg)?;
        return Ok(ema);
    }
    let (_, ema, _) = train_generator(model_cfg, &cfg.train, train_set)?;
    Ok(ema)
}

/// Run the configured protocol end to end: resolve data, train per-subject
/// models, write one JSON per (subject, seed), plus an aggregate JSON and a
/// CSV per scan. Returns the written paths.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let subjects = selected_subjects(cfg)?;
    let mut written = Vec::new();
    let mut flat_results: Vec<SubjectResult> = Vec::new();
    for sub in &subjects {
        let model_cfg = shaped_model(&cfg.model, &sub.train);
        match cfg.protocol {
            Protocol::Bench => {
                let net = VelocityNet::new(model_cfg.clone(), cfg.train.seed)?;
                let rep = bench_throughput(&net, &cfg.solver, cfg.bench_samples)?;
                let path = cfg.out.join(format!("bench_{}.json", sub.subject));
                write_json(&path, &rep)?;
                written.push(path);
            }
            Protocol::Fidelity | Protocol::Tstr | Protocol::Augmentation => {
                let ema = obtain_generator(cfg, &model_cfg, &sub.train)?;
                for &seed in &cfg.seeds {
                    let gen = FlowGenerator { net: &ema, solver: cfg.solver };
                    let result = match cfg.protocol {
                        Protocol::Fidelity => {
                            run_fidelity(&gen, &sub.train, &sub.test, cfg, seed)?
                        }
                        Protocol::Tstr => run_tstr(&gen, &sub.train, &sub.test, cfg, seed)?,
                        Protocol::Augmentation => {
                            run_augmentation(Some(&gen), &sub.train, &sub.test, cfg, seed)?
                        }
                        _ => unreachable!(),
                    };
                    let path = cfg.out.join(format!(
                        "{}_{}_seed{}.json",
                        result.protocol, sub.subject, seed
                    ));
                    write_json(&path, &result)?;
                    written.push(path);
                    flat_results.push(result);
                }
            }
            Protocol::ScanGuidance | Protocol::ScanSolver => {
                let ema = obtain_generator(cfg, &model_cfg, &sub.train)?;
                for &seed in &cfg.seeds {
                    let table = match cfg.protocol {
                        Protocol::ScanGuidance => {
                            run_guidance_scan(&ema, &sub.train, &sub.test, cfg, seed)?
                        }
                        _ => run_solver_scan(&ema, &sub.train, &sub.test, cfg, seed)?,
                    };
                    let base = format!("{}_{}_seed{}", cfg.protocol.name(), sub.subject, seed);
                    let jpath = cfg.out.join(format!("{}.json", base));
                    write_json(&jpath, &table)?;
                    let cpath = cfg.out.join(format!("{}.csv", base));
                    write_atomic(&cpath, table.csv().as_bytes())?;
                    written.push(jpath);
                    written.push(cpath);
                }
            }
            Protocol::ScanTimeSampling => {
                let logit_cfg = TrainConfig {
                    time_sampler: TimeSampler::default(),
                    ..cfg.train.clone()
                };
                let uniform_cfg = TrainConfig {
                    time_sampler: TimeSampler::uniform(),
                    ..cfg.train.clone()
                };
                let (_, ema_l, _) = train_generator(&model_cfg, &logit_cfg, &sub.train)?;
                let (_, ema_u, _) = train_generator(&model_cfg, &uniform_cfg, &sub.train)?;
                for &seed in &cfg.seeds {
                    let table = run_time_sampling_scan(
                        &ema_l, &ema_u, &sub.train, &sub.test, cfg, seed,
                    )?;
                    let base = format!("{}_{}_seed{}", cfg.protocol.name(), sub.subject, seed);
                    let jpath = cfg.out.join(format!("{}.json", base));
                    write_json(&jpath, &table)?;
                    let cpath = cfg.out.join(format!("{}.csv", base));
                    write_atomic(&cpath, table.csv().as_bytes())?;
                    written.push(jpath);
                    written.push(cpath);
                }
            }
        }
    }
    if !flat_results.is_empty() {
        let agg = aggregate_subjects(&flat_results)?;
        let path = cfg.out.join("aggregate.json");
        write_json(&path, &agg)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CondMode;
    use tempfile::tempdir;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            channels: 2,
            window_len: 64,
            sampling_rate: 2000.0,
            subjects: 1,
            trials: 6,
            windows_per_class: 4,
            stride: 32,
            rest_len: 64,
            ..SynthConfig::default()
        }
    }

    fn tiny_cfg(out: PathBuf, protocol: Protocol) -> ExperimentConfig {
        let mut data = DataSource::from_synth(tiny_synth());
        data.window_ms = 32.0;
        data.stride_ms = 16.0;
        ExperimentConfig {
            data,
            model: ModelConfig {
                base_width: 4,
                depth: 2,
                time_embed_dim: 8,
                groups: 2,
                cond_mode: CondMode::Adagn,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                steps: 30,
                batch_size: 8,
                ema_start_step: 10,
                ..TrainConfig::default()
            },
            solver: SolverConfig {
                method: Method::Euler,
                nfe_budget: 2,
                guidance_weight: 1.0,
            },
            classifier: ClassifierConfig {
                width: 4,
                feature_dim: 8,
                groups: 2,
                epochs: 4,
                batch_size: 16,
                ..ClassifierConfig::for_purpose(Purpose::Downstream)
            },
            protocol,
            seeds: vec![0],
            out,
            extractor_epochs: None,
            eval_samples: 24,
            prdc_k: 2,
            augment: AugmentationSource::Generator,
            augment_params: AugmentParams::default(),
            guidance_grid: vec![1.0, 1.5],
            nfe_grid: vec![2, 4],
            scan_methods: vec![Method::Euler, Method::Heun],
            bench_samples: 2,
            checkpoint: None,
            subject: None,
        }
    }

    fn tiny_subject(cfg: &ExperimentConfig) -> SubjectData {
        load_subjects(&cfg.data).unwrap().into_iter().next().unwrap()
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Tstr);
        let js = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&js).unwrap();
        assert!(back.validate().is_ok());
        // both data sources set
        let mut bad = cfg.clone();
        bad.data.path = Some(PathBuf::from("/tmp/x"));
        assert!(bad.validate().is_err());
        // unknown key rejected
        assert!(serde_json::from_str::<ExperimentConfig>(
            &js.replace("\"protocol\"", "\"nonsense\":1,\"protocol\"")
        )
        .is_err());
    }

    #[test]
    fn balanced_fill_counts_differ_by_at_most_one() {
        for (k, n) in [(3u16, 10usize), (6, 17), (2, 1), (4, 4)] {
            let labels = balanced_fill(k, n);
            assert_eq!(labels.len(), n);
            let counts: Vec<usize> = (1..=k)
                .map(|c| labels.iter().filter(|&&l| l == c).count())
                .collect();
            let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(mx - mn <= 1, "{:?}", counts);
        }
    }

    #[test]
    fn replay_tstr_close_to_baseline_and_noise_near_chance() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Tstr);
        cfg.classifier.epochs = 10;
        let sub = tiny_subject(&cfg);
        let base = run_baseline(&sub.train, &sub.test, &cfg, 0).unwrap();
        let replay = ReplayGenerator { source: &sub.train };
        let tstr = run_tstr(&replay, &sub.train, &sub.test, &cfg, 0).unwrap();
        let (b, t) = (base.report.acc.unwrap(), tstr.report.acc.unwrap());
        assert!(t >= b - 0.15, "replay TSTR {} vs baseline {}", t, b);
        let noise = NoiseGenerator {
            channels: sub.train.channels(),
            window_len: sub.train.window_len(),
            num_classes: sub.train.num_classes,
        };
        let chance = run_tstr(&noise, &sub.train, &sub.test, &cfg, 0).unwrap();
        let c = chance.report.acc.unwrap();
        assert!(c < 0.75, "noise-trained accuracy suspiciously high: {}", c);
    }

    #[test]
    fn tstr_rejects_real_window_leakage() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Tstr);
        let sub = tiny_subject(&cfg);
        struct Leaky<'a>(&'a WindowDataset);
        impl Generator for Leaky<'_> {
            fn generate(&self, _labels: &[u16], _seed: u64) -> Result<WindowDataset> {
                // returns real train windows with their real trial ids
                Ok(self.0.clone())
            }
            fn describe(&self) -> String {
                "leaky".into()
            }
        }
        let err = run_tstr(&Leaky(&sub.train), &sub.train, &sub.test, &cfg, 0);
        assert!(matches!(err, Err(Error::Contamination(_))));
    }

    #[test]
    fn augmentation_none_equals_baseline_bit_exactly() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Augmentation);
        cfg.augment = AugmentationSource::None;
        let sub = tiny_subject(&cfg);
        let base = run_baseline(&sub.train, &sub.test, &cfg, 0).unwrap();
        let aug = run_augmentation(None, &sub.train, &sub.test, &cfg, 0).unwrap();
        assert_eq!(
            serde_json::to_string(&base.report).unwrap(),
            serde_json::to_string(&aug.report).unwrap()
        );
    }

    #[test]
    fn augmentation_volume_doubles_training_set() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Augmentation);
        let sub = tiny_subject(&cfg);
        let replay = ReplayGenerator { source: &sub.train };
        for source in [
            AugmentationSource::Generator,
            AugmentationSource::Replicate,
            AugmentationSource::JitterScale,
        ] {
            cfg.augment = source;
            let sr = run_augmentation(Some(&replay), &sub.train, &sub.test, &cfg, 0).unwrap();
            assert!(sr.report.acc.is_some());
        }
    }

    #[test]
    fn fidelity_replay_beats_anchor_and_reports_it() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Fidelity);
        cfg.classifier.epochs = 8;
        let sub = tiny_subject(&cfg);
        let replay = ReplayGenerator { source: &sub.train };
        let sr = run_fidelity(&replay, &sub.train, &sub.test, &cfg, 0).unwrap();
        let r = &sr.report;
        assert!(r.fid_anchor.is_some(), "anchor always reported");
        assert!(
            r.fid.unwrap() < r.fid_anchor.unwrap(),
            "replay fid {} anchor {}",
            r.fid.unwrap(),
            r.fid_anchor.unwrap()
        );
        assert!(r.extractor_fingerprint.is_some());
        assert!(r.cas.is_some() && r.precision.is_some() && r.proto_top1.is_some());
    }

    #[test]
    fn fidelity_rejects_contaminated_extractor() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Fidelity);
        let sub = tiny_subject(&cfg);
        let replay = ReplayGenerator { source: &sub.train };
        let synth = replay
            .generate(&balanced_fill(sub.train.num_classes, sub.train.len()), 0)
            .unwrap();
        let mixed = sub.train.concat(&synth).unwrap();
        let ccfg = shaped_classifier(&cfg.classifier, Purpose::FeatureExtractor, &mixed, 0);
        let extractor = train_classifier(&ccfg, &mixed).unwrap();
        let err = run_fidelity_with(&extractor, &replay, &sub.train, &sub.test, &cfg, 0);
        assert!(matches!(err, Err(Error::Contamination(_))));
    }

    #[test]
    fn guidance_scan_row_at_w1_matches_plain_fidelity() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::ScanGuidance);
        let sub = tiny_subject(&cfg);
        let model_cfg = shaped_model(&cfg.model, &sub.train);
        let (_, ema, _) = train_generator(&model_cfg, &cfg.train, &sub.train).unwrap();
        let table = run_guidance_scan(&ema, &sub.train, &sub.test, &cfg, 0).unwrap();
        assert_eq!(table.rows.len(), cfg.guidance_grid.len());
        let gen = FlowGenerator { net: &ema, solver: cfg.solver };
        let plain = run_fidelity(&gen, &sub.train, &sub.test, &cfg, 0).unwrap();
        let row = &table.rows[0];
        assert_eq!(row.point, "w=1");
        for (name, v) in plain.report.fields() {
            let scan_v = row.report.fields().iter().find(|(n, _)| *n == name).unwrap().1;
            if let Some(x) = v {
                assert_eq!(scan_v.unwrap().to_bits(), x.to_bits(), "metric {}", name);
            }
        }
        assert!(!table.trends.is_empty());
        // csv shape
        let csv = table.csv();
        assert_eq!(csv.lines().count(), 1 + table.rows.len());
    }

    #[test]
    fn solver_scan_has_full_grid() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::ScanSolver);
        let sub = tiny_subject(&cfg);
        let model_cfg = shaped_model(&cfg.model, &sub.train);
        let (_, ema, _) = train_generator(&model_cfg, &cfg.train, &sub.train).unwrap();
        let table = run_solver_scan(&ema, &sub.train, &sub.test, &cfg, 0).unwrap();
        assert_eq!(
            table.rows.len(),
            cfg.scan_methods.len() * cfg.nfe_grid.len()
        );
    }

    #[test]
    fn aggregate_hand_case_and_omission() {
        let mk = |acc: Option<f64>, fid: Option<f64>| SubjectResult {
            subject: "s".into(),
            seed: 0,
            protocol: "tstr".into(),
            report: MetricReport { acc, fid, ..MetricReport::default() },
        };
        let agg = aggregate_subjects(&[mk(Some(0.6), Some(1.0)), mk(Some(0.8), None)]).unwrap();
        assert!((agg.mean.acc.unwrap() - 0.7).abs() < 1e-12);
        assert!((agg.std.acc.unwrap() - 0.1414).abs() < 1e-3);
        assert!(agg.mean.fid.is_none(), "missing metric never imputed");
        // single row: std 0
        let one = aggregate_subjects(&[mk(Some(0.5), None)]).unwrap();
        assert_eq!(one.std.acc, Some(0.0));
        // order invariance
        let rev = aggregate_subjects(&[mk(Some(0.8), None), mk(Some(0.6), Some(1.0))]).unwrap();
        assert_eq!(
            serde_json::to_string(&agg.mean).unwrap(),
            serde_json::to_string(&rev.mean).unwrap()
        );
    }

    #[test]
    fn spearman_signs() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 5.0, 9.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[4.0, 1.0, 0.5]), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn run_experiment_writes_reports_deterministically() {
        let dir = tempdir().unwrap();
        let out1 = dir.path().join("a");
        let out2 = dir.path().join("b");
        let mut cfg = tiny_cfg(out1.clone(), Protocol::Tstr);
        cfg.seeds = vec![0, 1];
        let written = run_experiment(&cfg).unwrap();
        assert_eq!(written.len(), 3, "two reports plus aggregate");
        cfg.out = out2.clone();
        run_experiment(&cfg).unwrap();
        for name in ["tstr_synth-00_seed0.json", "tstr_synth-00_seed1.json", "aggregate.json"] {
            let a = std::fs::read(out1.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "{} differs between identical runs", name);
        }
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(dir.path().to_path_buf(), Protocol::Fidelity);
        let sub = tiny_subject(&cfg);
        let model_cfg = shaped_model(&cfg.model, &sub.train);
        let (net, ema, _) = train_generator(&model_cfg, &cfg.train, &sub.train).unwrap();
        let path = dir.path().join("gen.fmck");
        save_generator(&path, &net, &ema).unwrap();
        let (_, ema2) = load_generator(&path, &model_cfg).unwrap();
        let labels = vec![1u16, 2, 3];
        let a = FlowGenerator { net: &ema, solver: cfg.solver }
            .generate(&labels, 7)
            .unwrap();
        let b = FlowGenerator { net: &ema2, solver: cfg.solver }
            .generate(&labels, 7)
            .unwrap();
        assert_eq!(a.windows, b.windows);
    }
}
