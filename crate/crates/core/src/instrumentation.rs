//! Gradient-ratio probe, the noise-sweep harness and report files.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::methods::{
    build_method_state, evaluate_accuracy, loss_gradients, train_with_hook, EpochRecord, MethodKind, MethodSpec,
    MethodState, TrainConfig,
};
use crate::numeric::{derive_seed, Matrix, SeededRng};
use crate::world::{
    generate_world, inject_confusion_noise, inject_random_noise, sample_dataset, zero_shot_confusion, EmbeddingDataset,
    NoiseKind, NoiseSpec, Split, World, WorldConfig,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PROBE_SIZE: usize = 64;
pub const DEFAULT_CONFUSION_RUNS: usize = 100;

pub const CSV_HEADER: [&str; 11] = [
    "world_seed",
    "method",
    "context_len",
    "noise_kind",
    "noise_rate",
    "loss_kind",
    "q",
    "accuracy",
    "mean_grad_ratio",
    "pseudo_precision",
    "wall_ms",
];

const STREAM_PROBE: u64 = 300;
const STREAM_NOISE: u64 = 301;
const STREAM_CONFUSION: u64 = 302;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRatio {
    pub noisy_norm: f64,
    pub clean_norm: f64,
    /// `None` when the clean gradient vanishes.
    pub ratio: Option<f64>,
}

impl GradRatio {
    pub fn from_norms(noisy_norm: f64, clean_norm: f64) -> Self {
        let ratio = (clean_norm > 0.0).then(|| noisy_norm / clean_norm);
        Self {
            noisy_norm,
            clean_norm,
            ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRatioPoint {
    pub epoch: usize,
    #[serde(flatten)]
    pub value: GradRatio,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradRatioTrace(pub Vec<GradRatioPoint>);

impl GradRatioTrace {
    /// Mean over the epochs where the ratio is defined.
    pub fn mean_ratio(&self) -> Option<f64> {
        let ratios: Vec<f64> = self.0.iter().filter_map(|p| p.value.ratio).collect();
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

fn concat_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
}

/// Gradient norms of the mean loss over equally sized clean and noisy probe
/// groups. The state is only read.
pub fn gradient_ratio_probe(
    state: &MethodState,
    world: &World,
    data: &EmbeddingDataset,
    probe_size: usize,
    loss: &LossSpec,
    seed: u64,
) -> Result<GradRatio> {
    if probe_size == 0 {
        return Err(Error::invalid("probe_size", "must be >= 1"));
    }
    let clean: Vec<usize> = (0..data.len()).filter(|&i| data.clean_flags[i]).collect();
    let noisy: Vec<usize> = (0..data.len()).filter(|&i| !data.clean_flags[i]).collect();
    if noisy.is_empty() {
        return Err(Error::NoNoisySamples);
    }
    if clean.is_empty() {
        return Err(Error::NoCleanSamples);
    }
    let n = probe_size.min(clean.len()).min(noisy.len());
    let mut rng = SeededRng::new(seed);
    let mut norm_of = |pool: &[usize]| -> Result<f64> {
        let picked: Vec<usize> = rng.sample_indices(pool.len(), n).into_iter().map(|i| pool[i]).collect();
        let images = data.images.select_rows(&picked)?;
        let labels: Vec<usize> = picked.iter().map(|&i| data.observed_labels[i]).collect();
        let (_, grads) = loss_gradients(state, world, &images, &labels, loss)?;
        Ok(concat_norm(&grads))
    };
    let clean_norm = norm_of(&clean)?;
    let noisy_norm = norm_of(&noisy)?;
    Ok(GradRatio::from_norms(noisy_norm, clean_norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Display name; the method kind, or the pipeline variant for UPL runs.
    pub label: String,
    pub world: WorldConfig,
    pub method: MethodSpec,
    pub noise: Option<NoiseSpec>,
    pub loss: LossSpec,
    /// Effective training config, including the per-run seed.
    pub train: TrainConfig,
    pub accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub grad_ratio: Option<GradRatioTrace>,
    pub mean_grad_ratio: Option<f64>,
    pub pseudo_precision: Option<f64>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn new(label: impl Into<String>, world: WorldConfig, method: MethodSpec, loss: LossSpec, train: TrainConfig) -> Self {
        Self {
            label: label.into(),
            world,
            method,
            noise: None,
            loss,
            train,
            accuracy: None,
            history: Vec::new(),
            grad_ratio: None,
            mean_grad_ratio: None,
            pseudo_precision: None,
            warnings: Vec::new(),
            error: None,
            wall_ms: 0,
        }
    }

    pub fn world_seed(&self) -> u64 {
        self.world.seed
    }

    /// Where this run sits in its sweep, for diagnostics.
    pub fn coordinates(&self) -> String {
        let noise = match &self.noise {
            Some(n) => format!("{} {}", n.kind.name(), n.rate),
            None => "none".into(),
        };
        format!(
            "seed {} / {} ctx {} / noise {} / loss {}",
            self.world.seed,
            self.label,
            self.method.context_len.map_or("-".into(), |c| c.to_string()),
            noise,
            self.loss.kind.name()
        )
    }

    fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        vec![
            self.world.seed.to_string(),
            self.label.clone(),
            self.method.context_len.map_or(String::new(), |c| c.to_string()),
            self.noise.as_ref().map_or(String::new(), |n| n.kind.name().to_string()),
            opt(self.noise.as_ref().map(|n| n.rate)),
            self.loss.kind.name().to_string(),
            opt((self.loss.kind == LossKind::Gce).then_some(self.loss.q)),
            opt(self.accuracy),
            opt(self.mean_grad_ratio),
            opt(self.pseudo_precision),
            self.wall_ms.to_string(),
        ]
    }
}

/// Seed-averaged view of every run sharing method, noise and loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub context_len: Option<usize>,
    pub noise_kind: Option<NoiseKind>,
    pub noise_rate: Option<f64>,
    pub loss_kind: LossKind,
    pub q: Option<f64>,
    pub runs: usize,
    pub failures: usize,
    pub accuracy: Option<MeanStd>,
    pub mean_grad_ratio: Option<MeanStd>,
    pub pseudo_precision: Option<MeanStd>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; `None` for a single value.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, std, n })
    }
}

pub fn summarize(reports: &[RunReport]) -> Vec<SummaryRow> {
    let key = |r: &RunReport| {
        (
            r.label.clone(),
            r.method.context_len,
            r.noise.as_ref().map(|n| (n.kind, n.rate.to_bits())),
            r.loss.kind,
            (r.loss.kind == LossKind::Gce).then_some(r.loss.q.to_bits()),
        )
    };
    let mut order = Vec::new();
    let mut groups: HashMap<_, Vec<&RunReport>> = HashMap::new();
    for r in reports {
        let k = key(r);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let rs = &groups[&k];
            let first = rs[0];
            let collect = |f: &dyn Fn(&RunReport) -> Option<f64>| MeanStd::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                label: first.label.clone(),
                context_len: first.method.context_len,
                noise_kind: first.noise.as_ref().map(|n| n.kind),
                noise_rate: first.noise.as_ref().map(|n| n.rate),
                loss_kind: first.loss.kind,
                q: (first.loss.kind == LossKind::Gce).then_some(first.loss.q),
                runs: rs.len(),
                failures: rs.iter().filter(|r| r.error.is_some()).count(),
                accuracy: collect(&|r| r.accuracy),
                mean_grad_ratio: collect(&|r| r.mean_grad_ratio),
                pseudo_precision: collect(&|r| r.pseudo_precision),
            }
        })
        .collect()
}

/// The axes of a sweep. Every combination of seed, method, noise and loss is
/// one run; `train.loss` is replaced by each entry of `losses`.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub world: WorldConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSpec>,
    pub noise: Vec<NoiseSpec>,
    pub losses: Vec<LossSpec>,
    pub train: TrainConfig,
    /// Attach a gradient-ratio trace with this probe size.
    pub probe_size: Option<usize>,
    pub confusion_runs: usize,
}

impl SweepPlan {
    pub fn from_config(config: &ExperimentConfig, probe: bool) -> Self {
        Self {
            world: config.world.clone(),
            seeds: config.seeds.clone(),
            methods: config.methods.clone(),
            noise: config.noise.clone(),
            losses: config.losses.clone(),
            train: config.train,
            probe_size: probe.then_some(config.probe_size),
            confusion_runs: config.confusion_runs,
        }
    }
}

/// The per-seed inputs every cell of a sweep shares.
pub struct SeedContext {
    pub config: WorldConfig,
    pub world: World,
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
    /// Random-prompt zero-shot confusion on the training split.
    pub confusion: Option<Matrix>,
}

impl SeedContext {
    pub fn build(base: &WorldConfig, seed: u64, confusion_runs: Option<usize>) -> Result<Self> {
        let config = base.with_seed(seed);
        let world = generate_world(&config)?;
        let train = sample_dataset(&world, Split::Train, &config)?;
        let test = sample_dataset(&world, Split::Test, &config)?;
        let confusion = match confusion_runs {
            Some(runs) => Some(zero_shot_confusion(&world, &train, runs, derive_seed(seed, STREAM_CONFUSION))?),
            None => None,
        };
        Ok(Self {
            config,
            world,
            train,
            test,
            confusion,
        })
    }

    /// The training split corrupted per `noise`. Every rate and kind draws
    /// its corrupted indices from the same seed.
    pub fn noisy_train(&self, noise: &NoiseSpec) -> Result<(NoiseSpec, EmbeddingDataset)> {
        let seed = derive_seed(self.config.seed, STREAM_NOISE);
        match noise.kind {
            NoiseKind::Random => Ok((
                noise.clone(),
                inject_random_noise(&self.train, self.world.class_count(), noise.rate, seed)?,
            )),
            NoiseKind::Confusion => {
                let matrix = match (&noise.confusion_matrix, &self.confusion) {
                    (Some(m), _) | (None, Some(m)) => m.clone(),
                    (None, None) => return Err(Error::invalid("noise.confusion_matrix", "required for confusion noise")),
                };
                let data = inject_confusion_noise(&self.train, noise.rate, &matrix, seed)?;
                Ok((NoiseSpec::confusion(noise.rate, Some(matrix)), data))
            }
        }
    }
}

/// Per-run seed for method initialisation and shuffling.
pub fn run_seed(train_seed: u64, world_seed: u64) -> u64 {
    derive_seed(train_seed, world_seed)
}

fn run_cell(ctx: &SeedContext, method: &MethodSpec, noise: &NoiseSpec, loss: &LossSpec, plan: &SweepPlan) -> RunReport {
    let start = Instant::now();
    let seed = run_seed(plan.train.seed, ctx.config.seed);
    let train_cfg = TrainConfig {
        loss: *loss,
        seed,
        ..plan.train
    };
    let resolved = MethodSpec {
        context_len: Some(method.resolved_context(&ctx.world)),
        ..*method
    };
    let mut report = RunReport::new(method.kind.name(), ctx.config.clone(), resolved, *loss, train_cfg);
    report.noise = Some(noise.clone());
    let outcome = (|| -> Result<()> {
        let (noise, data) = ctx.noisy_train(noise)?;
        report.noise = Some(noise);
        let state = build_method_state(method, &ctx.world, seed)?;
        let mut trace = Vec::new();
        let mut probe_size = plan.probe_size;
        if let Some(size) = probe_size {
            let noisy = data.noisy_count();
            if noisy == 0 || noisy == data.len() {
                report
                    .warnings
                    .push(format!("gradient ratio skipped: {noisy} of {} samples are noisy", data.len()));
                probe_size = None;
            } else if size > noisy.min(data.len() - noisy) {
                report.warnings.push(format!(
                    "probe groups shrunk to {} samples",
                    size.min(noisy).min(data.len() - noisy)
                ));
            }
        }
        let probe_seed = derive_seed(seed, STREAM_PROBE);
        let (state, history) = train_with_hook(state, &ctx.world, &data, &train_cfg, |epoch, st| {
            if let Some(size) = probe_size {
                let value = gradient_ratio_probe(st, &ctx.world, &data, size, loss, derive_seed(probe_seed, epoch as u64))?;
                trace.push(GradRatioPoint { epoch, value });
            }
            Ok(())
        })?;
        report.history = history;
        report.accuracy = Some(evaluate_accuracy(&state, &ctx.world, &ctx.test)?);
        if probe_size.is_some() {
            let trace = GradRatioTrace(trace);
            report.mean_grad_ratio = trace.mean_ratio();
            report.grad_ratio = Some(trace);
        }
        Ok(())
    })();
    if let Err(err) = outcome {
        report.error = Some(err.to_string());
    }
    report.wall_ms = start.elapsed().as_millis() as u64;
    report
}

fn needs_confusion(noise: &[NoiseSpec]) -> bool {
    noise
        .iter()
        .any(|n| n.kind == NoiseKind::Confusion && n.confusion_matrix.is_none())
}

/// Runs every cell of `plan` in parallel. Reports come back in axis order
/// (seed, method, noise, loss); failed cells carry their error.
pub fn run_noise_sweep(plan: &SweepPlan) -> Result<Vec<RunReport>> {
    if plan.seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    if plan.methods.is_empty() {
        return Err(Error::Empty("methods"));
    }
    if plan.noise.is_empty() {
        return Err(Error::Empty("noise"));
    }
    if plan.losses.is_empty() {
        return Err(Error::Empty("losses"));
    }
    let confusion_runs = needs_confusion(&plan.noise).then_some(plan.confusion_runs);
    let contexts: Vec<(u64, Result<SeedContext>)> = plan
        .seeds
        .par_iter()
        .map(|&s| (s, SeedContext::build(&plan.world, s, confusion_runs)))
        .collect();
    let mut cells = Vec::new();
    for (ci, _) in contexts.iter().enumerate() {
        for m in &plan.methods {
            for n in &plan.noise {
                for l in &plan.losses {
                    cells.push((ci, m, n, l));
                }
            }
        }
    }
    Ok(cells
        .into_par_iter()
        .map(|(ci, m, n, l)| match &contexts[ci] {
            (_, Ok(ctx)) => run_cell(ctx, m, n, l, plan),
            (seed, Err(err)) => {
                let train = TrainConfig {
                    loss: *l,
                    seed: run_seed(plan.train.seed, *seed),
                    ..plan.train
                };
                let mut r = RunReport::new(m.kind.name(), plan.world.with_seed(*seed), *m, *l, train);
                r.noise = Some(n.clone());
                r.error = Some(err.to_string());
                r
            }
        })
        .collect())
}

/// Accuracy of the fixed template prompt at full context, for reference rows.
pub fn zero_shot_report(ctx: &SeedContext, train: &TrainConfig) -> RunReport {
    let start = Instant::now();
    let spec = MethodSpec::with_context(MethodKind::ZeroShot, ctx.world.config.encoder.context_len);
    let mut r = RunReport::new(MethodKind::ZeroShot.name(), ctx.config.clone(), spec, train.loss, *train);
    match build_method_state(&spec, &ctx.world, 0).and_then(|s| evaluate_accuracy(&s, &ctx.world, &ctx.test)) {
        Ok(acc) => r.accuracy = Some(acc),
        Err(e) => r.error = Some(e.to_string()),
    }
    r.wall_ms = start.elapsed().as_millis() as u64;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// A self-describing report file: the effective config plus every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub reports: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
}

impl ReportDocument {
    pub fn new(command: impl Into<String>, config: &ExperimentConfig, reports: Vec<RunReport>) -> Self {
        let summary = summarize(&reports);
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.into(),
            config: config.clone(),
            reports,
            summary,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        if doc.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("expected {REPORT_SCHEMA_VERSION}, found {}", doc.schema_version),
            ));
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: "<report>".into(),
            source,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |source| Error::Csv {
            path: "<report>".into(),
            source,
        };
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.reports {
            w.write_record(r.csv_record()).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid("csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn emit_report(doc: &ReportDocument, format: ReportFormat, path: &Path) -> Result<()> {
    if doc.reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let text = match format {
        ReportFormat::Json => doc.to_json()? + "\n",
        ReportFormat::Csv => doc.to_csv()?,
    };
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_world() -> WorldConfig {
        WorldConfig {
            class_count: 3,
            shots_per_class: 8,
            test_per_class: 10,
            unlabeled_per_class: 4,
            encoder: EncoderConfig {
                token_dim: 4,
                embed_dim: 4,
                context_len: 3,
                hidden_width: 8,
                ..EncoderConfig::default()
            },
            ..WorldConfig::default()
        }
    }

    fn small_plan() -> SweepPlan {
        SweepPlan {
            world: small_world(),
            seeds: vec![0],
            methods: vec![MethodSpec::new(MethodKind::PromptTuning)],
            noise: vec![NoiseSpec::random(0.5)],
            losses: vec![LossSpec::ce()],
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            probe_size: Some(64),
            confusion_runs: 5,
        }
    }

    fn noisy_ctx() -> (SeedContext, EmbeddingDataset) {
        let ctx = SeedContext::build(&small_world(), 0, None).unwrap();
        let (_, data) = ctx.noisy_train(&NoiseSpec::random(0.5)).unwrap();
        (ctx, data)
    }

    #[test]
    fn ratio_is_recomputable_from_norms() {
        let g = GradRatio::from_norms(0.3, 0.7);
        assert_eq!(g.ratio.unwrap().to_bits(), (g.noisy_norm / g.clean_norm).to_bits());
        assert_eq!(GradRatio::from_norms(0.0, 2.0).ratio, Some(0.0));
        assert_eq!(GradRatio::from_norms(1.0, 0.0).ratio, None);
    }

    #[test]
    fn probe_leaves_state_untouched() {
        let (ctx, data) = noisy_ctx();
        let state = build_method_state(&MethodSpec::new(MethodKind::PromptTuning), &ctx.world, 1).unwrap();
        let before = state.clone();
        let g = gradient_ratio_probe(&state, &ctx.world, &data, 64, &LossSpec::ce(), 3).unwrap();
        assert_eq!(state, before);
        assert!(g.noisy_norm > 0.0 && g.clean_norm > 0.0);
    }

    #[test]
    fn identical_groups_give_unit_ratio() {
        let (ctx, data) = noisy_ctx();
        // Duplicate one clean sample and flag the copy as noisy with the same label.
        let i = data.clean_flags.iter().position(|c| *c).unwrap();
        let mut twin = data.subset(&[i, i]).unwrap();
        twin.clean_flags[1] = false;
        let state = build_method_state(&MethodSpec::new(MethodKind::PromptTuning), &ctx.world, 1).unwrap();
        let g = gradient_ratio_probe(&state, &ctx.world, &twin, 64, &LossSpec::ce(), 0).unwrap();
        assert!((g.ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probe_requires_both_groups() {
        let ctx = SeedContext::build(&small_world(), 0, None).unwrap();
        let state = build_method_state(&MethodSpec::new(MethodKind::PromptTuning), &ctx.world, 1).unwrap();
        let err = gradient_ratio_probe(&state, &ctx.world, &ctx.train, 64, &LossSpec::ce(), 0).unwrap_err();
        assert!(matches!(err, Error::NoNoisySamples));
        let mut all_noisy = ctx.train.clone();
        all_noisy.clean_flags.iter_mut().for_each(|c| *c = false);
        let err = gradient_ratio_probe(&state, &ctx.world, &all_noisy, 64, &LossSpec::ce(), 0).unwrap_err();
        assert!(matches!(err, Error::NoCleanSamples));
    }

    #[test]
    fn single_cell_sweep_gives_one_report_with_trace() {
        let reports = run_noise_sweep(&small_plan()).unwrap();
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert!(r.error.is_none(), "{:?}", r.error);
        assert_eq!(r.history.len(), 3);
        let trace = r.grad_ratio.as_ref().unwrap();
        assert_eq!(trace.0.len(), 3);
        for p in &trace.0 {
            assert_eq!(p.value.ratio.unwrap().to_bits(), (p.value.noisy_norm / p.value.clean_norm).to_bits());
        }
        // 12 noisy of 24: the probe shrinks to 12 per group.
        assert!(r.warnings.iter().any(|w| w.contains("shrunk to 12")));
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let mut plan = small_plan();
        plan.seeds = vec![2, 1];
        plan.noise = vec![NoiseSpec::random(0.0), NoiseSpec::random(0.25)];
        plan.probe_size = None;
        let a = run_noise_sweep(&plan).unwrap();
        let b = run_noise_sweep(&plan).unwrap();
        assert_eq!(a.len(), 4);
        let strip = |rs: &[RunReport]| {
            rs.iter()
                .map(|r| RunReport { wall_ms: 0, ..r.clone() })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        let seeds: Vec<u64> = a.iter().map(|r| r.world_seed()).collect();
        assert_eq!(seeds, vec![2, 2, 1, 1]);
        assert_eq!(a[1].noise.as_ref().unwrap().rate, 0.25);
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut plan = small_plan();
        plan.probe_size = None;
        plan.noise = vec![NoiseSpec::random(0.0), NoiseSpec::confusion(0.5, None)];
        plan.confusion_runs = 0;
        let reports = run_noise_sweep(&plan).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.error.is_some()));
    }

    #[test]
    fn zero_rate_probe_is_skipped_with_warning() {
        let mut plan = small_plan();
        plan.noise = vec![NoiseSpec::random(0.0)];
        let r = &run_noise_sweep(&plan).unwrap()[0];
        assert!(r.error.is_none());
        assert!(r.grad_ratio.is_none());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn summary_statistics() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.std.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).unwrap().std, None);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn csv_header_and_empty_reports() {
        let mut plan = small_plan();
        plan.probe_size = None;
        let cfg = ExperimentConfig::default();
        let doc = ReportDocument::new("sweep", &cfg, run_noise_sweep(&plan).unwrap());
        let csv = doc.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(csv.lines().count(), 2);
        let dir = tempfile::tempdir().unwrap();
        let empty = ReportDocument::new("sweep", &cfg, Vec::new());
        assert!(matches!(
            emit_report(&empty, ReportFormat::Csv, &dir.path().join("x.csv")),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::default();
        let doc = ReportDocument::new("gradratio", &cfg, run_noise_sweep(&small_plan()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&doc, ReportFormat::Json, &path).unwrap();
        assert_eq!(ReportDocument::read(&path).unwrap(), doc);
    }
}
