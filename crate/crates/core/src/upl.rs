//! Unsupervised prompt tuning: pseudo-label an unlabeled pool with the
//! template prompt, keep K samples per pseudo-class, train an ensemble of
//! prompts on them and average their posteriors.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::instrumentation::{run_seed, zero_shot_report, RunReport, SeedContext};
use crate::losses::{LossKind, LossSpec};
use crate::methods::{build_method_state, forward_posterior, predict, train, MethodKind, MethodSpec, MethodState, TrainConfig};
use crate::numeric::{argmax, derive_seed, Matrix, SeededRng};
use crate::world::{sample_dataset, EmbeddingDataset, Split, World, WorldConfig};

const STREAM_SELECT: u64 = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    /// Row of each entry in the unlabeled pool.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Only read by [`PseudoLabelSet::precision`].
    pub true_labels: Vec<usize>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn precision(&self) -> Result<f64> {
        pseudo_precision(&self.labels, &self.true_labels)
    }
}

/// Labels every pool sample with the full template prompt's zero-shot argmax.
pub fn pseudo_label(world: &World, unlabeled: &EmbeddingDataset) -> Result<PseudoLabelSet> {
    pseudo_label_with(world, Some(&world.template_prompt), unlabeled)
}

pub fn pseudo_label_with(world: &World, prompt: Option<&Matrix>, unlabeled: &EmbeddingDataset) -> Result<PseudoLabelSet> {
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled pool"));
    }
    let rows = encoder::class_embeddings(&world.weights, prompt, &world.vocab)?;
    let probs = encoder::posterior_batch(&unlabeled.images, &rows, world.temperature())?;
    let mut labels = Vec::with_capacity(unlabeled.len());
    let mut confidences = Vec::with_capacity(unlabeled.len());
    for i in 0..unlabeled.len() {
        let row = probs.row(i);
        let c = argmax(row);
        labels.push(c);
        confidences.push(row[c]);
    }
    Ok(PseudoLabelSet {
        indices: (0..unlabeled.len()).collect(),
        labels,
        confidences,
        true_labels: unlabeled.true_labels.clone(),
    })
}

/// Fraction of `labels` that match `truth`.
pub fn pseudo_precision(labels: &[usize], truth: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("pseudo labels"));
    }
    if labels.len() != truth.len() {
        return Err(Error::invalid("pseudo labels", "one hidden label per entry"));
    }
    let hits = labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Topk,
    Random,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Topk => "topk",
            Selection::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class: usize,
    pub available: usize,
    pub requested: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSet {
    /// Observed labels are the pseudo labels; flags compare them with the
    /// hidden labels for reporting.
    pub data: EmbeddingDataset,
    pub shortfalls: Vec<Shortfall>,
}

impl SelectedSet {
    pub fn warnings(&self) -> Vec<String> {
        self.shortfalls
            .iter()
            .map(|s| {
                if s.available == 0 {
                    format!("class {} has no pseudo-labelled members", s.class)
                } else {
                    format!("class {} has {} of {} requested members", s.class, s.available, s.requested)
                }
            })
            .collect()
    }
}

/// Keeps up to `k` members of every pseudo-class, by confidence or at random.
/// Classes are emitted in order; within a class, in selection order.
pub fn select_samples(
    pool: &PseudoLabelSet,
    unlabeled: &EmbeddingDataset,
    classes: usize,
    k: usize,
    strategy: Selection,
    seed: u64,
) -> Result<SelectedSet> {
    if pool.is_empty() {
        return Err(Error::Empty("pseudo-label pool"));
    }
    if k == 0 {
        return Err(Error::invalid("upl.k_per_class", "must be >= 1"));
    }
    let mut picked = Vec::new();
    let mut shortfalls = Vec::new();
    for class in 0..classes {
        let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels[i] == class).collect();
        if members.len() < k {
            shortfalls.push(Shortfall {
                class,
                available: members.len(),
                requested: k,
            });
        }
        let take = k.min(members.len());
        match strategy {
            Selection::Topk => {
                members.sort_by(|&a, &b| pool.confidences[b].total_cmp(&pool.confidences[a]).then(a.cmp(&b)));
                picked.extend_from_slice(&members[..take]);
            }
            Selection::Random => {
                let mut rng = SeededRng::substream(seed, class as u64);
                picked.extend(rng.sample_indices(members.len(), take).into_iter().map(|j| members[j]));
            }
        }
    }
    let rows: Vec<usize> = picked.iter().map(|&i| pool.indices[i]).collect();
    let observed: Vec<usize> = picked.iter().map(|&i| pool.labels[i]).collect();
    let truth: Vec<usize> = picked.iter().map(|&i| pool.true_labels[i]).collect();
    let data = EmbeddingDataset {
        images: unlabeled.images.select_rows(&rows)?,
        clean_flags: observed.iter().zip(&truth).map(|(o, t)| o == t).collect(),
        observed_labels: observed,
        true_labels: truth,
    };
    Ok(SelectedSet { data, shortfalls })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UplConfig {
    pub k_per_class: usize,
    pub selection: Selection,
    pub loss: LossSpec,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl Default for UplConfig {
    fn default() -> Self {
        Self {
            k_per_class: 16,
            selection: Selection::Random,
            loss: LossSpec::gce(0.7),
            ensemble_size: 4,
            seed: 0,
        }
    }
}

impl UplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_class == 0 {
            return Err(Error::invalid("upl.k_per_class", "must be >= 1"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::invalid("upl.ensemble_size", "must be >= 1"));
        }
        self.loss.validate()
    }
}

/// Trains `ensemble_size` full-context prompt-tuning models on `selected`,
/// model i seeded with `config.seed + i`.
pub fn train_ensemble(
    world: &World,
    selected: &EmbeddingDataset,
    config: &UplConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<MethodState>> {
    config.validate()?;
    if selected.is_empty() {
        return Err(Error::Empty("selected samples"));
    }
    let spec = MethodSpec::new(MethodKind::PromptTuning);
    (0..config.ensemble_size)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed.wrapping_add(i as u64);
            let state = build_method_state(&spec, world, seed)?;
            let cfg = TrainConfig {
                loss: config.loss,
                seed,
                ..*train_cfg
            };
            Ok(train(state, world, selected, &cfg)
                .map_err(|e| e.context(format!("ensemble member {i}")))?
                .0)
        })
        .collect()
}

/// Arithmetic mean of the members' posteriors.
pub fn ensemble_predict(models: &[MethodState], world: &World, image: &[f64]) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let mut mean = vec![0.0; world.class_count()];
    for m in models {
        for (acc, p) in mean.iter_mut().zip(forward_posterior(m, world, image)?) {
            *acc += p;
        }
    }
    let n = models.len() as f64;
    Ok(mean.into_iter().map(|v| v / n).collect())
}

/// Mean posterior of every row of `images`.
pub fn ensemble_predict_batch(models: &[MethodState], world: &World, images: &Matrix) -> Result<Matrix> {
    if models.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let mut mean = Matrix::zeros(images.rows(), world.class_count());
    for m in models {
        mean.add_assign(&predict(m, world, images)?)?;
    }
    Ok(mean.scale(1.0 / models.len() as f64))
}

pub fn ensemble_accuracy(models: &[MethodState], world: &World, test: &EmbeddingDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let probs = ensemble_predict_batch(models, world, &test.images)?;
    let hits = (0..test.len())
        .filter(|&i| argmax(probs.row(i)) == test.true_labels[i])
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// The arms compared by [`run_upl_comparison`]: top-K with CE, random-K with
/// CE, and random-K with the configured loss (GCE q=0.7 if that is CE).
pub fn comparison_arms(config: &UplConfig) -> [(Selection, LossSpec); 3] {
    let robust = if config.loss.kind == LossKind::Ce {
        LossSpec::gce(0.7)
    } else {
        config.loss
    };
    [
        (Selection::Topk, LossSpec::ce()),
        (Selection::Random, LossSpec::ce()),
        (Selection::Random, robust),
    ]
}

/// One pipeline run on a prepared world, pool and test split.
pub fn run_upl(
    world: &World,
    world_config: &WorldConfig,
    pool: &PseudoLabelSet,
    unlabeled: &EmbeddingDataset,
    test: &EmbeddingDataset,
    config: &UplConfig,
    train_cfg: &TrainConfig,
) -> RunReport {
    let start = Instant::now();
    let spec = MethodSpec::with_context(MethodKind::PromptTuning, world.config.encoder.context_len);
    let label = format!("upl_{}", config.selection.name());
    let cfg = TrainConfig {
        loss: config.loss,
        seed: config.seed,
        ..*train_cfg
    };
    let mut report = RunReport::new(label, world_config.clone(), spec, config.loss, cfg);
    let outcome = (|| -> Result<()> {
        let selected = select_samples(
            pool,
            unlabeled,
            world.class_count(),
            config.k_per_class,
            config.selection,
            derive_seed(config.seed, STREAM_SELECT),
        )?;
        report.warnings = selected.warnings();
        report.pseudo_precision = Some(pseudo_precision(&selected.data.observed_labels, &selected.data.true_labels)?);
        let models = train_ensemble(world, &selected.data, config, train_cfg)?;
        report.accuracy = Some(ensemble_accuracy(&models, world, test)?);
        Ok(())
    })();
    if let Err(e) = outcome {
        report.error = Some(e.to_string());
    }
    report.wall_ms = start.elapsed().as_millis() as u64;
    report
}

/// Template zero-shot plus every arm of [`comparison_arms`], for each seed.
pub fn run_upl_comparison(
    world: &WorldConfig,
    seeds: &[u64],
    config: &UplConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<RunReport>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    config.validate()?;
    let per_seed: Vec<Vec<RunReport>> = seeds
        .par_iter()
        .map(|&s| {
            let base = TrainConfig {
                seed: run_seed(train_cfg.seed, s),
                ..*train_cfg
            };
            let prepared = SeedContext::build(world, s, None).and_then(|ctx| {
                let unlabeled = sample_dataset(&ctx.world, Split::Unlabeled, &ctx.config)?;
                let pool = pseudo_label(&ctx.world, &unlabeled)?;
                Ok((ctx, unlabeled, pool))
            });
            let (ctx, unlabeled, pool) = match prepared {
                Ok(p) => p,
                Err(e) => {
                    let spec = MethodSpec::new(MethodKind::PromptTuning);
                    let mut r = RunReport::new("upl", world.with_seed(s), spec, config.loss, base);
                    r.error = Some(e.to_string());
                    return vec![r];
                }
            };
            let mut zs = zero_shot_report(&ctx, &base);
            zs.pseudo_precision = pool.precision().ok();
            let mut out = vec![zs];
            for (selection, loss) in comparison_arms(config) {
                let arm = UplConfig {
                    selection,
                    loss,
                    seed: derive_seed(config.seed, s),
                    ..*config
                };
                out.push(run_upl(&ctx.world, &ctx.config, &pool, &unlabeled, &ctx.test, &arm, &base));
            }
            out
        })
        .collect();
    Ok(per_seed.into_iter().flatten().collect())
}
