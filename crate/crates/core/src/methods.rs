//! Transfer strategies and the shared momentum-SGD training loop.
//!
//! | kind               | trainable                 | prompt         |
//! |--------------------|---------------------------|----------------|
//! | `PromptTuning`     | prompt                    | learned        |
//! | `ClassifierR`      | classifier rows (random)  | none           |
//! | `ClassifierC`      | classifier rows (text)    | template, init |
//! | `TEncFT`           | encoder copy              | template       |
//! | `FullPromptTuning` | prompt + classname tokens | learned        |
//! | `CLSTuning`        | classname tokens          | template       |
//! | `ZeroShot`         | nothing                   | template       |

use serde::{Deserialize, Serialize};

use crate::encoder::{self, posterior_on_tape, EncoderNodes, EncoderWeights};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossSpec};
use crate::numeric::{argmax, derive_seed, Matrix, NodeId, SeededRng, Tape};
use crate::world::{EmbeddingDataset, World};

pub const PROMPT_INIT_STD: f64 = 0.02;

const STREAM_PROMPT_INIT: u64 = 100;
const STREAM_CLASSIFIER_INIT: u64 = 101;
const STREAM_SHUFFLE: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    PromptTuning,
    ClassifierR,
    ClassifierC,
    #[serde(rename = "tenc_ft")]
    TEncFT,
    FullPromptTuning,
    #[serde(rename = "cls_tuning")]
    CLSTuning,
    ZeroShot,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::PromptTuning,
        MethodKind::ClassifierR,
        MethodKind::ClassifierC,
        MethodKind::TEncFT,
        MethodKind::FullPromptTuning,
        MethodKind::CLSTuning,
        MethodKind::ZeroShot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::PromptTuning => "prompt_tuning",
            MethodKind::ClassifierR => "classifier_r",
            MethodKind::ClassifierC => "classifier_c",
            MethodKind::TEncFT => "tenc_ft",
            MethodKind::FullPromptTuning => "full_prompt_tuning",
            MethodKind::CLSTuning => "cls_tuning",
            MethodKind::ZeroShot => "zero_shot",
        }
    }

    fn is_classifier(self) -> bool {
        matches!(self, MethodKind::ClassifierR | MethodKind::ClassifierC)
    }

    fn allows_empty_context(self) -> bool {
        matches!(self, MethodKind::ZeroShot | MethodKind::CLSTuning | MethodKind::TEncFT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// `None` means the encoder's full context length.
    #[serde(default)]
    pub context_len: Option<usize>,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self { kind, context_len: None }
    }

    pub fn with_context(kind: MethodKind, context_len: usize) -> Self {
        Self {
            kind,
            context_len: Some(context_len),
        }
    }

    pub fn resolved_context(&self, world: &World) -> usize {
        self.context_len.unwrap_or(world.config.encoder.context_len)
    }

    pub fn validate(&self, max_context: usize) -> Result<()> {
        if let Some(len) = self.context_len {
            if len == 0 && !self.kind.allows_empty_context() {
                return Err(Error::InvalidCombination(format!(
                    "context_len 0 is not allowed for {}",
                    self.kind.name()
                )));
            }
            if len > max_context {
                return Err(Error::InvalidCombination(format!(
                    "context_len {len} exceeds the encoder context length {max_context}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodState {
    pub kind: MethodKind,
    pub context_len: usize,
    /// Active prompt (learned or fixed template); `None` is Ctx-0.
    pub prompt: Option<Matrix>,
    /// Trainable classname copy (FullPromptTuning, CLSTuning).
    pub vocab: Option<Matrix>,
    pub classifier: Option<Matrix>,
    /// Trainable encoder copy (TEncFT).
    pub encoder: Option<EncoderWeights>,
    /// Momentum buffers, aligned with [`MethodState::trainable`].
    pub velocity: Vec<Matrix>,
}

impl MethodState {
    pub fn trainable(&self) -> Vec<&Matrix> {
        match self.kind {
            MethodKind::PromptTuning => self.prompt.iter().collect(),
            MethodKind::ClassifierR | MethodKind::ClassifierC => self.classifier.iter().collect(),
            MethodKind::TEncFT => self.encoder.iter().flat_map(|e| e.tensors()).collect(),
            MethodKind::FullPromptTuning => self.prompt.iter().chain(self.vocab.iter()).collect(),
            MethodKind::CLSTuning => self.vocab.iter().collect(),
            MethodKind::ZeroShot => vec![],
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        match self.kind {
            MethodKind::PromptTuning => self.prompt.iter_mut().collect(),
            MethodKind::ClassifierR | MethodKind::ClassifierC => self.classifier.iter_mut().collect(),
            MethodKind::TEncFT => self.encoder.iter_mut().flat_map(|e| e.tensors_mut()).collect(),
            MethodKind::FullPromptTuning => self.prompt.iter_mut().chain(self.vocab.iter_mut()).collect(),
            MethodKind::CLSTuning => self.vocab.iter_mut().collect(),
            MethodKind::ZeroShot => vec![],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|m| m.len()).sum()
    }
}

pub fn build_method_state(spec: &MethodSpec, world: &World, seed: u64) -> Result<MethodState> {
    let max_context = world.config.encoder.context_len;
    spec.validate(max_context)?;
    let context_len = spec.resolved_context(world);
    let d = world.config.encoder.token_dim;
    let e = world.config.encoder.embed_dim;
    let learned_prompt = || SeededRng::substream(seed, STREAM_PROMPT_INIT).gaussian_matrix(context_len, d, PROMPT_INIT_STD);
    let template = world.template_prefix(context_len)?;

    let mut state = MethodState {
        kind: spec.kind,
        context_len,
        prompt: None,
        vocab: None,
        classifier: None,
        encoder: None,
        velocity: vec![],
    };
    match spec.kind {
        MethodKind::PromptTuning => state.prompt = Some(learned_prompt()),
        MethodKind::ClassifierR => {
            let std = 1.0 / (e as f64).sqrt();
            state.classifier = Some(
                SeededRng::substream(seed, STREAM_CLASSIFIER_INIT).gaussian_matrix(world.class_count(), e, std),
            );
        }
        MethodKind::ClassifierC => {
            state.classifier = Some(encoder::class_embeddings(&world.weights, template.as_ref(), &world.vocab)?);
        }
        MethodKind::TEncFT => {
            state.prompt = template;
            state.encoder = Some(world.weights.clone());
        }
        MethodKind::FullPromptTuning => {
            state.prompt = Some(learned_prompt());
            state.vocab = Some(world.vocab.clone());
        }
        MethodKind::CLSTuning => {
            state.prompt = template;
            state.vocab = Some(world.vocab.clone());
        }
        MethodKind::ZeroShot => state.prompt = template,
    }
    state.velocity = state
        .trainable()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    Ok(state)
}

/// The forward graph for a batch of images.
pub struct Graph {
    pub tape: Tape,
    pub probs: NodeId,
    pub class_rows: NodeId,
    /// Leaf ids aligned with [`MethodState::trainable`].
    pub params: Vec<NodeId>,
}

fn input(tape: &mut Tape, m: &Matrix, trainable: bool) -> Result<NodeId> {
    Ok(if trainable {
        tape.leaf(m.clone())?
    } else {
        tape.constant(m.clone())?
    })
}

/// Builds the tape from the state's parameters to the row-wise posteriors.
pub fn build_graph(state: &MethodState, world: &World, images: &Matrix) -> Result<Graph> {
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let kind = state.kind;
    let class_rows = if kind.is_classifier() {
        let rows = state
            .classifier
            .as_ref()
            .ok_or_else(|| Error::InvalidCombination("classifier state without rows".into()))?;
        let leaf = tape.leaf(rows.clone())?;
        params.push(leaf);
        tape.l2_normalize_rows(leaf)?
    } else {
        let enc_trainable = kind == MethodKind::TEncFT;
        let weights = state.encoder.as_ref().unwrap_or(&world.weights);
        let nodes = EncoderNodes::register(&mut tape, weights, enc_trainable)?;
        if enc_trainable {
            params.extend(nodes.weights);
        }
        let prompt_trainable = matches!(kind, MethodKind::PromptTuning | MethodKind::FullPromptTuning);
        let prompt = match &state.prompt {
            Some(p) => {
                let id = input(&mut tape, p, prompt_trainable)?;
                if prompt_trainable {
                    params.insert(0, id);
                }
                Some(id)
            }
            None => None,
        };
        let vocab_trainable = matches!(kind, MethodKind::FullPromptTuning | MethodKind::CLSTuning);
        let vocab = input(&mut tape, state.vocab.as_ref().unwrap_or(&world.vocab), vocab_trainable)?;
        if vocab_trainable {
            params.push(vocab);
        }
        nodes.class_embeddings(&mut tape, prompt, vocab)?
    };
    let imgs = tape.constant(images.clone())?;
    let probs = posterior_on_tape(&mut tape, imgs, class_rows, world.temperature())?;
    tape.set_output(probs);
    Ok(Graph {
        tape,
        probs,
        class_rows,
        params,
    })
}

/// Unit-norm class rows the state classifies against.
pub fn class_rows(state: &MethodState, world: &World) -> Result<Matrix> {
    if state.kind.is_classifier() {
        let rows = state
            .classifier
            .as_ref()
            .ok_or_else(|| Error::InvalidCombination("classifier state without rows".into()))?;
        return Ok(rows.l2_normalize_rows()?);
    }
    let weights = state.encoder.as_ref().unwrap_or(&world.weights);
    encoder::class_embeddings(weights, state.prompt.as_ref(), state.vocab.as_ref().unwrap_or(&world.vocab))
}

pub fn forward_posterior(state: &MethodState, world: &World, image: &[f64]) -> Result<Vec<f64>> {
    encoder::posterior(image, &class_rows(state, world)?, world.temperature())
}

pub fn predict(state: &MethodState, world: &World, images: &Matrix) -> Result<Matrix> {
    encoder::posterior_batch(images, &class_rows(state, world)?, world.temperature())
}

/// Clean-label accuracy; ties resolve to the lowest class index.
pub fn evaluate_accuracy(state: &MethodState, world: &World, test: &EmbeddingDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let probs = predict(state, world, &test.images)?;
    let hits = (0..test.len())
        .filter(|&i| argmax(probs.row(i)) == test.true_labels[i])
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Zero-shot accuracy with an arbitrary prompt (e.g. the world's truth prompt).
pub fn prompt_accuracy(world: &World, prompt: Option<&Matrix>, test: &EmbeddingDataset) -> Result<f64> {
    let rows = encoder::class_embeddings(&world.weights, prompt, &world.vocab)?;
    let probs = encoder::posterior_batch(&test.images, &rows, world.temperature())?;
    let hits = (0..test.len())
        .filter(|&i| argmax(probs.row(i)) == test.true_labels[i])
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 0.002,
            momentum: 0.9,
            loss: LossSpec::ce(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train.lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum", "must lie in [0, 1)"));
        }
        self.loss.validate()
    }
}

/// `lr₀ · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let t = epoch as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Mean loss over `labels` and its gradient for every trainable tensor.
pub fn loss_gradients(
    state: &MethodState,
    world: &World,
    images: &Matrix,
    labels: &[usize],
    loss: &LossSpec,
) -> Result<(f64, Vec<Matrix>)> {
    let graph = build_graph(state, world, images)?;
    let (value, seed) = batch_loss(loss, graph.tape.value(graph.probs), labels)?;
    let grads = graph.tape.backward(graph.probs, &seed)?;
    Ok((value, graph.params.iter().map(|p| grads.get(*p)).collect()))
}

/// One momentum-SGD step: `v ← m·v + g`, `θ ← θ − lr·v`.
pub fn apply_momentum(state: &mut MethodState, grads: &[Matrix], lr: f64, momentum: f64) -> Result<()> {
    let mut velocity = std::mem::take(&mut state.velocity);
    {
        let params = state.trainable_mut();
        if params.len() != grads.len() || velocity.len() != grads.len() {
            return Err(Error::invalid("gradients", "one gradient per trainable tensor"));
        }
        for ((theta, v), g) in params.into_iter().zip(velocity.iter_mut()).zip(grads) {
            for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = momentum * *vi + gi;
                *t -= lr * *vi;
            }
        }
    }
    state.velocity = velocity;
    Ok(())
}

pub fn train(
    state: MethodState,
    world: &World,
    data: &EmbeddingDataset,
    config: &TrainConfig,
) -> Result<(MethodState, Vec<EpochRecord>)> {
    train_with_hook(state, world, data, config, |_, _| Ok(()))
}

/// As [`train`], calling `before_epoch(epoch, &state)` ahead of each epoch's
/// updates.
pub fn train_with_hook(
    mut state: MethodState,
    world: &World,
    data: &EmbeddingDataset,
    config: &TrainConfig,
    mut before_epoch: impl FnMut(usize, &MethodState) -> Result<()>,
) -> Result<(MethodState, Vec<EpochRecord>)> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    config.validate()?;
    let mut history = Vec::with_capacity(config.epochs);
    let shuffle_seed = derive_seed(config.seed, STREAM_SHUFFLE);
    for epoch in 0..config.epochs {
        before_epoch(epoch, &state)?;
        let lr = cosine_lr(epoch, config.epochs, config.lr);
        let mut order: Vec<usize> = (0..data.len()).collect();
        SeededRng::substream(shuffle_seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            if state.velocity.is_empty() {
                break;
            }
            let images = data.images.select_rows(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.observed_labels[i]).collect();
            let (value, grads) = loss_gradients(&state, world, &images, &labels, &config.loss)
                .map_err(|e| e.context(format!("epoch {epoch}")))?;
            total += value * batch.len() as f64;
            apply_momentum(&mut state, &grads, lr, config.momentum)?;
        }
        if state.velocity.is_empty() {
            // Nothing trainable: report the loss of the fixed model.
            let probs = predict(&state, world, &data.images)?;
            total = batch_loss(&config.loss, &probs, &data.observed_labels)?.0 * data.len() as f64;
        }
        history.push(EpochRecord {
            epoch,
            lr,
            mean_loss: total / data.len() as f64,
        });
    }
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::world::{generate_world, sample_dataset, Split, WorldConfig};

    fn tiny_world(sigma: f64) -> (World, WorldConfig) {
        let cfg = WorldConfig {
            class_count: 3,
            shots_per_class: 4,
            test_per_class: 10,
            unlabeled_per_class: 4,
            image_noise_std: sigma,
            classname_std: 0.5,
            prompt_std: 1.0,
            encoder: EncoderConfig {
                token_dim: 4,
                embed_dim: 4,
                context_len: 3,
                hidden_width: 8,
                temperature: 0.01,
            },
            seed: 3,
        };
        (generate_world(&cfg).unwrap(), cfg)
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 50, 0.002), 0.002);
        assert!((cosine_lr(25, 50, 0.002) - 0.001).abs() < 1e-18);
        let last = cosine_lr(49, 50, 0.002);
        let oracle = 0.002 * 0.5 * (1.0 + (49.0 * std::f64::consts::PI / 50.0).cos());
        assert_eq!(last, oracle);
        assert!((last - 1.97e-6).abs() < 1e-8);
    }

    #[test]
    fn invalid_context_combinations() {
        let (w, _) = tiny_world(0.1);
        for kind in [MethodKind::PromptTuning, MethodKind::FullPromptTuning, MethodKind::ClassifierR] {
            assert!(matches!(
                build_method_state(&MethodSpec::with_context(kind, 0), &w, 0),
                Err(Error::InvalidCombination(_))
            ));
        }
        for kind in [MethodKind::ZeroShot, MethodKind::CLSTuning, MethodKind::TEncFT] {
            let s = build_method_state(&MethodSpec::with_context(kind, 0), &w, 0).unwrap();
            assert!(s.prompt.is_none());
        }
        assert!(build_method_state(&MethodSpec::with_context(MethodKind::PromptTuning, 9), &w, 0).is_err());
    }

    #[test]
    fn trainable_groups_per_kind() {
        let (w, _) = tiny_world(0.1);
        let count = |k| build_method_state(&MethodSpec::new(k), &w, 0).unwrap().parameter_count();
        assert_eq!(count(MethodKind::ZeroShot), 0);
        assert_eq!(count(MethodKind::PromptTuning), 3 * 4);
        assert_eq!(count(MethodKind::ClassifierR), 3 * 4);
        assert_eq!(count(MethodKind::CLSTuning), 3 * 4);
        assert_eq!(count(MethodKind::FullPromptTuning), 2 * 3 * 4);
        assert_eq!(count(MethodKind::TEncFT), 3 * 16 + 4 * 8 + 8 + 8 * 4 + 4 + 4 * 4);
    }

    #[test]
    fn classifier_c_starts_at_zero_shot() {
        let (w, cfg) = tiny_world(0.3);
        let test = sample_dataset(&w, Split::Test, &cfg).unwrap();
        let c = build_method_state(&MethodSpec::new(MethodKind::ClassifierC), &w, 0).unwrap();
        let z = build_method_state(&MethodSpec::new(MethodKind::ZeroShot), &w, 0).unwrap();
        let rows = encoder::class_embeddings(&w.weights, Some(&w.template_prompt), &w.vocab).unwrap();
        assert_eq!(c.classifier.as_ref().unwrap(), &rows);
        assert_eq!(
            evaluate_accuracy(&c, &w, &test).unwrap(),
            evaluate_accuracy(&z, &w, &test).unwrap()
        );
        let p = forward_posterior(&c, &w, test.images.row(0)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truth_prompt_is_perfect_on_noiseless_images() {
        let (w, cfg) = tiny_world(0.0);
        let test = sample_dataset(&w, Split::Test, &cfg).unwrap();
        let mut z = build_method_state(&MethodSpec::new(MethodKind::ZeroShot), &w, 0).unwrap();
        z.prompt = Some(w.truth_prompt.clone());
        assert_eq!(evaluate_accuracy(&z, &w, &test).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_parameters_alone() {
        let (w, cfg) = tiny_world(0.2);
        let data = sample_dataset(&w, Split::Train, &cfg).unwrap();
        let s = build_method_state(&MethodSpec::new(MethodKind::PromptTuning), &w, 1).unwrap();
        let (out, hist) = train(s.clone(), &w, &data, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out, s);
        assert!(hist.is_empty());
        let cfg0 = TrainConfig {
            epochs: 3,
            lr: 0.0,
            ..Default::default()
        };
        let (out, hist) = train(s.clone(), &w, &data, &cfg0).unwrap();
        assert_eq!(out.trainable(), s.trainable());
        assert_eq!(hist.len(), 3);
    }

    #[test]
    fn frozen_groups_untouched_for_every_kind() {
        let (w, cfg) = tiny_world(0.2);
        let data = sample_dataset(&w, Split::Train, &cfg).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 5,
            lr: 0.01,
            ..Default::default()
        };
        for kind in MethodKind::ALL {
            let s = build_method_state(&MethodSpec::new(kind), &w, 4).unwrap();
            let (out, _) = train(s.clone(), &w, &data, &tc).unwrap();
            match kind {
                MethodKind::PromptTuning => {
                    assert!(out.vocab.is_none() && out.encoder.is_none());
                    assert_ne!(out.prompt, s.prompt);
                }
                MethodKind::CLSTuning => {
                    assert_eq!(out.prompt, s.prompt);
                    assert_ne!(out.vocab, s.vocab);
                }
                MethodKind::TEncFT => {
                    assert_eq!(out.prompt, s.prompt);
                    assert_eq!(out.encoder.as_ref().unwrap().pos, w.weights.pos);
                    assert_ne!(out.encoder, s.encoder);
                }
                MethodKind::ZeroShot => assert_eq!(out, s),
                MethodKind::FullPromptTuning => {
                    assert!(out.encoder.is_none());
                    assert_ne!(out.prompt, s.prompt);
                    assert_ne!(out.vocab, s.vocab);
                }
                MethodKind::ClassifierR | MethodKind::ClassifierC => {
                    assert!(out.prompt.is_none() && out.vocab.is_none() && out.encoder.is_none());
                    assert_ne!(out.classifier, s.classifier);
                }
            }
        }
        // The shared world is never mutated through a state.
        assert_eq!(w, generate_world(&cfg).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (w, cfg) = tiny_world(0.2);
        let data = sample_dataset(&w, Split::Train, &cfg).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 5,
            ..Default::default()
        };
        let s = build_method_state(&MethodSpec::new(MethodKind::FullPromptTuning), &w, 2).unwrap();
        let a = train(s.clone(), &w, &data, &tc).unwrap();
        let b = train(s, &w, &data, &tc).unwrap();
        assert_eq!(a, b);
    }

    /// Hand-derived gradient of CE through a cosine classifier:
    /// ∂L/∂w_k = (p_k − y_k)/τ · (I − ŵ_k ŵ_kᵀ) x / ‖w_k‖.
    #[test]
    fn single_step_matches_hand_rolled_momentum_sgd() {
        let (w, cfg) = tiny_world(0.2);
        let data = sample_dataset(&w, Split::Train, &cfg).unwrap();
        let one = data.subset(&[5]).unwrap();
        let state = build_method_state(&MethodSpec::new(MethodKind::ClassifierR), &w, 7).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 0.002,
            ..Default::default()
        };
        let (trained, _) = train(state.clone(), &w, &one, &tc).unwrap();

        let tau = w.temperature();
        let x = one.images.row(0);
        let label = one.observed_labels[0];
        let rows = state.classifier.as_ref().unwrap();
        let k = rows.rows();
        let mut logits = vec![0.0; k];
        let mut units = Vec::new();
        for (c, logit) in logits.iter_mut().enumerate() {
            let r = rows.row(c);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: Vec<f64> = r.iter().map(|v| v / n).collect();
            *logit = u.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / tau;
            units.push((u, n));
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..k {
            let p = (logits[c] - m).exp() / z;
            let coeff = (p - if c == label { 1.0 } else { 0.0 }) / tau;
            let (u, n) = &units[c];
            let ux: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            for j in 0..rows.cols() {
                let g = coeff * (x[j] - u[j] * ux) / n;
                let expected = rows.get(c, j) - 0.002 * g;
                let got = trained.classifier.as_ref().unwrap().get(c, j);
                assert!((got - expected).abs() < 1e-12, "({c},{j}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn random_classifier_is_near_chance() {
        let cfg = WorldConfig {
            test_per_class: 200,
            seed: 11,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let test = sample_dataset(&w, Split::Test, &cfg).unwrap();
        let mut acc = 0.0;
        for seed in 0..8 {
            let s = build_method_state(&MethodSpec::new(MethodKind::ClassifierR), &w, seed).unwrap();
            acc += evaluate_accuracy(&s, &w, &test).unwrap() / 8.0;
        }
        assert!((acc - 0.1).abs() <= 0.05, "{acc}");
    }
}
