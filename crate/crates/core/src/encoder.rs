//! The frozen text encoder: one attention layer, one tanh MLP, residual
//! connections and a last-position readout, followed by L2 normalization.
//!
//! Everything is expressed on a [`Tape`] so gradients reach any prompt row,
//! classname token or weight. The plain-value helpers ([`encode_text`],
//! [`class_embeddings`], [`posterior`]) build a throwaway tape, which keeps
//! inference and training on exactly the same arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, NodeId, SeededRng, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub embed_dim: usize,
    /// Number of learnable context tokens M; the positional table has M+1 rows.
    pub context_len: usize,
    pub hidden_width: usize,
    pub temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_dim: 16,
            embed_dim: 16,
            context_len: 16,
            hidden_width: 32,
            temperature: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("encoder.token_dim", self.token_dim),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.context_len", self.context_len),
            ("encoder.hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be >= 1"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("encoder.temperature", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_1: Matrix,
    pub b_1: Matrix,
    pub w_2: Matrix,
    pub b_2: Matrix,
    pub w_out: Matrix,
    pub pos: Matrix,
}

/// Names of the trainable weight tensors, in a fixed order.
pub const WEIGHT_NAMES: [&str; 8] = ["w_q", "w_k", "w_v", "w_1", "b_1", "w_2", "b_2", "w_out"];

impl EncoderWeights {
    pub fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.w_q, &self.w_k, &self.w_v, &self.w_1, &self.b_1, &self.w_2, &self.b_2, &self.w_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.w_out,
        ]
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Standard sinusoidal table over positions `0..positions`.
pub fn sinusoid_table(positions: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(positions, dim);
    for p in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            m.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights> {
    config.validate()?;
    let d = config.token_dim;
    let h = config.hidden_width;
    let e = config.embed_dim;
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = SeededRng::new(seed);
    Ok(EncoderWeights {
        config: *config,
        w_q: rng.gaussian_matrix(d, d, std),
        w_k: rng.gaussian_matrix(d, d, std),
        w_v: rng.gaussian_matrix(d, d, std),
        w_1: rng.gaussian_matrix(d, h, std),
        b_1: Matrix::zeros(1, h),
        w_2: rng.gaussian_matrix(h, d, std),
        b_2: Matrix::zeros(1, d),
        w_out: rng.gaussian_matrix(d, e, std),
        pos: sinusoid_table(config.context_len + 1, d),
    })
}

/// `[p_1, …, p_M, w_c]` as an (M+1)×d matrix; `prompt = None` is the
/// classname-only (Ctx-0) input.
pub fn assemble_prompt(prompt: Option<&Matrix>, classname: &[f64]) -> Result<Matrix> {
    let cls = Matrix::row_vector(classname);
    match prompt {
        None => Ok(cls),
        Some(p) => {
            if p.cols() != classname.len() {
                return Err(Error::DimMismatch {
                    prompt: p.cols(),
                    classname: classname.len(),
                });
            }
            Ok(Matrix::vstack(&[p, &cls])?)
        }
    }
}

/// Encoder weights registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub weights: [NodeId; 8],
    pub pos: NodeId,
    pub token_dim: usize,
}

impl EncoderNodes {
    /// Registers the weights as leaves when `trainable`, constants otherwise.
    /// The positional table is always constant.
    pub fn register(tape: &mut Tape, weights: &EncoderWeights, trainable: bool) -> Result<Self> {
        let mut ids = [NodeId(0); 8];
        for (slot, m) in ids.iter_mut().zip(weights.tensors()) {
            *slot = if trainable {
                tape.leaf(m.clone())?
            } else {
                tape.constant(m.clone())?
            };
        }
        Ok(Self {
            weights: ids,
            pos: tape.constant(weights.pos.clone())?,
            token_dim: weights.config.token_dim,
        })
    }

    /// Encodes an L×d token node to a 1×e unit row.
    pub fn encode(&self, tape: &mut Tape, tokens: NodeId) -> Result<NodeId> {
        let [w_q, w_k, w_v, w_1, b_1, w_2, b_2, w_out] = self.weights;
        let (len, dim) = tape.value(tokens).shape();
        let max = tape.value(self.pos).rows();
        if len == 0 || len > max {
            return Err(Error::SequenceTooLong { len, max });
        }
        if dim != self.token_dim {
            return Err(Error::DimMismatch {
                prompt: dim,
                classname: self.token_dim,
            });
        }
        let pos = tape.select_rows(self.pos, (0..len).collect())?;
        let x0 = tape.add(tokens, pos)?;

        let q = tape.matmul(x0, w_q)?;
        let k = tape.matmul(x0, w_k)?;
        let v = tape.matmul(x0, w_v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.token_dim as f64).sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let x1 = tape.add(x0, mixed)?;

        let pre = tape.matmul(x1, w_1)?;
        let pre = tape.add_row_bias(pre, b_1)?;
        let hidden = tape.tanh(pre)?;
        let mlp = tape.matmul(hidden, w_2)?;
        let mlp = tape.add_row_bias(mlp, b_2)?;
        let x2 = tape.add(x1, mlp)?;

        let last = tape.select_rows(x2, vec![len - 1])?;
        let f = tape.matmul(last, w_out)?;
        Ok(tape.l2_normalize_rows(f)?)
    }

    /// K×e class embeddings for a (possibly absent) prompt node and a K×d
    /// vocabulary node.
    pub fn class_embeddings(&self, tape: &mut Tape, prompt: Option<NodeId>, vocab: NodeId) -> Result<NodeId> {
        let classes = tape.value(vocab).rows();
        if let Some(p) = prompt {
            let (pd, vd) = (tape.value(p).cols(), tape.value(vocab).cols());
            if pd != vd {
                return Err(Error::DimMismatch { prompt: pd, classname: vd });
            }
        }
        let mut rows = Vec::with_capacity(classes);
        for c in 0..classes {
            let cls = tape.select_rows(vocab, vec![c])?;
            let tokens = match prompt {
                Some(p) => tape.stack_rows(&[p, cls])?,
                None => cls,
            };
            rows.push(self.encode(tape, tokens)?);
        }
        Ok(tape.stack_rows(&rows)?)
    }
}

/// Row-wise posteriors `softmax(images · class_embsᵀ / τ)` on the tape.
pub fn posterior_on_tape(tape: &mut Tape, images: NodeId, class_embs: NodeId, temperature: f64) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::TemperatureNonPositive(temperature));
    }
    let t = tape.transpose(class_embs)?;
    let sims = tape.matmul(images, t)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    Ok(tape.softmax_rows(logits)?)
}

/// Unit-norm text embedding of an L×d token matrix.
pub fn encode_text(weights: &EncoderWeights, tokens: &Matrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::register(&mut tape, weights, false)?;
    let t = tape.constant(tokens.clone())?;
    let out = nodes.encode(&mut tape, t)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn class_embeddings(weights: &EncoderWeights, prompt: Option<&Matrix>, vocab: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::register(&mut tape, weights, false)?;
    let p = prompt.map(|p| tape.constant(p.clone())).transpose()?;
    let v = tape.constant(vocab.clone())?;
    let out = nodes.class_embeddings(&mut tape, p, v)?;
    Ok(tape.value(out).clone())
}

/// `Pr(y = i | x)` for one unit image embedding.
pub fn posterior(image: &[f64], class_embs: &Matrix, temperature: f64) -> Result<Vec<f64>> {
    Ok(posterior_batch(&Matrix::row_vector(image), class_embs, temperature)?
        .data()
        .to_vec())
}

/// Posteriors for every row of `images`.
pub fn posterior_batch(images: &Matrix, class_embs: &Matrix, temperature: f64) -> Result<Matrix> {
    let mut tape = Tape::new();
    let i = tape.constant(images.clone())?;
    let c = tape.constant(class_embs.clone())?;
    let p = posterior_on_tape(&mut tape, i, c, temperature)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check_with_head, norm};

    fn small() -> EncoderConfig {
        EncoderConfig {
            token_dim: 4,
            embed_dim: 4,
            context_len: 3,
            hidden_width: 8,
            temperature: 0.01,
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_encoder(&small(), 5).unwrap();
        let b = init_encoder(&small(), 5).unwrap();
        let c = init_encoder(&small(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.w_q, c.w_q);
        assert!(a.b_1.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small();
        cfg.temperature = 0.0;
        assert!(init_encoder(&cfg, 0).is_err());
        cfg = small();
        cfg.context_len = 0;
        assert!(init_encoder(&cfg, 0).is_err());
    }

    #[test]
    fn assemble_orders_prompt_then_classname() {
        let p = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let m = assemble_prompt(Some(&p), &[9.0, 9.0]).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 2.0, 2.0, 9.0, 9.0]);
        let ctx0 = assemble_prompt(None, &[9.0, 8.0]).unwrap();
        assert_eq!(ctx0.shape(), (1, 2));
        let wide = Matrix::zeros(2, 16);
        assert!(matches!(
            assemble_prompt(Some(&wide), &[0.0; 8]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn encoding_is_unit_norm_and_order_sensitive() {
        let w = init_encoder(&small(), 11).unwrap();
        let mut rng = SeededRng::new(1);
        let tokens = rng.gaussian_matrix(3, 4, 1.0);
        let f = encode_text(&w, &tokens).unwrap();
        assert!((norm(&f) - 1.0).abs() < 1e-9);
        assert_eq!(f, encode_text(&w, &tokens).unwrap());

        let swapped = tokens.select_rows(&[1, 0, 2]).unwrap();
        let g = encode_text(&w, &swapped).unwrap();
        assert!(f.iter().zip(&g).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let w = init_encoder(&small(), 1).unwrap();
        assert!(matches!(
            encode_text(&w, &Matrix::filled(5, 4, 0.1)),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn class_embedding_rows_are_independent() {
        let w = init_encoder(&small(), 2).unwrap();
        let mut rng = SeededRng::new(3);
        let prompt = rng.gaussian_matrix(3, 4, 0.5);
        let mut vocab = rng.gaussian_matrix(3, 4, 0.5);
        let before = class_embeddings(&w, Some(&prompt), &vocab).unwrap();
        for r in 0..3 {
            assert!((norm(before.row(r)) - 1.0).abs() < 1e-9);
        }
        assert_ne!(before.row(0), before.row(1));
        vocab.set(1, 2, 3.0);
        let after = class_embeddings(&w, Some(&prompt), &vocab).unwrap();
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(2), after.row(2));
        assert_ne!(before.row(1), after.row(1));

        let single = class_embeddings(&w, Some(&prompt), &vocab.select_rows(&[0]).unwrap()).unwrap();
        let direct = encode_text(&w, &assemble_prompt(Some(&prompt), vocab.row(0)).unwrap()).unwrap();
        assert_eq!(single.data(), direct.as_slice());
    }

    #[test]
    fn posterior_examples() {
        let same = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = posterior(&[0.6, 0.8], &same, 0.01).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        // image (1, 0); class rows with cosine 0.80 and 0.79 to it
        let rows = Matrix::from_rows(&[
            vec![0.80, (1.0f64 - 0.64).sqrt()],
            vec![0.79, (1.0f64 - 0.79 * 0.79).sqrt()],
        ])
        .unwrap();
        let p = posterior(&[1.0, 0.0], &rows, 0.01).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4, "{p:?}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let sharp = posterior(&[1.0, 0.0], &rows, 1e-4).unwrap();
        assert!(sharp[0] > 0.999);
        assert!(matches!(
            posterior(&[1.0, 0.0], &rows, 0.0),
            Err(Error::TemperatureNonPositive(_))
        ));
    }

    #[test]
    fn token_gradients_match_finite_differences() {
        let w = init_encoder(&small(), 21).unwrap();
        let mut rng = SeededRng::new(4);
        let mut tape = Tape::new();
        let nodes = EncoderNodes::register(&mut tape, &w, false).unwrap();
        let prompt = tape.leaf(rng.gaussian_matrix(3, 4, 0.7)).unwrap();
        let cls = tape.leaf(rng.gaussian_matrix(1, 4, 0.7)).unwrap();
        let tokens = tape.stack_rows(&[prompt, cls]).unwrap();
        let out = nodes.encode(&mut tape, tokens).unwrap();
        tape.set_output(out);
        let probe = rng.gaussian_matrix(1, 4, 1.0);
        let head = move |m: &Matrix| Ok((m.dot(&probe)?, probe.clone()));
        for leaf in [prompt, cls] {
            let err = finite_diff_check_with_head(&tape, leaf, 64, 1e-5, 9, &head).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn weights_json_round_trip() {
        let w = init_encoder(&small(), 8).unwrap();
        let back = EncoderWeights::from_json(&w.to_json().unwrap()).unwrap();
        for (a, b) in w.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1e-300));
            }
        }
    }
}
