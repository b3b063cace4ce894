//! The micro sequence-to-sequence network.
//!
//! A stacked-GRU encoder reads the shaped input; a stacked-GRU decoder,
//! initialized from the encoder's final hidden states, generates the target
//! with scaled dot-product attention over the encoder states and a combined
//! readout `W_out . tanh(W_c [h; ctx])`. Forward, loss and backward are
//! plain functions of `(parameters, batch)`, deterministic bit-for-bit at a
//! fixed float width, with exact analytic gradients.
//!
//! The training loss is token-level cross entropy; the score-weighted
//! variant multiplies each example's summed token NLL by `weight / Z`.
//! `LgVariant::PaperLiteral` keeps the alternative formulation that also
//! charges non-gold vocabulary entries; it exists for experimentation and
//! nothing depends on it.

pub mod checkpoint;
mod net;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::shaping::{BOS_ID, PAD_ID};
use crate::stablehash::draw_unit;

pub use net::{
    backward, decode_step, encode, forward, loss_batch, Batch, BatchOutput, DecoderState,
    EncodedInput, LossConfig,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("token id {id} out of range for vocab of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("logits cover {logits} positions but targets have {targets}")]
    LengthMismatch { logits: usize, targets: usize },
    #[error("normalizer Z must be positive, got {z}")]
    NonPositiveZ { z: f64 },
    #[error("non-finite {what} (step aborted)")]
    NonFinite { what: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub attention: bool,
    pub max_positions: usize,
    pub seed: u64,
    /// 32 or 64; selects the scalar type at the orchestration layer. The
    /// numeric code itself is generic.
    pub float_width: u8,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 10,
            embed_dim: 64,
            hidden_dim: 128,
            n_layers: 1,
            attention: true,
            max_positions: 256,
            seed: 0,
            float_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 10 {
            return Err(ModelError::InvalidConfig {
                field: "vocab_size",
                message: format!("must cover the 10 reserved tokens, got {}", self.vocab_size),
            });
        }
        for (field, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig {
                    field,
                    message: "must be positive".into(),
                });
            }
        }
        if self.max_positions < 2 {
            return Err(ModelError::InvalidConfig {
                field: "max_positions",
                message: format!("must be at least 2, got {}", self.max_positions),
            });
        }
        if self.float_width != 32 && self.float_width != 64 {
            return Err(ModelError::InvalidConfig {
                field: "float_width",
                message: format!("must be 32 or 64, got {}", self.float_width),
            });
        }
        Ok(())
    }
}

/// One GRU layer. Gate order inside the packed tensors is [z | r | n].
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer<S: Scalar> {
    /// (input_dim, 3 * hidden)
    pub w_x: Array2<S>,
    /// (hidden, 2 * hidden), recurrent weights of the z and r gates
    pub w_h_zr: Array2<S>,
    /// (hidden, hidden), recurrent weights of the candidate gate
    pub w_h_n: Array2<S>,
    /// (3 * hidden)
    pub b: Array1<S>,
}

impl<S: Scalar> GruLayer<S> {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        GruLayer {
            w_x: Array2::zeros((input_dim, 3 * hidden)),
            w_h_zr: Array2::zeros((hidden, 2 * hidden)),
            w_h_n: Array2::zeros((hidden, hidden)),
            b: Array1::zeros(3 * hidden),
        }
    }
}

/// All named parameter tensors of the network, plus the config they
/// instantiate. Gradients reuse this structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<S: Scalar> {
    pub cfg: ModelConfig,
    /// (vocab, embed); shared between encoder and decoder. Row 0 ([PAD])
    /// starts at zero and receives no gradient.
    pub embedding: Array2<S>,
    pub encoder: Vec<GruLayer<S>>,
    pub decoder: Vec<GruLayer<S>>,
    /// (2 * hidden, hidden): readout combination of [dec_h | ctx]
    pub w_combine: Array2<S>,
    /// (hidden)
    pub b_combine: Array1<S>,
    /// (hidden, vocab)
    pub w_out: Array2<S>,
    /// (vocab)
    pub b_out: Array1<S>,
}

impl<S: Scalar> Parameters<S> {
    /// All-zero parameters with the shapes of `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Parameters<S>, ModelError> {
        cfg.validate()?;
        let (v, e, h, l) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.n_layers);
        let layer_stack = |first_in: usize| -> Vec<GruLayer<S>> {
            (0..l)
                .map(|i| GruLayer::zeros(if i == 0 { first_in } else { h }, h))
                .collect()
        };
        Ok(Parameters {
            cfg: cfg.clone(),
            embedding: Array2::zeros((v, e)),
            encoder: layer_stack(e),
            decoder: layer_stack(e),
            w_combine: Array2::zeros((2 * h, h)),
            b_combine: Array1::zeros(h),
            w_out: Array2::zeros((h, v)),
            b_out: Array1::zeros(v),
        })
    }

    /// Zero gradients (or optimizer state) with this parameter structure.
    pub fn zeros_like(&self) -> Parameters<S> {
        Parameters::zeros(&self.cfg).expect("existing parameters imply a valid config")
    }

    pub fn param_count(&self) -> usize {
        self.named_views().iter().map(|(_, v)| v.len()).sum()
    }

    /// Named read views in a stable order shared with `named_views_mut`.
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, S>)> {
        let mut out: Vec<(String, ArrayViewD<'_, S>)> = Vec::new();
        out.push(("embedding".into(), self.embedding.view().into_dyn()));
        for (prefix, stack) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, layer) in stack.iter().enumerate() {
                out.push((format!("{prefix}.{i}.w_x"), layer.w_x.view().into_dyn()));
                out.push((
                    format!("{prefix}.{i}.w_h_zr"),
                    layer.w_h_zr.view().into_dyn(),
                ));
                out.push((format!("{prefix}.{i}.w_h_n"), layer.w_h_n.view().into_dyn()));
                out.push((format!("{prefix}.{i}.b"), layer.b.view().into_dyn()));
            }
        }
        out.push(("w_combine".into(), self.w_combine.view().into_dyn()));
        out.push(("b_combine".into(), self.b_combine.view().into_dyn()));
        out.push(("w_out".into(), self.w_out.view().into_dyn()));
        out.push(("b_out".into(), self.b_out.view().into_dyn()));
        out
    }

    /// Named write views; same order as [`named_views`](Self::named_views).
    pub fn named_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, S>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, S>)> = Vec::new();
        out.push(("embedding".into(), self.embedding.view_mut().into_dyn()));
        for (prefix, stack) in [
            ("encoder", &mut self.encoder),
            ("decoder", &mut self.decoder),
        ] {
            for (i, layer) in stack.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.w_x"), layer.w_x.view_mut().into_dyn()));
                out.push((
                    format!("{prefix}.{i}.w_h_zr"),
                    layer.w_h_zr.view_mut().into_dyn(),
                ));
                out.push((
                    format!("{prefix}.{i}.w_h_n"),
                    layer.w_h_n.view_mut().into_dyn(),
                ));
                out.push((format!("{prefix}.{i}.b"), layer.b.view_mut().into_dyn()));
            }
        }
        out.push(("w_combine".into(), self.w_combine.view_mut().into_dyn()));
        out.push(("b_combine".into(), self.b_combine.view_mut().into_dyn()));
        out.push(("w_out".into(), self.w_out.view_mut().into_dyn()));
        out.push(("b_out".into(), self.b_out.view_mut().into_dyn()));
        out
    }

    /// True iff every tensor element is finite.
    pub fn all_finite(&self) -> bool {
        self.named_views()
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Deterministic initialization: every weight tensor is uniform in
/// [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases are zero, the [PAD] embedding
/// row is zero. Draw order is fixed, so equal configs give equal bytes.
pub fn init<S: Scalar>(cfg: &ModelConfig) -> Result<Parameters<S>, ModelError> {
    let mut params = Parameters::<S>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fill = |tensor: &mut [S], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for slot in tensor.iter_mut() {
            *slot = S::of_f64(bound * (2.0 * draw_unit(&mut rng) - 1.0));
        }
    };
    fill(
        params.embedding.as_slice_mut().expect("contiguous"),
        cfg.embed_dim,
    );
    // borrow ends before the next fill call
    for stack in [&mut params.encoder, &mut params.decoder] {
        for layer in stack.iter_mut() {
            let in_dim = layer.w_x.nrows();
            let h = layer.w_h_n.nrows();
            fill(layer.w_x.as_slice_mut().expect("contiguous"), in_dim);
            fill(layer.w_h_zr.as_slice_mut().expect("contiguous"), h);
            fill(layer.w_h_n.as_slice_mut().expect("contiguous"), h);
            // biases stay zero
        }
    }
    fill(
        params.w_combine.as_slice_mut().expect("contiguous"),
        2 * cfg.hidden_dim,
    );
    fill(
        params.w_out.as_slice_mut().expect("contiguous"),
        cfg.hidden_dim,
    );
    params.embedding.row_mut(PAD_ID as usize).fill(S::zero());
    Ok(params)
}

/// Which generation loss to differentiate.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LgVariant {
    /// Token-level cross entropy: non-gold entries contribute nothing.
    #[default]
    Standard,
    /// The variant that also charges -1 for every non-gold entry.
    PaperLiteral,
}

/// Per-example loss decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<S: Scalar> {
    /// One entry per target position; [PAD] positions hold 0.
    pub per_token_nll: Vec<S>,
    /// Sum of per-token NLL over non-PAD positions.
    pub sequence_loss: S,
    /// `(weight_used / Z) * sequence_loss`.
    pub weighted_loss: S,
    pub weight_used: S,
}

pub(crate) fn row_logsumexp<S: Scalar>(row: ndarray::ArrayView1<'_, S>) -> S {
    let mut max = S::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for &x in row.iter() {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// Token cross entropy over one example's logits. `logits` has one row per
/// target position; [PAD] targets are excluded from the sum.
pub fn loss_lg<S: Scalar>(
    logits: &Array2<S>,
    target_ids: &[u32],
    variant: LgVariant,
) -> Result<LossBreakdown<S>, ModelError> {
    if logits.nrows() != target_ids.len() {
        return Err(ModelError::LengthMismatch {
            logits: logits.nrows(),
            targets: target_ids.len(),
        });
    }
    let vocab = logits.ncols();
    let mut per_token_nll = vec![S::zero(); target_ids.len()];
    let mut sequence_loss = S::zero();
    for (r, &target) in target_ids.iter().enumerate() {
        if target == PAD_ID {
            continue;
        }
        if target as usize >= vocab {
            return Err(ModelError::IdOutOfRange { id: target, vocab });
        }
        let row = logits.row(r);
        let lse = row_logsumexp(row);
        let gold = row[target as usize];
        let nll = match variant {
            LgVariant::Standard => lse - gold,
            LgVariant::PaperLiteral => {
                // sum_v log p_v - 2 log p_g
                let mut sum_logits = S::zero();
                for &x in row.iter() {
                    sum_logits += x;
                }
                sum_logits - S::of_f64(vocab as f64 - 2.0) * lse - gold - gold
            }
        };
        per_token_nll[r] = nll;
        sequence_loss += nll;
    }
    Ok(LossBreakdown {
        per_token_nll,
        sequence_loss,
        weighted_loss: sequence_loss,
        weight_used: S::one(),
    })
}

/// Applies the score weighting of the weighted objective to a breakdown.
pub fn loss_weighted<S: Scalar>(
    breakdown: &LossBreakdown<S>,
    weight: S,
    z: S,
) -> Result<LossBreakdown<S>, ModelError> {
    if z <= S::zero() {
        return Err(ModelError::NonPositiveZ { z: z.as_f64() });
    }
    Ok(LossBreakdown {
        per_token_nll: breakdown.per_token_nll.clone(),
        sequence_loss: breakdown.sequence_loss,
        weighted_loss: weight / z * breakdown.sequence_loss,
        weight_used: weight,
    })
}

/// Decoder input for teacher forcing: `[BOS]` followed by the target minus
/// its last token.
pub fn shift_target(target_ids: &[u32]) -> Vec<u32> {
    let mut shifted = Vec::with_capacity(target_ids.len());
    shifted.push(BOS_ID);
    if target_ids.len() > 1 {
        shifted.extend_from_slice(&target_ids[..target_ids.len() - 1]);
    }
    shifted
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            hidden_dim: 10,
            n_layers: 1,
            max_positions: 32,
            seed: 7,
            float_width: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init::<f64>(&tiny_cfg()).unwrap();
        let b = init::<f64>(&tiny_cfg()).unwrap();
        for ((_, va), (_, vb)) in a.named_views().iter().zip(b.named_views().iter()) {
            let bits_a: Vec<u64> = va.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = vb.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(a.embedding.dim(), (20, 8));
        assert_eq!(a.encoder[0].w_x.dim(), (8, 30));
        assert_eq!(a.encoder[0].w_h_zr.dim(), (10, 20));
        assert_eq!(a.encoder[0].w_h_n.dim(), (10, 10));
        assert_eq!(a.w_out.dim(), (10, 20));
    }

    #[test]
    fn init_respects_bounds_and_pad_row() {
        let params = init::<f64>(&tiny_cfg()).unwrap();
        assert!(params.all_finite());
        for (name, view) in params.named_views() {
            let fan_in = match name.as_str() {
                "embedding" => 8.0,
                "w_combine" => 20.0,
                "w_out" => 10.0,
                n if n.ends_with(".w_x") => 8.0,
                n if n.ends_with(".w_h_zr") || n.ends_with(".w_h_n") => 10.0,
                _ => continue, // biases are zero
            };
            let bound = 3.0 / f64::sqrt(fan_in);
            for &x in view.iter() {
                assert!(x.abs() <= bound, "{name}: {x} exceeds {bound}");
            }
        }
        assert!(params.embedding.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn seeds_differ() {
        let a = init::<f64>(&tiny_cfg()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.seed = 8;
        let b = init::<f64>(&cfg).unwrap();
        assert_ne!(a.embedding, b.embedding);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.vocab_size = 5;
        assert!(matches!(
            init::<f64>(&cfg),
            Err(ModelError::InvalidConfig {
                field: "vocab_size",
                ..
            })
        ));
        let mut cfg = tiny_cfg();
        cfg.float_width = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn uniform_logits_loss_is_analytic() {
        let logits = Array2::<f64>::zeros((3, 10));
        let breakdown = loss_lg(&logits, &[4, 5, 6], LgVariant::Standard).unwrap();
        let expected = 3.0 * (10f64).ln();
        assert!((breakdown.sequence_loss - expected).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut logits = Array2::<f64>::zeros((2, 10));
        logits[(0, 3)] = 50.0;
        logits[(1, 7)] = 50.0;
        let breakdown = loss_lg(&logits, &[3, 7], LgVariant::Standard).unwrap();
        assert!(breakdown.sequence_loss >= 0.0);
        assert!(breakdown.sequence_loss < 1e-9);
    }

    #[test]
    fn hand_computed_two_token_case() {
        // independent scalar computation of the same cross entropy; ids 2
        // and 1 because id 0 is [PAD] and would be excluded
        let logits = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let breakdown = loss_lg(&logits, &[2, 1], LgVariant::Standard).unwrap();
        let softmax_nll = |row: [f64; 3], gold: usize| -> f64 {
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            -(row[gold].exp() / denom).ln()
        };
        let expected = softmax_nll([1.0, 0.0, 0.0], 2) + softmax_nll([0.0, 2.0, 0.0], 1);
        assert!((breakdown.sequence_loss - expected).abs() < 1e-12);
        assert!((breakdown.per_token_nll[0] - softmax_nll([1.0, 0.0, 0.0], 2)).abs() < 1e-12);
    }

    #[test]
    fn pad_positions_are_excluded() {
        let mut logits = Array2::<f64>::zeros((3, 10));
        logits[(2, 0)] = 99.0; // would dominate if counted
        let full = loss_lg(&logits, &[4, 5, PAD_ID], LgVariant::Standard).unwrap();
        let trimmed = loss_lg(
            &logits.slice(ndarray::s![..2, ..]).to_owned(),
            &[4, 5],
            LgVariant::Standard,
        )
        .unwrap();
        assert_eq!(full.sequence_loss, trimmed.sequence_loss);
        assert_eq!(full.per_token_nll[2], 0.0);
    }

    #[test]
    fn weighted_loss_arithmetic() {
        let logits = Array2::<f64>::zeros((1, 10));
        let base = loss_lg(&logits, &[4], LgVariant::Standard).unwrap();

        let zero = loss_weighted(&base, 0.0, 0.5).unwrap();
        assert_eq!(zero.weighted_loss, 0.0);

        let identity = loss_weighted(&base, 1.0, 1.0).unwrap();
        assert_eq!(identity.weighted_loss, identity.sequence_loss);

        let mut scaled = base.clone();
        scaled.sequence_loss = 2.0;
        let scaled = loss_weighted(&scaled, 0.5, 0.8).unwrap();
        assert!((scaled.weighted_loss - 1.25).abs() < 1e-12);

        assert!(matches!(
            loss_weighted(&base, 0.5, 0.0),
            Err(ModelError::NonPositiveZ { .. })
        ));
    }

    #[test]
    fn weighted_loss_scaling_law() {
        let logits = Array2::<f64>::from_shape_fn((2, 10), |(r, c)| (r + c) as f64 * 0.1);
        let base = loss_lg(&logits, &[4, 5], LgVariant::Standard).unwrap();
        let a = loss_weighted(&base, 0.4, 0.8).unwrap();
        let b = loss_weighted(&base, 0.4 * 3.0, 0.8 * 3.0).unwrap();
        assert!((a.weighted_loss - b.weighted_loss).abs() < 1e-12);
    }

    #[test]
    fn shift_target_prepends_bos() {
        assert_eq!(shift_target(&[10, 11, 2]), vec![BOS_ID, 10, 11]);
        assert_eq!(shift_target(&[2]), vec![BOS_ID]);
    }
}
