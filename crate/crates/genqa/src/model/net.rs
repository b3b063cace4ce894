//! Batched forward / backward passes and the incremental decode step.
//!
//! Sequences in a batch are padded with `[PAD]`; a per-step freeze mask
//! keeps each example's hidden state constant past its real length, so the
//! final encoder state of every example is simply its state at the last
//! step, padded positions receive no gradient, and appending extra padding
//! leaves results bit-identical. Attention over padded positions is
//! disabled with an additive -1e30 mask before the softmax.
//!
//! The cell and readout helpers are shared between the batched training
//! path and the single-example incremental path used at generation time.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::{
    loss_lg, loss_weighted, row_logsumexp, GruLayer, LgVariant, LossBreakdown, ModelError,
    Parameters,
};
use crate::scalar::Scalar;
use crate::shaping::{BOS_ID, EOS_ID, PAD_ID};

const MASK_NEG: f64 = -1e30;

/// A training batch of unpadded id sequences plus per-example weights.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub input_ids: Vec<Vec<u32>>,
    pub target_ids: Vec<Vec<u32>>,
    /// Teacher score of each target, in [0, 1].
    pub weights: Vec<f64>,
}

/// Loss selection for a batch pass.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig<S: Scalar> {
    pub variant: LgVariant,
    /// When true the per-example loss is scaled by `weight / z`.
    pub weighted: bool,
    pub z: S,
}

impl<S: Scalar> LossConfig<S> {
    pub fn plain() -> Self {
        LossConfig {
            variant: LgVariant::Standard,
            weighted: false,
            z: S::one(),
        }
    }

    pub fn weighted(z: S) -> Self {
        LossConfig {
            variant: LgVariant::Standard,
            weighted: true,
            z,
        }
    }
}

/// Losses of one batch pass. `batch_loss` is the training objective: the
/// mean over examples of the (possibly weighted) sequence loss.
#[derive(Debug, Clone)]
pub struct BatchOutput<S: Scalar> {
    pub losses: Vec<LossBreakdown<S>>,
    pub batch_loss: S,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Effective length: everything from the first `[PAD]` on is padding.
fn effective_len(ids: &[u32]) -> usize {
    ids.iter().position(|&t| t == PAD_ID).unwrap_or(ids.len())
}

fn validate_sequence(ids: &[u32], vocab: usize, max: usize) -> Result<usize, ModelError> {
    if ids.len() > max {
        return Err(ModelError::Overlength {
            len: ids.len(),
            max,
        });
    }
    for &id in ids {
        if id as usize >= vocab {
            return Err(ModelError::IdOutOfRange { id, vocab });
        }
    }
    let len = effective_len(ids);
    if len == 0 {
        return Err(ModelError::EmptySequence);
    }
    Ok(len)
}

/// Cached activations of one GRU step.
struct StepCache<S: Scalar> {
    z: Array2<S>,
    r: Array2<S>,
    n: Array2<S>,
    /// r * h_prev (needed for the candidate-gate weight gradient)
    rh: Array2<S>,
    /// frozen output state
    h: Array2<S>,
}

/// One batched GRU step; returns the cache entry with the *unfrozen* new
/// state in `h`. The caller applies the freeze mask.
fn gru_step<S: Scalar>(layer: &GruLayer<S>, x: &Array2<S>, h_prev: &Array2<S>) -> StepCache<S> {
    let h = h_prev.ncols();
    let mut a = x.dot(&layer.w_x);
    a += &layer.b;
    {
        let zr = h_prev.dot(&layer.w_h_zr);
        let mut a_zr = a.slice_mut(s![.., ..2 * h]);
        a_zr += &zr;
    }
    let z = a.slice(s![.., ..h]).mapv(sigmoid);
    let r = a.slice(s![.., h..2 * h]).mapv(sigmoid);
    let rh = &r * h_prev;
    let an = a.slice(s![.., 2 * h..]).to_owned() + rh.dot(&layer.w_h_n);
    let n = an.mapv(|v| v.tanh());
    // h_new = (1 - z) * n + z * h_prev
    let h_new = z.mapv(|v| S::one() - v) * &n + &(&z * h_prev);
    StepCache {
        z,
        r,
        n,
        rh,
        h: h_new,
    }
}

/// Gradient of one GRU step. `dh` is the gradient on the frozen output;
/// returns (dx, dh_prev) and accumulates parameter gradients.
#[allow(clippy::too_many_arguments)]
fn gru_step_backward<S: Scalar>(
    layer: &GruLayer<S>,
    grad: &mut GruLayer<S>,
    step: &StepCache<S>,
    x: &Array2<S>,
    h_prev: &Array2<S>,
    mask: &Array2<S>,
    dh: &Array2<S>,
) -> (Array2<S>, Array2<S>) {
    let one = S::one();
    let dh_new = dh * mask;
    let mut dh_prev = dh - &dh_new; // dh * (1 - mask)

    let dz = &dh_new * &(h_prev - &step.n);
    let dn = &dh_new * &step.z.mapv(|v| one - v);
    dh_prev += &(&dh_new * &step.z);

    let dan = &dn * &step.n.mapv(|v| one - v * v);
    let drh = dan.dot(&layer.w_h_n.t());
    grad.w_h_n += &step.rh.t().dot(&dan);
    let dr = &drh * h_prev;
    dh_prev += &(&drh * &step.r);

    let daz = &dz * &(&step.z * &step.z.mapv(|v| one - v));
    let dar = &dr * &(&step.r * &step.r.mapv(|v| one - v));
    let da_zr = concatenate(Axis(1), &[daz.view(), dar.view()]).expect("gate widths agree");
    dh_prev += &da_zr.dot(&layer.w_h_zr.t());
    grad.w_h_zr += &h_prev.t().dot(&da_zr);

    let da = concatenate(Axis(1), &[daz.view(), dar.view(), dan.view()])
        .expect("gate widths agree");
    grad.b += &da.sum_axis(Axis(0));
    grad.w_x += &x.t().dot(&da);
    let dx = da.dot(&layer.w_x.t());
    (dx, dh_prev)
}

/// Readout: logits = W_out . tanh(W_c [dec_h | ctx] + b_c) + b_out.
fn readout<S: Scalar>(
    params: &Parameters<S>,
    dec_h: &Array2<S>,
    ctx: &Array2<S>,
) -> (Array2<S>, Array2<S>, Array2<S>) {
    let cat = concatenate(Axis(1), &[dec_h.view(), ctx.view()]).expect("same batch size");
    let mut pre = cat.dot(&params.w_combine);
    pre += &params.b_combine;
    let comb = pre.mapv(|v| v.tanh());
    let mut logits = comb.dot(&params.w_out);
    logits += &params.b_out;
    (cat, comb, logits)
}

fn softmax_rows_inplace<S: Scalar>(scores: &mut Array2<S>) {
    for mut row in scores.rows_mut() {
        let mut max = S::neg_infinity();
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut sum = S::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
}

/// Everything the backward pass needs from a forward pass.
struct Cache<S: Scalar> {
    b: usize,
    t_in: usize,
    t_out: usize,
    in_tokens: Array2<u32>,
    dec_tokens: Array2<u32>,
    in_masks: Vec<Array2<S>>,
    dec_masks: Vec<Array2<S>>,
    enc_emb: Vec<Array2<S>>,
    dec_emb: Vec<Array2<S>>,
    enc_steps: Vec<Vec<StepCache<S>>>,
    dec_steps: Vec<Vec<StepCache<S>>>,
    enc_h0: Array2<S>,
    dec_h0: Vec<Array2<S>>,
    alphas: Vec<Array2<S>>,
    cats: Vec<Array2<S>>,
    combs: Vec<Array2<S>>,
    logits: Vec<Array2<S>>,
}

fn gather_rows<S: Scalar>(embedding: &Array2<S>, ids: &[u32]) -> Array2<S> {
    let mut out = Array2::zeros((ids.len(), embedding.ncols()));
    for (b, &id) in ids.iter().enumerate() {
        out.row_mut(b).assign(&embedding.row(id as usize));
    }
    out
}

fn forward_batch<S: Scalar>(
    params: &Parameters<S>,
    batch: &Batch,
) -> Result<Cache<S>, ModelError> {
    let cfg = &params.cfg;
    let b = batch.input_ids.len();
    if b == 0 || batch.target_ids.len() != b {
        return Err(ModelError::EmptySequence);
    }
    let mut in_lens = Vec::with_capacity(b);
    let mut out_lens = Vec::with_capacity(b);
    for ids in &batch.input_ids {
        in_lens.push(validate_sequence(ids, cfg.vocab_size, cfg.max_positions)?);
    }
    for ids in &batch.target_ids {
        out_lens.push(validate_sequence(ids, cfg.vocab_size, cfg.max_positions)?);
    }
    let t_in = batch.input_ids.iter().map(|v| v.len()).max().unwrap();
    let t_out = batch.target_ids.iter().map(|v| v.len()).max().unwrap();
    let (h_dim, layers) = (cfg.hidden_dim, cfg.n_layers);

    // padded token matrices; decoder input is the shifted target
    let mut in_tokens = Array2::from_elem((b, t_in), PAD_ID);
    for (row, ids) in batch.input_ids.iter().enumerate() {
        for (t, &id) in ids.iter().enumerate() {
            in_tokens[(row, t)] = id;
        }
    }
    let mut dec_tokens = Array2::from_elem((b, t_out), PAD_ID);
    for (row, ids) in batch.target_ids.iter().enumerate() {
        let shifted = super::shift_target(ids);
        for (t, &id) in shifted.iter().enumerate() {
            dec_tokens[(row, t)] = id;
        }
    }

    let masks = |lens: &[usize], t_max: usize| -> Vec<Array2<S>> {
        (0..t_max)
            .map(|t| {
                Array2::from_shape_fn((b, 1), |(row, _)| {
                    if t < lens[row] {
                        S::one()
                    } else {
                        S::zero()
                    }
                })
            })
            .collect()
    };
    let in_masks = masks(&in_lens, t_in);
    let dec_masks = masks(&out_lens, t_out);
    let attn_neg_mask = Array2::from_shape_fn((b, t_in), |(row, t)| {
        if t < in_lens[row] {
            S::zero()
        } else {
            S::of_f64(MASK_NEG)
        }
    });

    // encoder
    let enc_h0 = Array2::zeros((b, h_dim));
    let mut enc_emb = Vec::with_capacity(t_in);
    let mut enc_steps: Vec<Vec<StepCache<S>>> = (0..layers).map(|_| Vec::new()).collect();
    for t in 0..t_in {
        let ids: Vec<u32> = (0..b).map(|row| in_tokens[(row, t)]).collect();
        enc_emb.push(gather_rows(&params.embedding, &ids));
        for l in 0..layers {
            let x = if l == 0 {
                &enc_emb[t]
            } else {
                &enc_steps[l - 1][t].h
            };
            let h_prev = if t == 0 { &enc_h0 } else { &enc_steps[l][t - 1].h };
            let mut step = gru_step(&params.encoder[l], x, h_prev);
            step.h = &step.h * &in_masks[t] + &(h_prev * &in_masks[t].mapv(|m| S::one() - m));
            enc_steps[l].push(step);
        }
    }
    // frozen states make the last step the per-example final state
    let dec_h0: Vec<Array2<S>> = (0..layers).map(|l| enc_steps[l][t_in - 1].h.clone()).collect();

    // decoder with attention over the top encoder layer
    let inv_sqrt_h = S::of_f64(1.0 / (h_dim as f64).sqrt());
    let top = layers - 1;
    let mut dec_emb = Vec::with_capacity(t_out);
    let mut dec_steps: Vec<Vec<StepCache<S>>> = (0..layers).map(|_| Vec::new()).collect();
    let mut alphas = Vec::with_capacity(t_out);
    let mut cats = Vec::with_capacity(t_out);
    let mut combs = Vec::with_capacity(t_out);
    let mut logits_per_t = Vec::with_capacity(t_out);
    for t in 0..t_out {
        let ids: Vec<u32> = (0..b).map(|row| dec_tokens[(row, t)]).collect();
        dec_emb.push(gather_rows(&params.embedding, &ids));
        for l in 0..layers {
            let x = if l == 0 {
                &dec_emb[t]
            } else {
                &dec_steps[l - 1][t].h
            };
            let h_prev = if t == 0 {
                &dec_h0[l]
            } else {
                &dec_steps[l][t - 1].h
            };
            let mut step = gru_step(&params.decoder[l], x, h_prev);
            step.h = &step.h * &dec_masks[t] + &(h_prev * &dec_masks[t].mapv(|m| S::one() - m));
            dec_steps[l].push(step);
        }
        let dec_h = &dec_steps[top][t].h;
        let (alpha, ctx) = if cfg.attention {
            let mut scores = Array2::zeros((b, t_in));
            for ti in 0..t_in {
                let col = (dec_h * &enc_steps[top][ti].h).sum_axis(Axis(1)) * inv_sqrt_h;
                scores.column_mut(ti).assign(&col);
            }
            scores += &attn_neg_mask;
            softmax_rows_inplace(&mut scores);
            let mut ctx = Array2::zeros((b, h_dim));
            for ti in 0..t_in {
                let a_col = scores.column(ti).to_owned().insert_axis(Axis(1));
                ctx += &(&enc_steps[top][ti].h * &a_col);
            }
            (scores, ctx)
        } else {
            (Array2::zeros((b, 0)), dec_h0[top].clone())
        };
        let (cat, comb, logits) = readout(params, dec_h, &ctx);
        alphas.push(alpha);
        cats.push(cat);
        combs.push(comb);
        logits_per_t.push(logits);
    }

    Ok(Cache {
        b,
        t_in,
        t_out,
        in_tokens,
        dec_tokens,
        in_masks,
        dec_masks,
        enc_emb,
        dec_emb,
        enc_steps,
        dec_steps,
        enc_h0,
        dec_h0,
        alphas,
        cats,
        combs,
        logits: logits_per_t,
    })
}

fn losses_from_cache<S: Scalar>(
    cache: &Cache<S>,
    batch: &Batch,
    loss_cfg: &LossConfig<S>,
) -> Result<BatchOutput<S>, ModelError> {
    let mut losses = Vec::with_capacity(cache.b);
    let mut batch_loss = S::zero();
    for row in 0..cache.b {
        let target = &batch.target_ids[row];
        let mut example_logits = Array2::zeros((target.len(), cache.logits[0].ncols()));
        for (t, mut out_row) in example_logits.rows_mut().into_iter().enumerate() {
            out_row.assign(&cache.logits[t].row(row));
        }
        let base = loss_lg(&example_logits, target, loss_cfg.variant)?;
        let breakdown = if loss_cfg.weighted {
            loss_weighted(&base, S::of_f64(batch.weights[row]), loss_cfg.z)?
        } else {
            base
        };
        batch_loss += breakdown.weighted_loss;
        losses.push(breakdown);
    }
    batch_loss = batch_loss / S::of_f64(cache.b as f64);
    if !batch_loss.is_finite() {
        return Err(ModelError::NonFinite {
            what: "batch loss".into(),
        });
    }
    Ok(BatchOutput { losses, batch_loss })
}

/// Forward-only batch pass: per-example losses plus the batch objective.
pub fn loss_batch<S: Scalar>(
    params: &Parameters<S>,
    batch: &Batch,
    loss_cfg: &LossConfig<S>,
) -> Result<BatchOutput<S>, ModelError> {
    let cache = forward_batch(params, batch)?;
    losses_from_cache(&cache, batch, loss_cfg)
}

/// Teacher-forced single-example forward: logits per target position.
/// `decoder_input_ids` is the shifted target (see [`super::shift_target`]).
pub fn forward<S: Scalar>(
    params: &Parameters<S>,
    input_ids: &[u32],
    decoder_input_ids: &[u32],
) -> Result<Array2<S>, ModelError> {
    // route through the batched path: the batch shifts targets itself, so
    // rebuild a pseudo target whose shift equals `decoder_input_ids`. Its
    // final token never becomes a decoder input; any non-PAD id works.
    if decoder_input_ids.is_empty() || decoder_input_ids[0] != BOS_ID {
        return Err(ModelError::InvalidConfig {
            field: "decoder_input_ids",
            message: "teacher-forced decoder input must start with [BOS]".into(),
        });
    }
    let mut pseudo_target: Vec<u32> = decoder_input_ids[1..].to_vec();
    pseudo_target.push(EOS_ID);
    let batch = Batch {
        ids: vec!["forward".into()],
        input_ids: vec![input_ids.to_vec()],
        target_ids: vec![pseudo_target],
        weights: vec![1.0],
    };
    let cache = forward_batch(params, &batch)?;
    let vocab = cache.logits[0].ncols();
    let mut out = Array2::zeros((cache.t_out, vocab));
    for t in 0..cache.t_out {
        out.row_mut(t).assign(&cache.logits[t].row(0));
    }
    Ok(out)
}

/// Analytic gradients of the batch objective. Returns the gradient in the
/// same named-tensor structure plus the losses of the forward pass.
pub fn backward<S: Scalar>(
    params: &Parameters<S>,
    batch: &Batch,
    loss_cfg: &LossConfig<S>,
) -> Result<(Parameters<S>, BatchOutput<S>), ModelError> {
    if loss_cfg.weighted && loss_cfg.z <= S::zero() {
        return Err(ModelError::NonPositiveZ {
            z: loss_cfg.z.as_f64(),
        });
    }
    let cache = forward_batch(params, batch)?;
    let output = losses_from_cache(&cache, batch, loss_cfg)?;
    let mut grad = params.zeros_like();

    let cfg = &params.cfg;
    let (b, t_in, t_out) = (cache.b, cache.t_in, cache.t_out);
    let (h_dim, layers, vocab) = (cfg.hidden_dim, cfg.n_layers, cfg.vocab_size);
    let top = layers - 1;
    let inv_sqrt_h = S::of_f64(1.0 / (h_dim as f64).sqrt());
    let one = S::one();
    let inv_b = one / S::of_f64(b as f64);

    // per-example loss scale: d(batch_loss)/d(sequence_loss_b)
    let scales: Vec<S> = (0..b)
        .map(|row| {
            let s = if loss_cfg.weighted {
                S::of_f64(batch.weights[row]) / loss_cfg.z
            } else {
                one
            };
            s * inv_b
        })
        .collect();

    // deferred gradients into encoder states
    let mut d_enc_top: Vec<Array2<S>> = (0..t_in).map(|_| Array2::zeros((b, h_dim))).collect();
    let mut d_dec_carry: Vec<Array2<S>> = (0..layers).map(|_| Array2::zeros((b, h_dim))).collect();
    let mut d_enc_final_top: Array2<S> = Array2::zeros((b, h_dim));
    let mut d_emb = Array2::<S>::zeros((vocab, cfg.embed_dim));

    for t in (0..t_out).rev() {
        // d(batch objective)/d(logits_t)
        let logits_t = &cache.logits[t];
        let mut dlogits = Array2::<S>::zeros((b, vocab));
        for row in 0..b {
            let target = &batch.target_ids[row];
            if t >= target.len() || target[t] == PAD_ID {
                continue;
            }
            let gold = target[t] as usize;
            let lrow = logits_t.row(row);
            let lse = row_logsumexp(lrow);
            let scale = scales[row];
            let mut drow = dlogits.row_mut(row);
            match loss_cfg.variant {
                LgVariant::Standard => {
                    for (v, d) in drow.iter_mut().enumerate() {
                        let p = (lrow[v] - lse).exp();
                        *d = scale * p;
                    }
                    drow[gold] -= scale;
                }
                LgVariant::PaperLiteral => {
                    let coeff = S::of_f64(2.0 - vocab as f64);
                    for (v, d) in drow.iter_mut().enumerate() {
                        let p = (lrow[v] - lse).exp();
                        *d = scale * (one + coeff * p);
                    }
                    drow[gold] -= scale + scale;
                }
            }
        }

        // readout backward
        let dcomb = dlogits.dot(&params.w_out.t());
        grad.w_out += &cache.combs[t].t().dot(&dlogits);
        grad.b_out += &dlogits.sum_axis(Axis(0));
        let dpre = &dcomb * &cache.combs[t].mapv(|v| one - v * v);
        grad.w_combine += &cache.cats[t].t().dot(&dpre);
        grad.b_combine += &dpre.sum_axis(Axis(0));
        let dcat = dpre.dot(&params.w_combine.t());
        let mut d_dec_top = dcat.slice(s![.., ..h_dim]).to_owned();
        let dctx = dcat.slice(s![.., h_dim..]).to_owned();

        // attention backward
        if cfg.attention {
            let alpha = &cache.alphas[t];
            let dec_h = &cache.dec_steps[top][t].h;
            let mut dalpha = Array2::<S>::zeros((b, t_in));
            for ti in 0..t_in {
                let col = (&dctx * &cache.enc_steps[top][ti].h).sum_axis(Axis(1));
                dalpha.column_mut(ti).assign(&col);
            }
            // softmax backward, rowwise
            let inner = (alpha * &dalpha).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dscores = alpha * &(dalpha - &inner);
            for ti in 0..t_in {
                let a_col = alpha.column(ti).to_owned().insert_axis(Axis(1));
                let ds_col = dscores.column(ti).to_owned().insert_axis(Axis(1));
                d_enc_top[ti] += &(&dctx * &a_col);
                d_enc_top[ti] += &(&(dec_h * &ds_col) * inv_sqrt_h);
                d_dec_top += &(&(&cache.enc_steps[top][ti].h * &ds_col) * inv_sqrt_h);
            }
        } else {
            d_enc_final_top += &dctx;
        }

        // decoder cells, top layer down
        let mut d_from_above = d_dec_top;
        for l in (0..layers).rev() {
            let dh = &d_dec_carry[l] + &d_from_above;
            let x = if l == 0 {
                &cache.dec_emb[t]
            } else {
                &cache.dec_steps[l - 1][t].h
            };
            let h_prev = if t == 0 {
                &cache.dec_h0[l]
            } else {
                &cache.dec_steps[l][t - 1].h
            };
            let (dx, dh_prev) = gru_step_backward(
                &params.decoder[l],
                &mut grad.decoder[l],
                &cache.dec_steps[l][t],
                x,
                h_prev,
                &cache.dec_masks[t],
                &dh,
            );
            d_dec_carry[l] = dh_prev;
            if l == 0 {
                for row in 0..b {
                    let id = cache.dec_tokens[(row, t)] as usize;
                    let mut emb_row = d_emb.row_mut(id);
                    emb_row += &dx.row(row);
                }
            } else {
                d_from_above = dx;
            }
        }
    }

    // decoder initial states are the encoder finals
    let mut d_enc_carry: Vec<Array2<S>> = d_dec_carry;
    d_enc_carry[top] += &d_enc_final_top;

    for t in (0..t_in).rev() {
        let mut d_from_above: Array2<S> = Array2::zeros((b, h_dim));
        for l in (0..layers).rev() {
            let mut dh = &d_enc_carry[l] + &d_from_above;
            if l == top {
                dh += &d_enc_top[t];
            }
            let x = if l == 0 {
                &cache.enc_emb[t]
            } else {
                &cache.enc_steps[l - 1][t].h
            };
            let h_prev = if t == 0 {
                &cache.enc_h0
            } else {
                &cache.enc_steps[l][t - 1].h
            };
            let (dx, dh_prev) = gru_step_backward(
                &params.encoder[l],
                &mut grad.encoder[l],
                &cache.enc_steps[l][t],
                x,
                h_prev,
                &cache.in_masks[t],
                &dh,
            );
            d_enc_carry[l] = dh_prev;
            if l == 0 {
                for row in 0..b {
                    let id = cache.in_tokens[(row, t)] as usize;
                    let mut emb_row = d_emb.row_mut(id);
                    emb_row += &dx.row(row);
                }
            } else {
                d_from_above = dx;
            }
        }
    }

    grad.embedding = d_emb;
    if !grad.all_finite() {
        return Err(ModelError::NonFinite {
            what: "gradient".into(),
        });
    }
    Ok((grad, output))
}

/// Encoded single input, ready for incremental decoding.
pub struct EncodedInput<S: Scalar> {
    /// top-layer encoder states, one row per input position
    enc_top: Array2<S>,
    /// final hidden state per layer
    enc_final: Vec<Array1<S>>,
    len: usize,
}

impl<S: Scalar> EncodedInput<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Incremental decoder state: one hidden vector per layer.
#[derive(Debug, Clone)]
pub struct DecoderState<S: Scalar> {
    hidden: Vec<Array1<S>>,
}

/// Runs the encoder over one input sequence.
pub fn encode<S: Scalar>(
    params: &Parameters<S>,
    input_ids: &[u32],
) -> Result<(EncodedInput<S>, DecoderState<S>), ModelError> {
    let cfg = &params.cfg;
    let len = validate_sequence(input_ids, cfg.vocab_size, cfg.max_positions)?;
    let (h_dim, layers) = (cfg.hidden_dim, cfg.n_layers);
    let mut hidden: Vec<Array2<S>> = (0..layers).map(|_| Array2::zeros((1, h_dim))).collect();
    let mut enc_top = Array2::zeros((len, h_dim));
    for (t, &id) in input_ids.iter().take(len).enumerate() {
        let mut x = gather_rows(&params.embedding, &[id]);
        for l in 0..layers {
            let step = gru_step(&params.encoder[l], &x, &hidden[l]);
            hidden[l] = step.h;
            x = hidden[l].clone();
        }
        enc_top.row_mut(t).assign(&hidden[layers - 1].row(0));
    }
    let enc_final: Vec<Array1<S>> = hidden.iter().map(|h| h.row(0).to_owned()).collect();
    Ok((
        EncodedInput {
            enc_top,
            enc_final: enc_final.clone(),
            len,
        },
        DecoderState { hidden: enc_final },
    ))
}

/// Feeds one token through the decoder; returns next-token logits and the
/// advanced state. Matches the teacher-forced batch path exactly.
pub fn decode_step<S: Scalar>(
    params: &Parameters<S>,
    encoded: &EncodedInput<S>,
    state: &DecoderState<S>,
    token: u32,
) -> Result<(Array1<S>, DecoderState<S>), ModelError> {
    let cfg = &params.cfg;
    if token as usize >= cfg.vocab_size {
        return Err(ModelError::IdOutOfRange {
            id: token,
            vocab: cfg.vocab_size,
        });
    }
    let (h_dim, layers) = (cfg.hidden_dim, cfg.n_layers);
    let mut hidden = Vec::with_capacity(layers);
    let mut x = gather_rows(&params.embedding, &[token]);
    for l in 0..layers {
        let h_prev = state.hidden[l].view().insert_axis(Axis(0)).to_owned();
        let step = gru_step(&params.decoder[l], &x, &h_prev);
        x = step.h.clone();
        hidden.push(step.h.row(0).to_owned());
    }
    let dec_h = hidden[layers - 1].view().insert_axis(Axis(0)).to_owned();
    let ctx = if cfg.attention {
        let inv_sqrt_h = S::of_f64(1.0 / (h_dim as f64).sqrt());
        let mut scores = encoded.enc_top.dot(&hidden[layers - 1]) * inv_sqrt_h;
        // softmax over input positions
        let mut max = S::neg_infinity();
        for &v in scores.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::zero();
        for v in scores.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in scores.iter_mut() {
            *v = *v / sum;
        }
        let ctx = encoded.enc_top.t().dot(&scores);
        ctx.insert_axis(Axis(0))
    } else {
        encoded.enc_final[layers - 1].view().insert_axis(Axis(0)).to_owned()
    };
    let (_, _, logits) = readout(params, &dec_h, &ctx);
    Ok((logits.row(0).to_owned(), DecoderState { hidden }))
}

#[cfg(test)]
mod tests {
    use super::super::{init, shift_target, LgVariant, ModelConfig};
    use super::*;

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            embed_dim: 6,
            hidden_dim: 8,
            n_layers: 2,
            max_positions: 24,
            seed,
            float_width: 64,
            ..ModelConfig::default()
        }
    }

    fn batch() -> Batch {
        Batch {
            ids: vec!["a".into(), "b".into()],
            input_ids: vec![vec![10, 11, 3, 12], vec![11, 13]],
            target_ids: vec![vec![12, 10, 2], vec![13, 2]],
            weights: vec![0.9, 0.4],
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let params = init::<f64>(&cfg(3)).unwrap();
        let logits = forward(&params, &[10, 11, 12], &shift_target(&[12, 2])).unwrap();
        assert_eq!(logits.dim(), (2, 16));
        let again = forward(&params, &[10, 11, 12], &shift_target(&[12, 2])).unwrap();
        let bits = |a: &Array2<f64>| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&logits), bits(&again));
    }

    #[test]
    fn softmax_rows_normalize() {
        let params = init::<f64>(&cfg(3)).unwrap();
        let logits = forward(&params, &[10, 11, 12], &shift_target(&[12, 10, 2])).unwrap();
        for row in logits.rows() {
            let lse = row_logsumexp(row);
            let total: f64 = row.iter().map(|&x| (x - lse).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pad_tail_is_inert() {
        let params = init::<f64>(&cfg(3)).unwrap();
        let clean = forward(&params, &[10, 11, 12], &shift_target(&[12, 2])).unwrap();
        let padded = forward(
            &params,
            &[10, 11, 12, PAD_ID, PAD_ID, PAD_ID],
            &shift_target(&[12, 2]),
        )
        .unwrap();
        let bits = |a: &Array2<f64>| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&clean), bits(&padded));
    }

    #[test]
    fn teacher_forcing_is_causal() {
        let params = init::<f64>(&cfg(5)).unwrap();
        let base_target = vec![12, 10, 13, 2];
        let mut poked_target = base_target.clone();
        poked_target[2] = 11; // perturb target position r = 2
        let a = forward(&params, &[10, 11], &shift_target(&base_target)).unwrap();
        let b = forward(&params, &[10, 11], &shift_target(&poked_target)).unwrap();
        for r in 0..=2 {
            let ra: Vec<u64> = a.row(r).iter().map(|x| x.to_bits()).collect();
            let rb: Vec<u64> = b.row(r).iter().map(|x| x.to_bits()).collect();
            assert_eq!(ra, rb, "logits changed at position {r}");
        }
        let last_a: Vec<u64> = a.row(3).iter().map(|x| x.to_bits()).collect();
        let last_b: Vec<u64> = b.row(3).iter().map(|x| x.to_bits()).collect();
        assert_ne!(last_a, last_b, "perturbation should reach later positions");
    }

    #[test]
    fn incremental_decode_matches_teacher_forcing() {
        for attention in [true, false] {
            let mut c = cfg(9);
            c.attention = attention;
            let params = init::<f64>(&c).unwrap();
            let input = [10, 11, 3, 14];
            let target = [12, 10, 13, 2];
            let logits = forward(&params, &input, &shift_target(&target)).unwrap();
            let (encoded, mut state) = encode(&params, &input).unwrap();
            let mut fed = BOS_ID;
            for (t, &next) in target.iter().enumerate() {
                let (step_logits, new_state) =
                    decode_step(&params, &encoded, &state, fed).unwrap();
                for (v, &x) in step_logits.iter().enumerate() {
                    assert!(
                        (x - logits[(t, v)]).abs() < 1e-12,
                        "attention={attention} t={t} v={v}"
                    );
                }
                state = new_state;
                fed = next;
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_spot_check() {
        for variant in [LgVariant::Standard, LgVariant::PaperLiteral] {
            for weighted in [false, true] {
                let params = init::<f64>(&cfg(11)).unwrap();
                let loss_cfg = LossConfig::<f64> {
                    variant,
                    weighted,
                    z: 0.7,
                };
                let (grad, _) = backward(&params, &batch(), &loss_cfg).unwrap();
                let names = ["embedding", "encoder.1.w_h_n", "decoder.0.w_x", "w_combine", "w_out", "decoder.1.b"];
                for name in names {
                    let gview = grad
                        .named_views()
                        .into_iter()
                        .find(|(n, _)| n == name)
                        .unwrap()
                        .1
                        .to_owned();
                    // probe a few coordinates of this tensor
                    for probe in [0usize, gview.len() / 2, gview.len() - 1] {
                        let h = 1e-5;
                        let mut plus = params.clone();
                        let mut minus = params.clone();
                        {
                            let mut views = plus.named_views_mut();
                            let v = views.iter_mut().find(|(n, _)| n == name).unwrap();
                            *v.1.iter_mut().nth(probe).unwrap() += h;
                        }
                        {
                            let mut views = minus.named_views_mut();
                            let v = views.iter_mut().find(|(n, _)| n == name).unwrap();
                            *v.1.iter_mut().nth(probe).unwrap() -= h;
                        }
                        let lp = loss_batch(&plus, &batch(), &loss_cfg).unwrap().batch_loss;
                        let lm = loss_batch(&minus, &batch(), &loss_cfg).unwrap().batch_loss;
                        let numeric = (lp - lm) / (2.0 * h);
                        let analytic = *gview.iter().nth(probe).unwrap();
                        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
                        assert!(
                            (analytic - numeric).abs() / denom < 1e-4,
                            "{name}[{probe}] analytic {analytic} vs numeric {numeric} (variant {variant:?}, weighted {weighted})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let params = init::<f64>(&cfg(13)).unwrap();
        let mut b = batch();
        b.weights = vec![0.0, 0.0];
        let (grad, out) = backward(&params, &b, &LossConfig::weighted(0.5)).unwrap();
        assert_eq!(out.losses[0].weighted_loss, 0.0);
        for (name, view) in grad.named_views() {
            for &g in view.iter() {
                assert_eq!(g, 0.0, "nonzero gradient in {name}");
            }
        }
    }

    #[test]
    fn weighted_gradient_is_scaled_plain_gradient() {
        let params = init::<f64>(&cfg(17)).unwrap();
        let single = Batch {
            ids: vec!["a".into()],
            input_ids: vec![vec![10, 11, 3, 12]],
            target_ids: vec![vec![12, 10, 2]],
            weights: vec![0.6],
        };
        let (g_plain, _) = backward(&params, &single, &LossConfig::plain()).unwrap();
        let (g_weighted, _) = backward(&params, &single, &LossConfig::weighted(0.8)).unwrap();
        let scale = 0.6 / 0.8;
        for ((_, a), (_, b)) in g_plain.named_views().iter().zip(g_weighted.named_views()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x * scale - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let params = init::<f64>(&cfg(19)).unwrap();
        let (g1, o1) = backward(&params, &batch(), &LossConfig::plain()).unwrap();
        let (g2, o2) = backward(&params, &batch(), &LossConfig::plain()).unwrap();
        assert_eq!(o1.batch_loss.to_bits(), o2.batch_loss.to_bits());
        for ((_, a), (_, b)) in g1.named_views().iter().zip(g2.named_views()) {
            let bits_a: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        let params = init::<f64>(&cfg(3)).unwrap();
        assert!(matches!(
            forward(&params, &[99], &shift_target(&[12, 2])),
            Err(ModelError::IdOutOfRange { id: 99, .. })
        ));
        let long: Vec<u32> = vec![10; 40];
        assert!(matches!(
            forward(&params, &long, &shift_target(&[12, 2])),
            Err(ModelError::Overlength { .. })
        ));
        assert!(matches!(
            forward(&params, &[PAD_ID, 10], &shift_target(&[12, 2])),
            Err(ModelError::EmptySequence)
        ));
    }
}
