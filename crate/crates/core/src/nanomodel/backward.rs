// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients of the next-token cross-entropy.

use ndarray::{s, Array2, Axis};

use super::forward::{BlockTrace, Trace};
use super::ops::{gelu_grad, rms_norm_backward, softmax_f64};
use super::{Block, ModelParams};
use crate::error::{Result, SteerError};

/// Mean cross-entropy of predicting `tokens[p + 1]` at each position in
/// `loss_positions`, and its gradient.
pub(crate) fn loss_and_grad(
    model: &ModelParams,
    tokens: &[u32],
    loss_positions: &[usize],
) -> Result<(f64, ModelParams)> {
    if loss_positions.iter().any(|&p| p + 1 >= tokens.len()) || loss_positions.is_empty() {
        return Err(SteerError::Input("loss positions must precede the final token".into()));
    }
    let trace = model.forward_trace(tokens)?;
    let mut grad = ModelParams::zeros(model.config)?;
    let n = loss_positions.len() as f64;
    let mut dlogits = Array2::<f32>::zeros(trace.logits.raw_dim());
    let mut loss = 0.0f64;
    for &p in loss_positions {
        let target = tokens[p + 1] as usize;
        let probs = softmax_f64(trace.logits.row(p).as_slice().expect("contiguous"));
        loss -= probs[target].max(f64::MIN_POSITIVE).ln();
        let mut row = dlogits.row_mut(p);
        for (v, pv) in probs.iter().enumerate() {
            let onehot = if v == target { 1.0 } else { 0.0 };
            row[v] = ((pv - onehot) / n) as f32;
        }
    }
    backward(model, &trace, &dlogits, &mut grad);
    Ok((loss / n, grad))
}

/// Mean cross-entropy only (no gradient).
pub(crate) fn loss_only(model: &ModelParams, tokens: &[u32], loss_positions: &[usize]) -> Result<f64> {
    let logits = model.forward(tokens, &super::Intervention::none())?.logits;
    let mut loss = 0.0;
    for &p in loss_positions {
        let probs = softmax_f64(logits.row(p).as_slice().expect("contiguous"));
        loss -= probs[tokens[p + 1] as usize].max(f64::MIN_POSITIVE).ln();
    }
    Ok(loss / loss_positions.len() as f64)
}

fn backward(model: &ModelParams, tr: &Trace, dlogits: &Array2<f32>, grad: &mut ModelParams) {
    let cfg = model.config;
    grad.unembed += &dlogits.t().dot(&tr.normed);
    let dnormed = dlogits.dot(&model.unembed);
    let mut dx = if cfg.final_norm {
        rms_norm_backward(&tr.final_in, &tr.inv_f, &model.ln_f, &dnormed, &mut grad.ln_f)
    } else {
        dnormed
    };
    for l in (0..cfg.n_layers).rev() {
        if let (Some(tap), Some(tc), Some(tt)) = (&model.concept, cfg.concept, &tr.tap) {
            if tc.layer == l {
                let gtap = grad.concept.as_mut().expect("gradient mirrors model");
                let mut dw = dx.dot(&tap.e.t());
                dw.mapv_inplace(|v| v * tc.mix);
                let mut scaled_w = tt.weights.clone();
                scaled_w.mapv_inplace(|v| v * tc.mix);
                gtap.e += &scaled_w.t().dot(&dx);
                let dz = &dw * &tt.weights.mapv(|w| w * (1.0 - w));
                gtap.w += &dz.t().dot(&tt.x);
                gtap.b += &dz.sum_axis(Axis(0));
                dx += &dz.dot(&tap.w);
            }
        }
        dx = block_backward(&model.blocks[l], &tr.blocks[l], dx, cfg.n_heads, &mut grad.blocks[l]);
    }
    for (t, &tok) in tr.tokens.iter().enumerate() {
        let row = dx.row(t);
        let mut e = grad.tok_emb.row_mut(tok as usize);
        e += &row;
        let mut pe = grad.pos_emb.row_mut(t);
        pe += &row;
    }
}

/// Given the gradient at the block output, accumulates parameter gradients
/// and returns the gradient at the block input.
fn block_backward(b: &Block, bt: &BlockTrace, dout: Array2<f32>, n_heads: usize, g: &mut Block) -> Array2<f32> {
    // MLP: out = x1 + gelu(r2 w1 + b1) w2 + b2
    g.w2 += &bt.g.t().dot(&dout);
    g.b2 += &dout.sum_axis(Axis(0));
    let mut du = dout.dot(&b.w2.t());
    du.zip_mut_with(&bt.u, |d, &u| *d *= gelu_grad(u));
    g.w1 += &bt.r2.t().dot(&du);
    g.b1 += &du.sum_axis(Axis(0));
    let dr2 = du.dot(&b.w1.t());
    let dx1 = &dout + &rms_norm_backward(&bt.x1, &bt.inv2, &b.ln2, &dr2, &mut g.ln2);

    // Attention: x1 = x + att wo
    g.wo += &bt.att.t().dot(&dx1);
    let datt = dx1.dot(&b.wo.t());
    let (t_len, d) = bt.q.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dq = Array2::<f32>::zeros((t_len, d));
    let mut dk = Array2::<f32>::zeros((t_len, d));
    let mut dv = Array2::<f32>::zeros((t_len, d));
    for (h, p) in bt.probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (qh, kh, vh) = (bt.q.slice(cols), bt.k.slice(cols), bt.v.slice(cols));
        let da = datt.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&da));
        let dp = da.dot(&vh.t());
        let mut ds = Array2::<f32>::zeros((t_len, t_len));
        for i in 0..t_len {
            let mut dot = 0.0f32;
            for j in 0..=i {
                dot += p[(i, j)] * dp[(i, j)];
            }
            for j in 0..=i {
                ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&kh));
        dk.slice_mut(cols).assign(&ds.t().dot(&qh));
    }
    g.wq += &bt.r1.t().dot(&dq);
    g.wk += &bt.r1.t().dot(&dk);
    g.wv += &bt.r1.t().dot(&dv);
    let dr1 = dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t());
    &dx1 + &rms_norm_backward(&bt.x, &bt.inv1, &b.ln1, &dr1, &mut g.ln1)
}
