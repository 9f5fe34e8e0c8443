// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass with hook points and a trace for backpropagation.

use ndarray::{s, Array1, Array2, Axis};

use super::generate::{HookKind, HookPosition, HookSpec};
use super::ops::{final_norm_row, gelu, rms_norm_rows, unembed_row};
use super::{Block, ModelParams};
use crate::concepts::{concept_forward, known_features, steer_known, OverrideMap};
use crate::error::{Result, SteerError};

/// Edits applied during a forward pass: residual hooks and concept
/// overrides (applied to every position).
#[derive(Debug, Clone, Copy, Default)]
pub struct Intervention<'a> {
    pub hooks: &'a [HookSpec],
    pub concept_overrides: Option<&'a OverrideMap>,
}

impl<'a> Intervention<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn hooks(hooks: &'a [HookSpec]) -> Self {
        Self {
            hooks,
            concept_overrides: None,
        }
    }

    pub fn overrides(overrides: &'a OverrideMap) -> Self {
        Self {
            hooks: &[],
            concept_overrides: Some(overrides),
        }
    }

    fn is_empty(&self) -> bool {
        self.concept_overrides.is_none() && self.hooks.iter().all(|h| matches!(h.kind, HookKind::None))
    }
}

/// Residual stream after every block (`T × d_model` each) and the logits
/// at every position (`T × vocab`).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Vec<Array2<f32>>,
    pub logits: Array2<f32>,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> Vec<f32> {
        self.logits.row(self.logits.nrows() - 1).to_vec()
    }
}

pub(crate) struct BlockTrace {
    pub x: Array2<f32>,
    pub inv1: Vec<f32>,
    pub r1: Array2<f32>,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    /// Attention probabilities per head, `T × T` (upper triangle zero).
    pub probs: Vec<Array2<f32>>,
    pub att: Array2<f32>,
    pub x1: Array2<f32>,
    pub inv2: Vec<f32>,
    pub r2: Array2<f32>,
    pub u: Array2<f32>,
    pub g: Array2<f32>,
}

pub(crate) struct TapTrace {
    pub x: Array2<f32>,
    pub weights: Array2<f32>,
}

pub(crate) struct Trace {
    pub tokens: Vec<u32>,
    pub blocks: Vec<BlockTrace>,
    pub tap: Option<TapTrace>,
    pub final_in: Array2<f32>,
    pub inv_f: Vec<f32>,
    pub normed: Array2<f32>,
    pub logits: Array2<f32>,
}

impl ModelParams {
    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(SteerError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(SteerError::Input(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(SteerError::Input(format!(
                "unknown token id {bad} (vocab {})",
                self.config.vocab
            )));
        }
        Ok(())
    }

    pub(crate) fn check_intervention(&self, iv: &Intervention<'_>) -> Result<()> {
        for hook in iv.hooks {
            hook.validate(&self.config)?;
        }
        if let Some(ov) = iv.concept_overrides {
            let tap = self
                .concept
                .as_ref()
                .ok_or_else(|| SteerError::Config("concept overrides require a model with a concept tap".into()))?;
            ov.validate(tap.n_concepts())?;
        }
        Ok(())
    }

    /// Runs the model on `tokens` under `iv`.
    pub fn forward(&self, tokens: &[u32], iv: &Intervention<'_>) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        self.check_intervention(iv)?;
        let (hidden, logits) = self.run(tokens, iv, None)?;
        Ok(ForwardOutput { hidden, logits })
    }

    /// Unhooked forward pass that keeps every intermediate for backprop.
    pub(crate) fn forward_trace(&self, tokens: &[u32]) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let mut trace = Trace {
            tokens: tokens.to_vec(),
            blocks: Vec::with_capacity(self.blocks.len()),
            tap: None,
            final_in: Array2::zeros((0, 0)),
            inv_f: Vec::new(),
            normed: Array2::zeros((0, 0)),
            logits: Array2::zeros((0, 0)),
        };
        let (_, logits) = self.run(tokens, &Intervention::none(), Some(&mut trace))?;
        trace.logits = logits;
        Ok(trace)
    }

    fn embed(&self, tokens: &[u32]) -> Array2<f32> {
        let d = self.config.d_model;
        let mut x = Array2::zeros((tokens.len(), d));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.tok_emb.row(tok as usize));
            row += &self.pos_emb.row(t);
        }
        x
    }

    fn run(
        &self,
        tokens: &[u32],
        iv: &Intervention<'_>,
        mut trace: Option<&mut Trace>,
    ) -> Result<(Vec<Array2<f32>>, Array2<f32>)> {
        let cfg = &self.config;
        let hooked = !iv.is_empty();
        let mut x = self.embed(tokens);
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let bt = block_forward(block, x, cfg.n_heads);
            x = &bt.x1 + &mlp_out(block, &bt.g);
            if let Some(tr) = trace.as_deref_mut() {
                tr.blocks.push(bt);
            }
            if let (Some(tap), Some(tc)) = (&self.concept, cfg.concept) {
                if tc.layer == l {
                    let mut weights = Array2::zeros((x.nrows(), tap.n_concepts()));
                    let mut out = x.clone();
                    for t in 0..x.nrows() {
                        let row = x.row(t);
                        let mut w = concept_forward(row.as_slice().expect("contiguous row"), tap)?;
                        if let Some(ov) = iv.concept_overrides {
                            w = steer_known(&w, ov)?;
                        }
                        let f = known_features(&w, tap)?;
                        out.row_mut(t).iter_mut().zip(&f).for_each(|(o, &fi)| *o += tc.mix * fi);
                        weights.row_mut(t).assign(&Array1::from(w));
                    }
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.tap = Some(TapTrace { x: x.clone(), weights });
                    }
                    x = out;
                }
            }
            if hooked {
                apply_hooks(l, &mut x, iv.hooks)?;
            }
            hidden.push(x.clone());
        }
        let mut logits = Array2::zeros((x.nrows(), cfg.vocab));
        let mut normed = Array2::zeros(x.raw_dim());
        for t in 0..x.nrows() {
            let n = final_norm_row(self, x.row(t));
            logits.row_mut(t).assign(&Array1::from(unembed_row(self, &n)));
            normed.row_mut(t).assign(&Array1::from(n));
        }
        if let Some(tr) = trace {
            tr.inv_f = x.rows().into_iter().map(|r| super::ops::rms_inv(r)).collect();
            tr.final_in = x;
            tr.normed = normed;
        }
        Ok((hidden, logits))
    }
}

/// Attention half of a block plus the MLP pre-activations.
fn block_forward(b: &Block, x: Array2<f32>, n_heads: usize) -> BlockTrace {
    let (t_len, d) = x.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let (r1, inv1) = rms_norm_rows(&x, &b.ln1);
    let q = r1.dot(&b.wq);
    let k = r1.dot(&b.wk);
    let v = r1.dot(&b.wv);
    let mut att = Array2::zeros((t_len, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut p = Array2::zeros((t_len, t_len));
        for i in 0..t_len {
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let sc = qh.row(i).dot(&kh.row(j)) * scale;
                p[(i, j)] = sc;
                max = max.max(sc);
            }
            let mut total = 0.0f32;
            for j in 0..=i {
                let e = (p[(i, j)] - max).exp();
                p[(i, j)] = e;
                total += e;
            }
            for j in 0..=i {
                p[(i, j)] /= total;
            }
        }
        att.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    let x1 = &x + &att.dot(&b.wo);
    let (r2, inv2) = rms_norm_rows(&x1, &b.ln2);
    let mut u = r2.dot(&b.w1);
    u += &b.b1.view().insert_axis(Axis(0));
    let g = u.mapv(gelu);
    BlockTrace {
        x,
        inv1,
        r1,
        q,
        k,
        v,
        probs,
        att,
        x1,
        inv2,
        r2,
        u,
        g,
    }
}

fn mlp_out(b: &Block, g: &Array2<f32>) -> Array2<f32> {
    let mut y = g.dot(&b.w2);
    y += &b.b2.view().insert_axis(Axis(0));
    y
}

fn covers(position: HookPosition, t: usize, t_len: usize) -> bool {
    match position {
        HookPosition::AllTokens => true,
        HookPosition::LastToken => t + 1 == t_len,
    }
}

/// SAE substitutions first (in hook order), then the summed direction edits.
fn apply_hooks(layer: usize, x: &mut Array2<f32>, hooks: &[HookSpec]) -> Result<()> {
    let t_len = x.nrows();
    for hook in hooks.iter().filter(|h| h.layer == layer) {
        if let HookKind::SaeSubstitute { sae, plan } = &hook.kind {
            for t in (0..t_len).filter(|&t| covers(hook.position, t, t_len)) {
                let row = x.row(t).to_vec();
                let new = sae.substitute(&row, plan)?;
                x.row_mut(t).assign(&Array1::from(new));
            }
        }
    }
    let adds: Vec<&HookSpec> = hooks
        .iter()
        .filter(|h| h.layer == layer && matches!(h.kind, HookKind::AddDirection { .. }))
        .collect();
    if adds.is_empty() {
        return Ok(());
    }
    let d = x.ncols();
    for t in 0..t_len {
        let mut delta = vec![0.0f32; d];
        for hook in adds.iter().filter(|h| covers(h.position, t, t_len)) {
            if let HookKind::AddDirection { vector, alpha } = &hook.kind {
                delta.iter_mut().zip(vector).for_each(|(di, &vi)| *di += alpha * vi);
            }
        }
        for (xi, &di) in x.row_mut(t).iter_mut().zip(&delta) {
            if di != 0.0 {
                *xi += di;
            }
        }
    }
    Ok(())
}
