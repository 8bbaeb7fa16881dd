//! Adaptive-temperature multimodal contrastive learning.
//!
//! Cross-modal (audio→video, video→audio) and intra-modal (video↔video,
//! audio↔audio) margin contrastive losses against FIFO negative queues, with a
//! temperature computed from batch similarity statistics and smoothed over
//! steps by a learned gate.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Grads, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MaclConfig {
    pub d_proj: usize,
    pub margin: f64,
    pub queue_size: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Width of the recurrent history state.
    pub hidden: usize,
    /// Hidden width of the pairwise scoring perceptron.
    pub attn_width: usize,
    /// Hidden width of the smoothing-gate perceptron.
    pub gate_width: usize,
    /// Use only the `nearest_count` most similar eligible queue entries per anchor.
    pub nearest_k: bool,
    pub nearest_count: usize,
    /// When false the temperature stays at `tau0`.
    pub adaptive_tau: bool,
}

impl Default for MaclConfig {
    fn default() -> Self {
        Self {
            d_proj: 16,
            margin: 0.2,
            queue_size: 32,
            tau0: 0.07,
            tau_min: 0.01,
            tau_max: 5.0,
            hidden: 4,
            attn_width: 8,
            gate_width: 8,
            nearest_k: false,
            nearest_count: 16,
            adaptive_tau: true,
        }
    }
}

impl MaclConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("macl: {m}")));
        if self.margin < 0.0 {
            return bad("margin must be >= 0");
        }
        if self.queue_size == 0 {
            return bad("queue size must be >= 1");
        }
        if !(0.0 < self.tau_min && self.tau_min < self.tau_max) {
            return bad("need 0 < tau_min < tau_max");
        }
        if !(self.tau_min..=self.tau_max).contains(&self.tau0) {
            return bad("tau0 must lie in [tau_min, tau_max]");
        }
        if self.d_proj == 0 || self.hidden == 0 || self.attn_width == 0 || self.gate_width == 0 {
            return bad("widths must be positive");
        }
        Ok(())
    }
}

/// Creates projection heads and temperature parameters under `macl.*`.
pub fn init<R: Rng + ?Sized>(p: &mut ParamStore, cfg: &MaclConfig, d_model: usize, rng: &mut R) {
    nn::init_linear(p, "macl.proj_v", d_model, cfg.d_proj, true, rng);
    nn::init_linear(p, "macl.proj_a", d_model, cfg.d_proj, true, rng);
    nn::init_linear(p, "macl.score1", 3, cfg.attn_width, true, rng);
    nn::init_linear(p, "macl.score2", cfg.attn_width, 1, true, rng);
    p.insert("macl.beta", Tensor::zeros(&[3]));
    nn::init_linear(p, "macl.gate1", cfg.hidden + 2, cfg.gate_width, true, rng);
    nn::init_linear(p, "macl.gate2", cfg.gate_width, 1, true, rng);
    nn::init_linear(p, "macl.history", cfg.hidden + 1, cfg.hidden, false, rng);
}

/// L2-normalized projection of pooled features `[B, d] → [B, d_proj]`.
pub fn project(g: &mut Graph, p: &ParamStore, modality: Modality, feats: Var) -> Result<Var> {
    let name = match modality {
        Modality::Video => "macl.proj_v",
        Modality::Audio => "macl.proj_a",
    };
    let z = nn::linear(g, p, name, feats)?;
    nn::l2_normalize(g, z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Audio,
}

/// `S = X Yᵀ`
pub fn similarity_matrix(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let yt = g.transpose(y, 0, 1)?;
    g.matmul(x, yt)
}

/// Distance floor inside `sqrt(2 − 2s)` so the derivative stays bounded at s = 1.
const DIST_EPS: f64 = 1e-4;

/// Softmax over all `B²` entries of the pairwise scores `f(s, s − mean S, ‖x − y‖)`.
///
/// For unit rows `‖x_i − y_j‖ = sqrt(2 − 2 s_ij)`, so the distance is derived from S.
pub fn attention_weights(g: &mut Graph, p: &ParamStore, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("attention_weights", format!("expected [B, B], got {shape:?}")));
    }
    let b = shape[0];
    let mean = g.mean(s)?;
    let centered = g.sub(s, mean)?;
    let d2 = g.scale(s, -2.0)?;
    let d2 = g.offset(d2, 2.0)?;
    let d2 = g.relu(d2)?;
    let dist = nn::sqrt(g, d2, DIST_EPS)?;
    let cols: Vec<Var> = [s, centered, dist]
        .into_iter()
        .map(|v| g.reshape(v, &[b, b, 1]))
        .collect::<Result<_>>()?;
    let feats = g.concat(&cols, 2)?;
    let h = nn::linear(g, p, "macl.score1", feats)?;
    let h = g.tanh(h)?;
    let score = nn::linear(g, p, "macl.score2", h)?;
    let flat = g.reshape(score, &[1, b * b])?;
    let w = g.softmax(flat)?;
    g.reshape(w, &[b, b])
}

/// Temperature statistics and the unsmoothed temperature.
#[derive(Clone, Copy, Debug)]
pub struct TauNew {
    /// `[3]`: variance of S, weighted absolute third moment, entropy of W.
    pub phi: Var,
    pub tau_new: Var,
}

/// `τ_new = clamp(τ0 · exp(Σ β_k φ_k), τ_min, τ_max)`
pub fn compute_tau(g: &mut Graph, p: &ParamStore, cfg: &MaclConfig, s: Var, w: Var) -> Result<TauNew> {
    let var = g.variance(s)?;
    let mean = g.mean(s)?;
    let c = g.sub(s, mean)?;
    let a = nn::abs(g, c)?;
    let a2 = g.mul(a, a)?;
    let a3 = g.mul(a2, a)?;
    let wa3 = g.mul(w, a3)?;
    let skew = g.sum(wa3)?;
    let lw = g.log(w)?;
    let wlw = g.mul(w, lw)?;
    let ent = g.sum(wlw)?;
    let ent = g.neg(ent)?;
    let parts: Vec<Var> = [var, skew, ent]
        .into_iter()
        .map(|v| g.reshape(v, &[1]))
        .collect::<Result<_>>()?;
    let phi = g.concat(&parts, 0)?;
    let beta = g.param(p, "macl.beta")?;
    let bp = g.mul(beta, phi)?;
    let z = g.sum(bp)?;
    let e = g.exp(z)?;
    let t = g.scale(e, cfg.tau0)?;
    let tau_new = nn::clamp(g, t, cfg.tau_min, cfg.tau_max)?;
    Ok(TauNew { phi, tau_new })
}

/// Recorded history feeding the smoothing gate. All fields enter the graph as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureState {
    /// τ of the previous step.
    pub tau: f64,
    /// Change of τ at the previous step.
    pub dtau: f64,
    /// ∂L/∂τ at the previous step.
    pub grad: f64,
    /// History state two steps back; the previous step's state is recomputed
    /// from it inside the graph so the history map receives gradient.
    pub h_hist: Vec<f64>,
}

impl TemperatureState {
    pub fn new(cfg: &MaclConfig) -> Self {
        Self {
            tau: cfg.tau0,
            dtau: 0.0,
            grad: 0.0,
            h_hist: vec![0.0; cfg.hidden],
        }
    }

    /// Records the outcome of a step: τ_t, its gradient and the history state.
    pub fn advance(&mut self, g: &Graph, grads: &Grads, out: &Smoothed) {
        let tau = g.item(out.tau);
        self.dtau = tau - self.tau;
        self.tau = tau;
        self.grad = grads.get(out.tau).map(Tensor::item).unwrap_or(0.0);
        self.h_hist = g.value(out.hidden).data().to_vec();
    }
}

/// Output of [`gate_and_smooth`].
#[derive(Clone, Copy, Debug)]
pub struct Smoothed {
    /// Smoothed temperature τ_t (scalar).
    pub tau: Var,
    /// Gate γ_t (scalar).
    pub gamma: Var,
    /// History state h_{t−1} `[hidden]`.
    pub hidden: Var,
}

/// `γ = σ(MLP([h_{t−1}, Δτ_{t−1}, g_{t−1}]))`, `τ_t = γ τ_{t−1} + (1 − γ) τ_new`.
///
/// The previous gradient enters through `g / (1 + |g|)` so that large
/// gradients early in training do not pin the gate at 0 or 1.
pub fn gate_and_smooth(g: &mut Graph, p: &ParamStore, state: &TemperatureState, tau_new: Var) -> Result<Smoothed> {
    let hdim = state.h_hist.len();
    let mut hin = state.h_hist.clone();
    hin.push(state.tau);
    let hin = g.constant(Tensor::new(vec![1, hdim + 1], hin)?);
    let h = nn::linear(g, p, "macl.history", hin)?;
    let h = g.tanh(h)?;
    let stats = g.constant(Tensor::new(
        vec![1, 2],
        vec![state.dtau, state.grad / (1.0 + state.grad.abs())],
    )?);
    let gin = g.concat(&[h, stats], 1)?;
    let z = nn::linear(g, p, "macl.gate1", gin)?;
    let z = g.tanh(z)?;
    let z = nn::linear(g, p, "macl.gate2", z)?;
    let gamma = g.sigmoid(z)?;
    let gamma = g.reshape(gamma, &[])?;
    let tau = smooth(g, gamma, state.tau, tau_new)?;
    let hidden = g.reshape(h, &[hdim])?;
    Ok(Smoothed { tau, gamma, hidden })
}

/// `γ τ_prev + (1 − γ) τ_new`
pub fn smooth(g: &mut Graph, gamma: Var, tau_prev: f64, tau_new: Var) -> Result<Var> {
    let keep = g.scale(gamma, tau_prev)?;
    let one_minus = g.scale(gamma, -1.0)?;
    let one_minus = g.offset(one_minus, 1.0)?;
    let fresh = g.mul(one_minus, tau_new)?;
    g.add(keep, fresh)
}

/// Queue entry metadata used to decide which entries are valid negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tag {
    pub identity: usize,
    pub class: usize,
}

/// FIFO ring buffer of detached unit embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<(Vec<f64>, Tag)>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[f64], Tag)> {
        self.entries.iter().map(|(e, t)| (e.as_slice(), *t))
    }

    /// Appends the rows of `emb: [B, dim]`, evicting the oldest entries.
    pub fn push(&mut self, emb: &Tensor, tags: &[Tag]) -> Result<()> {
        if emb.rank() != 2 || emb.shape()[1] != self.dim || emb.shape()[0] != tags.len() {
            return Err(Error::shape(
                "queue_push",
                format!("embeddings {:?} with {} tags into dim {}", emb.shape(), tags.len(), self.dim),
            ));
        }
        for (i, tag) in tags.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((emb.row(i).into_data(), *tag));
        }
        Ok(())
    }

    /// Embeddings `[K, dim]`, or `None` when empty.
    pub fn embeddings(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flat_map(|(e, _)| e.iter().copied()).collect();
        Some(Tensor::from_parts(vec![self.entries.len(), self.dim], data))
    }

    /// `[B, K]` 0/1 mask of entries whose (identity, class) differs from each anchor's.
    pub fn eligibility(&self, anchors: &[Tag]) -> Tensor {
        let k = self.entries.len();
        let mut m = vec![0.0; anchors.len() * k];
        for (i, a) in anchors.iter().enumerate() {
            for (j, (_, t)) in self.entries.iter().enumerate() {
                if t != a {
                    m[i * k + j] = 1.0;
                }
            }
        }
        Tensor::from_parts(vec![anchors.len(), k], m)
    }
}

/// Negatives for one contrastive direction.
pub struct Negatives {
    /// `[K, d]`
    pub emb: Tensor,
    /// `[B, K]` 0/1
    pub mask: Tensor,
}

impl Negatives {
    /// Eligible queue entries for `anchors`, optionally restricted to the
    /// `nearest` most similar per anchor (similarity against `anchor_emb`).
    pub fn from_queue(
        queue: &NegativeQueue,
        anchors: &[Tag],
        anchor_emb: &Tensor,
        nearest: Option<usize>,
    ) -> Option<Self> {
        let emb = queue.embeddings()?;
        let mut mask = queue.eligibility(anchors);
        if let Some(n) = nearest {
            let k = queue.len();
            for i in 0..anchors.len() {
                let a = anchor_emb.row(i);
                let mut scored: Vec<(f64, usize)> = (0..k)
                    .filter(|&j| mask.data()[i * k + j] > 0.0)
                    .map(|j| (a.dot(&emb.row(j)), j))
                    .collect();
                scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                for &(_, j) in scored.iter().skip(n) {
                    mask.data_mut()[i * k + j] = 0.0;
                }
            }
        }
        Some(Self { emb, mask })
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

/// Margin contrastive loss of `anchors` against index-aligned `positives`:
///
/// `−(1/B) Σ_i log[e^{s_ii/τ} / (e^{s_ii/τ} + Σ_k mask_ik e^{(s_ik − m)/τ})]`
///
/// where `s_ik` are similarities to the negatives. With no negatives the loss is 0.
pub fn contrastive_loss(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    negatives: Option<&Negatives>,
    tau: Var,
    margin: f64,
) -> Result<Var> {
    let (sa, sp) = (g.shape(anchors).to_vec(), g.shape(positives).to_vec());
    if sa.len() != 2 || sa != sp {
        return Err(Error::shape("contrastive_loss", format!("anchors {sa:?}, positives {sp:?}")));
    }
    let b = sa[0];
    let prod = g.mul(anchors, positives)?;
    let pos = g.sum_axis(prod, 1)?;
    let pos = g.div(pos, tau)?;
    let mut denom = g.exp(pos)?;
    if let Some(neg) = negatives {
        if neg.emb.shape()[1] != sa[1] || neg.mask.shape() != [b, neg.emb.shape()[0]] {
            return Err(Error::shape(
                "contrastive_loss",
                format!("negatives {:?} / mask {:?} for anchors {sa:?}", neg.emb.shape(), neg.mask.shape()),
            ));
        }
        let qt = g.constant(transpose2(&neg.emb));
        let s = g.matmul(anchors, qt)?;
        let s = g.offset(s, -margin)?;
        let s = g.div(s, tau)?;
        let e = g.exp(s)?;
        let mask = g.constant(neg.mask.clone());
        let e = g.mul(e, mask)?;
        let total = g.sum_axis(e, 1)?;
        denom = g.add(denom, total)?;
    }
    let ld = g.log(denom)?;
    let per = g.sub(ld, pos)?;
    g.mean(per)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Which contrastive components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub cross: bool,
    pub intra: bool,
}

/// Embeddings and queues for one step.
pub struct StepInputs<'a> {
    /// Unit embeddings `[B, d_proj]` of the first view.
    pub x_v: Var,
    pub x_a: Var,
    /// Second augmented view, required when intra-modal losses are on.
    pub x_v2: Option<Var>,
    pub x_a2: Option<Var>,
    pub tags: &'a [Tag],
    pub queue_v: &'a NegativeQueue,
    pub queue_a: &'a NegativeQueue,
}

/// Component losses, their mean and the temperature path.
#[derive(Clone, Debug)]
pub struct MaclOutput {
    pub l_av: Option<Var>,
    pub l_va: Option<Var>,
    pub l_vv: Option<Var>,
    pub l_aa: Option<Var>,
    /// Mean of the active components.
    pub l_c: Var,
    pub similarity: Var,
    pub weights: Var,
    pub tau_new: TauNew,
    pub smoothed: Smoothed,
    /// Number of eligible negative pairs per direction (av, va, vv, aa).
    pub negatives: [usize; 4],
}

/// Runs the temperature machinery and every active contrastive loss.
pub fn forward(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &MaclConfig,
    state: &TemperatureState,
    inp: &StepInputs,
    comps: Components,
) -> Result<MaclOutput> {
    let s = similarity_matrix(g, inp.x_a, inp.x_v)?;
    let w = attention_weights(g, p, s)?;
    let tau_new = compute_tau(g, p, cfg, s, w)?;
    let smoothed = if cfg.adaptive_tau {
        gate_and_smooth(g, p, state, tau_new.tau_new)?
    } else {
        let tau = g.scalar(cfg.tau0);
        let gamma = g.scalar(1.0);
        let hidden = g.constant(Tensor::from_vec(state.h_hist.clone()));
        Smoothed { tau, gamma, hidden }
    };
    let tau = smoothed.tau;
    let nearest = cfg.nearest_k.then_some(cfg.nearest_count);
    let mut counts = [0usize; 4];
    let mut run = |g: &mut Graph, idx: usize, anchors: Var, positives: Var, queue: &NegativeQueue| -> Result<Var> {
        let a_val = g.value(anchors).clone();
        let neg = Negatives::from_queue(queue, inp.tags, &a_val, nearest);
        counts[idx] = neg.as_ref().map_or(0, Negatives::count);
        contrastive_loss(g, anchors, positives, neg.as_ref(), tau, cfg.margin)
    };
    let (mut l_av, mut l_va, mut l_vv, mut l_aa) = (None, None, None, None);
    if comps.cross {
        l_av = Some(run(g, 0, inp.x_a, inp.x_v, inp.queue_v)?);
        l_va = Some(run(g, 1, inp.x_v, inp.x_a, inp.queue_a)?);
    }
    if comps.intra {
        let (v2, a2) = inp
            .x_v2
            .zip(inp.x_a2)
            .ok_or_else(|| Error::invalid("intra-modal losses need second views"))?;
        l_vv = Some(run(g, 2, inp.x_v, v2, inp.queue_v)?);
        l_aa = Some(run(g, 3, inp.x_a, a2, inp.queue_a)?);
    }
    let active: Vec<Var> = [l_av, l_va, l_vv, l_aa].into_iter().flatten().collect();
    let l_c = if active.is_empty() {
        g.scalar(0.0)
    } else {
        let parts: Vec<Var> = active.iter().map(|&v| g.reshape(v, &[1])).collect::<Result<_>>()?;
        let cat = g.concat(&parts, 0)?;
        
        g.mean(cat)?
    };
    Ok(MaclOutput {
        l_av,
        l_va,
        l_vv,
        l_aa,
        l_c,
        similarity: s,
        weights: w,
        tau_new,
        smoothed,
        negatives: counts,
    })
}
