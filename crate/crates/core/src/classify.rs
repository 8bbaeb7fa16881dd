//! Joint audio-video token attention, the sample-level head and the
//! per-modality frame-level heads with their losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::macl::Modality;
use crate::nn;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyConfig {
    pub heads: usize,
    pub dropout: f64,
    /// Hidden width of the frame heads.
    pub frame_hidden: usize,
    /// Weight of the contrastive terms in both objectives.
    pub eta_c: f64,
    /// Extra sample heads on each modality's pooled tokens.
    pub per_modality_sample_heads: bool,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            dropout: 0.1,
            frame_hidden: 16,
            eta_c: 1.0,
            per_modality_sample_heads: false,
        }
    }
}

impl ClassifyConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("classify: {m}")));
        if self.heads == 0 || !d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {d_model} not divisible by {} heads", self.heads));
        }
        if d_model < 4 {
            return bad("d_model must be at least 4 for the reduction head".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if self.eta_c < 0.0 {
            return bad("eta_c must be >= 0".into());
        }
        Ok(())
    }
}

fn init_sample_head<R: Rng + ?Sized>(p: &mut ParamStore, buffers: &mut ParamStore, name: &str, d: usize, rng: &mut R) {
    nn::init_linear(p, &format!("{name}.l1"), d, d / 2, true, rng);
    nn::init_batch_norm(p, buffers, &format!("{name}.bn1"), d / 2);
    nn::init_linear(p, &format!("{name}.l2"), d / 2, d / 4, true, rng);
    nn::init_batch_norm(p, buffers, &format!("{name}.bn2"), d / 4);
    nn::init_linear(p, &format!("{name}.out"), d / 4, 1, true, rng);
}

/// Creates joint attention, sample head (`head.*`) and frame heads
/// (`frame_v.*`, `frame_a.*`) for lattices with `channels` channels.
pub fn init<R: Rng + ?Sized>(
    p: &mut ParamStore,
    buffers: &mut ParamStore,
    cfg: &ClassifyConfig,
    d_model: usize,
    channels: usize,
    rng: &mut R,
) {
    nn::init_mha(p, "rfmf", d_model, rng);
    init_sample_head(p, buffers, "head", d_model, rng);
    if cfg.per_modality_sample_heads {
        init_sample_head(p, buffers, "head_v", d_model, rng);
        init_sample_head(p, buffers, "head_a", d_model, rng);
    }
    for name in ["frame_v", "frame_a"] {
        nn::init_linear(p, &format!("{name}.l1"), channels, cfg.frame_hidden, true, rng);
        nn::init_linear(p, &format!("{name}.l2"), cfg.frame_hidden, 1, true, rng);
    }
}

/// Stacks audio then video tokens (`[B, Ta, d]`, `[B, Tv, d]`) and applies
/// multi-head self-attention, giving `M: [B, Ta + Tv, d]` and the weights.
pub fn rfmf(g: &mut Graph, p: &ParamStore, cfg: &ClassifyConfig, audio: Var, video: Var) -> Result<(Var, Var)> {
    let tokens = g.concat(&[audio, video], 1)?;
    nn::mha(g, p, "rfmf", tokens, cfg.heads)
}

/// Mutable state needed by heads with batch norm and dropout.
pub struct HeadMode<'a, R: Rng + ?Sized> {
    pub train: bool,
    pub buffers: Option<&'a mut ParamStore>,
    pub rng: &'a mut R,
}

/// Progressive-reduction head on pooled features `[B, d]`, giving probabilities `[B]`.
pub fn sample_head<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &ParamStore,
    name: &str,
    cfg: &ClassifyConfig,
    pooled: Var,
    mode: &mut HeadMode<R>,
) -> Result<Var> {
    let b = g.shape(pooled)[0];
    let mut h = pooled;
    for layer in 1..=2 {
        h = nn::linear(g, p, &format!("{name}.l{layer}"), h)?;
        h = nn::batch_norm(g, p, mode.buffers.as_deref_mut(), &format!("{name}.bn{layer}"), h, mode.train)?;
        h = g.relu(h)?;
        h = nn::dropout(g, h, cfg.dropout, mode.train, mode.rng)?;
    }
    let z = nn::linear(g, p, &format!("{name}.out"), h)?;
    let prob = g.sigmoid(z)?;
    g.reshape(prob, &[b])
}

/// Sample probability from the joint matrix `M: [B, N, d]` (mean over tokens).
pub fn sample_prob<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &ClassifyConfig,
    m: Var,
    mode: &mut HeadMode<R>,
) -> Result<Var> {
    let pooled = g.mean_axis(m, 1)?;
    sample_head(g, p, "head", cfg, pooled, mode)
}

/// Mean binary cross-entropy of probabilities `[B]` against labels `[B]`.
pub fn sample_loss(g: &mut Graph, prob: Var, labels: &[f64]) -> Result<Var> {
    let b = g.shape(prob).iter().product::<usize>();
    if labels.len() != b {
        return Err(Error::shape("sample_loss", format!("{b} predictions, {} labels", labels.len())));
    }
    let y = g.constant(Tensor::from_vec(labels.to_vec()));
    let prob = g.reshape(prob, &[b])?;
    nn::bce(g, prob, y)
}

/// Per-frame probabilities `[B, T]` from frame features `[B, T, C]`.
pub fn frame_prob(g: &mut Graph, p: &ParamStore, modality: Modality, feats: Var) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("frame_prob", format!("expected [B, T, C], got {s:?}")));
    }
    let name = match modality {
        Modality::Video => "frame_v",
        Modality::Audio => "frame_a",
    };
    let h = nn::linear(g, p, &format!("{name}.l1"), feats)?;
    let h = g.relu(h)?;
    let z = nn::linear(g, p, &format!("{name}.l2"), h)?;
    let prob = g.sigmoid(z)?;
    g.reshape(prob, &[s[0], s[1]])
}

/// Mean BCE over frames with known labels. Labels are 0 or 1; negative
/// entries mark frames without a label and are skipped.
pub fn frame_loss(g: &mut Graph, prob: Var, labels: &Tensor) -> Result<Var> {
    if g.shape(prob) != labels.shape() {
        return Err(Error::shape(
            "frame_loss",
            format!("predictions {:?}, labels {:?}", g.shape(prob), labels.shape()),
        ));
    }
    let known = labels.data().iter().filter(|&&y| y >= 0.0).count();
    if known == 0 {
        return Err(Error::invalid("every frame label is missing"));
    }
    if known == labels.len() {
        let y = g.constant(labels.clone());
        return nn::bce(g, prob, y);
    }
    let mask = labels.map(|y| if y >= 0.0 { 1.0 } else { 0.0 });
    let y = g.constant(labels.map(|y| y.max(0.0)));
    let p = nn::clamp(g, prob, nn::PROB_CLAMP, 1.0 - nn::PROB_CLAMP)?;
    let lp = g.log(p)?;
    let q = g.neg(p)?;
    let q = g.offset(q, 1.0)?;
    let lq = g.log(q)?;
    let a = g.mul(y, lp)?;
    let ny = g.neg(y)?;
    let ny = g.offset(ny, 1.0)?;
    let b = g.mul(ny, lq)?;
    let terms = g.add(a, b)?;
    let m = g.constant(mask);
    let terms = g.mul(terms, m)?;
    let s = g.sum(terms)?;
    g.scale(s, -1.0 / known as f64)
}

/// Per-frame video features `[B, T, C]` from a lattice `[B, C, T, H, W]` (mean over space).
pub fn video_frame_features(g: &mut Graph, lattice: Var) -> Result<Var> {
    let s = g.shape(lattice).to_vec();
    if s.len() != 5 {
        return Err(Error::shape("video_frame_features", format!("expected rank 5, got {s:?}")));
    }
    let r = g.reshape(lattice, &[s[0], s[1], s[2], s[3] * s[4]])?;
    let m = g.mean_axis(r, 3)?;
    g.permute(m, &[0, 2, 1])
}

/// Per-frame audio features `[B, frames, C]` from a lattice `[B, C, T, F]`:
/// mean over frequency, then over consecutive groups of `T / frames` steps.
pub fn audio_frame_features(g: &mut Graph, lattice: Var, frames: usize) -> Result<Var> {
    let s = g.shape(lattice).to_vec();
    if s.len() != 4 || frames == 0 || !s[2].is_multiple_of(frames) {
        return Err(Error::shape(
            "audio_frame_features",
            format!("lattice {s:?} into {frames} frames"),
        ));
    }
    let m = g.mean_axis(lattice, 3)?;
    let r = g.reshape(m, &[s[0], s[1], frames, s[2] / frames])?;
    let m = g.mean_axis(r, 3)?;
    g.permute(m, &[0, 2, 1])
}

/// Loss components feeding the two objectives.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub sample: Var,
    pub frame_a: Var,
    pub frame_v: Var,
    pub av: Option<Var>,
    pub va: Option<Var>,
    pub aa: Option<Var>,
    pub vv: Option<Var>,
}

fn add_opt(g: &mut Graph, acc: Var, terms: &[Option<Var>], weight: f64) -> Result<Var> {
    let mut out = acc;
    for t in terms.iter().flatten() {
        let w = g.scale(*t, weight)?;
        out = g.add(out, w)?;
    }
    Ok(out)
}

/// `L_m = L_sample + η (L_av + L_va)/2`, `L_u = (L_fa + L_fv)/2 + η (L_aa + L_vv)/2`.
/// Missing contrastive terms count as zero.
pub fn total_loss(g: &mut Graph, parts: &LossParts, eta_c: f64) -> Result<(Var, Var)> {
    let l_m = add_opt(g, parts.sample, &[parts.av, parts.va], 0.5 * eta_c)?;
    let f = g.add(parts.frame_a, parts.frame_v)?;
    let f = g.scale(f, 0.5)?;
    let l_u = add_opt(g, f, &[parts.aa, parts.vv], 0.5 * eta_c)?;
    Ok((l_m, l_u))
}
