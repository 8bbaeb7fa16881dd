//! Cluster-guided modality importance and weighted audio-video fusion.

pub mod cluster;

use rand::Rng;

pub use cluster::{fit_clusters, ClusterConfig, ClusterModel};

use crate::error::{Error, Result};
use crate::macl::Modality;
use crate::nn;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Mix between normalized Mahalanobis distance and cosine dissimilarity.
    pub beta: f64,
    /// Mix between the attention branch and the inverse-distance branch.
    pub gamma: f64,
    pub eps: f64,
    pub heads: usize,
    /// Cluster real and fake embeddings separately.
    pub label_aware: bool,
    /// When false every sample gets w_v = w_a = 0.5.
    pub use_weights: bool,
    pub cluster: ClusterConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            gamma: 0.5,
            eps: 1e-6,
            heads: 2,
            label_aware: true,
            use_weights: true,
            cluster: ClusterConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("fusion: {m}")));
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("beta and gamma must lie in [0, 1]");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.heads == 0 {
            return bad("heads must be positive");
        }
        if self.cluster.k_max < 2 {
            return bad("k_max must be at least 2");
        }
        Ok(())
    }
}

/// Clusters for one modality, optionally split by authenticity.
#[derive(Clone, Debug)]
pub struct ModalityClusters {
    pub models: Vec<ClusterModel>,
    /// Largest nearest-cluster Mahalanobis distance over the fitting set.
    pub d_max: f64,
}

impl ModalityClusters {
    /// Fits clusters to `emb: [N, d]`. With `fake` given, real and fake rows
    /// are clustered separately (each with K_max reduced to fit its size);
    /// a split too small to cluster is folded into the other.
    pub fn fit(emb: &Tensor, fake: Option<&[bool]>, cfg: &ClusterConfig) -> Result<Self> {
        let n = emb.shape()[0];
        let mut groups: Vec<Tensor> = Vec::new();
        match fake {
            Some(flags) if flags.len() == n => {
                let rows = |want: bool| -> Vec<Tensor> {
                    (0..n).filter(|&i| flags[i] == want).map(|i| emb.row(i)).collect()
                };
                let (real, fakes) = (rows(false), rows(true));
                if real.len() >= 4 && fakes.len() >= 4 {
                    groups.push(Tensor::stack(&real)?);
                    groups.push(Tensor::stack(&fakes)?);
                } else {
                    groups.push(emb.clone());
                }
            }
            Some(flags) => {
                return Err(Error::shape(
                    "cluster_fit",
                    format!("{} labels for {n} embeddings", flags.len()),
                ))
            }
            None => groups.push(emb.clone()),
        }
        let mut models = Vec::new();
        for (i, x) in groups.iter().enumerate() {
            let rows = x.shape()[0];
            let c = ClusterConfig {
                k_max: cfg.k_max.min(rows / 2),
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            models.push(fit_clusters(x, &c)?);
        }
        let mut out = Self { models, d_max: 0.0 };
        let d = emb.shape()[1];
        out.d_max = emb
            .data()
            .chunks(d)
            .map(|x| out.nearest(x).2)
            .fold(0.0, f64::max);
        Ok(out)
    }

    /// (model index, cluster index, Mahalanobis distance) of the nearest center.
    pub fn nearest(&self, x: &[f64]) -> (usize, usize, f64) {
        self.models
            .iter()
            .enumerate()
            .map(|(m, model)| {
                let (c, d) = model.nearest(x);
                (m, c, d)
            })
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .expect("at least one model")
    }

    pub fn center(&self, model: usize, cluster: usize) -> &[f64] {
        &self.models[model].clusters[cluster].center
    }
}

/// Composite distance of one embedding and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distance {
    pub mahalanobis: f64,
    pub cosine: f64,
    pub value: f64,
    /// `x` or the center had zero norm, so the cosine term was set to 1.
    pub zero_norm: bool,
}

/// `D = β d / d_max + (1 − β)(1 − cos(x, c))` against the nearest center `c`.
pub fn composite_distance(x: &[f64], clusters: &ModalityClusters, beta: f64) -> Distance {
    let (m, c, d) = clusters.nearest(x);
    let center = clusters.center(m, c);
    composite_from_parts(x, center, d, clusters.d_max, beta)
}

/// [`composite_distance`] with the nearest center and its Mahalanobis distance given.
pub fn composite_from_parts(x: &[f64], center: &[f64], d: f64, d_max: f64, beta: f64) -> Distance {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = center.iter().map(|v| v * v).sum::<f64>().sqrt();
    let zero_norm = nx == 0.0 || nc == 0.0;
    let cosine = if zero_norm {
        1.0
    } else {
        1.0 - x.iter().zip(center).map(|(a, b)| a * b).sum::<f64>() / (nx * nc)
    };
    let scale = if d_max > 0.0 { d_max } else { 1.0 };
    Distance {
        mahalanobis: d,
        cosine,
        value: beta * d / scale + (1.0 - beta) * cosine,
        zero_norm,
    }
}

fn names(m: Modality) -> (&'static str, &'static str) {
    match m {
        Modality::Video => ("fusion.attn_v", "fusion.score_v"),
        Modality::Audio => ("fusion.attn_a", "fusion.score_a"),
    }
}

/// Creates the attention-branch parameters for both modalities.
pub fn init<R: Rng + ?Sized>(p: &mut ParamStore, d_model: usize, rng: &mut R) {
    for m in [Modality::Video, Modality::Audio] {
        let (attn, score) = names(m);
        nn::init_mha(p, attn, d_model, rng);
        nn::init_linear(p, score, d_model, 1, true, rng);
    }
}

/// Raw importance scores and the attention branch's pre-activation output.
#[derive(Clone, Copy, Debug)]
pub struct Importance {
    /// `[B]`, nonnegative
    pub raw: Var,
    /// `[B]`, f_m output before the ReLU
    pub attention: Var,
}

/// `raw = γ ReLU(f(MHA(feat))) + (1 − γ)/(D + ε)`, with self-attention taken
/// across the batch (samples as tokens). `distances` are constants.
pub fn importance_scores(
    g: &mut Graph,
    p: &ParamStore,
    modality: Modality,
    feat: Var,
    distances: &[f64],
    cfg: &FusionConfig,
) -> Result<Importance> {
    let s = g.shape(feat).to_vec();
    if s.len() != 2 || s[0] != distances.len() {
        return Err(Error::shape(
            "importance_scores",
            format!("features {s:?} with {} distances", distances.len()),
        ));
    }
    let b = s[0];
    let (attn_name, score_name) = names(modality);
    let tokens = g.reshape(feat, &[1, b, s[1]])?;
    let (att, _) = nn::mha(g, p, attn_name, tokens, cfg.heads)?;
    let score = nn::linear(g, p, score_name, att)?;
    let attention = g.reshape(score, &[b])?;
    let r = g.relu(attention)?;
    let a = g.scale(r, cfg.gamma)?;
    let inv = Tensor::from_vec(distances.iter().map(|d| (1.0 - cfg.gamma) / (d + cfg.eps)).collect());
    let inv = g.constant(inv);
    let raw = g.add(a, inv)?;
    Ok(Importance { raw, attention })
}

/// Per-sample convex weights and the fused features.
#[derive(Clone, Debug)]
pub struct Fused {
    /// `[B, d]`
    pub x: Var,
    /// `[B]`
    pub w_v: Var,
    pub w_a: Var,
    /// Samples where both raw scores were zero and 0.5/0.5 was used.
    pub fallback: Vec<bool>,
}

/// Convex weights `w_v = raw_v/(raw_v + raw_a)`, `w_a = 1 − w_v`.
pub fn fusion_weights(g: &mut Graph, raw_v: Var, raw_a: Var) -> Result<(Var, Var, Vec<bool>)> {
    let total = g.add(raw_v, raw_a)?;
    let fallback: Vec<bool> = g.value(total).data().iter().map(|&t| t == 0.0).collect();
    // where the sum is exactly zero, (raw_v + 1)/(sum + 2) = 1/2; other samples are untouched
    let fix = g.constant(Tensor::from_vec(fallback.iter().map(|&f| f64::from(u8::from(f))).collect()));
    let num = g.add(raw_v, fix)?;
    let fix2 = g.scale(fix, 2.0)?;
    let den = g.add(total, fix2)?;
    let w_v = g.div(num, den)?;
    let neg = g.neg(w_v)?;
    let w_a = g.offset(neg, 1.0)?;
    Ok((w_v, w_a, fallback))
}

/// `x_i = w_v,i V_i + w_a,i A_i`
pub fn fuse_with(g: &mut Graph, v: Var, a: Var, w_v: Var, w_a: Var) -> Result<Var> {
    let sv = g.shape(v).to_vec();
    if sv != g.shape(a) || sv.len() != 2 {
        return Err(Error::shape("fuse", format!("{sv:?} vs {:?}", g.shape(a))));
    }
    let b = sv[0];
    let wv = g.reshape(w_v, &[b, 1])?;
    let wa = g.reshape(w_a, &[b, 1])?;
    let xv = g.mul(v, wv)?;
    let xa = g.mul(a, wa)?;
    g.add(xv, xa)
}

/// Normalizes raw scores and fuses `V` and `A` (both `[B, d]`).
pub fn fuse(g: &mut Graph, v: Var, a: Var, raw_v: Var, raw_a: Var) -> Result<Fused> {
    let (w_v, w_a, fallback) = fusion_weights(g, raw_v, raw_a)?;
    let x = fuse_with(g, v, a, w_v, w_a)?;
    Ok(Fused { x, w_v, w_a, fallback })
}

/// Equal weights for every sample of a batch of `b`.
pub fn equal_weights(g: &mut Graph, b: usize) -> (Var, Var) {
    let w = g.constant(Tensor::full(&[b], 0.5));
    (w, w)
}

/// `K ∘ x`, where `x: [B, C]` is broadcast over the trailing axes of `K: [B, C, ...]`.
pub fn modulate(g: &mut Graph, deep: Var, fused: Var) -> Result<Var> {
    let (sk, sx) = (g.shape(deep).to_vec(), g.shape(fused).to_vec());
    if sk.len() < 2 || sx.len() != 2 || sk[..2] != sx[..] {
        return Err(Error::shape("modulate", format!("deep {sk:?}, fused {sx:?}")));
    }
    let mut shape = sx.clone();
    shape.extend(std::iter::repeat_n(1, sk.len() - 2));
    let x = g.reshape(fused, &shape)?;
    g.mul(deep, x)
}
