//! End-to-end detector: encoders, contrastive projections, cluster-guided
//! fusion, large-kernel deep stacks, joint attention and the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::TrainConfig;
use super::data::{AvSample, Dataset};
use crate::audio::{Frontend, MelConfig};
use crate::classify::{self, HeadMode, LossParts};
use crate::encoders;
use crate::error::{Error, Result};
use crate::fusion::{self, ModalityClusters};
use crate::macl::{self, Components, MaclOutput, Modality, NegativeQueue, StepInputs, Tag, TemperatureState};
use crate::mslka;
use crate::nn;
use crate::numerics::rng::substream;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Frequency bins of the audio lattice.
pub const AUDIO_FREQ: usize = 4;

/// Parameters counted as shared between the two objectives.
pub fn is_shared(name: &str) -> bool {
    ["enc_v.", "enc_a.", "deep_v.", "deep_a.", "detok_", "retok_"]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Frozen projected embeddings the clusters are fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub v: Tensor,
    pub a: Tensor,
    pub fake: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub params: ParamStore,
    /// Batch-norm running statistics.
    pub buffers: ParamStore,
    pub snapshot: Option<Snapshot>,
    /// Video and audio clusters fitted on `snapshot`.
    pub clusters: Option<(ModalityClusters, ModalityClusters)>,
}

impl Model {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(cfg.seed, "init");
        let (mut p, mut buffers) = (ParamStore::new(), ParamStore::new());
        let d = cfg.encoder.d_model;
        let c = cfg.mslka.channels;
        encoders::init(&mut p, &cfg.encoder, &mut rng);
        macl::init(&mut p, &cfg.macl, d, &mut rng);
        fusion::init(&mut p, d, &mut rng);
        classify::init(&mut p, &mut buffers, &cfg.classify, d, c, &mut rng);
        nn::init_linear(&mut p, "detok_v", d, c, true, &mut rng);
        nn::init_linear(&mut p, "detok_a", d, c * AUDIO_FREQ, true, &mut rng);
        nn::init_linear(&mut p, "retok_v", c, d, true, &mut rng);
        nn::init_linear(&mut p, "retok_a", c * AUDIO_FREQ, d, true, &mut rng);
        for (prefix, rank) in [("deep_v", 3), ("deep_a", 2)] {
            for name in mslka::block_names(prefix, cfg.mslka.depth) {
                mslka::init_block(&mut p, &name, &cfg.mslka, rank, &mut rng);
                // adapter from fused features to channel gains, starting near 1
                let adapt = format!("{name}.adapt");
                nn::init_linear(&mut p, &adapt, d, c, true, &mut rng);
                if let Some(w) = p.get_mut(&format!("{adapt}.w")) {
                    w.data_mut().iter_mut().for_each(|x| *x *= 0.1);
                }
                p.insert(format!("{adapt}.b"), Tensor::ones(&[c]));
            }
        }
        Ok(Self {
            cfg,
            params: p,
            buffers,
            snapshot: None,
            clusters: None,
        })
    }

    /// Fits both modalities' clusters on `snap` and keeps it.
    pub fn refit(&mut self, snap: Snapshot) -> Result<()> {
        let fake = self.cfg.fusion.label_aware.then_some(snap.fake.as_slice());
        let cv = ModalityClusters::fit(&snap.v, fake, &self.cfg.fusion.cluster)?;
        let ca = ModalityClusters::fit(&snap.a, fake, &self.cfg.fusion.cluster)?;
        self.clusters = Some((cv, ca));
        self.snapshot = Some(snap);
        Ok(())
    }

    fn distances(&self, x_v: &Tensor, x_a: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let b = x_v.shape()[0];
        match &self.clusters {
            None => (vec![1.0; b], vec![1.0; b]),
            Some((cv, ca)) => {
                let beta = self.cfg.fusion.beta;
                let dist = |x: &Tensor, c: &ModalityClusters| {
                    (0..b)
                        .map(|i| fusion::composite_distance(x.row(i).data(), c, beta).value)
                        .collect()
                };
                (dist(x_v, cv), dist(x_a, ca))
            }
        }
    }
}

/// Per-sample model inputs, computed once per dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `[mel_frames, n_mels]`, standardized per clip.
    pub logmel: Vec<Tensor>,
}

impl Prepared {
    pub fn new(data: &Dataset) -> Result<Self> {
        let mel = MelConfig {
            sample_rate: data.cfg.sample_rate as f64,
            ..MelConfig::default()
        };
        let frontend = Frontend::new(mel)?;
        let logmel = data
            .samples
            .iter()
            .map(|s| standardize(&frontend.log_mel(&s.audio)?))
            .collect::<Result<_>>()?;
        Ok(Self { logmel })
    }
}

fn standardize(t: &Tensor) -> Result<Tensor> {
    let mean = t.mean();
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
    let inv = 1.0 / (var + 1e-8).sqrt();
    Ok(t.map(|v| (v - mean) * inv))
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, 3, H, W]`
    pub video: Tensor,
    /// `[B, mel_frames, n_mels]`
    pub logmel: Tensor,
    /// Augmented second views for the intra-modal losses.
    pub video2: Option<Tensor>,
    pub logmel2: Option<Tensor>,
    pub labels: Vec<f64>,
    /// `[B, T]` per-modality frame targets.
    pub frame_v: Tensor,
    pub frame_a: Tensor,
    pub tags: Vec<Tag>,
    pub fake: Vec<bool>,
}

/// Shifts `x: [N, rest...]` by `shift` steps along axis 0, repeating the edge.
fn shift_rows(x: &Tensor, shift: isize) -> Tensor {
    let n = x.shape()[0] as isize;
    let rows: Vec<Tensor> = (0..n).map(|i| x.row((i - shift).clamp(0, n - 1) as usize)).collect();
    Tensor::stack(&rows).expect("same-shaped rows")
}

fn augment<R: Rng + ?Sized>(x: &Tensor, noise: f64, rng: &mut R) -> Tensor {
    let shift = if rng.random_bool(0.5) { 1 } else { -1 };
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut out = shift_rows(x, shift);
    out.data_mut().iter_mut().for_each(|v| *v += noise * normal.sample(rng));
    out
}

impl Batch {
    /// Gathers `idx`; with `views` given, also draws the augmented second views.
    pub fn gather<R: Rng + ?Sized>(
        data: &Dataset,
        prep: &Prepared,
        idx: &[usize],
        views: Option<(f64, &mut R)>,
    ) -> Result<Self> {
        let samples: Vec<&AvSample> = idx.iter().map(|&i| &data.samples[i]).collect();
        let video = Tensor::stack(&samples.iter().map(|s| s.video.clone()).collect::<Vec<_>>())?;
        let mels: Vec<Tensor> = idx.iter().map(|&i| prep.logmel[i].clone()).collect();
        let logmel = Tensor::stack(&mels)?;
        let (video2, logmel2) = match views {
            Some((noise, rng)) => {
                let v2: Vec<Tensor> = samples.iter().map(|s| augment(&s.video, noise, rng)).collect();
                let a2: Vec<Tensor> = mels.iter().map(|m| augment(m, noise, rng)).collect();
                (Some(Tensor::stack(&v2)?), Some(Tensor::stack(&a2)?))
            }
            None => (None, None),
        };
        let frames = |video: bool| -> Result<Tensor> {
            let rows: Vec<Tensor> = samples.iter().map(|s| Tensor::from_vec(s.frame_targets(video))).collect();
            Tensor::stack(&rows)
        };
        Ok(Self {
            video,
            logmel,
            video2,
            logmel2,
            labels: samples.iter().map(|s| f64::from(s.label)).collect(),
            frame_v: frames(true)?,
            frame_a: frames(false)?,
            tags: samples
                .iter()
                .map(|s| Tag {
                    identity: s.identity,
                    class: s.class as usize,
                })
                .collect(),
            fake: samples.iter().map(|s| s.label == 1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Training-time context for the contrastive losses.
pub struct Contrast<'a> {
    pub temp: &'a TemperatureState,
    pub queue_v: &'a NegativeQueue,
    pub queue_a: &'a NegativeQueue,
}

/// Graph handles of one forward pass.
pub struct Forward {
    /// `[B]` sample-level fake probability.
    pub prob: Var,
    /// `[B, T]` frame-level probabilities.
    pub frame_v: Var,
    pub frame_a: Var,
    pub l_m: Var,
    pub l_u: Var,
    pub macl: Option<MaclOutput>,
    /// Projected unit embeddings `[B, d_proj]`.
    pub x_v: Var,
    pub x_a: Var,
    pub w_v: Var,
    pub w_a: Var,
    pub d_v: Vec<f64>,
    pub d_a: Vec<f64>,
}

/// Builds the full graph for one batch. In training mode batch norm uses
/// batch statistics (updating the running ones), dropout is active and the
/// contrastive losses run when `contrast` is given.
pub fn forward<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &mut Model,
    batch: &Batch,
    train: bool,
    contrast: Option<Contrast>,
    rng: &mut R,
) -> Result<Forward> {
    let cfg = model.cfg.clone();
    let p = &model.params;
    let b = batch.len();
    let (ec, c) = (&cfg.encoder, cfg.mslka.channels);

    let video = g.constant(batch.video.clone());
    let logmel = g.constant(batch.logmel.clone());
    let enc_v = encoders::encode_video(g, p, ec, video)?;
    let enc_a = encoders::encode_audio(g, p, ec, logmel)?;
    let x_v = macl::project(g, p, Modality::Video, enc_v.pooled)?;
    let x_a = macl::project(g, p, Modality::Audio, enc_a.pooled)?;

    let macl_out = match contrast {
        Some(ctx) if cfg.flags.use_macl => {
            let comps = Components {
                cross: cfg.flags.use_cross,
                intra: cfg.flags.use_intra,
            };
            let (mut x_v2, mut x_a2) = (None, None);
            if comps.intra {
                let (v2, a2) = batch
                    .video2
                    .as_ref()
                    .zip(batch.logmel2.as_ref())
                    .ok_or_else(|| Error::invalid("intra-modal losses need augmented views"))?;
                let v2 = g.constant(v2.clone());
                let a2 = g.constant(a2.clone());
                let e2v = encoders::encode_video(g, p, ec, v2)?;
                let e2a = encoders::encode_audio(g, p, ec, a2)?;
                x_v2 = Some(macl::project(g, p, Modality::Video, e2v.pooled)?);
                x_a2 = Some(macl::project(g, p, Modality::Audio, e2a.pooled)?);
            }
            let inp = StepInputs {
                x_v,
                x_a,
                x_v2,
                x_a2,
                tags: &batch.tags,
                queue_v: ctx.queue_v,
                queue_a: ctx.queue_a,
            };
            Some(macl::forward(g, p, &cfg.macl, ctx.temp, &inp, comps)?)
        }
        _ => None,
    };

    let (d_v, d_a) = model.distances(g.value(x_v), g.value(x_a));
    let (w_v, w_a) = if cfg.flags.use_weights {
        let iv = fusion::importance_scores(g, p, Modality::Video, enc_v.pooled, &d_v, &cfg.fusion)?;
        let ia = fusion::importance_scores(g, p, Modality::Audio, enc_a.pooled, &d_a, &cfg.fusion)?;
        let (wv, wa, _) = fusion::fusion_weights(g, iv.raw, ia.raw)?;
        (wv, wa)
    } else {
        fusion::equal_weights(g, b)
    };
    let x_fused = fusion::fuse_with(g, enc_v.pooled, enc_a.pooled, w_v, w_a)?;

    // token grids to lattices
    let [gt, gh, gw] = ec.video_grid();
    let na = ec.audio_tokens();
    let lv = nn::linear(g, p, "detok_v", enc_v.tokens)?;
    let lv = g.reshape(lv, &[b, gt, gh, gw, c])?;
    let lv = g.permute(lv, &[0, 4, 1, 2, 3])?;
    let la = nn::linear(g, p, "detok_a", enc_a.tokens)?;
    let la = g.reshape(la, &[b, na, c, AUDIO_FREQ])?;
    let la = g.permute(la, &[0, 2, 1, 3])?;

    let modulated = |prefix: &'static str| {
        move |g: &mut Graph, i: usize, out: Var| -> Result<Var> {
            let gain = nn::linear(g, p, &format!("{prefix}.block{i}.adapt"), x_fused)?;
            fusion::modulate(g, out, gain)
        }
    };
    let lv = mslka::deep_stack(g, p, "deep_v", &cfg.mslka, lv, modulated("deep_v"))?;
    let la = mslka::deep_stack(g, p, "deep_a", &cfg.mslka, la, modulated("deep_a"))?;

    let fv = classify::video_frame_features(g, lv)?;
    let frame_v = classify::frame_prob(g, p, Modality::Video, fv)?;
    let fa = classify::audio_frame_features(g, la, ec.frames)?;
    let frame_a = classify::frame_prob(g, p, Modality::Audio, fa)?;

    // lattices back to tokens, with the encoder tokens as a residual path
    let tv = g.permute(lv, &[0, 2, 3, 4, 1])?;
    let tv = g.reshape(tv, &[b, gt * gh * gw, c])?;
    let tv = nn::linear(g, p, "retok_v", tv)?;
    let tv = g.add(tv, enc_v.tokens)?;
    let ta = g.permute(la, &[0, 2, 1, 3])?;
    let ta = g.reshape(ta, &[b, na, c * AUDIO_FREQ])?;
    let ta = nn::linear(g, p, "retok_a", ta)?;
    let ta = g.add(ta, enc_a.tokens)?;

    let (m, _) = classify::rfmf(g, p, &cfg.classify, ta, tv)?;
    let mut mode = HeadMode {
        train,
        buffers: Some(&mut model.buffers),
        rng,
    };
    let prob = classify::sample_prob(g, p, &cfg.classify, m, &mut mode)?;

    let sample = classify::sample_loss(g, prob, &batch.labels)?;
    let lf_v = classify::frame_loss(g, frame_v, &batch.frame_v)?;
    let lf_a = classify::frame_loss(g, frame_a, &batch.frame_a)?;
    let parts = LossParts {
        sample,
        frame_a: lf_a,
        frame_v: lf_v,
        av: macl_out.as_ref().and_then(|o| o.l_av),
        va: macl_out.as_ref().and_then(|o| o.l_va),
        aa: macl_out.as_ref().and_then(|o| o.l_aa),
        vv: macl_out.as_ref().and_then(|o| o.l_vv),
    };
    let (l_m, l_u) = classify::total_loss(g, &parts, cfg.classify.eta_c)?;
    Ok(Forward {
        prob,
        frame_v,
        frame_a,
        l_m,
        l_u,
        macl: macl_out,
        x_v,
        x_a,
        w_v,
        w_a,
        d_v,
        d_a,
    })
}
