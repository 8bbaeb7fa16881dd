//! Finite-difference checks of every primitive and every composite loss,
//! run over many random seeds.

use std::collections::BTreeSet;

use rand::Rng as _;

use super::config::TrainConfig;
use super::model::{forward, Batch, Contrast, Model};
use crate::classify::{self, ClassifyConfig, HeadMode};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::macl::{self, Components, MaclConfig, Modality, NegativeQueue, StepInputs, Tag, TemperatureState};
use crate::mslka::{self, MslkaConfig};
use crate::numerics::gradcheck::{finite_diff_coords, max_rel_error};
use crate::numerics::rng::{seeded, substream};
use crate::numerics::{ConvSpec, Graph, ParamStore, Tensor, Var};

pub const MODULES: [&str; 7] = ["numerics", "encoders", "macl", "fusion", "mslka", "classify", "pipeline"];

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// Worst relative error of one named check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub seeds: usize,
    pub max_err: f64,
    /// Coordinate with the largest error.
    pub worst: String,
}

type LossFn<'a> = dyn FnMut(&mut Graph, &ParamStore) -> Result<Var> + 'a;

/// Compares reverse-mode gradients of `loss` with central differences on at
/// most `max_coords` randomly chosen coordinates (all when `None`).
pub fn compare(params: &ParamStore, max_coords: Option<usize>, seed: u64, loss: &mut LossFn) -> Result<(f64, String)> {
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    let grads = g.backward(l)?;
    let analytic = g.param_grads(&grads, params);
    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
        .collect();
    let chosen: BTreeSet<(String, usize)> = match max_coords {
        Some(k) if k < coords.len() => {
            let mut rng = substream(seed, "coords");
            let mut set = BTreeSet::new();
            while set.len() < k {
                set.insert(coords[rng.random_range(0..coords.len())].clone());
            }
            set
        }
        _ => coords.into_iter().collect(),
    };
    let select = |n: &str, i: usize| chosen.contains(&(n.to_string(), i));
    let mut f = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, p)?;
        Ok(g.item(l))
    };
    let numeric = finite_diff_coords(&mut f, params, STEP, select)?;
    Ok(max_rel_error(&analytic, &numeric, select))
}

/// `sum(y ∘ R)` for a fixed random `R`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), &mut substream(seed, "weights"));
    let w = g.constant(w);
    let yw = g.mul(y, w)?;
    g.sum(yw)
}

type Op = fn(&mut Graph, &[Var]) -> Result<Var>;

/// (name, input shapes, keep inputs away from zero, op)
fn primitive_ops() -> Vec<(&'static str, Vec<Vec<usize>>, bool, Op)> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], false, |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 1]], false, |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 1], vec![1, 4]], false, |g, v| g.mul(v[0], v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], true, |g, v| g.div(v[0], v[1])),
        ("scale", vec![vec![5]], false, |g, v| g.scale(v[0], -1.7)),
        ("offset", vec![vec![5]], false, |g, v| g.offset(v[0], 0.3)),
        ("neg", vec![vec![2, 2]], false, |g, v| g.neg(v[0])),
        ("relu", vec![vec![3, 4]], true, |g, v| g.relu(v[0])),
        ("sigmoid", vec![vec![3, 4]], false, |g, v| g.sigmoid(v[0])),
        ("tanh", vec![vec![3, 4]], false, |g, v| g.tanh(v[0])),
        ("exp", vec![vec![3, 4]], false, |g, v| g.exp(v[0])),
        ("log", vec![vec![3, 4]], true, |g, v| {
            let a = crate::nn::abs(g, v[0])?;
            g.log(a)
        }),
        ("softmax", vec![vec![3, 5]], false, |g, v| g.softmax(v[0])),
        ("layer_norm", vec![vec![3, 6]], false, |g, v| g.layer_norm(v[0], 1e-9)),
        ("sum", vec![vec![3, 4]], false, |g, v| {
            let s = g.sum(v[0])?;
            g.mul(s, s)
        }),
        ("mean", vec![vec![3, 4]], false, |g, v| {
            let s = g.mean(v[0])?;
            g.mul(s, s)
        }),
        ("variance", vec![vec![3, 4]], false, |g, v| g.variance(v[0])),
        ("sum_axis", vec![vec![3, 4, 2]], false, |g, v| g.sum_axis(v[0], 1)),
        ("mean_axis", vec![vec![3, 4, 2]], false, |g, v| g.mean_axis(v[0], 0)),
        ("var_axis", vec![vec![3, 4, 2]], false, |g, v| g.var_axis(v[0], 2)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, |g, v| g.matmul(v[0], v[1])),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 5]], false, |g, v| g.matmul(v[0], v[1])),
        ("matmul_shared", vec![vec![2, 3, 4], vec![4, 5]], false, |g, v| g.matmul(v[0], v[1])),
        ("conv1d", vec![vec![2, 4, 7], vec![4, 2, 3]], false, |g, v| {
            g.conv(v[0], v[1], &ConvSpec::same(&[3], &[2], 2)?)
        }),
        ("conv2d", vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3]], false, |g, v| {
            g.conv(v[0], v[1], &ConvSpec::valid(2, 1))
        }),
        ("conv3d", vec![vec![1, 2, 4, 4, 3], vec![2, 1, 3, 3, 3]], false, |g, v| {
            g.conv(v[0], v[1], &ConvSpec::same(&[3, 3, 3], &[1, 2, 1], 2)?)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], false, |g, v| g.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![4, 3]], false, |g, v| g.slice(v[0], 0, 1, 3)),
        ("permute", vec![vec![2, 3, 4]], false, |g, v| g.permute(v[0], &[2, 0, 1])),
        ("transpose", vec![vec![2, 3, 4]], false, |g, v| g.transpose(v[0], 1, 2)),
        ("reshape", vec![vec![2, 6]], false, |g, v| g.reshape(v[0], &[3, 4])),
    ]
}

fn check_primitive(shapes: &[Vec<usize>], away: bool, op: Op, seed: u64) -> Result<(f64, String)> {
    let mut rng = seeded(seed);
    let mut p = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        let mut t = Tensor::randn(s, &mut rng);
        if away {
            t = t.map(|x| if x.abs() < 0.2 { x + x.signum() * 0.2 } else { x });
        }
        p.insert(format!("x{i}"), t);
    }
    let names: Vec<String> = p.names().cloned().collect();
    compare(&p, None, seed, &mut |g, store| {
        let vars = names.iter().map(|n| g.param(store, n)).collect::<Result<Vec<_>>>()?;
        let y = op(g, &vars)?;
        weighted_sum(g, y, seed)
    })
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        positional: true,
        frames: 2,
        channels: 3,
        height: 8,
        width: 8,
        patch: [1, 4, 4],
        mel_frames: 8,
        n_mels: 8,
        audio_pool: 2,
    }
}

fn randomize(p: &mut ParamStore, names: &[&str], scale: f64, rng: &mut crate::numerics::rng::Rng) {
    for n in names {
        if let Some(t) = p.get_mut(n) {
            let r = Tensor::randn(t.shape(), rng);
            t.data_mut().iter_mut().zip(r.data()).for_each(|(x, y)| *x = scale * y);
        }
    }
}

fn encoder_checks(seed: u64) -> Result<Vec<(String, (f64, String))>> {
    let cfg = small_encoder();
    let mut rng = seeded(seed);
    let mut p = ParamStore::new();
    encoders::init(&mut p, &cfg, &mut rng);
    let video = Tensor::randn(&[2, 2, 3, 8, 8], &mut rng);
    let mel = Tensor::randn(&[2, 8, 8], &mut rng);
    let ev = compare(&p, Some(40), seed, &mut |g, s| {
        let x = g.constant(video.clone());
        let e = encoders::encode_video(g, s, &cfg, x)?;
        weighted_sum(g, e.tokens, seed)
    })?;
    let ea = compare(&p, Some(40), seed, &mut |g, s| {
        let x = g.constant(mel.clone());
        let e = encoders::encode_audio(g, s, &cfg, x)?;
        weighted_sum(g, e.pooled, seed)
    })?;
    Ok(vec![("video encoder".into(), ev), ("audio encoder".into(), ea)])
}

fn macl_checks(seed: u64) -> Result<Vec<(String, (f64, String))>> {
    let cfg = MaclConfig {
        d_proj: 6,
        queue_size: 8,
        ..MaclConfig::default()
    };
    let (b, d) = (4, 8);
    let mut rng = seeded(seed);
    let mut p = ParamStore::new();
    macl::init(&mut p, &cfg, d, &mut rng);
    randomize(&mut p, &["macl.beta"], 0.3, &mut rng);
    for n in ["in.v", "in.a", "in.v2", "in.a2"] {
        p.insert(n, Tensor::randn(&[b, d], &mut rng));
    }
    let tags: Vec<Tag> = (0..b)
        .map(|i| Tag {
            identity: i,
            class: i % 2,
        })
        .collect();
    let mut queue_v = NegativeQueue::new(cfg.queue_size, cfg.d_proj);
    let mut queue_a = NegativeQueue::new(cfg.queue_size, cfg.d_proj);
    for q in [&mut queue_v, &mut queue_a] {
        let e = Tensor::randn(&[6, cfg.d_proj], &mut rng);
        let rows: Vec<Tensor> = (0..6)
            .map(|i| {
                let r = e.row(i);
                let n = r.norm();
                r.map(|x| x / n)
            })
            .collect();
        let qt: Vec<Tag> = (0..6).map(|i| Tag { identity: 10 + i, class: i % 4 }).collect();
        q.push(&Tensor::stack(&rows)?, &qt)?;
    }
    let mut state = TemperatureState::new(&cfg);
    state.tau = 0.1;
    state.dtau = 0.01;
    state.grad = -2.0;
    state.h_hist = (0..cfg.hidden).map(|_| rng.random_range(-0.5..0.5)).collect();
    let comps = Components { cross: true, intra: true };
    let mut out = Vec::new();
    let picks: [(&str, fn(&macl::MaclOutput) -> Option<Var>); 5] = [
        ("L_av", |o| o.l_av),
        ("L_va", |o| o.l_va),
        ("L_vv", |o| o.l_vv),
        ("L_aa", |o| o.l_aa),
        ("L_C", |o| Some(o.l_c)),
    ];
    for (name, pick) in picks {
        let r = compare(&p, Some(60), seed, &mut |g, s| {
            let proj = |g: &mut Graph, m: Modality, n: &str| -> Result<Var> {
                let x = g.param(s, n)?;
                macl::project(g, s, m, x)
            };
            let x_v = proj(g, Modality::Video, "in.v")?;
            let x_a = proj(g, Modality::Audio, "in.a")?;
            let x_v2 = proj(g, Modality::Video, "in.v2")?;
            let x_a2 = proj(g, Modality::Audio, "in.a2")?;
            let inp = StepInputs {
                x_v,
                x_a,
                x_v2: Some(x_v2),
                x_a2: Some(x_a2),
                tags: &tags,
                queue_v: &queue_v,
                queue_a: &queue_a,
            };
            let o = macl::forward(g, s, &cfg, &state, &inp, comps)?;
            pick(&o).ok_or_else(|| Error::invalid("component missing"))
        })?;
        out.push((name.to_string(), r));
    }
    Ok(out)
}

fn fusion_checks(seed: u64) -> Result<Vec<(String, (f64, String))>> {
    let cfg = FusionConfig::default();
    let (b, d) = (5, 8);
    let mut rng = seeded(seed);
    let mut p = ParamStore::new();
    fusion::init(&mut p, d, &mut rng);
    p.insert("in.v", Tensor::randn(&[b, d], &mut rng));
    p.insert("in.a", Tensor::randn(&[b, d], &mut rng));
    p.insert("in.k", Tensor::randn(&[b, d, 3], &mut rng));
    let dv: Vec<f64> = (0..b).map(|_| rng.random_range(0.1..2.0)).collect();
    let da: Vec<f64> = (0..b).map(|_| rng.random_range(0.1..2.0)).collect();
    let r = compare(&p, Some(60), seed, &mut |g, s| {
        let v = g.param(s, "in.v")?;
        let a = g.param(s, "in.a")?;
        let iv = fusion::importance_scores(g, s, Modality::Video, v, &dv, &cfg)?;
        let ia = fusion::importance_scores(g, s, Modality::Audio, a, &da, &cfg)?;
        let f = fusion::fuse(g, v, a, iv.raw, ia.raw)?;
        let k = g.param(s, "in.k")?;
        let m = fusion::modulate(g, k, f.x)?;
        weighted_sum(g, m, seed)
    })?;
    Ok(vec![("fused modulation".into(), r)])
}

fn mslka_checks(seed: u64) -> Result<Vec<(String, (f64, String))>> {
    let cfg = MslkaConfig {
        channels: 4,
        depth: 1,
        allow_odd_depth: true,
        ..MslkaConfig::default()
    };
    let mut out = Vec::new();
    for (name, shape) in [("video block", vec![2usize, 4, 3, 4, 4]), ("audio block", vec![2, 4, 5, 4])] {
        let mut rng = substream(seed, name);
        let mut p = ParamStore::new();
        mslka::init_block(&mut p, "blk", &cfg, shape.len() - 2, &mut rng);
        randomize(&mut p, &["blk.lambda1", "blk.lambda2"], 1.0, &mut rng);
        p.insert("in.h", Tensor::randn(&shape, &mut rng));
        let r = compare(&p, Some(60), seed, &mut |g, s| {
            let h = g.param(s, "in.h")?;
            let y = mslka::block(g, s, "blk", &cfg, h)?;
            weighted_sum(g, y, seed)
        })?;
        out.push((name.to_string(), r));
    }
    Ok(out)
}

fn classify_checks(seed: u64) -> Result<Vec<(String, (f64, String))>> {
    let cfg = ClassifyConfig::default();
    let (b, d, c) = (6, 8, 4);
    let mut rng = seeded(seed);
    let (mut p, mut buffers) = (ParamStore::new(), ParamStore::new());
    classify::init(&mut p, &mut buffers, &cfg, d, c, &mut rng);
    p.insert("in.a", Tensor::randn(&[b, 3, d], &mut rng));
    p.insert("in.v", Tensor::randn(&[b, 4, d], &mut rng));
    p.insert("in.lat", Tensor::randn(&[b, c, 4, 2, 2], &mut rng));
    let labels: Vec<f64> = (0..b).map(|i| (i % 2) as f64).collect();
    let mut frame_labels = Tensor::zeros(&[b, 4]);
    for (i, y) in frame_labels.data_mut().iter_mut().enumerate() {
        *y = [0.0, 1.0, -1.0][i % 3];
    }
    let sample = compare(&p, Some(60), seed, &mut |g, s| {
        let a = g.param(s, "in.a")?;
        let v = g.param(s, "in.v")?;
        let (m, _) = classify::rfmf(g, s, &cfg, a, v)?;
        let mut drop = substream(seed, "dropout");
        let mut bufs = buffers.clone();
        let mut mode = HeadMode {
            train: true,
            buffers: Some(&mut bufs),
            rng: &mut drop,
        };
        let prob = classify::sample_prob(g, s, &cfg, m, &mut mode)?;
        classify::sample_loss(g, prob, &labels)
    })?;
    let frame = compare(&p, Some(60), seed, &mut |g, s| {
        let lat = g.param(s, "in.lat")?;
        let f = classify::video_frame_features(g, lat)?;
        let prob = classify::frame_prob(g, s, Modality::Video, f)?;
        classify::frame_loss(g, prob, &frame_labels)
    })?;
    Ok(vec![("L_sample".into(), sample), ("L_frame".into(), frame)])
}

/// Tiny end-to-end configuration with two deep blocks per modality.
pub fn tiny_train_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        batch_size: 4,
        encoder: small_encoder(),
        ..TrainConfig::default()
    };
    c.macl.d_proj = 6;
    c.macl.queue_size = 8;
    c.mslka.channels = 4;
    c.mslka.depth = 2;
    c.classify.heads = 2;
    c.fusion.cluster.k_max = 2;
    c
}

fn tiny_batch(cfg: &TrainConfig, seed: u64) -> Result<Batch> {
    let e = &cfg.encoder;
    let b = cfg.batch_size;
    let mut rng = substream(seed, "batch");
    let video = Tensor::randn(&[b, e.frames, 3, e.height, e.width], &mut rng);
    let logmel = Tensor::randn(&[b, e.mel_frames, e.n_mels], &mut rng);
    let video2 = video.map(|x| x + 0.05);
    let logmel2 = logmel.map(|x| x - 0.05);
    let labels: Vec<f64> = (0..b).map(|i| (i % 2) as f64).collect();
    let mut frame_v = Tensor::zeros(&[b, e.frames]);
    frame_v.set(&[1, 0], 1.0);
    let mut frame_a = Tensor::zeros(&[b, e.frames]);
    frame_a.set(&[3, 1], 1.0);
    Ok(Batch {
        video,
        logmel,
        video2: Some(video2),
        logmel2: Some(logmel2),
        tags: (0..b).map(|i| Tag { identity: i, class: i % 4 }).collect(),
        fake: labels.iter().map(|&y| y > 0.5).collect(),
        labels,
        frame_v,
        frame_a,
    })
}

fn pipeline_checks(seed: u64) -> Result<Vec<(String, (f64, String))>> {
    let cfg = tiny_train_config(seed);
    let mut model = Model::new(cfg.clone())?;
    let mut rng = substream(seed, "pipeline");
    // nonzero residual gains so the deep blocks contribute
    let lambdas: Vec<String> = model.params.names().filter(|n| n.contains(".lambda")).cloned().collect();
    for n in &lambdas {
        model.params.insert(n.clone(), Tensor::scalar(rng.random_range(0.2..0.8)));
    }
    // Cluster distances are stop-gradient guidance; without a fit they stay
    // at their constant pre-fit value, which finite differences can see too.
    model.clusters = None;
    let batch = tiny_batch(&cfg, seed)?;
    let temp = TemperatureState::new(&cfg.macl);
    let queue_v = NegativeQueue::new(cfg.macl.queue_size, cfg.macl.d_proj);
    let queue_a = NegativeQueue::new(cfg.macl.queue_size, cfg.macl.d_proj);
    let params = model.params.clone();
    let r = compare(&params, Some(40), seed, &mut |g, s| {
        model.params = s.clone();
        let mut drop = substream(seed, "dropout");
        let ctx = Contrast {
            temp: &temp,
            queue_v: &queue_v,
            queue_a: &queue_a,
        };
        let out = forward(g, &mut model, &batch, true, Some(ctx), &mut drop)?;
        g.add(out.l_m, out.l_u)
    })?;
    Ok(vec![("full pipeline (depth 2)".into(), r)])
}

fn module_checks(module: &str, seed: u64) -> Result<Vec<(String, (f64, String))>> {
    match module {
        "numerics" => primitive_ops()
            .into_iter()
            .map(|(name, shapes, away, op)| Ok((name.to_string(), check_primitive(&shapes, away, op, seed)?)))
            .collect(),
        "encoders" => encoder_checks(seed),
        "macl" => macl_checks(seed),
        "fusion" => fusion_checks(seed),
        "mslka" => mslka_checks(seed),
        "classify" => classify_checks(seed),
        "pipeline" => pipeline_checks(seed),
        other => Err(Error::Config(format!(
            "unknown module `{other}` (one of {})",
            MODULES.join(", ")
        ))),
    }
}

/// Runs the checks of `module` (all modules when `None`) for seeds `0..seeds`.
pub fn run(module: Option<&str>, seeds: u64) -> Result<Vec<CheckResult>> {
    let modules: Vec<&'static str> = match module {
        None => MODULES.to_vec(),
        Some(m) => vec![*MODULES
            .iter()
            .find(|&&x| x == m)
            .ok_or_else(|| Error::Config(format!("unknown module `{m}` (one of {})", MODULES.join(", "))))?],
    };
    let mut out: Vec<CheckResult> = Vec::new();
    for m in modules {
        let start = out.len();
        for seed in 0..seeds {
            for (name, (err, worst)) in module_checks(m, seed)? {
                match out[start..].iter_mut().find(|r| r.name == name) {
                    Some(r) => {
                        r.seeds += 1;
                        if err > r.max_err {
                            r.max_err = err;
                            r.worst = format!("{worst} (seed {seed})");
                        }
                    }
                    None => out.push(CheckResult {
                        module: m,
                        name,
                        seeds: 1,
                        max_err: err,
                        worst: format!("{worst} (seed {seed})"),
                    }),
                }
            }
        }
    }
    Ok(out)
}
