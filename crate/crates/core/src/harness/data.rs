//! Synthetic audio-visual clips with controllable forgeries.
//!
//! A blob moves smoothly across the frame. Its vertical position sets the
//! pitch of a harmonic tone and its horizontal position the loudness, so real
//! clips are correlated across modalities. A forged modality is, inside its
//! segment, the blend `(1 − δ) true + δ foreign` of its true rendering and a
//! rendering driven by an independent trajectory of the same identity
//! (one per forged modality). Forged frames also carry faint synthesis
//! artifacts that scale with `artifact · δ`: a checkerboard texture with a
//! random phase per frame (an upsampling trace) and high-band noise in the
//! audio (a vocoder trace). The random phase keeps the video trace invisible
//! to a linear read of the pixels.

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{GenConfig, KeyValues};
use crate::error::{Error, Result};
use crate::numerics::io::{read_str, read_tensor, read_u32, write_str, write_tensor, write_u32};
use crate::numerics::rng::{substream, Rng as ChaCha};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AvClass {
    RealReal = 0,
    FakeVideo = 1,
    FakeAudio = 2,
    FakeBoth = 3,
}

impl AvClass {
    pub const ALL: [AvClass; 4] = [AvClass::RealReal, AvClass::FakeVideo, AvClass::FakeAudio, AvClass::FakeBoth];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown class index {i}")))
    }

    pub fn video_fake(self) -> bool {
        matches!(self, AvClass::FakeVideo | AvClass::FakeBoth)
    }

    pub fn audio_fake(self) -> bool {
        matches!(self, AvClass::FakeAudio | AvClass::FakeBoth)
    }

    pub fn name(self) -> &'static str {
        match self {
            AvClass::RealReal => "VrAr",
            AvClass::FakeVideo => "VfAr",
            AvClass::FakeAudio => "VrAf",
            AvClass::FakeBoth => "VfAf",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvSample {
    /// `[T, 3, H, W]`
    pub video: Tensor,
    /// Mono signal.
    pub audio: Vec<f64>,
    /// 1 for any forgery.
    pub label: u8,
    /// `[T]`, 1 inside the forged segment.
    pub frame_labels: Vec<f64>,
    pub class: AvClass,
    pub identity: usize,
}

impl AvSample {
    /// Frame targets for one modality: the segment track if that modality is
    /// forged, zeros otherwise.
    pub fn frame_targets(&self, video: bool) -> Vec<f64> {
        let fake = if video { self.class.video_fake() } else { self.class.audio_fake() };
        if fake {
            self.frame_labels.clone()
        } else {
            vec![0.0; self.frame_labels.len()]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cfg: GenConfig,
    pub samples: Vec<AvSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-identity rendering style.
#[derive(Clone, Debug)]
struct Style {
    color: [f64; 3],
    background: [f64; 3],
    radius: f64,
    f0: f64,
    harmonics: [f64; 2],
}

fn style(rng: &mut ChaCha) -> Style {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    Style {
        color: [u(0.4, 1.0), u(0.4, 1.0), u(0.4, 1.0)],
        background: [u(0.0, 0.3), u(0.0, 0.3), u(0.0, 0.3)],
        radius: u(2.0, 3.5),
        f0: u(220.0, 440.0),
        harmonics: [u(0.0, 0.5), u(0.0, 0.5)],
    }
}

const MARGIN: f64 = 3.0;

/// Smooth (x, y) positions: constant velocity with reflection at the margins.
fn trajectory(frames: usize, h: usize, w: usize, rng: &mut ChaCha) -> Vec<(f64, f64)> {
    let (lo_x, hi_x) = (MARGIN, w as f64 - 1.0 - MARGIN);
    let (lo_y, hi_y) = (MARGIN, h as f64 - 1.0 - MARGIN);
    let mut x = rng.random_range(lo_x..hi_x);
    let mut y = rng.random_range(lo_y..hi_y);
    let sign = |r: &mut ChaCha| if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut vx = sign(rng) * rng.random_range(0.3..1.0);
    let mut vy = sign(rng) * rng.random_range(0.6..1.2);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push((x, y));
        x += vx;
        y += vy;
        if x < lo_x || x > hi_x {
            vx = -vx;
            x = x.clamp(lo_x, hi_x);
        }
        if y < lo_y || y > hi_y {
            vy = -vy;
            y = y.clamp(lo_y, hi_y);
        }
    }
    out
}

/// Per-frame weight of the foreign source: δ inside the segment, else 0.
fn blend(segment: &[f64], delta: f64, forged: bool) -> Vec<f64> {
    segment.iter().map(|&s| if forged && s > 0.0 { delta } else { 0.0 }).collect()
}

fn render_video(cfg: &GenConfig, st: &Style, track: &[(f64, f64)], foreign: &[(f64, f64)], mix: &[f64], rng: &mut ChaCha) -> Tensor {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let noise = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut data = vec![0.0; t * 3 * h * w];
    let inv = 1.0 / (2.0 * st.radius * st.radius);
    let bump = |i: usize, j: usize, (px, py): (f64, f64)| (-((i as f64 - py).powi(2) + (j as f64 - px).powi(2)) * inv).exp();
    for f in 0..t {
        let m = mix[f];
        let phase = usize::from(rng.random_bool(0.5));
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let mut shape = bump(i, j, track[f]);
                    if m > 0.0 {
                        shape = (1.0 - m) * shape + m * bump(i, j, foreign[f]);
                        // additive, so the texture also covers the background
                        let checker = if (i + j + phase) % 2 == 0 { 1.0 } else { -1.0 };
                        shape += 0.5 * cfg.artifact * m * checker;
                    }
                    let v = st.background[c] + st.color[c] * shape;
                    data[((f * 3 + c) * h + i) * w + j] = v + cfg.video_noise * noise.sample(rng);
                }
            }
        }
    }
    Tensor::new(vec![t, 3, h, w], data).expect("consistent shape")
}

/// Pitch follows the vertical position, loudness the horizontal one.
fn render_audio(cfg: &GenConfig, st: &Style, track: &[(f64, f64)], foreign: &[(f64, f64)], mix: &[f64], rng: &mut ChaCha) -> Vec<f64> {
    let n = cfg.audio_len;
    let frames = track.len();
    let (cy, cx) = ((cfg.height as f64 - 1.0) / 2.0, (cfg.width as f64 - 1.0) / 2.0);
    let noise = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut phase = [0.0f64; 2];
    let mut voice = |which: usize, (x, y): (f64, f64)| {
        let pitch = st.f0 * 2f64.powf((cy - y) / 8.0);
        let amp = 0.6 + 0.3 * (x - cx) / cx;
        let ph = &mut phase[which];
        *ph = (*ph + 2.0 * PI * pitch / cfg.sample_rate as f64) % (2.0 * PI);
        amp * (ph.sin() + st.harmonics[0] * (2.0 * *ph).sin() + st.harmonics[1] * (3.0 * *ph).sin())
    };
    let mut out = Vec::with_capacity(n);
    let mut prev = 0.0;
    for k in 0..n {
        let f = (k * frames / n).min(frames - 1);
        let m = mix[f];
        // both voices advance every sample so their phases stay continuous
        let own = voice(0, track[f]);
        let other = voice(1, foreign[f]);
        // first difference of white noise leaves mostly the upper band
        let e: f64 = noise.sample(rng);
        let hiss = cfg.artifact * m * (e - prev);
        prev = e;
        out.push((1.0 - m) * own + m * other + hiss + cfg.audio_noise * noise.sample(rng));
    }
    out
}

/// Generates the dataset and its identity-disjoint, class-stratified split.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "gen");
    let styles: Vec<Style> = (0..cfg.n_identities).map(|_| style(&mut rng)).collect();
    // class list by proportion; rounding leftovers go to the real class
    let mut counts: Vec<usize> = cfg.mix.iter().map(|p| (p * cfg.n_samples as f64).floor() as usize).collect();
    counts[0] += cfg.n_samples - counts.iter().sum::<usize>();
    let mut classes: Vec<AvClass> = Vec::with_capacity(cfg.n_samples);
    for (c, &n) in AvClass::ALL.iter().zip(&counts) {
        classes.extend(std::iter::repeat_n(*c, n));
    }
    // identity i % n_ids over the class-sorted list spreads every class evenly
    let mut assignments: Vec<(AvClass, usize)> =
        classes.iter().enumerate().map(|(i, &c)| (c, i % cfg.n_identities)).collect();
    assignments.shuffle(&mut rng);
    let seg_len = ((cfg.fake_fraction * cfg.frames as f64).round() as usize).clamp(1, cfg.frames);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (class, identity) in assignments {
        let st = &styles[identity];
        let track = trajectory(cfg.frames, cfg.height, cfg.width, &mut rng);
        let mut segment = vec![0.0; cfg.frames];
        if class != AvClass::RealReal {
            let start = rng.random_range(0..=cfg.frames - seg_len);
            segment[start..start + seg_len].iter_mut().for_each(|s| *s = 1.0);
        }
        // independent sources per modality, so a doubly forged clip stays
        // uncorrelated; both are drawn for every clip to keep the random
        // stream independent of the class
        let foreign_v = trajectory(cfg.frames, cfg.height, cfg.width, &mut rng);
        let foreign_a = trajectory(cfg.frames, cfg.height, cfg.width, &mut rng);
        let mix_v = blend(&segment, cfg.delta, class.video_fake());
        let mix_a = blend(&segment, cfg.delta, class.audio_fake());
        let video = render_video(cfg, st, &track, &foreign_v, &mix_v, &mut rng);
        let audio = render_audio(cfg, st, &track, &foreign_a, &mix_a, &mut rng);
        samples.push(AvSample {
            video,
            audio,
            label: u8::from(class != AvClass::RealReal),
            frame_labels: segment,
            class,
            identity,
        });
    }
    let (train, test) = split(&samples, cfg.n_identities, cfg.test_fraction, cfg.seed);
    Ok(Dataset {
        cfg: cfg.clone(),
        samples,
        train,
        test,
    })
}

/// Holds out a random `test_fraction` of identities.
pub fn split(samples: &[AvSample], n_ids: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n_ids).collect();
    ids.shuffle(&mut substream(seed, "split"));
    let n_test = (test_fraction * n_ids as f64).round() as usize;
    let held: std::collections::BTreeSet<usize> = ids[..n_test].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if held.contains(&s.identity) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

const MAGIC: &str = "MACB-DATA-1";

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        write_str(w, MAGIC)?;
        write_str(w, &self.cfg.to_kv())?;
        write_u32(w, self.samples.len() as u32)?;
        for s in &self.samples {
            write_tensor(w, &s.video)?;
            write_tensor(w, &Tensor::from_vec(s.audio.clone()))?;
            write_tensor(w, &Tensor::from_vec(s.frame_labels.clone()))?;
            write_u32(w, u32::from(s.label))?;
            write_u32(w, s.class as u32)?;
            write_u32(w, s.identity as u32)?;
        }
        for part in [&self.train, &self.test] {
            write_u32(w, part.len() as u32)?;
            for &i in part {
                write_u32(w, i as u32)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        if read_str(r)? != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let cfg = GenConfig::from_kv(&KeyValues::parse(&read_str(r)?)?)?;
        let n = read_u32(r)? as usize;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let video = read_tensor(r)?;
            let audio = read_tensor(r)?.into_data();
            let frame_labels = read_tensor(r)?.into_data();
            let label = read_u32(r)? as u8;
            let class = AvClass::from_index(read_u32(r)? as usize)?;
            let identity = read_u32(r)? as usize;
            if video.shape() != [cfg.frames, 3, cfg.height, cfg.width] || frame_labels.len() != cfg.frames {
                return Err(Error::Format("sample shape disagrees with the header".into()));
            }
            samples.push(AvSample {
                video,
                audio,
                label,
                frame_labels,
                class,
                identity,
            });
        }
        let mut parts = [Vec::new(), Vec::new()];
        for part in &mut parts {
            let m = read_u32(r)? as usize;
            for _ in 0..m {
                let i = read_u32(r)? as usize;
                if i >= n {
                    return Err(Error::Format(format!("split index {i} out of range")));
                }
                part.push(i);
            }
        }
        let [train, test] = parts;
        Ok(Self { cfg, samples, train, test })
    }
}
