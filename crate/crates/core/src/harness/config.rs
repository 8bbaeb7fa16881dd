//! Flat `key = value` configuration files for data generation and training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::classify::ClassifyConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::macl::MaclConfig;
use crate::mslka::MslkaConfig;
use crate::pareto::{OptimizerKind, ParetoConfig};

/// Parsed `key = value` lines. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_scales(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|pair| {
            let (k, d) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("`{key}`: expected `K:d` pairs, got `{pair}`")))?;
            Ok((parse(key, k.trim())?, parse(key, d.trim())?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_samples: usize,
    pub n_identities: usize,
    /// Proportions of (real/real, fake video, fake audio, fake/fake).
    pub mix: [f64; 4],
    /// Forgery strength in (0, 1].
    pub delta: f64,
    /// Fraction of frames inside the forged segment.
    pub fake_fraction: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sample_rate: usize,
    /// Audio length in samples.
    pub audio_len: usize,
    pub video_noise: f64,
    pub audio_noise: f64,
    /// Amplitude of the synthesis artifacts left in forged segments, scaled by δ.
    pub artifact: f64,
    /// Fraction of identities held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_samples: 640,
            n_identities: 40,
            mix: [0.4, 0.2, 0.2, 0.2],
            delta: 0.6,
            fake_fraction: 0.5,
            frames: 8,
            height: 16,
            width: 16,
            sample_rate: 16000,
            audio_len: 5360,
            video_noise: 0.1,
            audio_noise: 0.05,
            artifact: 0.4,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gen: {m}")));
        if self.n_samples == 0 || self.n_identities == 0 {
            return bad("need samples and identities");
        }
        if self.mix.iter().any(|&p| p < 0.0) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("class mix must be nonnegative and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if !(self.fake_fraction > 0.0 && self.fake_fraction <= 1.0) {
            return bad("fake_fraction must lie in (0, 1]");
        }
        if self.frames == 0 || self.height < 4 || self.width < 4 {
            return bad("video must have frames and be at least 4x4");
        }
        if self.audio_len < self.frames {
            return bad("audio shorter than the frame count");
        }
        if self.artifact < 0.0 {
            return bad("artifact must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in &kv.entries {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "n_samples" => self.n_samples = parse(k, v)?,
            "n_identities" => self.n_identities = parse(k, v)?,
            "mix_real" => self.mix[0] = parse(k, v)?,
            "mix_fake_video" => self.mix[1] = parse(k, v)?,
            "mix_fake_audio" => self.mix[2] = parse(k, v)?,
            "mix_fake_both" => self.mix[3] = parse(k, v)?,
            "delta" => self.delta = parse(k, v)?,
            "fake_fraction" => self.fake_fraction = parse(k, v)?,
            "frames" => self.frames = parse(k, v)?,
            "height" => self.height = parse(k, v)?,
            "width" => self.width = parse(k, v)?,
            "sample_rate" => self.sample_rate = parse(k, v)?,
            "audio_len" => self.audio_len = parse(k, v)?,
            "video_noise" => self.video_noise = parse(k, v)?,
            "audio_noise" => self.audio_noise = parse(k, v)?,
            "artifact" => self.artifact = parse(k, v)?,
            "test_fraction" => self.test_fraction = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown data key `{k}`"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let m = &self.mix;
        let _ = write!(
            s,
            "n_samples = {}\nn_identities = {}\nmix_real = {}\nmix_fake_video = {}\nmix_fake_audio = {}\n\
             mix_fake_both = {}\ndelta = {}\nfake_fraction = {}\nframes = {}\nheight = {}\nwidth = {}\n\
             sample_rate = {}\naudio_len = {}\nvideo_noise = {}\naudio_noise = {}\nartifact = {}\ntest_fraction = {}\nseed = {}\n",
            self.n_samples,
            self.n_identities,
            m[0],
            m[1],
            m[2],
            m[3],
            self.delta,
            self.fake_fraction,
            self.frames,
            self.height,
            self.width,
            self.sample_rate,
            self.audio_len,
            self.video_noise,
            self.audio_noise,
            self.artifact,
            self.test_fraction,
            self.seed
        );
        s
    }
}

/// Switches matching the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flags {
    pub use_macl: bool,
    pub use_intra: bool,
    pub use_cross: bool,
    pub use_weights: bool,
    pub use_pareto: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            use_macl: true,
            use_intra: true,
            use_cross: true,
            use_weights: true,
            use_pareto: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub seed: u64,
    pub flags: Flags,
    /// Noise added to the second (augmented) view.
    pub view_noise: f64,
    pub encoder: EncoderConfig,
    pub macl: MaclConfig,
    pub fusion: FusionConfig,
    pub mslka: MslkaConfig,
    pub classify: ClassifyConfig,
    pub pareto: ParetoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-4,
            optimizer: "adam".into(),
            seed: 0,
            flags: Flags::default(),
            view_noise: 0.05,
            encoder: EncoderConfig::default(),
            macl: MaclConfig::default(),
            fusion: FusionConfig::default(),
            mslka: MslkaConfig::default(),
            classify: ClassifyConfig::default(),
            pareto: ParetoConfig::default(),
        }
    }
}

macro_rules! kv_table {
    ($($key:literal => $($field:ident).+ : $kind:ident),* $(,)?) => {
        impl TrainConfig {
            fn set_field(&mut self, k: &str, v: &str) -> Result<()> {
                match k {
                    $($key => self.$($field).+ = kv_table!(@parse $kind, k, v),)*
                    _ => return Err(Error::Config(format!("unknown training key `{k}`"))),
                }
                Ok(())
            }

            fn fields_kv(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", $key, kv_table!(@show $kind, self.$($field).+));)*
                s
            }
        }
    };
    (@parse num, $k:ident, $v:ident) => { parse($k, $v)? };
    (@parse bool, $k:ident, $v:ident) => { parse_bool($k, $v)? };
    (@parse text, $k:ident, $v:ident) => { $v.to_string() };
    (@parse scales, $k:ident, $v:ident) => { parse_scales($k, $v)? };
    (@show scales, $e:expr) => {
        $e.iter().map(|(k, d)| format!("{k}:{d}")).collect::<Vec<_>>().join(",")
    };
    (@show $kind:ident, $e:expr) => { $e };
}

kv_table! {
    "epochs" => epochs: num,
    "batch_size" => batch_size: num,
    "lr" => lr: num,
    "optimizer" => optimizer: text,
    "seed" => seed: num,
    "view_noise" => view_noise: num,
    "use_macl" => flags.use_macl: bool,
    "use_intra" => flags.use_intra: bool,
    "use_cross" => flags.use_cross: bool,
    "use_weights" => flags.use_weights: bool,
    "use_pareto" => flags.use_pareto: bool,
    "d_model" => encoder.d_model: num,
    "n_layers" => encoder.n_layers: num,
    "n_heads" => encoder.n_heads: num,
    "d_ff" => encoder.d_ff: num,
    "positional" => encoder.positional: bool,
    "frames" => encoder.frames: num,
    "height" => encoder.height: num,
    "width" => encoder.width: num,
    "mel_frames" => encoder.mel_frames: num,
    "n_mels" => encoder.n_mels: num,
    "audio_pool" => encoder.audio_pool: num,
    "d_proj" => macl.d_proj: num,
    "margin" => macl.margin: num,
    "queue_size" => macl.queue_size: num,
    "tau0" => macl.tau0: num,
    "tau_min" => macl.tau_min: num,
    "tau_max" => macl.tau_max: num,
    "tau_hidden" => macl.hidden: num,
    "attn_width" => macl.attn_width: num,
    "gate_width" => macl.gate_width: num,
    "nearest_k" => macl.nearest_k: bool,
    "nearest_count" => macl.nearest_count: num,
    "adaptive_tau" => macl.adaptive_tau: bool,
    "fusion_beta" => fusion.beta: num,
    "fusion_gamma" => fusion.gamma: num,
    "fusion_eps" => fusion.eps: num,
    "fusion_heads" => fusion.heads: num,
    "label_aware" => fusion.label_aware: bool,
    "k_max" => fusion.cluster.k_max: num,
    "cluster_iters" => fusion.cluster.max_iters: num,
    "cluster_tol" => fusion.cluster.tol: num,
    "cluster_ridge" => fusion.cluster.ridge: num,
    "channels" => mslka.channels: num,
    "n_groups" => mslka.n_groups: num,
    "scales" => mslka.scales: scales,
    "gate_kernel" => mslka.gate_kernel: num,
    "depth" => mslka.depth: num,
    "allow_odd_depth" => mslka.allow_odd_depth: bool,
    "rfmf_heads" => classify.heads: num,
    "dropout" => classify.dropout: num,
    "frame_hidden" => classify.frame_hidden: num,
    "eta_c" => classify.eta_c: num,
    "per_modality_heads" => classify.per_modality_sample_heads: bool,
    "lambda0" => pareto.lambda0: num,
    "kappa" => pareto.kappa: num,
    "pgd_steps" => pareto.pgd_steps: num,
    "pgd_lr" => pareto.pgd_lr: num,
    "tie_alpha" => pareto.tie_alpha: num,
    "pareto_noise" => pareto.noise: bool,
}

impl TrainConfig {
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "patch_t" => self.encoder.patch[0] = parse(k, v)?,
            "patch_h" => self.encoder.patch[1] = parse(k, v)?,
            "patch_w" => self.encoder.patch[2] = parse(k, v)?,
            _ => return self.set_field(k, v),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let [t, h, w] = self.encoder.patch;
        format!("{}patch_t = {t}\npatch_h = {h}\npatch_w = {w}\n", self.fields_kv())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in &kv.entries {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("need epochs >= 1 and batch_size >= 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.optimizer_kind()?;
        self.encoder.validate()?;
        self.macl.validate()?;
        self.fusion.validate()?;
        self.mslka.validate()?;
        self.classify.validate(self.encoder.d_model)?;
        self.pareto.validate()?;
        if self.macl.queue_size < self.batch_size {
            return Err(Error::Config("queue_size must be at least batch_size".into()));
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::adam(self.lr)),
            "sgd" => Ok(OptimizerKind::sgd(self.lr)),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (adam or sgd)"))),
        }
    }
}
