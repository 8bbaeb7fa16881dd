//! Small pre-norm transformer encoders for video patches and log-mel frames.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub positional: bool,
    // video input [T, C, H, W] and patch size (frames, rows, cols)
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: [usize; 3],
    // audio input [mel_frames, n_mels], mean-pooled in groups of `audio_pool` frames
    pub mel_frames: usize,
    pub n_mels: usize,
    pub audio_pool: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            positional: true,
            frames: 8,
            channels: 3,
            height: 16,
            width: 16,
            patch: [1, 8, 8],
            mel_frames: 32,
            n_mels: 64,
            audio_pool: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return bad("need at least one layer".into());
        }
        let [pt, ph, pw] = self.patch;
        if pt == 0 || ph == 0 || pw == 0 || !self.frames.is_multiple_of(pt) || !self.height.is_multiple_of(ph) || !self.width.is_multiple_of(pw) {
            return bad(format!(
                "patch {:?} does not tile video {}x{}x{}",
                self.patch, self.frames, self.height, self.width
            ));
        }
        if self.audio_pool == 0 || !self.mel_frames.is_multiple_of(self.audio_pool) {
            return bad(format!("{} mel frames not divisible by pool {}", self.mel_frames, self.audio_pool));
        }
        Ok(())
    }

    /// Video token grid (time, rows, cols).
    pub fn video_grid(&self) -> [usize; 3] {
        [
            self.frames / self.patch[0],
            self.height / self.patch[1],
            self.width / self.patch[2],
        ]
    }

    pub fn video_tokens(&self) -> usize {
        self.video_grid().iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch.iter().product::<usize>()
    }

    pub fn audio_tokens(&self) -> usize {
        self.mel_frames / self.audio_pool
    }
}

fn init_stack<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, cfg: &EncoderConfig, tokens: usize, input: usize, rng: &mut R) {
    let d = cfg.d_model;
    nn::init_linear(p, &format!("{name}.embed"), input, d, true, rng);
    // small random positions; zero would make them invisible to gradient checks
    p.insert(format!("{name}.pos"), Tensor::uniform(&[tokens, d], -0.02, 0.02, rng));
    for l in 0..cfg.n_layers {
        let b = format!("{name}.layer{l}");
        nn::init_layer_norm(p, &format!("{b}.ln1"), d);
        nn::init_mha(p, &format!("{b}.attn"), d, rng);
        nn::init_layer_norm(p, &format!("{b}.ln2"), d);
        nn::init_linear(p, &format!("{b}.ff1"), d, cfg.d_ff, true, rng);
        nn::init_linear(p, &format!("{b}.ff2"), cfg.d_ff, d, true, rng);
    }
    nn::init_layer_norm(p, &format!("{name}.ln_out"), d);
}

/// Creates the video (`enc_v.*`) and audio (`enc_a.*`) encoder parameters.
pub fn init<R: Rng + ?Sized>(p: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) {
    init_stack(p, "enc_v", cfg, cfg.video_tokens(), cfg.patch_dim(), rng);
    init_stack(p, "enc_a", cfg, cfg.audio_tokens(), cfg.n_mels, rng);
}

/// Output of one encoder.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, N, d]`
    pub tokens: Var,
    /// `[B, d]`, mean over tokens
    pub pooled: Var,
    /// Attention weights of the last layer, `[B, heads, N, N]`.
    pub last_attention: Var,
}

fn run_stack(g: &mut Graph, p: &ParamStore, name: &str, cfg: &EncoderConfig, x: Var) -> Result<Encoded> {
    let mut h = nn::linear(g, p, &format!("{name}.embed"), x)?;
    if cfg.positional {
        let pos = g.param(p, &format!("{name}.pos"))?;
        h = g.add(h, pos)?;
    }
    let mut attn = None;
    for l in 0..cfg.n_layers {
        let b = format!("{name}.layer{l}");
        let n = nn::layer_norm(g, p, &format!("{b}.ln1"), h)?;
        let (a, w) = nn::mha(g, p, &format!("{b}.attn"), n, cfg.n_heads)?;
        attn = Some(w);
        h = g.add(h, a)?;
        let n = nn::layer_norm(g, p, &format!("{b}.ln2"), h)?;
        let f = nn::linear(g, p, &format!("{b}.ff1"), n)?;
        let f = g.relu(f)?;
        let f = nn::linear(g, p, &format!("{b}.ff2"), f)?;
        h = g.add(h, f)?;
    }
    let tokens = nn::layer_norm(g, p, &format!("{name}.ln_out"), h)?;
    let pooled = g.mean_axis(tokens, 1)?;
    Ok(Encoded {
        tokens,
        pooled,
        last_attention: attn.expect("at least one layer"),
    })
}

/// Splits `[B, T, C, H, W]` video into patch tokens `[B, N, C·pt·ph·pw]`,
/// ordered by (time, row, col).
pub fn tokenize_video(g: &mut Graph, cfg: &EncoderConfig, video: Var) -> Result<Var> {
    let s = g.shape(video).to_vec();
    let expect = [cfg.frames, cfg.channels, cfg.height, cfg.width];
    if s.len() != 5 || s[1..] != expect {
        return Err(Error::shape("tokenize_video", format!("expected [B, {expect:?}], got {s:?}")));
    }
    let b = s[0];
    let [pt, ph, pw] = cfg.patch;
    let [gt, gh, gw] = cfg.video_grid();
    let r = g.reshape(video, &[b, gt, pt, cfg.channels, gh, ph, gw, pw])?;
    let r = g.permute(r, &[0, 1, 4, 6, 3, 2, 5, 7])?;
    g.reshape(r, &[b, gt * gh * gw, cfg.patch_dim()])
}

/// Mean-pools `[B, mel_frames, n_mels]` log-mel frames into `[B, tokens, n_mels]`.
pub fn tokenize_audio(g: &mut Graph, cfg: &EncoderConfig, logmel: Var) -> Result<Var> {
    let s = g.shape(logmel).to_vec();
    if s.len() != 3 || s[1] != cfg.mel_frames || s[2] != cfg.n_mels {
        return Err(Error::shape(
            "tokenize_audio",
            format!("expected [B, {}, {}], got {s:?}", cfg.mel_frames, cfg.n_mels),
        ));
    }
    let r = g.reshape(logmel, &[s[0], cfg.audio_tokens(), cfg.audio_pool, cfg.n_mels])?;
    g.mean_axis(r, 2)
}

/// Encodes a video batch `[B, T, C, H, W]`.
pub fn encode_video(g: &mut Graph, p: &ParamStore, cfg: &EncoderConfig, video: Var) -> Result<Encoded> {
    let x = tokenize_video(g, cfg, video)?;
    run_stack(g, p, "enc_v", cfg, x)
}

/// Encodes a log-mel batch `[B, mel_frames, n_mels]`.
pub fn encode_audio(g: &mut Graph, p: &ParamStore, cfg: &EncoderConfig, logmel: Var) -> Result<Encoded> {
    let x = tokenize_audio(g, cfg, logmel)?;
    run_stack(g, p, "enc_a", cfg, x)
}

/// Encodes pre-tokenized video `[B, N, patch_dim]`; used when token order is
/// manipulated directly.
pub fn encode_video_tokens(g: &mut Graph, p: &ParamStore, cfg: &EncoderConfig, tokens: Var) -> Result<Encoded> {
    run_stack(g, p, "enc_v", cfg, tokens)
}

pub fn encode_audio_tokens(g: &mut Graph, p: &ParamStore, cfg: &EncoderConfig, tokens: Var) -> Result<Encoded> {
    run_stack(g, p, "enc_a", cfg, tokens)
}
