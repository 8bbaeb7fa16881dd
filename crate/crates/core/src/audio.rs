//! Log-mel spectrogram frontend: Hann-windowed STFT, triangular mel filter
//! bank over power spectra, and a floored logarithm.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: f64,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub floor: f64,
    /// Use the radix-2 FFT when `fft_size` is a power of two.
    pub use_fft: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000.0,
            window: 400,
            hop: 160,
            fft_size: 512,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            floor: 1e-6,
            use_fft: true,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mel: {m}")));
        if self.hop == 0 || self.hop > self.window || self.window > self.fft_size {
            return bad("need 0 < hop <= window <= fft_size");
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate / 2.0) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        if self.n_mels < 2 {
            return bad("need at least 2 mel bands");
        }
        if !(self.floor > 0.0) {
            return bad("floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of STFT frames for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }

    /// Signal length giving exactly `frames` STFT frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        self.window + (frames.max(1) - 1) * self.hop
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitudes of bins `0..=n/2` of the DFT of real `x`, by direct summation.
pub fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                // reduce the phase index mod n to keep the angle small
                let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Same as [`dft_magnitudes`] via iterative radix-2 Cooley–Tukey. `x.len()` must be a power of two.
pub fn fft_magnitudes(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if !n.is_power_of_two() {
        return Err(Error::invalid(format!("radix-2 FFT needs a power-of-two length, got {n}")));
    }
    let mut re = x.to_vec();
    let mut im = vec![0.0; n];
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        if j > i {
            re.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let ang = -2.0 * PI * k as f64 / len as f64;
            let (wr, wi) = (ang.cos(), ang.sin());
            for start in (0..n).step_by(len) {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len *= 2;
    }
    Ok((0..=n / 2).map(|k| (re[k] * re[k] + im[k] * im[k]).sqrt()).collect())
}

/// Short-time Fourier transform magnitudes `[frames, fft_size/2 + 1]`.
pub fn stft(signal: &[f64], cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    if signal.len() < cfg.window {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {}-sample window",
            signal.len(),
            cfg.window
        )));
    }
    let frames = cfg.n_frames(signal.len());
    let win = hann(cfg.window);
    let bins = cfg.n_bins();
    let radix2 = cfg.use_fft && cfg.fft_size.is_power_of_two();
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![0.0; cfg.fft_size];
    for f in 0..frames {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.window { signal[start + i] * win[i] } else { 0.0 };
        }
        let mags = if radix2 { fft_magnitudes(&buf)? } else { dft_magnitudes(&buf) };
        out.extend(mags);
    }
    Tensor::new(vec![frames, bins], out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters `[n_mels, fft_size/2 + 1]`, with peaks equally
/// spaced on the mel scale between `f_min` and `f_max`.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut h = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * cfg.sample_rate / cfg.fft_size as f64;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            h[m * bins + k] = up.min(down).max(0.0);
        }
        if h[m * bins..(m + 1) * bins].iter().all(|&v| v <= 0.0) {
            return Err(Error::Config(format!(
                "mel band {m} covers no FFT bin; use fewer mel bands or a larger fft_size"
            )));
        }
    }
    Tensor::new(vec![cfg.n_mels, bins], h)
}

/// `M(t, m) = Σ_f H(m, f) |S(t, f)|²`
pub fn mel_project(mag: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let (ms, fs) = (mag.shape(), filters.shape());
    if ms.len() != 2 || fs.len() != 2 || ms[1] != fs[1] {
        return Err(Error::shape("mel_project", format!("magnitudes {ms:?}, filters {fs:?}")));
    }
    let (t, bins, n_mels) = (ms[0], ms[1], fs[0]);
    let mut out = vec![0.0; t * n_mels];
    for i in 0..t {
        let row = &mag.data()[i * bins..(i + 1) * bins];
        for m in 0..n_mels {
            let fr = &filters.data()[m * bins..(m + 1) * bins];
            out[i * n_mels + m] = fr.iter().zip(row).map(|(h, s)| h * s * s).sum();
        }
    }
    Tensor::new(vec![t, n_mels], out)
}

/// `log(M + floor)`
pub fn log_mel(m: &Tensor, floor: f64) -> Result<Tensor> {
    if !(floor > 0.0) {
        return Err(Error::invalid("log-mel floor must be positive"));
    }
    Ok(m.map(|v| (v + floor).ln()))
}

/// Precomputed filter bank plus config: signal → log-mel `[frames, n_mels]`.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub cfg: MelConfig,
    filters: Tensor,
}

impl Frontend {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        let filters = mel_filterbank(&cfg)?;
        Ok(Self { cfg, filters })
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    pub fn log_mel(&self, signal: &[f64]) -> Result<Tensor> {
        let mag = stft(signal, &self.cfg)?;
        let m = mel_project(&mag, &self.filters)?;
        log_mel(&m, self.cfg.floor)
    }
}
