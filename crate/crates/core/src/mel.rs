//! Log-mel frontend: 16 kHz PCM to 96x64 patches.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frontend parameters. Durations are stored in samples at `sample_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub segment: usize,
    pub segments: usize,
    /// Reflection padding appended to each segment.
    pub end_pad: usize,
    pub log_offset: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            fft_size: 512,
            n_mels: 64,
            f_min: 125.0,
            f_max: 7500.0,
            segment: 15_360,
            segments: 4,
            end_pad: 240,
            log_offset: 0.01,
        }
    }
}

impl MelConfig {
    pub fn clip_samples(&self) -> usize {
        self.segment * self.segments
    }

    pub fn frames_per_segment(&self) -> usize {
        (self.segment + self.end_pad - self.window) / self.hop + 1
    }

    pub fn fft_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Triangular filters on the mel scale, `[fft_bins, n_mels]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor<f64>> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    if !(cfg.f_min >= 0.0 && cfg.f_min < cfg.f_max && cfg.f_max <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "band edges must satisfy 0 <= f_min < f_max <= {nyquist}, got {} and {}",
            cfg.f_min, cfg.f_max
        )));
    }
    if cfg.n_mels == 0 || cfg.fft_size < 2 {
        return Err(Error::InvalidArgument("n_mels and fft_size must be positive".into()));
    }
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2).map(|i| lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64).collect();
    let bins = cfg.fft_bins();
    let mut fb = Tensor::zeros(vec![bins, cfg.n_mels]);
    let data = fb.data_mut();
    for k in 0..bins {
        let m = hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64);
        for b in 0..cfg.n_mels {
            let (l, c, u) = (edges[b], edges[b + 1], edges[b + 2]);
            let w = if m > l && m <= c {
                (m - l) / (c - l)
            } else if m > c && m < u {
                (u - m) / (u - c)
            } else {
                0.0
            };
            data[k * cfg.n_mels + b] = w;
        }
    }
    Ok(fb)
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (1..=cfg.n_mels).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect()
}

/// Reusable frontend with a planned FFT and a cached filterbank.
pub struct LogMel {
    cfg: MelConfig,
    filterbank: Tensor<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMel {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.window > cfg.fft_size || cfg.hop == 0 || cfg.window == 0 {
            return Err(Error::InvalidArgument("window must be nonzero and fit the transform".into()));
        }
        if cfg.end_pad >= cfg.segment {
            return Err(Error::InvalidArgument("end pad must be shorter than a segment".into()));
        }
        if cfg.segment + cfg.end_pad < cfg.window {
            return Err(Error::InvalidArgument("segment shorter than one window".into()));
        }
        let filterbank = mel_filterbank(&cfg)?;
        let n = cfg.window as f64;
        let window = (0..cfg.window).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { cfg, filterbank, window, fft })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Log-mel rows for every full window of `signal`, row-major `[frames, n_mels]`.
    pub fn frames(&self, signal: &[f32]) -> Vec<f32> {
        let cfg = &self.cfg;
        if signal.len() < cfg.window {
            return Vec::new();
        }
        let count = (signal.len() - cfg.window) / cfg.hop + 1;
        let bins = cfg.fft_bins();
        let fb = self.filterbank.data();
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut mag = vec![0.0f64; bins];
        let mut out = Vec::with_capacity(count * cfg.n_mels);
        for f in 0..count {
            let start = f * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < cfg.window { signal[start + i] as f64 * self.window[i] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for b in 0..cfg.n_mels {
                let e: f64 = (0..bins).map(|k| mag[k] * fb[k * cfg.n_mels + b]).sum();
                out.push((e + cfg.log_offset).ln() as f32);
            }
        }
        out
    }

    /// Pads or crops to the clip length, splits into segments, reflection-pads
    /// each and returns one `[frames, n_mels, 1]` patch per segment.
    pub fn patches(&self, pcm: &[f32]) -> Result<Vec<Tensor<f32>>> {
        if pcm.is_empty() {
            return Err(Error::Empty("PCM input".into()));
        }
        let cfg = &self.cfg;
        let mut clip = pcm[..pcm.len().min(cfg.clip_samples())].to_vec();
        clip.resize(cfg.clip_samples(), 0.0);
        let frames = cfg.frames_per_segment();
        clip.chunks_exact(cfg.segment)
            .map(|seg| {
                let mut padded = Vec::with_capacity(seg.len() + cfg.end_pad);
                padded.extend_from_slice(seg);
                padded.extend((0..cfg.end_pad).map(|j| seg[seg.len() - 2 - j]));
                Tensor::new(vec![frames, cfg.n_mels, 1], self.frames(&padded))
            })
            .collect()
    }
}

pub fn log_mel_patches(pcm: &[f32], cfg: &MelConfig) -> Result<Vec<Tensor<f32>>> {
    LogMel::new(cfg.clone())?.patches(pcm)
}

/// Linear-interpolation resampler.
pub fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let n = ((x.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let ratio = from as f64 / to as f64;
    (0..n)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = x[j.min(x.len() - 1)] as f64;
            let b = x[(j + 1).min(x.len() - 1)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}

/// Reads a WAV file as mono samples in [-1, 1], averaging channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 / scale)).collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
    };
    let ch = spec.channels.max(1) as usize;
    let mono = samples.chunks(ch).map(|c| c.iter().sum::<f32>() / c.len() as f32).collect();
    Ok((mono, spec.sample_rate))
}

/// Reads a WAV file at the configured rate, resampling only when allowed.
pub fn load_pcm(path: impl AsRef<Path>, cfg: &MelConfig, allow_resample: bool) -> Result<Vec<f32>> {
    let (pcm, rate) = read_wav(path)?;
    if rate == cfg.sample_rate {
        Ok(pcm)
    } else if allow_resample {
        Ok(resample_linear(&pcm, rate, cfg.sample_rate))
    } else {
        Err(Error::Unsupported(format!(
            "sample rate {rate} Hz, expected {} Hz (enable resampling to convert)",
            cfg.sample_rate
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> Vec<f32> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() as f32 * 0.5).collect()
    }

    #[test]
    fn clip_gives_four_patches() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.frames_per_segment(), 96);
        let p = log_mel_patches(&tone(440.0, 61_440), &cfg).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|t| t.shape() == [96, 64, 1]));
    }

    #[test]
    fn short_and_long_clips_keep_shape() {
        let cfg = MelConfig::default();
        for n in [1, 500, 20_000, 100_000] {
            let p = log_mel_patches(&tone(300.0, n), &cfg).unwrap();
            assert_eq!(p.len(), 4);
            assert!(p.iter().all(|t| t.shape() == [96, 64, 1]));
        }
    }

    #[test]
    fn silence_is_log_offset() {
        let cfg = MelConfig::default();
        let floor = (0.01f64).ln() as f32;
        for p in log_mel_patches(&vec![0.0; 61_440], &cfg).unwrap() {
            assert!(p.data().iter().all(|&v| v == floor));
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(log_mel_patches(&[], &MelConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn tone_lands_in_nearest_band() {
        let cfg = MelConfig::default();
        // independent centers: 66 evenly spaced mel points, drop the ends
        let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
        let (lo, hi) = (mel(125.0), mel(7500.0));
        let want = (0..64)
            .min_by(|&a, &b| {
                let ca = lo + (hi - lo) * (a + 1) as f64 / 65.0;
                let cb = lo + (hi - lo) * (b + 1) as f64 / 65.0;
                (ca - mel(1000.0)).abs().partial_cmp(&(cb - mel(1000.0)).abs()).unwrap()
            })
            .unwrap();
        let p = log_mel_patches(&tone(1000.0, 61_440), &cfg).unwrap();
        for patch in &p {
            for row in patch.data().chunks(64) {
                let arg = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                assert_eq!(arg, want);
            }
        }
    }

    #[test]
    fn filterbank_shape_and_support() {
        let fb = mel_filterbank(&MelConfig::default()).unwrap();
        assert_eq!(fb.shape(), [257, 64]);
        let d = fb.data();
        let support = |b: usize| -> Vec<usize> { (0..257).filter(|&k| d[k * 64 + b] > 0.0).collect() };
        for b in 0..64 {
            let s = support(b);
            assert!(!s.is_empty());
            assert_eq!(s.last().unwrap() - s[0] + 1, s.len(), "band {b} not contiguous");
            assert!((0..257).all(|k| d[k * 64 + b] >= 0.0));
        }
        for b in 0..63 {
            let (a, c) = (support(b), support(b + 1));
            assert!(a.iter().any(|k| c.contains(k)), "bands {b} and {} disjoint", b + 1);
        }
    }

    #[test]
    fn out_of_band_energy_vanishes() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        for k in 0..257 {
            let f = k as f64 * 16_000.0 / 512.0;
            if f <= 125.0 || f >= 7500.0 {
                assert!(fb.data()[k * 64..(k + 1) * 64].iter().all(|&w| w == 0.0), "bin {k}");
            }
        }
    }

    #[test]
    fn invalid_edges() {
        let cfg = MelConfig { f_max: 9000.0, ..MelConfig::default() };
        assert!(mel_filterbank(&cfg).is_err());
        let cfg = MelConfig { f_min: 8000.0, f_max: 7000.0, ..MelConfig::default() };
        assert!(mel_filterbank(&cfg).is_err());
    }

    #[test]
    fn one_hop_shift_moves_one_row() {
        let cfg = MelConfig::default();
        let mut rng = 12345u64;
        let x: Vec<f32> = (0..61_440 + 160)
            .map(|_| {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((rng >> 33) as f32 / (1u64 << 31) as f32) - 0.5
            })
            .collect();
        let a = log_mel_patches(&x, &cfg).unwrap();
        let b = log_mel_patches(&x[160..], &cfg).unwrap();
        let (a, b) = (a[0].data(), b[0].data());
        for row in 0..93 {
            for m in 0..64 {
                assert!((a[(row + 1) * 64 + m] - b[row * 64 + m]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wav_rate_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..800 {
            w.write_sample((i % 100) as i16 * 100).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let cfg = MelConfig::default();
        assert!(matches!(load_pcm(&path, &cfg, false), Err(Error::Unsupported(_))));
        let pcm = load_pcm(&path, &cfg, true).unwrap();
        assert_eq!(pcm.len(), 1600);
        let (raw, rate) = read_wav(&path).unwrap();
        assert_eq!(rate, 8000);
        assert!((raw[1] - 50.0 / 32768.0).abs() < 1e-7);
    }

    #[test]
    fn resample_identity_and_ramp() {
        let x: Vec<f32> = (0..100).map(|i| i as f32).collect();
        assert_eq!(resample_linear(&x, 16_000, 16_000), x);
        let y = resample_linear(&x, 8_000, 16_000);
        assert_eq!(y.len(), 200);
        assert!((y[3] - 1.5).abs() < 1e-6);
    }
}
