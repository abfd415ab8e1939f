//! Log-mel spectrogram extraction: Hann window, power spectrum via FFT,
//! triangular HTK-scale mel filterbank, natural log with a 1e-10 floor.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::frontend::wav::AudioClip;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct MelConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 80,
            win_ms: 20.0,
            hop_ms: 10.0,
        }
    }
}

/// A padded-free sequence of log-mel frames, stored as a (T, n_mels) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor<f32>,
}

impl FeatureSequence {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Shape(format!(
                "feature sequence must be (T, n_mels), got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Data("feature sequence holds non-finite values".into()));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn n_mels(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.frames
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensor(&self.frames, std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let frames = read_tensor(std::io::BufReader::new(file))?;
        FeatureSequence::new(frames)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank over FFT bins, peak weight 1, centers equally
/// spaced on the HTK mel scale between 0 Hz and Nyquist.
pub(crate) fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let mut bank = vec![vec![0.0; n_bins]; n_mels];
    for (m, filter) in bank.iter_mut().enumerate() {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for (k, w) in filter.iter_mut().enumerate() {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            *w = if f >= left && f <= center && center > left {
                (f - left) / (center - left)
            } else if f > center && f <= right && right > center {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
    }
    bank
}

/// Frequency span (left edge, right edge) of mel filter `m`.
pub fn mel_filter_span(n_mels: usize, sample_rate: u32, m: usize) -> (f64, f64) {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let left = mel_to_hz(mel_max * m as f64 / (n_mels + 1) as f64);
    let right = mel_to_hz(mel_max * (m + 2) as f64 / (n_mels + 1) as f64);
    (left, right)
}

/// Compute log-mel features. Frame count is floor((n_samples - win) / hop) + 1.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<FeatureSequence> {
    if cfg.n_mels == 0 {
        return Err(Error::Config("n_mels must be >= 1".into()));
    }
    let sr = clip.sample_rate as f64;
    let win = (sr * cfg.win_ms / 1000.0).round() as usize;
    let hop = (sr * cfg.hop_ms / 1000.0).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Config(format!(
            "window/hop too short: {}ms/{}ms at {} Hz",
            cfg.win_ms, cfg.hop_ms, clip.sample_rate
        )));
    }
    if clip.samples.len() < win {
        return Err(Error::Data(format!(
            "clip of {} samples is shorter than one {}-sample window",
            clip.samples.len(),
            win
        )));
    }
    let n_frames = (clip.samples.len() - win) / hop + 1;
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.n_mels, win, clip.sample_rate);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let n_bins = win / 2 + 1;
    let mut out = vec![0.0f32; n_frames * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut power = vec![0.0f64; n_bins];
    for fi in 0..n_frames {
        let start = fi * hop;
        for (b, (&s, &w)) in buf
            .iter_mut()
            .zip(clip.samples[start..start + win].iter().zip(&window))
        {
            *b = Complex::new(s as f64 * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(buf.iter().take(n_bins)) {
            *p = c.norm_sqr();
        }
        for (m, filter) in bank.iter().enumerate() {
            let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[fi * cfg.n_mels + m] = energy.max(LOG_FLOOR).ln() as f32;
        }
    }
    FeatureSequence::new(Tensor::from_vec(vec![n_frames, cfg.n_mels], out)?)
}
