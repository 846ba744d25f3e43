use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureError, FeatureKind, FeatureMatrix};
use crate::audio::{AudioBuffer, WORKING_RATE};

/// Framing and filterbank parameters shared by MFCC and LFCC.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub num_filters: usize,
    pub num_coeffs: usize,
    pub pre_emphasis: f64,
    pub fft_size: usize,
    /// Lower bound applied to filterbank energies before the log.
    pub floor: f64,
}

impl Default for CepstralConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            num_filters: 40,
            num_coeffs: 20,
            pre_emphasis: 0.97,
            fft_size: 512,
            floor: 1e-10,
        }
    }
}

impl CepstralConfig {
    pub fn frame_len(&self, rate: u32) -> usize {
        (self.frame_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, rate: u32) -> usize {
        (self.hop_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, rate: u32) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::BadConfig(m));
        let frame = self.frame_len(rate);
        if frame == 0 || self.hop_len(rate) == 0 {
            return bad("frame and hop must span at least one sample".into());
        }
        if self.num_filters == 0 || self.num_coeffs == 0 || self.num_coeffs > self.num_filters {
            return bad(format!(
                "need 1 <= num_coeffs ({}) <= num_filters ({})",
                self.num_coeffs, self.num_filters
            ));
        }
        if self.fft_size < frame {
            return bad(format!("fft_size {} shorter than frame {}", self.fft_size, frame));
        }
        if !(self.floor > 0.0) {
            return bad("log floor must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterScale {
    Mel,
    Linear,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over `0..=rate/2`, one row per filter, `fft_size/2 + 1` columns.
///
/// Edges are equally spaced on the HTK mel scale or linearly in Hz. Each row
/// is rescaled so its largest weight is exactly 1; a filter too narrow to
/// cover any bin gets a single unit weight at its nearest bin.
pub fn filterbank(scale: FilterScale, num_filters: usize, fft_size: usize, rate: u32) -> Vec<Vec<f64>> {
    let nyquist = rate as f64 / 2.0;
    let (lo, hi) = match scale {
        FilterScale::Mel => (hz_to_mel(0.0), hz_to_mel(nyquist)),
        FilterScale::Linear => (0.0, nyquist),
    };
    let edges: Vec<f64> = (0..num_filters + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (num_filters + 1) as f64)
        .map(|p| match scale {
            FilterScale::Mel => mel_to_hz(p),
            FilterScale::Linear => p,
        })
        .collect();
    let bins = fft_size / 2 + 1;
    let bin_hz = rate as f64 / fft_size as f64;

    edges
        .windows(3)
        .map(|e| {
            let (left, center, right) = (e[0], e[1], e[2]);
            let mut row: Vec<f64> = (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect();
            let peak = row.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                row.iter_mut().for_each(|w| *w /= peak);
            } else {
                let nearest = ((center / bin_hz).round() as usize).min(bins - 1);
                row[nearest] = 1.0;
            }
            row
        })
        .collect()
}

/// Orthonormal DCT-II basis, `n x n`, row `k` is the k-th cosine.
pub fn dct_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

fn cepstra(buf: &AudioBuffer, cfg: &CepstralConfig, scale: FilterScale) -> Result<FeatureMatrix, FeatureError> {
    let rate = buf.sample_rate();
    if rate != WORKING_RATE {
        return Err(FeatureError::WrongRate {
            expected: WORKING_RATE,
            actual: rate,
        });
    }
    cfg.validate(rate)?;
    let frame_len = cfg.frame_len(rate);
    let hop = cfg.hop_len(rate);
    let x = buf.samples();
    if x.len() < frame_len {
        return Err(FeatureError::TooShort {
            samples: x.len(),
            frame_len,
        });
    }

    let mut emphasized = Vec::with_capacity(x.len());
    emphasized.push(x[0]);
    emphasized.extend(x.windows(2).map(|w| w[1] - cfg.pre_emphasis * w[0]));

    let frames = 1 + (x.len() - frame_len) / hop;
    let window = hann(frame_len);
    let bank = filterbank(scale, cfg.num_filters, cfg.fft_size, rate);
    let dct = dct_basis(cfg.num_filters);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;

    let mut spectrum = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; bins];
    let mut log_energy = vec![0.0; cfg.num_filters];
    let mut data = Vec::with_capacity(frames * cfg.num_coeffs);
    for f in 0..frames {
        let start = f * hop;
        for (i, c) in spectrum.iter_mut().enumerate() {
            let v = if i < frame_len {
                emphasized[start + i] * window[i]
            } else {
                0.0
            };
            *c = Complex::new(v, 0.0);
        }
        fft.process(&mut spectrum);
        for (p, c) in power.iter_mut().zip(&spectrum) {
            *p = c.norm_sqr() / cfg.fft_size as f64;
        }
        for (e, filt) in log_energy.iter_mut().zip(&bank) {
            let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            *e = energy.max(cfg.floor).ln();
        }
        data.extend(
            dct.iter()
                .take(cfg.num_coeffs)
                .map(|basis| basis.iter().zip(&log_energy).map(|(b, e)| b * e).sum::<f64>()),
        );
    }

    let kind = match scale {
        FilterScale::Mel => FeatureKind::Mfcc,
        FilterScale::Linear => FeatureKind::Lfcc,
    };
    FeatureMatrix::new(data, frames, cfg.num_coeffs, kind)
}

/// Mel-frequency cepstral coefficients of a 16 kHz buffer.
pub fn mfcc(buf: &AudioBuffer, cfg: &CepstralConfig) -> Result<FeatureMatrix, FeatureError> {
    cepstra(buf, cfg, FilterScale::Mel)
}

/// Linear-frequency cepstral coefficients of a 16 kHz buffer.
pub fn lfcc(buf: &AudioBuffer, cfg: &CepstralConfig) -> Result<FeatureMatrix, FeatureError> {
    cepstra(buf, cfg, FilterScale::Linear)
}
