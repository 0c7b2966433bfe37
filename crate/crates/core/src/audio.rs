//! Waveform to normalized log-mel spectrogram.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// `time x mel` matrix of natural-log energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_bands(&self) -> usize {
        self.frames.cols()
    }
}

/// Dataset-level normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    /// Multiplier on `std` in the divisor. 1.0 divides by the standard deviation.
    pub divisor_scale: f64,
}

impl NormStats {
    pub const AUDIOSET: NormStats = NormStats {
        mean: -4.268,
        std: 4.569,
        divisor_scale: 1.0,
    };

    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        std: 1.0,
        divisor_scale: 1.0,
    };

    fn divisor(&self) -> Result<f64> {
        let d = self.std * self.divisor_scale;
        if !(self.std > 0.0 && d > 0.0 && d.is_finite()) {
            return Err(Error::invalid(format!(
                "normalization std must be positive, got std={} scale={}",
                self.std, self.divisor_scale
            )));
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    /// 25 ms Hann window, 10 ms shift, 128 bands over 0-8 kHz at 16 kHz.
    fn default() -> Self {
        FrontendConfig {
            n_mels: 128,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of full frames for `n` samples; a short input yields one padded frame.
pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if n <= win {
        1
    } else {
        (n - win) / hop + 1
    }
}

/// Symmetric Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Triangular filters on the mel axis, shape `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &FrontendConfig, sample_rate: u32) -> Tensor {
    let bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    let step = (mel_hi - mel_lo) / (cfg.n_mels + 1) as f64;
    let mut fb = Tensor::zeros(&[cfg.n_mels, bins]);
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    for m in 0..cfg.n_mels {
        let left = mel_lo + step * m as f64;
        let center = left + step;
        let right = center + step;
        for k in 0..bins {
            let mel = hz_to_mel(k as f64 * bin_hz);
            let w = if mel > left && mel <= center {
                (mel - left) / (center - left)
            } else if mel > center && mel < right {
                (right - mel) / (right - center)
            } else {
                0.0
            };
            fb.data_mut()[m * bins + k] = w;
        }
    }
    fb
}

/// Hann-windowed power spectrum of every frame, shape `frames x (n_fft/2 + 1)`.
pub fn power_spectrogram(wave: &Waveform, cfg: &FrontendConfig) -> Result<Tensor> {
    if wave.samples.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    if cfg.n_fft < cfg.win_length {
        return Err(Error::invalid("n_fft shorter than window"));
    }
    let frames = frame_count(wave.samples.len(), cfg.win_length, cfg.hop_length);
    let bins = cfg.n_fft / 2 + 1;
    let window = hann_window(cfg.win_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for f in 0..frames {
        let start = f * cfg.hop_length;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            let s = wave.samples.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::new(vec![frames, bins], out)
}

/// Log-mel spectrogram, `frames x n_mels`.
pub fn wav_to_logmel(wave: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            wave.sample_rate
        )));
    }
    let power = power_spectrogram(wave, cfg)?;
    let fb = mel_filterbank(cfg, wave.sample_rate).transpose()?;
    let mel = power.matmul(&fb)?;
    Ok(MelSpectrogram {
        frames: mel.map(|e| (e + cfg.log_floor).ln()),
    })
}

/// Zero-pads at the end or crops to exactly `target_frames`.
pub fn pad_or_crop_time(spec: &MelSpectrogram, target_frames: usize) -> MelSpectrogram {
    let bands = spec.num_bands();
    let keep = spec.num_frames().min(target_frames);
    let mut data = spec.frames.data()[..keep * bands].to_vec();
    data.resize(target_frames * bands, 0.0);
    MelSpectrogram {
        frames: Tensor::new(vec![target_frames, bands], data).expect("consistent"),
    }
}

pub fn normalize(spec: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    let d = stats.divisor()?;
    Ok(MelSpectrogram {
        frames: spec.frames.map(|x| (x - stats.mean) / d),
    })
}

pub fn denormalize(spec: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    let d = stats.divisor()?;
    Ok(MelSpectrogram {
        frames: spec.frames.map(|x| x * d + stats.mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn ten_seconds_gives_998_frames() {
        assert_eq!(frame_count(160_000, 400, 160), 998);
        let spec = wav_to_logmel(&tone(440.0, 10.0), &FrontendConfig::default()).unwrap();
        assert_eq!((spec.num_frames(), spec.num_bands()), (998, 128));
    }

    #[test]
    fn silence_is_log_floor() {
        let wave = Waveform {
            samples: vec![0.0; 4000],
            sample_rate: SAMPLE_RATE,
        };
        let spec = wav_to_logmel(&wave, &FrontendConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(spec.frames.data().iter().all(|&x| x == floor));
    }

    #[test]
    fn empty_and_wrong_rate_are_rejected() {
        let cfg = FrontendConfig::default();
        let empty = Waveform {
            samples: vec![],
            sample_rate: SAMPLE_RATE,
        };
        assert!(wav_to_logmel(&empty, &cfg).is_err());
        let wrong = Waveform {
            samples: vec![0.0; 10],
            sample_rate: 8000,
        };
        assert!(wav_to_logmel(&wrong, &cfg).is_err());
    }

    /// Direct O(n^2) DFT of one frame, independent of the FFT path.
    fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn pure_tone_matches_dft_oracle_and_peaks_at_its_band() {
        let cfg = FrontendConfig::default();
        let wave = tone(1000.0, 0.1);
        let spec = wav_to_logmel(&wave, &cfg).unwrap();
        let frame = 3;
        let win = hann_window(cfg.win_length);
        let windowed: Vec<f64> = (0..cfg.win_length)
            .map(|i| wave.samples[frame * cfg.hop_length + i] * win[i])
            .collect();
        let power = dft_power(&windowed, cfg.n_fft);
        let fb = mel_filterbank(&cfg, SAMPLE_RATE);
        let oracle: Vec<f64> = (0..cfg.n_mels)
            .map(|m| fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum())
            .collect();
        let peak_energy = oracle.iter().copied().fold(0.0, f64::max);
        for (m, o) in oracle.iter().enumerate() {
            let energy = spec.frames.at(frame, m).exp() - cfg.log_floor;
            approx::assert_abs_diff_eq!(energy, *o, epsilon = 1e-12 * peak_energy);
        }
        let peak = (0..cfg.n_mels)
            .max_by(|&a, &b| spec.frames.at(frame, a).total_cmp(&spec.frames.at(frame, b)))
            .unwrap();
        let step = hz_to_mel(8000.0) / 129.0;
        let center = |m: usize| mel_to_hz(step * (m + 1) as f64);
        assert!(
            center(peak - 1) < 1000.0 && 1000.0 < center(peak + 1),
            "peak band {peak} centered at {} Hz",
            center(peak)
        );
    }

    #[test]
    fn filterbank_rows_are_nonnegative_and_bins_touch_at_most_two_adjacent_bands() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg, SAMPLE_RATE);
        assert!(fb.data().iter().all(|&w| w >= 0.0));
        for k in 0..fb.cols() {
            let bands: Vec<usize> = (0..fb.rows()).filter(|&m| fb.at(m, k) > 0.0).collect();
            assert!(bands.len() <= 2, "bin {k} in {bands:?}");
            if bands.len() == 2 {
                assert_eq!(bands[1], bands[0] + 1);
            }
        }
    }

    #[test]
    fn pad_and_crop() {
        let spec = MelSpectrogram {
            frames: Tensor::full(&[998, 128], 1.0),
        };
        let padded = pad_or_crop_time(&spec, 1024);
        assert_eq!(padded.frames.shape(), &[1024, 128]);
        assert!(padded.frames.data()[998 * 128..].iter().all(|&x| x == 0.0));
        assert!(padded.frames.data()[..998 * 128].iter().all(|&x| x == 1.0));

        let exact = MelSpectrogram {
            frames: Tensor::full(&[1024, 128], 2.0),
        };
        assert_eq!(pad_or_crop_time(&exact, 1024), exact);

        let long = MelSpectrogram {
            frames: Tensor::new(vec![1100, 128], (0..1100 * 128).map(|i| i as f64).collect()).unwrap(),
        };
        let cropped = pad_or_crop_time(&long, 1024);
        assert_eq!(cropped.frames.data(), &long.frames.data()[..1024 * 128]);
    }

    #[test]
    fn normalization() {
        let spec = MelSpectrogram {
            frames: Tensor::full(&[4, 128], -4.268),
        };
        let z = normalize(&spec, &NormStats::AUDIOSET).unwrap();
        assert!(z.frames.data().iter().all(|&x| x == 0.0));

        let x = MelSpectrogram {
            frames: Tensor::new(vec![2, 2], vec![0.5, -3.0, 7.25, 1e-3]).unwrap(),
        };
        assert_eq!(normalize(&x, &NormStats::IDENTITY).unwrap(), x);
        let back = denormalize(&normalize(&x, &NormStats::AUDIOSET).unwrap(), &NormStats::AUDIOSET).unwrap();
        assert!(back.frames.max_abs_diff(&x.frames) < 1e-12);

        let bad = NormStats { std: 0.0, ..NormStats::AUDIOSET };
        assert!(normalize(&x, &bad).is_err());
    }

    #[test]
    fn normalize_is_affine() {
        let x = MelSpectrogram {
            frames: Tensor::new(vec![1, 3], vec![-2.0, 0.5, 4.0]).unwrap(),
        };
        let (a, b) = (2.5, -1.25);
        let ax_b = MelSpectrogram {
            frames: x.frames.map(|v| a * v + b),
        };
        let s = NormStats::AUDIOSET;
        let nx = normalize(&x, &s).unwrap();
        let nax = normalize(&ax_b, &s).unwrap();
        // normalize(ax+b) = a * normalize(x) + (b + (a-1) mean) / std
        let offset = (b + (a - 1.0) * s.mean) / s.std;
        for (p, q) in nax.frames.data().iter().zip(nx.frames.data()) {
            approx::assert_abs_diff_eq!(*p, a * q + offset, epsilon = 1e-12);
        }
    }
}
