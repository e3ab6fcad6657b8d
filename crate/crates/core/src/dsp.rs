//! Log-mel feature pipeline and context-window construction.
//!
//! STFT frames are Hann-windowed without center padding, so a clip of `n`
//! samples yields `1 + (n - frame_length) / hop` frames. Mel bands use the
//! HTK formula `2595 * log10(1 + f / 700)` and triangular filters with unit
//! peak. Log compression is natural log with an additive `1e-10` floor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioClip, SAMPLE_RATE};

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error("clip of {len} samples is shorter than one {frame_length}-sample frame")]
    ClipTooShort { len: usize, frame_length: usize },
    #[error("invalid STFT parameters: {0}")]
    Params(String),
    #[error("invalid mel filterbank: {0}")]
    Filterbank(String),
    #[error("spectrogram has {frames} frames; need at least {needed}")]
    Window { frames: usize, needed: usize },
    #[error("feature cache {path}: {reason}")]
    Cache { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub frame_length: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftParams {
    /// 64 ms frames with 50 % hop at 16 kHz.
    fn default() -> Self {
        Self {
            frame_length: 1024,
            hop: 512,
            window: WindowKind::Hann,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<(), DspError> {
        if !self.frame_length.is_power_of_two() || self.frame_length < 2 {
            return Err(DspError::Params(format!(
                "frame_length {} is not a power of two",
                self.frame_length
            )));
        }
        if self.hop == 0 || self.hop > self.frame_length {
            return Err(DspError::Params(format!(
                "hop {} not in 1..={}",
                self.hop, self.frame_length
            )));
        }
        Ok(())
    }

    pub fn fft_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    /// Frame count for `len` samples (no padding).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.frame_length).then(|| 1 + (len - self.frame_length) / self.hop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMelParams {
    pub stft: StftParams,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub floor: f64,
}

impl Default for LogMelParams {
    fn default() -> Self {
        Self {
            stft: StftParams::default(),
            n_mels: 128,
            f_min: 50.0,
            f_max: 8000.0,
            floor: 1e-10,
        }
    }
}

/// `T x F` log mel power; row `t` is frame `X_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    values: Array2<f64>,
}

impl LogMelSpectrogram {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bands(&self) -> usize {
        self.values.ncols()
    }

    /// Every `stride`-th frame, starting at frame 0.
    pub fn subsample_frames(&self, stride: usize) -> Array2<f64> {
        self.values.slice(s![..;stride.max(1), ..]).to_owned()
    }
}

/// Context-window images stacked row-wise, each flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindows {
    pub images: Array2<f64>,
    pub frames_per_image: usize,
    pub shift: usize,
    pub start_frames: Vec<usize>,
}

impl FeatureWindows {
    pub fn count(&self) -> usize {
        self.images.nrows()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Triangular mel filterbank, `n_mels x fft_bins`.
pub fn mel_filterbank(
    n_mels: usize,
    fft_bins: usize,
    sample_rate: f64,
    f_min: f64,
    f_max: f64,
) -> Result<Array2<f64>, DspError> {
    if !(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0) {
        return Err(DspError::Filterbank(format!(
            "need 0 <= f_min < f_max <= sr/2, got {f_min}..{f_max} at {sample_rate} Hz"
        )));
    }
    if n_mels == 0 || fft_bins < 2 {
        return Err(DspError::Filterbank(format!(
            "{n_mels} bands over {fft_bins} bins"
        )));
    }
    let n_fft = 2 * (fft_bins - 1);
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut fb = Array2::zeros((n_mels, fft_bins));
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..fft_bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let w = ((f - left) / (center - left)).min((right - f) / (right - center));
            if w > 0.0 {
                fb[[m, k]] = w;
            }
        }
        if fb.row(m).iter().all(|&w| w == 0.0) {
            return Err(DspError::Filterbank(format!(
                "band {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; too many bands for this resolution"
            )));
        }
    }
    Ok(fb)
}

/// Reusable log-mel front end: the FFT plan, window and filterbank are
/// built once and shared read-only across clips.
#[derive(Clone)]
pub struct LogMelExtractor {
    params: LogMelParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank_t: Array2<f64>,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl LogMelExtractor {
    pub fn new(params: LogMelParams) -> Result<Self, DspError> {
        params.stft.validate()?;
        if !(params.floor > 0.0) {
            return Err(DspError::Params("log floor must be > 0".into()));
        }
        let fb = mel_filterbank(
            params.n_mels,
            params.stft.fft_bins(),
            SAMPLE_RATE as f64,
            params.f_min,
            params.f_max,
        )?;
        let window = match params.stft.window {
            WindowKind::Hann => hann_window(params.stft.frame_length),
        };
        let fft = FftPlanner::new().plan_fft_forward(params.stft.frame_length);
        Ok(Self {
            params,
            window,
            fft,
            filterbank_t: fb.reversed_axes(),
        })
    }

    pub fn params(&self) -> &LogMelParams {
        &self.params
    }

    /// `F x fft_bins` filterbank.
    pub fn filterbank(&self) -> ArrayView2<'_, f64> {
        self.filterbank_t.t()
    }

    /// `T x (frame_length/2 + 1)` squared magnitudes of the windowed DFT.
    pub fn stft_power(&self, clip: &AudioClip) -> Result<Array2<f64>, DspError> {
        let stft = &self.params.stft;
        let x = clip.samples();
        let frames = stft.frame_count(x.len()).ok_or(DspError::ClipTooShort {
            len: x.len(),
            frame_length: stft.frame_length,
        })?;
        let bins = stft.fft_bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex::new(0.0, 0.0); stft.frame_length];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * stft.hop;
            for ((b, &s), &w) in buf
                .iter_mut()
                .zip(&x[start..start + stft.frame_length])
                .zip(&self.window)
            {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (o, c) in out.row_mut(t).iter_mut().zip(&buf[..bins]) {
                *o = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// Mel-band power before log compression, `T x F`.
    pub fn mel_power(&self, clip: &AudioClip) -> Result<Array2<f64>, DspError> {
        Ok(self.stft_power(clip)?.dot(&self.filterbank_t))
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<LogMelSpectrogram, DspError> {
        let floor = self.params.floor;
        let values = self.mel_power(clip)?.mapv_into(|p| (p + floor).ln());
        Ok(LogMelSpectrogram::new(values))
    }
}

pub fn stft_power(clip: &AudioClip, params: StftParams) -> Result<Array2<f64>, DspError> {
    LogMelExtractor::new(LogMelParams {
        stft: params,
        ..LogMelParams::default()
    })?
    .stft_power(clip)
}

pub fn log_mel(clip: &AudioClip, params: LogMelParams) -> Result<LogMelSpectrogram, DspError> {
    LogMelExtractor::new(params)?.log_mel(clip)
}

/// Context-window images `psi_t = (X_t, ..., X_{t+P-1})` at starts
/// `0, L, 2L, ...`; the count is `floor((T - P) / L)`.
pub fn frame_windows(
    spec: &LogMelSpectrogram,
    frames_per_image: usize,
    shift: usize,
) -> Result<FeatureWindows, DspError> {
    let t = spec.frames();
    let f = spec.bands();
    if frames_per_image == 0 || shift == 0 {
        return Err(DspError::Params(
            "window size and shift must be >= 1".into(),
        ));
    }
    if t < frames_per_image + shift {
        return Err(DspError::Window {
            frames: t,
            needed: frames_per_image + shift,
        });
    }
    let count = (t - frames_per_image) / shift;
    let start_frames: Vec<usize> = (0..count).map(|b| b * shift).collect();
    let mut images = Array2::zeros((count, frames_per_image * f));
    for (b, &start) in start_frames.iter().enumerate() {
        let block = spec.values.slice(s![start..start + frames_per_image, ..]);
        for (dst, src) in images.row_mut(b).iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    Ok(FeatureWindows {
        images,
        frames_per_image,
        shift,
        start_frames,
    })
}

/// Stride-1 concatenation of `context` consecutive frames,
/// `(T - context + 1) x (context * F)`.
pub fn ae_frames(spec: &LogMelSpectrogram, context: usize) -> Result<Array2<f64>, DspError> {
    let t = spec.frames();
    let f = spec.bands();
    if context == 0 {
        return Err(DspError::Params("context must be >= 1".into()));
    }
    if t < context {
        return Err(DspError::Window {
            frames: t,
            needed: context,
        });
    }
    let rows = t - context + 1;
    let mut out = Array2::zeros((rows, context * f));
    for r in 0..rows {
        let block = spec.values.slice(s![r..r + context, ..]);
        for (dst, src) in out.row_mut(r).iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    Ok(out)
}

const CACHE_MAGIC: [u8; 4] = *b"LMC1";

/// Writes a log-mel matrix as 32-bit little-endian floats behind a 16-byte
/// header: magic, T, F, reserved (all u32 LE after the magic).
pub fn write_feature_cache(
    path: impl AsRef<Path>,
    spec: &LogMelSpectrogram,
) -> Result<(), DspError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + 4 * spec.values.len());
    bytes.extend_from_slice(&CACHE_MAGIC);
    bytes.extend_from_slice(&(spec.frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.bands() as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for &v in spec.values.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let cache_err = |e: std::io::Error| DspError::Cache {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(cache_err)
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<LogMelSpectrogram, DspError> {
    let path = path.as_ref();
    let err = |reason: String| DspError::Cache {
        path: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(e.to_string()))?;
    if bytes.len() < 16 || bytes[..4] != CACHE_MAGIC {
        return Err(err("bad header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, f) = (word(4), word(8));
    if bytes.len() != 16 + 4 * t * f {
        return Err(err(format!("expected {} values for {t}x{f}", t * f)));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((t, f), values)
        .map(LogMelSpectrogram::new)
        .map_err(|e| err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CLIP_LEN;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, SAMPLE_RATE)
    }

    fn sine(freq: f64, amp: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| {
                amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()
            })
            .collect()
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn frame_count_follows_no_padding_arithmetic() {
        let p = stft_power(&clip(vec![0.0; CLIP_LEN]), StftParams::default()).unwrap();
        // 1 + floor((160000 - 1024) / 512)
        assert_eq!(p.dim(), (1 + 158_976 / 512, 513));
        assert_eq!(p.nrows(), 311);
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_clip_is_an_error() {
        assert!(matches!(
            stft_power(&clip(vec![0.0; 1000]), StftParams::default()),
            Err(DspError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn bad_stft_params_are_rejected() {
        let p = StftParams {
            frame_length: 1000,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = StftParams {
            hop: 2048,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let p = stft_power(&clip(sine(1000.0, 0.5, CLIP_LEN)), StftParams::default()).unwrap();
        // 1000 Hz * 1024 / 16000 = bin 64
        for row in p.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 64);
        }
    }

    #[test]
    fn parseval_on_windowed_frames() {
        let x = noise(4096, 3);
        let params = StftParams::default();
        let p = stft_power(&clip(x.clone()), params).unwrap();
        let w = hann_window(params.frame_length);
        let n = params.frame_length;
        for t in 0..p.nrows() {
            let energy: f64 = (0..n).map(|i| (x[t * params.hop + i] * w[i]).powi(2)).sum();
            let row = p.row(t);
            let full = row[0] + row[n / 2] + 2.0 * row.slice(s![1..n / 2]).sum();
            assert!((full / n as f64 - energy).abs() <= 1e-6 * energy);
        }
    }

    #[test]
    fn mel_formula() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_shape_and_rows() {
        let fb = mel_filterbank(128, 513, 16000.0, 50.0, 8000.0).unwrap();
        assert_eq!(fb.dim(), (128, 513));
        for row in fb.rows() {
            assert!(row.sum() > 0.0);
            assert!(row.iter().all(|&w| w >= 0.0));
            let support: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(k, _)| k)
                .collect();
            assert_eq!(support.last().unwrap() - support[0] + 1, support.len());
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(row.iter().filter(|&&w| w == max).count(), 1);
        }
    }

    #[test]
    fn filterbank_rejects_bad_ranges_and_overfull_banks() {
        assert!(mel_filterbank(128, 513, 16000.0, 8000.0, 50.0).is_err());
        assert!(mel_filterbank(128, 513, 16000.0, 50.0, 9000.0).is_err());
        assert!(matches!(
            mel_filterbank(512, 513, 16000.0, 50.0, 8000.0),
            Err(DspError::Filterbank(_))
        ));
    }

    #[test]
    fn silent_clip_hits_the_floor() {
        let lm = log_mel(&clip(vec![0.0; CLIP_LEN]), LogMelParams::default()).unwrap();
        assert_eq!(lm.values().dim(), (311, 128));
        let floor = 1e-10f64.ln();
        assert!(lm.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn doubling_amplitude_shifts_by_log_four() {
        let x = noise(16_000, 9);
        let ex = LogMelExtractor::new(LogMelParams::default()).unwrap();
        let a = ex.mel_power(&clip(x.clone())).unwrap();
        let b = ex
            .mel_power(&clip(x.iter().map(|v| 2.0 * v).collect()))
            .unwrap();
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert!((pb.ln() - pa.ln() - 4f64.ln()).abs() < 1e-9);
        }
    }

    fn ramp_spec(t: usize, f: usize) -> LogMelSpectrogram {
        LogMelSpectrogram::new(Array2::from_shape_fn((t, f), |(i, j)| {
            (i * 1000 + j) as f64
        }))
    }

    #[test]
    fn windows_for_a_full_clip() {
        let w = frame_windows(&ramp_spec(311, 128), 64, 8).unwrap();
        assert_eq!(w.count(), 30);
        assert_eq!(w.start_frames, (0..30).map(|b| b * 8).collect::<Vec<_>>());
        assert_eq!(*w.start_frames.last().unwrap(), 232);
        assert_eq!(w.images.ncols(), 64 * 128);
    }

    #[test]
    fn single_window_and_boundary() {
        let w = frame_windows(&ramp_spec(72, 4), 64, 8).unwrap();
        assert_eq!(w.count(), 1);
        assert_eq!(w.start_frames, vec![0]);
        assert!(matches!(
            frame_windows(&ramp_spec(64, 4), 64, 8),
            Err(DspError::Window { .. })
        ));
    }

    #[test]
    fn window_count_matches_start_enumeration() {
        let (p, l) = (64usize, 8usize);
        for t in (p + l)..=(p + 50 * l) {
            let enumerated: Vec<usize> = (0..=t - p)
                .filter(|s| s % l == 0)
                .take((t - p) / l)
                .collect();
            let w = frame_windows(&ramp_spec(t, 2), p, l).unwrap();
            assert_eq!(w.start_frames, enumerated, "T={t}");
        }
    }

    #[test]
    fn ae_frames_shape_and_identity() {
        let spec = ramp_spec(311, 128);
        assert_eq!(ae_frames(&spec, 5).unwrap().dim(), (307, 640));
        assert_eq!(ae_frames(&spec, 1).unwrap(), *spec.values());
        assert!(ae_frames(&ramp_spec(4, 128), 5).is_err());
        let f = ae_frames(&spec, 5).unwrap();
        assert_eq!(f[[10, 128 * 2 + 3]], spec.values()[[12, 3]]);
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lmc");
        let spec = LogMelSpectrogram::new(Array2::from_shape_fn((7, 3), |(i, j)| {
            i as f64 - 0.25 * j as f64
        }));
        write_feature_cache(&path, &spec).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 21);
        assert_eq!(&bytes[..4], b"LMC1");
        assert_eq!(read_feature_cache(&path).unwrap(), spec);
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(read_feature_cache(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn window_images_equal_submatrices(t in 10usize..120, p in 1usize..40, l in 1usize..12, f in 1usize..6) {
            prop_assume!(t >= p + l);
            let spec = ramp_spec(t, f);
            let w = frame_windows(&spec, p, l).unwrap();
            prop_assert_eq!(w.count(), (t - p) / l);
            for (b, &start) in w.start_frames.iter().enumerate() {
                let sub = spec.values().slice(s![start..start + p, ..]);
                let img = w.images.row(b);
                for (a, c) in img.iter().zip(sub.iter()) {
                    prop_assert_eq!(a.to_bits(), c.to_bits());
                }
            }
        }
    }
}
