use std::path::Path;

use super::{CorpusError, SAMPLE_RATE};

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Reads a PCM WAV file. Multichannel files yield their first channel.
pub fn load_clip(path: impl AsRef<Path>) -> Result<AudioClip, CorpusError> {
    let path = path.as_ref();
    let wav_err = |source| CorpusError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(CorpusError::SampleRate {
            path: path.to_path_buf(),
            found: spec.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    let channels = spec.channels.max(1) as usize;

    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
    };
    let samples = interleaved.into_iter().step_by(channels).collect();
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes 16-bit little-endian mono PCM.
pub fn write_clip(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let wav_err = |source| CorpusError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    {
        let mut w = writer.get_i16_writer(clip.samples.len() as u32);
        for &x in &clip.samples {
            w.write_sample(quantize(x));
        }
        w.flush().map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Debug, Clone)]
pub struct MixOutput {
    pub clip: AudioClip,
    /// Gain applied to the noise before summation.
    pub gain: f64,
    /// Fraction of output samples clipped to `[-1, 1]`.
    pub clipped_fraction: f64,
}

/// Adds `noise` to `signal` so the signal-to-noise ratio is `snr_db`.
pub fn mix_at_snr(
    signal: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
) -> Result<MixOutput, CorpusError> {
    if signal.len() != noise.len() || signal.sample_rate != noise.sample_rate {
        return Err(CorpusError::Degenerate(format!(
            "signal ({} samples @ {} Hz) and noise ({} samples @ {} Hz) differ",
            signal.len(),
            signal.sample_rate,
            noise.len(),
            noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(CorpusError::Degenerate(format!("snr {snr_db} dB")));
    }
    let rs = rms(&signal.samples);
    let rn = rms(&noise.samples);
    if rn <= 0.0 {
        return Err(CorpusError::Degenerate("noise has zero RMS".into()));
    }
    if rs <= 0.0 {
        return Err(CorpusError::Degenerate("signal has zero RMS".into()));
    }
    let gain = rs / rn * 10f64.powf(-snr_db / 20.0);

    let mut clipped = 0usize;
    let samples: Vec<f64> = signal
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(s, n)| {
            let y = s + gain * n;
            if y.abs() > 1.0 {
                clipped += 1;
            }
            y.clamp(-1.0, 1.0)
        })
        .collect();
    let clipped_fraction = clipped as f64 / samples.len().max(1) as f64;
    if clipped_fraction > 0.01 {
        log::warn!(
            "mix_at_snr: {:.2}% of samples clipped",
            clipped_fraction * 100.0
        );
    }
    Ok(MixOutput {
        clip: AudioClip::new(samples, signal.sample_rate),
        gain,
        clipped_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CLIP_LEN;

    fn sine(freq: f64, amp: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| {
                amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()
            })
            .collect()
    }

    fn alternating(amp: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| if i % 2 == 0 { amp } else { -amp })
            .collect()
    }

    #[test]
    fn equal_power_at_zero_db_has_unit_gain() {
        let s = AudioClip::new(alternating(0.1, 1000), SAMPLE_RATE);
        let n = AudioClip::new(
            alternating(0.1, 1000).into_iter().rev().collect(),
            SAMPLE_RATE,
        );
        let out = mix_at_snr(&s, &n, 0.0).unwrap();
        assert!((out.gain - 1.0).abs() < 1e-12);
    }

    #[test]
    fn twenty_db_gain_matches_measured_power_ratio() {
        let s = AudioClip::new(alternating(0.1, 4000), SAMPLE_RATE);
        let n = AudioClip::new(sine(123.0, 0.1 * 2f64.sqrt(), 4000), SAMPLE_RATE);
        let out = mix_at_snr(&s, &n, 20.0).unwrap();
        assert!((out.gain - 0.1).abs() < 1e-3, "gain {}", out.gain);
        // Recover the added noise from the output and measure the ratio.
        let added: Vec<f64> = out
            .clip
            .samples()
            .iter()
            .zip(s.samples())
            .map(|(y, x)| y - x)
            .collect();
        let measured = 20.0 * (rms(s.samples()) / rms(&added)).log10();
        assert!((measured - 20.0).abs() < 0.01, "measured {measured}");
    }

    #[test]
    fn zero_noise_is_degenerate() {
        let s = AudioClip::new(alternating(0.1, 100), SAMPLE_RATE);
        let n = AudioClip::new(vec![0.0; 100], SAMPLE_RATE);
        assert!(matches!(
            mix_at_snr(&s, &n, 10.0),
            Err(CorpusError::Degenerate(_))
        ));
    }

    #[test]
    fn clipping_is_counted() {
        let s = AudioClip::new(vec![0.9; 100], SAMPLE_RATE);
        let n = AudioClip::new(vec![0.9; 100], SAMPLE_RATE);
        let out = mix_at_snr(&s, &n, 0.0).unwrap();
        assert_eq!(out.clipped_fraction, 1.0);
        assert!(out.clip.samples().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn wav_round_trip_and_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = AudioClip::new(sine(440.0, 0.5, CLIP_LEN), SAMPLE_RATE);
        write_clip(&path, &clip).unwrap();
        let back = load_clip(&path).unwrap();
        assert_eq!(back.len(), 160_000);
        assert_eq!(back.duration_secs(), 10.0);
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
        // 44 byte header + 2 bytes per sample
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 44 + 2 * 160_000);
    }

    #[test]
    fn stereo_takes_first_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..1000i16 {
            w.write_sample(i).unwrap();
            w.write_sample(-7i16).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_clip(&path).unwrap();
        assert_eq!(clip.len(), 1000);
        for (i, &x) in clip.samples().iter().enumerate() {
            assert_eq!(x, i as f64 / 32768.0);
        }
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cd.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            load_clip(&path),
            Err(CorpusError::SampleRate { found: 44_100, .. })
        ));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        write_clip(&path, &AudioClip::new(vec![0.25; 1000], SAMPLE_RATE)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..1001]).unwrap();
        assert!(matches!(load_clip(&path), Err(CorpusError::Wav { .. })));
    }
}
