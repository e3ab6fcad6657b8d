use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::index::{DatasetIndex, IndexEntry};
use super::{
    format_clip_path, mix_at_snr, rms, write_clip, AudioClip, ClipMeta, Condition, CorpusError,
    Domain, Split, CLIP_LEN, MAX_SECTION, SAMPLE_RATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    White,
    Pink,
}

/// Generator knobs for one (machine, section, domain) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub fundamental_hz: f64,
    pub harmonic_count: u32,
    pub snr_db: f64,
    pub noise_color: NoiseColor,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.fundamental_hz > 0.0 && self.fundamental_hz < SAMPLE_RATE as f64 / 2.0) {
            return Err(CorpusError::InvalidSpec(format!(
                "fundamental {} Hz outside (0, Nyquist)",
                self.fundamental_hz
            )));
        }
        if self.harmonic_count < 1 {
            return Err(CorpusError::InvalidSpec(
                "harmonic_count must be >= 1".into(),
            ));
        }
        if !self.snr_db.is_finite() {
            return Err(CorpusError::InvalidSpec(format!("snr {} dB", self.snr_db)));
        }
        Ok(())
    }
}

/// Maps a source-domain spec to its target-domain counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub fundamental_ratio: f64,
    pub snr_offset_db: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            fundamental_ratio: 0.5,
            snr_offset_db: -5.0,
        }
    }
}

impl DomainShift {
    pub fn apply(&self, source: &DomainSpec) -> DomainSpec {
        DomainSpec {
            fundamental_hz: source.fundamental_hz * self.fundamental_ratio,
            snr_db: source.snr_db + self.snr_offset_db,
            ..source.clone()
        }
    }
}

/// Harmonic stack RMS before noise is added.
const HARMONIC_RMS: f64 = 0.1;
const AM_DEPTH: f64 = 0.1;
/// Frequency factor applied to the 2nd partial of anomalous clips.
pub const ANOMALY_DETUNE: f64 = 1.06;
const CLICK_LEN: usize = 48;
const CLICK_DECAY_SAMPLES: f64 = 10.0;
const CLICK_PEAK: f64 = 0.3;
/// Per-clip spread of normal sounds: partial gains vary with this standard
/// deviation (dB) and the SNR uniformly within +-`SNR_JITTER_DB`.
const PARTIAL_GAIN_JITTER_DB: f64 = 1.5;
const SNR_JITTER_DB: f64 = 1.5;
const CLICK_PERIOD_SECS: (f64, f64) = (0.15, 0.3);

/// Synthesizes one 10 s clip. Deterministic in `(spec, condition, seed)`.
///
/// Normal clips are a 1/h harmonic stack with slow amplitude modulation plus
/// colored noise at `spec.snr_db`. Anomalous clips additionally detune the
/// 2nd partial and carry a periodic train of short broadband clicks.
pub fn synth_clip(
    spec: &DomainSpec,
    condition: Condition,
    seed: u64,
) -> Result<AudioClip, CorpusError> {
    spec.validate()?;
    let anomalous = match condition {
        Condition::Normal => false,
        Condition::Anomaly => true,
        Condition::Unknown => {
            return Err(CorpusError::InvalidSpec(
                "cannot synthesize a clip with unknown condition".into(),
            ))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let nyquist = sr / 2.0;

    let partials: Vec<(f64, f64, f64)> = (1..=spec.harmonic_count)
        .map(|h| {
            let mut freq = spec.fundamental_hz * h as f64;
            if anomalous && h == 2 {
                freq *= ANOMALY_DETUNE;
            }
            let phase = rng.random::<f64>() * 2.0 * PI;
            let jitter_db: f64 = rng.sample::<f64, _>(StandardNormal) * PARTIAL_GAIN_JITTER_DB;
            (freq, 10f64.powf(jitter_db / 20.0) / h as f64, phase)
        })
        .filter(|&(f, _, _)| f < nyquist)
        .collect();
    let am_rate = rng.random_range(1.5..3.5);
    let am_phase = rng.random::<f64>() * 2.0 * PI;

    let mut signal: Vec<f64> = (0..CLIP_LEN)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 1.0 + AM_DEPTH * (2.0 * PI * am_rate * t + am_phase).sin();
            env * partials
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>()
        })
        .collect();
    let scale = HARMONIC_RMS / rms(&signal);
    signal.iter_mut().for_each(|x| *x *= scale);

    if anomalous {
        let period = rng.random_range(CLICK_PERIOD_SECS.0..CLICK_PERIOD_SECS.1) * sr;
        let mut onset = rng.random::<f64>() * period;
        while (onset as usize) < CLIP_LEN {
            let start = onset as usize;
            for k in 0..CLICK_LEN.min(CLIP_LEN - start) {
                let n: f64 = rng.sample(StandardNormal);
                signal[start + k] += CLICK_PEAK * n * (-(k as f64) / CLICK_DECAY_SAMPLES).exp();
            }
            onset += period;
        }
    }

    let snr_jitter = SNR_JITTER_DB * (2.0 * rng.random::<f64>() - 1.0);
    let noise = colored_noise(spec.noise_color, CLIP_LEN, &mut rng);
    let mixed = mix_at_snr(
        &AudioClip::new(signal, SAMPLE_RATE),
        &AudioClip::new(noise, SAMPLE_RATE),
        spec.snr_db + snr_jitter,
    )?;
    Ok(mixed.clip)
}

/// Unit-variance noise; pink noise shapes white noise by 1/sqrt(f) in the
/// frequency domain (-3 dB per octave).
fn colored_noise(color: NoiseColor, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let shaped = match color {
        NoiseColor::White => white,
        NoiseColor::Pink => {
            let mut buf: Vec<Complex<f64>> = white.iter().map(|&x| Complex::new(x, 0.0)).collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(len).process(&mut buf);
            let bin_hz = SAMPLE_RATE as f64 / len as f64;
            const CORNER_HZ: f64 = 20.0;
            for (k, c) in buf.iter_mut().enumerate() {
                if k == 0 {
                    *c = Complex::new(0.0, 0.0);
                    continue;
                }
                let f = k.min(len - k) as f64 * bin_hz;
                *c *= (CORNER_HZ / f.max(CORNER_HZ)).sqrt();
            }
            planner.plan_fft_inverse(len).process(&mut buf);
            buf.into_iter().map(|c| c.re).collect()
        }
    };
    let r = rms(&shaped);
    shaped.into_iter().map(|x| x / r).collect()
}

const MACHINE_NAMES: [&str; 7] = [
    "fan", "gearbox", "pump", "slider", "valve", "toycar", "toytrain",
];
const MACHINE_BASE_HZ: [f64; 7] = [310.0, 262.0, 346.0, 228.0, 287.0, 204.0, 331.0];
const SECTION_RATIOS: [f64; 6] = [1.0, 1.27, 1.61, 2.05, 2.6, 3.3];
const SOURCE_SNR_DB: f64 = 6.0;

pub fn default_machine_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            if i < MACHINE_NAMES.len() {
                MACHINE_NAMES[i].to_string()
            } else {
                format!("machine{i:02}")
            }
        })
        .collect()
}

/// Source-domain spec of `section` for the `machine_index`-th machine.
/// With `identical_sections` every section shares section 0's spec.
pub fn section_spec(machine_index: usize, section: u8, identical_sections: bool) -> DomainSpec {
    let base = MACHINE_BASE_HZ[machine_index % MACHINE_BASE_HZ.len()]
        * (1.0 + 0.03 * (machine_index / MACHINE_BASE_HZ.len()) as f64);
    let ratio = if identical_sections {
        SECTION_RATIOS[0]
    } else {
        SECTION_RATIOS[section as usize % SECTION_RATIOS.len()]
    };
    DomainSpec {
        fundamental_hz: base * ratio,
        harmonic_count: 5 + (machine_index % 3) as u32,
        snr_db: SOURCE_SNR_DB,
        noise_color: NoiseColor::Pink,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub machines: Vec<String>,
    pub sections_per_machine: u8,
    pub source_train_clips: u32,
    pub target_train_clips: u32,
    /// Normal and anomalous test clips, each, per (section, domain).
    pub test_clips_per_condition: u32,
    pub shift: DomainShift,
    pub identical_sections: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            machines: default_machine_names(1),
            sections_per_machine: 3,
            source_train_clips: 1000,
            target_train_clips: 3,
            test_clips_per_condition: 50,
            shift: DomainShift::default(),
            identical_sections: false,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.machines.is_empty() {
            return bad("at least one machine is required");
        }
        let mut names = self.machines.clone();
        names.sort();
        names.dedup();
        if names.len() != self.machines.len() {
            return bad("machine names must be unique");
        }
        if self
            .machines
            .iter()
            .any(|m| m.is_empty() || m.contains(['/', '\\']))
        {
            return bad("machine names must be non-empty directory names");
        }
        if self.sections_per_machine == 0 || self.sections_per_machine > MAX_SECTION + 1 {
            return bad("sections_per_machine must be in 1..=6");
        }
        if self.source_train_clips == 0
            || self.target_train_clips == 0
            || self.test_clips_per_condition == 0
        {
            return bad("clip counts must be > 0");
        }
        let max_id = self
            .source_train_clips
            .max(self.target_train_clips)
            .max(self.test_clips_per_condition);
        if max_id > 10_000 {
            return bad("clip counts must be <= 10000 (4-digit clip ids)");
        }
        if !(self.shift.fundamental_ratio > 0.0) {
            return bad("shift.fundamental_ratio must be > 0");
        }
        Ok(())
    }

    /// Every clip the corpus contains, in manifest order.
    pub fn plan(&self) -> Vec<ClipMeta> {
        let mut metas = Vec::new();
        for machine in &self.machines {
            for section in 0..self.sections_per_machine {
                let mut push = |domain, split, condition, count: u32| {
                    for clip_id in 0..count {
                        metas.push(ClipMeta {
                            machine_type: machine.clone(),
                            section,
                            domain,
                            split,
                            condition,
                            clip_id,
                        });
                    }
                };
                push(
                    Domain::Source,
                    Split::Train,
                    Condition::Normal,
                    self.source_train_clips,
                );
                push(
                    Domain::Target,
                    Split::Train,
                    Condition::Normal,
                    self.target_train_clips,
                );
                for domain in Domain::ALL {
                    push(
                        domain,
                        Split::Test,
                        Condition::Normal,
                        self.test_clips_per_condition,
                    );
                    push(
                        domain,
                        Split::Test,
                        Condition::Anomaly,
                        self.test_clips_per_condition,
                    );
                }
            }
        }
        metas
    }

    pub fn spec_for(&self, machine_index: usize, section: u8, domain: Domain) -> DomainSpec {
        let source = section_spec(machine_index, section, self.identical_sections);
        match domain {
            Domain::Source => source,
            Domain::Target => self.shift.apply(&source),
        }
    }

    /// Per-clip seed derived from the corpus seed and the clip's identity.
    pub fn clip_seed(&self, machine_index: usize, meta: &ClipMeta) -> u64 {
        let fields = [
            machine_index as u64,
            meta.section as u64,
            meta.domain as u64,
            meta.split as u64,
            meta.condition as u64,
            meta.clip_id as u64,
        ];
        fields
            .iter()
            .fold(splitmix64(self.seed), |h, &f| splitmix64(h ^ f))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes a development-style tree under `out_dir` and returns its index.
///
/// A non-empty `out_dir` is refused unless `force` is set, in which case it
/// is removed first.
pub fn synth_corpus(
    config: &CorpusConfig,
    out_dir: impl AsRef<Path>,
    force: bool,
) -> Result<DatasetIndex, CorpusError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| CorpusError::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(CorpusError::OutputExists(out_dir.to_path_buf()));
            }
            fs::remove_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;
    for machine in &config.machines {
        let dir = out_dir.join(machine);
        fs::create_dir_all(&dir).map_err(|e| CorpusError::io(&dir, e))?;
    }

    let mut entries = Vec::new();
    for meta in config.plan() {
        let machine_index = config
            .machines
            .iter()
            .position(|m| *m == meta.machine_type)
            .expect("planned machine");
        let spec = config.spec_for(machine_index, meta.section, meta.domain);
        let clip = synth_clip(
            &spec,
            meta.condition,
            config.clip_seed(machine_index, &meta),
        )?;
        let rel = format_clip_path(&meta);
        write_clip(out_dir.join(&rel), &clip)?;
        entries.push(IndexEntry { path: rel, meta });
    }
    let index = DatasetIndex::new(out_dir, entries)?;
    index.write_manifest()?;
    log::info!(
        "synthesized {} clips for {} machine(s) under {}",
        index.len(),
        config.machines.len(),
        out_dir.display()
    );
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Magnitude spectrum of the whole clip; 0.1 Hz per bin at 160000 points.
    fn spectrum(clip: &AudioClip) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = clip
            .samples()
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .collect();
        FftPlanner::new()
            .plan_fft_forward(buf.len())
            .process(&mut buf);
        buf[..buf.len() / 2].iter().map(|c| c.norm()).collect()
    }

    /// Frequencies of the `n` largest local maxima, each suppressing a
    /// +-`guard_hz` neighbourhood.
    fn top_peaks(mag: &[f64], n: usize, guard_hz: f64) -> Vec<f64> {
        let bin_hz = SAMPLE_RATE as f64 / (2 * mag.len()) as f64;
        let guard = (guard_hz / bin_hz) as usize;
        let mut order: Vec<usize> = (1..mag.len()).collect();
        order.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]));
        let mut picked: Vec<usize> = Vec::new();
        for k in order {
            if picked.iter().all(|&p| p.abs_diff(k) > guard) {
                picked.push(k);
                if picked.len() == n {
                    break;
                }
            }
        }
        let mut freqs: Vec<f64> = picked.into_iter().map(|k| k as f64 * bin_hz).collect();
        freqs.sort_by(f64::total_cmp);
        freqs
    }

    fn peak_near(mag: &[f64], center_hz: f64, halfwidth_hz: f64) -> f64 {
        let bin_hz = SAMPLE_RATE as f64 / (2 * mag.len()) as f64;
        let lo = ((center_hz - halfwidth_hz) / bin_hz) as usize;
        let hi = ((center_hz + halfwidth_hz) / bin_hz) as usize;
        let k = (lo..=hi)
            .max_by(|&a, &b| mag[a].total_cmp(&mag[b]))
            .unwrap();
        k as f64 * bin_hz
    }

    fn spec100() -> DomainSpec {
        DomainSpec {
            fundamental_hz: 100.0,
            harmonic_count: 5,
            snr_db: 10.0,
            noise_color: NoiseColor::Pink,
        }
    }

    #[test]
    fn normal_clip_peaks_at_harmonics() {
        let clip = synth_clip(&spec100(), Condition::Normal, 11).unwrap();
        assert_eq!(clip.len(), CLIP_LEN);
        assert!(clip.samples().iter().all(|x| x.abs() <= 1.0));
        let peaks = top_peaks(&spectrum(&clip), 5, 20.0);
        for (got, want) in peaks.iter().zip([100.0, 200.0, 300.0, 400.0, 500.0]) {
            assert!((got - want).abs() <= 0.2, "peaks {peaks:?}");
        }
    }

    #[test]
    fn anomaly_detunes_second_partial() {
        let clip = synth_clip(&spec100(), Condition::Anomaly, 11).unwrap();
        let mag = spectrum(&clip);
        // One STFT bin at 1024 points is 15.6 Hz; the oracle is far finer.
        let second = peak_near(&mag, 206.0, 12.0);
        assert!(
            (second - 212.0).abs() <= 16000.0 / 1024.0,
            "2nd partial {second}"
        );
        assert!((second - 212.0).abs() <= 0.2);
        let first = peak_near(&mag, 100.0, 5.0);
        assert!((first - 100.0).abs() <= 0.2);
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let a = synth_clip(&spec100(), Condition::Anomaly, 5).unwrap();
        let b = synth_clip(&spec100(), Condition::Anomaly, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_clip(&spec100(), Condition::Anomaly, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn white_noise_variant_is_valid() {
        let spec = DomainSpec {
            noise_color: NoiseColor::White,
            ..spec100()
        };
        let clip = synth_clip(&spec, Condition::Normal, 1).unwrap();
        assert!(clip.samples().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = spec100();
        spec.fundamental_hz = 0.0;
        assert!(synth_clip(&spec, Condition::Normal, 0).is_err());
        let mut spec = spec100();
        spec.harmonic_count = 0;
        assert!(synth_clip(&spec, Condition::Normal, 0).is_err());
        assert!(synth_clip(&spec100(), Condition::Unknown, 0).is_err());
    }

    #[test]
    fn target_fundamental_follows_shift_ratio() {
        let cfg = CorpusConfig::default();
        let src = cfg.spec_for(0, 1, Domain::Source);
        let tgt = cfg.spec_for(0, 1, Domain::Target);
        let f_src = peak_near(
            &spectrum(&synth_clip(&src, Condition::Normal, 3).unwrap()),
            src.fundamental_hz,
            5.0,
        );
        let f_tgt = peak_near(
            &spectrum(&synth_clip(&tgt, Condition::Normal, 4).unwrap()),
            tgt.fundamental_hz,
            5.0,
        );
        assert!((f_tgt / f_src - 0.5).abs() < 1e-3, "{f_src} -> {f_tgt}");
        assert_eq!(tgt.snr_db, src.snr_db - 5.0);
    }

    #[test]
    fn sections_have_distinct_fundamentals() {
        let specs: Vec<f64> = (0..3)
            .map(|s| section_spec(0, s, false).fundamental_hz)
            .collect();
        let measured: Vec<f64> = specs
            .iter()
            .enumerate()
            .map(|(s, &f0)| {
                let spec = section_spec(0, s as u8, false);
                let clip = synth_clip(&spec, Condition::Normal, 100 + s as u64).unwrap();
                peak_near(&spectrum(&clip), f0, 5.0)
            })
            .collect();
        for (m, f0) in measured.iter().zip(&specs) {
            assert!((m - f0).abs() <= 0.2);
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!((measured[i] - measured[j]).abs() > 20.0);
            }
        }
    }

    #[test]
    fn plan_counts_match_defaults() {
        let plan = CorpusConfig::default().plan();
        let count = |d, s, c| {
            plan.iter()
                .filter(|m| m.domain == d && m.split == s && m.condition == c)
                .count()
        };
        assert_eq!(count(Domain::Source, Split::Train, Condition::Normal), 3000);
        assert_eq!(count(Domain::Target, Split::Train, Condition::Normal), 9);
        assert_eq!(count(Domain::Target, Split::Test, Condition::Anomaly), 150);
    }

    #[test]
    fn clip_seeds_are_distinct() {
        let cfg = CorpusConfig {
            source_train_clips: 20,
            ..Default::default()
        };
        let mut seeds: Vec<u64> = cfg.plan().iter().map(|m| cfg.clip_seed(0, m)).collect();
        let n = seeds.len();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), n);
    }
}
