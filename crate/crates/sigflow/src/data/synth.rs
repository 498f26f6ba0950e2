//! Deterministic synthetic corpus: per-class band-limited bursts with
//! envelope shaping, mixed across channels, interleaved with rest.

use super::RecordingSession;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Spectral and envelope signature of one gesture class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassProfile {
    /// Frequency band (Hz), must sit inside (0, fs/2).
    pub band: (f64, f64),
    /// Optional minority mode: the tail of each gesture segment switches
    /// to this band, making the class bimodal.
    #[serde(default)]
    pub alt_band: Option<(f64, f64)>,
    /// Fraction of the segment rendered in `alt_band`.
    #[serde(default = "default_alt_frac")]
    pub alt_frac: f64,
    /// Amplitude multiplier for the minority mode.
    #[serde(default = "default_alt_gain")]
    pub alt_gain: f32,
    /// Envelope exponent for the minority mode; falls back to
    /// `envelope_power` when absent.
    #[serde(default)]
    pub alt_env_power: Option<f64>,
    /// Exponent of the raised-cosine activation envelope.
    pub envelope_power: f64,
    pub amplitude: f32,
}

fn default_alt_frac() -> f64 {
    0.5
}

fn default_alt_gain() -> f32 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: u16,
    pub channels: usize,
    pub window_len: usize,
    pub sampling_rate: f64,
    pub subjects: usize,
    pub trials: u16,
    /// Gesture segment length is sized so that windowing at this stride
    /// yields this many windows per class per trial.
    pub windows_per_class: usize,
    pub stride: usize,
    /// Rest samples inserted before each gesture segment.
    pub rest_len: usize,
    pub noise_floor: f32,
    pub mixing_seed: u64,
    /// Per-trial spectral drift: each (trial, class) pair shifts its band
    /// by a uniform offset in [-shift, +shift] Hz, so trials are related
    /// but not identically distributed.
    #[serde(default)]
    pub trial_band_shift_hz: f64,
    /// Explicit per-class signatures; derived from the band budget when absent.
    #[serde(default)]
    pub classes: Option<Vec<ClassProfile>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 6,
            channels: 4,
            window_len: 400,
            sampling_rate: 2000.0,
            subjects: 1,
            trials: 6,
            windows_per_class: 40,
            stride: 100,
            rest_len: 200,
            noise_floor: 0.05,
            mixing_seed: 17,
            trial_band_shift_hz: 0.0,
            classes: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synth corpus needs at least 2 classes".into()));
        }
        if self.channels == 0 || self.window_len == 0 || self.subjects == 0 {
            return Err(Error::Config("synth dimensions must be positive".into()));
        }
        if self.trials == 0 || self.windows_per_class == 0 || self.stride == 0 {
            return Err(Error::Config("synth trial layout must be positive".into()));
        }
        if self.trial_band_shift_hz < 0.0 {
            return Err(Error::Config("trial band shift must be >= 0".into()));
        }
        let nyquist = self.sampling_rate / 2.0;
        let shift = self.trial_band_shift_hz;
        for (k, p) in self.class_profiles().iter().enumerate() {
            if !(0.0..=1.0).contains(&p.alt_frac) {
                return Err(Error::Config(format!(
                    "class {} alt_frac {} outside [0, 1]",
                    k + 1,
                    p.alt_frac
                )));
            }
            let mut bands = vec![p.band];
            bands.extend(p.alt_band);
            for b in bands {
                if b.0 - shift <= 0.0 || b.1 <= b.0 || b.1 + shift >= nyquist {
                    return Err(Error::Config(format!(
                        "class {} band ({}, {}) outside (0, {})",
                        k + 1,
                        b.0,
                        b.1,
                        nyquist
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-class signatures. The derived default partitions 10% to 80% of
    /// Nyquist into K disjoint bands with a small guard gap.
    pub fn class_profiles(&self) -> Vec<ClassProfile> {
        if let Some(c) = &self.classes {
            return c.clone();
        }
        let k = self.num_classes as usize;
        let nyquist = self.sampling_rate / 2.0;
        let lo = 0.1 * nyquist;
        let hi = 0.8 * nyquist;
        let width = (hi - lo) / k as f64;
        (0..k)
            .map(|i| ClassProfile {
                band: (lo + i as f64 * width, lo + (i as f64 + 0.85) * width),
                alt_band: None,
                alt_frac: default_alt_frac(),
                alt_gain: default_alt_gain(),
                alt_env_power: None,
                envelope_power: 1.0 + 0.5 * (i % 3) as f64,
                amplitude: 1.0,
            })
            .collect()
    }

    pub fn segment_len(&self) -> usize {
        self.window_len + (self.windows_per_class - 1) * self.stride
    }
}

/// One band-limited burst: a sum of sinusoids drawn inside the class band,
/// shaped by a randomly positioned activation envelope.
fn burst(profile: &ClassProfile, len: usize, fs: f64, r: &mut impl Rng) -> Vec<f32> {
    const TONES: usize = 8;
    let mut freqs = [0f64; TONES];
    let mut phases = [0f64; TONES];
    let mut amps = [0f64; TONES];
    for i in 0..TONES {
        freqs[i] = r.gen_range(profile.band.0..profile.band.1);
        phases[i] = r.gen_range(0.0..std::f64::consts::TAU);
        amps[i] = r.gen_range(0.5..1.0);
    }
    let center = r.gen_range(0.35..0.65);
    let gain = profile.amplitude * r.gen_range(0.8f32..1.2f32);
    let norm: f64 = amps.iter().sum();
    (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let carrier: f64 = (0..TONES)
                .map(|i| amps[i] * (std::f64::consts::TAU * freqs[i] * t + phases[i]).sin())
                .sum::<f64>()
                / norm;
            let x = n as f64 / len as f64;
            let env = (std::f64::consts::PI * (x - center + 0.5).clamp(0.0, 1.0))
                .sin()
                .powf(profile.envelope_power);
            gain * (env * carrier) as f32
        })
        .collect()
}

/// Build one session per subject: trials 1..=T, each containing one
/// rest-separated gesture segment per class, channel-mixed with a
/// per-subject matrix and a white noise floor.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<RecordingSession>> {
    config.validate()?;
    let profiles = config.class_profiles();
    let c = config.channels;
    let k = config.num_classes as usize;
    let seg = config.segment_len();
    let per_class = config.rest_len + seg;
    let t_total = config.trials as usize * k * per_class;
    let mut sessions = Vec::with_capacity(config.subjects);
    for subj in 0..config.subjects {
        let subject_id = format!("synth-{:02}", subj);
        let mut mix_rng = rng::stream(config.mixing_seed, &subject_id, 0);
        let mix: Vec<f32> = (0..c * k).map(|_| mix_rng.gen_range(0.3f32..1.0)).collect();
        let mut signal = vec![0f32; c * t_total];
        let mut labels = vec![0u16; t_total];
        let mut trials = vec![0u16; t_total];
        let mut cursor = 0usize;
        for trial in 1..=config.trials {
            for class in 1..=k {
                let tag = format!("synth/{}/t{}/c{}", subject_id, trial, class);
                let mut r = rng::stream(seed, &tag, 0);
                for i in cursor..cursor + per_class {
                    trials[i] = trial;
                }
                let mut profile = profiles[class - 1].clone();
                if config.trial_band_shift_hz > 0.0 {
                    let d = r.gen_range(-config.trial_band_shift_hz..config.trial_band_shift_hz);
                    profile.band.0 += d;
                    profile.band.1 += d;
                    if let Some(alt) = &mut profile.alt_band {
                        alt.0 += d;
                        alt.1 += d;
                    }
                }
                let b = match profile.alt_band {
                    Some(alt) => {
                        let main = seg - (seg as f64 * profile.alt_frac.clamp(0.0, 1.0)) as usize;
                        let mut first = burst(&profile, main, config.sampling_rate, &mut r);
                        let mut minor = profile.clone();
                        minor.band = alt;
                        minor.amplitude *= profile.alt_gain;
                        if let Some(p) = profile.alt_env_power {
                            minor.envelope_power = p;
                        }
                        first.extend(burst(&minor, seg - main, config.sampling_rate, &mut r));
                        first
                    }
                    None => burst(&profile, seg, config.sampling_rate, &mut r),
                };
                let start = cursor + config.rest_len;
                for i in start..start + seg {
                    labels[i] = class as u16;
                }
                for ch in 0..c {
                    let w = mix[ch * k + (class - 1)];
                    let row = &mut signal[ch * t_total..(ch + 1) * t_total];
                    for (i, &v) in b.iter().enumerate() {
                        row[start + i] += w * v;
                    }
                    for i in cursor..cursor + per_class {
                        row[i] += config.noise_floor * r.gen_range(-1.0f32..1.0);
                    }
                }
                cursor += per_class;
            }
        }
        sessions.push(RecordingSession {
            subject_id,
            sampling_rate: config.sampling_rate,
            signal: Tensor::from_vec(vec![c, t_total], signal)?,
            labels,
            trials,
        });
    }
    Ok(sessions)
}
