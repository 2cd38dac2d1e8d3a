//! Dual-channel k-space acquisition with composite EMI injection.
//!
//! MR encoding is a plain 2D DFT of the sensitivity-weighted phantom. EMI
//! enters in the time domain, per readout row: every channel samples the
//! same interference realization on the row's time window (simultaneity),
//! scaled by its per-interferer coupling and shaped by a per-band complex
//! coloration of its receive chain. Reference channels carry EMI only.

use crate::error::{CoreError, Result};
use crate::kspace::{fft2, fft_in_place, ifft_in_place, KSpaceMatrix};
use crate::par::maybe_par_map_range;
use crate::post::BandPartition;
use crate::seeding::sub_rng;
use crate::C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// 2D real-valued digital phantom, row-major `[phase][read]`.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub data: Vec<f64>,
    pub n_read: usize,
    pub n_phase: usize,
    pub pixel_m: f64,
}

impl Phantom {
    pub fn zeros(n_read: usize, n_phase: usize, pixel_m: f64) -> Self {
        Phantom { data: vec![0.0; n_read * n_phase], n_read, n_phase, pixel_m }
    }

    pub fn uniform(n_read: usize, n_phase: usize, value: f64, pixel_m: f64) -> Self {
        Phantom { data: vec![value; n_read * n_phase], n_read, n_phase, pixel_m }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_read * self.n_phase {
            return Err(CoreError::InvalidInput("phantom buffer size mismatch".into()));
        }
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidInput(
                "phantom values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Built-in head-like phantom: an ellipse with a few internal features,
    /// zero background.
    pub fn builtin_ellipse(n_read: usize, n_phase: usize, amplitude: f64) -> Self {
        let mut ph = Phantom::zeros(n_read, n_phase, 2.0e-3);
        let ellipse = |x: f64, y: f64, cx: f64, cy: f64, ax: f64, ay: f64| -> bool {
            let dx = (x - cx) / ax;
            let dy = (y - cy) / ay;
            dx * dx + dy * dy <= 1.0
        };
        for p in 0..n_phase {
            for r in 0..n_read {
                let x = (r as f64 + 0.5) / n_read as f64 - 0.5;
                let y = (p as f64 + 0.5) / n_phase as f64 - 0.5;
                let mut v = 0.0;
                if ellipse(x, y, 0.0, 0.0, 0.34, 0.42) {
                    v = 1.0;
                }
                if ellipse(x, y, -0.10, -0.08, 0.10, 0.16) {
                    v = 0.55;
                }
                if ellipse(x, y, 0.11, -0.05, 0.09, 0.14) {
                    v = 0.7;
                }
                if ellipse(x, y, 0.0, 0.22, 0.07, 0.07) {
                    v = 0.35;
                }
                ph.data[p * n_read + r] = v * amplitude;
            }
        }
        ph
    }

    /// Load an 8- or 16-bit binary PGM (P5).
    pub fn from_pgm(bytes: &[u8], pixel_m: f64, amplitude: f64) -> Result<Self> {
        let mut fields = Vec::new();
        let mut i = 0usize;
        // Header: P5, width, height, maxval; '#' comments allowed.
        while fields.len() < 4 && i < bytes.len() {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).unwrap_or("").to_string());
        }
        if fields.len() < 4 || fields[0] != "P5" {
            return Err(CoreError::InvalidInput("not a binary PGM (P5) file".into()));
        }
        i += 1; // single whitespace after maxval
        let w: usize = fields[1].parse().map_err(|_| CoreError::InvalidInput("bad PGM width".into()))?;
        let h: usize = fields[2].parse().map_err(|_| CoreError::InvalidInput("bad PGM height".into()))?;
        let maxval: u32 = fields[3].parse().map_err(|_| CoreError::InvalidInput("bad PGM maxval".into()))?;
        let mut ph = Phantom::zeros(w, h, pixel_m);
        if maxval < 256 {
            if bytes.len() < i + w * h {
                return Err(CoreError::InvalidInput("truncated PGM payload".into()));
            }
            for k in 0..w * h {
                ph.data[k] = bytes[i + k] as f64 / maxval as f64 * amplitude;
            }
        } else {
            if bytes.len() < i + 2 * w * h {
                return Err(CoreError::InvalidInput("truncated PGM payload".into()));
            }
            for k in 0..w * h {
                let v = u16::from_be_bytes([bytes[i + 2 * k], bytes[i + 2 * k + 1]]);
                ph.data[k] = v as f64 / maxval as f64 * amplitude;
            }
        }
        Ok(ph)
    }

    /// Load from CSV: one row per phase-encode line.
    pub fn from_csv(text: &str, pixel_m: f64) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| CoreError::InvalidInput(format!("bad CSV value: {e}")))?);
        }
        if rows.is_empty() {
            return Err(CoreError::InvalidInput("empty phantom CSV".into()));
        }
        let w = rows[0].len();
        if rows.iter().any(|r| r.len() != w) {
            return Err(CoreError::InvalidInput("ragged phantom CSV".into()));
        }
        let h = rows.len();
        let mut ph = Phantom::zeros(w, h, pixel_m);
        for (p, row) in rows.into_iter().enumerate() {
            ph.data[p * w..(p + 1) * w].copy_from_slice(&row);
        }
        ph.validate()?;
        Ok(ph)
    }
}

/// GRE-like sequence parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceParams {
    pub n_read: usize,
    pub n_phase: usize,
    pub dwell_s: f64,
    #[serde(default = "default_averages")]
    pub averages: usize,
    pub readout_bandwidth_hz: f64,
}

fn default_averages() -> usize {
    3
}

impl SequenceParams {
    pub fn validate(&self) -> Result<()> {
        if !self.n_read.is_power_of_two() || !self.n_phase.is_power_of_two() {
            return Err(CoreError::InvalidSpec(
                "matrix dimensions must be powers of two".into(),
            ));
        }
        if self.dwell_s <= 0.0 {
            return Err(CoreError::InvalidSpec("dwell time must be positive".into()));
        }
        if self.averages < 1 {
            return Err(CoreError::InvalidSpec("averages must be >= 1".into()));
        }
        Ok(())
    }

    pub fn row_duration_s(&self) -> f64 {
        self.n_read as f64 * self.dwell_s
    }

    /// Total acquisition time across all averages.
    pub fn total_duration_s(&self) -> f64 {
        self.row_duration_s() * self.n_phase as f64 * self.averages as f64
    }
}

/// Interferer waveform description (baseband offsets from f0).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WaveformSpec {
    Tone {
        freq_offset_hz: f64,
        amplitude: f64,
        #[serde(default)]
        phase_deg: f64,
    },
    /// Lines at k * fundamental for k = 1..=count, equal per-line amplitude.
    HarmonicComb {
        fundamental_hz: f64,
        count: usize,
        amplitude: f64,
    },
    /// Band-limited noise synthesized as `tones` random lines confined to
    /// [center - width/2, center + width/2]; total rms ~= amplitude.
    BandNoise {
        center_hz: f64,
        width_hz: f64,
        amplitude: f64,
        #[serde(default = "default_band_tones")]
        tones: usize,
    },
}

fn default_band_tones() -> usize {
    64
}

/// One interferer: waveform plus optional per-reference visibility factors
/// (how strongly each post-processing reference detector sees this source;
/// receive-coil couplings always come from the cavity flux model).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterfererSpec {
    #[serde(flatten)]
    pub waveform: WaveformSpec,
    #[serde(default)]
    pub ref_visibility: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct Line {
    freq_hz: f64,
    amp: f64,
    phase: f64,
}

/// A materialized interferer: a fixed set of spectral lines, reproducible
/// from the master seed.
#[derive(Debug, Clone)]
pub struct MaterializedInterferer {
    lines: Vec<Line>,
    pub ref_visibility: Option<Vec<f64>>,
}

impl MaterializedInterferer {
    /// Complex baseband sample at time t.
    pub fn sample(&self, t: f64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for l in &self.lines {
            let th = 2.0 * std::f64::consts::PI * l.freq_hz * t + l.phase;
            acc += C64::from_polar(l.amp, th);
        }
        acc
    }

    /// All line frequencies lie within [lo, hi].
    pub fn confined_to(&self, lo: f64, hi: f64) -> bool {
        self.lines.iter().all(|l| l.freq_hz >= lo && l.freq_hz <= hi)
    }
}

/// Composite EMI timeline covering the whole acquisition.
#[derive(Debug, Clone)]
pub struct EMITimeline {
    pub interferers: Vec<MaterializedInterferer>,
    pub duration_s: f64,
}

/// Materialize interferer specs into fixed spectral lines.
pub fn materialize_timeline(
    specs: &[InterfererSpec],
    duration_s: f64,
    master_seed: u64,
) -> EMITimeline {
    let interferers = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let lines = match &spec.waveform {
                WaveformSpec::Tone { freq_offset_hz, amplitude, phase_deg } => vec![Line {
                    freq_hz: *freq_offset_hz,
                    amp: *amplitude,
                    phase: phase_deg.to_radians(),
                }],
                WaveformSpec::HarmonicComb { fundamental_hz, count, amplitude } => (1..=*count)
                    .map(|k| Line {
                        freq_hz: k as f64 * fundamental_hz,
                        amp: *amplitude,
                        phase: 0.0,
                    })
                    .collect(),
                WaveformSpec::BandNoise { center_hz, width_hz, amplitude, tones } => {
                    let mut rng = sub_rng(master_seed, "band-noise", &[i as u64]);
                    let n = (*tones).max(1);
                    let amp = amplitude / (n as f64).sqrt();
                    (0..n)
                        .map(|_| Line {
                            freq_hz: center_hz + width_hz * (rng.gen::<f64>() - 0.5),
                            amp,
                            phase: 2.0 * std::f64::consts::PI * rng.gen::<f64>(),
                        })
                        .collect()
                }
            };
            MaterializedInterferer { lines, ref_visibility: spec.ref_visibility.clone() }
        })
        .collect();
    EMITimeline { interferers, duration_s }
}

/// One receive or reference channel with its EMI couplings.
#[derive(Debug, Clone)]
pub struct Channel {
    pub name: String,
    pub is_reference: bool,
    /// Complex coupling per interferer (Wb-scale, folded into arbitrary
    /// receiver units).
    pub couplings: Vec<C64>,
    /// Per-band complex receive-chain coloration, on `partition`.
    pub coloration: Vec<C64>,
    /// Thermal noise rms per complex k-space sample.
    pub thermal_rms: f64,
}

/// The full channel set sharing one interference realization.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub channels: Vec<Channel>,
    pub partition: BandPartition,
    /// Checksum of the cavity field the couplings were derived from; spatial
    /// ANC application must reference the same field.
    pub field_checksum: String,
}

impl ChannelSet {
    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn validate(&self, n_interferers: usize) -> Result<()> {
        for ch in &self.channels {
            if ch.couplings.len() != n_interferers {
                return Err(CoreError::InvalidInput(format!(
                    "channel {} has {} couplings for {} interferers",
                    ch.name,
                    ch.couplings.len(),
                    n_interferers
                )));
            }
            if ch.coloration.len() != self.partition.bands().len() {
                return Err(CoreError::InvalidInput(format!(
                    "channel {} coloration does not match the band partition",
                    ch.name
                )));
            }
            if !ch.couplings.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
                return Err(CoreError::InvalidInput(format!(
                    "channel {} has non-finite couplings",
                    ch.name
                )));
            }
        }
        Ok(())
    }
}

/// Smooth random per-band coloration factors: unit-ish magnitude, seeded.
pub fn random_coloration(
    partition: &BandPartition,
    strength: f64,
    master_seed: u64,
    channel_idx: u64,
) -> Vec<C64> {
    let mut rng = sub_rng(master_seed, "coloration", &[channel_idx]);
    partition
        .bands()
        .iter()
        .map(|_| {
            let mag = 1.0 + strength * (rng.gen::<f64>() - 0.5) * 2.0;
            let ph = 2.0 * std::f64::consts::PI * strength * (rng.gen::<f64>() - 0.5);
            C64::from_polar(mag.max(0.05), ph)
        })
        .collect()
}

/// K = 2D DFT of (sensitivity x phantom). `sensitivity` is a per-pixel map
/// or uniform when `None`.
pub fn simulate_clean_kspace(
    phantom: &Phantom,
    sensitivity: Option<&[f64]>,
    seq: &SequenceParams,
    channel: &str,
) -> Result<KSpaceMatrix> {
    seq.validate()?;
    phantom.validate()?;
    if phantom.n_read != seq.n_read || phantom.n_phase != seq.n_phase {
        return Err(CoreError::InvalidInput(format!(
            "phantom {}x{} does not match sequence {}x{}",
            phantom.n_read, phantom.n_phase, seq.n_read, seq.n_phase
        )));
    }
    if let Some(s) = sensitivity {
        if s.len() != phantom.data.len() {
            return Err(CoreError::InvalidInput("sensitivity map size mismatch".into()));
        }
    }
    let mut data: Vec<C64> = phantom
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = sensitivity.map_or(1.0, |m| m[i]);
            C64::new(v * s, 0.0)
        })
        .collect();
    fft2(&mut data, seq.n_read, seq.n_phase);
    Ok(KSpaceMatrix {
        data,
        n_read: seq.n_read,
        n_phase: seq.n_phase,
        dwell_s: seq.dwell_s,
        channel: channel.to_string(),
    })
}

fn gaussian_pair(rng: &mut rand_chacha::ChaCha8Rng) -> (f64, f64) {
    // Box-Muller; rand's uniform keeps this deterministic across platforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

/// Synthesize one average of one channel: clean signal (zeros for reference
/// channels) plus coupled, band-colored EMI plus thermal noise.
///
/// Row `p` of average `avg` occupies the time window starting at
/// `(avg * n_phase + p) * n_read * dwell`; every channel shares this clock.
pub fn inject_emi(
    clean: &KSpaceMatrix,
    timeline: &EMITimeline,
    channels: &ChannelSet,
    channel_idx: usize,
    seq: &SequenceParams,
    avg: usize,
    master_seed: u64,
) -> Result<KSpaceMatrix> {
    seq.validate()?;
    channels.validate(timeline.interferers.len())?;
    let needed = seq.total_duration_s();
    if timeline.duration_s + 1e-12 < needed {
        let covered_rows =
            (timeline.duration_s / seq.row_duration_s()).floor() as usize;
        return Err(CoreError::Coverage(format!(
            "timeline covers {:.4e} s ({} rows) but the acquisition needs {:.4e} s; first uncovered row index {}",
            timeline.duration_s, covered_rows, needed, covered_rows
        )));
    }
    let ch = &channels.channels[channel_idx];
    if clean.n_read != seq.n_read || clean.n_phase != seq.n_phase {
        return Err(CoreError::InvalidInput("clean k-space dims mismatch".into()));
    }

    let bands = channels.partition.bands().to_vec();
    let rows: Vec<Vec<C64>> = maybe_par_map_range(seq.n_phase, |p| {
        let t0 = ((avg * seq.n_phase + p) * seq.n_read) as f64 * seq.dwell_s;
        // EMI samples on this row's window.
        let mut emi: Vec<C64> = (0..seq.n_read)
            .map(|n| {
                let t = t0 + n as f64 * seq.dwell_s;
                let mut acc = C64::new(0.0, 0.0);
                for (i, interferer) in timeline.interferers.iter().enumerate() {
                    acc += ch.couplings[i] * interferer.sample(t);
                }
                acc
            })
            .collect();
        // Receive-chain coloration, applied per frequency band.
        fft_in_place(&mut emi);
        for (b, range) in bands.iter().enumerate() {
            for k in range.clone() {
                emi[k] *= ch.coloration[b];
            }
        }
        ifft_in_place(&mut emi);

        let mut rng = sub_rng(master_seed, "thermal", &[channel_idx as u64, avg as u64, p as u64]);
        let mut out = Vec::with_capacity(seq.n_read);
        for (n, e) in emi.into_iter().enumerate() {
            let (g1, g2) = gaussian_pair(&mut rng);
            let noise = C64::new(g1, g2) * (ch.thermal_rms / 2f64.sqrt());
            out.push(clean.data[p * seq.n_read + n] + e + noise);
        }
        out
    });

    let mut k = KSpaceMatrix::zeros(seq.n_read, seq.n_phase, seq.dwell_s, &ch.name);
    for (p, row) in rows.into_iter().enumerate() {
        k.row_mut(p).copy_from_slice(&row);
    }
    Ok(k)
}

/// Residual coupling factors from a spatial ANC drive, with the provenance
/// checksum of the field they were computed against.
#[derive(Debug, Clone)]
pub struct AncApplication {
    /// (channel name, residual factor) pairs: new coupling = factor * old.
    pub residual_factors: Vec<(String, C64)>,
    pub field_checksum: String,
}

/// Replace receive-channel couplings by their post-cancellation residuals.
/// Channels not named keep their couplings (post-processing references sit
/// outside the canceled region).
pub fn apply_spatial_anc(channels: &ChannelSet, anc: &AncApplication) -> Result<ChannelSet> {
    if channels.field_checksum != anc.field_checksum {
        return Err(CoreError::Provenance(format!(
            "drive was computed against field {} but couplings derive from field {}",
            anc.field_checksum, channels.field_checksum
        )));
    }
    let mut out = channels.clone();
    for (name, factor) in &anc.residual_factors {
        let ch = out
            .channels
            .iter_mut()
            .find(|c| &c.name == name)
            .ok_or_else(|| CoreError::InvalidInput(format!("unknown channel {name}")))?;
        for c in &mut ch.couplings {
            *c *= factor;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::post::BandPartition;

    fn seq() -> SequenceParams {
        SequenceParams {
            n_read: 32,
            n_phase: 16,
            dwell_s: 1e-5,
            averages: 1,
            readout_bandwidth_hz: 1e5,
        }
    }

    fn unit_channels(couplings: Vec<Vec<C64>>, n_interferers: usize) -> ChannelSet {
        let partition = BandPartition::equal(32, 1).unwrap();
        let channels = couplings
            .into_iter()
            .enumerate()
            .map(|(i, c)| Channel {
                name: format!("ch{i}"),
                is_reference: i > 0,
                couplings: c,
                coloration: vec![C64::new(1.0, 0.0)],
                thermal_rms: 0.0,
            })
            .collect();
        let set = ChannelSet { channels, partition, field_checksum: "test".into() };
        set.validate(n_interferers).unwrap();
        set
    }

    #[test]
    fn dft_of_uniform_phantom_is_delta() {
        let s = seq();
        let ph = Phantom::uniform(32, 16, 2.0, 1e-3);
        let k = simulate_clean_kspace(&ph, None, &s, "saddle").unwrap();
        let dc = k.data[0].norm();
        assert!((dc - 2.0 * 32.0 * 16.0).abs() < 1e-9);
        for (i, v) in k.data.iter().enumerate() {
            if i != 0 {
                assert!(v.norm() < 1e-10 * dc, "bin {i} has {v}");
            }
        }
    }

    #[test]
    fn zero_phantom_zero_kspace_and_parseval() {
        let s = seq();
        let z = Phantom::zeros(32, 16, 1e-3);
        let k = simulate_clean_kspace(&z, None, &s, "x").unwrap();
        assert!(k.power() == 0.0);

        let ph = Phantom::builtin_ellipse(32, 16, 1.0);
        let k = simulate_clean_kspace(&ph, None, &s, "x").unwrap();
        let img_power: f64 = ph.data.iter().map(|v| v * v).sum();
        let k_power = k.power() / (32.0 * 16.0);
        assert!((k_power - img_power).abs() / img_power < 1e-10);
    }

    #[test]
    fn size_mismatch_rejected() {
        let s = seq();
        let ph = Phantom::zeros(16, 16, 1e-3);
        assert!(matches!(
            simulate_clean_kspace(&ph, None, &s, "x"),
            Err(CoreError::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_phantom_tone_rows_exactly_scaled() {
        let s = seq();
        let specs = vec![InterfererSpec {
            waveform: WaveformSpec::Tone { freq_offset_hz: 1234.0, amplitude: 1.0, phase_deg: 30.0 },
            ref_visibility: None,
        }];
        let timeline = materialize_timeline(&specs, s.total_duration_s(), 1);
        let c = C64::new(0.3, -0.4);
        let set = unit_channels(vec![vec![c]], 1);
        let clean = KSpaceMatrix::zeros(32, 16, s.dwell_s, "ch0");
        let k = inject_emi(&clean, &timeline, &set, 0, &s, 0, 1).unwrap();
        for p in 0..16 {
            let t0 = (p * 32) as f64 * s.dwell_s;
            for n in 0..32 {
                let expected = c * timeline.interferers[0].sample(t0 + n as f64 * s.dwell_s);
                let got = k.row(p)[n];
                assert!((got - expected).norm() < 1e-10 * expected.norm().max(1e-30));
            }
        }
    }

    #[test]
    fn simultaneity_cross_correlation_recovers_coupling_ratio() {
        let s = seq();
        let specs = vec![InterfererSpec {
            waveform: WaveformSpec::BandNoise {
                center_hz: 0.0,
                width_hz: 4.0e4,
                amplitude: 1.0,
                tones: 32,
            },
            ref_visibility: None,
        }];
        let timeline = materialize_timeline(&specs, s.total_duration_s(), 5);
        let (c_rf, c_ref) = (C64::new(2.0, 1.0), C64::new(0.5, -0.25));
        let set = unit_channels(vec![vec![c_rf], vec![c_ref]], 1);
        let clean = KSpaceMatrix::zeros(32, 16, s.dwell_s, "x");
        let rf = inject_emi(&clean, &timeline, &set, 0, &s, 0, 5).unwrap();
        let rr = inject_emi(&clean, &timeline, &set, 1, &s, 0, 5).unwrap();
        for p in 0..4 {
            let num: C64 = rr.row(p).iter().zip(rf.row(p)).map(|(a, b)| a.conj() * b).sum();
            let den: f64 = rr.row(p).iter().map(|a| a.norm_sqr()).sum();
            let est = num / den;
            let truth = c_rf / c_ref;
            assert!((est - truth).norm() / truth.norm() < 0.01, "row {p}: {est} vs {truth}");
        }
    }

    #[test]
    fn coverage_error_reports_row() {
        let s = seq();
        let timeline = materialize_timeline(&[], s.total_duration_s() / 2.0, 1);
        let set = unit_channels(vec![vec![]], 0);
        let clean = KSpaceMatrix::zeros(32, 16, s.dwell_s, "x");
        match inject_emi(&clean, &timeline, &set, 0, &s, 0, 1) {
            Err(CoreError::Coverage(msg)) => assert!(msg.contains("row index 8"), "{msg}"),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn determinism_same_seed_identical() {
        let s = seq();
        let specs = vec![InterfererSpec {
            waveform: WaveformSpec::BandNoise {
                center_hz: 1e3,
                width_hz: 2e4,
                amplitude: 0.7,
                tones: 16,
            },
            ref_visibility: None,
        }];
        let timeline = materialize_timeline(&specs, s.total_duration_s(), 9);
        let mut set = unit_channels(vec![vec![C64::new(1.0, 0.0)]], 1);
        set.channels[0].thermal_rms = 0.3;
        let clean = KSpaceMatrix::zeros(32, 16, s.dwell_s, "x");
        let a = inject_emi(&clean, &timeline, &set, 0, &s, 0, 9).unwrap();
        let b = inject_emi(&clean, &timeline, &set, 0, &s, 0, 9).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn averages_reduce_noise_as_sqrt_n() {
        let s = SequenceParams { averages: 4, ..seq() };
        let mut set = unit_channels(vec![vec![]], 0);
        set.channels[0].thermal_rms = 1.0;
        let timeline = materialize_timeline(&[], s.total_duration_s(), 3);
        let clean = KSpaceMatrix::zeros(32, 16, s.dwell_s, "x");
        let mut single_pow = 0.0;
        let mut avg_pow = 0.0;
        for trial in 0..32u64 {
            let mut acc = KSpaceMatrix::zeros(32, 16, s.dwell_s, "x");
            for a in 0..4 {
                let k = inject_emi(&clean, &timeline, &set, 0, &s, a, 100 + trial).unwrap();
                if a == 0 {
                    single_pow += k.power();
                }
                for (dst, src) in acc.data.iter_mut().zip(&k.data) {
                    *dst += src / 4.0;
                }
            }
            avg_pow += acc.power();
        }
        let ratio = (single_pow / avg_pow).sqrt();
        assert!((ratio - 2.0).abs() / 2.0 < 0.05, "std ratio {ratio} (expected 2 for N=4)");
    }

    #[test]
    fn band_noise_confined() {
        let specs = vec![InterfererSpec {
            waveform: WaveformSpec::BandNoise {
                center_hz: 5e3,
                width_hz: 2e3,
                amplitude: 1.0,
                tones: 64,
            },
            ref_visibility: None,
        }];
        let t = materialize_timeline(&specs, 1.0, 7);
        assert!(t.interferers[0].confined_to(4e3, 6e3));
    }

    #[test]
    fn provenance_mismatch_rejected() {
        let set = unit_channels(vec![vec![C64::new(1.0, 0.0)]], 1);
        let anc = AncApplication {
            residual_factors: vec![("ch0".into(), C64::new(0.1, 0.0))],
            field_checksum: "other".into(),
        };
        assert!(matches!(apply_spatial_anc(&set, &anc), Err(CoreError::Provenance(_))));
        let ok = AncApplication {
            residual_factors: vec![("ch0".into(), C64::new(0.1, 0.0))],
            field_checksum: "test".into(),
        };
        let out = apply_spatial_anc(&set, &ok).unwrap();
        assert!((out.channels[0].couplings[0] - C64::new(0.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn pgm_round_trip_8bit() {
        let header = b"P5\n# comment\n4 2\n255\n";
        let mut bytes = header.to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255, 10, 20, 30, 40]);
        let ph = Phantom::from_pgm(&bytes, 1e-3, 2.0).unwrap();
        assert_eq!(ph.n_read, 4);
        assert_eq!(ph.n_phase, 2);
        assert!((ph.data[3] - 2.0).abs() < 1e-12);
        assert!((ph.data[1] - 2.0 * 64.0 / 255.0).abs() < 1e-12);
    }
}
