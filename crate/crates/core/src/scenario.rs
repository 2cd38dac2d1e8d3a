//! Scenario configuration and the end-to-end simulation pipeline:
//! cavity field -> coil fluxes -> channel couplings -> acquisition ->
//! spatial cancellation -> band-wise post-processing -> fusion -> metrics.

use crate::acquire::{
    apply_spatial_anc, inject_emi, materialize_timeline, random_coloration,
    simulate_clean_kspace, AncApplication, Channel, ChannelSet, EMITimeline, InterfererSpec,
    Phantom, SequenceParams, WaveformSpec,
};
use crate::anc::{optimize_drive, spatial_cancellation_report, DriveSolution, SpatialReport};
use crate::cavity::{CavityField, CavitySpec, IncidenceSpec};
use crate::coil::{flux_through, realize_coil, CoilKind, CoilSpec, WindingPath};
use crate::error::{CoreError, Result};
use crate::fusion::{fuse, reconstruct, snr_db, ComplexImage, Roi};
use crate::geom::{RigidTransform, Vec3};
use crate::kspace::KSpaceMatrix;
use crate::post::{
    apply_cancellation, estimate_transfer, BandPartition, PeripheryPolicy, TransferModel,
};
use crate::C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// How the cancellation drive is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrivePolicy {
    /// Null the EMI flux through the saddle coil exactly (idealized).
    TargetFlux,
    /// Null the EMI flux through the detection coil; the saddle keeps a
    /// geometric-mismatch residual, as a real analog chain would.
    DetectionChain,
}

/// Geometry of the receive assembly. Everything is coaxial with x and
/// offset to `isocenter`; the detection loop sits `detection_dx` further
/// toward the cavity opening.
///
/// The isocenter carries a deliberate y offset: the cavity's longitudinal
/// component is antisymmetric in y, so a y-centered solenoid would couple
/// exactly zero EMI. The cancellation pair is mirror-symmetric about the
/// isocenter plane, which keeps its coupling into the solenoid at rounding
/// level regardless of the offset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoilLayout {
    pub isocenter: Vec3,
    pub solenoid_radius: f64,
    pub solenoid_length: f64,
    pub solenoid_turns: usize,
    pub saddle_radius: f64,
    pub saddle_arc_deg: f64,
    pub saddle_span: f64,
    pub saddle_turns: usize,
    pub detection_radius: f64,
    pub detection_turns: usize,
    pub detection_dx: f64,
    pub pair_half_gap: f64,
    pub pair_span: f64,
    pub pair_turn_half_width: f64,
    pub pair_turn_half_height: f64,
    pub pair_turns_per_side: usize,
    pub pair_density_ratio: f64,
}

impl Default for CoilLayout {
    fn default() -> Self {
        CoilLayout {
            isocenter: Vec3::new(0.10, 0.084, 0.0),
            solenoid_radius: 0.08,
            solenoid_length: 0.16,
            solenoid_turns: 8,
            saddle_radius: 0.10,
            saddle_arc_deg: 120.0,
            saddle_span: 0.20,
            saddle_turns: 2,
            detection_radius: 0.05,
            detection_turns: 4,
            detection_dx: -0.01,
            pair_half_gap: 0.20,
            pair_span: 0.40,
            pair_turn_half_width: 0.12,
            pair_turn_half_height: 0.15,
            pair_turns_per_side: 6,
            pair_density_ratio: 3.0,
        }
    }
}

impl CoilLayout {
    pub fn solenoid(&self) -> CoilSpec {
        CoilSpec {
            kind: CoilKind::Solenoid {
                radius: self.solenoid_radius,
                length: self.solenoid_length,
                turns: self.solenoid_turns,
            },
            pose: RigidTransform::translation(self.isocenter),
        }
    }

    pub fn saddle(&self) -> CoilSpec {
        CoilSpec {
            kind: CoilKind::Saddle {
                radius: self.saddle_radius,
                arc_deg: self.saddle_arc_deg,
                span: self.saddle_span,
                turns: self.saddle_turns,
            },
            pose: RigidTransform::translation(self.isocenter),
        }
    }

    pub fn detection(&self) -> CoilSpec {
        CoilSpec {
            kind: CoilKind::DetectionLoop {
                radius: self.detection_radius,
                turns: self.detection_turns,
            },
            pose: RigidTransform::translation(
                self.isocenter + Vec3::new(self.detection_dx, 0.0, 0.0),
            ),
        }
    }

    pub fn pair(&self) -> CoilSpec {
        CoilSpec {
            kind: CoilKind::CancellationPair {
                half_gap: self.pair_half_gap,
                span: self.pair_span,
                turn_half_width: self.pair_turn_half_width,
                turn_half_height: self.pair_turn_half_height,
                turns_per_side: self.pair_turns_per_side,
                density_ratio: self.pair_density_ratio,
            },
            pose: RigidTransform::translation(self.isocenter),
        }
    }
}

/// One post-processing reference detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefChannelSpec {
    pub name: String,
    /// Receiver-unit gain of this detector per unit interferer amplitude.
    pub gain: f64,
}

/// Full scenario description. `seed` is mandatory; every other field has a
/// default. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Master seed; all random streams derive from it.
    pub seed: u64,
    #[serde(default)]
    pub cavity: CavitySpec,
    #[serde(default)]
    pub incidence: IncidenceSpec,
    #[serde(default = "default_sequence")]
    pub sequence: SequenceParams,
    #[serde(default = "default_phantom_amplitude")]
    pub phantom_amplitude: f64,
    #[serde(default)]
    pub coils: CoilLayout,
    #[serde(default = "default_interferers")]
    pub interferers: Vec<InterfererSpec>,
    /// Saddle-coil EMI rms in receiver units per unit interferer amplitude;
    /// the solenoid coupling follows from the flux ratio.
    #[serde(default = "default_emi_scale")]
    pub emi_scale: f64,
    #[serde(default = "default_thermal_rms")]
    pub thermal_rms: f64,
    /// Per-band receive-chain coloration strength, [0, 1).
    #[serde(default = "default_coloration")]
    pub coloration_strength: f64,
    #[serde(default = "default_bands")]
    pub bands: usize,
    #[serde(default = "default_periphery")]
    pub periphery: PeripheryPolicy,
    #[serde(default = "default_ridge")]
    pub ridge_rel: f64,
    #[serde(default = "default_refs")]
    pub refs: Vec<RefChannelSpec>,
    #[serde(default = "default_drive_policy")]
    pub drive_policy: DrivePolicy,
    /// Pipeline stage toggles. Front ends emit only the conditions the
    /// enabled stages produce; with all three off only raw data remains.
    #[serde(default = "default_true")]
    pub spatial_anc: bool,
    #[serde(default = "default_true")]
    pub post_anc: bool,
    #[serde(default = "default_true")]
    pub fusion: bool,
    /// Default output directory for front ends; a command-line flag wins.
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default = "default_signal_roi")]
    pub signal_roi: Roi,
    #[serde(default = "default_noise_roi")]
    pub noise_roi: Roi,
    #[serde(default = "default_segments_per_turn")]
    pub segments_per_turn: usize,
    #[serde(default = "default_quadrature_order")]
    pub quadrature_order: usize,
    /// Radius of the reported cancellation region around the isocenter.
    #[serde(default = "default_region_radius")]
    pub region_radius: f64,
}

fn default_sequence() -> SequenceParams {
    SequenceParams {
        n_read: 64,
        n_phase: 64,
        dwell_s: 1.0e-4,
        averages: 3,
        readout_bandwidth_hz: 1.0e4,
    }
}

fn default_phantom_amplitude() -> f64 {
    0.27
}

fn default_interferers() -> Vec<InterfererSpec> {
    vec![
        InterfererSpec {
            waveform: WaveformSpec::BandNoise {
                center_hz: 0.0,
                width_hz: 9.0e3,
                amplitude: 6.7,
                tones: 96,
            },
            ref_visibility: None,
        },
        InterfererSpec {
            waveform: WaveformSpec::HarmonicComb {
                fundamental_hz: 730.0,
                count: 5,
                amplitude: 0.52,
            },
            ref_visibility: None,
        },
        // Seen by the coils but not by the reference detectors: the
        // irreducible residual of reference-based post-processing.
        InterfererSpec {
            waveform: WaveformSpec::BandNoise {
                center_hz: 0.0,
                width_hz: 8.0e3,
                amplitude: 2.2,
                tones: 96,
            },
            ref_visibility: Some(vec![0.0, 0.0]),
        },
    ]
}

fn default_emi_scale() -> f64 {
    1.0
}

fn default_thermal_rms() -> f64 {
    1.0
}

fn default_coloration() -> f64 {
    0.15
}

fn default_bands() -> usize {
    8
}

fn default_periphery() -> PeripheryPolicy {
    PeripheryPolicy::OuterPhaseEncodes { n: 4 }
}

fn default_ridge() -> f64 {
    1e-9
}

fn default_refs() -> Vec<RefChannelSpec> {
    vec![
        RefChannelSpec { name: "ref1".into(), gain: 1.0 },
        RefChannelSpec { name: "ref2".into(), gain: 0.8 },
    ]
}

fn default_drive_policy() -> DrivePolicy {
    DrivePolicy::DetectionChain
}

fn default_true() -> bool {
    true
}

fn default_signal_roi() -> Roi {
    Roi { x0: 24, y0: 36, width: 16, height: 5 }
}

fn default_noise_roi() -> Roi {
    Roi { x0: 0, y0: 0, width: 10, height: 10 }
}

fn default_segments_per_turn() -> usize {
    32
}

fn default_quadrature_order() -> usize {
    6
}

fn default_region_radius() -> f64 {
    0.05
}

impl ScenarioConfig {
    /// The default scenario at the given seed.
    pub fn default_preset(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("default preset")
    }

    /// Stronger, more longitudinal interference: larger amplitudes and a
    /// larger longitudinal field fraction, raising the channel imbalance.
    pub fn strong_emi_preset(seed: u64) -> Self {
        let mut cfg = Self::default_preset(seed);
        cfg.cavity.r_long = 0.361;
        cfg.emi_scale *= 2.0;
        cfg
    }

    /// Parse from JSON. Unknown keys are rejected; a missing `seed` is a
    /// config error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cavity.validate()?;
        self.incidence.validate()?;
        self.sequence.validate()?;
        self.coils.solenoid().validate()?;
        self.coils.saddle().validate()?;
        self.coils.detection().validate()?;
        self.coils.pair().validate()?;
        if self.phantom_amplitude < 0.0 {
            return Err(CoreError::InvalidSpec("phantom amplitude must be >= 0".into()));
        }
        if self.emi_scale < 0.0 || self.thermal_rms < 0.0 {
            return Err(CoreError::InvalidSpec("emi_scale and thermal_rms must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.coloration_strength) {
            return Err(CoreError::InvalidSpec("coloration strength must be in [0, 1)".into()));
        }
        if self.refs.is_empty() {
            return Err(CoreError::InvalidSpec("at least one reference channel".into()));
        }
        for i in &self.interferers {
            if let Some(v) = &i.ref_visibility {
                if v.len() != self.refs.len() {
                    return Err(CoreError::InvalidSpec(format!(
                        "ref_visibility has {} entries for {} references",
                        v.len(),
                        self.refs.len()
                    )));
                }
            }
        }
        self.signal_roi.validate(self.sequence.n_read, self.sequence.n_phase)?;
        self.noise_roi.validate(self.sequence.n_read, self.sequence.n_phase)?;
        if self.signal_roi.overlaps(&self.noise_roi) {
            return Err(CoreError::InvalidSpec("signal and noise ROIs overlap".into()));
        }
        BandPartition::equal(self.sequence.n_read, self.bands)?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Checksum tying derived couplings to the exact field they came from.
pub fn field_checksum(cavity: &CavitySpec, incidence: &IncidenceSpec) -> String {
    let json = serde_json::to_string(&(cavity, incidence)).expect("field spec serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    format!("{:x}", h.finalize())
}

/// EMI fluxes and coil-to-coil couplings underlying a scenario.
#[derive(Debug, Clone, Serialize)]
pub struct FluxSummary {
    pub saddle_emi: C64,
    pub solenoid_emi: C64,
    pub detection_emi: C64,
    pub pair_to_saddle: C64,
    pub pair_to_solenoid: C64,
    pub pair_to_detection: C64,
    /// |saddle EMI flux| / |solenoid EMI flux|.
    pub imbalance: f64,
}

/// Compute all fluxes of the scenario's coils in the cavity field.
pub fn flux_summary(cfg: &ScenarioConfig) -> Result<(FluxSummary, WindingPath)> {
    let field = CavityField::new(cfg.cavity, cfg.incidence)?;
    let q = cfg.quadrature_order;
    let saddle_emi = flux_through(&field, &cfg.coils.saddle(), q)?.flux;
    let solenoid_emi = flux_through(&field, &cfg.coils.solenoid(), q)?.flux;
    let detection_emi = flux_through(&field, &cfg.coils.detection(), q)?.flux;
    let pair_path = realize_coil(&cfg.coils.pair(), cfg.segments_per_turn)?;
    let pair_to_saddle = flux_through(&pair_path, &cfg.coils.saddle(), q)?.flux;
    let pair_to_solenoid = flux_through(&pair_path, &cfg.coils.solenoid(), q)?.flux;
    let pair_to_detection = flux_through(&pair_path, &cfg.coils.detection(), q)?.flux;
    if solenoid_emi.norm() == 0.0 {
        return Err(CoreError::ModelInvalid(
            "solenoid EMI flux is exactly zero; imbalance undefined".into(),
        ));
    }
    let imbalance = saddle_emi.norm() / solenoid_emi.norm();
    Ok((
        FluxSummary {
            saddle_emi,
            solenoid_emi,
            detection_emi,
            pair_to_saddle,
            pair_to_solenoid,
            pair_to_detection,
            imbalance,
        },
        pair_path,
    ))
}

/// The spatial ANC drive and the per-channel residual coupling factors.
#[derive(Debug, Clone, Serialize)]
pub struct SpatialStage {
    pub drive: DriveSolution,
    pub policy: DrivePolicy,
    /// new coupling / old coupling for each receive channel.
    pub saddle_residual_factor: C64,
    pub solenoid_residual_factor: C64,
}

/// Choose the drive per policy and derive residual factors.
pub fn spatial_stage(cfg: &ScenarioConfig, fluxes: &FluxSummary) -> Result<SpatialStage> {
    let (emi, per_amp) = match cfg.drive_policy {
        DrivePolicy::TargetFlux => (fluxes.saddle_emi, fluxes.pair_to_saddle),
        DrivePolicy::DetectionChain => (fluxes.detection_emi, fluxes.pair_to_detection),
    };
    let drive = optimize_drive(emi, per_amp, cfg.cavity.f0_hz)?;
    let factor = |emi_flux: C64, pair_flux: C64| -> C64 {
        if emi_flux.norm() == 0.0 {
            C64::new(1.0, 0.0)
        } else {
            (emi_flux + drive.current * pair_flux) / emi_flux
        }
    };
    Ok(SpatialStage {
        drive,
        policy: cfg.drive_policy,
        saddle_residual_factor: factor(fluxes.saddle_emi, fluxes.pair_to_saddle),
        solenoid_residual_factor: factor(fluxes.solenoid_emi, fluxes.pair_to_solenoid),
    })
}

/// Build the channel set: receive couplings from the flux ratios (the
/// saddle magnitude is pinned to `emi_scale`), reference couplings from
/// their gains and per-interferer visibility.
pub fn build_channels(cfg: &ScenarioConfig, fluxes: &FluxSummary) -> Result<ChannelSet> {
    if fluxes.saddle_emi.norm() == 0.0 {
        return Err(CoreError::ModelInvalid("saddle EMI flux is zero".into()));
    }
    let partition = BandPartition::equal(cfg.sequence.n_read, cfg.bands)?;
    let gain = cfg.emi_scale / fluxes.saddle_emi.norm();
    let n_int = cfg.interferers.len();
    let mut channels = Vec::new();
    for (idx, (name, flux)) in
        [("saddle", fluxes.saddle_emi), ("solenoid", fluxes.solenoid_emi)].iter().enumerate()
    {
        channels.push(Channel {
            name: name.to_string(),
            is_reference: false,
            couplings: vec![flux * gain; n_int],
            coloration: random_coloration(&partition, cfg.coloration_strength, cfg.seed, idx as u64),
            thermal_rms: cfg.thermal_rms,
        });
    }
    for (ri, r) in cfg.refs.iter().enumerate() {
        let couplings = cfg
            .interferers
            .iter()
            .map(|i| {
                let vis = i.ref_visibility.as_ref().map_or(1.0, |v| v[ri]);
                C64::new(r.gain * vis, 0.0)
            })
            .collect();
        channels.push(Channel {
            name: r.name.clone(),
            is_reference: true,
            couplings,
            coloration: random_coloration(
                &partition,
                cfg.coloration_strength,
                cfg.seed,
                (2 + ri) as u64,
            ),
            thermal_rms: cfg.thermal_rms,
        });
    }
    let set = ChannelSet {
        channels,
        partition,
        field_checksum: field_checksum(&cfg.cavity, &cfg.incidence),
    };
    set.validate(n_int)?;
    Ok(set)
}

/// K-spaces for one receive channel across all pipeline conditions, plus
/// noise-only (signal-free) counterparts.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub clean: KSpaceMatrix,
    pub raw: KSpaceMatrix,
    pub post: KSpaceMatrix,
    pub spatial: KSpaceMatrix,
    pub combined: KSpaceMatrix,
    pub raw_noise: KSpaceMatrix,
    pub post_noise: KSpaceMatrix,
    pub spatial_noise: KSpaceMatrix,
    pub combined_noise: KSpaceMatrix,
}

/// SNR per condition, dB.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelSnr {
    pub raw_db: f64,
    pub post_db: f64,
    pub spatial_db: f64,
    pub combined_db: f64,
}

/// Headline numbers of one scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub config_hash: String,
    pub seed: u64,
    pub imbalance: f64,
    pub spatial_flux_reduction: f64,
    /// |1 - solenoid residual factor|: spatial ANC perturbation of the
    /// solenoid coupling.
    pub solenoid_perturbation: f64,
    pub drive_gain: f64,
    pub drive_phase_deg: f64,
    pub saddle: ChannelSnr,
    pub solenoid: ChannelSnr,
    /// Post-stage EMI+noise residual fraction per channel (noise-only rms
    /// after / before).
    pub saddle_post_residual_fraction: f64,
    pub solenoid_post_residual_fraction: f64,
    /// Absolute post-stage residual level, saddle over solenoid.
    pub residual_asymmetry: f64,
    /// Post-saddle residual rms over raw-solenoid noise rms; the two
    /// channels converge when this sits near 1.
    pub post_saddle_vs_raw_solenoid: f64,
    /// Combined-saddle residual rms over post-solenoid residual rms.
    pub combined_saddle_vs_post_solenoid: f64,
    pub fused_snr_db: f64,
    pub fusion_weights: Vec<f64>,
    /// Fused SNR over the best single final channel, linear.
    pub fusion_gain_linear: f64,
    pub degenerate_bands_saddle: usize,
    pub degenerate_bands_solenoid: usize,
}

/// Everything a scenario run produces.
pub struct PipelineOutput {
    pub config_hash: String,
    pub saddle: ConditionSet,
    pub solenoid: ConditionSet,
    pub refs: Vec<KSpaceMatrix>,
    pub fluxes: FluxSummary,
    pub spatial: SpatialStage,
    pub spatial_report: SpatialReport,
    pub transfer_saddle: TransferModel,
    pub transfer_solenoid: TransferModel,
    pub fused_image: ComplexImage,
    pub report: ScenarioReport,
}

fn average_injected(
    clean: &KSpaceMatrix,
    timeline: &EMITimeline,
    set: &ChannelSet,
    idx: usize,
    seq: &SequenceParams,
    seed: u64,
) -> Result<KSpaceMatrix> {
    let mut acc = KSpaceMatrix::zeros(seq.n_read, seq.n_phase, seq.dwell_s, &set.channels[idx].name);
    for a in 0..seq.averages {
        let k = inject_emi(clean, timeline, set, idx, seq, a, seed)?;
        for (dst, src) in acc.data.iter_mut().zip(&k.data) {
            *dst += src;
        }
    }
    let s = 1.0 / seq.averages as f64;
    for v in acc.data.iter_mut() {
        *v *= s;
    }
    Ok(acc)
}

fn add_clean(noise: &KSpaceMatrix, clean: &KSpaceMatrix) -> KSpaceMatrix {
    let mut out = noise.clone();
    for (dst, src) in out.data.iter_mut().zip(&clean.data) {
        *dst += src;
    }
    out
}

fn noise_sigma(img: &ComplexImage) -> f64 {
    (img.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / img.data.len() as f64).sqrt()
}

/// Run the full pipeline for a scenario.
pub fn run_pipeline(cfg: &ScenarioConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let seq = cfg.sequence;
    let (fluxes, pair_path) = flux_summary(cfg)?;
    let stage = spatial_stage(cfg, &fluxes)?;
    let channels = build_channels(cfg, &fluxes)?;
    let anc = AncApplication {
        residual_factors: vec![
            ("saddle".into(), stage.saddle_residual_factor),
            ("solenoid".into(), stage.solenoid_residual_factor),
        ],
        field_checksum: channels.field_checksum.clone(),
    };
    let channels_spatial = apply_spatial_anc(&channels, &anc)?;
    let timeline = materialize_timeline(&cfg.interferers, seq.total_duration_s(), cfg.seed);

    let phantom = Phantom::builtin_ellipse(seq.n_read, seq.n_phase, cfg.phantom_amplitude);
    let zero = KSpaceMatrix::zeros(seq.n_read, seq.n_phase, seq.dwell_s, "zero");

    // Noise-only (signal-free) acquisitions; the with-signal data is
    // clean + noise exactly, since injection is additive in the clean term.
    let inject = |set: &ChannelSet, idx: usize| -> Result<KSpaceMatrix> {
        average_injected(&zero, &timeline, set, idx, &seq, cfg.seed)
    };
    let sad_raw_noise = inject(&channels, 0)?;
    let sol_raw_noise = inject(&channels, 1)?;
    let sad_spat_noise = inject(&channels_spatial, 0)?;
    let sol_spat_noise = inject(&channels_spatial, 1)?;
    let refs: Vec<KSpaceMatrix> =
        (0..cfg.refs.len()).map(|ri| inject(&channels, 2 + ri)).collect::<Result<_>>()?;
    let ref_views: Vec<&KSpaceMatrix> = refs.iter().collect();

    let clean_sad = simulate_clean_kspace(&phantom, None, &seq, "saddle")?;
    let clean_sol = simulate_clean_kspace(&phantom, None, &seq, "solenoid")?;

    let partition = channels.partition.clone();
    let process = |clean: &KSpaceMatrix,
                   raw_noise: &KSpaceMatrix,
                   spat_noise: &KSpaceMatrix|
     -> Result<(ConditionSet, TransferModel, TransferModel)> {
        let raw = add_clean(raw_noise, clean);
        let spatial = add_clean(spat_noise, clean);
        let model_raw =
            estimate_transfer(&raw, &ref_views, &partition, cfg.periphery, cfg.ridge_rel)?;
        let model_spat =
            estimate_transfer(&spatial, &ref_views, &partition, cfg.periphery, cfg.ridge_rel)?;
        let post = apply_cancellation(&raw, &ref_views, &model_raw)?;
        let post_noise = apply_cancellation(raw_noise, &ref_views, &model_raw)?;
        let combined = apply_cancellation(&spatial, &ref_views, &model_spat)?;
        let combined_noise = apply_cancellation(spat_noise, &ref_views, &model_spat)?;
        Ok((
            ConditionSet {
                clean: clean.clone(),
                raw,
                post,
                spatial,
                combined,
                raw_noise: raw_noise.clone(),
                post_noise,
                spatial_noise: spat_noise.clone(),
                combined_noise,
            },
            model_raw,
            model_spat,
        ))
    };
    let (saddle, model_sad, _) = process(&clean_sad, &sad_raw_noise, &sad_spat_noise)?;
    let (solenoid, model_sol, _) = process(&clean_sol, &sol_raw_noise, &sol_spat_noise)?;

    // Spatial report over the cancellation region.
    let field = CavityField::new(cfg.cavity, cfg.incidence)?;
    let spatial_report = spatial_cancellation_report(
        &field,
        &pair_path,
        &cfg.coils.saddle(),
        stage.drive.current,
        cfg.coils.isocenter,
        cfg.region_radius,
        7,
        cfg.quadrature_order,
    )?;

    // Images and metrics.
    let (nr, np) = (seq.n_read, seq.n_phase);
    let snr = |k: &KSpaceMatrix| -> Result<f64> {
        let img = reconstruct(k);
        snr_db(&img.magnitude(), nr, np, &cfg.signal_roi, &cfg.noise_roi)
    };
    let snr_set = |c: &ConditionSet| -> Result<ChannelSnr> {
        Ok(ChannelSnr {
            raw_db: snr(&c.raw)?,
            post_db: snr(&c.post)?,
            spatial_db: snr(&c.spatial)?,
            combined_db: snr(&c.combined)?,
        })
    };
    let sad_snr = snr_set(&saddle)?;
    let sol_snr = snr_set(&solenoid)?;

    let rms = |k: &KSpaceMatrix| (k.power() / k.data.len() as f64).sqrt();
    let f_sad = rms(&saddle.post_noise) / rms(&saddle.raw_noise);
    let f_sol = rms(&solenoid.post_noise) / rms(&solenoid.raw_noise);
    let residual_asymmetry = rms(&saddle.post_noise) / rms(&solenoid.post_noise);
    let post_saddle_vs_raw_solenoid = rms(&saddle.post_noise) / rms(&solenoid.raw_noise);
    let combined_saddle_vs_post_solenoid =
        rms(&saddle.combined_noise) / rms(&solenoid.post_noise);

    let img_sad = reconstruct(&saddle.combined);
    let img_sol = reconstruct(&solenoid.combined);
    let sigma_sad = noise_sigma(&reconstruct(&saddle.combined_noise));
    let sigma_sol = noise_sigma(&reconstruct(&solenoid.combined_noise));
    let fusion = fuse(&[&img_sad, &img_sol], &[sigma_sad, sigma_sol])?;
    let fused_snr =
        snr_db(&fusion.image.magnitude(), nr, np, &cfg.signal_roi, &cfg.noise_roi)?;
    let best_single_db = sad_snr.combined_db.max(sol_snr.combined_db);
    let fusion_gain_linear = 10f64.powf((fused_snr - best_single_db) / 20.0);

    let report = ScenarioReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        imbalance: fluxes.imbalance,
        spatial_flux_reduction: spatial_report.flux_reduction,
        solenoid_perturbation: (stage.solenoid_residual_factor - C64::new(1.0, 0.0)).norm(),
        drive_gain: stage.drive.gain,
        drive_phase_deg: stage.drive.phase_delay_deg,
        saddle: sad_snr,
        solenoid: sol_snr,
        saddle_post_residual_fraction: f_sad,
        solenoid_post_residual_fraction: f_sol,
        residual_asymmetry,
        post_saddle_vs_raw_solenoid,
        combined_saddle_vs_post_solenoid,
        fused_snr_db: fused_snr,
        fusion_weights: fusion.weights.clone(),
        fusion_gain_linear,
        degenerate_bands_saddle: model_sad.degenerate.iter().filter(|&&d| d).count(),
        degenerate_bands_solenoid: model_sol.degenerate.iter().filter(|&&d| d).count(),
    };

    Ok(PipelineOutput {
        config_hash: cfg.hash(),
        saddle,
        solenoid,
        refs,
        fluxes,
        spatial: stage,
        spatial_report,
        transfer_saddle: model_sad,
        transfer_solenoid: model_sol,
        fused_image: fusion.image,
        report,
    })
}
