//! Spatial-domain active cancellation loop: detection-coil voltage, the
//! phase/amplitude control chain, drive optimization, and residual-field
//! reporting over the target region.
//!
//! Cancellation is optimized at flux level - the quantity the receive coil
//! actually measures. Pointwise field residuals stay nonzero when the
//! cancellation coil's spatial gradient does not match the interference
//! field, so the report exposes both views.

use crate::cavity::CavityField;
use crate::coil::{flux_through, CoilSpec, WindingPath};
use crate::error::{CoreError, Result};
use crate::geom::Vec3;
use crate::grid::{FieldSource, ScaledField, SumField};
use crate::par::maybe_par_map;
use crate::{C64, C_LIGHT};
use serde::{Deserialize, Serialize};

/// Analog control chain between the detection coil and the cancellation
/// coil drive: scalar gain (amperes out per volt in) and a phase delay at
/// the working frequency.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlChain {
    /// Amperes per volt.
    pub gain: f64,
    /// Phase delay in degrees, [0, 360).
    pub phase_delay_deg: f64,
    /// Additive output current noise density, A/sqrt(Hz). Zero for the
    /// ideal-linear chain.
    #[serde(default)]
    pub noise_density: f64,
}

impl ControlChain {
    pub fn validate(&self) -> Result<()> {
        if self.gain < 0.0 {
            return Err(CoreError::InvalidSpec("chain gain must be >= 0".into()));
        }
        if !(0.0..360.0).contains(&self.phase_delay_deg) {
            return Err(CoreError::InvalidSpec(format!(
                "phase delay must be in [0, 360), got {}",
                self.phase_delay_deg
            )));
        }
        Ok(())
    }
}

/// Flux bookkeeping for one cancellation state.
#[derive(Debug, Clone, Copy)]
pub struct CancellationState {
    /// Interference flux through the target coil, Wb.
    pub emi_flux: C64,
    /// Cancellation flux per unit drive current, Wb/A.
    pub flux_per_ampere: C64,
    /// Drive current, A.
    pub drive: C64,
}

impl CancellationState {
    /// residual = emi_flux + drive * flux_per_ampere, by definition.
    pub fn residual(&self) -> C64 {
        self.emi_flux + self.drive * self.flux_per_ampere
    }
}

/// Induced voltage of a flux phasor: V = j omega Phi. The voltage leads the
/// flux by 90 degrees.
pub fn detect_voltage(flux: C64, f0_hz: f64) -> Result<C64> {
    if f0_hz <= 0.0 {
        return Err(CoreError::InvalidSpec("frequency must be positive".into()));
    }
    let omega = 2.0 * std::f64::consts::PI * f0_hz;
    Ok(C64::new(0.0, omega) * flux)
}

/// Drive current out of the control chain: i = g * v * exp(-j phase).
pub fn drive_current(v: C64, chain: &ControlChain) -> Result<C64> {
    chain.validate()?;
    let phi = chain.phase_delay_deg.to_radians();
    Ok(v * chain.gain * C64::new(phi.cos(), -phi.sin()))
}

/// Result of drive optimization against a target coil's flux.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DriveSolution {
    /// Optimal complex drive current, A.
    pub current: C64,
    /// Chain gain realizing the drive from the detection voltage
    /// V = j omega Phi_det (with Phi_det taken as the target EMI flux).
    pub gain: f64,
    /// Chain phase delay in degrees realizing the drive.
    pub phase_delay_deg: f64,
    /// |Phi_EM + i* Phi_C1| / |Phi_EM|: zero for the exact scalar match.
    pub residual_ratio: f64,
}

/// Optimal drive: i* = -Phi_EM / Phi_C1, decomposed into the (gain, phase)
/// pair of the upstream V = j omega Phi chain.
pub fn optimize_drive(emi_flux: C64, flux_per_ampere: C64, f0_hz: f64) -> Result<DriveSolution> {
    if flux_per_ampere.norm() == 0.0 {
        return Err(CoreError::Uncancelable);
    }
    let current = -emi_flux / flux_per_ampere;
    let v = detect_voltage(emi_flux, f0_hz)?;
    let (gain, phase_delay_deg) = if v.norm() == 0.0 {
        (0.0, 0.0)
    } else {
        let g = current.norm() / v.norm();
        let mut phi = (v.arg() - current.arg()).to_degrees();
        while phi < 0.0 {
            phi += 360.0;
        }
        while phi >= 360.0 {
            phi -= 360.0;
        }
        (g, phi)
    };
    let residual = emi_flux + current * flux_per_ampere;
    let residual_ratio = if emi_flux.norm() == 0.0 { 0.0 } else { residual.norm() / emi_flux.norm() };
    Ok(DriveSolution { current, gain, phase_delay_deg, residual_ratio })
}

/// Spatial phase accrued over a propagation distance at f0; a diagnostic for
/// the quasi-static approximation, never silently applied.
pub fn propagation_phase_deg(f0_hz: f64, distance_m: f64) -> f64 {
    360.0 * f0_hz * distance_m / C_LIGHT
}

/// Per-point and flux-level statistics of the cancellation over the target
/// region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialReport {
    pub points: usize,
    pub hy_before_min: f64,
    pub hy_before_max: f64,
    pub hy_before_mean: f64,
    pub hy_after_min: f64,
    pub hy_after_max: f64,
    pub hy_after_mean: f64,
    /// 1 - |Phi_residual| / |Phi_EM| through the target coil.
    pub flux_reduction: f64,
    /// Per-point |Hy| before/after, for CSV emission.
    #[serde(skip)]
    pub per_point: Vec<(Vec3, f64, f64)>,
}

/// Evaluate |Hy| before/after cancellation on a ball of `region_radius`
/// around `region_center`, plus the flux reduction through `target_coil`.
pub fn spatial_cancellation_report(
    emi: &CavityField,
    cancel_path: &WindingPath,
    target_coil: &CoilSpec,
    drive: C64,
    region_center: Vec3,
    region_radius: f64,
    points_per_axis: usize,
    quadrature_order: usize,
) -> Result<SpatialReport> {
    let scaled = ScaledField(cancel_path, drive);
    // Sample a cubic lattice clipped to the ball.
    let n = points_per_axis.max(2);
    let mut pts = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let f = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                let offset = Vec3::new(f(i), f(j), f(k)) * region_radius;
                if offset.norm() <= region_radius {
                    pts.push(region_center + offset);
                }
            }
        }
    }
    if pts.iter().any(|p| !emi.cavity.contains(*p)) {
        return Err(CoreError::OutOfDomain(
            "target region extends outside the cavity interior".into(),
        ));
    }
    let rows: Vec<Result<(f64, f64)>> = maybe_par_map(&pts, |p| {
        let before = emi.h_at(*p)?;
        let add = scaled.h_at(*p)?;
        Ok((before[1].norm(), (before[1] + add[1]).norm()))
    });
    let mut per_point = Vec::with_capacity(pts.len());
    for (p, r) in pts.iter().zip(rows) {
        let (b, a) = r?;
        per_point.push((*p, b, a));
    }

    let emi_flux = flux_through(emi, target_coil, quadrature_order)?.flux;
    let cancel_per_amp = flux_through(cancel_path, target_coil, quadrature_order)?.flux;
    let residual = emi_flux + drive * cancel_per_amp;
    let flux_reduction = if emi_flux.norm() == 0.0 {
        0.0
    } else {
        1.0 - residual.norm() / emi_flux.norm()
    };

    let stats = |sel: fn(&(Vec3, f64, f64)) -> f64| {
        let vals: Vec<f64> = per_point.iter().map(sel).collect();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (min, max, mean)
    };
    let (b_min, b_max, b_mean) = stats(|t| t.1);
    let (a_min, a_max, a_mean) = stats(|t| t.2);
    Ok(SpatialReport {
        points: per_point.len(),
        hy_before_min: b_min,
        hy_before_max: b_max,
        hy_before_mean: b_mean,
        hy_after_min: a_min,
        hy_after_max: a_max,
        hy_after_mean: a_mean,
        flux_reduction,
        per_point,
    })
}

/// Combined field (EMI + driven cancellation coil) as a field source.
pub fn combined_field<'a>(
    emi: &'a CavityField,
    scaled_cancel: &'a ScaledField<'a>,
) -> SumField<'a> {
    SumField(emi, scaled_cancel)
}
