//! Parametric EMI field model inside the single-side-open metal cavity.
//!
//! The field follows a below-cutoff aperture-mode ansatz: the transverse
//! component is center-peaked along y, the longitudinal component is
//! antisymmetric in y, both decay exponentially with depth from the opening
//! and carry a cosine envelope in z. The incidence angle scales the overall
//! amplitude without changing the spatial shape.
//!
//! This is a declared model, not a full-wave solver: it reproduces the
//! qualitative cavity-field structure (antisymmetric Hx, center-peaked Hy,
//! evanescent depth decay, monotone angle coupling) in closed form so every
//! property is testable.

use crate::error::{CoreError, Result};
use crate::geom::Vec3;
use crate::grid::{FieldSource, VectorFieldGrid};
use crate::par::maybe_par_map;
use crate::seeding::sub_rng;
use crate::{C64, C_LIGHT};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Geometry and working frequency of the imaging cavity.
///
/// The opening is the `x = +lx/2` face; the coordinate origin sits at the
/// cavity center.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySpec {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    /// Working frequency, Hz.
    pub f0_hz: f64,
    /// Longitudinal-to-transverse amplitude ratio of the model, in (0, 1).
    #[serde(default = "default_r_long")]
    pub r_long: f64,
}

fn default_r_long() -> f64 {
    0.5
}

impl Default for CavitySpec {
    fn default() -> Self {
        CavitySpec { lx: 0.88, ly: 0.59, lz: 0.48, f0_hz: 2.23e6, r_long: 0.5 }
    }
}

impl CavitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.lx <= 0.0 || self.ly <= 0.0 || self.lz <= 0.0 {
            return Err(CoreError::InvalidSpec("cavity dimensions must be positive".into()));
        }
        if self.f0_hz <= 0.0 {
            return Err(CoreError::InvalidSpec("working frequency must be positive".into()));
        }
        if !(self.r_long > 0.0 && self.r_long < 1.0) {
            return Err(CoreError::InvalidSpec(format!(
                "r_long must lie in (0, 1), got {}",
                self.r_long
            )));
        }
        Ok(())
    }

    /// Free-space wavelength at the working frequency.
    pub fn wavelength(&self) -> f64 {
        C_LIGHT / self.f0_hz
    }

    /// Quasi-static validity: wavelength must dwarf the cavity.
    pub fn quasi_static_valid(&self) -> bool {
        let max_dim = self.lx.max(self.ly).max(self.lz);
        self.wavelength() / max_dim > 10.0
    }

    /// Evanescent decay constant from the below-cutoff formula,
    /// `alpha = sqrt((pi/ly)^2 - k^2)`.
    pub fn decay_constant(&self) -> Result<f64> {
        let kc = std::f64::consts::PI / self.ly;
        let k = 2.0 * std::f64::consts::PI * self.f0_hz / C_LIGHT;
        if kc * kc <= k * k {
            return Err(CoreError::ModelInvalid(format!(
                "above cutoff: (pi/ly)^2 = {:.4e} <= k^2 = {:.4e}",
                kc * kc,
                k * k
            )));
        }
        Ok((kc * kc - k * k).sqrt())
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x.abs() <= self.lx / 2.0 && p.y.abs() <= self.ly / 2.0 && p.z.abs() <= self.lz / 2.0
    }
}

/// Which field vector the incident wave is rotated about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationAxis {
    /// Rotate k and H about the (fixed) electric field axis.
    AboutE,
    /// Rotate k and E about the (fixed) magnetic field axis.
    AboutH,
}

/// Incident plane-wave description. Base orientation: k along -x, H along y,
/// E along z; `angle_deg` rotates away from normal incidence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidenceSpec {
    pub rotation_axis: RotationAxis,
    pub angle_deg: f64,
    /// Incident magnetic field amplitude, A/m.
    pub h0: f64,
}

impl Default for IncidenceSpec {
    fn default() -> Self {
        IncidenceSpec { rotation_axis: RotationAxis::AboutE, angle_deg: 0.0, h0: 1.0 }
    }
}

impl IncidenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=90.0).contains(&self.angle_deg) {
            return Err(CoreError::InvalidSpec(format!(
                "incidence angle must be in [0, 90] degrees, got {}",
                self.angle_deg
            )));
        }
        if self.h0 < 0.0 {
            return Err(CoreError::InvalidSpec("H0 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Coupling efficiency scale S(theta), in [0, 1].
///
/// S(0) = 1, strictly decreasing to S(90) = 0. The cosine law is the minimal
/// projection-consistent choice for both rotation axes: rotating about E
/// projects the incident H onto y, rotating about H projects k onto the
/// aperture normal.
pub fn coupling_scale(incidence: &IncidenceSpec) -> Result<f64> {
    incidence.validate()?;
    Ok(incidence.angle_deg.to_radians().cos())
}

/// The closed-form cavity EMI field. Evaluates anywhere inside the interior.
#[derive(Debug, Clone, Copy)]
pub struct CavityField {
    pub cavity: CavitySpec,
    pub incidence: IncidenceSpec,
    alpha: f64,
    scale: f64,
}

impl CavityField {
    pub fn new(cavity: CavitySpec, incidence: IncidenceSpec) -> Result<Self> {
        cavity.validate()?;
        incidence.validate()?;
        let alpha = cavity.decay_constant()?;
        let scale = coupling_scale(&incidence)?;
        Ok(CavityField { cavity, incidence, alpha, scale })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Field components at a point, without the interior bounds check.
    /// Used by quadrature code that has already validated the surface.
    pub fn components_unchecked(&self, p: Vec3) -> [C64; 3] {
        let c = &self.cavity;
        let depth = (-self.alpha * (c.lx / 2.0 - p.x)).exp();
        let env_z = (std::f64::consts::PI * p.z / c.lz).cos();
        let uy = std::f64::consts::PI * p.y / c.ly;
        let amp = self.incidence.h0 * self.scale * depth * env_z;
        let hx = amp * c.r_long * uy.sin();
        let hy = amp * uy.cos();
        [C64::new(hx, 0.0), C64::new(hy, 0.0), C64::new(0.0, 0.0)]
    }
}

impl FieldSource for CavityField {
    fn h_at(&self, p: Vec3) -> Result<[C64; 3]> {
        if !self.cavity.contains(p) {
            return Err(CoreError::OutOfDomain(format!(
                "point ({:.3}, {:.3}, {:.3}) outside cavity interior",
                p.x, p.y, p.z
            )));
        }
        Ok(self.components_unchecked(p))
    }
}

/// Sample the cavity field on a regular grid.
pub fn emi_field(
    cavity: &CavitySpec,
    incidence: &IncidenceSpec,
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
) -> Result<VectorFieldGrid> {
    let field = CavityField::new(*cavity, *incidence)?;
    for (&v, half) in xs
        .iter()
        .map(|v| (v, cavity.lx / 2.0))
        .chain(ys.iter().map(|v| (v, cavity.ly / 2.0)))
        .chain(zs.iter().map(|v| (v, cavity.lz / 2.0)))
        .collect::<Vec<_>>()
        .iter()
    {
        if v.abs() > *half {
            return Err(CoreError::OutOfDomain(format!(
                "grid coordinate {v} outside cavity interior"
            )));
        }
    }

    let points: Vec<Vec3> = xs
        .iter()
        .flat_map(|&x| {
            ys.iter().flat_map(move |&y| zs.iter().map(move |&z| Vec3::new(x, y, z)))
        })
        .collect();
    let values = maybe_par_map(&points, |p| field.components_unchecked(*p));

    let mut grid = VectorFieldGrid::zeros(
        xs.to_vec(),
        ys.to_vec(),
        zs.to_vec(),
        format!(
            "cavity evanescent mode, f0 = {:.4e} Hz, theta = {} deg",
            cavity.f0_hz, incidence.angle_deg
        ),
    );
    let mut it = values.into_iter();
    for ix in 0..xs.len() {
        for iy in 0..ys.len() {
            for iz in 0..zs.len() {
                let v = it.next().unwrap();
                grid.set(ix, iy, iz, v);
            }
        }
    }
    Ok(grid)
}

/// Virtual mapping-campaign description: a probe grid, repeats per point,
/// and measurement-noise magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub min: Vec3,
    pub max: Vec3,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Repeated samples per point.
    pub repeats: usize,
    /// Relative rms of per-sample probe noise (applied to raw and reference
    /// readings independently). Zero gives exact normalization.
    pub measurement_noise: f64,
}

/// Multiplicative slow random walk on the source amplitude.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    /// Maximum relative excursion of the walk (clamped).
    pub amplitude: f64,
    /// Relative step size per sample.
    pub step: f64,
}

/// Result of a virtual mapping campaign: per-point normalized field
/// estimates. Normalization divides each raw sample by the simultaneous
/// external reference, so source drift cancels.
#[derive(Debug, Clone)]
pub struct MappingCampaign {
    pub positions: Vec<Vec3>,
    /// Per point: mean of `repeats` normalized samples, for Hx and Hy.
    pub hx_normalized: Vec<f64>,
    pub hy_normalized: Vec<f64>,
    /// Per-point raw samples, repeats-major (diagnostic).
    pub raw_hy: Vec<Vec<f64>>,
    /// External reference readings, one per sample event.
    pub reference_readings: Vec<f64>,
}

pub fn run_mapping_campaign(
    cavity: &CavitySpec,
    incidence: &IncidenceSpec,
    campaign: &CampaignSpec,
    drift: &DriftModel,
    rng_seed: u64,
) -> Result<MappingCampaign> {
    let field = CavityField::new(*cavity, *incidence)?;
    if campaign.repeats == 0 {
        return Err(CoreError::InvalidSpec("repeats must be >= 1".into()));
    }
    let lin = |a: f64, b: f64, n: usize, i: usize| {
        if n == 1 {
            (a + b) / 2.0
        } else {
            a + (b - a) * i as f64 / (n - 1) as f64
        }
    };
    let mut positions = Vec::new();
    for ix in 0..campaign.nx {
        for iy in 0..campaign.ny {
            for iz in 0..campaign.nz {
                let p = Vec3::new(
                    lin(campaign.min.x, campaign.max.x, campaign.nx, ix),
                    lin(campaign.min.y, campaign.max.y, campaign.ny, iy),
                    lin(campaign.min.z, campaign.max.z, campaign.nz, iz),
                );
                if !cavity.contains(p) {
                    return Err(CoreError::OutOfDomain(format!(
                        "campaign point ({:.3}, {:.3}, {:.3}) outside cavity",
                        p.x, p.y, p.z
                    )));
                }
                positions.push(p);
            }
        }
    }

    // Single logical drift/noise sequence over all sample events.
    let mut rng = sub_rng(rng_seed, "mapping-campaign", &[]);
    let mut drift_value = 1.0f64;
    let mut hx_normalized = Vec::with_capacity(positions.len());
    let mut hy_normalized = Vec::with_capacity(positions.len());
    let mut raw_hy = Vec::with_capacity(positions.len());
    let mut reference_readings = Vec::new();

    // External probes sit outside the cavity and read the incident source
    // amplitude directly (one probe per measured component).
    let ref_level = incidence.h0.max(f64::MIN_POSITIVE);

    for &p in &positions {
        let h = field.components_unchecked(p);
        let (hx_true, hy_true) = (h[0].re, h[1].re);
        let mut acc_x = 0.0;
        let mut acc_y = 0.0;
        let mut raws = Vec::with_capacity(campaign.repeats);
        for _ in 0..campaign.repeats {
            drift_value *= 1.0 + drift.step * rng.gen_range(-1.0..1.0);
            drift_value = drift_value.clamp(1.0 - drift.amplitude, 1.0 + drift.amplitude);
            let noise = |rng: &mut rand_chacha::ChaCha8Rng| {
                1.0 + campaign.measurement_noise * rng.gen_range(-1.0..1.0)
            };
            let raw_x = hx_true * drift_value * noise(&mut rng);
            let raw_y = hy_true * drift_value * noise(&mut rng);
            let ref_x = ref_level * drift_value * noise(&mut rng);
            let ref_y = ref_level * drift_value * noise(&mut rng);
            if ref_x == 0.0 || ref_y == 0.0 {
                return Err(CoreError::DegenerateNormalization);
            }
            reference_readings.push(ref_y);
            raws.push(raw_y);
            acc_x += raw_x / ref_x;
            acc_y += raw_y / ref_y;
        }
        hx_normalized.push(acc_x / campaign.repeats as f64);
        hy_normalized.push(acc_y / campaign.repeats as f64);
        raw_hy.push(raws);
    }

    Ok(MappingCampaign { positions, hx_normalized, hy_normalized, raw_hy, reference_readings })
}
