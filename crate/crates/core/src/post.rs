//! Frequency-banded least-squares EMI cancellation against reference
//! channels.
//!
//! The readout axis is also the time axis within a line, so the transfer
//! between a reference detector and a receive coil lives along the readout
//! spectrum. The model is piecewise constant over a contiguous band
//! partition: per band, one complex coefficient per reference, estimated on
//! signal-poor periphery rows and subtracted everywhere.

use crate::error::{CoreError, Result};
use crate::kspace::{fft_in_place, ifft_in_place, KSpaceMatrix};
use crate::par::maybe_par_map_range;
use crate::C64;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Contiguous, disjoint bands covering all readout bins `[0, n_read)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPartition {
    n_read: usize,
    bands: Vec<Range<usize>>,
}

impl BandPartition {
    /// Split `[0, n_read)` into `b` near-equal contiguous bands.
    pub fn equal(n_read: usize, b: usize) -> Result<Self> {
        if b == 0 || b > n_read {
            return Err(CoreError::InvalidSpec(format!(
                "band count {b} must be in 1..={n_read}"
            )));
        }
        let mut edges = Vec::with_capacity(b + 1);
        for i in 0..=b {
            edges.push(i * n_read / b);
        }
        Self::from_edges(n_read, &edges)
    }

    /// Build from explicit edges; must start at 0, end at n_read, strictly
    /// increase.
    pub fn from_edges(n_read: usize, edges: &[usize]) -> Result<Self> {
        if edges.len() < 2 || edges[0] != 0 || *edges.last().unwrap() != n_read {
            return Err(CoreError::InvalidSpec(
                "band edges must run from 0 to n_read".into(),
            ));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidSpec("band edges must strictly increase".into()));
        }
        let bands = edges.windows(2).map(|w| w[0]..w[1]).collect();
        Ok(BandPartition { n_read, bands })
    }

    pub fn n_read(&self) -> usize {
        self.n_read
    }

    pub fn bands(&self) -> &[Range<usize>] {
        &self.bands
    }

    pub fn band_of(&self, bin: usize) -> Option<usize> {
        self.bands.iter().position(|r| r.contains(&bin))
    }
}

/// Which rows are treated as signal-poor for transfer estimation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PeripheryPolicy {
    /// The first `n` acquired rows.
    FirstRows { n: usize },
    /// The `n` highest-spatial-frequency phase encodes (centered on
    /// `n_phase/2` in unshifted DFT row order).
    OuterPhaseEncodes { n: usize },
}

impl Default for PeripheryPolicy {
    fn default() -> Self {
        PeripheryPolicy::FirstRows { n: 1 }
    }
}

/// Resolve a periphery policy into concrete row indices.
pub fn select_periphery(n_phase: usize, policy: PeripheryPolicy) -> Result<Vec<usize>> {
    match policy {
        PeripheryPolicy::FirstRows { n } => {
            if n < 1 || n > n_phase {
                return Err(CoreError::Policy(format!(
                    "first-rows({n}) needs 1 <= n <= {n_phase}"
                )));
            }
            Ok((0..n).collect())
        }
        PeripheryPolicy::OuterPhaseEncodes { n } => {
            if n < 1 || n > n_phase {
                return Err(CoreError::Policy(format!(
                    "outer-phase-encodes({n}) needs 1 <= n <= {n_phase}"
                )));
            }
            let mid = n_phase / 2;
            let lo = mid - n / 2;
            Ok((lo..lo + n).collect())
        }
    }
}

/// Estimated band-wise transfer from reference channels to one receive coil.
#[derive(Debug, Clone)]
pub struct TransferModel {
    pub partition: BandPartition,
    /// `coefficients[band][ref]`.
    pub coefficients: Vec<Vec<C64>>,
    pub ref_names: Vec<String>,
    /// Bands whose reference power was too small to estimate; their
    /// coefficients are zero rather than amplified garbage.
    pub degenerate: Vec<bool>,
    pub ridge: f64,
}

fn solve_hermitian(mut g: Vec<Vec<C64>>, mut rhs: Vec<C64>) -> Option<Vec<C64>> {
    // Gaussian elimination with partial pivoting; systems here are tiny
    // (one unknown per reference channel).
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| {
            g[a][col].norm().partial_cmp(&g[b][col].norm()).unwrap()
        })?;
        if g[pivot][col].norm() < 1e-300 {
            return None;
        }
        g.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = g[row][col] / g[col][col];
            for k in col..n {
                let sub = f * g[col][k];
                g[row][k] -= sub;
            }
            let sub = f * rhs[col];
            rhs[row] -= sub;
        }
    }
    let mut x = vec![C64::new(0.0, 0.0); n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= g[row][k] * x[k];
        }
        x[row] = acc / g[row][row];
    }
    Some(x)
}

/// Estimate per-band transfer coefficients by ridge-regularized least
/// squares over the periphery rows. `ridge_rel` scales the mean reference
/// band power into the regularizer.
pub fn estimate_transfer(
    rf: &KSpaceMatrix,
    refs: &[&KSpaceMatrix],
    partition: &BandPartition,
    policy: PeripheryPolicy,
    ridge_rel: f64,
) -> Result<TransferModel> {
    if refs.is_empty() {
        return Err(CoreError::MissingInput("no reference channels".into()));
    }
    if partition.n_read() != rf.n_read {
        return Err(CoreError::InvalidInput("partition does not match readout length".into()));
    }
    for r in refs {
        if !rf.same_dims(r) {
            return Err(CoreError::InvalidInput(format!(
                "reference {} dims differ from receive channel",
                r.channel
            )));
        }
    }
    if !(ridge_rel >= 0.0) {
        return Err(CoreError::InvalidSpec("ridge must be non-negative".into()));
    }
    let rows = select_periphery(rf.n_phase, policy)?;
    let m = refs.len();

    // Row spectra of the periphery, receive channel and references.
    let spectrum = |k: &KSpaceMatrix, p: usize| -> Vec<C64> {
        let mut row = k.row(p).to_vec();
        fft_in_place(&mut row);
        row
    };
    let rf_spec: Vec<Vec<C64>> = rows.iter().map(|&p| spectrum(rf, p)).collect();
    let ref_spec: Vec<Vec<Vec<C64>>> =
        refs.iter().map(|r| rows.iter().map(|&p| spectrum(r, p)).collect()).collect();

    // Overall reference power sets the scale for degeneracy detection: a
    // band is degenerate when its reference power is at rounding level
    // relative to the rest of the spectrum.
    let overall_power: f64 = ref_spec
        .iter()
        .flat_map(|per_row| per_row.iter())
        .flat_map(|row| row.iter())
        .map(|v| v.norm_sqr())
        .sum::<f64>()
        / (m * rows.len() * rf.n_read) as f64;

    let n_bands = partition.bands().len();
    let mut coefficients = Vec::with_capacity(n_bands);
    let mut degenerate = Vec::with_capacity(n_bands);
    let mut ridge_used = 0.0;
    for band in partition.bands() {
        let mut g = vec![vec![C64::new(0.0, 0.0); m]; m];
        let mut rhs = vec![C64::new(0.0, 0.0); m];
        for (row_idx, _) in rows.iter().enumerate() {
            for k in band.clone() {
                for i in 0..m {
                    let ri = ref_spec[i][row_idx][k];
                    for j in 0..m {
                        g[i][j] += ri.conj() * ref_spec[j][row_idx][k];
                    }
                    rhs[i] += ri.conj() * rf_spec[row_idx][k];
                }
            }
        }
        let mean_power =
            (0..m).map(|i| g[i][i].re).sum::<f64>() / (m * band.len() * rows.len()) as f64;
        if !(mean_power > 1e-24 * overall_power) {
            coefficients.push(vec![C64::new(0.0, 0.0); m]);
            degenerate.push(true);
            continue;
        }
        let eps = ridge_rel * mean_power;
        ridge_used = eps;
        for i in 0..m {
            g[i][i] += C64::new(eps, 0.0);
        }
        match solve_hermitian(g, rhs) {
            Some(c) => {
                coefficients.push(c);
                degenerate.push(false);
            }
            None => {
                coefficients.push(vec![C64::new(0.0, 0.0); m]);
                degenerate.push(true);
            }
        }
    }
    Ok(TransferModel {
        partition: partition.clone(),
        coefficients,
        ref_names: refs.iter().map(|r| r.channel.clone()).collect(),
        degenerate,
        ridge: ridge_used,
    })
}

/// Subtract the modeled reference contribution from every row.
pub fn apply_cancellation(
    rf: &KSpaceMatrix,
    refs: &[&KSpaceMatrix],
    model: &TransferModel,
) -> Result<KSpaceMatrix> {
    if refs.len() != model.ref_names.len() {
        return Err(CoreError::InvalidInput(format!(
            "model expects {} references, got {}",
            model.ref_names.len(),
            refs.len()
        )));
    }
    for (r, name) in refs.iter().zip(&model.ref_names) {
        if &r.channel != name {
            return Err(CoreError::InvalidInput(format!(
                "reference order mismatch: expected {}, got {}",
                name, r.channel
            )));
        }
        if !rf.same_dims(r) {
            return Err(CoreError::InvalidInput("reference dims mismatch".into()));
        }
    }
    if model.partition.n_read() != rf.n_read {
        return Err(CoreError::InvalidInput("partition does not match readout length".into()));
    }

    let bands = model.partition.bands().to_vec();
    let rows: Vec<Vec<C64>> = maybe_par_map_range(rf.n_phase, |p| {
        let mut row = rf.row(p).to_vec();
        fft_in_place(&mut row);
        let ref_rows: Vec<Vec<C64>> = refs
            .iter()
            .map(|r| {
                let mut rr = r.row(p).to_vec();
                fft_in_place(&mut rr);
                rr
            })
            .collect();
        for (b, band) in bands.iter().enumerate() {
            for k in band.clone() {
                for (i, rr) in ref_rows.iter().enumerate() {
                    row[k] -= model.coefficients[b][i] * rr[k];
                }
            }
        }
        ifft_in_place(&mut row);
        row
    });

    let mut out = KSpaceMatrix::zeros(rf.n_read, rf.n_phase, rf.dwell_s, &rf.channel);
    for (p, row) in rows.into_iter().enumerate() {
        out.row_mut(p).copy_from_slice(&row);
    }
    Ok(out)
}

/// Per-row and overall residual power in dB: `10 log10(P_after / P_before)`,
/// floored at -300 dB.
#[derive(Debug, Clone, Serialize)]
pub struct SuppressionMetric {
    pub per_row_db: Vec<f64>,
    pub overall_db: f64,
}

pub fn emi_suppression_metric(before: &KSpaceMatrix, after: &KSpaceMatrix) -> Result<SuppressionMetric> {
    if !before.same_dims(after) {
        return Err(CoreError::InvalidInput("dims mismatch".into()));
    }
    let db = |num: f64, den: f64| -> f64 {
        if den <= 0.0 {
            return 0.0;
        }
        (10.0 * (num / den).log10()).max(-300.0)
    };
    let per_row_db = (0..before.n_phase)
        .map(|p| db(after.row_rms(p).powi(2), before.row_rms(p).powi(2)))
        .collect();
    Ok(SuppressionMetric { per_row_db, overall_db: db(after.power(), before.power()) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::sub_rng;
    use rand::Rng;

    fn random_kspace(n_read: usize, n_phase: usize, seed: u64, channel: &str) -> KSpaceMatrix {
        let mut rng = sub_rng(seed, "post-test", &[0]);
        let mut k = KSpaceMatrix::zeros(n_read, n_phase, 1e-5, channel);
        for v in k.data.iter_mut() {
            *v = C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        }
        k
    }

    /// rf rows built as banded mixtures of the references, in the frequency
    /// domain, so the model structure matches exactly.
    fn synthesize_rf(refs: &[&KSpaceMatrix], part: &BandPartition, coeffs: &[Vec<C64>]) -> KSpaceMatrix {
        let (nr, np) = (refs[0].n_read, refs[0].n_phase);
        let mut rf = KSpaceMatrix::zeros(nr, np, 1e-5, "rf");
        for p in 0..np {
            let mut acc = vec![C64::new(0.0, 0.0); nr];
            for (i, r) in refs.iter().enumerate() {
                let mut row = r.row(p).to_vec();
                fft_in_place(&mut row);
                for (b, band) in part.bands().iter().enumerate() {
                    for k in band.clone() {
                        acc[k] += coeffs[b][i] * row[k];
                    }
                }
            }
            ifft_in_place(&mut acc);
            rf.row_mut(p).copy_from_slice(&acc);
        }
        rf
    }

    #[test]
    fn equal_partition_covers_and_is_disjoint() {
        for b in [1, 3, 4, 7, 16] {
            let part = BandPartition::equal(64, b).unwrap();
            let mut covered = vec![0u8; 64];
            for band in part.bands() {
                for k in band.clone() {
                    covered[k] += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "b = {b}");
        }
        assert!(BandPartition::equal(8, 0).is_err());
        assert!(BandPartition::equal(8, 9).is_err());
    }

    #[test]
    fn periphery_policies() {
        assert_eq!(select_periphery(16, PeripheryPolicy::FirstRows { n: 3 }).unwrap(), vec![0, 1, 2]);
        let outer = select_periphery(16, PeripheryPolicy::OuterPhaseEncodes { n: 4 }).unwrap();
        assert_eq!(outer, vec![6, 7, 8, 9]);
        assert!(matches!(
            select_periphery(16, PeripheryPolicy::FirstRows { n: 0 }),
            Err(CoreError::Policy(_))
        ));
        assert!(matches!(
            select_periphery(16, PeripheryPolicy::OuterPhaseEncodes { n: 17 }),
            Err(CoreError::Policy(_))
        ));
    }

    #[test]
    fn exact_recovery_single_ref_single_band() {
        let r1 = random_kspace(32, 8, 11, "ref1");
        let part = BandPartition::equal(32, 1).unwrap();
        let truth = vec![vec![C64::new(1.3, -0.7)]];
        let rf = synthesize_rf(&[&r1], &part, &truth);
        let model =
            estimate_transfer(&rf, &[&r1], &part, PeripheryPolicy::FirstRows { n: 1 }, 0.0).unwrap();
        assert!((model.coefficients[0][0] - truth[0][0]).norm() < 1e-10);
        let out = apply_cancellation(&rf, &[&r1], &model).unwrap();
        assert!(out.power() < 1e-20 * rf.power().max(1e-300));
    }

    #[test]
    fn exact_recovery_two_refs_eight_bands() {
        let r1 = random_kspace(64, 8, 21, "ref1");
        let r2 = random_kspace(64, 8, 22, "ref2");
        let part = BandPartition::equal(64, 8).unwrap();
        let mut rng = sub_rng(99, "coef", &[0]);
        let truth: Vec<Vec<C64>> = (0..8)
            .map(|_| {
                (0..2)
                    .map(|_| C64::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0))
                    .collect()
            })
            .collect();
        let rf = synthesize_rf(&[&r1, &r2], &part, &truth);
        let model =
            estimate_transfer(&rf, &[&r1, &r2], &part, PeripheryPolicy::OuterPhaseEncodes { n: 8 }, 0.0)
                .unwrap();
        for b in 0..8 {
            for i in 0..2 {
                assert!(
                    (model.coefficients[b][i] - truth[b][i]).norm() < 1e-9,
                    "band {b} ref {i}"
                );
            }
        }
        let out = apply_cancellation(&rf, &[&r1, &r2], &model).unwrap();
        let residual_db = 10.0 * (out.power() / rf.power()).log10();
        assert!(residual_db < -190.0, "residual {residual_db} dB");
    }

    #[test]
    fn degenerate_band_flagged_not_amplified() {
        let mut r1 = random_kspace(32, 4, 31, "ref1");
        // Kill the upper half of the reference spectrum on every row.
        for p in 0..4 {
            let mut row = r1.row(p).to_vec();
            fft_in_place(&mut row);
            for v in row.iter_mut().skip(16) {
                *v = C64::new(0.0, 0.0);
            }
            ifft_in_place(&mut row);
            r1.row_mut(p).copy_from_slice(&row);
        }
        let part = BandPartition::from_edges(32, &[0, 16, 32]).unwrap();
        let rf = random_kspace(32, 4, 32, "rf");
        let model =
            estimate_transfer(&rf, &[&r1], &part, PeripheryPolicy::FirstRows { n: 2 }, 1e-9).unwrap();
        assert!(!model.degenerate[0]);
        assert!(model.degenerate[1]);
        assert_eq!(model.coefficients[1][0], C64::new(0.0, 0.0));
        let out = apply_cancellation(&rf, &[&r1], &model).unwrap();
        assert!(out.all_finite());
    }

    #[test]
    fn reference_order_enforced() {
        let r1 = random_kspace(32, 4, 41, "ref1");
        let r2 = random_kspace(32, 4, 42, "ref2");
        let part = BandPartition::equal(32, 1).unwrap();
        let rf = random_kspace(32, 4, 43, "rf");
        let model =
            estimate_transfer(&rf, &[&r1, &r2], &part, PeripheryPolicy::FirstRows { n: 2 }, 1e-9)
                .unwrap();
        assert!(apply_cancellation(&rf, &[&r2, &r1], &model).is_err());
    }

    #[test]
    fn suppression_metric_floor() {
        let before = random_kspace(32, 4, 51, "x");
        let after = KSpaceMatrix::zeros(32, 4, 1e-5, "x");
        let m = emi_suppression_metric(&before, &after).unwrap();
        assert_eq!(m.overall_db, -300.0);
        assert!(m.per_row_db.iter().all(|&d| d == -300.0));
        let same = emi_suppression_metric(&before, &before).unwrap();
        assert!(same.overall_db.abs() < 1e-12);
    }
}
