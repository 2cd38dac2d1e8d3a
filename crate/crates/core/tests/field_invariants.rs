//! Property tests of the cavity field model: exact symmetries, the
//! exponential depth law, and angle-invariance of the spatial shape.

use cavanc_core::cavity::{coupling_scale, CavityField, CavitySpec, IncidenceSpec};
use cavanc_core::geom::Vec3;
use proptest::prelude::*;

fn default_field() -> CavityField {
    CavityField::new(CavitySpec::default(), IncidenceSpec::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Hx flips sign and Hy is unchanged under y -> -y, bit for bit.
    #[test]
    fn mirror_symmetry_exact(
        x in -0.44f64..0.44,
        y in 0.0f64..0.295,
        z in -0.24f64..0.24,
    ) {
        let f = default_field();
        let hp = f.components_unchecked(Vec3::new(x, y, z));
        let hm = f.components_unchecked(Vec3::new(x, -y, z));
        prop_assert_eq!(hp[0].re, -hm[0].re);
        prop_assert_eq!(hp[1].re, hm[1].re);
    }

    /// Equal depth steps give a constant amplitude ratio exp(-alpha dx).
    #[test]
    fn depth_decay_ratio_constant(
        y in -0.25f64..0.25,
        z in -0.2f64..0.2,
        dx in 0.02f64..0.1,
    ) {
        let f = default_field();
        let expected = (-f.alpha() * dx).exp();
        let mut x = 0.4;
        let mut prev = f.components_unchecked(Vec3::new(x, y, z))[1].re;
        prop_assume!(prev.abs() > 1e-12);
        for _ in 0..4 {
            x -= dx;
            let cur = f.components_unchecked(Vec3::new(x, y, z))[1].re;
            prop_assert!((cur / prev - expected).abs() < 1e-12);
            prev = cur;
        }
    }

    /// The incidence angle scales the field without changing its shape:
    /// profiles normalized by their peak coincide across angles.
    #[test]
    fn angle_preserves_shape(a in 0.0f64..89.0, b in 0.0f64..89.0) {
        let mk = |deg| {
            let inc = IncidenceSpec { angle_deg: deg, ..IncidenceSpec::default() };
            CavityField::new(CavitySpec::default(), inc).unwrap()
        };
        let (fa, fb) = (mk(a), mk(b));
        let ys: Vec<f64> = (0..21).map(|i| -0.29 + 0.029 * i as f64).collect();
        let profile = |f: &CavityField| -> Vec<f64> {
            let vals: Vec<f64> =
                ys.iter().map(|&y| f.components_unchecked(Vec3::new(0.0, y, 0.0))[1].re).collect();
            let peak = vals.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
            vals.iter().map(|v| v / peak).collect()
        };
        for (u, v) in profile(&fa).iter().zip(profile(&fb).iter()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    /// Coupling efficiency is strictly decreasing in the incidence angle.
    #[test]
    fn coupling_monotone(a in 0.0f64..90.0, d in 0.5f64..30.0) {
        let b = (a + d).min(90.0);
        prop_assume!(b > a);
        let s = |deg| {
            coupling_scale(&IncidenceSpec { angle_deg: deg, ..IncidenceSpec::default() }).unwrap()
        };
        prop_assert!(s(b) < s(a));
    }
}
