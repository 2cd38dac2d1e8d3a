//! Sampled complex vector fields on regular 3D grids, plus the trait
//! abstracting "something that can be evaluated as an H field".

use crate::error::{CoreError, Result};
use crate::geom::Vec3;
use crate::C64;
use std::io::Write;

/// Anything that yields a complex H vector (A/m) at a point. `Sync` so
/// sources can be evaluated from parallel grid loops.
pub trait FieldSource: Sync {
    fn h_at(&self, p: Vec3) -> Result<[C64; 3]>;
}

/// Complex phasor H field sampled on a regular grid, one lattice per
/// Cartesian component. Axis sample lists must be strictly increasing.
#[derive(Debug, Clone)]
pub struct VectorFieldGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    /// Row-major lattices indexed as `[ix][iy][iz]` flattened.
    pub hx: Vec<C64>,
    pub hy: Vec<C64>,
    pub hz: Vec<C64>,
    pub source: String,
}

impl VectorFieldGrid {
    pub fn zeros(xs: Vec<f64>, ys: Vec<f64>, zs: Vec<f64>, source: String) -> Self {
        let n = xs.len() * ys.len() * zs.len();
        VectorFieldGrid {
            xs,
            ys,
            zs,
            hx: vec![C64::new(0.0, 0.0); n],
            hy: vec![C64::new(0.0, 0.0); n],
            hz: vec![C64::new(0.0, 0.0); n],
            source,
        }
    }

    fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.ys.len() + iy) * self.zs.len() + iz
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, v: [C64; 3]) {
        let i = self.index(ix, iy, iz);
        self.hx[i] = v[0];
        self.hy[i] = v[1];
        self.hz[i] = v[2];
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> [C64; 3] {
        let i = self.index(ix, iy, iz);
        [self.hx[i], self.hy[i], self.hz[i]]
    }

    pub fn all_finite(&self) -> bool {
        self.hx.iter().chain(&self.hy).chain(&self.hz).all(|c| c.re.is_finite() && c.im.is_finite())
    }

    fn bracket(axis: &[f64], v: f64) -> Option<(usize, f64)> {
        if axis.is_empty() {
            return None;
        }
        if axis.len() == 1 {
            return if (v - axis[0]).abs() < 1e-12 { Some((0, 0.0)) } else { None };
        }
        if v < axis[0] - 1e-12 || v > axis[axis.len() - 1] + 1e-12 {
            return None;
        }
        let v = v.clamp(axis[0], axis[axis.len() - 1]);
        let mut i = match axis.binary_search_by(|a| a.partial_cmp(&v).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i >= axis.len() - 1 {
            i = axis.len() - 2;
        }
        let t = (v - axis[i]) / (axis[i + 1] - axis[i]);
        Some((i, t))
    }

    /// Trilinear interpolation at a point inside the grid bounds.
    pub fn interpolate(&self, p: Vec3) -> Result<[C64; 3]> {
        let (ix, tx) = Self::bracket(&self.xs, p.x)
            .ok_or_else(|| CoreError::OutOfDomain(format!("x = {} outside grid", p.x)))?;
        let (iy, ty) = Self::bracket(&self.ys, p.y)
            .ok_or_else(|| CoreError::OutOfDomain(format!("y = {} outside grid", p.y)))?;
        let (iz, tz) = Self::bracket(&self.zs, p.z)
            .ok_or_else(|| CoreError::OutOfDomain(format!("z = {} outside grid", p.z)))?;

        let mut out = [C64::new(0.0, 0.0); 3];
        let single = |n: usize, i: usize, t: f64, d: usize| -> (usize, f64) {
            if n == 1 {
                (i, 0.0)
            } else {
                (i + d, if d == 0 { 1.0 - t } else { t })
            }
        };
        for dx in 0..2usize.min(self.xs.len()) {
            let (jx, wx) = single(self.xs.len(), ix, tx, dx);
            for dy in 0..2usize.min(self.ys.len()) {
                let (jy, wy) = single(self.ys.len(), iy, ty, dy);
                for dz in 0..2usize.min(self.zs.len()) {
                    let (jz, wz) = single(self.zs.len(), iz, tz, dz);
                    let w = if self.xs.len() == 1 { 1.0 } else { wx }
                        * if self.ys.len() == 1 { 1.0 } else { wy }
                        * if self.zs.len() == 1 { 1.0 } else { wz };
                    let v = self.get(jx, jy, jz);
                    for k in 0..3 {
                        out[k] += v[k] * w;
                    }
                }
            }
        }
        Ok(out)
    }

    /// CSV export: `x,y,z,hx_re,hx_im,hy_re,hy_im,hz_re,hz_im` per line.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "x,y,z,hx_re,hx_im,hy_re,hy_im,hz_re,hz_im")?;
        for (ix, &x) in self.xs.iter().enumerate() {
            for (iy, &y) in self.ys.iter().enumerate() {
                for (iz, &z) in self.zs.iter().enumerate() {
                    let v = self.get(ix, iy, iz);
                    writeln!(
                        w,
                        "{x},{y},{z},{},{},{},{},{},{}",
                        v[0].re, v[0].im, v[1].re, v[1].im, v[2].re, v[2].im
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Binary export: magic `VFLD`, u32 header length, JSON header with axis
    /// samples, then little-endian f64 pairs for hx, hy, hz lattices.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::json!({
            "format_version": 1,
            "xs": self.xs,
            "ys": self.ys,
            "zs": self.zs,
            "source": self.source,
        });
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| CoreError::Config(e.to_string()))?;
        w.write_all(b"VFLD")?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for lattice in [&self.hx, &self.hy, &self.hz] {
            for c in lattice {
                w.write_all(&c.re.to_le_bytes())?;
                w.write_all(&c.im.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

impl FieldSource for VectorFieldGrid {
    fn h_at(&self, p: Vec3) -> Result<[C64; 3]> {
        self.interpolate(p)
    }
}

/// A field given by a closure; handy for analytic test fields.
pub struct FnField<F: Fn(Vec3) -> [C64; 3] + Sync>(pub F);

impl<F: Fn(Vec3) -> [C64; 3] + Sync> FieldSource for FnField<F> {
    fn h_at(&self, p: Vec3) -> Result<[C64; 3]> {
        Ok((self.0)(p))
    }
}

/// Superposition of two field sources.
pub struct SumField<'a>(pub &'a dyn FieldSource, pub &'a dyn FieldSource);

impl FieldSource for SumField<'_> {
    fn h_at(&self, p: Vec3) -> Result<[C64; 3]> {
        let a = self.0.h_at(p)?;
        let b = self.1.h_at(p)?;
        Ok([a[0] + b[0], a[1] + b[1], a[2] + b[2]])
    }
}

/// A field source scaled by a complex factor.
pub struct ScaledField<'a>(pub &'a dyn FieldSource, pub C64);

impl FieldSource for ScaledField<'_> {
    fn h_at(&self, p: Vec3) -> Result<[C64; 3]> {
        let a = self.0.h_at(p)?;
        Ok([a[0] * self.1, a[1] * self.1, a[2] * self.1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_grid() -> VectorFieldGrid {
        // hx = x + 2y + 3z, sampled on a 3x3x3 grid.
        let axis = vec![0.0, 0.5, 1.0];
        let mut g = VectorFieldGrid::zeros(axis.clone(), axis.clone(), axis, "test".into());
        for ix in 0..3 {
            for iy in 0..3 {
                for iz in 0..3 {
                    let (x, y, z) = (g.xs[ix], g.ys[iy], g.zs[iz]);
                    g.set(ix, iy, iz, [
                        C64::new(x + 2.0 * y + 3.0 * z, 0.0),
                        C64::new(0.0, 0.0),
                        C64::new(0.0, 0.0),
                    ]);
                }
            }
        }
        g
    }

    #[test]
    fn trilinear_exact_on_linear_field() {
        let g = linear_grid();
        let v = g.interpolate(Vec3::new(0.3, 0.7, 0.25)).unwrap();
        let expected = 0.3 + 2.0 * 0.7 + 3.0 * 0.25;
        assert!((v[0].re - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let g = linear_grid();
        assert!(matches!(
            g.interpolate(Vec3::new(1.5, 0.0, 0.0)),
            Err(CoreError::OutOfDomain(_))
        ));
    }
}
