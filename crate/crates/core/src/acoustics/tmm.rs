//! Four-pole (transfer matrix) composition of duct segments and side
//! branches.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::{slit_impedance, AirMedium, FrequencyGrid, StlCurve, STL_CAP_DB};
use crate::error::{Error, Result};
use crate::geometry::VarGeometry;

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Relates (pressure, volume velocity) at the inlet to the outlet:
/// `[p1, U1] = [[a, b], [c, d]] · [p2, U2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourPole {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl FourPole {
    pub const IDENTITY: FourPole = FourPole {
        a: ONE,
        b: ZERO,
        c: ZERO,
        d: ONE,
    };

    /// Lossless straight duct of length `length_m` with characteristic
    /// acoustic impedance `z0` (Pa·s/m³).
    pub fn duct(k: f64, length_m: f64, z0: f64) -> Self {
        let (s, c) = (k * length_m).sin_cos();
        FourPole {
            a: Complex64::new(c, 0.0),
            b: J * z0 * s,
            c: J * s / z0,
            d: Complex64::new(c, 0.0),
        }
    }

    /// Side branch of acoustic impedance `z_branch` in parallel with the
    /// duct. An infinite branch impedance is the identity.
    pub fn shunt(z_branch: Complex64) -> Self {
        let y = if z_branch.is_infinite() { ZERO } else { z_branch.inv() };
        FourPole {
            a: ONE,
            b: ZERO,
            c: y,
            d: ONE,
        }
    }

    pub fn then(&self, next: &FourPole) -> FourPole {
        FourPole {
            a: self.a * next.a + self.b * next.c,
            b: self.a * next.b + self.b * next.d,
            c: self.c * next.a + self.d * next.c,
            d: self.c * next.b + self.d * next.d,
        }
    }

    pub fn determinant(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }

    /// Transmission loss between anechoic ports of impedance `z0`.
    pub fn transmission_loss(&self, z0: f64) -> f64 {
        let s = self.a + self.b / z0 + self.c * z0 + self.d;
        let tl = 20.0 * (s.norm() / 2.0).log10();
        if tl.is_finite() {
            tl.min(STL_CAP_DB)
        } else {
            STL_CAP_DB
        }
    }
}

/// Composes the chain `duct(l_c/2) · shunt · duct(l_c/2)` for one unit.
pub fn unit_four_pole(g: &VarGeometry, medium: &AirMedium, freq_hz: f64) -> Result<FourPole> {
    let k = medium.wavenumber(freq_hz);
    let r = g.r * 1e-3;
    let z0 = medium.impedance() / (PI * r * r);
    let half = FourPole::duct(k, 0.5 * g.l_c * 1e-3, z0);
    let slit_area = 2.0 * PI * r * g.l_b * 1e-3;
    let branch = if slit_area == 0.0 {
        FourPole::IDENTITY
    } else {
        let zb = slit_impedance(g, medium, freq_hz)?;
        if zb.norm() == 0.0 {
            // exact resonance: the branch shorts the duct
            FourPole {
                a: ONE,
                b: ZERO,
                c: Complex64::new(f64::INFINITY, 0.0),
                d: ONE,
            }
        } else {
            FourPole::shunt(zb / slit_area)
        }
    };
    Ok(half.then(&branch).then(&half))
}

/// Transmission loss of units placed in series on a shared waveguide.
pub fn multi_cavity_stl(
    units: &[VarGeometry],
    medium: &AirMedium,
    grid: &FrequencyGrid,
) -> Result<StlCurve> {
    let first = units.first().ok_or(Error::EmptyUnits)?;
    let mismatched: Vec<usize> = units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.r != first.r)
        .map(|(i, _)| i)
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::RadiusMismatch {
            indices: mismatched,
        });
    }
    let r = first.r * 1e-3;
    let z0 = medium.impedance() / (PI * r * r);
    let mut values = Vec::with_capacity(grid.len());
    let mut capped = Vec::new();
    for (i, &f) in grid.frequencies().iter().enumerate() {
        let mut total = FourPole::IDENTITY;
        for u in units {
            total = total.then(&unit_four_pole(u, medium, f)?);
        }
        let tl = total.transmission_loss(z0);
        if tl >= STL_CAP_DB {
            capped.push(i);
        }
        values.push(tl);
    }
    let mut curve = StlCurve::new(grid.clone(), values)?;
    curve.capped = capped;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::unit_stl;
    use crate::geometry::{sample_geometries, SamplerConfig};

    #[test]
    fn single_unit_matches_direct_formula() {
        let medium = AirMedium::default();
        let grid = FrequencyGrid::standard();
        for g in sample_geometries(&SamplerConfig::new(17, 20)).unwrap() {
            let direct = unit_stl(&g, &medium, &grid).unwrap();
            let chained = multi_cavity_stl(&[g], &medium, &grid).unwrap();
            for (a, b) in direct.values.iter().zip(&chained.values) {
                assert!((a - b).abs() <= 0.1, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bare_duct_chain_is_transparent() {
        let medium = AirMedium::default();
        let z0 = medium.impedance() / (PI * 0.01f64.powi(2));
        for f in FrequencyGrid::standard().frequencies() {
            let k = medium.wavenumber(*f);
            let seg = FourPole::duct(k, 0.01, z0);
            let chain = (0..4).fold(FourPole::IDENTITY, |acc, _| acc.then(&seg));
            assert!(chain.transmission_loss(z0).abs() < 1e-9);
        }
    }

    #[test]
    fn determinant_is_one() {
        let medium = AirMedium::default();
        let units = sample_geometries(&SamplerConfig::new(2, 3)).unwrap();
        let units: Vec<_> = units
            .into_iter()
            .map(|mut u| {
                u.r = 10.0;
                u
            })
            .filter(|u| u.check_ordering().is_ok())
            .collect();
        for f in FrequencyGrid::standard().frequencies() {
            let mut total = FourPole::IDENTITY;
            for u in &units {
                let m = unit_four_pole(u, &medium, *f).unwrap();
                assert!((m.determinant() - 1.0).norm() < 1e-9);
                total = total.then(&m);
            }
            let det = total.determinant();
            // scale-aware: entries can be large near resonance
            let scale = total.a.norm() * total.d.norm() + total.b.norm() * total.c.norm();
            assert!((det - 1.0).norm() <= 1e-9 * scale.max(1.0), "det {det} at {f}");
        }
    }

    #[test]
    fn rejects_mismatched_radius() {
        let a = VarGeometry::new(10.0, 8.0, 2.0, 20.0, 40.0);
        let b = VarGeometry::new(12.0, 8.0, 2.0, 20.0, 40.0);
        let err = multi_cavity_stl(&[a, b, a, b], &AirMedium::default(), &FrequencyGrid::standard());
        match err {
            Err(Error::RadiusMismatch { indices }) => assert_eq!(indices, vec![1, 3]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            multi_cavity_stl(&[], &AirMedium::default(), &FrequencyGrid::standard()),
            Err(Error::EmptyUnits)
        ));
    }

    #[test]
    fn duplicated_unit_raises_peak() {
        let medium = AirMedium::default();
        let grid = FrequencyGrid::standard();
        let g = VarGeometry::new(10.0, 10.0, 3.0, 20.0, 40.0);
        let solo = multi_cavity_stl(&[g], &medium, &grid).unwrap();
        let pair = multi_cavity_stl(&[g, g], &medium, &grid).unwrap();
        let p = solo.peak_index();
        assert_eq!(pair.peak_index(), p);
        assert!(pair.values[p] > solo.values[p]);
    }
}
