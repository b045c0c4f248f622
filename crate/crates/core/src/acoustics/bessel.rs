//! Bessel functions of the first and second kind, orders 0 and 1.
//!
//! Ascending power series below [`SERIES_LIMIT`], Hankel asymptotic
//! expansion above it. Both branches stay within 1e-8 relative error on
//! (0, 200] away from the zeros of the function.

use std::f64::consts::{FRAC_PI_4, PI};

use crate::error::{Error, Result};

/// Crossover between the power series and the asymptotic expansion.
const SERIES_LIMIT: f64 = 12.0;
/// Largest accepted argument.
pub const MAX_ARG: f64 = 200.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesselKind {
    J0,
    J1,
    Y0,
    Y1,
}

impl BesselKind {
    fn name(self) -> &'static str {
        match self {
            BesselKind::J0 => "J0",
            BesselKind::J1 => "J1",
            BesselKind::Y0 => "Y0",
            BesselKind::Y1 => "Y1",
        }
    }
}

/// Evaluates the requested Bessel function.
///
/// Y-kinds need `x > 0`; J-kinds accept `x >= 0`. Arguments above
/// [`MAX_ARG`] are rejected.
pub fn bessel(kind: BesselKind, x: f64) -> Result<f64> {
    let domain = || Error::BesselDomain {
        kind: kind.name(),
        x,
    };
    if !x.is_finite() || x > MAX_ARG {
        return Err(domain());
    }
    match kind {
        BesselKind::J0 | BesselKind::J1 if x < 0.0 => Err(domain()),
        BesselKind::Y0 | BesselKind::Y1 if x <= 0.0 => Err(domain()),
        BesselKind::J0 => Ok(j0(x)),
        BesselKind::J1 => Ok(j1(x)),
        BesselKind::Y0 => Ok(y0(x)),
        BesselKind::Y1 => Ok(y1(x)),
    }
}

/// All four functions at one argument; `x` must lie in (0, MAX_ARG].
#[derive(Debug, Clone, Copy)]
pub(crate) struct BesselSet {
    pub j0: f64,
    pub j1: f64,
    pub y0: f64,
    pub y1: f64,
}

pub(crate) fn bessel_set(x: f64) -> Result<BesselSet> {
    if !(x > 0.0 && x <= MAX_ARG) {
        return Err(Error::BesselDomain { kind: "Y0", x });
    }
    if x <= SERIES_LIMIT {
        let (j0, y0) = series_order0(x);
        let (j1, y1) = series_order1(x);
        Ok(BesselSet { j0, j1, y0, y1 })
    } else {
        let (j0, y0) = hankel(0.0, x);
        let (j1, y1) = hankel(1.0, x);
        Ok(BesselSet { j0, j1, y0, y1 })
    }
}

fn j0(x: f64) -> f64 {
    if x <= SERIES_LIMIT {
        series_order0(x).0
    } else {
        hankel(0.0, x).0
    }
}

fn j1(x: f64) -> f64 {
    if x <= SERIES_LIMIT {
        series_order1(x).0
    } else {
        hankel(1.0, x).0
    }
}

fn y0(x: f64) -> f64 {
    if x <= SERIES_LIMIT {
        series_order0(x).1
    } else {
        hankel(0.0, x).1
    }
}

fn y1(x: f64) -> f64 {
    if x <= SERIES_LIMIT {
        series_order1(x).1
    } else {
        hankel(1.0, x).1
    }
}

/// (J0, Y0) from the ascending series.
///
/// J0 = Σ (-q)^k / (k!)²,  q = x²/4
/// Y0 = (2/π)(ln(x/2) + γ) J0 + (2/π) Σ_{k≥1} (-1)^{k+1} H_k q^k / (k!)²
fn series_order0(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut j = 1.0;
    let mut tail = 0.0;
    let mut harmonic = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        term *= -q / (kf * kf);
        harmonic += 1.0 / kf;
        j += term;
        tail -= harmonic * term;
        if term.abs() < 1e-18 * j.abs().max(1e-300) && term.abs() * harmonic < 1e-18 {
            break;
        }
    }
    let log_part = (0.5 * x).ln() + EULER_GAMMA;
    let y = 2.0 / PI * (log_part * j + tail);
    (j, y)
}

/// (J1, Y1) from the ascending series.
///
/// J1 = (x/2) Σ (-q)^k / (k!(k+1)!)
/// Y1 = (2/π)(ln(x/2) + γ) J1 − 2/(πx) − (1/π) Σ (-1)^k (H_k + H_{k+1}) (x/2)^{2k+1} / (k!(k+1)!)
fn series_order1(x: f64) -> (f64, f64) {
    let half = 0.5 * x;
    let q = half * half;
    let mut term = half;
    let mut j = half;
    let mut h_k = 0.0;
    let mut h_k1 = 1.0;
    let mut tail = (h_k + h_k1) * term;
    for k in 1..200 {
        let kf = k as f64;
        term *= -q / (kf * (kf + 1.0));
        h_k += 1.0 / kf;
        h_k1 += 1.0 / (kf + 1.0);
        j += term;
        tail += (h_k + h_k1) * term;
        if term.abs() * (h_k + h_k1) < 1e-18 * half.min(1.0) {
            break;
        }
    }
    let log_part = half.ln() + EULER_GAMMA;
    let y = 2.0 / PI * log_part * j - 2.0 / (PI * x) - tail / PI;
    (j, y)
}

/// (J_ν, Y_ν) from the Hankel asymptotic expansion, truncated at the
/// smallest term.
fn hankel(nu: f64, x: f64) -> (f64, f64) {
    let mu = 4.0 * nu * nu;
    let mut p = 1.0;
    let mut q = 0.0;
    let mut a = 1.0;
    let mut last = f64::INFINITY;
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        a *= (mu - odd * odd) / (k as f64 * 8.0 * x);
        if a.abs() >= last || a.abs() < 1e-18 {
            break;
        }
        last = a.abs();
        // a_k contributes to Q for odd k, to P for even k, with alternating signs
        match k % 4 {
            1 => q += a,
            2 => p -= a,
            3 => q -= a,
            _ => p += a,
        }
    }
    let (s, c) = phase_sin_cos(x, nu);
    let amp = (2.0 / (PI * x)).sqrt();
    (amp * (p * c - q * s), amp * (p * s + q * c))
}

/// sin and cos of x − (ν/2 + 1/4)π via angle addition.
fn phase_sin_cos(x: f64, nu: f64) -> (f64, f64) {
    let (sx, cx) = x.sin_cos();
    let (sp, cp) = ((2.0 * nu + 1.0) * FRAC_PI_4).sin_cos();
    (sx * cp - cx * sp, cx * cp + sx * sp)
}

#[cfg(test)]
mod tests {
    use super::*;

    // (x, J0, J1, Y0, Y1) from 30-digit arbitrary precision evaluation.
    const REFERENCE: &[(f64, f64, f64, f64, f64)] = &[
        (1e-06, 0.99999999999975, 4.9999999999993748e-7, -8.8690314816594437, -636619.77237217504),
        (0.01, 0.99997500015624957, 0.0049999375002604162, -3.0054556370836459, -63.678596282060655),
        (0.5, 0.9384698072408129, 0.24226845767487389, -0.44451873350670656, -1.4714723926702431),
        (1.0, 0.76519768655796655, 0.44005058574493352, 0.088256964215676958, -0.78121282130028872),
        (2.0, 0.22389077914123567, 0.57672480775687339, 0.51037567264974512, -0.10703243154093755),
        (3.7, -0.39923020337119112, 0.053833987745461791, 0.10607431532035411, 0.41667437268380749),
        (5.0, -0.1775967713143383, -0.32757913759146522, -0.30851762524903378, 0.14786314339122684),
        (7.5, 0.2663396578803784, 0.13524842757970551, 0.11731328614820863, -0.25912851048611625),
        (10.0, -0.24593576445134834, 0.043472746168861437, 0.055671167283599391, 0.24901542420695388),
        (11.9, 0.025049441699589645, -0.22898324966192406, -0.22983321394337506, -0.03471149833403061),
        (12.1, 0.069666773606807312, -0.21574897337692481, -0.21843838055092549, -0.078736931451395746),
        (15.0, -0.014224472826780773, 0.20510403861352276, 0.20546429603891826, 0.021073628036873512),
        (20.0, 0.16702466434058315, 0.066833124175850046, 0.062640596809383831, -0.1655116143625213),
        (33.3, 0.063338485947521252, 0.12386214790148009, 0.12289749913503733, -0.061500722807785735),
        (50.0, 0.055812327669251815, -0.097511828125175138, -0.098064995470077079, -0.056795668562014768),
        (77.7, 0.0050686646649957938, 0.090408396777184832, 0.090373910560666882, -0.0044872369557058003),
        (100.0, 0.019985850304223122, -0.077145352014112158, -0.077244313365083152, -0.020372312002759793),
        (150.0, -0.00077409037539429125, -0.06514516365772736, -0.065142221509037355, 0.00055695634956083998),
        (199.5, -0.039613637334785146, -0.040371312360519674, -0.040271904208660777, 0.039512830287001402),
    ];

    fn check(kind: BesselKind, x: f64, expected: f64) {
        let got = bessel(kind, x).unwrap();
        let err = (got - expected).abs();
        assert!(
            err <= 1e-8 * expected.abs() + 1e-13,
            "{kind:?}({x}) = {got:e}, expected {expected:e}, rel err {:e}",
            err / expected.abs()
        );
    }

    #[test]
    fn matches_reference_table() {
        for &(x, j0, j1, y0, y1) in REFERENCE {
            check(BesselKind::J0, x, j0);
            check(BesselKind::J1, x, j1);
            check(BesselKind::Y0, x, y0);
            check(BesselKind::Y1, x, y1);
        }
    }

    #[test]
    fn values_at_origin() {
        assert_eq!(bessel(BesselKind::J0, 0.0).unwrap(), 1.0);
        assert_eq!(bessel(BesselKind::J1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn y_kinds_reject_nonpositive() {
        assert!(matches!(
            bessel(BesselKind::Y0, 0.0),
            Err(Error::BesselDomain { .. })
        ));
        assert!(bessel(BesselKind::Y1, -1.0).is_err());
        assert!(bessel(BesselKind::J0, -1.0).is_err());
        assert!(bessel(BesselKind::J0, 250.0).is_err());
    }

    /// Independent evaluation: J0(x) = (1/π) ∫_0^π cos(x sin θ) dθ.
    /// The trapezoid rule on this periodic integrand converges exponentially.
    fn j0_quadrature(x: f64) -> f64 {
        let n = 400;
        let h = PI / n as f64;
        // endpoints θ = 0 and θ = π both contribute cos(0)
        let mut s = 1.0;
        for i in 1..n {
            s += (x * (i as f64 * h).sin()).cos();
        }
        s * h / PI
    }

    #[test]
    fn first_j0_root_against_quadrature_bisection() {
        let (mut lo, mut hi) = (2.0, 3.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if j0_quadrature(lo) * j0_quadrature(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert!((root - 2.404825557695773).abs() < 1e-10);
        assert!(bessel(BesselKind::J0, 2.404825557695773).unwrap().abs() < 1e-10);
    }

    #[test]
    fn branches_agree_at_crossover() {
        for &x in &[11.0, 12.0, 13.0] {
            let (sj0, sy0) = series_order0(x);
            let (hj0, hy0) = hankel(0.0, x);
            let (sj1, sy1) = series_order1(x);
            let (hj1, hy1) = hankel(1.0, x);
            for (a, b) in [(sj0, hj0), (sy0, hy0), (sj1, hj1), (sy1, hy1)] {
                assert!((a - b).abs() < 1e-10, "x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn wronskian_identity() {
        // J1 Y0 − J0 Y1 = 2/(πx)
        for i in 1..=400 {
            let x = i as f64 * 0.5;
            let s = bessel_set(x).unwrap();
            let w = s.j1 * s.y0 - s.j0 * s.y1;
            assert!((w * PI * x / 2.0 - 1.0).abs() < 1e-9, "x={x}: {w}");
        }
    }
}
