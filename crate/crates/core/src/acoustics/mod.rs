//! Closed-form acoustics of a ventilated resonator: radial impedance of the
//! annular neck/cavity, single-unit transmission loss, and serial
//! composition through four-pole transfer matrices.

pub mod bessel;
pub mod tmm;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fmtutil::fmt_sig;
use crate::geometry::VarGeometry;
use bessel::bessel_set;

pub use tmm::{multi_cavity_stl, FourPole};

/// STL reported for bins where the lossless model diverges.
pub const STL_CAP_DB: f64 = 200.0;
/// |T| below which a bin is capped.
const T_FLOOR: f64 = 1e-10;
/// Bessel denominators below this magnitude are treated as singular.
const SINGULAR_EPS: f64 = 1e-300;

/// Propagation medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AirMedium {
    /// Speed of sound, m/s.
    pub c: f64,
    /// Density, kg/m³.
    pub rho: f64,
}

impl Default for AirMedium {
    fn default() -> Self {
        Self { c: 343.0, rho: 1.2 }
    }
}

impl AirMedium {
    pub fn new(c: f64, rho: f64) -> Result<Self> {
        if !(c > 0.0 && rho > 0.0 && c.is_finite() && rho.is_finite()) {
            return Err(Error::Config(format!(
                "medium needs positive c and rho, got c={c}, rho={rho}"
            )));
        }
        Ok(Self { c, rho })
    }

    /// Characteristic specific impedance ρc.
    pub fn impedance(&self) -> f64 {
        self.rho * self.c
    }

    pub fn wavenumber(&self, freq_hz: f64) -> f64 {
        2.0 * PI * freq_hz / self.c
    }
}

/// Ordered list of evaluation frequencies in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencyGrid {
    frequencies: Vec<f64>,
}

impl FrequencyGrid {
    /// Number of bins on the default grid.
    pub const DEFAULT_LEN: usize = 50;

    pub fn new(frequencies: Vec<f64>) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if let Some(f) = frequencies.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::InvalidGrid(format!("non-positive frequency {f}")));
        }
        if frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("frequencies not strictly increasing".into()));
        }
        Ok(Self { frequencies })
    }

    /// Evenly spaced grid `start, start+step, …` with `len` points.
    pub fn linear(start: f64, step: f64, len: usize) -> Result<Self> {
        Self::new((0..len).map(|i| start + step * i as f64).collect())
    }

    /// 1, 41, …, 1961 Hz.
    pub fn standard() -> Self {
        Self::linear(1.0, 40.0, Self::DEFAULT_LEN).expect("static grid")
    }

    /// 1 Hz spacing over the same band as [`FrequencyGrid::standard`].
    pub fn fine() -> Self {
        Self::linear(1.0, 1.0, 1961).expect("static grid")
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self::standard()
    }
}

impl TryFrom<Vec<f64>> for FrequencyGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FrequencyGrid> for Vec<f64> {
    fn from(g: FrequencyGrid) -> Self {
        g.frequencies
    }
}

/// Transmission loss sampled on a frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StlCurve {
    pub grid: FrequencyGrid,
    pub values: Vec<f64>,
    /// Bins whose value was clamped to [`STL_CAP_DB`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub capped: Vec<usize>,
}

impl StlCurve {
    pub fn new(grid: FrequencyGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values for {} frequencies",
                values.len(),
                grid.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite STL value {v}")));
        }
        Ok(Self {
            grid,
            values,
            capped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the maximum; ties go to the lowest frequency.
    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn peak_frequency(&self) -> f64 {
        self.grid.frequencies()[self.peak_index()]
    }

    pub fn peak_value(&self) -> f64 {
        self.values[self.peak_index()]
    }

    /// Indices of strict interior local maxima.
    pub fn local_maxima(&self) -> Vec<usize> {
        let v = &self.values;
        (1..v.len().saturating_sub(1))
            .filter(|&i| v[i] > v[i - 1] && v[i] >= v[i + 1])
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq_hz,stl_db\n");
        for (f, v) in self.grid.frequencies().iter().zip(&self.values) {
            let _ = writeln!(out, "{},{}", fmt_sig(*f, 9), fmt_sig(*v, 9));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some(h) if h.trim() == "freq_hz,stl_db" => {}
            other => {
                return Err(Error::Format(format!(
                    "expected header `freq_hz,stl_db`, found {other:?}"
                )))
            }
        }
        let mut freqs = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let mut cols = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad STL row `{line}`")))
            };
            freqs.push(parse(cols.next())?);
            values.push(parse(cols.next())?);
        }
        Self::new(FrequencyGrid::new(freqs)?, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).at(path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).at(path)?)
    }
}

/// Specific acoustic impedance at the neck inlet, r = R.
///
/// The lossless radial model makes this purely imaginary; the real part
/// is exactly zero.
pub fn slit_impedance(g: &VarGeometry, medium: &AirMedium, freq_hz: f64) -> Result<Complex64> {
    Ok(Complex64::new(0.0, slit_reactance(g, medium, freq_hz)?))
}

/// Imaginary part of [`slit_impedance`], in Pa·s/m.
///
/// Chain: hard wall at R_c fixes α_A; the cavity impedance at R_n is
/// mapped across the neck junction with the axial width ratio l_a/l_b;
/// the neck standing wave is then evaluated at R. With k_r = k and
/// e^{jωt}, every z = jρc·(J0 − αN0)/(J1 − αN1) with real α, so the
/// chain runs on real reactances X where z = jX.
pub fn slit_reactance(g: &VarGeometry, medium: &AirMedium, freq_hz: f64) -> Result<f64> {
    g.check_ordering()?;
    if !(freq_hz > 0.0 && freq_hz.is_finite()) {
        return Err(Error::InvalidGrid(format!("frequency must be positive, got {freq_hz}")));
    }
    if g.l_b <= 0.0 {
        return Err(Error::InvalidGeometry("neck width must be positive".into()));
    }
    let k = medium.wavenumber(freq_hz);
    let rc = g.r_c * 1e-3;
    let rn = g.r_n * 1e-3;
    let r = g.r * 1e-3;
    let rho_c = medium.impedance();
    let area_ratio = g.l_a / g.l_b;
    let singular = |what| Error::SingularFrequency { freq_hz, what };

    let at_rc = bessel_set(k * rc)?;
    if at_rc.y1.abs() < SINGULAR_EPS {
        return Err(singular("Y1(k R_c)"));
    }
    let alpha_a = at_rc.j1 / at_rc.y1;

    let at_rn = bessel_set(k * rn)?;
    let den_a = at_rn.j1 - alpha_a * at_rn.y1;
    if den_a.abs() < SINGULAR_EPS {
        return Err(singular("cavity velocity at R_n"));
    }
    // z_A = j X_A
    let x_a = rho_c * (at_rn.j0 - alpha_a * at_rn.y0) / den_a;

    // α_B = (jρc s J0 − z_A J1) / (jρc s N0 − z_A N1); the j factors cancel.
    let num_b = rho_c * area_ratio * at_rn.j0 - x_a * at_rn.j1;
    let den_b = rho_c * area_ratio * at_rn.y0 - x_a * at_rn.y1;
    if den_b.abs() < SINGULAR_EPS {
        return Err(singular("alpha_B denominator"));
    }
    let alpha_b = num_b / den_b;

    let at_r = bessel_set(k * r)?;
    let den = at_r.j1 - alpha_b * at_r.y1;
    if den.abs() < SINGULAR_EPS {
        return Err(singular("neck velocity at R"));
    }
    Ok(rho_c * (at_r.j0 - alpha_b * at_r.y0) / den)
}

/// Opening ratio σ: slit area 2πR·l_b over duct area πR².
pub fn opening_ratio(g: &VarGeometry) -> f64 {
    2.0 * g.l_b / g.r
}

/// Radiation resistance δ = σρc/2.
pub fn radiation_resistance(g: &VarGeometry, medium: &AirMedium) -> f64 {
    0.5 * opening_ratio(g) * medium.impedance()
}

/// Transmission coefficient T = 1 − δ/(δ + z_B).
pub fn transmission_coefficient(
    g: &VarGeometry,
    medium: &AirMedium,
    freq_hz: f64,
) -> Result<Complex64> {
    let delta = radiation_resistance(g, medium);
    if delta == 0.0 {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let z = slit_impedance(g, medium, freq_hz)?;
    Ok(Complex64::new(1.0, 0.0) - delta / (delta + z))
}

/// Single-unit transmission loss on `grid`.
pub fn unit_stl(g: &VarGeometry, medium: &AirMedium, grid: &FrequencyGrid) -> Result<StlCurve> {
    let mut values = Vec::with_capacity(grid.len());
    let mut capped = Vec::new();
    for (i, &f) in grid.frequencies().iter().enumerate() {
        let t = transmission_coefficient(g, medium, f)?;
        let mag = t.norm();
        if mag < T_FLOOR {
            values.push(STL_CAP_DB);
            capped.push(i);
        } else {
            values.push(10.0 * (1.0 / (mag * mag)).log10());
        }
    }
    let mut curve = StlCurve::new(grid.clone(), values)?;
    curve.capped = capped;
    Ok(curve)
}

/// Frequency where the neck reactance changes sign from negative to
/// positive, located by bisection inside `[lo, hi]` Hz after a scan with
/// `step` Hz spacing. Returns the first such crossing.
pub fn resonance_frequency(
    g: &VarGeometry,
    medium: &AirMedium,
    lo: f64,
    hi: f64,
    step: f64,
) -> Result<Option<f64>> {
    let mut f0 = lo;
    let mut x0 = slit_reactance(g, medium, f0)?;
    while f0 < hi {
        let f1 = (f0 + step).min(hi);
        let x1 = slit_reactance(g, medium, f1)?;
        // a pole of the reactance also flips sign, but from + to −
        if x0 < 0.0 && x1 >= 0.0 {
            let (mut a, mut b) = (f0, f1);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                if slit_reactance(g, medium, m)? < 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Ok(Some(0.5 * (a + b)));
        }
        f0 = f1;
        x0 = x1;
    }
    Ok(None)
}
