//! Frequency-domain solver for the axisymmetric Helmholtz equation on the
//! pixel grid of a cross-section image.
//!
//! Each air pixel is a finite volume centred at r = (i + ½)Δ. Radial
//! fluxes use the face radius, so the axis row needs no special case.
//! Solid pixels and the outer frame are sound-hard. The channel band of
//! the first channel column carries an incident plane wave through a
//! first-order radiation condition, the last channel column an outgoing
//! one:
//!
//! ```text
//! ∂p/∂n + jk p = 2jk P_i   (inlet)
//! ∂p/∂n + jk p = 0         (outlet)
//! ```
//!
//! with n the outward normal and e^{jωt} time dependence.

pub mod banded;

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::acoustics::{AirMedium, FrequencyGrid, StlCurve};
use crate::error::{Error, IoContext, Result};
use crate::raster::{CrossSection, PITCH_MM};
use banded::BandMatrix;

/// Relative residual every solve must reach.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Incident pressure amplitude, Pa.
pub const INCIDENT_PRESSURE: f64 = 1.0;

/// Discretization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Pixel size, mm.
    pub pitch_mm: f64,
    /// Bare-duct columns added outside each port before solving, so the
    /// plane-wave port condition sits away from the cavity's near field.
    pub extension_px: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            pitch_mm: PITCH_MM,
            extension_px: 0,
        }
    }
}

impl SolverOptions {
    /// Settings for an image upsampled by `factor` from the standard pitch.
    pub fn refined(factor: usize) -> Self {
        Self {
            pitch_mm: PITCH_MM / factor as f64,
            ..Self::default()
        }
    }
}

/// Assembled system for one image and frequency.
#[derive(Debug, Clone)]
pub struct HelmholtzSystem {
    pub frequency: f64,
    pub medium: AirMedium,
    /// (row, col) of every unknown, in unknown order.
    pub cells: Vec<(usize, usize)>,
    pub inlet_col: usize,
    pub outlet_col: usize,
    /// Unknown indices of the inlet and outlet port cells.
    pub inlet: Vec<usize>,
    pub outlet: Vec<usize>,
    /// Channel radius read from the image, pixels.
    pub channel_rows: usize,
    pub pitch_mm: f64,
    pub matrix: BandMatrix,
    pub rhs: Vec<Complex64>,
}

impl HelmholtzSystem {
    pub fn unknowns(&self) -> usize {
        self.cells.len()
    }

    pub fn solve(&self) -> Result<Vec<Complex64>> {
        self.solve_at(0)
    }

    fn solve_at(&self, index: usize) -> Result<Vec<Complex64>> {
        let diverged = |residual| Error::SolverDiverged {
            index,
            freq_hz: self.frequency,
            residual,
        };
        let mut best = self
            .matrix
            .solve_symmetric(&self.rhs)
            .map(|x| {
                let r = self.matrix.relative_residual(&x, &self.rhs);
                (x, r)
            })
            .filter(|(_, r)| r.is_finite());
        if best.as_ref().map_or(true, |(_, r)| *r > RESIDUAL_TOL) {
            if let Some(x) = self.matrix.solve_pivoted(&self.rhs) {
                let r = self.matrix.relative_residual(&x, &self.rhs);
                if best.as_ref().map_or(true, |(_, rb)| r < *rb) {
                    best = Some((x, r));
                }
            }
        }
        // iterative refinement for ill-conditioned low-frequency systems
        for _ in 0..3 {
            match &mut best {
                Some((x, r)) if *r > RESIDUAL_TOL => {
                    let ax = self.matrix.matvec(x);
                    let res: Vec<Complex64> =
                        self.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
                    let Some(d) = self.matrix.solve_pivoted(&res) else {
                        break;
                    };
                    let next: Vec<Complex64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
                    let rn = self.matrix.relative_residual(&next, &self.rhs);
                    if !(rn < *r) {
                        break;
                    }
                    *x = next;
                    *r = rn;
                }
                _ => break,
            }
        }
        match best {
            Some((x, r)) if r <= RESIDUAL_TOL => Ok(x),
            Some((_, r)) => Err(diverged(r)),
            None => Err(diverged(f64::INFINITY)),
        }
    }

    /// Incident and transmitted power for a solved field.
    pub fn port_powers(&self, field: &[Complex64]) -> PortPowers {
        let radius = self.channel_rows as f64 * self.pitch_mm * 1e-3;
        let area = std::f64::consts::PI * radius * radius;
        let two_rho_c = 2.0 * self.medium.impedance();
        let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
        for &u in &self.outlet {
            let w = self.cells[u].0 as f64 + 0.5;
            num += field[u] * w;
            den += w;
        }
        let mean = num / den;
        PortPowers {
            w_in: INCIDENT_PRESSURE * INCIDENT_PRESSURE * area / two_rho_c,
            w_out: mean.norm_sqr() * area / two_rho_c,
        }
    }
}

/// Acoustic power crossing the inlet and outlet ports, W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortPowers {
    pub w_in: f64,
    pub w_out: f64,
}

impl PortPowers {
    pub fn stl_db(&self) -> f64 {
        10.0 * (self.w_in / self.w_out).log10()
    }
}

/// Air cells 4-connected to the channel band of the inlet column.
fn reachable_from_inlet(img: &CrossSection, inlet_col: usize, band: usize) -> Vec<bool> {
    let (rows, cols) = (img.rows(), img.cols());
    let mut seen = vec![false; rows * cols];
    let mut queue = VecDeque::new();
    for r in 0..band {
        seen[r * cols + inlet_col] = true;
        queue.push_back((r, inlet_col));
    }
    while let Some((r, c)) = queue.pop_front() {
        let neighbours = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (rr, cc) in neighbours {
            if rr < rows && cc < cols && !seen[rr * cols + cc] && img.get(rr, cc) {
                seen[rr * cols + cc] = true;
                queue.push_back((rr, cc));
            }
        }
    }
    seen
}

/// Builds the finite-volume system for `img` at `freq_hz`.
pub fn assemble(img: &CrossSection, freq_hz: f64, medium: &AirMedium) -> Result<HelmholtzSystem> {
    assemble_with(img, freq_hz, medium, &SolverOptions::default(), INCIDENT_PRESSURE)
}

/// First and last column whose axis pixel is air: the channel ends.
fn channel_ends(img: &CrossSection) -> Option<(usize, usize)> {
    let first = (0..img.cols()).find(|&c| img.get(0, c))?;
    let last = (0..img.cols()).rev().find(|&c| img.get(0, c))?;
    Some((first, last))
}

/// Rows from the axis that are air over the whole channel.
fn band_rows(img: &CrossSection, first: usize, last: usize) -> usize {
    (0..img.rows())
        .take_while(|&r| (first..=last).all(|c| img.get(r, c)))
        .count()
}

fn extend_ports(img: &CrossSection, ext: usize) -> Option<CrossSection> {
    let (first, last) = channel_ends(img)?;
    let band = band_rows(img, first, last);
    let mut out = CrossSection::zeros(img.rows(), img.cols() + 2 * ext);
    for r in 0..img.rows() {
        for c in 0..img.cols() {
            out.set(r, c + ext, img.get(r, c));
        }
    }
    for r in 0..band {
        for c in (first..first + ext).chain(last + ext + 1..last + 2 * ext + 1) {
            out.set(r, c, true);
        }
    }
    Some(out)
}

/// Builds the system with explicit discretization settings and incident
/// amplitude.
pub fn assemble_with(
    img: &CrossSection,
    freq_hz: f64,
    medium: &AirMedium,
    opts: &SolverOptions,
    amplitude: f64,
) -> Result<HelmholtzSystem> {
    let extended;
    let img = if opts.extension_px > 0 {
        extended = extend_ports(img, opts.extension_px).ok_or(Error::NoPath)?;
        &extended
    } else {
        img
    };
    let (rows, cols) = (img.rows(), img.cols());
    let (inlet_col, outlet_col) = channel_ends(img).ok_or(Error::NoPath)?;
    let band = band_rows(img, inlet_col, outlet_col);
    if band == 0 || inlet_col == outlet_col {
        return Err(Error::NoPath);
    }
    let reach = reachable_from_inlet(img, inlet_col, band);
    if !(0..band).all(|r| reach[r * cols + outlet_col]) {
        return Err(Error::NoPath);
    }

    // row-major numbering keeps the bandwidth at one image row
    let mut index = vec![usize::MAX; rows * cols];
    let mut cells = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if reach[r * cols + c] {
                index[r * cols + c] = cells.len();
                cells.push((r, c));
            }
        }
    }
    let n = cells.len();
    let mut bw = 1;
    for (u, &(r, c)) in cells.iter().enumerate() {
        if r + 1 < rows {
            let v = index[(r + 1) * cols + c];
            if v != usize::MAX {
                bw = bw.max(v - u);
            }
        }
    }

    let kd = medium.wavenumber(freq_hz) * opts.pitch_mm * 1e-3;
    let j = Complex64::new(0.0, 1.0);
    let mut matrix = BandMatrix::zeros(n, bw, bw);
    let mut rhs = vec![Complex64::new(0.0, 0.0); n];
    let mut inlet = Vec::new();
    let mut outlet = Vec::new();
    for (u, &(r, c)) in cells.iter().enumerate() {
        let rc = r as f64 + 0.5;
        let mut diag = Complex64::new(-kd * kd * rc, 0.0);
        let mut couple = |v: usize, w: f64, diag: &mut Complex64| {
            *diag += w;
            if v > u {
                matrix.add(u, v, Complex64::new(-w, 0.0));
                matrix.add(v, u, Complex64::new(-w, 0.0));
            }
        };
        if r + 1 < rows && index[(r + 1) * cols + c] != usize::MAX {
            couple(index[(r + 1) * cols + c], r as f64 + 1.0, &mut diag);
        }
        if r > 0 && index[(r - 1) * cols + c] != usize::MAX {
            couple(index[(r - 1) * cols + c], r as f64, &mut diag);
        }
        if c + 1 < cols && index[r * cols + c + 1] != usize::MAX {
            couple(index[r * cols + c + 1], rc, &mut diag);
        }
        if c > 0 && index[r * cols + c - 1] != usize::MAX {
            couple(index[r * cols + c - 1], rc, &mut diag);
        }
        if r < band && c == inlet_col {
            diag += j * kd * rc;
            rhs[u] = 2.0 * j * kd * rc * amplitude;
            inlet.push(u);
        }
        if r < band && c == outlet_col {
            diag += j * kd * rc;
            outlet.push(u);
        }
        matrix.add(u, u, diag);
    }

    Ok(HelmholtzSystem {
        frequency: freq_hz,
        medium: *medium,
        cells,
        inlet_col,
        outlet_col,
        inlet,
        outlet,
        channel_rows: band,
        pitch_mm: opts.pitch_mm,
        matrix,
        rhs,
    })
}

/// Transmission loss of an arbitrary image over `grid`.
pub fn solve_stl(img: &CrossSection, grid: &FrequencyGrid, medium: &AirMedium) -> Result<StlCurve> {
    solve_stl_with(img, grid, medium, &SolverOptions::default())
}

pub fn solve_stl_with(
    img: &CrossSection,
    grid: &FrequencyGrid,
    medium: &AirMedium,
    opts: &SolverOptions,
) -> Result<StlCurve> {
    let mut values = Vec::with_capacity(grid.len());
    for (i, &f) in grid.frequencies().iter().enumerate() {
        let sys = assemble_with(img, f, medium, opts, INCIDENT_PRESSURE)?;
        let field = sys.solve_at(i)?;
        values.push(sys.port_powers(&field).stl_db());
    }
    StlCurve::new(grid.clone(), values)
}

/// Solves at one frequency with a chosen incident amplitude and returns
/// the port powers.
pub fn port_powers_at(
    img: &CrossSection,
    freq_hz: f64,
    medium: &AirMedium,
    amplitude: f64,
) -> Result<PortPowers> {
    let sys = assemble_with(img, freq_hz, medium, &SolverOptions::default(), amplitude)?;
    let field = sys.solve()?;
    let mut p = sys.port_powers(&field);
    p.w_in *= amplitude * amplitude;
    Ok(p)
}

/// Writes the solved field as little-endian complex64 (two f32 per cell)
/// to `path`, and the cell index to `path` with a `.csv` extension
/// appended (`cell,row,col`).
pub fn dump_field(sys: &HelmholtzSystem, field: &[Complex64], path: &Path) -> Result<()> {
    let mut blob = Vec::with_capacity(field.len() * 8);
    for p in field {
        blob.extend_from_slice(&(p.re as f32).to_le_bytes());
        blob.extend_from_slice(&(p.im as f32).to_le_bytes());
    }
    std::fs::write(path, blob).at(path)?;
    let idx_path = path.with_extension(
        path.extension()
            .map(|e| format!("{}.csv", e.to_string_lossy()))
            .unwrap_or_else(|| "csv".into()),
    );
    let mut f = std::io::BufWriter::new(std::fs::File::create(&idx_path).at(&idx_path)?);
    writeln!(f, "cell,row,col").at(&idx_path)?;
    for (u, (r, c)) in sys.cells.iter().enumerate() {
        writeln!(f, "{u},{r},{c}").at(&idx_path)?;
    }
    f.flush().at(&idx_path)
}
