//! Binary half cross-section images of a resonator.
//!
//! Row 0 sits on the symmetry axis and rows grow radially; columns run
//! along the axis. Pixels are square with a 0.4 mm pitch. Geometry edges
//! snap to the nearest pixel boundary, so a length `x` mm covers
//! `round(x / 0.4)` pixels.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::geometry::VarGeometry;

/// Pixel pitch in millimetres.
pub const PITCH_MM: f64 = 0.4;
/// Exact reciprocal of [`PITCH_MM`].
pub const PIXELS_PER_MM: f64 = 2.5;
pub const FRAME_ROWS: usize = 128;
pub const FRAME_COLS: usize = 64;
/// Channel length in pixels.
pub const CHANNEL_COLS: usize = 50;
/// Radius of the thinnest admissible channel (5 mm) in pixels; binarized
/// images always keep at least this channel band.
pub const MIN_CHANNEL_ROWS: usize = 13;

/// Converts a length in millimetres to a whole number of pixels.
pub fn mm_to_px(mm: f64) -> usize {
    (mm * PIXELS_PER_MM).round().max(0.0) as usize
}

pub fn px_to_mm(px: usize) -> f64 {
    px as f64 * PITCH_MM
}

/// Half-open column range `[start, end)` of a run of `width` pixels
/// centred on column boundary `cols / 2`.
pub fn centered_span(cols: usize, width: usize) -> (usize, usize) {
    let start = (cols / 2).saturating_sub(width / 2);
    (start, (start + width).min(cols))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CrossSection {
    rows: usize,
    cols: usize,
    pixels: Vec<u8>,
}

impl CrossSection {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            pixels: vec![0; rows * cols],
        }
    }

    /// Builds an image from 0/1 values in row-major order.
    pub fn from_pixels(rows: usize, cols: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != rows * cols {
            return Err(Error::Format(format!(
                "{} pixels for a {rows}x{cols} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| *p > 1) {
            return Err(Error::Format("pixel values must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.cols + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, air: bool) {
        self.pixels[row * self.cols + col] = air as u8;
    }

    pub fn count_air(&self) -> usize {
        self.pixels.iter().map(|p| *p as usize).sum()
    }

    /// Columns `[start, end)` occupied by the channel.
    pub fn channel_span(&self) -> (usize, usize) {
        centered_span(self.cols, CHANNEL_COLS)
    }

    /// Leading rows (from the axis) that are air across the whole channel
    /// span: the channel radius in pixels.
    pub fn channel_rows(&self) -> usize {
        let (c0, c1) = self.channel_span();
        (0..self.rows)
            .take_while(|&r| (c0..c1).all(|c| self.get(r, c)))
            .count()
    }

    /// Channel radius read from the image, mm.
    pub fn channel_radius_mm(&self) -> f64 {
        px_to_mm(self.channel_rows())
    }

    /// Pixel values as reals in {0, 1}.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| *p as f64).collect()
    }

    /// First and last air column in `row`.
    pub fn row_extent(&self, row: usize) -> Option<(usize, usize)> {
        let line = &self.pixels[row * self.cols..(row + 1) * self.cols];
        let first = line.iter().position(|p| *p == 1)?;
        let last = line.iter().rposition(|p| *p == 1)?;
        Some((first, last))
    }

    /// First and last air row in `col`.
    pub fn col_extent(&self, col: usize) -> Option<(usize, usize)> {
        let first = (0..self.rows).find(|&r| self.get(r, col))?;
        let last = (0..self.rows).rev().find(|&r| self.get(r, col))?;
        Some((first, last))
    }

    /// Intersection over union of the air sets.
    pub fn iou(&self, other: &CrossSection) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            inter += (*a & *b) as usize;
            union += (*a | *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> CrossSection {
        let mut out = CrossSection::zeros(self.rows * factor, self.cols * factor);
        for r in 0..out.rows {
            for c in 0..out.cols {
                let v = self.get(r / factor, c / factor);
                out.set(r, c, v);
            }
        }
        out
    }

    /// Binary PGM (P5), air = 255, solid = 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.pixels.iter().map(|p| if *p == 1 { 255 } else { 0 }));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("not a binary PGM: magic {}", fields[0])));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
        };
        let (cols, rows, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let data = bytes
            .get(pos..pos + rows * cols)
            .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
        let pixels = data.iter().map(|v| (*v >= 128) as u8).collect();
        Ok(Self { rows, cols, pixels })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(&self.to_pgm()).at(path)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path).at(path)?)
    }
}

/// Rasterizes `g` into the standard 128×64 frame.
pub fn rasterize(g: &VarGeometry) -> Result<CrossSection> {
    rasterize_in(g, FRAME_ROWS, FRAME_COLS)
}

/// Rasterizes `g` into a `rows`×`cols` frame, for geometries that exceed
/// the standard radial capacity.
pub fn rasterize_in(g: &VarGeometry, rows: usize, cols: usize) -> Result<CrossSection> {
    g.check_ordering()?;
    let n_r = mm_to_px(g.r);
    let n_rn = mm_to_px(g.r_n);
    let n_rc = mm_to_px(g.r_c);
    let n_lc = mm_to_px(g.l_c);
    if n_rc > rows {
        return Err(Error::OutOfFrame(format!(
            "R_c = {} mm needs {n_rc} rows, frame has {rows}",
            g.r_c
        )));
    }
    if n_lc > cols || mm_to_px(g.l_a) > cols {
        return Err(Error::OutOfFrame(format!(
            "axial extent exceeds {cols} columns"
        )));
    }
    let channel = centered_span(cols, n_lc);
    let neck = centered_span(cols, mm_to_px(g.l_b));
    let cavity = centered_span(cols, mm_to_px(g.l_a));
    let mut img = CrossSection::zeros(rows, cols);
    let mut fill = |r0: usize, r1: usize, (c0, c1): (usize, usize)| {
        for r in r0..r1 {
            for c in c0..c1 {
                img.set(r, c, true);
            }
        }
    };
    fill(0, n_r, channel);
    fill(n_r, n_rn, neck);
    fill(n_rn, n_rc, cavity);
    Ok(img)
}

/// Channel plus a neck running all the way to `r_c_px`: the image with
/// the cavity removed.
pub(crate) fn cavityless_image(
    rows: usize,
    cols: usize,
    r_px: usize,
    l_b_px: usize,
    r_c_px: usize,
) -> CrossSection {
    let mut img = CrossSection::zeros(rows, cols);
    let channel = centered_span(cols, CHANNEL_COLS.min(cols));
    let neck = centered_span(cols, l_b_px);
    for r in 0..r_px.min(rows) {
        for c in channel.0..channel.1 {
            img.set(r, c, true);
        }
    }
    for r in r_px.min(rows)..r_c_px.min(rows) {
        for c in neck.0..neck.1 {
            img.set(r, c, true);
        }
    }
    img
}

/// Thresholds a soft image and cleans it into a valid cross-section.
///
/// A pixel is air when `soft >= threshold`. Columns outside the channel
/// span are cleared, the minimal channel band is forced to air, and air
/// not 4-connected to the channel is removed.
pub fn binarize(soft: &[f64], rows: usize, cols: usize, threshold: f64) -> CrossSection {
    assert_eq!(soft.len(), rows * cols, "soft image size");
    let mut img = CrossSection::zeros(rows, cols);
    let (c0, c1) = centered_span(cols, CHANNEL_COLS.min(cols));
    for r in 0..rows {
        for c in c0..c1 {
            let forced = r < MIN_CHANNEL_ROWS;
            img.set(r, c, forced || soft[r * cols + c] >= threshold);
        }
    }
    keep_connected_to_channel(&mut img);
    img
}

/// Clears air pixels that cannot be reached from the axis row of the
/// channel through 4-connected air.
pub fn keep_connected_to_channel(img: &mut CrossSection) {
    let (rows, cols) = (img.rows, img.cols);
    let mut seen = vec![false; rows * cols];
    let mut queue = VecDeque::new();
    for c in 0..cols {
        if rows > 0 && img.get(0, c) {
            seen[c] = true;
            queue.push_back((0usize, c));
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let mut visit = |rr: usize, cc: usize| {
            let i = rr * cols + cc;
            if !seen[i] && img.pixels[i] == 1 {
                seen[i] = true;
                queue.push_back((rr, cc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < rows {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < cols {
            visit(r, c + 1);
        }
    }
    for (p, s) in img.pixels.iter_mut().zip(seen) {
        if !s {
            *p = 0;
        }
    }
}
