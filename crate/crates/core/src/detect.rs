//! Recovers the five resonator parameters from a cross-section image by
//! run-length measurement and two-cluster k-means.

use crate::error::{Error, Result};
use crate::geometry::VarGeometry;
use crate::raster::{cavityless_image, px_to_mm, CrossSection, CHANNEL_COLS};

/// Tolerance (pixels) below the tallest column for R_c candidates.
pub const RC_THRESHOLD_PX: usize = 2;
const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's algorithm with two clusters, seeded at the data min and max.
/// Returns the centroids `(low, high)`; `None` when all values are equal
/// or the input is empty.
pub fn kmeans2(data: &[f64]) -> Option<(f64, f64)> {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if data.is_empty() || lo == hi {
        return None;
    }
    let (mut c0, mut c1) = (lo, hi);
    for _ in 0..KMEANS_MAX_ITER {
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for &x in data {
            if (x - c0).abs() <= (x - c1).abs() {
                s0 += x;
                n0 += 1;
            } else {
                s1 += x;
                n1 += 1;
            }
        }
        let next0 = if n0 > 0 { s0 / n0 as f64 } else { c0 };
        let next1 = if n1 > 0 { s1 / n1 as f64 } else { c1 };
        if next0 == c0 && next1 == c1 {
            break;
        }
        c0 = next0;
        c1 = next1;
    }
    Some((c0.min(c1), c0.max(c1)))
}

/// Vertical length of a column: last air row − first air row + 1.
fn column_length(img: &CrossSection, col: usize) -> usize {
    img.col_extent(col).map_or(0, |(a, b)| b - a + 1)
}

/// Detects `(R, l_a, l_b, R_n, R_c)` in millimetres.
///
/// R counts rows whose horizontal length equals the channel length; the
/// remaining non-empty row lengths split into l_a (larger centroid) and
/// l_b (smaller). R_c is the most frequent column length within
/// [`RC_THRESHOLD_PX`] of the longest. Removing a cavity-less image built
/// from R, l_b and R_c leaves the cavity; R_n = R_c − its tallest column.
pub fn detect_parameters(img: &CrossSection) -> Result<VarGeometry> {
    let mut r_px = 0usize;
    let mut lengths = Vec::new();
    for row in 0..img.rows() {
        if let Some((a, b)) = img.row_extent(row) {
            let len = b - a + 1;
            if len == CHANNEL_COLS {
                r_px += 1;
            } else {
                lengths.push(len as f64);
            }
        }
    }
    if r_px == 0 {
        return Err(Error::DetectionFailed("no full-length channel row".into()));
    }
    let (l_b_px, l_a_px) = kmeans2(&lengths).ok_or_else(|| {
        Error::DetectionFailed(format!(
            "k-means degenerate on {} row lengths",
            lengths.len()
        ))
    })?;

    let col_lengths: Vec<usize> = (0..img.cols()).map(|c| column_length(img, c)).collect();
    let tallest = col_lengths.iter().copied().max().unwrap_or(0);
    let floor = tallest.saturating_sub(RC_THRESHOLD_PX);
    let r_c_px = mode(col_lengths.iter().copied().filter(|&l| l >= floor && l > 0))
        .ok_or_else(|| Error::DetectionFailed("no column candidates for R_c".into()))?;

    let without = cavityless_image(
        img.rows(),
        img.cols(),
        r_px,
        l_b_px.round() as usize,
        r_c_px,
    );
    let mut cavity = CrossSection::zeros(img.rows(), img.cols());
    for r in 0..img.rows() {
        for c in 0..img.cols() {
            cavity.set(r, c, img.get(r, c) && !without.get(r, c));
        }
    }
    let cavity_height = (0..cavity.cols())
        .map(|c| column_length(&cavity, c))
        .max()
        .unwrap_or(0);
    if cavity_height == 0 {
        return Err(Error::DetectionFailed("cavity image is empty".into()));
    }
    let r_n_px = r_c_px.saturating_sub(cavity_height);

    Ok(VarGeometry::new(
        px_to_mm(r_px),
        l_a_px * crate::raster::PITCH_MM,
        l_b_px * crate::raster::PITCH_MM,
        px_to_mm(r_n_px),
        px_to_mm(r_c_px),
    ))
}

/// Most frequent value; ties go to the larger value.
fn mode(values: impl Iterator<Item = usize>) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_geometries, SamplerConfig};
    use crate::raster::{rasterize, MIN_CHANNEL_ROWS};

    #[test]
    fn kmeans_two_valued_data_is_exact() {
        let mut data = vec![45.0; 30];
        data.extend(vec![5.0; 12]);
        assert_eq!(kmeans2(&data), Some((5.0, 45.0)));
        assert_eq!(kmeans2(&[3.0, 3.0]), None);
        assert_eq!(kmeans2(&[]), None);
    }

    #[test]
    fn run_multiset_for_extreme_widths() {
        // l_a = 18 mm and l_b = 2 mm give 45 and 5 pixel runs
        let g = VarGeometry::new(5.0, 18.0, 2.0, 10.0, 30.0);
        let img = rasterize(&g).unwrap();
        let runs: Vec<f64> = (0..img.rows())
            .filter_map(|r| img.row_extent(r))
            .map(|(a, b)| (b - a + 1) as f64)
            .filter(|l| *l != 50.0)
            .collect();
        assert_eq!(kmeans2(&runs), Some((5.0, 45.0)));
    }

    #[test]
    fn round_trip_within_one_pixel() {
        for g in sample_geometries(&SamplerConfig::new(99, 100)).unwrap() {
            let d = detect_parameters(&rasterize(&g).unwrap()).unwrap();
            for (a, b) in d.to_array().iter().zip(g.to_array()) {
                assert!((a - b).abs() <= 0.4 + 1e-9, "{g:?} -> {d:?}");
            }
        }
    }

    #[test]
    fn bare_channel_fails() {
        let img = crate::raster::binarize(&vec![0.0; 128 * 64], 128, 64, 0.5);
        assert_eq!(img.channel_rows(), MIN_CHANNEL_ROWS);
        assert!(matches!(
            detect_parameters(&img),
            Err(Error::DetectionFailed(_))
        ));
    }

    #[test]
    fn mode_prefers_larger_on_tie() {
        assert_eq!(mode([3, 3, 5, 5].into_iter()), Some(5));
        assert_eq!(mode([3, 3, 3, 5].into_iter()), Some(3));
    }
}
