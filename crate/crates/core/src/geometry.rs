//! Parameterized unit resonator geometry and its sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed axial length of the air channel of one unit, mm.
pub const CHANNEL_LENGTH_MM: f64 = 20.0;

/// One unit resonator, all lengths in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarGeometry {
    /// Waveguide (channel) radius.
    pub r: f64,
    /// Axial width of the cavity.
    pub l_a: f64,
    /// Axial width of the neck.
    pub l_b: f64,
    /// Outer radius of the neck, where the cavity starts.
    pub r_n: f64,
    /// Outer radius of the cavity.
    pub r_c: f64,
    /// Channel length.
    pub l_c: f64,
}

impl VarGeometry {
    pub fn new(r: f64, l_a: f64, l_b: f64, r_n: f64, r_c: f64) -> Self {
        Self {
            r,
            l_a,
            l_b,
            r_n,
            r_c,
            l_c: CHANNEL_LENGTH_MM,
        }
    }

    /// Parses `R,l_a,l_b,R_n,R_c`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidGeometry(format!("`{s}`: {e}")))?;
        match vals[..] {
            [r, l_a, l_b, r_n, r_c] => Ok(Self::new(r, l_a, l_b, r_n, r_c)),
            _ => Err(Error::InvalidGeometry(format!(
                "expected 5 comma-separated values R,l_a,l_b,R_n,R_c, got {}",
                vals.len()
            ))),
        }
    }

    /// The five free parameters in `R, l_a, l_b, R_n, R_c` order.
    pub fn to_array(&self) -> [f64; 5] {
        [self.r, self.l_a, self.l_b, self.r_n, self.r_c]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    /// Physical ordering 0 < R < R_n < R_c with non-negative widths.
    pub fn check_ordering(&self) -> Result<()> {
        let ok = self.r > 0.0
            && self.r < self.r_n
            && self.r_n < self.r_c
            && self.l_a > 0.0
            && self.l_b >= 0.0
            && self.l_c > 0.0
            && self.to_array().iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidGeometry(format!(
                "need 0 < R < R_n < R_c and positive widths: {self:?}"
            )))
        }
    }
}

/// Design-space bounds of the parameterized resonator.
///
/// `l_b ≤ l_a − l_b_margin`, `R_c ≥ (R + 6)/2`, `R_n ≤ (R_c − R + 38)/2`
/// are the coupled limits; `gap` is the minimum wall/neck thickness in
/// `R + gap ≤ R_n ≤ R_c − gap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub l_a: (f64, f64),
    pub l_b_min: f64,
    pub l_b_margin: f64,
    pub r: (f64, f64),
    pub r_c_max: f64,
    pub r_n_min: f64,
    pub gap: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            l_a: (4.0, 18.0),
            l_b_min: 2.0,
            l_b_margin: 1.0,
            r: (5.0, 20.0),
            r_c_max: 48.5,
            r_n_min: 7.0,
            gap: 1.0,
        }
    }
}

impl Bounds {
    pub fn l_b_range(&self, l_a: f64) -> (f64, f64) {
        (self.l_b_min, l_a - self.l_b_margin)
    }

    pub fn r_c_range(&self, r: f64) -> (f64, f64) {
        ((r + 6.0) / 2.0, self.r_c_max)
    }

    pub fn r_n_range(&self, r: f64, r_c: f64) -> (f64, f64) {
        (self.r_n_min, (r_c - r + 38.0) / 2.0)
    }

    /// Outer box of every parameter, `R, l_a, l_b, R_n, R_c` order.
    pub fn envelope(&self) -> [(f64, f64); 5] {
        let l_b_max = self.l_a.1 - self.l_b_margin;
        let r_c_lo = (self.r.0 + 6.0) / 2.0;
        let r_n_hi = (self.r_c_max - self.r.0 + 38.0) / 2.0;
        [
            self.r,
            self.l_a,
            (self.l_b_min, l_b_max),
            (self.r_n_min, r_n_hi),
            (r_c_lo, self.r_c_max),
        ]
    }

    /// Table-level bounds only.
    pub fn contains_table(&self, g: &VarGeometry) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        within(g.l_a, self.l_a)
            && within(g.l_b, self.l_b_range(g.l_a))
            && within(g.r, self.r)
            && within(g.r_c, self.r_c_range(g.r))
            && within(g.r_n, self.r_n_range(g.r, g.r_c))
    }

    /// Table bounds plus the ordering `R + gap ≤ R_n ≤ R_c − gap`.
    pub fn contains(&self, g: &VarGeometry) -> bool {
        self.contains_table(g) && g.r + self.gap <= g.r_n && g.r_n <= g.r_c - self.gap
    }

    /// Pulls `g` into the admissible region, fixing parameters in the
    /// order R, l_a, l_b, R_c, R_n so later limits see clamped values.
    pub fn clamp(&self, g: &VarGeometry) -> VarGeometry {
        let fix = |v: f64, lo: f64, hi: f64| if v.is_nan() { lo } else { v.max(lo).min(hi) };
        let r = fix(g.r, self.r.0, self.r.1);
        let l_a = fix(g.l_a, self.l_a.0, self.l_a.1);
        let (lb_lo, lb_hi) = self.l_b_range(l_a);
        let l_b = fix(g.l_b, lb_lo, lb_hi);
        // R_c must leave room for R_n: R_n ≥ max(r_n_min, R + gap) and R_c ≥ R_n + gap
        let rn_floor = self.r_n_min.max(r + self.gap);
        let (rc_lo, rc_hi) = self.r_c_range(r);
        // small slack keeps the R_n interval non-empty after rounding
        let rc_floor = rc_lo
            .max(rn_floor + self.gap + 1e-9)
            .max(2.0 * rn_floor + r - 38.0 + 1e-9);
        let r_c = fix(g.r_c, rc_floor, rc_hi);
        let (_, rn_hi) = self.r_n_range(r, r_c);
        let r_n = fix(g.r_n, rn_floor, rn_hi.min(r_c - self.gap));
        VarGeometry::new(r, l_a, l_b, r_n, r_c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    pub count: usize,
    pub bounds: Bounds,
}

impl SamplerConfig {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            bounds: Bounds::default(),
        }
    }
}

/// Draws stop with [`Error::SamplerExhausted`] after this many
/// consecutive rejections.
const EXHAUSTION_WINDOW: u64 = 1_000_000;

/// Result of a sampling run with its acceptance statistics.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub geometries: Vec<VarGeometry>,
    pub draws: u64,
}

impl SampleRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.geometries.len() as f64 / self.draws.max(1) as f64
    }
}

/// Uniform rejection sampling over the admissible region.
pub fn sample_geometries(cfg: &SamplerConfig) -> Result<Vec<VarGeometry>> {
    Ok(sample_with_stats(cfg)?.geometries)
}

pub fn sample_with_stats(cfg: &SamplerConfig) -> Result<SampleRun> {
    if cfg.count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let env = cfg.bounds.envelope();
    let mut out = Vec::with_capacity(cfg.count);
    let mut draws = 0u64;
    let mut since_accept = 0u64;
    while out.len() < cfg.count {
        let mut a = [0.0; 5];
        for (v, (lo, hi)) in a.iter_mut().zip(env) {
            *v = rng.gen_range(lo..=hi);
        }
        let g = VarGeometry::from_array(a);
        draws += 1;
        if cfg.bounds.contains(&g) {
            out.push(g);
            since_accept = 0;
        } else {
            since_accept += 1;
            if since_accept >= EXHAUSTION_WINDOW {
                return Err(Error::SamplerExhausted {
                    draws: EXHAUSTION_WINDOW,
                });
            }
        }
    }
    Ok(SampleRun {
        geometries: out,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_same_samples() {
        let a = sample_geometries(&SamplerConfig::new(7, 3)).unwrap();
        let b = sample_geometries(&SamplerConfig::new(7, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn all_samples_in_bounds_and_cover_la() {
        let cfg = SamplerConfig::new(1, 10_000);
        let run = sample_with_stats(&cfg).unwrap();
        assert_eq!(run.geometries.len(), 10_000);
        let mut hits = [0usize; 14];
        for g in &run.geometries {
            assert!(cfg.bounds.contains(g), "{g:?}");
            assert!(g.r + 1.0 <= g.r_n && g.r_n <= g.r_c - 1.0);
            hits[((g.l_a - 4.0).floor() as usize).min(13)] += 1;
        }
        assert!(hits.iter().all(|&h| h > 0), "{hits:?}");
        assert!(run.acceptance_rate() > 0.01);
    }

    #[test]
    fn impossible_bounds_exhaust() {
        let mut cfg = SamplerConfig::new(1, 1);
        cfg.bounds.gap = 100.0;
        assert!(matches!(
            sample_geometries(&cfg),
            Err(Error::SamplerExhausted { .. })
        ));
    }

    #[test]
    fn parse_list_order() {
        let g = VarGeometry::parse_list("14.5,20,5,34.5,54.5").unwrap();
        assert_eq!(g, VarGeometry::new(14.5, 20.0, 5.0, 34.5, 54.5));
        assert!(VarGeometry::parse_list("1,2,3").is_err());
    }

    proptest! {
        #[test]
        fn clamp_always_admissible(a in prop::array::uniform5(-100.0f64..200.0)) {
            let b = Bounds::default();
            let g = b.clamp(&VarGeometry::from_array(a));
            prop_assert!(b.contains(&g), "{:?}", g);
        }
    }
}
