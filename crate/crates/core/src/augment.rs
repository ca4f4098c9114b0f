//! Deterministic expansion of one training pair into ten variants.
//!
//! Geometric kinds permute pixel positions and are applied to the raster and
//! its mask alike. Photometric kinds touch raster values only; the mask is
//! passed through untouched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::BinaryMask;
use crate::raster::{round_u8, Dims, Plane, Rgb, RgbRaster};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("raster is {raster} but mask is {mask}")]
    DimMismatch { raster: Dims, mask: Dims },
    #[error("{0:?} cannot be applied here")]
    WrongKind(AugmentKind),
    #[error("invalid augmentation config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
    Transpose,
    ContrastStretch,
    Gamma,
    HueShift,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 9] = [
        AugmentKind::FlipH,
        AugmentKind::FlipV,
        AugmentKind::Rot90,
        AugmentKind::Rot180,
        AugmentKind::Rot270,
        AugmentKind::Transpose,
        AugmentKind::ContrastStretch,
        AugmentKind::Gamma,
        AugmentKind::HueShift,
    ];

    pub fn is_geometric(self) -> bool {
        !matches!(self, AugmentKind::ContrastStretch | AugmentKind::Gamma | AugmentKind::HueShift)
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::FlipH => "flip_h",
            AugmentKind::FlipV => "flip_v",
            AugmentKind::Rot90 => "rot90",
            AugmentKind::Rot180 => "rot180",
            AugmentKind::Rot270 => "rot270",
            AugmentKind::Transpose => "transpose",
            AugmentKind::ContrastStretch => "contrast_stretch",
            AugmentKind::Gamma => "gamma",
            AugmentKind::HueShift => "hue_shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub kinds: Vec<AugmentKind>,
    pub gamma: f64,
    pub hue_degrees: f64,
    pub stretch_percentiles: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { kinds: AugmentKind::ALL.to_vec(), gamma: 1.5, hue_degrees: 30.0, stretch_percentiles: (2.0, 98.0) }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(AugmentError::BadConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !self.hue_degrees.is_finite() {
            return Err(AugmentError::BadConfig("hue_degrees must be finite".into()));
        }
        let (lo, hi) = self.stretch_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(AugmentError::BadConfig(format!(
                "stretch percentiles need 0 <= low < high <= 100, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Output dims and source coordinate for each output pixel.
fn permute<P: Plane>(kind: AugmentKind, src: &P) -> Result<P, AugmentError> {
    let Dims { width: w, height: h } = src.dims();
    let swapped = Dims { width: h, height: w };
    let out = match kind {
        AugmentKind::FlipH => P::from_fn(src.dims(), |x, y| src.at(w - 1 - x, y)),
        AugmentKind::FlipV => P::from_fn(src.dims(), |x, y| src.at(x, h - 1 - y)),
        AugmentKind::Rot180 => P::from_fn(src.dims(), |x, y| src.at(w - 1 - x, h - 1 - y)),
        // anti-clockwise: the source's right column becomes the top row
        AugmentKind::Rot90 => P::from_fn(swapped, |x, y| src.at(w - 1 - y, x)),
        AugmentKind::Rot270 => P::from_fn(swapped, |x, y| src.at(y, h - 1 - x)),
        AugmentKind::Transpose => P::from_fn(swapped, |x, y| src.at(y, x)),
        other => return Err(AugmentError::WrongKind(other)),
    };
    Ok(out)
}

pub fn apply_geometric(
    kind: AugmentKind,
    raster: &RgbRaster,
    mask: &BinaryMask,
) -> Result<(RgbRaster, BinaryMask), AugmentError> {
    if !kind.is_geometric() {
        return Err(AugmentError::WrongKind(kind));
    }
    if raster.dims() != mask.dims() {
        return Err(AugmentError::DimMismatch { raster: raster.dims(), mask: mask.dims() });
    }
    Ok((permute(kind, raster)?, permute(kind, mask)?))
}

pub fn apply_photometric(
    kind: AugmentKind,
    raster: &RgbRaster,
    cfg: &AugmentConfig,
) -> Result<RgbRaster, AugmentError> {
    match kind {
        AugmentKind::ContrastStretch => Ok(contrast_stretch(raster, cfg.stretch_percentiles)),
        AugmentKind::Gamma => Ok(gamma(raster, cfg.gamma)),
        AugmentKind::HueShift => Ok(hue_shift(raster, cfg.hue_degrees)),
        other => Err(AugmentError::WrongKind(other)),
    }
}

/// Element 0 is the untouched pair, followed by one pair per enabled kind.
pub fn augment_set(
    raster: &RgbRaster,
    mask: &BinaryMask,
    cfg: &AugmentConfig,
) -> Result<Vec<(RgbRaster, BinaryMask)>, AugmentError> {
    if raster.dims() != mask.dims() {
        return Err(AugmentError::DimMismatch { raster: raster.dims(), mask: mask.dims() });
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.kinds.len() + 1);
    out.push((raster.clone(), mask.clone()));
    for &kind in &cfg.kinds {
        if kind.is_geometric() {
            out.push(apply_geometric(kind, raster, mask)?);
        } else {
            out.push((apply_photometric(kind, raster, cfg)?, mask.clone()));
        }
    }
    Ok(out)
}

fn map_values(raster: &RgbRaster, f: impl Fn(usize, u8) -> u8) -> RgbRaster {
    let px = raster.pixels().iter().map(|p| [f(0, p[0]), f(1, p[1]), f(2, p[2])]).collect();
    RgbRaster::from_pixels(raster.dims(), px)
}

/// Smallest value whose cumulative count reaches `pct` percent of `n`.
fn percentile(hist: &[usize; 256], n: usize, pct: f64) -> u8 {
    let need = ((pct / 100.0) * n as f64).ceil().max(1.0) as usize;
    let mut acc = 0;
    for (v, &c) in hist.iter().enumerate() {
        acc += c;
        if acc >= need {
            return v as u8;
        }
    }
    255
}

fn contrast_stretch(raster: &RgbRaster, (lo_pct, hi_pct): (f64, f64)) -> RgbRaster {
    let n = raster.pixels().len();
    let mut bounds = [(0u8, 255u8); 3];
    for (c, b) in bounds.iter_mut().enumerate() {
        let mut hist = [0usize; 256];
        for p in raster.pixels() {
            hist[p[c] as usize] += 1;
        }
        *b = (percentile(&hist, n, lo_pct), percentile(&hist, n, hi_pct));
    }
    let luts: Vec<[u8; 256]> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let mut lut = [0u8; 256];
            for (v, slot) in lut.iter_mut().enumerate() {
                *slot = if hi <= lo {
                    // flat channel: nothing to stretch
                    v as u8
                } else {
                    round_u8((v as f64 - lo as f64) * 255.0 / (hi as f64 - lo as f64))
                };
            }
            lut
        })
        .collect();
    map_values(raster, |c, v| luts[c][v as usize])
}

fn gamma(raster: &RgbRaster, exponent: f64) -> RgbRaster {
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = round_u8(255.0 * (v as f64 / 255.0).powf(exponent));
    }
    map_values(raster, |_, v| lut[v as usize])
}

pub(crate) fn rgb_to_hsv(p: Rgb) -> (f64, f64, f64) {
    let [r, g, b] = p.map(|v| v as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| round_u8((ch + m) * 255.0))
}

fn hue_shift(raster: &RgbRaster, degrees: f64) -> RgbRaster {
    let px = raster
        .pixels()
        .iter()
        .map(|&p| {
            let (h, s, v) = rgb_to_hsv(p);
            hsv_to_rgb(h + degrees, s, v)
        })
        .collect();
    RgbRaster::from_pixels(raster.dims(), px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::MaskValue;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(w: u32, h: u32, seed: u64) -> (RgbRaster, BinaryMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dims::new(w, h).unwrap();
        let r = RgbRaster::from_fn(d, |_, _| [rng.random(), rng.random(), rng.random()]);
        let m = BinaryMask::from_fn(d, |_, _| match rng.random_range(0..3) {
            0 => MaskValue::Target,
            1 => MaskValue::Other,
            _ => MaskValue::Ignore,
        });
        (r, m)
    }

    fn geo(kind: AugmentKind, p: &(RgbRaster, BinaryMask)) -> (RgbRaster, BinaryMask) {
        apply_geometric(kind, &p.0, &p.1).unwrap()
    }

    #[test]
    fn flip_h_two_pixels() {
        let r = RgbRaster::new(2, 1, vec![[1, 1, 1], [2, 2, 2]]).unwrap();
        let m = BinaryMask::from_pixels(r.dims(), vec![MaskValue::Target, MaskValue::Other]);
        let (r2, m2) = apply_geometric(AugmentKind::FlipH, &r, &m).unwrap();
        assert_eq!(r2.pixels(), &[[2, 2, 2], [1, 1, 1]]);
        assert_eq!(m2.pixels(), &[MaskValue::Other, MaskValue::Target]);
    }

    #[test]
    fn rot90_is_anticlockwise() {
        // 2 wide, 1 tall: [A B]. Anti-clockwise puts B on top of A.
        let r = RgbRaster::new(2, 1, vec![[1; 3], [2; 3]]).unwrap();
        let m = BinaryMask::filled(r.dims(), MaskValue::Other);
        let (out, om) = apply_geometric(AugmentKind::Rot90, &r, &m).unwrap();
        assert_eq!(out.dims(), Dims { width: 1, height: 2 });
        assert_eq!(out.pixels(), &[[2; 3], [1; 3]]);
        assert_eq!(om.dims(), out.dims());
        let (cw, _) = apply_geometric(AugmentKind::Rot270, &r, &m).unwrap();
        assert_eq!(cw.pixels(), &[[1; 3], [2; 3]]);
    }

    #[test]
    fn cycles_and_involutions() {
        let p = pair(5, 3, 1);
        assert_eq!(geo(AugmentKind::FlipH, &geo(AugmentKind::FlipH, &p)), p);
        assert_eq!(geo(AugmentKind::FlipV, &geo(AugmentKind::FlipV, &p)), p);
        assert_eq!(geo(AugmentKind::Transpose, &geo(AugmentKind::Transpose, &p)), p);
        assert_eq!(geo(AugmentKind::Rot180, &geo(AugmentKind::Rot180, &p)), p);
        assert_eq!(geo(AugmentKind::Rot270, &geo(AugmentKind::Rot90, &p)), p);
        let mut q = p.clone();
        for _ in 0..4 {
            q = geo(AugmentKind::Rot90, &q);
        }
        assert_eq!(q, p);
        assert_eq!(geo(AugmentKind::Rot90, &geo(AugmentKind::Rot90, &p)), geo(AugmentKind::Rot180, &p));
    }

    #[test]
    fn wrong_kind_and_dims() {
        let (r, m) = pair(3, 3, 2);
        assert_eq!(
            apply_geometric(AugmentKind::Gamma, &r, &m).unwrap_err(),
            AugmentError::WrongKind(AugmentKind::Gamma)
        );
        let cfg = AugmentConfig::default();
        assert_eq!(
            apply_photometric(AugmentKind::FlipH, &r, &cfg).unwrap_err(),
            AugmentError::WrongKind(AugmentKind::FlipH)
        );
        let (_, m4) = pair(4, 3, 2);
        assert!(matches!(apply_geometric(AugmentKind::FlipH, &r, &m4), Err(AugmentError::DimMismatch { .. })));
        assert!(matches!(augment_set(&r, &m4, &cfg), Err(AugmentError::DimMismatch { .. })));
    }

    #[test]
    fn gamma_values() {
        let r = RgbRaster::new(2, 1, vec![[128, 0, 255], [37, 200, 1]]).unwrap();
        let cfg = AugmentConfig { gamma: 1.0, ..Default::default() };
        assert_eq!(apply_photometric(AugmentKind::Gamma, &r, &cfg).unwrap(), r);
        let cfg = AugmentConfig { gamma: 2.0, ..Default::default() };
        let out = apply_photometric(AugmentKind::Gamma, &r, &cfg).unwrap();
        // 255 * (128/255)^2 = 64.25
        assert_eq!(out.get(0, 0), [64, 0, 255]);
    }

    #[test]
    fn hue_rotation_of_primaries() {
        let r = RgbRaster::new(3, 1, vec![[255, 0, 0], [0, 255, 0], [0, 0, 255]]).unwrap();
        let cfg = AugmentConfig { hue_degrees: 120.0, ..Default::default() };
        let out = apply_photometric(AugmentKind::HueShift, &r, &cfg).unwrap();
        assert_eq!(out.pixels(), &[[0, 255, 0], [0, 0, 255], [255, 0, 0]]);
        let cfg = AugmentConfig { hue_degrees: 360.0, ..Default::default() };
        let grey = RgbRaster::new(1, 1, vec![[77, 77, 77]]).unwrap();
        assert_eq!(apply_photometric(AugmentKind::HueShift, &grey, &cfg).unwrap(), grey);
    }

    #[test]
    fn hsv_round_trip_is_exact_on_a_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5000 {
            let p: Rgb = [rng.random(), rng.random(), rng.random()];
            let (h, s, v) = rgb_to_hsv(p);
            assert_eq!(hsv_to_rgb(h, s, v), p);
        }
    }

    #[test]
    fn contrast_stretch_spans_full_range() {
        // channel values 50..=150 uniformly; 0th/100th percentile bounds map to 0/255
        let px: Vec<Rgb> = (50u8..=150).map(|v| [v, v, 100]).collect();
        let r = RgbRaster::new(px.len() as u32, 1, px).unwrap();
        let cfg = AugmentConfig { stretch_percentiles: (0.0, 100.0), ..Default::default() };
        let out = apply_photometric(AugmentKind::ContrastStretch, &r, &cfg).unwrap();
        assert_eq!(out.get(0, 0), [0, 0, 100]);
        assert_eq!(out.get(100, 0), [255, 255, 100]);
        assert_eq!(out.get(50, 0)[0], 128);
    }

    #[test]
    fn default_set_has_ten_pairs() {
        let (r, m) = pair(6, 4, 3);
        let set = augment_set(&r, &m, &AugmentConfig::default()).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set[0], (r.clone(), m.clone()));
        for (i, kind) in AugmentKind::ALL.iter().enumerate() {
            if !kind.is_geometric() {
                assert_eq!(set[i + 1].1, m);
                assert_eq!(set[i + 1].0.dims(), r.dims());
            }
        }
        let none = AugmentConfig { kinds: vec![], ..Default::default() };
        assert_eq!(augment_set(&r, &m, &none).unwrap().len(), 1);
    }

    #[test]
    fn config_validation() {
        let bad = AugmentConfig { gamma: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { stretch_percentiles: (50.0, 50.0), ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    fn histogram(r: &RgbRaster, m: &BinaryMask) -> (Vec<Rgb>, [usize; 3]) {
        let mut px = r.pixels().to_vec();
        px.sort_unstable();
        let counts = [MaskValue::Target, MaskValue::Other, MaskValue::Ignore].map(|v| m.count(v));
        (px, counts)
    }

    proptest! {
        #[test]
        fn geometric_preserves_histograms(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            let p = pair(w, h, seed);
            let before = histogram(&p.0, &p.1);
            for kind in AugmentKind::ALL.into_iter().filter(|k| k.is_geometric()) {
                let q = geo(kind, &p);
                prop_assert_eq!(histogram(&q.0, &q.1), before.clone());
            }
        }

        #[test]
        fn photometric_keeps_dims(w in 1u32..20, h in 1u32..20, seed in any::<u64>(), g in 0.1f64..4.0, hue in -720f64..720.0) {
            let (r, _) = pair(w, h, seed);
            let cfg = AugmentConfig { gamma: g, hue_degrees: hue, ..Default::default() };
            for kind in AugmentKind::ALL.into_iter().filter(|k| !k.is_geometric()) {
                prop_assert_eq!(apply_photometric(kind, &r, &cfg).unwrap().dims(), r.dims());
            }
        }
    }
}
