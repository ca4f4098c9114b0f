//! Synthetic scenes for fixtures and smoke runs. Each land-cover class has
//! its own base color and texture so a small network can separate them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::{BinaryMask, ClassMap, Label, LulcClass, MaskValue, Palette};
use crate::raster::{Dims, Plane, RgbRaster};

fn base_color(label: Label) -> [i32; 3] {
    match label {
        Label::Class(LulcClass::Forest) => [40, 95, 45],
        Label::Class(LulcClass::Farmland) => [175, 160, 90],
        Label::Class(LulcClass::Builtup) => [200, 195, 200],
        Label::Class(LulcClass::Water) => [35, 65, 150],
        Label::Ignore => [120, 120, 120],
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [i32; 3], amp: i32) -> [u8; 3] {
    let n = rng.random_range(-amp..=amp);
    base.map(|c| (c + n + rng.random_range(-amp / 3..=amp / 3)).clamp(0, 255) as u8)
}

/// Paints a class map as an image: per-class color plus uniform noise.
pub fn paint(map: &ClassMap, seed: u64) -> RgbRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = map.pixels().iter().map(|&l| jitter(&mut rng, base_color(l), 18)).collect();
    RgbRaster::from_pixels(map.dims(), px)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, d: Dims, min_frac: f64, max_frac: f64) -> Self {
        let (w, h) = (d.width as f64, d.height as f64);
        let size = rng.random_range(min_frac..max_frac) * w.min(h);
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        if rng.random_bool(0.5) {
            Shape::Disc { cx, cy, r: size / 2.0 }
        } else {
            let aspect = rng.random_range(0.5..2.0);
            let (hw, hh) = (size * aspect / 2.0, size / aspect / 2.0);
            Shape::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
        }
    }

    fn contains(&self, x: u32, y: u32) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
        }
    }
}

/// A farmland background with blobs of every class and an occasional
/// unlabelled patch.
pub fn scene(seed: u64, dims: Dims) -> ClassMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs: Vec<(Shape, Label)> = Vec::new();
    for cls in [LulcClass::Forest, LulcClass::Builtup, LulcClass::Water, LulcClass::Forest] {
        blobs.push((Shape::random(&mut rng, dims, 0.25, 0.55), Label::Class(cls)));
    }
    if rng.random_bool(0.5) {
        blobs.push((Shape::random(&mut rng, dims, 0.05, 0.15), Label::Ignore));
    }
    ClassMap::from_fn(dims, |x, y| {
        blobs.iter().rev().find(|(s, _)| s.contains(x, y)).map(|&(_, l)| l).unwrap_or(Label::Class(LulcClass::Farmland))
    })
}

/// Scene image and its palette-colored label raster.
pub fn scene_pair(seed: u64, dims: Dims, palette: &Palette) -> (RgbRaster, RgbRaster) {
    let map = scene(seed, dims);
    (paint(&map, seed ^ 0x9e37_79b9), map.render(palette))
}

/// Single-class tiles: target-class blobs on a mixed background.
pub fn toy_tiles(seed: u64, n: usize, side: u32, target: LulcClass) -> Vec<(String, RgbRaster, BinaryMask)> {
    let dims = Dims { width: side, height: side };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<LulcClass> = LulcClass::ALL.into_iter().filter(|&c| c != target).collect();
    (0..n)
        .map(|i| {
            let background = others[i % others.len()];
            let k = rng.random_range(2..=3);
            let shapes: Vec<Shape> = (0..k).map(|_| Shape::random(&mut rng, dims, 0.3, 0.6)).collect();
            let map = ClassMap::from_fn(dims, |x, y| {
                if shapes.iter().any(|s| s.contains(x, y)) {
                    Label::Class(target)
                } else {
                    Label::Class(background)
                }
            });
            let image = paint(&map, rng.random());
            let mask = BinaryMask::from_pixels(
                dims,
                map.pixels()
                    .iter()
                    .map(|&l| if l == Label::Class(target) { MaskValue::Target } else { MaskValue::Other })
                    .collect(),
            );
            (format!("toy{i:02}"), image, mask)
        })
        .collect()
}

/// Presence pattern whose ≥5 % selection reproduces per-class counts of
/// 31 / 131 / 60 / 72 out of 150 images. Every image is 20×20; present
/// classes get exactly 5 % (20 px), absent ones sit just under at 19 px.
pub fn presence_fixture() -> Vec<ClassMap> {
    const N: usize = 150;
    let dims = Dims { width: 20, height: 20 };
    let present = |cls: LulcClass, i: usize| match cls {
        LulcClass::Forest => i < 31,
        LulcClass::Farmland => i >= N - 131,
        LulcClass::Builtup => i % 5 < 2,
        LulcClass::Water => i % 25 < 12,
    };
    (0..N)
        .map(|i| {
            let mut labels = Vec::with_capacity(400);
            for cls in LulcClass::ALL {
                let n = if present(cls, i) { 20 } else { 19 };
                labels.extend(std::iter::repeat_n(Label::Class(cls), n));
            }
            labels.resize(400, Label::Ignore);
            ClassMap::from_pixels(dims, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{class_fraction, decode_labels};

    #[test]
    fn presence_fixture_counts() {
        let maps = presence_fixture();
        let count = |c| maps.iter().filter(|m| class_fraction(m, c) >= 0.05).count();
        assert_eq!(LulcClass::ALL.map(count), [31, 131, 60, 72]);
    }

    #[test]
    fn scene_labels_decode() {
        let p = Palette::default();
        let d = Dims::new(64, 48).unwrap();
        let (img, labels) = scene_pair(3, d, &p);
        assert_eq!(img.dims(), d);
        let map = decode_labels(&labels, &p, 0).unwrap();
        assert_eq!(map, scene(3, d));
    }

    #[test]
    fn toy_tiles_have_both_classes() {
        for (_, img, mask) in toy_tiles(1, 8, 224, LulcClass::Water) {
            assert_eq!(img.dims(), mask.dims());
            assert!(mask.count(MaskValue::Target) > 0);
            assert!(mask.count(MaskValue::Other) > 0);
        }
    }
}
