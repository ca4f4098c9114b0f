//! Ground-truth decoding, per-class binary masks, and dataset selection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{self, Dims, Plane, RasterError, Rgb, RgbRaster};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("{count} pixels match no palette color (first at x={x}, y={y}: {color:?})")]
    UnmappedColor { count: usize, x: u32, y: u32, color: Rgb },
    #[error("palette colors must be pairwise distinct ({0:?} repeats)")]
    DuplicatePaletteColor(Rgb),
    #[error("no image has at least {threshold} {class} pixels")]
    EmptySelection { class: LulcClass, threshold: f64 },
    #[error("{class}: {available} images selected but {requested} requested for test")]
    InsufficientImages { class: LulcClass, available: usize, requested: usize },
    #[error("presence threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("unknown class `{0}` (expected forest, farmland, builtup or water)")]
    UnknownClass(String),
    #[error("mask pixel at x={x}, y={y} has color {color:?}; expected blue, red or black")]
    BadMaskColor { x: u32, y: u32, color: Rgb },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LulcClass {
    Forest,
    Farmland,
    Builtup,
    Water,
}

impl LulcClass {
    pub const ALL: [LulcClass; 4] = [LulcClass::Forest, LulcClass::Farmland, LulcClass::Builtup, LulcClass::Water];

    pub fn name(self) -> &'static str {
        match self {
            LulcClass::Forest => "forest",
            LulcClass::Farmland => "farmland",
            LulcClass::Builtup => "builtup",
            LulcClass::Water => "water",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LulcClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LulcClass {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "forest" => Ok(LulcClass::Forest),
            "farmland" => Ok(LulcClass::Farmland),
            "builtup" => Ok(LulcClass::Builtup),
            "water" => Ok(LulcClass::Water),
            _ => Err(LabelError::UnknownClass(s.to_string())),
        }
    }
}

/// A decoded ground-truth pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Ignore,
    Class(LulcClass),
}

/// Ground-truth color coding. Colors are pairwise distinct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PaletteRepr", into = "PaletteRepr")]
pub struct Palette {
    classes: [Rgb; 4],
    ignore: Rgb,
}

#[derive(Serialize, Deserialize)]
struct PaletteRepr {
    forest: Rgb,
    farmland: Rgb,
    builtup: Rgb,
    water: Rgb,
    ignore: Rgb,
}

impl TryFrom<PaletteRepr> for Palette {
    type Error = LabelError;

    fn try_from(r: PaletteRepr) -> Result<Self, Self::Error> {
        Palette::new([r.forest, r.farmland, r.builtup, r.water], r.ignore)
    }
}

impl From<Palette> for PaletteRepr {
    fn from(p: Palette) -> Self {
        let [forest, farmland, builtup, water] = p.classes;
        PaletteRepr { forest, farmland, builtup, water, ignore: p.ignore }
    }
}

impl Default for Palette {
    fn default() -> Self {
        Palette { classes: [[0, 255, 255], [0, 255, 0], [255, 0, 0], [0, 0, 255]], ignore: [0, 0, 0] }
    }
}

impl Palette {
    /// `classes` is indexed in `LulcClass::ALL` order.
    pub fn new(classes: [Rgb; 4], ignore: Rgb) -> Result<Self, LabelError> {
        let all: Vec<Rgb> = classes.iter().copied().chain([ignore]).collect();
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(LabelError::DuplicatePaletteColor(*a));
            }
        }
        Ok(Self { classes, ignore })
    }

    pub fn color(&self, label: Label) -> Rgb {
        match label {
            Label::Ignore => self.ignore,
            Label::Class(c) => self.classes[c.index()],
        }
    }

    fn entries(&self) -> impl Iterator<Item = (Label, Rgb)> + '_ {
        LulcClass::ALL.iter().map(|&c| (Label::Class(c), self.classes[c.index()])).chain([(Label::Ignore, self.ignore)])
    }

    /// Nearest entry under L∞ distance, if within `tolerance`.
    fn lookup(&self, px: Rgb, tolerance: u8) -> Option<Label> {
        self.entries()
            .map(|(label, color)| {
                let d = (0..3).map(|c| px[c].abs_diff(color[c])).max().unwrap_or(0);
                (d, label)
            })
            .filter(|&(d, _)| d <= tolerance)
            .min_by_key(|&(d, _)| d)
            .map(|(_, label)| label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    dims: Dims,
    labels: Vec<Label>,
}

impl Plane for ClassMap {
    type Pixel = Label;

    fn dims(&self) -> Dims {
        self.dims
    }

    fn pixels(&self) -> &[Label] {
        &self.labels
    }

    fn from_pixels(dims: Dims, labels: Vec<Label>) -> Self {
        debug_assert_eq!(labels.len(), dims.area());
        Self { dims, labels }
    }
}

impl ClassMap {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Renders back to palette colors.
    pub fn render(&self, palette: &Palette) -> RgbRaster {
        let px = self.labels.iter().map(|&l| palette.color(l)).collect();
        RgbRaster::from_pixels(self.dims, px)
    }
}

/// One pixel of a per-class mask. The discriminants are the class indices
/// used by the network (Other = 0, Target = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskValue {
    Other = 0,
    Target = 1,
    Ignore = 255,
}

pub const MASK_TARGET_COLOR: Rgb = [0, 0, 255];
pub const MASK_OTHER_COLOR: Rgb = [255, 0, 0];
pub const MASK_IGNORE_COLOR: Rgb = [0, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    values: Vec<MaskValue>,
}

impl Plane for BinaryMask {
    type Pixel = MaskValue;

    fn dims(&self) -> Dims {
        self.dims
    }

    fn pixels(&self) -> &[MaskValue] {
        &self.values
    }

    fn from_pixels(dims: Dims, values: Vec<MaskValue>) -> Self {
        debug_assert_eq!(values.len(), dims.area());
        Self { dims, values }
    }
}

impl BinaryMask {
    pub fn filled(dims: Dims, value: MaskValue) -> Self {
        Self { dims, values: vec![value; dims.area()] }
    }

    pub fn count(&self, value: MaskValue) -> usize {
        self.values.iter().filter(|&&v| v == value).count()
    }

    /// Blue for target, red for other, black for ignore.
    pub fn render(&self) -> RgbRaster {
        let px = self
            .values
            .iter()
            .map(|v| match v {
                MaskValue::Target => MASK_TARGET_COLOR,
                MaskValue::Other => MASK_OTHER_COLOR,
                MaskValue::Ignore => MASK_IGNORE_COLOR,
            })
            .collect();
        RgbRaster::from_pixels(self.dims, px)
    }

    pub fn from_rendered(raster: &RgbRaster) -> Result<Self, LabelError> {
        let w = raster.width();
        let values = raster
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, &px)| match px {
                MASK_TARGET_COLOR => Ok(MaskValue::Target),
                MASK_OTHER_COLOR => Ok(MaskValue::Other),
                MASK_IGNORE_COLOR => Ok(MaskValue::Ignore),
                color => Err(LabelError::BadMaskColor { x: i as u32 % w, y: i as u32 / w, color }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { dims: raster.dims(), values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LabelError> {
        Ok(raster::save_rgb(&self.render(), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LabelError> {
        Self::from_rendered(&raster::load_rgb(path)?)
    }
}

/// Maps every pixel to the palette entry within L∞ `tolerance`; any pixel
/// that matches nothing fails the whole raster.
pub fn decode_labels(label_raster: &RgbRaster, palette: &Palette, tolerance: u8) -> Result<ClassMap, LabelError> {
    let mut labels = Vec::with_capacity(label_raster.pixels().len());
    let mut first_bad: Option<(usize, Rgb)> = None;
    let mut bad = 0usize;
    for (i, &px) in label_raster.pixels().iter().enumerate() {
        match palette.lookup(px, tolerance) {
            Some(l) => labels.push(l),
            None => {
                bad += 1;
                first_bad.get_or_insert((i, px));
                labels.push(Label::Ignore);
            }
        }
    }
    if let Some((i, color)) = first_bad {
        let w = label_raster.width() as usize;
        return Err(LabelError::UnmappedColor { count: bad, x: (i % w) as u32, y: (i / w) as u32, color });
    }
    Ok(ClassMap { dims: label_raster.dims(), labels })
}

pub fn make_binary_mask(map: &ClassMap, target: LulcClass) -> BinaryMask {
    let values = map
        .labels
        .iter()
        .map(|&l| match l {
            Label::Ignore => MaskValue::Ignore,
            Label::Class(c) if c == target => MaskValue::Target,
            Label::Class(_) => MaskValue::Other,
        })
        .collect();
    BinaryMask { dims: map.dims, values }
}

/// Share of all pixels (ignore pixels included in the denominator) that
/// carry `cls`.
pub fn class_fraction(map: &ClassMap, cls: LulcClass) -> f64 {
    map.count(Label::Class(cls)) as f64 / map.labels.len() as f64
}

/// Per-class test counts: forest 6, farmland 12, builtup 8, water 9.
pub fn default_test_counts() -> BTreeMap<LulcClass, usize> {
    BTreeMap::from([(LulcClass::Forest, 6), (LulcClass::Farmland, 12), (LulcClass::Builtup, 8), (LulcClass::Water, 9)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub presence_threshold: f64,
    pub test_counts: BTreeMap<LulcClass, usize>,
    pub rng_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { presence_threshold: 0.05, test_counts: default_test_counts(), rng_seed: 0 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        let t = self.presence_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(LabelError::BadThreshold(t));
        }
        Ok(())
    }

    pub fn test_count(&self, cls: LulcClass) -> usize {
        self.test_counts.get(&cls).copied().unwrap_or(0)
    }
}

/// Keeps the items whose class fraction reaches the presence threshold,
/// in their original order. `fraction_of` extracts the precomputed fraction
/// of `cls` for an item, so callers need not keep whole class maps alive.
pub fn select_images<T: Clone>(
    dataset: &[T],
    cls: LulcClass,
    cfg: &SplitConfig,
    fraction_of: impl Fn(&T, LulcClass) -> f64,
) -> Result<Vec<T>, LabelError> {
    cfg.validate()?;
    let selected: Vec<T> =
        dataset.iter().filter(|item| fraction_of(item, cls) >= cfg.presence_threshold).cloned().collect();
    if selected.is_empty() {
        return Err(LabelError::EmptySelection { class: cls, threshold: cfg.presence_threshold });
    }
    Ok(selected)
}

/// Seeded shuffle; the last `k` items become the test set.
pub fn split_train_test<T: Clone>(
    selected: &[T],
    cls: LulcClass,
    cfg: &SplitConfig,
) -> Result<(Vec<T>, Vec<T>), LabelError> {
    let k = cfg.test_count(cls);
    if k >= selected.len() {
        return Err(LabelError::InsufficientImages { class: cls, available: selected.len(), requested: k });
    }
    let mut order: Vec<usize> = (0..selected.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    order.shuffle(&mut rng);
    let cut = selected.len() - k;
    let train = order[..cut].iter().map(|&i| selected[i].clone()).collect();
    let test = order[cut..].iter().map(|&i| selected[i].clone()).collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(w: u32, h: u32) -> Dims {
        Dims::new(w, h).unwrap()
    }

    fn map_from(labels: Vec<Label>, w: u32) -> ClassMap {
        let h = labels.len() as u32 / w;
        ClassMap::from_pixels(dims(w, h), labels)
    }

    #[test]
    fn palette_colors_decode() {
        let p = Palette::default();
        let r =
            RgbRaster::new(3, 2, vec![[0, 255, 255], [0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255], [0, 255, 255]])
                .unwrap();
        let m = decode_labels(&r, &p, 0).unwrap();
        assert_eq!(
            m.pixels(),
            &[
                Label::Class(LulcClass::Forest),
                Label::Ignore,
                Label::Class(LulcClass::Builtup),
                Label::Class(LulcClass::Farmland),
                Label::Class(LulcClass::Water),
                Label::Class(LulcClass::Forest),
            ]
        );
    }

    #[test]
    fn tolerance_controls_near_colors() {
        let p = Palette::default();
        let r = RgbRaster::new(2, 1, vec![[0, 255, 255], [7, 250, 250]]).unwrap();
        match decode_labels(&r, &p, 0) {
            Err(LabelError::UnmappedColor { count, x, y, color }) => {
                assert_eq!((count, x, y, color), (1, 1, 0, [7, 250, 250]));
            }
            other => panic!("expected UnmappedColor, got {other:?}"),
        }
        let m = decode_labels(&r, &p, 8).unwrap();
        assert_eq!(m.at(1, 0), Label::Class(LulcClass::Forest));
    }

    #[test]
    fn palette_rejects_duplicates() {
        let c = [[1, 1, 1], [2, 2, 2], [3, 3, 3], [1, 1, 1]];
        assert!(matches!(Palette::new(c, [0; 3]), Err(LabelError::DuplicatePaletteColor(_))));
        let c = [[1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4]];
        assert!(Palette::new(c, [4, 4, 4]).is_err());
        assert!(Palette::new(c, [0, 0, 0]).is_ok());
    }

    #[test]
    fn palette_json_round_trip() {
        let p = Palette::default();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<Palette>(&s).unwrap(), p);
        let dup = r#"{"forest":[0,0,0],"farmland":[1,1,1],"builtup":[2,2,2],"water":[3,3,3],"ignore":[0,0,0]}"#;
        assert!(serde_json::from_str::<Palette>(dup).is_err());
    }

    #[test]
    fn binary_mask_encoding() {
        let m = map_from(vec![Label::Class(LulcClass::Forest), Label::Class(LulcClass::Farmland), Label::Ignore], 3);
        let b = make_binary_mask(&m, LulcClass::Forest);
        assert_eq!(b.pixels(), &[MaskValue::Target, MaskValue::Other, MaskValue::Ignore]);
        assert_eq!(b.render().pixels(), &[[0, 0, 255], [255, 0, 0], [0, 0, 0]]);
        let b2 = make_binary_mask(&m, LulcClass::Water);
        assert_eq!(b2.pixels(), &[MaskValue::Other, MaskValue::Other, MaskValue::Ignore]);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = BinaryMask::from_pixels(
            dims(2, 2),
            vec![MaskValue::Target, MaskValue::Other, MaskValue::Ignore, MaskValue::Target],
        );
        let p = dir.path().join("m.png");
        b.save(&p).unwrap();
        assert_eq!(BinaryMask::load(&p).unwrap(), b);
        let bad = RgbRaster::new(1, 1, vec![[1, 2, 3]]).unwrap();
        assert!(matches!(BinaryMask::from_rendered(&bad), Err(LabelError::BadMaskColor { .. })));
    }

    #[test]
    fn fractions() {
        let forest = Label::Class(LulcClass::Forest);
        let uniform = map_from(vec![forest; 16], 4);
        assert_eq!(class_fraction(&uniform, LulcClass::Forest), 1.0);
        assert_eq!(class_fraction(&uniform, LulcClass::Water), 0.0);

        let mut half = vec![forest; 50];
        half.extend(vec![Label::Ignore; 50]);
        let m = map_from(half, 10);
        // brute-force: 50 forest pixels over 100 total
        let brute = m.pixels().iter().filter(|&&l| l == forest).count() as f64 / 100.0;
        assert_eq!(brute, 0.5);
        assert_eq!(class_fraction(&m, LulcClass::Forest), brute);
    }

    fn map_with_count(n: usize, count: usize) -> ClassMap {
        let mut v = vec![Label::Class(LulcClass::Farmland); n];
        v[..count].fill(Label::Class(LulcClass::Forest));
        map_from(v, 100)
    }

    #[test]
    fn selection_threshold_is_inclusive() {
        let ds = vec![map_with_count(10_000, 499), map_with_count(10_000, 500), map_with_count(10_000, 501)];
        let cfg = SplitConfig::default();
        let sel = select_images(&ds, LulcClass::Forest, &cfg, class_fraction).unwrap();
        assert_eq!(sel.len(), 2);
        assert_eq!(sel[0], ds[1]);
        assert_eq!(sel[1], ds[2]);
        assert!(matches!(
            select_images(&ds, LulcClass::Water, &cfg, class_fraction),
            Err(LabelError::EmptySelection { .. })
        ));
    }

    #[test]
    fn bad_threshold() {
        let cfg = SplitConfig { presence_threshold: 1.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(LabelError::BadThreshold(_))));
    }

    #[test]
    fn split_counts_and_determinism() {
        let cfg = SplitConfig::default();
        let forest: Vec<usize> = (0..31).collect();
        let (tr, te) = split_train_test(&forest, LulcClass::Forest, &cfg).unwrap();
        assert_eq!((tr.len(), te.len()), (25, 6));
        let (tr2, te2) = split_train_test(&forest, LulcClass::Forest, &cfg).unwrap();
        assert_eq!((tr, te), (tr2, te2));

        let water: Vec<usize> = (0..72).collect();
        let (tr, te) = split_train_test(&water, LulcClass::Water, &cfg).unwrap();
        assert_eq!((tr.len(), te.len()), (63, 9));

        let few: Vec<usize> = (0..6).collect();
        assert!(matches!(
            split_train_test(&few, LulcClass::Forest, &cfg),
            Err(LabelError::InsufficientImages { available: 6, requested: 6, .. })
        ));
    }

    #[test]
    fn class_names_parse() {
        for c in LulcClass::ALL {
            assert_eq!(c.name().parse::<LulcClass>().unwrap(), c);
        }
        assert_eq!("Built-Up".parse::<LulcClass>().unwrap(), LulcClass::Builtup);
        assert!("meadow".parse::<LulcClass>().is_err());
    }

    fn arb_label() -> impl Strategy<Value = Label> {
        prop_oneof![
            Just(Label::Ignore),
            Just(Label::Class(LulcClass::Forest)),
            Just(Label::Class(LulcClass::Farmland)),
            Just(Label::Class(LulcClass::Builtup)),
            Just(Label::Class(LulcClass::Water)),
        ]
    }

    proptest! {
        #[test]
        fn render_then_decode_is_identity(w in 1u32..12, labels in prop::collection::vec(arb_label(), 1..144)) {
            let n = (labels.len() as u32 / w).max(1) * w;
            let mut labels = labels;
            labels.resize(n as usize, Label::Ignore);
            let m = map_from(labels, w);
            let p = Palette::default();
            let rendered = m.render(&p);
            let back = decode_labels(&rendered, &p, 0).unwrap();
            prop_assert_eq!(&back.render(&p), &rendered);
            prop_assert_eq!(back, m);
        }

        #[test]
        fn fractions_partition_unity(labels in prop::collection::vec(arb_label(), 1..200)) {
            let n = labels.len();
            let m = ClassMap::from_pixels(dims(n as u32, 1), labels);
            let counted: usize = LulcClass::ALL.iter().map(|&c| m.count(Label::Class(c))).sum::<usize>()
                + m.count(Label::Ignore);
            prop_assert_eq!(counted, n);
            let total: f64 = LulcClass::ALL.iter().map(|&c| class_fraction(&m, c)).sum::<f64>()
                + m.count(Label::Ignore) as f64 / n as f64;
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ignore_never_becomes_target_or_other(labels in prop::collection::vec(arb_label(), 1..200)) {
            let n = labels.len();
            let m = ClassMap::from_pixels(dims(n as u32, 1), labels);
            for c in LulcClass::ALL {
                let b = make_binary_mask(&m, c);
                for (l, v) in m.pixels().iter().zip(b.pixels()) {
                    prop_assert_eq!(*l == Label::Ignore, *v == MaskValue::Ignore);
                }
            }
        }

        #[test]
        fn split_is_a_partition(n in 2usize..80, k in 0usize..40, seed in any::<u64>()) {
            prop_assume!(k < n);
            let mut cfg = SplitConfig { rng_seed: seed, ..Default::default() };
            cfg.test_counts.insert(LulcClass::Forest, k);
            let items: Vec<usize> = (0..n).collect();
            let (tr, te) = split_train_test(&items, LulcClass::Forest, &cfg).unwrap();
            prop_assert_eq!(te.len(), k);
            let mut all: Vec<usize> = tr.iter().chain(te.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }
    }
}
