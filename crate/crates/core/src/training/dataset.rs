use std::borrow::Cow;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::augment::{augment_set, AugmentConfig};
use crate::grid::{extract_tile, plan_grid, TileGrid, TileIndex};
use crate::labels::BinaryMask;
use crate::net::Tensor;
use crate::raster::{resize_bilinear, resize_nearest, Dims, Plane, RgbRaster};

use super::{TrainConfig, TrainError, TrainMode, INPUT_SIDE};

/// Image/mask pairs addressed by index. File-backed sources load lazily.
pub trait PairSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn name(&self, i: usize) -> String;

    fn load(&self, i: usize) -> Result<(RgbRaster, BinaryMask), TrainError>;

    fn dims(&self, i: usize) -> Result<Dims, TrainError> {
        Ok(self.load(i)?.0.dims())
    }
}

pub struct InMemoryPairs(pub Vec<(String, RgbRaster, BinaryMask)>);

impl PairSource for InMemoryPairs {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn name(&self, i: usize) -> String {
        self.0[i].0.clone()
    }

    fn load(&self, i: usize) -> Result<(RgbRaster, BinaryMask), TrainError> {
        let (_, r, m) = &self.0[i];
        Ok((r.clone(), m.clone()))
    }

    fn dims(&self, i: usize) -> Result<Dims, TrainError> {
        Ok(self.0[i].1.dims())
    }
}

/// One 224×224 network input with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbRaster,
    pub mask: BinaryMask,
}

enum Inner<'a> {
    Materialized(Vec<Sample>),
    Tiled {
        source: &'a dyn PairSource,
        grids: Vec<TileGrid>,
        index: Vec<(usize, TileIndex)>,
        loaded: Vec<OnceLock<Sample>>,
    },
}

/// The ordered sample stream of one training run.
pub struct TrainingSet<'a> {
    inner: Inner<'a>,
}

impl TrainingSet<'_> {
    pub fn len(&self) -> usize {
        match &self.inner {
            Inner::Materialized(v) => v.len(),
            Inner::Tiled { index, .. } => index.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid-mode sources stay in memory once first touched.
    pub fn get(&self, i: usize) -> Result<Cow<'_, Sample>, TrainError> {
        match &self.inner {
            Inner::Materialized(v) => Ok(Cow::Borrowed(&v[i])),
            Inner::Tiled { source, grids, index, loaded } => {
                let (img, idx) = index[i];
                let full = match loaded[img].get() {
                    Some(s) => s,
                    None => {
                        let (image, mask) = load_checked(*source, img)?;
                        let _ = loaded[img].set(Sample { image, mask });
                        loaded[img].get().expect("just set")
                    }
                };
                let grid = &grids[img];
                Ok(Cow::Owned(Sample {
                    image: extract_tile(&full.image, grid, idx)?,
                    mask: extract_tile(&full.mask, grid, idx)?,
                }))
            }
        }
    }
}

fn load_checked(source: &dyn PairSource, i: usize) -> Result<(RgbRaster, BinaryMask), TrainError> {
    let (image, mask) = source.load(i)?;
    if image.dims() != mask.dims() {
        return Err(TrainError::MaskDims { name: source.name(i), image: image.dims(), mask: mask.dims() });
    }
    Ok((image, mask))
}

/// Downsample mode yields the 224×224 resize of each image and, with
/// augmentation on, its nine variants; grid mode yields every tile of
/// every image in row-major order.
pub fn build_training_set<'a>(
    source: &'a dyn PairSource,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<TrainingSet<'a>, TrainError> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let side = Dims { width: INPUT_SIDE, height: INPUT_SIDE };
    let inner = match cfg.mode {
        TrainMode::Downsample => {
            let per_image = (0..source.len())
                .into_par_iter()
                .map(|i| {
                    let (image, mask) = load_checked(source, i)?;
                    let image = resize_bilinear(&image, side);
                    let mask = resize_nearest(&mask, side);
                    if cfg.augment_enabled() {
                        Ok(augment_set(&image, &mask, augment)?
                            .into_iter()
                            .map(|(image, mask)| Sample { image, mask })
                            .collect())
                    } else {
                        Ok(vec![Sample { image, mask }])
                    }
                })
                .collect::<Result<Vec<Vec<Sample>>, TrainError>>()?;
            Inner::Materialized(per_image.into_iter().flatten().collect())
        }
        TrainMode::Grid => {
            let mut grids = Vec::with_capacity(source.len());
            let mut index = Vec::new();
            for i in 0..source.len() {
                let grid = plan_grid(source.dims(i)?, INPUT_SIDE)?;
                index.extend(grid.indices().map(|t| (i, t)));
                grids.push(grid);
            }
            let loaded = (0..source.len()).map(|_| OnceLock::new()).collect();
            Inner::Tiled { source, grids, index, loaded }
        }
    };
    Ok(TrainingSet { inner })
}

/// Planar float input in [0, 1], shape (n, 3, h, w).
pub fn to_input(images: &[&RgbRaster]) -> Tensor {
    let Some(first) = images.first() else {
        return Tensor::zeros([0, 3, 0, 0]);
    };
    let Dims { width, height } = first.dims();
    let hw = width as usize * height as usize;
    let mut data = vec![0.0f32; images.len() * 3 * hw];
    for (item, img) in data.chunks_mut(3 * hw).zip(images) {
        assert_eq!(img.dims(), first.dims(), "batch images must share dims");
        for (p, px) in img.pixels().iter().enumerate() {
            for c in 0..3 {
                item[c * hw + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec([images.len(), 3, height as usize, width as usize], data)
}
