use crate::grid::{extract_all, plan_grid, stitch};
use crate::labels::BinaryMask;
use crate::net::{argmax_mask, Fcn8Model};
use crate::raster::{resize_bilinear, resize_nearest, Dims, Plane, RgbRaster};

use super::dataset::to_input;
use super::{TrainError, TrainMode, INPUT_SIDE};

fn side() -> Dims {
    Dims { width: INPUT_SIDE, height: INPUT_SIDE }
}

fn forward_masks(model: &Fcn8Model, tiles: &[&RgbRaster]) -> Result<Vec<BinaryMask>, TrainError> {
    let logits = model.forward(&to_input(tiles))?;
    Ok((0..tiles.len()).map(|i| BinaryMask::from_pixels(tiles[i].dims(), argmax_mask(&logits, i))).collect())
}

/// Tiles the raster, classifies every tile, and stitches the tile masks
/// back to the input dims.
pub fn predict_grid(model: &Fcn8Model, raster: &RgbRaster, batch_size: usize) -> Result<BinaryMask, TrainError> {
    let grid = plan_grid(raster.dims(), INPUT_SIDE)?;
    let tiles = extract_all(raster, &grid);
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let imgs: Vec<&RgbRaster> = chunk.iter().map(|(_, t)| t).collect();
        let masks = forward_masks(model, &imgs)?;
        out.extend(chunk.iter().map(|(i, _)| *i).zip(masks));
    }
    Ok(stitch(&out, &grid)?)
}

/// Classifies a 224×224 resize of the raster and scales the label mask
/// back up with nearest-neighbour sampling.
pub fn predict_downsampled(model: &Fcn8Model, raster: &RgbRaster) -> Result<BinaryMask, TrainError> {
    let small = resize_bilinear(raster, side());
    let mask = forward_masks(model, &[&small])?.pop().expect("one item");
    Ok(resize_nearest(&mask, raster.dims()))
}

pub fn predict(
    model: &Fcn8Model,
    raster: &RgbRaster,
    mode: TrainMode,
    batch_size: usize,
) -> Result<BinaryMask, TrainError> {
    match mode {
        TrainMode::Grid => predict_grid(model, raster, batch_size),
        TrainMode::Downsample => predict_downsampled(model, raster),
    }
}
