//! Non-overlapping tiling of full-resolution planes and the inverse stitch.
//!
//! Ragged right/bottom edges are reflect-padded on extraction and cropped away
//! on stitching, so `stitch(extract_all(x)) == x` for every size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Dims, Plane};

/// Network input edge length.
pub const TILE: u32 = 224;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("tile size must be at least 1")]
    ZeroTile,
    #[error("tile ({row}, {col}) is outside a {rows}x{cols} grid")]
    IndexOutOfGrid { row: u32, col: u32, rows: u32, cols: u32 },
    #[error("missing tile ({row}, {col})")]
    MissingTile { row: u32, col: u32 },
    #[error("tile ({row}, {col}) supplied more than once")]
    DuplicateTile { row: u32, col: u32 },
    #[error("tile ({row}, {col}) is {got}, expected {tile}x{tile}")]
    WrongTileDims { row: u32, col: u32, got: Dims, tile: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub source: Dims,
    pub tile: u32,
    pub rows: u32,
    pub cols: u32,
    pub pad_right: u32,
    pub pad_bottom: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileIndex {
    pub row: u32,
    pub col: u32,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major enumeration.
    pub fn indices(&self) -> impl Iterator<Item = TileIndex> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| TileIndex { row, col }))
    }

    fn check(&self, idx: TileIndex) -> Result<(), GridError> {
        if idx.row >= self.rows || idx.col >= self.cols {
            return Err(GridError::IndexOutOfGrid { row: idx.row, col: idx.col, rows: self.rows, cols: self.cols });
        }
        Ok(())
    }

    fn tile_dims(&self) -> Dims {
        Dims { width: self.tile, height: self.tile }
    }
}

pub fn plan_grid(dims: Dims, tile: u32) -> Result<TileGrid, GridError> {
    if tile == 0 {
        return Err(GridError::ZeroTile);
    }
    let cols = dims.width.div_ceil(tile);
    let rows = dims.height.div_ceil(tile);
    Ok(TileGrid {
        source: dims,
        tile,
        rows,
        cols,
        pad_right: cols * tile - dims.width,
        pad_bottom: rows * tile - dims.height,
    })
}

/// Mirror an out-of-range coordinate back into `0..n` without repeating the
/// edge sample (period `2n - 2`).
fn reflect(i: u32, n: u32) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

pub fn extract_tile<P: Plane>(plane: &P, grid: &TileGrid, idx: TileIndex) -> Result<P, GridError> {
    grid.check(idx)?;
    let Dims { width, height } = plane.dims();
    let x0 = idx.col * grid.tile;
    let y0 = idx.row * grid.tile;
    let tile = grid.tile;
    let mut px = Vec::with_capacity(tile as usize * tile as usize);
    let src = plane.pixels();
    for y in 0..tile {
        let sy = reflect(y0 + y, height) as usize * width as usize;
        if x0 + tile <= width {
            let start = sy + x0 as usize;
            px.extend_from_slice(&src[start..start + tile as usize]);
        } else {
            px.extend((0..tile).map(|x| src[sy + reflect(x0 + x, width) as usize]));
        }
    }
    Ok(P::from_pixels(grid.tile_dims(), px))
}

/// Every tile of the grid, in row-major order.
pub fn extract_all<P: Plane + Send + Sync>(plane: &P, grid: &TileGrid) -> Vec<(TileIndex, P)> {
    let idx: Vec<TileIndex> = grid.indices().collect();
    idx.into_par_iter().map(|i| (i, extract_tile(plane, grid, i).expect("index comes from the grid"))).collect()
}

/// Reassembles tiles in grid order and crops the padding away.
pub fn stitch<P: Plane>(tiles: &[(TileIndex, P)], grid: &TileGrid) -> Result<P, GridError> {
    let mut slots: Vec<Option<&P>> = vec![None; grid.len()];
    for (idx, t) in tiles {
        grid.check(*idx)?;
        if t.dims() != grid.tile_dims() {
            return Err(GridError::WrongTileDims { row: idx.row, col: idx.col, got: t.dims(), tile: grid.tile });
        }
        let slot = &mut slots[idx.row as usize * grid.cols as usize + idx.col as usize];
        if slot.is_some() {
            return Err(GridError::DuplicateTile { row: idx.row, col: idx.col });
        }
        *slot = Some(t);
    }
    if let Some(i) = slots.iter().position(Option::is_none) {
        return Err(GridError::MissingTile { row: i as u32 / grid.cols, col: i as u32 % grid.cols });
    }
    let Dims { width, height } = grid.source;
    let tile = grid.tile as usize;
    let mut px = Vec::with_capacity(grid.source.area());
    for y in 0..height as usize {
        let row = y / tile;
        let ty = y % tile;
        for col in 0..grid.cols as usize {
            let t = slots[row * grid.cols as usize + col].expect("checked above");
            let x0 = col * tile;
            let take = tile.min(width as usize - x0);
            px.extend_from_slice(&t.pixels()[ty * tile..ty * tile + take]);
        }
    }
    Ok(P::from_pixels(grid.source, px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{BinaryMask, MaskValue};
    use crate::raster::RgbRaster;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(w: u32, h: u32) -> Dims {
        Dims::new(w, h).unwrap()
    }

    fn coords_raster(w: u32, h: u32) -> RgbRaster {
        RgbRaster::from_fn(dims(w, h), |x, y| [(x % 256) as u8, (y % 256) as u8, ((x / 256) * 16 + y / 256) as u8])
    }

    #[test]
    fn canonical_scene_has_960_tiles() {
        let g = plan_grid(dims(7168, 6720), TILE).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (30, 32, 960));
        assert_eq!((g.pad_right, g.pad_bottom), (0, 0));
    }

    #[test]
    fn small_grids() {
        let g = plan_grid(dims(224, 224), 224).unwrap();
        assert_eq!(g.len(), 1);
        let g = plan_grid(dims(225, 224), 224).unwrap();
        // ceil(225 / 224) = 2 columns, 2*224 - 225 = 223
        assert_eq!((g.cols, g.rows, g.pad_right, g.pad_bottom), (2, 1, 223, 0));
        assert_eq!(plan_grid(dims(5, 5), 0).unwrap_err(), GridError::ZeroTile);
    }

    #[test]
    fn tile_covers_expected_window() {
        let r = coords_raster(900, 700);
        let g = plan_grid(r.dims(), 224).unwrap();
        let t = extract_tile(&r, &g, TileIndex { row: 1, col: 2 }).unwrap();
        assert_eq!(t.dims(), dims(224, 224));
        assert_eq!(t.get(0, 0), r.get(448, 224));
        assert_eq!(t.get(223, 223), r.get(671, 447));
        assert!(matches!(extract_tile(&r, &g, TileIndex { row: 4, col: 0 }), Err(GridError::IndexOutOfGrid { .. })));
    }

    #[test]
    fn single_pixel_reflects_everywhere() {
        let r = RgbRaster::new(1, 1, vec![[9, 8, 7]]).unwrap();
        let g = plan_grid(r.dims(), 2).unwrap();
        let t = extract_tile(&r, &g, TileIndex { row: 0, col: 0 }).unwrap();
        assert_eq!(t.pixels(), &[[9, 8, 7]; 4]);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let r = RgbRaster::from_fn(dims(3, 1), |x, _| [x as u8; 3]);
        let g = plan_grid(r.dims(), 8).unwrap();
        let t = extract_tile(&r, &g, TileIndex { row: 0, col: 0 }).unwrap();
        let row: Vec<u8> = (0..8).map(|x| t.get(x, 0)[0]).collect();
        assert_eq!(row, vec![0, 1, 2, 1, 0, 1, 2, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn divisible_tiles_partition_source() {
        let r = coords_raster(448, 672);
        let g = plan_grid(r.dims(), 224).unwrap();
        let tiles = extract_all(&r, &g);
        assert_eq!(tiles.len(), 6);
        let mut all: Vec<[u8; 3]> = tiles.iter().flat_map(|(_, t)| t.pixels().to_vec()).collect();
        let mut src = r.pixels().to_vec();
        all.sort_unstable();
        src.sort_unstable();
        assert_eq!(all, src);
        let order: Vec<TileIndex> = tiles.iter().map(|(i, _)| *i).collect();
        assert_eq!(order, g.indices().collect::<Vec<_>>());
    }

    #[test]
    fn stitch_errors() {
        let r = coords_raster(448, 448);
        let g = plan_grid(r.dims(), 224).unwrap();
        let mut tiles = extract_all(&r, &g);
        let last = tiles.pop().unwrap();
        assert_eq!(stitch(&tiles, &g).unwrap_err(), GridError::MissingTile { row: 1, col: 1 });
        tiles.push(tiles[0].clone());
        assert_eq!(stitch(&tiles, &g).unwrap_err(), GridError::DuplicateTile { row: 0, col: 0 });
        tiles.pop();
        tiles.push((last.0, RgbRaster::filled(dims(10, 10), [0; 3])));
        assert!(matches!(stitch(&tiles, &g), Err(GridError::WrongTileDims { .. })));
    }

    #[test]
    fn stitch_accepts_any_order_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = BinaryMask::from_fn(dims(300, 250), |_, _| {
            if rng.random_bool(0.5) {
                MaskValue::Target
            } else {
                MaskValue::Other
            }
        });
        let g = plan_grid(m.dims(), 128).unwrap();
        let mut tiles = extract_all(&m, &g);
        tiles.reverse();
        assert_eq!(stitch(&tiles, &g).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn stitch_inverts_extract(w in 1u32..300, h in 1u32..300, tile in 1u32..130, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = RgbRaster::from_fn(dims(w, h), |_, _| [rng.random(), rng.random(), rng.random()]);
            let g = plan_grid(r.dims(), tile).unwrap();
            prop_assert!(g.pad_right < tile && g.pad_bottom < tile);
            prop_assert_eq!(g.cols * tile - g.pad_right, w);
            let back = stitch(&extract_all(&r, &g), &g).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
