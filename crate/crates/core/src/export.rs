//! 3×3 view grids for inspection: the original in the center with a colored
//! border and eight independent views around it. Spectral inputs are drawn
//! as signed difference maps instead.

use candle_core::{DType, Tensor};
use ndarray::{s, Array3};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::viewmaker::Viewmaker;

pub const BORDER: usize = 2;
/// Border of the center tile.
pub const CENTER_COLOR: [f32; 3] = [1.0, 0.412, 0.706];
pub const FRAME_COLOR: [f32; 3] = [0.5, 0.5, 0.5];
/// Difference magnitude mapped to full red (negative) or full blue (positive).
pub const DIFF_RANGE: f32 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStyle {
    /// Tiles show the inputs and views themselves (pixels in `[0, 1]`, 1 or 3 channels).
    Pixels,
    /// Center shows channel `channel` of the input (min-max scaled); other
    /// tiles show `view − input` of that channel on a red-white-blue scale.
    SignedDiff { channel: usize },
}

/// Red for negative, white at zero, blue for positive, saturating at ±`DIFF_RANGE`.
pub fn signed_color(v: f32) -> [f32; 3] {
    let t = (v / DIFF_RANGE).clamp(-1.0, 1.0);
    if t < 0.0 {
        [1.0, 1.0 + t, 1.0 + t]
    } else {
        [1.0 - t, 1.0 - t, 1.0]
    }
}

fn to_rgb(tile: &Array3<f32>) -> Result<Array3<f32>> {
    let (c, h, w) = tile.dim();
    match c {
        3 => Ok(tile.clone()),
        1 => Ok(Array3::from_shape_fn((3, h, w), |(_, y, x)| tile[[0, y, x]])),
        _ => Err(Error::shape("1 or 3 channels for a pixel grid", tile.dim())),
    }
}

fn gray(plane: &Array3<f32>, channel: usize) -> Array3<f32> {
    let p = plane.slice(s![channel, .., ..]);
    let (lo, hi) = p.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = p.dim();
    Array3::from_shape_fn((3, h, w), |(_, y, x)| (p[[y, x]] - lo) / span)
}

fn diff_map(view: &Array3<f32>, input: &Array3<f32>, channel: usize) -> Array3<f32> {
    let (_, h, w) = input.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| signed_color(view[[channel, y, x]] - input[[channel, y, x]])[c])
}

/// Places 9 RGB tiles (row-major, center = index 4) on a bordered 3×3 canvas.
pub fn assemble_grid(tiles: &[Array3<f32>]) -> Result<Array3<f32>> {
    if tiles.len() != 9 {
        return Err(Error::shape("9 tiles", tiles.len()));
    }
    let (_, h, w) = tiles[0].dim();
    let (th, tw) = (h + 2 * BORDER, w + 2 * BORDER);
    let mut grid = Array3::zeros((3, 3 * th, 3 * tw));
    for (i, tile) in tiles.iter().enumerate() {
        if tile.dim() != (3, h, w) {
            return Err(Error::shape((3, h, w), tile.dim()));
        }
        let (y0, x0) = ((i / 3) * th, (i % 3) * tw);
        let color = if i == 4 { CENTER_COLOR } else { FRAME_COLOR };
        for (c, &v) in color.iter().enumerate() {
            grid.slice_mut(s![c, y0..y0 + th, x0..x0 + tw]).fill(v);
        }
        grid.slice_mut(s![.., y0 + BORDER..y0 + BORDER + h, x0 + BORDER..x0 + BORDER + w]).assign(tile);
    }
    Ok(grid)
}

/// Interior of tile `i` of a grid built from `h×w` tiles.
pub fn grid_tile(grid: &Array3<f32>, i: usize, h: usize, w: usize) -> Array3<f32> {
    let (th, tw) = (h + 2 * BORDER, w + 2 * BORDER);
    let (y0, x0) = ((i / 3) * th + BORDER, (i % 3) * tw + BORDER);
    grid.slice(s![.., y0..y0 + h, x0..x0 + w]).to_owned()
}

fn host(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array3::from_shape_vec((c, h, w), v).expect("sizes match"))
}

/// Grid for one input `x` (`C×H×W`, in the viewmaker's input space).
pub fn view_grid(viewmaker: &Viewmaker, x: &Tensor, style: GridStyle, rng: &mut SeededRng) -> Result<Array3<f32>> {
    let batch = x.unsqueeze(0)?;
    let input = host(x)?;
    let mut tiles = Vec::with_capacity(9);
    for i in 0..9 {
        if i == 4 {
            tiles.push(match style {
                GridStyle::Pixels => to_rgb(&input)?,
                GridStyle::SignedDiff { channel } => gray(&input, channel),
            });
            continue;
        }
        let view = host(&viewmaker.generate_view(&batch, rng)?.view.squeeze(0)?)?;
        tiles.push(match style {
            GridStyle::Pixels => to_rgb(&view)?,
            GridStyle::SignedDiff { channel } => diff_map(&view, &input, channel),
        });
    }
    if let GridStyle::SignedDiff { channel } = style {
        if channel >= input.dim().0 {
            return Err(Error::IndexOutOfRange { index: channel, len: input.dim().0 });
        }
    }
    assemble_grid(&tiles)
}
