//! Gradient-guided sub-patch partition and selection.
//!
//! A placed patch square is split into an `n x n` grid, each cell is scored
//! by its average input-gradient magnitude, and the highest-scoring fraction
//! of cells forms the binary mask that the patch field is applied through.

use alloc::vec::Vec;

use rand::Rng;

use crate::config::{ScoreNorm, SelectionMode, TrainConfig};
use crate::error::{Error, Result};
use crate::placement::PatchPlacement;
use crate::tensor::{Image, Mask, PixelRect, CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub struct SubPatchGrid {
    pub placement: PatchPlacement,
    pub n: usize,
    /// The rasterized patch square.
    pub square: PixelRect,
    /// Row-major cells, `n * n` of them, tiling `square`.
    pub rects: Vec<PixelRect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubPatchMask {
    pub mask: Mask,
    /// Selected cell indices in ascending order.
    pub selected: Vec<usize>,
    pub grid: SubPatchGrid,
}

/// Splits `len` pixels into `n` near-equal segments; the remainder goes to the
/// leading segments. Returns `(offset, length)` pairs.
pub fn split_extent(len: usize, n: usize) -> Vec<(usize, usize)> {
    let base = len / n;
    let rem = len % n;
    let mut offset = 0;
    (0..n)
        .map(|i| {
            let l = base + usize::from(i < rem);
            let seg = (offset, l);
            offset += l;
            seg
        })
        .collect()
}

pub fn partition(
    placement: &PatchPlacement,
    n: usize,
    canvas: (usize, usize),
) -> Result<SubPatchGrid> {
    let square = placement.square(canvas.0, canvas.1);
    let side = square.width();
    if n == 0 || side < n {
        return Err(Error::PatchTooSmall { side, n });
    }
    let segs = split_extent(side, n);
    let mut rects = Vec::with_capacity(n * n);
    for &(oy, ly) in &segs {
        for &(ox, lx) in &segs {
            rects.push(PixelRect {
                x0: square.x0 + ox,
                y0: square.y0 + oy,
                x1: square.x0 + ox + lx,
                y1: square.y0 + oy + ly,
            });
        }
    }
    Ok(SubPatchGrid {
        placement: *placement,
        n,
        square,
        rects,
    })
}

/// Largest grid side not above `n` that leaves every cell at least one pixel.
pub fn fitting_grid_side(side_px: usize, n: usize) -> usize {
    n.min(side_px).max(1)
}

#[inline]
fn pixel_magnitude(grad: &Image, y: usize, x: usize, norm: ScoreNorm) -> f64 {
    match norm {
        ScoreNorm::MeanAbs => {
            (0..CHANNELS)
                .map(|c| f64::from(grad.get(c, y, x)).abs())
                .sum::<f64>()
                / CHANNELS as f64
        }
        ScoreNorm::L2 => libm::sqrt(
            (0..CHANNELS)
                .map(|c| {
                    let g = f64::from(grad.get(c, y, x));
                    g * g
                })
                .sum::<f64>(),
        ),
    }
}

/// Mean per-pixel gradient magnitude inside each cell of `grid`.
pub fn score_subpatches(grad: &Image, grid: &SubPatchGrid, norm: ScoreNorm) -> Result<Vec<f64>> {
    let sq = &grid.square;
    for c in 0..CHANNELS {
        for y in sq.y0..sq.y1 {
            for x in sq.x0..sq.x1 {
                if !grad.get(c, y, x).is_finite() {
                    return Err(Error::NonFiniteGradient);
                }
            }
        }
    }
    Ok(grid
        .rects
        .iter()
        .map(|r| {
            let mut sum = 0.0;
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    sum += pixel_magnitude(grad, y, x, norm);
                }
            }
            sum / r.area() as f64
        })
        .collect())
}

/// `round(ratio * cells)` with halves rounded up.
pub fn selection_count(ratio: f32, cells: usize) -> usize {
    let k = libm::floor(f64::from(ratio) * cells as f64 + 0.5) as usize;
    k.min(cells)
}

/// Indices of the `k` highest scores; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

pub fn build_mask<R: Rng + ?Sized>(
    grid: &SubPatchGrid,
    scores: &[f64],
    topk_ratio: f32,
    mode: SelectionMode,
    rng: &mut R,
    canvas: (usize, usize),
) -> SubPatchMask {
    debug_assert_eq!(scores.len(), grid.rects.len());
    let cells = grid.rects.len();
    let k = selection_count(topk_ratio, cells);
    let selected = match mode {
        SelectionMode::Gradient => top_k_indices(scores, k),
        SelectionMode::Random => {
            let mut idx = rand::seq::index::sample(rng, cells, k).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let mut mask = Mask::empty(canvas.0, canvas.1);
    for &i in &selected {
        mask.fill_rect(&grid.rects[i]);
    }
    SubPatchMask {
        mask,
        selected,
        grid: grid.clone(),
    }
}

/// Image-level mask: the OR of the masks of every attached placement.
///
/// Patches too small for the configured grid use the largest grid that fits.
pub fn image_mask<R: Rng + ?Sized>(
    grad: &Image,
    placements: &[PatchPlacement],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Mask> {
    let canvas = (grad.height(), grad.width());
    let mut out = Mask::empty(canvas.0, canvas.1);
    for p in placements.iter().filter(|p| p.attached) {
        let n = fitting_grid_side(p.side_px(canvas.0, canvas.1), cfg.grid_side());
        let grid = partition(p, n, canvas)?;
        let scores = score_subpatches(grad, &grid, cfg.score_norm)?;
        let m = build_mask(&grid, &scores, cfg.topk_ratio, cfg.selection_mode, rng, canvas);
        out.union_with(&m.mask);
    }
    Ok(out)
}
