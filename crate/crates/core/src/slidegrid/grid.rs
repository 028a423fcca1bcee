use serde::{Deserialize, Serialize};

use super::{TissueMask, PATCH_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub row: u32,
    pub col: u32,
}

/// Side of one extraction cell measured in mask cells.
fn footprint(mask: &TissueMask, target_mag: f64) -> f64 {
    f64::from(PATCH_SIZE) * mask.scale_magnification / target_mag
}

/// `(rows, cols)` of the extraction grid covering the whole mask.
pub fn grid_shape(mask: &TissueMask, target_mag: f64) -> (u32, u32) {
    let fp = footprint(mask, target_mag);
    (
        (mask.grid.height as f64 / fp).ceil() as u32,
        (mask.grid.width as f64 / fp).ceil() as u32,
    )
}

/// Cells of the `target_mag` patch grid whose in-bounds tissue fraction
/// (mean of the mask over the cell footprint) reaches `min_fraction`, in
/// row-major order.
pub fn grid_candidates(mask: &TissueMask, target_mag: f64, min_fraction: f64) -> Vec<GridCell> {
    let g = &mask.grid;
    if g.width == 0 || g.height == 0 || !(target_mag > 0.0) {
        return Vec::new();
    }
    let fp = footprint(mask, target_mag);
    let (rows, cols) = grid_shape(mask, target_mag);
    let sat = g.integral();
    let stride = g.width + 1;
    let bound = |i: u32, limit: usize| ((f64::from(i) * fp).floor() as usize).min(limit);

    let mut out = Vec::new();
    for row in 0..rows {
        let (y0, y1) = (bound(row, g.height), bound(row + 1, g.height));
        for col in 0..cols {
            let (x0, x1) = (bound(col, g.width), bound(col + 1, g.width));
            let area = (y1 - y0) * (x1 - x0);
            if area == 0 {
                continue;
            }
            let tissue = sat[y1 * stride + x1] + sat[y0 * stride + x0]
                - sat[y0 * stride + x1]
                - sat[y1 * stride + x0];
            if tissue as f64 / area as f64 >= min_fraction {
                out.push(GridCell { row, col });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::BinaryGrid;
    use super::*;

    fn mask(grid: BinaryGrid) -> TissueMask {
        TissueMask {
            grid,
            scale_magnification: 5.0,
        }
    }

    /// Direct per-cell count, independent of the summed-area table.
    fn brute_fraction(m: &TissueMask, mag: f64, row: u32, col: u32) -> f64 {
        let fp = 896.0 * 5.0 / mag;
        let (mut t, mut n) = (0usize, 0usize);
        for y in 0..m.grid.height {
            for x in 0..m.grid.width {
                if (y as f64 / fp).floor() as u32 == row && (x as f64 / fp).floor() as u32 == col {
                    n += 1;
                    t += usize::from(m.grid.get(x, y));
                }
            }
        }
        t as f64 / n as f64
    }

    #[test]
    fn full_mask_selects_every_cell() {
        let m = mask(BinaryGrid::from_fn(1000, 500, |_, _| true));
        let cells = grid_candidates(&m, 20.0, 0.1);
        assert_eq!(grid_shape(&m, 20.0), (3, 5));
        assert_eq!(cells.len(), 15);
        assert!(cells.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_mask_selects_nothing() {
        let m = mask(BinaryGrid::new(300, 300));
        assert!(grid_candidates(&m, 10.0, 0.1).is_empty());
    }

    #[test]
    fn blob_on_one_footprint() {
        // At 20x one patch covers 224 mask cells; blob fills cell (1, 2) exactly.
        let m = mask(BinaryGrid::from_fn(1000, 1000, |x, y| {
            (448..672).contains(&x) && (224..448).contains(&y)
        }));
        let cells = grid_candidates(&m, 20.0, 0.1);
        assert_eq!(cells, vec![GridCell { row: 1, col: 2 }]);
        let (rows, cols) = grid_shape(&m, 20.0);
        for r in 0..rows {
            for c in 0..cols {
                let f = brute_fraction(&m, 20.0, r, c);
                assert_eq!(f >= 0.1, cells.contains(&GridCell { row: r, col: c }), "cell {r},{c}");
            }
        }
    }

    #[test]
    fn threshold_matches_brute_force_on_edge_cells() {
        let m = mask(BinaryGrid::from_fn(500, 300, |x, y| (x * 7 + y * 13) % 9 == 0 || x > 430));
        for mag in [5.0, 10.0, 20.0] {
            let cells = grid_candidates(&m, mag, 0.15);
            let (rows, cols) = grid_shape(&m, mag);
            for r in 0..rows {
                for c in 0..cols {
                    let f = brute_fraction(&m, mag, r, c);
                    assert_eq!(f >= 0.15, cells.contains(&GridCell { row: r, col: c }));
                }
            }
        }
    }
}
