use serde::{Deserialize, Serialize};

use super::weight::{check_gradient, check_ratio};
use crate::error::{Error, Result};
use crate::numkit::{ceil_count, select_k, Direction, MaskedLinear, Matrix};

/// Rows and columns of a layer that hold at least one active entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSets {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl ActiveSets {
    pub fn of(layer: &MaskedLinear) -> Self {
        Self {
            rows: layer.mask().active_rows(),
            cols: layer.mask().active_cols(),
        }
    }
}

/// Outcome of a structural growth step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grown {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Requested units that had no dormant candidate left.
    pub row_shortfall: usize,
    pub col_shortfall: usize,
}

/// Picks `⌈ratio·n_active⌉` of `candidates` with the smallest `score`,
/// refusing to take them all.
pub(crate) fn pick_prune(candidates: &[usize], score: impl Fn(usize) -> f64, ratio: f64, what: &str) -> Result<Vec<usize>> {
    let k = ceil_count(ratio, candidates.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    if k >= candidates.len() {
        return Err(Error::Degenerate(format!(
            "pruning {k} of {} active {what} would empty the layer",
            candidates.len()
        )));
    }
    let scores: Vec<f64> = candidates.iter().map(|&u| score(u)).collect();
    let mut out: Vec<usize> = select_k(&scores, k, Direction::Smallest)
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Row/column pruning: removes the `⌈p_r·|set_r|⌉` active rows with the
/// smallest `Σ|W|` and the `⌈p_c·|set_c|⌉` active columns with the smallest
/// `Σ|W|`, both ranked on the weights before either removal.
pub fn rc_prune(layer: &mut MaskedLinear, p_r: f64, p_c: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_ratio("p_r", p_r)?;
    check_ratio("p_c", p_c)?;
    let sets = ActiveSets::of(layer);
    let w = layer.weight();
    let rows = pick_prune(&sets.rows, |r| w.sum_abs_row(r), p_r, "rows")?;
    let cols = pick_prune(&sets.cols, |c| w.sum_abs_col(c), p_c, "columns")?;
    for &r in &rows {
        layer.deactivate_row(r);
    }
    for &c in &cols {
        layer.deactivate_col(c);
    }
    layer.apply_mask();
    Ok((rows, cols))
}

/// Picks up to `k` dormant candidates with the largest `score`.
pub(crate) fn pick_grow(dormant: &[usize], score: impl Fn(usize) -> f64, k: usize) -> (Vec<usize>, usize) {
    let take = k.min(dormant.len());
    let scores: Vec<f64> = dormant.iter().map(|&u| score(u)).collect();
    let mut out: Vec<usize> = select_k(&scores, take, Direction::Largest)
        .into_iter()
        .map(|j| dormant[j])
        .collect();
    out.sort_unstable();
    (out, k - take)
}

/// Row/column growth. Gradient entries inside the active block are ignored;
/// dormant rows are ranked by `Σ|G|` over active columns and dormant columns
/// by `Σ|G|` over active rows. The top `⌈g_r·M⌉` rows are woken across the
/// previously active columns and the top `⌈g_c·N⌉` columns across the
/// previously active rows, each weight starting at `−lr·G`.
pub fn rc_grow(layer: &mut MaskedLinear, g: &Matrix, g_r: f64, g_c: f64, lr: f64) -> Result<Grown> {
    check_ratio("g_r", g_r)?;
    check_ratio("g_c", g_c)?;
    let k_r = ceil_count(g_r, layer.out_dim());
    let k_c = ceil_count(g_c, layer.in_dim());
    rc_grow_counts(layer, g, k_r, k_c, lr)
}

/// [`rc_grow`] with explicit unit counts.
pub fn rc_grow_counts(layer: &mut MaskedLinear, g: &Matrix, k_r: usize, k_c: usize, lr: f64) -> Result<Grown> {
    check_gradient(layer, g)?;
    let sets = ActiveSets::of(layer);
    let dormant_rows: Vec<usize> = (0..layer.out_dim()).filter(|r| sets.rows.binary_search(r).is_err()).collect();
    let dormant_cols: Vec<usize> = (0..layer.in_dim()).filter(|c| sets.cols.binary_search(c).is_err()).collect();
    let (rows, row_shortfall) = pick_grow(
        &dormant_rows,
        |r| sets.cols.iter().map(|&c| g[(r, c)].abs()).sum(),
        k_r,
    );
    let (cols, col_shortfall) = pick_grow(
        &dormant_cols,
        |c| sets.rows.iter().map(|&r| g[(r, c)].abs()).sum(),
        k_c,
    );
    for &r in &rows {
        for &c in &sets.cols {
            layer.activate(r, c, -lr * g[(r, c)]);
        }
    }
    for &c in &cols {
        for &r in &sets.rows {
            layer.activate(r, c, -lr * g[(r, c)]);
        }
    }
    Ok(Grown {
        rows,
        cols,
        row_shortfall,
        col_shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Mask;

    #[test]
    fn zero_ratios_change_nothing() {
        let mut l = MaskedLinear::from_parts(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), Mask::ones(2, 2), vec![0.5, 0.5]).unwrap();
        let before = l.clone();
        assert_eq!(rc_prune(&mut l, 0.0, 0.0).unwrap(), (vec![], vec![]));
        assert_eq!(l, before);
    }

    #[test]
    fn prunes_lighter_row() {
        let mut l = MaskedLinear::from_parts(Matrix::from_rows(&[vec![1.0, 1.0], vec![10.0, 10.0]]).unwrap(), Mask::ones(2, 2), vec![0.5, 0.5]).unwrap();
        assert_eq!(rc_prune(&mut l, 0.5, 0.0).unwrap(), (vec![0], vec![]));
        assert_eq!(l.weight().as_slice(), &[0.0, 0.0, 10.0, 10.0]);
        assert_eq!(l.bias(), &[0.0, 0.5]);
    }

    #[test]
    fn refuses_to_prune_every_row() {
        let mut l = MaskedLinear::from_parts(Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(), Mask::ones(2, 1), vec![0.0; 2]).unwrap();
        assert!(matches!(rc_prune(&mut l, 1.0, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn grows_heaviest_dormant_row() {
        let mut mask = Mask::ones(4, 4);
        for c in 0..4 {
            mask.set(1, c, false);
            mask.set(3, c, false);
        }
        let mut l = MaskedLinear::from_parts(Matrix::zeros(4, 4), mask, vec![0.0; 4]).unwrap();
        let mut g = Matrix::zeros(4, 4);
        g.row_mut(1).copy_from_slice(&[2.0, -1.0, 1.0, 1.0]);
        g.row_mut(3).copy_from_slice(&[0.25, 0.25, -0.25, 0.25]);
        g[(0, 0)] = 100.0; // inside the active block: ignored
        let out = rc_grow(&mut l, &g, 0.25, 0.0, 0.1).unwrap();
        assert_eq!(out.rows, vec![1]);
        assert!(l.mask().row_active(1) && !l.mask().row_active(3));
        assert_eq!(l.weight()[(1, 0)], -0.2);
        assert_eq!(l.weight()[(0, 0)], 0.0);
    }

    #[test]
    fn full_layer_has_nothing_to_grow() {
        let mut l = MaskedLinear::new(2, 2);
        let g = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = rc_grow(&mut l, &g, 1.0, 1.0, 0.1).unwrap();
        assert!(out.rows.is_empty() && out.cols.is_empty());
        assert_eq!((out.row_shortfall, out.col_shortfall), (2, 2));
    }
}
