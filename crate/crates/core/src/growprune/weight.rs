use crate::error::{Error, Result};
use crate::numkit::{ceil_count, select_k, Direction, MaskedLinear, Matrix};

pub(crate) fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::config(format!("{name} = {r} outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn check_gradient(layer: &MaskedLinear, g: &Matrix) -> Result<()> {
    if g.shape() != layer.weight().shape() {
        return Err(Error::Shape {
            op: "bridging_gradient",
            left: layer.weight().shape(),
            right: g.shape(),
        });
    }
    if !g.is_finite() {
        return Err(Error::non_finite("bridging gradient"));
    }
    Ok(())
}

/// Wakes the dormant entries among the top `⌈g_w·n⌉` of `|G|` over the whole
/// matrix (ties to the lower flat index). Each woken weight starts at
/// `−lr·G`, one descent step from zero. Returns the number activated.
pub fn weight_grow(layer: &mut MaskedLinear, g: &Matrix, g_w: f64, lr: f64) -> Result<usize> {
    check_ratio("g_w", g_w)?;
    check_gradient(layer, g)?;
    let mags: Vec<f64> = g.as_slice().iter().map(|v| v.abs()).collect();
    let k = ceil_count(g_w, mags.len());
    let cols = layer.in_dim();
    let mut grown = 0;
    for idx in select_k(&mags, k, Direction::Largest) {
        let (r, c) = (idx / cols, idx % cols);
        if !layer.mask().get(r, c) {
            layer.activate(r, c, -lr * g[(r, c)]);
            grown += 1;
        }
    }
    Ok(grown)
}

/// Deactivates the `⌈p_w·n_active⌉` active entries of smallest `|W|` (ties
/// to the lower flat index). Returns the number pruned.
pub fn weight_prune(layer: &mut MaskedLinear, p_w: f64) -> Result<usize> {
    check_ratio("p_w", p_w)?;
    let active: Vec<usize> = (0..layer.mask().as_slice().len())
        .filter(|&i| layer.mask().as_slice()[i])
        .collect();
    let mags: Vec<f64> = active
        .iter()
        .map(|&i| layer.weight().as_slice()[i].abs())
        .collect();
    let k = ceil_count(p_w, active.len());
    let cols = layer.in_dim();
    let chosen = select_k(&mags, k, Direction::Smallest);
    for &j in &chosen {
        let idx = active[j];
        layer.deactivate(idx / cols, idx % cols);
    }
    layer.apply_mask();
    Ok(chosen.len())
}

/// Whether a dead line is an output neuron (row) or an input (column).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Row,
    Col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct DeadLine {
    /// Position of the layer in the slice passed to [`neuron_sweep`].
    pub layer: usize,
    pub side: Side,
    pub index: usize,
}

/// Every row and column whose mask is entirely zero, layer by layer, rows
/// before columns, ascending.
pub fn neuron_sweep(layers: &[&MaskedLinear]) -> Vec<DeadLine> {
    let mut out = Vec::new();
    for (li, l) in layers.iter().enumerate() {
        for r in 0..l.out_dim() {
            if !l.mask().row_active(r) {
                out.push(DeadLine {
                    layer: li,
                    side: Side::Row,
                    index: r,
                });
            }
        }
        for c in 0..l.in_dim() {
            if !l.mask().col_active(c) {
                out.push(DeadLine {
                    layer: li,
                    side: Side::Col,
                    index: c,
                });
            }
        }
    }
    out
}
