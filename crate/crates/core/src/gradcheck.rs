//! Central finite differences, used to check analytic gradients.

use ndarray::Array2;

use crate::params::{ParamId, ParamStore};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences cannot resolve relative error below it.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

/// Central-difference gradient with respect to one stored parameter.
pub fn numeric_param_gradient(
    store: &mut ParamStore,
    id: ParamId,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Array2<f64> {
    let dim = store.value(id).dim();
    let mut out = Array2::zeros(dim);
    for r in 0..dim.0 {
        for c in 0..dim.1 {
            let orig = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = orig + h;
            let up = f(store);
            store.value_mut(id)[[r, c]] = orig - h;
            let down = f(store);
            store.value_mut(id)[[r, c]] = orig;
            out[[r, c]] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Largest elementwise `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}
