//! Linear-programming checks: separability and best-direction witnesses.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

const SEP_EPS: f64 = 1e-9;

/// Solution of `max t  s.t.  y_i (w . x_i + b) >= t,  |w_j| <= 1,  t <= 1`.
#[derive(Clone, Debug)]
pub struct MarginLp {
    pub t: f64,
    pub w: DVector<f64>,
    pub b: f64,
}

pub fn max_min_margin(x: &DMatrix<f64>, y: &[i8], fit_bias: bool) -> Result<MarginLp> {
    if x.nrows() != y.len() {
        return invalid("row count and label count differ");
    }
    let (n, d) = x.shape();
    let scale = x.amax();
    let inv = if scale > 0.0 { 1.0 / scale } else { 1.0 };

    let mut p = Problem::new(OptimizationDirection::Maximize);
    let t = p.add_var(1.0, (f64::NEG_INFINITY, 1.0));
    let w: Vec<_> = (0..d).map(|_| p.add_var(0.0, (-1.0, 1.0))).collect();
    let b = fit_bias.then(|| p.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)));
    for i in 0..n {
        let yi = f64::from(y[i]);
        let mut terms: Vec<_> = (0..d)
            .filter(|&j| x[(i, j)] != 0.0)
            .map(|j| (w[j], yi * x[(i, j)] * inv))
            .collect();
        if let Some(b) = b {
            terms.push((b, yi));
        }
        terms.push((t, -1.0));
        p.add_constraint(terms.as_slice(), ComparisonOp::Ge, 0.0);
    }
    let sol = p.solve().map_err(|e| Error::Lp(e.to_string()))?;
    Ok(MarginLp {
        t: sol[t],
        w: DVector::from_iterator(d, w.iter().map(|&v| sol[v])),
        b: b.map(|b| sol[b] * scale).unwrap_or(0.0),
    })
}

/// True iff some `(w, b)` gives `y_i (w . x_i + b) > 0` for every row.
pub fn is_separable(x: &DMatrix<f64>, y: &[i8]) -> Result<bool> {
    Ok(max_min_margin(x, y, true)?.t > SEP_EPS)
}

/// Separability by a hyperplane through the origin.
pub fn is_separable_origin(x: &DMatrix<f64>, y: &[i8]) -> Result<bool> {
    Ok(max_min_margin(x, y, false)?.t > SEP_EPS)
}

/// Unit direction `e` maximizing `min_i y_i (e . x_i)`, when that minimum is positive.
pub fn separating_direction(x: &DMatrix<f64>, y: &[i8]) -> Result<Option<(DVector<f64>, f64)>> {
    let lp = max_min_margin(x, y, false)?;
    let nrm = lp.w.norm();
    if lp.t <= SEP_EPS || nrm == 0.0 {
        return Ok(None);
    }
    let e = lp.w / nrm;
    let m = (0..x.nrows())
        .map(|i| f64::from(y[i]) * x.row(i).dot(&e.transpose()))
        .fold(f64::INFINITY, f64::min);
    Ok((m > 0.0).then_some((e, m)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_is_not_separable() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 1., -1., -1., 1., -1., -1., 1.]);
        assert!(!is_separable(&x, &[1, 1, -1, -1]).unwrap());
    }

    #[test]
    fn single_class_is_separable() {
        let x = DMatrix::from_row_slice(3, 1, &[5.0, 6.0, 7.0]);
        assert!(is_separable(&x, &[1, 1, 1]).unwrap());
    }

    #[test]
    fn offset_data_needs_bias() {
        let x = DMatrix::from_row_slice(2, 1, &[2.0, 3.0]);
        assert!(is_separable(&x, &[-1, 1]).unwrap());
        assert!(!is_separable_origin(&x, &[-1, 1]).unwrap());
    }

    #[test]
    fn witness_direction_is_unit_and_positive() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, -1.5, 0.5, 3.0]);
        let (e, m) = separating_direction(&x, &[1, -1, 1]).unwrap().unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert!(m > 0.0);
    }

    #[test]
    fn antipodal_same_label_has_no_witness() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, -1.0]);
        assert!(separating_direction(&x, &[1, 1]).unwrap().is_none());
    }
}
