//! Group accuracies, spuriousness scores and correlation.
//!
//! Majority means agreeing label pairs (`y_main == y_concept`). Undefined
//! scores are `None` and serialize as an empty CSV field.

use nalgebra::DMatrix;

use crate::classifier::Predictor;
use crate::error::{invalid, Result};
use crate::latent::LatentDataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupAccuracies {
    pub all: f64,
    pub maj: Option<f64>,
    pub min: Option<f64>,
    pub n_maj: usize,
    pub n_min: usize,
}

/// Accuracy of `pred` against `target`, split by agreement with `other`.
pub fn group_accuracies_from(pred: &[i8], target: &[i8], other: &[i8]) -> GroupAccuracies {
    assert!(pred.len() == target.len() && target.len() == other.len());
    let (mut hit_maj, mut n_maj, mut hit_min, mut n_min) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        let hit = usize::from(pred[i] == target[i]);
        if target[i] == other[i] {
            n_maj += 1;
            hit_maj += hit;
        } else {
            n_min += 1;
            hit_min += hit;
        }
    }
    let frac = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    GroupAccuracies {
        all: frac(hit_maj + hit_min, n_maj + n_min).unwrap_or(f64::NAN),
        maj: frac(hit_maj, n_maj),
        min: frac(hit_min, n_min),
        n_maj,
        n_min,
    }
}

/// Main-task group accuracies of `clf` on `x` with the labels of `ds`.
pub fn group_accuracies<P: Predictor + ?Sized>(clf: &P, x: &DMatrix<f64>, ds: &LatentDataset) -> GroupAccuracies {
    group_accuracies_from(&clf.predict(x), &ds.y_main, &ds.y_concept)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpuriousnessResult {
    pub acc_min_f: Option<f64>,
    pub acc_min_clean: Option<f64>,
    pub psi: Option<f64>,
}

impl SpuriousnessResult {
    pub fn defined(&self) -> bool {
        self.psi.is_some()
    }
}

/// `|1 - acc_min(f) / acc_min(clean)|` from precomputed predictions.
pub fn spuriousness_from(pred_f: &[i8], pred_clean: &[i8], target: &[i8], other: &[i8]) -> SpuriousnessResult {
    let a = group_accuracies_from(pred_f, target, other).min;
    let c = group_accuracies_from(pred_clean, target, other).min;
    let psi = match (a, c) {
        (Some(a), Some(c)) if c > 0.0 => Some((1.0 - a / c).abs()),
        _ => None,
    };
    SpuriousnessResult {
        acc_min_f: a,
        acc_min_clean: c,
        psi,
    }
}

pub fn spuriousness_main<P, Q>(f: &P, x: &DMatrix<f64>, ds: &LatentDataset, clean: &Q) -> SpuriousnessResult
where
    P: Predictor + ?Sized,
    Q: Predictor + ?Sized,
{
    spuriousness_from(&f.predict(x), &clean.predict(x), &ds.y_main, &ds.y_concept)
}

pub fn spuriousness_probe<P, Q>(p: &P, x: &DMatrix<f64>, ds: &LatentDataset, clean: &Q) -> SpuriousnessResult
where
    P: Predictor + ?Sized,
    Q: Predictor + ?Sized,
{
    spuriousness_from(&p.predict(x), &clean.predict(x), &ds.y_concept, &ds.y_main)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return invalid("pearson inputs differ in length");
    }
    if xs.len() < 3 {
        return invalid("pearson needs at least 3 pairs");
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// `mean, sample sd` (sd is 0 for one value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// CSV cell for an optional metric.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
