//! Hard-margin and logistic linear classifiers, margins, margin points.
//!
//! The hard-margin trainer solves the SVM dual without a box constraint
//! (`C = inf`). Through the origin it runs cyclic dual coordinate descent; with
//! a bias it runs SMO on maximal violating pairs. Both stop on a relative
//! duality gap, then try a min-norm polish on the active set so margin points
//! sit at exactly 1 and inactive directions come out at rounding level.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{LinearClassifier, TrainMeta};
use crate::error::{invalid, Error, Result};
use crate::lp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    HardMargin,
    Logistic,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::HardMargin => "hard_margin",
            Mode::Logistic => "logistic",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub mode: Mode,
    /// Logistic step size in units of `1 / L`, `L` the gradient Lipschitz constant.
    pub step_size: f64,
    /// Sweeps (hard margin) or gradient steps (full-batch logistic).
    pub max_iters: usize,
    pub tol_kkt: f64,
    pub tau_margin: f64,
    pub seed: u64,
    pub fit_bias: bool,
    /// Mini-batch SGD for logistic mode; `None` means full batch.
    pub batch_size: Option<usize>,
    /// Epoch budget for mini-batch logistic training.
    pub epochs: usize,
    pub l2: f64,
    /// Logistic mode: second-order steps instead of gradient steps.
    pub newton: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            mode: Mode::HardMargin,
            max_iters: 200_000,
            step_size: 0.5,
            tol_kkt: 1e-8,
            tau_margin: 1e-6,
            seed: 0,
            fit_bias: true,
            batch_size: None,
            epochs: 10,
            l2: 0.0,
            newton: false,
        }
    }
}

impl TrainSettings {
    pub fn hard_margin() -> Self {
        Self::default()
    }

    pub fn logistic() -> Self {
        TrainSettings {
            mode: Mode::Logistic,
            max_iters: 2_000,
            step_size: 1.0,
            tol_kkt: 1e-6,
            ..Self::default()
        }
    }

    pub fn with_bias(mut self, fit_bias: bool) -> Self {
        self.fit_bias = fit_bias;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol_kkt > 0.0 && self.tau_margin > 0.0) {
            return invalid("tolerances must be positive");
        }
        if !(self.step_size > 0.0) || self.max_iters == 0 {
            return invalid("step size and iteration budget must be positive");
        }
        if self.batch_size == Some(0) {
            return invalid("batch size must be positive");
        }
        Ok(())
    }
}

/// How a fit ended.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Relative duality gap (hard margin) or gradient norm (logistic).
    pub residual: f64,
    pub polished: bool,
}

#[derive(Clone, Debug)]
pub struct MarginReport {
    pub functional_margins: Vec<f64>,
    pub min_margin: f64,
    pub geometric_margin: f64,
    pub margin_points: Vec<usize>,
}

fn check_xy(x: &DMatrix<f64>, y: &[i8]) -> Result<()> {
    if x.nrows() != y.len() {
        return invalid(format!("{} rows but {} labels", x.nrows(), y.len()));
    }
    if y.iter().any(|&v| v != 1 && v != -1) {
        return invalid("labels must be -1 or +1");
    }
    Ok(())
}

fn both_classes(y: &[i8]) -> Result<()> {
    if y.len() < 2 || !y.contains(&1) || !y.contains(&-1) {
        return invalid("need at least two points covering both classes");
    }
    Ok(())
}

pub fn is_separable(x: &DMatrix<f64>, y: &[i8]) -> Result<bool> {
    check_xy(x, y)?;
    lp::is_separable(x, y)
}

pub fn margins(clf: &LinearClassifier, x: &DMatrix<f64>, y: &[i8], tau_margin: f64) -> MarginReport {
    assert_eq!(x.ncols(), clf.dim(), "feature dimension mismatch");
    assert_eq!(x.nrows(), y.len(), "row/label mismatch");
    let fm: Vec<f64> = (0..x.nrows())
        .map(|i| f64::from(y[i]) * (x.row(i).transpose().dot(&clf.weights) + clf.bias))
        .collect();
    let min = fm.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = min + tau_margin * min.abs();
    let margin_points = (0..fm.len()).filter(|&i| fm[i] <= cut).collect();
    let nrm = clf.norm();
    MarginReport {
        geometric_margin: if nrm > 0.0 { min / nrm } else { 0.0 },
        min_margin: min,
        functional_margins: fm,
        margin_points,
    }
}

/// Best bias for fixed `w` and the resulting minimum functional margin.
fn best_bias(scores: &[f64], y: &[i8]) -> (f64, f64) {
    let mut pos_min = f64::INFINITY;
    let mut neg_max = f64::NEG_INFINITY;
    for (&s, &l) in scores.iter().zip(y) {
        if l > 0 {
            pos_min = pos_min.min(s);
        } else {
            neg_max = neg_max.max(s);
        }
    }
    (-(pos_min + neg_max) / 2.0, (pos_min - neg_max) / 2.0)
}

pub fn train_max_margin(
    x: &DMatrix<f64>,
    y: &[i8],
    settings: &TrainSettings,
) -> Result<(LinearClassifier, FitReport)> {
    check_xy(x, y)?;
    settings.validate()?;
    if settings.fit_bias {
        both_classes(y)?;
    } else if y.is_empty() {
        return invalid("empty training set");
    }
    let separable = if settings.fit_bias {
        lp::is_separable(x, y)?
    } else {
        lp::is_separable_origin(x, y)?
    };
    if !separable {
        return Err(Error::NotSeparable);
    }

    let rows: Vec<DVector<f64>> = (0..x.nrows()).map(|i| x.row(i).transpose()).collect();
    let (alpha, w_cd, mut report) = if settings.fit_bias {
        smo(&rows, y, settings)
    } else {
        dual_cd(&rows, y, settings)
    };
    let (w_cd, b_cd) = normalize(&w_cd, &rows, y, settings.fit_bias)?;
    let (w, b) = match polish(&alpha, &rows, y, settings.fit_bias) {
        Some((w, b)) if w.norm() <= (1.0 + 1e-9) * w_cd.norm() => {
            report.polished = true;
            (w, b)
        }
        _ => (w_cd, b_cd),
    };
    let mut clf = LinearClassifier::new(w, b);
    clf.meta = TrainMeta {
        mode: Mode::HardMargin.to_string(),
        tol: settings.tol_kkt,
        seed: settings.seed,
    };
    Ok((clf, report))
}

/// Rescale so the minimum functional margin is exactly one.
fn normalize(
    w: &DVector<f64>,
    rows: &[DVector<f64>],
    y: &[i8],
    fit_bias: bool,
) -> Result<(DVector<f64>, f64)> {
    let s: Vec<f64> = rows.iter().map(|r| r.dot(w)).collect();
    let (b, m) = if fit_bias {
        best_bias(&s, y)
    } else {
        let m = s
            .iter()
            .zip(y)
            .map(|(v, &l)| f64::from(l) * v)
            .fold(f64::INFINITY, f64::min);
        (0.0, m)
    };
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Numerical {
            epoch: 0,
            what: "dual solution does not separate the data".into(),
        });
    }
    Ok((w / m, b / m))
}

fn relative_gap(alpha: &[f64], w: &DVector<f64>, rows: &[DVector<f64>], y: &[i8], fit_bias: bool) -> f64 {
    let s: Vec<f64> = rows.iter().map(|r| r.dot(w)).collect();
    let m = if fit_bias {
        best_bias(&s, y).1
    } else {
        s.iter()
            .zip(y)
            .map(|(v, &l)| f64::from(l) * v)
            .fold(f64::INFINITY, f64::min)
    };
    if !(m > 0.0) {
        return f64::INFINITY;
    }
    let ww = w.norm_squared();
    let primal = 0.5 * ww / (m * m);
    let dual = alpha.iter().sum::<f64>() - 0.5 * ww;
    (primal - dual) / primal
}

fn dual_cd(rows: &[DVector<f64>], y: &[i8], s: &TrainSettings) -> (Vec<f64>, DVector<f64>, FitReport) {
    let n = rows.len();
    let d = rows[0].len();
    let q: Vec<f64> = rows.iter().map(|r| r.norm_squared()).collect();
    let mut alpha = vec![0.0; n];
    let mut w = DVector::zeros(d);
    let mut order: Vec<usize> = (0..n).filter(|&i| q[i] > 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut gap = f64::INFINITY;
    for sweep in 1..=s.max_iters {
        order.shuffle(&mut rng);
        for &i in &order {
            let yi = f64::from(y[i]);
            let g = yi * rows[i].dot(&w) - 1.0;
            let new = (alpha[i] - g / q[i]).max(0.0);
            let delta = new - alpha[i];
            if delta != 0.0 {
                w.axpy(delta * yi, &rows[i], 1.0);
                alpha[i] = new;
            }
        }
        gap = relative_gap(&alpha, &w, rows, y, false);
        if gap <= s.tol_kkt {
            return (alpha, w, report(sweep, true, gap));
        }
    }
    (alpha, w, report(s.max_iters, false, gap))
}

fn report(iterations: usize, converged: bool, residual: f64) -> FitReport {
    FitReport {
        iterations,
        converged,
        residual,
        polished: false,
    }
}

fn smo(rows: &[DVector<f64>], y: &[i8], s: &TrainSettings) -> (Vec<f64>, DVector<f64>, FitReport) {
    let n = rows.len();
    let d = rows[0].len();
    let mut alpha = vec![0.0; n];
    let mut w = DVector::zeros(d);
    // f_i = y_i w.x_i, kept in sync with w.
    let mut f = vec![0.0; n];
    let check_every = n.max(1);
    let budget = s.max_iters.saturating_mul(n.max(1));
    for it in 1..=budget {
        // -y_i grad_i = y_i - w.x_i
        let mut up = (f64::NEG_INFINITY, usize::MAX);
        let mut low = (f64::INFINITY, usize::MAX);
        for k in 0..n {
            let v = f64::from(y[k]) - f64::from(y[k]) * f[k];
            let in_up = y[k] > 0 || alpha[k] > 0.0;
            let in_low = y[k] < 0 || alpha[k] > 0.0;
            if in_up && v > up.0 {
                up = (v, k);
            }
            if in_low && v < low.0 {
                low = (v, k);
            }
        }
        let (i, j) = (up.1, low.1);
        if i == usize::MAX || j == usize::MAX || up.0 - low.0 <= 1e-15 {
            let gap = relative_gap(&alpha, &w, rows, y, true);
            return (alpha, w, report(it, gap <= s.tol_kkt, gap));
        }
        let diff = &rows[i] - &rows[j];
        let curv = diff.norm_squared();
        let mut t = if curv > 0.0 { (up.0 - low.0) / curv } else { f64::INFINITY };
        // alpha_i += y_i t, alpha_j -= y_j t, both kept nonnegative
        if y[i] < 0 {
            t = t.min(alpha[i]);
        }
        if y[j] > 0 {
            t = t.min(alpha[j]);
        }
        if !t.is_finite() {
            break;
        }
        alpha[i] = (alpha[i] + f64::from(y[i]) * t).max(0.0);
        alpha[j] = (alpha[j] - f64::from(y[j]) * t).max(0.0);
        w.axpy(t, &diff, 1.0);
        for k in 0..n {
            f[k] += f64::from(y[k]) * t * rows[k].dot(&diff);
        }
        if it % check_every == 0 {
            let gap = relative_gap(&alpha, &w, rows, y, true);
            if gap <= s.tol_kkt {
                return (alpha, w, report(it / check_every, true, gap));
            }
        }
    }
    let gap = relative_gap(&alpha, &w, rows, y, true);
    let conv = gap <= s.tol_kkt;
    (alpha, w, report(s.max_iters, conv, gap))
}

/// Min-norm `(w, b)` putting every active point exactly on the margin.
fn polish(alpha: &[f64], rows: &[DVector<f64>], y: &[i8], fit_bias: bool) -> Option<(DVector<f64>, f64)> {
    let amax = alpha.iter().copied().fold(0.0, f64::max);
    if amax <= 0.0 {
        return None;
    }
    let act: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 1e-10 * amax).collect();
    let k = act.len();
    let d = rows[0].len();
    let a = DMatrix::from_fn(k, d, |r, c| f64::from(y[act[r]]) * rows[act[r]][c]);
    let (w, b) = if fit_bias {
        let gram = &a * a.transpose();
        let mut sys = DMatrix::zeros(k + 1, k + 1);
        sys.view_mut((0, 0), (k, k)).copy_from(&gram);
        for r in 0..k {
            let yr = f64::from(y[act[r]]);
            sys[(r, k)] = yr;
            sys[(k, r)] = yr;
        }
        let mut rhs = DVector::from_element(k + 1, 1.0);
        rhs[k] = 0.0;
        let sol = sys.pseudo_inverse(1e-12).ok()? * rhs;
        let mu = sol.rows(0, k).into_owned();
        (a.transpose() * mu, sol[k])
    } else {
        let pinv = a.clone().pseudo_inverse(1e-12).ok()?;
        (pinv * DVector::from_element(k, 1.0), 0.0)
    };
    if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
        return None;
    }
    let min = rows
        .iter()
        .zip(y)
        .map(|(r, &l)| f64::from(l) * (r.dot(&w) + b))
        .fold(f64::INFINITY, f64::min);
    if min < 1.0 - 1e-9 {
        return None;
    }
    let (w, b) = (w / min, b / min);
    Some((w, b))
}

pub fn train_logistic(
    x: &DMatrix<f64>,
    y: &[i8],
    settings: &TrainSettings,
) -> Result<(LinearClassifier, FitReport)> {
    check_xy(x, y)?;
    settings.validate()?;
    both_classes(y)?;
    let (n, d) = x.shape();
    let yv = DVector::from_iterator(n, y.iter().map(|&v| f64::from(v)));
    let mut w = DVector::zeros(d);
    let mut b = 0.0;
    let lr = if settings.newton {
        0.0
    } else {
        settings.step_size / logistic_lipschitz(x, settings.fit_bias, settings.l2)
    };

    let full_grad = |w: &DVector<f64>, b: f64| -> (DVector<f64>, f64) {
        let mut s = x * w;
        s.add_scalar_mut(b);
        // d/ds log(1 + exp(-y s)) = -y sigma(-y s)
        let g = DVector::from_iterator(n, (0..n).map(|i| -yv[i] * crate::classifier::sigmoid(-yv[i] * s[i]) / n as f64));
        let mut gw = x.tr_mul(&g);
        if settings.l2 > 0.0 {
            gw.axpy(settings.l2, w, 1.0);
        }
        (gw, if settings.fit_bias { g.sum() } else { 0.0 })
    };

    let mut iters = 0;
    let mut gnorm;
    match settings.batch_size {
        None if settings.newton => {
            let loss = |w: &DVector<f64>, b: f64| -> f64 {
                let mut s = x * w;
                s.add_scalar_mut(b);
                let data: f64 = (0..n).map(|i| softplus(-yv[i] * s[i])).sum::<f64>() / n as f64;
                data + 0.5 * settings.l2 * w.norm_squared()
            };
            let p = d + usize::from(settings.fit_bias);
            loop {
                let (gw, gb) = full_grad(&w, b);
                gnorm = (gw.norm_squared() + gb * gb).sqrt();
                if gnorm <= settings.tol_kkt || iters >= settings.max_iters {
                    break;
                }
                let mut s = x * &w;
                s.add_scalar_mut(b);
                let mut h = DMatrix::zeros(p, p);
                let mut xa = DMatrix::zeros(n, p);
                xa.columns_mut(0, d).copy_from(x);
                if settings.fit_bias {
                    xa.column_mut(d).fill(1.0);
                }
                let wts = DVector::from_iterator(n, (0..n).map(|i| {
                    let q = crate::classifier::sigmoid(s[i]);
                    q * (1.0 - q) / n as f64
                }));
                for i in 0..n {
                    let r = xa.row(i);
                    h.ger(wts[i], &r.transpose(), &r.transpose(), 1.0);
                }
                for j in 0..d {
                    h[(j, j)] += settings.l2;
                }
                // keeps the system solvable when the data is separable
                for j in 0..p {
                    h[(j, j)] += 1e-12;
                }
                let mut g = DVector::zeros(p);
                g.rows_mut(0, d).copy_from(&gw);
                if settings.fit_bias {
                    g[d] = gb;
                }
                let step = match h.cholesky() {
                    Some(c) => c.solve(&g),
                    None => g.clone(),
                };
                let f0 = loss(&w, b);
                let slope = g.dot(&step);
                let mut t = settings.step_size.min(1.0);
                loop {
                    let wn = &w - t * step.rows(0, d);
                    let bn = if settings.fit_bias { b - t * step[d] } else { b };
                    if loss(&wn, bn) <= f0 - 1e-4 * t * slope || t < 1e-10 {
                        w = wn;
                        b = bn;
                        break;
                    }
                    t *= 0.5;
                }
                iters += 1;
            }
        }
        None => loop {
            let (gw, gb) = full_grad(&w, b);
            gnorm = (gw.norm_squared() + gb * gb).sqrt();
            if gnorm <= settings.tol_kkt || iters >= settings.max_iters {
                break;
            }
            w.axpy(-lr, &gw, 1.0);
            b -= lr * gb;
            iters += 1;
        },
        Some(bs) => {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..settings.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs) {
                    let mut gw = DVector::zeros(d);
                    let mut gb = 0.0;
                    for &i in chunk {
                        let xi = x.row(i).transpose();
                        let s = xi.dot(&w) + b;
                        let g = -yv[i] * crate::classifier::sigmoid(-yv[i] * s) / chunk.len() as f64;
                        gw.axpy(g, &xi, 1.0);
                        gb += g;
                    }
                    if settings.l2 > 0.0 {
                        gw.axpy(settings.l2, &w, 1.0);
                    }
                    w.axpy(-lr, &gw, 1.0);
                    if settings.fit_bias {
                        b -= lr * gb;
                    }
                    iters += 1;
                }
            }
            let (gw, gb) = full_grad(&w, b);
            gnorm = (gw.norm_squared() + gb * gb).sqrt();
        }
    }
    if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
        return Err(Error::Numerical {
            epoch: iters,
            what: "logistic weights diverged".into(),
        });
    }
    let mut clf = LinearClassifier::new(w, b);
    clf.meta = TrainMeta {
        mode: Mode::Logistic.to_string(),
        tol: settings.tol_kkt,
        seed: settings.seed,
    };
    Ok((clf, FitReport {
        iterations: iters,
        converged: gnorm <= settings.tol_kkt,
        residual: gnorm,
        polished: false,
    }))
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Upper estimate of the gradient Lipschitz constant of the mean logistic loss:
/// `lambda_max(X^T X / n) / 4 + l2`, bias column included when fitted.
pub fn logistic_lipschitz(x: &DMatrix<f64>, fit_bias: bool, l2: f64) -> f64 {
    let (n, d) = x.shape();
    let dim = d + usize::from(fit_bias);
    let mut v = DVector::from_element(dim, 1.0 / (dim as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..100 {
        let mut xv = x * v.rows(0, d);
        if fit_bias {
            xv.add_scalar_mut(v[d]);
        }
        let mut next = DVector::zeros(dim);
        next.rows_mut(0, d).copy_from(&x.tr_mul(&xv));
        if fit_bias {
            next[d] = xv.sum();
        }
        next /= n as f64;
        let nrm = next.norm();
        if nrm == 0.0 {
            break;
        }
        let done = (nrm - lam).abs() <= 1e-6 * nrm;
        lam = nrm;
        v = next / nrm;
        if done {
            break;
        }
    }
    // power iteration approaches from below; pad it
    (1.05 * lam / 4.0 + l2).max(1e-12)
}

/// Dispatch on `settings.mode`.
pub fn train(x: &DMatrix<f64>, y: &[i8], settings: &TrainSettings) -> Result<LinearClassifier> {
    Ok(match settings.mode {
        Mode::HardMargin => train_max_margin(x, y, settings)?.0,
        Mode::Logistic => train_logistic(x, y, settings)?.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Predictor;
    use rand::Rng;

    fn grid_oracle(x: &DMatrix<f64>, y: &[i8]) -> f64 {
        let eval = |th: f64| {
            let (c, s) = (th.cos(), th.sin());
            let sc: Vec<f64> = (0..x.nrows()).map(|i| c * x[(i, 0)] + s * x[(i, 1)]).collect();
            best_bias(&sc, y).1
        };
        let n = 10_000;
        let step = std::f64::consts::TAU / n as f64;
        let (mut best, mut th) = (f64::NEG_INFINITY, 0.0);
        for k in 0..n {
            let t = k as f64 * step;
            let v = eval(t);
            if v > best {
                best = v;
                th = t;
            }
        }
        for k in -1000..=1000 {
            best = best.max(eval(th + k as f64 * step / 1000.0));
        }
        best
    }

    #[test]
    fn symmetric_pair() {
        let x = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let (c, _) = train_max_margin(&x, &[-1, 1], &TrainSettings::hard_margin()).unwrap();
        assert!((c.weights[0] - 1.0).abs() < 1e-12);
        assert!(c.bias.abs() < 1e-12);
        let m = margins(&c, &x, &[-1, 1], 1e-6);
        assert!((m.geometric_margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_has_four_margin_points() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 1., 1., -1., -1., 1., -1., -1.]);
        let y = [1, 1, -1, -1];
        let (c, _) = train_max_margin(&x, &y, &TrainSettings::hard_margin()).unwrap();
        let m = margins(&c, &x, &y, 1e-6);
        assert_eq!(m.margin_points, vec![0, 1, 2, 3]);
        assert!((m.min_margin - 1.0).abs() < 1e-9);
    }

    #[test]
    fn margin_points_survive_rescaling() {
        let x = DMatrix::from_row_slice(3, 1, &[-2.0, 1.0, 3.0]);
        let y = [-1, 1, 1];
        let c = LinearClassifier::new(DVector::from_vec(vec![1.0]), 0.5);
        let a = margins(&c, &x, &y, 1e-6);
        let b = margins(&c.scaled(3.0), &x, &y, 1e-6);
        assert_eq!(a.margin_points, b.margin_points);
        for (u, v) in a.functional_margins.iter().zip(&b.functional_margins) {
            assert!((3.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn xor_is_rejected() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 1., -1., -1., 1., -1., -1., 1.]);
        let e = train_max_margin(&x, &[1, 1, -1, -1], &TrainSettings::hard_margin());
        assert!(matches!(e, Err(Error::NotSeparable)));
    }

    #[test]
    fn matches_grid_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut done = 0;
        while done < 15 {
            let n = rng.gen_range(4..40);
            let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let off: f64 = rng.gen_range(-1.0..1.0);
            let mut x = DMatrix::zeros(n, 2);
            let mut y = vec![0i8; n];
            for i in 0..n {
                let p = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                let s = dir.cos() * p[0] + dir.sin() * p[1] - off;
                if s.abs() < 0.05 {
                    continue;
                }
                x[(i, 0)] = p[0];
                x[(i, 1)] = p[1];
                y[i] = if s > 0.0 { 1 } else { -1 };
            }
            let keep: Vec<usize> = (0..n).filter(|&i| y[i] != 0).collect();
            let x = x.select_rows(&keep);
            let y: Vec<i8> = keep.iter().map(|&i| y[i]).collect();
            if !(y.contains(&1) && y.contains(&-1)) {
                continue;
            }
            let (c, rep) = train_max_margin(&x, &y, &TrainSettings::hard_margin()).unwrap();
            assert!(rep.converged);
            let got = margins(&c, &x, &y, 1e-6).geometric_margin;
            let want = grid_oracle(&x, &y);
            assert!((got - want).abs() <= 0.01 * want, "{got} vs {want}");
            done += 1;
        }
    }

    #[test]
    fn origin_solver_certificate() {
        let x = DMatrix::from_row_slice(4, 2, &[2.0, 1.0, 1.0, 3.0, -1.0, -2.0, -3.0, 0.5]);
        let y = [1, 1, -1, -1];
        let s = TrainSettings::hard_margin().with_bias(false);
        let (c, rep) = train_max_margin(&x, &y, &s).unwrap();
        assert!(rep.converged);
        assert_eq!(c.bias, 0.0);
        let m = margins(&c, &x, &y, 1e-6);
        assert!((m.min_margin - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_under_seed() {
        let x = DMatrix::from_row_slice(5, 2, &[2., 1., 1., 3., -1., -2., -3., 0.5, 0.5, 2.5]);
        let y = [1, 1, -1, -1, 1];
        let s = TrainSettings::hard_margin().with_seed(3);
        let a = train_max_margin(&x, &y, &s).unwrap().0;
        let b = train_max_margin(&x, &y, &s).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn logistic_direction_tracks_max_margin() {
        let x = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let y = [-1, 1];
        let s = TrainSettings {
            max_iters: 20_000,
            ..TrainSettings::logistic()
        };
        let (c, _) = train_logistic(&x, &y, &s).unwrap();
        assert!(c.weights[0] > 0.0);
        assert!(c.bias.abs() < 1e-9);
        assert_eq!(c.predict(&x), vec![-1, 1]);
    }
}
