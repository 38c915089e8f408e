//! Max-margin feature-use conditions: assumption checks, the perturbed
//! spurious-using classifier and its alpha bounds, and the 1-D iff check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::classifier::{FeatureSet, LinearClassifier};
use crate::error::{invalid, Error, Result};
use crate::latent::{compute_kappa, LatentDataset};
use crate::lp;
use crate::maxmargin::{self, margins, TrainSettings};

/// Relative cutoff on the spurious-block weight norm.
pub const TAU_SPUR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Predict `y_concept`; `z_p` is invariant, `z_m` spurious.
    Probe,
    /// Predict `y_main`; `z_m` is invariant, `z_p` spurious.
    Main,
}

impl TaskKind {
    pub fn labels<'a>(&self, ds: &'a LatentDataset) -> &'a [i8] {
        match self {
            TaskKind::Probe => &ds.y_concept,
            TaskKind::Main => &ds.y_main,
        }
    }

    pub fn invariant(&self, ds: &LatentDataset) -> Range<usize> {
        match self {
            TaskKind::Probe => ds.d_m..ds.dim(),
            TaskKind::Main => 0..ds.d_m,
        }
    }

    pub fn spurious(&self, ds: &LatentDataset) -> Range<usize> {
        match self {
            TaskKind::Probe => 0..ds.d_m,
            TaskKind::Main => ds.d_m..ds.dim(),
        }
    }

    fn feature_set(&self) -> FeatureSet {
        match self {
            TaskKind::Probe => FeatureSet::ConceptOnly,
            TaskKind::Main => FeatureSet::MainOnly,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Probe => "probe",
            TaskKind::Main => "main",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(TaskKind::Probe),
            "main" => Ok(TaskKind::Main),
            other => invalid(format!("unknown task '{other}' (expected probe or main)")),
        }
    }
}

fn columns(x: &DMatrix<f64>, r: &Range<usize>) -> DMatrix<f64> {
    x.columns(r.start, r.len()).into_owned()
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    x.select_rows(idx.iter())
}

fn hard_margin_for(ds: &LatentDataset) -> TrainSettings {
    TrainSettings::hard_margin().with_bias(!ds.zero_centered)
}

#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub task: TaskKind,
    /// The invariant block alone separates the task labels.
    pub a32: bool,
    /// Spurious block separates the task labels on the invariant classifier's
    /// margin points. `None` when there is no spurious block or `a32` fails.
    pub a33: Option<bool>,
    /// Purely-invariant max-margin classifier, lifted to the full space.
    pub invariant: Option<LinearClassifier>,
    pub margin_points: Vec<usize>,
    /// Unit witness direction in the spurious block when `a33` holds.
    pub witness: Option<DVector<f64>>,
    pub witness_margin: f64,
}

impl AssumptionReport {
    pub fn holds(&self) -> bool {
        self.a32 && self.a33 == Some(true)
    }
}

pub fn check_assumptions(ds: &LatentDataset, task: TaskKind) -> Result<AssumptionReport> {
    ds.validate()?;
    let y = task.labels(ds);
    let inv = task.invariant(ds);
    let sp = task.spurious(ds);
    let mut rep = AssumptionReport {
        task,
        a32: false,
        a33: None,
        invariant: None,
        margin_points: Vec::new(),
        witness: None,
        witness_margin: 0.0,
    };
    if inv.is_empty() {
        return Ok(rep);
    }
    let z_inv = columns(&ds.points, &inv);
    let settings = hard_margin_for(ds);
    rep.a32 = if settings.fit_bias {
        lp::is_separable(&z_inv, y)?
    } else {
        lp::is_separable_origin(&z_inv, y)?
    };
    if !rep.a32 {
        return Ok(rep);
    }
    let (clf, _) = maxmargin::train_max_margin(&z_inv, y, &settings)?;
    let mut clf = clf.embedded(ds.dim(), inv.start)?;
    clf.trained_on = task.feature_set();
    let mr = margins(&clf, &ds.points, y, settings.tau_margin);
    rep.margin_points = mr.margin_points;
    rep.invariant = Some(clf);
    if sp.is_empty() {
        return Ok(rep);
    }
    let z_sp = rows(&columns(&ds.points, &sp), &rep.margin_points);
    let y_mp: Vec<i8> = rep.margin_points.iter().map(|&i| y[i]).collect();
    match lp::separating_direction(&z_sp, &y_mp)? {
        Some((e, m)) => {
            rep.a33 = Some(true);
            rep.witness = Some(e);
            rep.witness_margin = m;
        }
        None => rep.a33 = Some(false),
    }
    Ok(rep)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlphaBounds {
    pub lb_margin_pos: f64,
    pub lb_margin_neg: f64,
    /// `1 / min` non-margin functional margin, worst class.
    pub lb_nonmargin_gamma: f64,
    /// Smallest alpha that keeps every non-margin point above margin 1.
    pub lb_nonmargin_eta: f64,
    pub lb_overall: f64,
}

#[derive(Clone, Debug)]
pub struct PerturbedClassifier {
    pub base: LinearClassifier,
    pub eps_sp: DVector<f64>,
    pub alpha: f64,
    pub combined: LinearClassifier,
    inv: Range<usize>,
    sp: Range<usize>,
}

impl PerturbedClassifier {
    /// The same construction at another `alpha`.
    pub fn at(&self, alpha: f64) -> Result<PerturbedClassifier> {
        perturb(&self.base, &self.eps_sp, alpha, self.inv.clone(), self.sp.clone())
    }
}

fn perturb(
    base: &LinearClassifier,
    eps: &DVector<f64>,
    alpha: f64,
    inv: Range<usize>,
    sp: Range<usize>,
) -> Result<PerturbedClassifier> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha {alpha} outside [0, 1]"));
    }
    let combined = if alpha == 1.0 {
        base.clone()
    } else {
        let mut w = base.weights.clone() * alpha;
        let spw = eps * (base.norm() * (1.0 - alpha * alpha).sqrt());
        w.rows_mut(sp.start, sp.len()).copy_from(&spw);
        let mut c = LinearClassifier::new(w, base.bias * alpha);
        c.meta = base.meta.clone();
        c
    };
    Ok(PerturbedClassifier {
        base: base.clone(),
        eps_sp: eps.clone(),
        alpha,
        combined,
        inv,
        sp,
    })
}

/// Perturb a purely-invariant max-margin classifier toward `eps_sp` and
/// return the alpha bounds with the classifier at the midpoint of `(lb, 1)`.
pub fn construct_perturbed(
    base: &LinearClassifier,
    ds: &LatentDataset,
    task: TaskKind,
    eps_sp: &DVector<f64>,
) -> Result<(AlphaBounds, PerturbedClassifier)> {
    ds.validate()?;
    let inv = task.invariant(ds);
    let sp = task.spurious(ds);
    if base.dim() != ds.dim() {
        return invalid("base classifier dimension differs from the dataset");
    }
    if sp.is_empty() {
        return Err(Error::Assumption("no spurious block to perturb toward".into()));
    }
    if eps_sp.len() != sp.len() {
        return invalid("witness direction does not match the spurious block");
    }
    let enrm = eps_sp.norm();
    if !((enrm - 1.0).abs() < 1e-9) {
        return Err(Error::Assumption(format!("witness direction has norm {enrm}, need a unit vector")));
    }
    let nrm = base.norm();
    if nrm == 0.0 {
        return Err(Error::Assumption("base classifier has zero weights".into()));
    }
    if base.weights.rows(sp.start, sp.len()).norm() > TAU_SPUR * nrm {
        return Err(Error::Assumption("base classifier uses the spurious block".into()));
    }
    let y = task.labels(ds);
    let tau = TrainSettings::hard_margin().tau_margin;
    let mr = margins(base, &ds.points, y, tau);
    if (mr.min_margin - 1.0).abs() > 1e-6 {
        return Err(Error::Assumption(format!(
            "base minimum functional margin is {}, need 1",
            mr.min_margin
        )));
    }
    let is_margin: Vec<bool> = {
        let mut v = vec![false; ds.n()];
        for &i in &mr.margin_points {
            v[i] = true;
        }
        v
    };
    let delta: Vec<f64> = (0..ds.n())
        .map(|i| f64::from(y[i]) * ds.points.row(i).columns(sp.start, sp.len()).transpose().dot(eps_sp))
        .collect();

    let mut b = AlphaBounds::default();
    let w2 = nrm * nrm;
    for i in 0..ds.n() {
        if !is_margin[i] {
            continue;
        }
        let beta = delta[i];
        if beta <= 0.0 {
            return Err(Error::Assumption(format!(
                "margin point {i} has y (eps . z_sp) = {beta:.3e}, need > 0"
            )));
        }
        let lb = (1.0 - w2 * beta * beta) / (1.0 + w2 * beta * beta);
        if y[i] > 0 {
            b.lb_margin_pos = b.lb_margin_pos.max(lb);
        } else {
            b.lb_margin_neg = b.lb_margin_neg.max(lb);
        }
    }
    let rest: Vec<usize> = (0..ds.n()).filter(|&i| !is_margin[i]).collect();
    for cls in [1i8, -1] {
        let gamma = rest
            .iter()
            .filter(|&&i| y[i] == cls)
            .map(|&i| mr.functional_margins[i])
            .fold(f64::INFINITY, f64::min);
        if gamma.is_finite() {
            b.lb_nonmargin_gamma = b.lb_nonmargin_gamma.max(1.0 / gamma);
        }
    }

    // eta depends on alpha itself, so the bound is the fixed point of
    // alpha = max_r sqrt(|w|^2 d^2 / (eta(alpha)^2 + |w|^2 d^2)).
    let neg: Vec<usize> = rest.iter().copied().filter(|&i| delta[i] < 0.0).collect();
    if !neg.is_empty() {
        let need = |a: f64| -> f64 {
            neg.iter()
                .map(|&i| {
                    let eta = (mr.functional_margins[i] - 1.0 / a).max(0.0);
                    let wd = w2 * delta[i] * delta[i];
                    (wd / (eta * eta + wd)).sqrt()
                })
                .fold(0.0, f64::max)
        };
        let (mut lo, mut hi) = (b.lb_nonmargin_gamma.max(f64::MIN_POSITIVE), 1.0);
        if need(hi) >= hi {
            return Err(Error::Assumption("no alpha below 1 keeps the non-margin points above 1".into()));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if need(mid) < mid {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        b.lb_nonmargin_eta = hi;
    }
    b.lb_overall = b
        .lb_margin_pos
        .max(b.lb_margin_neg)
        .max(b.lb_nonmargin_gamma)
        .max(b.lb_nonmargin_eta);
    if b.lb_overall >= 1.0 {
        return Err(Error::Assumption(format!("alpha lower bound {} is not below 1", b.lb_overall)));
    }
    let alpha = 0.5 * (1.0 + b.lb_overall);
    let pc = perturb(base, eps_sp, alpha, inv, sp)?;
    let after = margins(&pc.combined, &ds.points, y, tau);
    if let Some(i) = (0..ds.n()).find(|&i| after.functional_margins[i] <= 1.0) {
        return Err(Error::Assumption(format!(
            "perturbed margin at point {i} is {}, not above 1",
            after.functional_margins[i]
        )));
    }
    Ok((b, pc))
}

#[derive(Clone, Debug)]
pub struct SufficientReport {
    pub applicable: bool,
    pub spurious_using: bool,
    pub spurious_norm: f64,
    pub weight_norm: f64,
    pub classifier: Option<LinearClassifier>,
}

/// Train the unrestricted max-margin classifier and test whether it puts
/// weight on the spurious block.
pub fn verify_sufficient(ds: &LatentDataset, task: TaskKind) -> Result<SufficientReport> {
    let sp = task.spurious(ds);
    if sp.is_empty() || task.invariant(ds).is_empty() {
        return Ok(SufficientReport {
            applicable: false,
            spurious_using: false,
            spurious_norm: 0.0,
            weight_norm: 0.0,
            classifier: None,
        });
    }
    let rep = check_assumptions(ds, task)?;
    if !rep.holds() {
        return Err(Error::Assumption(format!(
            "assumptions fail for the {task} task (a32 {}, a33 {:?})",
            rep.a32, rep.a33
        )));
    }
    let (clf, sn, wn) = spurious_use(ds, task)?;
    Ok(SufficientReport {
        applicable: true,
        spurious_using: sn > TAU_SPUR * wn,
        spurious_norm: sn,
        weight_norm: wn,
        classifier: Some(clf),
    })
}

fn spurious_use(ds: &LatentDataset, task: TaskKind) -> Result<(LinearClassifier, f64, f64)> {
    let y = task.labels(ds);
    let (clf, _) = maxmargin::train_max_margin(&ds.points, y, &hard_margin_for(ds))?;
    let sp = task.spurious(ds);
    let sn = clf.weights.rows(sp.start, sp.len()).norm();
    let wn = clf.norm();
    Ok((clf, sn, wn))
}

#[derive(Clone, Debug)]
pub struct NecessaryReport {
    /// Trained classifier is spurious-using.
    pub spurious_using: bool,
    /// `a33` holds on the purely-invariant classifier's margin points.
    pub a33: bool,
    pub agree: bool,
    pub spurious_norm: f64,
    pub weight_norm: f64,
}

/// Both sides of the 1-D iff: spurious use of the trained classifier and `a33`.
pub fn check_necessary_1d(ds: &LatentDataset, task: TaskKind) -> Result<NecessaryReport> {
    if task.invariant(ds).len() != 1 {
        return invalid("the iff check needs a 1-dimensional invariant block");
    }
    let rep = check_assumptions(ds, task)?;
    if !rep.a32 {
        return Err(Error::NotSeparable);
    }
    let a33 = rep.a33 == Some(true);
    let (_, sn, wn) = spurious_use(ds, task)?;
    let spurious_using = sn > TAU_SPUR * wn;
    Ok(NecessaryReport {
        spurious_using,
        a33,
        agree: spurious_using == a33,
        spurious_norm: sn,
        weight_norm: wn,
    })
}

/// Which way a 1-D instance is built to satisfy or break `a33`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Construction {
    Holding,
    OppositeSide,
    SameSide,
}

impl Construction {
    pub const ALL: [Construction; 3] = [Construction::Holding, Construction::OppositeSide, Construction::SameSide];
}

impl fmt::Display for Construction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Construction::Holding => "holding",
            Construction::OppositeSide => "opposite-side",
            Construction::SameSide => "same-side",
        })
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-3 {
            return v / n;
        }
    }
}

/// Zero-centered main-task instance with `z_m` 1-D and margin points at
/// `z_m = +-1`. The other points sit at `|z_m| >= 1.5`.
pub fn build_1d_instance(kind: Construction, d_sp: usize, n_rest: usize, seed: u64) -> Result<LatentDataset> {
    if d_sp == 0 {
        return invalid("the spurious block needs at least one dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = unit(&mut rng, d_sp);
    let c: f64 = rng.gen_range(0.3..2.0);
    let s: f64 = rng.gen_range(0.5..1.5);
    let mut pts: Vec<(f64, DVector<f64>, i8)> = match kind {
        Construction::Holding => vec![(1.0, &v * s, 1), (-1.0, &v * (-c * s), -1)],
        Construction::OppositeSide => vec![(1.0, &v * s, 1), (-1.0, &v * (c * s), -1)],
        Construction::SameSide => {
            let u = unit(&mut rng, d_sp) * rng.gen_range(0.5..1.5);
            vec![(1.0, &v * s, 1), (1.0, &v * (-c * s), 1), (-1.0, u, -1)]
        }
    };
    for i in 0..n_rest {
        let yi: i8 = if i % 2 == 0 { 1 } else { -1 };
        let zi = f64::from(yi) * rng.gen_range(1.5..3.0);
        let sp = DVector::from_fn(d_sp, |_, _| rng.gen_range(-1.0..1.0));
        pts.push((zi, sp, yi));
    }
    let n = pts.len();
    let mut points = DMatrix::zeros(n, 1 + d_sp);
    for (i, (z, sp, _)) in pts.iter().enumerate() {
        points[(i, 0)] = *z;
        points.view_mut((i, 1), (1, d_sp)).copy_from(&sp.transpose());
    }
    let y_main: Vec<i8> = pts.iter().map(|p| p.2).collect();
    // the concept label is not used by the main task; tie it to the sign of
    // the first spurious coordinate so both label vectors are well formed
    let y_concept: Vec<i8> = pts.iter().map(|p| if p.1[0] >= 0.0 { 1 } else { -1 }).collect();
    let kappa_realized = compute_kappa(&y_main, &y_concept)?;
    Ok(LatentDataset {
        points,
        y_main,
        y_concept,
        d_m: 1,
        d_p: d_sp,
        seed,
        kappa_realized,
        offsets: vec![0.0; 1 + d_sp],
        zero_centered: true,
    })
}

/// One `theory-check` result row.
#[derive(Clone, Debug)]
pub struct TheoryRow {
    pub seed: u64,
    pub task: TaskKind,
    pub a32: bool,
    pub a33: Option<bool>,
    pub spurious_using: Option<bool>,
    pub alpha_lb: Option<f64>,
    pub perturbed_margin: Option<f64>,
    pub base_margin: Option<f64>,
    pub iff_agree: Option<bool>,
}

impl TheoryRow {
    pub const HEADER: [&'static str; 9] = [
        "seed",
        "task",
        "a32",
        "a33",
        "spurious_using",
        "alpha_lb",
        "perturbed_margin",
        "base_margin",
        "iff_agree",
    ];

    pub fn record(&self) -> Vec<String> {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        vec![
            self.seed.to_string(),
            self.task.to_string(),
            self.a32.to_string(),
            opt(self.a33),
            opt(self.spurious_using),
            opt(self.alpha_lb),
            opt(self.perturbed_margin),
            opt(self.base_margin),
            opt(self.iff_agree),
        ]
    }
}

/// Run every applicable check on `ds` for `task`.
pub fn theory_row(ds: &LatentDataset, task: TaskKind) -> Result<TheoryRow> {
    let rep = check_assumptions(ds, task)?;
    let mut row = TheoryRow {
        seed: ds.seed,
        task,
        a32: rep.a32,
        a33: rep.a33,
        spurious_using: None,
        alpha_lb: None,
        perturbed_margin: None,
        base_margin: None,
        iff_agree: None,
    };
    if !rep.a32 || task.spurious(ds).is_empty() {
        return Ok(row);
    }
    let (_, sn, wn) = spurious_use(ds, task)?;
    row.spurious_using = Some(sn > TAU_SPUR * wn);
    let y = task.labels(ds);
    if let (Some(base), Some(eps)) = (&rep.invariant, &rep.witness) {
        row.base_margin = Some(margins(base, &ds.points, y, 0.0).geometric_margin);
        let (bounds, pc) = construct_perturbed(base, ds, task, eps)?;
        row.alpha_lb = Some(bounds.lb_overall);
        row.perturbed_margin = Some(margins(&pc.combined, &ds.points, y, 0.0).geometric_margin);
    }
    if task.invariant(ds).len() == 1 {
        row.iff_agree = Some(row.spurious_using == rep.a33);
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{gen_disentangled, GenConfig};

    fn regime(seed: u64) -> LatentDataset {
        gen_disentangled(&GenConfig {
            n_points: 200,
            d_m: 1,
            d_p: 1,
            kappa_target: 0.8,
            class_separation: 4.0,
            feature_noise_sd: 0.5,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn regime_satisfies_both_assumptions() {
        for seed in 0..5 {
            let ds = regime(seed);
            for task in [TaskKind::Main, TaskKind::Probe] {
                let r = check_assumptions(&ds, task).unwrap();
                assert!(r.holds(), "seed {seed} {task}: {r:?}");
                assert!(r.witness_margin > 0.0);
            }
        }
    }

    #[test]
    fn perturbation_preserves_norm_and_alpha_one_is_base() {
        let ds = regime(3);
        let r = check_assumptions(&ds, TaskKind::Main).unwrap();
        let base = r.invariant.clone().unwrap();
        let (_, pc) = construct_perturbed(&base, &ds, TaskKind::Main, r.witness.as_ref().unwrap()).unwrap();
        for a in [0.0, 0.3, 0.77, 0.999] {
            let q = pc.at(a).unwrap();
            assert!((q.combined.norm() - base.norm()).abs() < 1e-9);
        }
        assert_eq!(pc.at(1.0).unwrap().combined.weights, base.weights);
    }

    #[test]
    fn every_alpha_above_the_bound_beats_margin_one() {
        let ds = regime(5);
        let y = ds.y_main.clone();
        let r = check_assumptions(&ds, TaskKind::Main).unwrap();
        let base = r.invariant.clone().unwrap();
        let (b, pc) = construct_perturbed(&base, &ds, TaskKind::Main, r.witness.as_ref().unwrap()).unwrap();
        let lb = b.lb_overall;
        assert!(lb < 1.0);
        assert_eq!(lb, b.lb_margin_pos.max(b.lb_margin_neg).max(b.lb_nonmargin_gamma).max(b.lb_nonmargin_eta));
        for k in 1..=10 {
            let a = lb + (1.0 - lb) * k as f64 / 11.0;
            let m = margins(&pc.at(a).unwrap().combined, &ds.points, &y, 0.0);
            assert!(m.min_margin > 1.0, "alpha {a}: {}", m.min_margin);
        }
    }

    #[test]
    fn zero_spurious_block_has_no_witness() {
        let mut ds = regime(1);
        for i in 0..ds.n() {
            ds.points[(i, 1)] = 0.0;
        }
        let r = check_assumptions(&ds, TaskKind::Main).unwrap();
        assert_eq!(r.a33, Some(false));
        let base = r.invariant.unwrap();
        let e = DVector::from_element(1, 1.0);
        assert!(matches!(construct_perturbed(&base, &ds, TaskKind::Main, &e), Err(Error::Assumption(_))));
    }

    #[test]
    fn two_point_dataset_has_both_points_on_the_margin() {
        let ds = LatentDataset {
            points: DMatrix::from_row_slice(2, 2, &[0.5, 2.0, -0.5, -1.0]),
            y_main: vec![1, -1],
            y_concept: vec![1, -1],
            d_m: 1,
            d_p: 1,
            seed: 0,
            kappa_realized: 1.0,
            offsets: vec![0.0; 2],
            zero_centered: false,
        };
        let r = check_assumptions(&ds, TaskKind::Probe).unwrap();
        assert_eq!(r.margin_points, vec![0, 1]);
        assert!(check_necessary_1d(&ds, TaskKind::Probe).unwrap().agree);
    }

    #[test]
    fn missing_spurious_block_is_not_applicable() {
        let mut ds = regime(2);
        ds.points = ds.points.columns(1, 1).into_owned();
        ds.d_m = 0;
        let r = verify_sufficient(&ds, TaskKind::Probe).unwrap();
        assert!(!r.applicable && !r.spurious_using);
    }

    #[test]
    fn constructions_agree_with_the_iff() {
        for (k, kind) in Construction::ALL.into_iter().enumerate() {
            for seed in 0..4 {
                let ds = build_1d_instance(kind, 1 + seed as usize % 3, 12, 100 * k as u64 + seed).unwrap();
                let r = check_necessary_1d(&ds, TaskKind::Main).unwrap();
                assert_eq!(r.a33, kind == Construction::Holding, "{kind} seed {seed}");
                assert!(r.agree, "{kind} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn task_kind_round_trips() {
        for t in [TaskKind::Probe, TaskKind::Main] {
            assert_eq!(t.to_string().parse::<TaskKind>().unwrap(), t);
        }
        assert!("both".parse::<TaskKind>().is_err());
    }
}
