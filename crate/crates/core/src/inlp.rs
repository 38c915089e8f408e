//! Iterative null-space projection and checks on what it does to the
//! representation and to a frozen main classifier.

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::classifier::{accuracy, sign, LinearClassifier, Predictor};
use crate::error::{invalid, Error, Result};
use crate::latent::LatentDataset;
use crate::maxmargin::{self, TrainSettings};
use crate::metrics::{group_accuracies_from, spuriousness_from};
use crate::text::delta_prob_encoded;

pub const SPAN_TOL: f64 = 1e-10;
/// Relative slack for float noise when comparing norms.
pub const NORM_SLACK: f64 = 1e-12;

/// `I - w w^T / |w|^2`.
pub fn projection_matrix(w: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = w.norm();
    if !(n > 0.0) || !n.is_finite() {
        return invalid("projection direction must be a nonzero finite vector");
    }
    let u = w / n;
    let d = w.len();
    Ok(DMatrix::identity(d, d) - &u * u.transpose())
}

/// Rows of `x` mapped through `p`. Every projection in this module goes through here.
pub fn project(x: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    x * p
}

pub fn hash_matrix(x: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            h.update(x[(i, j)].to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn row_norms(x: &DMatrix<f64>) -> Vec<f64> {
    x.row_iter().map(|r| r.norm()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Logistic probe fit to convergence by Newton steps, with an `l2 = 1/n` ridge.
pub fn probe_settings_for(n: usize, fit_bias: bool, seed: u64) -> TrainSettings {
    TrainSettings {
        max_iters: 50,
        step_size: 1.0,
        tol_kkt: 1e-9,
        l2: 1.0 / n.max(1) as f64,
        newton: true,
        fit_bias,
        seed,
        ..TrainSettings::logistic()
    }
}

/// Incrementally orthonormalized span of past directions.
#[derive(Clone, Debug, Default)]
pub struct SpanTracker {
    basis: Vec<DVector<f64>>,
}

impl SpanTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// Norm of the part of unit `u` outside the span.
    pub fn residual(&self, u: &DVector<f64>) -> f64 {
        self.orthogonalize(u).norm()
    }

    fn orthogonalize(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut r = u.clone();
        // two passes keep the basis orthogonal at rounding level
        for _ in 0..2 {
            for q in &self.basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        r
    }

    /// Adds `w` if it leaves the span; returns whether it did.
    pub fn push(&mut self, w: &DVector<f64>) -> bool {
        let u = w / w.norm();
        let r = self.orthogonalize(&u);
        let rn = r.norm();
        if rn > SPAN_TOL {
            self.basis.push(r / rn);
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub iter: usize,
    pub probe_acc_pre: Option<f64>,
    pub main_acc_all: f64,
    pub main_acc_min: Option<f64>,
    pub main_spuriousness: Option<f64>,
    pub probe_spuriousness: Option<f64>,
    pub mean_norm: f64,
    pub delta_prob: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ProjectionStep {
    pub probe: LinearClassifier,
    pub p: DMatrix<f64>,
    pub pre_norm: f64,
    pub post_norm: f64,
    pub point_norms_pre: Vec<f64>,
    pub point_norms_post: Vec<f64>,
    pub novel_direction: bool,
    pub rep_hash: String,
    pub metrics: StepMetrics,
    /// Main head in use after this step (differs from the input only when retraining).
    pub main: LinearClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    EarlyStop { iter: usize },
    ProbeFailed { iter: usize, reason: String },
    /// The probe no longer beats the majority rate on the current representation.
    ProbeAtChance { iter: usize, accuracy: f64 },
}

#[derive(Clone, Debug)]
pub struct InlpTrace {
    pub baseline: StepMetrics,
    pub steps: Vec<ProjectionStep>,
    pub stop: StopReason,
    /// First iteration whose main accuracy fell at least `drop_delta` below baseline.
    pub first_drop_iter: Option<usize>,
    pub initial_hash: String,
    pub final_rep: DMatrix<f64>,
}

impl InlpTrace {
    pub fn rows(&self) -> impl Iterator<Item = &StepMetrics> {
        std::iter::once(&self.baseline).chain(self.steps.iter().map(|s| &s.metrics))
    }

    pub fn metrics_at(&self, iter: usize) -> Option<&StepMetrics> {
        self.rows().find(|m| m.iter == iter)
    }

    pub fn final_metrics(&self) -> &StepMetrics {
        self.steps.last().map(|s| &s.metrics).unwrap_or(&self.baseline)
    }

    pub fn to_csv(&self) -> String {
        use crate::metrics::cell;
        let mut out = String::from("iter,probe_acc_pre,main_acc_all,main_acc_min,probe_spuriousness,mean_norm,delta_prob\n");
        for m in self.rows() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.iter,
                cell(m.probe_acc_pre),
                m.main_acc_all,
                cell(m.main_acc_min),
                cell(m.probe_spuriousness),
                m.mean_norm,
                cell(m.delta_prob)
            ));
        }
        out
    }

    /// `iter,bias,w0..` for every probe.
    pub fn probes_csv(&self) -> String {
        let d = self.final_rep.ncols();
        let mut out = String::from("iter,bias");
        for j in 0..d {
            out.push_str(&format!(",w{j}"));
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!("{},{}", s.metrics.iter, s.probe.bias));
            for w in s.probe.weights.iter() {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct InlpConfig {
    pub iters: usize,
    pub retrain_main: bool,
    pub probe: TrainSettings,
    pub main: TrainSettings,
    /// Stop after the first step whose accuracy drop reaches `drop_delta`.
    pub early_stop: bool,
    pub drop_delta: f64,
    /// Stop once probe training accuracy is within this of the majority rate.
    pub min_probe_gain: Option<f64>,
}

impl InlpConfig {
    pub fn for_dataset(ds: &LatentDataset, iters: usize, seed: u64) -> Self {
        let fit_bias = !ds.zero_centered;
        InlpConfig {
            iters,
            retrain_main: false,
            probe: probe_settings_for(ds.n(), fit_bias, seed),
            main: TrainSettings::logistic().with_bias(fit_bias).with_seed(seed),
            early_stop: false,
            drop_delta: 0.02,
            min_probe_gain: Some(0.01),
        }
    }
}

/// Evaluation data: a labelled set in the original representation and,
/// for text, its concept-toggled encodings.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub ds: &'a LatentDataset,
    pub toggled: Option<&'a DMatrix<f64>>,
}

struct Evaluator<'a> {
    eval: EvalSet<'a>,
    clean_main_min: Vec<i8>,
    clean_probe_pred: Option<Vec<i8>>,
}

impl Evaluator<'_> {
    fn measure(
        &self,
        iter: usize,
        main: &LinearClassifier,
        g: &DMatrix<f64>,
        probe_pred: Option<&[i8]>,
        probe_acc_pre: Option<f64>,
    ) -> StepMetrics {
        let ds = self.eval.ds;
        let xg = project(&ds.points, g);
        let pred = main.predict(&xg);
        let ga = group_accuracies_from(&pred, &ds.y_main, &ds.y_concept);
        let main_psi = spuriousness_from(&pred, &self.clean_main_min, &ds.y_main, &ds.y_concept).psi;
        let probe_psi = match (probe_pred, &self.clean_probe_pred) {
            (Some(p), Some(c)) => spuriousness_from(p, c, &ds.y_concept, &ds.y_main).psi,
            _ => None,
        };
        let delta = self.eval.toggled.map(|t| delta_prob_encoded(main, &xg, &project(t, g)));
        StepMetrics {
            iter,
            probe_acc_pre,
            main_acc_all: ga.all,
            main_acc_min: ga.min,
            main_spuriousness: main_psi,
            probe_spuriousness: probe_psi,
            mean_norm: mean(&row_norms(&xg)),
            delta_prob: delta,
        }
    }
}

/// Runs INLP on `train`, reporting metrics on `eval` (or `train` when absent).
pub fn inlp_run(
    train: &LatentDataset,
    main_clf: &LinearClassifier,
    cfg: &InlpConfig,
    eval: Option<EvalSet<'_>>,
) -> Result<InlpTrace> {
    train.validate()?;
    if cfg.iters == 0 {
        return invalid("iters must be at least 1");
    }
    if main_clf.dim() != train.dim() {
        return invalid("main classifier dimension differs from the representation");
    }
    let eval = eval.unwrap_or(EvalSet { ds: train, toggled: None });
    if eval.ds.dim() != train.dim() {
        return invalid("evaluation set dimension differs from training set");
    }
    let d = train.dim();
    // the fixed-label slice is not centered, so the clean probe always gets a bias
    let clean_probe = train
        .make_clean_probe_subset(1)
        .ok()
        .and_then(|sub| maxmargin::train(&sub.points, &sub.y_concept, &cfg.probe.clone().with_bias(true)).ok());
    let ev = Evaluator {
        eval,
        clean_main_min: main_clf.predict(&eval.ds.points),
        clean_probe_pred: clean_probe.as_ref().map(|c| c.predict(&eval.ds.points)),
    };

    let mut g = DMatrix::identity(d, d);
    let mut rep = train.points.clone();
    let mut main = main_clf.clone();
    let baseline = ev.measure(0, &main, &g, None, None);
    let initial_hash = hash_matrix(&rep);
    let mut span = SpanTracker::new();
    let mut steps = Vec::with_capacity(cfg.iters);
    let mut stop = StopReason::Completed;
    let mut first_drop_iter = None;

    for iter in 1..=cfg.iters {
        let mut ps = cfg.probe.clone();
        ps.seed = crate::latent::split_seed(cfg.probe.seed, iter as u64);
        let probe = match maxmargin::train(&rep, &train.y_concept, &ps) {
            Ok(p) if p.norm() > 0.0 && p.weights.iter().all(|v| v.is_finite()) => p,
            Ok(_) => {
                stop = StopReason::ProbeFailed {
                    iter,
                    reason: "probe weights vanished".into(),
                };
                break;
            }
            Err(e) => {
                stop = StopReason::ProbeFailed {
                    iter,
                    reason: e.to_string(),
                };
                break;
            }
        };
        if let Some(gain) = cfg.min_probe_gain {
            let acc = accuracy(&probe.predict(&rep), &train.y_concept);
            if acc <= majority_rate(&train.y_concept) + gain {
                stop = StopReason::ProbeAtChance { iter, accuracy: acc };
                break;
            }
        }
        let xg_eval = project(&eval.ds.points, &g);
        // the probe is scored on the representation it was trained on
        let probe_pred = probe.predict(&xg_eval);
        let probe_acc_pre = Some(accuracy(&probe_pred, &eval.ds.y_concept));
        let p = projection_matrix(&probe.weights)?;
        let norms_pre = row_norms(&rep);
        rep = project(&rep, &p);
        g = project(&g, &p);
        let norms_post = row_norms(&rep);
        let novel = span.push(&probe.weights);
        if cfg.retrain_main {
            let mut ms = cfg.main.clone();
            ms.seed = crate::latent::split_seed(cfg.main.seed, iter as u64);
            main = maxmargin::train(&rep, &train.y_main, &ms)?;
        }
        let metrics = ev.measure(iter, &main, &g, Some(&probe_pred), probe_acc_pre);
        let dropped = baseline.main_acc_all - metrics.main_acc_all >= cfg.drop_delta;
        if dropped && first_drop_iter.is_none() {
            first_drop_iter = Some(iter);
        }
        steps.push(ProjectionStep {
            pre_norm: mean(&norms_pre),
            post_norm: mean(&norms_post),
            point_norms_pre: norms_pre,
            point_norms_post: norms_post,
            novel_direction: novel,
            rep_hash: hash_matrix(&rep),
            probe,
            p,
            metrics,
            main: main.clone(),
        });
        if cfg.early_stop && dropped {
            stop = StopReason::EarlyStop { iter };
            break;
        }
    }
    Ok(InlpTrace {
        baseline,
        steps,
        stop,
        first_drop_iter,
        initial_hash,
        final_rep: rep,
    })
}

fn majority_rate(y: &[i8]) -> f64 {
    let pos = y.iter().filter(|&&v| v > 0).count();
    pos.max(y.len() - pos) as f64 / y.len().max(1) as f64
}

/// Apply stored projections in order to `x`.
pub fn replay(x: &DMatrix<f64>, trace: &InlpTrace) -> DMatrix<f64> {
    trace.steps.iter().fold(x.clone(), |acc, s| project(&acc, &s.p))
}

/// Project `x` successively onto the null space of each direction.
pub fn apply_directions(x: &DMatrix<f64>, dirs: &[DVector<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(dirs.len());
    let mut cur = x.clone();
    for w in dirs {
        cur = project(&cur, &projection_matrix(w)?);
        out.push(cur.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MixingReport {
    pub applicable: bool,
    /// Largest `|(u_p . z_p) u_m|` over points: concept leakage into the main block.
    pub cross_m: f64,
    /// Largest `|(u_m . z_m) u_p|`: main leakage into the concept block.
    pub cross_p: f64,
    pub acc_min_before: Option<f64>,
    pub acc_min_after: Option<f64>,
    pub spuriousness_after: Option<f64>,
    pub flipped: Vec<usize>,
    pub projected: DMatrix<f64>,
}

/// One projection step against `probe`, measured on the frozen `clean_main`.
pub fn verify_mixing(ds: &LatentDataset, clean_main: &LinearClassifier, probe: &LinearClassifier) -> Result<MixingReport> {
    ds.validate()?;
    if probe.dim() != ds.dim() || clean_main.dim() != ds.dim() {
        return invalid("classifier dimension differs from the dataset");
    }
    let u = &probe.weights / probe.norm();
    let um = u.rows(0, ds.d_m).into_owned();
    let up = u.rows(ds.d_m, ds.d_p).into_owned();
    let p = projection_matrix(&probe.weights)?;
    let projected = project(&ds.points, &p);
    let before = clean_main.predict(&ds.points);
    let after = clean_main.predict(&projected);
    let gb = group_accuracies_from(&before, &ds.y_main, &ds.y_concept);
    let ga = group_accuracies_from(&after, &ds.y_main, &ds.y_concept);
    let applicable = um.iter().any(|&v| v != 0.0) && up.iter().any(|&v| v != 0.0);
    let (mut cross_m, mut cross_p) = (0.0f64, 0.0f64);
    for i in 0..ds.n() {
        let zm = ds.points.row(i).columns(0, ds.d_m).transpose();
        let zp = ds.points.row(i).columns(ds.d_m, ds.d_p).transpose();
        cross_m = cross_m.max(up.dot(&zp).abs() * um.norm());
        cross_p = cross_p.max(um.dot(&zm).abs() * up.norm());
    }
    Ok(MixingReport {
        applicable,
        cross_m,
        cross_p,
        acc_min_before: gb.min,
        acc_min_after: ga.min,
        spuriousness_after: spuriousness_from(&after, &before, &ds.y_main, &ds.y_concept).psi,
        flipped: (0..ds.n()).filter(|&i| before[i] != after[i]).collect(),
        projected,
    })
}

#[derive(Clone, Debug)]
pub struct WrongRemovalReport {
    pub concept_block_unchanged: bool,
    pub main_block_changed: bool,
    /// Only meaningful for a one-dimensional main block.
    pub main_block_zeroed: Option<bool>,
    pub main_acc_after: f64,
    /// Share of the class the post-projection classifier predicts for everyone.
    pub predicted_class_rate: Option<f64>,
}

/// Projection against a probe that ignores the concept block. Concept weights
/// at or below `tau_spur * |w|` are treated as exact zeros.
pub fn verify_wrong_removal(
    ds: &LatentDataset,
    probe: &LinearClassifier,
    main: &LinearClassifier,
    tau_spur: f64,
) -> Result<WrongRemovalReport> {
    ds.validate()?;
    let nrm = probe.norm();
    let wp = probe.weights.rows(ds.d_m, ds.d_p);
    if wp.iter().any(|v| v.abs() > tau_spur * nrm) {
        return Err(Error::Assumption("probe uses the concept block".into()));
    }
    let mut w = probe.weights.clone();
    w.rows_mut(ds.d_m, ds.d_p).fill(0.0);
    let p = projection_matrix(&w)?;
    let out = project(&ds.points, &p);
    let same = |j: usize| (0..ds.n()).all(|i| out[(i, j)].to_bits() == ds.points[(i, j)].to_bits());
    let concept_block_unchanged = (ds.d_m..ds.dim()).all(same);
    let main_block_changed = !(0..ds.d_m).all(same);
    let main_block_zeroed = (ds.d_m == 1).then(|| (0..ds.n()).all(|i| out[(i, 0)] == 0.0));
    let pred = main.predict(&out);
    let constant = pred.iter().all(|&v| v == pred[0]);
    let predicted_class_rate = (constant && !pred.is_empty())
        .then(|| ds.y_main.iter().filter(|&&y| y == pred[0]).count() as f64 / ds.n() as f64);
    Ok(WrongRemovalReport {
        concept_block_unchanged,
        main_block_changed,
        main_block_zeroed,
        main_acc_after: accuracy(&pred, &ds.y_main),
        predicted_class_rate,
    })
}

#[derive(Clone, Debug)]
pub struct NormDecayReport {
    pub non_increasing: bool,
    /// Steps whose direction left the span of earlier ones.
    pub novel: Vec<bool>,
    pub strict: Vec<bool>,
    /// Every novel step strictly decreased the mean norm.
    pub holds: bool,
    pub strict_fraction_of_novel: f64,
}

pub fn verify_norm_decay(trace: &InlpTrace) -> Result<NormDecayReport> {
    if trace.steps.is_empty() {
        return invalid("trace has no steps");
    }
    let mut non_increasing = true;
    let mut strict = Vec::new();
    let mut novel = Vec::new();
    for s in &trace.steps {
        for (a, b) in s.point_norms_pre.iter().zip(&s.point_norms_post) {
            if *b > a * (1.0 + NORM_SLACK) {
                non_increasing = false;
            }
        }
        strict.push(s.post_norm < s.pre_norm);
        novel.push(s.novel_direction);
    }
    let n_novel = novel.iter().filter(|&&v| v).count();
    let n_ok = novel.iter().zip(&strict).filter(|(n, s)| **n && **s).count();
    Ok(NormDecayReport {
        non_increasing,
        holds: non_increasing && n_ok == n_novel,
        strict_fraction_of_novel: if n_novel == 0 { 1.0 } else { n_ok as f64 / n_novel as f64 },
        novel,
        strict,
    })
}

/// Largest absolute entry of `P P - P`.
pub fn idempotence_error(p: &DMatrix<f64>) -> f64 {
    (p * p - p).amax()
}

pub fn symmetry_error(p: &DMatrix<f64>) -> f64 {
    (p - p.transpose()).amax()
}

/// Predicted labels of a head on an already projected matrix.
pub fn predict_rows(clf: &LinearClassifier, x: &DMatrix<f64>) -> Vec<i8> {
    (0..x.nrows()).map(|i| sign(x.row(i).transpose().dot(&clf.weights) + clf.bias)).collect()
}
