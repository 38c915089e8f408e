//! Adversarial removal with a gradient-reversal probe head, and the
//! scalar-encoder constructions behind its failure modes.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

use crate::classifier::{accuracy, sign, LinearClassifier, Predictor};
use crate::error::{invalid, Error, Result};
use crate::inlp::probe_settings_for;
use crate::latent::{split_seed, LatentDataset};
use crate::maxmargin::{self, margins, TrainSettings};
use crate::metrics::spuriousness_from;
use crate::theory::{self, TaskKind};

/// Ridge added to the probe-removal check; keeps the 1-D heads finite.
const HEAD_L2: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Hidden {
    /// `width x d`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Encoder (optional ReLU layer, then linear map to `zeta`) with linear
/// main and probe heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvModel {
    pub hidden: Option<Hidden>,
    /// `d_zeta x (width or d)`
    pub encoder: DMatrix<f64>,
    pub main_w: DVector<f64>,
    pub main_b: f64,
    pub probe_w: DVector<f64>,
    pub probe_b: f64,
    pub lambda: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, sd: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal) * sd)
}

impl AdvModel {
    pub fn new_random(d: usize, d_zeta: usize, hidden: Option<usize>, lambda: f64, seed: u64) -> Result<AdvModel> {
        if d == 0 || d_zeta == 0 || hidden == Some(0) {
            return invalid("model dimensions must be positive");
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return invalid(format!("lambda {lambda} must be finite and >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = hidden.map(|h| Hidden {
            w: gaussian(&mut rng, h, d, (1.0 / d as f64).sqrt()),
            b: DVector::zeros(h),
        });
        let inner = hidden.as_ref().map_or(d, |h| h.w.nrows());
        let encoder = gaussian(&mut rng, d_zeta, inner, (1.0 / inner as f64).sqrt());
        let head_sd = (1.0 / d_zeta as f64).sqrt();
        let main_w = DVector::from_iterator(d_zeta, gaussian(&mut rng, d_zeta, 1, head_sd).iter().copied());
        let probe_w = DVector::from_iterator(d_zeta, gaussian(&mut rng, d_zeta, 1, head_sd).iter().copied());
        Ok(AdvModel {
            hidden,
            encoder,
            main_w,
            main_b: 0.0,
            probe_w,
            probe_b: 0.0,
            lambda,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().map_or(self.encoder.ncols(), |h| h.w.ncols())
    }

    pub fn d_zeta(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(h) = &self.hidden {
            if h.b.len() != h.w.nrows() || self.encoder.ncols() != h.w.nrows() {
                return invalid("hidden layer shape mismatch");
            }
        }
        if self.main_w.len() != self.d_zeta() || self.probe_w.len() != self.d_zeta() {
            return invalid("head width differs from d_zeta");
        }
        if !(self.lambda >= 0.0) {
            return invalid("lambda must be >= 0");
        }
        Ok(())
    }

    fn inner(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.hidden {
            None => x.clone(),
            Some(h) => {
                let mut a = x * h.w.transpose();
                for mut row in a.row_iter_mut() {
                    for (v, b) in row.iter_mut().zip(h.b.iter()) {
                        *v = (*v + b).max(0.0);
                    }
                }
                a
            }
        }
    }

    /// `n x d_zeta` encodings.
    pub fn zeta(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner(x) * self.encoder.transpose()
    }

    pub fn main_scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        head(&self.zeta(x), &self.main_w, self.main_b)
    }

    pub fn probe_scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        head(&self.zeta(x), &self.probe_w, self.probe_b)
    }

    pub fn probe_head(&self) -> ProbeHead<'_> {
        ProbeHead(self)
    }
}

fn head(z: &DMatrix<f64>, w: &DVector<f64>, b: f64) -> DVector<f64> {
    (z * w).add_scalar(b)
}

impl Predictor for AdvModel {
    fn scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.main_scores(x)
    }
}

/// The model's adversary as a predictor of `y_concept`.
pub struct ProbeHead<'a>(&'a AdvModel);

impl Predictor for ProbeHead<'_> {
    fn scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.0.probe_scores(x)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Mean logistic loss and its derivative with respect to each score.
fn logistic(s: &DVector<f64>, y: &[i8]) -> (f64, DVector<f64>) {
    let n = y.len() as f64;
    let mut loss = 0.0;
    let g = DVector::from_iterator(
        y.len(),
        s.iter().zip(y).map(|(&s, &y)| {
            let m = f64::from(y) * s;
            loss += softplus(-m);
            -f64::from(y) * crate::classifier::sigmoid(-m) / n
        }),
    );
    (loss / n, g)
}

#[derive(Clone, Debug)]
pub struct Grads {
    pub hidden_w: Option<DMatrix<f64>>,
    pub hidden_b: Option<DVector<f64>>,
    pub encoder: DMatrix<f64>,
    pub main_w: DVector<f64>,
    pub main_b: f64,
    pub probe_w: DVector<f64>,
    pub probe_b: f64,
    pub main_loss: f64,
    pub probe_loss: f64,
}

/// Gradients of one batch. Heads get the gradients of their own loss; the
/// encoder gets `dL_main - lambda dL_probe`, the probe term dropped at `lambda = 0`.
pub fn gradients(m: &AdvModel, x: &DMatrix<f64>, y_main: &[i8], y_concept: &[i8]) -> Grads {
    let h = m.inner(x);
    let z = &h * m.encoder.transpose();
    let (main_loss, dm) = logistic(&head(&z, &m.main_w, m.main_b), y_main);
    let (probe_loss, dp) = logistic(&head(&z, &m.probe_w, m.probe_b), y_concept);

    let mut dz = &dm * m.main_w.transpose();
    if m.lambda != 0.0 {
        dz -= (&dp * m.probe_w.transpose()) * m.lambda;
    }
    let encoder = dz.transpose() * &h;
    let (hidden_w, hidden_b) = match &m.hidden {
        None => (None, None),
        Some(_) => {
            let mut dh = dz * &m.encoder;
            dh.zip_apply(&h, |g, a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let gb = DVector::from_iterator(dh.ncols(), dh.column_iter().map(|c| c.sum()));
            (Some(dh.transpose() * x), Some(gb))
        }
    };
    Grads {
        hidden_w,
        hidden_b,
        encoder,
        main_w: z.transpose() * &dm,
        main_b: dm.sum(),
        probe_w: z.transpose() * &dp,
        probe_b: dp.sum(),
        main_loss,
        probe_loss,
    }
}

/// Full-data losses: `(main, probe, main - lambda * probe)`.
pub fn losses(m: &AdvModel, x: &DMatrix<f64>, y_main: &[i8], y_concept: &[i8]) -> (f64, f64, f64) {
    let z = m.zeta(x);
    let (lm, _) = logistic(&head(&z, &m.main_w, m.main_b), y_main);
    let (lp, _) = logistic(&head(&z, &m.probe_w, m.probe_b), y_concept);
    (lm, lp, lm - m.lambda * lp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Every gradient taken at the same parameters.
    Simultaneous,
    /// Probe head steps first; encoder and main head see the updated probe.
    ProbeFirst,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Simultaneous => "simultaneous",
            Schedule::ProbeFirst => "probe-first",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simultaneous" => Ok(Schedule::Simultaneous),
            "probe-first" => Ok(Schedule::ProbeFirst),
            other => invalid(format!("unknown schedule '{other}'")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdvConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub d_zeta: usize,
    /// ReLU layer width before the linear encoder.
    pub hidden: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            lambda: 1.0,
            epochs: 20,
            lr: 0.1,
            d_zeta: 16,
            hidden: None,
            batch_size: 32,
            seed: 0,
            schedule: Schedule::Simultaneous,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.d_zeta == 0 {
            return invalid("lr, batch size and d_zeta must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    Random,
    /// Train encoder and main head on this (uncorrelated) data first.
    FromClean(&'a LatentDataset),
}

/// Where accuracies and spuriousness are measured.
#[derive(Clone, Copy, Debug)]
pub struct AdvEval<'a> {
    pub ds: &'a LatentDataset,
    pub clean: Option<&'a LinearClassifier>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub main_loss: f64,
    pub probe_loss: f64,
    pub combined_loss: f64,
    pub main_acc: f64,
    pub probe_acc: f64,
    pub main_spuriousness: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AdvTrace {
    /// Metrics of the starting model, before any adversarial step.
    pub initial: EpochMetrics,
    pub epochs: Vec<EpochMetrics>,
    /// Clean pre-training epochs for `Init::FromClean`.
    pub pretrain: Vec<EpochMetrics>,
}

impl AdvTrace {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().unwrap_or(&self.initial)
    }

    /// Clean pre-training epochs come first; adversarial epochs are numbered after them.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,main_loss,probe_loss,main_acc,probe_acc,main_spuriousness\n");
        let shift = self.pretrain.len();
        for (m, off) in self.pretrain.iter().map(|m| (m, 0)).chain(self.epochs.iter().map(|m| (m, shift))) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.epoch + off,
                m.main_loss,
                m.probe_loss,
                m.main_acc,
                m.probe_acc,
                crate::metrics::cell(m.main_spuriousness)
            ));
        }
        out
    }
}

struct Batches {
    x: Vec<DMatrix<f64>>,
    y_main: Vec<Vec<i8>>,
    y_concept: Vec<Vec<i8>>,
}

fn batches(ds: &LatentDataset, size: usize, seed: u64) -> Batches {
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut b = Batches {
        x: Vec::new(),
        y_main: Vec::new(),
        y_concept: Vec::new(),
    };
    for chunk in order.chunks(size) {
        b.x.push(ds.points.select_rows(chunk.iter()));
        b.y_main.push(chunk.iter().map(|&i| ds.y_main[i]).collect());
        b.y_concept.push(chunk.iter().map(|&i| ds.y_concept[i]).collect());
    }
    b
}

fn step_encoder_and_main(m: &mut AdvModel, g: &Grads, lr: f64) {
    if let (Some(h), Some(gw), Some(gb)) = (m.hidden.as_mut(), &g.hidden_w, &g.hidden_b) {
        h.w -= gw * lr;
        h.b -= gb * lr;
    }
    m.encoder -= &g.encoder * lr;
    m.main_w -= &g.main_w * lr;
    m.main_b -= g.main_b * lr;
}

fn step_probe(m: &mut AdvModel, g: &Grads, lr: f64) {
    m.probe_w -= &g.probe_w * lr;
    m.probe_b -= g.probe_b * lr;
}

fn measure(m: &AdvModel, epoch: usize, train: &LatentDataset, eval: &AdvEval<'_>, clean_pred: Option<&[i8]>) -> EpochMetrics {
    let (main_loss, probe_loss, combined_loss) = losses(m, &train.points, &train.y_main, &train.y_concept);
    let ds = eval.ds;
    let pred = m.predict(&ds.points);
    EpochMetrics {
        epoch,
        main_loss,
        probe_loss,
        combined_loss,
        main_acc: accuracy(&pred, &ds.y_main),
        probe_acc: accuracy(&m.probe_head().predict(&ds.points), &ds.y_concept),
        main_spuriousness: clean_pred.and_then(|c| spuriousness_from(&pred, c, &ds.y_main, &ds.y_concept).psi),
    }
}

/// Plain GD over a fixed batch order. With `adversary = false` the probe
/// head is neither used nor trained.
fn train_loop(
    m: &mut AdvModel,
    train: &LatentDataset,
    cfg: &AdvConfig,
    adversary: bool,
    eval: &AdvEval<'_>,
    clean_pred: Option<&[i8]>,
) -> Result<Vec<EpochMetrics>> {
    let b = batches(train, cfg.batch_size, split_seed(cfg.seed, 2));
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        for k in 0..b.x.len() {
            let (x, ym, yp) = (&b.x[k], &b.y_main[k], &b.y_concept[k]);
            if !adversary {
                let g = gradients(&AdvModel { lambda: 0.0, ..m.clone() }, x, ym, yp);
                step_encoder_and_main(m, &g, cfg.lr);
                continue;
            }
            match cfg.schedule {
                Schedule::Simultaneous => {
                    let g = gradients(m, x, ym, yp);
                    step_probe(m, &g, cfg.lr);
                    step_encoder_and_main(m, &g, cfg.lr);
                }
                Schedule::ProbeFirst => {
                    let g = gradients(m, x, ym, yp);
                    step_probe(m, &g, cfg.lr);
                    let g = gradients(m, x, ym, yp);
                    step_encoder_and_main(m, &g, cfg.lr);
                }
            }
        }
        let em = measure(m, epoch, train, eval, clean_pred);
        if !(em.main_loss.is_finite() && em.probe_loss.is_finite()) {
            return Err(Error::Numerical {
                epoch,
                what: "loss overflowed".into(),
            });
        }
        out.push(em);
    }
    Ok(out)
}

fn check_inputs(train: &LatentDataset, cfg: &AdvConfig, eval: &AdvEval<'_>) -> Result<()> {
    train.validate()?;
    cfg.validate()?;
    if eval.ds.dim() != train.dim() {
        return invalid("evaluation set dimension differs from training set");
    }
    if let Some(c) = eval.clean {
        if c.dim() != train.dim() {
            return invalid("clean classifier dimension differs from the data");
        }
    }
    Ok(())
}

/// Encoder plus main head trained without an adversary.
pub fn erm_train(train: &LatentDataset, cfg: &AdvConfig, eval: Option<AdvEval<'_>>) -> Result<(AdvModel, AdvTrace)> {
    let eval = eval.unwrap_or(AdvEval { ds: train, clean: None });
    check_inputs(train, cfg, &eval)?;
    let mut m = AdvModel::new_random(train.dim(), cfg.d_zeta, cfg.hidden, cfg.lambda, split_seed(cfg.seed, 1))?;
    let clean_pred = eval.clean.map(|c| c.predict(&eval.ds.points));
    let initial = measure(&m, 0, train, &eval, clean_pred.as_deref());
    let epochs = train_loop(&mut m, train, cfg, false, &eval, clean_pred.as_deref())?;
    Ok((
        m,
        AdvTrace {
            initial,
            epochs,
            pretrain: Vec::new(),
        },
    ))
}

pub fn adv_train(
    train: &LatentDataset,
    cfg: &AdvConfig,
    init: Init<'_>,
    eval: Option<AdvEval<'_>>,
) -> Result<(AdvModel, AdvTrace)> {
    let eval = eval.unwrap_or(AdvEval { ds: train, clean: None });
    check_inputs(train, cfg, &eval)?;
    let mut m = AdvModel::new_random(train.dim(), cfg.d_zeta, cfg.hidden, cfg.lambda, split_seed(cfg.seed, 1))?;
    let clean_pred = eval.clean.map(|c| c.predict(&eval.ds.points));
    let pretrain = match init {
        Init::Random => Vec::new(),
        Init::FromClean(clean_ds) => {
            clean_ds.validate()?;
            if clean_ds.dim() != train.dim() {
                return invalid("clean initialization data has a different dimension");
            }
            train_loop(&mut m, clean_ds, cfg, false, &eval, clean_pred.as_deref())?
        }
    };
    let initial = measure(&m, 0, train, &eval, clean_pred.as_deref());
    let epochs = train_loop(&mut m, train, cfg, true, &eval, clean_pred.as_deref())?;
    Ok((
        m,
        AdvTrace {
            initial,
            epochs,
            pretrain,
        },
    ))
}

/// Reference main classifier for spuriousness: fit on the slice with a fixed
/// concept label, hard margin when separable and a converged logistic otherwise.
pub fn clean_main_classifier(ds: &LatentDataset) -> Result<LinearClassifier> {
    let sub = ds.make_clean_subset(1)?;
    if crate::lp::is_separable(&sub.points, &sub.y_main)? {
        Ok(maxmargin::train_max_margin(&sub.points, &sub.y_main, &TrainSettings::hard_margin())?.0)
    } else {
        maxmargin::train(&sub.points, &sub.y_main, &probe_settings_for(sub.n(), true, ds.seed))
    }
}

/// Accuracy of a converged logistic probe trained on the frozen encodings
/// of `train` and scored on `eval`.
pub fn post_hoc_probe_accuracy(m: &AdvModel, train: &LatentDataset, eval: &LatentDataset) -> Result<f64> {
    let zt = m.zeta(&train.points);
    let probe = maxmargin::train(&zt, &train.y_concept, &probe_settings_for(train.n(), true, train.seed))?;
    Ok(accuracy(&probe.predict(&m.zeta(&eval.points)), &eval.y_concept))
}

pub const DEFAULT_LAMBDAS: [f64; 8] = [1e-5, 1e-4, 1e-3, 0.01, 0.1, 0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    /// `None` when the run diverged.
    pub final_main_acc: Option<f64>,
    /// Adversary head accuracy at the end of training.
    pub final_probe_acc: Option<f64>,
    /// A fresh converged probe on the final encodings.
    pub posthoc_probe_acc: Option<f64>,
    pub final_spuriousness: Option<f64>,
    pub is_best: bool,
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub erm_main_acc: f64,
    pub erm_spuriousness: Option<f64>,
    pub erm_probe_acc: f64,
    pub rows: Vec<SweepRow>,
    pub models: Vec<Option<AdvModel>>,
}

impl SweepTable {
    pub fn best(&self) -> Option<(&SweepRow, &AdvModel)> {
        self.rows
            .iter()
            .zip(&self.models)
            .find(|(r, _)| r.is_best)
            .and_then(|(r, m)| m.as_ref().map(|m| (r, m)))
    }

    pub fn to_csv(&self) -> String {
        use crate::metrics::cell;
        let mut out = String::from("lambda,final_main_acc,final_probe_acc,final_spuriousness,is_best\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.lambda,
                cell(r.final_main_acc),
                cell(r.final_probe_acc),
                cell(r.final_spuriousness),
                r.is_best
            ));
        }
        out
    }
}

/// Allowed main-accuracy loss relative to ERM when picking the best lambda.
pub const BEST_ACC_SLACK: f64 = 0.05;

/// One AR run per lambda, in parallel. Best lambda minimizes main
/// spuriousness among runs within `BEST_ACC_SLACK` of ERM accuracy.
/// Diverged runs are kept as empty rows.
pub fn lambda_sweep(
    train: &LatentDataset,
    grid: &[f64],
    cfg: &AdvConfig,
    init: Init<'_>,
    eval: Option<AdvEval<'_>>,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return invalid("lambda grid is empty");
    }
    let ev = eval.unwrap_or(AdvEval { ds: train, clean: None });
    let (erm, erm_trace) = erm_train(train, cfg, Some(ev))?;
    let erm_probe_acc = post_hoc_probe_accuracy(&erm, train, ev.ds)?;
    let runs: Vec<Result<(Option<AdvModel>, SweepRow)>> = grid
        .par_iter()
        .map(|&lambda| {
            let c = AdvConfig { lambda, ..cfg.clone() };
            let mut row = SweepRow {
                lambda,
                final_main_acc: None,
                final_probe_acc: None,
                posthoc_probe_acc: None,
                final_spuriousness: None,
                is_best: false,
                diverged_at: None,
            };
            match adv_train(train, &c, init, Some(ev)) {
                Ok((m, t)) => {
                    let last = t.last();
                    row.final_main_acc = Some(last.main_acc);
                    row.final_probe_acc = Some(last.probe_acc);
                    row.posthoc_probe_acc = post_hoc_probe_accuracy(&m, train, ev.ds).ok();
                    row.final_spuriousness = last.main_spuriousness;
                    Ok((Some(m), row))
                }
                Err(Error::Numerical { epoch, .. }) => {
                    row.diverged_at = Some(epoch);
                    Ok((None, row))
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(grid.len());
    let mut models = Vec::with_capacity(grid.len());
    for r in runs {
        let (m, row) = r?;
        models.push(m);
        rows.push(row);
    }
    let erm_acc = erm_trace.last().main_acc;
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.final_main_acc.is_some_and(|a| a >= erm_acc - BEST_ACC_SLACK))
        .filter_map(|(i, r)| r.final_spuriousness.map(|s| (i, s)))
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, b)) if b <= s => acc,
            _ => Some((i, s)),
        });
    if let Some((i, _)) = best {
        rows[i].is_best = true;
    }
    Ok(SweepTable {
        erm_main_acc: erm_acc,
        erm_spuriousness: erm_trace.last().main_spuriousness,
        erm_probe_acc,
        rows,
        models,
    })
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(parameter, index, analytic, numeric)` per checked coordinate.
    pub coords: Vec<(String, usize, f64, f64)>,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences of `L_main - lambda L_probe` at `count` random
/// encoder coordinates, against the reversed-gradient encoder update.
pub fn gradient_check(m: &AdvModel, ds: &LatentDataset, count: usize, seed: u64) -> Result<GradCheck> {
    m.validate()?;
    if ds.dim() != m.input_dim() {
        return invalid("data dimension differs from the model input");
    }
    let g = gradients(m, &ds.points, &ds.y_main, &ds.y_concept);
    let mut slots: Vec<(&str, usize)> = (0..m.encoder.len()).map(|i| ("encoder", i)).collect();
    if let Some(h) = &m.hidden {
        slots.extend((0..h.w.len()).map(|i| ("hidden_w", i)));
        slots.extend((0..h.b.len()).map(|i| ("hidden_b", i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(&str, usize)> = slots.choose_multiple(&mut rng, count.min(slots.len())).copied().collect();
    let eps = 1e-5;
    let mut out = GradCheck {
        coords: Vec::with_capacity(picks.len()),
        max_rel_err: 0.0,
    };
    for (name, i) in picks {
        let at = |delta: f64| -> f64 {
            let mut p = m.clone();
            match name {
                "encoder" => p.encoder[i] += delta,
                "hidden_w" => p.hidden.as_mut().unwrap().w[i] += delta,
                _ => p.hidden.as_mut().unwrap().b[i] += delta,
            }
            losses(&p, &ds.points, &ds.y_main, &ds.y_concept).2
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        let analytic = match name {
            "encoder" => g.encoder[i],
            "hidden_w" => g.hidden_w.as_ref().unwrap()[i],
            _ => g.hidden_b.as_ref().unwrap()[i],
        };
        out.max_rel_err = out.max_rel_err.max(rel_err(analytic, numeric));
        out.coords.push((name.to_string(), i, analytic, numeric));
    }
    Ok(out)
}

// Scalar-encoder constructions. A scalar encoder is a linear classifier
// over the latent space: the main head is the identity, the probe head `beta`.

fn unit_probe_direction(ds: &LatentDataset) -> Result<DVector<f64>> {
    let rep = theory::check_assumptions(ds, TaskKind::Probe)?;
    if !rep.a32 {
        return Err(Error::Assumption("concept block does not separate y_concept".into()));
    }
    let clf = rep.invariant.expect("invariant classifier when a32 holds");
    let sp = TaskKind::Probe.invariant(ds);
    let w = clf.weights.rows(sp.start, sp.len()).into_owned();
    Ok(w.normalize())
}

fn concept_proj(ds: &LatentDataset, w_p: &DVector<f64>) -> Vec<f64> {
    let r = TaskKind::Main.spurious(ds);
    (0..ds.n())
        .map(|i| ds.points.row(i).columns(r.start, r.len()).transpose().dot(w_p))
        .collect()
}

/// Accuracy of the best 1-D probe head `beta * zeta` (no bias), with the
/// sign chosen by a converged logistic fit.
fn scalar_probe(zeta: &DVector<f64>, y: &[i8]) -> Result<(f64, f64)> {
    let x = DMatrix::from_column_slice(zeta.len(), 1, zeta.as_slice());
    let s = TrainSettings {
        l2: HEAD_L2,
        ..probe_settings_for(zeta.len(), false, 0)
    };
    let clf = maxmargin::train(&x, y, &s)?;
    let beta = clf.weights[0];
    let pred: Vec<i8> = zeta.iter().map(|&v| sign(beta * v)).collect();
    Ok((beta, accuracy(&pred, y)))
}

#[derive(Clone, Debug)]
pub struct IndistinguishableReport {
    pub alpha: f64,
    pub alpha_lb: f64,
    /// The perturbation uses the probe direction (else the margin-point witness).
    pub eps_is_probe_direction: bool,
    pub beta_star: f64,
    pub beta_alpha: f64,
    pub probe_acc_star: f64,
    pub probe_acc_alpha: f64,
    pub same_signs: bool,
    pub main_margin_star: f64,
    pub main_margin_alpha: f64,
    pub norm_star: f64,
    pub norm_alpha: f64,
    pub h_star: LinearClassifier,
    pub h_alpha: LinearClassifier,
}

impl IndistinguishableReport {
    pub fn probe_acc_equal(&self) -> bool {
        self.probe_acc_star == self.probe_acc_alpha
    }

    pub fn margin_larger(&self) -> bool {
        self.main_margin_alpha > self.main_margin_star
    }
}

/// Compare two scalar encoders: fresh probe heads on each, and main margins.
pub fn compare_encoders(
    ds: &LatentDataset,
    h_star: &LinearClassifier,
    h_alpha: &LinearClassifier,
) -> Result<IndistinguishableReport> {
    let zs = h_star.scores(&ds.points);
    let za = h_alpha.scores(&ds.points);
    let (beta_star, probe_acc_star) = scalar_probe(&zs, &ds.y_concept)?;
    let (beta_alpha, probe_acc_alpha) = scalar_probe(&za, &ds.y_concept)?;
    let tau = TrainSettings::hard_margin().tau_margin;
    Ok(IndistinguishableReport {
        alpha: 1.0,
        alpha_lb: 0.0,
        eps_is_probe_direction: false,
        beta_star,
        beta_alpha,
        probe_acc_star,
        probe_acc_alpha,
        same_signs: zs.iter().zip(za.iter()).all(|(a, b)| sign(*a) == sign(*b)),
        main_margin_star: margins(h_star, &ds.points, &ds.y_main, tau).min_margin,
        main_margin_alpha: margins(h_alpha, &ds.points, &ds.y_main, tau).min_margin,
        norm_star: h_star.norm(),
        norm_alpha: h_alpha.norm(),
        h_star: h_star.clone(),
        h_alpha: h_alpha.clone(),
    })
}

/// The desired encoder and its spurious-using perturbation, both scalar.
pub fn verify_indistinguishable(ds: &LatentDataset) -> Result<IndistinguishableReport> {
    let rep = theory::check_assumptions(ds, TaskKind::Main)?;
    if !rep.a32 {
        return Err(Error::Assumption("main block does not separate y_main (main task)".into()));
    }
    if rep.a33 != Some(true) {
        return Err(Error::Assumption(
            "concept block does not separate the main margin points (main task)".into(),
        ));
    }
    let w_p = unit_probe_direction(ds)?;
    let h_star = rep.invariant.clone().expect("invariant classifier when a32 holds");
    let proj = concept_proj(ds, &w_p);
    let probe_dir_ok = rep
        .margin_points
        .iter()
        .all(|&i| f64::from(ds.y_main[i]) * proj[i] > 0.0);
    let eps = if probe_dir_ok {
        w_p
    } else {
        rep.witness.clone().expect("witness when a33 holds")
    };
    let (bounds, pc) = theory::construct_perturbed(&h_star, ds, TaskKind::Main, &eps)?;
    let mut out = compare_encoders(ds, &h_star, &pc.combined)?;
    out.alpha = pc.alpha;
    out.alpha_lb = bounds.lb_overall;
    out.eps_is_probe_direction = probe_dir_ok;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EscapeVerdict {
    /// `E(h_alpha) > E(h_star)`.
    Escaped,
    /// Assumptions held but the objective did not improve.
    Failed,
    NotApplicable(String),
}

#[derive(Clone, Debug)]
pub struct EscapeReport {
    pub verdict: EscapeVerdict,
    pub beta: f64,
    pub alpha_lb1: f64,
    pub alpha_lb2: f64,
    pub alpha_lb3: f64,
    pub alpha: f64,
    pub objective_star: f64,
    pub objective_alpha: f64,
}

impl EscapeReport {
    fn not_applicable(beta: f64, why: impl Into<String>) -> Self {
        EscapeReport {
            verdict: EscapeVerdict::NotApplicable(why.into()),
            beta,
            alpha_lb1: f64::NAN,
            alpha_lb2: f64::NAN,
            alpha_lb3: f64::NAN,
            alpha: f64::NAN,
            objective_star: f64::NAN,
            objective_alpha: f64::NAN,
        }
    }

    pub fn holds_or_not_applicable(&self) -> bool {
        !matches!(self.verdict, EscapeVerdict::Failed)
    }
}

/// `min_i y_m h(z_i) - min_i y_p beta h(z_i)`.
pub fn encoder_objective(h: &LinearClassifier, ds: &LatentDataset, beta: f64) -> f64 {
    let s = h.scores(&ds.points);
    let main = (0..ds.n()).map(|i| f64::from(ds.y_main[i]) * s[i]).fold(f64::INFINITY, f64::min);
    let probe = (0..ds.n())
        .map(|i| f64::from(ds.y_concept[i]) * beta * s[i])
        .fold(f64::INFINITY, f64::min);
    main - probe
}

fn margin_set(m: &[f64], tau: f64) -> Vec<usize> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = lo + tau * lo.abs().max(1.0);
    (0..m.len()).filter(|&i| m[i] <= cut).collect()
}

/// Smallest alpha keeping the margin set of `m` (a superset of the perturbed
/// one); `shift[i]` is the perturbation direction's margin contribution.
fn keep_margin_points(m: &[f64], shift: &[f64], set: &[usize], nrm: f64) -> f64 {
    let mut lb: f64 = 0.0;
    let inset: std::collections::HashSet<usize> = set.iter().copied().collect();
    for &a in set {
        for r in (0..m.len()).filter(|r| !inset.contains(r)) {
            let num = nrm * (shift[a] - shift[r]);
            if num <= 0.0 {
                continue;
            }
            let g = num / (m[r] - m[a]);
            lb = lb.max(g / (1.0 + g * g).sqrt());
        }
    }
    lb
}

/// Checks whether the perturbed encoder improves the combined max-margin
/// encoder objective against a probe head `beta` (default: the sign that
/// maximizes the probe's minimum margin under the desired encoder).
pub fn verify_equilibrium_escape(ds: &LatentDataset, beta: Option<f64>) -> Result<EscapeReport> {
    let rep = theory::check_assumptions(ds, TaskKind::Main)?;
    let na = |b: f64, why: &str| Ok(EscapeReport::not_applicable(b, why));
    let b0 = beta.unwrap_or(f64::NAN);
    if !rep.holds() {
        return na(b0, "main-task separability assumptions fail");
    }
    let w_p = match unit_probe_direction(ds) {
        Ok(w) => w,
        Err(Error::Assumption(_)) => return na(b0, "concept block does not separate y_concept"),
        Err(e) => return Err(e),
    };
    let proj = concept_proj(ds, &w_p);
    if (0..ds.n()).any(|i| f64::from(ds.y_concept[i]) * proj[i] <= 0.0) {
        return na(b0, "probe direction needs a bias to separate y_concept");
    }
    let h_star = rep.invariant.clone().expect("invariant classifier when a32 holds");
    let s = h_star.scores(&ds.points);
    let n = ds.n();
    let ym: Vec<f64> = ds.y_main.iter().map(|&v| f64::from(v)).collect();
    let yp: Vec<f64> = ds.y_concept.iter().map(|&v| f64::from(v)).collect();
    let beta = beta.unwrap_or_else(|| {
        let min_for = |b: f64| (0..n).map(|i| yp[i] * b * s[i]).fold(f64::INFINITY, f64::min);
        if min_for(1.0) >= min_for(-1.0) {
            1.0
        } else {
            -1.0
        }
    });
    if beta == 0.0 || !beta.is_finite() {
        return invalid("probe head beta must be finite and nonzero");
    }
    let tau = TrainSettings::hard_margin().tau_margin;
    let m_main: Vec<f64> = (0..n).map(|i| ym[i] * s[i]).collect();
    let m_probe: Vec<f64> = (0..n).map(|i| yp[i] * beta * s[i]).collect();
    let main_set = margin_set(&m_main, tau);
    let probe_set = margin_set(&m_probe, tau);

    if main_set.iter().any(|&i| ds.y_main[i] != ds.y_concept[i]) {
        return na(beta, "labels differ on a main margin point");
    }
    for &a in &main_set {
        for &p in &probe_set {
            if ym[a] * proj[a] <= beta.abs() * yp[p] * proj[p] {
                return na(beta, "concept features of the main margin points are not predictive enough");
            }
        }
    }

    let (bounds, pc) = match theory::construct_perturbed(&h_star, ds, TaskKind::Main, &w_p) {
        Ok(v) => v,
        Err(Error::Assumption(why)) => return na(beta, &format!("perturbation: {why}")),
        Err(e) => return Err(e),
    };
    let nrm = h_star.norm();
    let main_shift: Vec<f64> = (0..n).map(|i| ym[i] * proj[i]).collect();
    let probe_shift: Vec<f64> = (0..n).map(|i| yp[i] * beta * proj[i]).collect();
    let lb2 = keep_margin_points(&m_main, &main_shift, &main_set, nrm)
        .max(keep_margin_points(&m_probe, &probe_shift, &probe_set, nrm));

    let mut lb3: f64 = 0.0;
    if beta > 0.0 {
        for &a in &main_set {
            for &p in &probe_set {
                let num = nrm * (main_shift[a] - probe_shift[p]);
                let den = m_main[a] - m_probe[p];
                if den <= 0.0 {
                    return na(beta, "desired encoder already balances the two margins; alpha interval is empty");
                }
                let g2 = (num / den).powi(2);
                lb3 = lb3.max((1.0 - g2) / (1.0 + g2));
            }
        }
    }
    let lb = bounds.lb_overall.max(lb2).max(lb3);
    if lb >= 1.0 {
        return na(beta, "alpha interval is empty");
    }
    let alpha = 0.5 * (1.0 + lb);
    let h_alpha = pc.at(alpha)?.combined;
    let e_star = encoder_objective(&h_star, ds, beta);
    let e_alpha = encoder_objective(&h_alpha, ds, beta);
    Ok(EscapeReport {
        verdict: if e_alpha > e_star {
            EscapeVerdict::Escaped
        } else {
            EscapeVerdict::Failed
        },
        beta,
        alpha_lb1: bounds.lb_overall,
        alpha_lb2: lb2,
        alpha_lb3: lb3,
        alpha,
        objective_star: e_star,
        objective_alpha: e_alpha,
    })
}

/// 1-D instance built so the escape check applies: main margin points
/// carry large agreeing concept features, all other concept features are small.
pub fn build_escape_instance(n_rest: usize, kappa: f64, seed: u64) -> Result<LatentDataset> {
    if !(0.5..1.0).contains(&kappa) {
        return invalid(format!("kappa {kappa} outside [0.5, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<[f64; 2]> = vec![[1.0, 3.0], [-1.0, -3.0]];
    let mut y_main = vec![1i8, -1];
    let mut y_concept = vec![1i8, -1];
    for k in 0..n_rest {
        let ym: i8 = if k % 2 == 0 { 1 } else { -1 };
        let yp = if rng.gen::<f64>() < kappa { ym } else { -ym };
        let zm = f64::from(ym) * rng.gen_range(1.5..3.0);
        let zp = f64::from(yp) * rng.gen_range(0.5..1.0);
        rows.push([zm, zp]);
        y_main.push(ym);
        y_concept.push(yp);
    }
    let n = rows.len();
    let points = DMatrix::from_fn(n, 2, |i, j| rows[i][j]);
    let ds = LatentDataset {
        points,
        kappa_realized: crate::latent::compute_kappa(&y_main, &y_concept)?,
        y_main,
        y_concept,
        d_m: 1,
        d_p: 1,
        seed,
        offsets: vec![0.0; 2],
        zero_centered: true,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{gen_disentangled, GenConfig};

    fn small(seed: u64, kappa: f64) -> LatentDataset {
        gen_disentangled(&GenConfig {
            n_points: 200,
            d_m: 2,
            d_p: 2,
            kappa_target: kappa,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ds = small(1, 0.8);
        for hidden in [None, Some(5)] {
            let m = AdvModel::new_random(ds.dim(), 3, hidden, 0.7, 4).unwrap();
            let gc = gradient_check(&m, &ds, 10, 9).unwrap();
            assert_eq!(gc.coords.len(), 10);
            assert!(gc.max_rel_err < 1e-4, "{hidden:?}: {gc:?}");
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let ds = small(2, 0.7);
        let m = AdvModel::new_random(ds.dim(), 2, None, 0.3, 1).unwrap();
        let g = gradients(&m, &ds.points, &ds.y_main, &ds.y_concept);
        let eps = 1e-6;
        let mut p = m.clone();
        p.main_w[1] += eps;
        let mut q = m.clone();
        q.main_w[1] -= eps;
        let num = (losses(&p, &ds.points, &ds.y_main, &ds.y_concept).0 - losses(&q, &ds.points, &ds.y_main, &ds.y_concept).0) / (2.0 * eps);
        assert!((g.main_w[1] - num).abs() < 1e-8);
        let mut p = m.clone();
        p.probe_b += eps;
        let mut q = m.clone();
        q.probe_b -= eps;
        let num = (losses(&p, &ds.points, &ds.y_main, &ds.y_concept).1 - losses(&q, &ds.points, &ds.y_main, &ds.y_concept).1) / (2.0 * eps);
        assert!((g.probe_b - num).abs() < 1e-8);
    }

    #[test]
    fn zero_lambda_is_erm_bitwise() {
        let ds = small(3, 0.8);
        let cfg = AdvConfig {
            lambda: 0.0,
            epochs: 3,
            d_zeta: 4,
            seed: 11,
            ..AdvConfig::default()
        };
        let (adv, _) = adv_train(&ds, &cfg, Init::Random, None).unwrap();
        let (erm, _) = erm_train(&ds, &cfg, None).unwrap();
        assert_eq!(adv.encoder, erm.encoder);
        assert_eq!(adv.main_w, erm.main_w);
        assert_eq!(adv.main_b.to_bits(), erm.main_b.to_bits());
        assert_ne!(adv.probe_w, erm.probe_w);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small(4, 0.7);
        let cfg = AdvConfig {
            epochs: 2,
            hidden: Some(6),
            schedule: Schedule::ProbeFirst,
            ..AdvConfig::default()
        };
        let a = adv_train(&ds, &cfg, Init::Random, None).unwrap();
        let b = adv_train(&ds, &cfg, Init::Random, None).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.epochs, b.1.epochs);
        assert_eq!(a.1.epochs.len(), 2);
        assert_eq!(a.1.to_csv().lines().count(), 3);
    }

    #[test]
    fn bad_config_is_rejected() {
        let ds = small(5, 0.7);
        for cfg in [
            AdvConfig { lambda: -1.0, ..AdvConfig::default() },
            AdvConfig { epochs: 0, ..AdvConfig::default() },
        ] {
            assert!(adv_train(&ds, &cfg, Init::Random, None).is_err());
        }
        assert!(lambda_sweep(&ds, &[], &AdvConfig::default(), Init::Random, None).is_err());
    }

    #[test]
    fn diverging_run_names_the_epoch() {
        let ds = small(6, 0.7).with_points(small(6, 0.7).points * 1e6);
        let cfg = AdvConfig {
            lr: 1e6,
            epochs: 3,
            ..AdvConfig::default()
        };
        match adv_train(&ds, &cfg, Init::Random, None) {
            Err(Error::Numerical { epoch, .. }) => assert!((1..=3).contains(&epoch)),
            other => panic!("expected a numerical error, got {other:?}"),
        }
    }

    #[test]
    fn alpha_one_encoder_is_the_desired_one() {
        let ds = small(7, 0.8);
        let r = verify_indistinguishable(&ds).unwrap();
        let same = compare_encoders(&ds, &r.h_star, &r.h_star).unwrap();
        assert_eq!(same.main_margin_star, same.main_margin_alpha);
        assert!(!same.margin_larger());
        assert!(same.probe_acc_equal());
    }

    #[test]
    fn perturbed_encoder_is_indistinguishable_but_wider() {
        for seed in 0..5 {
            let ds = small(seed, 0.8);
            let r = verify_indistinguishable(&ds).unwrap();
            assert!(r.same_signs, "seed {seed}");
            assert!(r.probe_acc_equal(), "seed {seed}: {r:?}");
            assert!(r.margin_larger(), "seed {seed}: {r:?}");
            assert!((r.norm_star - r.norm_alpha).abs() < 1e-9 * r.norm_star);
        }
    }

    #[test]
    fn constructed_instance_escapes_for_both_beta_signs() {
        for seed in 0..5 {
            let ds = build_escape_instance(30, 0.8, seed).unwrap();
            for beta in [None, Some(1.0), Some(-1.0)] {
                let r = verify_equilibrium_escape(&ds, beta).unwrap();
                assert_eq!(r.verdict, EscapeVerdict::Escaped, "seed {seed} beta {beta:?}: {r:?}");
                assert!(r.objective_alpha > r.objective_star);
            }
        }
    }

    #[test]
    fn weak_concept_features_are_not_applicable() {
        let mut ds = build_escape_instance(30, 0.8, 3).unwrap();
        ds.points[(0, 1)] = 0.1;
        ds.points[(1, 1)] = -0.1;
        let r = verify_equilibrium_escape(&ds, Some(1.0)).unwrap();
        assert!(matches!(r.verdict, EscapeVerdict::NotApplicable(_)), "{r:?}");
    }

    #[test]
    fn sweep_marks_at_most_one_best() {
        let ds = small(8, 0.8);
        let clean = clean_main_classifier(&ds).unwrap();
        let cfg = AdvConfig {
            epochs: 2,
            d_zeta: 4,
            ..AdvConfig::default()
        };
        let t = lambda_sweep(
            &ds,
            &DEFAULT_LAMBDAS,
            &cfg,
            Init::Random,
            Some(AdvEval { ds: &ds, clean: Some(&clean) }),
        )
        .unwrap();
        assert_eq!(t.rows.len(), 8);
        assert!(t.rows.iter().filter(|r| r.is_best).count() <= 1);
        assert_eq!(t.to_csv().lines().count(), 9);
    }
}
