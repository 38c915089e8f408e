//! Linear classifiers over a latent space and the shared decision rule.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, io_err, Error, Result};
use crate::kv;

/// Label sign with the tie rule `sign(0) = +1`.
#[inline]
pub fn sign(score: f64) -> i8 {
    if score >= 0.0 {
        1
    } else {
        -1
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Which feature columns a classifier was fit on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSet {
    All,
    MainOnly,
    ConceptOnly,
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::All => "all",
            FeatureSet::MainOnly => "main-only",
            FeatureSet::ConceptOnly => "concept-only",
        })
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FeatureSet::All),
            "main-only" => Ok(FeatureSet::MainOnly),
            "concept-only" => Ok(FeatureSet::ConceptOnly),
            other => invalid(format!("unknown feature set {other:?}")),
        }
    }
}

/// Anything that maps a batch of rows to signed scores.
pub trait Predictor {
    fn scores(&self, x: &DMatrix<f64>) -> DVector<f64>;

    fn predict(&self, x: &DMatrix<f64>) -> Vec<i8> {
        self.scores(x).iter().map(|&s| sign(s)).collect()
    }

    fn prob(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.scores(x).map(sigmoid)
    }
}

/// How a classifier was produced; written to the metadata sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainMeta {
    pub mode: String,
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            mode: "manual".into(),
            tol: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub trained_on: FeatureSet,
    pub meta: TrainMeta,
}

impl LinearClassifier {
    pub fn new(weights: DVector<f64>, bias: f64) -> Self {
        LinearClassifier {
            weights,
            bias,
            trained_on: FeatureSet::All,
            meta: TrainMeta::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn norm(&self) -> f64 {
        self.weights.norm()
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.weights.len());
        self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// Multiply weights and bias by `gamma`.
    pub fn scaled(&self, gamma: f64) -> Self {
        let mut c = self.clone();
        c.weights *= gamma;
        c.bias *= gamma;
        c
    }

    /// Lift a classifier fit on columns `[offset, offset + w.len())` into a `d`-dim space.
    pub fn embedded(&self, d: usize, offset: usize) -> Result<Self> {
        if offset + self.dim() > d {
            return invalid(format!(
                "cannot embed {}-dim weights at offset {offset} into {d} dims",
                self.dim()
            ));
        }
        let mut w = DVector::zeros(d);
        w.rows_mut(offset, self.dim()).copy_from(&self.weights);
        Ok(LinearClassifier {
            weights: w,
            ..self.clone()
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bias");
        for j in 0..self.dim() {
            out.push_str(&format!(",w{j}"));
        }
        out.push('\n');
        out.push_str(&self.bias.to_string());
        for w in self.weights.iter() {
            out.push(',');
            out.push_str(&w.to_string());
        }
        out.push('\n');
        fs::write(path, out).map_err(io_err(path))?;
        let meta = [
            ("mode", self.meta.mode.clone()),
            ("tol", self.meta.tol.to_string()),
            ("seed", self.meta.seed.to_string()),
            ("trained_on", self.trained_on.to_string()),
        ];
        kv::write(&kv::sidecar(path), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let row = text
            .lines()
            .nth(1)
            .ok_or_else(|| parse_err(path, 2, "missing value row"))?;
        let vals = row
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, 2, &e.to_string()))?;
        if vals.len() < 2 {
            return Err(parse_err(path, 2, "need bias and at least one weight"));
        }
        let mut clf = LinearClassifier::new(DVector::from_column_slice(&vals[1..]), vals[0]);
        let side = kv::sidecar(path);
        if side.exists() {
            let m = kv::read(&side)?;
            if let Some(v) = m.get("mode") {
                clf.meta.mode = v.clone();
            }
            clf.meta.tol = kv::get_parsed(&m, "tol", &side)?.unwrap_or(0.0);
            clf.meta.seed = kv::get_parsed(&m, "seed", &side)?.unwrap_or(0);
            if let Some(v) = m.get("trained_on") {
                clf.trained_on = v.parse()?;
            }
        }
        Ok(clf)
    }
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

impl Predictor for LinearClassifier {
    fn scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        assert_eq!(x.ncols(), self.dim(), "feature dimension mismatch");
        let mut s = x * &self.weights;
        s.add_scalar_mut(self.bias);
        s
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        (**self).scores(x)
    }
}

pub fn accuracy(pred: &[i8], y: &[i8]) -> f64 {
    assert_eq!(pred.len(), y.len());
    if y.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}
