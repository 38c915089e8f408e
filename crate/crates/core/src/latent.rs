//! Disentangled latent datasets `[z_m, z_p]` with paired binary labels.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, io_err, Error, Result};
use crate::kv;

/// Derive an independent stream seed from a base seed and a tag.
pub fn split_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub points: DMatrix<f64>,
    pub y_main: Vec<i8>,
    pub y_concept: Vec<i8>,
    pub d_m: usize,
    pub d_p: usize,
    pub seed: u64,
    pub kappa_realized: f64,
    /// Column means removed during generation.
    pub offsets: Vec<f64>,
    /// Whether downstream classifiers should fix the bias to zero.
    pub zero_centered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupPartition {
    pub s_maj: Vec<usize>,
    pub s_min: Vec<usize>,
    pub kappa: f64,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub n_points: usize,
    pub d_m: usize,
    pub d_p: usize,
    pub kappa_target: f64,
    pub class_separation: f64,
    pub feature_noise_sd: f64,
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_points: 1000,
            d_m: 1,
            d_p: 1,
            kappa_target: 0.5,
            class_separation: 4.0,
            feature_noise_sd: 0.5,
            label_noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.kappa_target) {
            return invalid(format!("kappa_target {} outside [0.5, 1]", self.kappa_target));
        }
        if !(0.0..0.5).contains(&self.label_noise_rate) {
            return invalid(format!("label_noise_rate {} outside [0, 0.5)", self.label_noise_rate));
        }
        if !(self.class_separation > 0.0) || !(self.feature_noise_sd >= 0.0) {
            return invalid("class_separation must be positive and feature_noise_sd nonnegative");
        }
        if self.d_m + self.d_p == 0 {
            return invalid("at least one feature column is required");
        }
        Ok(())
    }
}

/// Sizes of the (+,+), (-,-), (+,-), (-,+) groups for `n` points at `kappa`.
pub fn group_sizes(n: usize, kappa: f64) -> [usize; 4] {
    let n_maj = (kappa * n as f64).round() as usize;
    let n_min = n - n_maj;
    [n_maj.div_ceil(2), n_maj / 2, n_min.div_ceil(2), n_min / 2]
}

pub const GROUP_LABELS: [(i8, i8); 4] = [(1, 1), (-1, -1), (1, -1), (-1, 1)];

pub fn compute_kappa(y_main: &[i8], y_concept: &[i8]) -> Result<f64> {
    if y_main.len() != y_concept.len() {
        return invalid("label vectors differ in length");
    }
    if y_main.is_empty() {
        return invalid("cannot compute kappa of an empty label set");
    }
    let agree = y_main.iter().zip(y_concept).filter(|(a, b)| **a * **b > 0).count();
    Ok(agree as f64 / y_main.len() as f64)
}

pub fn partition(y_main: &[i8], y_concept: &[i8]) -> Result<GroupPartition> {
    let kappa = compute_kappa(y_main, y_concept)?;
    let (s_maj, s_min) = (0..y_main.len()).partition(|&i| y_main[i] == y_concept[i]);
    Ok(GroupPartition { s_maj, s_min, kappa })
}

pub fn flip_label_noise(labels: &[i8], rate: f64, seed: u64) -> Result<Vec<i8>> {
    if !(0.0..0.5).contains(&rate) {
        return invalid(format!("flip rate {rate} outside [0, 0.5)"));
    }
    let mut out = labels.to_vec();
    let k = (rate * labels.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, labels.len(), k) {
        out[i] = -out[i];
    }
    Ok(out)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let t: f64 = rng.sample(StandardNormal);
        if t.abs() <= 2.0 {
            return t;
        }
    }
}

pub fn gen_disentangled(cfg: &GenConfig) -> Result<LatentDataset> {
    cfg.validate()?;
    let n = cfg.n_points;
    let sizes = group_sizes(n, cfg.kappa_target);
    if n < 2 || sizes[0] + sizes[2] == 0 || sizes[1] + sizes[3] == 0 {
        return Err(Error::Infeasible(format!(
            "{n} points cannot realize kappa {} with both main classes present",
            cfg.kappa_target
        )));
    }
    let d = cfg.d_m + cfg.d_p;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels = Vec::with_capacity(n);
    for (g, &cnt) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat(GROUP_LABELS[g]).take(cnt));
    }
    labels.shuffle(&mut rng);

    let half = cfg.class_separation / 2.0;
    let mut points = DMatrix::zeros(n, d);
    for (i, &(ym, yp)) in labels.iter().enumerate() {
        for j in 0..d {
            let mean = if j < cfg.d_m { f64::from(ym) } else { f64::from(yp) } * half;
            points[(i, j)] = mean + cfg.feature_noise_sd * truncated_normal(&mut rng);
        }
    }
    let offsets = center_columns(&mut points);

    let mut y_main: Vec<i8> = labels.iter().map(|l| l.0).collect();
    let mut y_concept: Vec<i8> = labels.iter().map(|l| l.1).collect();
    if cfg.label_noise_rate > 0.0 {
        y_main = flip_label_noise(&y_main, cfg.label_noise_rate, split_seed(cfg.seed, 1))?;
        y_concept = flip_label_noise(&y_concept, cfg.label_noise_rate, split_seed(cfg.seed, 2))?;
    }
    let kappa_realized = compute_kappa(&y_main, &y_concept)?;
    Ok(LatentDataset {
        points,
        y_main,
        y_concept,
        d_m: cfg.d_m,
        d_p: cfg.d_p,
        seed: cfg.seed,
        kappa_realized,
        offsets,
        zero_centered: true,
    })
}

pub(crate) fn center_columns(m: &mut DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    (0..m.ncols())
        .map(|j| {
            let mu = m.column(j).sum() / n;
            m.column_mut(j).add_scalar_mut(-mu);
            mu
        })
        .collect()
}

/// Split `total` into integer parts proportional to `weights` (largest remainder).
pub(crate) fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &g in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if out[g] < weights[g] {
            out[g] += 1;
            rest -= 1;
        }
    }
    out
}

impl LatentDataset {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.d_m + self.d_p
    }

    pub fn z_m(&self) -> DMatrix<f64> {
        self.points.columns(0, self.d_m).into_owned()
    }

    pub fn z_p(&self) -> DMatrix<f64> {
        self.points.columns(self.d_m, self.d_p).into_owned()
    }

    pub fn partition(&self) -> GroupPartition {
        partition(&self.y_main, &self.y_concept).expect("dataset labels are consistent")
    }

    /// Group index for each point in `GROUP_LABELS` order.
    pub fn groups(&self) -> [Vec<usize>; 4] {
        let mut g: [Vec<usize>; 4] = Default::default();
        for i in 0..self.n() {
            let k = GROUP_LABELS
                .iter()
                .position(|&l| l == (self.y_main[i], self.y_concept[i]))
                .unwrap();
            g[k].push(i);
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.nrows();
        if self.points.ncols() != self.d_m + self.d_p {
            return invalid("column count differs from d_m + d_p");
        }
        if self.y_main.len() != n || self.y_concept.len() != n {
            return invalid("label count differs from row count");
        }
        if self.y_main.iter().chain(&self.y_concept).any(|&v| v != 1 && v != -1) {
            return invalid("labels must be -1 or +1");
        }
        Ok(())
    }

    /// Rows `idx` in that order; metadata carried over, kappa recomputed.
    pub fn subset(&self, idx: &[usize]) -> LatentDataset {
        let y_main: Vec<i8> = idx.iter().map(|&i| self.y_main[i]).collect();
        let y_concept: Vec<i8> = idx.iter().map(|&i| self.y_concept[i]).collect();
        LatentDataset {
            points: self.points.select_rows(idx),
            kappa_realized: compute_kappa(&y_main, &y_concept).unwrap_or(f64::NAN),
            y_main,
            y_concept,
            ..self.clone()
        }
    }

    /// Same labels, new representation of matching row count.
    pub fn with_points(&self, points: DMatrix<f64>) -> LatentDataset {
        assert_eq!(points.nrows(), self.n());
        LatentDataset {
            points,
            ..self.clone()
        }
    }

    pub fn rebalance_to_kappa(&self, kappa: f64, seed: u64) -> Result<LatentDataset> {
        if !(0.5..=1.0).contains(&kappa) {
            return invalid(format!("kappa {kappa} outside [0.5, 1]"));
        }
        let groups = self.groups();
        let avail: Vec<usize> = groups.iter().map(Vec::len).collect();
        let maj_avail = avail[0] + avail[1];
        let min_avail = avail[2] + avail[3];
        let (n_maj, n_min) = if kappa >= 1.0 {
            (maj_avail, 0)
        } else {
            let by_min = (kappa * min_avail as f64 / (1.0 - kappa)).round() as usize;
            if by_min <= maj_avail {
                (by_min, min_avail)
            } else {
                let n_min = ((1.0 - kappa) * maj_avail as f64 / kappa).round() as usize;
                (maj_avail, n_min.min(min_avail))
            }
        };
        if kappa > 0.5 && kappa < 1.0 && avail.contains(&0) {
            return Err(Error::Infeasible("rebalancing needs all four label groups".into()));
        }
        let maj = apportion(n_maj, &avail[0..2]);
        let min = apportion(n_min, &avail[2..4]);
        let take = [maj[0], maj[1], min[0], min[1]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = Vec::with_capacity(n_maj + n_min);
        for (g, &k) in take.iter().enumerate() {
            idx.extend(index::sample(&mut rng, groups[g].len(), k).into_iter().map(|j| groups[g][j]));
        }
        idx.sort_unstable();
        let out = self.subset(&idx);
        if !out.y_main.contains(&1) || !out.y_main.contains(&-1) {
            return Err(Error::Infeasible(format!("kappa {kappa} leaves a main class empty")));
        }
        if (out.kappa_realized - kappa).abs() > 1.0 / out.n() as f64 {
            return Err(Error::Infeasible(format!(
                "group counts realize kappa {} instead of {kappa}",
                out.kappa_realized
            )));
        }
        Ok(out)
    }

    pub fn make_clean_subset(&self, fixed_concept_label: i8) -> Result<LatentDataset> {
        if fixed_concept_label != 1 && fixed_concept_label != -1 {
            return invalid("fixed label must be -1 or +1");
        }
        let idx: Vec<usize> = (0..self.n()).filter(|&i| self.y_concept[i] == fixed_concept_label).collect();
        let out = self.subset(&idx);
        if !out.y_main.contains(&1) || !out.y_main.contains(&-1) {
            return Err(Error::Infeasible(
                "a main-task class vanishes in the clean slice".into(),
            ));
        }
        Ok(out)
    }

    /// Slice with constant `y_main`, used to train a clean probe.
    pub fn make_clean_probe_subset(&self, fixed_main_label: i8) -> Result<LatentDataset> {
        let idx: Vec<usize> = (0..self.n()).filter(|&i| self.y_main[i] == fixed_main_label).collect();
        let out = self.subset(&idx);
        if !out.y_concept.contains(&1) || !out.y_concept.contains(&-1) {
            return Err(Error::Infeasible(
                "a concept class vanishes in the clean slice".into(),
            ));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["idx".to_string(), "y_main".into(), "y_concept".into()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![i.to_string(), self.y_main[i].to_string(), self.y_concept[i].to_string()];
            rec.extend(self.points.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(io_err(path))?;
        let offsets = self.offsets.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        kv::write(
            &kv::sidecar(path),
            &[
                ("d_m", self.d_m.to_string()),
                ("d_p", self.d_p.to_string()),
                ("seed", self.seed.to_string()),
                ("kappa_realized", self.kappa_realized.to_string()),
                ("centering_offsets", offsets),
                ("zero_centered", self.zero_centered.to_string()),
                ("majority_convention", "agree".into()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<LatentDataset> {
        let side = kv::sidecar(path);
        let meta = kv::read(&side)?;
        let need = |k: &str| {
            meta.get(k).cloned().ok_or_else(|| Error::Parse {
                path: side.clone(),
                line: 0,
                msg: format!("missing key {k}"),
            })
        };
        if need("majority_convention")? != "agree" {
            return invalid("dataset uses a majority convention other than agreeing labels");
        }
        let d_m: usize = kv::get_parsed(&meta, "d_m", &side)?.unwrap();
        let d_p: usize = kv::get_parsed(&meta, "d_p", &side)?.ok_or_else(|| Error::Parse {
            path: side.clone(),
            line: 0,
            msg: "missing key d_p".into(),
        })?;
        let offsets_raw = need("centering_offsets")?;
        let offsets = if offsets_raw.is_empty() {
            Vec::new()
        } else {
            offsets_raw
                .split(',')
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: side.clone(),
                    line: 0,
                    msg: e.to_string(),
                })?
        };

        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let d = d_m + d_p;
        let mut flat = Vec::new();
        let (mut y_main, mut y_concept) = (Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                msg,
            };
            if rec.len() != d + 3 {
                return Err(bad(format!("expected {} fields, found {}", d + 3, rec.len())));
            }
            let num = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(e.to_string()));
            y_main.push(num(1)? as i8);
            y_concept.push(num(2)? as i8);
            for k in 0..d {
                flat.push(num(3 + k)?);
            }
        }
        let n = y_main.len();
        let ds = LatentDataset {
            points: DMatrix::from_row_slice(n, d, &flat),
            kappa_realized: compute_kappa(&y_main, &y_concept).unwrap_or(f64::NAN),
            y_main,
            y_concept,
            d_m,
            d_p,
            seed: kv::get_parsed(&meta, "seed", &side)?.unwrap_or(0),
            offsets,
            zero_centered: kv::get_parsed(&meta, "zero_centered", &side)?.unwrap_or(false),
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp;

    fn cfg(n: usize, kappa: f64, seed: u64) -> GenConfig {
        GenConfig {
            n_points: n,
            kappa_target: kappa,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(compute_kappa(&[1, -1, 1], &[1, -1, 1]).unwrap(), 1.0);
        assert_eq!(compute_kappa(&[1, -1, 1], &[-1, 1, -1]).unwrap(), 0.0);
        let mut ym = Vec::new();
        let mut yp = Vec::new();
        for (g, cnt) in [40, 40, 10, 10].iter().enumerate() {
            for _ in 0..*cnt {
                ym.push(GROUP_LABELS[g].0);
                yp.push(GROUP_LABELS[g].1);
            }
        }
        assert!((compute_kappa(&ym, &yp).unwrap() - 0.8).abs() < 1e-15);
        assert!(compute_kappa(&[], &[]).is_err());
    }

    #[test]
    fn full_correlation_gives_equal_labels() {
        let ds = gen_disentangled(&cfg(100, 1.0, 3)).unwrap();
        assert_eq!(ds.y_main, ds.y_concept);
    }

    #[test]
    fn half_kappa_is_balanced() {
        let ds = gen_disentangled(&cfg(1000, 0.5, 4)).unwrap();
        assert!((ds.kappa_realized - 0.5).abs() <= 0.001);
    }

    #[test]
    fn realized_kappa_within_resolution() {
        for &(n, k) in &[(37, 0.73), (101, 0.9), (50, 0.61)] {
            let ds = gen_disentangled(&cfg(n, k, 1)).unwrap();
            assert!((ds.kappa_realized - k).abs() <= 1.0 / n as f64);
        }
    }

    #[test]
    fn tiny_n_is_rejected() {
        assert!(matches!(gen_disentangled(&cfg(2, 0.5, 0)), Err(Error::Infeasible(_))));
        assert!(gen_disentangled(&cfg(1, 1.0, 0)).is_err());
    }

    #[test]
    fn columns_are_centered() {
        let ds = gen_disentangled(&cfg(300, 0.8, 9)).unwrap();
        for j in 0..ds.dim() {
            assert!(ds.points.column(j).sum().abs() < 1e-10);
        }
        assert!(ds.zero_centered);
    }

    #[test]
    fn deterministic_generation() {
        let a = gen_disentangled(&cfg(200, 0.7, 5)).unwrap();
        let b = gen_disentangled(&cfg(200, 0.7, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn concept_block_separable_in_regime() {
        let ds = gen_disentangled(&GenConfig {
            d_p: 3,
            ..cfg(200, 0.8, 7)
        })
        .unwrap();
        assert!(lp::is_separable(&ds.z_p(), &ds.y_concept).unwrap());
    }

    #[test]
    fn flip_examples() {
        let l = vec![1i8; 10];
        assert_eq!(flip_label_noise(&l, 0.0, 1).unwrap(), l);
        let f = flip_label_noise(&l, 0.3, 1).unwrap();
        assert_eq!(f.iter().filter(|&&v| v == -1).count(), 3);
        assert_eq!(f, flip_label_noise(&l, 0.3, 1).unwrap());
        assert!(flip_label_noise(&l, 0.5, 1).is_err());
    }

    #[test]
    fn rebalance_grid() {
        let ds = gen_disentangled(&cfg(1000, 0.5, 2)).unwrap();
        for &k in &[0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let r = ds.rebalance_to_kappa(k, 3).unwrap();
            assert!((r.kappa_realized - k).abs() <= 1.0 / r.n() as f64, "{k}");
        }
        let half = ds.rebalance_to_kappa(0.5, 3).unwrap();
        let p = half.partition();
        assert_eq!(p.s_maj.len(), p.s_min.len());
        let full = ds.rebalance_to_kappa(1.0, 3).unwrap();
        assert_eq!(full.y_main, full.y_concept);
        assert!(ds.rebalance_to_kappa(0.4, 3).is_err());
    }

    #[test]
    fn rebalance_needs_groups() {
        let ds = gen_disentangled(&cfg(100, 1.0, 2)).unwrap();
        assert!(ds.rebalance_to_kappa(0.8, 1).is_err());
    }

    #[test]
    fn clean_subset_fixes_concept() {
        let ds = gen_disentangled(&cfg(1000, 0.5, 8)).unwrap();
        let c = ds.make_clean_subset(1).unwrap();
        assert!(c.y_concept.iter().all(|&v| v == 1));
        let pos = c.y_main.iter().filter(|&&v| v == 1).count() as f64 / c.n() as f64;
        assert!((pos - 0.5).abs() <= 0.02);
        let full = gen_disentangled(&cfg(100, 1.0, 8)).unwrap();
        assert!(full.make_clean_subset(1).is_err());
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(5, &[3, 3]), vec![3, 2]);
        assert_eq!(apportion(0, &[3, 3]), vec![0, 0]);
        assert_eq!(apportion(7, &[10, 1, 2]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let ds = gen_disentangled(&GenConfig {
            d_m: 2,
            d_p: 3,
            ..cfg(40, 0.7, 6)
        })
        .unwrap();
        ds.save(&p).unwrap();
        assert_eq!(LatentDataset::load(&p).unwrap(), ds);
    }
}
