//! Experiment runner behind the `erasure-lab` binary.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::adversarial::{adv_train, clean_main_classifier, lambda_sweep, post_hoc_probe_accuracy, AdvConfig, AdvEval, Init};
use crate::error::{io_err, Error, Result};
use crate::inlp::{hash_matrix, inlp_run, EvalSet, InlpConfig};
use crate::latent::{compute_kappa, gen_disentangled, GenConfig, LatentDataset};
use crate::metrics::mean_sd;
use crate::text::{delta_prob_encoded, gen_corpus, Corpus, CorpusConfig, EmbeddingTable};
use crate::theory::{build_1d_instance, theory_row, Construction, TheoryRow};

pub use config::{Command, ExperimentConfig, InitKind, Instances, Source};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed_offset: u64,
    /// `report` only: exit 3 when an acceptance check fails.
    pub check: bool,
}

#[derive(Debug)]
pub enum RunError {
    Config(Error),
    Runtime(Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Runtime(e) => write!(f, "runtime failure: {e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub files: Vec<String>,
    pub failures: Vec<String>,
    pub checks_failed: usize,
}

impl RunSummary {
    pub fn exit_code(&self, check: bool) -> i32 {
        if !self.failures.is_empty() {
            EXIT_RUNTIME
        } else if check && self.checks_failed > 0 {
            EXIT_CHECK
        } else {
            EXIT_OK
        }
    }
}

/// Collects every written file with its hash, plus inputs, realized kappas and failures.
pub(crate) struct Artifacts {
    root: PathBuf,
    files: BTreeMap<String, String>,
    entries: Vec<(String, String, String)>,
    failures: Vec<String>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Artifacts {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
            entries: Vec::new(),
            failures: Vec::new(),
        })
    }

    pub(crate) fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn note(&mut self, kind: &str, name: &str, value: impl ToString) {
        self.entries.push((kind.to_string(), name.to_string(), value.to_string()));
    }

    fn fail(&mut self, cell: &str, e: &Error) {
        let msg = e.to_string().replace(['\n', ','], " ");
        self.note("failure", cell, &msg);
        self.failures.push(format!("{cell}: {msg}"));
    }

    fn finish(mut self, checks_failed: usize) -> Result<RunSummary> {
        let mut rows: Vec<(String, String, String)> = std::mem::take(&mut self.entries);
        rows.extend(self.files.iter().map(|(k, v)| ("file".to_string(), k.clone(), v.clone())));
        rows.sort();
        let mut out = String::from("kind,name,value\n");
        for (k, n, v) in &rows {
            out.push_str(&format!("{k},{n},{v}\n"));
        }
        let path = self.root.join("manifest.csv");
        fs::write(&path, out).map_err(io_err(&path))?;
        Ok(RunSummary {
            out: self.root,
            files: self.files.into_keys().collect(),
            failures: self.failures,
            checks_failed,
        })
    }
}

/// Runs `cmd`. Cells fan out over a rayon pool; outputs are written by one
/// aggregator in sorted cell order, so the artifact set is worker-independent.
pub fn run(cmd: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> std::result::Result<RunSummary, RunError> {
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| cfg.path.parent().unwrap_or(Path::new(".")).join("out"));
    if cmd == Command::Report {
        return report::run_report(cfg, &out, opts.check);
    }
    if let Some(w) = opts.workers {
        if w == 0 {
            return Err(RunError::Config(Error::InvalidArgument("--workers must be at least 1".into())));
        }
    }
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = opts.workers {
            b = b.num_threads(w);
        }
        b.build().map_err(|e| RunError::Runtime(Error::InvalidArgument(e.to_string())))?
    };
    let mut art = Artifacts::new(&out).map_err(RunError::Runtime)?;
    art.note("config", &file_name(&cfg.path), &cfg.hash);
    art.note("command", "command", cmd);
    art.note("seed_offset", "seed_offset", opts.seed_offset);
    let cells = cells(cmd, cfg, opts.seed_offset);
    let results: Vec<Result<CellOutput>> = pool.install(|| cells.par_iter().map(|c| run_cell(cmd, cfg, c)).collect());
    let mut summary = Summary::default();
    let mut theory_rows = Vec::new();
    for (cell, res) in cells.iter().zip(results) {
        match res {
            Ok(o) => {
                for (name, bytes) in &o.files {
                    art.write(name, bytes).map_err(RunError::Runtime)?;
                }
                for (k, v) in &o.inputs {
                    art.note("input", k, v);
                }
                if let Some(k) = o.kappa {
                    art.note("kappa", &cell.tag(), k);
                }
                for (metric, x, y) in o.metrics {
                    summary.push(cell.kappa, &metric, x, y);
                }
                theory_rows.extend(o.theory);
            }
            Err(e) => art.fail(&cell.tag(), &e),
        }
    }
    if cmd == Command::Gen && cfg.data.source == Source::Text {
        let dir = tempfile::tempdir().map_err(|e| RunError::Runtime(io_err(std::env::temp_dir())(e)))?;
        let p = dir.path().join("table.csv");
        let bytes = table(cfg).and_then(|t| t.save(&p)).and_then(|_| read_back(&p)).map_err(RunError::Runtime)?;
        art.write("data/embedding_table.csv", &bytes).map_err(RunError::Runtime)?;
    }
    if cmd == Command::TheoryCheck {
        art.write("theory.csv", theory_csv(&theory_rows).as_bytes()).map_err(RunError::Runtime)?;
    }
    art.write("summary.csv", summary.to_csv().as_bytes()).map_err(RunError::Runtime)?;
    art.finish(0).map_err(RunError::Runtime)
}

#[derive(Clone, Debug)]
struct Cell {
    kappa: f64,
    seed: u64,
    construction: Option<Construction>,
}

impl Cell {
    fn tag(&self) -> String {
        match self.construction {
            Some(c) => format!("{c}_s{}", self.seed),
            None => format!("k{:.2}_s{}", self.kappa, self.seed),
        }
    }
}

fn cells(cmd: Command, cfg: &ExperimentConfig, offset: u64) -> Vec<Cell> {
    let seeds = cfg.seeds.iter().map(|s| s + offset);
    if cmd == Command::TheoryCheck && cfg.theory.instances == Instances::Constructions {
        return seeds
            .enumerate()
            .map(|(i, seed)| Cell {
                kappa: f64::NAN,
                seed,
                construction: Some(Construction::ALL[i % 3]),
            })
            .collect();
    }
    let seeds: Vec<u64> = seeds.collect();
    cfg.kappas
        .iter()
        .flat_map(|&kappa| {
            seeds.iter().map(move |&seed| Cell {
                kappa,
                seed,
                construction: None,
            })
        })
        .collect()
}

#[derive(Default)]
struct CellOutput {
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<(String, String)>,
    kappa: Option<f64>,
    metrics: Vec<(String, f64, f64)>,
    theory: Vec<(String, TheoryRow)>,
}

impl CellOutput {
    fn metric(&mut self, name: &str, x: f64, y: Option<f64>) {
        if let Some(y) = y {
            self.metrics.push((name.to_string(), x, y));
        }
    }
}

/// Training and held-out data for one cell.
struct CellData {
    train: LatentDataset,
    eval: LatentDataset,
    toggled: Option<DMatrix<f64>>,
    corpora: Option<(Corpus, Corpus)>,
}

fn table(cfg: &ExperimentConfig) -> Result<EmbeddingTable> {
    EmbeddingTable::new(cfg.data.embedding_dim, cfg.data.embedding_seed)
}

fn latent(cfg: &ExperimentConfig, kappa: f64, noise: f64, seed: u64) -> Result<LatentDataset> {
    let d = &cfg.data;
    gen_disentangled(&GenConfig {
        n_points: d.n,
        d_m: d.d_m,
        d_p: d.d_p,
        kappa_target: kappa,
        class_separation: d.class_separation,
        feature_noise_sd: d.feature_noise_sd,
        label_noise_rate: noise,
        seed,
    })
}

fn corpus(cfg: &ExperimentConfig, kappa: f64, noise: f64, seed: u64) -> Result<Corpus> {
    gen_corpus(&CorpusConfig {
        n: cfg.data.n,
        kappa,
        label_noise_rate: noise,
        len: cfg.data.sentence_len,
        seed,
    })
}

fn cell_data(cfg: &ExperimentConfig, kappa: f64, seed: u64) -> Result<CellData> {
    let d = &cfg.data;
    let eval_seed = seed + d.eval_seed_offset;
    match d.source {
        Source::Latent => Ok(CellData {
            train: latent(cfg, kappa, d.label_noise, seed)?,
            eval: latent(cfg, kappa, d.eval_label_noise, eval_seed)?,
            toggled: None,
            corpora: None,
        }),
        Source::Text => {
            let t = table(cfg)?;
            let tr = corpus(cfg, kappa, d.label_noise, seed)?;
            let ev = corpus(cfg, kappa, d.eval_label_noise, eval_seed)?;
            Ok(CellData {
                train: tr.encode(&t)?,
                eval: ev.encode(&t)?,
                toggled: Some(ev.encode_toggled(&t)?),
                corpora: Some((tr, ev)),
            })
        }
    }
}

fn run_cell(cmd: Command, cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutput> {
    match cmd {
        Command::Gen => gen_cell(cfg, cell),
        Command::Inlp => inlp_cell(cfg, cell),
        Command::Adv => adv_cell(cfg, cell),
        Command::Sweep => sweep_cell(cfg, cell),
        Command::TheoryCheck => theory_cell(cfg, cell),
        Command::Report => unreachable!("report has no cells"),
    }
}

fn common(o: &mut CellOutput, cell: &Cell, data: &CellData) -> Result<()> {
    let tag = cell.tag();
    o.inputs.push((format!("train_{tag}"), hash_matrix(&data.train.points)));
    o.inputs.push((format!("eval_{tag}"), hash_matrix(&data.eval.points)));
    o.kappa = Some(compute_kappa(&data.train.y_main, &data.train.y_concept)?);
    Ok(())
}

pub(crate) fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn read_back(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn gen_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutput> {
    let mut o = CellOutput::default();
    let data = cell_data(cfg, cell.kappa, cell.seed)?;
    common(&mut o, cell, &data)?;
    let dir = tempfile::tempdir().map_err(io_err(std::env::temp_dir()))?;
    let tmp = dir.path();
    let tag = cell.tag();
    let save = |ds: &LatentDataset, name: &str, o: &mut CellOutput| -> Result<()> {
        let p = tmp.join(name);
        ds.save(&p)?;
        o.files.push((format!("data/{name}"), read_back(&p)?));
        o.files.push((format!("data/{name}.meta"), read_back(&crate::kv::sidecar(&p))?));
        Ok(())
    };
    save(&data.train, &format!("{tag}_train.csv"), &mut o)?;
    save(&data.eval, &format!("{tag}_eval.csv"), &mut o)?;
    if let Some((tr, ev)) = &data.corpora {
        for (c, part) in [(tr, "train"), (ev, "eval")] {
            let (s, l) = (tmp.join("s.txt"), tmp.join("l.csv"));
            c.save(&s, &l)?;
            o.files.push((format!("data/{tag}_{part}_sentences.txt"), read_back(&s)?));
            o.files.push((format!("data/{tag}_{part}_labels.csv"), read_back(&l)?));
        }
    }
    o.metric("realized_kappa", 0.0, o.kappa);
    Ok(o)
}

fn inlp_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutput> {
    let mut o = CellOutput::default();
    let data = cell_data(cfg, cell.kappa, cell.seed)?;
    common(&mut o, cell, &data)?;
    let clean = clean_main_classifier(&data.train)?;
    let p = &cfg.inlp;
    let icfg = InlpConfig {
        retrain_main: p.retrain_main,
        early_stop: p.early_stop,
        drop_delta: p.drop_delta,
        min_probe_gain: p.min_probe_gain,
        ..InlpConfig::for_dataset(&data.train, p.iters, cell.seed)
    };
    let eval = EvalSet {
        ds: &data.eval,
        toggled: data.toggled.as_ref(),
    };
    let trace = inlp_run(&data.train, &clean, &icfg, Some(eval))?;
    let tag = cell.tag();
    o.files.push((format!("inlp/{tag}.csv"), trace.to_csv().into_bytes()));
    o.files.push((format!("inlp/{tag}_probes.csv"), trace.probes_csv().into_bytes()));
    let base = trace.baseline.main_acc_all;
    let mut max_change: f64 = 0.0;
    for m in trace.rows() {
        let x = m.iter as f64;
        o.metric("main_acc", x, Some(m.main_acc_all));
        o.metric("main_acc_min", x, m.main_acc_min);
        o.metric("probe_acc", x, m.probe_acc_pre);
        o.metric("probe_spuriousness", x, m.probe_spuriousness);
        o.metric("main_spuriousness", x, m.main_spuriousness);
        o.metric("mean_norm", x, Some(m.mean_norm));
        o.metric("delta_prob", x, m.delta_prob);
        max_change = max_change.max((m.main_acc_all - base).abs());
    }
    let early_psi = trace
        .rows()
        .filter(|m| (1..=5).contains(&m.iter))
        .filter_map(|m| m.probe_spuriousness)
        .fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
    o.metric("final_main_acc", 0.0, Some(trace.final_metrics().main_acc_all));
    o.metric("max_acc_change", 0.0, Some(max_change));
    o.metric("max_probe_spuriousness_first5", 0.0, early_psi);
    o.metric("first_drop_iter", 0.0, first_below(&trace, 0.9));
    Ok(o)
}

/// First iteration whose main accuracy is below `level`.
fn first_below(trace: &crate::inlp::InlpTrace, level: f64) -> Option<f64> {
    trace.rows().find(|m| m.main_acc_all < level).map(|m| m.iter as f64)
}

fn adv_config(cfg: &ExperimentConfig, seed: u64, lambda: f64) -> AdvConfig {
    let a = &cfg.adv;
    AdvConfig {
        lambda,
        epochs: a.epochs,
        lr: a.lr,
        d_zeta: a.d_zeta,
        hidden: a.hidden,
        batch_size: a.batch_size,
        seed,
        schedule: a.schedule,
    }
}

fn clean_init_data(cfg: &ExperimentConfig, seed: u64) -> Result<Option<LatentDataset>> {
    if cfg.adv.init != InitKind::FromClean {
        return Ok(None);
    }
    let d = &cfg.data;
    let seed = crate::latent::split_seed(seed, 3);
    Ok(Some(match d.source {
        Source::Latent => latent(cfg, cfg.adv.clean_kappa, d.label_noise, seed)?,
        Source::Text => corpus(cfg, cfg.adv.clean_kappa, d.label_noise, seed)?.encode(&table(cfg)?)?,
    }))
}

fn adv_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutput> {
    let mut o = CellOutput::default();
    let data = cell_data(cfg, cell.kappa, cell.seed)?;
    common(&mut o, cell, &data)?;
    let clean = clean_main_classifier(&data.train)?;
    let clean_ds = clean_init_data(cfg, cell.seed)?;
    let init = clean_ds.as_ref().map_or(Init::Random, Init::FromClean);
    let acfg = adv_config(cfg, cell.seed, cfg.adv.lambda);
    let eval = AdvEval {
        ds: &data.eval,
        clean: Some(&clean),
    };
    let (m, trace) = adv_train(&data.train, &acfg, init, Some(eval))?;
    o.files.push((format!("adv/{}.csv", cell.tag()), trace.to_csv().into_bytes()));
    let shift = trace.pretrain.len();
    for (e, off) in trace.pretrain.iter().map(|e| (e, 0)).chain(trace.epochs.iter().map(|e| (e, shift))) {
        let x = (e.epoch + off) as f64;
        o.metric("main_loss", x, Some(e.main_loss));
        o.metric("probe_loss", x, Some(e.probe_loss));
        o.metric("main_acc", x, Some(e.main_acc));
        o.metric("probe_acc", x, Some(e.probe_acc));
        o.metric("main_spuriousness", x, e.main_spuriousness);
    }
    let start = trace.initial.main_spuriousness;
    let peak = trace.epochs.iter().filter_map(|e| e.main_spuriousness).fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v))));
    let rise = start.zip(peak).map(|(s, p)| p - s);
    o.metric("spuriousness_increase", 0.0, rise);
    o.metric("spuriousness_increase_hit", 0.0, rise.map(|r| f64::from(u8::from(r >= 0.1))));
    o.metric("final_main_acc", 0.0, Some(trace.last().main_acc));
    o.metric("final_probe_acc", 0.0, Some(trace.last().probe_acc));
    o.metric("final_spuriousness", 0.0, trace.last().main_spuriousness);
    o.metric("posthoc_probe_acc", 0.0, post_hoc_probe_accuracy(&m, &data.train, &data.eval).ok());
    if let Some(t) = &data.toggled {
        o.metric("final_delta_prob", 0.0, Some(delta_prob_encoded(&m, &data.eval.points, t)));
    }
    Ok(o)
}

fn sweep_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutput> {
    let mut o = CellOutput::default();
    let data = cell_data(cfg, cell.kappa, cell.seed)?;
    common(&mut o, cell, &data)?;
    let clean = clean_main_classifier(&data.train)?;
    let clean_ds = clean_init_data(cfg, cell.seed)?;
    let init = clean_ds.as_ref().map_or(Init::Random, Init::FromClean);
    let acfg = adv_config(cfg, cell.seed, 0.0);
    let eval = AdvEval {
        ds: &data.eval,
        clean: Some(&clean),
    };
    let table = lambda_sweep(&data.train, &cfg.adv.lambdas, &acfg, init, Some(eval))?;
    o.files.push((format!("sweep/{}.csv", cell.tag()), table.to_csv().into_bytes()));
    for (r, m) in table.rows.iter().zip(&table.models) {
        o.metric("final_main_acc", r.lambda, r.final_main_acc);
        o.metric("final_probe_acc", r.lambda, r.final_probe_acc);
        o.metric("posthoc_probe_acc", r.lambda, r.posthoc_probe_acc);
        o.metric("final_spuriousness", r.lambda, r.final_spuriousness);
        if let (Some(m), Some(t)) = (m, &data.toggled) {
            o.metric("delta_prob", r.lambda, Some(delta_prob_encoded(m, &data.eval.points, t)));
        }
    }
    o.metric("erm_main_acc", 0.0, Some(table.erm_main_acc));
    o.metric("erm_spuriousness", 0.0, table.erm_spuriousness);
    o.metric("erm_probe_acc", 0.0, Some(table.erm_probe_acc));
    if let Some((r, m)) = table.best() {
        o.metric("best_lambda", 0.0, Some(r.lambda));
        o.metric("best_main_acc", 0.0, r.final_main_acc);
        o.metric("best_probe_acc", 0.0, r.final_probe_acc);
        o.metric("best_spuriousness", 0.0, r.final_spuriousness);
        if let Some(t) = &data.toggled {
            o.metric("best_delta_prob", 0.0, Some(delta_prob_encoded(m, &data.eval.points, t)));
        }
    }
    Ok(o)
}

fn theory_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutput> {
    let mut o = CellOutput::default();
    let (ds, name) = match cell.construction {
        Some(c) => (build_1d_instance(c, cfg.data.d_p.max(1), cfg.data.n, cell.seed)?, c.to_string()),
        None => {
            let ds = latent(cfg, cell.kappa, cfg.data.label_noise, cell.seed)?;
            (ds, format!("k{:.2}", cell.kappa))
        }
    };
    o.inputs.push((format!("instance_{}", cell.tag()), hash_matrix(&ds.points)));
    o.kappa = Some(ds.kappa_realized);
    let row = theory_row(&ds, cfg.theory.task)?;
    o.metric("a32", 0.0, Some(f64::from(u8::from(row.a32))));
    o.metric("iff_agree", 0.0, row.iff_agree.map(|b| f64::from(u8::from(b))));
    o.metric("alpha_lb", 0.0, row.alpha_lb);
    o.theory.push((name, row));
    Ok(o)
}

fn theory_csv(rows: &[(String, TheoryRow)]) -> String {
    let mut out = String::from("instance,");
    out.push_str(&TheoryRow::HEADER.join(","));
    out.push('\n');
    for (name, r) in rows {
        out.push_str(name);
        out.push(',');
        out.push_str(&r.record().join(","));
        out.push('\n');
    }
    out
}

/// Per-(kappa, metric, x) values across seeds.
#[derive(Default)]
pub(crate) struct Summary {
    cells: BTreeMap<(u64, String, u64), (f64, f64, Vec<f64>)>,
}

impl Summary {
    fn push(&mut self, kappa: f64, metric: &str, x: f64, y: f64) {
        self.cells
            .entry((kappa.to_bits(), metric.to_string(), x.to_bits()))
            .or_insert_with(|| (kappa, x, Vec::new()))
            .2
            .push(y);
    }

    fn to_csv(&self) -> String {
        let mut rows: Vec<_> = self.cells.iter().map(|((_, m, _), (k, x, v))| (*k, m.as_str(), *x, v)).collect();
        rows.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| a.1.cmp(b.1))
                .then_with(|| a.2.total_cmp(&b.2))
        });
        let mut out = String::from("kappa,metric,x,mean,sd,count\n");
        for (k, m, x, v) in rows {
            let (mean, sd) = mean_sd(v);
            let k = if k.is_nan() { String::new() } else { k.to_string() };
            out.push_str(&format!("{k},{m},{x},{mean},{sd},{}\n", v.len()));
        }
        out
    }
}
