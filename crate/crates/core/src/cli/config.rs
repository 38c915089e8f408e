//! Experiment config files: `key = value` lines, `[section]` headers,
//! comma-separated arrays, `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adversarial::{Schedule, DEFAULT_LAMBDAS};
use crate::error::{io_err, Error, Result};
use crate::theory::TaskKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    Inlp,
    Adv,
    TheoryCheck,
    Sweep,
    Report,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Gen,
        Command::Inlp,
        Command::Adv,
        Command::TheoryCheck,
        Command::Sweep,
        Command::Report,
    ];
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Gen => "gen",
            Command::Inlp => "inlp",
            Command::Adv => "adv",
            Command::TheoryCheck => "theory-check",
            Command::Sweep => "sweep",
            Command::Report => "report",
        })
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Command::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| format!("unknown command `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Latent,
    Text,
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "latent" => Ok(Source::Latent),
            "text" => Ok(Source::Text),
            _ => Err(format!("expected latent or text, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Random,
    FromClean,
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(InitKind::Random),
            "from_clean" | "from-clean" => Ok(InitKind::FromClean),
            _ => Err(format!("expected random or from_clean, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instances {
    Generated,
    Constructions,
}

impl FromStr for Instances {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "generated" => Ok(Instances::Generated),
            "constructions" => Ok(Instances::Constructions),
            _ => Err(format!("expected generated or constructions, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataParams {
    pub source: Source,
    pub n: usize,
    pub d_m: usize,
    pub d_p: usize,
    pub class_separation: f64,
    pub feature_noise_sd: f64,
    pub label_noise: f64,
    pub eval_label_noise: f64,
    pub sentence_len: usize,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    /// Added to the training seed for the held-out evaluation set.
    pub eval_seed_offset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InlpParams {
    pub iters: usize,
    pub retrain_main: bool,
    pub early_stop: bool,
    pub drop_delta: f64,
    pub min_probe_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvParams {
    pub lambda: f64,
    pub lambdas: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub d_zeta: usize,
    pub hidden: Option<usize>,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub init: InitKind,
    pub clean_kappa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryParams {
    pub task: TaskKind,
    pub instances: Instances,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub path: PathBuf,
    /// sha256 of the config file bytes.
    pub hash: String,
    pub command: Option<Command>,
    pub out: Option<PathBuf>,
    pub kappas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub data: DataParams,
    pub inlp: InlpParams,
    pub adv: AdvParams,
    pub theory: TheoryParams,
    pub report_inputs: Vec<PathBuf>,
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Raw<'a> {
    path: &'a Path,
    map: BTreeMap<(String, String), Entry>,
}

impl Raw<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let e = self.map.get_mut(&(section.to_string(), key.to_string()))?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.take(section, key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|e: T::Err| self.err(line, format!("{}: {e}", field(section, key)))),
        }
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let Some((v, line)) = self.take(section, key) else {
            return Ok(default);
        };
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e: T::Err| self.err(line, format!("{}: `{}`: {e}", field(section, key), s.trim())))
            })
            .collect()
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.map
            .get(&(section.to_string(), key.to_string()))
            .map_or(0, |e| e.line)
    }
}

fn field(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn parse_raw<'a>(path: &'a Path, text: &str) -> Result<Raw<'a>> {
    let mut raw = Raw {
        path,
        map: BTreeMap::new(),
    };
    let mut section = String::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| raw.err(line_no, "unterminated section header"))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| raw.err(line_no, "expected `key = value`"))?;
        let key = (section.clone(), k.trim().to_string());
        if raw.map.contains_key(&key) {
            return Err(raw.err(line_no, format!("duplicate key {}", field(&key.0, &key.1))));
        }
        raw.map.insert(
            key,
            Entry {
                value: v.trim().to_string(),
                line: line_no,
                used: false,
            },
        );
    }
    Ok(raw)
}

fn opt_f64(s: &str) -> std::result::Result<Option<f64>, String> {
    match s {
        "none" | "off" => Ok(None),
        _ => s.parse().map(Some).map_err(|e| format!("{e}")),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "config is not UTF-8".into(),
        })?;
        let mut cfg = ExperimentConfig::parse(path, &text)?;
        cfg.hash = crate::cli::sha256_hex(&bytes);
        Ok(cfg)
    }

    /// Parses and validates; relative paths resolve against the config's directory.
    pub fn parse(path: &Path, text: &str) -> Result<ExperimentConfig> {
        let mut r = parse_raw(path, text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let command = match r.take("", "command") {
            None => None,
            Some((v, line)) => Some(v.parse::<Command>().map_err(|e| r.err(line, e))?),
        };
        let out = r.take("", "out").map(|(v, _)| resolve(PathBuf::from(v)));

        let kappas: Vec<f64> = r.list("grid", "kappa", vec![0.5, 0.6, 0.7, 0.8, 0.9])?;
        let seeds: Vec<u64> = r.list("grid", "seeds", vec![0, 1, 2])?;

        let data = DataParams {
            source: r.get("data", "source", Source::Latent)?,
            n: r.get("data", "n", 1000)?,
            d_m: r.get("data", "d_m", 1)?,
            d_p: r.get("data", "d_p", 1)?,
            class_separation: r.get("data", "class_separation", 4.0)?,
            feature_noise_sd: r.get("data", "feature_noise_sd", 0.5)?,
            label_noise: r.get("data", "label_noise", 0.0)?,
            eval_label_noise: r.get("data", "eval_label_noise", 0.0)?,
            sentence_len: r.get("data", "sentence_len", crate::text::DEFAULT_LEN)?,
            embedding_dim: r.get("data", "embedding_dim", crate::text::DEFAULT_DIM)?,
            embedding_seed: r.get("data", "embedding_seed", 7)?,
            eval_seed_offset: r.get("data", "eval_seed_offset", 1000)?,
        };

        let min_probe_gain = match r.take("inlp", "min_probe_gain") {
            None => Some(0.01),
            Some((v, line)) => opt_f64(&v).map_err(|e| r.err(line, format!("inlp.min_probe_gain: {e}")))?,
        };
        let inlp = InlpParams {
            iters: r.get("inlp", "iters", 20)?,
            retrain_main: r.get("inlp", "retrain_main", false)?,
            early_stop: r.get("inlp", "early_stop", false)?,
            drop_delta: r.get("inlp", "drop_delta", 0.02)?,
            min_probe_gain,
        };

        let hidden: usize = r.get("adv", "hidden", 0)?;
        let adv = AdvParams {
            lambda: r.get("adv", "lambda", 1.0)?,
            lambdas: r.list("adv", "lambdas", DEFAULT_LAMBDAS.to_vec())?,
            epochs: r.get("adv", "epochs", 20)?,
            lr: r.get("adv", "lr", 0.1)?,
            d_zeta: r.get("adv", "d_zeta", 16)?,
            hidden: (hidden > 0).then_some(hidden),
            batch_size: r.get("adv", "batch_size", 32)?,
            schedule: r.get("adv", "schedule", Schedule::Simultaneous)?,
            init: r.get("adv", "init", InitKind::Random)?,
            clean_kappa: r.get("adv", "clean_kappa", 0.5)?,
        };

        let theory = TheoryParams {
            task: r.get("theory", "task", TaskKind::Main)?,
            instances: r.get("theory", "instances", Instances::Generated)?,
        };

        let report_inputs = r
            .list::<String>("report", "inputs", Vec::new())?
            .into_iter()
            .map(|s| resolve(PathBuf::from(s)))
            .collect();

        if let Some(((s, k), e)) = r.map.iter().find(|(_, e)| !e.used) {
            return Err(r.err(e.line, format!("unknown key {}", field(s, k))));
        }

        let cfg = ExperimentConfig {
            path: path.to_path_buf(),
            hash: String::new(),
            command,
            out,
            kappas,
            seeds,
            data,
            inlp,
            adv,
            theory,
            report_inputs,
        };
        cfg.check(&r)?;
        Ok(cfg)
    }

    fn check(&self, r: &Raw<'_>) -> Result<()> {
        let fail = |section: &str, key: &str, msg: &str| Err(r.err(r.line_of(section, key), format!("{}: {msg}", field(section, key))));
        if self.seeds.is_empty() {
            return fail("grid", "seeds", "seed list is empty");
        }
        if self.kappas.is_empty() {
            return fail("grid", "kappa", "kappa grid is empty");
        }
        if self.kappas.iter().any(|k| !(0.5..=1.0).contains(k)) {
            return fail("grid", "kappa", "values must lie in [0.5, 1]");
        }
        let d = &self.data;
        if d.n == 0 {
            return fail("data", "n", "must be positive");
        }
        if d.source == Source::Latent && d.d_m + d.d_p == 0 {
            return fail("data", "d_m", "d_m + d_p must be at least 1");
        }
        for (key, v) in [("label_noise", d.label_noise), ("eval_label_noise", d.eval_label_noise)] {
            if !(0.0..0.5).contains(&v) {
                return fail("data", key, "must lie in [0, 0.5)");
            }
        }
        if !(d.feature_noise_sd >= 0.0) {
            return fail("data", "feature_noise_sd", "must be non-negative");
        }
        if d.sentence_len < 2 {
            return fail("data", "sentence_len", "must be at least 2");
        }
        if self.inlp.iters == 0 {
            return fail("inlp", "iters", "must be at least 1");
        }
        let a = &self.adv;
        if !(a.lambda >= 0.0) {
            return fail("adv", "lambda", "must be non-negative");
        }
        if a.lambdas.is_empty() {
            return fail("adv", "lambdas", "lambda grid is empty");
        }
        if a.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return fail("adv", "lambdas", "values must be non-negative");
        }
        if a.epochs == 0 {
            return fail("adv", "epochs", "must be at least 1");
        }
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return fail("adv", "lr", "must be positive");
        }
        if a.d_zeta == 0 {
            return fail("adv", "d_zeta", "must be at least 1");
        }
        if a.batch_size == 0 {
            return fail("adv", "batch_size", "must be at least 1");
        }
        if !(0.5..=1.0).contains(&a.clean_kappa) {
            return fail("adv", "clean_kappa", "must lie in [0.5, 1]");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(Path::new("/tmp/x/exp.cfg"), text)
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("command = inlp\nout = runs\n[grid]\nkappa = 0.5, 0.9\nseeds = 4\n[adv]\nhidden = 50\nschedule = probe-first\n").unwrap();
        assert_eq!(c.command, Some(Command::Inlp));
        assert_eq!(c.out, Some(PathBuf::from("/tmp/x/runs")));
        assert_eq!(c.kappas, vec![0.5, 0.9]);
        assert_eq!(c.seeds, vec![4]);
        assert_eq!(c.adv.hidden, Some(50));
        assert_eq!(c.adv.schedule, Schedule::ProbeFirst);
        assert_eq!(c.adv.lambdas, DEFAULT_LAMBDAS.to_vec());
        assert_eq!(c.inlp.iters, 20);
        assert_eq!(c.data.source, Source::Latent);
    }

    #[test]
    fn empty_seed_list_names_the_line() {
        match parse("# c\n[grid]\nseeds =\n") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("grid.seeds"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        for (text, line) in [
            ("[grid]\nkappa = 0.4\n", 2),
            ("[data]\nn = ten\n", 2),
            ("[data]\nwidth = 3\n", 2),
            ("[inlp]\niters = 0\n", 2),
            ("\n[adv]\nlambdas = 0.1, x\n", 3),
            ("[adv\n", 1),
            ("just words\n", 1),
            ("[grid]\nseeds = 1\nseeds = 2\n", 3),
            ("command = fly\n", 1),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn min_probe_gain_can_be_disabled() {
        assert_eq!(parse("[inlp]\nmin_probe_gain = none\n").unwrap().inlp.min_probe_gain, None);
        assert_eq!(parse("").unwrap().inlp.min_probe_gain, Some(0.01));
    }

    #[test]
    fn command_names_roundtrip() {
        for c in Command::ALL {
            assert_eq!(c.to_string().parse::<Command>().unwrap(), c);
        }
    }
}
