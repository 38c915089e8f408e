//! Synthetic-Text: number-detection sentences whose length is the concept.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classifier::{sigmoid, Predictor};
use crate::error::{invalid, io_err, Error, Result};
use crate::latent::{self, compute_kappa, flip_label_noise, split_seed, LatentDataset, GROUP_LABELS};

pub const NUMBERED_WORDS: [&str; 28] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "twenty",
    "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety", "hundred", "thousand",
];

/// Sampled as listed; "switch" appears twice and so is drawn twice as often.
pub const PLAIN_WORDS: [&str; 26] = [
    "nice", "device", "try", "picture", "signature", "trailer", "harry", "potter", "malfoy",
    "john", "switch", "taste", "glove", "balloon", "dog", "horse", "switch", "watch", "sun",
    "cloud", "river", "town", "cow", "shadow", "pencil", "eraser",
];

pub const PAD_WORD: &str = "pad";
pub const PAD_REPEAT: usize = 10;
pub const DEFAULT_LEN: usize = 10;
pub const DEFAULT_DIM: usize = 100;

pub fn is_numbered(tok: &str) -> bool {
    NUMBERED_WORDS.contains(&tok)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub has_number: bool,
    pub has_pad: bool,
}

impl Sentence {
    /// Build from tokens, deriving both flags.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Sentence> {
        let pads = tokens.iter().filter(|t| *t == PAD_WORD).count();
        if pads != 0 && pads != PAD_REPEAT {
            return invalid(format!("sentence has {pads} pad tokens; expected 0 or {PAD_REPEAT}"));
        }
        Ok(Sentence {
            has_number: tokens.iter().any(|t| is_numbered(t)),
            has_pad: pads == PAD_REPEAT,
            tokens,
        })
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn gen_sentence(has_number: bool, has_pad: bool, len: usize, rng: &mut impl Rng) -> Sentence {
    let words: &[&str] = if has_number { &NUMBERED_WORDS } else { &PLAIN_WORDS };
    let mut tokens: Vec<String> = (0..len)
        .map(|_| words.choose(rng).expect("word list is nonempty").to_string())
        .collect();
    if has_pad {
        tokens.extend(std::iter::repeat(PAD_WORD.to_string()).take(PAD_REPEAT));
    }
    Sentence {
        tokens,
        has_number: has_number && len > 0,
        has_pad,
    }
}

pub fn intervene_concept(s: &Sentence, add: bool) -> Sentence {
    let mut out = s.clone();
    if add && !s.has_pad {
        out.tokens.extend(std::iter::repeat(PAD_WORD.to_string()).take(PAD_REPEAT));
        out.has_pad = true;
    } else if !add && s.has_pad {
        out.tokens.retain(|t| t != PAD_WORD);
        out.has_pad = false;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub words: Vec<String>,
    pub vectors: DMatrix<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Every vocabulary word gets an i.i.d. `N(0, 1/dim)` vector, so norms are near 1.
    pub fn new(dim: usize, seed: u64) -> Result<EmbeddingTable> {
        if dim == 0 {
            return invalid("embedding dimension must be positive");
        }
        let mut words: Vec<String> = Vec::new();
        for w in NUMBERED_WORDS.iter().chain(PLAIN_WORDS.iter()).chain([PAD_WORD].iter()) {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 / dim as f64).sqrt();
        let vectors = DMatrix::from_fn(words.len(), dim, |_, _| {
            let t: f64 = rng.sample(StandardNormal);
            sd * t
        });
        Ok(Self::from_parts(words, vectors))
    }

    fn from_parts(words: Vec<String>, vectors: DMatrix<f64>) -> EmbeddingTable {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        EmbeddingTable {
            dim: vectors.ncols(),
            words,
            vectors,
            index,
        }
    }

    pub fn get(&self, word: &str) -> Option<DVector<f64>> {
        self.index.get(word).map(|&i| self.vectors.row(i).transpose())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["word".to_string()];
        header.extend((0..self.dim).map(|j| format!("v{j}")));
        w.write_record(&header)?;
        for (i, word) in self.words.iter().enumerate() {
            let mut rec = vec![word.clone()];
            rec.extend(self.vectors.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<EmbeddingTable> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut words = Vec::new();
        let mut flat = Vec::new();
        let mut dim = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let d = *dim.get_or_insert(rec.len().saturating_sub(1));
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                msg,
            };
            if rec.len() != d + 1 || d == 0 {
                return Err(bad("ragged embedding row".into()));
            }
            words.push(rec[0].to_string());
            for k in 1..=d {
                flat.push(rec[k].parse::<f64>().map_err(|e| bad(e.to_string()))?);
            }
        }
        let d = dim.unwrap_or(0);
        Ok(Self::from_parts(words.clone(), DMatrix::from_row_slice(words.len(), d, &flat)))
    }
}

pub fn encode_nbow(s: &Sentence, table: &EmbeddingTable) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(table.dim);
    for t in &s.tokens {
        let i = *table
            .index
            .get(t.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("out-of-vocabulary token {t:?}")))?;
        v += table.vectors.row(i).transpose();
    }
    Ok(v)
}

pub fn encode_all(sentences: &[Sentence], table: &EmbeddingTable) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(sentences.len(), table.dim);
    for (i, s) in sentences.iter().enumerate() {
        m.set_row(i, &encode_nbow(s, table)?.transpose());
    }
    Ok(m)
}

/// Mean `|p(toggled) - p(original)|` where toggling flips pad presence.
pub fn delta_prob<P: Predictor + ?Sized>(clf: &P, corpus: &[Sentence], table: &EmbeddingTable) -> Result<f64> {
    if corpus.is_empty() {
        return invalid("delta_prob needs a nonempty corpus");
    }
    let x = encode_all(corpus, table)?;
    let toggled: Vec<Sentence> = corpus.iter().map(|s| intervene_concept(s, !s.has_pad)).collect();
    let xt = encode_all(&toggled, table)?;
    Ok(delta_prob_encoded(clf, &x, &xt))
}

/// Same as [`delta_prob`] on pre-encoded original/toggled matrices.
pub fn delta_prob_encoded<P: Predictor + ?Sized>(clf: &P, x: &DMatrix<f64>, toggled: &DMatrix<f64>) -> f64 {
    let a = clf.scores(x);
    let b = clf.scores(toggled);
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(s, t)| (sigmoid(*t) - sigmoid(*s)).abs()).sum::<f64>() / n
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub n: usize,
    pub kappa: f64,
    pub label_noise_rate: f64,
    pub len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 1000,
            kappa: 0.5,
            label_noise_rate: 0.0,
            len: DEFAULT_LEN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub y_main: Vec<i8>,
    pub y_concept: Vec<i8>,
    pub seed: u64,
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if !(0.5..=1.0).contains(&cfg.kappa) {
        return invalid(format!("kappa {} outside [0.5, 1]", cfg.kappa));
    }
    if cfg.len == 0 {
        return invalid("sentence length must be at least 1");
    }
    let sizes = latent::group_sizes(cfg.n, cfg.kappa);
    if cfg.n < 2 || sizes[0] + sizes[2] == 0 || sizes[1] + sizes[3] == 0 {
        return Err(Error::Infeasible(format!("{} sentences cannot realize kappa {}", cfg.n, cfg.kappa)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels = Vec::with_capacity(cfg.n);
    for (g, &cnt) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat(GROUP_LABELS[g]).take(cnt));
    }
    labels.shuffle(&mut rng);
    let sentences: Vec<Sentence> = labels
        .iter()
        .map(|&(ym, yp)| gen_sentence(ym > 0, yp > 0, cfg.len, &mut rng))
        .collect();
    let mut y_main: Vec<i8> = labels.iter().map(|l| l.0).collect();
    let mut y_concept: Vec<i8> = labels.iter().map(|l| l.1).collect();
    if cfg.label_noise_rate > 0.0 {
        y_main = flip_label_noise(&y_main, cfg.label_noise_rate, split_seed(cfg.seed, 1))?;
        y_concept = flip_label_noise(&y_concept, cfg.label_noise_rate, split_seed(cfg.seed, 2))?;
    }
    Ok(Corpus {
        sentences,
        y_main,
        y_concept,
        seed: cfg.seed,
    })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn kappa(&self) -> f64 {
        compute_kappa(&self.y_main, &self.y_concept).unwrap_or(f64::NAN)
    }

    /// nBOW encodings as a dataset. The text space has no block split, so the
    /// whole embedding counts as `z_m` and the bias is trained.
    pub fn encode(&self, table: &EmbeddingTable) -> Result<LatentDataset> {
        Ok(LatentDataset {
            points: encode_all(&self.sentences, table)?,
            y_main: self.y_main.clone(),
            y_concept: self.y_concept.clone(),
            d_m: table.dim,
            d_p: 0,
            seed: self.seed,
            kappa_realized: self.kappa(),
            offsets: vec![0.0; table.dim],
            zero_centered: false,
        })
    }

    /// Encodings with the pad block toggled on every sentence.
    pub fn encode_toggled(&self, table: &EmbeddingTable) -> Result<DMatrix<f64>> {
        let t: Vec<Sentence> = self.sentences.iter().map(|s| intervene_concept(s, !s.has_pad)).collect();
        encode_all(&t, table)
    }

    pub fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            sentences: idx.iter().map(|&i| self.sentences[i].clone()).collect(),
            y_main: idx.iter().map(|&i| self.y_main[i]).collect(),
            y_concept: idx.iter().map(|&i| self.y_concept[i]).collect(),
            seed: self.seed,
        }
    }

    pub fn save(&self, sentences_path: &Path, labels_path: &Path) -> Result<()> {
        let mut text = String::new();
        for s in &self.sentences {
            text.push_str(&s.text());
            text.push('\n');
        }
        fs::write(sentences_path, text).map_err(io_err(sentences_path))?;
        let mut w = csv::Writer::from_path(labels_path)?;
        w.write_record(["idx", "y_main", "y_concept"])?;
        for i in 0..self.len() {
            w.write_record([i.to_string(), self.y_main[i].to_string(), self.y_concept[i].to_string()])?;
        }
        w.flush().map_err(io_err(labels_path))
    }

    pub fn load(sentences_path: &Path, labels_path: &Path) -> Result<Corpus> {
        let text = fs::read_to_string(sentences_path).map_err(io_err(sentences_path))?;
        let sentences = text
            .lines()
            .map(|l| Sentence::from_tokens(l.split_whitespace().map(str::to_string).collect()))
            .collect::<Result<Vec<_>>>()?;
        let mut rdr = csv::Reader::from_path(labels_path)?;
        let (mut y_main, mut y_concept) = (Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let lab = |k: usize| -> Result<i8> {
                match rec.get(k).map(str::trim) {
                    Some("1") => Ok(1),
                    Some("-1") => Ok(-1),
                    other => Err(Error::Parse {
                        path: labels_path.to_path_buf(),
                        line: line + 2,
                        msg: format!("bad label {other:?}"),
                    }),
                }
            };
            y_main.push(lab(1)?);
            y_concept.push(lab(2)?);
        }
        if y_main.len() != sentences.len() {
            return invalid("label count differs from sentence count");
        }
        Ok(Corpus {
            sentences,
            y_main,
            y_concept,
            seed: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LinearClassifier;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn vocab_lists() {
        assert_eq!(&NUMBERED_WORDS[..5], &["one", "two", "three", "four", "five"]);
        assert!(!NUMBERED_WORDS.contains(&"nineteen"));
        assert!(PLAIN_WORDS.iter().all(|w| !is_numbered(w)));
        assert_eq!(PLAIN_WORDS.iter().filter(|w| **w == "switch").count(), 2);
    }

    #[test]
    fn sentence_shapes() {
        let s = gen_sentence(true, true, 10, &mut rng());
        assert_eq!(s.tokens.len(), 20);
        let p = gen_sentence(false, false, 10, &mut rng());
        assert!(p.tokens.iter().all(|t| !is_numbered(t) && t != PAD_WORD));
        assert_eq!(Sentence::from_tokens(s.tokens.clone()).unwrap(), s);
    }

    #[test]
    fn encode_is_linear_and_order_free() {
        let t = EmbeddingTable::new(8, 1).unwrap();
        let empty = Sentence::from_tokens(vec![]).unwrap();
        assert_eq!(encode_nbow(&empty, &t).unwrap(), DVector::zeros(8));
        let s = gen_sentence(true, false, 10, &mut rng());
        let mut rev = s.clone();
        rev.tokens.reverse();
        let (a, b) = (encode_nbow(&s, &t).unwrap(), encode_nbow(&rev, &t).unwrap());
        assert!((a - b).amax() < 1e-12);
        let padded = intervene_concept(&s, true);
        let diff = encode_nbow(&padded, &t).unwrap() - encode_nbow(&s, &t).unwrap();
        assert!((diff - t.get(PAD_WORD).unwrap() * 10.0).amax() < 1e-12);
        let oov = Sentence::from_tokens(vec!["zebra".into()]).unwrap();
        assert!(encode_nbow(&oov, &t).is_err());
    }

    #[test]
    fn intervention_is_an_involution() {
        let s = gen_sentence(false, false, 10, &mut rng());
        assert_eq!(intervene_concept(&intervene_concept(&s, true), false), s);
        let p = gen_sentence(true, true, 10, &mut rng());
        let q = intervene_concept(&p, false);
        assert!(q.has_number && !q.has_pad);
        assert_eq!(q.tokens.len(), 10);
    }

    #[test]
    fn pad_blind_classifier_has_zero_delta() {
        let t = EmbeddingTable::new(6, 2).unwrap();
        let pad = t.get(PAD_WORD).unwrap();
        // any vector orthogonal to the pad embedding
        let mut w = t.get("one").unwrap();
        w -= &pad * (w.dot(&pad) / pad.norm_squared());
        let clf = LinearClassifier::new(w, 0.1);
        let c = gen_corpus(&CorpusConfig { n: 50, ..Default::default() }).unwrap();
        assert!(delta_prob(&clf, &c.sentences, &t).unwrap() < 1e-12);
    }

    #[test]
    fn pad_detector_saturates() {
        let t = EmbeddingTable::new(6, 2).unwrap();
        let pad = t.get(PAD_WORD).unwrap();
        let c = gen_corpus(&CorpusConfig { n: 50, ..Default::default() }).unwrap();
        let x = encode_all(&c.sentences, &t).unwrap();
        // put the threshold halfway between pad-free and padded scores
        let thr = |scale: f64| {
            let s = &x * &pad * scale;
            let lo = (0..c.len()).filter(|&i| !c.sentences[i].has_pad).map(|i| s[i]).fold(f64::MIN, f64::max);
            let hi = (0..c.len()).filter(|&i| c.sentences[i].has_pad).map(|i| s[i]).fold(f64::MAX, f64::min);
            LinearClassifier::new(&pad * scale, -(lo + hi) / 2.0)
        };
        let small = delta_prob(&thr(1.0), &c.sentences, &t).unwrap();
        let big = delta_prob(&thr(1e4), &c.sentences, &t).unwrap();
        assert!(big > small);
        assert!(big > 1.0 - 1e-6);
        assert!(delta_prob(&thr(1.0), &[], &t).is_err());
    }

    #[test]
    fn corpus_kappa_and_faithful_flags() {
        let c = gen_corpus(&CorpusConfig { n: 1000, kappa: 0.8, seed: 3, ..Default::default() }).unwrap();
        assert!((c.kappa() - 0.8).abs() <= 0.01);
        for (i, s) in c.sentences.iter().enumerate() {
            let r = Sentence::from_tokens(s.tokens.clone()).unwrap();
            assert_eq!((r.has_number, r.has_pad), (s.has_number, s.has_pad));
            assert_eq!(s.has_number, c.y_main[i] > 0);
            assert_eq!(s.has_pad, c.y_concept[i] > 0);
        }
    }

    #[test]
    fn table_is_seeded() {
        assert_eq!(EmbeddingTable::new(10, 4).unwrap(), EmbeddingTable::new(10, 4).unwrap());
        assert_ne!(EmbeddingTable::new(10, 4).unwrap(), EmbeddingTable::new(10, 5).unwrap());
        let t = EmbeddingTable::new(100, 4).unwrap();
        let n = t.get("dog").unwrap().norm();
        assert!(n > 0.5 && n < 1.5);
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_corpus(&CorpusConfig { n: 30, kappa: 0.7, seed: 9, ..Default::default() }).unwrap();
        let (s, l) = (dir.path().join("s.txt"), dir.path().join("l.csv"));
        c.save(&s, &l).unwrap();
        let back = Corpus::load(&s, &l).unwrap();
        assert_eq!(back.sentences, c.sentences);
        assert_eq!(back.y_main, c.y_main);
        let t = EmbeddingTable::new(5, 1).unwrap();
        let e = dir.path().join("e.csv");
        t.save(&e).unwrap();
        assert_eq!(EmbeddingTable::load(&e).unwrap(), t);
    }
}
