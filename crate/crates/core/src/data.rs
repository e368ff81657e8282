//! Synthetic parallel corpora for duplex training.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RederError, Result};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Fixed substitution, then swap of each adjacent pair `(i, i+1)` for even `i`.
    CipherSwap,
    Reversal,
    /// Copy with random substitutions.
    CopyNoise,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cipher-swap" => Some(Self::CipherSwap),
            "reversal" => Some(Self::Reversal),
            "copy-noise" => Some(Self::CopyNoise),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Distinct data symbols, excluding pad and blank.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Training pairs.
    pub pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub noise_rate: f64,
    /// Probability that a target token is written twice.
    pub doubling_rate: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::CipherSwap,
            vocab_size: 32,
            min_len: 4,
            max_len: 12,
            pairs: 10_000,
            dev_pairs: 500,
            test_pairs: 500,
            noise_rate: 0.0,
            doubling_rate: 0.0,
            seed: 7,
        }
    }
}

/// Longest sequence a task may generate.
pub const MAX_LEN_CAP: usize = 256;

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RederError::Config(m));
        if self.vocab_size < 8 {
            return bad(format!("task vocab_size {} below 8", self.vocab_size));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > MAX_LEN_CAP {
            return bad(format!(
                "length range [{}, {}] must satisfy 1 <= min <= max <= {MAX_LEN_CAP}",
                self.min_len, self.max_len
            ));
        }
        if self.pairs == 0 {
            return bad("pairs must be positive".into());
        }
        for (name, r) in [("noise_rate", self.noise_rate), ("doubling_rate", self.doubling_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        let needed = (self.pairs + self.dev_pairs + self.test_pairs) as f64;
        let available: f64 = (self.min_len..=self.max_len)
            .map(|l| (self.vocab_size as f64).powi(l as i32))
            .sum();
        if needed > available / 2.0 {
            return bad(format!("{needed} distinct sources requested but only {available} exist"));
        }
        Ok(())
    }

    /// Exact inverse exists.
    pub fn is_bijective(&self) -> bool {
        self.noise_rate == 0.0 && self.doubling_rate == 0.0
    }
}

/// The ground-truth mapping of a task, over symbol indices `0..vocab_size`.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    cipher: Vec<usize>,
    decipher: Vec<usize>,
}

pub fn symbol_name(i: usize) -> String {
    format!("t{i}")
}

fn swap_pairs<T: Copy>(xs: &[T]) -> Vec<T> {
    let mut out = xs.to_vec();
    for c in out.chunks_exact_mut(2) {
        c.swap(0, 1);
    }
    out
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c1f3);
        let mut cipher: Vec<usize> = (0..spec.vocab_size).collect();
        cipher.shuffle(&mut rng);
        let mut decipher = vec![0; spec.vocab_size];
        for (a, &b) in cipher.iter().enumerate() {
            decipher[b] = a;
        }
        Ok(Self { spec, cipher, decipher })
    }

    /// Noise-free image of `x`.
    pub fn map(&self, x: &[usize]) -> Vec<usize> {
        match self.spec.kind {
            TaskKind::CipherSwap => swap_pairs(&x.iter().map(|&s| self.cipher[s]).collect::<Vec<_>>()),
            TaskKind::Reversal => x.iter().rev().copied().collect(),
            TaskKind::CopyNoise => x.to_vec(),
        }
    }

    /// Preimage of a noise-free image.
    pub fn invert(&self, y: &[usize]) -> Vec<usize> {
        match self.spec.kind {
            TaskKind::CipherSwap => swap_pairs(y).iter().map(|&s| self.decipher[s]).collect(),
            TaskKind::Reversal => y.iter().rev().copied().collect(),
            TaskKind::CopyNoise => y.to_vec(),
        }
    }

    fn sample_pair(&self, rng: &mut ChaCha8Rng, noise: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
        let s = &self.spec;
        let len = rng.gen_range(s.min_len..=s.max_len);
        let x: Vec<usize> = (0..len).map(|_| rng.gen_range(0..s.vocab_size)).collect();
        let mut y = self.map(&x);
        if s.noise_rate > 0.0 {
            for t in y.iter_mut() {
                if noise.gen_bool(s.noise_rate) {
                    *t = noise.gen_range(0..s.vocab_size);
                }
            }
        }
        if s.doubling_rate > 0.0 {
            let mut d = Vec::with_capacity(y.len() * 2);
            for &t in &y {
                d.push(t);
                if noise.gen_bool(s.doubling_rate) {
                    d.push(t);
                }
            }
            y = d;
        }
        (x, y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Corpus {
    pub train: Vec<TextPair>,
    pub dev: Vec<TextPair>,
    pub test: Vec<TextPair>,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Generates disjoint train/dev/test splits (no source appears twice).
pub fn gen_corpus(spec: &TaskSpec) -> Result<Corpus> {
    let task = Task::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut seen = HashSet::new();
    let to_text = |v: &[usize]| v.iter().map(|&i| symbol_name(i)).collect::<Vec<_>>();
    let mut take = |n: usize| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (x, y) = task.sample_pair(&mut rng, &mut noise);
            if seen.insert(x.clone()) {
                out.push(TextPair {
                    src: to_text(&x),
                    tgt: to_text(&y),
                });
            }
        }
        out
    };
    Ok(Corpus {
        train: take(spec.pairs),
        dev: take(spec.dev_pairs),
        test: take(spec.test_pairs),
    })
}

/// Keeps pairs with `|y| <= factor·|x|` and `|x| <= factor·|y|`.
pub fn filter_lengths<P: Clone>(pairs: &[P], factor: usize, lens: impl Fn(&P) -> (usize, usize)) -> Vec<P> {
    pairs
        .iter()
        .filter(|p| {
            let (a, b) = lens(p);
            b <= factor * a && a <= factor * b
        })
        .cloned()
        .collect()
}

/// True when CTC can align each side of the pair from the other's
/// upsampled length, which also implies the two-sided length rule.
pub fn alignable<T: PartialEq>(src: &[T], tgt: &[T], factor: usize) -> bool {
    !src.is_empty()
        && !tgt.is_empty()
        && crate::ctc::is_feasible(factor * src.len(), tgt)
        && crate::ctc::is_feasible(factor * tgt.len(), src)
}

impl Corpus {
    /// Drops pairs that [`alignable`] rejects in either direction.
    pub fn filter_alignable(&self, factor: usize) -> Corpus {
        let f = |v: &[TextPair]| v.iter().filter(|p| alignable(&p.src, &p.tgt, factor)).cloned().collect();
        Corpus {
            train: f(&self.train),
            dev: f(&self.dev),
            test: f(&self.test),
        }
    }

    pub fn filter_lengths(&self, factor: usize) -> Corpus {
        let f = |v: &[TextPair]| filter_lengths(v, factor, |p: &TextPair| (p.src.len(), p.tgt.len()));
        Corpus {
            train: f(&self.train),
            dev: f(&self.dev),
            test: f(&self.test),
        }
    }

    pub fn split(&self, name: &str) -> Option<&[TextPair]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Symbols in first-occurrence order over train, dev, test (source
    /// before target within a pair).
    pub fn build_vocab(&self, max_symbols: usize) -> Result<Vocab> {
        let seqs = self
            .train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .flat_map(|p| [p.src.as_slice(), p.tgt.as_slice()]);
        Vocab::build(seqs, max_symbols)
    }

    pub fn write_dir(&self, dir: &Path, vocab: &Vocab) -> Result<()> {
        fs::create_dir_all(dir)?;
        for name in SPLITS {
            write_pairs(&dir.join(format!("{name}.jsonl")), self.split(name).unwrap_or_default())?;
        }
        atomic_write(&dir.join("vocab.txt"), vocab.to_text().as_bytes())
    }

    pub fn read_dir(dir: &Path) -> Result<(Corpus, Vocab)> {
        let vocab = Vocab::read(&dir.join("vocab.txt"))?;
        let read = |n: &str| {
            let p = dir.join(format!("{n}.jsonl"));
            if p.exists() {
                read_pairs(&p)
            } else {
                Ok(Vec::new())
            }
        };
        Ok((
            Corpus {
                train: read("train")?,
                dev: read("dev")?,
                test: read("test")?,
            },
            vocab,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    src: String,
    tgt: String,
}

/// Writes `bytes` to `path.tmp` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn pairs_to_jsonl(pairs: &[TextPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        let r = Record {
            src: p.src.join(" "),
            tgt: p.tgt.join(" "),
        };
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[TextPair]) -> Result<()> {
    atomic_write(path, pairs_to_jsonl(pairs)?.as_bytes())
}

pub fn read_pairs(path: &Path) -> Result<Vec<TextPair>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| RederError::Corpus(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect();
        out.push(TextPair {
            src: split(&r.src),
            tgt: split(&r.tgt),
        });
    }
    Ok(out)
}

pub fn encode_pairs(pairs: &[TextPair], vocab: &Vocab) -> Result<Vec<TokenPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(TokenPair {
                src: vocab.encode(&p.src.join(" "))?,
                tgt: vocab.encode(&p.tgt.join(" "))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            pairs: 200,
            dev_pairs: 20,
            test_pairs: 20,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn cipher_swap_definition() {
        let task = Task::new(spec(TaskKind::CipherSwap)).unwrap();
        let s = |i: usize| task.cipher[i];
        assert_eq!(task.map(&[0, 1, 2, 3]), vec![s(1), s(0), s(3), s(2)]);
        assert_eq!(task.map(&[0, 1, 2]), vec![s(1), s(0), s(2)]);
    }

    #[test]
    fn reversal_definition() {
        let task = Task::new(spec(TaskKind::Reversal)).unwrap();
        assert_eq!(task.map(&[1, 2, 3]), vec![3, 2, 1]);
    }

    #[test]
    fn noise_free_pairs_invert() {
        for kind in [TaskKind::CipherSwap, TaskKind::Reversal, TaskKind::CopyNoise] {
            let sp = spec(kind);
            let task = Task::new(sp.clone()).unwrap();
            let c = gen_corpus(&sp).unwrap();
            let idx = |v: &[String]| v.iter().map(|s| s[1..].parse::<usize>().unwrap()).collect::<Vec<_>>();
            for p in c.train.iter().chain(&c.dev) {
                assert_eq!(task.invert(&idx(&p.tgt)), idx(&p.src));
            }
        }
    }

    #[test]
    fn splits_disjoint_and_reproducible() {
        let sp = spec(TaskKind::CipherSwap);
        let a = gen_corpus(&sp).unwrap();
        let b = gen_corpus(&sp).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a.train.iter().map(|p| &p.src).collect();
        assert!(a.dev.iter().chain(&a.test).all(|p| !train.contains(&p.src)));
        assert_eq!(pairs_to_jsonl(&a.train).unwrap(), pairs_to_jsonl(&b.train).unwrap());
    }

    #[test]
    fn length_filter() {
        let mk = |a: usize, b: usize| TextPair {
            src: vec!["t0".into(); a],
            tgt: vec!["t0".into(); b],
        };
        let pairs = vec![mk(4, 9), mk(4, 8), mk(5, 5), mk(9, 4)];
        let kept = filter_lengths(&pairs, 2, |p: &TextPair| (p.src.len(), p.tgt.len()));
        assert_eq!(kept, vec![mk(4, 8), mk(5, 5)]);
        let c = gen_corpus(&spec(TaskKind::CipherSwap)).unwrap();
        assert_eq!(c.filter_lengths(2), c);
    }

    #[test]
    fn alignable_counts_repeats() {
        assert!(alignable(&[1, 2], &[3, 4, 5, 6], 2));
        assert!(!alignable(&[1, 2], &[3, 3, 4, 4], 2));
        assert!(!alignable(&[1, 1, 1], &[2], 2));
        assert!(!alignable::<usize>(&[], &[], 2));
        let sp = TaskSpec {
            doubling_rate: 0.5,
            ..spec(TaskKind::CipherSwap)
        };
        let c = gen_corpus(&sp).unwrap();
        let kept = c.filter_alignable(2);
        assert!(kept.train.len() < c.train.len());
        assert!(kept.train.iter().all(|p| alignable(&p.src, &p.tgt, 2)));
    }

    #[test]
    fn doubling_lengthens_targets() {
        let sp = TaskSpec {
            doubling_rate: 0.5,
            ..spec(TaskKind::CipherSwap)
        };
        let c = gen_corpus(&sp).unwrap();
        assert!(c.train.iter().any(|p| p.tgt.len() > p.src.len()));
        assert!(c.train.iter().all(|p| p.tgt.len() <= 2 * p.src.len()));
    }

    #[test]
    fn vocab_from_corpus() {
        let c = gen_corpus(&spec(TaskKind::CipherSwap)).unwrap();
        let v = c.build_vocab(64).unwrap();
        assert_eq!(v.len(), 34);
        assert_eq!(v, c.build_vocab(64).unwrap());
        assert!(c.build_vocab(31).is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(Task::new(TaskSpec { pairs: 0, ..TaskSpec::default() }).is_err());
        assert!(Task::new(TaskSpec { vocab_size: 4, ..TaskSpec::default() }).is_err());
        assert!(Task::new(TaskSpec { min_len: 5, max_len: 4, ..TaskSpec::default() }).is_err());
    }
}
