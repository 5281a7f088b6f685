//! Byte-level tokenization, corpus ingestion and split management.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// 256 byte values, then BOS and PAD.
pub const VOCAB_SIZE: usize = 258;
pub const BOS: u32 = 256;
pub const PAD: u32 = 257;

/// Token ids of the bytes of `text`.
pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Bytes of `ids`, skipping BOS and PAD. Errors on ids outside the vocabulary.
pub fn decode(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .filter(|&&t| t != BOS && t != PAD)
        .map(|&t| u8::try_from(t).map_err(|_| Error::Input(format!("token id {t} is outside the vocabulary"))))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    ByteLevel,
}

/// Topic families of the built-in text generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    General,
    Medical,
    Code,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Domain::General),
            "medical" => Ok(Domain::Medical),
            "code" => Ok(Domain::Code),
            _ => Err(Error::Input(format!("unknown domain {s:?} (expected general, medical or code)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// A UTF-8 text file, one sample per non-empty line.
    File(PathBuf),
    /// Lines from [`synthesize`].
    Synthetic { domain: Domain, samples: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Size of the target set when this corpus is the source side of a
    /// cross-domain pair.
    pub cross_domain: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub sources: Vec<Source>,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    pub splits: SplitSizes,
    /// Token cap per sample, BOS included.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn synthetic(domain: Domain, samples: usize, splits: SplitSizes, max_seq_len: usize, seed: u64) -> Self {
        Self {
            sources: vec![Source::Synthetic { domain, samples, seed }],
            tokenizer: Tokenizer::ByteLevel,
            splits,
            max_seq_len,
            seed,
        }
    }
}

/// Tokenized, pairwise-disjoint splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, &[Vec<u32>]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    /// Errors if any sequence occurs in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let named = self.named();
        for (i, (a, xs)) in named.iter().enumerate() {
            let set: HashSet<&Vec<u32>> = xs.iter().collect();
            for (b, ys) in &named[i + 1..] {
                if let Some(pos) = ys.iter().position(|s| set.contains(s)) {
                    return Err(Error::Input(format!("{b}[{pos}] also occurs in {a}")));
                }
            }
        }
        Ok(())
    }

    /// The first `n` training sequences, other splits unchanged.
    pub fn with_train_size(&self, n: usize) -> Splits {
        Splits {
            train: self.train[..n.min(self.train.len())].to_vec(),
            val: self.val.clone(),
            test: self.test.clone(),
        }
    }
}

fn sample(line: &[u8], max_seq_len: usize) -> Vec<u32> {
    let mut s = Vec::with_capacity(line.len() + 1);
    s.push(BOS);
    s.extend(encode(line));
    s.truncate(max_seq_len);
    s
}

fn read_lines(source: &Source) -> Result<Vec<Vec<u8>>> {
    match source {
        Source::File(path) => {
            let text = fs::read(path).map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
            Ok(text
                .split(|&b| b == b'\n')
                .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
                .filter(|l| !l.is_empty())
                .map(<[u8]>::to_vec)
                .collect())
        }
        Source::Synthetic { domain, samples, seed } => {
            Ok(synthesize(*domain, *samples, *seed).into_iter().map(String::into_bytes).collect())
        }
    }
}

/// Every distinct sample of `spec`, shuffled by `spec.seed`.
pub fn samples(spec: &CorpusSpec) -> Result<Vec<Vec<u32>>> {
    if spec.max_seq_len < 2 {
        return Err(Error::Input("max_seq_len must be at least 2".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for source in &spec.sources {
        for line in read_lines(source)? {
            let s = sample(&line, spec.max_seq_len);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(out)
}

fn split(mut all: Vec<Vec<u32>>, sizes: &SplitSizes) -> Result<Splits> {
    let want = sizes.train + sizes.val + sizes.test;
    if want > all.len() {
        return Err(Error::Input(format!(
            "requested train {} + val {} + test {} = {want} samples but the corpus has {} distinct samples",
            sizes.train,
            sizes.val,
            sizes.test,
            all.len()
        )));
    }
    all.truncate(want);
    let test = all.split_off(sizes.train + sizes.val);
    let val = all.split_off(sizes.train);
    Ok(Splits { train: all, val, test })
}

/// Reads, tokenizes, deduplicates, shuffles and splits a corpus.
pub fn ingest(spec: &CorpusSpec) -> Result<Splits> {
    let splits = split(samples(spec)?, &spec.splits)?;
    splits.check_disjoint()?;
    Ok(splits)
}

/// Source splits from `a` and a target evaluation set of
/// `a.splits.cross_domain` samples drawn from `b` only. Target samples that
/// also occur in a source split are dropped before counting.
pub fn make_cross_domain_pair(a: &CorpusSpec, b: &CorpusSpec) -> Result<(Splits, Vec<Vec<u32>>)> {
    let source = ingest(a)?;
    let used: HashSet<&Vec<u32>> = source.named().into_iter().flat_map(|(_, s)| s.iter()).collect();
    let n = a.splits.cross_domain;
    if n == 0 {
        return Err(Error::Input("splits.cross_domain must be positive for a cross-domain pair".into()));
    }
    let candidates: Vec<Vec<u32>> = samples(b)?.into_iter().filter(|s| !used.contains(s)).collect();
    if candidates.len() < n {
        return Err(Error::Input(format!(
            "requested {n} cross-domain samples but the target corpus has {} samples outside the source splits",
            candidates.len()
        )));
    }
    let target = candidates.into_iter().take(n).collect();
    Ok((source, target))
}

/// Normalized unigram counts over the byte ids, specials excluded.
pub fn token_histogram(data: &[Vec<u32>]) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    let mut n = 0usize;
    for &t in data.iter().flatten() {
        if t < 256 {
            h[t as usize] += 1.0;
            n += 1;
        }
    }
    if n > 0 {
        h.iter_mut().for_each(|v| *v /= n as f64);
    }
    h
}

/// Total variation distance between the token histograms of `a` and `b`.
pub fn histogram_distance(a: &[Vec<u32>], b: &[Vec<u32>]) -> f64 {
    let (ha, hb) = (token_histogram(a), token_histogram(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Tokenized cache

pub const CACHE_MAGIC: &[u8; 4] = b"NOTK";
pub const CACHE_VERSION: u32 = 1;

/// `NOTK` cache: magic, u32 version, u32 split count, then per split a u64
/// sequence count and per sequence a u32 length and u16 ids; a trailing
/// SHA-256 covers everything before it.
pub fn encode_cache(splits: &Splits) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for (_, seqs) in splits.named() {
        out.extend_from_slice(&(seqs.len() as u64).to_le_bytes());
        for s in seqs {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            for &t in s {
                out.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<Splits> {
    let bad = |m: &str| Error::Format(format!("token cache: {m}"));
    if bytes.len() < 44 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("missing NOTK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(&format!("version {version} is not supported (supported: [{CACHE_VERSION}])")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("token cache checksum mismatch".into()));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if u32::from_le_bytes(take(4)?.try_into().unwrap()) != 3 {
        return Err(bad("expected 3 splits"));
    }
    let mut parts = Vec::new();
    for _ in 0..3 {
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut seqs = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(len * 2)?;
            seqs.push(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect());
        }
        parts.push(seqs);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(Splits { train, val, test })
}

pub fn write_cache(splits: &Splits, path: &Path) -> Result<()> {
    write_atomic(path, &encode_cache(splits))
}

pub fn read_cache(path: &Path) -> Result<Splits> {
    decode_cache(&fs::read(path).map_err(|e| Error::storage(path, e))?)
}

// ---------------------------------------------------------------------------
// Synthetic text

const GENERAL_SUBJECTS: &[&str] = &[
    "the farmer", "a child", "my neighbor", "the old dog", "our teacher", "the baker", "a sailor", "the mayor",
];
const GENERAL_VERBS: &[&str] = &["walked to", "looked at", "painted", "found", "talked about", "visited", "liked"];
const GENERAL_OBJECTS: &[&str] = &[
    "the river", "a small house", "the market", "green hills", "the garden", "an old bridge", "the station",
];
const GENERAL_TAILS: &[&str] = &["today.", "at noon.", "again.", "in spring.", "with joy.", "last week."];

const MEDICAL_SUBJECTS: &[&str] = &["patient", "the nurse", "dr. lee", "the clinic", "a surgeon", "the ward"];
const MEDICAL_VERBS: &[&str] = &["prescribed", "reported", "monitored", "reduced", "administered", "reviewed"];
const MEDICAL_OBJECTS: &[&str] = &[
    "insulin", "blood pressure", "aspirin", "heart rate", "a fever", "the dosage", "glucose", "an mri scan",
];
const MEDICAL_UNITS: &[&str] = &["mg daily.", "ml per hour.", "units at night.", "mg twice a day."];

const CODE_NAMES: &[&str] = &["x", "count", "buf", "idx", "total", "node", "key", "val"];
const CODE_FUNCS: &[&str] = &["len", "sum", "max", "push", "get", "parse", "hash"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn line(domain: Domain, rng: &mut ChaCha8Rng) -> String {
    match domain {
        Domain::General => format!(
            "{} {} {} {}",
            pick(rng, GENERAL_SUBJECTS),
            pick(rng, GENERAL_VERBS),
            pick(rng, GENERAL_OBJECTS),
            pick(rng, GENERAL_TAILS)
        ),
        Domain::Medical => format!(
            "{} {} {} {} {}",
            pick(rng, MEDICAL_SUBJECTS),
            pick(rng, MEDICAL_VERBS),
            pick(rng, MEDICAL_OBJECTS),
            rng.random_range(1..500),
            pick(rng, MEDICAL_UNITS)
        ),
        Domain::Code => match rng.random_range(0..3) {
            0 => format!("let {} = {}({});", pick(rng, CODE_NAMES), pick(rng, CODE_FUNCS), pick(rng, CODE_NAMES)),
            1 => format!(
                "if {} > {} {{ {} += 1; }}",
                pick(rng, CODE_NAMES),
                rng.random_range(0..100),
                pick(rng, CODE_NAMES)
            ),
            _ => format!(
                "{}.{}({}, {});",
                pick(rng, CODE_NAMES),
                pick(rng, CODE_FUNCS),
                pick(rng, CODE_NAMES),
                rng.random_range(0..1000)
            ),
        },
    }
}

/// `samples` distinct short lines of `domain` text, deterministic in `seed`.
/// Stops early if the domain runs out of distinct lines.
pub fn synthesize(domain: Domain, samples: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(samples);
    let mut misses = 0;
    while out.len() < samples && misses < 10_000 {
        let l = line(domain, &mut rng);
        if seen.insert(l.clone()) {
            out.push(l);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    out
}
