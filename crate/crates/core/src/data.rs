//! Synthetic gesture corpus and its on-disk format.
//!
//! Every gloss owns a fixed random prototype vector. A video concatenates one
//! segment per gloss, each a run of noisy copies of the prototype. The target
//! sentence maps glosses to words, swaps adjacent pairs and appends a word
//! naming the sentence length, so word order differs from gesture order.
//!
//! # Dataset file layout (little-endian)
//!
//! ```text
//! magic       8 bytes  "SGJDATA\0"
//! version     u32      DATASET_VERSION
//! rng         u16 len + utf8   generator name, RNG_NAME
//! digest      32 bytes sha256 of the corpus config JSON
//! config      u32 len + utf8   corpus config JSON
//! split       u16 len + utf8
//! input_dim   u32
//! count       u32
//! records     count x { frames u32, glosses u32, words u32,
//!                       features frames*input_dim f32,
//!                       gloss ids u32[glosses], word ids u32[words],
//!                       segment starts u32[glosses + 1] }
//! checksum    32 bytes sha256 of everything above
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SGJDATA\0";
pub const DATASET_VERSION: u32 = 1;
pub const RNG_NAME: &str = "chacha8-seed_from_u64/splitmix64-derive/ziggurat-normal";
pub const DATA_ROOT_ENV: &str = "SIGNJOINT_DATA";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const FIRST_WORD: usize = 3;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReorderRule {
    /// Swap adjacent pairs, then append a sentence-length word.
    #[default]
    SwapPairsLength,
    /// Keep gloss order (monotonic); no length word.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub glosses: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub glosses_per_sentence: [usize; 2],
    pub frames_per_gloss: [usize; 2],
    pub input_dim: usize,
    pub noise: f64,
    pub reorder: ReorderRule,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            glosses: 12,
            train_size: 300,
            dev_size: 50,
            test_size: 50,
            glosses_per_sentence: [4, 8],
            frames_per_gloss: [12, 20],
            input_dim: 32,
            noise: 0.5,
            reorder: ReorderRule::SwapPairsLength,
        }
    }
}

impl CorpusConfig {
    /// Checks internal consistency and that every video has at least `min_frames`.
    pub fn validate(&self, min_frames: usize) -> Result<()> {
        let [u_min, u_max] = self.glosses_per_sentence;
        let [f_min, f_max] = self.frames_per_gloss;
        if self.glosses < 2 {
            return Err(Error::Config("corpus.glosses must be at least 2".into()));
        }
        if u_min == 0 || u_min > u_max {
            return Err(Error::Config(format!("corpus.glosses_per_sentence [{u_min}, {u_max}] invalid")));
        }
        if f_min == 0 || f_min > f_max {
            return Err(Error::Config(format!("corpus.frames_per_gloss [{f_min}, {f_max}] invalid")));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("corpus.input_dim must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("corpus.noise must be a non-negative number".into()));
        }
        if u_min * f_min < min_frames {
            return Err(Error::Config(format!(
                "shortest video has {} frames but the model needs {min_frames}",
                u_min * f_min
            )));
        }
        Ok(())
    }

    pub fn size(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.train_size),
            "dev" => Ok(self.dev_size),
            "test" => Ok(self.test_size),
            other => Err(Error::Invalid(format!("unknown split {other}"))),
        }
    }

    /// Word vocabulary size including pad/bos/eos and length words.
    pub fn word_vocab(&self) -> usize {
        let lengths = match self.reorder {
            ReorderRule::SwapPairsLength => self.glosses_per_sentence[1] - self.glosses_per_sentence[0] + 1,
            ReorderRule::Identity => 0,
        };
        FIRST_WORD + self.glosses + lengths
    }

    /// CTC classes: blank plus glosses.
    pub fn gloss_classes(&self) -> usize {
        self.glosses + 1
    }

    pub fn json(&self) -> String {
        serde_json::to_string(self).expect("corpus config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.json().as_bytes()).into()
    }
}

/// One video with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriple {
    /// `[frames, input_dim]`.
    pub features: Tensor<f32>,
    /// Gloss ids in `1..=G`.
    pub glosses: Vec<usize>,
    /// Word ids, without bos/eos.
    pub words: Vec<usize>,
    /// Start frame of each segment followed by the total frame count.
    pub boundaries: Vec<usize>,
}

impl SampleTriple {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Frame features plus true length; rows past `len` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub frames: Tensor<T>,
    pub len: usize,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(frames: Tensor<T>) -> Self {
        let len = frames.shape()[0];
        FeatureSequence { frames, len }
    }

    pub fn padded(frames: Tensor<T>, len: usize) -> Result<Self> {
        if frames.ndim() != 2 || len == 0 || len > frames.shape()[0] {
            return Err(Error::Invalid(format!("length {len} for frames {:?}", frames.shape())));
        }
        Ok(FeatureSequence { frames, len })
    }

    pub fn from_sample(sample: &SampleTriple) -> Self {
        Self::new(sample.features.cast())
    }
}

/// Deterministic gloss → word mapping and the sentence reordering rule.
#[derive(Clone, Debug)]
pub struct Lexicon {
    word_of_gloss: Vec<usize>,
    u_min: usize,
    rule: ReorderRule,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ stream) ^ index)
}

const STREAM_LEXICON: u64 = 1;
const STREAM_PROTOTYPES: u64 = 2;

impl Lexicon {
    pub fn new(config: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_LEXICON, 0));
        let mut word_of_gloss: Vec<usize> = (0..config.glosses).map(|g| FIRST_WORD + g).collect();
        word_of_gloss.shuffle(&mut rng);
        Lexicon { word_of_gloss, u_min: config.glosses_per_sentence[0], rule: config.reorder }
    }

    fn length_word(&self, len: usize) -> usize {
        FIRST_WORD + self.word_of_gloss.len() + (len - self.u_min)
    }

    pub fn translate(&self, glosses: &[usize]) -> Vec<usize> {
        let mut words: Vec<usize> = glosses.iter().map(|&g| self.word_of_gloss[g - 1]).collect();
        if self.rule == ReorderRule::SwapPairsLength {
            for pair in words.chunks_mut(2) {
                pair.reverse();
            }
            words.push(self.length_word(glosses.len()));
        }
        words
    }

    /// Inverse of [`Lexicon::translate`]; `None` if `words` is not in its image.
    pub fn back_translate(&self, words: &[usize]) -> Option<Vec<usize>> {
        let mut body = words.to_vec();
        if self.rule == ReorderRule::SwapPairsLength {
            let last = body.pop()?;
            if body.len() < self.u_min || last != self.length_word(body.len()) {
                return None;
            }
            for pair in body.chunks_mut(2) {
                pair.reverse();
            }
        }
        body.iter()
            .map(|&w| self.word_of_gloss.iter().position(|&x| x == w).map(|g| g + 1))
            .collect()
    }
}

fn prototypes(config: &CorpusConfig) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PROTOTYPES, 0));
    (0..config.glosses)
        .map(|_| (0..config.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>())
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

fn split_stream(split: &str) -> u64 {
    match split {
        "train" => 10,
        "dev" => 11,
        "test" => 12,
        _ => 13,
    }
}

fn generate_sample(config: &CorpusConfig, protos: &[Vec<f32>], lexicon: &Lexicon, rng: &mut ChaCha8Rng) -> SampleTriple {
    let [u_min, u_max] = config.glosses_per_sentence;
    let [f_min, f_max] = config.frames_per_gloss;
    let u = rng.random_range(u_min..=u_max);
    let mut glosses = Vec::with_capacity(u);
    for i in 0..u {
        // No immediate repeats: equal neighbours would be indistinguishable.
        let g = if i == 0 {
            rng.random_range(1..=config.glosses)
        } else {
            let prev = glosses[i - 1];
            let g = rng.random_range(1..config.glosses);
            if g >= prev {
                g + 1
            } else {
                g
            }
        };
        glosses.push(g);
    }
    let mut boundaries = vec![0];
    let mut data = Vec::new();
    for &g in &glosses {
        let len = rng.random_range(f_min..=f_max);
        for _ in 0..len {
            for &p in &protos[g - 1] {
                let z: f64 = StandardNormal.sample(rng);
                data.push(p + (config.noise * z) as f32);
            }
        }
        boundaries.push(boundaries.last().unwrap() + len);
    }
    let frames = *boundaries.last().unwrap();
    SampleTriple {
        features: Tensor::new(&[frames, config.input_dim], data).expect("consistent features"),
        words: lexicon.translate(&glosses),
        glosses,
        boundaries,
    }
}

/// Generates one split; sample `i` depends only on `(seed, split, i)`.
pub fn generate_split(config: &CorpusConfig, split: &str) -> Result<Vec<SampleTriple>> {
    let n = config.size(split)?;
    let protos = prototypes(config);
    let lexicon = Lexicon::new(config);
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, split_stream(split), i as u64));
            generate_sample(config, &protos, &lexicon, &mut rng)
        })
        .collect())
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.sgj"))
}

/// Writes `train`, `dev` and `test` files into `dir`.
pub fn generate_corpus(config: &CorpusConfig, min_frames: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    config.validate(min_frames)?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for split in SPLITS {
        let samples = generate_split(config, split)?;
        let path = split_path(dir, split);
        save_dataset(config, split, &samples, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// A loaded split with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub split: String,
    pub samples: Vec<SampleTriple>,
}

fn put_u16(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u16).to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_dataset(config: &CorpusConfig, split: &str, samples: &[SampleTriple]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION as usize);
    put_u16(&mut out, RNG_NAME.len());
    out.extend_from_slice(RNG_NAME.as_bytes());
    out.extend_from_slice(&config.digest());
    let json = config.json();
    put_u32(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    put_u16(&mut out, split.len());
    out.extend_from_slice(split.as_bytes());
    put_u32(&mut out, config.input_dim);
    put_u32(&mut out, samples.len());
    for s in samples {
        if s.features.shape()[1] != config.input_dim || s.boundaries.len() != s.glosses.len() + 1 {
            return Err(Error::Invalid("sample inconsistent with corpus config".into()));
        }
        put_u32(&mut out, s.frames());
        put_u32(&mut out, s.glosses.len());
        put_u32(&mut out, s.words.len());
        for &v in s.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &g in s.glosses.iter().chain(&s.words).chain(&s.boundaries) {
            put_u32(&mut out, g);
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn save_dataset(config: &CorpusConfig, split: &str, samples: &[SampleTriple], path: &Path) -> Result<()> {
    let bytes = encode_dataset(config, split, samples)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, detail: detail.into() }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize)
    }

    pub fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format { offset: at, detail: format!("{what} is not utf-8") })
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Verifies the trailing sha256 over everything read so far.
    pub fn checksum(&mut self) -> Result<()> {
        let body_end = self.pos;
        let stored = self.take(32, "checksum")?;
        let actual: [u8; 32] = Sha256::digest(&self.buf[..body_end]).into();
        if stored != actual {
            return Err(Error::Format { offset: body_end, detail: "checksum mismatch".into() });
        }
        if self.remaining() != 0 {
            return Err(self.err(format!("{} trailing bytes after checksum", self.remaining())));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::Format { offset: 0, detail: "not a dataset file (bad magic)".into() });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != DATASET_VERSION as usize {
        return Err(Error::Format { offset: at, detail: format!("unsupported dataset version {version}") });
    }
    let n = r.u16("rng name length")?;
    let at = r.pos;
    let rng = r.string(n, "rng name")?;
    if rng != RNG_NAME {
        return Err(Error::Format { offset: at, detail: format!("generator {rng:?} differs from {RNG_NAME:?}") });
    }
    let digest: [u8; 32] = r.take(32, "config digest")?.try_into().unwrap();
    let n = r.u32("config length")?;
    let at = r.pos;
    let json = r.string(n, "config")?;
    let config: CorpusConfig =
        serde_json::from_str(&json).map_err(|e| Error::Format { offset: at, detail: format!("config: {e}") })?;
    if config.digest() != digest {
        return Err(Error::Format { offset: at, detail: "config digest mismatch".into() });
    }
    let n = r.u16("split length")?;
    let split = r.string(n, "split")?;
    let dim = r.u32("input dim")?;
    let count = r.u32("sample count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let frames = r.u32("frame count")?;
        let u = r.u32("gloss count")?;
        let w = r.u32("word count")?;
        let raw = r.take(frames * dim * 4, &format!("features of sample {i}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut ids = Vec::with_capacity(2 * u + w + 1);
        for _ in 0..2 * u + w + 1 {
            ids.push(r.u32(&format!("ids of sample {i}"))?);
        }
        let boundaries = ids.split_off(u + w);
        let words = ids.split_off(u);
        samples.push(SampleTriple {
            features: Tensor::new(&[frames, dim], data)?,
            glosses: ids,
            words,
            boundaries,
        });
    }
    r.checksum()?;
    Ok(Dataset { config, split, samples })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { train_size: 4, dev_size: 2, test_size: 0, ..CorpusConfig::default() }
    }

    #[test]
    fn zero_noise_segments_are_constant() {
        let cfg = CorpusConfig { noise: 0.0, ..small() };
        for s in generate_split(&cfg, "train").unwrap() {
            for seg in s.boundaries.windows(2) {
                for t in seg[0] + 1..seg[1] {
                    assert_eq!(s.features.row(t), s.features.row(seg[0]));
                }
            }
        }
    }

    #[test]
    fn lengths_within_config() {
        let cfg = CorpusConfig { train_size: 50, ..CorpusConfig::default() };
        for s in generate_split(&cfg, "train").unwrap() {
            assert!((48..=160).contains(&s.frames()));
            assert!(s.frames() >= 17);
            assert_eq!(*s.boundaries.last().unwrap(), s.frames());
            assert!(s.glosses.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn translation_is_invertible() {
        let cfg = CorpusConfig::default();
        let lex = Lexicon::new(&cfg);
        let g = vec![3, 1, 4, 1, 5];
        let w = lex.translate(&g);
        assert_ne!(w[..5], g.iter().map(|&x| lex.word_of_gloss[x - 1]).collect::<Vec<_>>()[..]);
        assert_eq!(lex.back_translate(&w), Some(g));
        assert!(w.iter().all(|&x| x >= FIRST_WORD && x < cfg.word_vocab()));
    }

    #[test]
    fn rejects_too_short_config() {
        let cfg = CorpusConfig { glosses_per_sentence: [1, 2], frames_per_gloss: [4, 6], ..small() };
        assert!(cfg.validate(17).is_err());
        assert!(small().validate(17).is_ok());
    }

    #[test]
    fn empty_split_roundtrips() {
        let cfg = small();
        let bytes = encode_dataset(&cfg, "test", &[]).unwrap();
        let ds = decode_dataset(&bytes).unwrap();
        assert!(ds.samples.is_empty());
        assert_eq!(ds.split, "test");
    }

    #[test]
    fn truncated_file_names_offset() {
        let cfg = small();
        let samples = generate_split(&cfg, "train").unwrap();
        let bytes = encode_dataset(&cfg, "train", &samples).unwrap();
        let cut = bytes.len() / 2;
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Format { offset, detail }) => {
                assert!(offset <= cut, "{offset} {detail}");
                assert!(detail.contains("unexpected end"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let cfg = small();
        let samples = generate_split(&cfg, "dev").unwrap();
        let mut bytes = encode_dataset(&cfg, "dev", &samples).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 0x55;
        let err = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let cfg = small();
        let mut bytes = encode_dataset(&cfg, "dev", &[]).unwrap();
        bytes[8] = 99;
        let err = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(err.contains("version") && err.contains("offset 8"), "{err}");
    }
}
