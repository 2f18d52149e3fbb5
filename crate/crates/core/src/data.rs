//! Seeded synthetic episodes, the `OVMRDATA` feature file and batching.
//!
//! # File layout (little-endian)
//!
//! ```text
//! magic      8 bytes  "OVMRDATA"
//! version    u32      1
//! seed       u64
//! config     32 bytes SHA-256 of the generator config JSON
//! count      u32      episodes
//! per episode:
//!   query_id u32
//!   label    u8       0 = ID, 1 = OOD
//!   split    u8       0 = train, 1 = test
//!   concept  u32
//!   t_s, t_e f32      zero for OOD
//!   nv, nw, d u32
//!   video    nv*d f32, row-major
//!   words    nw*d f32
//!   sentence d f32
//! ```
//!
//! Features are rounded to `f32` at generation time so a write/read
//! roundtrip is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{norm2, Mat, SplitMix64};
use crate::ood_boundary::QueryLabel;
use crate::retrieval::MomentLabel;

pub const MAGIC: &[u8; 8] = b"OVMRDATA";
pub const VERSION: u32 = 1;
/// Upper bound on any single dimension read from a file.
const MAX_DIM: u32 = 1 << 16;
const MAX_EPISODES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSample {
    pub query_id: u32,
    /// `Nv x d`.
    pub video: Mat,
    /// `Nw x d`.
    pub words: Mat,
    pub sentence: Vec<f64>,
    pub label: QueryLabel,
    pub moment: Option<MomentLabel>,
    /// Planted concept for ID episodes, base concept of the shifted anchor
    /// for OOD episodes.
    pub concept_id: u32,
    pub split: Split,
}

impl EpisodeSample {
    pub fn dim(&self) -> usize {
        self.sentence.len()
    }

    pub fn frames(&self) -> usize {
        self.video.rows()
    }

    /// Feature shapes and finiteness only; the label is not consulted.
    pub fn validate_features(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.video.cols() != d || self.words.cols() != d {
            return Err(Error::shape(format!(
                "query {}: inconsistent feature widths",
                self.query_id
            )));
        }
        if self.video.rows() == 0 || self.words.rows() == 0 {
            return Err(Error::shape(format!(
                "query {}: empty video or words",
                self.query_id
            )));
        }
        if !self.video.is_finite()
            || !self.words.is_finite()
            || self.sentence.iter().any(|x| !x.is_finite())
        {
            return Err(Error::numeric(format!(
                "query {}: non-finite feature",
                self.query_id
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_features()?;
        match (self.label, &self.moment) {
            (QueryLabel::Id, Some(m)) => m.validate(),
            (QueryLabel::Ood, None) => Ok(()),
            (QueryLabel::Id, None) => Err(Error::contract(format!(
                "ID query {} has no moment",
                self.query_id
            ))),
            (QueryLabel::Ood, Some(_)) => Err(Error::contract(format!(
                "OOD query {} carries a moment",
                self.query_id
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub dim: usize,
    pub frames: usize,
    pub words: usize,
    pub concepts: usize,
    pub noise_sigma: f64,
    pub ood_shift: f64,
    pub seed: u64,
    pub n_id: usize,
    pub n_ood: usize,
    pub n_videos: usize,
    pub test_fraction: f64,
    /// Planted moment length range as fractions of the video.
    pub moment_min: f64,
    pub moment_max: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            frames: 64,
            words: 8,
            concepts: 4,
            noise_sigma: 0.1,
            ood_shift: 3.0,
            seed: 0,
            n_id: 400,
            n_ood: 400,
            n_videos: 400,
            test_fraction: 0.2,
            moment_min: 0.1,
            moment_max: 0.4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if !(4..=MAX_DIM as usize).contains(&self.dim) {
            return bad("dim", "must be at least 4 and at most 65536");
        }
        if !(1..=MAX_DIM as usize).contains(&self.frames) {
            return bad("frames", "must be in 1..=65536");
        }
        if !(1..=MAX_DIM as usize).contains(&self.words) {
            return bad("words", "must be in 1..=65536");
        }
        if !(2..=MAX_DIM as usize).contains(&self.concepts) {
            return bad("concepts", "must be in 2..=65536");
        }
        for (name, n) in [
            ("n_id", self.n_id),
            ("n_ood", self.n_ood),
            ("n_videos", self.n_videos),
        ] {
            if n > MAX_EPISODES {
                return bad(name, "too many episodes");
            }
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be positive");
        }
        if !(self.ood_shift > 0.0 && self.ood_shift.is_finite()) {
            return bad("ood_shift", "must be positive");
        }
        if self.n_id == 0 {
            return bad("n_id", "must be positive");
        }
        if self.n_videos == 0 {
            return bad("n_videos", "must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction", "must be in [0, 1)");
        }
        if !(0.0 < self.moment_min && self.moment_min <= self.moment_max && self.moment_max <= 1.0)
        {
            return bad("moment_min", "need 0 < moment_min <= moment_max <= 1");
        }
        let (lo, hi) = self.moment_frames();
        if lo == 0 || lo > hi || hi > self.frames {
            return bad("moment_min", "no whole-frame moment length fits the range");
        }
        Ok(())
    }

    /// Inclusive range of planted moment lengths in frames.
    pub fn moment_frames(&self) -> (usize, usize) {
        let n = self.frames as f64;
        let lo = (self.moment_min * n).ceil().max(1.0) as usize;
        let hi = (self.moment_max * n).floor() as usize;
        (lo, hi)
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}

/// Unlabeled single-query input, as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeInput {
    pub query_id: u32,
    /// One row per frame.
    pub video: Vec<Vec<f64>>,
    /// One row per word.
    pub words: Vec<Vec<f64>>,
    pub sentence: Vec<f64>,
}

impl EpisodeInput {
    pub fn from_episode(e: &EpisodeSample) -> Self {
        Self {
            query_id: e.query_id,
            video: e.video.to_rows(),
            words: e.words.to_rows(),
            sentence: e.sentence.clone(),
        }
    }

    /// Parses and shape-checks a JSON episode. Anything malformed is a
    /// format error.
    pub fn parse(text: &str) -> Result<EpisodeSample> {
        let bad = |msg: String| Error::format(0, msg);
        let input: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let video = Mat::from_rows(&input.video).map_err(|e| bad(format!("video: {e}")))?;
        let words = Mat::from_rows(&input.words).map_err(|e| bad(format!("words: {e}")))?;
        let ep = EpisodeSample {
            query_id: input.query_id,
            video,
            words,
            sentence: input.sentence,
            label: QueryLabel::Ood,
            moment: None,
            concept_id: 0,
            split: Split::Test,
        };
        ep.validate_features().map_err(|e| bad(e.to_string()))?;
        Ok(ep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub episodes: Vec<EpisodeSample>,
}

impl Dataset {
    pub fn config_hash_hex(&self) -> String {
        hex(&self.config_hash)
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &EpisodeSample> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn dim(&self) -> Option<usize> {
        self.episodes.first().map(|e| e.dim())
    }

    /// Every episode has the same feature width and frame count.
    pub fn check_uniform(&self) -> Result<(usize, usize)> {
        let first = self
            .episodes
            .first()
            .ok_or_else(|| Error::contract("empty dataset"))?;
        let (d, nv) = (first.dim(), first.frames());
        for e in &self.episodes {
            e.validate()?;
            if e.dim() != d || e.frames() != nv {
                return Err(Error::shape(format!(
                    "query {} is {}x{}, expected {nv}x{d}",
                    e.query_id,
                    e.frames(),
                    e.dim()
                )));
            }
        }
        Ok((d, nv))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn unit_normal(d: usize, rng: &mut SplitMix64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(base: &[f64], sigma: f64, rng: &mut SplitMix64) -> Vec<f64> {
    base.iter()
        .map(|&x| f32_round(x + sigma * rng.normal()))
        .collect()
}

struct Video {
    frames: Mat,
    concept: usize,
    moment: MomentLabel,
}

/// Generates the dataset described by `cfg`. Identical configs give
/// bitwise-identical output.
///
/// Each video plants one moment of a random concept; the other frames are
/// drawn around the remaining concepts. ID query `i` describes the moment of
/// video `i mod n_videos`. OOD queries sit `ood_shift` away from a random
/// concept along a random direction and reuse the videos round-robin.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let d = cfg.dim;
    let sigma = cfg.noise_sigma;
    let anchors: Vec<Vec<f64>> = (0..cfg.concepts)
        .map(|_| unit_normal(d, &mut rng))
        .collect();

    let (min_len, max_len) = cfg.moment_frames();
    let videos: Vec<Video> = (0..cfg.n_videos)
        .map(|_| {
            let concept = rng.below(cfg.concepts);
            let len = min_len + rng.below(max_len - min_len + 1);
            let start = rng.below(cfg.frames - len + 1);
            let mut frames = Mat::zeros(cfg.frames, d);
            for i in 0..cfg.frames {
                let c = if (start..start + len).contains(&i) {
                    concept
                } else {
                    // any concept but the planted one
                    let k = rng.below(cfg.concepts - 1);
                    if k >= concept {
                        k + 1
                    } else {
                        k
                    }
                };
                frames
                    .row_mut(i)
                    .copy_from_slice(&noisy(&anchors[c], sigma, &mut rng));
            }
            let n = cfg.frames as f64;
            Video {
                frames,
                concept,
                moment: MomentLabel {
                    t_s: f32_round(start as f64 / n),
                    t_e: f32_round((start + len) as f64 / n),
                },
            }
        })
        .collect();

    let words_around = |sentence: &[f64], rng: &mut SplitMix64| {
        let rows: Vec<Vec<f64>> = (0..cfg.words)
            .map(|_| noisy(sentence, sigma, rng))
            .collect();
        Mat::from_rows(&rows).expect("at least one word")
    };

    let mut episodes = Vec::with_capacity(cfg.n_id + cfg.n_ood);
    for i in 0..cfg.n_id {
        let v = &videos[i % cfg.n_videos];
        let sentence = noisy(&anchors[v.concept], sigma, &mut rng);
        let words = words_around(&sentence, &mut rng);
        episodes.push(EpisodeSample {
            query_id: i as u32,
            video: v.frames.clone(),
            words,
            sentence,
            label: QueryLabel::Id,
            moment: Some(v.moment),
            concept_id: v.concept as u32,
            split: Split::Train,
        });
    }
    for j in 0..cfg.n_ood {
        let v = &videos[j % cfg.n_videos];
        let base = rng.below(cfg.concepts);
        let dir = unit_normal(d, &mut rng);
        let center: Vec<f64> = anchors[base]
            .iter()
            .zip(&dir)
            .map(|(a, u)| a + cfg.ood_shift * u)
            .collect();
        let sentence = noisy(&center, sigma, &mut rng);
        let words = words_around(&sentence, &mut rng);
        episodes.push(EpisodeSample {
            query_id: (cfg.n_id + j) as u32,
            video: v.frames.clone(),
            words,
            sentence,
            label: QueryLabel::Ood,
            moment: None,
            concept_id: base as u32,
            split: Split::Train,
        });
    }

    // Stratified test split.
    for (lo, n) in [(0, cfg.n_id), (cfg.n_id, cfg.n_ood)] {
        let mut idx: Vec<usize> = (lo..lo + n).collect();
        rng.shuffle(&mut idx);
        let n_test = (cfg.test_fraction * n as f64).round() as usize;
        for &i in &idx[..n_test] {
            episodes[i].split = Split::Test;
        }
    }

    Ok(Dataset {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        episodes,
    })
}

/// Concept anchors of `cfg`, as drawn at the start of [`generate_dataset`].
pub fn concept_anchors(cfg: &GenConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    Ok((0..cfg.concepts)
        .map(|_| unit_normal(cfg.dim, &mut rng))
        .collect())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    out.extend_from_slice(&ds.config_hash);
    let count =
        u32::try_from(ds.episodes.len()).map_err(|_| Error::contract("too many episodes"))?;
    out.extend_from_slice(&count.to_le_bytes());
    let put_f32 = |out: &mut Vec<u8>, xs: &[f64]| {
        for &x in xs {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for e in &ds.episodes {
        e.validate()?;
        out.extend_from_slice(&e.query_id.to_le_bytes());
        out.push(match e.label {
            QueryLabel::Id => 0,
            QueryLabel::Ood => 1,
        });
        out.push(match e.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        out.extend_from_slice(&e.concept_id.to_le_bytes());
        let (ts, te) = e.moment.map_or((0.0, 0.0), |m| (m.t_s, m.t_e));
        put_f32(&mut out, &[ts, te]);
        for n in [e.video.rows(), e.words.rows(), e.dim()] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        put_f32(&mut out, e.video.data());
        put_f32(&mut out, e.words.data());
        put_f32(&mut out, &e.sentence);
    }
    Ok(out)
}

/// Little-endian reader that reports byte offsets in its errors.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(at, format!("{what} too large")))?;
        let raw = self.take(bytes, what)?;
        let out: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(k) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(
                at + 4 * k,
                format!("non-finite value in {what}"),
            ));
        }
        Ok(out)
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(at, format!("{what} too large")))?;
        let raw = self.take(bytes, what)?;
        let out: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(
                at + 8 * k,
                format!("non-finite value in {what}"),
            ));
        }
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

fn read_dim(c: &mut Cursor, what: &str) -> Result<usize> {
    let at = c.pos;
    let n = c.u32(what)?;
    if n == 0 || n > MAX_DIM {
        return Err(Error::format(at, format!("{what} = {n} out of range")));
    }
    Ok(n as usize)
}

/// Parses an `OVMRDATA` buffer. Any defect yields an error; no partial
/// dataset is returned.
pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor::new(buf);
    c.magic(MAGIC)?;
    let at = c.pos;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            at,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let seed = c.u64("seed")?;
    let config_hash: [u8; 32] = c.take(32, "config hash")?.try_into().unwrap();
    let count = c.u32("episode count")? as usize;
    // Each episode needs at least its fixed header plus three 1x1 tensors.
    const MIN_EPISODE: usize = 4 + 1 + 1 + 4 + 8 + 12 + 12;
    if count > c.remaining() / MIN_EPISODE {
        return Err(Error::format(
            c.pos - 4,
            format!("{count} episodes cannot fit in {} bytes", c.remaining()),
        ));
    }
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let start = c.pos;
        let query_id = c.u32("query id")?;
        let at = c.pos;
        let label = match c.u8("label")? {
            0 => QueryLabel::Id,
            1 => QueryLabel::Ood,
            b => return Err(Error::format(at, format!("label byte {b}"))),
        };
        let at = c.pos;
        let split = match c.u8("split")? {
            0 => Split::Train,
            1 => Split::Test,
            b => return Err(Error::format(at, format!("split byte {b}"))),
        };
        let concept_id = c.u32("concept")?;
        let at = c.pos;
        let t = c.f32s(2, "moment")?;
        let nv = read_dim(&mut c, "frame count")?;
        let nw = read_dim(&mut c, "word count")?;
        let d = read_dim(&mut c, "feature width")?;
        let need = (nv + nw + 1)
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .unwrap_or(usize::MAX);
        if need > c.remaining() {
            return Err(Error::format(
                c.pos,
                format!(
                    "truncated tensors: need {need} bytes, {} left",
                    c.remaining()
                ),
            ));
        }
        let video = Mat::from_vec(nv, d, c.f32s(nv * d, "video")?)?;
        let words = Mat::from_vec(nw, d, c.f32s(nw * d, "words")?)?;
        let sentence = c.f32s(d, "sentence")?;
        let moment = match label {
            QueryLabel::Id => Some(
                MomentLabel::new(t[0], t[1])
                    .map_err(|e| Error::format(at, format!("query {query_id}: {e}")))?,
            ),
            QueryLabel::Ood if t != [0.0, 0.0] || t.iter().any(|v| v.is_sign_negative()) => {
                return Err(Error::format(at, "OOD episode with a moment"));
            }
            QueryLabel::Ood => None,
        };
        let ep = EpisodeSample {
            query_id,
            video,
            words,
            sentence,
            label,
            moment,
            concept_id,
            split,
        };
        ep.validate()
            .map_err(|e| Error::format(start, format!("episode: {e}")))?;
        episodes.push(ep);
    }
    c.finish()?;
    Ok(Dataset {
        seed,
        config_hash,
        episodes,
    })
}

pub fn write_features(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// One optimizer step's worth of episodes: ID indices feed every loss term,
/// OOD indices only the likelihood margin term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub id: Vec<usize>,
    pub ood: Vec<usize>,
}

/// Batch sizes for `n` items: full batches, with a final short batch kept
/// when it has at least two items and merged into the previous one otherwise.
pub fn batch_sizes(n: usize, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::config("batch_size", "must be at least 2"));
    }
    if n < 2 {
        return Err(Error::contract(format!(
            "{n} ID items cannot form a batch of two"
        )));
    }
    let mut sizes = vec![batch_size; n / batch_size];
    let rest = n % batch_size;
    match (rest, sizes.last_mut()) {
        (0, _) => {}
        (1, Some(last)) => *last += 1,
        _ => sizes.push(rest),
    }
    Ok(sizes)
}

/// Shuffles `id` and `ood` (indices into some episode list) and cuts the ID
/// items into batches; the OOD items are spread over the batches in
/// contiguous, near-equal shares.
pub fn make_batches(
    id: &[usize],
    ood: &[usize],
    batch_size: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<Batch>> {
    let sizes = batch_sizes(id.len(), batch_size)?;
    let mut id = id.to_vec();
    let mut ood = ood.to_vec();
    rng.shuffle(&mut id);
    rng.shuffle(&mut ood);
    let nb = sizes.len();
    let mut at = 0;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(b, &n)| {
            let batch = Batch {
                id: id[at..at + n].to_vec(),
                ood: ood[b * ood.len() / nb..(b + 1) * ood.len() / nb].to_vec(),
            };
            at += n;
            batch
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            dim: 6,
            frames: 20,
            words: 3,
            concepts: 3,
            n_id: 12,
            n_ood: 8,
            n_videos: 5,
            seed: 11,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
        let mut other = small();
        other.seed = 12;
        assert_ne!(a, generate_dataset(&other).unwrap());
    }

    #[test]
    fn episodes_are_well_formed() {
        let cfg = small();
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.episodes.len(), 20);
        assert_eq!(ds.check_uniform().unwrap(), (6, 20));
        let (lo, hi) = cfg.moment_frames();
        for e in &ds.episodes {
            if let Some(m) = e.moment {
                let len = ((m.t_e - m.t_s) * 20.0).round() as usize;
                assert!((lo..=hi).contains(&len));
            }
        }
        let test = ds.of_split(Split::Test).count();
        assert_eq!(test, 2 + 2);
    }

    #[test]
    fn vanishing_noise_matches_planted_frames() {
        let cfg = GenConfig {
            noise_sigma: 1e-12,
            ..small()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for e in ds.episodes.iter().filter(|e| e.label == QueryLabel::Id) {
            let m = e.moment.unwrap();
            let first = (m.t_s * 20.0).round() as usize;
            let last = (m.t_e * 20.0).round() as usize;
            for i in first..last {
                for (a, b) in e.video.row(i).iter().zip(&e.sentence) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: [(&str, GenConfig); 4] = [
            ("dim", GenConfig { dim: 3, ..small() }),
            (
                "concepts",
                GenConfig {
                    concepts: 1,
                    ..small()
                },
            ),
            (
                "noise_sigma",
                GenConfig {
                    noise_sigma: 0.0,
                    ..small()
                },
            ),
            (
                "ood_shift",
                GenConfig {
                    ood_shift: -1.0,
                    ..small()
                },
            ),
        ];
        for (field, cfg) in cases {
            match generate_dataset(&cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let ds = generate_dataset(&small()).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_and_magic_are_reported() {
        let bytes = encode_dataset(&generate_dataset(&small()).unwrap()).unwrap();
        for cut in [0, 5, 20, 60, bytes.len() / 2, bytes.len() - 1] {
            match decode_dataset(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"NOTADATA");
        let msg = decode_dataset(&bad).unwrap_err().to_string();
        assert!(
            msg.contains("OVMRDATA") && msg.contains("NOTADATA"),
            "{msg}"
        );
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_dataset(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(decode_dataset(&long).is_err());
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&[0; 8 + 32]);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_size_examples() {
        assert_eq!(batch_sizes(10, 4).unwrap(), vec![4, 4, 2]);
        assert_eq!(batch_sizes(9, 4).unwrap(), vec![4, 5]);
        assert_eq!(batch_sizes(3, 8).unwrap(), vec![3]);
        assert!(matches!(batch_sizes(1, 4), Err(Error::Contract(_))));
        assert!(matches!(batch_sizes(10, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn batches_cover_everything_once() {
        let id: Vec<usize> = (0..10).collect();
        let ood: Vec<usize> = (10..17).collect();
        let a = make_batches(&id, &ood, 4, &mut SplitMix64::new(3)).unwrap();
        let b = make_batches(&id, &ood, 4, &mut SplitMix64::new(3)).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.iter().map(|b| b.id.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut seen: Vec<usize> = a
            .iter()
            .flat_map(|b| b.id.iter().chain(&b.ood))
            .copied()
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..17).collect::<Vec<_>>());
    }
}
