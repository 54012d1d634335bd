//! Latent corpora: sequences, conditioning, the GDRL container format, and a
//! compositional synthetic generator with a known ground truth.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GdrError, Result};
use crate::numerics::{axpy, dot, norm, Mat, SeededRng};

pub const CORPUS_MAGIC: &[u8; 4] = b"GDRL";
pub const CORPUS_VERSION: u32 = 1;

pub const GENRE: &str = "genre";
pub const INSTRUMENT: &str = "instrument";

pub type Labels = BTreeMap<String, String>;

/// A T×d_a sequence of latent frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    frames: Mat,
}

impl LatentSeq {
    pub fn new(frames: Mat) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(GdrError::ShapeError("latent sequence must be non-empty".into()));
        }
        Ok(Self { frames })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            frames: Mat::zeros(len, dim),
        }
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut Mat {
        &mut self.frames
    }

    pub fn into_frames(self) -> Mat {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn data(&self) -> &[f64] {
        self.frames.data()
    }
}

/// An L×d_t conditioning sequence. The null sequence is a single zero token
/// flagged `is_null`; models treat it as "no conditioning".
#[derive(Debug, Clone, PartialEq)]
pub struct CondSeq {
    tokens: Mat,
    is_null: bool,
}

impl CondSeq {
    pub fn new(tokens: Mat) -> Result<Self> {
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(GdrError::ShapeError("conditioning must have at least one token".into()));
        }
        Ok(Self { tokens, is_null: false })
    }

    pub fn null(dim: usize) -> Self {
        Self {
            tokens: Mat::zeros(1, dim),
            is_null: true,
        }
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Keeps a subset of tokens (in the given order).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let rows: Vec<&[f64]> = idx
            .iter()
            .map(|&i| {
                if i < self.len() {
                    Ok(self.tokens.row(i))
                } else {
                    Err(GdrError::ShapeError(format!("token {i} out of range")))
                }
            })
            .collect::<Result<_>>()?;
        CondSeq::new(Mat::from_rows(&rows)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub audio: LatentSeq,
    pub cond: CondSeq,
    pub labels: Labels,
    pub split: Split,
}

/// Splits `g<idx>,i<idx>` into optional genre and instrument indices. The
/// empty string and `null` mean no attributes.
pub fn parse_attributes(text: &str) -> Result<(Option<usize>, Option<usize>)> {
    let bad = |m: String| GdrError::InvalidSpec(m);
    let text = text.trim();
    if text.is_empty() || text == "null" {
        return Ok((None, None));
    }
    let (mut genre, mut instrument) = (None, None);
    for tok in text.split(',').map(str::trim) {
        let (slot, rest) = if let Some(r) = tok.strip_prefix('g') {
            (&mut genre, r)
        } else if let Some(r) = tok.strip_prefix('i') {
            (&mut instrument, r)
        } else {
            return Err(bad(format!("attribute token {tok:?} must look like g<n> or i<n>")));
        };
        let idx: usize = rest
            .parse()
            .map_err(|_| bad(format!("attribute token {tok:?} has no index")))?;
        if slot.replace(idx).is_some() {
            return Err(bad(format!("attribute {tok:?} given twice")));
        }
    }
    Ok((genre, instrument))
}

/// A cell of the synthetic attribute grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub genre: usize,
    pub instrument: usize,
}

impl Cell {
    pub fn new(genre: usize, instrument: usize) -> Self {
        Self { genre, instrument }
    }

    pub fn to_labels(self) -> Labels {
        let mut l = Labels::new();
        l.insert(GENRE.into(), genre_label(self.genre));
        l.insert(INSTRUMENT.into(), instrument_label(self.instrument));
        l
    }

    pub fn from_labels(labels: &Labels) -> Option<Self> {
        let g = parse_attr(labels.get(GENRE)?, 'g')?;
        let i = parse_attr(labels.get(INSTRUMENT)?, 'i')?;
        Some(Self::new(g, i))
    }
}

pub fn genre_label(g: usize) -> String {
    format!("g{g}")
}

pub fn instrument_label(i: usize) -> String {
    format!("i{i}")
}

fn parse_attr(s: &str, prefix: char) -> Option<usize> {
    s.strip_prefix(prefix)?.parse().ok()
}

/// Parameters of the compositional genre × instrument corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_genres: usize,
    pub n_instruments: usize,
    pub d_a: usize,
    pub d_t: usize,
    pub seq_len: usize,
    pub items_per_cell: usize,
    pub centroid_scale: f64,
    pub noise_scale: f64,
    pub cond_noise_scale: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_genres: 4,
            n_instruments: 4,
            d_a: 32,
            d_t: 16,
            seq_len: 16,
            items_per_cell: 16,
            centroid_scale: 1.0,
            noise_scale: 0.2,
            cond_noise_scale: 0.05,
            val_frac: 0.125,
            test_frac: 0.1875,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GdrError::InvalidSpec(m));
        if self.n_genres == 0 || self.n_instruments == 0 || self.n_genres * self.n_instruments < 2 {
            return bad(format!(
                "grid {}x{} needs at least two cells",
                self.n_genres, self.n_instruments
            ));
        }
        let n_attr = self.n_genres + self.n_instruments;
        if n_attr > self.d_a || n_attr > self.d_t {
            return bad(format!(
                "{n_attr} attribute values do not fit orthonormally in d_a={} / d_t={}",
                self.d_a, self.d_t
            ));
        }
        if self.seq_len == 0 || self.items_per_cell == 0 {
            return bad("seq_len and items_per_cell must be positive".into());
        }
        if !(self.centroid_scale > 0.0) || !(self.noise_scale >= 0.0) || !(self.cond_noise_scale >= 0.0) {
            return bad("scales must be finite, centroid_scale > 0, noise scales >= 0".into());
        }
        if self.noise_scale >= self.centroid_scale {
            return bad(format!(
                "noise_scale {} must be below centroid_scale {}",
                self.noise_scale, self.centroid_scale
            ));
        }
        if !(0.0..1.0).contains(&self.val_frac)
            || !(0.0..1.0).contains(&self.test_frac)
            || self.val_frac + self.test_frac >= 1.0
        {
            return bad("split fractions must be in [0,1) and sum below 1".into());
        }
        Ok(())
    }

    fn split_counts(&self) -> (usize, usize) {
        let n = self.items_per_cell as f64;
        let val = (n * self.val_frac).round() as usize;
        let test = (n * self.test_frac).round() as usize;
        (val, test)
    }
}

/// The generator's hidden geometry: one orthonormal audio direction and one
/// orthonormal conditioning token per attribute value.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    spec: SynthSpec,
    genre_dirs: Vec<Vec<f64>>,
    instrument_dirs: Vec<Vec<f64>>,
    genre_tokens: Vec<Vec<f64>>,
    instrument_tokens: Vec<Vec<f64>>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn orthonormal_set(rng: &mut SeededRng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = rng.normal_vec(dim);
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let n = norm(&v);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Ok(basis)
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(spec.seed, 0);
        let mut audio = orthonormal_set(&mut rng, spec.n_genres + spec.n_instruments, spec.d_a)?;
        let instrument_dirs = audio.split_off(spec.n_genres);
        let mut rng = SeededRng::new(spec.seed, 1);
        let mut tokens = orthonormal_set(&mut rng, spec.n_genres + spec.n_instruments, spec.d_t)?;
        let instrument_tokens = tokens.split_off(spec.n_genres);
        Ok(Self {
            spec: spec.clone(),
            genre_dirs: audio,
            instrument_dirs,
            genre_tokens: tokens,
            instrument_tokens,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.spec.n_genres).flat_map(move |g| (0..self.spec.n_instruments).map(move |i| Cell::new(g, i)))
    }

    pub fn genre_dir(&self, g: usize) -> &[f64] {
        &self.genre_dirs[g]
    }

    pub fn instrument_dir(&self, i: usize) -> &[f64] {
        &self.instrument_dirs[i]
    }

    /// centroid_scale · (u_g + u_i)
    pub fn centroid(&self, cell: Cell) -> Vec<f64> {
        let s = self.spec.centroid_scale;
        self.genre_dirs[cell.genre]
            .iter()
            .zip(&self.instrument_dirs[cell.instrument])
            .map(|(a, b)| s * (a + b))
            .collect()
    }

    /// Noise-free conditioning with one token per requested attribute
    /// (genre first). Both `None` yields the null sequence.
    pub fn prompt(&self, genre: Option<usize>, instrument: Option<usize>) -> Result<CondSeq> {
        let mut rows: Vec<&[f64]> = Vec::new();
        if let Some(g) = genre {
            rows.push(
                self.genre_tokens
                    .get(g)
                    .ok_or_else(|| GdrError::InvalidSpec(format!("genre {g} outside grid")))?,
            );
        }
        if let Some(i) = instrument {
            rows.push(
                self.instrument_tokens
                    .get(i)
                    .ok_or_else(|| GdrError::InvalidSpec(format!("instrument {i} outside grid")))?,
            );
        }
        if rows.is_empty() {
            return Ok(CondSeq::null(self.spec.d_t));
        }
        CondSeq::new(Mat::from_rows(&rows)?)
    }

    /// Parses an attribute prompt such as `g2,i1`, `i3` or `null`.
    pub fn parse_prompt(&self, text: &str) -> Result<CondSeq> {
        let (genre, instrument) = parse_attributes(text)?;
        self.prompt(genre, instrument)
    }

    /// Audio-space image of a prompt: centroid_scale · Σ u_v over the named
    /// attributes. Stands in for a joint text/audio space.
    pub fn lift(&self, genre: Option<usize>, instrument: Option<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.d_a];
        if let Some(g) = genre {
            axpy(self.spec.centroid_scale, &self.genre_dirs[g], &mut out);
        }
        if let Some(i) = instrument {
            axpy(self.spec.centroid_scale, &self.instrument_dirs[i], &mut out);
        }
        out
    }

    /// Nearest centroid in Euclidean distance; ties go to the lowest (genre, instrument).
    pub fn nearest_cell(&self, pooled: &[f64]) -> Result<Cell> {
        if pooled.len() != self.spec.d_a {
            return Err(GdrError::ShapeError(format!(
                "pooled vector of length {} for d_a={}",
                pooled.len(),
                self.spec.d_a
            )));
        }
        let mut best: Option<(f64, Cell)> = None;
        for cell in self.cells() {
            let c = self.centroid(cell);
            let d: f64 = c.iter().zip(pooled).map(|(a, b)| (a - b).powi(2)).sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, cell));
            }
        }
        Ok(best.expect("grid has cells").1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic(SynthSpec),
    Imported { source: String },
}

/// An immutable collection of latent items with split assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    d_a: usize,
    d_t: usize,
    default_len: usize,
    items: Vec<CorpusItem>,
    provenance: Provenance,
}

impl Corpus {
    pub fn new(d_a: usize, d_t: usize, items: Vec<CorpusItem>, provenance: Provenance) -> Result<Self> {
        if items.is_empty() {
            return Err(GdrError::EmptyInput("corpus has no items".into()));
        }
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(GdrError::InvalidSpec(format!("duplicate item id {}", it.id)));
            }
            if it.audio.dim() != d_a || it.cond.dim() != d_t {
                return Err(GdrError::ShapeError(format!(
                    "item {} has dims ({}, {}), corpus ({d_a}, {d_t})",
                    it.id,
                    it.audio.dim(),
                    it.cond.dim()
                )));
            }
        }
        let default_len = items[0].audio.len();
        Ok(Self {
            d_a,
            d_t,
            default_len,
            items,
            provenance,
        })
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn default_len(&self) -> usize {
        self.default_len
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn item(&self, id: &str) -> Option<&CorpusItem> {
        self.items.iter().find(|it| it.id == id)
    }

    /// Ground-truth geometry; only synthetic corpora have one.
    pub fn world(&self) -> Result<SynthWorld> {
        match &self.provenance {
            Provenance::Synthetic(spec) => SynthWorld::new(spec),
            Provenance::Imported { .. } => Err(GdrError::NoOracle),
        }
    }

    /// Applies `f` to every audio frame, keeping everything else.
    pub fn map_audio(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>, provenance: Provenance) -> Result<Corpus> {
        let items = self
            .items
            .iter()
            .map(|it| {
                let rows: Vec<Vec<f64>> = it
                    .audio
                    .frames()
                    .row_iter()
                    .map(|r| f(r).into_iter().map(f32_round).collect())
                    .collect();
                Ok(CorpusItem {
                    audio: LatentSeq::new(Mat::from_rows(&rows)?)?,
                    ..it.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d_a = items[0].audio.dim();
        Corpus::new(d_a, self.d_t, items, provenance)
    }
}

/// Generates the synthetic corpus described by `spec`.
///
/// Frames are `centroid + noise_scale·ε` (ε drawn per frame) and conditioning
/// is `[t_genre, t_instrument] + cond_noise_scale·ε`. Values are rounded to
/// f32 so the in-memory corpus equals its serialized form.
pub fn gen_corpus(spec: &SynthSpec) -> Result<Corpus> {
    let world = SynthWorld::new(spec)?;
    let mut noise = SeededRng::new(spec.seed, 2);
    let mut splitter = SeededRng::new(spec.seed, 3);
    let (n_val, n_test) = spec.split_counts();
    if n_val + n_test >= spec.items_per_cell {
        return Err(GdrError::InvalidSpec("split leaves no training items per cell".into()));
    }
    let mut items = Vec::with_capacity(spec.n_genres * spec.n_instruments * spec.items_per_cell);
    for cell in world.cells() {
        let centroid = world.centroid(cell);
        let mut splits: Vec<Split> = (0..spec.items_per_cell)
            .map(|k| {
                if k < n_test {
                    Split::Test
                } else if k < n_test + n_val {
                    Split::Val
                } else {
                    Split::Train
                }
            })
            .collect();
        splitter.shuffle(&mut splits);
        let base = world.prompt(Some(cell.genre), Some(cell.instrument))?;
        for (k, split) in splits.into_iter().enumerate() {
            let mut frames = Mat::zeros(spec.seq_len, spec.d_a);
            for t in 0..spec.seq_len {
                for (j, c) in centroid.iter().enumerate() {
                    frames.set(t, j, f32_round(c + spec.noise_scale * noise.normal()));
                }
            }
            let mut tokens = base.tokens().clone();
            for v in tokens.data_mut() {
                *v = f32_round(*v + spec.cond_noise_scale * noise.normal());
            }
            items.push(CorpusItem {
                id: format!("g{}-i{}-{k:03}", cell.genre, cell.instrument),
                audio: LatentSeq::new(frames)?,
                cond: CondSeq::new(tokens)?,
                labels: cell.to_labels(),
                split,
            });
        }
    }
    Corpus::new(spec.d_a, spec.d_t, items, Provenance::Synthetic(spec.clone()))
}

/// Ground-truth label of a pooled audio vector: the nearest cell centroid.
pub fn oracle_label(corpus: &Corpus, pooled: &[f64]) -> Result<Labels> {
    Ok(corpus.world()?.nearest_cell(pooled)?.to_labels())
}

/// Mean over the frames of a sequence.
pub fn pool(seq: &LatentSeq) -> Vec<f64> {
    seq.frames().col_means()
}

/// Pools each query over time, then averages over queries.
pub fn aggregate(queries: &[LatentSeq]) -> Result<Vec<f64>> {
    let first = queries
        .first()
        .ok_or_else(|| GdrError::EmptyInput("no queries to aggregate".into()))?;
    let mut acc = vec![0.0; first.dim()];
    for q in queries {
        if q.dim() != first.dim() {
            return Err(GdrError::ShapeError("queries differ in latent dimension".into()));
        }
        axpy(1.0, &pool(q), &mut acc);
    }
    let n = queries.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemHeader {
    id: String,
    #[serde(rename = "T")]
    len: usize,
    #[serde(rename = "L")]
    cond_len: usize,
    labels: Labels,
    split: Split,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    cond_null: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    d_a: usize,
    d_t: usize,
    n_items: usize,
    items: Vec<ItemHeader>,
    provenance: Provenance,
}

fn push_f32s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Serializes to the GDRL container: magic, version, length-prefixed JSON
/// header, f32 payload, then CRC32 of the payload.
pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    let header = CorpusHeader {
        d_a: corpus.d_a,
        d_t: corpus.d_t,
        n_items: corpus.items.len(),
        items: corpus
            .items
            .iter()
            .map(|it| ItemHeader {
                id: it.id.clone(),
                len: it.audio.len(),
                cond_len: it.cond.len(),
                labels: it.labels.clone(),
                split: it.split,
                cond_null: it.cond.is_null(),
            })
            .collect(),
        provenance: corpus.provenance.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    for it in &corpus.items {
        push_f32s(&mut payload, it.audio.data());
        push_f32s(&mut payload, it.cond.tokens().data());
    }
    let mut out = Vec::with_capacity(12 + json.len() + payload.len() + 4);
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_corpus(corpus)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    decode_corpus(&fs::read(path)?)
}

/// Little-endian reader over a byte slice that reports offsets on failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GdrError::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Reads the magic/version preamble and the JSON header that follows it.
    pub(crate) fn preamble<T: serde::de::DeserializeOwned>(&mut self, magic: &[u8; 4], version: u32) -> Result<T> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(GdrError::format(0, format!("bad magic {m:?}, expected {magic:?}")));
        }
        let at = self.pos();
        let v = self.u32("version")?;
        if v != version {
            return Err(GdrError::format(at, format!("unsupported version {v}")));
        }
        let len = self.u32("header length")? as usize;
        let at = self.pos();
        let json = self.take(len, "header")?;
        serde_json::from_slice(json).map_err(|e| GdrError::format(at, format!("invalid header JSON: {e}")))
    }

    /// Verifies the trailing CRC32 of `buf[start..pos]` and that nothing follows.
    pub(crate) fn finish_crc(&mut self, start: usize) -> Result<()> {
        let end = self.pos;
        let crc = crc32fast::hash(&self.buf[start..end]);
        let stored = self.u32("checksum")?;
        if crc != stored {
            return Err(GdrError::format(end as u64, "payload checksum mismatch"));
        }
        if self.remaining() != 0 {
            return Err(GdrError::format(self.pos(), "trailing bytes after checksum"));
        }
        Ok(())
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader::new(bytes);
    let header: CorpusHeader = r.preamble(CORPUS_MAGIC, CORPUS_VERSION)?;
    if header.n_items != header.items.len() {
        return Err(GdrError::format(
            8,
            format!("n_items {} but {} item headers", header.n_items, header.items.len()),
        ));
    }
    let payload_start = r.pos;
    let expected: usize = header
        .items
        .iter()
        .map(|it| 4 * (it.len * header.d_a + it.cond_len * header.d_t))
        .sum();
    if r.remaining() != expected + 4 {
        return Err(GdrError::format(
            r.pos(),
            format!(
                "header dims imply {} payload bytes plus checksum, file has {}",
                expected,
                r.remaining()
            ),
        ));
    }
    let mut items = Vec::with_capacity(header.items.len());
    for ih in header.items {
        let at = r.pos();
        let audio = r.f32s(ih.len * header.d_a, "audio frames")?;
        let cond = r.f32s(ih.cond_len * header.d_t, "cond tokens")?;
        let audio = Mat::new(ih.len, header.d_a, audio)
            .and_then(LatentSeq::new)
            .map_err(|e| GdrError::format(at, e.to_string()))?;
        let cond = if ih.cond_null {
            CondSeq::null(header.d_t)
        } else {
            Mat::new(ih.cond_len, header.d_t, cond)
                .and_then(CondSeq::new)
                .map_err(|e| GdrError::format(at, e.to_string()))?
        };
        items.push(CorpusItem {
            id: ih.id,
            audio,
            cond,
            labels: ih.labels,
            split: ih.split,
        });
    }
    r.finish_crc(payload_start)?;
    Corpus::new(header.d_a, header.d_t, items, header.provenance)
}
