//! Pooled-key index, exact cosine top-K, and the ghost-query pipeline.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::alignmetrics::AlignmentTransform;
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, GuidanceSpec, NoiseSchedule};
use crate::error::{GdrError, Result};
use crate::latentdata::{aggregate, pool, CondSeq, Corpus, Labels, LatentSeq, Split};
use crate::numerics::{dot, norm};

/// Unit-normalized pooled audio keys. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    ids: Vec<String>,
    keys: Vec<Vec<f64>>,
    labels: Vec<Labels>,
    positions: BTreeMap<String, usize>,
}

impl CorpusIndex {
    /// Builds from raw (id, pooled vector, labels) entries.
    pub fn from_entries(entries: Vec<(String, Vec<f64>, Labels)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(GdrError::EmptyInput("index has no entries".into()));
        }
        let dim = entries[0].1.len();
        let mut seen = HashSet::new();
        let mut index = Self {
            ids: Vec::with_capacity(entries.len()),
            keys: Vec::with_capacity(entries.len()),
            labels: Vec::with_capacity(entries.len()),
            positions: BTreeMap::new(),
        };
        for (id, key, labels) in entries {
            if !seen.insert(id.clone()) {
                return Err(GdrError::BuildError(format!("duplicate id {id}")));
            }
            if key.len() != dim {
                return Err(GdrError::ShapeError(format!(
                    "key {id} has length {}, expected {dim}",
                    key.len()
                )));
            }
            let n = norm(&key);
            if !(n > 0.0) || !n.is_finite() {
                return Err(GdrError::DegenerateKey(id));
            }
            index.positions.insert(id.clone(), index.ids.len());
            index.ids.push(id);
            index.keys.push(key.iter().map(|v| v / n).collect());
            index.labels.push(labels);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys[0].len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i]
    }

    pub fn labels(&self, i: usize) -> &Labels {
        &self.labels[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }
}

/// Index over the pooled audio of one split, or of every item when `split` is None.
pub fn build_index(corpus: &Corpus, split: Option<Split>) -> Result<CorpusIndex> {
    let entries: Vec<_> = corpus
        .items()
        .iter()
        .filter(|it| split.is_none_or(|s| it.split == s))
        .map(|it| (it.id.clone(), pool(&it.audio), it.labels.clone()))
        .collect();
    if entries.is_empty() {
        return Err(GdrError::EmptyInput(format!("split {split:?} has no items")));
    }
    CorpusIndex::from_entries(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    pub rank: usize,
    pub labels: Labels,
}

/// Where a query vector came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryProvenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_q: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: QueryProvenance,
    pub results: Vec<Hit>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<&str> {
        self.results.iter().map(|h| h.id.as_str()).collect()
    }
}

/// Every index position ordered by descending cosine, ties by ascending id.
fn full_ranking(index: &CorpusIndex, query: &[f64]) -> Result<Vec<(usize, f64)>> {
    if query.len() != index.dim() {
        return Err(GdrError::ShapeError(format!(
            "query of length {} for a {}-d index",
            query.len(),
            index.dim()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(GdrError::ZeroVector);
    }
    let mut scored: Vec<(usize, f64)> = index
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| (i, (dot(k, query) / qn).clamp(-1.0, 1.0)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| index.ids[a.0].cmp(&index.ids[b.0])));
    Ok(scored)
}

/// Exact cosine top-`k`; `k` is clamped to the index size.
pub fn topk(index: &CorpusIndex, query: &[f64], k: usize) -> Result<RankedResult> {
    if k == 0 {
        return Err(GdrError::InvalidSpec("k must be at least 1".into()));
    }
    let results = full_ranking(index, query)?
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (i, score))| Hit {
            id: index.ids[i].clone(),
            score,
            rank: r + 1,
            labels: index.labels[i].clone(),
        })
        .collect();
    Ok(RankedResult {
        query: QueryProvenance::default(),
        results,
    })
}

/// CRC32 over the f32 token values and null flag.
pub fn cond_digest(cond: &CondSeq) -> String {
    let mut h = crc32fast::Hasher::new();
    h.update(&[cond.is_null() as u8]);
    for v in cond.tokens().data() {
        h.update(&(*v as f32).to_le_bytes());
    }
    format!("{:08x}", h.finalize())
}

/// Ghost-query request parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GhostRequest<'a> {
    pub guidance: &'a GuidanceSpec,
    pub n_q: usize,
    pub len: usize,
    pub seed: u64,
    pub k: usize,
    pub alignment: Option<&'a AlignmentTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhostQuery {
    pub latents: Vec<LatentSeq>,
    /// Aggregated (and possibly aligned) query vector.
    pub query: Vec<f64>,
    pub ranked: RankedResult,
}

/// Samples `n_q` latents, aggregates them, optionally aligns, then ranks.
pub fn ghost_query<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    index: &CorpusIndex,
    req: &GhostRequest<'_>,
) -> Result<GhostQuery> {
    let latents = sample(model, req.guidance, req.n_q, req.len, sched, req.seed)?;
    rank_latents(latents, index, req.k, req.alignment, provenance(req, sched))
}

fn provenance(req: &GhostRequest<'_>, sched: &NoiseSchedule) -> QueryProvenance {
    QueryProvenance {
        cond_digest: Some(cond_digest(&req.guidance.positive)),
        negative_digest: Some(cond_digest(&req.guidance.negative)),
        w: Some(req.guidance.w),
        n_q: Some(req.n_q),
        seed: Some(req.seed),
        schedule: Some(sched.digest()),
        aligned: req.alignment.is_some(),
    }
}

/// Aggregates already-generated latents and ranks them.
pub fn rank_latents(
    latents: Vec<LatentSeq>,
    index: &CorpusIndex,
    k: usize,
    alignment: Option<&AlignmentTransform>,
    mut provenance: QueryProvenance,
) -> Result<GhostQuery> {
    let mut query = aggregate(&latents)?;
    if let Some(t) = alignment {
        query = t.apply_vec(&query)?;
    }
    provenance.aligned = alignment.is_some();
    let mut ranked = topk(index, &query, k)?;
    ranked.query = provenance;
    Ok(GhostQuery { latents, query, ranked })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank_pct: f64,
    pub n_queries: usize,
}

/// 1-based rank of `target` for `query`.
pub fn rank_of(index: &CorpusIndex, query: &[f64], target: &str) -> Result<usize> {
    let pos = index
        .position(target)
        .ok_or_else(|| GdrError::EvalError(format!("target {target} is not in the index")))?;
    let ranking = full_ranking(index, query)?;
    Ok(ranking
        .iter()
        .position(|(i, _)| *i == pos)
        .expect("every position ranked")
        + 1)
}

/// Recall@K and median normalized rank for (target id, query vector) pairs.
pub fn eval_retrieval(index: &CorpusIndex, queries: &[(String, Vec<f64>)], ks: &[usize]) -> Result<RetrievalMetrics> {
    if queries.is_empty() {
        return Err(GdrError::EmptyInput("no queries to evaluate".into()));
    }
    let mut ranks = queries
        .iter()
        .map(|(target, q)| rank_of(index, q, target))
        .collect::<Result<Vec<_>>>()?;
    let n = queries.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    ranks.sort_unstable();
    let m = ranks.len();
    let median = if m % 2 == 1 {
        ranks[m / 2] as f64
    } else {
        0.5 * (ranks[m / 2 - 1] + ranks[m / 2]) as f64
    };
    Ok(RetrievalMetrics {
        recall_at,
        median_rank_pct: 100.0 * median / index.len() as f64,
        n_queries: queries.len(),
    })
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(GdrError::ShapeError(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Z_A + w·(Z_T⁺ − Z_T⁻)
pub fn text_interp(z_a: &[f64], z_pos: &[f64], z_neg: &[f64], w: f64) -> Result<Vec<f64>> {
    same_len(z_a, z_pos)?;
    same_len(z_a, z_neg)?;
    Ok(z_a
        .iter()
        .zip(z_pos)
        .zip(z_neg)
        .map(|((a, p), n)| a + w * (p - n))
        .collect())
}

/// Z + w·(Z − Z⁻)
pub fn audio_interp(z_gen: &[f64], z_neg: &[f64], w: f64) -> Result<Vec<f64>> {
    same_len(z_gen, z_neg)?;
    Ok(z_gen.iter().zip(z_neg).map(|(g, n)| g + w * (g - n)).collect())
}
