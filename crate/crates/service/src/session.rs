//! Session state and the refinement steps applied to it. Every step is a
//! pure function of (model, corpus, history so far), so a recorded history
//! replays to the same latents and rankings.

use gdr_core::alignmetrics::clap_score;
use gdr_core::denoiser::DenoiserModel;
use gdr_core::diffusion::{edit, GuidanceSpec, NoiseSchedule};
use gdr_core::latentdata::{aggregate, CondSeq, Corpus, LatentSeq, SynthWorld};
use gdr_core::numerics::Mat;
use gdr_core::retrieval::{
    cond_digest, ghost_query, rank_latents, CorpusIndex, GhostRequest, QueryProvenance, RankedResult,
};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const DEFAULT_INVERT_STEPS: usize = 20;

/// A loaded corpus with its index and, for synthetic corpora, its oracle.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub index: CorpusIndex,
    pub world: Option<SynthWorld>,
}

impl LoadedCorpus {
    pub fn new(corpus: Corpus) -> gdr_core::Result<Self> {
        let index = gdr_core::retrieval::build_index(&corpus, None)?;
        let world = corpus.world().ok();
        Ok(Self { corpus, index, world })
    }
}

/// Conditioning as sent by clients: attribute tokens such as `"g2,i1"`, or
/// raw token rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CondSpec {
    Attributes(String),
    Raw { tokens: Vec<Vec<f64>> },
}

impl CondSpec {
    pub fn resolve(&self, loaded: &LoadedCorpus) -> Result<CondSeq, ServiceError> {
        let d_t = loaded.corpus.d_t();
        match self {
            CondSpec::Attributes(text) => {
                let world = loaded.world.as_ref().ok_or_else(|| {
                    ServiceError::Unprocessable("corpus has no attribute oracle; send raw tokens".into())
                })?;
                Ok(world.parse_prompt(text)?)
            }
            CondSpec::Raw { tokens } => {
                if tokens.is_empty() {
                    return Err(ServiceError::Unprocessable(
                        "raw conditioning needs at least one token".into(),
                    ));
                }
                if let Some(bad) = tokens.iter().find(|t| t.len() != d_t) {
                    return Err(ServiceError::Unprocessable(format!(
                        "token of length {} for d_t={d_t}",
                        bad.len()
                    )));
                }
                Ok(CondSeq::new(Mat::from_rows(tokens)?)?)
            }
        }
    }
}

fn resolve_opt(spec: &Option<CondSpec>, loaded: &LoadedCorpus) -> Result<CondSeq, ServiceError> {
    match spec {
        Some(s) => s.resolve(loaded),
        None => Ok(CondSeq::null(loaded.corpus.d_t())),
    }
}

/// One applied step. `retention` is an output of the invert step and is
/// ignored when replaying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryEntry {
    Query {
        cond: CondSpec,
        w: f64,
        n_q: usize,
        k: usize,
        seed: u64,
    },
    Negative {
        neg_cond: Option<CondSpec>,
        w: f64,
        seed: u64,
    },
    Invert {
        new_cond: CondSpec,
        k_steps: usize,
        w: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retention: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct LastQuery {
    positive: CondSeq,
    n_q: usize,
    k: usize,
    seed: u64,
    w: f64,
}

/// The mutable part of a session.
#[derive(Debug, Clone, Default)]
pub struct SessionState {
    pub history: Vec<HistoryEntry>,
    pub current_latents: Vec<LatentSeq>,
    pub last_results: Option<RankedResult>,
    /// Conditioning the current latents were generated or edited under.
    current_cond: Option<CondSeq>,
    last_query: Option<LastQuery>,
}

pub struct Engine<'a> {
    pub model: &'a DenoiserModel,
    pub loaded: &'a LoadedCorpus,
    pub sched: &'a NoiseSchedule,
}

/// Outcome of a step: the new ranking plus, for inversion, the retention score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepResult {
    #[serde(flatten)]
    pub ranked: RankedResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
}

fn check_w(w: f64) -> Result<(), ServiceError> {
    if !w.is_finite() || w < 0.0 {
        return Err(ServiceError::Unprocessable(format!(
            "w must be finite and >= 0, got {w}"
        )));
    }
    Ok(())
}

impl SessionState {
    pub fn last_w(&self) -> Option<f64> {
        self.last_query.as_ref().map(|q| q.w)
    }

    /// Applies `entry`, appends it (with outputs filled in) to the history
    /// and returns the new ranking. Validation failures leave the state untouched.
    pub fn apply(&mut self, engine: &Engine<'_>, entry: HistoryEntry) -> Result<StepResult, ServiceError> {
        let loaded = engine.loaded;
        let len = loaded.corpus.default_len();
        match entry {
            HistoryEntry::Query { cond, w, n_q, k, seed } => {
                check_w(w)?;
                if n_q == 0 {
                    return Err(ServiceError::Unprocessable("n_q must be at least 1".into()));
                }
                if k == 0 {
                    return Err(ServiceError::Unprocessable("k must be at least 1".into()));
                }
                let positive = cond.resolve(loaded)?;
                if positive.is_null() {
                    return Err(ServiceError::Unprocessable(
                        "query conditioning must not be null".into(),
                    ));
                }
                let g = GuidanceSpec::cfg(positive.clone(), w);
                let req = GhostRequest {
                    guidance: &g,
                    n_q,
                    len,
                    seed,
                    k,
                    alignment: None,
                };
                let gq = ghost_query(engine.model, engine.sched, &loaded.index, &req)?;
                self.current_latents = gq.latents;
                self.current_cond = Some(positive.clone());
                self.last_query = Some(LastQuery {
                    positive,
                    n_q,
                    k,
                    seed,
                    w,
                });
                self.last_results = Some(gq.ranked.clone());
                self.history.push(HistoryEntry::Query { cond, w, n_q, k, seed });
                Ok(StepResult {
                    ranked: gq.ranked,
                    retention: None,
                })
            }
            HistoryEntry::Negative { neg_cond, w, .. } => {
                check_w(w)?;
                let last = self
                    .last_query
                    .clone()
                    .ok_or_else(|| ServiceError::Conflict("session has no prior query".into()))?;
                let negative = resolve_opt(&neg_cond, loaded)?;
                let g = GuidanceSpec::negative(last.positive.clone(), negative, w);
                let req = GhostRequest {
                    guidance: &g,
                    n_q: last.n_q,
                    len,
                    seed: last.seed,
                    k: last.k,
                    alignment: None,
                };
                let gq = ghost_query(engine.model, engine.sched, &loaded.index, &req)?;
                self.current_latents = gq.latents;
                self.current_cond = Some(last.positive);
                self.last_results = Some(gq.ranked.clone());
                self.history.push(HistoryEntry::Negative {
                    neg_cond,
                    w,
                    seed: last.seed,
                });
                Ok(StepResult {
                    ranked: gq.ranked,
                    retention: None,
                })
            }
            HistoryEntry::Invert {
                new_cond, k_steps, w, ..
            } => {
                check_w(w)?;
                if k_steps == 0 || k_steps > engine.sched.steps() {
                    return Err(ServiceError::Unprocessable(format!(
                        "k_steps must lie in 1..={}, got {k_steps}",
                        engine.sched.steps()
                    )));
                }
                if self.current_latents.is_empty() {
                    return Err(ServiceError::Conflict("session has no latents to edit".into()));
                }
                let last = self.last_query.clone().expect("latents imply a prior query");
                let source = self.current_cond.clone().expect("latents imply a conditioning");
                let new = new_cond.resolve(loaded)?;
                let g = GuidanceSpec::cfg(new.clone(), w);
                let edited = self
                    .current_latents
                    .iter()
                    .map(|z| edit(engine.model, z, &source, &g, k_steps, engine.sched))
                    .collect::<gdr_core::Result<Vec<_>>>()?;
                let retention = clap_score(&aggregate(&self.current_latents)?, &aggregate(&edited)?)?;
                let provenance = QueryProvenance {
                    cond_digest: Some(cond_digest(&new)),
                    negative_digest: Some(cond_digest(&g.negative)),
                    w: Some(w),
                    n_q: Some(edited.len()),
                    seed: Some(last.seed),
                    schedule: Some(engine.sched.digest()),
                    aligned: false,
                };
                let gq = rank_latents(edited, &loaded.index, last.k, None, provenance)?;
                self.current_latents = gq.latents;
                self.current_cond = Some(new.clone());
                self.last_query = Some(LastQuery {
                    positive: new,
                    w,
                    ..last
                });
                self.last_results = Some(gq.ranked.clone());
                self.history.push(HistoryEntry::Invert {
                    new_cond,
                    k_steps,
                    w,
                    retention: Some(retention),
                });
                Ok(StepResult {
                    ranked: gq.ranked,
                    retention: Some(retention),
                })
            }
        }
    }
}

/// Rebuilds a session's state from its recorded history.
pub fn replay(engine: &Engine<'_>, history: &[HistoryEntry]) -> Result<SessionState, ServiceError> {
    let mut state = SessionState::default();
    for entry in history {
        state.apply(engine, entry.clone())?;
    }
    Ok(state)
}

/// Read-only view returned by `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: String,
    pub corpus: String,
    pub model: String,
    pub seed: u64,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub history: Vec<HistoryEntry>,
    pub last_results: Option<RankedResult>,
    pub n_latents: usize,
}
