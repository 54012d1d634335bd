//! Oracle-backed experiments on synthetic corpora. Each experiment returns a
//! serializable report; pass/fail thresholds are left to callers.

use serde::{Deserialize, Serialize};

use crate::alignmetrics::{
    apply_alignment, clap_score, diversity_report, fit_alignment, frechet_rows, DiversityReport, DEFAULT_RIDGE,
};
use crate::denoiser::Denoiser;
use crate::diffusion::{denoise, edit, invert, sample, GuidanceSpec, NoiseSchedule};
use crate::error::{GdrError, Result};
use crate::latentdata::{aggregate, instrument_label, pool, Cell, Corpus, Labels, Provenance, Split, INSTRUMENT};
use crate::numerics::{axpy, cosine, gaussian_mat, Mat, SeededRng};
use crate::retrieval::{
    audio_interp, build_index, eval_retrieval, ghost_query, text_interp, topk, CorpusIndex, GhostRequest, RankedResult,
    RetrievalMetrics,
};

/// Sampling parameters shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub w: f64,
    pub n_q: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            w: 1.0,
            n_q: 5,
            k: 5,
            seed: 0,
        }
    }
}

pub fn cell_hit(ranked: &RankedResult, cell: Cell) -> bool {
    ranked
        .results
        .iter()
        .any(|h| Cell::from_labels(&h.labels) == Some(cell))
}

/// Fraction of results whose label `key` equals `value`.
pub fn label_fraction(ranked: &RankedResult, key: &str, value: &str) -> f64 {
    if ranked.results.is_empty() {
        return 0.0;
    }
    let n = ranked
        .results
        .iter()
        .filter(|h| h.labels.get(key).map(String::as_str) == Some(value))
        .count();
    n as f64 / ranked.results.len() as f64
}

fn item_cell(labels: &Labels, id: &str) -> Result<Cell> {
    Cell::from_labels(labels).ok_or_else(|| GdrError::EvalError(format!("item {id} has no genre/instrument labels")))
}

fn pooled_rows(corpus: &Corpus) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = corpus.items().iter().map(|it| pool(&it.audio)).collect();
    Mat::from_rows(&rows)
}

/// Mean cell hit rate when index items' cells are randomly permuted, plus
/// the fraction of permutations reaching `observed`.
pub fn permutation_chance(
    index: &CorpusIndex,
    topk_positions: &[Vec<usize>],
    query_cells: &[Cell],
    observed: f64,
    n_perm: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut cells = (0..index.len())
        .map(|i| item_cell(index.labels(i), &index.ids()[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = SeededRng::new(seed, 0x9e7);
    let (mut total, mut at_least) = (0.0, 0usize);
    for _ in 0..n_perm {
        rng.shuffle(&mut cells);
        let hits = topk_positions
            .iter()
            .zip(query_cells)
            .filter(|(pos, c)| pos.iter().any(|&p| cells[p] == **c))
            .count();
        let rate = hits as f64 / query_cells.len() as f64;
        total += rate;
        if rate >= observed {
            at_least += 1;
        }
    }
    Ok((total / n_perm as f64, (at_least + 1) as f64 / (n_perm + 1) as f64))
}

/// A query vector with the id of the item it should retrieve.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetedQuery {
    pub target: String,
    pub query: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub n_queries: usize,
    /// Recall of the exact target item, with the normalized median rank.
    pub paired: RetrievalMetrics,
    /// Fraction of queries with an item of the target's cell in the top k.
    pub cell_recall: Option<f64>,
    /// Mean cell recall under random permutations of item cells.
    pub chance: Option<f64>,
    pub p_value: Option<f64>,
    /// Fraction of queries whose oracle label is the target's cell.
    pub oracle_accuracy: Option<f64>,
    /// Fréchet distance from the query set to the pooled corpus.
    pub fd_to_corpus: Option<f64>,
}

/// Scores queries against `index`. Cell-level figures need genre/instrument
/// labels on every item, oracle accuracy needs a synthetic corpus, and FD
/// needs at least two queries; each is None otherwise.
pub fn score_queries(
    corpus: &Corpus,
    index: &CorpusIndex,
    queries: &[TargetedQuery],
    k: usize,
    n_perm: usize,
    seed: u64,
) -> Result<QueryMetrics> {
    if queries.is_empty() {
        return Err(GdrError::EmptyInput("no queries to score".into()));
    }
    let pairs: Vec<(String, Vec<f64>)> = queries.iter().map(|q| (q.target.clone(), q.query.clone())).collect();
    let paired = eval_retrieval(index, &pairs, &[1, 5, 10])?;

    let labelled = (0..index.len()).all(|i| Cell::from_labels(index.labels(i)).is_some());
    let (mut cell_recall, mut chance, mut p_value) = (None, None, None);
    if labelled {
        let mut positions = Vec::with_capacity(queries.len());
        let mut cells = Vec::with_capacity(queries.len());
        let mut hits = 0usize;
        for q in queries {
            let pos = index.position(&q.target).expect("eval_retrieval checked targets");
            let cell = item_cell(index.labels(pos), &q.target)?;
            let ranked = topk(index, &q.query, k)?;
            if cell_hit(&ranked, cell) {
                hits += 1;
            }
            positions.push(
                ranked
                    .results
                    .iter()
                    .map(|h| index.position(&h.id).expect("indexed id"))
                    .collect(),
            );
            cells.push(cell);
        }
        let recall = hits as f64 / queries.len() as f64;
        let (c, p) = permutation_chance(index, &positions, &cells, recall, n_perm.max(1), seed)?;
        cell_recall = Some(recall);
        chance = Some(c);
        p_value = Some(p);
    }

    let oracle_accuracy = match (corpus.world(), labelled) {
        (Ok(world), true) => {
            let mut hits = 0usize;
            for q in queries {
                let pos = index.position(&q.target).expect("indexed id");
                if world.nearest_cell(&q.query)? == item_cell(index.labels(pos), &q.target)? {
                    hits += 1;
                }
            }
            Some(hits as f64 / queries.len() as f64)
        }
        _ => None,
    };
    let fd_to_corpus = if queries.len() >= 2 {
        let rows: Vec<&[f64]> = queries.iter().map(|q| q.query.as_slice()).collect();
        Some(frechet_rows(&Mat::from_rows(&rows)?, &pooled_rows(corpus)?)?)
    } else {
        None
    };
    Ok(QueryMetrics {
        n_queries: queries.len(),
        paired,
        cell_recall,
        chance,
        p_value,
        oracle_accuracy,
        fd_to_corpus,
    })
}

/// Aggregated ghost query and pooled samples for one item's conditioning.
pub fn item_query<D: Denoiser + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    item: &crate::latentdata::CorpusItem,
    params: &EvalParams,
    seed: u64,
) -> Result<(TargetedQuery, Mat)> {
    let g = GuidanceSpec::cfg(item.cond.clone(), params.w);
    let latents = sample(model, &g, params.n_q, item.audio.len(), sched, seed)?;
    let rows: Vec<Vec<f64>> = latents.iter().map(pool).collect();
    Ok((
        TargetedQuery {
            target: item.id.clone(),
            query: aggregate(&latents)?,
        },
        Mat::from_rows(&rows)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub params: EvalParams,
    pub metrics: QueryMetrics,
    pub diversity: Option<DiversityReport>,
}

/// Ghost queries for every prompt of `split`, ranked against all items.
/// Prompt `j` samples with seed `params.seed + j`.
pub fn retrieval_experiment<D: Denoiser + ?Sized>(
    model: &D,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    split: Split,
    params: &EvalParams,
    n_perm: usize,
) -> Result<RetrievalReport> {
    let index = build_index(corpus, None)?;
    let mut queries = Vec::new();
    let mut clusters = Vec::new();
    for (j, item) in corpus.split(split).enumerate() {
        let (q, rows) = item_query(model, sched, item, params, params.seed.wrapping_add(j as u64))?;
        queries.push(q);
        clusters.push(rows);
    }
    if queries.is_empty() {
        return Err(GdrError::EmptyInput(format!("split {split:?} has no prompts")));
    }
    let diversity = if params.n_q >= 2 {
        Some(diversity_report(&clusters)?)
    } else {
        None
    };
    Ok(RetrievalReport {
        params: *params,
        metrics: score_queries(corpus, &index, &queries, params.k, n_perm, params.seed)?,
        diversity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    /// Smallest swept strength whose suppression matches negative prompting.
    pub matched_w: Option<f64>,
    pub fraction: f64,
    pub fd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativePromptReport {
    pub params: EvalParams,
    pub pairs: usize,
    /// Mean top-k frequency of the negated instrument.
    pub plain_fraction: f64,
    pub negative_fraction: f64,
    pub fd_plain: f64,
    pub fd_negative: f64,
    pub text_interp: BaselineResult,
    pub audio_interp: BaselineResult,
}

/// Strength grid for the interpolation baselines: 0.05, 0.10, …, 5.00.
pub fn baseline_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 * 0.05).collect()
}

/// Genre-only prompts with every instrument negated in turn, `reps` seeds per pair.
pub fn negative_prompt_experiment<D: Denoiser + ?Sized>(
    model: &D,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    params: &EvalParams,
    reps: usize,
) -> Result<NegativePromptReport> {
    let world = corpus.world()?;
    let spec = world.spec().clone();
    let index = build_index(corpus, None)?;
    let reference = pooled_rows(corpus)?;
    let len = corpus.default_len();

    struct Pair {
        genre: usize,
        instrument: usize,
        plain: Vec<Vec<f64>>,
        negated: Vec<Vec<f64>>,
    }
    let mut pairs = Vec::new();
    let (mut plain_frac, mut neg_frac) = (0.0, 0.0);
    let (mut plain_rows, mut neg_rows) = (Vec::new(), Vec::new());
    for genre in 0..spec.n_genres {
        for instrument in 0..spec.n_instruments {
            for _ in 0..reps {
                let seed = params.seed.wrapping_add(pairs.len() as u64 * 1000);
                let pos = world.prompt(Some(genre), None)?;
                let neg = world.prompt(None, Some(instrument))?;
                let target = instrument_label(instrument);
                let run = |g: &GuidanceSpec| {
                    ghost_query(
                        model,
                        sched,
                        &index,
                        &GhostRequest {
                            guidance: g,
                            n_q: params.n_q,
                            len,
                            seed,
                            k: params.k,
                            alignment: None,
                        },
                    )
                };
                let plain = run(&GuidanceSpec::cfg(pos.clone(), params.w))?;
                let np = run(&GuidanceSpec::negative(pos, neg.clone(), params.w))?;
                let negated = sample(model, &GuidanceSpec::cfg(neg, params.w), params.n_q, len, sched, seed)?;
                plain_frac += label_fraction(&plain.ranked, INSTRUMENT, &target);
                neg_frac += label_fraction(&np.ranked, INSTRUMENT, &target);
                let plain_pooled: Vec<Vec<f64>> = plain.latents.iter().map(pool).collect();
                plain_rows.extend(plain_pooled.iter().cloned());
                neg_rows.extend(np.latents.iter().map(pool));
                pairs.push(Pair {
                    genre,
                    instrument,
                    plain: plain_pooled,
                    negated: negated.iter().map(pool).collect(),
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(GdrError::EmptyInput("no prompt pairs".into()));
    }
    let n = pairs.len() as f64;
    let negative_fraction = neg_frac / n;

    // Applies a per-sample modification, then scores suppression on the
    // aggregated query and FD on the modified samples.
    let baseline = |modify: &dyn Fn(&Pair, usize, f64) -> Result<Vec<f64>>, w: f64| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut frac = 0.0;
        let mut rows = Vec::new();
        for p in &pairs {
            let mut q = vec![0.0; spec.d_a];
            for j in 0..p.plain.len() {
                let r = modify(p, j, w)?;
                axpy(1.0 / p.plain.len() as f64, &r, &mut q);
                rows.push(r);
            }
            let ranked = topk(&index, &q, params.k)?;
            frac += label_fraction(&ranked, INSTRUMENT, &instrument_label(p.instrument));
        }
        Ok((frac / n, rows))
    };
    let sweep = |modify: &dyn Fn(&Pair, usize, f64) -> Result<Vec<f64>>| -> Result<BaselineResult> {
        let grid = baseline_grid();
        let mut last = None;
        for &w in &grid {
            let (frac, rows) = baseline(modify, w)?;
            if frac <= negative_fraction {
                return Ok(BaselineResult {
                    matched_w: Some(w),
                    fraction: frac,
                    fd: frechet_rows(&Mat::from_rows(&rows)?, &reference)?,
                });
            }
            last = Some((frac, rows));
        }
        let (frac, rows) = last.expect("grid is non-empty");
        Ok(BaselineResult {
            matched_w: None,
            fraction: frac,
            fd: frechet_rows(&Mat::from_rows(&rows)?, &reference)?,
        })
    };
    let text = sweep(&|p: &Pair, j, w| {
        text_interp(
            &p.plain[j],
            &world.lift(Some(p.genre), None),
            &world.lift(None, Some(p.instrument)),
            w,
        )
    })?;
    let audio = sweep(&|p: &Pair, j, w| audio_interp(&p.plain[j], &p.negated[j], w))?;

    Ok(NegativePromptReport {
        params: *params,
        pairs: pairs.len(),
        plain_fraction: plain_frac / n,
        negative_fraction,
        fd_plain: frechet_rows(&Mat::from_rows(&plain_rows)?, &reference)?,
        fd_negative: frechet_rows(&Mat::from_rows(&neg_rows)?, &reference)?,
        text_interp: text,
        audio_interp: audio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub params: EvalParams,
    pub depth: usize,
    pub pairs: usize,
    /// Mean clap_score(edited, original).
    pub retention_invert: f64,
    /// Mean clap_score(fresh sample under the new prompt, original).
    pub retention_regenerate: f64,
    /// Fraction of edits whose oracle instrument is the requested one.
    pub attribute_changed: f64,
}

/// Swaps the instrument of each `split` item by inversion to `depth` and
/// compares with regenerating from scratch under the same new prompt.
pub fn edit_experiment<D: Denoiser + ?Sized>(
    model: &D,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    split: Split,
    depth: usize,
    params: &EvalParams,
) -> Result<EditReport> {
    let world = corpus.world()?;
    let n_i = world.spec().n_instruments;
    let (mut ri, mut rr, mut changed, mut n) = (0.0, 0.0, 0usize, 0usize);
    for (j, item) in corpus.split(split).enumerate() {
        let cell = item_cell(&item.labels, &item.id)?;
        let new_instrument = (cell.instrument + 1 + j % (n_i - 1)) % n_i;
        let g = GuidanceSpec::cfg(world.prompt(Some(cell.genre), Some(new_instrument))?, params.w);
        let edited = edit(model, &item.audio, &item.cond, &g, depth, sched)?;
        let fresh = sample(
            model,
            &g,
            1,
            item.audio.len(),
            sched,
            params.seed.wrapping_add(j as u64),
        )?;
        let original = pool(&item.audio);
        ri += clap_score(&pool(&edited), &original)?;
        rr += clap_score(&pool(&fresh[0]), &original)?;
        if world.nearest_cell(&pool(&edited))?.instrument == new_instrument {
            changed += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(GdrError::EmptyInput(format!("split {split:?} has no items")));
    }
    let nf = n as f64;
    Ok(EditReport {
        params: *params,
        depth,
        pairs: n,
        retention_invert: ri / nf,
        retention_regenerate: rr / nf,
        attribute_changed: changed as f64 / nf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub n: usize,
    pub depth: usize,
    pub mean_cosine: f64,
    pub min_cosine: f64,
}

/// Inverts up to `n` items of `split` to `depth` under their own conditioning
/// and denoises back unguided.
pub fn round_trip_experiment<D: Denoiser + ?Sized>(
    model: &D,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    split: Split,
    depth: usize,
    n: usize,
) -> Result<RoundTripReport> {
    let mut cosines = Vec::new();
    for item in corpus.split(split).take(n) {
        let pivot = invert(model, &item.audio, &item.cond, depth, sched)?;
        let back = denoise(model, pivot, depth, &GuidanceSpec::cfg(item.cond.clone(), 0.0), sched)?;
        cosines.push(cosine(&pool(&back), &pool(&item.audio))?);
    }
    if cosines.is_empty() {
        return Err(GdrError::EmptyInput(format!("split {split:?} has no items")));
    }
    Ok(RoundTripReport {
        n: cosines.len(),
        depth,
        mean_cosine: cosines.iter().sum::<f64>() / cosines.len() as f64,
        min_cosine: cosines.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Affine change of audio space: z ↦ (scale·I + mix·G/√d)·z + b with ‖b‖ = offset_norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub scale: f64,
    pub mix: f64,
    pub offset_norm: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            scale: 0.5,
            mix: 0.1,
            offset_norm: 4.0,
            seed: 99,
        }
    }
}

pub fn shift_corpus(corpus: &Corpus, shift: &ShiftSpec) -> Result<Corpus> {
    let d = corpus.d_a();
    let mut rng = SeededRng::new(shift.seed, 0x5417);
    let mix = gaussian_mat(&mut rng, d, d)
        .scale(shift.mix / (d as f64).sqrt())
        .add(&Mat::identity(d).scale(shift.scale))?;
    let raw = rng.normal_vec(d);
    let rn = crate::numerics::norm(&raw);
    let b: Vec<f64> = raw.iter().map(|v| v * shift.offset_norm / rn).collect();
    let source = format!(
        "affine shift (scale {}, mix {}, offset {}, seed {})",
        shift.scale, shift.mix, shift.offset_norm, shift.seed
    );
    corpus.map_audio(
        |f| {
            let mut o = mix.matvec(f).expect("frame matches d_a");
            axpy(1.0, &b, &mut o);
            o
        },
        Provenance::Imported { source },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub seed: u64,
    pub fd_raw: f64,
    pub fd_aligned: f64,
    pub cell_recall_raw: f64,
    pub cell_recall_aligned: f64,
}

/// Queries are generated for every item's conditioning; the alignment is fit
/// from the aggregated queries to the pooled keys of `target`, and recall is
/// scored on the prompts of `split`.
pub fn alignment_experiment<D: Denoiser + ?Sized>(
    model: &D,
    target: &Corpus,
    sched: &NoiseSchedule,
    split: Split,
    params: &EvalParams,
) -> Result<AlignmentReport> {
    let index = build_index(target, None)?;
    let keys = pooled_rows(target)?;
    let mut queries = Vec::new();
    for (j, item) in target.items().iter().enumerate() {
        let g = GuidanceSpec::cfg(item.cond.clone(), params.w);
        let latents = sample(
            model,
            &g,
            params.n_q,
            item.audio.len(),
            sched,
            params.seed.wrapping_add(j as u64),
        )?;
        queries.push(aggregate(&latents)?);
    }
    let raw = Mat::from_rows(&queries)?;
    let transform = fit_alignment(&raw, &keys, DEFAULT_RIDGE)?;
    let aligned = apply_alignment(&transform, &raw)?;
    let recall = |m: &Mat| -> Result<f64> {
        let (mut hits, mut n) = (0usize, 0usize);
        for (item, q) in target.items().iter().zip(m.row_iter()) {
            if item.split != split {
                continue;
            }
            n += 1;
            if cell_hit(&topk(&index, q, params.k)?, item_cell(&item.labels, &item.id)?) {
                hits += 1;
            }
        }
        if n == 0 {
            return Err(GdrError::EmptyInput(format!("split {split:?} has no items")));
        }
        Ok(hits as f64 / n as f64)
    };
    Ok(AlignmentReport {
        seed: params.seed,
        fd_raw: frechet_rows(&raw, &keys)?,
        fd_aligned: frechet_rows(&aligned, &keys)?,
        cell_recall_raw: recall(&raw)?,
        cell_recall_aligned: recall(&aligned)?,
    })
}

/// Per-prompt clusters of pooled samples for the prompts of `split`.
pub fn prompt_clusters<D: Denoiser + ?Sized>(
    model: &D,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    split: Split,
    params: &EvalParams,
) -> Result<Vec<Mat>> {
    corpus
        .split(split)
        .enumerate()
        .map(|(j, item)| {
            let g = GuidanceSpec::cfg(item.cond.clone(), params.w);
            let latents = sample(
                model,
                &g,
                params.n_q,
                item.audio.len(),
                sched,
                params.seed.wrapping_add(j as u64),
            )?;
            let rows: Vec<Vec<f64>> = latents.iter().map(pool).collect();
            Mat::from_rows(&rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latentdata::{gen_corpus, SynthSpec};
    use crate::retrieval::Hit;

    fn small() -> Corpus {
        gen_corpus(&SynthSpec {
            n_genres: 2,
            n_instruments: 2,
            d_a: 6,
            d_t: 4,
            seq_len: 3,
            items_per_cell: 8,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn label_fraction_counts_matches() {
        let hit = |inst: &str| Hit {
            id: inst.into(),
            score: 0.0,
            rank: 1,
            labels: [(INSTRUMENT.to_string(), inst.to_string())].into_iter().collect(),
        };
        let r = RankedResult {
            query: Default::default(),
            results: vec![hit("i0"), hit("i1"), hit("i1"), hit("i2")],
        };
        assert_eq!(label_fraction(&r, INSTRUMENT, "i1"), 0.5);
        assert_eq!(label_fraction(&r, INSTRUMENT, "i9"), 0.0);
    }

    #[test]
    fn permutation_chance_matches_hypergeometric_rate() {
        // 2x2 grid with 8 items per cell: a random top-1 is in a given cell w.p. 1/4
        let corpus = small();
        let index = build_index(&corpus, None).unwrap();
        let positions: Vec<Vec<usize>> = (0..index.len()).map(|i| vec![i]).collect();
        let cells: Vec<Cell> = (0..index.len())
            .map(|i| Cell::from_labels(index.labels(i)).unwrap())
            .collect();
        let (chance, p) = permutation_chance(&index, &positions, &cells, 1.0, 2000, 1).unwrap();
        assert!((chance - 0.25).abs() < 0.01, "chance {chance}");
        assert!(p < 0.01);
    }

    #[test]
    fn shift_is_deterministic_and_moves_keys() {
        let corpus = small();
        let a = shift_corpus(&corpus, &ShiftSpec::default()).unwrap();
        let b = shift_corpus(&corpus, &ShiftSpec::default()).unwrap();
        assert_eq!(a, b);
        assert!(matches!(a.world(), Err(GdrError::NoOracle)));
        let fd = frechet_rows(&pooled_rows(&a).unwrap(), &pooled_rows(&corpus).unwrap()).unwrap();
        assert!(fd > 1.0);
    }

    #[test]
    fn baseline_grid_is_increasing() {
        let g = baseline_grid();
        assert_eq!(g.len(), 100);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!((g[99] - 5.0).abs() < 1e-12);
    }
}
