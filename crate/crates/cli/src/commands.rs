use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::Path;

use gdr_core::alignmetrics::{
    apply_alignment, clap_score, diversity_report, fit_alignment, frechet_rows, AlignmentTransform, DiversityReport,
};
use gdr_core::denoiser::{grad_check, init_model, load_model, save_model, Arch, DenoiserModel, Dims, GradientReport};
use gdr_core::diffusion::{edit, train, GuidanceSpec, NoiseSchedule, Objective, TrainConfig};
use gdr_core::harness::{item_query, score_queries, shift_corpus, EvalParams, QueryMetrics, ShiftSpec, TargetedQuery};
use gdr_core::latentdata::{gen_corpus, load_corpus, pool, save_corpus, CondSeq, Corpus, Labels, Split, SynthSpec};
use gdr_core::numerics::{Mat, SeededRng};
use gdr_core::retrieval::{build_index, cond_digest, ghost_query, rank_latents, GhostRequest, QueryProvenance};
use gdr_service::session::DEFAULT_INVERT_STEPS;
use gdr_service::{replay, AppState, Engine, LoadedCorpus, ServiceConfig, SessionSnapshot, StepResult};
use serde::Serialize;

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::pretty;
use crate::snapshot::{read_snapshot, sidecar, write_snapshot};

pub struct Ctx {
    pub pretty: bool,
}

/// Runs a command with absolute paths, then writes its snapshot beside the
/// primary output.
pub fn execute(mut cmd: Command, ctx: &Ctx) -> CliResult<()> {
    if let Command::Replay(r) = cmd {
        return run_replay(&r, ctx);
    }
    cmd.resolve_paths()?;
    match &cmd {
        Command::GenCorpus(a) => run_gen_corpus(a, ctx),
        Command::Train(a) => run_train(a, ctx),
        Command::Query(a) => run_query(a, ctx),
        Command::Eval(a) => run_eval(a, ctx),
        Command::Align(a) => run_align(a, ctx),
        Command::Gradcheck(a) => run_gradcheck(a, ctx),
        Command::Serve(a) => run_serve(a),
        Command::Replay(_) => unreachable!("handled above"),
    }?;
    write_snapshot(&cmd)?;
    Ok(())
}

fn json_text<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    text
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::file(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &json_text(value))
}

/// Prints `value` as JSON, or as `table` under `--pretty`.
fn print<T: Serialize>(ctx: &Ctx, value: &T, table: impl FnOnce() -> String) {
    if ctx.pretty {
        print!("{}", table());
    } else {
        print!("{}", json_text(value));
    }
}

fn print_flat<T: Serialize>(ctx: &Ctx, value: &T) {
    print(ctx, value, || {
        pretty::flat(&serde_json::to_value(value).expect("output serializes"))
    });
}

fn open_corpus(path: &Path) -> CliResult<Corpus> {
    load_corpus(path).map_err(|e| CliError::file(path, e))
}

/// Loads a checkpoint and checks it was trained under `sched`.
fn open_model(path: &Path, sched: &NoiseSchedule) -> CliResult<DenoiserModel> {
    let model = load_model(path).map_err(|e| CliError::file(path, e))?;
    if let Some(h) = &model.meta().schedule_hash {
        if *h != sched.digest() {
            return Err(CliError::Usage(format!(
                "{} was trained with schedule {h}, but the schedule flags give {}",
                path.display(),
                sched.digest()
            )));
        }
    }
    Ok(model)
}

fn open_transform(path: &Path) -> CliResult<AlignmentTransform> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::file(path, e))
}

fn check_dims(model: &DenoiserModel, corpus: &Corpus) -> CliResult<()> {
    let d = model.dims();
    if d.d_a != corpus.d_a() || d.d_t != corpus.d_t() {
        return Err(CliError::Usage(format!(
            "model dims (d_a {}, d_t {}) do not match corpus dims (d_a {}, d_t {})",
            d.d_a,
            d.d_t,
            corpus.d_a(),
            corpus.d_t()
        )));
    }
    Ok(())
}

fn check_sampling(nq: usize, w: f64, k: Option<usize>) -> CliResult<()> {
    if nq == 0 {
        return Err(CliError::Usage("--nq must be at least 1".into()));
    }
    if !w.is_finite() || w < 0.0 {
        return Err(CliError::Usage(format!("--w must be finite and >= 0, got {w}")));
    }
    if k == Some(0) {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct LabelRow<'a> {
    id: &'a str,
    split: Split,
    labels: &'a Labels,
}

#[derive(Serialize)]
struct CorpusSummary {
    items: usize,
    d_a: usize,
    d_t: usize,
    seq_len: usize,
    splits: BTreeMap<String, usize>,
    shifted: bool,
}

fn run_gen_corpus(a: &GenCorpusArgs, ctx: &Ctx) -> CliResult<()> {
    let spec = SynthSpec {
        n_genres: a.grid.genres,
        n_instruments: a.grid.instruments,
        d_a: a.d_a,
        d_t: a.d_t,
        seq_len: a.seq_len,
        items_per_cell: a.items,
        centroid_scale: a.centroid_scale,
        noise_scale: a.noise_scale,
        cond_noise_scale: a.cond_noise_scale,
        val_frac: a.val_frac,
        test_frac: a.test_frac,
        seed: a.seed,
    };
    spec.validate().map_err(CliError::from_validation)?;
    let mut corpus = gen_corpus(&spec)?;
    if a.shift.shift {
        let shift = ShiftSpec {
            scale: a.shift.shift_scale,
            mix: a.shift.shift_mix,
            offset_norm: a.shift.shift_offset,
            seed: a.shift.shift_seed,
        };
        corpus = shift_corpus(&corpus, &shift)?;
    }
    save_corpus(&corpus, &a.out).map_err(|e| CliError::file(&a.out, e))?;
    let rows: Vec<LabelRow> = corpus
        .items()
        .iter()
        .map(|it| LabelRow {
            id: &it.id,
            split: it.split,
            labels: &it.labels,
        })
        .collect();
    write_json(&sidecar(&a.out, ".labels.json"), &rows)?;

    let mut splits = BTreeMap::new();
    for it in corpus.items() {
        let name = match it.split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        *splits.entry(name.to_string()).or_insert(0) += 1;
    }
    print_flat(
        ctx,
        &CorpusSummary {
            items: corpus.len(),
            d_a: corpus.d_a(),
            d_t: corpus.d_t(),
            seq_len: corpus.default_len(),
            splits,
            shifted: a.shift.shift,
        },
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Full => TrainConfig::full(),
    };
    if let Some(o) = a.objective {
        cfg.objective = o.into();
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { cfg.$field = v; })*};
    }
    set!(steps => steps, batch => batch, lr => lr_peak, warmup => warmup_steps, cond_mask_prob => cond_mask_prob,
        token_drop_prob => token_drop_prob, eval_every => eval_every, patience => patience, log_every => log_every);
    cfg.seed = a.seed;
    cfg
}

#[derive(Serialize)]
struct TrainSummary {
    arch: Arch,
    objective: Objective,
    param_count: usize,
    train_digest: String,
    schedule: String,
    initial_loss: f64,
    final_train_loss: f64,
    final_val_loss: Option<f64>,
    best_val_loss: Option<f64>,
    early_stop_step: Option<usize>,
    steps_run: usize,
}

fn run_train(a: &TrainArgs, ctx: &Ctx) -> CliResult<()> {
    let sched = a.schedule.build()?;
    let corpus = open_corpus(&a.corpus)?;
    let cfg = train_config(a);
    cfg.validate().map_err(CliError::from_validation)?;
    let mut dims = Dims::new(corpus.d_a(), corpus.d_t(), a.hidden);
    if cfg.objective == Objective::Regression {
        dims = dims.with_mask(corpus.default_len());
    }
    let init = init_model(a.arch.into(), dims, a.seed).map_err(CliError::from_validation)?;

    let log_path = sidecar(&a.out, ".log.jsonl");
    let file = File::create(&log_path).map_err(|e| CliError::file(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let (model, report) = train(&init, &corpus, &sched, &cfg, Some(&mut log))?;
    log.flush().map_err(|e| CliError::file(&log_path, e))?;
    save_model(&model, &a.out).map_err(|e| CliError::file(&a.out, e))?;
    write_json(&sidecar(&a.out, ".report.json"), &report)?;
    eprintln!("trained {} steps in {:.1} s", report.steps_run, report.wall_time_secs);

    print_flat(
        ctx,
        &TrainSummary {
            arch: model.arch(),
            objective: cfg.objective,
            param_count: model.param_count(),
            train_digest: cfg.digest(),
            schedule: sched.digest(),
            initial_loss: report.initial_loss,
            final_train_loss: report.final_train_loss,
            final_val_loss: report.final_val_loss,
            best_val_loss: report.best_val_loss,
            early_stop_step: report.early_stop_step,
            steps_run: report.steps_run,
        },
    );
    Ok(())
}

fn prompt(loaded: &LoadedCorpus, text: &str, flag: &str) -> CliResult<CondSeq> {
    let world = loaded.world.as_ref().ok_or_else(|| {
        CliError::Usage(format!(
            "{flag} needs a synthetic corpus; use --cond-item on imported corpora"
        ))
    })?;
    world.parse_prompt(text).map_err(CliError::from_validation)
}

fn run_query(a: &QueryArgs, ctx: &Ctx) -> CliResult<()> {
    let sched = a.schedule.build()?;
    let model = open_model(&a.model, &sched)?;
    let corpus = open_corpus(&a.corpus)?;
    check_dims(&model, &corpus)?;
    let loaded = LoadedCorpus::new(corpus)?;

    let result = if let Some(path) = &a.replay_session {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let snap: SessionSnapshot = serde_json::from_str(&text).map_err(|e| CliError::file(path, e))?;
        let engine = Engine {
            model: &model,
            loaded: &loaded,
            sched: &sched,
        };
        let state = replay(&engine, &snap.history)?;
        let ranked = state
            .last_results
            .ok_or_else(|| CliError::Usage(format!("session {} has no results to replay", snap.id)))?;
        StepResult {
            ranked,
            retention: None,
        }
    } else {
        check_sampling(a.nq, a.w, Some(a.k))?;
        let positive = match (&a.cond, &a.cond_item) {
            (Some(text), _) => prompt(&loaded, text, "--cond")?,
            (None, Some(id)) => loaded
                .corpus
                .item(id)
                .ok_or_else(|| CliError::Usage(format!("no corpus item {id}")))?
                .cond
                .clone(),
            (None, None) => unreachable!("clap requires a prompt"),
        };
        let guidance = match &a.negative {
            Some(text) => GuidanceSpec::negative(positive, prompt(&loaded, text, "--negative")?, a.w),
            None => GuidanceSpec::cfg(positive, a.w),
        };
        let transform = a.align.as_deref().map(open_transform).transpose()?;
        match &a.invert_from {
            Some(id) => invert_query(a, &model, &loaded, &sched, &guidance, id, transform.as_ref())?,
            None => {
                let req = GhostRequest {
                    guidance: &guidance,
                    n_q: a.nq,
                    len: loaded.corpus.default_len(),
                    seed: a.seed,
                    k: a.k,
                    alignment: transform.as_ref(),
                };
                let gq = ghost_query(&model, &sched, &loaded.index, &req)?;
                StepResult {
                    ranked: gq.ranked,
                    retention: None,
                }
            }
        }
    };
    if let Some(out) = &a.out {
        write_json(out, &result)?;
    }
    print(ctx, &result, || pretty::ranking(&result.ranked, result.retention));
    Ok(())
}

/// Edits a corpus item's latent towards `guidance`; retention is the cosine
/// between the pooled latent before and after.
fn invert_query(
    a: &QueryArgs,
    model: &DenoiserModel,
    loaded: &LoadedCorpus,
    sched: &NoiseSchedule,
    guidance: &GuidanceSpec,
    id: &str,
    transform: Option<&AlignmentTransform>,
) -> CliResult<StepResult> {
    let item = loaded
        .corpus
        .item(id)
        .ok_or_else(|| CliError::Usage(format!("no corpus item {id} to invert from")))?;
    let depth = a.invert_steps.unwrap_or(DEFAULT_INVERT_STEPS);
    if depth == 0 || depth > sched.steps() {
        return Err(CliError::Usage(format!(
            "--invert-steps must lie in 1..={}, got {depth}",
            sched.steps()
        )));
    }
    let edited = edit(model, &item.audio, &item.cond, guidance, depth, sched)?;
    let retention = clap_score(&pool(&item.audio), &pool(&edited))?;
    let provenance = QueryProvenance {
        cond_digest: Some(cond_digest(&guidance.positive)),
        negative_digest: Some(cond_digest(&guidance.negative)),
        w: Some(guidance.w),
        n_q: Some(1),
        seed: None,
        schedule: Some(sched.digest()),
        aligned: false,
    };
    let gq = rank_latents(vec![edited], &loaded.index, a.k, transform, provenance)?;
    Ok(StepResult {
        ranked: gq.ranked,
        retention: Some(retention),
    })
}

#[derive(Serialize)]
struct EvalSettings {
    queries: QuerySource,
    split: Split,
    n_q: usize,
    w: f64,
    k: usize,
    seed: u64,
    perm: usize,
    aligned: bool,
}

#[derive(Serialize)]
struct EvalOutput {
    settings: EvalSettings,
    metrics: QueryMetrics,
    diversity: Option<DiversityReport>,
}

fn run_eval(a: &EvalArgs, ctx: &Ctx) -> CliResult<()> {
    check_sampling(a.nq, a.w, Some(a.k))?;
    if a.perm == 0 {
        return Err(CliError::Usage("--perm must be at least 1".into()));
    }
    let sched = a.schedule.build()?;
    let corpus = open_corpus(&a.corpus)?;
    let index = build_index(&corpus, None)?;
    let split: Split = a.split.into();
    let transform = a.align.as_deref().map(open_transform).transpose()?;
    let align = |q: Vec<f64>| -> CliResult<Vec<f64>> {
        match &transform {
            Some(t) => Ok(t.apply_vec(&q)?),
            None => Ok(q),
        }
    };

    let mut queries = Vec::new();
    let mut clusters = Vec::new();
    match a.queries {
        QuerySource::Ghost => {
            let path = a
                .model
                .as_deref()
                .ok_or_else(|| CliError::Usage("--model is required for ghost queries".into()))?;
            let model = open_model(path, &sched)?;
            check_dims(&model, &corpus)?;
            let params = EvalParams {
                w: a.w,
                n_q: a.nq,
                k: a.k,
                seed: a.seed,
            };
            for (j, item) in corpus.split(split).enumerate() {
                let (q, rows) = item_query(&model, &sched, item, &params, a.seed.wrapping_add(j as u64))?;
                queries.push(TargetedQuery {
                    target: q.target,
                    query: align(q.query)?,
                });
                clusters.push(rows);
            }
        }
        QuerySource::Keys => {
            for item in corpus.split(split) {
                queries.push(TargetedQuery {
                    target: item.id.clone(),
                    query: align(pool(&item.audio))?,
                });
            }
        }
    }
    if queries.is_empty() {
        return Err(CliError::Usage(format!("split {split:?} has no items")));
    }
    let metrics = score_queries(&corpus, &index, &queries, a.k, a.perm, a.seed)?;
    let diversity = if a.queries == QuerySource::Ghost && a.nq >= 2 {
        Some(diversity_report(&clusters)?)
    } else {
        None
    };
    let output = EvalOutput {
        settings: EvalSettings {
            queries: a.queries,
            split,
            n_q: a.nq,
            w: a.w,
            k: a.k,
            seed: a.seed,
            perm: a.perm,
            aligned: transform.is_some(),
        },
        metrics,
        diversity,
    };
    if let Some(out) = &a.out {
        write_json(out, &output)?;
    }
    print_flat(ctx, &output);
    Ok(())
}

#[derive(Serialize)]
struct AlignSummary {
    n_queries: usize,
    ridge: f64,
    fd_raw: f64,
    fd_aligned: f64,
}

fn run_align(a: &AlignArgs, ctx: &Ctx) -> CliResult<()> {
    check_sampling(a.nq, a.w, None)?;
    let sched = a.schedule.build()?;
    let model = open_model(&a.model, &sched)?;
    let corpus = open_corpus(&a.corpus)?;
    check_dims(&model, &corpus)?;
    let params = EvalParams {
        w: a.w,
        n_q: a.nq,
        k: 1,
        seed: a.seed,
    };
    let mut queries = Vec::with_capacity(corpus.len());
    for (j, item) in corpus.items().iter().enumerate() {
        queries.push(
            item_query(&model, &sched, item, &params, a.seed.wrapping_add(j as u64))?
                .0
                .query,
        );
    }
    let keys: Vec<Vec<f64>> = corpus.items().iter().map(|it| pool(&it.audio)).collect();
    let raw = Mat::from_rows(&queries)?;
    let keys = Mat::from_rows(&keys)?;
    let transform = fit_alignment(&raw, &keys, a.ridge)?;
    let aligned = apply_alignment(&transform, &raw)?;
    write_json(&a.out, &transform)?;
    print_flat(
        ctx,
        &AlignSummary {
            n_queries: queries.len(),
            ridge: a.ridge,
            fd_raw: frechet_rows(&raw, &keys)?,
            fd_aligned: frechet_rows(&aligned, &keys)?,
        },
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    tolerance: f64,
    passed: bool,
    reports: Vec<GradientReport>,
}

fn run_gradcheck(a: &GradcheckArgs, ctx: &Ctx) -> CliResult<()> {
    if !(a.tolerance >= 0.0) {
        return Err(CliError::Usage(format!(
            "--tolerance must be >= 0, got {}",
            a.tolerance
        )));
    }
    let dims = Dims {
        d_time: 8,
        ..Dims::new(a.d_a, a.d_t, a.hidden)
    };
    let mut reports = Vec::new();
    for (i, arch) in [Arch::SeqAttn, Arch::PooledMlp].into_iter().enumerate() {
        let model = init_model(arch, dims, a.seed).map_err(CliError::from_validation)?;
        let mut rng = SeededRng::new(a.seed, 0x9c + i as u64);
        reports.push(grad_check(&model, a.tolerance, &mut rng).map_err(CliError::from_validation)?);
    }
    let output = GradcheckOutput {
        tolerance: a.tolerance,
        passed: reports.iter().all(|r| r.passed),
        reports,
    };
    if let Some(out) = &a.out {
        write_json(out, &output)?;
    }
    print(ctx, &output, || pretty::gradcheck(&output.reports));
    if let Some(worst) = output
        .reports
        .iter()
        .filter(|r| !r.passed)
        .max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err))
    {
        return Err(CliError::CheckFailed(format!(
            "{} max relative error {:.3e} in segment {} exceeds {:.1e}",
            worst.arch, worst.max_rel_err, worst.worst_segment, a.tolerance
        )));
    }
    Ok(())
}

fn run_serve(a: &ServeArgs) -> CliResult<()> {
    let sched = a.schedule.build()?;
    let config = ServiceConfig {
        session_cap: a.session_cap,
        eviction: a.eviction.into(),
        default_seed: a.seed,
        ..ServiceConfig::default()
    };
    if config.session_cap == 0 {
        return Err(CliError::Usage("--session-cap must be at least 1".into()));
    }
    let mut state = AppState::new(config, sched.clone());
    for m in &a.models {
        state.add_model(&m.name, open_model(&m.path, &sched)?);
    }
    for c in &a.corpora {
        state.add_corpus(&c.name, open_corpus(&c.path)?)?;
    }
    let ip = a
        .host
        .parse()
        .map_err(|e| CliError::Usage(format!("--host {:?}: {e}", a.host)))?;
    let addr = SocketAddr::new(ip, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.into()))?;
    eprintln!("listening on http://{addr}");
    rt.block_on(gdr_service::serve(state, addr))
        .map_err(|e| CliError::Runtime(e.into()))
}

fn run_replay(a: &ReplayArgs, ctx: &Ctx) -> CliResult<()> {
    let snap = read_snapshot(&a.snapshot)?;
    let mut cmd = snap.run;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
        let dir = dir.canonicalize().map_err(|e| CliError::file(dir, e))?;
        cmd.rebase_output(&dir)?;
    }
    execute(cmd, ctx)
}
