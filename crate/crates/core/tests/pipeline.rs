//! End-to-end checks across modules on a small trained model.

use std::sync::OnceLock;

use gdr_core::denoiser::{init_model, load_model, save_model, Arch, DenoiserModel, Dims};
use gdr_core::diffusion::{sample, train, GuidanceSpec, NoiseSchedule, Objective, TrainConfig, TrainReport};
use gdr_core::harness::{retrieval_experiment, EvalParams};
use gdr_core::latentdata::{gen_corpus, load_corpus, save_corpus, Corpus, Split, SynthSpec};

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| gen_corpus(&SynthSpec::default()).unwrap())
}

fn short_config() -> TrainConfig {
    TrainConfig {
        steps: 2400,
        warmup_steps: 240,
        ..TrainConfig::desk()
    }
}

fn trained() -> &'static (DenoiserModel, TrainReport) {
    static M: OnceLock<(DenoiserModel, TrainReport)> = OnceLock::new();
    M.get_or_init(|| {
        let c = corpus();
        let init = init_model(Arch::SeqAttn, Dims::new(c.d_a(), c.d_t(), 16), 0).unwrap();
        train(&init, c, &NoiseSchedule::default(), &short_config(), None).unwrap()
    })
}

#[test]
fn training_at_least_halves_the_loss() {
    let (_, report) = trained();
    assert!(
        report.final_train_loss < 0.5 * report.initial_loss,
        "loss {} -> {}",
        report.initial_loss,
        report.final_train_loss
    );
    assert_eq!(report.steps_run, report.log.last().unwrap().step);
}

#[test]
fn ghost_queries_land_in_the_prompted_cell() {
    let (model, _) = trained();
    let r = retrieval_experiment(
        model,
        corpus(),
        &NoiseSchedule::default(),
        Split::Test,
        &EvalParams::default(),
        200,
    )
    .unwrap();
    let acc = r.metrics.oracle_accuracy.unwrap();
    assert!(acc >= 0.9, "oracle accuracy {acc}");
    assert!(r.metrics.cell_recall.unwrap() > r.metrics.chance.unwrap());
}

#[test]
fn sampling_is_seed_deterministic() {
    let (model, _) = trained();
    let sched = NoiseSchedule::default();
    let cond = corpus().split(Split::Test).next().unwrap().cond.clone();
    let g = GuidanceSpec::cfg(cond, 1.0);
    let a = sample(model, &g, 3, 16, &sched, 11).unwrap();
    assert_eq!(a, sample(model, &g, 3, 16, &sched, 11).unwrap());
    assert_ne!(a, sample(model, &g, 3, 16, &sched, 12).unwrap());
}

#[test]
fn regression_training_is_deterministic_and_collapses_queries() {
    let c = corpus();
    let sched = NoiseSchedule::default();
    let cfg = TrainConfig {
        objective: Objective::Regression,
        steps: 100,
        warmup_steps: 10,
        ..TrainConfig::desk()
    };
    let init = init_model(
        Arch::PooledMlp,
        Dims::new(c.d_a(), c.d_t(), 8).with_mask(c.default_len()),
        3,
    )
    .unwrap();
    let (a, ra) = train(&init, c, &sched, &cfg, None).unwrap();
    let (b, rb) = train(&init, c, &sched, &cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.final_train_loss.to_bits(), rb.final_train_loss.to_bits());
    let g = GuidanceSpec::cfg(c.split(Split::Test).next().unwrap().cond.clone(), 1.0);
    let q = sample(&a, &g, 4, c.default_len(), &sched, 0).unwrap();
    let first = q[0].clone();
    assert!(q.iter().all(|row| *row == first));
}

#[test]
fn model_and_corpus_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = trained();
    save_model(model, dir.path().join("m.gdrm")).unwrap();
    save_corpus(corpus(), dir.path().join("c.gdrl")).unwrap();
    assert_eq!(&load_model(dir.path().join("m.gdrm")).unwrap(), model);
    assert_eq!(&load_corpus(dir.path().join("c.gdrl")).unwrap(), corpus());
}
