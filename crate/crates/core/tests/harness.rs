use std::fs;
use std::path::Path;

use retrospect::data::Dataset;
use retrospect::harness::{
    analyze, emit_paired, emit_run, emit_sweep, run_paired_on, sweep_on, train_on, DatasetSpec,
    PairSummary, RunConfig, RunRecord, RunStatus, RunSummary, SweepAxis, Trainer,
};
use retrospect::optim::OptimizerConfig;
use retrospect::retro::{guidance_step_index, Norm, RetroConfig};

fn blobs(spread: f64, epochs: usize) -> RunConfig {
    RunConfig {
        seed: 1,
        layer_sizes: vec![2, 16, 3],
        epochs,
        batch_size: 32,
        eval_every_steps: 20,
        out_dir: None,
        dataset: DatasetSpec::Blobs {
            classes: 3,
            dims: 2,
            train_per_class: 100,
            test_per_class: 100,
            spread,
            seed: 5,
        },
        optimizer: OptimizerConfig::momentum(0.1, 0.5),
        retro: RetroConfig::default(),
    }
}

fn data(cfg: &RunConfig) -> (Dataset<f64>, Dataset<f64>) {
    cfg.dataset.load(Path::new(".")).unwrap()
}

fn without_timing(mut r: RunRecord) -> RunRecord {
    r.duration_secs = 0.0;
    r
}

#[test]
fn disabled_equals_infinite_warmup() {
    let cfg = blobs(0.5, 4);
    let (train, test) = data(&cfg);
    let off = train_on(&cfg.with_retro_enabled(false), &train, &test).unwrap();
    let mut inf = cfg.clone();
    inf.retro.warmup_steps = u64::MAX;
    let inf = train_on(&inf, &train, &test).unwrap();
    assert_eq!(off.steps, inf.steps);
    assert_eq!(off.evals, inf.evals);
    assert_eq!(off.final_test_error, inf.final_test_error);
    assert!(off.steps.iter().all(|s| s.alpha == 1.0 && s.total_loss == s.task_loss));
}

#[test]
fn disabled_matches_pure_task_loss_parameters() {
    let cfg = blobs(0.5, 2);
    let (train, test) = data(&cfg);
    let mut off = Trainer::new(&cfg.with_retro_enabled(false), &train, &test).unwrap();
    let mut huge = cfg.clone();
    huge.retro.warmup_steps = 1_000_000;
    let mut inf = Trainer::new(&huge, &train, &test).unwrap();
    while let (Some(_), Some(_)) = (off.step().unwrap(), inf.step().unwrap()) {
        let a: Vec<u64> = off.model().flat_values().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = inf.model().flat_values().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn kappa_zero_is_not_the_baseline() {
    let mut cfg = blobs(0.5, 2);
    cfg.retro.kappa = 0.0;
    let (train, test) = data(&cfg);
    let base = train_on(&cfg.with_retro_enabled(false), &train, &test).unwrap();
    let retro = train_on(&cfg, &train, &test).unwrap();
    assert_ne!(base.steps, retro.steps);
}

#[test]
fn separable_blobs_train_well_in_both_arms() {
    let cfg = blobs(0.2, 5);
    let (train, test) = data(&cfg);
    for enabled in [false, true] {
        let rec = train_on(&cfg.with_retro_enabled(enabled), &train, &test).unwrap();
        let acc = 1.0 - rec.final_train_error.unwrap();
        assert!(acc >= 0.95, "retro={enabled}: train accuracy {acc}");
    }
}

#[test]
fn refresh_log_follows_schedule() {
    let mut cfg = blobs(0.5, 12);
    cfg.retro.update_frequency_steps = 7;
    cfg.retro.warmup_steps = 15;
    let (train, test) = data(&cfg);
    let rec = train_on(&cfg, &train, &test).unwrap();
    let horizon = rec.steps.last().unwrap().step;
    let predicted: Vec<u64> = (0..=horizon)
        .filter(|&t| t >= 15 && guidance_step_index(t, 7) == t)
        .collect();
    assert_eq!(rec.refresh_steps, predicted);
    assert_eq!(rec.refresh_steps.first(), Some(&21));
    assert!(rec.refresh_steps.iter().all(|t| t % 7 == 0));
}

#[test]
fn bookkeeping_is_monotone() {
    let cfg = blobs(0.5, 3);
    let (train, test) = data(&cfg);
    let rec = train_on(&cfg, &train, &test).unwrap();
    assert_eq!(rec.steps.len(), 30);
    assert!(rec.steps.windows(2).all(|w| w[0].step < w[1].step));
    let steps: Vec<u64> = rec.steps.iter().map(|s| s.step).collect();
    assert!(rec.evals.iter().all(|e| steps.contains(&e.step)));
    // every 20 steps, plus the final step
    assert_eq!(rec.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![19, 29]);
    assert_eq!(rec.status, RunStatus::Completed);
    // retro term is logged during warm-up too, and alpha reflects it once active
    assert!(rec.steps.iter().all(|s| s.retro_loss.is_finite()));
    assert!(rec.steps.iter().any(|s| s.alpha != 1.0));
    assert!(rec.steps.iter().all(|s| (s.total_loss - (s.task_loss + s.retro_loss)).abs() < 1e-12));
}

#[test]
fn total_loss_may_go_negative_without_abort() {
    let mut cfg = blobs(0.1, 10);
    cfg.retro.kappa = 8.0;
    let (train, test) = data(&cfg);
    let rec = train_on(&cfg, &train, &test).unwrap();
    assert!(rec.is_completed());
    assert!(rec.steps.iter().any(|s| s.retro_loss < 0.0));
}

#[test]
fn nan_aborts_with_diagnostic() {
    let mut cfg = blobs(0.5, 3);
    cfg.optimizer = OptimizerConfig::sgd(1e300);
    let (train, test) = data(&cfg);
    let rec = train_on(&cfg, &train, &test).unwrap();
    match &rec.status {
        RunStatus::Aborted { step, reason } => {
            assert_eq!(rec.steps.last().unwrap().step, *step);
            assert!(reason.contains("non-finite"), "{reason}");
        }
        s => panic!("expected abort, got {s:?}"),
    }
    assert!(rec.final_test_error.is_none());

    let pair = run_paired_on(&cfg, &[1], &train, &test).unwrap();
    assert_eq!(pair.aggregate.failed, 1);
    assert!(pair.pairs[0].error.is_some());
    assert!(pair.pairs[0].delta.is_none());
}

#[test]
fn paired_counts_and_determinism() {
    let cfg = blobs(0.5, 2);
    let (train, test) = data(&cfg);
    let a = run_paired_on(&cfg, &[1, 2, 3], &train, &test).unwrap();
    assert_eq!(a.records().count(), 6);
    assert_eq!(a.deltas().len(), 3);
    for p in &a.pairs {
        let (b, r) = (p.baseline.as_ref().unwrap(), p.retro.as_ref().unwrap());
        assert!(!b.config.retro.enabled && r.config.retro.enabled);
        assert_eq!(b.seed, r.seed);
        // shared init and batch order: the first task loss is identical
        assert_eq!(b.steps[0].task_loss, r.steps[0].task_loss);
        assert_eq!(p.delta.unwrap(), r.final_test_error.unwrap() - b.final_test_error.unwrap());
    }
    let b = run_paired_on(&cfg, &[1, 2, 3], &train, &test).unwrap();
    let strip = |r: &retrospect::harness::PairedResult| {
        r.records().cloned().map(without_timing).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.aggregate, b.aggregate);
    assert!(run_paired_on(&cfg, &[], &train, &test).is_err());
}

#[test]
fn emitted_files() {
    let cfg = blobs(0.5, 2);
    let (train, test) = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let rec = train_on(&cfg, &train, &test).unwrap();
    emit_run(&rec, dir.path()).unwrap();

    let steps = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    let mut lines = steps.lines();
    assert_eq!(lines.next(), Some("step,epoch,task_loss,retro_loss,total_loss,alpha"));
    assert_eq!(lines.count(), rec.steps.len());
    let eval = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with("step,test_error,test_accuracy\n"));
    assert_eq!(eval.lines().count(), rec.evals.len() + 1);

    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.config, cfg);
    assert_eq!(summary.config_digest, cfg.digest());
    let reparsed = RunConfig::from_toml_str(&summary.config.to_toml_string()).unwrap();
    assert_eq!(reparsed, cfg);
    let config_json = serde_json::to_string(&summary.config).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&config_json).unwrap(), cfg);

    // steps parse back to the logged values exactly
    let mut rdr = csv::Reader::from_path(dir.path().join("steps.csv")).unwrap();
    let back: Vec<retrospect::harness::StepRow> = rdr.deserialize().map(Result::unwrap).collect();
    assert_eq!(back.len(), rec.steps.len());
    for (a, b) in back.iter().zip(&rec.steps) {
        assert_eq!(a.task_loss.to_bits(), b.task_loss.to_bits());
        assert_eq!(a.total_loss.to_bits(), b.total_loss.to_bits());
    }

    let pair = run_paired_on(&cfg, &[4, 7], &train, &test).unwrap();
    let pdir = dir.path().join("pair");
    emit_paired(&pair, &pdir).unwrap();
    let ps: PairSummary = serde_json::from_str(&fs::read_to_string(pdir.join("pair_summary.json")).unwrap()).unwrap();
    for s in &ps.seeds {
        assert_eq!(s.delta.unwrap(), s.retro_final_error.unwrap() - s.baseline_final_error.unwrap());
    }
    assert!(pdir.join("seed_7/retro/steps.csv").exists());
    assert!(pdir.join("seed_4/baseline/summary.json").exists());
}

#[test]
fn sweeps() {
    let cfg = blobs(0.5, 2);
    let (train, test) = data(&cfg);
    let values = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    assert!(sweep_on(&cfg, SweepAxis::Norm, &[], &[1], &train, &test).is_err());

    let t = sweep_on(&cfg, SweepAxis::Frequency, &values(&["150", "200", "250"]), &[1, 2], &train, &test).unwrap();
    assert_eq!(t.cells.len(), 3);
    for c in &t.cells {
        let r = c.result.as_ref().unwrap();
        assert_eq!(r.config.retro.update_frequency_steps.to_string(), c.value);
        assert_eq!(r.aggregate.completed, 2);
    }

    let t = sweep_on(&cfg, SweepAxis::Norm, &values(&["l1", "l2", "l7"]), &[1], &train, &test).unwrap();
    assert_eq!(t.cells[1].result.as_ref().unwrap().config.retro.norm, Norm::L2);
    assert!(t.cells[2].result.is_none() && t.cells[2].error.as_ref().unwrap().contains("l7"));

    for (axis, v) in [
        (SweepAxis::BatchSize, "16"),
        (SweepAxis::Optimizer, "adam"),
        (SweepAxis::Warmup, "10"),
        (SweepAxis::Kappa, "1.5"),
        (SweepAxis::MomentumParam, "0.9"),
    ] {
        let c = axis.apply(&cfg, v).unwrap();
        assert_ne!(c, cfg, "{axis}");
    }
    assert!(SweepAxis::BatchSize.apply(&cfg, "0").is_err());
    assert!("depth".parse::<SweepAxis>().is_err());

    let dir = tempfile::tempdir().unwrap();
    emit_sweep(&t, dir.path()).unwrap();
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(dir.path().join("norm=l2/pair_summary.json").exists());
}

#[test]
fn analysis_report() {
    let dir = tempfile::tempdir().unwrap();
    let rep = analyze(dir.path()).unwrap();
    assert_eq!(rep.gradient_mismatches(), 0);
    assert_eq!(rep.probe_failures(Norm::L1), 0);
    assert_eq!(rep.probe_failures(Norm::L2), 0);
    let mut slopes: Vec<f64> = rep
        .gradient_rows
        .iter()
        .filter(|r| r.kappa == 2.0 && r.g_tp < r.g_star)
        .map(|r| r.autodiff)
        .collect();
    slopes.sort_by(f64::total_cmp);
    slopes.dedup();
    assert_eq!(slopes, vec![-5.0, -1.0, 1.0]);
    for f in ["piecewise_grad.csv", "consistency.csv", "l2_minimizer.csv"] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.lines().count() > 100, "{f}");
    }
}

#[test]
fn disabled_run_is_a_pure_task_loss_run() {
    use retrospect::data::{batches, BatchPlan};
    use retrospect::harness::{derive_seed, STREAM_BATCHES, STREAM_INIT};
    use retrospect::nn::MlpModel;
    use retrospect::optim::Optimizer;
    use retrospect::tensor::Tape;

    let cfg = blobs(0.5, 3).with_retro_enabled(false);
    let (train, test) = data(&cfg);
    let rec = train_on(&cfg, &train, &test).unwrap();

    let mut model = MlpModel::<f64>::init(&cfg.layer_sizes, derive_seed(cfg.seed, STREAM_INIT)).unwrap();
    let plan = BatchPlan::new(derive_seed(cfg.seed, STREAM_BATCHES), cfg.batch_size, train.len(), cfg.epochs).unwrap();
    let mut opt = Optimizer::new(cfg.optimizer.clone()).unwrap();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        for b in batches(&train, &plan, epoch) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant(b.inputs);
            let p = model.forward(&mut tape, &bound, x).unwrap();
            let loss = tape.cross_entropy(p, &b.labels).unwrap();
            losses.push(tape.value(loss).unwrap().item());
            let grads = model.param_grads(&bound, &tape.backward(loss).unwrap()).unwrap();
            opt.apply(model.params_mut(), &grads).unwrap();
        }
    }
    let logged: Vec<f64> = rec.steps.iter().map(|s| s.total_loss).collect();
    assert_eq!(logged, losses);
    let manual_err = test.error_rate(&model.predict(test.inputs()).unwrap());
    assert_eq!(rec.final_test_error, Some(manual_err));
}
