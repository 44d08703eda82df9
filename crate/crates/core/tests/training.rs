//! Training protocol: overfitting, null steps, early stopping, model
//! selection, evaluation and the leave-one-out suite.

mod common;

use std::cell::RefCell;

use cadg::config::RunConfig;
use cadg::data::{generate_synthetic, split, DomainDataset};
use cadg::model::{CadgWeights, InferMode, LossWeights};
use cadg::optim::OptimizerState;
use cadg::train::{
    accuracy_on, evaluate, leave_one_out_suite, mean_std, train_with, Method, Silent, ValAccuracy,
};
use cadg::{CadgError, Graph};
use common::{quick_run, rng};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_data(cfg: &RunConfig) -> DomainDataset {
    generate_synthetic(&cfg.data).unwrap()
}

fn fresh_weights(cfg: &RunConfig) -> CadgWeights {
    CadgWeights::init(cfg.model_config(), cfg.train.lambda, &mut ChaCha8Rng::seed_from_u64(cfg.train.init_seed)).unwrap()
}

/// Repeats one batch until the loss is tiny; returns the steps taken.
fn overfit(weights: &mut CadgWeights, method: Method, ds: &DomainDataset, ids_p: &[usize], ids_q: &[usize]) -> usize {
    let (x1, y) = ds.batch(ids_p).unwrap();
    let (x2, _) = ds.batch(ids_q).unwrap();
    let mut opt = OptimizerState::new(weights.params(), 0.02, 0.9, 0.0).unwrap();
    for step in 1..=500 {
        let mut g = Graph::new();
        let bw = weights.bind(&mut g, true);
        let loss = match method {
            Method::Cadg => weights.forward(&mut g, &bw, &x1, &x2, &y).unwrap().total,
            Method::Erm => {
                let l = weights.self_logits(&mut g, &bw, &x1).unwrap();
                g.cross_entropy(l, &y).unwrap()
            }
        };
        if g.value(loss).item().unwrap() < 0.01 {
            return step;
        }
        g.backward(loss).unwrap();
        weights.params_mut().absorb_grads(&g, &bw.all).unwrap();
        opt.step(weights.params_mut()).unwrap();
        weights.params_mut().zero_grads();
    }
    panic!("loss did not fall below 0.01 in 500 steps");
}

#[test]
fn one_batch_overfits_for_both_methods() {
    let cfg = quick_run();
    let ds = quick_data(&cfg);
    // Same-class pairs from domains 0 and 1, every class twice.
    let ids_p: Vec<usize> = (0..6).map(|i| ds.cell(0, i % 3)[i / 3]).collect();
    let ids_q: Vec<usize> = (0..6).map(|i| ds.cell(1, i % 3)[i / 3]).collect();
    for method in [Method::Cadg, Method::Erm] {
        let mut w = fresh_weights(&cfg);
        let steps = overfit(&mut w, method, &ds, &ids_p, &ids_q);
        let (x, y) = ds.batch(&ids_p).unwrap();
        assert_eq!(w.infer(&x, InferMode::SelfStream).unwrap(), y, "{method} after {steps} steps");
    }
}

#[test]
fn memorized_domain_scores_perfectly() {
    let mut cfg = quick_run();
    cfg.data.per_cell = 4;
    let ds = quick_data(&cfg);
    let ids = ds.domain_ids(0);
    let mut w = fresh_weights(&cfg);
    overfit(&mut w, Method::Erm, &ds, &ids, &ids);
    assert_eq!(evaluate(&w, &ds, 0, 5).unwrap(), 1.0);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let mut cfg = quick_run();
    cfg.train.lr = 0.0;
    cfg.train.weight_decay = 0.0;
    let ds = quick_data(&cfg);
    for method in [Method::Cadg, Method::Erm] {
        let out = train_with(&cfg, &ds, method, &mut ValAccuracy { eval_batch: 16 }, &mut Silent).unwrap();
        assert_eq!(out.weights.params(), fresh_weights(&cfg).params(), "{method}");
        let first = out.record.val_trace[0].accuracy;
        assert!(out.record.val_trace.iter().all(|v| v.accuracy == first));
    }
}

#[test]
fn patience_one_with_no_improvement_stops_after_two_rounds() {
    let cfg = {
        let mut c = quick_run();
        c.train.patience = 1;
        c
    };
    let ds = quick_data(&cfg);
    let calls = RefCell::new(0);
    let mut flat = |_: &CadgWeights| {
        *calls.borrow_mut() += 1;
        0.5
    };
    let out = train_with(&cfg, &ds, Method::Cadg, &mut flat, &mut Silent).unwrap();
    assert_eq!(*calls.borrow(), 2);
    assert!(out.record.early_stopped);
    assert_eq!(out.record.steps_run, 2 * cfg.train.eval_every);
    assert_eq!(out.record.best_val_step, cfg.train.eval_every);
}

#[test]
fn reported_accuracy_comes_from_the_best_round() {
    let cfg = quick_run();
    let ds = quick_data(&cfg);
    let scores = [0.1, 0.9, 0.2, 0.3];
    let mut seen: Vec<CadgWeights> = Vec::new();
    let mut rigged = |w: &CadgWeights| {
        seen.push(w.clone());
        scores[seen.len() - 1]
    };
    let out = train_with(&cfg, &ds, Method::Cadg, &mut rigged, &mut Silent).unwrap();
    assert_eq!(seen.len(), 4);
    assert_eq!(out.record.best_val_step, 20);
    assert_eq!(out.record.best_val_acc, 0.9);
    assert_eq!(out.weights.params(), seen[1].params());
    assert_ne!(seen[1].params(), seen[3].params());
    let held = cfg.train.held_out_domain;
    assert_eq!(out.record.target_acc, evaluate(&seen[1], &ds, held, 16).unwrap());
}

#[test]
fn evaluation_ignores_batching_and_order() {
    let cfg = quick_run();
    let ds = quick_data(&cfg);
    let w = fresh_weights(&cfg);
    let mut ids: Vec<usize> = (0..ds.len()).collect();
    let base = accuracy_on(&w, &ds, &ids, 1000).unwrap();
    for batch in [1, 7, 32] {
        ids.shuffle(&mut rng(batch as u64));
        assert_eq!(accuracy_on(&w, &ds, &ids, batch).unwrap(), base);
    }
}

#[test]
fn random_weights_evaluate_near_chance() {
    let mut cfg = quick_run();
    cfg.data.classes = 4;
    cfg.data.per_cell = 100;
    let ds = quick_data(&cfg);
    for seed in 0..3 {
        cfg.train.init_seed = seed;
        let w = fresh_weights(&cfg);
        // 1,200 samples over all domains.
        let acc = accuracy_on(&w, &ds, &(0..ds.len()).collect::<Vec<_>>(), 256).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "seed {seed}: {acc}");
    }
}

#[test]
fn identical_configs_reproduce_bit_identical_records() {
    let cfg = quick_run();
    let ds = quick_data(&cfg);
    for method in [Method::Cadg, Method::Erm] {
        let run = || train_with(&cfg, &ds, method, &mut ValAccuracy { eval_batch: 16 }, &mut Silent).unwrap();
        let (a, b) = (run(), run());
        let bits = |r: &cadg::train::RunRecord| r.losses.iter().map(|l| l.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.record), bits(&b.record));
        let (mut ra, mut rb) = (a.record, b.record);
        ra.wall_clock_secs = 0.0;
        rb.wall_clock_secs = 0.0;
        assert_eq!(ra, rb);
        assert_eq!(a.weights.params(), b.weights.params());
    }
}

#[test]
fn held_out_domain_is_never_read_during_training() {
    let cfg = quick_run();
    let ds = quick_data(&cfg);
    for held in 0..3 {
        let mut c = cfg;
        c.train.held_out_domain = held;
        ds.reset_access_counts();
        let probe = |w: &CadgWeights| {
            assert_eq!(ds.access_count(held), 0);
            let s = split(&ds, &c.split_spec(), &c.source_domains()).unwrap();
            accuracy_on(w, &ds, &s.val, 16).unwrap()
        };
        let out = train_with(&c, &ds, Method::Cadg, &mut { probe }, &mut Silent).unwrap();
        assert_eq!(out.record.held_out_reads_during_training, 0);
        // The final target evaluation reads every held-out image once.
        assert_eq!(ds.access_count(held), ds.domain_ids(held).len() as u64);
    }
}

#[test]
fn logged_components_compose_the_total() {
    let mut cfg = quick_run();
    cfg.train.lambda = LossWeights([0.1, 0.2, 0.3, 0.4]);
    let ds = quick_data(&cfg);
    let out = train_with(&cfg, &ds, Method::Cadg, &mut ValAccuracy { eval_batch: 16 }, &mut Silent).unwrap();
    assert_eq!(out.record.losses.len(), cfg.train.steps);
    for l in &out.record.losses {
        let c = l.components.unwrap();
        assert_eq!(l.total, cfg.train.lambda.combine(c));
    }
}

#[test]
fn erm_and_cadg_have_the_same_parameter_count() {
    let cfg = quick_run();
    let ds = quick_data(&cfg);
    let v = &mut ValAccuracy { eval_batch: 16 };
    let a = train_with(&cfg, &ds, Method::Cadg, v, &mut Silent).unwrap();
    let b = train_with(&cfg, &ds, Method::Erm, v, &mut Silent).unwrap();
    assert_eq!(a.record.parameter_count, b.record.parameter_count);
    assert!(b.record.losses.iter().all(|l| l.components.is_none()));
}

#[test]
fn exploding_learning_rate_reports_the_step() {
    let mut cfg = quick_run();
    cfg.train.lr = 1e10;
    let ds = quick_data(&cfg);
    for method in [Method::Cadg, Method::Erm] {
        match train_with(&cfg, &ds, method, &mut ValAccuracy { eval_batch: 16 }, &mut Silent) {
            Err(CadgError::Diverged { step }) => assert!(step >= 2 && step <= cfg.train.steps),
            other => panic!("{method}: expected divergence, got {:?}", other.map(|o| o.record.steps_run)),
        }
    }
}

#[test]
fn suite_runs_every_domain_and_repeat() {
    let mut cfg = quick_run();
    cfg.train.steps = 10;
    cfg.train.eval_every = 5;
    let ds = quick_data(&cfg);
    let s = leave_one_out_suite(&cfg, &ds, 3, Method::Erm, &mut Silent).unwrap();
    assert_eq!(s.runs.len(), 9);
    assert_eq!(s.domains.len(), 3);
    let csv = s.to_csv();
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 9);
    assert_eq!(csv.lines().filter(|l| l.starts_with("domain,")).count(), 3);
    assert_eq!(csv.lines().filter(|l| l.starts_with("average,")).count(), 1);
    for d in &s.domains {
        let raw: Vec<f64> = s.runs.iter().filter(|r| r.held_out == d.held_out).map(|r| r.target_acc).collect();
        let (m, sd) = mean_std(&raw).unwrap();
        assert!((m - d.mean).abs() <= 1e-12 && (sd - d.std).abs() <= 1e-12);
    }
    let grand = s.domains.iter().map(|d| d.mean).sum::<f64>() / 3.0;
    assert!((grand - s.grand_mean).abs() <= 1e-12);
    assert!(leave_one_out_suite(&cfg, &ds, 0, Method::Erm, &mut Silent).is_err());
}
