//! Pair-wise training, evaluation, and the leave-one-domain-out suite.
//!
//! Each step draws a batch of same-class cross-domain pairs from the source
//! domains' training split, runs the four-branch forward pass, backpropagates
//! the weighted loss and takes one SGD step. Every `eval_every` steps the
//! self-stream accuracy on the pooled source validation split is measured;
//! the best-scoring weights are kept and training stops once `patience`
//! rounds pass without improvement. The held-out domain is read only after
//! training, to score the best checkpoint.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sample_pair_batch, sample_single_batch, split, DataSplit, DomainDataset};
use crate::error::{CadgError, Result};
use crate::graph::Graph;
use crate::model::{CadgWeights, InferMode};
use crate::optim::OptimizerState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Four-branch pair-wise training.
    Cadg,
    /// Single self stream on single images, plain cross-entropy.
    Erm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Cadg => "cadg",
            Method::Erm => "erm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    /// `[s1, s2, c1, c2]` branch losses; absent for ERM.
    pub components: Option<[f64; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config: RunConfig,
    pub losses: Vec<StepLoss>,
    pub val_trace: Vec<ValPoint>,
    pub best_val_step: usize,
    pub best_val_acc: f64,
    /// Held-out accuracy of the best-validation weights.
    pub target_acc: f64,
    pub steps_run: usize,
    pub early_stopped: bool,
    /// Image reads of the held-out domain between the start of training and
    /// the final target evaluation. Zero for a sound run.
    pub held_out_reads_during_training: u64,
    pub parameter_count: usize,
    pub wall_clock_secs: f64,
    /// Path of the saved best checkpoint, filled in by whoever saves it.
    pub best_checkpoint: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Best-validation weights, restored at the end of training.
    pub weights: CadgWeights,
}

/// Scores weights during training for model selection.
pub trait Validator {
    fn validate(&mut self, weights: &CadgWeights, ds: &DomainDataset, split: &DataSplit) -> Result<f64>;
}

/// Self-stream accuracy on the pooled source validation ids.
#[derive(Clone, Copy, Debug)]
pub struct ValAccuracy {
    pub eval_batch: usize,
}

impl Validator for ValAccuracy {
    fn validate(&mut self, weights: &CadgWeights, ds: &DomainDataset, split: &DataSplit) -> Result<f64> {
        accuracy_on(weights, ds, &split.val, self.eval_batch)
    }
}

impl<F> Validator for F
where
    F: FnMut(&CadgWeights) -> f64,
{
    fn validate(&mut self, weights: &CadgWeights, _: &DomainDataset, _: &DataSplit) -> Result<f64> {
        Ok(self(weights))
    }
}

/// One validation round, as reported to an [`Observer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalEvent {
    pub step: usize,
    pub loss: StepLoss,
    pub val_acc: f64,
}

impl EvalEvent {
    /// `step=.. loss_total=.. loss_s1=.. loss_s2=.. loss_c1=.. loss_c2=.. val_acc=..`
    pub fn progress_line(&self) -> String {
        let c = self.loss.components.unwrap_or([f64::NAN; 4]);
        format!(
            "step={} loss_total={:.6} loss_s1={:.6} loss_s2={:.6} loss_c1={:.6} loss_c2={:.6} val_acc={:.4}",
            self.step, self.loss.total, c[0], c[1], c[2], c[3], self.val_acc
        )
    }
}

pub trait Observer {
    fn on_eval(&mut self, _event: &EvalEvent) {}
    fn on_run_end(&mut self, _record: &RunRecord) {}
}

/// Ignores every event.
pub struct Silent;

impl Observer for Silent {}

/// CADG training with the default validator.
pub fn train(cfg: &RunConfig, ds: &DomainDataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, Method::Cadg, &mut ValAccuracy { eval_batch: cfg.train.eval_batch }, &mut Silent)
}

/// Matched-budget ERM baseline with the default validator.
pub fn train_erm_baseline(cfg: &RunConfig, ds: &DomainDataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, Method::Erm, &mut ValAccuracy { eval_batch: cfg.train.eval_batch }, &mut Silent)
}

pub fn train_with(
    cfg: &RunConfig,
    ds: &DomainDataset,
    method: Method,
    validator: &mut dyn Validator,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    if ds.classes != model_cfg.classes
        || ds.domains != cfg.data.domains
        || [ds.height, ds.width, ds.channels]
            != [model_cfg.patch.image_height, model_cfg.patch.image_width, model_cfg.patch.channels]
    {
        return Err(CadgError::Config(
            "dataset does not match the [data] section of the run config".into(),
        ));
    }
    let started = Instant::now();
    let t = &cfg.train;
    let held_out = t.held_out_domain;
    let reads_before = ds.access_count(held_out);

    let data_split = split(ds, &cfg.split_spec(), &cfg.source_domains())?;
    let pool = data_split.train.ids();
    let mut weights = CadgWeights::init(model_cfg, t.lambda, &mut ChaCha8Rng::seed_from_u64(t.init_seed))?;
    let mut opt = OptimizerState::new(weights.params(), t.lr, t.momentum, t.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.sampler_seed);

    let mut losses = Vec::with_capacity(t.steps);
    let mut val_trace = Vec::new();
    let mut best: Option<(f64, usize, CadgWeights)> = None;
    let mut stale_rounds = 0;
    let mut early_stopped = false;
    let mut steps_run = 0;

    for step in 1..=t.steps {
        let mut g = Graph::new();
        let bw = weights.bind(&mut g, true);
        let stepped = match method {
            Method::Cadg => {
                let batch = sample_pair_batch(ds, &data_split.train, t.batch, &mut rng)?;
                weights.forward(&mut g, &bw, &batch.x_p, &batch.x_q, &batch.y).map(|trace| {
                    let out = trace.output(&g);
                    (
                        trace.total,
                        StepLoss {
                            step,
                            total: out.loss_total,
                            components: Some(out.components()),
                        },
                    )
                })
            }
            Method::Erm => {
                let (x, y) = sample_single_batch(ds, &pool, t.batch, &mut rng)?;
                weights
                    .self_logits(&mut g, &bw, &x)
                    .and_then(|logits| g.cross_entropy(logits, &y))
                    .map(|ce| {
                        let total = g.value(ce).item().expect("scalar");
                        (ce, StepLoss { step, total, components: None })
                    })
            }
        };
        let (loss_var, loss) = stepped_or_diverged(step, stepped)?;
        if !loss.total.is_finite() {
            return Err(CadgError::Diverged { step });
        }
        g.backward(loss_var)?;
        weights.params_mut().absorb_grads(&g, &bw.all)?;
        opt.step(weights.params_mut())?;
        weights.params_mut().zero_grads();
        losses.push(loss);
        steps_run = step;

        if step % t.eval_every == 0 || step == t.steps {
            let acc = validator.validate(&weights, ds, &data_split)?;
            val_trace.push(ValPoint { step, accuracy: acc });
            observer.on_eval(&EvalEvent { step, loss, val_acc: acc });
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, step, weights.clone()));
                stale_rounds = 0;
            } else {
                stale_rounds += 1;
                if stale_rounds >= t.patience {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    let (best_val_acc, best_val_step, best_weights) = best.expect("the last step always validates");
    let held_out_reads = ds.access_count(held_out) - reads_before;
    let target_acc = evaluate(&best_weights, ds, held_out, t.eval_batch)?;
    let record = RunRecord {
        method,
        config: *cfg,
        losses,
        val_trace,
        best_val_step,
        best_val_acc,
        target_acc,
        steps_run,
        early_stopped,
        held_out_reads_during_training: held_out_reads,
        parameter_count: best_weights.parameter_count(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        best_checkpoint: None,
    };
    observer.on_run_end(&record);
    Ok(TrainOutcome {
        record,
        weights: best_weights,
    })
}

/// Non-finite activations anywhere in a step's forward pass mean training
/// has diverged; report the step rather than the op that noticed.
fn stepped_or_diverged<T>(step: usize, stepped: Result<T>) -> Result<T> {
    stepped.map_err(|e| match e {
        CadgError::NonFinite(_) => CadgError::Diverged { step },
        e => e,
    })
}

/// Fraction of `ids` classified correctly in self mode, `eval_batch` images
/// per forward pass.
pub fn accuracy_on(weights: &CadgWeights, ds: &DomainDataset, ids: &[usize], eval_batch: usize) -> Result<f64> {
    accuracy_with_mode(weights, ds, ids, eval_batch, InferMode::SelfStream)
}

pub fn accuracy_with_mode(
    weights: &CadgWeights,
    ds: &DomainDataset,
    ids: &[usize],
    eval_batch: usize,
    mode: InferMode,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(CadgError::Config("accuracy over zero samples".into()));
    }
    let mut correct = 0usize;
    for chunk in ids.chunks(eval_batch.max(1)) {
        let (x, y) = ds.batch(chunk)?;
        let pred = weights.infer(&x, mode)?;
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ids.len() as f64)
}

/// Self-mode accuracy over every sample of `domain`.
pub fn evaluate(weights: &CadgWeights, ds: &DomainDataset, domain: usize, eval_batch: usize) -> Result<f64> {
    if domain >= ds.domains {
        return Err(CadgError::Config(format!("domain {domain} of {}", ds.domains)));
    }
    accuracy_on(weights, ds, &ds.domain_ids(domain), eval_batch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub held_out: usize,
    pub repeat: usize,
    pub seed: u64,
    pub best_val: f64,
    pub target_acc: f64,
    pub steps_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub held_out: usize,
    pub mean: f64,
    /// Sample standard deviation over repeats (0 for a single run).
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub method: Method,
    pub runs: Vec<SuiteRun>,
    pub domains: Vec<DomainSummary>,
    /// Mean of the per-domain means.
    pub grand_mean: f64,
}

pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(CadgError::Config("aggregation over zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

impl SuiteSummary {
    pub fn from_runs(method: Method, runs: Vec<SuiteRun>, domains: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(domains);
        for d in 0..domains {
            let accs: Vec<f64> = runs.iter().filter(|r| r.held_out == d).map(|r| r.target_acc).collect();
            let (mean, std) = mean_std(&accs)?;
            rows.push(DomainSummary {
                held_out: d,
                mean,
                std,
                runs: accs.len(),
            });
        }
        let (grand_mean, _) = mean_std(&rows.iter().map(|r| r.mean).collect::<Vec<_>>())?;
        Ok(SuiteSummary {
            method,
            runs,
            domains: rows,
            grand_mean,
        })
    }

    /// One `run` row per training run, one `domain` row per held-out domain,
    /// then an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,method,held_out,repeat,seed,best_val,target_acc,steps_run,mean,std\n");
        for r in &self.runs {
            out += &format!(
                "run,{},{},{},{},{},{},{},,\n",
                self.method, r.held_out, r.repeat, r.seed, r.best_val, r.target_acc, r.steps_run
            );
        }
        for d in &self.domains {
            out += &format!("domain,{},{},,,,,,{},{}\n", self.method, d.held_out, d.mean, d.std);
        }
        out += &format!("average,{},,,,,,,{},\n", self.method, self.grand_mean);
        out
    }
}

/// Config for repeat `repeat` of the suite with `held_out` as target: every
/// seed is offset by the repeat index, so repeats differ in both
/// initialization and train/validation split.
pub fn suite_run_config(base: &RunConfig, held_out: usize, repeat: usize) -> RunConfig {
    let mut cfg = *base;
    let r = repeat as u64;
    cfg.train.held_out_domain = held_out;
    cfg.train.init_seed = base.train.init_seed.wrapping_add(r);
    cfg.train.sampler_seed = base.train.sampler_seed.wrapping_add(r);
    cfg.train.split_seed = base.train.split_seed.wrapping_add(r);
    cfg
}

/// Trains once per held-out domain and repeat, then aggregates.
pub fn leave_one_out_suite(
    cfg: &RunConfig,
    ds: &DomainDataset,
    repeats: usize,
    method: Method,
    observer: &mut dyn Observer,
) -> Result<SuiteSummary> {
    if repeats == 0 {
        return Err(CadgError::Config("aggregation over zero runs".into()));
    }
    if ds.domains < 3 {
        return Err(CadgError::Config(format!("suite needs 3 domains, got {}", ds.domains)));
    }
    let mut runs = Vec::with_capacity(ds.domains * repeats);
    for held_out in 0..ds.domains {
        for repeat in 0..repeats {
            let run_cfg = suite_run_config(cfg, held_out, repeat);
            let outcome = train_with(
                &run_cfg,
                ds,
                method,
                &mut ValAccuracy { eval_batch: run_cfg.train.eval_batch },
                observer,
            )?;
            let r = &outcome.record;
            runs.push(SuiteRun {
                held_out,
                repeat,
                seed: run_cfg.train.init_seed,
                best_val: r.best_val_acc,
                target_acc: r.target_acc,
                steps_run: r.steps_run,
            });
        }
    }
    SuiteSummary::from_runs(method, runs, ds.domains)
}
