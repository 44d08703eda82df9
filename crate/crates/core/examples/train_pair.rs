//! Trains the four-branch model with one held-out domain, printing the
//! machine-readable progress lines, then saves and reloads the best weights.
//!
//! ```text
//! cargo run --release --example train_pair -- [held_out] [steps]
//! ```

use cadg::checkpoint::{load_checkpoint, save_checkpoint};
use cadg::config::RunConfig;
use cadg::data::generate_synthetic;
use cadg::train::{evaluate, train_with, EvalEvent, Method, Observer, ValAccuracy};

struct Progress;

impl Observer for Progress {
    fn on_eval(&mut self, e: &EvalEvent) {
        println!("{}", e.progress_line());
    }
}

fn main() -> cadg::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/suite.toml"))?;
    cfg.train.held_out_domain = args.next().map_or(0, |a| a.parse().expect("held_out"));
    cfg.train.steps = args.next().map_or(300, |a| a.parse().expect("steps"));

    let ds = generate_synthetic(&cfg.data)?;
    let eval_batch = cfg.train.eval_batch;
    let out = train_with(&cfg, &ds, Method::Cadg, &mut ValAccuracy { eval_batch }, &mut Progress)?;
    let r = &out.record;
    println!(
        "best val {:.4} at step {}, held-out domain {} accuracy {:.4}, {} weights",
        r.best_val_acc, r.best_val_step, cfg.train.held_out_domain, r.target_acc, r.parameter_count
    );

    let path = std::env::temp_dir().join("cadg-example.ckpt");
    save_checkpoint(out.weights.params(), &path)?;
    let mut restored = out.weights.clone();
    restored.params_mut().load_values(&load_checkpoint(&path)?)?;
    let again = evaluate(&restored, &ds, cfg.train.held_out_domain, eval_batch)?;
    assert_eq!(again, r.target_acc);
    println!("checkpoint {} reproduces the held-out accuracy", path.display());
    Ok(())
}
