//! The structural guarantees of weight sharing, checked on a freshly
//! initialized model: an image paired with itself makes the cross streams
//! copies of the self streams, and swapping a pair swaps the branches.
//!
//! ```text
//! cargo run --release --example branch_symmetries
//! ```

use cadg::config::RunConfig;
use cadg::data::generate_synthetic;
use cadg::model::{CadgWeights, InferMode};
use cadg::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cadg::Result<()> {
    let cfg = RunConfig::default();
    let ds = generate_synthetic(&cfg.data)?;
    let w = CadgWeights::init(cfg.model_config(), cfg.train.lambda, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("{} weights shared by all four branches", w.parameter_count());

    let ids: Vec<usize> = (0..4).map(|c| ds.cell(0, c)[0]).collect();
    let (x, y) = ds.batch(&ids)?;
    let mut g = Graph::new();
    let bw = w.bind(&mut g, false);
    let trace = w.forward(&mut g, &bw, &x, &x, &y)?;
    for (n, st) in trace.layers.iter().enumerate() {
        println!(
            "layer {n}: c1 == s1 {}, c2 == s2 {}",
            g.value(st.c1) == g.value(st.s1),
            g.value(st.c2) == g.value(st.s2)
        );
    }
    println!(
        "self and self-pair predictions agree: {}",
        w.infer(&x, InferMode::SelfStream)? == w.infer(&x, InferMode::SelfPair)?
    );

    let other: Vec<usize> = (0..4).map(|c| ds.cell(2, c)[0]).collect();
    let (x2, _) = ds.batch(&other)?;
    let a = w.forward_eval(&x, &x2, &y)?;
    let b = w.forward_eval(&x2, &x, &y)?;
    println!(
        "swap: s1<->s2 {}, c1<->c2 {}, loss_total {:.6} vs {:.6}",
        a.logits_s1 == b.logits_s2 && a.logits_s2 == b.logits_s1,
        a.logits_c1 == b.logits_c2 && a.logits_c2 == b.logits_c1,
        a.loss_total,
        b.loss_total
    );
    Ok(())
}
