//! Finite-difference verification of back-propagation: first a single
//! attention block, then every parameter of a small four-branch model.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use cadg::attention::{attend, project_qkv, QkvVars};
use cadg::gradcheck::{check_gradients, tiny_model_report};
use cadg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cadg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 6;
    let inputs: Vec<Tensor> = [&[2, 4, d][..], &[d, d], &[d, d], &[d, d], &[d, d]]
        .iter()
        .map(|s| Tensor::randn(s, 0.5, &mut rng))
        .collect();
    let block = check_gradients(&inputs, |g, v| {
        let qkv = QkvVars {
            query: v[1],
            key: v[2],
            value: v[3],
        };
        let t = project_qkv(g, v[0], &qkv)?;
        let y = attend(g, t.q, t.k, t.v, 2, v[4])?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })?;
    println!(
        "attention block: {} elements, max relative error {:.2e}",
        block.checked, block.max_rel_err
    );

    let model = tiny_model_report(0)?;
    println!(
        "four-branch model: {} weights, max relative error {:.2e}, max absolute error {:.2e}",
        model.checked, model.max_rel_err, model.max_abs_err
    );
    Ok(())
}
