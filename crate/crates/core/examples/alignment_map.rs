//! Exports the cross-attention maps of one same-class pair from two domains
//! as `layer,head,query_index,key_index,weight` CSV files, and prints which
//! patch of the second image each patch of the first attends to most.
//!
//! Pass a checkpoint written by `cadg train` (or `train_pair`) to inspect a
//! trained model; without one the weights are freshly initialized.
//!
//! ```text
//! cargo run --release --example alignment_map -- [best.ckpt] [layer]
//! ```

use std::fs::File;
use std::io::BufWriter;

use cadg::checkpoint::load_checkpoint;
use cadg::config::RunConfig;
use cadg::data::generate_synthetic;
use cadg::model::CadgWeights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cadg::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next();
    let layer: usize = args.next().map_or(0, |a| a.parse().expect("layer"));

    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/suite.toml"))?;
    let mut w = CadgWeights::init(cfg.model_config(), cfg.train.lambda, &mut ChaCha8Rng::seed_from_u64(0))?;
    if let Some(path) = &ckpt {
        w.params_mut().load_values(&load_checkpoint(path)?)?;
    }
    let ds = generate_synthetic(&cfg.data)?;
    let (x1, _) = ds.batch(&[ds.cell(0, 1)[0]])?;
    let (x2, _) = ds.batch(&[ds.cell(3, 1)[0]])?;
    let map = w.alignment_map(&x1, &x2, layer)?;

    let dir = std::env::temp_dir();
    for branch in [1, 2] {
        let path = dir.join(format!("cadg-cross{branch}.csv"));
        map.write_csv(branch, 0, BufWriter::new(File::create(&path)?))?;
        println!("wrote {}", path.display());
    }

    // Token 0 is the class token; patches follow in raster order.
    let s = map.cross1.shape();
    for q in 1..s[2] {
        let mean = |k: usize| (0..s[1]).map(|h| map.cross1.at(&[0, h, q, k])).sum::<f64>() / s[1] as f64;
        let best = (0..s[3]).max_by(|&a, &b| mean(a).total_cmp(&mean(b))).expect("keys");
        println!("patch {:>2} of image 1 -> token {:>2} of image 2 ({:.3})", q - 1, best, mean(best));
    }
    Ok(())
}
