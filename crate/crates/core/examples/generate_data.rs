//! Generates the synthetic multi-domain dataset, writes it to disk, reads it
//! back and draws one image per domain as ASCII art.
//!
//! ```text
//! cargo run --release --example generate_data -- [out.cadgds]
//! ```

use cadg::data::{generate_synthetic, load_dataset, save_dataset, GeneratorConfig};

const STYLES: [&str; 5] = ["plain", "inverted", "texture", "gradient", "salt-and-pepper"];

fn main() -> cadg::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("cadg-example.cadgds").display().to_string());
    let cfg = GeneratorConfig::default();
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path)?;
    assert_eq!(back, ds);
    println!(
        "{} images, {} classes x {} domains x {} per cell, {}x{} px -> {path}",
        ds.len(),
        ds.classes,
        ds.domains,
        cfg.per_cell,
        ds.height,
        ds.width
    );

    let class = 3;
    for domain in 0..ds.domains {
        let id = ds.cell(domain, class)[0];
        let img = ds.image(id);
        println!("\ndomain {domain} ({}), class {class}", STYLES[domain % STYLES.len()]);
        for y in (0..ds.height).step_by(2) {
            let row: String = (0..ds.width)
                .map(|x| {
                    let v = img.at(&[y, x, 0]);
                    [' ', '.', ':', '+', '#'][((v * 4.999) as usize).min(4)]
                })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
