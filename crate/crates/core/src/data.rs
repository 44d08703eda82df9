//! Synthetic multi-domain shape images, stratified splits, and the
//! same-class cross-domain pair sampler.
//!
//! Class identity is a geometric shape (disk, square, cross, triangle, then
//! regular polygons with more sides). A domain is a style applied on top of
//! the rendered shape, so label-relevant geometry is shared across domains
//! while pixel statistics differ:
//!
//! | style | effect                                   |
//! |-------|------------------------------------------|
//! | 0     | plain bright shape on dark background     |
//! | 1     | intensity inversion                        |
//! | 2     | additive 2-D sinusoidal texture            |
//! | 3     | background intensity gradient              |
//! | 4     | salt-and-pepper noise                      |
//!
//! Domain `i` uses style `i % 5`; later cycles vary the style parameters.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_magic, read_f64, read_u32, read_u64};
use crate::error::{CadgError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 7] = b"CADGDS1";

/// Largest class count the shape vocabulary supports (polygons up to 13 sides).
pub const MAX_CLASSES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub domains: usize,
    pub per_cell: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 4,
            domains: 4,
            per_cell: 200,
            image_size: 32,
            channels: 1,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CadgError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > MAX_CLASSES {
            return Err(CadgError::Config(format!(
                "{} classes exceeds the shape vocabulary ({MAX_CLASSES})",
                self.classes
            )));
        }
        if self.domains < 3 {
            return Err(CadgError::Config(format!(
                "need at least 3 domains (2 sources + 1 held out), got {}",
                self.domains
            )));
        }
        if self.per_cell == 0 || self.image_size < 4 || self.channels == 0 {
            return Err(CadgError::Config(format!("degenerate generator settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, C]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub domain: usize,
}

/// Labeled samples indexed by `(domain, class)`.
///
/// Image reads go through [`DomainDataset::image`] / [`DomainDataset::batch`]
/// and are counted per domain, so a run can prove which domains it touched.
#[derive(Debug)]
pub struct DomainDataset {
    pub classes: usize,
    pub domains: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    samples: Vec<Sample>,
    index: Vec<Vec<Vec<usize>>>,
    reads: Vec<AtomicU64>,
}

impl Clone for DomainDataset {
    fn clone(&self) -> Self {
        DomainDataset {
            classes: self.classes,
            domains: self.domains,
            height: self.height,
            width: self.width,
            channels: self.channels,
            seed: self.seed,
            samples: self.samples.clone(),
            index: self.index.clone(),
            reads: (0..self.domains).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes
            && self.domains == other.domains
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.seed == other.seed
            && self.samples == other.samples
    }
}

impl DomainDataset {
    pub fn from_samples(
        classes: usize,
        domains: usize,
        (height, width, channels): (usize, usize, usize),
        seed: u64,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let mut index = vec![vec![Vec::new(); classes]; domains];
        for (id, s) in samples.iter().enumerate() {
            if s.label >= classes {
                return Err(CadgError::LabelOutOfRange { label: s.label, classes });
            }
            if s.domain >= domains {
                return Err(CadgError::Format(format!("sample {id} has domain {} of {domains}", s.domain)));
            }
            if s.image.shape() != [height, width, channels] {
                return Err(CadgError::shape("dataset sample", s.image.shape(), &[height, width, channels]));
            }
            index[s.domain][s.label].push(id);
        }
        Ok(DomainDataset {
            classes,
            domains,
            height,
            width,
            channels,
            seed,
            samples,
            index,
            reads: (0..domains).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label(&self, id: usize) -> usize {
        self.samples[id].label
    }

    pub fn domain(&self, id: usize) -> usize {
        self.samples[id].domain
    }

    /// Sample ids of one `(domain, class)` cell.
    pub fn cell(&self, domain: usize, class: usize) -> &[usize] {
        &self.index[domain][class]
    }

    pub fn domain_ids(&self, domain: usize) -> Vec<usize> {
        self.index[domain].iter().flatten().copied().collect()
    }

    /// Reads one image, counting the access against its domain.
    pub fn image(&self, id: usize) -> &Tensor {
        let s = &self.samples[id];
        self.reads[s.domain].fetch_add(1, Ordering::Relaxed);
        &s.image
    }

    /// Stacks the images of `ids` into `[B, H, W, C]` along with their labels.
    pub fn batch(&self, ids: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<&Tensor> = ids.iter().map(|&id| self.image(id)).collect();
        let labels = ids.iter().map(|&id| self.samples[id].label).collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Image reads charged to `domain` since construction or the last reset.
    pub fn access_count(&self, domain: usize) -> u64 {
        self.reads[domain].load(Ordering::Relaxed)
    }

    pub fn reset_access_counts(&self) {
        self.reads.iter().for_each(|r| r.store(0, Ordering::Relaxed));
    }

    /// Checks that every `(domain, class)` cell is populated.
    pub fn validate_cells(&self) -> Result<()> {
        for d in 0..self.domains {
            for c in 0..self.classes {
                if self.index[d][c].is_empty() {
                    return Err(CadgError::Config(format!("empty cell (domain {d}, class {c})")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Disk,
    Square,
    Cross,
    Polygon(usize),
}

impl ShapeKind {
    fn for_class(class: usize) -> Self {
        match class {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Cross,
            3 => ShapeKind::Polygon(3),
            k => ShapeKind::Polygon(k + 1),
        }
    }

    /// Membership test in the shape's own frame, radius `r`.
    fn contains(self, a: f64, b: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => a * a + b * b <= r * r,
            ShapeKind::Square => a.abs() <= 0.8 * r && b.abs() <= 0.8 * r,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (a.abs() <= r && b.abs() <= arm) || (b.abs() <= r && a.abs() <= arm)
            }
            ShapeKind::Polygon(n) => {
                use std::f64::consts::{FRAC_PI_2, PI};
                let sector = 2.0 * PI / n as f64;
                let rho = (a * a + b * b).sqrt();
                // first vertex points up (negative b in image coordinates)
                let phi = (b.atan2(a) + FRAC_PI_2).rem_euclid(sector) - sector / 2.0;
                rho * phi.cos() <= r * (PI / n as f64).cos()
            }
        }
    }
}

/// Anti-aliased shape mask, values in `[0, 1]`, row-major `[H, W]`.
fn render_mask<R: Rng + ?Sized>(kind: ShapeKind, size: usize, rng: &mut R) -> Vec<f64> {
    let cx = rng.gen_range(0.38..0.62);
    let cy = rng.gen_range(0.38..0.62);
    let r = rng.gen_range(0.2..0.3);
    let theta: f64 = match kind {
        ShapeKind::Disk => 0.0,
        _ => rng.gen_range(-0.3..0.3),
    };
    let (sin, cos) = theta.sin_cos();
    const SUB: usize = 3;
    let mut mask = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let u = (px as f64 + (sx as f64 + 0.5) / SUB as f64) / size as f64 - cx;
                    let v = (py as f64 + (sy as f64 + 0.5) / SUB as f64) / size as f64 - cy;
                    let a = cos * u + sin * v;
                    let b = -sin * u + cos * v;
                    if kind.contains(a, b, r) {
                        hits += 1;
                    }
                }
            }
            mask[py * size + px] = hits as f64 / (SUB * SUB) as f64;
        }
    }
    mask
}

/// Applies domain `domain`'s style to a mask, giving gray pixels in `[0, 1]`.
fn stylize<R: Rng + ?Sized>(mask: &[f64], size: usize, domain: usize, rng: &mut R) -> Vec<f64> {
    use std::f64::consts::PI;
    let variant = (domain / 5) as f64;
    let ink = rng.gen_range(0.75..1.0);
    let coord = |i: usize| ((i % size) as f64 / size as f64, (i / size) as f64 / size as f64);
    let out: Vec<f64> = match domain % 5 {
        0 => mask.iter().map(|m| m * ink).collect(),
        1 => mask.iter().map(|m| 1.0 - m * ink).collect(),
        2 => {
            let fx = rng.gen_range(2.0..5.0) + variant;
            let fy = rng.gen_range(2.0..5.0) + variant;
            let phase = rng.gen_range(0.0..2.0 * PI);
            mask.iter()
                .enumerate()
                .map(|(i, m)| {
                    let (u, v) = coord(i);
                    let wave = 0.5 + 0.5 * (2.0 * PI * (fx * u + fy * v) + phase).sin();
                    0.65 * m * ink + 0.35 * wave
                })
                .collect()
        }
        3 => {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let (dy, dx) = angle.sin_cos();
            let strength = 0.55 + 0.1 * variant.min(3.0);
            mask.iter()
                .enumerate()
                .map(|(i, m)| {
                    let (u, v) = coord(i);
                    let ramp = strength * ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
                    m * ink + (1.0 - m) * ramp
                })
                .collect()
        }
        _ => {
            let p = 0.08 + 0.02 * variant.min(5.0);
            mask.iter()
                .map(|m| {
                    let u: f64 = rng.gen();
                    if u < p / 2.0 {
                        0.0
                    } else if u < p {
                        1.0
                    } else {
                        m * ink
                    }
                })
                .collect()
        }
    };
    out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Renders `classes × domains × per_cell` images, fully determined by `seed`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<DomainDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let mut samples = Vec::with_capacity(cfg.classes * cfg.domains * cfg.per_cell);
    for domain in 0..cfg.domains {
        for class in 0..cfg.classes {
            let kind = ShapeKind::for_class(class);
            for _ in 0..cfg.per_cell {
                let mask = render_mask(kind, size, &mut rng);
                let gray = stylize(&mask, size, domain, &mut rng);
                let data: Vec<f64> = gray
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, cfg.channels))
                    .collect();
                samples.push(Sample {
                    image: Tensor::new(vec![size, size, cfg.channels], data)?,
                    label: class,
                    domain,
                });
            }
        }
    }
    DomainDataset::from_samples(cfg.classes, cfg.domains, (size, size, cfg.channels), cfg.seed, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_fraction: 0.2,
            split_seed: 0,
        }
    }
}

/// Training cells of the source domains: `cells[i][class]` for source
/// `domains[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub classes: usize,
    pub domains: Vec<usize>,
    pub cells: Vec<Vec<Vec<usize>>>,
}

impl TrainView {
    pub fn ids(&self) -> Vec<usize> {
        self.cells.iter().flatten().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: TrainView,
    /// Validation ids pooled over all source domains.
    pub val: Vec<usize>,
}

/// Splits each source `(domain, class)` cell into train and validation parts.
/// The held-out domain is simply not listed in `sources` and is never read.
pub fn split(ds: &DomainDataset, spec: &SplitSpec, sources: &[usize]) -> Result<DataSplit> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(CadgError::Config(format!("val_fraction {} not in (0, 1)", spec.val_fraction)));
    }
    if let Some(&d) = sources.iter().find(|&&d| d >= ds.domains) {
        return Err(CadgError::Config(format!("source domain {d} of {}", ds.domains)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.split_seed);
    let mut cells = Vec::with_capacity(sources.len());
    let mut val = Vec::new();
    for &d in sources {
        let mut per_class = Vec::with_capacity(ds.classes);
        for c in 0..ds.classes {
            let mut ids = ds.cell(d, c).to_vec();
            ids.shuffle(&mut rng);
            let n_val = (ids.len() as f64 * spec.val_fraction).round() as usize;
            let n_val = n_val.min(ids.len());
            if ids.len() - n_val == 0 {
                return Err(CadgError::Config(format!(
                    "no training samples left in cell (domain {d}, class {c})"
                )));
            }
            val.extend_from_slice(&ids[..n_val]);
            per_class.push(ids[n_val..].to_vec());
        }
        cells.push(per_class);
    }
    Ok(DataSplit {
        train: TrainView {
            classes: ds.classes,
            domains: sources.to_vec(),
            cells,
        },
        val,
    })
}

/// One row of a pair batch, before images are fetched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRow {
    pub class: usize,
    pub domain_p: usize,
    pub domain_q: usize,
    pub id_p: usize,
    pub id_q: usize,
}

/// Draws one same-class pair from two distinct training domains: class
/// uniform, unordered domain pair uniform, samples uniform within cells.
pub fn sample_pair_row<R: Rng + ?Sized>(view: &TrainView, rng: &mut R) -> Result<PairRow> {
    let m = view.domains.len();
    if m < 2 {
        return Err(CadgError::Config(format!("pair sampling needs 2 training domains, got {m}")));
    }
    let class = rng.gen_range(0..view.classes);
    let pairs = m * (m - 1) / 2;
    let mut pick = rng.gen_range(0..pairs);
    let (mut i, mut j) = (0, 1);
    'outer: for a in 0..m {
        for b in a + 1..m {
            if pick == 0 {
                (i, j) = (a, b);
                break 'outer;
            }
            pick -= 1;
        }
    }
    if rng.gen::<bool>() {
        std::mem::swap(&mut i, &mut j);
    }
    let draw = |rng: &mut R, src: usize| -> Result<usize> {
        view.cells[src][class].choose(rng).copied().ok_or_else(|| {
            CadgError::Config(format!("empty training cell (domain {}, class {class})", view.domains[src]))
        })
    };
    let id_p = draw(rng, i)?;
    let id_q = draw(rng, j)?;
    Ok(PairRow {
        class,
        domain_p: view.domains[i],
        domain_q: view.domains[j],
        id_p,
        id_q,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x_p: Tensor,
    pub x_q: Tensor,
    pub y: Vec<usize>,
    pub domain_p: Vec<usize>,
    pub domain_q: Vec<usize>,
}

pub fn sample_pair_batch<R: Rng + ?Sized>(
    ds: &DomainDataset,
    view: &TrainView,
    batch: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    if batch == 0 {
        return Err(CadgError::Config("batch size 0".into()));
    }
    let rows = (0..batch)
        .map(|_| sample_pair_row(view, rng))
        .collect::<Result<Vec<_>>>()?;
    let ids_p: Vec<usize> = rows.iter().map(|r| r.id_p).collect();
    let ids_q: Vec<usize> = rows.iter().map(|r| r.id_q).collect();
    let (x_p, _) = ds.batch(&ids_p)?;
    let (x_q, _) = ds.batch(&ids_q)?;
    Ok(PairBatch {
        x_p,
        x_q,
        y: rows.iter().map(|r| r.class).collect(),
        domain_p: rows.iter().map(|r| r.domain_p).collect(),
        domain_q: rows.iter().map(|r| r.domain_q).collect(),
    })
}

/// Single images drawn uniformly from the pooled training ids (ERM input).
pub fn sample_single_batch<R: Rng + ?Sized>(
    ds: &DomainDataset,
    pool: &[usize],
    batch: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    if pool.is_empty() || batch == 0 {
        return Err(CadgError::Config("empty training pool or batch".into()));
    }
    let ids: Vec<usize> = (0..batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    ds.batch(&ids)
}

/// Layout, integers little-endian:
///
/// ```text
/// b"CADGDS1"
/// u32 classes, u32 domains, u32 height, u32 width, u32 channels
/// u64 generator seed, u64 sample count
/// per sample: u32 domain, u32 class, f64 × (H·W·C) pixels
/// ```
pub fn write_dataset<W: Write>(ds: &DomainDataset, mut out: W) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    for v in [ds.classes, ds.domains, ds.height, ds.width, ds.channels] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&ds.seed.to_le_bytes())?;
    out.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for s in &ds.samples {
        out.write_all(&(s.domain as u32).to_le_bytes())?;
        out.write_all(&(s.label as u32).to_le_bytes())?;
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<DomainDataset> {
    expect_magic(&mut input, DATASET_MAGIC)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = read_u32(&mut input)? as usize;
    }
    let [classes, domains, height, width, channels] = dims;
    if dims.contains(&0) {
        return Err(CadgError::Format(format!("zero extent in dataset header {dims:?}")));
    }
    let seed = read_u64(&mut input)?;
    let count = read_u64(&mut input)? as usize;
    let pixels = height * width * channels;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let domain = read_u32(&mut input)? as usize;
        let label = read_u32(&mut input)? as usize;
        let mut data = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            data.push(read_f64(&mut input)?);
        }
        samples.push(Sample {
            image: Tensor::new(vec![height, width, channels], data)?,
            label,
            domain,
        });
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(CadgError::Format("trailing bytes after dataset".into()));
    }
    DomainDataset::from_samples(classes, domains, (height, width, channels), seed, samples)
}

pub fn save_dataset(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let bytes = fs::read(path)?;
    read_dataset(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            classes: 4,
            domains: 3,
            per_cell: 50,
            image_size: 16,
            channels: 1,
            seed: 7,
        }
    }

    #[test]
    fn dataset_is_shareable_across_threads() {
        fn check<T: Send + Sync>() {}
        check::<DomainDataset>();
    }

    #[test]
    fn generation_counts_and_range() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 600);
        for d in 0..3 {
            for c in 0..4 {
                assert_eq!(ds.cell(d, c).len(), 50);
            }
        }
        for id in 0..ds.len() {
            assert!(ds.image(id).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = GeneratorConfig { seed: 8, ..small() };
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn generator_rejects_bad_settings() {
        assert!(generate_synthetic(&GeneratorConfig { domains: 2, ..small() }).is_err());
        assert!(generate_synthetic(&GeneratorConfig { classes: MAX_CLASSES + 1, ..small() }).is_err());
        assert!(generate_synthetic(&GeneratorConfig { classes: MAX_CLASSES, per_cell: 2, ..small() }).is_ok());
    }

    #[test]
    fn shapes_are_distinct_per_class() {
        let ds = generate_synthetic(&GeneratorConfig { domains: 3, per_cell: 1, classes: 6, image_size: 32, ..small() }).unwrap();
        let imgs: Vec<&Tensor> = (0..6).map(|c| ds.image(ds.cell(0, c)[0])).collect();
        for a in 0..6 {
            for b in a + 1..6 {
                assert!(imgs[a].max_abs_diff(imgs[b]).unwrap() > 0.5, "classes {a} and {b}");
            }
        }
    }

    #[test]
    fn inversion_domain_flips_background() {
        let ds = generate_synthetic(&small()).unwrap();
        let corner = |id: usize| ds.image(id).data()[0];
        assert!(corner(ds.cell(0, 0)[0]) < 0.05);
        assert!(corner(ds.cell(1, 0)[0]) > 0.95);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = generate_synthetic(&small()).unwrap();
        let sp = split(&ds, &SplitSpec { val_fraction: 0.2, split_seed: 1 }, &[0, 1]).unwrap();
        for cells in &sp.train.cells {
            for cell in cells {
                assert_eq!(cell.len(), 40);
            }
        }
        assert_eq!(sp.val.len(), 2 * 4 * 10);
        let mut all: Vec<usize> = sp.train.ids();
        all.extend(&sp.val);
        all.sort_unstable();
        let mut expected = ds.domain_ids(0);
        expected.extend(ds.domain_ids(1));
        expected.sort_unstable();
        assert_eq!(all, expected);

        let other = split(&ds, &SplitSpec { val_fraction: 0.2, split_seed: 2 }, &[0, 1]).unwrap();
        assert_ne!(sp.val, other.val);
        let same = split(&ds, &SplitSpec { val_fraction: 0.2, split_seed: 1 }, &[0, 1]).unwrap();
        assert_eq!(sp, same);
    }

    #[test]
    fn split_rejects_emptied_cells() {
        let ds = generate_synthetic(&GeneratorConfig { per_cell: 1, ..small() }).unwrap();
        let err = split(&ds, &SplitSpec { val_fraction: 0.6, split_seed: 0 }, &[0, 1]).unwrap_err();
        assert!(matches!(err, CadgError::Config(_)));
        assert!(split(&ds, &SplitSpec { val_fraction: 1.0, split_seed: 0 }, &[0]).is_err());
    }

    #[test]
    fn sampler_needs_two_domains() {
        let ds = generate_synthetic(&small()).unwrap();
        let sp = split(&ds, &SplitSpec::default(), &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_pair_batch(&ds, &sp.train, 4, &mut rng).is_err());
    }

    #[test]
    fn pair_batch_contract() {
        let ds = generate_synthetic(&small()).unwrap();
        let sp = split(&ds, &SplitSpec::default(), &[0, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ds.reset_access_counts();
        let b = sample_pair_batch(&ds, &sp.train, 32, &mut rng).unwrap();
        assert_eq!(b.x_p.shape(), &[32, 16, 16, 1]);
        for i in 0..32 {
            assert_ne!(b.domain_p[i], b.domain_q[i]);
        }
        assert_eq!(ds.access_count(1), 0);
        assert_eq!(ds.access_count(0) + ds.access_count(2), 64);
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let ds = generate_synthetic(&GeneratorConfig { per_cell: 3, ..small() }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(again, buf);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(CadgError::Format(_))));
        assert!(matches!(read_dataset(&buf[..buf.len() - 1]), Err(CadgError::Format(_))));
    }
}
