//! Patch embedding and scaled dot-product attention.
//!
//! [`attend`] is the only attention primitive. Fed Q, K and V from one token
//! sequence it is self-attention; fed Q from one sequence and K, V from
//! another it is cross-attention. The CADG wiring relies on that: the cross
//! branches consume the very same projected tensors the self branches built.

use serde::{Deserialize, Serialize};

use crate::error::{CadgError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub head_count: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let PatchConfig {
            image_height: h,
            image_width: w,
            channels: c,
            patch_size: p,
            model_dim: d,
            head_count: heads,
        } = *self;
        if [h, w, c, p, d, heads].contains(&0) {
            return Err(CadgError::Config(format!("zero extent in {self:?}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(CadgError::Dimension(format!(
                "image {h}x{w} not divisible by patch size {p}"
            )));
        }
        if d % heads != 0 {
            return Err(CadgError::Dimension(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    /// Number of patches, `H·W/P²`.
    pub fn patch_count(&self) -> usize {
        (self.image_height * self.image_width) / (self.patch_size * self.patch_size)
    }

    /// Patches plus the class token.
    pub fn token_count(&self) -> usize {
        self.patch_count() + 1
    }

    /// Flattened length of one patch, `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }
}

/// Splits `[B, H, W, C]` images into `[B, N, P²·C]` patch rows. Patches are in
/// raster order over the patch grid; each patch is its `P×P×C` block
/// flattened row-major.
pub fn patchify(images: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.image_height || s[2] != cfg.image_width || s[3] != cfg.channels {
        return Err(CadgError::shape(
            "patchify",
            s,
            &[0, cfg.image_height, cfg.image_width, cfg.channels],
        ));
    }
    let (batch, h, w, c, p) = (s[0], s[1], s[2], s[3], cfg.patch_size);
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        for gr in 0..gh {
            for gc in 0..gw {
                for py in 0..p {
                    let row = gr * p + py;
                    let start = ((b * h + row) * w + gc * p) * c;
                    out.extend_from_slice(&src[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![batch, gh * gw, cfg.patch_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = patches.shape();
    if s.len() != 3 || s[1] != cfg.patch_count() || s[2] != cfg.patch_dim() {
        return Err(CadgError::shape(
            "unpatchify",
            s,
            &[0, cfg.patch_count(), cfg.patch_dim()],
        ));
    }
    let (batch, h, w, c, p) = (s[0], cfg.image_height, cfg.image_width, cfg.channels, cfg.patch_size);
    let gw = w / p;
    let mut out = vec![0.0; batch * h * w * c];
    for (k, patch) in patches.data().chunks(cfg.patch_dim()).enumerate() {
        let b = k / cfg.patch_count();
        let idx = k % cfg.patch_count();
        let (gr, gc) = (idx / gw, idx % gw);
        for py in 0..p {
            let row = gr * p + py;
            let start = ((b * h + row) * w + gc * p) * c;
            out[start..start + p * c].copy_from_slice(&patch[py * p * c..(py + 1) * p * c]);
        }
    }
    Tensor::new(vec![batch, h, w, c], out)
}

/// Embedding parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    /// `[P²·C, d]`
    pub patch_weight: Var,
    /// `[d]`
    pub patch_bias: Var,
    /// `[d]`
    pub class_token: Var,
    /// `[N+1, d]`
    pub position: Var,
}

/// Projects patches to `d` dims, prepends the class token at index 0 and adds
/// positional embeddings: `[B, N, P²·C] -> [B, N+1, d]`.
pub fn embed(g: &mut Graph, patches: Var, w: &EmbedVars) -> Result<Var> {
    let batch = g.shape(patches)[0];
    let proj = g.matmul(patches, w.patch_weight)?;
    let proj = g.add(proj, w.patch_bias)?;
    let d = g.shape(w.class_token)[0];
    let cls = g.reshape(w.class_token, &[1, d])?;
    let cls = g.broadcast_batch(cls, batch)?;
    let tokens = g.concat_tokens(cls, proj)?;
    let pos_shape = g.shape(w.position);
    let tok_shape = g.shape(tokens);
    if pos_shape != &tok_shape[1..] {
        return Err(CadgError::shape("embed", tok_shape, pos_shape));
    }
    g.add(tokens, w.position)
}

/// Per-layer projection matrices, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct QkvVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Queries, keys and values of one token sequence, each `[B, T, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectedTriple {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project_qkv(g: &mut Graph, x: Var, w: &QkvVars) -> Result<ProjectedTriple> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if g.shape(w.query).first() != Some(&d) {
        return Err(CadgError::shape("project_qkv", g.shape(x), g.shape(w.query)));
    }
    Ok(ProjectedTriple {
        q: g.matmul(x, w.query)?,
        k: g.matmul(x, w.key)?,
        v: g.matmul(x, w.value)?,
    })
}

fn check_attention_shapes(g: &Graph, q: Var, k: Var, v: Option<Var>, heads: usize) -> Result<()> {
    let (sq, sk) = (g.shape(q), g.shape(k));
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(CadgError::shape("attention (query vs key)", sq, sk));
    }
    if let Some(v) = v {
        let sv = g.shape(v);
        if sv.len() != 3 || sv[0] != sk[0] || sv[1] != sk[1] || sv[2] != sk[2] {
            return Err(CadgError::shape("attention (key vs value)", sk, sv));
        }
    }
    if heads == 0 || sq[2] % heads != 0 {
        return Err(CadgError::Dimension(format!(
            "model dim {} not divisible by {heads} heads",
            sq[2]
        )));
    }
    Ok(())
}

fn softmax_scores(g: &mut Graph, q: Var, k: Var, heads: usize) -> Result<Var> {
    let d = g.shape(q)[2];
    let dk = (d / heads) as f64;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let kt = g.transpose_last(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / dk.sqrt());
    g.softmax(scores, 3)
}

/// Multi-head `softmax(Q Kᵀ / √d_k) V` with `d_k = d / heads`, heads
/// concatenated and passed through `out_proj` (`[d, d]`).
///
/// `q: [B, M, d]`, `k, v: [B, N, d]` → `[B, M, d]`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, out_proj: Var) -> Result<Var> {
    check_attention_shapes(g, q, k, Some(v), heads)?;
    let weights = softmax_scores(g, q, k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let mixed = g.matmul(weights, vh)?;
    let merged = g.merge_heads(mixed)?;
    g.matmul(merged, out_proj)
}

/// The attention matrices alone, `[B, heads, M, N]`; every row sums to one.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, heads: usize) -> Result<Var> {
    check_attention_shapes(g, q, k, None, heads)?;
    softmax_scores(g, q, k, heads)
}
