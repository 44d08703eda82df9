//! The four-branch weight-sharing CADG network.
//!
//! Two self branches run an ordinary pre-norm ViT over each image of a
//! same-class pair. At every layer the two cross branches reuse the Q/K/V
//! tensors the self branches just projected: cross-branch 1 attends with
//! branch 1's queries over branch 2's keys and values, cross-branch 2 the
//! other way round. Each cross stream is a persistent residual stream that
//! starts from its image's embedding and also passes through the shared MLP.
//! All four streams end in the same classifier and the four cross-entropy
//! losses are mixed with weights `λ₁..λ₄`.
//!
//! There is exactly one [`ParamSet`]; every branch binds the same graph
//! leaves, so gradients from all four losses land on the same parameters.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, attention_weights, embed, patchify, project_qkv, EmbedVars, PatchConfig,
    ProjectedTriple, QkvVars,
};
use crate::error::{CadgError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.layers == 0 || self.mlp_hidden == 0 {
            return Err(CadgError::Config("model needs at least one layer and a non-empty MLP".into()));
        }
        if self.classes < 2 {
            return Err(CadgError::Config(format!("{} classes", self.classes)));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(CadgError::Config(format!("layer norm eps {}", self.ln_eps)));
        }
        Ok(())
    }
}

/// Weights `(λ₁, λ₂, λ₃, λ₄)` of the self-1, self-2, cross-1 and cross-2 losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights(pub [f64; 4]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([0.25; 4])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(CadgError::Config(format!("loss weights must be >= 0, got {:?}", self.0)));
        }
        Ok(())
    }

    /// `λ₁·l₁ + λ₂·l₂ + λ₃·l₃ + λ₄·l₄`, summed left to right.
    pub fn combine(&self, losses: [f64; 4]) -> f64 {
        let l = &self.0;
        l[0] * losses[0] + l[1] * losses[1] + l[2] * losses[2] + l[3] * losses[3]
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    out: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    mlp_in: ParamId,
    mlp_in_bias: ParamId,
    mlp_out: ParamId,
    mlp_out_bias: ParamId,
}

#[derive(Clone, Debug)]
struct WeightIds {
    patch_weight: ParamId,
    patch_bias: ParamId,
    class_token: ParamId,
    position: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_bias: ParamId,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// The single parameter set shared by all four branches.
#[derive(Clone, Debug)]
pub struct CadgWeights {
    config: ModelConfig,
    lambda: LossWeights,
    params: ParamSet,
    ids: WeightIds,
}

/// One transformer layer's parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub qkv: QkvVars,
    pub out: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_in: Var,
    pub mlp_in_bias: Var,
    pub mlp_out: Var,
    pub mlp_out_bias: Var,
}

/// All parameters bound into a graph. Every branch uses this one value.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    pub embed: EmbedVars,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    /// Every bound parameter, indexed like the `ParamSet`.
    pub all: Vec<Var>,
}

impl CadgWeights {
    /// Random initialization: Gaussian projections scaled by fan-in, residual
    /// output projections further scaled by `1/√(2L)`, unit layer-norm gains,
    /// zero biases, small class-token and positional embeddings.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, lambda: LossWeights, rng: &mut R) -> Result<Self> {
        config.validate()?;
        lambda.validate()?;
        let p = &config.patch;
        let (d, hidden, k) = (p.model_dim, config.mlp_hidden, config.classes);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = 1.0 / ((2 * config.layers) as f64).sqrt();
        let mut ps = ParamSet::new();

        let patch_weight = ps.add("embed.patch_weight", Tensor::randn(&[p.patch_dim(), d], fan(p.patch_dim()), rng));
        let patch_bias = ps.add("embed.patch_bias", Tensor::zeros(&[d]));
        let class_token = ps.add("embed.class_token", Tensor::randn(&[d], 0.02, rng));
        let position = ps.add("embed.position", Tensor::randn(&[p.token_count(), d], 0.02, rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_gain: ps.add(name("ln1.gain"), Tensor::ones(&[d])),
                ln1_bias: ps.add(name("ln1.bias"), Tensor::zeros(&[d])),
                query: ps.add(name("attn.query"), Tensor::randn(&[d, d], fan(d), rng)),
                key: ps.add(name("attn.key"), Tensor::randn(&[d, d], fan(d), rng)),
                value: ps.add(name("attn.value"), Tensor::randn(&[d, d], fan(d), rng)),
                out: ps.add(name("attn.out"), Tensor::randn(&[d, d], fan(d) * resid, rng)),
                ln2_gain: ps.add(name("ln2.gain"), Tensor::ones(&[d])),
                ln2_bias: ps.add(name("ln2.bias"), Tensor::zeros(&[d])),
                mlp_in: ps.add(name("mlp.in"), Tensor::randn(&[d, hidden], fan(d), rng)),
                mlp_in_bias: ps.add(name("mlp.in_bias"), Tensor::zeros(&[hidden])),
                mlp_out: ps.add(name("mlp.out"), Tensor::randn(&[hidden, d], fan(hidden) * resid, rng)),
                mlp_out_bias: ps.add(name("mlp.out_bias"), Tensor::zeros(&[d])),
            });
        }
        let final_gain = ps.add("final_ln.gain", Tensor::ones(&[d]));
        let final_bias = ps.add("final_ln.bias", Tensor::zeros(&[d]));
        let head_weight = ps.add("head.weight", Tensor::randn(&[d, k], fan(d), rng));
        let head_bias = ps.add("head.bias", Tensor::zeros(&[k]));

        Ok(CadgWeights {
            config,
            lambda,
            params: ps,
            ids: WeightIds {
                patch_weight,
                patch_bias,
                class_token,
                position,
                layers,
                final_gain,
                final_bias,
                head_weight,
                head_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lambda(&self) -> LossWeights {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: LossWeights) -> Result<()> {
        lambda.validate()?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Total scalar weights. Identical whether one or four branches run.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Binds every parameter into `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundWeights {
        let all: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        self.bind_vars(all)
    }

    /// Interprets already-inserted vars (indexed like the `ParamSet`) as
    /// this model's weights.
    pub fn bind_vars(&self, all: Vec<Var>) -> BoundWeights {
        let v = |id: ParamId| all[id.0];
        let ids = &self.ids;
        BoundWeights {
            embed: EmbedVars {
                patch_weight: v(ids.patch_weight),
                patch_bias: v(ids.patch_bias),
                class_token: v(ids.class_token),
                position: v(ids.position),
            },
            layers: ids
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gain: v(l.ln1_gain),
                    ln1_bias: v(l.ln1_bias),
                    qkv: QkvVars {
                        query: v(l.query),
                        key: v(l.key),
                        value: v(l.value),
                    },
                    out: v(l.out),
                    ln2_gain: v(l.ln2_gain),
                    ln2_bias: v(l.ln2_bias),
                    mlp_in: v(l.mlp_in),
                    mlp_in_bias: v(l.mlp_in_bias),
                    mlp_out: v(l.mlp_out),
                    mlp_out_bias: v(l.mlp_out_bias),
                })
                .collect(),
            final_gain: v(ids.final_gain),
            final_bias: v(ids.final_bias),
            head_weight: v(ids.head_weight),
            head_bias: v(ids.head_bias),
            all,
        }
    }

    /// Embeds `[B, H, W, C]` images into `[B, N+1, d]` tokens.
    pub fn embed_images(&self, g: &mut Graph, bw: &BoundWeights, images: &Tensor) -> Result<Var> {
        let patches = patchify(images, &self.config.patch)?;
        let patches = g.constant(patches);
        embed(g, patches, &bw.embed)
    }

    fn mlp(&self, g: &mut Graph, x: Var, lv: &LayerVars) -> Result<Var> {
        let h = g.layer_norm(x, lv.ln2_gain, lv.ln2_bias, self.config.ln_eps)?;
        let h = g.matmul(h, lv.mlp_in)?;
        let h = g.add(h, lv.mlp_in_bias)?;
        let h = g.gelu(h);
        let h = g.matmul(h, lv.mlp_out)?;
        g.add(h, lv.mlp_out_bias)
    }

    /// One pre-norm self-attention block; also returns the Q/K/V it projected.
    pub fn self_block(&self, g: &mut Graph, s: Var, layer: usize, bw: &BoundWeights) -> Result<(Var, ProjectedTriple)> {
        let lv = bw.layers.get(layer).ok_or_else(|| layer_error(layer, self.config.layers))?;
        let h = g.layer_norm(s, lv.ln1_gain, lv.ln1_bias, self.config.ln_eps)?;
        let t = project_qkv(g, h, &lv.qkv)?;
        let a = attend(g, t.q, t.k, t.v, self.config.patch.head_count, lv.out)?;
        let s = g.add(s, a)?;
        let m = self.mlp(g, s, lv)?;
        Ok((g.add(s, m)?, t))
    }

    /// Cross stream update: residual cross-attention with routed Q and K/V,
    /// then the shared MLP sublayer.
    fn cross_block(&self, g: &mut Graph, c: Var, queries: &ProjectedTriple, keys: &ProjectedTriple, lv: &LayerVars) -> Result<Var> {
        let a = attend(g, queries.q, keys.k, keys.v, self.config.patch.head_count, lv.out)?;
        let c = g.add(c, a)?;
        let m = self.mlp(g, c, lv)?;
        g.add(c, m)
    }

    /// Advances all four streams through layer `n`.
    pub fn cadg_layer(&self, g: &mut Graph, n: usize, states: &BranchStates, bw: &BoundWeights) -> Result<BranchStates> {
        let lv = bw.layers.get(n).ok_or_else(|| layer_error(n, self.config.layers))?;
        states.check(g)?;
        let (s1, t1) = self.self_block(g, states.s1, n, bw)?;
        let (s2, t2) = self.self_block(g, states.s2, n, bw)?;
        let c1 = self.cross_block(g, states.c1, &t1, &t2, lv)?;
        let c2 = self.cross_block(g, states.c2, &t2, &t1, lv)?;
        Ok(BranchStates {
            s1,
            s2,
            c1,
            c2,
            triples: Some([t1, t2]),
        })
    }

    /// Embeds both images and runs every layer. Element `n` of the result is
    /// the state after layer `n`.
    pub fn run_streams(&self, g: &mut Graph, bw: &BoundWeights, x1: &Tensor, x2: &Tensor) -> Result<Vec<BranchStates>> {
        if x1.shape() != x2.shape() {
            return Err(CadgError::shape("cadg forward (x1 vs x2)", x1.shape(), x2.shape()));
        }
        let e1 = self.embed_images(g, bw, x1)?;
        let e2 = self.embed_images(g, bw, x2)?;
        let mut state = BranchStates::from_embeddings(e1, e2);
        let mut out = Vec::with_capacity(self.config.layers);
        for n in 0..self.config.layers {
            state = self.cadg_layer(g, n, &state, bw)?;
            out.push(state.clone());
        }
        Ok(out)
    }

    /// Final layer norm, class token, shared classifier: `[B, T, d] -> [B, K]`.
    pub fn classify(&self, g: &mut Graph, tokens: Var, bw: &BoundWeights) -> Result<Var> {
        let h = g.layer_norm(tokens, bw.final_gain, bw.final_bias, self.config.ln_eps)?;
        let cls = g.select_token(h, 0)?;
        let logits = g.matmul(cls, bw.head_weight)?;
        g.add(logits, bw.head_bias)
    }

    /// Full four-branch forward pass with the weighted loss.
    pub fn forward(&self, g: &mut Graph, bw: &BoundWeights, x1: &Tensor, x2: &Tensor, labels: &[usize]) -> Result<CadgTrace> {
        if x1.shape().first() != Some(&labels.len()) {
            return Err(CadgError::Dimension(format!(
                "{} labels for a batch of shape {:?}",
                labels.len(),
                x1.shape()
            )));
        }
        let layers = self.run_streams(g, bw, x1, x2)?;
        let last = layers.last().expect("at least one layer");
        let mut logits = [last.s1; 4];
        let mut losses = [last.s1; 4];
        for (i, stream) in last.streams().into_iter().enumerate() {
            logits[i] = self.classify(g, stream, bw)?;
            losses[i] = g.cross_entropy(logits[i], labels)?;
        }
        let l = self.lambda.0;
        let mut total = g.scale(losses[0], l[0]);
        for i in 1..4 {
            let term = g.scale(losses[i], l[i]);
            total = g.add(total, term)?;
        }
        Ok(CadgTrace {
            layers,
            logits,
            losses,
            total,
        })
    }

    /// Single-stream logits: the self branch alone, as used at test time and
    /// by the ERM baseline.
    pub fn self_logits(&self, g: &mut Graph, bw: &BoundWeights, x: &Tensor) -> Result<Var> {
        let mut s = self.embed_images(g, bw, x)?;
        for n in 0..self.config.layers {
            s = self.self_block(g, s, n, bw)?.0;
        }
        self.classify(g, s, bw)
    }

    /// Evaluates the four-branch forward pass without recording gradients.
    pub fn forward_eval(&self, x1: &Tensor, x2: &Tensor, labels: &[usize]) -> Result<CadgOutput> {
        let mut g = Graph::new();
        let bw = self.bind(&mut g, false);
        let trace = self.forward(&mut g, &bw, x1, x2, labels)?;
        Ok(trace.output(&g))
    }

    /// Self-mode logits `[B, K]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bw = self.bind(&mut g, false);
        let out = self.self_logits(&mut g, &bw, x)?;
        Ok(g.value(out).clone())
    }

    /// Class predictions for `[B, H, W, C]` images.
    pub fn infer(&self, x: &Tensor, mode: InferMode) -> Result<Vec<usize>> {
        let logits = match mode {
            InferMode::SelfStream => self.logits(x)?,
            InferMode::SelfPair => {
                let mut g = Graph::new();
                let bw = self.bind(&mut g, false);
                let layers = self.run_streams(&mut g, &bw, x, x)?;
                let last = layers.last().expect("at least one layer");
                let mut sum: Option<Tensor> = None;
                for stream in last.streams() {
                    let l = self.classify(&mut g, stream, &bw)?;
                    let v = g.value(l);
                    match sum.as_mut() {
                        None => sum = Some(v.clone()),
                        Some(acc) => acc.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += b),
                    }
                }
                sum.expect("four streams").map(|v| v / 4.0)
            }
        };
        Ok(logits.argmax_rows())
    }

    /// Cross-attention matrices of both cross branches at `layer`.
    pub fn alignment_map(&self, x1: &Tensor, x2: &Tensor, layer: usize) -> Result<AlignmentMap> {
        if layer >= self.config.layers {
            return Err(layer_error(layer, self.config.layers));
        }
        let mut g = Graph::new();
        let bw = self.bind(&mut g, false);
        let layers = self.run_streams(&mut g, &bw, x1, x2)?;
        let [t1, t2] = layers[layer].triples.expect("set by cadg_layer");
        let heads = self.config.patch.head_count;
        let cross1 = attention_weights(&mut g, t1.q, t2.k, heads)?;
        let cross2 = attention_weights(&mut g, t2.q, t1.k, heads)?;
        Ok(AlignmentMap {
            layer,
            cross1: g.value(cross1).clone(),
            cross2: g.value(cross2).clone(),
        })
    }
}

fn layer_error(layer: usize, layers: usize) -> CadgError {
    CadgError::Dimension(format!("layer {layer} out of range for {layers} layers"))
}

/// The four token streams, each `[B, N+1, d]`, plus the self-branch Q/K/V
/// projected at the layer that produced them.
#[derive(Clone, Debug)]
pub struct BranchStates {
    pub s1: Var,
    pub s2: Var,
    pub c1: Var,
    pub c2: Var,
    pub triples: Option<[ProjectedTriple; 2]>,
}

impl BranchStates {
    /// Layer-0 state: each cross stream starts from its own image's embedding.
    pub fn from_embeddings(e1: Var, e2: Var) -> Self {
        BranchStates {
            s1: e1,
            s2: e2,
            c1: e1,
            c2: e2,
            triples: None,
        }
    }

    /// `[s1, s2, c1, c2]`.
    pub fn streams(&self) -> [Var; 4] {
        [self.s1, self.s2, self.c1, self.c2]
    }

    fn check(&self, g: &Graph) -> Result<()> {
        let s = g.shape(self.s1);
        for v in [self.s2, self.c1, self.c2] {
            if g.shape(v) != s {
                return Err(CadgError::shape("branch streams", s, g.shape(v)));
            }
        }
        if s.len() != 3 {
            return Err(CadgError::Dimension(format!("stream shape {s:?} is not [B, T, d]")));
        }
        Ok(())
    }
}

/// Graph handles produced by [`CadgWeights::forward`].
#[derive(Clone, Debug)]
pub struct CadgTrace {
    pub layers: Vec<BranchStates>,
    /// Logits of `[s1, s2, c1, c2]`.
    pub logits: [Var; 4],
    pub losses: [Var; 4],
    pub total: Var,
}

impl CadgTrace {
    pub fn output(&self, g: &Graph) -> CadgOutput {
        let scalar = |v: Var| g.value(v).item().expect("scalar loss");
        let logit = |i: usize| g.value(self.logits[i]).clone();
        CadgOutput {
            logits_s1: logit(0),
            logits_s2: logit(1),
            logits_c1: logit(2),
            logits_c2: logit(3),
            loss_total: scalar(self.total),
            loss_s1: scalar(self.losses[0]),
            loss_s2: scalar(self.losses[1]),
            loss_c1: scalar(self.losses[2]),
            loss_c2: scalar(self.losses[3]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CadgOutput {
    pub logits_s1: Tensor,
    pub logits_s2: Tensor,
    pub logits_c1: Tensor,
    pub logits_c2: Tensor,
    pub loss_total: f64,
    pub loss_s1: f64,
    pub loss_s2: f64,
    pub loss_c1: f64,
    pub loss_c2: f64,
}

impl CadgOutput {
    pub fn components(&self) -> [f64; 4] {
        [self.loss_s1, self.loss_s2, self.loss_c1, self.loss_c2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferMode {
    /// One image through the self stream.
    #[default]
    #[serde(rename = "self")]
    SelfStream,
    /// `forward(x, x)` with the four logit sets averaged. Under weight
    /// sharing this matches `SelfStream`.
    SelfPair,
}

/// Per-head attention matrices `[B, heads, T, T]` of the two cross branches.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMap {
    pub layer: usize,
    pub cross1: Tensor,
    pub cross2: Tensor,
}

impl AlignmentMap {
    /// Writes `layer,head,query_index,key_index,weight` rows for one batch
    /// element of one cross branch (`branch` 1 or 2).
    pub fn write_csv<W: Write>(&self, branch: usize, sample: usize, mut out: W) -> Result<()> {
        let map = match branch {
            1 => &self.cross1,
            2 => &self.cross2,
            _ => return Err(CadgError::Config(format!("cross branch {branch} (expected 1 or 2)"))),
        };
        let s = map.shape();
        if sample >= s[0] {
            return Err(CadgError::Dimension(format!("sample {sample} of batch {}", s[0])));
        }
        writeln!(out, "layer,head,query_index,key_index,weight")?;
        for h in 0..s[1] {
            for q in 0..s[2] {
                for k in 0..s[3] {
                    writeln!(out, "{},{},{},{},{}", self.layer, h, q, k, map.at(&[sample, h, q, k]))?;
                }
            }
        }
        Ok(())
    }
}
