//! Miniature DETR-style detector with the relation-weight context encoder.
//!
//! Pipeline: two stride-2 conv blocks, a pre-norm transformer encoder over the
//! token grid, then a pre-norm decoder over `N` learned queries. Every decoder
//! layer feeds the shared class/box heads. Context layers turn the preceding
//! layer's predictions (plus keypoints) into an `N x N` bias on their
//! self-attention logits.
//!
//! Parameters live in one [`ParamStore`]. Context-encoder parameters come last
//! and are drawn from their own RNG stream, so a detector without context
//! layers shares a bit-identical parameter prefix with its context-enabled twin.

mod config;
mod layers;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{BoundingBox, Keypoints, Scene};
use crate::error::{Error, Result};
use crate::relate::{self, Branches, ContextMatrices, QueryState};
use crate::rng::{derive_seed, stream};
use crate::stats::CooccurrenceStats;

pub use config::ModelConfig;
use layers::{sine_position_encoding, Attention, ConvBlock, FeedForward, Init, Linear, Norm};

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

/// Per-pair maps of the context encoder.
#[derive(Debug, Clone)]
pub(crate) struct ContextEncoder {
    co: Linear,
    pos: Linear,
    kp: Linear,
    fuse: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Network {
    stem: [ConvBlock; 2],
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    query_embed: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    class_head: Linear,
    box_hidden: Linear,
    box_out: Linear,
    /// Indexed by decoder layer (0-based); `Some` for context layers.
    context: Vec<Option<ContextEncoder>>,
}

/// One scene as the detector sees it.
#[derive(Debug, Clone)]
pub struct SceneInput {
    /// `[3, H, W]`
    pub pixels: Tensor,
    pub keypoints: Keypoints,
}

impl SceneInput {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let raster = scene.raster.as_ref().ok_or_else(|| Error::Validation {
            scene: scene.id.clone(),
            msg: "scene has no raster; regenerate it from provenance".into(),
        })?;
        Ok(SceneInput {
            pixels: Tensor::new(&[3, raster.height, raster.width], raster.to_chw())?,
            keypoints: scene.keypoints,
        })
    }
}

/// Tape handles for one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `[N, N_c + 1]`, last column is no-object.
    pub logits: Var,
    /// `[N, 4]`, sigmoid-bounded `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[N, N]`; present on context layers with at least one active branch.
    pub relation_weights: Option<Var>,
    /// Per-head self-attention probabilities, `[N, N]` each.
    pub self_attention: Vec<Var>,
    /// Context tensors the relation weights were built from.
    pub context: Option<ContextMatrices>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[H'W', d_model]`
    pub memory: Var,
    pub layers: Vec<LayerOutput>,
}

/// Materialized predictions of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    pub logits: Tensor,
    pub boxes: Tensor,
}

impl LayerPrediction {
    pub fn read(tape: &Tape, out: &LayerOutput) -> Self {
        LayerPrediction {
            logits: tape.value(out.logits).clone(),
            boxes: tape.value(out.boxes).clone(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn bbox(&self, q: usize) -> BoundingBox {
        let b = self.boxes.row(q);
        BoundingBox::new(b[0], b[1], b[2], b[3])
    }

    /// Class per query: argmax over all logits including no-object, lowest index on ties.
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.num_queries()).map(|q| argmax(self.logits.row(q))).collect()
    }

    pub fn query_state(&self) -> QueryState {
        QueryState {
            class_ids: self.argmax_classes(),
            boxes: (0..self.num_queries()).map(|q| self.bbox(q)).collect(),
        }
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self) -> Tensor {
        let k = self.logits.shape()[1];
        let mut out = self.logits.clone();
        for row in out.data_mut().chunks_exact_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Everything [`Detector::inspect`] reports for one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerInspection {
    pub prediction: LayerPrediction,
    /// `[N, N]`; `None` outside context layers or with every branch off.
    pub relation_weights: Option<Tensor>,
    /// Self-attention probabilities per head, `[N, N]` each.
    pub self_attention: Vec<Tensor>,
    pub context: Option<ContextMatrices>,
}

/// Rewrites the relation weights of decoder layer `layer` (1-based) before they
/// reach the logits. Used by invariance probes.
pub type RelationHook<'a> = dyn FnMut(&mut Tape, usize, Option<Var>) -> Result<Option<Var>> + 'a;

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub relation_hook: Option<&'a mut RelationHook<'a>>,
    /// Context tensors per decoder layer to use instead of rebuilding them from
    /// the preceding layer. Since the context path is detached, this changes
    /// nothing at the point the tensors were recorded; gradient checks use it
    /// to hold them fixed under perturbation.
    pub fixed_context: Option<&'a [Option<ContextMatrices>]>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: ModelConfig,
    store: ParamStore,
    net: Network,
    memory_pos: Tensor,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(derive_seed(seed, 0));
        let d = config.d_model;
        let net = {
            let mut init = Init {
                store: &mut store,
                rng: &mut rng,
            };
            let stem = [
                ConvBlock::new(&mut init, "stem.0", 3, config.stem_channels),
                ConvBlock::new(&mut init, "stem.1", config.stem_channels, d),
            ];
            let encoder = (0..config.n_encoder_layers)
                .map(|l| EncoderLayer {
                    norm_attn: Norm::new(&mut init, &format!("enc.{l}.norm_attn"), d),
                    attn: Attention::new(&mut init, &format!("enc.{l}.attn"), d, config.n_heads),
                    norm_ffn: Norm::new(&mut init, &format!("enc.{l}.norm_ffn"), d),
                    ffn: FeedForward::new(&mut init, &format!("enc.{l}.ffn"), d, config.ffn_hidden),
                })
                .collect();
            let encoder_norm = Norm::new(&mut init, "enc.norm", d);
            let query_embed = init.uniform("query_embed".into(), &[config.num_queries, d], 1.0);
            let decoder = (0..config.n_decoder_layers)
                .map(|l| DecoderLayer {
                    norm_self: Norm::new(&mut init, &format!("dec.{l}.norm_self"), d),
                    self_attn: Attention::new(&mut init, &format!("dec.{l}.self_attn"), d, config.n_heads),
                    norm_cross: Norm::new(&mut init, &format!("dec.{l}.norm_cross"), d),
                    cross_attn: Attention::new(&mut init, &format!("dec.{l}.cross_attn"), d, config.n_heads),
                    norm_ffn: Norm::new(&mut init, &format!("dec.{l}.norm_ffn"), d),
                    ffn: FeedForward::new(&mut init, &format!("dec.{l}.ffn"), d, config.ffn_hidden),
                })
                .collect();
            let decoder_norm = Norm::new(&mut init, "dec.norm", d);
            let class_head = Linear::new(&mut init, "head.class", d, config.num_classes + 1);
            let box_hidden = Linear::new(&mut init, "head.box_hidden", d, d);
            let box_out = Linear::new(&mut init, "head.box_out", d, 4);

            let mut ctx_rng = stream(derive_seed(seed, 1));
            let mut init = Init {
                store: init.store,
                rng: &mut ctx_rng,
            };
            let context = (1..=config.n_decoder_layers)
                .map(|l| {
                    config.is_context_layer(l).then(|| {
                        let p = format!("ctx.{}", l - 1);
                        ContextEncoder {
                            co: Linear::new(&mut init, &format!("{p}.co"), relate::CO_CHANNELS, 1),
                            pos: Linear::new(&mut init, &format!("{p}.pos"), relate::POS_CHANNELS, 1),
                            kp: Linear::new(&mut init, &format!("{p}.kp"), relate::HUMAN_CHANNELS, 1),
                            fuse: Linear::new(&mut init, &format!("{p}.fuse"), 1, config.context_hidden),
                            out: Linear::zeros(&mut init, &format!("{p}.out"), config.context_hidden, 2),
                        }
                    })
                })
                .collect();
            Network {
                stem,
                encoder,
                encoder_norm,
                query_embed,
                decoder,
                decoder_norm,
                class_head,
                box_hidden,
                box_out,
                context,
            }
        };
        let (gh, gw) = config.grid();
        let memory_pos = sine_position_encoding(gh, gw, d);
        Ok(Detector {
            config,
            store,
            net,
            memory_pos,
        })
    }

    /// Wraps trained parameters; names and shapes must match a fresh detector of `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut det = Detector::new(config, 0)?;
        if store.len() != det.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model config expects {}",
                store.len(),
                det.store.len()
            )));
        }
        for ((_, na, ta), (_, nb, tb)) in det.store.iter().zip(store.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{nb}` {:?} does not match expected `{na}` {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        det.store = store;
        Ok(det)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Switches context branches without touching parameters.
    pub fn set_branches(&mut self, branches: Branches) {
        self.config.branches = branches;
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta {
            model: self.config.clone(),
            extra,
        })?;
        self.store.save(path, &meta)
    }

    /// Returns the detector and the `extra` metadata it was saved with.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        Ok((Detector::from_store(meta.model, store)?, meta.extra))
    }

    /// Conv stem plus transformer encoder: `[3, H, W]` pixels to `[H'W', d_model]` memory.
    pub fn stem_and_encode(&self, tape: &mut Tape, p: &[Var], pixels: Var) -> Result<Var> {
        let c = &self.config;
        let expect = [3, c.image_height, c.image_width];
        if tape.shape(pixels) != expect {
            return Err(Error::Shape {
                op: "stem_and_encode",
                lhs: tape.shape(pixels).to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let mut x = pixels;
        let (mut h, mut w) = (c.image_height, c.image_width);
        for block in &self.net.stem {
            let tokens = block.forward(tape, p, x)?;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            let ch = tape.shape(tokens)[1];
            let t = tape.transpose(tokens)?;
            x = tape.reshape(t, &[ch, h, w])?;
        }
        let tokens = self.tokens_of(tape, x)?;
        let tokens = tape.transpose(tokens)?;
        let pos = tape.constant(self.memory_pos.clone());
        self.encode_tokens(tape, p, tokens, pos)
    }

    fn tokens_of(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        tape.reshape(x, &[s[0], s[1] * s[2]])
    }

    /// Encoder layers over `[T, d_model]` tokens with positional encodings `pos`.
    pub(crate) fn encode_tokens(&self, tape: &mut Tape, p: &[Var], tokens: Var, pos: Var) -> Result<Var> {
        let mut x = tokens;
        for layer in &self.net.encoder {
            let n = layer.norm_attn.forward(tape, p, x)?;
            let qk = tape.add(n, pos)?;
            let a = layer.attn.forward(tape, p, qk, qk, n, None)?;
            x = tape.add(x, a.out)?;
            let n = layer.norm_ffn.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, n)?;
            x = tape.add(x, f)?;
        }
        self.net.encoder_norm.forward(tape, p, x)
    }

    /// `W_rel = GLU(out(tanh(fuse(Σ_b tanh(map_b(ctx_b)))))`, `[N, N]`. Inactive
    /// branches contribute nothing; context values enter as constants.
    pub(crate) fn context_encoder_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        enc: &ContextEncoder,
        ctx: &ContextMatrices,
        branches: Branches,
    ) -> Result<Var> {
        let n = ctx.n;
        let pairs = n * n;
        let mut sum: Option<Var> = None;
        let parts = [
            (branches.co, &enc.co, &ctx.co, relate::CO_CHANNELS),
            (branches.pos, &enc.pos, &ctx.pos, relate::POS_CHANNELS),
            (branches.kp, &enc.kp, &ctx.human, relate::HUMAN_CHANNELS),
        ];
        for (on, map, data, ch) in parts {
            if !on {
                continue;
            }
            let x = tape.constant(Tensor::new(&[pairs, ch], data.clone())?);
            let y = map.forward(tape, p, x)?;
            let y = tape.tanh(y);
            sum = Some(match sum {
                None => y,
                Some(s) => tape.add(s, y)?,
            });
        }
        let s = match sum {
            Some(s) => s,
            None => tape.constant(Tensor::zeros(&[pairs, 1])),
        };
        let h = enc.fuse.forward(tape, p, s)?;
        let h = tape.tanh(h);
        let o = enc.out.forward(tape, p, h)?;
        let a = tape.slice(o, 1, 0, 1)?;
        let g = tape.slice(o, 1, 1, 1)?;
        let g = tape.sigmoid(g);
        let w = tape.mul(a, g)?;
        tape.reshape(w, &[n, n])
    }

    /// Relation weights of context layer `layer` (1-based) for given context tensors.
    pub fn relation_weights(&self, layer: usize, ctx: &ContextMatrices) -> Result<Tensor> {
        let enc = self.context_encoder(layer)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let w = self.context_encoder_forward(&mut tape, &p, enc, ctx, self.config.branches)?;
        Ok(tape.value(w).clone())
    }

    fn context_encoder(&self, layer: usize) -> Result<&ContextEncoder> {
        layer
            .checked_sub(1)
            .and_then(|l| self.net.context.get(l))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Config(format!("decoder layer {layer} is not a context layer")))
    }

    fn heads(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let n = self.net.decoder_norm.forward(tape, p, x)?;
        let logits = self.net.class_head.forward(tape, p, n)?;
        let h = self.net.box_hidden.forward(tape, p, n)?;
        let h = tape.relu(h);
        let b = self.net.box_out.forward(tape, p, h)?;
        Ok((logits, tape.sigmoid(b)))
    }

    /// Decoder over `memory`; one output per layer.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        memory: Var,
        keypoints: &Keypoints,
        stats: Option<&CooccurrenceStats>,
        opts: ForwardOptions<'_>,
    ) -> Result<Vec<LayerOutput>> {
        let c = &self.config;
        let branches = c.branches;
        let has_context = self.net.context.iter().any(Option::is_some);
        if branches.co && has_context {
            match stats {
                None => return Err(Error::Config("co-occurrence branch enabled but no statistics loaded".into())),
                Some(s) => s.expect_classes(c.num_classes)?,
            }
        }
        let ForwardOptions {
            relation_hook: mut hook,
            fixed_context,
        } = opts;
        let query_pos = p[self.net.query_embed.0];
        let memory_pos = tape.constant(self.memory_pos.clone());
        let memory_key = tape.add(memory, memory_pos)?;
        let mut x = tape.constant(Tensor::zeros(&[c.num_queries, c.d_model]));
        let mut outputs: Vec<LayerOutput> = Vec::with_capacity(c.n_decoder_layers);
        for (l, layer) in self.net.decoder.iter().enumerate() {
            let mut bias = None;
            let mut context = None;
            if let (Some(enc), true) = (&self.net.context[l], branches.any()) {
                let ctx = match fixed_context.and_then(|f| f.get(l)).and_then(Option::as_ref) {
                    Some(ctx) => ctx.clone(),
                    None => {
                        let prev = outputs.last().expect("context layers start at 2");
                        let q = LayerPrediction::read(tape, prev).query_state();
                        relate::build_context(&q, stats, keypoints, c.theta, branches)?
                    }
                };
                bias = Some(self.context_encoder_forward(tape, p, enc, &ctx, branches)?);
                context = Some(ctx);
            }
            if let Some(h) = hook.as_deref_mut() {
                bias = h(tape, l + 1, bias)?;
            }

            let n = layer.norm_self.forward(tape, p, x)?;
            let qk = tape.add(n, query_pos)?;
            let sa = layer.self_attn.forward(tape, p, qk, qk, n, bias)?;
            x = tape.add(x, sa.out)?;

            let n = layer.norm_cross.forward(tape, p, x)?;
            let q = tape.add(n, query_pos)?;
            let ca = layer.cross_attn.forward(tape, p, q, memory_key, memory, None)?;
            x = tape.add(x, ca.out)?;

            let n = layer.norm_ffn.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, n)?;
            x = tape.add(x, f)?;

            let (logits, boxes) = self.heads(tape, p, x)?;
            outputs.push(LayerOutput {
                logits,
                boxes,
                relation_weights: bias,
                self_attention: sa.probs,
                context,
            });
        }
        Ok(outputs)
    }

    /// Full forward pass on one scene.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &SceneInput,
        stats: Option<&CooccurrenceStats>,
    ) -> Result<ForwardPass> {
        self.forward_with(tape, p, input, stats, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &SceneInput,
        stats: Option<&CooccurrenceStats>,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardPass> {
        let pixels = tape.constant(input.pixels.clone());
        let memory = self.stem_and_encode(tape, p, pixels)?;
        let layers = self.decoder_forward(tape, p, memory, &input.keypoints, stats, opts)?;
        Ok(ForwardPass { memory, layers })
    }

    /// Inference: per-layer predictions with parameters bound as constants.
    pub fn predict(&self, input: &SceneInput, stats: Option<&CooccurrenceStats>) -> Result<Vec<LayerPrediction>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, input, stats)?;
        Ok(out.layers.iter().map(|l| LayerPrediction::read(&tape, l)).collect())
    }

    /// Per-layer predictions with the intermediate tensors behind them.
    pub fn inspect(&self, input: &SceneInput, stats: Option<&CooccurrenceStats>) -> Result<Vec<LayerInspection>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, input, stats)?;
        Ok(out
            .layers
            .into_iter()
            .map(|l| LayerInspection {
                prediction: LayerPrediction::read(&tape, &l),
                relation_weights: l.relation_weights.map(|w| tape.value(w).clone()),
                self_attention: l.self_attention.iter().map(|&a| tape.value(a).clone()).collect(),
                context: l.context,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
