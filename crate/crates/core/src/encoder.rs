//! Causal transformer trunk. Read at its last position it is the sentence
//! encoder; with a latent memory attached through cross-attention it is the
//! response generator.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{ClvError, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hidden width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_position: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            layers: 2,
            heads: 4,
            dropout: 0.0,
            max_position: 128,
        }
    }
}

impl EncoderConfig {
    /// Full-width preset (768 wide, 12 layers, 12 heads).
    pub fn full_scale() -> Self {
        EncoderConfig {
            d: 768,
            layers: 12,
            heads: 12,
            dropout: 0.1,
            max_position: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(ClvError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.d == 0 || self.layers == 0 || self.heads == 0 {
            return bad("d", "d, layers and heads must be positive");
        }
        if self.d % self.heads != 0 {
            return bad("heads", "d must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.max_position < 2 {
            return bad("max_position", "must be at least 2");
        }
        Ok(())
    }
}

/// A `d`-dimensional sentence representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenVector(pub Vec<f64>);

impl HiddenVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row")
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) fn dropout(g: &mut Graph, x: NodeId, p: f64, mode: &mut Mode<'_>) -> NodeId {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = Array2::from_shape_fn(g.shape(x), |_| {
                if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
            });
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Affine {
            w: store.add_normal(format!("{name}.weight"), group, fan_in, fan_out, std, rng),
            b: store.add_constant(format!("{name}.bias"), group, 1, fan_out, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize) -> Self {
        LayerNorm {
            gain: store.add_constant(format!("{name}.gain"), group, 1, d, 1.0),
            bias: store.add_constant(format!("{name}.bias"), group, 1, d, 0.0),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let n = g.normalize_rows(x, 1e-5);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Debug, Clone, Copy)]
struct CrossAttention {
    norm: LayerNorm,
    query: Affine,
    key_value: Affine,
    out: Affine,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Affine,
    attn_out: Affine,
    cross: Option<CrossAttention>,
    norm2: LayerNorm,
    ff_in: Affine,
    ff_out: Affine,
}

/// Token and position embeddings, a stack of pre-norm blocks and a final norm.
/// The output head is tied to the token embedding.
#[derive(Debug, Clone)]
pub struct Trunk {
    config: EncoderConfig,
    vocab_size: usize,
    pub(crate) token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Trunk {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        config: EncoderConfig,
        vocab_size: usize,
        cross_attention: bool,
        rng: &mut R,
    ) -> Self {
        let d = config.d;
        let std = 0.02;
        let out_std = 0.02 / (2.0 * config.layers as f64).sqrt();
        let token_embedding =
            store.add_normal(format!("{prefix}.token_embedding"), group, vocab_size, d, std, rng);
        let position_embedding = store.add_normal(
            format!("{prefix}.position_embedding"),
            group,
            config.max_position,
            d,
            0.01,
            rng,
        );
        let blocks = (0..config.layers)
            .map(|l| {
                let name = |s: &str| format!("{prefix}.block{l}.{s}");
                Block {
                    norm1: LayerNorm::new(store, &name("norm1"), group, d),
                    qkv: Affine::new(store, &name("qkv"), group, d, 3 * d, std, rng),
                    attn_out: Affine::new(store, &name("attn_out"), group, d, d, out_std, rng),
                    cross: cross_attention.then(|| CrossAttention {
                        norm: LayerNorm::new(store, &name("cross_norm"), group, d),
                        query: Affine::new(store, &name("cross_query"), group, d, d, std, rng),
                        key_value: Affine::new(store, &name("cross_kv"), group, d, 2 * d, std, rng),
                        out: Affine::new(store, &name("cross_out"), group, d, d, out_std, rng),
                    }),
                    norm2: LayerNorm::new(store, &name("norm2"), group, d),
                    ff_in: Affine::new(store, &name("ff_in"), group, d, 4 * d, std, rng),
                    ff_out: Affine::new(store, &name("ff_out"), group, 4 * d, d, out_std, rng),
                }
            })
            .collect();
        Trunk {
            config,
            vocab_size,
            token_embedding,
            position_embedding,
            blocks,
            final_norm: LayerNorm::new(store, &format!("{prefix}.final_norm"), group, d),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn has_cross_attention(&self) -> bool {
        self.blocks.iter().all(|b| b.cross.is_some())
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ClvError::EmptySequence);
        }
        if tokens.len() > self.config.max_position {
            return Err(ClvError::InvalidArgument(format!(
                "sequence of length {} exceeds max_position {}",
                tokens.len(),
                self.config.max_position
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(ClvError::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Final-layer hidden states, one row per token (`T × d`). `memory` is an
    /// `m × d` matrix attended by every block's cross-attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        memory: Option<NodeId>,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let p = self.config.dropout;
        let tok_table = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.position_embedding);
        let tok = g.gather_rows(tok_table, tokens);
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(pos_table, &positions);
        let mut h = g.add(tok, pos);
        h = dropout(g, h, p, mode);
        let mask = g.constant(causal_mask(t));
        for block in &self.blocks {
            let x = block.norm1.forward(g, store, h);
            let a = self.self_attention(g, store, block, x, mask);
            let a = dropout(g, a, p, mode);
            h = g.add(h, a);
            if let (Some(cross), Some(mem)) = (&block.cross, memory) {
                let x = cross.norm.forward(g, store, h);
                let c = self.cross_attention(g, store, cross, x, mem);
                let c = dropout(g, c, p, mode);
                h = g.add(h, c);
            }
            let x = block.norm2.forward(g, store, h);
            let f = block.ff_in.forward(g, store, x);
            let f = g.gelu(f);
            let f = block.ff_out.forward(g, store, f);
            let f = dropout(g, f, p, mode);
            h = g.add(h, f);
        }
        Ok(self.final_norm.forward(g, store, h))
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &Block,
        x: NodeId,
        mask: NodeId,
    ) -> NodeId {
        let d = self.config.d;
        let qkv = block.qkv.forward(g, store, x);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let heads = self.multi_head(g, q, k, v, Some(mask));
        block.attn_out.forward(g, store, heads)
    }

    fn cross_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cross: &CrossAttention,
        x: NodeId,
        memory: NodeId,
    ) -> NodeId {
        let d = self.config.d;
        let q = cross.query.forward(g, store, x);
        let kv = cross.key_value.forward(g, store, memory);
        let k = g.slice_cols(kv, 0, d);
        let v = g.slice_cols(kv, d, d);
        let heads = self.multi_head(g, q, k, v, None);
        cross.out.forward(g, store, heads)
    }

    fn multi_head(
        &self,
        g: &mut Graph,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<NodeId>,
    ) -> NodeId {
        let dh = self.config.d / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<NodeId> = (0..self.config.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let mut scores = g.scale(scores, scale);
                if let Some(m) = mask {
                    scores = g.add(scores, m);
                }
                let att = g.softmax_rows(scores);
                g.matmul(att, vh)
            })
            .collect();
        g.concat_cols(&outs)
    }

    /// Next-token logits from hidden states (`T × vocab`).
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, hidden: NodeId) -> NodeId {
        let table = g.param(store, self.token_embedding);
        let t = g.transpose(table);
        g.matmul(hidden, t)
    }

    /// The last position of the final layer (`1 × d`).
    pub fn encode_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let h = self.forward(g, store, tokens, None, mode)?;
        Ok(g.slice_rows(h, tokens.len() - 1, 1))
    }

    pub fn encode(&self, store: &ParamStore, tokens: &[usize], mode: &mut Mode<'_>) -> Result<HiddenVector> {
        let mut g = Graph::inference();
        let n = self.encode_node(&mut g, store, tokens, mode)?;
        Ok(HiddenVector(g.value(n).iter().copied().collect()))
    }
}

fn causal_mask(t: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, t), |(i, j)| if j > i { -1e30 } else { 0.0 })
}
