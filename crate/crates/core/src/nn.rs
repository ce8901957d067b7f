//! Transformer building blocks: linear layers, layer norm, multi-head
//! self-attention and the pre-norm encoder block shared by the text encoder,
//! image encoder and fusion stack.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lora::LoraLinear;
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorId};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn xavier(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Plain dense layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{prefix}.w"),
            group,
            xavier(rng, &[out_dim, in_dim], in_dim, out_dim),
            trainable,
        )?;
        let bias = Some(store.add(
            format!("{prefix}.bias"),
            group,
            Tensor::zeros(&[out_dim]),
            trainable,
        )?);
        Ok(Linear {
            w,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let wt = f.graph.transpose(f.p(self.w))?;
        let mut out = f.graph.matmul(x, wt)?;
        if let Some(bias) = self.bias {
            out = f.graph.add_row_bias(out, f.p(bias))?;
        }
        Ok(out)
    }
}

/// A projection that is either fully trainable or a frozen base with LoRA.
#[derive(Debug, Clone)]
pub enum Proj {
    Plain(Linear),
    Lora(LoraLinear),
}

impl Proj {
    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        match self {
            Proj::Plain(l) => l.forward(f, x),
            Proj::Lora(l) => l.forward(f, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        let gamma = store.add(
            format!("{prefix}.gamma"),
            group,
            Tensor::filled(&[dim], 1.0),
            trainable,
        )?;
        let beta = store.add(
            format!("{prefix}.beta"),
            group,
            Tensor::zeros(&[dim]),
            trainable,
        )?;
        Ok(LayerNormParams { gamma, beta })
    }

    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        f.graph.layer_norm(x, f.p(self.gamma), f.p(self.beta), LN_EPS)
    }
}

/// Two-layer MLP with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), group, dim, hidden, trainable, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), group, hidden, dim, trainable, rng)?,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let h = self.fc1.forward(f, x)?;
        let h = f.graph.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// Head-averaged-later attention weights captured during a forward pass:
/// `weights[head * n * n + query * n + key]`.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub heads: usize,
    pub n: usize,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    /// One head's `n x n` row-stochastic matrix.
    pub fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.n * self.n..(h + 1) * self.n * self.n]
    }
}

/// Full (unmasked) multi-head self-attention. Q and V projections may carry
/// LoRA adapters; K and the output projection follow the layer's base mode.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
    pub o: Proj,
    pub heads: usize,
    pub head_dim: usize,
}

/// How a block's weights are trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockMode {
    /// Frozen base weights, LoRA adapters of the given rank on Q and V.
    FrozenLora { rank: usize, alpha: f64 },
    /// Everything trainable, no adapters.
    Trainable,
}

fn make_proj<R: Rng>(
    store: &mut ParamStore,
    name: String,
    group: ParamGroup,
    dim: usize,
    mode: BlockMode,
    adapted: bool,
    rng: &mut R,
) -> Result<Proj> {
    match mode {
        BlockMode::FrozenLora { rank, alpha } => {
            let rank = if adapted { rank } else { 0 };
            Ok(Proj::Lora(LoraLinear::new(
                store, &name, group, dim, dim, rank, alpha, rng,
            )?))
        }
        BlockMode::Trainable => Ok(Proj::Plain(Linear::new(
            store, &name, group, dim, dim, true, rng,
        )?)),
    }
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        mode: BlockMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::config(format!(
                "model width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: make_proj(store, format!("{prefix}.q"), group, dim, mode, true, rng)?,
            k: make_proj(store, format!("{prefix}.k"), group, dim, mode, false, rng)?,
            v: make_proj(store, format!("{prefix}.v"), group, dim, mode, true, rng)?,
            o: make_proj(store, format!("{prefix}.o"), group, dim, mode, false, rng)?,
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        x: TensorId,
        retain: bool,
    ) -> Result<(TensorId, Option<AttentionRecord>)> {
        let n = f.graph.shape(x)[0];
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, x)?;
        let v = self.v.forward(f, x)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut record = retain.then(|| AttentionRecord {
            heads: self.heads,
            n,
            weights: Vec::with_capacity(self.heads * n * n),
        });
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = f.graph.slice_cols(q, start, self.head_dim)?;
            let kh = f.graph.slice_cols(k, start, self.head_dim)?;
            let vh = f.graph.slice_cols(v, start, self.head_dim)?;
            let kt = f.graph.transpose(kh)?;
            let scores = f.graph.matmul(qh, kt)?;
            let scaled = f.graph.affine(scores, scale, 0.0);
            let weights = f.graph.softmax_lastdim(scaled);
            if let Some(rec) = record.as_mut() {
                rec.weights.extend_from_slice(f.graph.data(weights));
            }
            head_outs.push(f.graph.matmul(weights, vh)?);
        }
        let merged = f.graph.concat_cols(&head_outs)?;
        let out = self.o.forward(f, merged)?;
        Ok((out, record))
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNormParams,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormParams,
    pub mlp: Mlp,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        mode: BlockMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let trainable = matches!(mode, BlockMode::Trainable);
        Ok(EncoderBlock {
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), group, dim, trainable)?,
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), group, dim, heads, mode, rng)?,
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), group, dim, trainable)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), group, dim, mlp_hidden, trainable, rng)?,
        })
    }

    pub fn forward(
        &self,
        f: &mut Fwd,
        x: TensorId,
        retain: bool,
    ) -> Result<(TensorId, Option<AttentionRecord>)> {
        let normed = self.ln1.forward(f, x)?;
        let (attn_out, record) = self.attn.forward(f, normed, retain)?;
        let x = f.graph.add(x, attn_out)?;
        let normed = self.ln2.forward(f, x)?;
        let mlp_out = self.mlp.forward(f, normed)?;
        let x = f.graph.add(x, mlp_out)?;
        Ok((x, record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(
            &mut store,
            "a",
            ParamGroup::Fusion,
            16,
            4,
            BlockMode::Trainable,
            &mut rng,
        )
        .unwrap();
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let mut f = Fwd::new(&mut g, &bound);
        let x = f.graph.constant(Tensor::from_fn(&[6, 16], |i| (i as f64 * 0.11).sin()));
        let (out, rec) = attn.forward(&mut f, x, true).unwrap();
        assert_eq!(g.shape(out), &[6, 16]);
        let rec = rec.unwrap();
        for h in 0..rec.heads {
            for row in rec.head(h).chunks_exact(rec.n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(
            &mut store,
            "b",
            ParamGroup::TextEncoder,
            16,
            2,
            32,
            BlockMode::FrozenLora { rank: 2, alpha: 4.0 },
            &mut rng,
        )
        .unwrap();
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let mut f = Fwd::new(&mut g, &bound);
        let x = f.graph.constant(Tensor::from_fn(&[5, 16], |i| (i as f64 * 0.3).cos()));
        let (out, _) = block.forward(&mut f, x, false).unwrap();
        assert_eq!(g.shape(out), &[5, 16]);
    }

    #[test]
    fn frozen_lora_block_trains_only_adapters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        EncoderBlock::new(
            &mut store,
            "b",
            ParamGroup::TextEncoder,
            16,
            2,
            32,
            BlockMode::FrozenLora { rank: 2, alpha: 4.0 },
            &mut rng,
        )
        .unwrap();
        for (_, e) in store.iter() {
            let is_adapter = e.name.contains("lora_");
            assert_eq!(e.trainable, is_adapter, "{}", e.name);
        }
    }
}
