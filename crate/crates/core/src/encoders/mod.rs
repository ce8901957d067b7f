//! Toy text and image encoders producing token sequences of a shared width.
//!
//! Both are small pre-norm transformers over a frozen "pretrained" base; the
//! attention Q/V projections carry trainable LoRA adapters. The same image
//! encoder instance (and therefore the same weights) encodes the current
//! observation and every context frame.

pub mod pe;
pub mod vocab;

pub use vocab::{Instruction, Vocab, UNK_TOKEN};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, BlockMode, EncoderBlock, Linear};
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorId};

/// Grayscale observation: image intensities in `[0,1]` plus a binary cloth
/// mask of the same extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    image: Tensor,
    mask: Tensor,
}

impl Observation {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        if image.shape() != mask.shape() || image.rank() != 2 {
            return Err(Error::dim(format!(
                "observation: image {:?} vs mask {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data("observation mask must be binary"));
        }
        Ok(Observation { image, mask })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn mask_nonempty(&self) -> bool {
        self.mask.data().iter().any(|&v| v == 1.0)
    }

    /// True when both image and mask match bit for bit.
    pub fn bit_eq(&self, other: &Observation) -> bool {
        self.image.bit_eq(&other.image) && self.mask.bit_eq(&other.mask)
    }
}

/// Where a token sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    Text,
    CurrentObs,
    /// i-th context slot, most recent first.
    ContextObs(usize),
}

/// A `[n, d]` token sequence living on a graph.
#[derive(Debug, Clone, Copy)]
pub struct TokenSeq {
    pub id: TensorId,
    pub len: usize,
    pub origin: TokenOrigin,
    /// Patch-grid extents for image-origin sequences.
    pub grid: Option<(usize, usize)>,
}

/// Transformer text encoder over the template vocabulary.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub dim: usize,
    pub max_len: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        n_blocks: usize,
        max_len: usize,
        mode: BlockMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = store.add(
            "text.embed",
            ParamGroup::TextEncoder,
            normal(rng, &[vocab_size, dim], 0.5),
            false,
        )?;
        let blocks = (0..n_blocks)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("text.block{i}"),
                    ParamGroup::TextEncoder,
                    dim,
                    heads,
                    mlp_hidden,
                    mode,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder {
            embed,
            blocks,
            dim,
            max_len,
        })
    }

    /// Embedding lookup + 1-D positional encoding + transformer blocks.
    pub fn encode(&self, f: &mut Fwd, instr: &Instruction) -> Result<TokenSeq> {
        let ids: Vec<usize> = instr.ids.iter().take(self.max_len).copied().collect();
        let mut x = f.graph.embedding(f.p(self.embed), &ids)?;
        let mut pe_data = Vec::with_capacity(ids.len() * self.dim);
        for pos in 0..ids.len() {
            pe_data.extend(pe::sinusoidal_pe_1d(pos, self.dim)?);
        }
        let pe_t = Tensor::new(vec![ids.len(), self.dim], pe_data)?;
        x = f.graph.add_const(x, &pe_t)?;
        for block in &self.blocks {
            x = block.forward(f, x, false)?.0;
        }
        Ok(TokenSeq {
            id: x,
            len: ids.len(),
            origin: TokenOrigin::Text,
            grid: None,
        })
    }
}

/// Patch-projection transformer image encoder.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub dim: usize,
    pub patch: usize,
}

impl ImageEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        patch: usize,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        n_blocks: usize,
        mode: BlockMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let patch_proj = Linear::new(
            store,
            "image.patch_proj",
            ParamGroup::ImageEncoder,
            patch * patch,
            dim,
            false,
            rng,
        )?;
        let blocks = (0..n_blocks)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("image.block{i}"),
                    ParamGroup::ImageEncoder,
                    dim,
                    heads,
                    mlp_hidden,
                    mode,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageEncoder {
            patch_proj,
            blocks,
            dim,
            patch,
        })
    }

    /// Non-overlapping patch flattening; one row per patch in grid order.
    pub fn patchify(&self, obs: &Observation) -> Result<Tensor> {
        let (h, w) = (obs.height(), obs.width());
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::config(format!(
                "image extents {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let img = obs.image().data();
        let mut data = Vec::with_capacity(gh * gw * p * p);
        for gr in 0..gh {
            for gc in 0..gw {
                for pr in 0..p {
                    for pc in 0..p {
                        data.push(img[(gr * p + pr) * w + gc * p + pc]);
                    }
                }
            }
        }
        Tensor::new(vec![gh * gw, p * p], data)
    }

    /// Patchify + linear projection + 2-D positional encoding + blocks.
    pub fn encode(&self, f: &mut Fwd, obs: &Observation, origin: TokenOrigin) -> Result<TokenSeq> {
        let patches = self.patchify(obs)?;
        let (gh, gw) = (obs.height() / self.patch, obs.width() / self.patch);
        let pid = f.graph.constant(patches);
        let mut x = self.patch_proj.forward(f, pid)?;
        let mut pe_data = Vec::with_capacity(gh * gw * self.dim);
        for r in 0..gh {
            for c in 0..gw {
                pe_data.extend(pe::sinusoidal_pe_2d(r, c, self.dim)?);
            }
        }
        let pe_t = Tensor::new(vec![gh * gw, self.dim], pe_data)?;
        x = f.graph.add_const(x, &pe_t)?;
        for block in &self.blocks {
            x = block.forward(f, x, false)?.0;
        }
        Ok(TokenSeq {
            id: x,
            len: gh * gw,
            origin,
            grid: Some((gh, gw)),
        })
    }
}
