//! Assembles text, current-observation and context token sequences into one
//! sequence and fuses them with a transformer encoder.
//!
//! Every sequence gets its own learned prefix token (context slots each have
//! a distinct one, which doubles as a relative-time code), and all non-prefix
//! tokens receive a learned text/image modality embedding. The concatenation
//! order is fixed: `[text, current, context_1 .. context_H]` with context
//! slots ordered most recent first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{TokenOrigin, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{normal, AttentionRecord, BlockMode, EncoderBlock, LayerNormParams};
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tensor::TensorId;

/// What the policy conditions on besides the current observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// The H keyframes preceding the step.
    Keyframes,
    /// The H raw frames immediately preceding the step's keyframe.
    Consecutive,
    /// No history at all.
    None,
}

impl ContextMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContextMode::Keyframes => "keyframes",
            ContextMode::Consecutive => "consecutive",
            ContextMode::None => "none",
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyframes" => Ok(ContextMode::Keyframes),
            "consecutive" => Ok(ContextMode::Consecutive),
            "none" => Ok(ContextMode::None),
            other => Err(Error::config(format!(
                "unknown context mode {other:?} (expected keyframes|consecutive|none)"
            ))),
        }
    }
}

/// History length and selection mode; `history == 0` exactly when the mode
/// is [`ContextMode::None`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub mode: ContextMode,
    pub history: usize,
}

impl ContextConfig {
    pub fn new(mode: ContextMode, history: usize) -> Result<Self> {
        let cfg = ContextConfig { mode, history };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keyframes(history: usize) -> Result<Self> {
        ContextConfig::new(ContextMode::Keyframes, history)
    }

    pub fn none() -> Self {
        ContextConfig {
            mode: ContextMode::None,
            history: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.history) {
            (ContextMode::None, 0) => Ok(()),
            (ContextMode::None, h) => Err(Error::config(format!(
                "context mode none requires history 0, got {h}"
            ))),
            (_, 0) => Err(Error::config(
                "history 0 requires context mode none".to_string(),
            )),
            _ => Ok(()),
        }
    }
}

/// Per-token origin tag in the fused sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentTag {
    PrefixText,
    PrefixCurrent,
    PrefixContext(usize),
    Text,
    Current,
    Context(usize),
}

/// A fused token sequence plus its segment table; attention matrices are
/// retained per layer when introspection is on.
#[derive(Debug)]
pub struct FusedSequence {
    pub tokens: TensorId,
    pub segments: Vec<SegmentTag>,
    pub attention: Vec<AttentionRecord>,
    /// Patch-grid extents of the current-observation segment.
    pub current_grid: (usize, usize),
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Contiguous token range carrying the given tag.
    pub fn segment_range(&self, tag: SegmentTag) -> Option<std::ops::Range<usize>> {
        let start = self.segments.iter().position(|t| *t == tag)?;
        let len = self.segments[start..]
            .iter()
            .take_while(|t| **t == tag)
            .count();
        Some(start..start + len)
    }
}

/// Learned prefix/modality embeddings plus the fusion transformer.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub prefix_text: ParamId,
    pub prefix_current: ParamId,
    pub prefix_context: Vec<ParamId>,
    pub modality_text: ParamId,
    pub modality_image: ParamId,
    pub blocks: Vec<EncoderBlock>,
    /// Final norm after the pre-norm blocks, before the decoder reads the
    /// stream.
    pub final_ln: LayerNormParams,
    pub history: usize,
}

impl FusionStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        n_blocks: usize,
        history: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let prefix_text = store.add(
            "fusion.prefix_text",
            ParamGroup::Fusion,
            normal(rng, &[1, dim], 0.5),
            true,
        )?;
        let prefix_current = store.add(
            "fusion.prefix_current",
            ParamGroup::Fusion,
            normal(rng, &[1, dim], 0.5),
            true,
        )?;
        let prefix_context = (0..history)
            .map(|i| {
                store.add(
                    format!("fusion.prefix_context{i}"),
                    ParamGroup::Fusion,
                    normal(rng, &[1, dim], 0.5),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let modality_text = store.add(
            "fusion.modality_text",
            ParamGroup::Fusion,
            normal(rng, &[dim], 0.5),
            true,
        )?;
        let modality_image = store.add(
            "fusion.modality_image",
            ParamGroup::Fusion,
            normal(rng, &[dim], 0.5),
            true,
        )?;
        let blocks = (0..n_blocks)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("fusion.block{i}"),
                    ParamGroup::Fusion,
                    dim,
                    heads,
                    mlp_hidden,
                    BlockMode::Trainable,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNormParams::new(store, "fusion.final_ln", ParamGroup::Fusion, dim, true)?;
        Ok(FusionStack {
            prefix_text,
            prefix_current,
            prefix_context,
            modality_text,
            modality_image,
            blocks,
            final_ln,
            history,
        })
    }

    /// Prepends prefixes, adds modality embeddings, and concatenates in the
    /// fixed `[text, current, context..]` order.
    pub fn assemble(
        &self,
        f: &mut Fwd,
        text: &TokenSeq,
        current: &TokenSeq,
        context: &[TokenSeq],
    ) -> Result<FusedSequence> {
        if context.len() != self.history {
            return Err(Error::contract(format!(
                "assemble: got {} context sequences, model expects {}",
                context.len(),
                self.history
            )));
        }
        if text.origin != TokenOrigin::Text || current.origin != TokenOrigin::CurrentObs {
            return Err(Error::contract(
                "assemble: sequence origins do not match their slots",
            ));
        }
        let current_grid = current
            .grid
            .ok_or_else(|| Error::contract("assemble: current sequence has no patch grid"))?;

        let mut parts = Vec::with_capacity(2 + context.len());
        let mut segments = Vec::new();

        let with_modality = |f: &mut Fwd, seq: TensorId, modality: ParamId| -> Result<TensorId> {
            let m = f.p(modality);
            f.graph.add_row_bias(seq, m)
        };

        let tagged = with_modality(f, text.id, self.modality_text)?;
        let prefixed = f.graph.concat_rows(&[f.p(self.prefix_text), tagged])?;
        parts.push(prefixed);
        segments.push(SegmentTag::PrefixText);
        segments.extend(std::iter::repeat(SegmentTag::Text).take(text.len));

        let tagged = with_modality(f, current.id, self.modality_image)?;
        let prefixed = f.graph.concat_rows(&[f.p(self.prefix_current), tagged])?;
        parts.push(prefixed);
        segments.push(SegmentTag::PrefixCurrent);
        segments.extend(std::iter::repeat(SegmentTag::Current).take(current.len));

        for (i, ctx) in context.iter().enumerate() {
            let tagged = with_modality(f, ctx.id, self.modality_image)?;
            let prefixed = f.graph.concat_rows(&[f.p(self.prefix_context[i]), tagged])?;
            parts.push(prefixed);
            segments.push(SegmentTag::PrefixContext(i));
            segments.extend(std::iter::repeat(SegmentTag::Context(i)).take(ctx.len));
        }

        let tokens = f.graph.concat_rows(&parts)?;
        Ok(FusedSequence {
            tokens,
            segments,
            attention: Vec::new(),
            current_grid,
        })
    }

    /// Runs the fusion blocks with full self-attention; retains per-layer
    /// attention matrices when `retain` is set.
    pub fn fuse(&self, f: &mut Fwd, seq: FusedSequence, retain: bool) -> Result<FusedSequence> {
        let mut x = seq.tokens;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let (out, record) = block.forward(f, x, retain)?;
            x = out;
            if let Some(r) = record {
                attention.push(r);
            }
        }
        x = self.final_ln.forward(f, x)?;
        Ok(FusedSequence {
            tokens: x,
            segments: seq.segments,
            attention,
            current_grid: seq.current_grid,
        })
    }
}

/// Selects exactly the current-observation (non-prefix) tokens, `[gh*gw, d]`.
pub fn extract_current(f: &mut Fwd, seq: &FusedSequence) -> Result<TensorId> {
    if seq.segments.is_empty() {
        return Err(Error::contract("extract_current: segment table missing"));
    }
    let range = seq
        .segment_range(SegmentTag::Current)
        .ok_or_else(|| Error::contract("extract_current: no current segment"))?;
    f.graph.slice_rows(seq.tokens, range.start, range.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(f: &mut Fwd, n: usize, d: usize, origin: TokenOrigin, salt: f64) -> TokenSeq {
        let t = Tensor::from_fn(&[n, d], |i| ((i as f64 + salt) * 0.13).sin());
        let id = f.graph.constant(t);
        TokenSeq {
            id,
            len: n,
            origin,
            grid: matches!(origin, TokenOrigin::CurrentObs | TokenOrigin::ContextObs(_))
                .then_some((2, n / 2)),
        }
    }

    fn stack(store: &mut ParamStore, history: usize) -> FusionStack {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        FusionStack::new(store, 8, 2, 16, 2, history, &mut rng).unwrap()
    }

    #[test]
    fn token_budget() {
        // H=3: (1+len_text) + (1+n_patches) + 3*(1+n_patches)
        let mut store = ParamStore::new();
        let fs = stack(&mut store, 3);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let mut f = Fwd::new(&mut g, &bound);
        let text = seq(&mut f, 7, 8, TokenOrigin::Text, 0.0);
        let current = seq(&mut f, 4, 8, TokenOrigin::CurrentObs, 1.0);
        let ctx: Vec<TokenSeq> = (0..3)
            .map(|i| seq(&mut f, 4, 8, TokenOrigin::ContextObs(i), 2.0 + i as f64))
            .collect();
        let fused = fs.assemble(&mut f, &text, &current, &ctx).unwrap();
        assert_eq!(fused.len(), 8 + 5 + 3 * 5);
        assert_eq!(g.shape(fused.tokens), &[28, 8]);

        // H=0 variant.
        let mut store0 = ParamStore::new();
        let fs0 = stack(&mut store0, 0);
        let mut g0 = Graph::new();
        let bound0 = store0.bind_all(&mut g0);
        let mut f0 = Fwd::new(&mut g0, &bound0);
        let text = seq(&mut f0, 7, 8, TokenOrigin::Text, 0.0);
        let current = seq(&mut f0, 4, 8, TokenOrigin::CurrentObs, 1.0);
        let fused = fs0.assemble(&mut f0, &text, &current, &[]).unwrap();
        assert_eq!(fused.len(), 1 + 7 + 1 + 4);
    }

    #[test]
    fn context_slots_are_distinct() {
        let mut store = ParamStore::new();
        let fs = stack(&mut store, 2);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let mut f = Fwd::new(&mut g, &bound);
        let text = seq(&mut f, 3, 8, TokenOrigin::Text, 0.0);
        let current = seq(&mut f, 4, 8, TokenOrigin::CurrentObs, 1.0);
        let c0 = seq(&mut f, 4, 8, TokenOrigin::ContextObs(0), 5.0);
        let c1 = seq(&mut f, 4, 8, TokenOrigin::ContextObs(1), 9.0);
        let a = fs.assemble(&mut f, &text, &current, &[c0, c1]).unwrap();
        let b = fs.assemble(&mut f, &text, &current, &[c1, c0]).unwrap();
        assert_ne!(g.data(a.tokens), g.data(b.tokens));
    }

    #[test]
    fn wrong_context_count_rejected() {
        let mut store = ParamStore::new();
        let fs = stack(&mut store, 2);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let mut f = Fwd::new(&mut g, &bound);
        let text = seq(&mut f, 3, 8, TokenOrigin::Text, 0.0);
        let current = seq(&mut f, 4, 8, TokenOrigin::CurrentObs, 1.0);
        assert!(matches!(
            fs.assemble(&mut f, &text, &current, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fuse_preserves_shape_and_extract_selects_rows() {
        let mut store = ParamStore::new();
        let fs = stack(&mut store, 1);
        let mut g = Graph::new();
        let bound = store.bind_all(&mut g);
        let mut f = Fwd::new(&mut g, &bound);
        let text = seq(&mut f, 3, 8, TokenOrigin::Text, 0.0);
        let current = seq(&mut f, 4, 8, TokenOrigin::CurrentObs, 1.0);
        let c0 = seq(&mut f, 4, 8, TokenOrigin::ContextObs(0), 5.0);
        let fused = fs.assemble(&mut f, &text, &current, &[c0]).unwrap();
        let n = fused.len();
        let fused = fs.fuse(&mut f, fused, true).unwrap();
        assert_eq!(f.graph.shape(fused.tokens), &[n, 8]);
        assert_eq!(fused.attention.len(), 2);
        for rec in &fused.attention {
            for h in 0..rec.heads {
                for row in rec.head(h).chunks_exact(rec.n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        let cur = extract_current(&mut f, &fused).unwrap();
        assert_eq!(g.shape(cur), &[4, 8]);
        let range = fused.segment_range(SegmentTag::Current).unwrap();
        let full = g.data(fused.tokens);
        let expect = &full[range.start * 8..range.end * 8];
        assert_eq!(g.data(cur), expect);
    }

    #[test]
    fn context_config_invariant() {
        assert!(ContextConfig::new(ContextMode::None, 0).is_ok());
        assert!(ContextConfig::new(ContextMode::None, 2).is_err());
        assert!(ContextConfig::new(ContextMode::Keyframes, 0).is_err());
        assert!(ContextConfig::new(ContextMode::Consecutive, 3).is_ok());
    }
}
