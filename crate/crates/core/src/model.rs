//! The full policy: encoders, fusion, decoders and a single parameter
//! registry, built deterministically from a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{extract_action, ActionDecoder, DecodedAction, HeatmapPair};
use crate::encoders::{
    Instruction, ImageEncoder, Observation, TextEncoder, TokenOrigin, TokenSeq, Vocab,
};
use crate::error::{Error, Result};
use crate::fusion::{extract_current, ContextConfig, FusedSequence, FusionStack};
use crate::lora::{encoder_trainable_counts, TrainableCounts};
use crate::nn::BlockMode;
use crate::params::{Fwd, ParamStore};
use crate::sim::{context_frames, Episode, TEMPLATE_WORDS};
use crate::tensor::{Graph, TensorId};

/// Architecture hyperparameters; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub text_blocks: usize,
    pub img_blocks: usize,
    pub fusion_blocks: usize,
    pub mlp_hidden: usize,
    pub max_text_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Greedy-decode suppression radius in pixels.
    pub nms_radius: f64,
    /// Frozen word list; index 0 is the unknown token.
    pub vocab: Vec<String>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 32,
            patch: 4,
            d_model: 64,
            heads: 4,
            text_blocks: 2,
            img_blocks: 2,
            fusion_blocks: 2,
            mlp_hidden: 128,
            max_text_len: 12,
            lora_rank: 4,
            lora_alpha: 8.0,
            nms_radius: 3.0,
            vocab: std::iter::once(crate::encoders::UNK_TOKEN.to_string())
                .chain(TEMPLATE_WORDS.iter().map(|w| w.to_string()))
                .collect(),
        }
    }
}

impl ArchConfig {
    /// Scale-dependent defaults for a given square image size.
    pub fn for_image_size(image_size: usize) -> Self {
        ArchConfig {
            image_size,
            nms_radius: (3.0 * image_size as f64 / 32.0).max(1.0),
            ..ArchConfig::default()
        }
    }

    /// A deliberately tiny configuration for gradient checks.
    pub fn micro() -> Self {
        ArchConfig {
            image_size: 16,
            d_model: 16,
            heads: 2,
            mlp_hidden: 32,
            lora_rank: 2,
            lora_alpha: 4.0,
            nms_radius: 1.5,
            ..ArchConfig::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return Err(Error::config(format!(
                "patch size {} must be a power of two >= 2",
                self.patch
            )));
        }
        if self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(Error::config(format!(
                "model width {} must be a positive multiple of 4 (2-d positional encoding)",
                self.d_model
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "model width {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.text_blocks == 0 || self.img_blocks == 0 || self.fusion_blocks == 0 {
            return Err(Error::config("block counts must be positive"));
        }
        if self.mlp_hidden == 0 || self.max_text_len == 0 {
            return Err(Error::config("mlp_hidden and max_text_len must be positive"));
        }
        if self.lora_rank > 0 && self.lora_alpha <= 0.0 {
            return Err(Error::config("lora_alpha must be positive when rank > 0"));
        }
        if self.nms_radius < 0.0 {
            return Err(Error::config("nms_radius must be nonnegative"));
        }
        if self.vocab.first().map(String::as_str) != Some(crate::encoders::UNK_TOKEN) {
            return Err(Error::config(format!(
                "vocabulary must start with {:?}",
                crate::encoders::UNK_TOKEN
            )));
        }
        Ok(())
    }
}

/// One model input: tokenized instruction, current observation and exactly
/// `H` context observations (most recent first).
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub instruction: Instruction,
    pub current: Observation,
    pub context: Vec<Observation>,
}

/// Builds a [`SampleInput`] for an episode step under the model's context
/// configuration.
pub fn sample_input(
    vocab: &Vocab,
    ep: &Episode,
    step: usize,
    ctx: &ContextConfig,
    max_text_len: usize,
) -> Result<SampleInput> {
    let s = ep
        .steps
        .get(step)
        .ok_or_else(|| Error::contract(format!("step {step} out of range")))?;
    let instruction = vocab.tokenize(&s.instruction, max_text_len)?;
    let current = ep.frames[s.keyframe].clone();
    let context = context_frames(ep, step, ctx)?
        .into_iter()
        .cloned()
        .collect();
    Ok(SampleInput {
        instruction,
        current,
        context,
    })
}

/// Result of a policy forward pass (graph ids plus introspection data).
pub struct ForwardPass {
    pub pick: TensorId,
    pub place: TensorId,
    pub fused: FusedSequence,
}

/// All parameters and submodules of the policy.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub arch: ArchConfig,
    pub context: ContextConfig,
    pub store: ParamStore,
    pub text_encoder: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub fusion: FusionStack,
    pub decoder: ActionDecoder,
}

/// Builds a policy with a seeded random frozen base (the stand-in for
/// pretraining), zero-initialized LoRA `B` factors, and trainable fusion,
/// prefix/modality and decoder weights.
pub fn init_model(arch: ArchConfig, context: ContextConfig, seed: u64) -> Result<PolicyModel> {
    arch.validate()?;
    context.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mode = BlockMode::FrozenLora {
        rank: arch.lora_rank,
        alpha: arch.lora_alpha,
    };
    let text_encoder = TextEncoder::new(
        &mut store,
        arch.vocab.len(),
        arch.d_model,
        arch.heads,
        arch.mlp_hidden,
        arch.text_blocks,
        arch.max_text_len,
        mode,
        &mut rng,
    )?;
    let image_encoder = ImageEncoder::new(
        &mut store,
        arch.patch,
        arch.d_model,
        arch.heads,
        arch.mlp_hidden,
        arch.img_blocks,
        mode,
        &mut rng,
    )?;
    let fusion = FusionStack::new(
        &mut store,
        arch.d_model,
        arch.heads,
        arch.mlp_hidden,
        arch.fusion_blocks,
        context.history,
        &mut rng,
    )?;
    let decoder = ActionDecoder::new(&mut store, arch.d_model, arch.patch, &mut rng)?;
    Ok(PolicyModel {
        arch,
        context,
        store,
        text_encoder,
        image_encoder,
        fusion,
        decoder,
    })
}

impl PolicyModel {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_word_list(&self.arch.vocab)
    }

    /// Leafs the parameter registry onto a fresh graph.
    pub fn bind(&self, g: &mut Graph) -> Vec<TensorId> {
        self.store.bind_all(g)
    }

    fn check_input(&self, input: &SampleInput) -> Result<()> {
        if input.context.len() != self.context.history {
            return Err(Error::contract(format!(
                "input has {} context frames, model expects {}",
                input.context.len(),
                self.context.history
            )));
        }
        let want = self.arch.image_size;
        for obs in std::iter::once(&input.current).chain(&input.context) {
            if obs.height() != want || obs.width() != want {
                return Err(Error::dim(format!(
                    "observation {}x{} does not match configured image size {want}",
                    obs.height(),
                    obs.width()
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass on an existing graph with bound parameters.
    /// Identical context observations are encoded once and shared.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[TensorId],
        input: &SampleInput,
        retain_attention: bool,
    ) -> Result<ForwardPass> {
        self.check_input(input)?;
        let mut f = Fwd::new(g, bound);
        let text = self.text_encoder.encode(&mut f, &input.instruction)?;
        let current = self
            .image_encoder
            .encode(&mut f, &input.current, TokenOrigin::CurrentObs)?;

        let mut encoded: Vec<(&Observation, TokenSeq)> = vec![(&input.current, current)];
        let mut context_seqs = Vec::with_capacity(input.context.len());
        for (i, obs) in input.context.iter().enumerate() {
            let reuse = encoded.iter().find(|(o, _)| o.bit_eq(obs)).map(|(_, s)| *s);
            let seq = match reuse {
                Some(s) => TokenSeq {
                    origin: TokenOrigin::ContextObs(i),
                    ..s
                },
                None => {
                    let s = self
                        .image_encoder
                        .encode(&mut f, obs, TokenOrigin::ContextObs(i))?;
                    encoded.push((obs, s));
                    s
                }
            };
            context_seqs.push(seq);
        }

        let assembled = self.fusion.assemble(&mut f, &text, &current, &context_seqs)?;
        let fused = self.fusion.fuse(&mut f, assembled, retain_attention)?;
        let tokens = extract_current(&mut f, &fused)?;
        let (pick, place) = self.decoder.decode(&mut f, tokens, fused.current_grid)?;
        Ok(ForwardPass { pick, place, fused })
    }

    /// Inference convenience: fresh graph, returns the heatmaps and the
    /// fused sequence (with attention when requested).
    pub fn infer(
        &self,
        input: &SampleInput,
        retain_attention: bool,
    ) -> Result<(HeatmapPair, FusedSequence)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let pass = self.forward(&mut g, &bound, input, retain_attention)?;
        let maps = crate::decoder::heatmaps_from_graph(
            &g,
            pass.pick,
            pass.place,
            self.arch.image_size,
            self.arch.image_size,
        )?;
        Ok((maps, pass.fused))
    }

    /// Greedy-decoded action for one input.
    pub fn predict(&self, input: &SampleInput) -> Result<(DecodedAction, HeatmapPair)> {
        let (maps, _) = self.infer(input, false)?;
        Ok((extract_action(&maps, self.arch.nms_radius), maps))
    }

    pub fn encoder_counts(&self) -> TrainableCounts {
        encoder_trainable_counts(&self.store)
    }
}
