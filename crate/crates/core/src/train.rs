//! Supervised training of the policy on FoldWorld datasets, plus the binary
//! checkpoint format.
//!
//! Checkpoint layout: magic `BFLD`, little-endian `u32` version,
//! little-endian `u64` JSON-header byte length, a UTF-8 JSON header listing
//! every registry tensor (name, shape, byte offset) plus the architecture
//! and context configuration, then a contiguous little-endian `f32` payload.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ContextConfig;
use crate::imgio::write_atomic;
use crate::loss::{bce_loss_graph, build_target, TargetKind, TargetMap};
use crate::model::{init_model, sample_input, ArchConfig, PolicyModel, SampleInput};
use crate::sim::{Dataset, Episode, Scenario};
use crate::tensor::{Graph, Tensor};

const CHECKPOINT_MAGIC: &[u8; 4] = b"BFLD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Gaussian width of the supervision maps, in pixels.
    pub sigma: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of batch samples drawn from ordinary episodes.
    pub ordinary_fraction: f64,
    /// Record the loss every this many steps.
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            sigma: 2.0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ordinary_fraction: 0.7,
            log_every: 10,
            checkpoint_every: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// Scales the target width with the image size (2 px at 32x32).
    pub fn for_image_size(image_size: usize) -> Self {
        TrainConfig {
            sigma: 2.0 * image_size as f64 / 32.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.steps == 0
            || self.batch_size == 0
            || self.sigma <= 0.0
            || self.log_every == 0
        {
            return Err(Error::config(
                "learning_rate, steps, batch_size, sigma and log_every must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ordinary_fraction) {
            return Err(Error::config("ordinary_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Loss curve and summary from a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub steps: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// Supervision targets for one step sample.
pub fn step_targets(
    ep: &Episode,
    step: usize,
    sigma: f64,
    extent: (usize, usize),
) -> Result<(TargetMap, TargetMap)> {
    let s = &ep.steps[step];
    let mask = ep.frames[s.keyframe].mask();
    let pick = build_target(
        TargetKind::Pick,
        &[s.action.pick_left, s.action.pick_right],
        sigma,
        extent,
        Some(mask),
    )
    .map_err(|e| {
        Error::data(format!(
            "episode seed {} step {step}: {e}",
            ep.seed
        ))
    })?;
    let place = build_target(
        TargetKind::Place,
        &[s.action.place_left, s.action.place_right],
        sigma,
        extent,
        None,
    )?;
    Ok((pick, place))
}

/// One forward/backward pass; returns the scalar loss and, for each
/// trainable registry entry, its gradient (index-aligned with the registry).
fn grad_step(
    model: &PolicyModel,
    input: &SampleInput,
    targets: &(TargetMap, TargetMap),
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let pass = model.forward(&mut g, &bound, input, false)?;
    let loss = bce_loss_graph(&mut g, pass.pick, pass.place, &targets.0, &targets.1)?;
    let loss_value = g.data(loss)[0];
    g.backward(loss)?;
    let grads = model
        .store
        .iter()
        .map(|(pid, e)| {
            if e.trainable {
                Some(
                    g.grad(bound[pid.0])
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; e.value.numel()]),
                )
            } else {
                None
            }
        })
        .collect();
    Ok((loss_value, grads))
}

/// Draws one training sample: scenario bucket first (ordinary with
/// probability `ordinary_fraction`), then episode, then step.
fn draw_sample<'d>(
    ds: &'d Dataset,
    ordinary: &[usize],
    ambiguous: &[usize],
    frac: f64,
    rng: &mut ChaCha8Rng,
) -> (&'d Episode, usize) {
    let bucket = if rng.random::<f64>() < frac { ordinary } else { ambiguous };
    let bucket = if bucket.is_empty() {
        if ordinary.is_empty() { ambiguous } else { ordinary }
    } else {
        bucket
    };
    let ep = &ds.episodes[bucket[rng.random_range(0..bucket.len())]];
    let step = rng.random_range(0..ep.steps.len());
    (ep, step)
}

/// Trains the model in place; returns the loss curve. Deterministic given
/// the dataset and `cfg.seed`. A non-finite loss aborts with an error; any
/// checkpoint already written stays on disk.
pub fn train(model: &mut PolicyModel, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if ds.episodes.is_empty() {
        return Err(Error::contract("train: empty dataset"));
    }
    let vocab = ds.vocab()?;
    if *model.arch.vocab != *ds.vocabulary {
        return Err(Error::config(
            "model vocabulary does not match the dataset manifest",
        ));
    }
    let extent = (model.arch.image_size, model.arch.image_size);
    let ordinary: Vec<usize> = ds
        .episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.scenario == Scenario::Ordinary)
        .map(|(i, _)| i)
        .collect();
    let ambiguous: Vec<usize> = ds
        .episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| e.scenario == Scenario::Ambiguous)
        .map(|(i, _)| i)
        .collect();

    let trainable: Vec<usize> = model
        .store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(pid, _)| pid.0)
        .collect();
    let sizes: Vec<usize> = trainable
        .iter()
        .map(|&i| model.store.iter().nth(i).unwrap().1.value.numel())
        .collect();
    let mut adam = Adam::new(&sizes);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    let mut last_loss = f64::NAN;

    for step in 0..cfg.steps {
        let mut accum: Vec<Option<Vec<f64>>> = vec![None; model.store.len()];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (ep, s) = draw_sample(ds, &ordinary, &ambiguous, cfg.ordinary_fraction, &mut rng);
            let input = sample_input(&vocab, ep, s, &model.context, model.arch.max_text_len)?;
            let targets = step_targets(ep, s, cfg.sigma, extent)?;
            let (loss, grads) = grad_step(model, &input, &targets)?;
            batch_loss += loss;
            for (slot, grad) in accum.iter_mut().zip(grads) {
                match (slot.as_mut(), grad) {
                    (Some(acc), Some(g)) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        batch_loss /= cfg.batch_size as f64;
        last_loss = batch_loss;
        if !batch_loss.is_finite() {
            return Err(Error::data(format!(
                "non-finite loss at step {step}; aborting (last checkpoint retained)"
            )));
        }

        adam.t += 1;
        for (ti, &pi) in trainable.iter().enumerate() {
            let Some(grad) = accum[pi].as_mut() else { continue };
            let scale = 1.0 / cfg.batch_size as f64;
            let entry = model.store.value_mut(crate::params::ParamId(pi));
            match cfg.optimizer {
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - cfg.beta1.powi(adam.t as i32);
                    let bc2 = 1.0 - cfg.beta2.powi(adam.t as i32);
                    let (m, v) = (&mut adam.m[ti], &mut adam.v[ti]);
                    for ((w, g), (mi, vi)) in entry
                        .data_mut()
                        .iter_mut()
                        .zip(grad.iter())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        let g = g * scale;
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for (w, g) in entry.data_mut().iter_mut().zip(grad.iter()) {
                        *w -= cfg.learning_rate * g * scale;
                    }
                }
            }
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push((step, batch_loss));
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, cfg.checkpoint_path.as_ref()) {
            if (step + 1) % every == 0 {
                save_checkpoint(model, path)?;
            }
        }
    }
    if let Some(path) = cfg.checkpoint_path.as_ref() {
        save_checkpoint(model, path)?;
    }
    Ok(TrainReport {
        loss_curve: curve,
        final_loss: last_loss,
        steps: cfg.steps,
    })
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the f32 payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchConfig,
    context: ContextConfig,
    tensors: Vec<TensorHeader>,
}

/// Serializes the full parameter registry as 32-bit floats.
pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for (_, e) in model.store.iter() {
        tensors.push(TensorHeader {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset,
        });
        offset += (e.value.numel() * 4) as u64;
    }
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        context: model.context,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + offset as usize);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, e) in model.store.iter() {
        for &v in e.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Restores a model from a checkpoint, validating magic, version, header
/// consistency against the rebuilt registry, and payload length.
pub fn load_checkpoint(path: &Path) -> Result<PolicyModel> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 {
        return Err(Error::format(format!(
            "{}: truncated checkpoint ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?} (not a checkpoint)",
            path.display(),
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::format(format!(
            "{}: header length {header_len} exceeds file size",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let mut model = init_model(header.arch, header.context, 0)?;

    if header.tensors.len() != model.store.len() {
        return Err(Error::format(format!(
            "{}: header lists {} tensors, registry has {}",
            path.display(),
            header.tensors.len(),
            model.store.len()
        )));
    }
    let payload = &bytes[16 + header_len..];
    let mut expected_offset = 0u64;
    let ids: Vec<crate::params::ParamId> = model.store.iter().map(|(pid, _)| pid).collect();
    for (th, pid) in header.tensors.iter().zip(ids) {
        let entry_name = model.store.entry(pid).name.clone();
        let shape = model.store.entry(pid).value.shape().to_vec();
        if th.name != entry_name || th.shape != shape {
            return Err(Error::format(format!(
                "{}: header tensor {:?} {:?} does not match registry entry {:?} {:?}",
                path.display(),
                th.name,
                th.shape,
                entry_name,
                shape
            )));
        }
        if th.offset != expected_offset {
            return Err(Error::format(format!(
                "{}: tensor {:?} at offset {}, expected {expected_offset}",
                path.display(),
                th.name,
                th.offset
            )));
        }
        let numel: usize = th.shape.iter().product();
        let start = th.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::format(format!(
                "{}: payload truncated at tensor {:?}",
                path.display(),
                th.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        *model.store.value_mut(pid) = Tensor::new(th.shape.clone(), data)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::format(format!(
            "{}: {} trailing payload bytes",
            path.display(),
            payload.len() - expected_offset as usize
        )));
    }
    Ok(model)
}
