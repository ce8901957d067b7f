//! On-disk dataset format: a JSON manifest plus one binary PGM per frame
//! and per mask, named `ep{idx:05}_f{frame:04}.pgm` / `ep{idx:05}_m{frame:04}.pgm`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::ActionSample;
use crate::encoders::{Observation, Vocab};
use crate::error::{Error, Result};
use crate::imgio;

use super::episode::{Episode, Scenario, Step};
use super::CanonicalTransform;

pub const MANIFEST_NAME: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

/// World and generation parameters; echoed into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Square image extent in pixels.
    pub image_size: usize,
    /// Rendered intensity of a single cloth layer.
    pub base_value: f64,
    /// Intensity added per extra layer.
    pub layer_gain: f64,
    /// Interpolated frames per action.
    pub motion_frames: usize,
    /// Static post-action frames per action.
    pub settle_frames: usize,
    /// Fold count range for ordinary episodes.
    pub min_folds: usize,
    pub max_folds: usize,
    /// Fraction of ambiguous episodes in a generated dataset.
    pub ambiguous_fraction: f64,
    /// Probability that an episode names sides in a 180-degree rotated
    /// canonical frame.
    pub canonical_rot180_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: 32,
            base_value: 0.5,
            layer_gain: 0.2,
            motion_frames: 4,
            settle_frames: 3,
            min_folds: 2,
            max_folds: 4,
            ambiguous_fraction: 0.5,
            canonical_rot180_prob: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config(format!(
                "image_size {} too small (minimum 16)",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.base_value) || self.layer_gain <= 0.0 {
            return Err(Error::config(
                "base_value must be in [0,1] and layer_gain positive",
            ));
        }
        if self.motion_frames == 0 || self.settle_frames == 0 {
            return Err(Error::config("motion_frames and settle_frames must be positive"));
        }
        if self.min_folds < 1 || self.max_folds < self.min_folds {
            return Err(Error::config(format!(
                "fold range {}..={} invalid",
                self.min_folds, self.max_folds
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction)
            || !(0.0..=1.0).contains(&self.canonical_rot180_prob)
        {
            return Err(Error::config(
                "ambiguous_fraction and canonical_rot180_prob must be in [0,1]",
            ));
        }
        Ok(())
    }
}

/// In-memory dataset: config echo, frozen vocabulary and episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub vocabulary: Vec<String>,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_word_list(&self.vocabulary)
    }

    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    /// Every instruction must tokenize without unknown words.
    pub fn validate_vocabulary(&self) -> Result<()> {
        let vocab = self.vocab()?;
        for (i, ep) in self.episodes.iter().enumerate() {
            for step in &ep.steps {
                let instr = vocab.tokenize(&step.instruction, usize::MAX)?;
                if instr.ids.contains(&0) {
                    return Err(Error::data(format!(
                        "episode {i}: instruction {:?} contains out-of-vocabulary words",
                        step.instruction
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: WorldConfig,
    vocabulary: Vec<String>,
    episodes: Vec<EpisodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    seed: u64,
    scenario: Scenario,
    canonical_transform: CanonicalTransform,
    keyframe_indices: Vec<usize>,
    steps: Vec<StepRecord>,
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    instruction: String,
    keyframe: usize,
    ambiguous: bool,
    action: ActionSample,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    image: String,
    mask: String,
    image_sha256: String,
    mask_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the dataset directory; `load_dataset` restores it bit-exactly.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate_vocabulary()?;
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(ds.episodes.len());
    for (idx, ep) in ds.episodes.iter().enumerate() {
        let mut frames = Vec::with_capacity(ep.frames.len());
        for (fi, obs) in ep.frames.iter().enumerate() {
            let image = format!("ep{idx:05}_f{fi:04}.pgm");
            let mask = format!("ep{idx:05}_m{fi:04}.pgm");
            imgio::write_pgm(obs.image(), &dir.join(&image))?;
            imgio::write_pgm(obs.mask(), &dir.join(&mask))?;
            frames.push(FrameRecord {
                image_sha256: sha256_hex(&std::fs::read(dir.join(&image))?),
                mask_sha256: sha256_hex(&std::fs::read(dir.join(&mask))?),
                image,
                mask,
            });
        }
        records.push(EpisodeRecord {
            seed: ep.seed,
            scenario: ep.scenario,
            canonical_transform: ep.canonical,
            keyframe_indices: ep.keyframes.clone(),
            steps: ep
                .steps
                .iter()
                .map(|s| StepRecord {
                    instruction: s.instruction.clone(),
                    keyframe: s.keyframe,
                    ambiguous: s.ambiguous,
                    action: s.action,
                })
                .collect(),
            frames: records_frames(frames),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ds.config.clone(),
        vocabulary: ds.vocabulary.clone(),
        episodes: records,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    imgio::write_atomic(&dir.join(MANIFEST_NAME), &json)?;
    Ok(())
}

fn records_frames(frames: Vec<FrameRecord>) -> Vec<FrameRecord> {
    frames
}

fn read_checked(dir: &Path, name: &str, want_sha: &str) -> Result<crate::tensor::Tensor> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::format(format!("missing frame file {name}")));
    }
    let bytes = std::fs::read(&path)?;
    let got = sha256_hex(&bytes);
    if got != want_sha {
        return Err(Error::format(format!(
            "checksum mismatch for {name}: manifest {want_sha}, file {got}"
        )));
    }
    imgio::read_pgm(&path)
}

/// Loads a dataset directory, verifying checksums and label invariants.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(Error::format(format!(
            "no {MANIFEST_NAME} in {}",
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;

    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for (idx, rec) in manifest.episodes.iter().enumerate() {
        let mut frames = Vec::with_capacity(rec.frames.len());
        for fr in &rec.frames {
            let image = read_checked(dir, &fr.image, &fr.image_sha256)?;
            let mask = read_checked(dir, &fr.mask, &fr.mask_sha256)?;
            frames.push(Observation::new(image, mask)?);
        }
        if !rec.keyframe_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::data(format!(
                "episode {idx}: keyframe indices not strictly increasing"
            )));
        }
        let steps: Vec<Step> = rec
            .steps
            .iter()
            .map(|s| Step {
                instruction: s.instruction.clone(),
                action: s.action,
                keyframe: s.keyframe,
                ambiguous: s.ambiguous,
            })
            .collect();
        for (si, step) in steps.iter().enumerate() {
            let obs = frames.get(step.keyframe).ok_or_else(|| {
                Error::data(format!(
                    "episode {idx} step {si}: keyframe {} out of range",
                    step.keyframe
                ))
            })?;
            for p in [step.action.pick_left, step.action.pick_right] {
                if p.row >= obs.height()
                    || p.col >= obs.width()
                    || obs.mask().at2(p.row, p.col) != 1.0
                {
                    return Err(Error::data(format!(
                        "episode {idx} step {si}: pick ({}, {}) off the cloth mask",
                        p.row, p.col
                    )));
                }
            }
        }
        episodes.push(Episode {
            seed: rec.seed,
            scenario: rec.scenario,
            canonical: rec.canonical_transform,
            frames,
            keyframes: rec.keyframe_indices.clone(),
            steps,
        });
    }
    let ds = Dataset {
        config: manifest.config,
        vocabulary: manifest.vocabulary,
        episodes,
    };
    ds.validate_vocabulary()?;
    Ok(ds)
}
