//! Model analysis: PCA color maps of patch features across the temporal
//! context, and text-to-image attention maps from the fusion layers.

use std::path::Path;

use crate::encoders::{Observation, TokenOrigin};
use crate::error::{Error, Result};
use crate::fusion::SegmentTag;
use crate::imgio;
use crate::model::{sample_input, PolicyModel, SampleInput};
use crate::params::Fwd;
use crate::sim::Episode;
use crate::tensor::{Graph, Tensor};

/// Top-3 principal components of a feature matrix.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// Unit-norm eigenvectors by descending eigenvalue; always 3 entries,
    /// zero-filled when the spectrum is rank-deficient.
    pub components: Vec<Vec<f64>>,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Fewer than 3 strictly positive eigenvalues.
    pub rank_deficient: bool,
}

impl PcaFit {
    pub fn project(&self, row: &[f64], component: usize) -> f64 {
        self.components[component]
            .iter()
            .zip(row.iter().zip(&self.mean))
            .map(|(c, (x, m))| c * (x - m))
            .sum()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major
/// `d x d`). Returns (eigenvalues, eigenvectors as rows), unsorted.
fn jacobi_eigh(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for r in 0..d {
            for c in r + 1..d {
                off += a[r * d + c] * a[r * d + c];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[p * d + k];
                    let vkq = v[q * d + k];
                    v[p * d + k] = c * vkp - s * vkq;
                    v[q * d + k] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eigvals, v)
}

/// PCA over the rows of `features` `[n, d]`: mean-centering, sample
/// covariance (1/(n-1)), descending eigenvalues. Sign convention: the
/// largest-magnitude entry of each component is positive.
pub fn pca_fit(features: &Tensor) -> Result<PcaFit> {
    if features.rank() != 2 {
        return Err(Error::dim(format!("pca_fit: shape {:?}", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 4 {
        return Err(Error::contract(format!(
            "pca_fit: need at least 4 rows, got {n}"
        )));
    }
    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in x.chunks_exact(d) {
        for r in 0..d {
            let xr = row[r] - mean[r];
            for c in r..d {
                cov[r * d + c] += xr * (row[c] - mean[c]);
            }
        }
    }
    for r in 0..d {
        for c in r..d {
            cov[r * d + c] /= (n - 1) as f64;
            cov[c * d + r] = cov[r * d + c];
        }
    }
    let (eigvals, eigvecs) = jacobi_eigh(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigvals[i]).collect();

    let tol = eigenvalues[0].abs().max(1e-300) * 1e-12;
    let mut components = Vec::with_capacity(3);
    let mut rank_deficient = false;
    for k in 0..3 {
        if k < d && eigenvalues[k] > tol {
            let row = order[k];
            let mut comp: Vec<f64> = (0..d).map(|c| eigvecs[row * d + c]).collect();
            let max_idx = comp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if comp[max_idx] < 0.0 {
                for v in &mut comp {
                    *v = -*v;
                }
            }
            components.push(comp);
        } else {
            rank_deficient = true;
            components.push(vec![0.0; d]);
        }
    }
    Ok(PcaFit {
        mean,
        components,
        eigenvalues,
        rank_deficient,
    })
}

/// Image-encoder output tokens for the current observation and each context
/// frame of a step; index 0 is the current frame, then context slots most
/// recent first. Each entry is `[n_patches, d]`.
pub fn patch_features(model: &PolicyModel, input: &SampleInput) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut f = Fwd::new(&mut g, &bound);
    let mut out = Vec::with_capacity(1 + input.context.len());
    let seq = model
        .image_encoder
        .encode(&mut f, &input.current, TokenOrigin::CurrentObs)?;
    out.push((input.current.clone(), seq));
    for (i, obs) in input.context.iter().enumerate() {
        let reuse = out.iter().find(|(o, _)| o.bit_eq(obs)).map(|(_, s)| *s);
        let seq = match reuse {
            Some(s) => s,
            None => model
                .image_encoder
                .encode(&mut f, obs, TokenOrigin::ContextObs(i))?,
        };
        out.push((obs.clone(), seq));
    }
    Ok(out.into_iter().map(|(_, s)| g.value(s.id)).collect())
}

/// One RGB patch-grid map per frame, upsampled to image resolution.
#[derive(Debug, Clone)]
pub struct PcaVisualization {
    /// `[h, w, 3]` per frame: index 0 current, then context slots.
    pub frames: Vec<Tensor>,
    /// Per frame, per patch: kept (first principal component nonnegative)?
    pub retained: Vec<Vec<bool>>,
    pub fit: PcaFit,
    /// No patch survived the sign threshold; output is all black.
    pub empty: bool,
}

fn upsample_nn(grid: &Tensor, factor: usize) -> Tensor {
    let (gh, gw, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    Tensor::from_fn(&[gh * factor, gw * factor, c], |i| {
        let ch = i % c;
        let col = (i / c) % (gw * factor);
        let row = i / (c * gw * factor);
        grid.data()[((row / factor) * gw + col / factor) * c + ch]
    })
}

/// PCA color maps over the aggregated features of the current observation
/// and its context: one joint fit, patches dropped (black) when their first
/// component is negative, colors min-max normalized over retained patches
/// across all frames jointly.
pub fn pca_visualize(model: &PolicyModel, ep: &Episode, step: usize) -> Result<PcaVisualization> {
    let vocab = model.vocab()?;
    let input = sample_input(&vocab, ep, step, &model.context, model.arch.max_text_len)?;
    let feats = patch_features(model, &input)?;
    let d = model.arch.d_model;
    let n_patches = feats[0].shape()[0];

    let mut stacked = Vec::with_capacity(feats.len() * n_patches * d);
    for f in &feats {
        stacked.extend_from_slice(f.data());
    }
    let fit = pca_fit(&Tensor::new(vec![feats.len() * n_patches, d], stacked)?)?;

    // Projections and retention across all frames jointly.
    let mut projections = Vec::with_capacity(feats.len());
    let mut retained = Vec::with_capacity(feats.len());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for f in &feats {
        let mut frame_proj = Vec::with_capacity(n_patches);
        let mut frame_keep = Vec::with_capacity(n_patches);
        for row in f.data().chunks_exact(d) {
            let p = [fit.project(row, 0), fit.project(row, 1), fit.project(row, 2)];
            let keep = p[0] >= 0.0;
            if keep {
                for c in 0..3 {
                    lo[c] = lo[c].min(p[c]);
                    hi[c] = hi[c].max(p[c]);
                }
            }
            frame_proj.push(p);
            frame_keep.push(keep);
        }
        projections.push(frame_proj);
        retained.push(frame_keep);
    }
    let empty = retained.iter().all(|f| f.iter().all(|k| !k));

    let (gh, gw) = model.arch.grid();
    let mut frames = Vec::with_capacity(feats.len());
    for (proj, keep) in projections.iter().zip(&retained) {
        let mut grid = Tensor::zeros(&[gh, gw, 3]);
        for (pi, (p, &k)) in proj.iter().zip(keep).enumerate() {
            if !k {
                continue;
            }
            for c in 0..3 {
                let range = hi[c] - lo[c];
                let v = if range > 0.0 { (p[c] - lo[c]) / range } else { 0.5 };
                grid.data_mut()[pi * 3 + c] = v;
            }
        }
        frames.push(upsample_nn(&grid, model.arch.patch));
    }
    Ok(PcaVisualization {
        frames,
        retained,
        fit,
        empty,
    })
}

/// Which frame's patch tokens to read attention onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnTarget {
    Current,
    Context(usize),
}

/// Head-averaged attention from a text token's query row onto one frame's
/// patch tokens, renormalized to sum 1 and reshaped to the patch grid.
/// `layer` indexes the fusion blocks; `None` means the last one.
pub fn attention_map(
    model: &PolicyModel,
    ep: &Episode,
    step: usize,
    word: &str,
    layer: Option<usize>,
    target: AttnTarget,
) -> Result<Tensor> {
    let vocab = model.vocab()?;
    let input = sample_input(&vocab, ep, step, &model.context, model.arch.max_text_len)?;
    let words: Vec<String> = input
        .instruction
        .raw
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect();
    let word_pos = words
        .iter()
        .position(|w| w == &word.to_lowercase())
        .ok_or_else(|| {
            Error::lookup(format!(
                "word {word:?} not in instruction; tokens are {words:?}"
            ))
        })?;
    if word_pos >= input.instruction.ids.len() {
        return Err(Error::lookup(format!(
            "word {word:?} was truncated from the instruction"
        )));
    }

    let (_, fused) = model.infer(&input, true)?;
    let layer_idx = layer.unwrap_or(fused.attention.len() - 1);
    let record = fused.attention.get(layer_idx).ok_or_else(|| {
        Error::config(format!(
            "layer {layer_idx} out of range ({} fusion layers)",
            fused.attention.len()
        ))
    })?;

    let text_range = fused
        .segment_range(SegmentTag::Text)
        .ok_or_else(|| Error::contract("fused sequence has no text segment"))?;
    let query = text_range.start + word_pos;
    let target_tag = match target {
        AttnTarget::Current => SegmentTag::Current,
        AttnTarget::Context(i) => SegmentTag::Context(i),
    };
    let cols = fused.segment_range(target_tag).ok_or_else(|| {
        Error::contract(format!("fused sequence has no {target_tag:?} segment"))
    })?;

    let n = record.n;
    let mut avg = vec![0.0; cols.len()];
    for h in 0..record.heads {
        let row = &record.head(h)[query * n..(query + 1) * n];
        for (a, &w) in avg.iter_mut().zip(&row[cols.clone()]) {
            *a += w;
        }
    }
    let sum: f64 = avg.iter().sum();
    if sum > 0.0 {
        for v in &mut avg {
            *v /= sum;
        }
    }
    let (gh, gw) = model.arch.grid();
    Tensor::new(vec![gh, gw], avg)
}

/// Ratio of attention mass on a pixel region to the uniform share of that
/// region, with patches counted as inside when more than half their pixels
/// are. Returns `None` when the region covers no patch.
pub fn concentration_ratio(attn: &Tensor, region: &Tensor, patch: usize) -> Option<f64> {
    let (gh, gw) = (attn.shape()[0], attn.shape()[1]);
    let mut mass = 0.0;
    let mut n_region = 0usize;
    for gr in 0..gh {
        for gc in 0..gw {
            let mut inside = 0usize;
            for pr in 0..patch {
                for pc in 0..patch {
                    if region.at2(gr * patch + pr, gc * patch + pc) == 1.0 {
                        inside += 1;
                    }
                }
            }
            if inside * 2 > patch * patch {
                mass += attn.at2(gr, gc);
                n_region += 1;
            }
        }
    }
    if n_region == 0 {
        return None;
    }
    let uniform = n_region as f64 / (gh * gw) as f64;
    Some(mass / uniform)
}

/// Writes a grayscale (`[h, w]`, PGM) or RGB (`[h, w, 3]`, PPM) image.
pub fn write_image(grid: &Tensor, path: &Path) -> Result<()> {
    match grid.rank() {
        2 => imgio::write_pgm(grid, path),
        3 if grid.shape()[2] == 3 => imgio::write_ppm(grid, path),
        _ => Err(Error::dim(format!(
            "write_image: unsupported shape {:?}",
            grid.shape()
        ))),
    }
}

/// Upsamples a `[gh, gw]` map to `[gh*f, gw*f]` (nearest neighbor), useful
/// for emitting attention maps at image resolution.
pub fn upsample_map(map: &Tensor, factor: usize) -> Tensor {
    let (gh, gw) = (map.shape()[0], map.shape()[1]);
    Tensor::from_fn(&[gh * factor, gw * factor], |i| {
        let col = i % (gw * factor);
        let row = i / (gw * factor);
        map.at2(row / factor, col / factor)
    })
}

/// Rescales a nonnegative map to [0, 1] for viewing.
pub fn normalize_for_view(map: &Tensor) -> Tensor {
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return map.clone();
    }
    Tensor::new(
        map.shape().to_vec(),
        map.data().iter().map(|v| v / max).collect(),
    )
    .expect("same shape")
}

/// Convenience: observation for naming emitted analysis files.
pub fn frame_label(offset: usize) -> String {
    if offset == 0 {
        "t".to_string()
    } else {
        format!("t-{offset}")
    }
}

#[allow(dead_code)]
fn _assert_obs_unused(_: &Observation) {}
