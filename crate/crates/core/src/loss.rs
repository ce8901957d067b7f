//! Gaussian-mixture supervision maps and the binary cross-entropy loss.
//!
//! A target map is a sum of equal-weight isotropic Gaussians centered at the
//! ground-truth positions, evaluated at pixel centers. Pick targets are
//! restricted to the segmentation mask (no grasping off the cloth) and the
//! result is renormalized to a valid distribution. Place targets are not
//! mask-restricted: a placed edge may land off the current cloth.

use crate::decoder::{HeatmapPair, PixelCoord};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};

/// Clamp bound for probabilities inside the BCE logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Pick,
    Place,
}

/// A normalized supervision map.
#[derive(Debug, Clone)]
pub struct TargetMap {
    pub probs: Tensor,
    pub kind: TargetKind,
    pub sigma: f64,
    pub components: Vec<PixelCoord>,
}

/// Builds the mixture map on an `(h, w)` grid. Pick targets require a mask
/// and every component must lie on it.
pub fn build_target(
    kind: TargetKind,
    positions: &[PixelCoord],
    sigma: f64,
    extent: (usize, usize),
    mask: Option<&Tensor>,
) -> Result<TargetMap> {
    let (h, w) = extent;
    if positions.is_empty() {
        return Err(Error::contract("build_target: no component positions"));
    }
    if sigma <= 0.0 {
        return Err(Error::config(format!("build_target: sigma {sigma} must be positive")));
    }
    for p in positions {
        if p.row >= h || p.col >= w {
            return Err(Error::data(format!(
                "build_target: position ({}, {}) outside {h}x{w} image",
                p.row, p.col
            )));
        }
    }
    if let Some(m) = mask {
        if m.shape() != [h, w] {
            return Err(Error::dim(format!(
                "build_target: mask {:?} vs image {h}x{w}",
                m.shape()
            )));
        }
    }
    if kind == TargetKind::Pick {
        let m = mask.ok_or_else(|| {
            Error::contract("build_target: pick targets require a segmentation mask")
        })?;
        for p in positions {
            if m.at2(p.row, p.col) == 0.0 {
                return Err(Error::data(format!(
                    "build_target: pick position ({}, {}) is off the cloth mask",
                    p.row, p.col
                )));
            }
        }
    }

    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut probs = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let mut v = 0.0;
            for p in positions {
                let d2 = (r as f64 - p.row as f64).powi(2) + (c as f64 - p.col as f64).powi(2);
                v += (-d2 * inv).exp();
            }
            probs.data_mut()[r * w + c] = v;
        }
    }
    if let Some(m) = mask {
        if kind == TargetKind::Pick {
            for (v, mv) in probs.data_mut().iter_mut().zip(m.data()) {
                *v *= mv;
            }
        }
    }
    let sum: f64 = probs.data().iter().sum();
    if sum <= 0.0 {
        return Err(Error::data(
            "build_target: mask removed all probability mass",
        ));
    }
    for v in probs.data_mut() {
        *v /= sum;
    }
    Ok(TargetMap {
        probs,
        kind,
        sigma,
        components: positions.to_vec(),
    })
}

/// Pixel-averaged binary cross-entropy between one predicted map and one
/// target map, both flattened, with probabilities clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_map_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "bce: {} predicted pixels vs {} target pixels",
            pred.len(),
            target.len()
        )));
    }
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / pred.len() as f64)
}

/// Mean over the pick and place maps of the pixel-averaged BCE.
pub fn bce_loss(pred: &HeatmapPair, targets: (&TargetMap, &TargetMap)) -> Result<f64> {
    let (pick_t, place_t) = targets;
    let a = bce_map_loss(pred.pick.data(), pick_t.probs.data())?;
    let b = bce_map_loss(pred.place.data(), place_t.probs.data())?;
    Ok(0.5 * (a + b))
}

/// In-graph version of [`bce_map_loss`] for training; `pred` is a flat
/// distribution node.
pub fn bce_map_loss_graph(g: &mut Graph, pred: TensorId, target: &TargetMap) -> Result<TensorId> {
    let n = g.data(pred).len();
    if n != target.probs.numel() {
        return Err(Error::dim(format!(
            "bce: {} predicted pixels vs {} target pixels",
            n,
            target.probs.numel()
        )));
    }
    let t_flat = Tensor::new(vec![n], target.probs.data().to_vec())?;
    let one_minus_t = Tensor::new(vec![n], target.probs.data().iter().map(|v| 1.0 - v).collect())?;
    let p = g.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = g.ln(p);
    let one_minus_p = g.affine(p, -1.0, 1.0);
    let log_q = g.ln(one_minus_p);
    let pos = g.mul_const(log_p, &t_flat)?;
    let neg = g.mul_const(log_q, &one_minus_t)?;
    let both = g.add(pos, neg)?;
    let mean = g.mean_all(both);
    Ok(g.affine(mean, -1.0, 0.0))
}

/// In-graph mean of the two per-map losses.
pub fn bce_loss_graph(
    g: &mut Graph,
    pred_pick: TensorId,
    pred_place: TensorId,
    pick_t: &TargetMap,
    place_t: &TargetMap,
) -> Result<TensorId> {
    let a = bce_map_loss_graph(g, pred_pick, pick_t)?;
    let b = bce_map_loss_graph(g, pred_place, place_t)?;
    let s = g.add(a, b)?;
    Ok(g.affine(s, 0.5, 0.0))
}
