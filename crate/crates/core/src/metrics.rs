//! Evaluation metrics: fraction-within-threshold accuracy over the four
//! action points, and the rank quantile of ground-truth pixels under the
//! predicted distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{ActionSample, PixelCoord};
use crate::error::{Error, Result};
use crate::model::{sample_input, PolicyModel};
use crate::sim::Dataset;
use crate::tensor::Tensor;

/// Mean over the four (arm, pick/place) points of the indicator that the
/// prediction lies within `k` pixels of the ground truth (Euclidean).
pub fn ap_at_k(pred: &ActionSample, gt: &ActionSample, k: f64) -> f64 {
    let hits = pred
        .points()
        .iter()
        .zip(gt.points())
        .filter(|(p, q)| p.dist(q) <= k)
        .count();
    hits as f64 / 4.0
}

/// Mid-rank quantile of the ground-truth pixel's probability:
/// `(#lower + 0.5 * #equal) / N`. Uniform maps give exactly 0.5.
pub fn quantile(map: &Tensor, gt: PixelCoord) -> Result<f64> {
    if map.rank() != 2 {
        return Err(Error::dim(format!("quantile: map shape {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if gt.row >= h || gt.col >= w {
        return Err(Error::contract(format!(
            "quantile: position ({}, {}) outside {h}x{w} map",
            gt.row, gt.col
        )));
    }
    let p = map.at2(gt.row, gt.col);
    let mut lower = 0usize;
    let mut equal = 0usize;
    for &v in map.data() {
        if v < p {
            lower += 1;
        } else if v == p {
            equal += 1;
        }
    }
    Ok((lower as f64 + 0.5 * equal as f64) / map.numel() as f64)
}

/// Pixel thresholds scaled from {5, 10, 50} at 224 px down to this image
/// size (ceil), deduplicated: {1, 2, 8} at 32x32.
pub fn thresholds_for(image_size: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [5.0, 10.0, 50.0]
        .iter()
        .map(|k| (k * image_size as f64 / 224.0).ceil() as usize)
        .map(|k| k.max(1))
        .collect();
    out.dedup();
    out
}

/// Metrics over one slice of evaluation steps.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SliceReport {
    pub ap: BTreeMap<String, f64>,
    pub quantile_pct: f64,
    pub n_steps: usize,
}

/// Full evaluation report; `by_scenario` splits steps into `ordinary`
/// (everything else) and `ambiguous` (steps whose action needs history).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: BTreeMap<String, f64>,
    pub quantile_pct: f64,
    pub by_scenario: BTreeMap<String, SliceReport>,
    pub n_steps: usize,
}

#[derive(Default)]
struct SliceAccum {
    ap_hits: BTreeMap<usize, f64>,
    quantiles: f64,
    n_quantiles: usize,
    n_steps: usize,
}

impl SliceAccum {
    fn add(&mut self, thresholds: &[usize], pred: &ActionSample, gt: &ActionSample, qs: &[f64]) {
        for &k in thresholds {
            *self.ap_hits.entry(k).or_insert(0.0) += ap_at_k(pred, gt, k as f64);
        }
        self.quantiles += qs.iter().sum::<f64>();
        self.n_quantiles += qs.len();
        self.n_steps += 1;
    }

    fn report(&self) -> SliceReport {
        let mut ap = BTreeMap::new();
        for (&k, &hits) in &self.ap_hits {
            ap.insert(k.to_string(), hits / self.n_steps.max(1) as f64);
        }
        SliceReport {
            ap,
            quantile_pct: 100.0 * self.quantiles / self.n_quantiles.max(1) as f64,
            n_steps: self.n_steps,
        }
    }
}

/// Greedy-decode evaluation of a trained model over every step of a
/// dataset. Deterministic for a fixed checkpoint and dataset.
pub fn evaluate(model: &PolicyModel, ds: &Dataset) -> Result<EvalReport> {
    if ds.episodes.is_empty() {
        return Err(Error::contract("evaluate: empty dataset"));
    }
    let vocab = ds.vocab()?;
    let thresholds = thresholds_for(model.arch.image_size);
    let mut overall = SliceAccum::default();
    let mut ordinary = SliceAccum::default();
    let mut ambiguous = SliceAccum::default();

    for ep in &ds.episodes {
        for (si, step) in ep.steps.iter().enumerate() {
            let input = sample_input(&vocab, ep, si, &model.context, model.arch.max_text_len)?;
            let (decoded, maps) = model.predict(&input)?;
            let pred = decoded.action;
            let gt = step.action;
            let qs = [
                quantile(&maps.pick, gt.pick_left)?,
                quantile(&maps.pick, gt.pick_right)?,
                quantile(&maps.place, gt.place_left)?,
                quantile(&maps.place, gt.place_right)?,
            ];
            overall.add(&thresholds, &pred, &gt, &qs);
            if step.ambiguous {
                ambiguous.add(&thresholds, &pred, &gt, &qs);
            } else {
                ordinary.add(&thresholds, &pred, &gt, &qs);
            }
        }
    }

    let mut by_scenario = BTreeMap::new();
    by_scenario.insert("ordinary".to_string(), ordinary.report());
    by_scenario.insert("ambiguous".to_string(), ambiguous.report());
    let top = overall.report();
    Ok(EvalReport {
        ap: top.ap,
        quantile_pct: top.quantile_pct,
        by_scenario,
        n_steps: top.n_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn action(points: [(usize, usize); 4]) -> ActionSample {
        ActionSample {
            pick_left: PixelCoord::new(points[0].0, points[0].1),
            pick_right: PixelCoord::new(points[1].0, points[1].1),
            place_left: PixelCoord::new(points[2].0, points[2].1),
            place_right: PixelCoord::new(points[3].0, points[3].1),
        }
    }

    #[test]
    fn perfect_prediction_is_one() {
        let a = action([(1, 1), (1, 9), (5, 1), (5, 9)]);
        assert_eq!(ap_at_k(&a, &a, 1.0), 1.0);
    }

    #[test]
    fn one_of_four_within_k() {
        let gt = action([(0, 0), (0, 10), (10, 0), (10, 10)]);
        let pred = action([(0, 0), (5, 20), (20, 5), (20, 20)]);
        assert_eq!(ap_at_k(&pred, &gt, 2.0), 0.25);
    }

    #[test]
    fn offsets_fixture_at_k5() {
        // Offsets 0, 3, 6, 20 px; exactly two within 5.
        let gt = action([(0, 0), (0, 30), (30, 0), (30, 30)]);
        let pred = action([(0, 0), (3, 30), (30, 6), (10, 30)]);
        assert_eq!(ap_at_k(&pred, &gt, 5.0), 0.5);
    }

    #[test]
    fn uniform_quantile_exactly_half() {
        let map = Tensor::filled(&[32, 32], 1.0 / 1024.0);
        assert_eq!(quantile(&map, PixelCoord::new(3, 17)).unwrap(), 0.5);
    }

    #[test]
    fn unique_max_quantile() {
        let mut map = Tensor::filled(&[8, 8], 1.0 / 128.0);
        map.data_mut()[9] = 1.0 - 63.0 / 128.0;
        let q = quantile(&map, PixelCoord::new(1, 1)).unwrap();
        assert_eq!(q, (63.0 + 0.5) / 64.0);
    }

    #[test]
    fn enumerated_2x2_fixture() {
        let map = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let q = quantile(&map, PixelCoord::new(1, 0)).unwrap();
        assert_eq!(q, (2.0 + 0.5) / 4.0);
    }

    #[test]
    fn out_of_bounds_position_rejected() {
        let map = Tensor::filled(&[4, 4], 1.0 / 16.0);
        assert!(quantile(&map, PixelCoord::new(4, 0)).is_err());
    }

    #[test]
    fn thresholds_scale_with_image() {
        assert_eq!(thresholds_for(32), vec![1, 2, 8]);
        assert_eq!(thresholds_for(224), vec![5, 10, 50]);
    }

    #[test]
    fn quantile_invariant_under_monotone_transform() {
        let raw: Vec<f64> = (0..64).map(|i| ((i * 37 % 64) as f64 + 1.0) / 64.0).collect();
        let sum: f64 = raw.iter().sum();
        let map = Tensor::new(vec![8, 8], raw.iter().map(|v| v / sum).collect()).unwrap();
        // Squaring preserves the ordering of positive values.
        let squared: Vec<f64> = map.data().iter().map(|v| v * v).collect();
        let s2: f64 = squared.iter().sum();
        let map2 = Tensor::new(vec![8, 8], squared.into_iter().map(|v| v / s2).collect()).unwrap();
        for p in [PixelCoord::new(0, 0), PixelCoord::new(3, 5), PixelCoord::new(7, 7)] {
            assert_eq!(quantile(&map, p).unwrap(), quantile(&map2, p).unwrap());
        }
    }

    #[test]
    fn ap_monotone_in_k() {
        let gt = action([(0, 0), (0, 10), (10, 0), (10, 10)]);
        let pred = action([(1, 1), (4, 12), (15, 2), (28, 28)]);
        let mut last = 0.0;
        for k in 0..30 {
            let v = ap_at_k(&pred, &gt, k as f64);
            assert!(v >= last);
            last = v;
        }
    }
}
