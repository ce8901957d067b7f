//! Convolutional decoders from the fused current-observation token grid to
//! pick/place probability maps, and action extraction from those maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::xavier;
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorId};

/// Pixel position as (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        PixelCoord { row, col }
    }

    pub fn dist(&self, other: &PixelCoord) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// Bimanual pick-and-place action. The smaller-column point of each pair is
/// assigned to the left arm (ties broken by smaller row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSample {
    pub pick_left: PixelCoord,
    pub pick_right: PixelCoord,
    pub place_left: PixelCoord,
    pub place_right: PixelCoord,
}

fn arm_order(a: PixelCoord, b: PixelCoord) -> (PixelCoord, PixelCoord) {
    if (a.col, a.row) <= (b.col, b.row) {
        (a, b)
    } else {
        (b, a)
    }
}

impl ActionSample {
    /// Builds an action applying the left/right assignment convention to
    /// each pair.
    pub fn from_pairs(picks: (PixelCoord, PixelCoord), places: (PixelCoord, PixelCoord)) -> Self {
        let (pick_left, pick_right) = arm_order(picks.0, picks.1);
        let (place_left, place_right) = arm_order(places.0, places.1);
        ActionSample {
            pick_left,
            pick_right,
            place_left,
            place_right,
        }
    }

    pub fn points(&self) -> [PixelCoord; 4] {
        [self.pick_left, self.pick_right, self.place_left, self.place_right]
    }

    pub fn in_bounds(&self, h: usize, w: usize) -> bool {
        self.points().iter().all(|p| p.row < h && p.col < w)
    }
}

/// A pick and a place probability grid over the image pixels; each sums to 1.
#[derive(Debug, Clone)]
pub struct HeatmapPair {
    pub pick: Tensor,
    pub place: Tensor,
}

impl HeatmapPair {
    pub fn new(pick: Tensor, place: Tensor) -> Result<Self> {
        for (name, map) in [("pick", &pick), ("place", &place)] {
            if map.rank() != 2 {
                return Err(Error::dim(format!("{name} map must be 2-d")));
            }
            let sum: f64 = map.data().iter().sum();
            if map.data().iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::data(format!(
                    "{name} map is not a probability distribution (sum {sum})"
                )));
            }
        }
        if pick.shape() != place.shape() {
            return Err(Error::dim("pick and place maps differ in extent"));
        }
        Ok(HeatmapPair { pick, place })
    }

    pub fn height(&self) -> usize {
        self.pick.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pick.shape()[1]
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    kernels: ParamId,
    bias: ParamId,
}

/// One decoder head: 1x1 conv to `d/2` channels, then one x2 transposed-conv
/// stage per factor of two in the patch size, then a 1x1 conv to a single
/// channel and a softmax over all pixels.
#[derive(Debug, Clone)]
pub struct DecoderHead {
    conv_in: ConvParams,
    ups: Vec<ConvParams>,
    conv_out: ConvParams,
    channel_plan: Vec<usize>,
}

fn conv_params<R: Rng>(
    store: &mut ParamStore,
    name: String,
    shape: [usize; 4],
    fan_in: usize,
    fan_out: usize,
    bias_len: usize,
    rng: &mut R,
) -> Result<ConvParams> {
    Ok(ConvParams {
        kernels: store.add(
            format!("{name}.kernels"),
            ParamGroup::Decoder,
            xavier(rng, &shape, fan_in, fan_out),
            true,
        )?,
        bias: store.add(
            format!("{name}.bias"),
            ParamGroup::Decoder,
            Tensor::zeros(&[bias_len]),
            true,
        )?,
    })
}

impl DecoderHead {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        patch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stages = patch.trailing_zeros() as usize;
        let mut channel_plan = vec![(dim / 2).max(4)];
        for _ in 0..stages {
            let last = *channel_plan.last().unwrap();
            channel_plan.push((last / 2).max(4));
        }
        // 1x1 conv kernels are [out, in, 1, 1]; upsampling stages are
        // kernel-4 stride-2 pad-1 transposed convs so neighboring tokens
        // blend into each output pixel.
        let conv_in = conv_params(
            store,
            format!("{prefix}.conv_in"),
            [channel_plan[0], dim, 1, 1],
            dim,
            channel_plan[0],
            channel_plan[0],
            rng,
        )?;
        let mut ups = Vec::with_capacity(stages);
        for s in 0..stages {
            let (cin, cout) = (channel_plan[s], channel_plan[s + 1]);
            ups.push(conv_params(
                store,
                format!("{prefix}.up{s}"),
                [cin, cout, 4, 4],
                cin * 16,
                cout * 16,
                cout,
                rng,
            )?);
        }
        let last = *channel_plan.last().unwrap();
        let conv_out = conv_params(
            store,
            format!("{prefix}.conv_out"),
            [1, last, 1, 1],
            last,
            1,
            1,
            rng,
        )?;
        Ok(DecoderHead {
            conv_in,
            ups,
            conv_out,
            channel_plan,
        })
    }

    /// `grid` is `[d, gh, gw]`; returns a flat `[gh*gw*patch^2]` distribution.
    fn forward(&self, f: &mut Fwd, grid: TensorId) -> Result<TensorId> {
        let mut x = f.graph.conv2d(grid, f.p(self.conv_in.kernels), 1, 0)?;
        x = f.graph.add_chan_bias(x, f.p(self.conv_in.bias))?;
        for up in &self.ups {
            x = f.graph.conv_transpose2d(x, f.p(up.kernels), 2, 1)?;
            x = f.graph.add_chan_bias(x, f.p(up.bias))?;
            x = f.graph.gelu(x);
        }
        x = f.graph.conv2d(x, f.p(self.conv_out.kernels), 1, 0)?;
        x = f.graph.add_chan_bias(x, f.p(self.conv_out.bias))?;
        let numel = f.graph.data(x).len();
        let flat = f.graph.reshape(x, vec![numel])?;
        Ok(f.graph.softmax_lastdim(flat))
    }
}

/// Pick and place decoder heads over the current-observation token grid.
#[derive(Debug, Clone)]
pub struct ActionDecoder {
    pub patch: usize,
    pub dim: usize,
    pick: DecoderHead,
    place: DecoderHead,
}

impl ActionDecoder {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        patch: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch < 2 || !patch.is_power_of_two() {
            return Err(Error::config(format!(
                "decoder upsampling needs a power-of-two patch size >= 2, got {patch}"
            )));
        }
        Ok(ActionDecoder {
            patch,
            dim,
            pick: DecoderHead::new(store, "decoder.pick", dim, patch, rng)?,
            place: DecoderHead::new(store, "decoder.place", dim, patch, rng)?,
        })
    }

    pub fn channel_plan(&self) -> &[usize] {
        &self.pick.channel_plan
    }

    /// Maps `[gh*gw, d]` tokens to two flat pixel distributions of length
    /// `(gh*patch) * (gw*patch)`.
    pub fn decode(
        &self,
        f: &mut Fwd,
        tokens: TensorId,
        grid: (usize, usize),
    ) -> Result<(TensorId, TensorId)> {
        let (gh, gw) = grid;
        let shape = f.graph.shape(tokens).to_vec();
        if shape.len() != 2 || shape[0] != gh * gw || shape[1] != self.dim {
            return Err(Error::dim(format!(
                "decode: tokens {shape:?}, want [{}, {}]",
                gh * gw,
                self.dim
            )));
        }
        let t = f.graph.transpose(tokens)?;
        let grid_chw = f.graph.reshape(t, vec![self.dim, gh, gw])?;
        let pick = self.pick.forward(f, grid_chw)?;
        let place = self.place.forward(f, grid_chw)?;
        Ok((pick, place))
    }
}

/// Copies flat decoder outputs into a [`HeatmapPair`] of `[h, w]` grids.
pub fn heatmaps_from_graph(
    g: &Graph,
    pick: TensorId,
    place: TensorId,
    h: usize,
    w: usize,
) -> Result<HeatmapPair> {
    let to_map = |id: TensorId| -> Result<Tensor> {
        Tensor::new(vec![h, w], g.data(id).to_vec())
    };
    HeatmapPair::new(to_map(pick)?, to_map(place)?)
}

/// Action extracted from heatmaps plus degeneracy flags per map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedAction {
    pub action: ActionSample,
    pub degenerate_pick: bool,
    pub degenerate_place: bool,
}

fn scan_argmax(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in data.iter().enumerate() {
        if *v > data[best] {
            best = i;
        }
    }
    best
}

/// Greedy two-mode extraction: global argmax, suppress a disc of
/// `radius` around it, argmax of the remainder. A map whose remainder is
/// empty or constant has no meaningful second mode; it falls back to the two
/// highest distinct pixels in scan order and is flagged degenerate.
fn top_two_modes(map: &Tensor, radius: f64) -> (PixelCoord, PixelCoord, bool) {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let data = map.data();
    let first = scan_argmax(data);
    let m1 = PixelCoord::new(first / w, first % w);

    let mut best: Option<usize> = None;
    let mut remaining_constant = true;
    let mut first_remaining = f64::NAN;
    let r2 = radius * radius;
    for i in 0..data.len() {
        let p = PixelCoord::new(i / w, i % w);
        let dr = p.row as f64 - m1.row as f64;
        let dc = p.col as f64 - m1.col as f64;
        if dr * dr + dc * dc <= r2 {
            continue;
        }
        if first_remaining.is_nan() {
            first_remaining = data[i];
        } else if data[i] != first_remaining {
            remaining_constant = false;
        }
        match best {
            None => best = Some(i),
            Some(b) if data[i] > data[b] => best = Some(i),
            _ => {}
        }
    }

    match best {
        Some(i) if !remaining_constant => (m1, PixelCoord::new(i / w, i % w), false),
        _ => {
            // Two highest distinct pixels by (value desc, scan order).
            let mut second = if first == 0 { 1 } else { 0 };
            for i in 0..data.len() {
                if i != first && data[i] > data[second] {
                    second = i;
                }
            }
            let _ = h;
            (m1, PixelCoord::new(second / w, second % w), true)
        }
    }
}

/// Greedy decode of the bimanual action from a heatmap pair.
pub fn extract_action(maps: &HeatmapPair, nms_radius: f64) -> DecodedAction {
    let (p1, p2, dp) = top_two_modes(&maps.pick, nms_radius);
    let (q1, q2, dq) = top_two_modes(&maps.place, nms_radius);
    DecodedAction {
        action: ActionSample::from_pairs((p1, p2), (q1, q2)),
        degenerate_pick: dp,
        degenerate_place: dq,
    }
}

/// Draws one pixel per mode from the distribution instead of the greedy
/// argmax; reproducible given the RNG state.
pub fn sample_action(maps: &HeatmapPair, nms_radius: f64, rng: &mut impl Rng) -> DecodedAction {
    let draw = |map: &Tensor, rng: &mut dyn rand::RngCore| -> PixelCoord {
        let w = map.shape()[1];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, v) in map.data().iter().enumerate() {
            acc += v;
            if u <= acc {
                return PixelCoord::new(i / w, i % w);
            }
        }
        let last = map.numel() - 1;
        PixelCoord::new(last / w, last % w)
    };
    let suppress = |map: &Tensor, at: PixelCoord| -> Tensor {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut out = map.clone();
        let r2 = nms_radius * nms_radius;
        let mut mass = 0.0;
        for r in 0..h {
            for c in 0..w {
                let dr = r as f64 - at.row as f64;
                let dc = c as f64 - at.col as f64;
                if dr * dr + dc * dc <= r2 {
                    out.data_mut()[r * w + c] = 0.0;
                } else {
                    mass += out.data()[r * w + c];
                }
            }
        }
        if mass > 0.0 {
            for v in out.data_mut() {
                *v /= mass;
            }
        }
        out
    };
    let pair = |map: &Tensor, rng: &mut dyn rand::RngCore| -> (PixelCoord, PixelCoord) {
        let a = draw(map, rng);
        let rest = suppress(map, a);
        if rest.data().iter().all(|&v| v == 0.0) {
            let (m1, m2, _) = top_two_modes(map, nms_radius);
            let b = if a == m1 { m2 } else { m1 };
            return (a, b);
        }
        (a, draw(&rest, rng))
    };
    let picks = pair(&maps.pick, rng);
    let places = pair(&maps.place, rng);
    DecodedAction {
        action: ActionSample::from_pairs(picks, places),
        degenerate_pick: false,
        degenerate_place: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_map(h: usize, w: usize, centers: &[(usize, usize)], sigma: f64) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for r in 0..h {
            for c in 0..w {
                let mut v = 0.0;
                for &(cr, cc) in centers {
                    let d2 = (r as f64 - cr as f64).powi(2) + (c as f64 - cc as f64).powi(2);
                    v += (-d2 / (2.0 * sigma * sigma)).exp();
                }
                t.data_mut()[r * w + c] = v;
            }
        }
        let sum: f64 = t.data().iter().sum();
        for v in t.data_mut() {
            *v /= sum;
        }
        t
    }

    #[test]
    fn two_separated_gaussians_extracted_exactly() {
        let map = gaussian_map(32, 32, &[(8, 8), (8, 24)], 1.5);
        let maps = HeatmapPair::new(map.clone(), map).unwrap();
        let out = extract_action(&maps, 3.0);
        assert!(!out.degenerate_pick);
        assert_eq!(out.action.pick_left, PixelCoord::new(8, 8));
        assert_eq!(out.action.pick_right, PixelCoord::new(8, 24));
    }

    #[test]
    fn second_mode_outside_suppression_disc() {
        let map = gaussian_map(32, 32, &[(16, 16)], 2.0);
        let maps = HeatmapPair::new(map.clone(), map).unwrap();
        let out = extract_action(&maps, 3.0);
        let d = out.action.pick_left.dist(&out.action.pick_right);
        assert!(d > 3.0, "modes {:?} too close", out.action);
    }

    #[test]
    fn uniform_map_scan_order_and_degenerate_flag() {
        let n = 16 * 16;
        let map = Tensor::filled(&[16, 16], 1.0 / n as f64);
        let maps = HeatmapPair::new(map.clone(), map).unwrap();
        let out = extract_action(&maps, 3.0);
        assert!(out.degenerate_pick && out.degenerate_place);
        assert_eq!(out.action.pick_left, PixelCoord::new(0, 0));
        assert_eq!(out.action.pick_right, PixelCoord::new(0, 1));
    }

    #[test]
    fn horizontal_flip_swaps_arms() {
        let map = gaussian_map(32, 32, &[(5, 7), (20, 25)], 1.2);
        let flipped = Tensor::from_fn(&[32, 32], |i| {
            let (r, c) = (i / 32, i % 32);
            map.at2(r, 31 - c)
        });
        let maps = HeatmapPair::new(map.clone(), map.clone()).unwrap();
        let fmaps = HeatmapPair::new(flipped.clone(), flipped).unwrap();
        let a = extract_action(&maps, 3.0).action;
        let b = extract_action(&fmaps, 3.0).action;
        assert_eq!(b.pick_left.col, 31 - a.pick_right.col);
        assert_eq!(b.pick_left.row, a.pick_right.row);
        assert_eq!(b.pick_right.col, 31 - a.pick_left.col);
    }

    #[test]
    fn sampling_reproducible_with_seed() {
        use rand::SeedableRng;
        let map = gaussian_map(16, 16, &[(4, 4), (4, 12)], 1.5);
        let maps = HeatmapPair::new(map.clone(), map).unwrap();
        let a = sample_action(&maps, 3.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let b = sample_action(&maps, 3.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn heatmap_pair_validates_distribution() {
        let bad = Tensor::filled(&[4, 4], 1.0);
        assert!(HeatmapPair::new(bad.clone(), bad).is_err());
    }

    #[test]
    fn arm_convention_orders_columns() {
        let a = PixelCoord::new(3, 9);
        let b = PixelCoord::new(1, 2);
        let s = ActionSample::from_pairs((a, b), (b, a));
        assert_eq!(s.pick_left, b);
        assert_eq!(s.pick_right, a);
        // Column tie: smaller row goes left.
        let c = PixelCoord::new(5, 4);
        let d = PixelCoord::new(2, 4);
        let s = ActionSample::from_pairs((c, d), (c, d));
        assert_eq!(s.pick_left, d);
    }
}
