//! FoldWorld: a deterministic synthetic cloth world.
//!
//! The cloth is an axis-aligned layered rectangle. A fold reflects the part
//! of the cloth beyond a fold line onto the remainder; layer counts add, and
//! rendered intensity encodes the layer count, so folded regions read
//! brighter. States are replayable: the layer grid is a pure function of the
//! base rectangle and the fold list.

mod dataset;
mod episode;

pub use dataset::{export_dataset, load_dataset, Dataset, WorldConfig, MANIFEST_NAME};
pub use episode::{
    context_frames, generate_dataset, generate_episode, Episode, Scenario, Step,
    UNFOLD_INSTRUCTION,
};

use serde::{Deserialize, Serialize};

use crate::decoder::{ActionSample, PixelCoord};
use crate::encoders::Observation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Words used by the instruction templates; the dataset vocabulary is frozen
/// from this list at generation time.
pub const TEMPLATE_WORDS: [&str; 13] = [
    "fold", "the", "left", "right", "top", "bottom", "edge", "to", "center", "opposite", "side",
    "unfold", "last",
];

/// Orientation of the fold line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Fold line is horizontal; the top or bottom part moves.
    Horizontal,
    /// Fold line is vertical; the left or right part moves.
    Vertical,
}

/// Which side of the fold line moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Smaller coordinates move (left of a vertical line, top of a
    /// horizontal one).
    Low,
    /// Larger coordinates move.
    High,
}

/// A fold about the line between coordinate `boundary - 1` and `boundary`;
/// cell `c` on the moving side reflects to `2*boundary - 1 - c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub axis: Axis,
    pub boundary: usize,
    pub moving: Side,
}

impl FoldSpec {
    /// Fold-line coordinate in continuous pixel units (cell centers at
    /// integers), i.e. `boundary - 0.5`.
    pub fn line(&self) -> f64 {
        self.boundary as f64 - 0.5
    }

    pub fn reflect(&self, coord: usize) -> usize {
        (2 * self.boundary - 1).wrapping_sub(coord)
    }
}

/// Inclusive rectangle of cloth cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }
}

/// Cloth configuration: a base rectangle plus the folds executed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentState {
    pub img_h: usize,
    pub img_w: usize,
    pub base: Rect,
    pub folds: Vec<FoldSpec>,
    support: Rect,
    layers: Vec<u32>,
}

fn layers_of(img_h: usize, img_w: usize, base: Rect, folds: &[FoldSpec]) -> (Vec<u32>, Rect) {
    let mut layers = vec![0u32; img_h * img_w];
    for r in base.r0..=base.r1 {
        for c in base.c0..=base.c1 {
            layers[r * img_w + c] = 1;
        }
    }
    let mut support = base;
    for fold in folds {
        apply_fold_to_layers(&mut layers, img_w, &mut support, fold);
    }
    (layers, support)
}

fn apply_fold_to_layers(layers: &mut [u32], img_w: usize, support: &mut Rect, fold: &FoldSpec) {
    let img_h = layers.len() / img_w;
    match fold.axis {
        Axis::Vertical => {
            let (lo, hi) = match fold.moving {
                Side::Low => (support.c0, fold.boundary - 1),
                Side::High => (fold.boundary, support.c1),
            };
            for r in 0..img_h {
                for c in lo..=hi {
                    let v = layers[r * img_w + c];
                    if v > 0 {
                        layers[r * img_w + fold.reflect(c)] += v;
                        layers[r * img_w + c] = 0;
                    }
                }
            }
            match fold.moving {
                Side::Low => support.c0 = fold.boundary,
                Side::High => support.c1 = fold.boundary - 1,
            }
        }
        Axis::Horizontal => {
            let (lo, hi) = match fold.moving {
                Side::Low => (support.r0, fold.boundary - 1),
                Side::High => (fold.boundary, support.r1),
            };
            for r in lo..=hi {
                for c in 0..img_w {
                    let v = layers[r * img_w + c];
                    if v > 0 {
                        layers[fold.reflect(r) * img_w + c] += v;
                        layers[r * img_w + c] = 0;
                    }
                }
            }
            match fold.moving {
                Side::Low => support.r0 = fold.boundary,
                Side::High => support.r1 = fold.boundary - 1,
            }
        }
    }
}

impl GarmentState {
    pub fn new(img_h: usize, img_w: usize, base: Rect) -> Result<Self> {
        if base.r1 < base.r0 || base.c1 < base.c0 || base.r1 >= img_h || base.c1 >= img_w {
            return Err(Error::config(format!(
                "base rectangle {base:?} does not fit a {img_h}x{img_w} image"
            )));
        }
        let (layers, support) = layers_of(img_h, img_w, base, &[]);
        Ok(GarmentState {
            img_h,
            img_w,
            base,
            folds: Vec::new(),
            support,
            layers,
        })
    }

    pub fn support(&self) -> Rect {
        self.support
    }

    pub fn layers(&self) -> &[u32] {
        &self.layers
    }

    /// Checks a fold is applicable: line strictly inside the support and the
    /// moving part lands inside the remainder.
    pub fn validate_fold(&self, fold: &FoldSpec) -> Result<()> {
        let s = self.support;
        let (lo, hi) = match fold.axis {
            Axis::Vertical => (s.c0, s.c1),
            Axis::Horizontal => (s.r0, s.r1),
        };
        if fold.boundary <= lo || fold.boundary > hi {
            return Err(Error::contract(format!(
                "fold line {} outside cloth extent {lo}..={hi}",
                fold.line()
            )));
        }
        let moving = match fold.moving {
            Side::Low => fold.boundary - lo,
            Side::High => hi + 1 - fold.boundary,
        };
        let remaining = (hi - lo + 1) - moving;
        if moving > remaining {
            return Err(Error::contract(format!(
                "moving width {moving} exceeds remaining width {remaining}"
            )));
        }
        Ok(())
    }

    /// Returns the state with one more fold applied.
    pub fn apply_fold(&self, fold: FoldSpec) -> Result<GarmentState> {
        self.validate_fold(&fold)?;
        let mut next = self.clone();
        apply_fold_to_layers(&mut next.layers, self.img_w, &mut next.support, &fold);
        next.folds.push(fold);
        Ok(next)
    }

    /// Reverses the most recent fold.
    pub fn apply_unfold(&self) -> Result<GarmentState> {
        if self.folds.is_empty() {
            return Err(Error::contract("unfold on an unfolded state"));
        }
        let folds = &self.folds[..self.folds.len() - 1];
        let (layers, support) = layers_of(self.img_h, self.img_w, self.base, folds);
        Ok(GarmentState {
            img_h: self.img_h,
            img_w: self.img_w,
            base: self.base,
            folds: folds.to_vec(),
            support,
            layers,
        })
    }

    pub fn last_fold(&self) -> Option<&FoldSpec> {
        self.folds.last()
    }
}

fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub(crate) fn intensity_for_layers(layers: u32, cfg: &WorldConfig) -> f64 {
    if layers == 0 {
        0.0
    } else {
        quantize_unit(cfg.base_value + cfg.layer_gain * (layers - 1) as f64)
    }
}

fn render_layers(layers: &[u32], img_h: usize, img_w: usize, cfg: &WorldConfig) -> Observation {
    let image = Tensor::new(
        vec![img_h, img_w],
        layers.iter().map(|&l| intensity_for_layers(l, cfg)).collect(),
    )
    .expect("layer grid shape");
    let mask = Tensor::new(
        vec![img_h, img_w],
        layers.iter().map(|&l| if l >= 1 { 1.0 } else { 0.0 }).collect(),
    )
    .expect("layer grid shape");
    Observation::new(image, mask).expect("consistent extents")
}

/// Renders a state: intensity encodes the layer count (quantized to 8 bits
/// so datasets round-trip exactly), mask marks cells with at least 1 layer.
pub fn render(state: &GarmentState, cfg: &WorldConfig) -> Observation {
    render_layers(&state.layers, state.img_h, state.img_w, cfg)
}

/// Renders a fold mid-flight: each moving cell sweeps linearly from its
/// origin to its reflection; `progress` in (0, 1).
pub fn render_partial_fold(
    state_before: &GarmentState,
    fold: &FoldSpec,
    progress: f64,
    cfg: &WorldConfig,
) -> Observation {
    let (h, w) = (state_before.img_h, state_before.img_w);
    let s = state_before.support();
    let mut layers = state_before.layers.to_vec();
    let moving_range = |lo: usize, hi: usize| match fold.moving {
        Side::Low => (lo, fold.boundary - 1),
        Side::High => (fold.boundary, hi),
    };
    match fold.axis {
        Axis::Vertical => {
            let (lo, hi) = moving_range(s.c0, s.c1);
            for r in 0..h {
                for c in lo..=hi {
                    let v = layers[r * w + c];
                    if v > 0 {
                        layers[r * w + c] = 0;
                        let target = fold.reflect(c) as f64;
                        let x = (c as f64 + progress * (target - c as f64)).round() as usize;
                        layers[r * w + x.min(w - 1)] += v;
                    }
                }
            }
        }
        Axis::Horizontal => {
            let (lo, hi) = moving_range(s.r0, s.r1);
            for r in lo..=hi {
                for c in 0..w {
                    let v = layers[r * w + c];
                    if v > 0 {
                        layers[r * w + c] = 0;
                        let target = fold.reflect(r) as f64;
                        let y = (r as f64 + progress * (target - r as f64)).round() as usize;
                        layers[y.min(h - 1) * w + c] += v;
                    }
                }
            }
        }
    }
    render_layers(&layers, h, w, cfg)
}

/// Mask of pixels whose rendered intensity indicates 2 or more layers.
pub fn folded_region(obs: &Observation, cfg: &WorldConfig) -> Tensor {
    let two = intensity_for_layers(2, cfg);
    let one = intensity_for_layers(1, cfg);
    let threshold = 0.5 * (one + two);
    Tensor::new(
        obs.image().shape().to_vec(),
        obs.image()
            .data()
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("same shape")
}

/// Ground-truth bimanual action for a fold: pick the two corners of the
/// moving edge, place them at their reflections across the fold line.
pub fn ground_truth_action(state: &GarmentState, fold: &FoldSpec) -> Result<ActionSample> {
    state.validate_fold(fold)?;
    let s = state.support();
    let (picks, places) = match fold.axis {
        Axis::Vertical => {
            let edge = match fold.moving {
                Side::Low => s.c0,
                Side::High => s.c1,
            };
            let landing = fold.reflect(edge);
            (
                (PixelCoord::new(s.r0, edge), PixelCoord::new(s.r1, edge)),
                (PixelCoord::new(s.r0, landing), PixelCoord::new(s.r1, landing)),
            )
        }
        Axis::Horizontal => {
            let edge = match fold.moving {
                Side::Low => s.r0,
                Side::High => s.r1,
            };
            let landing = fold.reflect(edge);
            (
                (PixelCoord::new(edge, s.c0), PixelCoord::new(edge, s.c1)),
                (PixelCoord::new(landing, s.c0), PixelCoord::new(landing, s.c1)),
            )
        }
    };
    Ok(ActionSample::from_pairs(picks, places))
}

/// Ground-truth action reversing the most recent fold: picks at the folded
/// edge's landing points, places back at its original corners.
pub fn ground_truth_unfold_action(state: &GarmentState) -> Result<ActionSample> {
    let fold = *state
        .last_fold()
        .ok_or_else(|| Error::contract("unfold action on an unfolded state"))?;
    let before = state.apply_unfold()?;
    let fold_action = ground_truth_action(&before, &fold)?;
    Ok(ActionSample::from_pairs(
        (fold_action.place_left, fold_action.place_right),
        (fold_action.pick_left, fold_action.pick_right),
    ))
}

/// Naming frame for instructions; 180-degree rotation flips both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalTransform {
    Identity,
    Rot180,
}

fn side_name(axis: Axis, moving: Side, canonical: CanonicalTransform) -> &'static str {
    let flipped = canonical == CanonicalTransform::Rot180;
    match (axis, moving, flipped) {
        (Axis::Vertical, Side::Low, false) | (Axis::Vertical, Side::High, true) => "left",
        (Axis::Vertical, Side::High, false) | (Axis::Vertical, Side::Low, true) => "right",
        (Axis::Horizontal, Side::Low, false) | (Axis::Horizontal, Side::High, true) => "top",
        (Axis::Horizontal, Side::High, false) | (Axis::Horizontal, Side::Low, true) => "bottom",
    }
}

/// Fills the fold template, naming the moving edge in the canonical frame.
/// The destination is "the opposite side" when the edge lands on the far
/// edge of the cloth, "the center" otherwise.
pub fn make_instruction(
    state: &GarmentState,
    fold: &FoldSpec,
    canonical: CanonicalTransform,
) -> String {
    let s = state.support();
    let (edge, far) = match (fold.axis, fold.moving) {
        (Axis::Vertical, Side::Low) => (s.c0, s.c1),
        (Axis::Vertical, Side::High) => (s.c1, s.c0),
        (Axis::Horizontal, Side::Low) => (s.r0, s.r1),
        (Axis::Horizontal, Side::High) => (s.r1, s.r0),
    };
    let landing = fold.reflect(edge);
    let destination = if landing == far { "opposite side" } else { "center" };
    format!(
        "fold the {} edge to the {}",
        side_name(fold.axis, fold.moving, canonical),
        destination
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    fn flat_state() -> GarmentState {
        GarmentState::new(
            32,
            32,
            Rect {
                r0: 8,
                c0: 8,
                r1: 23,
                c1: 23,
            },
        )
        .unwrap()
    }

    #[test]
    fn unfolded_render_uniform() {
        let st = flat_state();
        let obs = render(&st, &cfg());
        let inside = obs.image().at2(10, 10);
        assert_eq!(inside, intensity_for_layers(1, &cfg()));
        assert_eq!(obs.image().at2(0, 0), 0.0);
        assert_eq!(obs.mask().at2(10, 10), 1.0);
        assert_eq!(obs.mask().at2(0, 0), 0.0);
        assert!(obs.mask_nonempty());
    }

    #[test]
    fn midline_fold_halves_width_and_doubles_layers() {
        let st = flat_state(); // 16 wide, cols 8..=23
        let fold = FoldSpec {
            axis: Axis::Vertical,
            boundary: 16,
            moving: Side::Low,
        };
        let folded = st.apply_fold(fold).unwrap();
        assert_eq!(folded.support(), Rect { r0: 8, c0: 16, r1: 23, c1: 23 });
        assert_eq!(folded.support().width(), 8);
        for r in 8..=23 {
            for c in 16..=23 {
                assert_eq!(folded.layers()[r * 32 + c], 2);
            }
        }
        let obs = render(&folded, &cfg());
        assert_eq!(obs.image().at2(10, 18), intensity_for_layers(2, &cfg()));
        assert_eq!(obs.mask().at2(10, 10), 0.0); // left half now empty
    }

    #[test]
    fn fold_then_unfold_is_identity() {
        let st = flat_state();
        let fold = FoldSpec {
            axis: Axis::Horizontal,
            boundary: 12,
            moving: Side::Low,
        };
        let back = st.apply_fold(fold).unwrap().apply_unfold().unwrap();
        assert_eq!(back, st);
        let a = render(&st, &cfg());
        let b = render(&back, &cfg());
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn unfold_unfolded_rejected() {
        assert!(matches!(
            flat_state().apply_unfold(),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fold_line_outside_bbox_rejected() {
        let st = flat_state();
        for boundary in [8, 24, 0] {
            let fold = FoldSpec {
                axis: Axis::Vertical,
                boundary,
                moving: Side::Low,
            };
            assert!(st.apply_fold(fold).is_err(), "boundary {boundary}");
        }
    }

    #[test]
    fn center_folds_commute_in_image_not_in_fold_list() {
        // Left-to-center then right-to-center vs the reverse: identical
        // renders, different fold lists. This is the ambiguity generator.
        let st = flat_state(); // cols 8..=23, width 16
        let left = FoldSpec { axis: Axis::Vertical, boundary: 11, moving: Side::Low };
        let right = FoldSpec { axis: Axis::Vertical, boundary: 21, moving: Side::High };
        let lr = st.apply_fold(left).unwrap().apply_fold(right).unwrap();
        let rl = st.apply_fold(right).unwrap().apply_fold(left).unwrap();
        assert_eq!(lr.layers(), rl.layers());
        assert!(render(&lr, &cfg()).bit_eq(&render(&rl, &cfg())));
        assert_ne!(lr.folds, rl.folds);
    }

    #[test]
    fn ground_truth_reflection_formula() {
        let st = flat_state();
        let fold = FoldSpec { axis: Axis::Vertical, boundary: 12, moving: Side::Low };
        let a = ground_truth_action(&st, &fold).unwrap();
        // picks at the left edge corners
        assert_eq!(a.pick_left, PixelCoord::new(8, 8));
        assert_eq!(a.pick_right, PixelCoord::new(23, 8));
        // place column = 2*line - pick column with line = boundary - 0.5
        let line = fold.line();
        let expect = (2.0 * line - 8.0) as usize;
        assert_eq!(a.place_left.col, expect);
        assert_eq!(a.place_left.col, fold.reflect(8));
        // picks on mask
        let obs = render(&st, &cfg());
        for p in [a.pick_left, a.pick_right] {
            assert_eq!(obs.mask().at2(p.row, p.col), 1.0);
        }
    }

    #[test]
    fn unfold_action_reverses_fold_action() {
        let st = flat_state();
        let fold = FoldSpec { axis: Axis::Vertical, boundary: 12, moving: Side::Low };
        let fold_action = ground_truth_action(&st, &fold).unwrap();
        let folded = st.apply_fold(fold).unwrap();
        let unfold_action = ground_truth_unfold_action(&folded).unwrap();
        assert_eq!(unfold_action.pick_left, fold_action.place_left);
        assert_eq!(unfold_action.place_left, fold_action.pick_left);
    }

    #[test]
    fn instruction_templates() {
        let st = flat_state(); // width 16: quarter boundary 12, half boundary 16
        let quarter = FoldSpec { axis: Axis::Vertical, boundary: 12, moving: Side::Low };
        assert_eq!(
            make_instruction(&st, &quarter, CanonicalTransform::Identity),
            "fold the left edge to the center"
        );
        let half = FoldSpec { axis: Axis::Vertical, boundary: 16, moving: Side::Low };
        assert_eq!(
            make_instruction(&st, &half, CanonicalTransform::Identity),
            "fold the left edge to the opposite side"
        );
        // Same physical fold under a rotated canonical frame names the
        // opposite side.
        assert_eq!(
            make_instruction(&st, &quarter, CanonicalTransform::Rot180),
            "fold the right edge to the center"
        );
        let top = FoldSpec { axis: Axis::Horizontal, boundary: 12, moving: Side::Low };
        assert_eq!(
            make_instruction(&st, &top, CanonicalTransform::Rot180),
            "fold the bottom edge to the center"
        );
    }

    #[test]
    fn folded_region_tracks_two_layers() {
        let st = flat_state();
        let folded = st
            .apply_fold(FoldSpec { axis: Axis::Vertical, boundary: 16, moving: Side::Low })
            .unwrap();
        let obs = render(&folded, &cfg());
        let region = folded_region(&obs, &cfg());
        for r in 8..=23 {
            for c in 16..=23 {
                assert_eq!(region.at2(r, c), 1.0);
            }
        }
        let flat_obs = render(&st, &cfg());
        assert!(folded_region(&flat_obs, &cfg()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partial_fold_progress_moves_edge() {
        let st = flat_state();
        let fold = FoldSpec { axis: Axis::Vertical, boundary: 16, moving: Side::Low };
        let quarter = render_partial_fold(&st, &fold, 0.25, &cfg());
        let full = render_partial_fold(&st, &fold, 1.0, &cfg());
        let done = render(&st.apply_fold(fold).unwrap(), &cfg());
        // Full sweep reproduces the folded state exactly.
        assert!(full.bit_eq(&done));
        // Mid-sweep differs from both endpoints.
        assert!(!quarter.bit_eq(&render(&st, &cfg())));
        assert!(!quarter.bit_eq(&done));
    }
}
