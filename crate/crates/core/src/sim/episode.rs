//! Episode generation: seeded demonstrations with continuous frames,
//! keyframes, instructions and ground-truth actions.
//!
//! Timeline per action: the keyframe (settled pre-action observation), then
//! `motion_frames` interpolated frames sweeping the moving region, then
//! `settle_frames` static renders of the post-action state. The next
//! action's keyframe is the last settle frame, so consecutive frames right
//! before a keyframe are redundant copies of it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::ActionSample;
use crate::encoders::Observation;
use crate::error::{Error, Result};
use crate::fusion::{ContextConfig, ContextMode};

use super::dataset::{Dataset, WorldConfig};
use super::{
    ground_truth_action, ground_truth_unfold_action, make_instruction, render,
    render_partial_fold, Axis, CanonicalTransform, FoldSpec, GarmentState, Rect, Side,
    TEMPLATE_WORDS,
};

pub const UNFOLD_INSTRUCTION: &str = "unfold the last fold";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// A few random named folds.
    Ordinary,
    /// Two center-folds in a seed-chosen order, then an unfold whose correct
    /// action is invisible in the current observation alone.
    Ambiguous,
}

/// One labeled action: the instruction, the ground-truth action, and the
/// keyframe it conditions on. `ambiguous` marks steps whose action is not a
/// function of the current observation and instruction alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub instruction: String,
    pub action: ActionSample,
    pub keyframe: usize,
    pub ambiguous: bool,
}

/// A full demonstration: continuous frames plus per-step labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub scenario: Scenario,
    pub canonical: CanonicalTransform,
    pub frames: Vec<Observation>,
    pub keyframes: Vec<usize>,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Candidate named folds on the current support: each edge folded to the
/// center (quarter line) or the opposite side (midline).
fn fold_candidates(state: &GarmentState) -> Vec<FoldSpec> {
    let s = state.support();
    let mut out = Vec::new();
    for axis in [Axis::Vertical, Axis::Horizontal] {
        let (lo, extent) = match axis {
            Axis::Vertical => (s.c0, s.width()),
            Axis::Horizontal => (s.r0, s.height()),
        };
        // Edge to opposite side: fold at the midline.
        if extent % 2 == 0 && extent / 2 >= 4 {
            for moving in [Side::Low, Side::High] {
                out.push(FoldSpec { axis, boundary: lo + extent / 2, moving });
            }
        }
        // Edge to center: fold at the quarter line.
        if extent % 4 == 0 && extent / 4 >= 2 && 3 * extent / 4 >= 4 {
            out.push(FoldSpec { axis, boundary: lo + extent / 4, moving: Side::Low });
            out.push(FoldSpec { axis, boundary: lo + 3 * extent / 4, moving: Side::High });
        }
    }
    out
}

struct EpisodeBuilder<'c> {
    cfg: &'c WorldConfig,
    frames: Vec<Observation>,
    keyframes: Vec<usize>,
    steps: Vec<Step>,
}

impl<'c> EpisodeBuilder<'c> {
    fn new(cfg: &'c WorldConfig, initial: &GarmentState) -> Self {
        EpisodeBuilder {
            cfg,
            frames: vec![render(initial, cfg)],
            keyframes: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Records a step at the current frame, then appends its motion and
    /// settle frames. `sweep(progress)` renders the action mid-flight.
    fn push_step(
        &mut self,
        instruction: String,
        action: ActionSample,
        ambiguous: bool,
        after: &GarmentState,
        sweep: impl Fn(f64) -> Observation,
    ) {
        let keyframe = self.frames.len() - 1;
        self.keyframes.push(keyframe);
        self.steps.push(Step {
            instruction,
            action,
            keyframe,
            ambiguous,
        });
        // The sweep ends exactly at the arrived state, so every frame after
        // the last in-flight one (including the settle frames and the next
        // keyframe) renders identically.
        let f = self.cfg.motion_frames;
        for k in 1..=f {
            self.frames.push(sweep(k as f64 / f as f64));
        }
        let settled = render(after, self.cfg);
        for _ in 0..self.cfg.settle_frames {
            self.frames.push(settled.clone());
        }
    }
}

fn sample_base(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Rect> {
    let img = cfg.image_size;
    let dims: Vec<usize> = [12usize, 16, 20]
        .into_iter()
        .filter(|d| d + 4 <= img)
        .collect();
    if dims.is_empty() {
        return Err(Error::config(format!(
            "image size {img} too small for any base rectangle"
        )));
    }
    let h = dims[rng.random_range(0..dims.len())];
    let w = dims[rng.random_range(0..dims.len())];
    let r0 = rng.random_range(1..=img - h - 1);
    let c0 = rng.random_range(1..=img - w - 1);
    Ok(Rect {
        r0,
        c0,
        r1: r0 + h - 1,
        c1: c0 + w - 1,
    })
}

/// Generates one episode; content is a pure function of `(cfg, scenario,
/// seed)`.
pub fn generate_episode(cfg: &WorldConfig, scenario: Scenario, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canonical = if rng.random::<f64>() < cfg.canonical_rot180_prob {
        CanonicalTransform::Rot180
    } else {
        CanonicalTransform::Identity
    };
    let base = sample_base(cfg, &mut rng)?;
    let mut state = GarmentState::new(cfg.image_size, cfg.image_size, base)?;
    let mut builder = EpisodeBuilder::new(cfg, &state);

    match scenario {
        Scenario::Ordinary => {
            let want = rng.random_range(cfg.min_folds..=cfg.max_folds);
            for _ in 0..want {
                let candidates = fold_candidates(&state);
                if candidates.is_empty() {
                    break;
                }
                let fold = candidates[rng.random_range(0..candidates.len())];
                let instruction = make_instruction(&state, &fold, canonical);
                let action = ground_truth_action(&state, &fold)?;
                let after = state.apply_fold(fold)?;
                let before = state.clone();
                builder.push_step(instruction, action, false, &after, |p| {
                    render_partial_fold(&before, &fold, p, cfg)
                });
                state = after;
            }
        }
        Scenario::Ambiguous => {
            // Quarter-line folds pulled one cell outward so the two unfold
            // hypotheses land 5 px apart; the post-both-folds state is
            // identical for either order.
            let s = state.support();
            let w = s.width();
            if w % 4 != 0 || w < 12 {
                return Err(Error::config(format!(
                    "ambiguous scenario needs width divisible by 4 and >= 12, got {w}"
                )));
            }
            let left = FoldSpec {
                axis: Axis::Vertical,
                boundary: s.c0 + w / 4 - 1,
                moving: Side::Low,
            };
            let right = FoldSpec {
                axis: Axis::Vertical,
                boundary: s.c0 + 3 * w / 4 + 1,
                moving: Side::High,
            };
            let order = if rng.random::<bool>() { [left, right] } else { [right, left] };
            for fold in order {
                let instruction = make_instruction(&state, &fold, canonical);
                let action = ground_truth_action(&state, &fold)?;
                let after = state.apply_fold(fold)?;
                let before = state.clone();
                builder.push_step(instruction, action, false, &after, |p| {
                    render_partial_fold(&before, &fold, p, cfg)
                });
                state = after;
            }
            // The disambiguation step: identical observation and instruction
            // across the two orders, different correct action.
            let action = ground_truth_unfold_action(&state)?;
            let last = *state.last_fold().expect("two folds applied");
            let after = state.apply_unfold()?;
            let before_last = after.clone();
            builder.push_step(
                UNFOLD_INSTRUCTION.to_string(),
                action,
                true,
                &after,
                |p| render_partial_fold(&before_last, &last, 1.0 - p, cfg),
            );
            state = after;
        }
    }

    let episode = Episode {
        seed,
        scenario,
        canonical,
        frames: builder.frames,
        keyframes: builder.keyframes,
        steps: builder.steps,
    };
    debug_assert!(episode
        .keyframes
        .windows(2)
        .all(|w| w[0] < w[1]));
    debug_assert!(episode.steps.iter().all(|s| {
        let obs = &episode.frames[s.keyframe];
        obs.mask().at2(s.action.pick_left.row, s.action.pick_left.col) == 1.0
            && obs.mask().at2(s.action.pick_right.row, s.action.pick_right.col) == 1.0
    }));
    let _ = state;
    Ok(episode)
}

/// Context observations for a step under the given mode, most recent first,
/// padded with the earliest available observation when history is short.
pub fn context_frames<'e>(
    ep: &'e Episode,
    step: usize,
    cfg: &ContextConfig,
) -> Result<Vec<&'e Observation>> {
    if step >= ep.steps.len() {
        return Err(Error::contract(format!(
            "step {step} out of range ({} steps)",
            ep.steps.len()
        )));
    }
    cfg.validate()?;
    let earliest = &ep.frames[0];
    let mut out = Vec::with_capacity(cfg.history);
    match cfg.mode {
        ContextMode::None => {}
        ContextMode::Keyframes => {
            for j in 1..=cfg.history {
                let obs = step
                    .checked_sub(j)
                    .map(|prev| &ep.frames[ep.keyframes[prev]])
                    .unwrap_or(earliest);
                out.push(obs);
            }
        }
        ContextMode::Consecutive => {
            let k = ep.keyframes[step];
            for j in 1..=cfg.history {
                let obs = k.checked_sub(j).map(|i| &ep.frames[i]).unwrap_or(earliest);
                out.push(obs);
            }
        }
    }
    Ok(out)
}

/// Generates `n` episodes with the configured ambiguous fraction; scenario
/// assignment and per-episode seeds derive from the master seed.
pub fn generate_dataset(cfg: &WorldConfig, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::contract("generate_dataset: zero episodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ambiguous = (n as f64 * cfg.ambiguous_fraction).round() as usize;
    let mut scenarios: Vec<Scenario> = (0..n)
        .map(|i| if i < n_ambiguous { Scenario::Ambiguous } else { Scenario::Ordinary })
        .collect();
    scenarios.shuffle(&mut rng);
    let episode_seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();

    let episodes = scenarios
        .iter()
        .zip(&episode_seeds)
        .map(|(&scenario, &eseed)| generate_episode(cfg, scenario, eseed))
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset {
        config: cfg.clone(),
        vocabulary: std::iter::once(crate::encoders::UNK_TOKEN.to_string())
            .chain(TEMPLATE_WORDS.iter().map(|w| w.to_string()))
            .collect(),
        episodes,
    };
    dataset.validate_vocabulary()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_episode(&cfg(), Scenario::Ordinary, 42).unwrap();
        let b = generate_episode(&cfg(), Scenario::Ordinary, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_episode(&cfg(), Scenario::Ordinary, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn keyframes_precede_first_motion_frame() {
        let ep = generate_episode(&cfg(), Scenario::Ordinary, 7).unwrap();
        let per_action = cfg().motion_frames + cfg().settle_frames;
        for (i, step) in ep.steps.iter().enumerate() {
            assert_eq!(step.keyframe, i * per_action);
            assert_eq!(ep.keyframes[i], step.keyframe);
        }
        assert_eq!(ep.frames.len(), 1 + ep.steps.len() * per_action);
    }

    #[test]
    fn ordinary_has_two_to_four_folds() {
        for seed in 0..20 {
            let ep = generate_episode(&cfg(), Scenario::Ordinary, seed).unwrap();
            assert!(
                (2..=4).contains(&ep.n_steps()),
                "seed {seed}: {} steps",
                ep.n_steps()
            );
            assert!(ep.steps.iter().all(|s| !s.ambiguous));
        }
    }

    #[test]
    fn ambiguous_pair_same_frames_different_actions() {
        // Two seeds that chose opposite orders but the same geometry: build
        // both orders directly instead of hunting seeds.
        let c = cfg();
        let mut by_order = Vec::new();
        for seed in 0..200u64 {
            let ep = generate_episode(&c, Scenario::Ambiguous, seed).unwrap();
            assert_eq!(ep.n_steps(), 3);
            assert!(ep.steps[2].ambiguous);
            assert_eq!(ep.steps[2].instruction, UNFOLD_INSTRUCTION);
            by_order.push(ep);
        }
        // Find two episodes with identical pre-unfold keyframes but
        // different unfold actions (opposite fold orders, same rectangle).
        let mut found = false;
        for i in 0..by_order.len() {
            for j in i + 1..by_order.len() {
                let (a, b) = (&by_order[i], &by_order[j]);
                let ka = &a.frames[a.steps[2].keyframe];
                let kb = &b.frames[b.steps[2].keyframe];
                if ka.bit_eq(kb) && a.steps[2].action != b.steps[2].action {
                    found = true;
                }
            }
        }
        assert!(found, "no ambiguous pair observed across 200 seeds");
    }

    #[test]
    fn ambiguous_unfold_hypotheses_well_separated() {
        // For a fixed rectangle, the two possible unfold actions must differ
        // by more than the evaluation threshold (2 px) at every point.
        let c = cfg();
        for seed in 0..50u64 {
            let ep = generate_episode(&c, Scenario::Ambiguous, seed).unwrap();
            let other = {
                // Rebuild the opposite order by finding an episode with the
                // same first keyframe? Cheaper: recompute both orders from
                // the base rectangle via the generator's construction.
                let s0 = &ep.frames[0];
                let mut alt = None;
                for alt_seed in 0..300u64 {
                    let cand = generate_episode(&c, Scenario::Ambiguous, alt_seed).unwrap();
                    if cand.frames[0].bit_eq(s0)
                        && cand.steps[2].action != ep.steps[2].action
                    {
                        alt = Some(cand);
                        break;
                    }
                }
                alt
            };
            if let Some(alt) = other {
                let a = ep.steps[2].action;
                let b = alt.steps[2].action;
                assert!(a.pick_left.dist(&b.pick_left) > 2.0);
                assert!(a.place_left.dist(&b.place_left) > 2.0);
                return; // one verified pair is enough
            }
        }
        panic!("no opposite-order twin found");
    }

    #[test]
    fn context_padding_and_indexing() {
        let c = cfg();
        let ep = generate_episode(&c, Scenario::Ambiguous, 5).unwrap();
        let keyframes_cfg = ContextConfig::keyframes(3).unwrap();

        // Step 0: three copies of frame 0.
        let ctx = context_frames(&ep, 0, &keyframes_cfg).unwrap();
        assert_eq!(ctx.len(), 3);
        for obs in &ctx {
            assert!(obs.bit_eq(&ep.frames[0]));
        }

        // Step 2: keyframes of steps 1 and 0, then padding.
        let ctx = context_frames(&ep, 2, &keyframes_cfg).unwrap();
        assert!(ctx[0].bit_eq(&ep.frames[ep.keyframes[1]]));
        assert!(ctx[1].bit_eq(&ep.frames[ep.keyframes[0]]));
        assert!(ctx[2].bit_eq(&ep.frames[0]));

        // Consecutive mode: frames k-1, k-2, k-3.
        let consec = ContextConfig::new(ContextMode::Consecutive, 3).unwrap();
        let k = ep.keyframes[2];
        let ctx = context_frames(&ep, 2, &consec).unwrap();
        for (j, obs) in ctx.iter().enumerate() {
            assert!(obs.bit_eq(&ep.frames[k - 1 - j]));
        }

        // None mode: empty.
        let none = ContextConfig::none();
        assert!(context_frames(&ep, 1, &none).unwrap().is_empty());
    }

    #[test]
    fn consecutive_context_is_settled_and_order_invariant() {
        // Settle frames make the consecutive context equal to the keyframe
        // itself, which is identical across fold orders; keyframe context
        // differs (it shows the one-folded state).
        let c = cfg();
        let ep = generate_episode(&c, Scenario::Ambiguous, 5).unwrap();
        let k = ep.keyframes[2];
        for j in 1..=3 {
            assert!(ep.frames[k - j].bit_eq(&ep.frames[k]));
        }
        let kf_cfg = ContextConfig::keyframes(3).unwrap();
        let ctx = context_frames(&ep, 2, &kf_cfg).unwrap();
        assert!(!ctx[0].bit_eq(&ep.frames[k]));
    }

    #[test]
    fn dataset_mix_and_determinism() {
        let c = cfg();
        let ds = generate_dataset(&c, 10, 99).unwrap();
        let n_amb = ds
            .episodes
            .iter()
            .filter(|e| e.scenario == Scenario::Ambiguous)
            .count();
        assert_eq!(n_amb, 5);
        let ds2 = generate_dataset(&c, 10, 99).unwrap();
        assert_eq!(ds.episodes, ds2.episodes);
    }

    #[test]
    fn picks_always_on_keyframe_mask() {
        let c = cfg();
        for seed in 0..10 {
            for scenario in [Scenario::Ordinary, Scenario::Ambiguous] {
                let ep = generate_episode(&c, scenario, seed).unwrap();
                for step in &ep.steps {
                    let obs = &ep.frames[step.keyframe];
                    for p in [step.action.pick_left, step.action.pick_right] {
                        assert_eq!(obs.mask().at2(p.row, p.col), 1.0);
                    }
                }
            }
        }
    }
}
