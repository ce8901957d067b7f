//! Low-rank adaptation of frozen linear layers.
//!
//! A [`LoraLinear`] keeps its base weight `W` frozen and learns a rank-`r`
//! update `(alpha/r) * B * A`. `B` starts at zero, so a freshly built layer
//! computes exactly `W x`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{Fwd, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorId};

/// Frozen linear layer with an optional trainable low-rank adapter.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    /// Base weight `[out, in]`, never trainable.
    pub w: ParamId,
    /// Base bias `[out]`, never trainable.
    pub bias: Option<ParamId>,
    /// Down-projection `[rank, in]`.
    pub a: Option<ParamId>,
    /// Up-projection `[out, rank]`, zero-initialized.
    pub b: Option<ParamId>,
    pub rank: usize,
    pub alpha: f64,
    pub in_dim: usize,
    pub out_dim: usize,
    merged: bool,
}

impl LoraLinear {
    /// Registers a frozen base weight plus adapters of rank `rank`
    /// (`rank == 0` leaves the layer entirely frozen).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank > in_dim.min(out_dim) {
            return Err(Error::config(format!(
                "lora rank {rank} exceeds min({out_dim}, {in_dim})"
            )));
        }
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let w = store.add(
            format!("{prefix}.w"),
            group,
            Tensor::from_fn(&[out_dim, in_dim], |_| dist.sample(rng)),
            false,
        )?;
        let bias = Some(store.add(
            format!("{prefix}.bias"),
            group,
            Tensor::zeros(&[out_dim]),
            false,
        )?);
        let (a, b) = if rank > 0 {
            let a_dist = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
            let a = store.add(
                format!("{prefix}.lora_a"),
                group,
                Tensor::from_fn(&[rank, in_dim], |_| a_dist.sample(rng)),
                true,
            )?;
            let b = store.add(
                format!("{prefix}.lora_b"),
                group,
                Tensor::zeros(&[out_dim, rank]),
                true,
            )?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        Ok(LoraLinear {
            w,
            bias,
            a,
            b,
            rank,
            alpha,
            in_dim,
            out_dim,
            merged: false,
        })
    }

    /// `W x + (alpha/rank) B (A x)` for a batch of row vectors `x[n, in]`.
    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let got = f.graph.shape(x).to_vec();
        if got.len() != 2 || got[1] != self.in_dim {
            return Err(Error::dim(format!(
                "lora forward: input {got:?}, want [_, {}]",
                self.in_dim
            )));
        }
        let wt = f.graph.transpose(f.p(self.w))?;
        let mut out = f.graph.matmul(x, wt)?;
        if let (Some(a), Some(b), false) = (self.a, self.b, self.merged) {
            let at = f.graph.transpose(f.p(a))?;
            let down = f.graph.matmul(x, at)?;
            let bt = f.graph.transpose(f.p(b))?;
            let up = f.graph.matmul(down, bt)?;
            let scaled = f.graph.affine(up, self.alpha / self.rank as f64, 0.0);
            out = f.graph.add(out, scaled)?;
        }
        if let Some(bias) = self.bias {
            out = f.graph.add_row_bias(out, f.p(bias))?;
        }
        Ok(out)
    }

    /// The equivalent dense weight `W + (alpha/rank) B A`.
    pub fn merged_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(store.value(self.w).clone());
        let (Some(a), Some(b)) = (self.a, self.b) else {
            return Ok(g.value(w));
        };
        let an = g.constant(store.value(a).clone());
        let bn = g.constant(store.value(b).clone());
        let ba = g.matmul(bn, an)?;
        let scaled = g.affine(ba, self.alpha / self.rank as f64, 0.0);
        let m = g.add(w, scaled)?;
        Ok(g.value(m))
    }

    /// Folds the adapter into the base weight in place. Rejected if already
    /// merged and not reset with [`LoraLinear::unmerge`].
    pub fn merge(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.merged {
            return Err(Error::contract(
                "lora merge: adapter already merged; unmerge first",
            ));
        }
        let merged = self.merged_weight(store)?;
        *store.value_mut(self.w) = merged;
        self.merged = true;
        Ok(())
    }

    /// Subtracts the adapter contribution back out of the base weight.
    pub fn unmerge(&mut self, store: &mut ParamStore) -> Result<()> {
        if !self.merged {
            return Err(Error::contract("lora unmerge: adapter is not merged"));
        }
        let (Some(a), Some(b)) = (self.a, self.b) else {
            self.merged = false;
            return Ok(());
        };
        let mut g = Graph::new();
        let w = g.constant(store.value(self.w).clone());
        let an = g.constant(store.value(a).clone());
        let bn = g.constant(store.value(b).clone());
        let ba = g.matmul(bn, an)?;
        let scaled = g.affine(ba, -self.alpha / self.rank as f64, 0.0);
        let m = g.add(w, scaled)?;
        *store.value_mut(self.w) = g.value(m);
        self.merged = false;
        Ok(())
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }
}

/// Trainable/total scalar counts over the text and image encoder groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableCounts {
    pub trainable: usize,
    pub total: usize,
}

impl TrainableCounts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.trainable as f64 / self.total as f64
    }

    /// True when the encoders contain no trainable parameters at all.
    pub fn all_frozen(&self) -> bool {
        self.trainable == 0
    }
}

/// Counts trainable vs. total parameters across the encoder groups. The
/// result depends only on shapes and flags, never on values.
pub fn encoder_trainable_counts(store: &ParamStore) -> TrainableCounts {
    let mut counts = TrainableCounts {
        trainable: 0,
        total: 0,
    };
    for (_, e) in store.iter() {
        if matches!(e.group, ParamGroup::TextEncoder | ParamGroup::ImageEncoder) {
            counts.total += e.value.numel();
            if e.trainable {
                counts.trainable += e.value.numel();
            }
        }
    }
    counts
}
