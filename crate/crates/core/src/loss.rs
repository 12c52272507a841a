//! Set-based detection loss: Hungarian matching on a class + center cost,
//! then a focal classification loss over every query and an L1 regression
//! loss over the matched ones.
//!
//! The focal loss is built from softplus so no `0 * ln 0` can appear:
//! `ln sigmoid(x) = -softplus(-x)` and `ln(1 - sigmoid(x)) = -softplus(x)`
//! are exact identities, stable for any finite logit.

use crate::assign::hungarian;
use crate::engine::PredVars;
use crate::error::{Error, Result};
use crate::geometry::{Pose, WorldBounds};
use crate::sim::GtBox;
use crate::tensor::{Tape, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Multiplier on the focal classification term, and on the score part of
    /// the matching cost.
    pub cls: f64,
    /// Multiplier on the L1 regression term, and on the center-distance part
    /// of the matching cost.
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 2.0, l1: 0.25 }
    }
}

/// One ground-truth box in the exact space the heads predict: normalized
/// ego-frame center, log sizes, ego-frame heading as (sin, cos), global
/// planar velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTarget {
    pub class: usize,
    pub center_norm: [f64; 3],
    pub log_size: [f64; 3],
    pub sincos: [f64; 2],
    pub velocity: [f64; 2],
}

/// Convert a frame's ground truth into prediction-space targets, keeping
/// only objects inside the ego-frame world box. Occluded objects are kept by
/// default: supervising through occlusion is what teaches the memory to
/// carry objects, and evaluation scores them either way.
pub fn gt_targets(
    gt: &[GtBox],
    ego: &Pose,
    bounds: &WorldBounds,
    classes: usize,
    include_occluded: bool,
) -> Result<Vec<GtTarget>> {
    let mut out = Vec::new();
    for g in gt {
        if g.class >= classes {
            return Err(Error::Config(format!(
                "ground-truth class {} out of range for {classes} classes",
                g.class
            )));
        }
        if !g.visible && !include_occluded {
            continue;
        }
        let center_ego = g.center_in(ego);
        if !bounds.contains(center_ego) {
            continue;
        }
        if !(g.size.x > 0.0 && g.size.y > 0.0 && g.size.z > 0.0) {
            return Err(Error::Config(format!("ground-truth size must be positive: {:?}", g.size)));
        }
        let h = g.heading_in(ego);
        out.push(GtTarget {
            class: g.class,
            center_norm: bounds.normalize(center_ego),
            log_size: [g.size.x.ln(), g.size.y.ln(), g.size.z.ln()],
            sincos: [h.sin(), h.cos()],
            velocity: bounds.normalize_velocity(g.velocity),
        });
    }
    Ok(out)
}

/// Which prediction was assigned to which target.
#[derive(Debug, Clone)]
pub struct MatchOutcome {
    /// (prediction index, target index) pairs, one per target.
    pub pairs: Vec<(usize, usize)>,
    pub match_cost: f64,
}

/// Build the matching cost and the full loss for one frame. Matching runs on
/// plain values (no gradient flows through the assignment); the returned
/// `Var` is the weighted focal + L1 scalar, normalized by the match count.
pub fn detection_loss(
    tape: &mut Tape,
    preds: &PredVars,
    targets: &[GtTarget],
    weights: &LossWeights,
) -> Result<(Var, MatchOutcome)> {
    let shape = tape.shape(preds.logits).to_vec();
    let (n, classes) = (shape[0], shape[1]);
    if targets.len() > n {
        return Err(Error::Config(format!(
            "{} ground-truth objects but only {n} queries to match them",
            targets.len()
        )));
    }
    for t in targets {
        if t.class >= classes {
            return Err(Error::Config(format!(
                "target class {} out of range for {classes} classes",
                t.class
            )));
        }
    }

    // Matching cost on current values: weights.cls * (1 - score on the
    // target's class) + weights.l1 * L1 normalized-center distance.
    let logit_vals = tape.value(preds.logits).to_vec();
    let center_vals = tape.value(preds.centers_norm).to_vec();
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            (0..n)
                .map(|i| {
                    let score = crate::tensor::sigmoid(logit_vals[i * classes + t.class]);
                    let l1: f64 = (0..3)
                        .map(|k| (center_vals[i * 3 + k] - t.center_norm[k]).abs())
                        .sum();
                    weights.cls * (1.0 - score) + weights.l1 * l1
                })
                .collect()
        })
        .collect();
    let (assign, match_cost) = hungarian(&cost);
    let pairs: Vec<(usize, usize)> = assign.iter().enumerate().map(|(g, &i)| (i, g)).collect();
    let norm = 1.0 / (targets.len().max(1) as f64);

    // Focal term over every (query, class) cell. alpha weights sit in the
    // masks, so positives cost alpha*(1-p)^gamma*(-ln p) and negatives
    // (1-alpha)*p^gamma*(-ln(1-p)).
    let mut pos_mask = vec![0.0; n * classes];
    let mut neg_mask = vec![1.0 - FOCAL_ALPHA; n * classes];
    for &(i, g) in &pairs {
        pos_mask[i * classes + targets[g].class] = FOCAL_ALPHA;
        neg_mask[i * classes + targets[g].class] = 0.0;
    }
    let pos_mask = tape.constant(&Tensor::new(&[n, classes], pos_mask));
    let neg_mask = tape.constant(&Tensor::new(&[n, classes], neg_mask));
    let x = preds.logits;
    let p = tape.sigmoid(x);
    let ones = tape.constant(&Tensor::new(&[n, classes], vec![1.0; n * classes]));
    let one_minus_p = tape.sub(ones, p);
    let neg_x = tape.scale(x, -1.0);
    let ln_p_neg = tape.softplus(neg_x);
    let ln_1mp_neg = tape.softplus(x);
    let pos_pow = tape.pow_const(one_minus_p, FOCAL_GAMMA);
    let neg_pow = tape.pow_const(p, FOCAL_GAMMA);
    let pos_t = tape.mul(pos_pow, ln_p_neg);
    let neg_t = tape.mul(neg_pow, ln_1mp_neg);
    let pos_m = tape.mul(pos_mask, pos_t);
    let neg_m = tape.mul(neg_mask, neg_t);
    let focal_cells = tape.add(pos_m, neg_m);
    let focal_sum = tape.sum(focal_cells);
    let focal = tape.scale(focal_sum, norm);

    // L1 term over the matched rows of each regression group.
    let l1 = if targets.is_empty() {
        None
    } else {
        let idx: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let groups: [(Var, usize, fn(&GtTarget) -> &[f64]); 4] = [
            (preds.centers_norm, 3, |t| &t.center_norm),
            (preds.log_sizes, 3, |t| &t.log_size),
            (preds.heading, 2, |t| &t.sincos),
            (preds.velocity, 2, |t| &t.velocity),
        ];
        let mut acc: Option<Var> = None;
        for (var, width, get) in groups {
            let rows = tape.gather_rows(var, &idx);
            let mut want = Vec::with_capacity(idx.len() * width);
            for &(_, g) in &pairs {
                want.extend_from_slice(get(&targets[g]));
            }
            let want = tape.constant(&Tensor::new(&[idx.len(), width], want));
            let diff = tape.sub(rows, want);
            let a = tape.abs(diff);
            let s = tape.sum(a);
            acc = Some(match acc {
                None => s,
                Some(prev) => tape.add(prev, s),
            });
        }
        Some(tape.scale(acc.expect("four groups"), norm))
    };

    let focal_w = tape.scale(focal, weights.cls);
    let loss = match l1 {
        None => focal_w,
        Some(l1) => {
            let l1_w = tape.scale(l1, weights.l1);
            tape.add(focal_w, l1_w)
        }
    };
    Ok((loss, MatchOutcome { pairs, match_cost }))
}
