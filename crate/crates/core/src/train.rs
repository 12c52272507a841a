//! Streaming training: sequences are replayed through the engine the same
//! way inference consumes them, one frame after another with the memory and
//! propagated queries carried along.
//!
//! Each sequence runs a detached prefix (forward only, so the recurrent
//! state is realistic but free of gradient bookkeeping) and then a recorded
//! suffix on a single tape whose per-frame losses are summed; one backward
//! pass reaches parameters through every recorded step, including through
//! the memory writes between them. One Adam update per sequence.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineParams};
use crate::error::{Error, Result};
use crate::loss::{detection_loss, gt_targets, LossWeights};
use crate::sim::{mix, SimFrame};
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update over every parameter that has a gradient entry; parameters
    /// absent from `grads` are left untouched.
    pub fn update(&mut self, params: &mut EngineParams, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let lr = self.lr;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        params.for_each_mut(|name, t| {
            let Some(g) = grads.get(&name) else { return };
            assert_eq!(
                g.shape(),
                t.shape(),
                "gradient shape {:?} != parameter {name} shape {:?}",
                g.shape(),
                t.shape()
            );
            let m = m_map.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
            let v = v_map.entry(name).or_insert_with(|| Tensor::zeros(t.shape()));
            let td = t.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..td.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                td[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// Per-sequence learning rate: linear warmup from zero, then cosine decay
/// down to `lr * final_lr_frac` at the last sequence.
pub fn scheduled_lr(cfg: &TrainConfig, seq: usize) -> f64 {
    let warm = cfg.warmup.min(cfg.sequences.saturating_sub(1));
    if seq < warm {
        return cfg.lr * (seq + 1) as f64 / warm as f64;
    }
    let span = (cfg.sequences - warm).max(1) as f64;
    let t = (seq - warm) as f64 / span;
    let floor = cfg.final_lr_frac;
    cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Scale all gradients down to a global L2 norm of `max_norm` when they
/// exceed it; returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Sequences to train on (one optimizer update each).
    pub sequences: usize,
    /// Frames per sequence, detached prefix included.
    pub frames_per_seq: usize,
    /// Leading frames run forward-only; gradients flow through the rest.
    pub detach_prefix: usize,
    pub lr: f64,
    /// Sequences of linear learning-rate warmup from zero.
    pub warmup: usize,
    /// Cosine-decay floor: the last sequence runs at `lr * final_lr_frac`.
    /// 1.0 keeps the rate constant after warmup.
    pub final_lr_frac: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Frame stride is drawn from `1..=frame_skip_max` per sequence, a cheap
    /// time-scale augmentation.
    pub frame_skip_max: u64,
    /// Supervise objects inside occlusion episodes (they emit no tokens but
    /// the stream should still carry them).
    pub supervise_occluded: bool,
    pub lambda_cls: f64,
    pub lambda_l1: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            sequences: 60,
            frames_per_seq: 6,
            detach_prefix: 2,
            lr: 1e-3,
            warmup: 20,
            final_lr_frac: 0.1,
            clip: 10.0,
            frame_skip_max: 2,
            supervise_occluded: true,
            lambda_cls: 2.0,
            lambda_l1: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sequences == 0 {
            return fail("sequences must be >= 1".into());
        }
        if self.frames_per_seq == 0 {
            return fail("frames_per_seq must be >= 1".into());
        }
        if self.detach_prefix >= self.frames_per_seq {
            return fail(format!(
                "detach_prefix {} leaves no recorded frames in a {}-frame sequence",
                self.detach_prefix, self.frames_per_seq
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return fail(format!(
                "final_lr_frac must be in (0, 1], got {}",
                self.final_lr_frac
            ));
        }
        if self.frame_skip_max == 0 {
            return fail("frame_skip_max must be >= 1".into());
        }
        if self.lambda_cls < 0.0 || self.lambda_l1 < 0.0 {
            return fail("loss weights must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Summed recorded-frame loss per sequence, in order.
    pub losses: Vec<f64>,
    /// Pre-clip global gradient norm per sequence.
    pub grad_norms: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the final quarter of training, a cheap convergence
    /// summary for logs and CLI output.
    pub fn tail_mean_loss(&self) -> f64 {
        let n = self.losses.len();
        let k = (n / 4).max(1);
        self.losses[n - k..].iter().sum::<f64>() / k as f64
    }
}

/// Train in place over randomly windowed sequences of the given frame
/// streams (each stream is one scene's frames, in order).
pub fn train_streaming(
    engine: &mut Engine,
    scenes: &[Vec<SimFrame>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        let Some(first) = s.first() else {
            return Err(Error::Config(format!("scene {i} has no frames")));
        };
        let width = first.tokens.dims2().1;
        if width != engine.cfg.token_dim {
            return Err(Error::Config(format!(
                "scene {i} token width {width} != engine token_dim {}",
                engine.cfg.token_dim
            )));
        }
    }
    let weights = LossWeights { cls: cfg.lambda_cls, l1: cfg.lambda_l1 };
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainReport { losses: Vec::new(), grad_norms: Vec::new() };

    for seq in 0..cfg.sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x7_0000 + seq as u64));
        let scene = &scenes[rng.gen_range(0..scenes.len())];
        let len = scene.len();

        // Choose a stride that still fits the scene, then a window start.
        let mut stride = rng.gen_range(1..=cfg.frame_skip_max) as usize;
        let frames = cfg.frames_per_seq.min(len);
        while stride > 1 && (frames - 1) * stride + 1 > len {
            stride -= 1;
        }
        let span = (frames - 1) * stride + 1;
        let start = rng.gen_range(0..=len - span);
        let window: Vec<usize> = (0..frames).map(|k| start + k * stride).collect();

        engine.reset_stream();
        let detach = cfg.detach_prefix.min(frames - 1);
        for &fi in &window[..detach] {
            let f = &scene[fi];
            engine.infer_step(&f.tokens, &f.refs, &f.ego, f.time)?;
        }

        let mut session = engine.begin_session(true);
        let mut total = None;
        for &fi in &window[detach..] {
            let f = &scene[fi];
            let out = engine.step(&mut session, &f.tokens, &f.refs, &f.ego, f.time)?;
            let targets = gt_targets(
                &f.gt,
                &f.ego,
                &engine.cfg.bounds,
                engine.cfg.classes,
                cfg.supervise_occluded,
            )?;
            let (loss, _) = detection_loss(&mut session.tape, &out.preds, &targets, &weights)?;
            total = Some(match total {
                None => loss,
                Some(acc) => session.tape.add(acc, loss),
            });
        }
        let total = total.expect("at least one recorded frame");
        let loss_val = session.tape.value(total)[0];
        // The decoder's layer norms keep activations bounded, so a diverged
        // run shows up as a catastrophic loss plateau rather than an inf or
        // NaN; guard against both.
        let blown_up = report
            .losses
            .first()
            .map(|&first| loss_val > 1e6 * (first.abs() + 1.0))
            .unwrap_or(false);
        if !loss_val.is_finite() || blown_up {
            return Err(Error::Divergence(format!(
                "loss became {loss_val} at sequence {seq}; lower the learning rate"
            )));
        }

        let grads = session.tape.backward(total);
        let mut by_name = session.param_grads(&grads);
        let norm = clip_global_norm(&mut by_name, cfg.clip);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!(
                "gradient norm became {norm} at sequence {seq}; lower the learning rate"
            )));
        }
        adam.lr = scheduled_lr(cfg, seq);
        adam.update(&mut engine.params, &by_name);

        report.losses.push(loss_val);
        report.grad_norms.push(norm);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::DecoderConfig;
    use crate::sim::{simulate, SceneConfig};

    #[test]
    fn lr_schedule_matches_hand_values() {
        let cfg = TrainConfig {
            sequences: 100,
            warmup: 10,
            lr: 1e-3,
            final_lr_frac: 0.1,
            ..TrainConfig::default()
        };
        // Warmup ramps linearly: step 0 runs at lr/10, step 9 reaches lr.
        assert!((scheduled_lr(&cfg, 0) - 1e-4).abs() < 1e-12);
        assert!((scheduled_lr(&cfg, 9) - 1e-3).abs() < 1e-12);
        // Cosine start equals lr, midpoint (t = 45/90) is 0.1 + 0.9/2 = 0.55.
        assert!((scheduled_lr(&cfg, 10) - 1e-3).abs() < 1e-12);
        assert!((scheduled_lr(&cfg, 55) - 5.5e-4).abs() < 1e-12);
        // No warmup and frac 1.0 means a constant rate.
        let flat = TrainConfig { warmup: 0, final_lr_frac: 1.0, ..cfg };
        assert_eq!(scheduled_lr(&flat, 0), 1e-3);
        assert_eq!(scheduled_lr(&flat, 99), 1e-3);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With one step, bias correction makes mhat = g and vhat = g^2, so
        // the update is lr * g / (|g| + eps) ~ lr * sign(g).
        let cfg = DecoderConfig::toy();
        let mut params = EngineParams::init(&cfg, 1);
        let before = params.anchors.clone();
        let mut grads = BTreeMap::new();
        let mut g = Tensor::zeros(before.shape());
        g.data_mut()[0] = 2.0;
        g.data_mut()[1] = -3.0;
        grads.insert("anchors".to_string(), g);
        let mut adam = Adam::new(0.1);
        adam.update(&mut params, &grads);
        let after = params.anchors.data();
        assert!((after[0] - (before.data()[0] - 0.1)).abs() < 1e-8);
        assert!((after[1] - (before.data()[1] + 0.1)).abs() < 1e-8);
        // Untouched coordinate of a tensor WITH a grad entry moves nowhere
        // (zero grad), and tensors without entries stay identical.
        assert_eq!(after[2], before.data()[2]);
        let cls_w = params.head_cls.w.clone();
        adam.update(&mut params, &grads);
        assert_eq!(params.head_cls.w, cls_w);
    }

    #[test]
    fn adam_second_step_hand_values() {
        let cfg = DecoderConfig::toy();
        let mut params = EngineParams::init(&cfg, 1);
        let x0 = params.anchors.data()[0];
        let mut grads = BTreeMap::new();
        let mut g = Tensor::zeros(params.anchors.shape());
        g.data_mut()[0] = 1.0;
        grads.insert("anchors".to_string(), g.clone());
        let mut adam = Adam::new(0.01);
        adam.update(&mut params, &grads);
        adam.update(&mut params, &grads);
        // Constant unit gradient: both steps move by ~lr (bias corrections
        // cancel exactly for a constant gradient).
        let expect = x0 - 0.01 * (1.0 / (1.0 + 1e-8)) - 0.01 * (1.0 / (1.0 + 1e-8));
        assert!((params.anchors.data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn clipping_preserves_direction_and_reports_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new(&[2], vec![3.0, 4.0]));
        grads.insert("b".to_string(), Tensor::new(&[1], vec![12.0]));
        // Global norm = sqrt(9 + 16 + 144) = 13.
        let norm = clip_global_norm(&mut grads, 6.5);
        assert!((norm - 13.0).abs() < 1e-12);
        assert!((grads["a"].data()[0] - 1.5).abs() < 1e-12);
        assert!((grads["a"].data()[1] - 2.0).abs() < 1e-12);
        assert!((grads["b"].data()[0] - 6.0).abs() < 1e-12);
        // Under the limit: untouched, norm still reported.
        let norm2 = clip_global_norm(&mut grads, 100.0);
        assert!((norm2 - 6.5).abs() < 1e-12);
        assert!((grads["b"].data()[0] - 6.0).abs() < 1e-12);
    }

    fn tiny_engine(seed: u64) -> Engine {
        let mut cfg = DecoderConfig::toy();
        cfg.d = 16;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.n_random = 16;
        cfg.n_prop = 4;
        cfg.mem_records = 6;
        cfg.mem_frames = 2;
        cfg.pe_freqs = 2;
        Engine::new(cfg, seed).unwrap()
    }

    #[test]
    fn training_reduces_loss() {
        let scene_cfg = SceneConfig {
            seed: 5,
            frames: 20,
            n_objects: 4,
            n_distractors: 1,
            ..SceneConfig::default()
        };
        let scene = simulate(&scene_cfg).unwrap().frames;
        let mut engine = tiny_engine(2);
        let cfg = TrainConfig {
            sequences: 400,
            frames_per_seq: 4,
            detach_prefix: 1,
            frame_skip_max: 2,
            lr: 5e-3,
            warmup: 5,
            ..TrainConfig::default()
        };
        let report = train_streaming(&mut engine, &[scene], &cfg).unwrap();
        assert_eq!(report.losses.len(), 400);
        let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.losses[390..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < 0.6 * head,
            "loss should drop substantially: first-10 mean {head}, last-10 mean {tail}"
        );
        assert!(report.grad_norms.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let scene = simulate(&SceneConfig { frames: 10, ..SceneConfig::default() }).unwrap().frames;
        let mut engine = tiny_engine(3);
        let cfg = TrainConfig {
            sequences: 20,
            frames_per_seq: 3,
            detach_prefix: 1,
            lr: 1e9,
            clip: 0.0,
            ..TrainConfig::default()
        };
        match train_streaming(&mut engine, &[scene], &cfg) {
            Err(Error::Divergence(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { detach_prefix: 6, frames_per_seq: 6, ..TrainConfig::default() }
            .validate()
            .is_err());
        assert!(TrainConfig { sequences: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { frame_skip_max: 0, ..TrainConfig::default() }.validate().is_err());
        let mut e = tiny_engine(1);
        assert!(matches!(
            train_streaming(&mut e, &[], &TrainConfig::default()),
            Err(Error::Config(_))
        ));
        // Token width mismatch is caught before any stepping.
        let scene = simulate(&SceneConfig { token_dim: 8, frames: 5, ..SceneConfig::default() })
            .unwrap()
            .frames;
        assert!(matches!(
            train_streaming(&mut e, &[scene], &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
