//! Executable verification of the crate's numerics: geometry round trips,
//! motion compensation, gauge invariance, finite-difference gradient audits
//! of every differentiable building block, assignment optimality against
//! brute force, memory-queue semantics, and cold-start determinism.
//!
//! Each suite reports its case count, worst error, and tolerance; the whole
//! run is meant to finish in well under a minute. The `corrupt_gradients`
//! switch deliberately breaks one backward rule so the gradient audit's
//! failure path can be demonstrated end to end.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{brute_force_assignment, hungarian};
use crate::engine::{DecoderConfig, Engine, PredVars};
use crate::error::{Error, Result};
use crate::geometry::{
    align_center, linear_motion_compensate, relative_ego_pose, Pose, Vec3, Velocity2, WorldBounds,
};
use crate::loss::{detection_loss, GtTarget, LossWeights};
use crate::memory::{select_topk, MemoryQueue, QueryRecord};
use crate::mln::{mln_affine, mln_apply, MOTION_VECTOR_DIM};
use crate::tensor::{
    finite_diff_check_multi, init_uniform, mlp_forward, multi_head_attention, Activation, Tensor,
    LAYER_NORM_EPS,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SelfCheckConfig {
    pub seed: u64,
    pub geometry_cases: usize,
    pub motion_cases: usize,
    pub gauge_cases: usize,
    /// Finite-difference instances per operation family.
    pub grad_cases_per_op: usize,
    pub grad_tol: f64,
    pub assignment_cases: usize,
    pub memory_steps: usize,
    /// Break one backward rule on purpose; the gradient suite must then fail.
    pub corrupt_gradients: bool,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        SelfCheckConfig {
            seed: 0,
            geometry_cases: 10_000,
            motion_cases: 10_000,
            gauge_cases: 1_000,
            grad_cases_per_op: 100,
            grad_tol: 1e-4,
            assignment_cases: 1_000,
            memory_steps: 400,
            corrupt_gradients: false,
        }
    }
}

impl SelfCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.geometry_cases == 0
            || self.motion_cases == 0
            || self.gauge_cases == 0
            || self.grad_cases_per_op == 0
            || self.assignment_cases == 0
            || self.memory_steps == 0
        {
            return Err(Error::Config("every selfcheck suite needs at least one case".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config(format!("grad_tol must be positive, got {}", self.grad_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tol: f64,
    pub pass: bool,
    pub seconds: f64,
}

pub fn all_passed(results: &[SuiteResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.pass)
}

/// Fixed-width report, one row per suite plus a verdict line.
pub fn render_table(results: &[SuiteResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>8} {:>12} {:>9} {:>8} {:>7}\n",
        "suite", "cases", "worst", "tol", "time_s", "status"
    ));
    for r in results {
        out.push_str(&format!(
            "{:<22} {:>8} {:>12.3e} {:>9.0e} {:>8.2} {:>7}\n",
            r.name,
            r.cases,
            r.worst,
            r.tol,
            r.seconds,
            if r.pass { "ok" } else { "FAIL" }
        ));
    }
    out.push_str(if all_passed(results) { "selfcheck: ok\n" } else { "selfcheck: FAIL\n" });
    out
}

/// Run every suite; failures are reported, not returned as errors.
pub fn run(cfg: &SelfCheckConfig) -> Result<Vec<SuiteResult>> {
    cfg.validate()?;
    let mut results = Vec::new();
    let timed = |name: &'static str, cases: usize, tol: f64, worst: f64, t0: Instant| SuiteResult {
        name,
        cases,
        worst,
        tol,
        pass: worst <= tol,
        seconds: t0.elapsed().as_secs_f64(),
    };

    let t0 = Instant::now();
    let worst = geometry_suite(cfg);
    results.push(timed("geometry", cfg.geometry_cases, 1e-9, worst, t0));

    let t0 = Instant::now();
    let worst = motion_suite(cfg);
    results.push(timed("motion_compensation", cfg.motion_cases, 1e-9, worst, t0));

    let t0 = Instant::now();
    let worst = gauge_suite(cfg)?;
    results.push(timed("gauge_invariance", cfg.gauge_cases, 1e-9, worst, t0));

    let t0 = Instant::now();
    let (worst, cases) = gradient_suite(cfg);
    results.push(timed("gradients", cases, cfg.grad_tol, worst, t0));

    let t0 = Instant::now();
    let worst = assignment_suite(cfg);
    results.push(timed("assignment", cfg.assignment_cases, 1e-9, worst, t0));

    let t0 = Instant::now();
    let worst = memory_suite(cfg)?;
    results.push(timed("memory_semantics", cfg.memory_steps, 0.0, worst, t0));

    let t0 = Instant::now();
    let worst = cold_start_suite(cfg)?;
    results.push(timed("cold_start_bits", 2, 0.0, worst, t0));

    Ok(results)
}

fn random_point<R: Rng>(rng: &mut R, extent: f64) -> Vec3 {
    Vec3::new(
        rng.gen_range(-extent..extent),
        rng.gen_range(-extent..extent),
        rng.gen_range(-extent..extent),
    )
}

/// Pose algebra round trips on random rigid transforms.
fn geometry_suite(cfg: &SelfCheckConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E0);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.geometry_cases {
        let a = Pose::random(&mut rng, 50.0);
        let b = Pose::random(&mut rng, 50.0);
        let p = random_point(&mut rng, 40.0);
        // Inverse undoes apply.
        worst = worst.max(a.inverse().apply(a.apply(p)).dist(p));
        // Composition agrees with sequential application.
        worst = worst.max(a.compose(&b).apply(p).dist(a.apply(b.apply(p))));
        // A relative pose is exactly "leave one frame, enter the other".
        let rel = relative_ego_pose(&a, &b);
        worst = worst.max(rel.apply(p).dist(b.inverse().apply(a.apply(p))));
        // Orthonormality survives inversion: double inverse is identity.
        worst = worst.max(a.inverse().inverse().max_abs_diff(&a));
    }
    worst
}

/// Stored ego-frame centers, re-expressed in a later ego frame, land where
/// the global-frame geometry says they must, for still and moving objects.
fn motion_suite(cfg: &SelfCheckConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E1);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.motion_cases {
        let e_prev = Pose::random(&mut rng, 30.0);
        let e_cur = Pose::random(&mut rng, 30.0);
        let g = random_point(&mut rng, 40.0);
        let c_prev = e_prev.inverse().apply(g);
        let rel = relative_ego_pose(&e_prev, &e_cur);
        // Static object: alignment equals direct observation from the new pose.
        worst = worst.max(align_center(&rel, c_prev).dist(e_cur.inverse().apply(g)));
        // Moving object: constant global velocity over dt.
        let v = Velocity2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
        let dt = rng.gen_range(0.0..3.0);
        let moved = Vec3::new(g.x + v.x * dt, g.y + v.y * dt, g.z);
        let compensated = linear_motion_compensate(c_prev, v, &e_prev, &e_cur, dt);
        worst = worst.max(compensated.dist(e_cur.inverse().apply(moved)));
    }
    worst
}

/// Relative quantities must not depend on the global frame: re-anchoring the
/// world by any rigid transform leaves relative poses, ego-frame
/// coordinates, and (for translations) whole engine outputs unchanged.
fn gauge_suite(cfg: &SelfCheckConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E2);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.gauge_cases {
        let e_a = Pose::random(&mut rng, 30.0);
        let e_b = Pose::random(&mut rng, 30.0);
        let gauge = Pose::random(&mut rng, 200.0);
        let rel = relative_ego_pose(&e_a, &e_b);
        let rel_g = relative_ego_pose(&gauge.compose(&e_a), &gauge.compose(&e_b));
        worst = worst.max(rel.max_abs_diff(&rel_g));
        // Ego-frame coordinates of a world point are gauge-free too.
        let p = random_point(&mut rng, 40.0);
        let obs = e_a.inverse().apply(p);
        let obs_g = gauge.compose(&e_a).inverse().apply(gauge.apply(p));
        worst = worst.max(obs.dist(obs_g));
    }

    // Whole-engine check under a translation gauge (translations leave
    // global-frame velocity vectors unchanged, so every input the decoder
    // sees is identical up to rounding).
    let dc = small_config();
    let mut a = Engine::new(dc.clone(), cfg.seed)?;
    let mut b = Engine::new(dc.clone(), cfg.seed)?;
    let gauge = Pose::from_translation(Vec3::new(137.0, -54.0, 3.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E3);
    let tokens = init_uniform(&mut rng, &[24, dc.token_dim], 1);
    let refs: Vec<Vec3> = (0..24).map(|_| random_point(&mut rng, 20.0)).collect();
    for step in 0..5 {
        let t = step as f64 * 0.5;
        let ego = Pose::from_yaw(0.05 * t, Vec3::new(2.0 * t, 0.2 * t, 0.0));
        let out_a = a.infer_step(&tokens, &refs, &ego, t)?;
        let out_b = b.infer_step(&tokens, &refs, &gauge.compose(&ego), t)?;
        assert_eq!(out_a.len(), out_b.len());
        for (x, y) in out_a.iter().zip(&out_b) {
            worst = worst.max(x.center.dist(y.center));
            worst = worst.max((x.score() - y.score()).abs());
            worst = worst.max((x.velocity.x - y.velocity.x).abs());
            worst = worst.max((x.velocity.y - y.velocity.y).abs());
        }
    }
    Ok(worst)
}

/// A quick engine shape for whole-pipeline checks.
fn small_config() -> DecoderConfig {
    DecoderConfig {
        d: 32,
        heads: 4,
        layers: 2,
        n_random: 8,
        n_prop: 4,
        mem_frames: 2,
        mem_records: 4,
        save_interval: 1,
        classes: 3,
        token_dim: 8,
        pe_freqs: 2,
        ffn_mult: 2,
        mln_hidden: true,
        motion_norm: true,
        bounds: WorldBounds { min: Vec3::new(-32.0, -32.0, -2.0), max: Vec3::new(32.0, 32.0, 4.0) },
    }
}

/// Finite-difference audit of every differentiable building block. Returns
/// (worst relative error, total instances).
fn gradient_suite(cfg: &SelfCheckConfig) -> (f64, usize) {
    let per = cfg.grad_cases_per_op;
    let corrupt = cfg.corrupt_gradients;
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    let mut note = |err: f64| {
        worst = worst.max(err);
        cases += 1;
    };

    // matmul (the corrupted fixture hooks in here: forward is unchanged,
    // backward is deliberately wrong, and the audit must say so).
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x1000 + i as u64));
        let m = rng.gen_range(2..5);
        let k = rng.gen_range(2..5);
        let n = rng.gen_range(2..4);
        let a = init_uniform(&mut rng, &[m, k], 1);
        let b = init_uniform(&mut rng, &[k, n], 1);
        let w = init_uniform(&mut rng, &[m, n], 1);
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let mut c = tape.matmul(vars[0], vars[1]);
                if corrupt {
                    c = tape.corrupt_scale(c, 1.0);
                }
                let wv = tape.constant(&w);
                let p = tape.mul(c, wv);
                tape.sum(p)
            },
            &[a, b],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    // layer_norm.
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x2000 + i as u64));
        let rows = rng.gen_range(1..4);
        let dim = rng.gen_range(3..8);
        let x = init_uniform(&mut rng, &[rows, dim], 1);
        let w = init_uniform(&mut rng, &[rows, dim], 1);
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let y = tape.layer_norm(vars[0], LAYER_NORM_EPS);
                let wv = tape.constant(&w);
                let p = tape.mul(y, wv);
                tape.sum(p)
            },
            &[x],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    // softmax over rows.
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x3000 + i as u64));
        let rows = rng.gen_range(1..4);
        let dim = rng.gen_range(2..7);
        let x = init_uniform(&mut rng, &[rows, dim], 1);
        let w = init_uniform(&mut rng, &[rows, dim], 1);
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let y = tape.softmax_rows(vars[0]);
                let wv = tape.constant(&w);
                let p = tape.mul(y, wv);
                tape.sum(p)
            },
            &[x],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    // Two-layer ReLU MLP, gradients w.r.t. input and every weight and bias.
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x4000 + i as u64));
        let rows = rng.gen_range(1..4);
        let (din, dh, dout) = (3, 5, 2);
        let x = init_uniform(&mut rng, &[rows, din], 1);
        let w1 = init_uniform(&mut rng, &[din, dh], din);
        let b1 = init_uniform(&mut rng, &[dh], din);
        let w2 = init_uniform(&mut rng, &[dh, dout], dh);
        let b2 = init_uniform(&mut rng, &[dout], dh);
        let w = init_uniform(&mut rng, &[rows, dout], 1);
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let layers = [(vars[1], vars[2]), (vars[3], vars[4])];
                let y = mlp_forward(tape, vars[0], &layers, Activation::Relu);
                let wv = tape.constant(&w);
                let p = tape.mul(y, wv);
                tape.sum(p)
            },
            &[x, w1, b1, w2, b2],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    // Multi-head attention, gradients w.r.t. q, k, v and all projections.
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5000 + i as u64));
        let (n_q, n_k, d, heads) = (rng.gen_range(1..4), rng.gen_range(1..5), 6, 2);
        let q = init_uniform(&mut rng, &[n_q, d], 1);
        let k = init_uniform(&mut rng, &[n_k, d], 1);
        let v = init_uniform(&mut rng, &[n_k, d], 1);
        let wq = init_uniform(&mut rng, &[d, d], d);
        let wk = init_uniform(&mut rng, &[d, d], d);
        let wv = init_uniform(&mut rng, &[d, d], d);
        let wo = init_uniform(&mut rng, &[d, d], d);
        let w = init_uniform(&mut rng, &[n_q, d], 1);
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let y = multi_head_attention(
                    tape, vars[0], vars[1], vars[2], heads, vars[3], vars[4], vars[5], vars[6],
                );
                let wv2 = tape.constant(&w);
                let p = tape.mul(y, wv2);
                tape.sum(p)
            },
            &[q, k, v, wq, wk, wv, wo],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    // Motion-conditioned norm: single-linear conditioning nets keep the map
    // smooth, so gradients w.r.t. both streams, the motion matrix, and the
    // net weights are all checkable.
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x6000 + i as u64));
        let rows = rng.gen_range(1..4);
        let d = 6;
        let content = init_uniform(&mut rng, &[rows, d], 1);
        let pe = init_uniform(&mut rng, &[rows, d], 1);
        let motion = init_uniform(&mut rng, &[rows, MOTION_VECTOR_DIM], 1);
        let sw = init_uniform(&mut rng, &[MOTION_VECTOR_DIM, d], MOTION_VECTOR_DIM);
        let sb = init_uniform(&mut rng, &[d], MOTION_VECTOR_DIM);
        let hw = init_uniform(&mut rng, &[MOTION_VECTOR_DIM, d], MOTION_VECTOR_DIM);
        let hb = init_uniform(&mut rng, &[d], MOTION_VECTOR_DIM);
        let wc = init_uniform(&mut rng, &[rows, d], 1);
        let wp = init_uniform(&mut rng, &[rows, d], 1);
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let scale_layers = [(vars[3], vars[4])];
                let shift_layers = [(vars[5], vars[6])];
                let (scale, shift) = mln_affine(tape, vars[2], &scale_layers, &shift_layers);
                let (c_out, p_out) = mln_apply(tape, vars[0], vars[1], scale, shift);
                let wcv = tape.constant(&wc);
                let wpv = tape.constant(&wp);
                let rc = tape.mul(c_out, wcv);
                let rp = tape.mul(p_out, wpv);
                let s = tape.add(rc, rp);
                tape.sum(s)
            },
            &[content, pe, motion, sw, sb, hw, hb],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    // Prediction heads: affine layers read out of a feature block.
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x7000 + i as u64));
        let rows = rng.gen_range(1..5);
        let (d, out) = (5, 4);
        let x = init_uniform(&mut rng, &[rows, d], 1);
        let hw = init_uniform(&mut rng, &[d, out], d);
        let hb = init_uniform(&mut rng, &[out], d);
        let w = init_uniform(&mut rng, &[rows, out], 1);
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let layers = [(vars[1], vars[2])];
                let y = mlp_forward(tape, vars[0], &layers, Activation::Identity);
                let wv = tape.constant(&w);
                let p = tape.mul(y, wv);
                tape.sum(p)
            },
            &[x, hw, hb],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    // The full detection loss. Targets are laid out far apart with one
    // prediction parked near each, so the 1e-6 probes can never flip the
    // assignment and the loss stays smooth at the evaluation point. Every
    // prediction is matched: unmatched regression coordinates carry exactly
    // zero gradient (loss tests pin that), and probing a zero against
    // floating-point noise is not a meaningful comparison.
    for i in 0..per {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x8000 + i as u64));
        let classes = 3;
        let n_targets = rng.gen_range(1..4usize);
        let n_preds = n_targets;
        let mut targets = Vec::new();
        let mut centers = vec![0.0; n_preds * 3];
        for t in 0..n_targets {
            let base = 0.15 + 0.3 * t as f64;
            targets.push(GtTarget {
                class: rng.gen_range(0..classes),
                center_norm: [base, base, 0.5],
                log_size: [0.3, 0.1, -0.2],
                sincos: [0.0, 1.0],
                velocity: [1.0, -0.5],
            });
            // Matched prediction sits a small, safe offset from its target.
            centers[t * 3] = base + 0.02;
            centers[t * 3 + 1] = base - 0.01;
            centers[t * 3 + 2] = 0.45;
        }
        let logits = init_uniform(&mut rng, &[n_preds, classes], 1);
        let centers_t = Tensor::new(&[n_preds, 3], centers);
        let log_sizes = init_uniform(&mut rng, &[n_preds, 3], 1);
        let heading = init_uniform(&mut rng, &[n_preds, 2], 1);
        let velocity = init_uniform(&mut rng, &[n_preds, 2], 1);
        let weights = LossWeights::default();
        let r = finite_diff_check_multi(
            move |tape, vars| {
                let preds = PredVars {
                    logits: vars[0],
                    centers_norm: vars[1],
                    log_sizes: vars[2],
                    heading: vars[3],
                    velocity: vars[4],
                };
                let (loss, _) = detection_loss(tape, &preds, &targets, &weights)
                    .expect("valid loss instance");
                loss
            },
            &[logits, centers_t, log_sizes, heading, velocity],
            cfg.grad_tol,
        );
        note(r.max_rel_err);
    }

    (worst, cases)
}

/// Hungarian totals against exhaustive enumeration on small matrices.
fn assignment_suite(cfg: &SelfCheckConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E4);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.assignment_cases {
        let rows = rng.gen_range(1..=6usize);
        let cols = rng.gen_range(rows..=7usize);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(0.0..10.0)).collect())
            .collect();
        let (assignment, total) = hungarian(&cost);
        let best = brute_force_assignment(&cost);
        worst = worst.max((total - best).abs());
        // The reported assignment must be feasible and must price to the
        // reported total.
        let mut seen = vec![false; cols];
        let mut replay = 0.0;
        for (r, &c) in assignment.iter().enumerate() {
            assert!(!seen[c], "column {c} assigned twice");
            seen[c] = true;
            replay += cost[r][c];
        }
        worst = worst.max((replay - total).abs());
    }
    worst
}

/// FIFO memory semantics against a plain reference model. Returns the
/// number of violations as the "error" (tolerance zero).
fn memory_suite(cfg: &SelfCheckConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E5);
    let mut violations = 0usize;
    for _ in 0..4 {
        let n_frames = rng.gen_range(1..4usize);
        let per_frame = rng.gen_range(1..4usize);
        let dim = rng.gen_range(1..4usize);
        let tau = rng.gen_range(1..4u64);
        let mut queue = MemoryQueue::new(n_frames, per_frame, dim, tau)?;
        // Reference: (timestamp, per-record tags) of what should be stored.
        let mut expected: Vec<(f64, Vec<f64>)> = Vec::new();
        let steps = cfg.memory_steps / 4;
        for step in 0..steps {
            let now = step as f64;
            if queue.should_save(step as u64) != (step as u64 % tau == 0) {
                violations += 1;
            }
            if queue.should_save(step as u64) {
                // Candidates tagged by their first embedding coordinate.
                let n_cand = rng.gen_range(0..per_frame + 3);
                let cands: Vec<QueryRecord> = (0..n_cand)
                    .map(|c| {
                        let mut r = QueryRecord::padding(dim, now, &Pose::identity());
                        r.padded = false;
                        r.score = rng.gen_range(0.0..1.0);
                        r.embedding[0] = (step * 100 + c) as f64;
                        r
                    })
                    .collect();
                let block = select_topk(&cands, per_frame, dim, now, &Pose::identity());
                // Reference top-k: sort by score descending, stable by index.
                let mut order: Vec<usize> = (0..n_cand).collect();
                order.sort_by(|&a, &b| cands[b].score.partial_cmp(&cands[a].score).unwrap());
                let mut tags: Vec<f64> =
                    order.iter().take(per_frame).map(|&i| cands[i].embedding[0]).collect();
                while tags.len() < per_frame {
                    tags.push(-1.0); // padding marker
                }
                queue.push_frame(block)?;
                expected.push((now, tags));
                if expected.len() > n_frames {
                    expected.remove(0);
                }
            }
            // The queue must hold exactly the reference blocks, oldest first.
            let view = queue.gather(now);
            if view.rows() != expected.len() * per_frame {
                violations += 1;
                continue;
            }
            for (bi, (ts, tags)) in expected.iter().enumerate() {
                for (ri, tag) in tags.iter().enumerate() {
                    let row = bi * per_frame + ri;
                    if (view.dts[row] - (now - ts)).abs() > 0.0 {
                        violations += 1;
                    }
                    if *tag < 0.0 {
                        if !view.padded[row] || view.scores[row] != 0.0 {
                            violations += 1;
                        }
                    } else if view.embeddings.data()[row * dim] != *tag || view.padded[row] {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok(violations as f64)
}

/// Same seed, same stream, twice: outputs must agree to the bit, from the
/// very first frame (cold start) onward. Returns differing-bit count.
fn cold_start_suite(cfg: &SelfCheckConfig) -> Result<f64> {
    let dc = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6E6);
    let tokens: Vec<Tensor> = (0..4).map(|_| init_uniform(&mut rng, &[16, dc.token_dim], 1)).collect();
    let refs: Vec<Vec<Vec3>> =
        (0..4).map(|_| (0..16).map(|_| random_point(&mut rng, 20.0)).collect()).collect();
    let run = |engine: &mut Engine| -> Result<Vec<u64>> {
        let mut bits = Vec::new();
        for step in 0..4usize {
            let t = step as f64 * 0.5;
            let ego = Pose::from_yaw(0.1 * t, Vec3::new(3.0 * t, 0.0, 0.0));
            let boxes = engine.infer_step(&tokens[step], &refs[step], &ego, t)?;
            for b in boxes {
                bits.push(b.center.x.to_bits());
                bits.push(b.center.y.to_bits());
                bits.push(b.center.z.to_bits());
                bits.push(b.score().to_bits());
                bits.push(b.heading.to_bits());
            }
        }
        Ok(bits)
    };
    let mut a = Engine::new(dc.clone(), cfg.seed)?;
    let mut b = Engine::new(dc.clone(), cfg.seed)?;
    let bits_a = run(&mut a)?;
    let bits_b = run(&mut b)?;
    let mut diffs = bits_a.iter().zip(&bits_b).filter(|(x, y)| x != y).count();
    // And a reset stream replays identically on the same engine.
    a.reset_stream();
    let bits_c = run(&mut a)?;
    diffs += bits_a.iter().zip(&bits_c).filter(|(x, y)| x != y).count();
    Ok(diffs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> SelfCheckConfig {
        SelfCheckConfig {
            geometry_cases: 200,
            motion_cases: 200,
            gauge_cases: 50,
            grad_cases_per_op: 3,
            assignment_cases: 50,
            memory_steps: 40,
            ..Default::default()
        }
    }

    #[test]
    fn quick_run_passes_every_suite() {
        let results = run(&quick_config()).unwrap();
        assert_eq!(results.len(), 7);
        for r in &results {
            assert!(r.pass, "{} failed: worst {} tol {}", r.name, r.worst, r.tol);
        }
        assert!(all_passed(&results));
    }

    #[test]
    fn corrupted_gradients_are_detected() {
        let cfg = SelfCheckConfig { corrupt_gradients: true, ..quick_config() };
        let results = run(&cfg).unwrap();
        let grads = results.iter().find(|r| r.name == "gradients").unwrap();
        assert!(!grads.pass, "the sabotaged backward rule must fail the audit");
        assert!(!all_passed(&results));
        // Other suites are untouched by the fixture.
        assert!(results.iter().filter(|r| r.name != "gradients").all(|r| r.pass));
    }

    #[test]
    fn table_lists_every_suite_and_the_verdict() {
        let results = run(&quick_config()).unwrap();
        let table = render_table(&results);
        for name in [
            "geometry",
            "motion_compensation",
            "gauge_invariance",
            "gradients",
            "assignment",
            "memory_semantics",
            "cold_start_bits",
        ] {
            assert!(table.contains(name), "missing {name} in:\n{table}");
        }
        assert!(table.trim_end().ends_with("selfcheck: ok"));
        let cfg = SelfCheckConfig { corrupt_gradients: true, ..quick_config() };
        let bad = render_table(&run(&cfg).unwrap());
        assert!(bad.trim_end().ends_with("selfcheck: FAIL"));
    }

    #[test]
    fn config_validation_rejects_empty_suites() {
        let cfg = SelfCheckConfig { geometry_cases: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SelfCheckConfig { grad_tol: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
