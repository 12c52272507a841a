//! Latency and state-size comparison across temporal-fusion paradigms.
//!
//! Three claims are measured, all on synthetic frames where perception
//! tokens far outnumber object queries (the regime that matters):
//!
//! * the object-centric engine's per-step cost is nearly flat in how many
//!   memory frames it keeps, because tokens dominate each step;
//! * perspective-style temporal attention re-reads k past frames of tokens,
//!   so its per-step cost grows with k;
//! * the engine's per-step cost does not depend on stream position: step
//!   one thousand costs what step ten costs.
//!
//! Timings are wall-clock medians over repeated steps; state sizes are the
//! bytes each method must carry between frames.

use std::io::Write as IoWrite;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{DecoderConfig, Engine};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3, WorldBounds};
use crate::paradigms::{BevFusion, BevSpec, BevTemporal, PerspectiveTemporal};
use crate::tensor::{init_uniform, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchStats {
    pub median_us: f64,
    pub p90_us: f64,
}

/// Run `f` `warmup` times untimed, then `iters` timed repetitions.
pub fn measure<F: FnMut()>(mut f: F, warmup: usize, iters: usize) -> BenchStats {
    assert!(iters >= 1, "need at least one timed iteration");
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    stats_of(&mut samples)
}

fn stats_of(samples: &mut [f64]) -> BenchStats {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    BenchStats { median_us: quantile(samples, 0.5), p90_us: quantile(samples, 0.9) }
}

/// Linear-interpolated quantile of an already sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    /// Memory frames, past-frame count, or stream position, depending on
    /// the method.
    pub history: usize,
    pub stats: BenchStats,
    pub state_bytes: usize,
}

/// Knobs of the comparison. Defaults are the published numbers; tests dial
/// the iteration counts down.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seed: u64,
    /// Tokens per synthetic frame; large enough that per-token work
    /// dominates per-memory-record work.
    pub n_tok: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Memory lengths for the object-centric arm.
    pub mem_frames: Vec<usize>,
    /// Past-frame counts for the perspective arm.
    pub perspective_k: Vec<usize>,
    /// Past-grid counts for the BEV concat arm.
    pub bev_k: Vec<usize>,
    /// BEV grid side length and channel count.
    pub bev_cells: usize,
    pub bev_channels: usize,
    /// Stream positions compared by the position arm.
    pub positions: Vec<usize>,
    /// Steps in each position window whose median is reported.
    pub position_window: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            n_tok: 1024,
            warmup: 5,
            iters: 40,
            mem_frames: (1..=8).collect(),
            perspective_k: vec![1, 4, 16],
            bev_k: vec![1, 4],
            bev_cells: 48,
            bev_channels: 32,
            positions: vec![10, 1000],
            position_window: 32,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tok == 0 || self.iters == 0 || self.position_window == 0 {
            return Err(Error::Config("n_tok, iters, position_window must be positive".into()));
        }
        if self.mem_frames.is_empty() {
            return Err(Error::Config("mem_frames must not be empty".into()));
        }
        if self.bev_cells < 2 || self.bev_channels == 0 {
            return Err(Error::Config("BEV grid must be at least 2x2 with channels".into()));
        }
        Ok(())
    }
}

/// Engine shape used by the latency arms: modest decoder, token-heavy
/// frames. Queries 64 + 12, 12 records pushed per frame.
fn token_heavy_config(mem_frames: usize) -> DecoderConfig {
    DecoderConfig {
        d: 64,
        heads: 4,
        layers: 2,
        n_random: 64,
        n_prop: 12,
        mem_frames,
        mem_records: 12,
        save_interval: 1,
        classes: 3,
        token_dim: 16,
        pe_freqs: 4,
        ffn_mult: 2,
        mln_hidden: true,
        motion_norm: true,
        bounds: WorldBounds { min: Vec3::new(-32.0, -32.0, -2.0), max: Vec3::new(32.0, 32.0, 4.0) },
    }
}

/// Deterministic synthetic frame: random tokens, reference points inside
/// the world bounds.
fn synthetic_frame(rng: &mut ChaCha8Rng, n_tok: usize, token_dim: usize) -> (Tensor, Vec<Vec3>) {
    let tokens = init_uniform(rng, &[n_tok, token_dim], 1);
    let refs = (0..n_tok)
        .map(|_| {
            Vec3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-1.0..3.0))
        })
        .collect();
    (tokens, refs)
}

/// Ego pose for a gently curving drive; keeps warps and motion
/// compensation non-trivial during timing.
fn bench_ego(step: usize) -> Pose {
    let t = step as f64 * 0.5;
    Pose::from_yaw(0.02 * t, Vec3::new(2.0 * t, 0.1 * t, 0.0))
}

/// Per-step latency of the engine at each memory length, measured warm.
pub fn bench_object_centric(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in &cfg.mem_frames {
        let dc = token_heavy_config(n);
        let state_bytes = dc.steady_state_state_bytes();
        let token_dim = dc.token_dim;
        let mut engine = Engine::new(dc, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB0);
        let (tokens, refs) = synthetic_frame(&mut rng, cfg.n_tok, token_dim);
        // Fill the memory before timing so every timed step runs at the
        // steady-state key count.
        let mut step = 0usize;
        for _ in 0..n + 2 {
            engine.infer_step(&tokens, &refs, &bench_ego(step), step as f64 * 0.5)?;
            step += 1;
        }
        let mut err = None;
        let stats = measure(
            || {
                if let Err(e) = engine.infer_step(&tokens, &refs, &bench_ego(step), step as f64 * 0.5) {
                    err = Some(e);
                }
                step += 1;
            },
            cfg.warmup,
            cfg.iters,
        );
        if let Some(e) = err {
            return Err(e);
        }
        rows.push(BenchRow { method: "object_centric".into(), history: n, stats, state_bytes });
    }
    Ok(rows)
}

/// Per-step latency of perspective-style temporal attention at each history
/// depth, measured with full history.
pub fn bench_perspective(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let d = 64;
    let n_queries = 76;
    let mut rows = Vec::new();
    for &k in &cfg.perspective_k {
        let mut pt = PerspectiveTemporal::new(k, d, 4, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0);
        let queries = init_uniform(&mut rng, &[n_queries, d], 1);
        let tokens = init_uniform(&mut rng, &[cfg.n_tok, d], 1);
        for _ in 0..k {
            pt.step(&queries, &tokens);
        }
        let stats = measure(|| drop(pt.step(&queries, &tokens)), cfg.warmup, cfg.iters);
        let state_bytes = pt.state_bytes();
        rows.push(BenchRow { method: "perspective".into(), history: k, stats, state_bytes });
    }
    Ok(rows)
}

/// Per-step latency of the dense BEV pipelines.
pub fn bench_bev(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let spec = BevSpec::new(cfg.bev_cells, cfg.bev_cells, cfg.bev_channels, 32.0);
    let token_dim = 16;
    let mut arms: Vec<(String, usize, BevFusion)> =
        vec![("bev_warp".into(), 1, BevFusion::Warp), ("bev_recurrent".into(), 1, BevFusion::Recurrent)];
    for &k in &cfg.bev_k {
        arms.push(("bev_concat".into(), k, BevFusion::ConcatK(k)));
    }
    let mut rows = Vec::new();
    for (method, history, fusion) in arms {
        let mut bev = BevTemporal::new(spec.clone(), fusion, token_dim, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD0);
        let (tokens, refs) = synthetic_frame(&mut rng, cfg.n_tok, token_dim);
        let mut step = 0usize;
        for _ in 0..history + 1 {
            bev.step(&tokens, &refs, &bench_ego(step));
            step += 1;
        }
        let stats = measure(
            || {
                bev.step(&tokens, &refs, &bench_ego(step));
                step += 1;
            },
            cfg.warmup,
            cfg.iters,
        );
        let state_bytes = bev.state_bytes();
        rows.push(BenchRow { method, history, stats, state_bytes });
    }
    Ok(rows)
}

/// Median per-step latency inside a window ending at each requested stream
/// position, from one continuous stream. Bounded state means the windows
/// should look alike no matter how far into the stream they sit.
pub fn bench_positions(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let dc = token_heavy_config(4);
    // Smaller frames here: the stream must reach position max(positions).
    let n_tok = (cfg.n_tok / 8).max(16);
    let state_bytes = dc.steady_state_state_bytes();
    let token_dim = dc.token_dim;
    let mut engine = Engine::new(dc, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE0);
    let (tokens, refs) = synthetic_frame(&mut rng, n_tok, token_dim);
    let last = *cfg.positions.iter().max().expect("positions must not be empty");
    let mut durations = Vec::with_capacity(last + 1);
    for step in 0..=last {
        let t0 = Instant::now();
        engine.infer_step(&tokens, &refs, &bench_ego(step), step as f64 * 0.5)?;
        durations.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let mut rows = Vec::new();
    for &pos in &cfg.positions {
        let end = pos + 1;
        let start = end.saturating_sub(cfg.position_window);
        let mut window = durations[start..end].to_vec();
        let stats = stats_of(&mut window);
        rows.push(BenchRow { method: "object_centric_position".into(), history: pos, stats, state_bytes });
    }
    Ok(rows)
}

/// All arms, in presentation order.
pub fn run_all(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = bench_object_centric(cfg)?;
    rows.extend(bench_perspective(cfg)?);
    rows.extend(bench_bev(cfg)?);
    rows.extend(bench_positions(cfg)?);
    Ok(rows)
}

/// Least-squares slope of `ys` against `xs`, divided by the first y: the
/// relative cost growth per unit of history.
pub fn relative_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points to fit a slope");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    assert!(den > 0.0, "xs must not be constant");
    (num / den) / ys[0]
}

pub fn write_csv<W: IoWrite>(rows: &[BenchRow], w: &mut W) -> Result<()> {
    writeln!(w, "method,history,latency_us_median,latency_us_p90,state_bytes")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.1},{:.1},{}",
            r.method, r.history, r.stats.median_us, r.stats.p90_us, r.state_bytes
        )?;
    }
    Ok(())
}

pub fn write_csv_file(rows: &[BenchRow], path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(rows, &mut f)?;
    Ok(())
}
