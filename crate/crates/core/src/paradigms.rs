//! Toy but faithful implementations of the temporal-fusion paradigms the
//! object-centric engine competes with, for latency and state-size
//! comparisons:
//!
//! * dense bird's-eye-view grids fused by inverse warping (one grid of
//!   state), by warp-and-concat over k past grids (k grids of state), or by
//!   a warped recurrent hidden grid (one grid, fixed cost);
//! * perspective-style temporal attention, where queries attend to the
//!   current frame's tokens plus each of k past frames' tokens, summed
//!   additively before the residual, so cost and state both grow with k.
//!
//! Everything here is inference-only and runs on plain values; weights are
//! fixed random projections, which is all a latency comparison needs.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{relative_ego_pose, Pose, Vec3};
use crate::tensor::{init_uniform, Tensor};

/// Geometry of a square-celled planar feature grid in ego coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BevSpec {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub min_xy: (f64, f64),
    pub max_xy: (f64, f64),
}

impl BevSpec {
    pub fn new(h: usize, w: usize, channels: usize, half_extent: f64) -> Self {
        assert!(h > 1 && w > 1 && channels > 0, "degenerate grid {h}x{w}x{channels}");
        assert!(half_extent > 0.0);
        BevSpec {
            h,
            w,
            channels,
            min_xy: (-half_extent, -half_extent),
            max_xy: (half_extent, half_extent),
        }
    }

    /// Continuous grid coordinates of an ego-frame point; (0, 0) is the
    /// first cell center, (w-1, h-1) the last.
    pub fn grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        let gx = (x - self.min_xy.0) / (self.max_xy.0 - self.min_xy.0) * (self.w - 1) as f64;
        let gy = (y - self.min_xy.1) / (self.max_xy.1 - self.min_xy.1) * (self.h - 1) as f64;
        (gx, gy)
    }

    /// Ego-frame (x, y) of integer cell (col, row).
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        let x = self.min_xy.0
            + col as f64 / (self.w - 1) as f64 * (self.max_xy.0 - self.min_xy.0);
        let y = self.min_xy.1
            + row as f64 / (self.h - 1) as f64 * (self.max_xy.1 - self.min_xy.1);
        (x, y)
    }
}

/// Row-major `[h][w][channels]` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: BevSpec,
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(spec: &BevSpec) -> Self {
        BevGrid { spec: spec.clone(), data: vec![0.0; spec.h * spec.w * spec.channels] }
    }

    fn at(&self, row: usize, col: usize, c: usize) -> f64 {
        self.data[(row * self.spec.w + col) * self.spec.channels + c]
    }

    fn at_mut(&mut self, row: usize, col: usize, c: usize) -> &mut f64 {
        &mut self.data[(row * self.spec.w + col) * self.spec.channels + c]
    }

    /// Bilinear sample of one channel; zero outside the grid.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let (gx, gy) = self.spec.grid_coords(x, y);
        if gx < 0.0 || gy < 0.0 || gx > (self.spec.w - 1) as f64 || gy > (self.spec.h - 1) as f64 {
            return 0.0;
        }
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let x1 = (x0 + 1).min(self.spec.w - 1);
        let y1 = (y0 + 1).min(self.spec.h - 1);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        self.at(y0, x0, c) * (1.0 - fx) * (1.0 - fy)
            + self.at(y0, x1, c) * fx * (1.0 - fy)
            + self.at(y1, x0, c) * (1.0 - fx) * fy
            + self.at(y1, x1, c) * fx * fy
    }

    /// Scatter a feature vector at an ego-frame point with bilinear weights;
    /// contributions outside the grid are dropped.
    pub fn splat(&mut self, x: f64, y: f64, feature: &[f64]) {
        assert_eq!(feature.len(), self.spec.channels, "feature width {} != {} channels", feature.len(), self.spec.channels);
        let (gx, gy) = self.spec.grid_coords(x, y);
        if gx < 0.0 || gy < 0.0 || gx > (self.spec.w - 1) as f64 || gy > (self.spec.h - 1) as f64 {
            return;
        }
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let x1 = (x0 + 1).min(self.spec.w - 1);
        let y1 = (y0 + 1).min(self.spec.h - 1);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        for (c, &f) in feature.iter().enumerate() {
            *self.at_mut(y0, x0, c) += f * (1.0 - fx) * (1.0 - fy);
            *self.at_mut(y0, x1, c) += f * fx * (1.0 - fy);
            *self.at_mut(y1, x0, c) += f * (1.0 - fx) * fy;
            *self.at_mut(y1, x1, c) += f * fx * fy;
        }
    }

    pub fn state_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

/// Rasterize projected tokens into a fresh grid: each token row is mapped
/// through `proj` (`[token_dim x channels]`) and splatted at its reference
/// point's (x, y).
pub fn rasterize(spec: &BevSpec, proj: &Tensor, tokens: &Tensor, refs: &[Vec3]) -> BevGrid {
    let (n, token_dim) = tokens.dims2();
    let (pd, channels) = proj.dims2();
    assert_eq!(token_dim, pd, "token width {token_dim} != projection rows {pd}");
    assert_eq!(channels, spec.channels);
    assert_eq!(refs.len(), n, "{} reference points for {n} tokens", refs.len());
    let mut grid = BevGrid::zeros(spec);
    let mut feature = vec![0.0; channels];
    for i in 0..n {
        for f in feature.iter_mut() {
            *f = 0.0;
        }
        for j in 0..token_dim {
            let t = tokens.data()[i * token_dim + j];
            for c in 0..channels {
                feature[c] += t * proj.data()[j * channels + c];
            }
        }
        grid.splat(refs[i].x, refs[i].y, &feature);
    }
    grid
}

/// Inverse-warp a previous frame's grid into the current ego frame:
/// each current cell samples the previous grid at the point the previous
/// ego frame saw at that location. `rel` maps previous ego coordinates to
/// current ones. Cells looking outside the previous grid become zero.
pub fn warp(prev: &BevGrid, rel: &Pose) -> BevGrid {
    let spec = &prev.spec;
    let inv = rel.inverse();
    let mut out = BevGrid::zeros(spec);
    for row in 0..spec.h {
        for col in 0..spec.w {
            let (x, y) = spec.cell_center(col, row);
            let p_prev = inv.apply(Vec3::new(x, y, 0.0));
            for c in 0..spec.channels {
                *out.at_mut(row, col, c) = prev.sample(p_prev.x, p_prev.y, c);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BevFusion {
    /// Blend the warped previous fused grid with the current one.
    Warp,
    /// Keep k past grids; warp all of them and mix channel-wise.
    ConcatK(usize),
    /// Warped recurrent hidden grid through a tanh cell.
    Recurrent,
}

/// A BEV temporal pipeline: rasterize, fuse with history, hand out the
/// fused grid. Weights are fixed at construction.
pub struct BevTemporal {
    pub spec: BevSpec,
    pub fusion: BevFusion,
    proj: Tensor,
    /// ConcatK: `[(k+1)*C x C]`; Recurrent: `[2*C x C]`; Warp: unused.
    mixer: Tensor,
    past: VecDeque<(BevGrid, Pose)>,
    fused: Option<(BevGrid, Pose)>,
}

impl BevTemporal {
    pub fn new(spec: BevSpec, fusion: BevFusion, token_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.channels;
        let proj = init_uniform(&mut rng, &[token_dim, c], token_dim);
        let mixer = match fusion {
            BevFusion::Warp => Tensor::zeros(&[0]),
            BevFusion::ConcatK(k) => init_uniform(&mut rng, &[(k + 1) * c, c], (k + 1) * c),
            BevFusion::Recurrent => init_uniform(&mut rng, &[2 * c, c], 2 * c),
        };
        BevTemporal { spec, fusion, proj, mixer, past: VecDeque::new(), fused: None }
    }

    /// Rasterize a frame and fuse it with history; returns the fused grid.
    pub fn step(&mut self, tokens: &Tensor, refs: &[Vec3], ego: &Pose) -> BevGrid {
        let current = rasterize(&self.spec, &self.proj, tokens, refs);
        let c = self.spec.channels;
        let fused = match self.fusion {
            BevFusion::Warp => match &self.fused {
                None => current,
                Some((prev, prev_ego)) => {
                    let rel = relative_ego_pose(prev_ego, ego);
                    let warped = warp(prev, &rel);
                    let mut out = current;
                    for (o, w) in out.data.iter_mut().zip(&warped.data) {
                        *o = 0.5 * *o + 0.5 * w;
                    }
                    out
                }
            },
            BevFusion::ConcatK(k) => {
                // Warp each stored grid to now, then mix [cur, past...] with
                // a 1x1 projection; missing history reads as zeros.
                let mut inputs: Vec<BevGrid> = vec![current.clone()];
                for (g, e) in self.past.iter().rev() {
                    let rel = relative_ego_pose(e, ego);
                    inputs.push(warp(g, &rel));
                }
                let mut out = BevGrid::zeros(&self.spec);
                for cell in 0..self.spec.h * self.spec.w {
                    for (slot, g) in inputs.iter().enumerate() {
                        for ci in 0..c {
                            let x = g.data[cell * c + ci];
                            if x == 0.0 {
                                continue;
                            }
                            let mrow = slot * c + ci;
                            for co in 0..c {
                                out.data[cell * c + co] += x * self.mixer.data()[mrow * c + co];
                            }
                        }
                    }
                }
                self.past.push_back((current, *ego));
                while self.past.len() > k {
                    self.past.pop_front();
                }
                out
            }
            BevFusion::Recurrent => {
                let warped_h = match &self.fused {
                    None => BevGrid::zeros(&self.spec),
                    Some((h, prev_ego)) => {
                        let rel = relative_ego_pose(prev_ego, ego);
                        warp(h, &rel)
                    }
                };
                let mut out = BevGrid::zeros(&self.spec);
                for cell in 0..self.spec.h * self.spec.w {
                    for co in 0..c {
                        let mut z = 0.0;
                        for ci in 0..c {
                            z += warped_h.data[cell * c + ci] * self.mixer.data()[ci * c + co];
                            z += current.data[cell * c + ci] * self.mixer.data()[(c + ci) * c + co];
                        }
                        out.data[cell * c + co] = z.tanh();
                    }
                }
                out
            }
        };
        self.fused = Some((fused.clone(), *ego));
        fused
    }

    /// Bytes that must persist between frames.
    pub fn state_bytes(&self) -> usize {
        let grid = self.spec.h * self.spec.w * self.spec.channels * std::mem::size_of::<f64>();
        match self.fusion {
            BevFusion::Warp | BevFusion::Recurrent => grid,
            BevFusion::ConcatK(k) => (k + 1) * grid,
        }
    }
}

/// Value-level multi-head attention, matching the tape version bit for bit
/// modulo summation order: per-head scaled dot products, row softmax,
/// concatenated heads through the output projection.
pub fn mha_values(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
) -> Tensor {
    let (n_q, d) = q.dims2();
    let (n_k, dk) = k.dims2();
    assert_eq!(d, dk, "query width {d} != key width {dk}");
    assert_eq!(v.dims2(), (n_k, d), "values must match keys");
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    assert!(n_k >= 1, "attention needs at least one key");
    let hd = d / heads;
    let matmul = |a: &Tensor, b: &Tensor| -> Tensor {
        let (m, inner) = a.dims2();
        let (bi, n) = b.dims2();
        assert_eq!(inner, bi);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..inner {
                let av = a.data()[i * inner + kk];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * b.data()[kk * n + j];
                }
            }
        }
        Tensor::new(&[m, n], out)
    };
    let qp = matmul(q, wq);
    let kp = matmul(k, wk);
    let vp = matmul(v, wv);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut concat = vec![0.0; n_q * d];
    for h in 0..heads {
        for i in 0..n_q {
            // Stable softmax over this query's scores.
            let mut scores = Vec::with_capacity(n_k);
            for j in 0..n_k {
                let mut s = 0.0;
                for x in 0..hd {
                    s += qp.data()[i * d + h * hd + x] * kp.data()[j * d + h * hd + x];
                }
                scores.push(s * scale);
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                denom += *s;
            }
            for x in 0..hd {
                let mut acc = 0.0;
                for j in 0..n_k {
                    acc += scores[j] / denom * vp.data()[j * d + h * hd + x];
                }
                concat[i * d + h * hd + x] = acc;
            }
        }
    }
    matmul(&Tensor::new(&[n_q, d], concat), wo)
}

/// Perspective-style temporal attention: queries attend to the current
/// frame's tokens and to each of the last `k` frames' tokens with the same
/// weights, and the per-frame attention outputs are summed (the additive,
/// pre-residual formulation). History therefore stores k full token sets,
/// and per-step cost grows linearly with k.
pub struct PerspectiveTemporal {
    pub k: usize,
    pub heads: usize,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    past: VecDeque<Tensor>,
}

impl PerspectiveTemporal {
    pub fn new(k: usize, d: usize, heads: usize, seed: u64) -> Self {
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PerspectiveTemporal {
            k,
            heads,
            wq: init_uniform(&mut rng, &[d, d], d),
            wk: init_uniform(&mut rng, &[d, d], d),
            wv: init_uniform(&mut rng, &[d, d], d),
            wo: init_uniform(&mut rng, &[d, d], d),
            past: VecDeque::new(),
        }
    }

    /// The separate per-frame attention outputs, current frame first, then
    /// history newest to oldest. Their sum is the step output.
    pub fn contributions(&self, queries: &Tensor, tokens: &Tensor) -> Vec<Tensor> {
        let mut out =
            vec![mha_values(queries, tokens, tokens, self.heads, &self.wq, &self.wk, &self.wv, &self.wo)];
        for t in self.past.iter().rev() {
            out.push(mha_values(queries, t, t, self.heads, &self.wq, &self.wk, &self.wv, &self.wo));
        }
        out
    }

    /// Attend to current + history, push the frame into history.
    pub fn step(&mut self, queries: &Tensor, tokens: &Tensor) -> Tensor {
        let parts = self.contributions(queries, tokens);
        let (n, d) = parts[0].dims2();
        let mut sum = vec![0.0; n * d];
        for p in &parts {
            for (s, x) in sum.iter_mut().zip(p.data()) {
                *s += x;
            }
        }
        self.past.push_back(tokens.clone());
        while self.past.len() > self.k {
            self.past.pop_front();
        }
        Tensor::new(&[n, d], sum)
    }

    /// Bytes of stored history right now.
    pub fn state_bytes(&self) -> usize {
        self.past.iter().map(|t| t.numel() * std::mem::size_of::<f64>()).sum()
    }
}
