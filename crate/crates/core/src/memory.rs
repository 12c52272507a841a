//! Bounded per-frame memory of past object queries. Each saved frame
//! contributes exactly `records_per_frame` records (top-scored detections,
//! zero-padded when the frame had fewer), and the queue keeps the most recent
//! `n_frames` blocks, first-in first-out.
//!
//! Records store capture-time context (ego pose, timestamp, predicted
//! velocity); elapsed time is always derived at read time from the consumer's
//! clock, never stored.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3, Velocity2};
use crate::tensor::Tensor;

/// One remembered query: content embedding plus the metadata needed to
/// re-express it at a later frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    /// Final decoder embedding, length = queue dim.
    pub embedding: Vec<f64>,
    /// Predicted box center in the ego frame at `timestamp`.
    pub center: Vec3,
    /// Predicted planar velocity, global frame.
    pub velocity: Velocity2,
    /// Ego pose at capture time.
    pub ego: Pose,
    pub timestamp: f64,
    /// Classification score in [0, 1]; padding records carry 0.
    pub score: f64,
    /// True for zero-filled padding, so consumers can tell it from a real
    /// detection that happens to score 0.
    pub padded: bool,
}

impl QueryRecord {
    pub fn padding(dim: usize, timestamp: f64, ego: &Pose) -> Self {
        QueryRecord {
            embedding: vec![0.0; dim],
            center: Vec3::zero(),
            velocity: Velocity2::zero(),
            ego: *ego,
            timestamp,
            score: 0.0,
            padded: true,
        }
    }
}

/// The records saved from one frame, always exactly the queue's
/// `records_per_frame` of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameBlock {
    pub records: Vec<QueryRecord>,
    pub timestamp: f64,
}

/// Indices of the `k` highest scores, descending, ties broken toward the
/// lower index. Returns fewer than `k` when there are fewer candidates.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Keep the `k` best-scoring records, ordered by descending score with ties
/// broken toward the lower input index (stable), padding up to `k` when the
/// frame produced fewer.
pub fn select_topk(
    candidates: &[QueryRecord],
    k: usize,
    dim: usize,
    timestamp: f64,
    ego: &Pose,
) -> FrameBlock {
    let scores: Vec<f64> = candidates.iter().map(|r| r.score).collect();
    let mut records: Vec<QueryRecord> = topk_indices(&scores, k)
        .into_iter()
        .map(|i| {
            let r = candidates[i].clone();
            assert_eq!(r.embedding.len(), dim, "record embedding width {} != queue dim {dim}", r.embedding.len());
            r
        })
        .collect();
    while records.len() < k {
        records.push(QueryRecord::padding(dim, timestamp, ego));
    }
    FrameBlock { records, timestamp }
}

/// Everything the decoder reads from memory in one shot. Rows run oldest
/// block to newest, original order within a block; row count is always
/// `blocks * records_per_frame`.
#[derive(Debug, Clone)]
pub struct MemoryView {
    pub embeddings: Tensor,
    pub centers: Vec<Vec3>,
    pub velocities: Vec<Velocity2>,
    pub egos: Vec<Pose>,
    /// `now - record timestamp`, never negative.
    pub dts: Vec<f64>,
    pub scores: Vec<f64>,
    pub padded: Vec<bool>,
}

impl MemoryView {
    pub fn rows(&self) -> usize {
        self.centers.len()
    }
}

/// FIFO queue of the last `n_frames` saved frame blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryQueue {
    n_frames: usize,
    records_per_frame: usize,
    dim: usize,
    save_interval: u64,
    blocks: VecDeque<FrameBlock>,
}

impl MemoryQueue {
    pub fn new(n_frames: usize, records_per_frame: usize, dim: usize, save_interval: u64) -> Result<Self> {
        if n_frames == 0 || records_per_frame == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "memory queue needs positive sizes, got n_frames={n_frames}, records_per_frame={records_per_frame}, dim={dim}"
            )));
        }
        if save_interval == 0 {
            return Err(Error::Config("save_interval must be >= 1".into()));
        }
        Ok(MemoryQueue {
            n_frames,
            records_per_frame,
            dim,
            save_interval,
            blocks: VecDeque::new(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn records_per_frame(&self) -> usize {
        self.records_per_frame
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn save_interval(&self) -> u64 {
        self.save_interval
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn newest_timestamp(&self) -> Option<f64> {
        self.blocks.back().map(|b| b.timestamp)
    }

    pub fn clear(&mut self) {
        self.blocks.clear();
    }

    /// True on steps where the engine should save a block: every
    /// `save_interval`-th step, counting from step 0.
    pub fn should_save(&self, step_index: u64) -> bool {
        step_index % self.save_interval == 0
    }

    /// Append a frame block, evicting the oldest once more than `n_frames`
    /// are held. Timestamps must be strictly increasing across pushes.
    pub fn push_frame(&mut self, block: FrameBlock) -> Result<()> {
        if block.records.len() != self.records_per_frame {
            return Err(Error::Config(format!(
                "frame block has {} records, queue stores {} per frame",
                block.records.len(),
                self.records_per_frame
            )));
        }
        for r in &block.records {
            if r.embedding.len() != self.dim {
                return Err(Error::Config(format!(
                    "record embedding width {} != queue dim {}",
                    r.embedding.len(),
                    self.dim
                )));
            }
        }
        if let Some(newest) = self.newest_timestamp() {
            if block.timestamp <= newest {
                return Err(Error::Ordering(format!(
                    "frame timestamp {} is not after newest stored timestamp {}",
                    block.timestamp, newest
                )));
            }
        }
        self.blocks.push_back(block);
        while self.blocks.len() > self.n_frames {
            self.blocks.pop_front();
        }
        Ok(())
    }

    /// Flatten all stored records for the decoder, deriving each record's
    /// elapsed time against `now`.
    pub fn gather(&self, now: f64) -> MemoryView {
        if let Some(newest) = self.newest_timestamp() {
            assert!(
                now >= newest,
                "gather clock {now} precedes newest stored timestamp {newest}"
            );
        }
        let rows = self.blocks.len() * self.records_per_frame;
        let mut data = Vec::with_capacity(rows * self.dim);
        let mut centers = Vec::with_capacity(rows);
        let mut velocities = Vec::with_capacity(rows);
        let mut egos = Vec::with_capacity(rows);
        let mut dts = Vec::with_capacity(rows);
        let mut scores = Vec::with_capacity(rows);
        let mut padded = Vec::with_capacity(rows);
        for block in &self.blocks {
            for r in &block.records {
                data.extend_from_slice(&r.embedding);
                centers.push(r.center);
                velocities.push(r.velocity);
                egos.push(r.ego);
                dts.push(now - r.timestamp);
                scores.push(r.score);
                padded.push(r.padded);
            }
        }
        MemoryView {
            embeddings: Tensor::new(&[rows, self.dim], data),
            centers,
            velocities,
            egos,
            dts,
            scores,
            padded,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("memory queue serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("memory snapshot: {e}")))
    }
}
