//! Greedy multi-object tracking on top of per-frame detections. Tracks hold
//! a global-frame center and velocity; at each step every live track is
//! advanced by its constant-velocity prediction, and detections (best score
//! first) claim the nearest predicted track of their class within a gate.
//! Unclaimed detections open tracks; tracks unseen for more than `max_age`
//! steps are dropped, so brief occlusions do not break identities.

use serde::{Deserialize, Serialize};

use crate::engine::Box3D;
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3, Velocity2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Max planar distance between a detection and a predicted track center.
    pub gate: f64,
    /// Steps a track survives without a detection.
    pub max_age: u64,
    /// Detections below this score are not tracked.
    pub min_score: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { gate: 2.0, max_age: 3, min_score: 0.3 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate > 0.0) {
            return Err(Error::Config(format!("gate must be positive, got {}", self.gate)));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config(format!(
                "min_score must be in [0, 1], got {}",
                self.min_score
            )));
        }
        Ok(())
    }
}

/// One confirmed identity at one frame, global frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackedBox {
    pub id: u64,
    pub class: usize,
    pub center: Vec3,
    pub velocity: Velocity2,
    pub score: f64,
}

#[derive(Debug, Clone)]
struct Track {
    id: u64,
    class: usize,
    center: Vec3,
    velocity: Velocity2,
    score: f64,
    last_seen: f64,
    misses: u64,
}

impl Track {
    fn predicted(&self, now: f64) -> Vec3 {
        let dt = now - self.last_seen;
        Vec3::new(
            self.center.x + self.velocity.x * dt,
            self.center.y + self.velocity.y * dt,
            self.center.z,
        )
    }
}

#[derive(Debug, Default)]
pub struct Tracker {
    cfg: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_time: Option<f64>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Tracker { cfg, tracks: Vec::new(), next_id: 0, last_time: None })
    }

    pub fn live_tracks(&self) -> usize {
        self.tracks.len()
    }

    /// Consume one frame of ego-frame detections; returns this frame's
    /// visible identities (matched or newly opened), in descending score.
    pub fn step(&mut self, dets: &[Box3D], ego: &Pose, now: f64) -> Result<Vec<TrackedBox>> {
        if let Some(prev) = self.last_time {
            if now <= prev {
                return Err(Error::Ordering(format!(
                    "tracker time {now} is not after previous step time {prev}"
                )));
            }
        }
        self.last_time = Some(now);

        // Global-frame candidates, best score first (ties keep input order).
        let mut candidates: Vec<(f64, usize, Box3D)> = dets
            .iter()
            .filter(|b| b.score() >= self.cfg.min_score)
            .enumerate()
            .map(|(i, b)| (b.score(), i, b.to_global(ego)))
            .collect();
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must not be NaN").then(a.1.cmp(&b.1)));

        let mut claimed = vec![false; self.tracks.len()];
        let mut out = Vec::with_capacity(candidates.len());
        let mut opened: Vec<Track> = Vec::new();
        for (score, _, det) in candidates {
            let class = det.class_id();
            let mut best: Option<(usize, f64)> = None;
            for (ti, t) in self.tracks.iter().enumerate() {
                if claimed[ti] || t.class != class {
                    continue;
                }
                let d = t.predicted(now).dist_xy(det.center);
                if d <= self.cfg.gate && best.map(|(_, bd)| d < bd).unwrap_or(true) {
                    best = Some((ti, d));
                }
            }
            let id = match best {
                Some((ti, _)) => {
                    claimed[ti] = true;
                    let t = &mut self.tracks[ti];
                    t.center = det.center;
                    t.velocity = det.velocity;
                    t.score = score;
                    t.last_seen = now;
                    t.misses = 0;
                    t.id
                }
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    opened.push(Track {
                        id,
                        class,
                        center: det.center,
                        velocity: det.velocity,
                        score,
                        last_seen: now,
                        misses: 0,
                    });
                    id
                }
            };
            out.push(TrackedBox { id, class, center: det.center, velocity: det.velocity, score });
        }

        for (ti, t) in self.tracks.iter_mut().enumerate() {
            if !claimed[ti] {
                t.misses += 1;
            }
        }
        let max_age = self.cfg.max_age;
        self.tracks.retain(|t| t.misses <= max_age);
        self.tracks.extend(opened);
        Ok(out)
    }
}
