//! Center-distance detection metrics. A prediction matches a ground-truth
//! box of its class when their planar (x, y) global-frame centers lie within
//! a distance threshold; average precision is computed per class at the
//! thresholds {0.5, 1, 2, 4} meters with 101-point recall interpolation, and
//! the translation / velocity errors are averaged over true positives at
//! the 2-meter threshold only.
//!
//! Three ground-truth splits are scored: everything, static objects, and
//! moving objects (planar speed at or above `split_speed`). In a split,
//! out-of-split ground truth is "ignore": predictions landing on it are
//! neither true nor false positives. Occluded objects stay in the ground
//! truth everywhere; detectors are expected to carry them through.

use std::io::Write as IoWrite;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Box3D;
use crate::error::{Error, Result};
use crate::geometry::WorldBounds;
use crate::sim::SimFrame;

pub const MATCH_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Translation and velocity errors are averaged at this threshold.
pub const TP_METRIC_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEval {
    pub class: usize,
    /// AP per entry of `MATCH_THRESHOLDS`.
    pub ap: [f64; 4],
    /// Mean planar center error over 2 m true positives; `None` without any.
    pub ate: Option<f64>,
    /// Mean planar velocity error over 2 m true positives.
    pub ave: Option<f64>,
    pub n_gt: usize,
}

impl ClassEval {
    pub fn mean_ap(&self) -> f64 {
        self.ap.iter().sum::<f64>() / self.ap.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitEval {
    pub split: String,
    /// Mean over classes with ground truth of the per-class mean AP.
    pub map: f64,
    pub mate: Option<f64>,
    pub mave: Option<f64>,
    pub classes: Vec<ClassEval>,
}

impl SplitEval {
    /// AP at one entry of `MATCH_THRESHOLDS`, averaged over the classes with
    /// ground truth in this split.
    pub fn ap_at(&self, ti: usize) -> f64 {
        let scored: Vec<&ClassEval> = self.classes.iter().filter(|c| c.n_gt > 0).collect();
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|c| c.ap[ti]).sum::<f64>() / scored.len() as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_speed: f64,
    pub all: SplitEval,
    pub r#static: SplitEval,
    pub moving: SplitEval,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitEval> {
        [&self.all, &self.r#static, &self.moving].into_iter().find(|s| s.split == name)
    }
}

/// One flattened prediction, global frame.
struct Pred {
    frame: usize,
    class: usize,
    score: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

/// One in-bounds ground-truth instance, global frame.
struct Gt {
    frame: usize,
    class: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    moving: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum SplitKind {
    All,
    Static,
    Moving,
}

impl SplitKind {
    fn contains(self, gt: &Gt) -> bool {
        match self {
            SplitKind::All => true,
            SplitKind::Static => !gt.moving,
            SplitKind::Moving => gt.moving,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitKind::All => "all",
            SplitKind::Static => "static",
            SplitKind::Moving => "moving",
        }
    }
}

/// What the scorer needs to know about the detector's operating point: the
/// class count, the ego-frame box it is responsible for (ground truth
/// outside it is not scored), the moving/static split speed, and the score
/// floor below which detections are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub classes: usize,
    pub bounds: WorldBounds,
    pub split_speed: f64,
    pub min_score: f64,
}

/// Score per-frame ego-frame detections against a frame stream. `preds[f]`
/// holds the boxes the detector emitted for frame `f`.
pub fn evaluate(
    frames: &[SimFrame],
    preds: &[Vec<Box3D>],
    params: &EvalParams,
) -> Result<EvalReport> {
    if preds.len() != frames.len() {
        return Err(Error::Config(format!(
            "{} prediction frames for a {}-frame scene",
            preds.len(),
            frames.len()
        )));
    }
    let split_speed = params.split_speed;
    if !(split_speed >= 0.0) {
        return Err(Error::Config(format!("split_speed must be >= 0, got {split_speed}")));
    }
    if params.classes == 0 {
        return Err(Error::Config("evaluation needs at least one class".into()));
    }
    params.bounds.validate()?;

    let mut flat_preds = Vec::new();
    for (f, frame_preds) in preds.iter().enumerate() {
        let ego = &frames[f].ego;
        for b in frame_preds {
            let score = b.score();
            if score < params.min_score {
                continue;
            }
            let g = b.to_global(ego);
            flat_preds.push(Pred {
                frame: f,
                class: b.class_id(),
                score,
                x: g.center.x,
                y: g.center.y,
                vx: g.velocity.x,
                vy: g.velocity.y,
            });
        }
    }
    // Descending score; ties broken deterministically by frame then order.
    flat_preds.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores must not be NaN")
            .then(a.frame.cmp(&b.frame))
    });

    let bounds = &params.bounds;
    let mut gts = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        let ego_inv = frame.ego.inverse();
        for g in &frame.gt {
            if !bounds.contains(ego_inv.apply(g.center)) {
                continue;
            }
            gts.push(Gt {
                frame: f,
                class: g.class,
                x: g.center.x,
                y: g.center.y,
                vx: g.velocity.x,
                vy: g.velocity.y,
                moving: g.velocity.speed() >= split_speed,
            });
        }
    }

    let classes = params.classes;
    let build = |kind: SplitKind| -> SplitEval {
        let mut class_evals = Vec::new();
        for c in 0..classes {
            let class_gts: Vec<&Gt> = gts.iter().filter(|g| g.class == c).collect();
            let n_in_split = class_gts.iter().filter(|g| kind.contains(g)).count();
            if class_gts.is_empty() {
                continue;
            }
            let class_preds: Vec<&Pred> = flat_preds.iter().filter(|p| p.class == c).collect();
            let mut ap = [0.0; 4];
            let mut ate = None;
            let mut ave = None;
            for (ti, &thr) in MATCH_THRESHOLDS.iter().enumerate() {
                let (curve_ap, tp_dists, tp_verrs) =
                    score_threshold(&class_preds, &class_gts, kind, thr, n_in_split);
                ap[ti] = curve_ap;
                if thr == TP_METRIC_THRESHOLD && !tp_dists.is_empty() {
                    ate = Some(tp_dists.iter().sum::<f64>() / tp_dists.len() as f64);
                    ave = Some(tp_verrs.iter().sum::<f64>() / tp_verrs.len() as f64);
                }
            }
            class_evals.push(ClassEval { class: c, ap, ate, ave, n_gt: n_in_split });
        }
        // Mean over classes that actually have ground truth in this split.
        let scored: Vec<&ClassEval> = class_evals.iter().filter(|c| c.n_gt > 0).collect();
        let map = if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|c| c.mean_ap()).sum::<f64>() / scored.len() as f64
        };
        let mean_opt = |get: fn(&ClassEval) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = scored.iter().filter_map(|c| get(c)).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        SplitEval {
            split: kind.name().to_string(),
            map,
            mate: mean_opt(|c| c.ate),
            mave: mean_opt(|c| c.ave),
            classes: class_evals,
        }
    };

    Ok(EvalReport {
        split_speed,
        all: build(SplitKind::All),
        r#static: build(SplitKind::Static),
        moving: build(SplitKind::Moving),
    })
}

/// Greedy matching at one threshold. Predictions come sorted by descending
/// score; each claims the nearest unclaimed ground truth of its frame within
/// the threshold. Claims on out-of-split ground truth are discarded
/// entirely (ignore), claims inside it are true positives, the rest are
/// false positives. Returns (interpolated AP, TP distances, TP velocity
/// errors).
fn score_threshold(
    preds: &[&Pred],
    gts: &[&Gt],
    kind: SplitKind,
    threshold: f64,
    n_gt: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut used = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    let mut tp_dists = Vec::new();
    let mut tp_verrs = Vec::new();
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.frame != p.frame {
                continue;
            }
            let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
            if d <= threshold && best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((gi, d));
            }
        }
        match best {
            Some((gi, d)) => {
                used[gi] = true;
                if kind.contains(gts[gi]) {
                    tp_flags.push(true);
                    tp_dists.push(d);
                    tp_verrs.push(
                        ((p.vx - gts[gi].vx).powi(2) + (p.vy - gts[gi].vy).powi(2)).sqrt(),
                    );
                }
                // Out-of-split match: drop the prediction from the curve.
            }
            None => tp_flags.push(false),
        }
    }
    if n_gt == 0 {
        return (0.0, tp_dists, tp_verrs);
    }

    // Precision/recall points after each counted prediction, then 101-point
    // interpolated AP.
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(tp_flags.len());
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / n_gt as f64;
        points.push((recall, precision));
    }
    let mut ap = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(recall, _)| *recall + 1e-12 >= r)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        ap += best;
    }
    (ap / 101.0, tp_dists, tp_verrs)
}

/// One row per (split, threshold); translation and velocity errors are
/// defined at the 2 m threshold only, so the other rows leave those cells
/// empty (as does a split without a single true positive). Per-class detail
/// lives in the JSON summary.
pub fn write_csv<W: IoWrite>(report: &EvalReport, mut w: W) -> Result<()> {
    writeln!(w, "split,threshold,ap,mate,mave")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for split in [&report.all, &report.r#static, &report.moving] {
        for (ti, &thr) in MATCH_THRESHOLDS.iter().enumerate() {
            let (mate, mave) = if thr == TP_METRIC_THRESHOLD {
                (opt(split.mate), opt(split.mave))
            } else {
                (String::new(), String::new())
            };
            writeln!(w, "{},{},{},{},{}", split.split, thr, split.ap_at(ti), mate, mave)?;
        }
    }
    Ok(())
}

pub fn write_csv_file(report: &EvalReport, path: &Path) -> Result<()> {
    write_csv(report, std::fs::File::create(path)?)
}

pub fn write_json_file(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3, Velocity2};
    use crate::sim::GtBox;
    use crate::tensor::Tensor;

    /// Frames with identity egos, one pad token each, and the given GT.
    fn frames_with(gt_per_frame: Vec<Vec<GtBox>>) -> Vec<SimFrame> {
        gt_per_frame
            .into_iter()
            .enumerate()
            .map(|(i, gt)| SimFrame {
                time: i as f64 * 0.5,
                ego: Pose::identity(),
                tokens: Tensor::zeros(&[1, 16]),
                refs: vec![Vec3::zero()],
                gt,
            })
            .collect()
    }

    fn params(split_speed: f64, min_score: f64) -> EvalParams {
        EvalParams {
            classes: 3,
            bounds: WorldBounds {
                min: Vec3::new(-32.0, -32.0, -2.0),
                max: Vec3::new(32.0, 32.0, 4.0),
            },
            split_speed,
            min_score,
        }
    }

    fn gt(id: usize, class: usize, x: f64, y: f64, vx: f64, vy: f64) -> GtBox {
        GtBox {
            id,
            class,
            center: Vec3::new(x, y, 1.0),
            size: Vec3::new(2.0, 1.0, 1.5),
            heading: 0.0,
            velocity: Velocity2::new(vx, vy),
            visible: true,
        }
    }

    fn det(class: usize, classes: usize, score: f64, x: f64, y: f64, vx: f64, vy: f64) -> Box3D {
        let mut class_scores = vec![0.0; classes];
        class_scores[class] = score;
        Box3D {
            center: Vec3::new(x, y, 1.0),
            size: Vec3::new(2.0, 1.0, 1.5),
            heading: 0.0,
            velocity: Velocity2::new(vx, vy),
            class_scores,
        }
    }

    #[test]
    fn perfect_detection_scores_one() {
        let frames = frames_with(vec![vec![gt(0, 0, 3.0, 2.0, 0.0, 0.0)]]);
        let preds = vec![vec![det(0, 3, 0.9, 3.0, 2.0, 0.0, 0.0)]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.0)).unwrap();
        assert_eq!(r.all.map, 1.0);
        assert_eq!(r.all.classes[0].ap, [1.0; 4]);
        assert_eq!(r.all.classes[0].ate, Some(0.0));
        assert_eq!(r.all.classes[0].ave, Some(0.0));
        // The object is static, so the moving split has no classes with GT.
        assert_eq!(r.r#static.map, 1.0);
        assert!(r.moving.classes.iter().all(|c| c.n_gt == 0));
    }

    #[test]
    fn higher_scored_false_positive_caps_precision() {
        let frames = frames_with(vec![vec![gt(0, 0, 3.0, 2.0, 0.0, 0.0)]]);
        // The 10-meter-away box outranks the true one.
        let preds = vec![vec![
            det(0, 3, 0.95, 13.0, 2.0, 0.0, 0.0),
            det(0, 3, 0.60, 3.0, 2.0, 0.0, 0.0),
        ]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.0)).unwrap();
        // Max precision at every recall level is 1/2.
        assert_eq!(r.all.classes[0].ap, [0.5; 4]);

        // Scored the other way around, the FP sits after full recall and
        // interpolation ignores it.
        let preds = vec![vec![
            det(0, 3, 0.60, 13.0, 2.0, 0.0, 0.0),
            det(0, 3, 0.95, 3.0, 2.0, 0.0, 0.0),
        ]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.0)).unwrap();
        assert_eq!(r.all.classes[0].ap, [1.0; 4]);
    }

    #[test]
    fn offset_prediction_crosses_thresholds() {
        let frames = frames_with(vec![vec![gt(0, 0, 0.0, 0.0, 1.0, 0.0)]]);
        let preds = vec![vec![det(0, 3, 0.9, 1.5, 0.0, 2.0, 0.0)]];
        let r = evaluate(&frames, &preds, &params(0.5, 0.0)).unwrap();
        let c = &r.all.classes[0];
        assert_eq!(c.ap, [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(c.ate, Some(1.5));
        assert_eq!(c.ave, Some(1.0));
        assert!((r.all.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_uses_ignore_semantics() {
        // One moving and one static object, far apart; a single prediction
        // sits on the moving one.
        let frames = frames_with(vec![vec![
            gt(0, 0, 0.0, 0.0, 3.0, 0.0),
            gt(1, 0, 20.0, 0.0, 0.0, 0.0),
        ]]);
        let preds = vec![vec![det(0, 3, 0.9, 0.0, 0.0, 3.0, 0.0)]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.0)).unwrap();
        // Moving split: its only GT is found.
        assert_eq!(r.moving.classes[0].ap, [1.0; 4]);
        assert_eq!(r.moving.classes[0].n_gt, 1);
        // Static split: the prediction matched out-of-split GT, so it is
        // ignored rather than counted as a false positive; AP is 0 because
        // the static GT went undetected.
        assert_eq!(r.r#static.classes[0].ap, [0.0; 4]);
        // All: one of two found, precision 1 -> AP = 51/101.
        let expect = 51.0 / 101.0;
        for ap in r.all.classes[0].ap {
            assert!((ap - expect).abs() < 1e-12, "{ap}");
        }
    }

    #[test]
    fn occluded_ground_truth_counts() {
        let mut g = gt(0, 0, 3.0, 2.0, 0.0, 0.0);
        g.visible = false;
        let frames = frames_with(vec![vec![g]]);
        let r = evaluate(&frames, &[vec![]], &params(1.0, 0.0)).unwrap();
        assert_eq!(r.all.classes[0].n_gt, 1);
        assert_eq!(r.all.map, 0.0);
        let preds = vec![vec![det(0, 3, 0.9, 3.0, 2.0, 0.0, 0.0)]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.0)).unwrap();
        assert_eq!(r.all.map, 1.0);
    }

    #[test]
    fn out_of_bounds_ground_truth_is_not_scored() {
        let frames = frames_with(vec![vec![gt(0, 0, 100.0, 0.0, 0.0, 0.0)]]);
        let r = evaluate(&frames, &[vec![]], &params(1.0, 0.0)).unwrap();
        assert!(r.all.classes.is_empty());
        assert_eq!(r.all.map, 0.0);
    }

    #[test]
    fn each_ground_truth_matches_at_most_once() {
        // Two predictions near one GT: the second becomes a false positive,
        // halving precision at full recall.
        let frames = frames_with(vec![vec![gt(0, 0, 0.0, 0.0, 0.0, 0.0)]]);
        let preds = vec![vec![
            det(0, 3, 0.9, 0.1, 0.0, 0.0, 0.0),
            det(0, 3, 0.8, 0.2, 0.0, 0.0, 0.0),
        ]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.0)).unwrap();
        assert_eq!(r.all.classes[0].ap, [1.0; 4], "interpolation ignores post-recall FPs");
        let c01 = score_threshold(
            &[],
            &[],
            SplitKind::All,
            0.5,
            0,
        );
        assert_eq!(c01.0, 0.0);
    }

    #[test]
    fn min_score_filters_predictions() {
        let frames = frames_with(vec![vec![gt(0, 0, 0.0, 0.0, 0.0, 0.0)]]);
        let preds = vec![vec![det(0, 3, 0.04, 0.0, 0.0, 0.0, 0.0)]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.05)).unwrap();
        assert_eq!(r.all.map, 0.0);
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        let frames = frames_with(vec![vec![], vec![]]);
        assert!(matches!(evaluate(&frames, &[vec![]], &params(1.0, 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_stable_structure() {
        let frames = frames_with(vec![vec![gt(0, 0, 3.0, 2.0, 1.5, 0.0)]]);
        let preds = vec![vec![det(0, 3, 0.9, 3.0, 2.0, 1.5, 0.0)]];
        let r = evaluate(&frames, &preds, &params(1.0, 0.0)).unwrap();
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "split,threshold,ap,mate,mave");
        // 3 splits x 4 thresholds below the header.
        assert_eq!(lines.len(), 13);
        for (i, split) in ["all", "static", "moving"].iter().enumerate() {
            for (j, thr) in ["0.5", "1", "2", "4"].iter().enumerate() {
                let cells: Vec<&str> = lines[1 + i * 4 + j].split(',').collect();
                assert_eq!(cells.len(), 5);
                assert_eq!(cells[0], *split);
                assert_eq!(cells[1], *thr);
                let ap: f64 = cells[2].parse().unwrap();
                assert!((0.0..=1.0).contains(&ap));
                // Error columns are defined at the 2 m threshold only.
                if *thr != "2" {
                    assert!(cells[3].is_empty() && cells[4].is_empty());
                }
            }
        }
        // The moving object was matched perfectly, so the moving split's 2 m
        // row carries zero translation and velocity error.
        let moving_2m: Vec<&str> = lines[1 + 2 * 4 + 2].split(',').collect();
        assert_eq!(moving_2m[2], "1");
        assert_eq!(moving_2m[3], "0");
        assert_eq!(moving_2m[4], "0");
        // The static split saw no ground truth at all: empty error cells.
        let static_2m: Vec<&str> = lines[1 + 4 + 2].split(',').collect();
        assert_eq!(static_2m[2], "0");
        assert!(static_2m[3].is_empty() && static_2m[4].is_empty());
    }
}
