//! Deterministic synthetic scenes standing in for a multi-camera perception
//! backbone. A scene is an ego vehicle driving a smooth random trajectory
//! through a field of constant-velocity objects; each frame yields "tokens",
//! linear codes of the visible objects' ego-frame attributes plus gaussian
//! noise, as a real backbone would yield image features.
//!
//! The emission rule is the interesting part: a visible object produces one
//! token per camera that actually projects its center, and nothing else.
//! Objects inside an occlusion episode emit no tokens at all while ground
//! truth keeps listing them, so detectors are scored on occluded frames too;
//! recovering those is exactly what temporal modeling is for.
//!
//! Everything derives from `seed`: the trajectory, object kinematics, the
//! token code matrix, occlusion episodes, and per-frame noise and token
//! order (an independent RNG per frame). Same config, same bytes.
//!
//! Scene files are JSON Lines with one frame per line and nothing else; a
//! zero-frame scene is an empty file.

use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraConfig, Pose, Vec3, Velocity2, WorldBounds};
use crate::tensor::{init_uniform, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    /// Seed of the fixed linear code that turns object attributes into token
    /// channels. It stands in for the camera-plus-backbone sensor stack, so
    /// unlike `seed` it deliberately stays the same across scenes: a detector
    /// trained on one set of scenes must read tokens rendered for another.
    pub code_seed: u64,
    pub frames: u64,
    /// Seconds between frames.
    pub dt: f64,
    pub classes: usize,
    pub n_objects: usize,
    /// Transient clutter tokens added each frame.
    pub n_distractors: usize,
    pub token_dim: usize,
    /// Standard deviation of the gaussian noise added to each token channel.
    pub token_noise: f64,
    /// Speed range for objects of the moving classes; every third class is
    /// static regardless, so scenes carry both sides of the moving/static
    /// evaluation split. A zero range freezes the whole scene.
    pub object_speed_min: f64,
    pub object_speed_max: f64,
    /// Cameras in the ring, evenly spaced over 360 degrees.
    pub cameras: usize,
    pub camera_hfov_deg: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Per-frame chance that a visible object starts an occlusion episode.
    pub occlusion_start_prob: f64,
    pub occlusion_min_frames: u64,
    pub occlusion_max_frames: u64,
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    /// Magnitude bound on the sampled yaw rate, rad/s.
    pub ego_yaw_rate_max: f64,
    /// Frames between resampling the ego controls.
    pub control_interval: u64,
    /// Objects spawn within this radius of a point on the ego's path.
    pub spawn_radius: f64,
    /// Ego-frame box used by training and evaluation to pick the ground
    /// truth a detector is responsible for.
    pub bounds: WorldBounds,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            code_seed: 0xC0DE,
            frames: 30,
            dt: 0.5,
            classes: 3,
            n_objects: 8,
            n_distractors: 3,
            token_dim: 16,
            token_noise: 0.05,
            object_speed_min: 1.5,
            object_speed_max: 6.0,
            cameras: 2,
            camera_hfov_deg: 90.0,
            image_width: 720.0,
            image_height: 480.0,
            occlusion_start_prob: 0.12,
            occlusion_min_frames: 2,
            occlusion_max_frames: 4,
            ego_speed_min: 1.5,
            ego_speed_max: 3.0,
            ego_yaw_rate_max: 0.25,
            control_interval: 8,
            spawn_radius: 18.0,
            bounds: WorldBounds {
                min: Vec3::new(-32.0, -32.0, -2.0),
                max: Vec3::new(32.0, 32.0, 4.0),
            },
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("dt must be positive and finite, got {}", self.dt));
        }
        if self.classes == 0 {
            return fail("need at least one object class".into());
        }
        if self.token_dim == 0 {
            return fail("token_dim must be positive".into());
        }
        if self.token_noise < 0.0 {
            return fail(format!("token_noise must be >= 0, got {}", self.token_noise));
        }
        if !(self.object_speed_min >= 0.0 && self.object_speed_max >= self.object_speed_min) {
            return fail(format!(
                "object speed range [{}, {}] is invalid",
                self.object_speed_min, self.object_speed_max
            ));
        }
        if self.cameras == 0 {
            return fail("the rig needs at least one camera".into());
        }
        if !(self.camera_hfov_deg > 0.0 && self.camera_hfov_deg < 180.0) {
            return fail(format!("camera_hfov_deg must be in (0, 180), got {}", self.camera_hfov_deg));
        }
        if !(0.0..=1.0).contains(&self.occlusion_start_prob) {
            return fail(format!(
                "occlusion_start_prob must be in [0, 1], got {}",
                self.occlusion_start_prob
            ));
        }
        if self.occlusion_min_frames == 0 || self.occlusion_max_frames < self.occlusion_min_frames {
            return fail(format!(
                "occlusion episode length range [{}, {}] is invalid",
                self.occlusion_min_frames, self.occlusion_max_frames
            ));
        }
        if !(self.ego_speed_min >= 0.0 && self.ego_speed_max >= self.ego_speed_min) {
            return fail(format!(
                "ego speed range [{}, {}] is invalid",
                self.ego_speed_min, self.ego_speed_max
            ));
        }
        if self.ego_yaw_rate_max < 0.0 {
            return fail("ego_yaw_rate_max must be >= 0".into());
        }
        if self.control_interval == 0 {
            return fail("control_interval must be >= 1".into());
        }
        if !(self.spawn_radius > 0.0) {
            return fail("spawn_radius must be positive".into());
        }
        self.bounds.validate()
    }

    /// Width of the attribute vector a token linearly encodes.
    pub fn phi_dim(&self) -> usize {
        3 + self.classes + 3 + 2
    }
}

/// One simulated object's ground truth at one frame, in the global frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub id: usize,
    pub class: usize,
    pub center: Vec3,
    /// (length, width, height), meters.
    pub size: Vec3,
    /// Global-frame yaw.
    pub heading: f64,
    pub velocity: Velocity2,
    /// False inside an occlusion episode this frame (the object then emits
    /// no tokens). Camera misses do not clear this flag.
    pub visible: bool,
}

impl GtBox {
    /// Center re-expressed in a frame's ego coordinates.
    pub fn center_in(&self, ego: &Pose) -> Vec3 {
        ego.inverse().apply(self.center)
    }

    /// Heading re-expressed in a frame's ego coordinates.
    pub fn heading_in(&self, ego: &Pose) -> f64 {
        self.heading - ego.yaw()
    }
}

/// Ground truth of one frame before any tokens are rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub time: f64,
    /// Ego pose, mapping ego coordinates to global.
    pub ego: Pose,
    pub objects: Vec<GtBox>,
}

/// The backbone stand-in's output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `[n_tok x token_dim]`, at least one row (an all-zero pad when nothing
    /// was visible).
    pub tokens: Tensor,
    /// One ego-frame reference point per token row.
    pub refs: Vec<Vec3>,
}

/// One fully rendered frame: truth plus tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub time: f64,
    /// Ego pose, mapping ego coordinates to global.
    pub ego: Pose,
    /// `[n_tok x token_dim]`, at least one row.
    pub tokens: Tensor,
    /// One ego-frame reference point per token row.
    pub refs: Vec<Vec3>,
    pub gt: Vec<GtBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub frames: Vec<SimFrame>,
}

/// Splitmix64-style mixer deriving independent RNG seeds from (seed, salt).
pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_SCENE: u64 = 1;
const SALT_CODE: u64 = 2;
const SALT_FRAME_BASE: u64 = 0x1000;

/// Kinematics and identity of one object; position is linear in time.
#[derive(Debug, Clone)]
struct ObjectSpec {
    id: usize,
    class: usize,
    pos0: Vec3,
    velocity: Velocity2,
    size: Vec3,
    heading: f64,
    /// Per-frame occlusion mask, length = frames.
    occluded: Vec<bool>,
}

impl ObjectSpec {
    fn center_at(&self, t: f64) -> Vec3 {
        Vec3::new(self.pos0.x + self.velocity.x * t, self.pos0.y + self.velocity.y * t, self.pos0.z)
    }
}

/// Per-class base size; classes beyond the table cycle.
fn class_size(class: usize) -> Vec3 {
    match class % 3 {
        0 => Vec3::new(4.2, 1.9, 1.6),
        1 => Vec3::new(0.8, 0.7, 1.7),
        _ => Vec3::new(2.0, 0.6, 1.1),
    }
}

/// Class 2 (and every third class) is static so scenes always carry both
/// sides of the moving/static evaluation split.
fn class_is_static(class: usize) -> bool {
    class % 3 == 2
}

fn camera_ring(cfg: &SceneConfig) -> Vec<CameraConfig> {
    (0..cfg.cameras)
        .map(|i| {
            let yaw = i as f64 * std::f64::consts::TAU / cfg.cameras as f64;
            CameraConfig::on_ego(
                yaw,
                cfg.camera_hfov_deg.to_radians(),
                cfg.image_width,
                cfg.image_height,
            )
        })
        .collect()
}

/// Attribute vector of one (possibly fake) object in the current ego frame.
fn phi(cfg: &SceneConfig, center_ego: Vec3, class: usize, size: Vec3, heading_ego: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(cfg.phi_dim());
    v.extend_from_slice(&[center_ego.x, center_ego.y, center_ego.z]);
    for c in 0..cfg.classes {
        v.push(if c == class { 1.0 } else { 0.0 });
    }
    v.extend_from_slice(&[size.x, size.y, size.z]);
    v.extend_from_slice(&[heading_ego.sin(), heading_ego.cos()]);
    v
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * sigma
}

/// Encode an attribute vector through the scene's code matrix, plus gaussian
/// noise of standard deviation `noise`.
fn encode(code: &Tensor, attrs: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (phi_dim, token_dim) = code.dims2();
    assert_eq!(attrs.len(), phi_dim, "attribute width {} != code rows {phi_dim}", attrs.len());
    let mut out = vec![0.0; token_dim];
    for (i, &a) in attrs.iter().enumerate() {
        for j in 0..token_dim {
            out[j] += a * code.data()[i * token_dim + j];
        }
    }
    for o in out.iter_mut() {
        *o += gauss(rng, noise);
    }
    out
}

/// The fixed random linear code shared by every frame of every scene that
/// uses the same `code_seed`.
fn code_matrix(cfg: &SceneConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.code_seed, SALT_CODE));
    init_uniform(&mut rng, &[cfg.phi_dim(), cfg.token_dim], cfg.phi_dim())
}

/// Ground truth only: ego trajectory, object kinematics, and per-frame
/// visibility. Tokens come from `render_tokens`.
pub fn generate_scene(config: &SceneConfig) -> Result<Vec<FrameTruth>> {
    config.validate()?;
    let cfg = config;
    if cfg.frames == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_SCENE));

    // Ego trajectory: piecewise-constant speed and yaw rate, Euler-integrated.
    // Consumption order from `rng` is fixed: trajectory, objects, occlusion
    // masks.
    let mut egos = Vec::with_capacity(cfg.frames as usize);
    let (mut yaw, mut pos) = (0.0f64, Vec3::zero());
    let (mut speed, mut yaw_rate) = (0.0, 0.0);
    for f in 0..cfg.frames {
        if f % cfg.control_interval == 0 {
            speed = rng.gen_range(cfg.ego_speed_min..=cfg.ego_speed_max);
            yaw_rate = rng.gen_range(-cfg.ego_yaw_rate_max..=cfg.ego_yaw_rate_max);
        }
        if f > 0 {
            yaw += yaw_rate * cfg.dt;
            pos = pos.add(Vec3::new(yaw.cos() * speed * cfg.dt, yaw.sin() * speed * cfg.dt, 0.0));
        }
        egos.push(Pose::from_yaw(yaw, pos));
    }

    // Objects are anchored near the ego's position at a random frame so the
    // stream always has work nearby, then integrated back to t = 0.
    let mut objects = Vec::with_capacity(cfg.n_objects);
    for id in 0..cfg.n_objects {
        let class = id % cfg.classes;
        let anchor_frame = rng.gen_range(0..cfg.frames);
        let anchor = egos[anchor_frame as usize].translation();
        let r = cfg.spawn_radius * rng.gen::<f64>().sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let size = class_size(class).scale(0.9 + 0.2 * rng.gen::<f64>());
        let (velocity, heading) = if class_is_static(class) {
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            (Velocity2::new(0.0, 0.0), heading)
        } else {
            let speed = rng.gen_range(cfg.object_speed_min..=cfg.object_speed_max);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            (Velocity2::new(speed * dir.cos(), speed * dir.sin()), dir)
        };
        let t_anchor = anchor_frame as f64 * cfg.dt;
        let at_anchor = Vec3::new(anchor.x + r * theta.cos(), anchor.y + r * theta.sin(), size.z / 2.0);
        let pos0 = Vec3::new(
            at_anchor.x - velocity.x * t_anchor,
            at_anchor.y - velocity.y * t_anchor,
            at_anchor.z,
        );
        objects.push(ObjectSpec { id, class, pos0, velocity, size, heading, occluded: Vec::new() });
    }

    // Occlusion episodes: a simple renewal process per object.
    for obj in objects.iter_mut() {
        let mut mask = vec![false; cfg.frames as usize];
        let mut f = 0u64;
        while f < cfg.frames {
            if rng.gen::<f64>() < cfg.occlusion_start_prob {
                let len = rng.gen_range(cfg.occlusion_min_frames..=cfg.occlusion_max_frames);
                for g in f..(f + len).min(cfg.frames) {
                    mask[g as usize] = true;
                }
                f += len;
            } else {
                f += 1;
            }
        }
        obj.occluded = mask;
    }

    let mut frames = Vec::with_capacity(cfg.frames as usize);
    for f in 0..cfg.frames {
        let time = f as f64 * cfg.dt;
        let objects = objects
            .iter()
            .map(|obj| GtBox {
                id: obj.id,
                class: obj.class,
                center: obj.center_at(time),
                size: obj.size,
                heading: obj.heading,
                velocity: obj.velocity,
                visible: !obj.occluded[f as usize],
            })
            .collect();
        frames.push(FrameTruth { time, ego: egos[f as usize], objects });
    }
    Ok(frames)
}

/// The emission rule: each visible object contributes one token per camera
/// whose projection of its center succeeds, then distractor tokens are
/// appended and the whole set is shuffled (seeded by frame time, so rendering
/// a frame is a pure function of config and truth).
pub fn render_tokens(truth: &FrameTruth, cfg: &SceneConfig) -> TokenSet {
    let code = code_matrix(cfg);
    let cams = camera_ring(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_FRAME_BASE ^ truth.time.to_bits()));
    let ego_inv = truth.ego.inverse();

    let mut rows: Vec<(Vec<f64>, Vec3)> = Vec::new();
    for g in &truth.objects {
        if !g.visible {
            continue;
        }
        let center_ego = ego_inv.apply(g.center);
        let heading_ego = g.heading - truth.ego.yaw();
        let attrs = phi(cfg, center_ego, g.class, g.size, heading_ego);
        for cam in &cams {
            if cam.project_point(center_ego).is_none() {
                continue;
            }
            let token = encode(&code, &attrs, cfg.token_noise, &mut rng);
            let rn = 0.1 * cfg.token_noise;
            let reference = Vec3::new(
                center_ego.x + gauss(&mut rng, rn),
                center_ego.y + gauss(&mut rng, rn),
                center_ego.z + gauss(&mut rng, rn),
            );
            rows.push((token, reference));
        }
    }

    // Clutter: plausible-looking codes at random nearby points, never in the
    // ground truth.
    for _ in 0..cfg.n_distractors {
        let r = 0.6 * cfg.spawn_radius * rng.gen::<f64>().sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let class = rng.gen_range(0..cfg.classes);
        let size = class_size(class).scale(0.8 + 0.4 * rng.gen::<f64>());
        let center_ego = Vec3::new(r * theta.cos(), r * theta.sin(), size.z / 2.0);
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let attrs = phi(cfg, center_ego, class, size, heading);
        rows.push((encode(&code, &attrs, cfg.token_noise, &mut rng), center_ego));
    }

    // Fisher-Yates, so token order carries no information about identity.
    for i in (1..rows.len()).rev() {
        let j = rng.gen_range(0..=i);
        rows.swap(i, j);
    }

    // The decoder requires at least one token per frame.
    if rows.is_empty() {
        rows.push((vec![0.0; cfg.token_dim], Vec3::zero()));
    }

    let tokens: Vec<Vec<f64>> = rows.iter().map(|(t, _)| t.clone()).collect();
    let refs: Vec<Vec3> = rows.iter().map(|(_, r)| *r).collect();
    TokenSet { tokens: Tensor::from_rows(&tokens), refs }
}

pub fn simulate(config: &SceneConfig) -> Result<Scene> {
    let truths = generate_scene(config)?;
    let frames = truths
        .into_iter()
        .map(|truth| {
            let TokenSet { tokens, refs } = render_tokens(&truth, config);
            SimFrame { time: truth.time, ego: truth.ego, tokens, refs, gt: truth.objects }
        })
        .collect();
    Ok(Scene { config: config.clone(), frames })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    id: usize,
    class: usize,
    center: [f64; 3],
    size: [f64; 3],
    heading: f64,
    velocity: [f64; 2],
    visible: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokensRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// The on-disk shape of one line: frame time, the ego pose as 16 row-major
/// reals, ground truth, and the token block with its reference points.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    time: f64,
    ego: Vec<f64>,
    objects: Vec<ObjectRecord>,
    tokens: TokensRecord,
    refs: Vec<[f64; 3]>,
}

impl From<&SimFrame> for FrameRecord {
    fn from(f: &SimFrame) -> Self {
        let (n_tok, width) = f.tokens.dims2();
        FrameRecord {
            time: f.time,
            ego: f.ego.to_flat().to_vec(),
            objects: f
                .gt
                .iter()
                .map(|g| ObjectRecord {
                    id: g.id,
                    class: g.class,
                    center: [g.center.x, g.center.y, g.center.z],
                    size: [g.size.x, g.size.y, g.size.z],
                    heading: g.heading,
                    velocity: [g.velocity.x, g.velocity.y],
                    visible: g.visible,
                })
                .collect(),
            tokens: TokensRecord { shape: [n_tok, width], data: f.tokens.data().to_vec() },
            refs: f.refs.iter().map(|r| [r.x, r.y, r.z]).collect(),
        }
    }
}

/// One JSON object per line, one line per frame; an empty scene writes an
/// empty file.
pub fn write_scene<W: IoWrite>(frames: &[SimFrame], mut w: W) -> Result<()> {
    for frame in frames {
        let record = FrameRecord::from(frame);
        writeln!(w, "{}", serde_json::to_string(&record).expect("frame serializes"))?;
    }
    Ok(())
}

pub fn read_scene<R: BufRead>(r: R) -> Result<Vec<SimFrame>> {
    let mut frames: Vec<SimFrame> = Vec::new();
    let mut width_seen: Option<usize> = None;
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(format!("frame: {e}")))?;
        let ego = Pose::try_from_flat(&rec.ego).map_err(|e| parse_err(format!("ego pose: {e}")))?;
        let [n_tok, width] = rec.tokens.shape;
        if n_tok == 0 {
            return Err(parse_err("frame has no tokens".into()));
        }
        if rec.tokens.data.len() != n_tok * width {
            return Err(parse_err(format!(
                "token block claims {n_tok} x {width} but carries {} values",
                rec.tokens.data.len()
            )));
        }
        match width_seen {
            None => width_seen = Some(width),
            Some(w) if w != width => {
                return Err(parse_err(format!("token width {width} != earlier frames' {w}")));
            }
            _ => {}
        }
        if rec.refs.len() != n_tok {
            return Err(parse_err(format!(
                "{} reference points for {n_tok} tokens",
                rec.refs.len()
            )));
        }
        if !rec.time.is_finite() {
            return Err(parse_err(format!("non-finite frame time {}", rec.time)));
        }
        if let Some(prev) = frames.last() {
            if rec.time <= prev.time {
                return Err(parse_err(format!(
                    "frame time {} not after previous {}",
                    rec.time, prev.time
                )));
            }
        }
        frames.push(SimFrame {
            time: rec.time,
            ego,
            tokens: Tensor::new(&[n_tok, width], rec.tokens.data),
            refs: rec.refs.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect(),
            gt: rec
                .objects
                .into_iter()
                .map(|o| GtBox {
                    id: o.id,
                    class: o.class,
                    center: Vec3::new(o.center[0], o.center[1], o.center[2]),
                    size: Vec3::new(o.size[0], o.size[1], o.size[2]),
                    heading: o.heading,
                    velocity: Velocity2::new(o.velocity[0], o.velocity[1]),
                    visible: o.visible,
                })
                .collect(),
        });
    }
    Ok(frames)
}

pub fn write_scene_file(frames: &[SimFrame], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_scene(frames, std::io::BufWriter::new(file))
}

pub fn read_scene_file(path: &Path) -> Result<Vec<SimFrame>> {
    let file = std::fs::File::open(path)?;
    read_scene(std::io::BufReader::new(file))
}
