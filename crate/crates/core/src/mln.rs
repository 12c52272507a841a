//! Motion-conditioned layer normalization and 3D position encoding.
//!
//! Every remembered query carries how its frame relates to the present:
//! relative ego pose, predicted object velocity, elapsed time. Two small nets
//! turn that 15-value motion vector into a per-row scale and shift, which
//! modulate the affine-free layer norm of both the content embedding and the
//! position encoding of the same row, with the same pair. Current-frame
//! queries go through the identical path with zero motion (identity relative
//! pose, zero velocity, zero elapsed time), so the decoder never sees an
//! unmodulated stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec3, Velocity2, WorldBounds};
use crate::tensor::{mlp_forward, Activation, Mlp, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Rotation (9, row-major) + translation (3) + planar velocity (2) + elapsed
/// time (1).
pub const MOTION_VECTOR_DIM: usize = 15;

/// How a stored query's frame relates to the current one.
#[derive(Debug, Clone, Copy)]
pub struct MotionAttrs {
    /// Transform from the stored frame's ego coordinates to the current ones.
    pub rel: Pose,
    /// Predicted object velocity, global frame.
    pub velocity: Velocity2,
    /// Seconds elapsed since the record was written; never negative.
    pub dt: f64,
}

impl MotionAttrs {
    /// The convention for current-frame queries: no motion at all.
    pub fn current() -> Self {
        MotionAttrs { rel: Pose::identity(), velocity: Velocity2::zero(), dt: 0.0 }
    }
}

/// Flatten motion attributes in the fixed order the conditioning nets were
/// trained on.
pub fn motion_vector(attrs: &MotionAttrs) -> [f64; MOTION_VECTOR_DIM] {
    let mut out = [0.0; MOTION_VECTOR_DIM];
    out[..9].copy_from_slice(&attrs.rel.rotation_flat());
    let t = attrs.rel.translation();
    out[9] = t.x;
    out[10] = t.y;
    out[11] = t.z;
    out[12] = attrs.velocity.x;
    out[13] = attrs.velocity.y;
    out[14] = attrs.dt;
    out
}

/// Stack motion vectors into a `[rows x 15]` tensor.
pub fn motion_matrix(attrs: &[MotionAttrs]) -> Tensor {
    let mut data = Vec::with_capacity(attrs.len() * MOTION_VECTOR_DIM);
    for a in attrs {
        data.extend_from_slice(&motion_vector(a));
    }
    Tensor::new(&[attrs.len(), MOTION_VECTOR_DIM], data)
}

/// Parameters of the two conditioning nets: `scale_net` produces the
/// per-row scale, `shift_net` the per-row shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionNormParams {
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

impl MotionNormParams {
    /// `hidden = true` gives each net one ReLU hidden layer of width `d`;
    /// otherwise both are purely linear 15 -> d maps.
    pub fn init<R: Rng>(rng: &mut R, d: usize, hidden: bool) -> Self {
        let widths: Vec<usize> = if hidden {
            vec![MOTION_VECTOR_DIM, d, d]
        } else {
            vec![MOTION_VECTOR_DIM, d]
        };
        MotionNormParams {
            scale_net: Mlp::init(rng, &widths, Activation::Relu),
            shift_net: Mlp::init(rng, &widths, Activation::Relu),
        }
    }
}

/// Run the conditioning nets on a `[rows x 15]` motion matrix; returns
/// `(scale, shift)`, each `[rows x d]`. Layers come pre-mounted on the tape
/// so parameter gradients flow when recording.
pub fn mln_affine(
    tape: &mut Tape,
    motion: Var,
    scale_layers: &[(Var, Var)],
    shift_layers: &[(Var, Var)],
) -> (Var, Var) {
    assert_eq!(
        tape.shape(motion)[1],
        MOTION_VECTOR_DIM,
        "motion matrix must be [rows x {MOTION_VECTOR_DIM}], got {:?}",
        tape.shape(motion)
    );
    let gamma = mlp_forward(tape, motion, scale_layers, Activation::Relu);
    let beta = mlp_forward(tape, motion, shift_layers, Activation::Relu);
    (gamma, beta)
}

/// Motion-conditioned norm of the two query streams. Both the content rows
/// and the position-encoding rows are layer-normalized (affine-free) and then
/// modulated by the same `(scale, shift)` pair, row for row.
pub fn mln_apply(
    tape: &mut Tape,
    content: Var,
    pe_raw: Var,
    scale: Var,
    shift: Var,
) -> (Var, Var) {
    assert_eq!(
        tape.shape(content),
        tape.shape(pe_raw),
        "content and position streams must agree in shape: {:?} vs {:?}",
        tape.shape(content),
        tape.shape(pe_raw)
    );
    let c_norm = tape.layer_norm(content, LAYER_NORM_EPS);
    let c_scaled = tape.mul(c_norm, scale);
    let c_out = tape.add(c_scaled, shift);
    let p_norm = tape.layer_norm(pe_raw, LAYER_NORM_EPS);
    let p_scaled = tape.mul(p_norm, scale);
    let p_out = tape.add(p_scaled, shift);
    (c_out, p_out)
}

/// Normalize ego-frame points into [0, 1]^3 rows (unclamped).
pub fn normalize_points(bounds: &WorldBounds, pts: &[Vec3]) -> Tensor {
    let mut data = Vec::with_capacity(pts.len() * 3);
    for &p in pts {
        data.extend_from_slice(&bounds.normalize(p));
    }
    Tensor::new(&[pts.len(), 3], data)
}

/// Sinusoidal expansion of normalized coordinates: for each octave `k` in
/// `0..freqs`, append `sin(pi 2^k x)` then `cos(pi 2^k x)` per coordinate,
/// giving `[n x 6*freqs]`.
pub fn sinusoidal_expand(tape: &mut Tape, pts_norm: Var, freqs: usize) -> Var {
    assert!(freqs >= 1, "need at least one frequency octave");
    assert_eq!(
        tape.shape(pts_norm)[1],
        3,
        "points must be [n x 3], got {:?}",
        tape.shape(pts_norm)
    );
    let mut acc: Option<Var> = None;
    for k in 0..freqs {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        let scaled = tape.scale(pts_norm, w);
        let s = tape.sin(scaled);
        let c = tape.cos(scaled);
        let block = tape.concat_cols(s, c);
        acc = Some(match acc {
            None => block,
            Some(prev) => tape.concat_cols(prev, block),
        });
    }
    acc.unwrap()
}

/// Full position encoding: sinusoidal expansion followed by the mounted
/// encoder MLP (widths `6*freqs -> ... -> d`).
pub fn position_encode(
    tape: &mut Tape,
    pts_norm: Var,
    freqs: usize,
    psi_layers: &[(Var, Var)],
) -> Var {
    let expanded = sinusoidal_expand(tape, pts_norm, freqs);
    mlp_forward(tape, expanded, psi_layers, Activation::Relu)
}

/// Encoder MLP sized for `position_encode`: one ReLU hidden layer of width d.
pub fn init_position_encoder<R: Rng>(rng: &mut R, freqs: usize, d: usize) -> Mlp {
    Mlp::init(rng, &[6 * freqs, d, d], Activation::Relu)
}

/// Mount an MLP's layers on a tape as constants (inference) or leaves would
/// be bound by the caller when gradients are wanted.
pub fn mount_mlp_constant(tape: &mut Tape, mlp: &Mlp) -> Vec<(Var, Var)> {
    mlp.layers
        .iter()
        .map(|l| (tape.constant(&l.w), tape.constant(&l.b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_multi;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn motion_vector_layout() {
        let mv = motion_vector(&MotionAttrs::current());
        assert_eq!(
            mv,
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );

        let attrs = MotionAttrs {
            rel: Pose::from_translation(Vec3::new(1.5, -2.0, 0.25)),
            velocity: Velocity2::new(3.0, 4.0),
            dt: 0.5,
        };
        let mv = motion_vector(&attrs);
        assert_eq!(&mv[9..12], &[1.5, -2.0, 0.25]);
        assert_eq!(&mv[12..], &[3.0, 4.0, 0.5]);

        let yawed = MotionAttrs {
            rel: Pose::from_yaw(FRAC_PI_2, Vec3::zero()),
            velocity: Velocity2::zero(),
            dt: 0.0,
        };
        let mv = motion_vector(&yawed);
        for (got, want) in mv[..9].iter().zip([0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_affine_reduces_to_plain_layer_norm() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[2, 4], vec![0.1, 2.0, -1.0, 0.4, 5.0, 5.5, 4.5, 5.1]));
        let ones = tape.constant(&Tensor::new(&[2, 4], vec![1.0; 8]));
        let zeros = tape.constant(&Tensor::zeros(&[2, 4]));
        let (c, p) = mln_apply(&mut tape, x, x, ones, zeros);
        let plain = tape.layer_norm(x, LAYER_NORM_EPS);
        assert_eq!(tape.value(c), tape.value(plain));
        assert_eq!(tape.value(p), tape.value(plain));
    }

    #[test]
    fn zero_content_rows_come_out_as_the_shift() {
        let mut tape = Tape::new();
        let zeros_in = tape.constant(&Tensor::zeros(&[3, 4]));
        let scale = tape.constant(&Tensor::new(&[3, 4], vec![2.0; 12]));
        let shift = tape.constant(&Tensor::new(&[3, 4], (0..12).map(|i| i as f64).collect()));
        let (c, _) = mln_apply(&mut tape, zeros_in, zeros_in, scale, shift);
        // LN of an all-zero row is zero, so only the shift survives.
        let want: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(tape.value(c), &want[..]);
    }

    #[test]
    fn both_streams_share_the_same_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 8;
        let params = MotionNormParams::init(&mut rng, d, true);
        let attrs = vec![
            MotionAttrs {
                rel: Pose::from_yaw(0.3, Vec3::new(1.0, 0.0, 0.0)),
                velocity: Velocity2::new(2.0, -1.0),
                dt: 0.5,
            },
            MotionAttrs::current(),
        ];
        let mut tape = Tape::new();
        let mv = tape.constant(&motion_matrix(&attrs));
        let scale_l = mount_mlp_constant(&mut tape, &params.scale_net);
        let shift_l = mount_mlp_constant(&mut tape, &params.shift_net);
        let (scale, shift) = mln_affine(&mut tape, mv, &scale_l, &shift_l);
        let x = crate::tensor::init_uniform(&mut rng, &[2, d], 1);
        let xv = tape.constant(&x);
        // Identical inputs on both streams must produce identical outputs,
        // because scale and shift are shared, not re-generated per stream.
        let (c, p) = mln_apply(&mut tape, xv, xv, scale, shift);
        assert_eq!(tape.value(c), tape.value(p));
    }

    #[test]
    fn different_motion_changes_the_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let params = MotionNormParams::init(&mut rng, 6, true);
        let a = MotionAttrs::current();
        let b = MotionAttrs {
            rel: Pose::from_yaw(0.7, Vec3::new(3.0, -1.0, 0.0)),
            velocity: Velocity2::new(5.0, 0.0),
            dt: 1.5,
        };
        let mut tape = Tape::new();
        let mv = tape.constant(&motion_matrix(&[a, b]));
        let scale_l = mount_mlp_constant(&mut tape, &params.scale_net);
        let shift_l = mount_mlp_constant(&mut tape, &params.shift_net);
        let (scale, _) = mln_affine(&mut tape, mv, &scale_l, &shift_l);
        let rows = tape.value(scale);
        let (r0, r1) = (&rows[..6], &rows[6..]);
        assert!(r0.iter().zip(r1).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn sinusoidal_expansion_hand_case() {
        let mut tape = Tape::new();
        let pts = tape.constant(&Tensor::new(&[1, 3], vec![0.5, 0.0, 1.0]));
        let out = sinusoidal_expand(&mut tape, pts, 2);
        let v = tape.value(out);
        assert_eq!(v.len(), 12);
        // Octave 0: sin(pi/2)=1, sin(0)=0, sin(pi)~0; cos(pi/2)~0, cos(0)=1, cos(pi)=-1.
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
        assert!(v[3].abs() < 1e-12);
        assert!((v[4] - 1.0).abs() < 1e-12);
        assert!((v[5] + 1.0).abs() < 1e-12);
        // Octave 1 doubles the phase: sin(pi)~0, cos(pi)=-1, cos(2pi)=1.
        assert!(v[6].abs() < 1e-12);
        assert!((v[9] + 1.0).abs() < 1e-12);
        assert!((v[11] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn position_encoding_distinguishes_distant_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = init_position_encoder(&mut rng, 4, 8);
        let bounds = WorldBounds {
            min: Vec3::new(-32.0, -32.0, -2.0),
            max: Vec3::new(32.0, 32.0, 4.0),
        };
        let pts = normalize_points(&bounds, &[Vec3::new(1.0, 2.0, 0.0), Vec3::new(-20.0, 15.0, 1.0)]);
        let mut tape = Tape::new();
        let pv = tape.constant(&pts);
        let layers = mount_mlp_constant(&mut tape, &psi);
        let enc = position_encode(&mut tape, pv, 4, &layers);
        assert_eq!(tape.shape(enc), &[2, 8]);
        let v = tape.value(enc);
        let (a, b) = (&v[..8], &v[8..]);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-6));

        // Zero encoder collapses everything to zero.
        let zero_psi = Mlp {
            layers: vec![crate::tensor::Linear::zeros(24, 8)],
            activation: Activation::Relu,
        };
        let zl = mount_mlp_constant(&mut tape, &zero_psi);
        let enc0 = position_encode(&mut tape, pv, 4, &zl);
        assert_eq!(tape.value(enc0), &[0.0; 16]);
    }

    #[test]
    fn conditioning_nets_and_norm_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = 4;
        let params = MotionNormParams::init(&mut rng, d, true);
        let attrs = vec![
            MotionAttrs {
                rel: Pose::from_yaw(0.2, Vec3::new(0.5, 0.1, 0.0)),
                velocity: Velocity2::new(1.0, 0.5),
                dt: 0.4,
            };
            2
        ];
        let mv = motion_matrix(&attrs);
        let content = crate::tensor::init_uniform(&mut rng, &[2, d], 1);
        let pe = crate::tensor::init_uniform(&mut rng, &[2, d], 1);
        let readout = crate::tensor::init_uniform(&mut rng, &[2, d], 1);

        // Inputs: content, pe, and the first layer of each conditioning net.
        let w_scale = params.scale_net.layers[0].w.clone();
        let w_shift = params.shift_net.layers[0].w.clone();
        let params2 = params.clone();
        let report = finite_diff_check_multi(
            move |tape, vars| {
                let mvv = tape.constant(&mv);
                let scale_l = vec![
                    (vars[2], tape.constant(&params2.scale_net.layers[0].b)),
                    {
                        let l = &params2.scale_net.layers[1];
                        (tape.constant(&l.w), tape.constant(&l.b))
                    },
                ];
                let shift_l = vec![
                    (vars[3], tape.constant(&params2.shift_net.layers[0].b)),
                    {
                        let l = &params2.shift_net.layers[1];
                        (tape.constant(&l.w), tape.constant(&l.b))
                    },
                ];
                let (scale, shift) = mln_affine(tape, mvv, &scale_l, &shift_l);
                let (c, p) = mln_apply(tape, vars[0], vars[1], scale, shift);
                let both = tape.add(c, p);
                let r = tape.constant(&readout);
                let weighted = tape.mul(both, r);
                tape.sum(weighted)
            },
            &[content, pe, w_scale, w_shift],
            1e-4,
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
