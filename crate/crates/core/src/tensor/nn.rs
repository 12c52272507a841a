//! Small neural building blocks on top of the tape: seeded parameter init,
//! multi-layer perceptrons, and scaled dot-product multi-head attention.

use rand::Rng;

use super::{Tape, Tensor, Var};

/// Activation applied between MLP layers (never after the last).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, in data order, so a
/// given RNG state always produces the same tensor.
pub fn init_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::new(shape, data)
}

/// One affine layer: `x . w + b` with `w: [in x out]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: init_uniform(rng, &[fan_in, fan_out], fan_in),
            b: init_uniform(rng, &[fan_out], fan_in),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { w: Tensor::zeros(&[fan_in, fan_out]), b: Tensor::zeros(&[fan_out]) }
    }
}

/// MLP parameters; layer widths run input -> hidden... -> output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init<R: Rng>(rng: &mut R, widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths, got {widths:?}");
        let layers = widths.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect();
        Mlp { layers, activation }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().w.shape()[1]
    }
}

// serde derives need Activation to round-trip too.
impl serde::Serialize for Activation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl<'de> serde::Deserialize<'de> for Activation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(serde::de::Error::custom(format!("unknown activation {other:?}"))),
        }
    }
}

/// MLP forward over rows of `x`, given the already-mounted `(w, b)` vars for
/// each layer.
pub fn mlp_forward(tape: &mut Tape, x: Var, layers: &[(Var, Var)], activation: Activation) -> Var {
    assert!(!layers.is_empty(), "mlp_forward needs at least one layer");
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w);
        h = tape.add_bias_row(z, b);
        let is_last = i + 1 == layers.len();
        if !is_last {
            h = match activation {
                Activation::Relu => tape.relu(h),
                Activation::Identity => h,
            };
        }
    }
    h
}

/// Scaled dot-product attention with `heads` heads over width-`d` rows.
///
/// `q: [n_q x d]`, `k`, `v`: `[n_k x d]`. Projections `wq/wk/wv/wo` are all
/// `[d x d]` and bias-free; each head sees a `d/heads` column slice and the
/// head outputs are re-joined before the single output projection. Scores are
/// scaled by `1/sqrt(d/heads)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Var {
    let d = tape.shape(q)[1];
    assert_eq!(
        d % heads,
        0,
        "width {d} not divisible by {heads} heads"
    );
    let n_k = tape.shape(k)[0];
    assert!(n_k >= 1, "attention needs at least one key row");
    assert_eq!(
        tape.shape(k)[0],
        tape.shape(v)[0],
        "key/value row mismatch: {:?} vs {:?}",
        tape.shape(k),
        tape.shape(v)
    );

    let qp = tape.matmul(q, wq);
    let kp = tape.matmul(k, wk);
    let vp = tape.matmul(v, wv);

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut joined: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * dh, dh);
        let kh = tape.slice_cols(kp, h * dh, dh);
        let vh = tape.slice_cols(vp, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let oh = tape.matmul(attn, vh);
        joined = Some(match joined {
            None => oh,
            Some(acc) => tape.concat_cols(acc, oh),
        });
    }
    tape.matmul(joined.unwrap(), wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Tensor {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Tensor::new(&[d, d], data)
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn init_uniform_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = init_uniform(&mut r1, &[16, 8], 16);
        let b = init_uniform(&mut r2, &[16, 8], 16);
        assert_eq!(a, b, "same seed must give bit-identical parameters");
        let bound = 1.0 / 4.0;
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        // Not degenerate.
        assert!(a.data().iter().any(|v| v.abs() > 1e-4));
    }

    #[test]
    fn single_layer_mlp_is_affine() {
        let mut tape = Tape::new();
        let w = tape.constant(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&Tensor::new(&[2], vec![0.5, -0.5]));
        let x = tape.constant(&Tensor::new(&[1, 2], vec![1.0, 1.0]));
        let y = mlp_forward(&mut tape, x, &[(w, b)], Activation::Relu);
        // [1,1] . [[1,2],[3,4]] + [0.5,-0.5] = [4.5, 5.5]; no activation after
        // the last layer, so relu never fires here.
        assert_close(tape.value(y), &[4.5, 5.5], 1e-15);
    }

    #[test]
    fn two_layer_relu_hand_case() {
        let mut tape = Tape::new();
        let w1 = tape.constant(&Tensor::new(&[2, 2], vec![1.0, -1.0, 0.0, 2.0]));
        let b1 = tape.constant(&Tensor::new(&[2], vec![0.0, 0.0]));
        let w2 = tape.constant(&Tensor::new(&[2, 1], vec![1.0, 1.0]));
        let b2 = tape.constant(&Tensor::new(&[1], vec![0.25]));
        let x = tape.constant(&Tensor::new(&[1, 2], vec![1.0, 1.0]));
        // Hidden pre-act: [1, 1]; relu keeps [1, 1]; out: 1 + 1 + 0.25.
        let y = mlp_forward(&mut tape, x, &[(w1, b1), (w2, b2)], Activation::Relu);
        assert_close(tape.value(y), &[2.25], 1e-15);

        let x2 = tape.constant(&Tensor::new(&[1, 2], vec![-1.0, 0.0]));
        // Hidden pre-act: [-1, 1]; relu clamps to [0, 1]; out: 1.25.
        let y2 = mlp_forward(&mut tape, x2, &[(w1, b1), (w2, b2)], Activation::Relu);
        assert_close(tape.value(y2), &[1.25], 1e-15);
    }

    #[test]
    fn zero_mlp_maps_everything_to_zero() {
        let mut tape = Tape::new();
        let lin = Linear::zeros(3, 2);
        let w = tape.constant(&lin.w);
        let b = tape.constant(&lin.b);
        let x = tape.constant(&Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.1, 0.2, 0.3]));
        let y = mlp_forward(&mut tape, x, &[(w, b)], Activation::Relu);
        assert_eq!(tape.value(y), &[0.0; 4]);
    }

    #[test]
    fn attention_single_key_copies_value() {
        let mut tape = Tape::new();
        let d = 4;
        let id = identity(d);
        let (wq, wk, wv, wo) = (
            tape.constant(&id),
            tape.constant(&id),
            tape.constant(&id),
            tape.constant(&id),
        );
        let q = tape.constant(&Tensor::new(&[3, 4], vec![0.5; 12]));
        let k = tape.constant(&Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let v = tape.constant(&Tensor::new(&[1, 4], vec![9.0, 8.0, 7.0, 6.0]));
        let out = multi_head_attention(&mut tape, q, k, v, 2, wq, wk, wv, wo);
        // Softmax over one key is exactly 1, so every query row is the value.
        for i in 0..3 {
            assert_close(&tape.value(out)[i * 4..(i + 1) * 4], &[9.0, 8.0, 7.0, 6.0], 1e-15);
        }
    }

    #[test]
    fn attention_hand_case_one_head() {
        // 2 queries, 3 keys, d = 4, single head, identity projections.
        let q_rows = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let k_rows = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let v_rows = [[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0], [9.0, 10.0, 11.0, 12.0]];

        let mut tape = Tape::new();
        let id = identity(4);
        let (wq, wk, wv, wo) = (
            tape.constant(&id),
            tape.constant(&id),
            tape.constant(&id),
            tape.constant(&id),
        );
        let q = tape.constant(&Tensor::from_rows(&q_rows.map(Vec::from)));
        let k = tape.constant(&Tensor::from_rows(&k_rows.map(Vec::from)));
        let v = tape.constant(&Tensor::from_rows(&v_rows.map(Vec::from)));
        let out = multi_head_attention(&mut tape, q, k, v, 1, wq, wk, wv, wo);

        // Independent arithmetic: scores q.k^T / 2, then softmax, then mix v.
        let mut expected = Vec::new();
        for qr in &q_rows {
            let scores: Vec<f64> = k_rows
                .iter()
                .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let es: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = es.iter().sum();
            for j in 0..4 {
                expected.push(
                    v_rows.iter().zip(&es).map(|(vr, e)| vr[j] * e / z).sum::<f64>(),
                );
            }
        }
        assert_close(tape.value(out), &expected, 1e-12);
    }

    #[test]
    fn attention_key_value_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let mut tape = Tape::new();
        let wq = init_uniform(&mut rng, &[d, d], d);
        let wk = init_uniform(&mut rng, &[d, d], d);
        let wv = init_uniform(&mut rng, &[d, d], d);
        let wo = init_uniform(&mut rng, &[d, d], d);
        let (wq, wk, wv, wo) = (
            tape.constant(&wq),
            tape.constant(&wk),
            tape.constant(&wv),
            tape.constant(&wo),
        );
        let qt = init_uniform(&mut rng, &[3, d], d);
        let kt = init_uniform(&mut rng, &[5, d], d);
        let vt = init_uniform(&mut rng, &[5, d], d);
        let q = tape.constant(&qt);
        let k = tape.constant(&kt);
        let v = tape.constant(&vt);
        let out = multi_head_attention(&mut tape, q, k, v, 2, wq, wk, wv, wo);

        // Reverse the 5 key/value rows jointly.
        let perm: Vec<usize> = (0..5).rev().collect();
        let kp_rows: Vec<Vec<f64>> = perm.iter().map(|&i| kt.row(i).to_vec()).collect();
        let vp_rows: Vec<Vec<f64>> = perm.iter().map(|&i| vt.row(i).to_vec()).collect();
        let kp = tape.constant(&Tensor::from_rows(&kp_rows));
        let vp = tape.constant(&Tensor::from_rows(&vp_rows));
        let out_p = multi_head_attention(&mut tape, q, kp, vp, 2, wq, wk, wv, wo);

        let a = tape.value(out).to_vec();
        let b = tape.value(out_p).to_vec();
        assert_close(&a, &b, 1e-12);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let id = identity(6);
        let w = tape.constant(&id);
        let x = tape.constant(&Tensor::zeros(&[2, 6]));
        multi_head_attention(&mut tape, x, x, x, 4, w, w, w, w);
    }

    #[test]
    #[should_panic(expected = "at least one key")]
    fn attention_rejects_empty_keys() {
        let mut tape = Tape::new();
        let id = identity(4);
        let w = tape.constant(&id);
        let q = tape.constant(&Tensor::zeros(&[2, 4]));
        let k = tape.constant(&Tensor::zeros(&[0, 4]));
        multi_head_attention(&mut tape, q, k, k, 2, w, w, w, w);
    }
}
