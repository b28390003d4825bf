//! Layer-level forward functions recorded on a [`Graph`].

use rand::Rng;

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Valid 3x3 convolution, stride 1, plus bias: `[N,H,W,Cin] -> [N,H-2,W-2,Cout]`.
pub fn conv2d_forward(g: &mut Graph, input: Var, kernel: Var, bias: Var) -> Result<Var> {
    match g.shape(kernel) {
        [3, 3, _, _] => g.conv2d(input, kernel, bias),
        other => Err(TensorError::InvalidInput {
            op: "conv2d",
            reason: format!("kernel must be 3x3, got shape {other:?}"),
        }),
    }
}

pub fn maxpool2d_forward(g: &mut Graph, input: Var) -> Result<Var> {
    g.maxpool2d(input)
}

/// `input · weight + bias` for `[N,D] x [D,U]`.
pub fn dense_forward(g: &mut Graph, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = g.matmul(input, weight)?;
    g.add_bias(z, bias)
}

/// Inverted dropout in train mode, identity in eval mode.
pub fn dropout_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    input: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidInput {
            op: "dropout",
            reason: format!("rate must lie in [0, 1), got {rate}"),
        });
    }
    match mode {
        Mode::Eval => Ok(input),
        Mode::Train => g.dropout(input, rate, rng),
    }
}

pub fn softmax_forward(g: &mut Graph, logits: Var) -> Result<Var> {
    g.softmax(logits)
}

/// Rescales each column of a `[D, U]` weight so its Euclidean norm is at most `cap`.
pub fn apply_max_norm(weight: &mut Tensor, cap: f64) -> Result<()> {
    let [_, units] = *weight.shape() else {
        return Err(TensorError::InvalidInput {
            op: "max_norm",
            reason: format!("expected a [D,U] weight, got {:?}", weight.shape()),
        });
    };
    if !(cap > 0.0) {
        return Err(TensorError::InvalidInput {
            op: "max_norm",
            reason: format!("cap must be positive, got {cap}"),
        });
    }
    let data = weight.data_mut();
    let mut norms = vec![0.0; units];
    for row in data.chunks_exact(units) {
        for (n, w) in norms.iter_mut().zip(row) {
            *n += w * w;
        }
    }
    let factors: Vec<f64> = norms
        .iter()
        .map(|n| {
            let norm = n.sqrt();
            if norm > cap {
                cap / norm
            } else {
                1.0
            }
        })
        .collect();
    for row in data.chunks_exact_mut(units) {
        for (w, f) in row.iter_mut().zip(&factors) {
            *w *= f;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn column_norms(t: &Tensor) -> Vec<f64> {
        let units = t.shape()[1];
        (0..units)
            .map(|j| {
                t.data()
                    .iter()
                    .skip(j)
                    .step_by(units)
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn conv_all_ones_and_delta_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 5, 5, 1], vec![1.0; 25]).unwrap());
        let k = g.constant(Tensor::new(&[3, 3, 1, 1], vec![1.0; 9]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]).unwrap());
        let y = conv2d_forward(&mut g, x, k, b).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));

        let img: Vec<f64> = (0..25).map(f64::from).collect();
        let x = g.constant(Tensor::new(&[1, 5, 5, 1], img.clone()).unwrap());
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = g.constant(Tensor::new(&[3, 3, 1, 1], delta).unwrap());
        let y = conv2d_forward(&mut g, x, k, b).unwrap();
        let crop: Vec<f64> = (1..4)
            .flat_map(|r| (1..4).map(move |c| (r * 5 + c) as f64))
            .collect();
        assert_eq!(g.value(y).data(), crop.as_slice());
    }

    #[test]
    fn conv_rejects_small_input_and_other_kernels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 5, 1]).unwrap());
        let k = g.constant(Tensor::zeros(&[3, 3, 1, 1]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]).unwrap());
        assert!(conv2d_forward(&mut g, x, k, b).is_err());
        let x = g.constant(Tensor::zeros(&[1, 5, 5, 1]).unwrap());
        let k5 = g.constant(Tensor::zeros(&[5, 5, 1, 1]).unwrap());
        assert!(conv2d_forward(&mut g, x, k5, b).is_err());
    }

    #[test]
    fn maxpool_values_and_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = maxpool2d_forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let x = g.constant(Tensor::zeros(&[1, 109, 109, 32]).unwrap());
        let y = maxpool2d_forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 54, 54, 32]);

        let x = g.constant(Tensor::zeros(&[1, 1, 4, 1]).unwrap());
        assert!(maxpool2d_forward(&mut g, x).is_err());
    }

    #[test]
    fn dense_identity_and_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]).unwrap());
        let y = dense_forward(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0, 4.0]);

        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(&[1], vec![3.0]).unwrap());
        let y = dense_forward(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);

        let bad = g.constant(Tensor::zeros(&[3, 1]).unwrap());
        assert!(dense_forward(&mut g, x, bad, b).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand_tensor = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = [rand_tensor(&[4, 10]), rand_tensor(&[10, 5]), rand_tensor(&[5])];
        let err = crate::tensor::gradcheck::grad_check_many(
            |g, v| {
                let y = dense_forward(g, v[0], v[1], v[2])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let x = g.constant(Tensor::new(&[50], data.clone()).unwrap());
        let y = dropout_forward(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
        let y = dropout_forward(&mut g, x, 0.7, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
        assert!(dropout_forward(&mut g, x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1_000_000], vec![1.0; 1_000_000]).unwrap());
        let y = dropout_forward(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
    }

    #[test]
    fn dropout_mask_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[64], vec![1.0; 64]).unwrap());
            let y = dropout_forward(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn softmax_reference_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let p = softmax_forward(&mut g, x).unwrap();
        let d = g.value(p).data();
        for (got, want) in d[..3].iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 1e-8);
        }
        for v in &d[3..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let p = softmax_forward(&mut g, x).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Distinct, well separated values keep the argmax stable under perturbation.
        let mut values: Vec<f64> = (0..64).map(|i| i as f64 * 0.01).collect();
        rand::seq::SliceRandom::shuffle(values.as_mut_slice(), &mut rng);
        let x = Tensor::new(&[1, 8, 8, 1], values).unwrap();
        let err = grad_check(
            |g, v| {
                let p = g.maxpool2d(v)?;
                let sq = g.mul(p, p)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn max_norm_projection() {
        let mut w = Tensor::new(&[2, 2], vec![1.0, 6.0, 0.0, 8.0]).unwrap();
        apply_max_norm(&mut w, 5.0).unwrap();
        assert_eq!(w.data(), &[1.0, 3.0, 0.0, 4.0]);

        let mut w = Tensor::new(&[2, 1], vec![0.6, 0.8]).unwrap();
        apply_max_norm(&mut w, 3.0).unwrap();
        assert_eq!(w.data(), &[0.6, 0.8]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = Tensor::new(&[20, 16], (0..320).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        apply_max_norm(&mut w, 3.0).unwrap();
        assert!(column_norms(&w).iter().all(|n| *n <= 3.0 + 1e-12));
        let once = w.clone();
        apply_max_norm(&mut w, 3.0).unwrap();
        for (a, b) in once.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(apply_max_norm(&mut w, 0.0).is_err());
    }
}
