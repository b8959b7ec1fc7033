use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcons::gradcheck::check_gradients;
use semcons::{BinaryOp, Graph, Reduce, Tensor, TensorError, Var};

const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        approx::assert_abs_diff_eq!(x, y, epsilon = 1e-14);
    }
}

fn assert_grad<F>(inputs: &[Tensor], tol: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let report = check_gradients(inputs, STEP, f).unwrap();
    assert!(
        report.passes(tol),
        "max rel err {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn add_example() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    assert!(!g.is_tracked(c));
}

#[test]
fn multiply_by_one_has_unit_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_vec(vec![0.3, -2.0, 7.5]));
    let one = g.scalar(1.0);
    let y = g.mul(x, one).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn broadcast_scalar_triples_with_matching_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 2]);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let three = g.scalar(3.0);
    let y = g.mul(xv, three).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, 3.0 * b);
    }
    assert_grad(&[x, Tensor::scalar(3.0)], 1e-6, |g, v| {
        let y = g.mul(v[0], v[1])?;
        let y = g.square(y);
        Ok(g.sum(y))
    });
}

#[test]
fn incompatible_shapes_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(a, b), Err(TensorError::IncompatibleShape { .. })));
    let c = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(a, c), Err(TensorError::IncompatibleShape { .. })));
}

#[test]
fn elementwise_ops_with_broadcasting_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let a = rand_tensor(&mut rng, &[3, 4]);
        // keep divisors away from zero
        let b = rand_tensor(&mut rng, &[4]).map(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
        let w = rand_tensor(&mut rng, &[3, 4]);
        assert_grad(&[a, b, w], 1e-6, move |g, v| {
            let y = g.binary(op, v[0], v[1])?;
            let y = g.mul(y, v[2])?;
            Ok(g.sum(y))
        });
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);

    let x = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.7 - 1.0);
    let id = g.constant(Tensor::eye(3));
    let xv = g.constant(x.clone());
    let y = g.matmul(id, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn matmul_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3, 2]);
    let w = rand_tensor(&mut rng, &[4, 2]);
    assert_grad(&[a, b, w], 1e-6, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.mul(y, v[2])?;
        Ok(g.sum(y))
    });
}

#[test]
fn solve_spd_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::eye(2));
    let b = g.constant(Tensor::from_vec(vec![2.0, 5.0]));
    let x = g.solve_spd(a, b).unwrap();
    assert_eq!(g.value(x).data(), &[2.0, 5.0]);

    let a = g.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
    let b = g.constant(Tensor::from_vec(vec![2.0, 4.0]));
    let x = g.solve_spd(a, b).unwrap();
    assert_close(g.value(x).data(), &[1.0, 1.0]);
}

#[test]
fn solve_spd_rejects_non_spd() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap());
    let b = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
    let err = g.solve_spd(a, b).unwrap_err();
    assert!(matches!(err, TensorError::NotPositiveDefinite { .. }), "{err}");
    assert!(err.to_string().contains("condition"));
}

#[test]
fn solve_spd_gradcheck_through_factorization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = rand_tensor(&mut rng, &[5, 5]);
    let b = rand_tensor(&mut rng, &[5]);
    // A = MᵀM + I built inside the graph keeps the perturbed matrix symmetric
    assert_grad(&[m, b], 1e-5, |g, v| {
        let mt = g.transpose(v[0])?;
        let mtm = g.matmul(mt, v[0])?;
        let eye = g.constant(Tensor::eye(5));
        let a = g.add(mtm, eye)?;
        let x = g.solve_spd(a, v[1])?;
        Ok(g.sum(x))
    });
}

#[test]
fn solve_spd_gradient_matches_closed_form() {
    // dL/dA = -v xᵀ with v = A⁻¹ 1, L = Σx
    let mut g = Graph::<f64>::new();
    let a = g.variable(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
    let b = g.variable(Tensor::from_vec(vec![2.0, 4.0]));
    let x = g.solve_spd(a, b).unwrap();
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert_close(grads.wrt(b).data(), &[0.5, 0.25]);
    assert_close(grads.wrt(a).data(), &[-0.5, -0.5, -0.25, -0.25]);
}

#[test]
fn reductions_and_pointwise_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4, 2]);
    let w3 = rand_tensor(&mut rng, &[3, 2]);
    for axis in 0..3 {
        for op in [Reduce::Sum, Reduce::Mean, Reduce::Max] {
            let x = x.clone();
            let mut shape = vec![3, 4, 2];
            shape.remove(axis);
            let w = rand_tensor(&mut rng, &shape);
            assert_grad(&[x, w], 1e-4, move |g, v| {
                let r = g.reduce(v[0], op, axis)?;
                let r = g.mul(r, v[1])?;
                Ok(g.sum(r))
            });
        }
    }
    type Unary = fn(&mut Graph, Var) -> Var;
    let unary: [(&str, Unary); 7] = [
        ("exp", |g, x| g.exp(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("relu", |g, x| g.relu(x)),
        ("leaky", |g, x| g.leaky_relu(x, 0.2)),
        ("square", |g, x| g.square(x)),
        ("log_sq", |g, x| {
            let s = g.square(x);
            let s = g.add_scalar(s, 0.5);
            let l = g.log(s);
            g.sqrt(s);
            l
        }),
    ];
    for (name, f) in unary {
        let x = rand_tensor(&mut rng, &[3, 2]);
        let w = w3.clone();
        let report = check_gradients(&[x, w], STEP, |g, v| {
            let y = f(g, v[0]);
            let y = g.mul(y, v[1])?;
            Ok::<_, TensorError>(g.sum(y))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{name}: {:?}", report);
    }
    let x = rand_tensor(&mut rng, &[3, 2]).map(|v| v.abs() + 0.1);
    assert_grad(&[x, w3], 1e-4, |g, v| {
        let y = g.sqrt(v[0]);
        let y = g.mul(y, v[1])?;
        Ok(g.sum(y))
    });
}

#[test]
fn softmax_family() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    // large logits stay finite
    let big = g.constant(Tensor::from_vec(vec![1000.0, 999.0]));
    let lse = g.logsumexp(big, 0).unwrap();
    assert!((g.value(lse).item() - (1000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for axis in 0..2 {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        assert_grad(&[x.clone(), w.clone()], 1e-4, move |g, v| {
            let y = g.softmax(v[0], axis)?;
            let y = g.mul(y, v[1])?;
            Ok(g.sum(y))
        });
        assert_grad(&[x.clone(), w.clone()], 1e-4, move |g, v| {
            let y = g.log_softmax(v[0], axis)?;
            let y = g.mul(y, v[1])?;
            Ok(g.sum(y))
        });
        let mut ws = vec![3, 4];
        ws.remove(axis);
        let w = rand_tensor(&mut rng, &ws);
        assert_grad(&[x, w], 1e-4, move |g, v| {
            let y = g.logsumexp(v[0], axis)?;
            let y = g.mul(y, v[1])?;
            Ok(g.sum(y))
        });
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 3, 5, 4]);
    let mut k = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k);
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_gradcheck_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 0, 2)] {
        let x = rand_tensor(&mut rng, &[2, 2, 6, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, k, k]);
        let probe = {
            let mut g = Graph::<f64>::new();
            let a = g.constant(x.clone());
            let b = g.constant(w.clone());
            let y = g.conv2d(a, b, stride, pad).unwrap();
            rand_tensor(&mut rng, g.shape(y))
        };
        assert_grad(&[x, w, probe], 1e-4, move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            let y = g.mul(y, v[2])?;
            Ok(g.sum(y))
        });
    }
}

#[test]
fn conv2d_invalid_arguments() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(x, k, 1, 1).is_err());
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, k, 0, 1).is_err());
    let k = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(g.conv2d(x, k, 1, 1).is_err());
}

#[test]
fn resize_preserves_constants() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 5, 7], 0.375));
    for (h, w) in [(1, 1), (3, 11), (10, 14), (5, 7)] {
        let y = g.resize_bilinear(x, h, w).unwrap();
        assert_eq!(g.value(y).shape(), &[2, h, w]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = rand_tensor(&mut rng, &[1, 4, 6]);
    let v = g.constant(img.clone());
    let same = g.resize_bilinear(v, 4, 6).unwrap();
    assert_eq!(g.value(same), &img);
}

#[test]
fn resize_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (h, w) in [(8, 3), (2, 9), (5, 5)] {
        let x = rand_tensor(&mut rng, &[2, 4, 6]);
        let probe = rand_tensor(&mut rng, &[2, h, w]);
        assert_grad(&[x, probe], 1e-4, move |g, v| {
            let y = g.resize_bilinear(v[0], h, w)?;
            let y = g.mul(y, v[1])?;
            Ok(g.sum(y))
        });
    }
}

#[test]
fn structural_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let y = rand_tensor(&mut rng, &[2, 3]);
    let probe = rand_tensor(&mut rng, &[5, 4]);
    assert_grad(&[x.clone(), y.clone(), probe], 1e-4, |g, v| {
        let rows = g.gather_rows(v[0], &[3, 0, 3])?;
        let cat = g.concat(&[rows, v[1]], 0)?;
        let d = g.pairwise_sq_dist(cat, v[0])?;
        let d = g.mul(d, v[2])?;
        Ok(g.sum(d))
    });
    let img = rand_tensor(&mut rng, &[2, 5, 6]);
    let probe = rand_tensor(&mut rng, &[4, 2]);
    assert_grad(&[img, probe], 1e-4, |g, v| {
        let c = g.crop2d(v[0], 1, 2, 2, 3)?;
        let r = g.reshape(c, &[3, 4])?;
        let t = g.transpose(r)?;
        let taken = g.take(t, &[0, 5, 5, 11, 2, 7, 1, 9], &[4, 2])?;
        let y = g.mul(taken, v[1])?;
        Ok(g.sum(y))
    });
}

#[test]
fn pairwise_distance_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
    let d = g.pairwise_sq_dist(a, b).unwrap();
    assert_eq!(g.value(d).data(), &[25.0, 13.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn detach_stops_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_vec(vec![2.0]));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[2.0]);
    assert!(grads.get(d).is_none());
}

#[test]
fn f32_graph_runs() {
    let mut g = Graph::<f32>::new();
    let a = g.variable(Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![1.0f32, 1.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    assert_eq!(grads.wrt(a).data(), &[1.0, 1.0, 1.0, 1.0]);
}

fn loss_pair(g: &mut Graph, x: Var, which: u8) -> Var {
    match which {
        0 => {
            let s = g.tanh(x);
            let s = g.square(s);
            g.sum(s)
        }
        1 => {
            let s = g.softmax(x, 0).unwrap();
            let s = g.log(s);
            g.mean(s)
        }
        _ => {
            let a = loss_pair(g, x, 0);
            let b = loss_pair(g, x, 1);
            g.add(a, b).unwrap()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(data in proptest::collection::vec(-1.0f64..1.0, 1..12)) {
        let grad = |which: u8| {
            let mut g = Graph::<f64>::new();
            let x = g.variable(Tensor::from_vec(data.clone()));
            let l = loss_pair(&mut g, x, which);
            g.backward(l).unwrap().wrt(x)
        };
        let (a, b, both) = (grad(0), grad(1), grad(2));
        for k in 0..data.len() {
            prop_assert!((a.data()[k] + b.data()[k] - both.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_identical_and_inputs_untouched(data in proptest::collection::vec(-1.0f64..1.0, 4..=4)) {
        let input = Tensor::new(vec![2, 2], data).unwrap();
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.constant(input.clone());
            let y = g.matmul(x, x).unwrap();
            let y = g.sigmoid(y);
            let out = g.value(y).clone();
            prop_assert_eq!(g.value(x), &input);
            Ok(out)
        };
        let (a, b) = (run()?, run()?);
        prop_assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
