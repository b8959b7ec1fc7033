use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use semcons::gradcheck::check_gradients;
use semcons::rsmi::{
    derangement, fit_rsmi, make_product_samples, rsmi_value, ts_loss, EmbeddingBatch, LayerPairSet, RsmiConfig,
    RsmiError, SamplePairs,
};
use semcons::{Graph, Tensor};

/// Joint-form rPE value `∫ p²/(ρp + (1-ρ)q) − 1` for the product density
/// `p = N(0, I₂)` and joint `q` = standard bivariate normal with correlation
/// `c`, by midpoint quadrature on [-9, 9]².
fn quadrature_rpe(c: f64, rho: f64) -> f64 {
    let n = 1800;
    let (lo, hi) = (-9.0, 9.0);
    let h = (hi - lo) / n as f64;
    let norm_q = 1.0 / (2.0 * std::f64::consts::PI * (1.0 - c * c).sqrt());
    let mut acc = 0.0;
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * h;
        for j in 0..n {
            let y = lo + (j as f64 + 0.5) * h;
            let p = (-(x * x + y * y) / 2.0).exp() / (2.0 * std::f64::consts::PI);
            let q = norm_q * (-(x * x - 2.0 * c * x * y + y * y) / (2.0 * (1.0 - c * c))).exp();
            let denom = rho * p + (1.0 - rho) * q;
            if denom > 0.0 {
                acc += p * p / denom;
            }
        }
    }
    acc * h * h - 1.0
}

fn gaussian_pairs(rng: &mut ChaCha8Rng, n: usize, c: f64) -> (Tensor, Tensor) {
    let mut z = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        z.push(a);
        w.push(c * a + (1.0 - c * c).sqrt() * b);
    }
    (
        Tensor::new(vec![n, 1], z).unwrap(),
        Tensor::new(vec![n, 1], w).unwrap(),
    )
}

fn estimate(z: &Tensor, w: &Tensor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let joint = SamplePairs {
        z: g.constant(z.clone()),
        w: g.constant(w.clone()),
    };
    let (product, _) = make_product_samples(&mut g, joint, &mut rng).unwrap();
    let model = fit_rsmi(&mut g, joint, product, &RsmiConfig::default(), &mut rng).unwrap();
    let v = rsmi_value(&mut g, &model).unwrap();
    g.value(v).item()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = Tensor::from_fn(&[n, d], |_| rng.sample::<f64, _>(StandardNormal));
    for r in 0..n {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..d {
            t.data_mut()[r * d + c] /= norm;
        }
    }
    t
}

#[test]
fn quadrature_oracle_sanity() {
    assert!(quadrature_rpe(0.0, 0.5).abs() < 1e-10);
    // rho = 1 reduces to a zero divergence for any c
    assert!(quadrature_rpe(0.7, 1.0).abs() < 1e-10);
    let a = quadrature_rpe(0.5, 0.5);
    let b = quadrature_rpe(0.9, 0.5);
    assert!(0.0 < a && a < b && b < 1.0, "{a} {b}");
}

#[test]
fn derangement_frequencies_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        *counts.entry(derangement(4, &mut rng).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 9);
    for (perm, c) in counts {
        assert!(perm.iter().enumerate().all(|(i, &p)| i != p));
        let f = c as f64 / draws as f64;
        assert!((f - 1.0 / 9.0).abs() < 0.02, "{perm:?}: {f}");
    }
}

#[test]
fn product_samples_never_keep_a_joint_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let w = Tensor::from_fn(&[7, 1], |i| i as f64);
    let joint = SamplePairs {
        z: g.constant(w.clone()),
        w: g.constant(w),
    };
    let (product, perm) = make_product_samples(&mut g, joint, &mut rng).unwrap();
    assert_eq!(product.z, joint.z);
    for (i, &p) in perm.iter().enumerate() {
        assert_ne!(g.value(product.w).data()[i], i as f64);
        assert_eq!(g.value(product.w).data()[i], p as f64);
    }
}

#[test]
fn identical_joint_and_product_gives_zero() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in [8, 100, 300] {
            let z = unit_rows(&mut rng, n, 3);
            let w = unit_rows(&mut rng, n, 4);
            let mut g = Graph::new();
            let s = SamplePairs {
                z: g.constant(z),
                w: g.constant(w),
            };
            let model = fit_rsmi(&mut g, s, s, &RsmiConfig::default(), &mut rng).unwrap();
            let v = rsmi_value(&mut g, &model).unwrap();
            assert!(g.value(v).item().abs() <= 1e-6, "n={n}: {}", g.value(v).item());
            assert!(model.value().abs() <= 1e-6);
        }
    }
}

#[test]
fn fitted_model_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (z, w) = gaussian_pairs(&mut rng, 200, 0.6);
    let mut g = Graph::new();
    let joint = SamplePairs {
        z: g.constant(z),
        w: g.constant(w),
    };
    let (product, _) = make_product_samples(&mut g, joint, &mut rng).unwrap();
    let model = fit_rsmi(&mut g, joint, product, &RsmiConfig::default(), &mut rng).unwrap();
    assert_eq!(model.basis_count(), 64);
    assert_eq!(model.alpha.len(), 65);
    let h_norm = model.h_vec.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(model.solve_residual() < 1e-8 * h_norm);
    let m = model.alpha.len();
    for i in 0..m {
        for j in 0..m {
            assert!((model.h_mat.data()[i * m + j] - model.h_mat.data()[j * m + i]).abs() < 1e-12);
        }
    }
    assert!(model.sigma_z > 0.0 && model.sigma_w > 0.0);
}

#[test]
fn independent_gaussians_estimate_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (z, w) = gaussian_pairs(&mut rng, 512, 0.0);
    let v = estimate(&z, &w, 9);
    assert!(v.abs() < 0.05, "{v}");
}

#[test]
fn correlated_gaussians_match_quadrature() {
    let truth = quadrature_rpe(0.9, 0.5);
    let mean: f64 = (0..10)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (z, w) = gaussian_pairs(&mut rng, 1024, 0.9);
            estimate(&z, &w, seed)
        })
        .sum::<f64>()
        / 10.0;
    assert!((mean / truth - 1.0).abs() < 0.15, "estimate {mean} vs quadrature {truth}");
}

#[test]
fn estimate_is_deterministic_and_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (z, w) = gaussian_pairs(&mut rng, 150, 0.7);
    assert_eq!(estimate(&z, &w, 4).to_bits(), estimate(&z, &w, 4).to_bits());

    // permute the joint pairs while holding product samples and centers fixed
    let n = 150;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let run = |order: &[usize]| {
        let mut g = Graph::new();
        let zc = g.constant(z.clone());
        let wc = g.constant(w.clone());
        let joint = SamplePairs {
            z: g.gather_rows(zc, order).unwrap(),
            w: g.gather_rows(wc, order).unwrap(),
        };
        let shift: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let product = SamplePairs {
            z: zc,
            w: g.gather_rows(wc, &shift).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        fit_rsmi(&mut g, joint, product, &RsmiConfig::default(), &mut rng)
            .unwrap()
            .value()
    };
    let identity: Vec<usize> = (0..n).collect();
    let (a, b) = (run(&identity), run(&order));
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn perfect_dependence_beats_shuffled_pairings() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 64;
    let z = unit_rows(&mut rng, n, 3);
    let loss_for = |perm: &[usize], seed: u64| {
        let mut g = Graph::new();
        let zin = g.constant(z.clone());
        let zv = g.constant(z.clone());
        let w = g.gather_rows(zv, perm).unwrap();
        let mut set = LayerPairSet::new();
        let a = EmbeddingBatch::new(&g, zin, 0, true).unwrap();
        let b = EmbeddingBatch::new(&g, w, 0, true).unwrap();
        set.push(&g, a, b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = ts_loss(&mut g, &set, &RsmiConfig::default(), &mut rng).unwrap();
        g.value(l).item()
    };
    let identity: Vec<usize> = (0..n).collect();
    for seed in 0..3 {
        let best = loss_for(&identity, seed);
        for _ in 0..10 {
            let mut p = identity.clone();
            for i in (1..n).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            let l = loss_for(&p, seed);
            assert!(best < l, "seed {seed}: identity {best} >= shuffled {l}");
        }
    }
}

#[test]
fn two_independent_layers_give_near_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut g = Graph::new();
    let mut set = LayerPairSet::new();
    for layer in 0..2 {
        let (z, _) = gaussian_pairs(&mut rng, 512, 0.0);
        let (w, _) = gaussian_pairs(&mut rng, 512, 0.0);
        let a = g.constant(z);
        let b = g.variable(w);
        let a = EmbeddingBatch::new(&g, a, layer, false).unwrap();
        let b = EmbeddingBatch::new(&g, b, layer, false).unwrap();
        set.push(&g, a, b).unwrap();
    }
    let l = ts_loss(&mut g, &set, &RsmiConfig::default(), &mut rng).unwrap();
    assert!(g.value(l).item().abs() < 0.05, "{}", g.value(l).item());
}

#[test]
fn ts_loss_leaves_input_side_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = unit_rows(&mut rng, 10, 3);
    let w = unit_rows(&mut rng, 10, 3);
    let mut g = Graph::new();
    let zv = g.variable(z);
    let wv = g.variable(w);
    let mut set = LayerPairSet::new();
    let a = EmbeddingBatch::new(&g, zv, 1, true).unwrap();
    let b = EmbeddingBatch::new(&g, wv, 1, true).unwrap();
    set.push(&g, a, b).unwrap();
    let l = ts_loss(&mut g, &set, &RsmiConfig::default(), &mut rng).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(zv).data().iter().all(|&v| v == 0.0));
    assert!(grads.wrt(wv).max_abs() > 0.0);
}

#[test]
fn ts_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..3 {
        let z0 = unit_rows(&mut rng, 12, 3);
        let z1 = unit_rows(&mut rng, 12, 2);
        // raw (pre-normalization) outputs
        let w0 = Tensor::from_fn(&[12, 3], |i| z0.data()[i] + 0.3 * rng.gen_range(-1.0..1.0));
        let w1 = Tensor::from_fn(&[12, 2], |_| rng.gen_range(-1.0..1.0));
        let report = check_gradients(&[w0, w1], 1e-5, |g, v| {
            let mut set = LayerPairSet::new();
            for (k, (z, w)) in [(&z0, v[0]), (&z1, v[1])].into_iter().enumerate() {
                let zc = g.constant(z.clone());
                let sq = g.square(w);
                let norm = g.reduce(sq, semcons::Reduce::Sum, 1)?;
                let norm = g.sqrt(norm);
                let norm = g.reshape(norm, &[12, 1])?;
                let wn = g.div(w, norm)?;
                let a = EmbeddingBatch::new(g, zc, k, true)?;
                let b = EmbeddingBatch::new(g, wn, k, true)?;
                set.push(g, a, b)?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            ts_loss(g, &set, &RsmiConfig::default(), &mut rng)
        })
        .unwrap();
        assert!(report.passes(1e-4), "trial {trial}: {report:?}");
    }
}

#[test]
fn errors_surface() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let empty = LayerPairSet::new();
    assert!(matches!(
        ts_loss(&mut g, &empty, &RsmiConfig::default(), &mut rng),
        Err(RsmiError::EmptyLayerSet)
    ));
    let one = g.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        EmbeddingBatch::new(&g, one, 0, false),
        Err(RsmiError::TooFewSamples(1))
    ));
    let raw = g.constant(Tensor::full(&[3, 2], 1.0));
    assert!(matches!(
        EmbeddingBatch::new(&g, raw, 0, true),
        Err(RsmiError::NotNormalized { .. })
    ));
    let a = g.constant(Tensor::zeros(&[4, 2]));
    let b = g.constant(Tensor::zeros(&[5, 2]));
    let joint = SamplePairs { z: a, w: a };
    let product = SamplePairs { z: b, w: b };
    assert!(fit_rsmi(&mut g, joint, product, &RsmiConfig::default(), &mut rng).is_err());
}
