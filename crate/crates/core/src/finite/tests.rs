use super::*;
use crate::analysis::gradient_distance_matrix;
use crate::datasets::synthetic_blobs;
use crate::distill::init_support;
use crate::kernels::{kernel_conv, kernel_fc};

fn gaussian(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = sample_rng(seed, 7);
    (0..d).map(|_| normal(&mut rng)).collect()
}

fn unit(d: usize, seed: u64) -> Vec<f64> {
    let v = gaussian(d, seed);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    // scaled so that x·x/d = 1, the regime the kernels are usually run in
    v.iter().map(|a| a / n * (d as f64).sqrt()).collect()
}

#[test]
fn linear_depth_one_is_the_scaled_inner_product() {
    let (x, y) = (unit(12, 1), unit(12, 2));
    let xy = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / 12.0;
    let spec = KernelSpec::fc(1).nngp();
    let est = mc_nngp_fc(&x, &y, &spec, Activation::Linear, 256, 2000, 3).unwrap();
    // hidden layer and readout each contribute one factor of σ_w²
    let want = 4.0 * xy;
    assert!((est.mean - want).abs() < 4.0 * est.stderr, "{est:?} vs {want}");
}

#[test]
fn self_pair_estimate_is_positive() {
    let x = unit(10, 4);
    let est = mc_nngp(&x, &x, (1, 1, 10), &KernelSpec::fc(2).nngp(), 64, 20, 0).unwrap();
    assert!(est.mean > 0.0);
}

#[test]
fn fc3_monte_carlo_matches_nngp() {
    let (x, y) = (unit(16, 5), unit(16, 6));
    let spec = KernelSpec::fc(3).nngp().with_variances(2.0, 0.1);
    let est = mc_nngp(&x, &y, (1, 1, 16), &spec, 4096, 1000, 11).unwrap();
    let exact = kernel_fc(&x, &y, &spec).unwrap();
    assert!((est.mean - exact).abs() < 3.0 * est.stderr, "{est:?} vs {exact}");
}

#[test]
fn standard_error_shrinks_with_root_samples() {
    let (x, y) = (unit(8, 7), unit(8, 8));
    let spec = KernelSpec::fc(2).nngp();
    let small = mc_nngp(&x, &y, (1, 1, 8), &spec, 32, 200, 1).unwrap();
    let large = mc_nngp(&x, &y, (1, 1, 8), &spec, 32, 800, 2).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((1.6..2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn convnet_monte_carlo_matches_nngp() {
    let shape = (8, 8, 1);
    let (x, y) = (gaussian(64, 9), gaussian(64, 10));
    let spec = KernelSpec::convnet(3).nngp();
    let est = mc_nngp(&x, &y, shape, &spec, 256, 200, 12).unwrap();
    let exact = kernel_conv(&x, &y, shape, &spec).unwrap();
    let rel = (est.mean - exact).abs() / exact.abs();
    assert!(rel < 0.05, "mc {est:?} exact {exact} rel {rel}");
}

#[test]
fn conv_vec_monte_carlo_matches_nngp() {
    let shape = (5, 5, 2);
    let (x, y) = (gaussian(50, 13), gaussian(50, 14));
    let spec = KernelSpec::conv_vec(2).nngp();
    let est = mc_nngp(&x, &y, shape, &spec, 128, 200, 15).unwrap();
    let exact = kernel_conv(&x, &y, shape, &spec).unwrap();
    assert!((est.mean - exact).abs() < 4.0 * est.stderr + 0.02 * exact.abs(), "{est:?} vs {exact}");
}

#[test]
fn monte_carlo_rejects_tiny_budgets() {
    let x = unit(4, 1);
    let spec = KernelSpec::fc(1);
    assert!(matches!(mc_nngp(&x, &x, (1, 1, 4), &spec, 8, 100, 0), Err(Error::Config(_))));
    assert!(matches!(mc_nngp(&x, &x, (1, 1, 4), &spec, 64, 5, 0), Err(Error::Config(_))));
}

/// Central differences on every parameter of a tiny net.
fn fd_ntk(net: &FcNet, x: &[f64], y: &[f64]) -> f64 {
    let eval = |n: &FcNet, v: &[f64]| n.forward(&DMatrix::from_column_slice(v.len(), 1, v))[(0, 0)];
    let h = 1e-6;
    let mut total = 0.0;
    let mut work = net.clone();
    for l in 0..net.weights.len() {
        for k in 0..net.weights[l].len() {
            let base = net.weights[l].as_slice()[k];
            let mut grad = [0.0; 2];
            for (g, v) in grad.iter_mut().zip([x, y]) {
                work.weights[l].as_mut_slice()[k] = base + h;
                let up = eval(&work, v);
                work.weights[l].as_mut_slice()[k] = base - h;
                *g = (up - eval(&work, v)) / (2.0 * h);
            }
            work.weights[l].as_mut_slice()[k] = base;
            total += grad[0] * grad[1];
        }
        for k in 0..net.biases[l].len() {
            let base = net.biases[l][k];
            let mut grad = [0.0; 2];
            for (g, v) in grad.iter_mut().zip([x, y]) {
                work.biases[l][k] = base + h;
                let up = eval(&work, v);
                work.biases[l][k] = base - h;
                *g = (up - eval(&work, v)) / (2.0 * h);
            }
            work.biases[l][k] = base;
            total += grad[0] * grad[1];
        }
    }
    total
}

#[test]
fn empirical_ntk_matches_parameter_finite_differences() {
    let spec = KernelSpec::fc(2).with_variances(2.0, 0.2);
    let (x, y) = (unit(5, 20), unit(5, 21));
    for param in [Parameterization::Ntk, Parameterization::Standard] {
        let net = FcNet::init(5, 7, 2, 1, &spec, param, 3);
        let pair = DMatrix::from_columns(&[DVector::from_column_slice(&x), DVector::from_column_slice(&y)]);
        let gram = net.ntk_gram(&pair, 0);
        let want = fd_ntk(&net, &x, &y);
        assert!((gram[(0, 1)] - want).abs() < 1e-6 * want.abs().max(1.0), "{param:?}: {} vs {want}", gram[(0, 1)]);
    }
}

#[test]
fn empirical_ntk_is_symmetric_and_nonnegative_on_the_diagonal() {
    let spec = KernelSpec::fc(3);
    let (x, y) = (unit(9, 1), unit(9, 2));
    assert!(empirical_ntk(&x, &x, &spec, 64, 0).unwrap() >= 0.0);
    let a = empirical_ntk(&x, &y, &spec, 64, 5).unwrap();
    let b = empirical_ntk(&y, &x, &spec, 64, 5).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs());
    assert!(empirical_ntk(&x, &y, &KernelSpec::convnet(1), 64, 0).is_err());
}

#[test]
fn empirical_ntk_averages_to_the_kernel_and_concentrates_with_width() {
    let spec = KernelSpec::fc(3);
    let (x, y) = (unit(16, 30), unit(16, 31));
    let exact = kernel_fc(&x, &y, &spec).unwrap();
    let draws = |width: usize| -> Vec<f64> {
        (0..50).map(|s| empirical_ntk(&x, &y, &spec, width, 100 + s).unwrap()).collect()
    };
    let wide = draws(4096);
    let mean = wide.iter().sum::<f64>() / 50.0;
    assert!((mean - exact).abs() < 0.03 * exact.abs(), "mean {mean} exact {exact}");
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&wide) < var(&draws(256)));
}

#[test]
fn gradient_distances_match_the_finite_network() {
    let points: Vec<Vec<f64>> = (0..6).map(|i| unit(12, 40 + i)).collect();
    let x = ImageSet::from_vectors(&points).unwrap();
    let spec = KernelSpec::fc(3).with_variances(2.0, 0.05);
    let exact = gradient_distance_matrix(&x, &spec).unwrap();
    let seeds = 8;
    let mut gram = DMatrix::zeros(6, 6);
    for s in 0..seeds {
        gram += empirical_ntk_gram(&x, &spec, 2048, 500 + s).unwrap().matrix();
    }
    gram /= seeds as f64;
    for i in 0..6 {
        for j in 0..i {
            let d = (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(0.0).sqrt();
            let rel = (d - exact[(i, j)]).abs() / exact[(i, j)];
            assert!(rel < 0.05, "({i},{j}): {d} vs {} rel {rel}", exact[(i, j)]);
        }
    }
}

fn tiny_task() -> (SupportSet, Dataset) {
    let data = synthetic_blobs(3, 40, (1, 1, 6), 4.0, 2).unwrap();
    let support = init_support(&data, 4, 1).unwrap();
    (support, data)
}

fn quick() -> TrainConfig {
    TrainConfig {
        width: 64,
        epochs: 60,
        ..TrainConfig::default()
    }
}

#[test]
fn untrained_network_scores_near_chance() {
    let (support, data) = tiny_task();
    let cfg = TrainConfig {
        epochs: 0,
        center: false,
        ..quick()
    };
    let mut total = 0.0;
    for seed in 0..10 {
        let r = train_finite(&support, &KernelSpec::fc(2), &TrainConfig { seed, ..cfg.clone() }, &data).unwrap();
        assert_eq!(r.best_epoch, 0);
        total += r.accuracy;
    }
    let mean = total / 10.0;
    assert!((mean - 1.0 / 3.0).abs() < 0.2, "mean accuracy {mean}");
}

#[test]
fn training_fits_separable_blobs_deterministically() {
    let (support, data) = tiny_task();
    for (param, center) in [(Parameterization::Standard, true), (Parameterization::Ntk, true), (Parameterization::Standard, false)] {
        let cfg = TrainConfig { param, center, ..quick() };
        let a = train_finite(&support, &KernelSpec::fc(2), &cfg, &data).unwrap();
        let b = train_finite(&support, &KernelSpec::fc(2), &cfg, &data).unwrap();
        assert_eq!(a, b);
        if center {
            assert!(a.accuracy > 0.9, "{param:?}: {a:?}");
        }
        assert!(a.eta_critical > 0.0 && a.final_loss.is_finite());
    }
}

#[test]
fn minibatches_cover_large_supports() {
    let data = synthetic_blobs(2, 80, (1, 1, 4), 4.0, 3).unwrap();
    let support = init_support(&data, 60, 0).unwrap();
    let cfg = TrainConfig { batch_size: 32, epochs: 10, ..quick() };
    let r = train_finite(&support, &KernelSpec::fc(1), &cfg, &data).unwrap();
    assert!(r.accuracy > 0.9, "{r:?}");
}

#[test]
fn huge_learning_rates_diverge() {
    let (support, data) = tiny_task();
    let cfg = TrainConfig { lr_factor: 1e6, ..quick() };
    assert!(matches!(train_finite(&support, &KernelSpec::fc(2), &cfg, &data), Err(Error::Diverged(_))));
}

#[test]
fn trainer_rejects_bad_configs() {
    let (support, data) = tiny_task();
    let spec = KernelSpec::fc(2);
    assert!(train_finite(&support, &KernelSpec::convnet(2), &quick(), &data).is_err());
    for cfg in [
        TrainConfig { width: 0, ..quick() },
        TrainConfig { lr_factor: 0.0, ..quick() },
        TrainConfig { momentum: 1.0, ..quick() },
        TrainConfig { val_fraction: 1.0, ..quick() },
    ] {
        assert!(matches!(train_finite(&support, &spec, &cfg, &data), Err(Error::Config(_))));
    }
}

