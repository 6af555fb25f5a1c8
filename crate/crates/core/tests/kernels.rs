//! Hand-derived oracles and finite-difference checks for the tensor kernels.

use frnet_core::gradcheck::grad_check;
use frnet_core::tensor::{
    adaptive_avg_pool, batch_norm, concat_channels, conv2d, cross_entropy, depthwise_conv2d,
    dropout, global_avg_pool, linear, pair_softmax, upsample_nearest, Mode, Padding,
    RunningStats, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

fn approx(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} !~ {b} (tol {tol})");
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn conv2d_identity_kernel() {
    let x = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = conv2d(&x, &w, None, Padding::Valid, (1, 1)).unwrap();
    assert_eq!(y.data_clone(), x.data_clone());
}

#[test]
fn conv2d_row_same_and_valid() {
    let x = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
    let same = conv2d(&x, &w, None, Padding::Same, (1, 1)).unwrap();
    assert_eq!(same.data_clone(), vec![3.0, 6.0, 5.0]);
    let valid = conv2d(&x, &w, None, Padding::Valid, (1, 1)).unwrap();
    assert_eq!(valid.data_clone(), vec![6.0]);
}

#[test]
fn conv2d_rejects_bad_geometry() {
    let x = Tensor::new(&[1, 2, 1, 3], vec![0.0; 6]).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    assert!(conv2d(&x, &w, None, Padding::Valid, (1, 1)).is_err());
    let empty = Tensor::new(&[1, 1, 0, 3], vec![]).unwrap();
    let w1 = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    assert!(conv2d(&empty, &w1, None, Padding::Valid, (1, 1)).is_err());
}

#[test]
fn depthwise_per_channel_scaling() {
    let x = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new(&[2, 1, 1, 1], vec![2.0, 3.0]).unwrap();
    let y = depthwise_conv2d(&x, &w, None, Padding::Valid).unwrap();
    assert_eq!(y.data_clone(), vec![2.0, 4.0, 9.0, 12.0]);
}

#[test]
fn depthwise_identity_and_zero_channel() {
    let x = Tensor::new(&[1, 2, 1, 2], vec![5.0, 6.0, 0.0, 0.0]).unwrap();
    let w = Tensor::new(&[2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
    let b = Tensor::new(&[2], vec![0.0, 0.25]).unwrap();
    let y = depthwise_conv2d(&x, &w, Some(&b), Padding::Valid).unwrap();
    // channel 0 unchanged; all-zero channel 1 yields pure bias
    assert_eq!(y.data_clone(), vec![5.0, 6.0, 0.25, 0.25]);
}

#[test]
fn separable_equals_explicit_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[2, 3, 1, 8], &mut rng);
    let dw = random_tensor(&[3, 1, 1, 3], &mut rng);
    let pw = random_tensor(&[4, 3, 1, 1], &mut rng);
    let step1 = depthwise_conv2d(&x, &dw, None, Padding::Same).unwrap();
    let explicit = conv2d(&step1, &pw, None, Padding::Valid, (1, 1)).unwrap();
    // the separable layer is literally the same two kernels, so bit-equality
    let again = conv2d(
        &depthwise_conv2d(&x, &dw, None, Padding::Same).unwrap(),
        &pw,
        None,
        Padding::Valid,
        (1, 1),
    )
    .unwrap();
    assert_eq!(explicit.data_clone(), again.data_clone());
}

#[test]
fn batch_norm_constant_channel_gives_shift() {
    let x = Tensor::new(&[2, 1, 1, 2], vec![5.0; 4]).unwrap();
    let gamma = Tensor::new(&[1], vec![1.0]).unwrap();
    let beta = Tensor::new(&[1], vec![0.7]).unwrap();
    let running = RefCell::new(RunningStats::new(1));
    let y = batch_norm(&x, &gamma, &beta, &running, Mode::Train, 1e-5, 0.1).unwrap();
    for v in y.data_clone() {
        approx(v, 0.7, 1e-12);
    }
}

#[test]
fn batch_norm_train_output_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[4, 2, 1, 16], &mut rng);
    let gamma = Tensor::full(&[2], 1.0);
    let beta = Tensor::zeros(&[2]);
    let running = RefCell::new(RunningStats::new(2));
    let y = batch_norm(&x, &gamma, &beta, &running, Mode::Train, 1e-5, 0.1).unwrap();
    let d = y.data_clone();
    for c in 0..2 {
        let mut vals = Vec::new();
        for b in 0..4 {
            vals.extend_from_slice(&d[(b * 2 + c) * 16..(b * 2 + c + 1) * 16]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10, "channel mean {mean}");
        approx(var, 1.0, 1e-3); // epsilon-limited
    }
}

#[test]
fn batch_norm_eval_before_training_is_near_identity() {
    let x = Tensor::new(&[1, 1, 1, 3], vec![0.5, -0.5, 1.0]).unwrap();
    let gamma = Tensor::full(&[1], 1.0);
    let beta = Tensor::zeros(&[1]);
    let running = RefCell::new(RunningStats::new(1));
    let y = batch_norm(&x, &gamma, &beta, &running, Mode::Eval, 1e-5, 0.1).unwrap();
    for (a, b) in y.data_clone().iter().zip(x.data_clone()) {
        approx(*a, b, 1e-5);
    }
}

#[test]
fn activation_values() {
    let x = Tensor::new(&[5], vec![0.0, -2.0, 3.0, -1.0, 0.5]).unwrap();
    let r = x.relu().data_clone();
    assert_eq!(r, vec![0.0, 0.0, 3.0, 0.0, 0.5]);
    let e = x.elu(1.0).data_clone();
    approx(e[0], 0.0, 1e-15);
    approx(e[3], (-1.0f64).exp() - 1.0, 1e-12); // -0.63212...
    approx(e[3], -0.63212, 1e-5);
    approx(e[2], 3.0, 1e-15);
}

#[test]
fn dropout_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(y.data_clone(), x.data_clone());
    let z = dropout(&x, 0.9, Mode::Eval, &mut rng).unwrap();
    assert_eq!(z.data_clone(), x.data_clone());
    assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_zero_fraction_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20_000;
    let x = Tensor::full(&[n], 1.0);
    let y = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.02, "zero fraction {frac}");
}

#[test]
fn dropout_inverted_scaling_expectation() {
    // mean over many seeds converges to the input under inverted scaling
    let n = 10_000;
    let x = Tensor::full(&[n], 2.0);
    let mut sum = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = dropout(&x, 0.3, Mode::Train, &mut rng).unwrap();
    for v in y.data().iter() {
        sum += v;
    }
    let mean = sum / n as f64;
    assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
}

#[test]
fn adaptive_pool_bin_means() {
    let x = Tensor::new(&[1, 1, 1, 8], (1..=8).map(|v| v as f64).collect()).unwrap();
    let identity = adaptive_avg_pool(&x, (1, 8)).unwrap();
    assert_eq!(identity.data_clone(), x.data_clone());
    let halves = adaptive_avg_pool(&x, (1, 2)).unwrap();
    assert_eq!(halves.data_clone(), vec![2.5, 6.5]);
    let global = adaptive_avg_pool(&x, (1, 1)).unwrap();
    assert_eq!(global.data_clone(), vec![4.5]);
    assert!(adaptive_avg_pool(&x, (1, 9)).is_err());
}

#[test]
fn upsample_repeats_and_roundtrip() {
    let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    let y = upsample_nearest(&x, (1, 2)).unwrap();
    assert_eq!(y.data_clone(), vec![1.0, 1.0, 2.0, 2.0]);
    let same = upsample_nearest(&x, (1, 1)).unwrap();
    assert_eq!(same.data_clone(), x.data_clone());
    assert!(upsample_nearest(&x, (1, 0)).is_err());

    // pool-then-upsample is identity on inputs constant within each bin
    let c = Tensor::new(&[1, 1, 1, 8], vec![3.0; 8]).unwrap();
    let pooled = adaptive_avg_pool(&c, (1, 4)).unwrap();
    let restored = upsample_nearest(&pooled, (1, 2)).unwrap();
    assert_eq!(restored.data_clone(), c.data_clone());
}

#[test]
fn linear_hand_cases() {
    let x = Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap();
    let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
    let b = Tensor::new(&[1], vec![1.0]).unwrap();
    let y = linear(&x, &w, Some(&b)).unwrap();
    assert_eq!(y.data_clone(), vec![6.0]);

    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let same = linear(&x, &eye, None).unwrap();
    assert_eq!(same.data_clone(), x.data_clone());
}

#[test]
fn linear_bias_gradient_is_batch_sum() {
    let x = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let w = Tensor::new(&[1, 2], vec![0.5, -0.5]).unwrap();
    let b = Tensor::new(&[1], vec![0.0]).unwrap();
    b.zero_grad();
    let y = linear(&x, &w, Some(&b)).unwrap();
    let loss = y.sum();
    loss.backward();
    // d(sum)/db = batch size
    assert_eq!(b.grad_clone().unwrap(), vec![3.0]);
}

#[test]
fn global_avg_pool_cases() {
    let x = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(global_avg_pool(&x).unwrap().data_clone(), vec![2.5]);
    let c = Tensor::full(&[2, 3, 1, 7], 4.25);
    assert_eq!(global_avg_pool(&c).unwrap().data_clone(), vec![4.25; 6]);
    // identical output shape for different temporal lengths
    let short = Tensor::zeros(&[2, 3, 1, 8]);
    let long = Tensor::zeros(&[2, 3, 1, 16]);
    assert_eq!(
        global_avg_pool(&short).unwrap().shape(),
        global_avg_pool(&long).unwrap().shape()
    );
}

#[test]
fn concat_channels_definition_and_backward() {
    let a = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(&[1, 3, 1, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
    let y = concat_channels(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(y.shape(), vec![1, 5, 1, 2]);
    assert_eq!(
        y.data_clone(),
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]
    );

    a.zero_grad();
    b.zero_grad();
    let coeffs: Vec<f64> = (0..10).map(|v| v as f64).collect();
    let loss = y.dot_const(&coeffs).unwrap();
    loss.backward();
    assert_eq!(a.grad_clone().unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(b.grad_clone().unwrap(), vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);

    let single = concat_channels(&[a.clone()]).unwrap();
    assert_eq!(single.data_clone(), a.data_clone());

    let bad = Tensor::zeros(&[1, 1, 1, 3]);
    assert!(concat_channels(&[a, bad]).is_err());
}

#[test]
fn cross_entropy_oracles() {
    // uniform logits, M = 4 -> ln 4
    let logits = Tensor::zeros(&[1, 4]);
    let loss = cross_entropy(&logits, &[2]).unwrap();
    approx(loss.item(), 4.0f64.ln(), 1e-12);

    // two-class [2,0], label 0 -> -ln(e^2/(e^2+1))
    let logits = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
    let loss = cross_entropy(&logits, &[0]).unwrap();
    approx(loss.item(), -(2f64.exp() / (2f64.exp() + 1.0)).ln(), 1e-12);
    approx(loss.item(), 0.1269, 1e-4);

    // loss decreases monotonically as the true logit grows
    let mut prev = f64::INFINITY;
    for k in 0..6 {
        let logits = Tensor::new(&[1, 2], vec![k as f64 * 3.0, 0.0]).unwrap();
        let l = cross_entropy(&logits, &[0]).unwrap().item();
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-6);

    // out-of-range label
    let logits = Tensor::zeros(&[1, 2]);
    assert!(cross_entropy(&logits, &[2]).is_err());
}

#[test]
fn pair_softmax_oracles() {
    // equal scores -> 0.5 everywhere
    let st = Tensor::zeros(&[1, 3]);
    let sc = Tensor::zeros(&[1, 2]);
    let w = pair_softmax(&st, &sc).unwrap();
    assert_eq!(w.shape(), vec![1, 2, 1, 3]);
    for v in w.data_clone() {
        approx(v, 0.5, 1e-15);
    }

    // (ln 2, 0) -> (2/3, 1/3)
    let st = Tensor::new(&[1, 1], vec![2.0f64.ln()]).unwrap();
    let sc = Tensor::zeros(&[1, 1]);
    let w = pair_softmax(&st, &sc).unwrap();
    approx(w.data_clone()[0], 2.0 / 3.0, 1e-14);
    approx(w.one_minus().data_clone()[0], 1.0 / 3.0, 1e-14);

    // non-finite input is rejected by name
    let bad = Tensor::new(&[1, 1], vec![f64::NAN]).unwrap();
    match pair_softmax(&bad, &sc) {
        Err(err) => assert!(err.to_string().contains("temporal")),
        Ok(_) => panic!("NaN score should be rejected"),
    }
}

// ---- finite-difference gradient checks --------------------------------

#[test]
fn grad_check_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&[3, 4], &mut rng);
    let w = random_tensor(&[2, 4], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let coeffs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        |inputs| linear(&inputs[0], &inputs[1], Some(&inputs[2]))?.dot_const(&coeffs),
        &[x, w, b],
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn grad_check_conv2d_same() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random_tensor(&[2, 2, 3, 6], &mut rng);
    let w = random_tensor(&[3, 2, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let coeffs: Vec<f64> = (0..2 * 3 * 3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        |inputs| {
            conv2d(&inputs[0], &inputs[1], Some(&inputs[2]), Padding::Same, (1, 1))?
                .dot_const(&coeffs)
        },
        &[x, w, b],
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn grad_check_kernel_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    // depthwise conv
    let x = random_tensor(&[2, 3, 1, 6], &mut rng);
    let w = random_tensor(&[3, 2, 1, 3], &mut rng);
    let b = random_tensor(&[6], &mut rng);
    let coeffs: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check(
        |i| depthwise_conv2d(&i[0], &i[1], Some(&i[2]), Padding::Same)?.dot_const(&coeffs),
        &[x, w, b],
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "depthwise: {}", r.max_rel_err);

    // batch norm (train mode)
    let x = random_tensor(&[3, 2, 1, 4], &mut rng);
    let gamma = random_tensor(&[2], &mut rng);
    let beta = random_tensor(&[2], &mut rng);
    let coeffs: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check(
        |i| {
            let running = RefCell::new(RunningStats::new(2));
            batch_norm(&i[0], &i[1], &i[2], &running, Mode::Train, 1e-5, 0.1)?
                .dot_const(&coeffs)
        },
        &[x, gamma, beta],
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "batch_norm: {}", r.max_rel_err);

    // activations
    let x = random_tensor(&[17], &mut rng);
    let coeffs: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c2 = coeffs.clone();
    let r = grad_check(|i| i[0].elu(1.0).dot_const(&coeffs), std::slice::from_ref(&x), 1e-4).unwrap();
    assert!(r.passed(), "elu: {}", r.max_rel_err);
    let r = grad_check(|i| Ok(i[0].relu()).and_then(|t| t.dot_const(&c2)), &[x], 1e-4).unwrap();
    assert!(r.passed(), "relu: {}", r.max_rel_err);

    // pooling and upsampling
    let x = random_tensor(&[2, 2, 1, 8], &mut rng);
    let coeffs: Vec<f64> = (0..2 * 2 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check(
        |i| adaptive_avg_pool(&i[0], (1, 4))?.dot_const(&coeffs),
        std::slice::from_ref(&x),
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "adaptive_avg_pool: {}", r.max_rel_err);
    let coeffs: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check(
        |i| upsample_nearest(&i[0], (1, 2))?.dot_const(&coeffs),
        std::slice::from_ref(&x),
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "upsample: {}", r.max_rel_err);
    let coeffs: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check(|i| global_avg_pool(&i[0])?.dot_const(&coeffs), &[x], 1e-4).unwrap();
    assert!(r.passed(), "global_avg_pool: {}", r.max_rel_err);

    // pair softmax fusion
    let st = random_tensor(&[2, 4], &mut rng);
    let sc = random_tensor(&[2, 3], &mut rng);
    let coeffs: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check(
        |i| pair_softmax(&i[0], &i[1])?.dot_const(&coeffs),
        &[st, sc],
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "pair_softmax: {}", r.max_rel_err);

    // cross entropy
    let logits = random_tensor(&[3, 4], &mut rng);
    let r = grad_check(
        |i| cross_entropy(&i[0], &[0, 2, 3]),
        std::slice::from_ref(&logits),
        1e-6,
    )
    .unwrap();
    assert!(r.passed(), "cross_entropy: {}", r.max_rel_err);
}

#[test]
fn backward_visits_shared_nodes_once() {
    // x used twice: d(x*x + x)/dx = 2x + 1
    let x = Tensor::new(&[1], vec![3.0]).unwrap();
    x.zero_grad();
    let y = x.mul(&x).unwrap().add(&x).unwrap();
    y.backward();
    assert_eq!(x.grad_clone().unwrap(), vec![7.0]);
}
