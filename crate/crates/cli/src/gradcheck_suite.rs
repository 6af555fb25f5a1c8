//! The `gradcheck` subcommand: finite-difference checks of every kernel op
//! and the full network, printed as a table. Exits nonzero if any op fails.

use anyhow::{bail, Result};
use frnet_core::gradcheck::{grad_check, GradCheckReport};
use frnet_core::network::{Ablation, Network, NetworkConfig};
use frnet_core::tensor::{
    adaptive_avg_pool, batch_norm, conv2d, cross_entropy, depthwise_conv2d, global_avg_pool,
    linear, pair_softmax, upsample_nearest, Mode, Padding, RunningStats, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

const TOLERANCE: f64 = 1e-4;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape/data mismatch")
}

fn coeffs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn run(seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut row = |name: &str, report: GradCheckReport| {
        let ok = report.passed();
        if !ok {
            failures += 1;
        }
        println!(
            "{:<18} max rel err {:>10.3e}  {}",
            name,
            report.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    };

    let x = random_tensor(&[2, 2, 3, 6], &mut rng);
    let w = random_tensor(&[3, 2, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let c = coeffs(2 * 3 * 3 * 6, &mut rng);
    row(
        "conv2d",
        grad_check(
            |i| conv2d(&i[0], &i[1], Some(&i[2]), Padding::Same, (1, 1))?.dot_const(&c),
            &[x, w, b],
            TOLERANCE,
        )?,
    );

    let x = random_tensor(&[2, 3, 1, 6], &mut rng);
    let w = random_tensor(&[3, 2, 1, 3], &mut rng);
    let b = random_tensor(&[6], &mut rng);
    let c = coeffs(2 * 6 * 6, &mut rng);
    row(
        "depthwise_conv2d",
        grad_check(
            |i| depthwise_conv2d(&i[0], &i[1], Some(&i[2]), Padding::Same)?.dot_const(&c),
            &[x, w, b],
            TOLERANCE,
        )?,
    );

    let x = random_tensor(&[3, 4], &mut rng);
    let w = random_tensor(&[2, 4], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let c = coeffs(6, &mut rng);
    row(
        "linear",
        grad_check(
            |i| linear(&i[0], &i[1], Some(&i[2]))?.dot_const(&c),
            &[x, w, b],
            TOLERANCE,
        )?,
    );

    let x = random_tensor(&[3, 2, 1, 4], &mut rng);
    let g = random_tensor(&[2], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let c = coeffs(24, &mut rng);
    row(
        "batch_norm",
        grad_check(
            |i| {
                let running = RefCell::new(RunningStats::new(2));
                batch_norm(&i[0], &i[1], &i[2], &running, Mode::Train, 1e-5, 0.1)?.dot_const(&c)
            },
            &[x, g, b],
            TOLERANCE,
        )?,
    );

    let x = random_tensor(&[2, 2, 1, 8], &mut rng);
    let c = coeffs(2 * 2 * 4, &mut rng);
    row(
        "adaptive_avg_pool",
        grad_check(
            |i| adaptive_avg_pool(&i[0], (1, 4))?.dot_const(&c),
            std::slice::from_ref(&x),
            TOLERANCE,
        )?,
    );
    let c = coeffs(2 * 2 * 16, &mut rng);
    row(
        "upsample_nearest",
        grad_check(
            |i| upsample_nearest(&i[0], (1, 2))?.dot_const(&c),
            std::slice::from_ref(&x),
            TOLERANCE,
        )?,
    );
    let c = coeffs(4, &mut rng);
    row(
        "global_avg_pool",
        grad_check(|i| global_avg_pool(&i[0])?.dot_const(&c), &[x], TOLERANCE)?,
    );

    let x = random_tensor(&[13], &mut rng);
    let c = coeffs(13, &mut rng);
    let c2 = c.clone();
    row(
        "elu",
        grad_check(
            |i| i[0].elu(1.0).dot_const(&c),
            std::slice::from_ref(&x),
            TOLERANCE,
        )?,
    );
    row("relu", grad_check(|i| i[0].relu().dot_const(&c2), &[x], TOLERANCE)?);

    let st = random_tensor(&[2, 4], &mut rng);
    let sc = random_tensor(&[2, 3], &mut rng);
    let c = coeffs(2 * 3 * 4, &mut rng);
    row(
        "pair_softmax",
        grad_check(
            |i| pair_softmax(&i[0], &i[1])?.dot_const(&c),
            &[st, sc],
            TOLERANCE,
        )?,
    );

    let logits = random_tensor(&[3, 4], &mut rng);
    row(
        "cross_entropy",
        grad_check(
            |i| cross_entropy(&i[0], &[0, 2, 3]),
            std::slice::from_ref(&logits),
            TOLERANCE,
        )?,
    );

    // full network: loss w.r.t. input and every parameter
    let config = NetworkConfig {
        electrodes: 3,
        trial_length: 32,
        classes: 2,
        stem_filters: 2,
        stem_temporal_kernel: 8,
        stem_depth_multiplier: 1,
        stem_pool: 8,
        mfe_branch_kernels: vec![3],
        mfe_filters_per_branch: 2,
        fr_channels: 8,
        temporal_scale_factor: 2,
        scale_base: 2,
        channel_split_factor: 1,
        prediction_kernel: 4,
        dropout_p: 0.0,
        elu_alpha: 1.0,
    };
    let net = Network::new(config, Ablation::Full, &mut rng)?;
    let x = random_tensor(&[2, 1, 3, 32], &mut rng);
    let mut inputs = vec![x];
    inputs.extend(net.parameters().into_iter().map(|(_, t)| t));
    row(
        "full_network",
        grad_check(
            |t| {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                cross_entropy(&net.forward(&t[0], Mode::Eval, &mut r)?, &[0, 1])
            },
            &inputs,
            TOLERANCE,
        )?,
    );

    if failures > 0 {
        bail!("{failures} gradient check(s) exceeded tolerance {TOLERANCE:e}");
    }
    Ok(())
}
