//! Finite-difference validation of every hand-derived gradient path.
//!
//! Analytic gradients flow through the real forward with STE rules; the
//! numeric side differences the frozen-quantization surrogate, which is
//! smooth, matches the real forward at the base point, and has the STE rules
//! as its exact derivatives. Instances are sampled away from the Huber kink
//! and the scale/alpha floors.

use paroquant::optim::gradcheck::{central_diff, freeze_layer, grad_close, layer_loss_frozen};
use paroquant::optim::graph::{
    layer_loss_and_grads, LayerGraph, QuantLinear, QuantParamMode,
};
use paroquant::quant::QuantSpec;
use paroquant::tensor::{Matrix, Rng};
use paroquant::transform::TransformBundle;

const REL_TOL: f64 = 1e-3;
const ABS_TOL: f64 = 1e-5;

fn random_linear(
    d_in: usize,
    d_out: usize,
    group: usize,
    bits: u32,
    rng: &mut Rng,
    learned: bool,
) -> QuantLinear {
    let w = Matrix::randn(d_in, d_out, rng);
    let mut bundle = TransformBundle::random(d_in, group, 2, group / 2, rng).unwrap();
    // Keep scales well away from the positivity floor.
    for a in &mut bundle.alpha {
        *a = rng.next_range(0.6, 1.8) as f32;
    }
    let bias: Vec<f32> = (0..d_out).map(|_| (rng.next_normal() * 0.05) as f32).collect();
    let mut lin =
        QuantLinear::new(w, Some(bias), bundle, QuantSpec::new(bits, group).unwrap()).unwrap();
    if learned {
        // Stage-2 shape: transform folded into the weights, parameters live.
        lin.weight = lin.transformed_weight();
        lin.transform_weights = false;
        lin.refresh_qparams();
        lin.mode = QuantParamMode::Learned;
    }
    lin
}

fn random_layer(seed: u64, learned: bool) -> (LayerGraph, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let d = *[6usize, 8, 10].get((rng.next_u64() % 3) as usize).unwrap();
    let h = *[8usize, 12].get((rng.next_u64() % 2) as usize).unwrap();
    let bits = *[3u32, 4, 5].get((rng.next_u64() % 3) as usize).unwrap();
    let group = if d % 4 == 0 { 4 } else { d };
    let up = random_linear(d, h, group.min(d), bits, &mut rng, learned);
    let down = random_linear(h, d, 4, bits, &mut rng, learned);
    let layer = LayerGraph { up, down, residual: true };
    let tokens = 4 + (rng.next_u64() % 3) as usize;
    let x = Matrix::randn(tokens, d, &mut rng);
    // Target near the forward output keeps Huber in its quadratic branch.
    let base = layer.forward(&x).unwrap();
    let mut target = base;
    for v in &mut target.data {
        *v += (rng.next_normal() * 0.3) as f32;
    }
    (layer, x, target)
}


/// Compare with retry at shrinking steps: kink or curvature contamination at
/// one step size vanishes as h shrinks, while a genuine gradient error
/// persists at every h. The FP64 surrogate keeps noise negligible even at
/// the smallest step.
fn check_grad(label: String, analytic: f64, mut f: impl FnMut(f32) -> f64, base: f32, h0: f32) {
    let mut last = f64::NAN;
    for factor in [1.0f32, 0.25, 0.0625] {
        let fd = central_diff(&mut f, base, h0 * factor);
        if grad_close(analytic, fd, REL_TOL, ABS_TOL) {
            return;
        }
        last = fd;
    }
    panic!("{label}: analytic {analytic} fd {last}");
}

/// Pick a handful of well-spread indices.
fn sample_indices(len: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    (0..count.min(len)).map(|_| (rng.next_u64() % len as u64) as usize).collect()
}

#[test]
fn fifty_randomized_instances_match_finite_differences() {
    let mut checked = 0usize;
    for instance in 0..50 {
        let learned = instance % 2 == 1;
        let (mut layer, x, target) = random_layer(1000 + instance as u64, learned);
        let frozen = freeze_layer(&layer, &x).unwrap();
        let (_, grads) = layer_loss_and_grads(&layer, &x, &target).unwrap();
        let mut pick_rng = Rng::new(9000 + instance as u64);

        // Rotation angles of the up linear, through both transform paths.
        let angles = layer.up.angles_flat();
        let analytic_angles = grads.up.angles_flat();
        if !angles.is_empty() {
            for idx in sample_indices(angles.len(), 3, &mut pick_rng) {
                let base = angles[idx];
                check_grad(
                    format!("instance {instance} theta[{idx}]"),
                    analytic_angles[idx] as f64,
                    |v| {
                        let mut a = layer.up.angles_flat();
                        a[idx] = v;
                        layer.up.set_angles_flat(&a);
                        let loss = layer_loss_frozen(&layer, &x, &target, &frozen).unwrap();
                        let mut a = layer.up.angles_flat();
                        a[idx] = base;
                        layer.up.set_angles_flat(&a);
                        loss
                    },
                    base,
                    1e-4,
                );
                checked += 1;
            }
        }

        // Channel scales of the down linear.
        for idx in sample_indices(layer.down.bundle.alpha.len(), 3, &mut pick_rng) {
            let base = layer.down.bundle.alpha[idx];
            check_grad(
                format!("instance {instance} alpha[{idx}]"),
                grads.down.alpha[idx] as f64,
                |v| {
                    layer.down.bundle.alpha[idx] = v;
                    let loss = layer_loss_frozen(&layer, &x, &target, &frozen).unwrap();
                    layer.down.bundle.alpha[idx] = base;
                    loss
                },
                base,
                1e-4,
            );
            checked += 1;
        }

        // Weights of the up linear.
        for idx in sample_indices(layer.up.weight.data.len(), 3, &mut pick_rng) {
            let base = layer.up.weight.data[idx];
            check_grad(
                format!("instance {instance} w[{idx}]"),
                grads.up.weight.data[idx] as f64,
                |v| {
                    layer.up.weight.data[idx] = v;
                    let loss = layer_loss_frozen(&layer, &x, &target, &frozen).unwrap();
                    layer.up.weight.data[idx] = base;
                    loss
                },
                base,
                1e-4,
            );
            checked += 1;
        }

        if learned {
            // Quantizer scales and zero points of the down linear.
            let scales = layer.down.scales_flat();
            for idx in sample_indices(scales.len(), 2, &mut pick_rng) {
                let base = scales[idx];
                let h = (base * 1e-3).max(1e-7);
                check_grad(
                    format!("instance {instance} s[{idx}]"),
                    grads.down.scales[idx] as f64,
                    |v| {
                        let mut s = layer.down.scales_flat();
                        s[idx] = v;
                        layer.down.set_scales_flat(&s);
                        let loss = layer_loss_frozen(&layer, &x, &target, &frozen).unwrap();
                        let mut s = layer.down.scales_flat();
                        s[idx] = base;
                        layer.down.set_scales_flat(&s);
                        loss
                    },
                    base,
                    h,
                );
                checked += 1;
            }
            let zeros = layer.down.zeros_flat();
            for idx in sample_indices(zeros.len(), 2, &mut pick_rng) {
                let base = zeros[idx];
                check_grad(
                    format!("instance {instance} z[{idx}]"),
                    grads.down.zeros[idx] as f64,
                    |v| {
                        let mut z = layer.down.zeros_flat();
                        z[idx] = v;
                        layer.down.set_zeros_flat(&z);
                        let loss = layer_loss_frozen(&layer, &x, &target, &frozen).unwrap();
                        let mut z = layer.down.zeros_flat();
                        z[idx] = base;
                        layer.down.set_zeros_flat(&z);
                        loss
                    },
                    base,
                    1e-3,
                );
                checked += 1;
            }
        }
    }
    assert!(checked >= 400, "only {checked} gradient comparisons ran");
}

#[test]
fn single_givens_quadratic_in_theta() {
    // No quantization anywhere: the real forward is smooth, so the analytic
    // angle gradient must match differences of the real loss.
    use paroquant::transform::{apply_givens_rows, Pair};
    let mut rng = Rng::new(42);
    let w = Matrix::randn(2, 6, &mut rng);
    let target = Matrix::randn(2, 6, &mut rng);
    let pair = Pair { i: 0, j: 1 };

    let loss = |theta: f32| -> f64 {
        let mut m = w.clone();
        apply_givens_rows(&mut m.data, 6, pair, theta);
        m.data
            .iter()
            .zip(&target.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                0.5 * d * d
            })
            .sum()
    };

    for &theta in &[0.0f32, 0.4, -1.1, 2.0] {
        // dL/dtheta via the output form sum(g_j*y_i - g_i*y_j) with
        // g = (y - target).
        let mut m = w.clone();
        apply_givens_rows(&mut m.data, 6, pair, theta);
        let mut analytic = 0.0f64;
        for k in 0..6 {
            let (yi, yj) = (m.at(0, k) as f64, m.at(1, k) as f64);
            let (gi, gj) = (yi - target.at(0, k) as f64, yj - target.at(1, k) as f64);
            analytic += gj * yi - gi * yj;
        }
        let fd = central_diff(|t| loss(t), theta, 1e-3);
        assert!(
            grad_close(analytic, fd, 1e-3, 1e-6),
            "theta {theta}: analytic {analytic} fd {fd}"
        );
    }
}

#[test]
fn dynamic_and_learned_modes_share_base_loss() {
    // Folding the stage-1 transform and re-initializing parameters must not
    // change the forward.
    let (layer, x, target) = random_layer(7777, false);
    let (loss_dynamic, _) = layer_loss_and_grads(&layer, &x, &target).unwrap();
    let mut folded = layer.clone();
    for lin in [&mut folded.up, &mut folded.down] {
        lin.weight = lin.transformed_weight();
        lin.transform_weights = false;
        lin.refresh_qparams();
        lin.mode = QuantParamMode::Learned;
    }
    let (loss_learned, _) = layer_loss_and_grads(&folded, &x, &target).unwrap();
    assert_eq!(loss_dynamic.to_bits(), loss_learned.to_bits());
}
