use paroquant::optim::gradcheck::*;
use paroquant::optim::graph::*;
use paroquant::quant::*;
use paroquant::tensor::{Matrix, Rng};
use paroquant::transform::TransformBundle;

fn random_linear(d_in: usize, d_out: usize, group: usize, bits: u32, rng: &mut Rng) -> QuantLinear {
    let w = Matrix::randn(d_in, d_out, rng);
    let mut bundle = TransformBundle::random(d_in, group, 2, group / 2, rng).unwrap();
    for a in &mut bundle.alpha { *a = rng.next_range(0.6, 1.8) as f32; }
    let bias: Vec<f32> = (0..d_out).map(|_| (rng.next_normal() * 0.05) as f32).collect();
    QuantLinear::new(w, Some(bias), bundle, QuantSpec::new(bits, group).unwrap()).unwrap()
}

fn census(name: &str, lin: &QuantLinear) {
    let w_rot = lin.transformed_weight();
    let params = lin.effective_params(&w_rot);
    let max_code = lin.spec.max_code();
    let d_out = w_rot.cols;
    let mut clamped = 0;
    let mut z_clamped_blocks = 0;
    for (bi, p) in params.iter().enumerate() {
        let _ = bi;
        if p.zero_point == 0.0 || p.zero_point == max_code {
            z_clamped_blocks += 1;
        }
    }
    for r in 0..w_rot.rows {
        let g = r / lin.spec.group_size;
        for c in 0..d_out {
            let p = params[g * d_out + c];
            let (_, rule) = fake_quant_value(w_rot.at(r, c), p, max_code);
            if rule.d_value == 0.0 { clamped += 1; }
        }
    }
    println!("{name}: clamped {clamped}/{} z-boundary blocks {z_clamped_blocks}/{}", w_rot.rows * d_out, params.len());
}

fn main() {
    let seed = 1000u64;
    let mut rng = Rng::new(seed);
    let d = *[6usize, 8, 10].get((rng.next_u64() % 3) as usize).unwrap();
    let h = *[8usize, 12].get((rng.next_u64() % 2) as usize).unwrap();
    let bits = *[3u32, 4, 5].get((rng.next_u64() % 3) as usize).unwrap();
    let group = if d % 4 == 0 { 4 } else { d };
    let up = random_linear(d, h, group.min(d), bits, &mut rng);
    let down = random_linear(h, d, 4, bits, &mut rng);
    census("up", &up);
    census("down", &down);
    let mut layer = LayerGraph { up, down, residual: true };
    let tokens = 4 + (rng.next_u64() % 3) as usize;
    let x = Matrix::randn(tokens, d, &mut rng);
    let base_out = layer.forward(&x).unwrap();
    let mut target = base_out;
    for v in &mut target.data { *v += (rng.next_normal() * 0.3) as f32; }

    // Check DOWN-linear mask agreement with the f64 frozen path by comparing
    // analytic vs library-frozen FD for a DOWN weight that is clamped.
    let frozen = freeze_layer(&layer, &x).unwrap();
    let (_, grads) = layer_loss_and_grads(&layer, &x, &target).unwrap();
    // down weights: find clamped ones
    let w_rot = layer.down.transformed_weight();
    let params = layer.down.effective_params(&w_rot);
    let max_code = layer.down.spec.max_code();
    let d_out = w_rot.cols;
    let mut shown = 0;
    for r in 0..w_rot.rows {
        if shown >= 6 { break; }
        let g = r / layer.down.spec.group_size;
        for c in 0..d_out {
            let p = params[g * d_out + c];
            let (_, rule) = fake_quant_value(w_rot.at(r, c), p, max_code);
            if rule.d_value == 0.0 && shown < 6 {
                shown += 1;
                let idx = r * d_out + c;
                let base = layer.down.weight.data[idx];
                let fd = central_diff(|v| {
                    layer.down.weight.data[idx] = v;
                    let l = layer_loss_frozen(&layer, &x, &target, &frozen).unwrap();
                    layer.down.weight.data[idx] = base;
                    l
                }, base, 1e-4);
                let an = grads.down.weight.data[idx] as f64;
                println!("clamped down w[{idx}]: analytic {an:.8} fd {fd:.8}");
            }
        }
    }
}
