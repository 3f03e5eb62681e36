//! Finite-difference support: a smooth FP64 surrogate of the quantized
//! forward.
//!
//! The true derivative of round() is zero almost everywhere, so differencing
//! the real forward can never reproduce straight-through gradients. The
//! surrogate freezes the discrete state of fake-quant at a base point — the
//! rounding residual Δ, the clamp active-set, and the zero-point rounding
//! offset — and is smooth in every parameter with the STE rules as its exact
//! derivatives. It is written as an independent FP64 path (own transform,
//! matmul, activation, and loss loops) so central differences are not limited
//! by the FP32 rounding of the production forward.

use crate::quant::{GroupParams, QuantSpec, SCALE_EPS};
use crate::tensor::Matrix;
use crate::transform::TransformBundle;
use crate::{Error, Result};

use super::graph::{LayerGraph, QuantLinear, QuantParamMode};

struct F64Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl F64Matrix {
    fn from_f32(m: &Matrix) -> Self {
        Self { rows: m.rows, cols: m.cols, data: m.data.iter().map(|&v| v as f64).collect() }
    }
}

/// `diag(α)·W` then the rotation sequence, in FP64.
fn transformed_weight_f64(lin: &QuantLinear) -> F64Matrix {
    let mut w = F64Matrix::from_f32(&lin.weight);
    if !lin.transform_weights {
        return w;
    }
    let bundle = &lin.bundle;
    let cols = w.cols;
    for (r, row) in w.data.chunks_mut(cols).enumerate() {
        let a = bundle.alpha[r] as f64;
        for v in row {
            *v *= a;
        }
    }
    for g in 0..bundle.layout.num_groups {
        let (start, _) = bundle.layout.group_bounds(g);
        for rot in &bundle.rotations[g] {
            for (p, &theta) in rot.pairs.iter().zip(&rot.angles) {
                let (cos, sin) = ((theta as f64).cos(), (theta as f64).sin());
                for c in 0..cols {
                    let (ii, jj) = ((start + p.i) * cols + c, (start + p.j) * cols + c);
                    let (a, b) = (w.data[ii], w.data[jj]);
                    w.data[ii] = cos * a - sin * b;
                    w.data[jj] = sin * a + cos * b;
                }
            }
        }
    }
    w
}

/// `X·T⁻¹` in FP64.
fn inverse_activations_f64(x: &F64Matrix, bundle: &TransformBundle) -> F64Matrix {
    let cols = x.cols;
    let mut out = F64Matrix { rows: x.rows, cols, data: x.data.clone() };
    for row in out.data.chunks_mut(cols) {
        for (v, &a) in row.iter_mut().zip(&bundle.alpha) {
            *v /= a as f64;
        }
    }
    for g in 0..bundle.layout.num_groups {
        let (start, _) = bundle.layout.group_bounds(g);
        for rot in &bundle.rotations[g] {
            for (p, &theta) in rot.pairs.iter().zip(&rot.angles) {
                let (cos, sin) = ((theta as f64).cos(), (theta as f64).sin());
                for row in out.data.chunks_mut(cols) {
                    let (a, b) = (row[start + p.i], row[start + p.j]);
                    row[start + p.i] = cos * a - sin * b;
                    row[start + p.j] = sin * a + cos * b;
                }
            }
        }
    }
    out
}

fn matmul_f64(a: &F64Matrix, b: &F64Matrix) -> F64Matrix {
    let mut out = F64Matrix { rows: a.rows, cols: b.cols, data: vec![0.0; a.rows * b.cols] };
    for i in 0..a.rows {
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            for j in 0..b.cols {
                out.data[i * b.cols + j] += av * b.data[k * b.cols + j];
            }
        }
    }
    out
}

/// Discrete fake-quant state captured at a base point.
pub struct FrozenQuant {
    /// Per element: rounding residual `round(v/s) - v/s` (in-range entries).
    delta: Vec<f64>,
    /// Per element: 0 in range, -1 clamped low, +1 clamped high.
    boundary: Vec<i8>,
    /// Per block: `round(z) - z` at the base point.
    zero_offset: Vec<f64>,
    /// Parameters at the base point; the live ones in dynamic mode.
    qparams_base: Vec<GroupParams>,
}

fn quant_params_f64(w: &F64Matrix, spec: QuantSpec) -> Vec<GroupParams> {
    let d_out = w.cols;
    let num_groups = w.rows.div_ceil(spec.group_size);
    let max_code = spec.max_code();
    let mut params = vec![GroupParams { scale: SCALE_EPS, zero_point: 0.0 }; num_groups * d_out];
    for g in 0..num_groups {
        let start = g * spec.group_size;
        let len = spec.group_size.min(w.rows - start);
        for c in 0..d_out {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                let v = w.data[(start + k) * d_out + c];
                min = min.min(v);
                max = max.max(v);
            }
            let scale = (((max - min) / max_code as f64) as f32).max(SCALE_EPS);
            let zero = (-(min as f32 / scale)).round_ties_even().clamp(0.0, max_code);
            params[g * d_out + c] = GroupParams { scale, zero_point: zero };
        }
    }
    params
}

fn freeze_quant_f64(w: &F64Matrix, qparams: &[GroupParams], spec: QuantSpec) -> FrozenQuant {
    let max_code = spec.max_code() as f64;
    let d_out = w.cols;
    let mut delta = vec![0.0f64; w.data.len()];
    let mut boundary = vec![0i8; w.data.len()];
    let mut zero_offset = vec![0.0f64; qparams.len()];
    for (block, p) in qparams.iter().enumerate() {
        let zq = (p.zero_point as f64).round_ties_even().clamp(0.0, max_code);
        zero_offset[block] = zq - p.zero_point as f64;
    }
    for r in 0..w.rows {
        let g = r / spec.group_size;
        for c in 0..d_out {
            let idx = r * d_out + c;
            let p = qparams[g * d_out + c];
            let s = p.scale.max(SCALE_EPS) as f64;
            let zq = (p.zero_point as f64).round_ties_even().clamp(0.0, max_code);
            let rounded = (w.data[idx] / s).round_ties_even();
            let pre_clamp = rounded + zq;
            if pre_clamp < 0.0 {
                boundary[idx] = -1;
            } else if pre_clamp > max_code {
                boundary[idx] = 1;
            } else {
                delta[idx] = rounded - w.data[idx] / s;
            }
        }
    }
    FrozenQuant { delta, boundary, zero_offset, qparams_base: qparams.to_vec() }
}

/// The smooth surrogate of one fake-quantized element:
/// in range `v + Δ·s`, clamped `(B - (z + Δz))·s`.
#[inline]
fn surrogate_value(
    v: f64,
    scale: f64,
    zero: f64,
    delta: f64,
    boundary: i8,
    zero_offset: f64,
    max_code: f64,
) -> f64 {
    let s = scale.max(SCALE_EPS as f64);
    match boundary {
        0 => v + delta * s,
        -1 => (0.0 - (zero + zero_offset)) * s,
        _ => (max_code - (zero + zero_offset)) * s,
    }
}

fn linear_forward_frozen(lin: &QuantLinear, x: &F64Matrix, frozen: &FrozenQuant) -> F64Matrix {
    let x_rot = inverse_activations_f64(x, &lin.bundle);
    let w_rot = transformed_weight_f64(lin);
    let live_params: Vec<(f64, f64)> = match lin.mode {
        QuantParamMode::Learned => {
            lin.qparams.iter().map(|p| (p.scale as f64, p.zero_point as f64)).collect()
        }
        QuantParamMode::Dynamic => frozen
            .qparams_base
            .iter()
            .map(|p| (p.scale as f64, p.zero_point as f64))
            .collect(),
    };
    let max_code = lin.spec.max_code() as f64;
    let d_out = w_rot.cols;
    let mut w_q = F64Matrix { rows: w_rot.rows, cols: d_out, data: vec![0.0; w_rot.data.len()] };
    for r in 0..w_rot.rows {
        let g = r / lin.spec.group_size;
        for c in 0..d_out {
            let idx = r * d_out + c;
            let block = g * d_out + c;
            let (s, z) = live_params[block];
            w_q.data[idx] = surrogate_value(
                w_rot.data[idx],
                s,
                z,
                frozen.delta[idx],
                frozen.boundary[idx],
                frozen.zero_offset[block],
                max_code,
            );
        }
    }
    let mut y = matmul_f64(&x_rot, &w_q);
    if let Some(bias) = &lin.bias {
        for row in y.data.chunks_mut(y.cols) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b as f64;
            }
        }
    }
    y
}

/// Frozen state for both linears of a layer.
pub struct FrozenLayer {
    pub up: FrozenQuant,
    pub down: FrozenQuant,
}

/// Capture the frozen state of a layer at its current parameters.
pub fn freeze_layer(layer: &LayerGraph, _x: &Matrix) -> Result<FrozenLayer> {
    let freeze_one = |lin: &QuantLinear| -> FrozenQuant {
        let w_rot = transformed_weight_f64(lin);
        let params = match lin.mode {
            QuantParamMode::Dynamic => quant_params_f64(&w_rot, lin.spec),
            QuantParamMode::Learned => lin.qparams.clone(),
        };
        freeze_quant_f64(&w_rot, &params, lin.spec)
    };
    Ok(FrozenLayer { up: freeze_one(&layer.up), down: freeze_one(&layer.down) })
}

fn silu_f64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Surrogate layer forward in FP64.
pub fn layer_forward_frozen(
    layer: &LayerGraph,
    x: &Matrix,
    frozen: &FrozenLayer,
) -> Result<Matrix> {
    let x64 = F64Matrix::from_f32(x);
    let mut h = linear_forward_frozen(&layer.up, &x64, &frozen.up);
    for v in &mut h.data {
        *v = silu_f64(*v);
    }
    let mut y = linear_forward_frozen(&layer.down, &h, &frozen.down);
    if layer.residual {
        for (v, &xv) in y.data.iter_mut().zip(&x64.data) {
            *v += xv;
        }
    }
    Ok(Matrix {
        rows: y.rows,
        cols: y.cols,
        data: y.data.iter().map(|&v| v as f32).collect(),
    })
}

/// Surrogate Huber loss of a layer against a target, fully in FP64.
pub fn layer_loss_frozen(
    layer: &LayerGraph,
    x: &Matrix,
    target: &Matrix,
    frozen: &FrozenLayer,
) -> Result<f64> {
    if (x.rows, target.cols) != (target.rows, layer.down.d_out()) {
        return Err(Error::ShapeMismatch("frozen loss shapes".into()));
    }
    let x64 = F64Matrix::from_f32(x);
    let mut h = linear_forward_frozen(&layer.up, &x64, &frozen.up);
    for v in &mut h.data {
        *v = silu_f64(*v);
    }
    let mut y = linear_forward_frozen(&layer.down, &h, &frozen.down);
    if layer.residual {
        for (v, &xv) in y.data.iter_mut().zip(&x64.data) {
            *v += xv;
        }
    }
    let n = y.data.len() as f64;
    let mut loss = 0.0f64;
    for (p, &t) in y.data.iter().zip(&target.data) {
        let d = p - t as f64;
        loss += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    }
    Ok(loss / n)
}

/// Central difference `(f(x0+h) - f(x0-h)) / 2h`.
pub fn central_diff(mut f: impl FnMut(f32) -> f64, x0: f32, h: f32) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h as f64)
}

/// Relative-or-absolute gradient comparison used across the test suite.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs || diff <= rel * analytic.abs().max(numeric.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn surrogate_matches_real_forward_at_base() {
        let mut rng = Rng::new(20);
        let w = Matrix::randn(8, 6, &mut rng);
        let bundle = TransformBundle::random(8, 4, 2, 2, &mut rng).unwrap();
        let spec = QuantSpec::new(4, 4).unwrap();
        let up = QuantLinear::new(w, None, bundle, spec).unwrap();
        let down = QuantLinear::new(
            Matrix::randn(6, 8, &mut rng),
            None,
            TransformBundle::random(6, 6, 1, 2, &mut rng).unwrap(),
            QuantSpec::new(4, 6).unwrap(),
        )
        .unwrap();
        let layer = LayerGraph { up, down, residual: true };
        let x = Matrix::randn(5, 8, &mut rng);
        let frozen = freeze_layer(&layer, &x).unwrap();
        let real = layer.forward(&x).unwrap();
        let sur = layer_forward_frozen(&layer, &x, &frozen).unwrap();
        // FP64 vs FP32 paths, identical algebra: agreement is tight unless a
        // rounding decision flips, which these seeds do not hit.
        let err = sur.max_abs_diff(&real);
        assert!(err < 1e-4, "surrogate deviates from real forward by {err}");
    }

    #[test]
    fn surrogate_value_gradient_is_ste() {
        // FD of the surrogate recovers the pass-through gradient.
        let f = |v: f64| surrogate_value(v, 0.5, 4.0, 0.37, 0, 0.0, 15.0);
        let h = 1e-5;
        let fd = (f(0.625 + h) - f(0.625 - h)) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-8, "{fd}");
        // Clamped element: flat in v, slope -s in z.
        let g = |z: f64| surrogate_value(100.0, 0.5, z, 0.0, 1, 0.0, 15.0);
        let fd_z = (g(4.0 + h) - g(4.0 - h)) / (2.0 * h);
        assert!((fd_z + 0.5).abs() < 1e-8, "{fd_z}");
    }
}
