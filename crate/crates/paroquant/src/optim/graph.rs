//! Differentiable forward and hand-derived reverse-mode backward for the
//! quantized layer.
//!
//! The graph is small and fixed: inverse transform on the activations,
//! forward transform plus fake-quant on the weights, matmul, SiLU, residual,
//! Huber. Each primitive's adjoint is coded directly; there is no general
//! autodiff tape. Rotation backward does not store per-stage snapshots — a
//! Givens stage touches only two rows/columns, so the pre-rotation state is
//! reconstructed by applying the exact inverse, and the angle gradient uses
//! the output form `dθ = Σ (g_j·y_i − g_i·y_j)`.
//!
//! Gradient sums (angles, alpha, scales, zeros) use FP64 accumulators in a
//! fixed order (tokens, then groups), so results do not depend on the thread
//! count.

use crate::quant::{
    compute_matrix_params, fake_quant_value, GroupParams, QuantSpec,
};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Matrix};
use crate::transform::TransformBundle;
use crate::{Error, Result};

/// Whether quantizer parameters are recomputed from the transformed weights
/// each forward (stage 1) or held as learnable values (stage 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantParamMode {
    Dynamic,
    Learned,
}

/// One linear layer in quantized-training form.
///
/// In stage 1 (`transform_weights = true`) `weight` lives in the original
/// space and the bundle is applied in the forward; in stage 2 the transform
/// has been folded into `weight` and only the activation-side inverse remains.
#[derive(Debug, Clone)]
pub struct QuantLinear {
    pub weight: Matrix,
    pub bias: Option<Vec<f32>>,
    pub bundle: TransformBundle,
    pub spec: QuantSpec,
    pub qparams: Vec<GroupParams>,
    pub mode: QuantParamMode,
    pub transform_weights: bool,
}

/// Intermediates captured by a forward pass, consumed by backward.
pub struct LinearTape {
    x_rot: Matrix,
    w_rot: Matrix,
    w_q: Matrix,
    qparams: Vec<GroupParams>,
}

/// Gradients for every parameter family of one linear.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub alpha: Vec<f32>,
    /// Mirrors `bundle.rotations`: [group][rotation][pair].
    pub angles: Vec<Vec<Vec<f32>>>,
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
}

impl QuantLinear {
    pub fn new(weight: Matrix, bias: Option<Vec<f32>>, bundle: TransformBundle, spec: QuantSpec) -> Result<Self> {
        if weight.rows != bundle.layout.channels {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} input channels, bundle expects {}",
                weight.rows, bundle.layout.channels
            )));
        }
        let qparams = compute_matrix_params(&weight, spec)?;
        Ok(Self {
            weight,
            bias,
            bundle,
            spec,
            qparams,
            mode: QuantParamMode::Dynamic,
            transform_weights: true,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols
    }

    /// Transformed weights as fed to the quantizer.
    pub fn transformed_weight(&self) -> Matrix {
        if self.transform_weights {
            let mut w = self.weight.clone();
            crate::transform::apply_bundle_to_weights_in_place(&mut w, &self.bundle);
            w
        } else {
            self.weight.clone()
        }
    }

    /// Quantizer parameters in effect for the given transformed weights.
    pub fn effective_params(&self, w_rot: &Matrix) -> Vec<GroupParams> {
        match self.mode {
            QuantParamMode::Dynamic => {
                compute_matrix_params(w_rot, self.spec).expect("valid layout")
            }
            QuantParamMode::Learned => self.qparams.clone(),
        }
    }

    /// Re-initialize learnable quantizer parameters from the current
    /// (transformed) weights.
    pub fn refresh_qparams(&mut self) {
        let w_rot = self.transformed_weight();
        self.qparams = compute_matrix_params(&w_rot, self.spec).expect("valid layout");
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_tape(x)?.0)
    }

    pub fn forward_with_tape(&self, x: &Matrix) -> Result<(Matrix, LinearTape)> {
        if x.cols != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, weight expects {}",
                x.cols,
                self.d_in()
            )));
        }
        let x_rot = crate::transform::apply_inverse_to_activations(x, &self.bundle)?;
        let w_rot = self.transformed_weight();
        let qparams = self.effective_params(&w_rot);
        let w_q = crate::quant::fake_quant(&w_rot, &qparams, self.spec);
        let mut y = matmul(&x_rot, &w_q);
        if let Some(bias) = &self.bias {
            for row in y.data.chunks_mut(y.cols) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
        }
        Ok((y, LinearTape { x_rot, w_rot, w_q, qparams }))
    }

    /// Reverse-mode pass: returns the input gradient and all parameter
    /// gradients. Consumes the tape (stage reconstruction is destructive).
    pub fn backward(&self, g_out: &Matrix, tape: LinearTape) -> (Matrix, LinearGrads) {
        let LinearTape { mut x_rot, mut w_rot, w_q, qparams } = tape;
        let d_out = self.d_out();
        let layout = self.bundle.layout;
        let max_code = self.spec.max_code();

        // Matmul adjoints.
        let mut g_x = matmul_a_bt(g_out, &w_q);
        let g_wq = matmul_at_b(&x_rot, g_out);

        // Fake-quant STE backward.
        let mut g_w_rot = Matrix::zeros(w_rot.rows, d_out);
        let mut g_scales = vec![0.0f64; qparams.len()];
        let mut g_zeros = vec![0.0f64; qparams.len()];
        for r in 0..w_rot.rows {
            let g = r / self.spec.group_size;
            for c in 0..d_out {
                let p = qparams[g * d_out + c];
                let (_, rule) = fake_quant_value(w_rot.at(r, c), p, max_code);
                let upstream = g_wq.at(r, c);
                *g_w_rot.at_mut(r, c) = upstream * rule.d_value;
                let block = g * d_out + c;
                g_scales[block] += upstream as f64 * rule.d_scale as f64;
                g_zeros[block] += upstream as f64 * rule.d_zero as f64;
            }
        }

        let mut g_alpha = vec![0.0f64; self.bundle.alpha.len()];
        let mut g_angles: Vec<Vec<Vec<f64>>> = self
            .bundle
            .rotations
            .iter()
            .map(|rots| rots.iter().map(|r| vec![0.0f64; r.pairs.len()]).collect())
            .collect();

        // Weight-side transform backward (skipped once the transform is
        // folded into the weights).
        let g_weight = if self.transform_weights {
            for g in 0..layout.num_groups {
                let (start, len) = layout.group_bounds(g);
                let rows = start * d_out..(start + len) * d_out;
                let values = &mut w_rot.data[rows.clone()];
                let grads = &mut g_w_rot.data[rows];
                for (t, rot) in self.bundle.rotations[g].iter().enumerate().rev() {
                    for (idx, (pair, &theta)) in rot.pairs.iter().zip(&rot.angles).enumerate().rev() {
                        g_angles[g][t][idx] += backward_givens_rows(values, grads, d_out, pair.i, pair.j, theta);
                    }
                }
            }
            // Scaling backward: w_rot now holds diag(alpha) * W.
            let mut g_weight = g_w_rot;
            for r in 0..w_rot.rows {
                let a = self.bundle.alpha[r] as f64;
                let mut acc = 0.0f64;
                let row_v = &w_rot.data[r * d_out..(r + 1) * d_out];
                let row_g = &mut g_weight.data[r * d_out..(r + 1) * d_out];
                for (v, gr) in row_v.iter().zip(row_g.iter_mut()) {
                    acc += (*gr as f64) * (*v as f64) / a;
                    *gr = (*gr as f64 * a) as f32;
                }
                g_alpha[r] += acc;
            }
            g_weight
        } else {
            g_w_rot
        };

        // Activation-side transform backward.
        let tokens = x_rot.rows;
        let cols = x_rot.cols;
        for g in 0..layout.num_groups {
            let (start, _) = layout.group_bounds(g);
            for (t, rot) in self.bundle.rotations[g].iter().enumerate().rev() {
                for (idx, (pair, &theta)) in rot.pairs.iter().zip(&rot.angles).enumerate().rev() {
                    g_angles[g][t][idx] += backward_givens_cols(
                        &mut x_rot.data,
                        &mut g_x.data,
                        cols,
                        start + pair.i,
                        start + pair.j,
                        theta,
                    );
                }
            }
        }
        // Scaling backward: x_rot now holds X / alpha column-wise.
        for r in 0..tokens {
            let row_v = &x_rot.data[r * cols..(r + 1) * cols];
            let row_g = &mut g_x.data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let a = self.bundle.alpha[c] as f64;
                g_alpha[c] += row_g[c] as f64 * (-(row_v[c] as f64) / a);
                row_g[c] = (row_g[c] as f64 / a) as f32;
            }
        }

        let grads = LinearGrads {
            weight: g_weight,
            alpha: g_alpha.iter().map(|&v| v as f32).collect(),
            angles: g_angles
                .into_iter()
                .map(|rots| rots.into_iter().map(|r| r.into_iter().map(|v| v as f32).collect()).collect())
                .collect(),
            scales: g_scales.iter().map(|&v| v as f32).collect(),
            zeros: g_zeros.iter().map(|&v| v as f32).collect(),
        };
        (g_x, grads)
    }

    /// Flattened rotation angles, group-major then rotation then pair.
    pub fn angles_flat(&self) -> Vec<f32> {
        self.bundle
            .rotations
            .iter()
            .flat_map(|rots| rots.iter().flat_map(|r| r.angles.iter().copied()))
            .collect()
    }

    pub fn set_angles_flat(&mut self, flat: &[f32]) {
        let mut it = flat.iter();
        for rots in &mut self.bundle.rotations {
            for rot in rots {
                for a in &mut rot.angles {
                    *a = *it.next().expect("angle count mismatch");
                }
            }
        }
        assert!(it.next().is_none(), "angle count mismatch");
    }

    pub fn scales_flat(&self) -> Vec<f32> {
        self.qparams.iter().map(|p| p.scale).collect()
    }

    pub fn zeros_flat(&self) -> Vec<f32> {
        self.qparams.iter().map(|p| p.zero_point).collect()
    }

    pub fn set_scales_flat(&mut self, flat: &[f32]) {
        for (p, &s) in self.qparams.iter_mut().zip(flat) {
            p.scale = s;
        }
    }

    pub fn set_zeros_flat(&mut self, flat: &[f32]) {
        for (p, &z) in self.qparams.iter_mut().zip(flat) {
            p.zero_point = z;
        }
    }
}

impl LinearGrads {
    pub fn angles_flat(&self) -> Vec<f32> {
        self.angles
            .iter()
            .flat_map(|rots| rots.iter().flat_map(|r| r.iter().copied()))
            .collect()
    }
}

/// Shared Givens adjoint for two rows: accumulate dθ from the stage output,
/// push the gradient through the transposed Jacobian, and un-rotate the
/// values back to the previous stage. Returns dθ.
fn backward_givens_rows(
    values: &mut [f32],
    grads: &mut [f32],
    cols: usize,
    i: usize,
    j: usize,
    theta: f32,
) -> f64 {
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut d_theta = 0.0f64;
    let (v_lo, v_hi) = values.split_at_mut(j * cols);
    let (g_lo, g_hi) = grads.split_at_mut(j * cols);
    let vi = &mut v_lo[i * cols..(i + 1) * cols];
    let vj = &mut v_hi[..cols];
    let gi = &mut g_lo[i * cols..(i + 1) * cols];
    let gj = &mut g_hi[..cols];
    for k in 0..cols {
        let (yi, yj) = (vi[k], vj[k]);
        let (gyi, gyj) = (gi[k], gj[k]);
        d_theta += gyj as f64 * yi as f64 - gyi as f64 * yj as f64;
        // Transposed Jacobian for the gradient; exact inverse for the values.
        gi[k] = cos * gyi + sin * gyj;
        gj[k] = -sin * gyi + cos * gyj;
        vi[k] = cos * yi + sin * yj;
        vj[k] = -sin * yi + cos * yj;
    }
    d_theta
}

/// Column variant used on the activation side.
fn backward_givens_cols(
    values: &mut [f32],
    grads: &mut [f32],
    cols: usize,
    i: usize,
    j: usize,
    theta: f32,
) -> f64 {
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut d_theta = 0.0f64;
    let rows = values.len() / cols;
    for r in 0..rows {
        let (ii, jj) = (r * cols + i, r * cols + j);
        let (yi, yj) = (values[ii], values[jj]);
        let (gyi, gyj) = (grads[ii], grads[jj]);
        d_theta += gyj as f64 * yi as f64 - gyi as f64 * yj as f64;
        grads[ii] = cos * gyi + sin * gyj;
        grads[jj] = -sin * gyi + cos * gyj;
        values[ii] = cos * yi + sin * yj;
        values[jj] = -sin * yi + cos * yj;
    }
    d_theta
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Quantized toy decoder layer: up projection, SiLU, down projection, and an
/// optional residual connection.
#[derive(Debug, Clone)]
pub struct LayerGraph {
    pub up: QuantLinear,
    pub down: QuantLinear,
    pub residual: bool,
}

pub struct LayerTape {
    up: LinearTape,
    down: LinearTape,
    /// Pre-SiLU activations.
    y1: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub up: LinearGrads,
    pub down: LinearGrads,
}

impl LayerGraph {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let y1 = self.up.forward(x)?;
        let mut h = y1;
        for v in &mut h.data {
            *v = silu(*v);
        }
        let y2 = self.down.forward(&h)?;
        Ok(self.apply_residual(x, y2))
    }

    pub fn forward_with_tape(&self, x: &Matrix) -> Result<(Matrix, LayerTape)> {
        let (y1, up_tape) = self.up.forward_with_tape(x)?;
        let mut h = y1.clone();
        for v in &mut h.data {
            *v = silu(*v);
        }
        let (y2, down_tape) = self.down.forward_with_tape(&h)?;
        let out = self.apply_residual(x, y2);
        Ok((out, LayerTape { up: up_tape, down: down_tape, y1 }))
    }

    fn apply_residual(&self, x: &Matrix, mut y: Matrix) -> Matrix {
        if self.residual {
            for (v, xv) in y.data.iter_mut().zip(&x.data) {
                *v += xv;
            }
        }
        y
    }
}

/// Reverse-mode pass for one layer. The layer-input gradient is dropped:
/// calibration is strictly layer-wise.
pub fn backward_layer(layer: &LayerGraph, g_out: &Matrix, tape: LayerTape) -> LayerGrads {
    let LayerTape { up, down, y1 } = tape;
    let (g_h, down_grads) = layer.down.backward(g_out, down);
    let mut g_y1 = g_h;
    for (g, &pre) in g_y1.data.iter_mut().zip(&y1.data) {
        *g *= silu_grad(pre);
    }
    let (_g_x, up_grads) = layer.up.backward(&g_y1, up);
    LayerGrads { up: up_grads, down: down_grads }
}

/// Forward, Huber against the target, backward. The workhorse of both the
/// calibration loop and the transform-comparison harness.
pub fn layer_loss_and_grads(
    layer: &LayerGraph,
    x: &Matrix,
    target: &Matrix,
) -> Result<(f64, LayerGrads)> {
    let (out, tape) = layer.forward_with_tape(x)?;
    let (loss, g_out) = super::huber_loss(&out, target)?;
    Ok((loss, backward_layer(layer, &g_out, tape)))
}

/// Single-linear objective `huber(T⁻¹(X)·Q(T(W)), X·W)` used by the
/// transform-comparison harness.
pub fn linear_loss_and_grads(
    linear: &QuantLinear,
    x: &Matrix,
    target: &Matrix,
) -> Result<(f64, LinearGrads)> {
    let (out, tape) = linear.forward_with_tape(x)?;
    let (loss, g_out) = super::huber_loss(&out, target)?;
    let (_gx, grads) = linear.backward(&g_out, tape);
    Ok((loss, grads))
}
