//! Group-wise b-bit linear (RTN) quantization.
//!
//! A separate scale `s` and zero-point `z` are kept for every `g` consecutive
//! input channels of every output column:
//!
//! ```text
//! s = (max - min) / (2^b - 1)        z = -round(min / s)
//! code = clamp(round(v / s) + z, 0, 2^b - 1)
//! v̂    = (code - z) · s
//! ```
//!
//! Rounding is half-to-even throughout. `fake_quant` is the differentiable
//! quantize-then-dequantize used during calibration; its straight-through
//! gradient rules live in [`FakeQuantGrad`]. A learnable zero-point is rounded
//! and clamped inside the forward so integer codes always exist and the
//! training-mode forward matches the deployed integer path bitwise.

use crate::tensor::{GroupLayout, Matrix, TensorData, TensorEntry, TensorFile};
use crate::{Error, Result};

/// Floor for degenerate (constant-group) scales.
pub const SCALE_EPS: f32 = 1e-8;

/// Bit width and group size of a quantization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
    pub group_size: usize,
}

impl QuantSpec {
    pub fn new(bits: u32, group_size: usize) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bits must be in [2, 16], got {bits}")));
        }
        if group_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "group size must be >= 2, got {group_size}"
            )));
        }
        Ok(Self { bits, group_size })
    }

    /// Largest code value, `2^b - 1`.
    #[inline]
    pub fn max_code(&self) -> f32 {
        ((1u32 << self.bits) - 1) as f32
    }
}

/// Scale and zero-point of one (group × output-column) block. The zero-point
/// is stored as a float but is integer-valued after initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub scale: f32,
    pub zero_point: f32,
}

/// Per-group integer codes plus parameters; the output of RTN quantization.
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    /// One code per element, shape (d_in × d_out), values in [0, 2^b - 1].
    pub codes: Vec<u16>,
    pub d_in: usize,
    pub d_out: usize,
    /// Indexed `group * d_out + col`.
    pub params: Vec<GroupParams>,
    pub spec: QuantSpec,
    pub layout: GroupLayout,
}

/// `s` and `z` per Eq. of the module doc, from the live elements of a group.
pub fn compute_group_params(values: &[f32], bits: u32) -> Result<GroupParams> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    let max_code = ((1u32 << bits) - 1) as f32;
    let scale = ((max - min) / max_code).max(SCALE_EPS);
    let zero_point = (-(min / scale)).round_ties_even().clamp(0.0, max_code);
    Ok(GroupParams { scale, zero_point })
}

#[inline]
fn quantize_value(v: f32, params: GroupParams, max_code: f32) -> f32 {
    let z = params.zero_point.round_ties_even().clamp(0.0, max_code);
    ((v / params.scale.max(SCALE_EPS)).round_ties_even() + z).clamp(0.0, max_code)
}

/// Codes for one group of values.
pub fn quantize_group(values: &[f32], params: GroupParams, bits: u32) -> Vec<u16> {
    let max_code = ((1u32 << bits) - 1) as f32;
    values.iter().map(|&v| quantize_value(v, params, max_code) as u16).collect()
}

/// Affine dequantization `v̂ = (code - z) · s`.
pub fn dequantize_group(codes: &[u16], params: GroupParams) -> Vec<f32> {
    codes.iter().map(|&c| (c as f32 - params.zero_point) * params.scale).collect()
}

/// Parameters for every (group × output column) block of a weight matrix,
/// indexed `group * d_out + col`.
pub fn compute_matrix_params(w: &Matrix, spec: QuantSpec) -> Result<Vec<GroupParams>> {
    let layout = GroupLayout::new(w.rows, spec.group_size)?;
    let mut params = vec![GroupParams { scale: SCALE_EPS, zero_point: 0.0 }; layout.num_groups * w.cols];
    let d_out = w.cols;
    crate::parallel::for_each_chunk_mut(&mut params, d_out, |g, block| {
        let (start, len) = layout.group_bounds(g);
        let mut column = vec![0.0f32; len];
        for (c, slot) in block.iter_mut().enumerate() {
            for (k, cv) in column.iter_mut().enumerate() {
                *cv = w.data[(start + k) * d_out + c];
            }
            *slot = compute_group_params(&column, spec.bits).expect("non-empty group");
        }
    });
    Ok(params)
}

/// Quantize a weight matrix along its channel (row) dimension.
pub fn quantize_matrix(w: &Matrix, spec: QuantSpec) -> Result<QuantizedTensor> {
    let params = compute_matrix_params(w, spec)?;
    quantize_matrix_with_params(w, spec, params)
}

/// Quantize with externally supplied (e.g. learned) parameters.
pub fn quantize_matrix_with_params(
    w: &Matrix,
    spec: QuantSpec,
    params: Vec<GroupParams>,
) -> Result<QuantizedTensor> {
    let layout = GroupLayout::new(w.rows, spec.group_size)?;
    if params.len() != layout.num_groups * w.cols {
        return Err(Error::ShapeMismatch(format!(
            "expected {} param blocks, got {}",
            layout.num_groups * w.cols,
            params.len()
        )));
    }
    let max_code = spec.max_code();
    let d_out = w.cols;
    let mut codes = vec![0u16; w.rows * w.cols];
    crate::parallel::for_each_chunk_mut(&mut codes, d_out, |r, row| {
        let g = r / spec.group_size;
        for (c, slot) in row.iter_mut().enumerate() {
            let p = params[g * d_out + c];
            *slot = quantize_value(w.data[r * d_out + c], p, max_code) as u16;
        }
    });
    Ok(QuantizedTensor { codes, d_in: w.rows, d_out: w.cols, params, spec, layout })
}

/// Reconstruct the FP32 matrix from codes.
pub fn dequantize_matrix(qt: &QuantizedTensor) -> Matrix {
    let mut out = Matrix::zeros(qt.d_in, qt.d_out);
    let d_out = qt.d_out;
    crate::parallel::for_each_chunk_mut(&mut out.data, d_out, |r, row| {
        let g = r / qt.spec.group_size;
        for (c, slot) in row.iter_mut().enumerate() {
            let p = qt.params[g * d_out + c];
            *slot = (qt.codes[r * d_out + c] as f32 - p.zero_point) * p.scale;
        }
    });
    out
}

/// Straight-through gradient of one fake-quantized element.
///
/// In range: `∂v̂/∂v = 1`, `∂v̂/∂s = round(v/s) - v/s`, `∂v̂/∂z = 0`.
/// Clamped:  `∂v̂/∂v = 0`, `∂v̂/∂s = boundary - z`,      `∂v̂/∂z = -s`.
#[derive(Debug, Clone, Copy)]
pub struct FakeQuantGrad {
    pub d_value: f32,
    pub d_scale: f32,
    pub d_zero: f32,
}

/// Fake-quantize one element and return its STE gradient.
#[inline]
pub fn fake_quant_value(v: f32, params: GroupParams, max_code: f32) -> (f32, FakeQuantGrad) {
    let s_raw = params.scale;
    let s = s_raw.max(SCALE_EPS);
    let z = params.zero_point.round_ties_even().clamp(0.0, max_code);
    let r = (v / s).round_ties_even();
    let pre_clamp = r + z;
    let code = pre_clamp.clamp(0.0, max_code);
    let out = (code - z) * s;
    // Gradient of the scale clamp: zero once the raw scale has fallen below
    // the floor.
    let s_gate = if s_raw >= SCALE_EPS { 1.0 } else { 0.0 };
    let grad = if (0.0..=max_code).contains(&pre_clamp) {
        FakeQuantGrad { d_value: 1.0, d_scale: (r - v / s) * s_gate, d_zero: 0.0 }
    } else {
        FakeQuantGrad { d_value: 0.0, d_scale: (code - z) * s_gate, d_zero: -s }
    };
    (out, grad)
}

/// Quantize-then-dequantize a weight matrix with the given parameters.
/// The forward value equals `dequantize_matrix(quantize_matrix_with_params(..))`
/// bitwise; gradients follow the STE rules of [`fake_quant_value`].
pub fn fake_quant(w: &Matrix, params: &[GroupParams], spec: QuantSpec) -> Matrix {
    let max_code = spec.max_code();
    let d_out = w.cols;
    let mut out = Matrix::zeros(w.rows, w.cols);
    crate::parallel::for_each_chunk_mut(&mut out.data, d_out, |r, row| {
        let g = r / spec.group_size;
        for (c, slot) in row.iter_mut().enumerate() {
            let p = params[g * d_out + c];
            *slot = fake_quant_value(w.data[r * d_out + c], p, max_code).0;
        }
    });
    out
}

impl QuantizedTensor {
    /// Serialize with roles "codes", "scales", "zeros" plus bits/group_size
    /// header fields. Codes are one byte each for b <= 8 and i32 above that.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::new();
        file.set_meta("bits", self.spec.bits as u64);
        file.set_meta("group_size", self.spec.group_size as u64);
        let code_data = if self.spec.bits <= 8 {
            TensorData::U8(self.codes.iter().map(|&c| c as u8).collect())
        } else {
            TensorData::I32(self.codes.iter().map(|&c| c as i32).collect())
        };
        file.push(TensorEntry::new(
            "codes",
            vec![self.d_in, self.d_out],
            "codes",
            code_data,
        ));
        let scales: Vec<f32> = self.params.iter().map(|p| p.scale).collect();
        let zeros: Vec<f32> = self.params.iter().map(|p| p.zero_point).collect();
        let shape = vec![self.layout.num_groups, self.d_out];
        file.push(TensorEntry::new("scales", shape.clone(), "scales", TensorData::F32(scales)));
        file.push(TensorEntry::new("zeros", shape, "zeros", TensorData::F32(zeros)));
        file
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let spec = QuantSpec::new(file.meta_u64("bits")? as u32, file.meta_u64("group_size")? as usize)?;
        let codes_entry = file.get("codes")?;
        if codes_entry.shape.len() != 2 {
            return Err(Error::Format("codes tensor must be 2-D".into()));
        }
        let (d_in, d_out) = (codes_entry.shape[0], codes_entry.shape[1]);
        let codes: Vec<u16> = if spec.bits <= 8 {
            codes_entry.data.as_u8()?.iter().map(|&c| c as u16).collect()
        } else {
            let raw = codes_entry.data.as_i32()?;
            if raw.iter().any(|&c| !(0..=u16::MAX as i32).contains(&c)) {
                return Err(Error::Format("code value does not fit 16 bits".into()));
            }
            raw.iter().map(|&c| c as u16).collect()
        };
        let layout = GroupLayout::new(d_in, spec.group_size)?;
        let scales = file.get("scales")?.data.as_f32()?;
        let zeros = file.get("zeros")?.data.as_f32()?;
        if scales.len() != layout.num_groups * d_out || zeros.len() != scales.len() {
            return Err(Error::Format("scales/zeros shape mismatch".into()));
        }
        let max = spec.max_code() as u32 as u16;
        if codes.iter().any(|&c| c > max) {
            return Err(Error::Format("code value out of range for bit width".into()));
        }
        let params = scales
            .iter()
            .zip(zeros)
            .map(|(&scale, &zero_point)| GroupParams { scale, zero_point })
            .collect();
        Ok(Self { codes, d_in, d_out, params, spec, layout })
    }
}
