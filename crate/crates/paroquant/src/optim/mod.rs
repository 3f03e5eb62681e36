//! Loss, optimizer, and learning-rate schedule for layer-wise calibration.
//!
//! AdamW with decoupled weight decay (betas (0.9, 0.95), weight decay 0.01,
//! eps 1e-10), a cosine schedule decaying to 1/20 of the base rate, and the
//! SmoothL1 (Huber) objective. Reverse-mode gradients for the quantized layer
//! forward are hand-derived per primitive in [`graph`]; [`gradcheck`] holds
//! the frozen-quantization surrogate the finite-difference tests run against.

pub mod gradcheck;
pub mod graph;

use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, TensorData, TensorEntry, TensorFile};
use crate::{Error, Result};

/// Which parameter family a flat array holds; fixes its default learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Angles,
    Alpha,
    Weights,
    Scales,
    ZeroPoints,
    SkewU,
}

impl ParamKind {
    /// Calibration-pipeline defaults: 0.05 for rotation angles and channel
    /// scaling, 1e-5 for weights, 1e-6 for scales and zero points. The skew
    /// parameter of the full-rotation baseline uses its harness rate.
    pub fn default_lr(self) -> f32 {
        match self {
            ParamKind::Angles | ParamKind::Alpha => 0.05,
            ParamKind::Weights => 1e-5,
            ParamKind::Scales | ParamKind::ZeroPoints => 1e-6,
            ParamKind::SkewU => 1e-3,
        }
    }
}

/// A flat parameter array plus its learning rate.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub kind: ParamKind,
    pub values: Vec<f32>,
    pub lr: f32,
}

impl ParamGroup {
    pub fn new(kind: ParamKind, values: Vec<f32>) -> Self {
        Self { kind, values, lr: kind.default_lr() }
    }

    pub fn with_lr(kind: ParamKind, values: Vec<f32>, lr: f32) -> Self {
        Self { kind, values, lr }
    }
}

/// AdamW state for one flat parameter array.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub eps: f32,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-10,
        }
    }

    /// Decoupled weight decay, then the Adam update with bias correction.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let (b1, b2) = (self.beta1 as f64, self.beta2 as f64);
        let (lr, wd, eps) = (lr as f64, self.weight_decay as f64, self.eps as f64);
        for i in 0..params.len() {
            let mut p = params[i] as f64;
            p -= lr * wd * p;
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] = (p - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }

    /// Serialize moments and step count for resumable runs.
    pub fn to_tensor_entries(&self, prefix: &str) -> Vec<TensorEntry> {
        vec![
            TensorEntry::new(
                format!("{prefix}_m"),
                vec![self.m.len()],
                "adamw_m",
                TensorData::F32(self.m.clone()),
            ),
            TensorEntry::new(
                format!("{prefix}_v"),
                vec![self.v.len()],
                "adamw_v",
                TensorData::F32(self.v.clone()),
            ),
        ]
    }

    pub fn from_tensor_file(file: &TensorFile, prefix: &str, step: u64) -> Result<Self> {
        let m = file.get(&format!("{prefix}_m"))?.data.as_f32()?.to_vec();
        let v = file.get(&format!("{prefix}_v"))?.data.as_f32()?.to_vec();
        if m.len() != v.len() {
            return Err(Error::Format("adamw moment length mismatch".into()));
        }
        Ok(Self { step, ..Self::new(m.len()) }.with_moments(m, v))
    }

    fn with_moments(mut self, m: Vec<f32>, v: Vec<f32>) -> Self {
        self.m = m;
        self.v = v;
        self
    }
}

/// Cosine decay from `base_lr` to `base_lr / 20` over `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f32, total_steps: usize) -> Self {
        assert!(total_steps >= 1);
        Self { base_lr, total_steps }
    }

    pub fn floor(&self) -> f32 {
        self.base_lr / 20.0
    }
}

/// Learning rate at `step`; endpoints are exact, steps past the end clamp to
/// the floor.
pub fn cosine_lr(step: usize, schedule: &LrSchedule) -> f32 {
    if step == 0 {
        return schedule.base_lr;
    }
    if step >= schedule.total_steps {
        return schedule.floor();
    }
    let base = schedule.base_lr as f64;
    let floor = schedule.floor() as f64;
    let phase = std::f64::consts::PI * step as f64 / schedule.total_steps as f64;
    (floor + (base - floor) * 0.5 * (1.0 + phase.cos())) as f32
}

/// SmoothL1 with beta = 1, mean reduction: per element
/// `0.5 d²` for |d| < 1, else `|d| - 0.5`, with d = pred - target.
/// Returns the loss and its gradient with respect to `pred`.
pub fn huber_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if (pred.rows, pred.cols) != (target.rows, target.cols) {
        return Err(Error::ShapeMismatch(format!(
            "huber: {}x{} vs {}x{}",
            pred.rows, pred.cols, target.rows, target.cols
        )));
    }
    let n = pred.data.len() as f64;
    let mut grad = Matrix::zeros(pred.rows, pred.cols);
    let mut loss = 0.0f64;
    for i in 0..pred.data.len() {
        let d = (pred.data[i] - target.data[i]) as f64;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            grad.data[i] = (d / n) as f32;
        } else {
            loss += d.abs() - 0.5;
            grad.data[i] = (d.signum() / n) as f32;
        }
    }
    Ok((loss / n, grad))
}

/// Plain loss without the gradient, for validation passes.
pub fn huber_loss_value(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if (pred.rows, pred.cols) != (target.rows, target.cols) {
        return Err(Error::ShapeMismatch("huber inputs".into()));
    }
    let mut loss = 0.0f64;
    for (p, t) in pred.data.iter().zip(&target.data) {
        let d = (p - t) as f64;
        loss += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    }
    Ok(loss / pred.data.len() as f64)
}
