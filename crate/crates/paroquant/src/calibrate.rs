//! Layer-wise two-stage calibration on synthetic toy decoder layers.
//!
//! A toy layer is an MLP block (up projection, SiLU, down projection,
//! optional residual). For each layer, in order: labels come from the FP
//! layer on FP inputs, the quantized copy is trained on inputs that already
//! passed through the quantized predecessors (X′), stage 1 tunes rotation
//! angles and channel scales, stage 2 folds the transform into the weights
//! and fine-tunes weights plus quantizer scales and zero points. After each
//! epoch the validation loss is evaluated and the best snapshot kept.
//!
//! Stage 1 recomputes (s, z) from the transformed weights every forward
//! (detached); stage 2 holds them as learnable parameters re-initialized
//! from the stage-1 result, so the stage-2 starting point reproduces the
//! stage-1 best forward exactly and best-snapshot selection makes the
//! stage-2 validation loss at most the stage-1 one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{CompiledBundle, DeployedLayer, DeployedLinear, DeployedModel};
use crate::optim::graph::{
    backward_layer, silu, LayerGraph, LayerGrads, QuantLinear, QuantParamMode,
};
use crate::optim::{cosine_lr, huber_loss, huber_loss_value, AdamW, LrSchedule};
use crate::quant::{quantize_matrix_with_params, GroupParams, QuantSpec, SCALE_EPS};
use crate::tensor::{Matrix, Rng, TensorData, TensorEntry, TensorFile};
use crate::transform::TransformBundle;
use crate::{Error, Result};

use crate::baselines::ALPHA_FLOOR;

/// A small two-linear decoder block: `out = x + down(silu(up(x)))`.
#[derive(Debug, Clone)]
pub struct ToyDecoderLayer {
    pub lin_up: Matrix,
    pub bias_up: Option<Vec<f32>>,
    pub lin_down: Matrix,
    pub bias_down: Option<Vec<f32>>,
    pub residual: bool,
}

impl ToyDecoderLayer {
    pub fn d_model(&self) -> usize {
        self.lin_up.rows
    }

    pub fn hidden(&self) -> usize {
        self.lin_up.cols
    }

    /// Full-precision forward.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = crate::tensor::matmul(x, &self.lin_up);
        if let Some(b) = &self.bias_up {
            for row in h.data.chunks_mut(h.cols) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        for v in &mut h.data {
            *v = silu(*v);
        }
        let mut y = crate::tensor::matmul(&h, &self.lin_down);
        if let Some(b) = &self.bias_down {
            for row in y.data.chunks_mut(y.cols) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        if self.residual {
            for (v, xv) in y.data.iter_mut().zip(&x.data) {
                *v += xv;
            }
        }
        y
    }
}

/// Synthetic model shape: Gaussian weights with a few input channels scaled
/// by a large gain to emulate outlier channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierModelSpec {
    pub num_layers: usize,
    pub d: usize,
    pub h: usize,
    pub outlier_channels_per_linear: usize,
    pub outlier_gain: f32,
    pub seed: u64,
}

impl Default for OutlierModelSpec {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d: 128,
            h: 256,
            outlier_channels_per_linear: 4,
            outlier_gain: 50.0,
            seed: 1,
        }
    }
}

fn gen_linear(
    d_in: usize,
    d_out: usize,
    outliers: usize,
    gain: f32,
    rng: &mut Rng,
) -> (Matrix, Vec<f32>) {
    // Variance-preserving init keeps multi-layer activations in range.
    let std = 1.0 / (d_in as f64).sqrt();
    let mut w = Matrix::zeros(d_in, d_out);
    for v in &mut w.data {
        *v = (rng.next_normal() * std) as f32;
    }
    let mut channels: Vec<usize> = (0..d_in).collect();
    crate::tensor::rng_shuffle(&mut channels, rng);
    for &c in channels.iter().take(outliers) {
        for v in w.row_mut(c) {
            *v *= gain;
        }
    }
    let bias = (0..d_out).map(|_| (rng.next_normal() * 0.01) as f32).collect();
    (w, bias)
}

/// Deterministic synthetic model per the spec seed.
pub fn gen_synthetic_model(spec: &OutlierModelSpec) -> Result<Vec<ToyDecoderLayer>> {
    if spec.outlier_channels_per_linear >= spec.d.min(spec.h) {
        return Err(Error::InvalidArgument(
            "outlier channel count must be below the channel dimension".into(),
        ));
    }
    let mut rng = Rng::new(spec.seed);
    let mut layers = Vec::with_capacity(spec.num_layers);
    for _ in 0..spec.num_layers {
        let (lin_up, bias_up) =
            gen_linear(spec.d, spec.h, spec.outlier_channels_per_linear, spec.outlier_gain, &mut rng);
        let (lin_down, bias_down) =
            gen_linear(spec.h, spec.d, spec.outlier_channels_per_linear, spec.outlier_gain, &mut rng);
        layers.push(ToyDecoderLayer {
            lin_up,
            bias_up: Some(bias_up),
            lin_down,
            bias_down: Some(bias_down),
            residual: true,
        });
    }
    Ok(layers)
}

/// FP forward through all layers.
pub fn model_forward(layers: &[ToyDecoderLayer], x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for layer in layers {
        h = layer.forward(&h);
    }
    h
}

/// Per-layer FP activations for train and validation streams.
/// `stages[l]` holds the inputs to layer `l` per sample; `stages[num_layers]`
/// is the model output (so layer `l`'s labels are `stages[l + 1]`).
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub train_stages: Vec<Vec<Matrix>>,
    pub val_stages: Vec<Vec<Matrix>>,
    pub seq_len: usize,
}

const VAL_SEED_TAG: u64 = 0x76616c; // disjoint stream for validation draws

/// Sample i.i.d. standard-normal token embeddings and record every layer's
/// FP inputs and outputs. The validation set uses a seed-derived offset so
/// it is disjoint from training.
pub fn gen_calibration(
    model: &[ToyDecoderLayer],
    num_samples: usize,
    val_samples: usize,
    seq_len: usize,
    seed: u64,
) -> CalibrationSet {
    let d = model[0].d_model();
    let draw = |count: usize, seed: u64| -> Vec<Vec<Matrix>> {
        let mut rng = Rng::new(seed);
        let inputs: Vec<Matrix> = (0..count).map(|_| Matrix::randn(seq_len, d, &mut rng)).collect();
        let mut stages = vec![inputs];
        for layer in model {
            let prev = stages.last().unwrap();
            let next: Vec<Matrix> = prev.iter().map(|x| layer.forward(x)).collect();
            stages.push(next);
        }
        stages
    };
    CalibrationSet {
        train_stages: draw(num_samples, seed),
        val_stages: draw(val_samples, Rng::derive_seed(seed, VAL_SEED_TAG)),
        seq_len,
    }
}

/// One optimization batch: FP inputs X, quantized-path inputs X′, labels Y.
#[derive(Debug, Clone)]
pub struct CalibrationBatch {
    pub x: Matrix,
    pub x_prime: Matrix,
    pub y: Matrix,
}

fn vstack(mats: &[Matrix]) -> Matrix {
    let cols = mats[0].cols;
    let rows = mats.iter().map(|m| m.rows).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for m in mats {
        out.data[offset..offset + m.data.len()].copy_from_slice(&m.data);
        offset += m.data.len();
    }
    out
}

fn make_batches(
    x: &[Matrix],
    x_prime: &[Matrix],
    y: &[Matrix],
    batch_size: usize,
) -> Vec<CalibrationBatch> {
    (0..x.len())
        .step_by(batch_size)
        .map(|start| {
            let end = (start + batch_size).min(x.len());
            CalibrationBatch {
                x: vstack(&x[start..end]),
                x_prime: vstack(&x_prime[start..end]),
                y: vstack(&y[start..end]),
            }
        })
        .collect()
}

/// How X′ advances to the next layer: through the quantized layer on the
/// quantized stream (default), or through the quantized layer on the FP
/// inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum XPrimePropagation {
    #[default]
    Quantized,
    Original,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub bits: u32,
    pub group_size: usize,
    pub rotations: usize,
    pub pairs_per_rotation: usize,
    pub lr_angles: f32,
    pub lr_alpha: f32,
    pub lr_weights: f32,
    pub lr_scales: f32,
    pub lr_zeros: f32,
    pub x_prime_propagation: XPrimePropagation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 10,
            batch_size: 16,
            train_samples: 256,
            val_samples: 32,
            seq_len: 64,
            seed: 0,
            bits: 4,
            group_size: 128,
            rotations: 8,
            pairs_per_rotation: 64,
            lr_angles: 0.05,
            lr_alpha: 0.05,
            lr_weights: 1e-5,
            lr_scales: 1e-6,
            lr_zeros: 1e-6,
            x_prime_propagation: XPrimePropagation::Quantized,
        }
    }
}

impl TrainConfig {
    pub fn spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.bits, self.group_size)
    }
}

/// Run configuration file: model shape plus training settings.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: OutlierModelSpec,
    pub train: TrainConfig,
}

/// A calibrated layer in training form.
#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    pub graph: LayerGraph,
}

impl QuantizedLayer {
    /// Differentiable forward (fake-quant path).
    pub fn forward_training(&self, x: &Matrix) -> Result<Matrix> {
        self.graph.forward(x)
    }

    /// Freeze into integer codes plus compiled transforms.
    pub fn to_deployed(&self) -> Result<DeployedLayer> {
        Ok(DeployedLayer {
            up: freeze_linear(&self.graph.up)?,
            down: freeze_linear(&self.graph.down)?,
            residual: self.graph.residual,
        })
    }
}

/// Clean learned parameters into their acting values: floored scale, rounded
/// and clamped zero point. Codes produced with these match the training
/// forward bitwise.
fn cleaned_params(params: &[GroupParams], spec: QuantSpec) -> Vec<GroupParams> {
    let max_code = spec.max_code();
    params
        .iter()
        .map(|p| GroupParams {
            scale: p.scale.max(SCALE_EPS),
            zero_point: p.zero_point.round_ties_even().clamp(0.0, max_code),
        })
        .collect()
}

fn freeze_linear(lin: &QuantLinear) -> Result<DeployedLinear> {
    let w_rot = lin.transformed_weight();
    let params = cleaned_params(&lin.effective_params(&w_rot), lin.spec);
    let codes = quantize_matrix_with_params(&w_rot, lin.spec, params)?;
    Ok(DeployedLinear {
        codes,
        bundle: CompiledBundle::from_bundle(&lin.bundle),
        bias: lin.bias.clone(),
    })
}

/// Mean element-wise squared difference.
pub fn output_mse(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64
}

/// Loss curve of one optimization stage.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StageReport {
    pub train_losses: Vec<f32>,
    /// Validation loss before training plus one entry per epoch.
    pub val_losses: Vec<f32>,
    pub best_val: f32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LayerReport {
    pub stage1: StageReport,
    pub stage2: StageReport,
}

fn validation_loss(graph: &LayerGraph, val: &[CalibrationBatch]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for batch in val {
        let out = graph.forward(&batch.x_prime)?;
        let loss = huber_loss_value(&out, &batch.y)?;
        let n = batch.y.data.len();
        total += loss * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

struct StageParams {
    /// (flat values, gradient extractor tag, lr, optimizer)
    groups: Vec<ParamSlot>,
}

enum ParamTag {
    AnglesUp,
    AnglesDown,
    AlphaUp,
    AlphaDown,
    WeightsUp,
    WeightsDown,
    ScalesUp,
    ScalesDown,
    ZerosUp,
    ZerosDown,
}

struct ParamSlot {
    tag: ParamTag,
    values: Vec<f32>,
    optimizer: AdamW,
    schedule: LrSchedule,
}

impl ParamSlot {
    fn new(tag: ParamTag, values: Vec<f32>, lr: f32, total_steps: usize) -> Self {
        let optimizer = AdamW::new(values.len());
        Self { tag, values, optimizer, schedule: LrSchedule::new(lr, total_steps) }
    }

    fn grad<'a>(&self, grads: &'a LayerGrads) -> Vec<f32> {
        match self.tag {
            ParamTag::AnglesUp => grads.up.angles_flat(),
            ParamTag::AnglesDown => grads.down.angles_flat(),
            ParamTag::AlphaUp => grads.up.alpha.clone(),
            ParamTag::AlphaDown => grads.down.alpha.clone(),
            ParamTag::WeightsUp => grads.up.weight.data.clone(),
            ParamTag::WeightsDown => grads.down.weight.data.clone(),
            ParamTag::ScalesUp => grads.up.scales.clone(),
            ParamTag::ScalesDown => grads.down.scales.clone(),
            ParamTag::ZerosUp => grads.up.zeros.clone(),
            ParamTag::ZerosDown => grads.down.zeros.clone(),
        }
    }

    fn write_back(&self, graph: &mut LayerGraph) {
        match self.tag {
            ParamTag::AnglesUp => graph.up.set_angles_flat(&self.values),
            ParamTag::AnglesDown => graph.down.set_angles_flat(&self.values),
            ParamTag::AlphaUp => graph.up.bundle.alpha.copy_from_slice(&self.values),
            ParamTag::AlphaDown => graph.down.bundle.alpha.copy_from_slice(&self.values),
            ParamTag::WeightsUp => graph.up.weight.data.copy_from_slice(&self.values),
            ParamTag::WeightsDown => graph.down.weight.data.copy_from_slice(&self.values),
            ParamTag::ScalesUp => graph.up.set_scales_flat(&self.values),
            ParamTag::ScalesDown => graph.down.set_scales_flat(&self.values),
            ParamTag::ZerosUp => graph.up.set_zeros_flat(&self.values),
            ParamTag::ZerosDown => graph.down.set_zeros_flat(&self.values),
        }
    }

    fn post_update_clamp(&mut self) {
        if matches!(self.tag, ParamTag::AlphaUp | ParamTag::AlphaDown) {
            for v in &mut self.values {
                *v = v.max(ALPHA_FLOOR);
            }
        }
    }

    fn name(&self) -> &'static str {
        match self.tag {
            ParamTag::AnglesUp => "angles_up",
            ParamTag::AnglesDown => "angles_down",
            ParamTag::AlphaUp => "alpha_up",
            ParamTag::AlphaDown => "alpha_down",
            ParamTag::WeightsUp => "weights_up",
            ParamTag::WeightsDown => "weights_down",
            ParamTag::ScalesUp => "scales_up",
            ParamTag::ScalesDown => "scales_down",
            ParamTag::ZerosUp => "zeros_up",
            ParamTag::ZerosDown => "zeros_down",
        }
    }
}

/// Shared epoch loop for both stages: step every batch, evaluate validation
/// after each epoch, keep the best snapshot.
fn run_stage(
    graph: &mut LayerGraph,
    params: &mut StageParams,
    batches: &[CalibrationBatch],
    val: &[CalibrationBatch],
    config: &TrainConfig,
    stage_tag: u64,
) -> Result<StageReport> {
    let mut report = StageReport::default();
    let init_val = validation_loss(graph, val)? as f32;
    report.val_losses.push(init_val);
    let mut best_val = init_val;
    let mut best_graph = graph.clone();

    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs_per_stage {
        let shuffle_seed =
            Rng::derive_seed(config.seed, stage_tag.wrapping_mul(1000) + epoch as u64);
        crate::tensor::rng_shuffle(&mut order, &mut Rng::new(shuffle_seed));
        for &bi in &order {
            let batch = &batches[bi];
            let (out, tape) = graph.forward_with_tape(&batch.x_prime)?;
            let (loss, g_out) = huber_loss(&out, &batch.y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, batch {bi}"
                )));
            }
            report.train_losses.push(loss as f32);
            let grads = backward_layer(graph, &g_out, tape);
            for slot in &mut params.groups {
                let g = slot.grad(&grads);
                let lr = cosine_lr(step, &slot.schedule);
                slot.optimizer.step(&mut slot.values, &g, lr);
                slot.post_update_clamp();
                slot.write_back(graph);
            }
            step += 1;
        }
        let val_loss = validation_loss(graph, val)? as f32;
        report.val_losses.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_graph = graph.clone();
        }
    }
    *graph = best_graph;
    report.best_val = best_val;
    Ok(report)
}

/// Optimizer state captured at the end of stage 2, for checkpoints.
pub struct LayerOptState {
    pub groups: Vec<(&'static str, AdamW)>,
}

/// Two-stage optimization of one layer against its batches.
pub fn optimize_layer(
    layer: &ToyDecoderLayer,
    batches: &[CalibrationBatch],
    val: &[CalibrationBatch],
    config: &TrainConfig,
    pair_rng: &mut Rng,
) -> Result<(QuantizedLayer, LayerReport, LayerOptState)> {
    let spec = config.spec()?;
    let d = layer.d_model();
    let h = layer.hidden();
    let bundle_up = TransformBundle::identity(
        d,
        config.group_size.min(d),
        config.rotations,
        config.pairs_per_rotation.min(config.group_size.min(d) / 2),
        pair_rng,
    )?;
    let bundle_down = TransformBundle::identity(
        h,
        config.group_size.min(h),
        config.rotations,
        config.pairs_per_rotation.min(config.group_size.min(h) / 2),
        pair_rng,
    )?;
    let up = QuantLinear::new(layer.lin_up.clone(), layer.bias_up.clone(), bundle_up, spec)?;
    let down = QuantLinear::new(layer.lin_down.clone(), layer.bias_down.clone(), bundle_down, spec)?;
    let mut graph = LayerGraph { up, down, residual: layer.residual };

    let total_steps = config.epochs_per_stage * batches.len();

    // Stage 1: rotation angles and channel scaling, dynamic quantizer params.
    let mut stage1 = StageParams {
        groups: vec![
            ParamSlot::new(ParamTag::AnglesUp, graph.up.angles_flat(), config.lr_angles, total_steps),
            ParamSlot::new(ParamTag::AnglesDown, graph.down.angles_flat(), config.lr_angles, total_steps),
            ParamSlot::new(ParamTag::AlphaUp, graph.up.bundle.alpha.clone(), config.lr_alpha, total_steps),
            ParamSlot::new(ParamTag::AlphaDown, graph.down.bundle.alpha.clone(), config.lr_alpha, total_steps),
        ],
    };
    let stage1_report = run_stage(&mut graph, &mut stage1, batches, val, config, 1)?;

    // Fold the transform into the weights and switch to learned parameters.
    for lin in [&mut graph.up, &mut graph.down] {
        lin.weight = lin.transformed_weight();
        lin.transform_weights = false;
        lin.refresh_qparams();
        lin.mode = QuantParamMode::Learned;
    }

    // Stage 2: weights plus quantizer scales and zero points.
    let mut stage2 = StageParams {
        groups: vec![
            ParamSlot::new(ParamTag::WeightsUp, graph.up.weight.data.clone(), config.lr_weights, total_steps),
            ParamSlot::new(ParamTag::WeightsDown, graph.down.weight.data.clone(), config.lr_weights, total_steps),
            ParamSlot::new(ParamTag::ScalesUp, graph.up.scales_flat(), config.lr_scales, total_steps),
            ParamSlot::new(ParamTag::ScalesDown, graph.down.scales_flat(), config.lr_scales, total_steps),
            ParamSlot::new(ParamTag::ZerosUp, graph.up.zeros_flat(), config.lr_zeros, total_steps),
            ParamSlot::new(ParamTag::ZerosDown, graph.down.zeros_flat(), config.lr_zeros, total_steps),
        ],
    };
    let stage2_report = run_stage(&mut graph, &mut stage2, batches, val, config, 2)?;

    let opt_state = LayerOptState {
        groups: stage2.groups.iter().map(|s| (s.name(), s.optimizer.clone())).collect(),
    };
    Ok((
        QuantizedLayer { graph },
        LayerReport { stage1: stage1_report, stage2: stage2_report },
        opt_state,
    ))
}

/// Full layer-wise loop: for each layer take FP labels, optimize on the
/// quantized stream, then advance both streams.
pub fn quantize_model(
    model: &[ToyDecoderLayer],
    calib: &CalibrationSet,
    config: &TrainConfig,
) -> Result<(Vec<QuantizedLayer>, Vec<LayerReport>, Vec<LayerOptState>)> {
    let mut pair_rng = Rng::new(Rng::derive_seed(config.seed, 0x7061697273));
    let mut x_prime_train: Vec<Matrix> = calib.train_stages[0].clone();
    let mut x_prime_val: Vec<Matrix> = calib.val_stages[0].clone();
    let mut qlayers = Vec::with_capacity(model.len());
    let mut reports = Vec::with_capacity(model.len());
    let mut opt_states = Vec::with_capacity(model.len());

    for (l, layer) in model.iter().enumerate() {
        let batches = make_batches(
            &calib.train_stages[l],
            &x_prime_train,
            &calib.train_stages[l + 1],
            config.batch_size,
        );
        let val = make_batches(
            &calib.val_stages[l],
            &x_prime_val,
            &calib.val_stages[l + 1],
            config.batch_size,
        );
        let (qlayer, report, opt_state) =
            optimize_layer(layer, &batches, &val, config, &mut pair_rng)?;

        let advance = |stream: &mut Vec<Matrix>, fp_stage: &[Matrix]| -> Result<()> {
            for (i, x) in stream.iter_mut().enumerate() {
                let input = match config.x_prime_propagation {
                    XPrimePropagation::Quantized => &*x,
                    XPrimePropagation::Original => &fp_stage[i],
                };
                *x = qlayer.forward_training(input)?;
            }
            Ok(())
        };
        advance(&mut x_prime_train, &calib.train_stages[l])?;
        advance(&mut x_prime_val, &calib.val_stages[l])?;

        qlayers.push(qlayer);
        reports.push(report);
        opt_states.push(opt_state);
    }
    Ok((qlayers, reports, opt_states))
}

/// Plain group-wise RTN model: identity transform, no tuning.
pub fn rtn_baseline_model(model: &[ToyDecoderLayer], spec: QuantSpec) -> Result<Vec<QuantizedLayer>> {
    let mut rng = Rng::new(0);
    model
        .iter()
        .map(|layer| {
            let d = layer.d_model();
            let h = layer.hidden();
            let bundle_up = TransformBundle::identity(d, spec.group_size.min(d), 1, 1, &mut rng)?;
            let bundle_down = TransformBundle::identity(h, spec.group_size.min(h), 1, 1, &mut rng)?;
            let mut up =
                QuantLinear::new(layer.lin_up.clone(), layer.bias_up.clone(), bundle_up, spec)?;
            let mut down =
                QuantLinear::new(layer.lin_down.clone(), layer.bias_down.clone(), bundle_down, spec)?;
            // Zero-angle bundles: the transform is the identity.
            for rots in up.bundle.rotations.iter_mut().chain(down.bundle.rotations.iter_mut()) {
                rots.clear();
            }
            up.refresh_qparams();
            down.refresh_qparams();
            Ok(QuantizedLayer {
                graph: LayerGraph { up, down, residual: layer.residual },
            })
        })
        .collect()
}

/// Training-mode forward through a stack of quantized layers.
pub fn quantized_model_forward(qlayers: &[QuantizedLayer], x: &Matrix) -> Result<Matrix> {
    let mut h = x.clone();
    for layer in qlayers {
        h = layer.forward_training(&h)?;
    }
    Ok(h)
}

/// Freeze a whole model.
pub fn deploy_model(qlayers: &[QuantizedLayer]) -> Result<DeployedModel> {
    Ok(DeployedModel {
        layers: qlayers.iter().map(|l| l.to_deployed()).collect::<Result<Vec<_>>>()?,
    })
}

// ---------------------------------------------------------------------------
// Run directory checkpoints

fn push_matrix(file: &mut TensorFile, name: &str, role: &str, m: &Matrix) {
    file.push(TensorEntry::new(name, vec![m.rows, m.cols], role, TensorData::F32(m.data.clone())));
}

fn push_bias(file: &mut TensorFile, name: &str, bias: &Option<Vec<f32>>) {
    if let Some(b) = bias {
        file.push(TensorEntry::new(name, vec![b.len()], "bias", TensorData::F32(b.clone())));
    }
}

/// Save the FP model, per-layer quantized checkpoints (bundle + codes +
/// bias + optimizer state), the run config, and a loss summary.
pub fn save_run_dir(
    dir: &Path,
    model: &[ToyDecoderLayer],
    qlayers: &[QuantizedLayer],
    opt_states: &[LayerOptState],
    config: &RunConfig,
    reports: &[LayerReport],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Format(format!("config encode: {e}")))?;
    std::fs::write(dir.join("config.json"), config_json)?;

    let mut fp = TensorFile::new();
    fp.set_meta("num_layers", model.len() as u64);
    for (i, layer) in model.iter().enumerate() {
        push_matrix(&mut fp, &format!("layer{i}_up_w"), "weight", &layer.lin_up);
        push_matrix(&mut fp, &format!("layer{i}_down_w"), "weight", &layer.lin_down);
        push_bias(&mut fp, &format!("layer{i}_up_b"), &layer.bias_up);
        push_bias(&mut fp, &format!("layer{i}_down_b"), &layer.bias_down);
    }
    fp.set_meta("residual", model.first().map(|l| l.residual).unwrap_or(true));
    fp.save(dir.join("fp_model.pqt"))?;

    for (i, qlayer) in qlayers.iter().enumerate() {
        for (side, lin) in [("up", &qlayer.graph.up), ("down", &qlayer.graph.down)] {
            let mut file = crate::transform::bundle_save(&lin.bundle)?;
            let w_rot = lin.transformed_weight();
            let params = cleaned_params(&lin.effective_params(&w_rot), lin.spec);
            let qt = quantize_matrix_with_params(&w_rot, lin.spec, params)?;
            for entry in qt.to_tensor_file().entries {
                file.push(entry);
            }
            file.set_meta("bits", lin.spec.bits as u64);
            file.set_meta("group_size", lin.spec.group_size as u64);
            push_bias(&mut file, "bias", &lin.bias);
            file.save(dir.join(format!("layer{i}_{side}.pqt")))?;
        }
        let mut opt_file = TensorFile::new();
        for (name, state) in &opt_states[i].groups {
            opt_file.set_meta(&format!("{name}_step"), state.step);
            for entry in state.to_tensor_entries(name) {
                opt_file.push(entry);
            }
        }
        opt_file.save(dir.join(format!("layer{i}_optstate.pqt")))?;
    }

    let summary = serde_json::to_string_pretty(reports)
        .map_err(|e| Error::Format(format!("summary encode: {e}")))?;
    std::fs::write(dir.join("summary.json"), summary)?;
    Ok(())
}

/// Load the FP model back from a run directory.
pub fn load_fp_model(dir: &Path) -> Result<Vec<ToyDecoderLayer>> {
    let file = TensorFile::load(dir.join("fp_model.pqt"))?;
    let num_layers = file.meta_u64("num_layers")? as usize;
    let residual = file
        .meta
        .get("residual")
        .and_then(|v| v.as_bool())
        .ok_or_else(|| Error::Format("missing residual flag".into()))?;
    let get_matrix = |name: &str| -> Result<Matrix> {
        let e = file.get(name)?;
        Matrix::from_vec(e.shape[0], e.shape[1], e.data.as_f32()?.to_vec())
    };
    let get_bias = |name: &str| -> Option<Vec<f32>> {
        file.get(name).ok().and_then(|e| e.data.as_f32().ok().map(|v| v.to_vec()))
    };
    (0..num_layers)
        .map(|i| {
            Ok(ToyDecoderLayer {
                lin_up: get_matrix(&format!("layer{i}_up_w"))?,
                bias_up: get_bias(&format!("layer{i}_up_b")),
                lin_down: get_matrix(&format!("layer{i}_down_w"))?,
                bias_down: get_bias(&format!("layer{i}_down_b")),
                residual,
            })
        })
        .collect()
}

/// Load the deployed model from a run directory.
pub fn load_deployed_model(dir: &Path) -> Result<DeployedModel> {
    let config: RunConfig = serde_json::from_str(
        &std::fs::read_to_string(dir.join("config.json"))?,
    )
    .map_err(|e| Error::Format(format!("config decode: {e}")))?;
    let residual = true;
    let mut layers = Vec::with_capacity(config.model.num_layers);
    for i in 0..config.model.num_layers {
        let mut sides = Vec::with_capacity(2);
        for side in ["up", "down"] {
            let file = TensorFile::load(dir.join(format!("layer{i}_{side}.pqt")))?;
            let bundle = crate::transform::bundle_load(&file)?;
            let codes = crate::quant::QuantizedTensor::from_tensor_file(&file)?;
            let bias = file.get("bias").ok().and_then(|e| e.data.as_f32().ok().map(|v| v.to_vec()));
            sides.push(DeployedLinear {
                codes,
                bundle: CompiledBundle::from_bundle(&bundle),
                bias,
            });
        }
        let down = sides.pop().unwrap();
        let up = sides.pop().unwrap();
        layers.push(DeployedLayer { up, down, residual });
    }
    Ok(DeployedModel { layers })
}
