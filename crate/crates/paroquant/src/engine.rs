//! Deployed-mode inference: fused inverse transform plus dequantizing matvec.
//!
//! The fused kernel makes one pass over each (token × group) tile: divide by
//! the channel scales, then apply all K rotations while the tile is hot, with
//! pair updates free to vectorize inside a rotation. Work is parallel across
//! tokens and channel groups with no cross-tile synchronization; the K
//! rotations of one group stay sequential. The matvec keeps weights in code
//! form and dequantizes one group block at a time, so the transient FP32
//! scratch never exceeds `g × d_out` per linear.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crate::quant::QuantizedTensor;
use crate::tensor::{GroupLayout, Matrix, Rng};
use crate::transform::TransformBundle;
use crate::{Error, Result};

/// Rotation parameters decoded for the inner loop: group-local pair indices
/// with precomputed cosines and sines.
#[derive(Debug, Clone)]
struct CompiledRotation {
    pairs: Vec<(u32, u32)>,
    cos_sin: Vec<(f32, f32)>,
}

/// A transform bundle in inference form.
#[derive(Debug, Clone)]
pub struct CompiledBundle {
    /// Kept as the raw scales; the kernel divides so the arithmetic matches
    /// the reference path bitwise.
    alpha: Vec<f32>,
    groups: Vec<Vec<CompiledRotation>>,
    pub layout: GroupLayout,
}

impl CompiledBundle {
    pub fn from_bundle(bundle: &TransformBundle) -> Self {
        let groups = bundle
            .rotations
            .iter()
            .map(|rots| {
                rots.iter()
                    .map(|rot| CompiledRotation {
                        pairs: rot.pairs.iter().map(|p| (p.i as u32, p.j as u32)).collect(),
                        cos_sin: rot.angles.iter().map(|&t| (t.cos(), t.sin())).collect(),
                    })
                    .collect()
            })
            .collect();
        Self { alpha: bundle.alpha.clone(), groups, layout: bundle.layout }
    }
}

/// Fused `X·T⁻¹`: semantically identical to the reference implementation in
/// the transform module, processed tile by tile in a single memory pass.
pub fn fused_inverse_transform(x: &Matrix, bundle: &CompiledBundle) -> Result<Matrix> {
    if x.cols != bundle.layout.channels {
        return Err(Error::ShapeMismatch(format!(
            "activation has {} columns, bundle expects {}",
            x.cols, bundle.layout.channels
        )));
    }
    let mut out = x.clone();
    let cols = out.cols;
    let layout = bundle.layout;
    crate::parallel::for_each_chunk_mut(&mut out.data, cols, |_, row| {
        for (v, a) in row.iter_mut().zip(&bundle.alpha) {
            *v /= a;
        }
        for g in 0..layout.num_groups {
            let (start, len) = layout.group_bounds(g);
            let tile = &mut row[start..start + len];
            for rot in &bundle.groups[g] {
                for (&(i, j), &(cos, sin)) in rot.pairs.iter().zip(&rot.cos_sin) {
                    let (a, b) = (tile[i as usize], tile[j as usize]);
                    tile[i as usize] = cos * a - sin * b;
                    tile[j as usize] = sin * a + cos * b;
                }
            }
        }
    });
    Ok(out)
}

static MAX_SCRATCH_ELEMENTS: AtomicUsize = AtomicUsize::new(0);

/// Largest transient FP32 dequantization buffer allocated so far, in
/// elements. Instrumentation hook for the `g × d_out` contract.
pub fn max_scratch_elements() -> usize {
    MAX_SCRATCH_ELEMENTS.load(Ordering::Relaxed)
}

pub fn reset_scratch_stats() {
    MAX_SCRATCH_ELEMENTS.store(0, Ordering::Relaxed);
}

fn record_scratch(elements: usize) {
    MAX_SCRATCH_ELEMENTS.fetch_max(elements, Ordering::Relaxed);
}

/// `Y = X · dequant(codes) + b`, dequantizing group by group. Accumulation is
/// FP64 per output element in a fixed group order, so the result does not
/// depend on the thread count.
pub fn dequant_matvec(x: &Matrix, qt: &QuantizedTensor, bias: Option<&[f32]>) -> Result<Matrix> {
    if x.cols != qt.d_in {
        return Err(Error::ShapeMismatch(format!(
            "activation has {} columns, codes expect {}",
            x.cols, qt.d_in
        )));
    }
    let (tokens, d_out) = (x.rows, qt.d_out);
    let layout = qt.layout;
    let mut acc = vec![0.0f64; tokens * d_out];
    let mut scratch = vec![0.0f32; layout.group_size * d_out];
    record_scratch(scratch.len());
    for g in 0..layout.num_groups {
        let (start, len) = layout.group_bounds(g);
        // Dequantize one group block into the reusable scratch.
        for k in 0..len {
            let code_row = &qt.codes[(start + k) * d_out..(start + k + 1) * d_out];
            let scratch_row = &mut scratch[k * d_out..(k + 1) * d_out];
            for (c, (slot, &code)) in scratch_row.iter_mut().zip(code_row).enumerate() {
                let p = qt.params[g * d_out + c];
                *slot = (code as f32 - p.zero_point) * p.scale;
            }
        }
        let scratch_ref = &scratch;
        crate::parallel::for_each_chunk_mut(&mut acc, d_out, |r, acc_row| {
            let x_row = &x.data[r * x.cols + start..r * x.cols + start + len];
            for (k, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let xv = xv as f64;
                let w_row = &scratch_ref[k * d_out..(k + 1) * d_out];
                for (a, &wv) in acc_row.iter_mut().zip(w_row) {
                    *a += xv * wv as f64;
                }
            }
        });
    }
    let mut out = Matrix::zeros(tokens, d_out);
    for (o, &a) in out.data.iter_mut().zip(&acc) {
        *o = a as f32;
    }
    if let Some(b) = bias {
        for row in out.data.chunks_mut(d_out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// One linear in frozen form: integer codes, compiled transform, bias.
#[derive(Debug, Clone)]
pub struct DeployedLinear {
    pub codes: QuantizedTensor,
    pub bundle: CompiledBundle,
    pub bias: Option<Vec<f32>>,
}

impl DeployedLinear {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let x_rot = fused_inverse_transform(x, &self.bundle)?;
        dequant_matvec(&x_rot, &self.codes, self.bias.as_deref())
    }
}

/// Frozen decoder layer mirroring the toy layer structure.
#[derive(Debug, Clone)]
pub struct DeployedLayer {
    pub up: DeployedLinear,
    pub down: DeployedLinear,
    pub residual: bool,
}

impl DeployedLayer {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.up.forward(x)?;
        for v in &mut h.data {
            *v = crate::optim::graph::silu(*v);
        }
        let y = self.down.forward(&h)?;
        let mut out = y;
        if self.residual {
            for (v, xv) in out.data.iter_mut().zip(&x.data) {
                *v += xv;
            }
        }
        Ok(out)
    }
}

/// Ordered frozen layers; no FP32 master weights are retained.
#[derive(Debug, Clone, Default)]
pub struct DeployedModel {
    pub layers: Vec<DeployedLayer>,
}

/// Run activations through every deployed layer.
pub fn quantized_forward(x: &Matrix, model: &DeployedModel) -> Result<Matrix> {
    let mut h = x.clone();
    for layer in &model.layers {
        h = layer.forward(&h)?;
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Transform micro-benchmark

/// One measurement row of the transform benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kind: String,
    pub n: usize,
    pub k: usize,
    pub tokens: usize,
    pub wall_time_s: f64,
    pub elements_per_second: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,n,k,tokens,wall_time_s,elements_per_second\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.kind, r.n, r.k, r.tokens, r.wall_time_s, r.elements_per_second
            ));
        }
        out
    }

    pub fn from_csv(csv: &str) -> Result<Self> {
        let mut lines = csv.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
        if header != "kind,n,k,tokens,wall_time_s,elements_per_second" {
            return Err(Error::Format(format!("unexpected csv header `{header}`")));
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!("bad csv row `{line}`")));
            }
            let parse_f = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Format(format!("bad float `{s}`: {e}")))
            };
            let parse_u = |s: &str| {
                s.parse::<usize>().map_err(|e| Error::Format(format!("bad int `{s}`: {e}")))
            };
            rows.push(BenchRow {
                kind: cols[0].to_string(),
                n: parse_u(cols[1])?,
                k: parse_u(cols[2])?,
                tokens: parse_u(cols[3])?,
                wall_time_s: parse_f(cols[4])?,
                elements_per_second: parse_f(cols[5])?,
            });
        }
        Ok(Self { rows })
    }
}

fn median(mut times: Vec<f64>) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

fn time_median<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    // One warmup run.
    f();
    let times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    median(times)
}

/// Median wall time of the fused pairwise inverse transform at the given
/// configuration. Group size is capped at the channel count.
pub fn time_pairwise_transform(
    n: usize,
    group_size: usize,
    k: usize,
    tokens: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let g = group_size.min(n);
    let mut rng = Rng::new(seed);
    let bundle = TransformBundle::random(n, g, k, g / 2, &mut rng)?;
    let compiled = CompiledBundle::from_bundle(&bundle);
    let x = Matrix::randn(tokens, n, &mut rng);
    Ok(time_median(repeats, || {
        let out = fused_inverse_transform(&x, &compiled).expect("shapes fixed");
        std::hint::black_box(&out);
    }))
}

/// Median wall time of the randomized Walsh–Hadamard inverse on the same
/// shape; `n` must be a power of two.
pub fn time_fwht_transform(n: usize, tokens: usize, repeats: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let op = crate::baselines::HadamardOp::random(n, &mut rng)?;
    let x = Matrix::randn(tokens, n, &mut rng);
    Ok(time_median(repeats, || {
        let out = op.apply_inverse_to_activations(&x).expect("shapes fixed");
        std::hint::black_box(&out);
    }))
}

/// Time the fused pairwise transform against the FWHT across dimensions and
/// emit one row per (kind, n).
pub fn bench_transforms(
    dims: &[usize],
    k: usize,
    tokens: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &n in dims {
        let t = time_pairwise_transform(n, 128, k, tokens, repeats, seed)?;
        report.rows.push(BenchRow {
            kind: "scaled_pairwise".into(),
            n,
            k,
            tokens,
            wall_time_s: t,
            elements_per_second: (tokens * n) as f64 / t,
        });
        if n.is_power_of_two() {
            let t = time_fwht_transform(n, tokens, repeats, seed)?;
            report.rows.push(BenchRow {
                kind: "fwht".into(),
                n,
                k: 0,
                tokens,
                wall_time_s: t,
                elements_per_second: (tokens * n) as f64 / t,
            });
        }
    }
    Ok(report)
}

/// Run a closure on a rayon pool of the requested size; with the sequential
/// build the closure just runs inline.
#[cfg(feature = "parallel")]
pub fn with_thread_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_pool<T: Send>(_threads: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_matrix, QuantSpec};

    #[test]
    fn fused_matches_reference_inverse() {
        let mut rng = Rng::new(31);
        for (g, k, tokens) in [(32, 1, 1), (32, 4, 7), (128, 8, 64)] {
            let n = 256;
            let bundle = TransformBundle::random(n, g, k, g / 2, &mut rng).unwrap();
            let x = Matrix::randn(tokens, n, &mut rng);
            let reference = crate::transform::apply_inverse_to_activations(&x, &bundle).unwrap();
            let fused = fused_inverse_transform(&x, &CompiledBundle::from_bundle(&bundle)).unwrap();
            assert!(
                fused.max_abs_diff(&reference) < 1e-5,
                "g={g} k={k} tokens={tokens}"
            );
        }
    }

    #[test]
    fn fused_identity_bundle_is_copy() {
        let mut rng = Rng::new(32);
        let bundle = TransformBundle::identity(64, 32, 4, 16, &mut rng).unwrap();
        let x = Matrix::randn(9, 64, &mut rng);
        let out = fused_inverse_transform(&x, &CompiledBundle::from_bundle(&bundle)).unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn dequant_matvec_matches_dense_path() {
        let mut rng = Rng::new(33);
        let w = Matrix::randn(64, 24, &mut rng);
        let x = Matrix::randn(10, 64, &mut rng);
        let qt = quantize_matrix(&w, QuantSpec::new(4, 16).unwrap()).unwrap();
        let dense = crate::quant::dequantize_matrix(&qt);
        let expect = crate::tensor::matmul(&x, &dense);
        let bias: Vec<f32> = (0..24).map(|i| i as f32 * 0.01).collect();
        let got = dequant_matvec(&x, &qt, Some(&bias)).unwrap();
        for r in 0..10 {
            for c in 0..24 {
                let e = expect.at(r, c) + bias[c];
                assert!((got.at(r, c) - e).abs() < 1e-4, "({r},{c})");
            }
        }
    }

    #[test]
    fn scratch_stays_within_group_block() {
        reset_scratch_stats();
        let mut rng = Rng::new(34);
        let w = Matrix::randn(64, 24, &mut rng);
        let x = Matrix::randn(4, 64, &mut rng);
        let qt = quantize_matrix(&w, QuantSpec::new(4, 16).unwrap()).unwrap();
        dequant_matvec(&x, &qt, None).unwrap();
        assert!(max_scratch_elements() <= 16 * 24);
    }

    #[test]
    fn bench_csv_roundtrip() {
        let report = bench_transforms(&[64, 100], 4, 8, 1, 0).unwrap();
        // One pairwise row per n, one fwht row per power-of-two n.
        assert_eq!(report.rows.len(), 3);
        let csv = report.to_csv();
        let parsed = BenchReport::from_csv(&csv).unwrap();
        assert_eq!(parsed.rows.len(), report.rows.len());
        for (a, b) in parsed.rows.iter().zip(&report.rows) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.n, b.n);
            assert!(a.wall_time_s > 0.0);
        }
    }
}
