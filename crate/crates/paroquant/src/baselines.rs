//! Reference transforms and the output-error comparison harness.
//!
//! Five transforms are compared on the objective
//! `huber(T⁻¹(X)·Q(T(W)), X·W)`: no transform, channel-wise scaling only, a
//! full rotation parameterized as `R = exp(U - Uᵀ)`, a randomized fast
//! Walsh–Hadamard transform (not optimized; averaged over sign seeds), and
//! the scaled pairwise rotation. Optimized kinds run AdamW at a constant
//! harness rate (0.001 for the full rotation, 0.01 otherwise); quantizer
//! parameters are recomputed from the transformed weights every step.

use crate::optim::graph::{linear_loss_and_grads, QuantLinear, QuantParamMode};
use crate::optim::{huber_loss_value, AdamW};
use crate::quant::{compute_matrix_params, fake_quant, QuantSpec};
use crate::tensor::{matmul, Matrix, Rng};
use crate::transform::{IndependentRotation, Pair, TransformBundle};
use crate::{Error, Result};

/// Lower bound keeping learned channel scales strictly positive.
pub const ALPHA_FLOOR: f32 = 1e-4;

// ---------------------------------------------------------------------------
// Fast Walsh–Hadamard transform

/// In-place unnormalized Walsh–Hadamard butterfly; length must be a power of
/// two.
pub fn fwht(v: &mut [f32]) -> Result<()> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "fwht length must be a power of two, got {n}"
        )));
    }
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(h * 2) {
            for i in block..block + h {
                let (a, b) = (v[i], v[i + h]);
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
    Ok(())
}

/// Random sign diagonal plus Hadamard: `h(v) = fwht(signs ⊙ v) / √n`,
/// an orthogonal transform.
#[derive(Debug, Clone)]
pub struct HadamardOp {
    pub n: usize,
    pub signs: Vec<f32>,
}

impl HadamardOp {
    pub fn random(n: usize, rng: &mut Rng) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "hadamard dimension must be a power of two, got {n}"
            )));
        }
        let signs = (0..n).map(|_| if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 }).collect();
        Ok(Self { n, signs })
    }

    /// Apply to a vector.
    pub fn apply(&self, v: &mut [f32]) -> Result<()> {
        if v.len() != self.n {
            return Err(Error::ShapeMismatch("hadamard input length".into()));
        }
        for (x, s) in v.iter_mut().zip(&self.signs) {
            *x *= s;
        }
        fwht(v)?;
        let scale = 1.0 / (self.n as f32).sqrt();
        for x in v.iter_mut() {
            *x *= scale;
        }
        Ok(())
    }

    /// `T·W`: transform each column of the weight along the channel axis.
    pub fn apply_to_weights(&self, w: &Matrix) -> Result<Matrix> {
        if w.rows != self.n {
            return Err(Error::ShapeMismatch("hadamard weight channels".into()));
        }
        let mut out = w.clone();
        let mut column = vec![0.0f32; self.n];
        for c in 0..w.cols {
            for r in 0..self.n {
                column[r] = out.at(r, c);
            }
            self.apply(&mut column)?;
            for r in 0..self.n {
                *out.at_mut(r, c) = column[r];
            }
        }
        Ok(out)
    }

    /// `X·Tᵀ`: the activation-side inverse (T is orthogonal).
    pub fn apply_inverse_to_activations(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.n {
            return Err(Error::ShapeMismatch("hadamard activation columns".into()));
        }
        let mut out = x.clone();
        let scale = 1.0 / (self.n as f32).sqrt();
        for row in out.data.chunks_mut(self.n) {
            for (v, s) in row.iter_mut().zip(&self.signs) {
                *v *= s;
            }
            fwht(row)?;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Full rotation via the matrix exponential

/// Strictly upper-triangular parameter of `R = exp(U - Uᵀ)`, packed row-major.
#[derive(Debug, Clone)]
pub struct SkewParam {
    pub n: usize,
    pub upper: Vec<f32>,
}

impl SkewParam {
    pub fn zeros(n: usize) -> Self {
        Self { n, upper: vec![0.0; n * (n - 1) / 2] }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    /// Dense strictly-upper-triangular matrix.
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                *m.at_mut(i, j) = self.upper[self.index(i, j)];
            }
        }
        m
    }

    /// The skew-symmetric `A = U - Uᵀ` in FP64.
    fn skew_f64(&self) -> Vec<f64> {
        let n = self.n;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.upper[self.index(i, j)] as f64;
                a[i * n + j] = v;
                a[j * n + i] = -v;
            }
        }
        a
    }
}

fn mat_mul_f64(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[k * n + j];
            }
        }
    }
    out
}

fn one_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling-and-squaring with a truncated Taylor series
/// (16 terms; squarings chosen so the scaled 1-norm is at most 0.5).
pub fn expm_f64(a: &[f64], n: usize) -> Vec<f64> {
    let norm = one_norm(a, n);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil().max(0.0) as u32 } else { 0 };
    let scale = 1.0 / (1u64 << squarings) as f64;
    let b: Vec<f64> = a.iter().map(|v| v * scale).collect();

    let mut result = vec![0.0f64; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
    }
    let mut term = result.clone();
    for k in 1..=16u64 {
        term = mat_mul_f64(&term, &b, n);
        let inv_k = 1.0 / k as f64;
        for t in term.iter_mut() {
            *t *= inv_k;
        }
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = mat_mul_f64(&result, &result, n);
    }
    result
}

/// `R = exp(U - Uᵀ)`, an orthogonal matrix with determinant +1.
pub fn skew_to_orthogonal(u: &SkewParam) -> Matrix {
    let n = u.n;
    let e = expm_f64(&u.skew_f64(), n);
    Matrix { rows: n, cols: n, data: e.iter().map(|&v| v as f32).collect() }
}

/// Reverse-mode adjoint of `R = exp(A)`: `Ā = L(Aᵀ, R̄)`, the Fréchet
/// derivative of exp at `Aᵀ` applied to `R̄`, read off the top-right block of
/// `exp([[Aᵀ, R̄], [0, Aᵀ]])`.
fn expm_adjoint(a: &[f64], g_r: &[f64], n: usize) -> Vec<f64> {
    let m = 2 * n;
    let mut block = vec![0.0f64; m * m];
    for i in 0..n {
        for j in 0..n {
            let at = a[j * n + i];
            block[i * m + j] = at;
            block[(n + i) * m + (n + j)] = at;
            block[i * m + (n + j)] = g_r[i * n + j];
        }
    }
    let e = expm_f64(&block, m);
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = e[i * m + (n + j)];
        }
    }
    out
}

/// Gradient of a loss with respect to the packed upper-triangular parameter,
/// given the gradient with respect to `R`.
pub fn skew_backward(u: &SkewParam, g_r: &Matrix) -> Vec<f32> {
    let n = u.n;
    let g64: Vec<f64> = g_r.data.iter().map(|&v| v as f64).collect();
    let a_bar = expm_adjoint(&u.skew_f64(), &g64, n);
    let mut out = vec![0.0f32; u.upper.len()];
    for i in 0..n {
        for j in (i + 1)..n {
            out[u.index(i, j)] = (a_bar[i * n + j] - a_bar[j * n + i]) as f32;
        }
    }
    out
}

fn determinant_f64(m: &Matrix) -> f64 {
    let n = m.rows;
    let mut a: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
    let mut det = 1.0f64;
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(col * n + c, pivot * n + c);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for r in (col + 1)..n {
            let f = a[r * n + col] / p;
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
        }
    }
    det
}

/// Determinant via FP64 Gaussian elimination; test/inspection aid.
pub fn determinant(m: &Matrix) -> f64 {
    assert_eq!(m.rows, m.cols);
    determinant_f64(m)
}

// ---------------------------------------------------------------------------
// Magnitude-ranked pair selection (dependent Givens replication)

/// All pairs of group-local channels sorted descending by the absolute
/// difference of row ℓ₂ norms, ties broken by index order.
pub fn rank_pairs_by_magnitude(w_group: &Matrix) -> Vec<(Pair, f32)> {
    let norms: Vec<f64> = (0..w_group.rows)
        .map(|r| w_group.row(r).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
        .collect();
    let mut ranked = Vec::with_capacity(w_group.rows * (w_group.rows - 1) / 2);
    for i in 0..w_group.rows {
        for j in (i + 1)..w_group.rows {
            ranked.push((Pair { i, j }, (norms[i] - norms[j]).abs() as f32));
        }
    }
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| (a.0.i, a.0.j).cmp(&(b.0.i, b.0.j)))
    });
    ranked
}

/// First `floor(fraction * len)` entries of a ranked pair list.
pub fn top_fraction(ranked: &[(Pair, f32)], fraction: f64) -> &[(Pair, f32)] {
    let count = (fraction * ranked.len() as f64).floor() as usize;
    &ranked[..count]
}

/// A dependent Givens sequence as a bundle: one single-pair rotation per
/// stage, applied sequentially in the given (significance) order.
pub fn bundle_from_ranked_pairs(d_in: usize, pairs: &[Pair]) -> Result<TransformBundle> {
    let layout = crate::tensor::GroupLayout::new(d_in, d_in)?;
    let rotations = vec![pairs
        .iter()
        .map(|&p| IndependentRotation { pairs: vec![p], angles: vec![0.0] })
        .collect::<Vec<_>>()];
    let bundle =
        TransformBundle { alpha: vec![1.0; d_in], rotations, layout, pairs_per_rotation: 1 };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Comparison harness

/// A transform under comparison, carrying its kind-specific parameters.
#[derive(Debug, Clone)]
pub enum TransformKind {
    None,
    ScalingOnly(TransformBundle),
    FullRotation(SkewParam),
    RandomHadamard(HadamardOp),
    IndependentRotations(TransformBundle),
    ScaledPairwise(TransformBundle),
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::ScalingOnly(_) => "scaling_only",
            TransformKind::FullRotation(_) => "full_rotation",
            TransformKind::RandomHadamard(_) => "random_hadamard",
            TransformKind::IndependentRotations(_) => "independent_rotations",
            TransformKind::ScaledPairwise(_) => "scaled_pairwise",
        }
    }
}

/// Which transforms the harness should run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindRequest {
    None,
    ScalingOnly,
    FullRotation,
    RandomHadamard,
    IndependentRotations,
    ScaledPairwise,
}

impl KindRequest {
    pub const ALL: [KindRequest; 6] = [
        KindRequest::None,
        KindRequest::ScalingOnly,
        KindRequest::FullRotation,
        KindRequest::RandomHadamard,
        KindRequest::IndependentRotations,
        KindRequest::ScaledPairwise,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KindRequest::None),
            "scaling_only" => Ok(KindRequest::ScalingOnly),
            "full_rotation" => Ok(KindRequest::FullRotation),
            "random_hadamard" => Ok(KindRequest::RandomHadamard),
            "independent_rotations" => Ok(KindRequest::IndependentRotations),
            "scaled_pairwise" => Ok(KindRequest::ScaledPairwise),
            other => Err(Error::InvalidArgument(format!("unknown transform kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KindRequest::None => "none",
            KindRequest::ScalingOnly => "scaling_only",
            KindRequest::FullRotation => "full_rotation",
            KindRequest::RandomHadamard => "random_hadamard",
            KindRequest::IndependentRotations => "independent_rotations",
            KindRequest::ScaledPairwise => "scaled_pairwise",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub steps: usize,
    pub bits: u32,
    pub group_size: usize,
    pub rotations: usize,
    pub pairs_per_rotation: usize,
    pub hadamard_seeds: usize,
    pub seed: u64,
    pub lr_full_rotation: f32,
    pub lr_other: f32,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            bits: 4,
            group_size: 128,
            rotations: 8,
            pairs_per_rotation: 64,
            hadamard_seeds: 100,
            seed: 0,
            lr_full_rotation: 1e-3,
            lr_other: 1e-2,
        }
    }
}

/// Loss trajectory of one transform; `losses[t]` is the objective before
/// update `t`, with one final evaluation appended after the last update.
#[derive(Debug, Clone)]
pub struct LossCurve {
    pub kind: &'static str,
    pub seed: u64,
    pub losses: Vec<f32>,
    /// Best objective seen across the run (the optimizer keeps the best
    /// parameters).
    pub best: f32,
}

/// `kind,step,loss,seed` CSV for a set of curves.
pub fn curves_to_csv(curves: &[LossCurve]) -> String {
    let mut out = String::from("kind,step,loss,seed\n");
    for curve in curves {
        for (step, loss) in curve.losses.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", curve.kind, step, loss, curve.seed));
        }
    }
    out
}

fn scaling_only_bundle(d_in: usize, group_size: usize) -> Result<TransformBundle> {
    let layout = crate::tensor::GroupLayout::new(d_in, group_size)?;
    Ok(TransformBundle {
        alpha: vec![1.0; d_in],
        rotations: vec![Vec::new(); layout.num_groups],
        layout,
        pairs_per_rotation: 0,
    })
}

/// Objective value for a fixed (non-learned) orthogonal transform.
fn fixed_transform_loss(
    w_t: &Matrix,
    x_t: &Matrix,
    target: &Matrix,
    spec: QuantSpec,
) -> Result<f64> {
    let params = compute_matrix_params(w_t, spec)?;
    let w_q = fake_quant(w_t, &params, spec);
    huber_loss_value(&matmul(x_t, &w_q), target)
}

/// Optimize one bundle-backed kind (scaling, independent rotations, or both).
fn optimize_bundle_kind(
    bundle: TransformBundle,
    tune_angles: bool,
    tune_alpha: bool,
    w: &Matrix,
    x: &Matrix,
    target: &Matrix,
    spec: QuantSpec,
    cfg: &CompareConfig,
) -> Result<(LossCurve, TransformBundle, &'static str)> {
    let name = match (tune_angles, tune_alpha) {
        (true, true) => "scaled_pairwise",
        (true, false) => "independent_rotations",
        _ => "scaling_only",
    };
    let mut lin = QuantLinear::new(w.clone(), None, bundle, spec)?;
    lin.mode = QuantParamMode::Dynamic;

    let mut angles = lin.angles_flat();
    let mut alpha = lin.bundle.alpha.clone();
    let mut opt_angles = AdamW::new(angles.len());
    let mut opt_alpha = AdamW::new(alpha.len());
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut best = f32::INFINITY;
    let mut best_state = (angles.clone(), alpha.clone());

    for _ in 0..cfg.steps {
        let (loss, grads) = linear_loss_and_grads(&lin, x, target)?;
        let loss = loss as f32;
        losses.push(loss);
        if loss < best {
            best = loss;
            best_state = (angles.clone(), alpha.clone());
        }
        if tune_angles {
            opt_angles.step(&mut angles, &grads.angles_flat(), cfg.lr_other);
            lin.set_angles_flat(&angles);
        }
        if tune_alpha {
            opt_alpha.step(&mut alpha, &grads.alpha, cfg.lr_other);
            for a in &mut alpha {
                *a = a.max(ALPHA_FLOOR);
            }
            lin.bundle.alpha.copy_from_slice(&alpha);
        }
    }
    let final_loss = {
        let out = lin.forward(x)?;
        huber_loss_value(&out, target)? as f32
    };
    losses.push(final_loss);
    if final_loss < best {
        best = final_loss;
        best_state = (angles, alpha);
    }
    lin.set_angles_flat(&best_state.0);
    lin.bundle.alpha.copy_from_slice(&best_state.1);
    Ok((LossCurve { kind: name, seed: cfg.seed, losses, best }, lin.bundle, name))
}

fn optimize_full_rotation(
    w: &Matrix,
    x: &Matrix,
    target: &Matrix,
    spec: QuantSpec,
    cfg: &CompareConfig,
) -> Result<(LossCurve, SkewParam)> {
    let n = w.rows;
    if n > 64 {
        return Err(Error::InvalidArgument(format!(
            "full rotation arm is limited to 64 channels, got {n}"
        )));
    }
    let mut u = SkewParam::zeros(n);
    let mut opt = AdamW::new(u.upper.len());
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut best = f32::INFINITY;
    let mut best_u = u.upper.clone();

    let transform = |u: &SkewParam| -> (Matrix, Matrix) {
        let r = skew_to_orthogonal(u);
        let w_t = matmul(&r, w);
        let x_t = crate::tensor::matmul_a_bt(x, &r);
        (w_t, x_t)
    };

    for _ in 0..cfg.steps {
        let (w_t, x_t) = transform(&u);
        let params = compute_matrix_params(&w_t, spec)?;
        let w_q = fake_quant(&w_t, &params, spec);
        let pred = matmul(&x_t, &w_q);
        let (loss, g_pred) = crate::optim::huber_loss(&pred, target)?;
        let loss = loss as f32;
        losses.push(loss);
        if loss < best {
            best = loss;
            best_u = u.upper.clone();
        }

        // Matmul adjoints for both appearances of R.
        let g_xt = crate::tensor::matmul_a_bt(&g_pred, &w_q);
        let g_wq = crate::tensor::matmul_at_b(&x_t, &g_pred);
        // STE through fake-quant.
        let mut g_wt = Matrix::zeros(w_t.rows, w_t.cols);
        let max_code = spec.max_code();
        for rr in 0..w_t.rows {
            let g = rr / spec.group_size;
            for c in 0..w_t.cols {
                let p = params[g * w_t.cols + c];
                let (_, rule) = crate::quant::fake_quant_value(w_t.at(rr, c), p, max_code);
                *g_wt.at_mut(rr, c) = g_wq.at(rr, c) * rule.d_value;
            }
        }
        // R̄ = g_wt·Wᵀ + g_xtᵀ·X.
        let mut g_r = crate::tensor::matmul_a_bt(&g_wt, w);
        let g_r2 = crate::tensor::matmul_at_b(&g_xt, x);
        for (a, b) in g_r.data.iter_mut().zip(&g_r2.data) {
            *a += b;
        }
        let g_u = skew_backward(&u, &g_r);
        opt.step(&mut u.upper, &g_u, cfg.lr_full_rotation);
    }
    let (w_t, x_t) = transform(&u);
    let final_loss = fixed_transform_loss(&w_t, &x_t, target, spec)? as f32;
    losses.push(final_loss);
    if final_loss < best {
        best = final_loss;
        best_u = u.upper.clone();
    }
    u.upper = best_u;
    Ok((LossCurve { kind: "full_rotation", seed: cfg.seed, losses, best }, u))
}

fn hadamard_mean_curve(
    w: &Matrix,
    x: &Matrix,
    target: &Matrix,
    spec: QuantSpec,
    cfg: &CompareConfig,
) -> Result<(LossCurve, HadamardOp)> {
    // Pad to the next power of two with zero channels if needed.
    let n = w.rows.next_power_of_two();
    let (w_pad, x_pad) = if n == w.rows {
        (w.clone(), x.clone())
    } else {
        let mut wp = Matrix::zeros(n, w.cols);
        for r in 0..w.rows {
            wp.row_mut(r).copy_from_slice(w.row(r));
        }
        let mut xp = Matrix::zeros(x.rows, n);
        for r in 0..x.rows {
            xp.row_mut(r)[..x.cols].copy_from_slice(x.row(r));
        }
        (wp, xp)
    };
    let losses: Vec<f64> = crate::parallel::map_indices(cfg.hadamard_seeds, |s| {
        let mut rng = Rng::new(Rng::derive_seed(cfg.seed, 0x4841 + s as u64));
        let op = HadamardOp::random(n, &mut rng).expect("power-of-two dim");
        let w_t = op.apply_to_weights(&w_pad).expect("shape");
        let x_t = op.apply_inverse_to_activations(&x_pad).expect("shape");
        fixed_transform_loss(&w_t, &x_t, target, spec).expect("loss")
    });
    let mean = (losses.iter().sum::<f64>() / losses.len() as f64) as f32;
    let curve = LossCurve {
        kind: "random_hadamard",
        seed: cfg.seed,
        losses: vec![mean; cfg.steps + 1],
        best: mean,
    };
    let mut rng = Rng::new(Rng::derive_seed(cfg.seed, 0x4841));
    Ok((curve, HadamardOp::random(n, &mut rng)?))
}

/// Harness result: the loss curve and the transform with its best parameters.
#[derive(Debug, Clone)]
pub struct CompareResult {
    pub curve: LossCurve,
    pub transform: TransformKind,
}

/// Run the requested transforms against the same `(W, X)` instance.
pub fn compare_transforms(
    w: &Matrix,
    x_calib: &Matrix,
    kinds: &[KindRequest],
    cfg: &CompareConfig,
) -> Result<Vec<CompareResult>> {
    if x_calib.cols != w.rows {
        return Err(Error::ShapeMismatch(format!(
            "calibration columns {} != weight channels {}",
            x_calib.cols, w.rows
        )));
    }
    let spec = QuantSpec::new(cfg.bits, cfg.group_size)?;
    let target = matmul(x_calib, w);
    let mut results = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let result = match kind {
            KindRequest::None => {
                let bundle = scaling_only_bundle(w.rows, cfg.group_size)?;
                let loss = {
                    let lin = QuantLinear::new(w.clone(), None, bundle, spec)?;
                    let out = lin.forward(x_calib)?;
                    huber_loss_value(&out, &target)? as f32
                };
                CompareResult {
                    curve: LossCurve {
                        kind: "none",
                        seed: cfg.seed,
                        losses: vec![loss; cfg.steps + 1],
                        best: loss,
                    },
                    transform: TransformKind::None,
                }
            }
            KindRequest::ScalingOnly => {
                let bundle = scaling_only_bundle(w.rows, cfg.group_size)?;
                let (curve, bundle, _) =
                    optimize_bundle_kind(bundle, false, true, w, x_calib, &target, spec, cfg)?;
                CompareResult { curve, transform: TransformKind::ScalingOnly(bundle) }
            }
            KindRequest::IndependentRotations => {
                let mut rng = Rng::new(cfg.seed);
                let bundle = TransformBundle::identity(
                    w.rows,
                    cfg.group_size,
                    cfg.rotations,
                    cfg.pairs_per_rotation,
                    &mut rng,
                )?;
                let (curve, bundle, _) =
                    optimize_bundle_kind(bundle, true, false, w, x_calib, &target, spec, cfg)?;
                CompareResult { curve, transform: TransformKind::IndependentRotations(bundle) }
            }
            KindRequest::ScaledPairwise => {
                let mut rng = Rng::new(cfg.seed);
                let bundle = TransformBundle::identity(
                    w.rows,
                    cfg.group_size,
                    cfg.rotations,
                    cfg.pairs_per_rotation,
                    &mut rng,
                )?;
                let (curve, bundle, _) =
                    optimize_bundle_kind(bundle, true, true, w, x_calib, &target, spec, cfg)?;
                CompareResult { curve, transform: TransformKind::ScaledPairwise(bundle) }
            }
            KindRequest::FullRotation => {
                let (curve, u) = optimize_full_rotation(w, x_calib, &target, spec, cfg)?;
                CompareResult { curve, transform: TransformKind::FullRotation(u) }
            }
            KindRequest::RandomHadamard => {
                let (curve, op) = hadamard_mean_curve(w, x_calib, &target, spec, cfg)?;
                CompareResult { curve, transform: TransformKind::RandomHadamard(op) }
            }
        };
        results.push(result);
    }
    Ok(results)
}

/// Optimize a dependent Givens sequence over the given pairs (in order) on
/// the single-group objective; used by the magnitude-ranked selection
/// experiment.
pub fn optimize_dependent_givens(
    w: &Matrix,
    x: &Matrix,
    pairs: &[Pair],
    steps: usize,
    lr: f32,
    spec: QuantSpec,
) -> Result<LossCurve> {
    let bundle = bundle_from_ranked_pairs(w.rows, pairs)?;
    let cfg = CompareConfig {
        steps,
        bits: spec.bits,
        group_size: spec.group_size,
        lr_other: lr,
        ..CompareConfig::default()
    };
    let target = matmul(x, w);
    let (mut curve, _, _) =
        optimize_bundle_kind(bundle, true, false, w, x, &target, spec, &cfg)?;
    curve.kind = "dependent_givens";
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fwht_first_basis_vector() {
        let mut v = vec![1.0, 0.0, 0.0, 0.0];
        fwht(&mut v).unwrap();
        assert_eq!(v, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn fwht_involution_up_to_scale() {
        let mut rng = Rng::new(3);
        let orig: Vec<f32> = (0..32).map(|_| rng.next_normal() as f32).collect();
        let mut v = orig.clone();
        fwht(&mut v).unwrap();
        fwht(&mut v).unwrap();
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - 32.0 * b).abs() < 1e-3);
        }
    }

    #[test]
    fn fwht_rejects_non_power_of_two() {
        let mut v = vec![0.0; 6];
        assert!(fwht(&mut v).is_err());
    }

    fn dense_hadamard(n: usize) -> Matrix {
        // Sylvester construction.
        let mut h = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        while h.rows < n {
            let m = h.rows;
            let mut next = Matrix::zeros(2 * m, 2 * m);
            for r in 0..m {
                for c in 0..m {
                    let v = h.at(r, c);
                    *next.at_mut(r, c) = v;
                    *next.at_mut(r, c + m) = v;
                    *next.at_mut(r + m, c) = v;
                    *next.at_mut(r + m, c + m) = -v;
                }
            }
            h = next;
        }
        h
    }

    #[test]
    fn fwht_matches_dense_hadamard() {
        let mut rng = Rng::new(7);
        let mut n = 2;
        while n <= 256 {
            let h = dense_hadamard(n);
            let v: Vec<f32> = (0..n).map(|_| rng.next_normal() as f32).collect();
            let vm = Matrix::from_vec(n, 1, v.clone()).unwrap();
            let expect = matmul(&h, &vm);
            let mut got = v;
            fwht(&mut got).unwrap();
            for (a, b) in got.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-4, "n={n}");
            }
            n *= 2;
        }
    }

    #[test]
    fn randomized_hadamard_preserves_norm() {
        let mut rng = Rng::new(9);
        let op = HadamardOp::random(64, &mut rng).unwrap();
        let v: Vec<f32> = (0..64).map(|_| rng.next_normal() as f32).collect();
        let before = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        let mut t = v;
        op.apply(&mut t).unwrap();
        let after = t.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        assert!((before - after).abs() / before < 1e-4);
    }

    #[test]
    fn expm_zero_is_identity() {
        let u = SkewParam::zeros(5);
        let r = skew_to_orthogonal(&u);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r.at(i, j) - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn expm_two_by_two_closed_form() {
        // U with U01 = theta gives exactly the 2x2 rotation by theta.
        for &theta in &[0.3f32, -1.2, 2.9] {
            let mut u = SkewParam::zeros(2);
            u.upper[0] = theta;
            let r = skew_to_orthogonal(&u);
            let (c, s) = ((theta as f64).cos() as f32, (theta as f64).sin() as f32);
            assert!((r.at(0, 0) - c).abs() < 1e-6);
            assert!((r.at(0, 1) - s).abs() < 1e-6);
            assert!((r.at(1, 0) + s).abs() < 1e-6);
            assert!((r.at(1, 1) - c).abs() < 1e-6);
        }
    }

    #[test]
    fn expm_orthogonal_and_unit_determinant() {
        let mut rng = Rng::new(11);
        let mut u = SkewParam::zeros(64);
        for v in &mut u.upper {
            *v = rng.next_range(-0.5, 0.5) as f32;
        }
        let r = skew_to_orthogonal(&u);
        let gram = matmul(&r.transpose(), &r);
        for i in 0..64 {
            for j in 0..64 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - expect).abs() < 1e-5, "({i},{j})");
            }
        }
        assert!((determinant(&r) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn skew_backward_matches_finite_difference() {
        // FD against a smooth scalar function of R.
        let mut rng = Rng::new(13);
        let n = 5;
        let mut u = SkewParam::zeros(n);
        for v in &mut u.upper {
            *v = rng.next_range(-0.4, 0.4) as f32;
        }
        let coeff = Matrix::randn(n, n, &mut rng);
        let loss = |u: &SkewParam| -> f64 {
            let r = skew_to_orthogonal(u);
            r.data.iter().zip(&coeff.data).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        // dL/dR is just the coefficient matrix.
        let g_u = skew_backward(&u, &coeff);
        for idx in 0..u.upper.len() {
            let orig = u.upper[idx];
            let h = 1e-3;
            u.upper[idx] = orig + h;
            let hi = loss(&u);
            u.upper[idx] = orig - h;
            let lo = loss(&u);
            u.upper[idx] = orig;
            let fd = (hi - lo) / (2.0 * h as f64);
            let an = g_u[idx] as f64;
            assert!(
                crate::optim::gradcheck::grad_close(an, fd, 1e-3, 1e-5),
                "idx {idx}: analytic {an} fd {fd}"
            );
        }
    }

    #[test]
    fn ranked_pairs_hand_examples() {
        // Rows with norms (10, 1, 1): top pair is (0,1) by index tie-break.
        let w = Matrix::from_vec(3, 1, vec![10.0, 1.0, 1.0]).unwrap();
        let ranked = rank_pairs_by_magnitude(&w);
        assert_eq!(ranked[0].0, Pair { i: 0, j: 1 });
        assert_eq!(ranked[1].0, Pair { i: 0, j: 2 });
        assert_eq!(ranked[2].0, Pair { i: 1, j: 2 });

        // Uniform rows: deterministic index order.
        let w = Matrix::from_vec(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        let ranked = rank_pairs_by_magnitude(&w);
        let order: Vec<(usize, usize)> = ranked.iter().map(|(p, _)| (p.i, p.j)).collect();
        assert_eq!(order, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn top_fraction_of_128_channels() {
        // g = 128 has 8128 pairs; 10% keeps floor(812.8) = 812.
        let mut rng = Rng::new(15);
        let w = Matrix::randn(128, 2, &mut rng);
        let ranked = rank_pairs_by_magnitude(&w);
        assert_eq!(ranked.len(), 8128);
        assert_eq!(top_fraction(&ranked, 0.1).len(), 812);
    }

    #[test]
    fn csv_schema_roundtrip() {
        let curves = vec![LossCurve { kind: "none", seed: 3, losses: vec![1.0, 0.5], best: 0.5 }];
        let csv = curves_to_csv(&curves);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "kind,step,loss,seed");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "none");
        assert_eq!(row[1], "0");
        assert_eq!(row[3], "3");
    }
}
