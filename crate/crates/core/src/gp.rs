//! Scalar Gaussian-process regression with a squared-exponential kernel over
//! linearly mapped features.
//!
//! Two models share the same query path: the exact GP and a FITC sparse GP
//! conditioned on a small set of inducing inputs. Both evaluate
//!
//! ```text
//! mean(z)     = sum_i w_i k(z, b_i)
//! variance(z) = k(z, z) - k_b(z)^T Q k_b(z)
//! ```
//!
//! over a basis `b` (training inputs for the exact model, inducing inputs for
//! FITC), so gradients and curvature are derived once, in feature space, and
//! pulled back through the feature map.
//!
//! The FITC model uses the training-conditional diagonal correction
//! `Lambda = diag(K_ff - Q_ff) + sigma_w^2 + jitter`:
//!
//! ```text
//! Sigma = (K_uu + K_uf Lambda^-1 K_fu)^-1
//! w     = Sigma K_uf Lambda^-1 y
//! Q     = K_uu^-1 - Sigma
//! ```
//!
//! With no training data `Q = 0` and the prior is recovered exactly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::features;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub prior_variance: f64,
    pub length_scales: DVector<f64>,
    pub noise_variance: f64,
    /// Maps a raw input `z` to the regression features.
    pub feature_map: DMatrix<f64>,
}

impl KernelParams {
    pub fn new(
        prior_variance: f64,
        length_scales: DVector<f64>,
        noise_variance: f64,
        feature_map: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self {
            prior_variance,
            length_scales,
            noise_variance,
            feature_map,
        };
        p.validate()?;
        Ok(p)
    }

    /// Kernel used for the Follower in the merge scenario:
    /// length-scales `(3, 3, 3, 17, 17, 5)`, prior variance 0.3, no noise.
    pub fn merge_default() -> Self {
        Self {
            prior_variance: 0.3,
            length_scales: DVector::from_vec(vec![3.0, 3.0, 3.0, 17.0, 17.0, 5.0]),
            noise_variance: 0.0,
            feature_map: features::merge_feature_map(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_variance > 0.0 && self.prior_variance.is_finite()) {
            return Err(Error::invalid("prior variance must be positive"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::invalid("noise variance must be non-negative"));
        }
        if self.length_scales.len() != self.feature_map.nrows() {
            return Err(Error::invalid(format!(
                "{} length-scales for {} features",
                self.length_scales.len(),
                self.feature_map.nrows()
            )));
        }
        if self.length_scales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("length-scales must be positive"));
        }
        let rows = self.feature_map.nrows();
        if rows == 0 || rows > self.feature_map.ncols() {
            return Err(Error::invalid("feature map must be wide and non-empty"));
        }
        let sv = self.feature_map.clone().singular_values();
        let max = sv.max();
        if sv.iter().filter(|s| **s > 1e-12 * max).count() < rows {
            return Err(Error::invalid("feature map must have full row rank"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.feature_map.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_map.nrows()
    }

    pub fn features(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, expected {}",
                z.len(),
                self.input_dim()
            )));
        }
        Ok(&self.feature_map * z)
    }

    fn inv_sq_scales(&self) -> DVector<f64> {
        self.length_scales.map(|l| 1.0 / (l * l))
    }

    fn kernel_features(&self, a: &DVector<f64>, b: &DVector<f64>, inv_sq: &DVector<f64>) -> f64 {
        let mut q = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            q += d * d * inv_sq[i];
        }
        self.prior_variance * (-0.5 * q).exp()
    }

    fn gram(&self, cols: &DMatrix<f64>) -> DMatrix<f64> {
        let inv_sq = self.inv_sq_scales();
        let n = cols.ncols();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.prior_variance;
            let a = cols.column(i).into_owned();
            for j in 0..i {
                let v = self.kernel_features(&a, &cols.column(j).into_owned(), &inv_sq);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn cross(&self, rows: &DMatrix<f64>, cols: &DMatrix<f64>) -> DMatrix<f64> {
        let inv_sq = self.inv_sq_scales();
        DMatrix::from_fn(rows.ncols(), cols.ncols(), |i, j| {
            self.kernel_features(
                &rows.column(i).into_owned(),
                &cols.column(j).into_owned(),
                &inv_sq,
            )
        })
    }

    fn feature_columns(&self, inputs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let mut cols = DMatrix::zeros(self.feature_dim(), inputs.len());
        for (j, z) in inputs.iter().enumerate() {
            cols.set_column(j, &self.features(z)?);
        }
        Ok(cols)
    }
}

/// `sigma_d^2 exp(-1/2 (Cz - Cz')^T L^-2 (Cz - Cz'))`.
pub fn kernel_eval(params: &KernelParams, z: &DVector<f64>, z2: &DVector<f64>) -> Result<f64> {
    let a = params.features(z)?;
    let b = params.features(z2)?;
    Ok(params.kernel_features(&a, &b, &params.inv_sq_scales()))
}

/// Chronologically ordered regression data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    inputs: Vec<DVector<f64>>,
    outputs: Vec<f64>,
    capacity: Option<usize>,
}

impl TrainingSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// A set that discards its oldest sample once `capacity` is reached.
    pub fn with_capacity_limit(capacity: usize) -> Self {
        Self {
            capacity: Some(capacity.max(1)),
            ..Self::default()
        }
    }

    pub fn from_pairs(inputs: Vec<DVector<f64>>, outputs: Vec<f64>) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            capacity: None,
        })
    }

    pub fn push(&mut self, z: DVector<f64>, y: f64) {
        if let Some(cap) = self.capacity {
            if self.inputs.len() >= cap {
                self.inputs.remove(0);
                self.outputs.remove(0);
            }
        }
        self.inputs.push(z);
        self.outputs.push(y);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n].to_vec(),
            outputs: self.outputs[..n].to_vec(),
            capacity: self.capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEval {
    pub mean: f64,
    pub variance: f64,
    /// Derivative of the mean with respect to the raw input `z`.
    pub mean_gradient: DVector<f64>,
}

/// Posterior moments with the extra derivatives needed by the planner's
/// sensitivity recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCurvature {
    pub eval: PosteriorEval,
    pub mean_hessian: DMatrix<f64>,
    pub variance_gradient: DVector<f64>,
}

/// Anything that can be queried for a scalar Gaussian posterior.
pub trait Posterior: Send + Sync {
    fn input_dim(&self) -> usize;

    fn posterior(&self, z: &DVector<f64>) -> Result<PosteriorEval>;

    fn posterior_with_curvature(&self, z: &DVector<f64>) -> Result<PosteriorCurvature>;
}

enum QuadForm<'a> {
    Cholesky(Option<&'a Cholesky<f64, Dyn>>),
    /// `Q = P^T P - N^T N`, kept in factored form.
    Difference(&'a DMatrix<f64>, &'a DMatrix<f64>),
}

impl QuadForm<'_> {
    /// Returns `(k^T Q k, Q k)`.
    fn apply(&self, k: &DVector<f64>) -> (f64, DVector<f64>) {
        match self {
            QuadForm::Cholesky(None) => (0.0, DVector::zeros(k.len())),
            QuadForm::Cholesky(Some(chol)) => {
                let half = chol
                    .l_dirty()
                    .solve_lower_triangular(k)
                    .expect("cholesky factor has positive diagonal");
                let qk = chol.solve(k);
                (half.norm_squared(), qk)
            }
            QuadForm::Difference(pos, neg) => {
                let a = *pos * k;
                let b = *neg * k;
                let qk = pos.tr_mul(&a) - neg.tr_mul(&b);
                (a.norm_squared() - b.norm_squared(), qk)
            }
        }
    }
}

struct Basis<'a> {
    params: &'a KernelParams,
    columns: &'a DMatrix<f64>,
    weights: &'a DVector<f64>,
    quad: QuadForm<'a>,
}

impl Basis<'_> {
    fn evaluate(&self, z: &DVector<f64>, curvature: bool) -> Result<PosteriorCurvature> {
        let p = self.params;
        let f = p.features(z)?;
        let d = f.len();
        let n = self.columns.ncols();
        let inv_sq = p.inv_sq_scales();

        let mut k = DVector::zeros(n);
        // scaled differences L^-2 (f - b_i), one column per basis point
        let mut scaled = DMatrix::zeros(d, n);
        for i in 0..n {
            let mut q = 0.0;
            for r in 0..d {
                let diff = f[r] - self.columns[(r, i)];
                q += diff * diff * inv_sq[r];
                scaled[(r, i)] = diff * inv_sq[r];
            }
            k[i] = p.prior_variance * (-0.5 * q).exp();
        }

        let mean = self.weights.dot(&k);
        let mut grad_f = DVector::zeros(d);
        for i in 0..n {
            grad_f.axpy(-self.weights[i] * k[i], &scaled.column(i), 1.0);
        }

        let (explained, qk) = self.quad.apply(&k);
        let raw_var = p.prior_variance - explained;
        let variance = raw_var.max(0.0);

        let c = &p.feature_map;
        let eval = PosteriorEval {
            mean,
            variance,
            mean_gradient: c.tr_mul(&grad_f),
        };
        if !curvature {
            return Ok(PosteriorCurvature {
                eval,
                mean_hessian: DMatrix::zeros(0, 0),
                variance_gradient: DVector::zeros(0),
            });
        }

        let mut hess_f = DMatrix::zeros(d, d);
        let mut var_grad_f = DVector::zeros(d);
        let mut wk_sum = 0.0;
        for i in 0..n {
            let wk = self.weights[i] * k[i];
            let col = scaled.column(i);
            hess_f.ger(wk, &col, &col, 1.0);
            wk_sum += wk;
            if raw_var > 0.0 {
                var_grad_f.axpy(2.0 * qk[i] * k[i], &col, 1.0);
            }
        }
        for r in 0..d {
            hess_f[(r, r)] -= wk_sum * inv_sq[r];
        }

        Ok(PosteriorCurvature {
            eval,
            mean_hessian: c.tr_mul(&(hess_f * c)),
            variance_gradient: c.tr_mul(&var_grad_f),
        })
    }
}

/// Cholesky factorization of `k + (base + jitter) I`, escalating the jitter
/// from `1e-10 * scale` by factors of ten up to `1e-4 * scale`.
pub(crate) fn cholesky_with_jitter(
    k: &DMatrix<f64>,
    base: f64,
    scale: f64,
    context: &str,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = JITTER_START * scale;
    while jitter <= JITTER_MAX * scale * (1.0 + 1e-9) {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += base + jitter;
        }
        if let Some(chol) = m.cholesky() {
            if chol.l_dirty().diagonal().iter().all(|p| *p > 0.0) {
                return Ok((chol, jitter));
            }
        }
        jitter *= 10.0;
    }
    let eig = k.clone().symmetric_eigenvalues();
    Err(Error::numerical(
        context,
        format!(
            "not positive definite after jitter {:.1e}: eigenvalues in [{:.3e}, {:.3e}], n = {}",
            JITTER_MAX * scale,
            eig.min(),
            eig.max(),
            k.nrows()
        ),
    ))
}

/// Exact GP posterior conditioned on a training set.
#[derive(Debug, Clone)]
pub struct GpModel {
    params: KernelParams,
    training: TrainingSet,
    columns: DMatrix<f64>,
    factor: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    jitter: f64,
}

pub fn fit(params: &KernelParams, training: &TrainingSet) -> Result<GpModel> {
    params.validate()?;
    let columns = params.feature_columns(training.inputs())?;
    if training.is_empty() {
        return Ok(GpModel {
            params: params.clone(),
            training: training.clone(),
            columns,
            factor: None,
            alpha: DVector::zeros(0),
            jitter: 0.0,
        });
    }
    let gram = params.gram(&columns);
    let (chol, jitter) = cholesky_with_jitter(
        &gram,
        params.noise_variance,
        params.prior_variance,
        "exact GP Gram matrix",
    )?;
    let y = DVector::from_column_slice(training.outputs());
    let alpha = chol.solve(&y);
    Ok(GpModel {
        params: params.clone(),
        training: training.clone(),
        columns,
        factor: Some(chol),
        alpha,
        jitter,
    })
}

impl GpModel {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    /// `(K_ZZ + (sigma_w^2 + jitter) I)^-1 y`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Diagonal jitter that made the Gram matrix factorizable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn basis(&self) -> Basis<'_> {
        Basis {
            params: &self.params,
            columns: &self.columns,
            weights: &self.alpha,
            quad: QuadForm::Cholesky(self.factor.as_ref()),
        }
    }
}

pub fn posterior_eval(model: &GpModel, z: &DVector<f64>) -> Result<PosteriorEval> {
    model.basis().evaluate(z, false).map(|c| c.eval)
}

impl Posterior for GpModel {
    fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    fn posterior(&self, z: &DVector<f64>) -> Result<PosteriorEval> {
        posterior_eval(self, z)
    }

    fn posterior_with_curvature(&self, z: &DVector<f64>) -> Result<PosteriorCurvature> {
        self.basis().evaluate(z, true)
    }
}

/// FITC sparse GP conditioned through `M` inducing inputs.
#[derive(Debug, Clone)]
pub struct SparseGpModel {
    params: KernelParams,
    inducing_inputs: Vec<DVector<f64>>,
    columns: DMatrix<f64>,
    weights: DVector<f64>,
    quad_pos: DMatrix<f64>,
    quad_neg: DMatrix<f64>,
    training_len: usize,
    jitter: f64,
}

pub fn fit_sparse(
    params: &KernelParams,
    training: &TrainingSet,
    inducing_inputs: &[DVector<f64>],
) -> Result<SparseGpModel> {
    params.validate()?;
    if inducing_inputs.is_empty() {
        return Err(Error::invalid("at least one inducing input is required"));
    }
    let u_cols = params.feature_columns(inducing_inputs)?;
    let m = u_cols.ncols();
    let kuu = params.gram(&u_cols);
    let (luu, jitter) =
        cholesky_with_jitter(&kuu, 0.0, params.prior_variance, "inducing Gram matrix")?;
    let l = luu.l();
    // W = L_uu^-1, so K_uu^-1 = W^T W
    let w_inv = l
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or_else(|| Error::numerical("inducing Gram matrix", "singular factor"))?;

    let n = training.len();
    let (weights, quad_pos, quad_neg) = if n == 0 {
        (DVector::zeros(m), DMatrix::zeros(m, m), DMatrix::zeros(m, m))
    } else {
        let f_cols = params.feature_columns(training.inputs())?;
        let kuf = params.cross(&u_cols, &f_cols);
        let v = &w_inv * &kuf;
        let y = DVector::from_column_slice(training.outputs());
        let lambda: DVector<f64> = DVector::from_fn(n, |i, _| {
            let q_ii = v.column(i).norm_squared();
            (params.prior_variance - q_ii).max(0.0) + params.noise_variance + jitter
        });

        // A = I + V Lambda^-1 V^T
        let mut v_scaled = v.clone();
        for i in 0..n {
            v_scaled.column_mut(i).scale_mut(1.0 / lambda[i]);
        }
        let mut a = &v_scaled * v.transpose();
        for i in 0..m {
            a[(i, i)] += 1.0;
        }
        let la = a
            .cholesky()
            .ok_or_else(|| Error::numerical("FITC inner matrix", "not positive definite"))?;
        let la_l = la.l();

        // weights = W^T A^-1 V Lambda^-1 y
        let rhs = &v_scaled * &y;
        let weights = w_inv.tr_mul(&la.solve(&rhs));

        // Q = W^T W - (La^-1 W)^T (La^-1 W)
        let lw = la_l
            .solve_lower_triangular(&w_inv)
            .ok_or_else(|| Error::numerical("FITC inner matrix", "singular factor"))?;
        (weights, w_inv, lw)
    };

    Ok(SparseGpModel {
        params: params.clone(),
        inducing_inputs: inducing_inputs.to_vec(),
        columns: u_cols,
        weights,
        quad_pos,
        quad_neg,
        training_len: n,
        jitter,
    })
}

impl SparseGpModel {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn inducing_inputs(&self) -> &[DVector<f64>] {
        &self.inducing_inputs
    }

    pub fn training_len(&self) -> usize {
        self.training_len
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Kernel evaluations performed by one posterior query (equals `M`).
    pub fn kernel_evaluations_per_query(&self) -> usize {
        self.columns.ncols()
    }

    fn basis(&self) -> Basis<'_> {
        Basis {
            params: &self.params,
            columns: &self.columns,
            weights: &self.weights,
            quad: QuadForm::Difference(&self.quad_pos, &self.quad_neg),
        }
    }
}

pub fn sparse_posterior_eval(model: &SparseGpModel, z: &DVector<f64>) -> Result<PosteriorEval> {
    model.basis().evaluate(z, false).map(|c| c.eval)
}

impl Posterior for SparseGpModel {
    fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    fn posterior(&self, z: &DVector<f64>) -> Result<PosteriorEval> {
        sparse_posterior_eval(self, z)
    }

    fn posterior_with_curvature(&self, z: &DVector<f64>) -> Result<PosteriorCurvature> {
        self.basis().evaluate(z, true)
    }
}
