//! The noise-predictor abstraction and the analytic predictors used for
//! desk-scale verification.
//!
//! A predictor estimates the noise component of a latent at a given time; in
//! a full diffusion stack this is the trained denoising network. Here three
//! implementations stand in for it:
//!
//! * [`ToyShiftedGaussian`] — the constant-in-z field of the shifted-Gaussian
//!   probability-flow ODE, `-a * exp(-t)`, whose implicit inverse step is
//!   exact after one renoising iteration.
//! * [`LinearPredictor`] — `z -> M z`, making the Jacobian of the renoising
//!   map exactly `M` so every contraction quantity has a closed form.
//! * [`SeededNonlinear`] — a fixed random feature map with a smooth,
//!   non-trivial Jacobian, the desk-scale surrogate for a real network.

use crate::error::{CoreError, Result};
use crate::latent::Latent;
use crate::rng::{sample_gaussian, RngState};
use std::sync::atomic::{AtomicU64, Ordering};

/// Opaque conditioning tag. The engine only ever compares it; predictors may
/// interpret it or ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum ConditioningRef {
    #[default]
    Unconditioned,
    Tag(String),
    Id(u64),
}

/// Behavior contract for noise predictors.
///
/// `evaluate` must be deterministic in `(z, t, c)` and preserve shape.
/// `jvp`/`vjp` default to central finite differences; predictors with an
/// analytic Jacobian override them.
pub trait NoisePredictor {
    fn evaluate(&self, z: &Latent, t: f64, c: &ConditioningRef) -> Result<Latent>;

    /// Jacobian-vector product d(evaluate)/dz * direction.
    fn jvp(
        &self,
        z: &Latent,
        t: f64,
        c: &ConditioningRef,
        direction: &Latent,
        fd_epsilon: f64,
    ) -> Result<Latent> {
        z.same_shape(direction)?;
        if !(fd_epsilon > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "fd_epsilon must be positive, got {fd_epsilon}"
            )));
        }
        let plus = self.evaluate(&z.add_scaled(direction, fd_epsilon)?, t, c)?;
        let minus = self.evaluate(&z.add_scaled(direction, -fd_epsilon)?, t, c)?;
        let out = plus.sub(&minus)?.scale(0.5 / fd_epsilon);
        if !out.is_finite() {
            return Err(CoreError::JvpOverflow);
        }
        Ok(out)
    }

    /// Vector-Jacobian product (d(evaluate)/dz)^T * direction.
    ///
    /// The default differentiates the scalar `<evaluate(z), direction>`
    /// coordinate by coordinate: 2n evaluations, fine at desk scale.
    fn vjp(
        &self,
        z: &Latent,
        t: f64,
        c: &ConditioningRef,
        direction: &Latent,
        fd_epsilon: f64,
    ) -> Result<Latent> {
        z.same_shape(direction)?;
        if !(fd_epsilon > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "fd_epsilon must be positive, got {fd_epsilon}"
            )));
        }
        let mut grad = vec![0.0; z.len()];
        let mut probe = z.clone();
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + fd_epsilon;
            let plus = self.evaluate(&probe, t, c)?.dot(direction)?;
            probe.data_mut()[i] = orig - fd_epsilon;
            let minus = self.evaluate(&probe, t, c)?.dot(direction)?;
            probe.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * fd_epsilon);
        }
        let out = Latent::new(z.shape().to_vec(), grad)?;
        if !out.is_finite() {
            return Err(CoreError::JvpOverflow);
        }
        Ok(out)
    }
}

/// Default finite-difference scale: balances truncation against roundoff at
/// 64-bit precision.
pub fn default_fd_epsilon(z: &Latent) -> f64 {
    1e-5 * (1.0 + z.linf_norm())
}

/// Free-function form of the JVP, matching the engine's calling convention.
pub fn predictor_jvp(
    predictor: &dyn NoisePredictor,
    z: &Latent,
    t: f64,
    c: &ConditioningRef,
    direction: &Latent,
    fd_epsilon: f64,
) -> Result<Latent> {
    predictor.jvp(z, t, c, direction, fd_epsilon)
}

// --- toy shifted-Gaussian ----------------------------------------------------

/// Parameters of the shifted-Gaussian ODE field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyShiftedGaussianParams {
    /// Distribution shift; must be nonzero.
    pub a: f64,
}

impl ToyShiftedGaussianParams {
    pub fn new(a: f64) -> Result<Self> {
        if a == 0.0 || !a.is_finite() {
            return Err(CoreError::InvalidConfig(
                "shift a must be nonzero and finite".into(),
            ));
        }
        Ok(Self { a })
    }
}

/// `evaluate(z, t) = -a * exp(-t)`, broadcast to z's shape. Independent of z,
/// so the Jacobian is identically zero and a single renoising iteration lands
/// on the exact pre-image.
#[derive(Debug, Clone, Copy)]
pub struct ToyShiftedGaussian {
    params: ToyShiftedGaussianParams,
}

impl ToyShiftedGaussian {
    pub fn new(params: ToyShiftedGaussianParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> ToyShiftedGaussianParams {
        self.params
    }
}

impl NoisePredictor for ToyShiftedGaussian {
    fn evaluate(&self, z: &Latent, t: f64, _c: &ConditioningRef) -> Result<Latent> {
        Latent::splat(z.shape().to_vec(), -self.params.a * (-t).exp())
    }

    fn jvp(
        &self,
        z: &Latent,
        _t: f64,
        _c: &ConditioningRef,
        direction: &Latent,
        _fd_epsilon: f64,
    ) -> Result<Latent> {
        z.same_shape(direction)?;
        Latent::zeros(z.shape().to_vec())
    }

    fn vjp(
        &self,
        z: &Latent,
        _t: f64,
        _c: &ConditioningRef,
        direction: &Latent,
        _fd_epsilon: f64,
    ) -> Result<Latent> {
        z.same_shape(direction)?;
        Latent::zeros(z.shape().to_vec())
    }
}

// --- linear predictor ---------------------------------------------------------

/// Dense square matrix applied to the flattened latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictorParams {
    dim: usize,
    /// Row-major `dim * dim` entries.
    matrix: Vec<f64>,
}

impl LinearPredictorParams {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if dim == 0 || matrix.len() != dim * dim {
            return Err(CoreError::InvalidConfig(format!(
                "matrix must be {dim}x{dim}, got {} entries",
                matrix.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidConfig(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { dim, matrix })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut flat = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(CoreError::InvalidConfig(format!(
                    "matrix row has {} entries, expected {dim}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        Self::new(dim, flat)
    }

    /// `scale * I` of the given dimension.
    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = scale;
        }
        Self::new(dim, m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// `evaluate(z) = M z` on the flattened latent; time and conditioning are
/// ignored.
#[derive(Debug, Clone)]
pub struct LinearPredictor {
    params: LinearPredictorParams,
}

impl LinearPredictor {
    pub fn new(params: LinearPredictorParams) -> Self {
        Self { params }
    }

    fn apply(&self, z: &Latent, transpose: bool) -> Result<Latent> {
        let n = self.params.dim;
        if z.len() != n {
            return Err(CoreError::DimensionMismatch {
                matrix: n,
                latent: z.len(),
            });
        }
        let m = &self.params.matrix;
        let x = z.data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let entry = if transpose { m[j * n + i] } else { m[i * n + j] };
                acc += entry * x[j];
            }
            out[i] = acc;
        }
        Latent::new(z.shape().to_vec(), out)
    }
}

impl NoisePredictor for LinearPredictor {
    fn evaluate(&self, z: &Latent, _t: f64, _c: &ConditioningRef) -> Result<Latent> {
        self.apply(z, false)
    }

    fn jvp(
        &self,
        z: &Latent,
        _t: f64,
        _c: &ConditioningRef,
        direction: &Latent,
        _fd_epsilon: f64,
    ) -> Result<Latent> {
        z.same_shape(direction)?;
        self.apply(direction, false)
    }

    fn vjp(
        &self,
        z: &Latent,
        _t: f64,
        _c: &ConditioningRef,
        direction: &Latent,
        _fd_epsilon: f64,
    ) -> Result<Latent> {
        z.same_shape(direction)?;
        self.apply(direction, true)
    }
}

// --- seeded nonlinear surrogate ------------------------------------------------

/// Parameters of the seeded random feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeededNonlinearParams {
    pub seed: u64,
    /// Hidden width of the feature map.
    pub width: usize,
    /// Scales the output layer; the Jacobian norm grows roughly linearly
    /// with it.
    pub smoothness: f64,
}

impl SeededNonlinearParams {
    pub fn new(seed: u64, width: usize, smoothness: f64) -> Result<Self> {
        if width == 0 {
            return Err(CoreError::InvalidConfig("width must be positive".into()));
        }
        if !(smoothness > 0.0) || !smoothness.is_finite() {
            return Err(CoreError::InvalidConfig(
                "smoothness scale must be positive".into(),
            ));
        }
        Ok(Self {
            seed,
            width,
            smoothness,
        })
    }
}

/// `evaluate(z, t) = A tanh(B z + b g(t))` with seeded weights and a smooth
/// scalar time embedding g. Identical seeds rebuild the identical function;
/// same-platform runs reproduce bitwise, cross-platform agreement is limited
/// only by libm transcendentals.
///
/// Weights are drawn once per latent dimension at first use and cached, so a
/// single instance serves latents of any size.
#[derive(Debug)]
pub struct SeededNonlinear {
    params: SeededNonlinearParams,
    cache: std::sync::Mutex<std::collections::HashMap<usize, SeededWeights>>,
}

#[derive(Debug, Clone)]
struct SeededWeights {
    /// width x dim
    feature: Vec<f64>,
    /// dim x width
    output: Vec<f64>,
    /// width
    bias: Vec<f64>,
}

impl SeededNonlinear {
    pub fn new(params: SeededNonlinearParams) -> Self {
        Self {
            params,
            cache: std::sync::Mutex::new(std::collections::HashMap::new()),
        }
    }

    pub fn params(&self) -> SeededNonlinearParams {
        self.params
    }

    fn weights_for(&self, dim: usize) -> SeededWeights {
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(dim)
            .or_insert_with(|| {
                let w = self.params.width;
                let mut rng = RngState::new(
                    self.params.seed ^ (dim as u64).wrapping_mul(0xA24B_AED4_963E_E407),
                );
                let feature = sample_gaussian(&mut rng, &[w * dim])
                    .expect("nonzero dims")
                    .scale(1.0 / (dim as f64).sqrt());
                let output = sample_gaussian(&mut rng, &[dim * w])
                    .expect("nonzero dims")
                    .scale(self.params.smoothness / (w as f64).sqrt());
                let bias = sample_gaussian(&mut rng, &[w]).expect("nonzero dims");
                SeededWeights {
                    feature: feature.data().to_vec(),
                    output: output.data().to_vec(),
                    bias: bias.data().to_vec(),
                }
            })
            .clone()
    }

    fn time_embedding(t: f64) -> f64 {
        (0.7 * t).sin() + 0.3 * (0.31 * t).cos()
    }

    /// Pre-activation `B z + b g(t)`.
    fn pre_activation(&self, w: &SeededWeights, z: &Latent, t: f64) -> Vec<f64> {
        let dim = z.len();
        let width = self.params.width;
        let g = Self::time_embedding(t);
        let mut u = vec![0.0; width];
        for (i, slot) in u.iter_mut().enumerate() {
            let row = &w.feature[i * dim..(i + 1) * dim];
            let mut acc = w.bias[i] * g;
            for (wj, zj) in row.iter().zip(z.data()) {
                acc += wj * zj;
            }
            *slot = acc;
        }
        u
    }
}

impl NoisePredictor for SeededNonlinear {
    fn evaluate(&self, z: &Latent, t: f64, _c: &ConditioningRef) -> Result<Latent> {
        let dim = z.len();
        let w = self.weights_for(dim);
        let u = self.pre_activation(&w, z, t);
        let width = self.params.width;
        let mut out = vec![0.0; dim];
        let h: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
        for (i, slot) in out.iter_mut().enumerate() {
            let row = &w.output[i * width..(i + 1) * width];
            *slot = row.iter().zip(&h).map(|(a, b)| a * b).sum();
        }
        Latent::new(z.shape().to_vec(), out)
    }
}

// --- counting wrapper ----------------------------------------------------------

/// Wraps a predictor and counts `evaluate` invocations. The inversion engine
/// uses one internally for its operation budget; tests wrap again to verify
/// the reported count externally.
pub struct CountingPredictor<'a> {
    inner: &'a dyn NoisePredictor,
    evaluations: AtomicU64,
}

impl<'a> CountingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        Self {
            inner,
            evaluations: AtomicU64::new(0),
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }
}

impl NoisePredictor for CountingPredictor<'_> {
    fn evaluate(&self, z: &Latent, t: f64, c: &ConditioningRef) -> Result<Latent> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(z, t, c)
    }

    fn jvp(
        &self,
        z: &Latent,
        t: f64,
        c: &ConditioningRef,
        direction: &Latent,
        fd_epsilon: f64,
    ) -> Result<Latent> {
        self.inner.jvp(z, t, c, direction, fd_epsilon)
    }

    fn vjp(
        &self,
        z: &Latent,
        t: f64,
        c: &ConditioningRef,
        direction: &Latent,
        fd_epsilon: f64,
    ) -> Result<Latent> {
        self.inner.vjp(z, t, c, direction, fd_epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: ConditioningRef = ConditioningRef::Unconditioned;

    #[test]
    fn toy_field_values() {
        let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(1.0).unwrap());
        let z = Latent::scalar(2.0);
        assert_eq!(toy.evaluate(&z, 0.0, &C).unwrap().data(), &[-1.0]);

        let v = toy.evaluate(&z, 0.1, &C).unwrap().data()[0];
        assert!((v - (-0.90483742)).abs() < 1e-8);

        let toy2 = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(2.0).unwrap());
        let z3 = Latent::zeros(vec![3]).unwrap();
        assert_eq!(toy2.evaluate(&z3, 0.0, &C).unwrap().data(), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn toy_is_independent_of_z() {
        let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(1.5).unwrap());
        let z1 = Latent::new(vec![2], vec![5.0, -3.0]).unwrap();
        let z2 = Latent::new(vec![2], vec![0.0, 100.0]).unwrap();
        assert_eq!(
            toy.evaluate(&z1, 0.3, &C).unwrap().data(),
            toy.evaluate(&z2, 0.3, &C).unwrap().data()
        );
    }

    #[test]
    fn toy_rejects_zero_shift() {
        assert!(ToyShiftedGaussianParams::new(0.0).is_err());
    }

    #[test]
    fn linear_evaluate() {
        let ident = LinearPredictor::new(LinearPredictorParams::scaled_identity(2, 1.0).unwrap());
        let z = Latent::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(ident.evaluate(&z, 0.0, &C).unwrap().data(), &[3.0, 4.0]);

        let half = LinearPredictor::new(LinearPredictorParams::new(1, vec![0.5]).unwrap());
        let z1 = Latent::scalar(2.0);
        assert_eq!(half.evaluate(&z1, 0.0, &C).unwrap().data(), &[1.0]);

        let perm =
            LinearPredictor::new(LinearPredictorParams::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        let z2 = Latent::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(perm.evaluate(&z2, 0.0, &C).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn linear_dimension_mismatch() {
        let p = LinearPredictor::new(LinearPredictorParams::scaled_identity(2, 1.0).unwrap());
        let z = Latent::zeros(vec![3]).unwrap();
        assert!(matches!(
            p.evaluate(&z, 0.0, &C),
            Err(CoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_jvp_is_exact() {
        let m = LinearPredictorParams::from_rows(&[vec![0.2, -0.4], vec![0.7, 0.1]]).unwrap();
        let p = LinearPredictor::new(m);
        let z = Latent::new(vec![2], vec![10.0, -3.0]).unwrap();
        let v = Latent::new(vec![2], vec![1.0, 2.0]).unwrap();
        let jv = predictor_jvp(&p, &z, 0.0, &C, &v, 1e-5).unwrap();
        let expect = [0.2 - 0.8, 0.7 + 0.2];
        for (a, b) in jv.data().iter().zip(expect) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn toy_jvp_is_zero() {
        let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(1.0).unwrap());
        let z = Latent::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = Latent::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let jv = predictor_jvp(&toy, &z, 0.5, &C, &v, 1e-5).unwrap();
        assert_eq!(jv.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn seeded_nonlinear_reproducible() {
        let params = SeededNonlinearParams::new(11, 16, 0.5).unwrap();
        let p1 = SeededNonlinear::new(params);
        let p2 = SeededNonlinear::new(params);
        let z = Latent::new(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let a = p1.evaluate(&z, 0.7, &C).unwrap();
        let b = p2.evaluate(&z, 0.7, &C).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn seeded_nonlinear_fd_jvp_matches_forward_difference() {
        // central-difference JVP (the default) against an independent
        // forward-difference stencil
        let p = SeededNonlinear::new(SeededNonlinearParams::new(3, 24, 0.5).unwrap());
        let mut rng = RngState::new(99);
        let z = sample_gaussian(&mut rng, &[6]).unwrap();
        let raw = sample_gaussian(&mut rng, &[6]).unwrap();
        let v = raw.scale(1.0 / raw.l2_norm());

        let eps = 1e-6 * (1.0 + z.linf_norm());
        let central = p.jvp(&z, 0.2, &C, &v, eps).unwrap();

        let f0 = p.evaluate(&z, 0.2, &C).unwrap();
        let f1 = p.evaluate(&z.add_scaled(&v, eps).unwrap(), 0.2, &C).unwrap();
        let forward = f1.sub(&f0).unwrap().scale(1.0 / eps);

        let rel = central.sub(&forward).unwrap().l2_norm() / central.l2_norm();
        assert!(rel < 1e-5, "stencil disagreement {rel}");
    }

    #[test]
    fn counting_wrapper_counts() {
        let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(1.0).unwrap());
        let counter = CountingPredictor::new(&toy);
        let z = Latent::scalar(1.0);
        for _ in 0..5 {
            counter.evaluate(&z, 0.0, &C).unwrap();
        }
        assert_eq!(counter.evaluations(), 5);
    }
}
