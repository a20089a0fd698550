//! Linear dynamical system models and ground-truth simulation.
//!
//! The generative model is
//!
//! ```text
//! x_{t+1} = F x_t + m_t,   m_t ~ N(0, Π)
//! y_t     = H x_t + n_t,   n_t ~ N(0, Σ)
//! ```
//!
//! with `m_t` and `n_t` independent. Simulation is driven by [`NoiseStreams`],
//! a single seed expanded into separate ChaCha streams for the initial state,
//! the process noise and the observation noise. Each stream is consumed only
//! by its own noise source, so truncating or extending the horizon never
//! shifts the draws of the other source.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{check_len, check_shape, check_square, max_asymmetry, min_eigenvalue};

/// Tolerance for symmetry and PSD checks on model covariances.
pub const MODEL_TOL: f64 = 1e-12;

/// Time-invariant linear Gaussian state-space model.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsModel {
    /// State transition `F` (n x n).
    pub f: DMatrix<f64>,
    /// Observation matrix `H` (p x n).
    pub h: DMatrix<f64>,
    /// Process-noise covariance `Π` (n x n).
    pub pi: DMatrix<f64>,
    /// Observation-noise covariance `Σ` (p x p).
    pub sigma: DMatrix<f64>,
}

impl LdsModel {
    /// Builds a model, checking only that the shapes agree.
    pub fn new(
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        pi: DMatrix<f64>,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let model = Self { f, h, pi, sigma };
        model.check_dimensions()?;
        Ok(model)
    }

    /// Hidden dimension `n`.
    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    /// Observation dimension `p`.
    pub fn p(&self) -> usize {
        self.h.nrows()
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let n = self.f.nrows();
        if n == 0 {
            return Err(Error::DimensionMismatch("F must be non-empty".into()));
        }
        check_square("F", &self.f, n)?;
        let p = self.h.nrows();
        if p == 0 {
            return Err(Error::DimensionMismatch("H must have at least one row".into()));
        }
        check_shape("H", &self.h, p, n)?;
        check_square("Pi", &self.pi, n)?;
        check_square("Sigma", &self.sigma, p)?;
        Ok(())
    }
}

/// Checks every model invariant and hands the model back unchanged.
///
/// `Π` and `Σ` must be symmetric to [`MODEL_TOL`] and PSD (smallest eigenvalue
/// `>= -MODEL_TOL`); `Σ` must additionally be strictly positive definite
/// because the gain computation inverts `H M H^T + Σ`.
pub fn validate_model(model: LdsModel) -> Result<LdsModel> {
    model.check_dimensions()?;
    check_psd("Pi", &model.pi)?;
    check_psd("Sigma", &model.sigma)?;
    let sigma_min = min_eigenvalue(&model.sigma);
    if sigma_min <= 0.0 {
        return Err(Error::SigmaSingular { min_eigenvalue: sigma_min });
    }
    Ok(model)
}

pub(crate) fn check_psd(name: &str, a: &DMatrix<f64>) -> Result<()> {
    let asymmetry = max_asymmetry(a);
    if asymmetry > MODEL_TOL {
        return Err(Error::NotSymmetric { name: name.into(), asymmetry });
    }
    let min_eigenvalue = min_eigenvalue(a);
    if min_eigenvalue < -MODEL_TOL {
        return Err(Error::NotPsd { name: name.into(), min_eigenvalue });
    }
    Ok(())
}

/// Seeded noise source with independent sub-streams.
///
/// Stream ids: 0 initial state, 1 process noise, 2 observation noise.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    pub initial: ChaCha20Rng,
    pub process: ChaCha20Rng,
    pub observation: ChaCha20Rng,
}

impl NoiseStreams {
    pub const INITIAL_STREAM: u64 = 0;
    pub const PROCESS_STREAM: u64 = 1;
    pub const OBSERVATION_STREAM: u64 = 2;

    pub fn new(seed: u64) -> Self {
        let stream = |id| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            initial: stream(Self::INITIAL_STREAM),
            process: stream(Self::PROCESS_STREAM),
            observation: stream(Self::OBSERVATION_STREAM),
        }
    }
}

/// Zero-mean Gaussian sampler for a PSD covariance.
///
/// The covariance is factored once as `V diag(sqrt(λ)) ` from its symmetric
/// eigendecomposition, with eigenvalues in `[-1e-12, 0)` clipped to zero, so
/// rank-deficient covariances are accepted.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        check_square("covariance", cov, cov.nrows())?;
        check_psd("covariance", cov)?;
        let dim = cov.nrows();
        if dim == 0 {
            return Ok(Self { factor: DMatrix::zeros(0, 0) });
        }
        let eig = crate::linalg::symmetrize(cov).symmetric_eigen();
        let mut factor = eig.eigenvectors.clone();
        for (j, lambda) in eig.eigenvalues.iter().enumerate() {
            let scale = lambda.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(scale);
        }
        Ok(Self { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.factor.ncols(),
            (0..self.factor.ncols()).map(|_| StandardNormal.sample(rng)),
        );
        &self.factor * z
    }
}

/// One zero-mean draw with covariance `cov`.
pub fn sample_gaussian<R: rand::Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Ok(GaussianSampler::new(cov)?.sample(rng))
}

/// Ground-truth hidden states and observations of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0 .. x_{T-1}`.
    pub states: Vec<DVector<f64>>,
    /// `y_0 .. y_{T-1}`, with `y_t = H x_t + n_t`.
    pub observations: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Simulates `steps` time steps of the model.
///
/// `x0 = None` draws the initial state from `N(0, I)` on the initial-state
/// stream. The model needs consistent shapes and PSD noise covariances; `Σ`
/// may be singular here (noiseless observations).
pub fn simulate(
    model: &LdsModel,
    steps: usize,
    seed: u64,
    x0: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    model.check_dimensions()?;
    if steps == 0 {
        return Err(Error::InvalidArgument("simulation horizon must be >= 1".into()));
    }
    let process = GaussianSampler::new(&model.pi).map_err(|e| rename_cov(e, "Pi"))?;
    let observation = GaussianSampler::new(&model.sigma).map_err(|e| rename_cov(e, "Sigma"))?;
    let mut streams = NoiseStreams::new(seed);

    let mut x = match x0 {
        Some(v) => {
            check_len("x0", v, model.n())?;
            v.clone()
        }
        None => DVector::from_iterator(
            model.n(),
            (0..model.n()).map(|_| StandardNormal.sample(&mut streams.initial)),
        ),
    };

    let mut states = Vec::with_capacity(steps);
    let mut observations = Vec::with_capacity(steps);
    for t in 0..steps {
        let y = &model.h * &x + observation.sample(&mut streams.observation);
        observations.push(y);
        if t + 1 < steps {
            let next = &model.f * &x + process.sample(&mut streams.process);
            states.push(std::mem::replace(&mut x, next));
        } else {
            states.push(x.clone());
        }
    }
    Ok(Trajectory { states, observations, seed })
}

fn rename_cov(err: Error, name: &str) -> Error {
    match err {
        Error::NotSymmetric { asymmetry, .. } => Error::NotSymmetric { name: name.into(), asymmetry },
        Error::NotPsd { min_eigenvalue, .. } => Error::NotPsd { name: name.into(), min_eigenvalue },
        other => other,
    }
}
