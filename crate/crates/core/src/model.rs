//! Channel model: transmission matrices, noisy transmission and synthetic datasets.
//!
//! A channel maps `w × w` input intensities onto `w × w` output intensities through a
//! dense matrix plus independent Gaussian noise per output channel:
//!
//! ```text
//! out[γ] = Σ_α T[γ, α] · in[α] + σ[γ] · ε[γ],   ε ~ N(0, 1)
//! ```
//!
//! The concatenation `[in, out]` of one sample is the site vector on which the
//! pseudolikelihood is defined; sites `0..n_half` are inputs and `n_half..n` outputs.

use ndarray::{s, Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Real;

/// Frame geometry: `w` pixels per side on both fiber ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    w: usize,
}

impl Dimensions {
    pub fn new(w: usize) -> Result<Self> {
        if w < 2 {
            return Err(Error::InvalidArgument(format!("frame side must be >= 2, got {w}")));
        }
        Ok(Self { w })
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Channels per side, `w²`.
    pub fn n_half(&self) -> usize {
        self.w * self.w
    }

    /// Total number of sites, `2w²`.
    pub fn n(&self) -> usize {
        2 * self.n_half()
    }

    pub fn is_input_site(&self, site: usize) -> bool {
        site < self.n_half()
    }

    /// Site index of output channel `gamma`.
    pub fn output_site(&self, gamma: usize) -> usize {
        self.n_half() + gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Direct,
    Inverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMatrix<S: Real> {
    pub dims: Dimensions,
    pub entries: Array2<S>,
    pub role: Role,
}

impl<S: Real> TransmissionMatrix<S> {
    pub fn new(dims: Dimensions, entries: Array2<S>, role: Role) -> Result<Self> {
        let n = dims.n_half();
        if entries.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("transmission matrix has non-finite entries".into()));
        }
        Ok(Self { dims, entries, role })
    }

    pub fn identity(dims: Dimensions) -> Self {
        Self {
            dims,
            entries: Array2::eye(dims.n_half()),
            role: Role::Direct,
        }
    }

    pub fn nonzero_count(&self) -> usize {
        self.entries.iter().filter(|v| !v.is_zero()).count()
    }

    /// Boolean support pattern, row-major.
    pub fn support(&self) -> Array2<bool> {
        self.entries.mapv(|v| !v.is_zero())
    }

    pub fn cast<T: Real>(&self) -> TransmissionMatrix<T> {
        TransmissionMatrix {
            dims: self.dims,
            entries: self.entries.mapv(|v| T::lit(v.as_f64())),
            role: self.role,
        }
    }
}

/// Per-channel standard deviation of the additive output noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: Vec<f64>,
}

impl NoiseSpec {
    pub fn homogeneous(sigma: f64, n_half: usize) -> Result<Self> {
        Self::per_channel(vec![sigma; n_half])
    }

    pub fn per_channel(sigma: Vec<f64>) -> Result<Self> {
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidArgument("noise levels must be finite and >= 0".into()));
        }
        Ok(Self { sigma })
    }

    pub fn noiseless(n_half: usize) -> Self {
        Self {
            sigma: vec![0.0; n_half],
        }
    }

    /// Single noise level when homogeneous.
    pub fn scalar(&self) -> Option<f64> {
        let first = *self.sigma.first()?;
        self.sigma.iter().all(|&s| s == first).then_some(first)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S: Real> {
    pub input: Vec<S>,
    pub output: Vec<S>,
}

impl<S: Real> Sample<S> {
    /// Site vector `[input, output]`.
    pub fn sites(&self) -> Vec<S> {
        self.input.iter().chain(self.output.iter()).copied().collect()
    }

    pub fn swapped(&self) -> Self {
        Self {
            input: self.output.clone(),
            output: self.input.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub sigma: Vec<f64>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S: Real> {
    pub dims: Dimensions,
    pub samples: Vec<Sample<S>>,
    pub direction: Direction,
    pub meta: DatasetMeta,
}

impl<S: Real> Dataset<S> {
    pub fn new(
        dims: Dimensions,
        samples: Vec<Sample<S>>,
        direction: Direction,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        let n = dims.n_half();
        for s in &samples {
            for v in [&s.input, &s.output] {
                if v.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArgument("sample has non-finite values".into()));
                }
            }
        }
        Ok(Self {
            dims,
            samples,
            direction,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `M × n` matrix of site vectors, one sample per row.
    pub fn site_matrix(&self) -> Array2<S> {
        let n_half = self.dims.n_half();
        let mut out = Array2::zeros((self.len(), self.dims.n()));
        for (mut row, s) in out.outer_iter_mut().zip(&self.samples) {
            row.slice_mut(s![..n_half]).assign(&Array1::from(s.input.clone()));
            row.slice_mut(s![n_half..]).assign(&Array1::from(s.output.clone()));
        }
        out
    }

    /// Content hash over direction and every value (as `f64` bits), hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self.direction {
            Direction::Forward => b"forward".as_slice(),
            Direction::Reversed => b"reversed".as_slice(),
        });
        h.update((self.dims.w() as u64).to_le_bytes());
        for s in &self.samples {
            for v in s.input.iter().chain(&s.output) {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn cast<T: Real>(&self) -> Dataset<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::lit(x.as_f64())).collect();
        Dataset {
            dims: self.dims,
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    input: conv(&s.input),
                    output: conv(&s.output),
                })
                .collect(),
            direction: self.direction,
            meta: self.meta.clone(),
        }
    }
}

/// Builds a sparse row-stochastic channel: each entry is switched on with probability
/// `density`, and every row is then divided by its number of active entries.
pub fn build_random_tm<S: Real>(
    dims: Dimensions,
    density: f64,
    seed: u64,
) -> Result<TransmissionMatrix<S>> {
    let n = dims.n_half();
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!("density must lie in (0, 1], got {density}")));
    }
    if density * (n as f64) < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "density {density} leaves rows of length {n} with less than one expected activation"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut active = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() < density);
    for mut row in active.outer_iter_mut() {
        if !row.iter().any(|&b| b) {
            let j = rng.random_range(0..n);
            row[j] = true;
        }
    }
    let mut entries = Array2::<S>::zeros((n, n));
    for (mut out, row) in entries.outer_iter_mut().zip(active.outer_iter()) {
        let count = row.iter().filter(|&&b| b).count();
        let value = S::one() / S::from_usize_lossy(count);
        for (o, &b) in out.iter_mut().zip(row.iter()) {
            if b {
                *o = value;
            }
        }
    }
    TransmissionMatrix::new(dims, entries, Role::Direct)
}

/// Noiseless part of the channel response, `T · input`.
pub fn propagate<S: Real>(tm: &TransmissionMatrix<S>, input: &[S]) -> Result<Vec<S>> {
    let n = tm.dims.n_half();
    if input.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: input.len(),
        });
    }
    Ok(tm
        .entries
        .outer_iter()
        .map(|row| row.iter().zip(input).fold(S::zero(), |acc, (&t, &x)| acc + t * x))
        .collect())
}

/// Sends `input` through the channel, drawing one standard normal per output channel
/// from `rng` (channel order). Outputs are not clamped.
pub fn transmit<S: Real>(
    tm: &TransmissionMatrix<S>,
    input: &[S],
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<Vec<S>> {
    let n = tm.dims.n_half();
    if noise.sigma.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: noise.sigma.len(),
        });
    }
    let mut out = propagate(tm, input)?;
    for (o, &sigma) in out.iter_mut().zip(&noise.sigma) {
        let eps: f64 = rng.sample(StandardNormal);
        *o += S::lit(sigma * eps);
    }
    Ok(out)
}

/// Draws `m_samples` uniform inputs on `[0, 1]` (all inputs first, sample-major), then
/// transmits each through the channel in sample order.
pub fn generate_dataset<S: Real>(
    tm: &TransmissionMatrix<S>,
    m_samples: usize,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset<S>> {
    if m_samples == 0 {
        return Err(Error::InvalidArgument("m_samples must be >= 1".into()));
    }
    let n = tm.dims.n_half();
    let mut rng = rng_from_seed(seed);
    let inputs: Vec<Vec<S>> = (0..m_samples)
        .map(|_| (0..n).map(|_| S::lit(rng.random::<f64>())).collect())
        .collect();
    let samples = inputs
        .into_iter()
        .map(|input| {
            let output = transmit(tm, &input, noise, &mut rng)?;
            Ok(Sample { input, output })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        tm.dims,
        samples,
        Direction::Forward,
        DatasetMeta {
            seed,
            sigma: noise.sigma.clone(),
            source: "synthetic".into(),
        },
    )
}

/// Swaps the roles of input and output in every sample.
pub fn reverse_dataset<S: Real>(ds: &Dataset<S>) -> Result<Dataset<S>> {
    if ds.direction == Direction::Reversed {
        return Err(Error::AlreadyReversed);
    }
    Ok(Dataset {
        dims: ds.dims,
        samples: ds.samples.iter().map(Sample::swapped).collect(),
        direction: Direction::Reversed,
        meta: ds.meta.clone(),
    })
}

/// Coupling matrix of the quadratic input/output energy,
///
/// ```text
/// J = [ -U   2Tᵀ ]      U = TᵀT
///     [ 2T   -I  ]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthCoupling<S: Real> {
    pub dims: Dimensions,
    pub j: Array2<S>,
}

impl<S: Real> GroundTruthCoupling<S> {
    pub fn gramian(&self) -> Array2<S> {
        let n = self.dims.n_half();
        self.j.slice(s![..n, ..n]).mapv(|v| -v)
    }

    /// Per-site coupling fields in units of `1/β`: the coefficients `K_ij / β` each
    /// site sees in its own conditional density. Off-diagonal pairs inside the input
    /// block appear twice in the energy, so those entries are doubled relative to `J`.
    pub fn site_couplings(&self) -> Array2<S> {
        let n = self.dims.n_half();
        let mut out = self.j.clone();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    out[[a, b]] *= S::two();
                }
            }
        }
        out
    }
}

pub fn assemble_ground_truth_coupling<S: Real>(
    tm: &TransmissionMatrix<S>,
) -> Result<GroundTruthCoupling<S>> {
    if tm.role != Role::Direct {
        return Err(Error::InvalidArgument("ground-truth coupling needs a direct matrix".into()));
    }
    let n = tm.dims.n_half();
    let t = &tm.entries;
    let u = t.t().dot(t);
    let mut j = Array2::<S>::zeros((2 * n, 2 * n));
    j.slice_mut(s![..n, ..n]).assign(&u.mapv(|v| -v));
    j.slice_mut(s![..n, n..]).assign(&t.t().mapv(|v| v * S::two()));
    j.slice_mut(s![n.., ..n]).assign(&t.mapv(|v| v * S::two()));
    for g in 0..n {
        j[[n + g, n + g]] = -S::one();
    }
    // Floating-point products in U are not guaranteed symmetric bit-for-bit.
    for a in 0..n {
        for b in (a + 1)..n {
            j[[b, a]] = j[[a, b]];
        }
    }
    Ok(GroundTruthCoupling { dims: tm.dims, j })
}
