//! Synthetic calibration activations and the layer Hessian `H = XᵀX`.
//!
//! The generator draws `Z` with i.i.d. standard normal entries and returns
//! `X = Z · diag(√λ) · Qᵀ`, where `λ_k = (k+1)^(−exponent)` (the first
//! `outlier_directions` entries multiplied by `outlier_gain`) and `Q` is a
//! Haar-random orthogonal matrix. Both `Q`'s Gaussian seed matrix and `Z`
//! are drawn row-major from one [`crate::rng::stream`] keyed by the seed,
//! `Q`'s entries first.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// `n × d_in` activations feeding one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationMatrix {
    x: DMatrix<f64>,
}

impl CalibrationMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Shape("calibration matrix needs at least one sample".into()));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(CalibrationMatrix { x })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }
}

/// Symmetric `d_in × d_in` Hessian with the damping and clipping that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Hessian {
    matrix: DMatrix<f64>,
    damping: f64,
    clip_fraction: f64,
}

impl Hessian {
    /// Wraps an explicit matrix. It must be square, finite and exactly symmetric.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let d = matrix.nrows();
        if d == 0 || matrix.ncols() != d {
            return Err(Error::Shape(format!(
                "hessian must be square and nonempty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if let Some(index) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if matrix[(i, j)] != matrix[(j, i)] {
                    return Err(Error::Shape(format!("hessian not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Hessian {
            matrix,
            damping: 0.0,
            clip_fraction: 0.0,
        })
    }

    pub(crate) fn from_parts(matrix: DMatrix<f64>, damping: f64, clip_fraction: f64) -> Self {
        Hessian {
            matrix,
            damping,
            clip_fraction,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Flat storage; entry `(i, j)` sits at `j * d + i`, and by symmetry
    /// column `i` is also row `i`.
    pub fn as_slice(&self) -> &[f64] {
        self.matrix.as_slice()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn clip_fraction(&self) -> f64 {
        self.clip_fraction
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().sum()
    }

    /// Eigenvalues sorted in descending order.
    pub fn eigenvalues_desc(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d_in: usize,
    pub n: usize,
    #[serde(default)]
    pub spectrum_exponent: f64,
    #[serde(default)]
    pub outlier_directions: usize,
    #[serde(default = "unit_gain")]
    pub outlier_gain: f64,
    #[serde(default)]
    pub seed: u64,
}

fn unit_gain() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.n == 0 {
            return Err(Error::InvalidConfig("d_in and n must be at least 1".into()));
        }
        if self.outlier_directions > self.d_in {
            return Err(Error::InvalidConfig(format!(
                "outlier_directions {} exceeds d_in {}",
                self.outlier_directions, self.d_in
            )));
        }
        if !(self.outlier_gain >= 1.0 && self.outlier_gain.is_finite()) {
            return Err(Error::InvalidConfig("outlier_gain must be finite and >= 1".into()));
        }
        if !self.spectrum_exponent.is_finite() {
            return Err(Error::InvalidConfig("spectrum_exponent must be finite".into()));
        }
        Ok(())
    }

    /// Population covariance eigenvalues, largest-first for exponent ≥ 0.
    pub fn spectrum(&self) -> Vec<f64> {
        (0..self.d_in)
            .map(|k| {
                let base = ((k + 1) as f64).powf(-self.spectrum_exponent);
                if k < self.outlier_directions {
                    base * self.outlier_gain
                } else {
                    base
                }
            })
            .collect()
    }
}

fn normal_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let values: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian matrix.
fn random_orthogonal(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = normal_matrix(rng, d, d);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn gen_calibration(synth: &SynthSpec) -> Result<CalibrationMatrix> {
    synth.validate()?;
    let mut rng = rng::stream(synth.seed);
    let q = random_orthogonal(&mut rng, synth.d_in);
    let mut z = normal_matrix(&mut rng, synth.n, synth.d_in);
    for (k, lam) in synth.spectrum().into_iter().enumerate() {
        z.column_mut(k).scale_mut(lam.sqrt());
    }
    CalibrationMatrix::new(z * q.transpose())
}

/// A fresh sample of `n` rows from the same population as
/// [`gen_calibration`]: the same rotation `Q`, with new rows `Z` drawn from
/// the sub-stream `mix(seed, HOLDOUT_STREAM)`.
pub fn gen_holdout(synth: &SynthSpec, n: usize) -> Result<CalibrationMatrix> {
    let synth = SynthSpec { n, ..synth.clone() };
    synth.validate()?;
    let q = random_orthogonal(&mut rng::stream(synth.seed), synth.d_in);
    let mut z = normal_matrix(&mut rng::stream(rng::mix(synth.seed, rng::HOLDOUT_STREAM)), n, synth.d_in);
    for (k, lam) in synth.spectrum().into_iter().enumerate() {
        z.column_mut(k).scale_mut(lam.sqrt());
    }
    CalibrationMatrix::new(z * q.transpose())
}

/// Population second moment `Q diag(λ) Qᵀ` of the rows generated for `synth`.
pub fn population_covariance(synth: &SynthSpec) -> Result<DMatrix<f64>> {
    synth.validate()?;
    let q = random_orthogonal(&mut rng::stream(synth.seed), synth.d_in);
    let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(synth.spectrum()));
    let m = &q * lam * q.transpose();
    Ok((&m + m.transpose()) * 0.5)
}

/// `d_in × d_out` weights with i.i.d. standard normal entries, drawn
/// row-major from the sub-stream `mix(seed, WEIGHT_STREAM)`.
pub fn synth_weights(d_in: usize, d_out: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(rng::mix(seed, rng::WEIGHT_STREAM));
    normal_matrix(&mut rng, d_in, d_out)
}

/// `H = XᵀX + λI` with `λ = lambda_rel · mean(diag(XᵀX))`.
pub fn build_hessian(x: &CalibrationMatrix, lambda_rel: f64) -> Result<Hessian> {
    let d = x.d_in();
    if d == 0 {
        return Err(Error::Shape("d_in = 0".into()));
    }
    if !(lambda_rel >= 0.0 && lambda_rel.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda_rel must be >= 0, got {lambda_rel}")));
    }
    let xm = x.matrix();
    let mut h = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let ci = xm.column(i);
        for j in i..d {
            let v = ci.dot(&xm.column(j));
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let mean_diag = h.diagonal().sum() / d as f64;
    let damping = lambda_rel * mean_diag;
    if damping > 0.0 {
        for i in 0..d {
            h[(i, i)] += damping;
        }
    }
    Ok(Hessian::from_parts(h, damping, 0.0))
}

/// Number of top eigenvalues clipped for a fraction `rho` of `d`.
pub fn clip_count(rho: f64, d: usize) -> usize {
    // Tolerates round-off in rho·d such as (1/3)·3.
    (rho * d as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Sets the `m = ceil(ρ·d)` largest eigenvalues equal to the `(m+1)`-th
/// largest, keeping the eigenvectors.
pub fn clip_hessian_eigenvalues(h: &Hessian, rho: f64) -> Result<Hessian> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("clip fraction must be in [0, 1), got {rho}")));
    }
    let d = h.dim();
    let m = clip_count(rho, d);
    if m == 0 {
        return Ok(Hessian::from_parts(h.matrix.clone(), h.damping, rho));
    }
    if m >= d {
        return Err(Error::InvalidConfig(format!(
            "clipping {m} of {d} eigenvalues leaves nothing to clip against"
        )));
    }
    let eig = SymmetricEigen::new(h.matrix.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut values = eig.eigenvalues.clone();
    let ceiling = values[order[m]];
    for &k in &order[..m] {
        values[k] = ceiling;
    }
    let v = &eig.eigenvectors;
    let scaled = v * DMatrix::from_diagonal(&values);
    let raw = scaled * v.transpose();
    let mut out = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s = 0.5 * (raw[(i, j)] + raw[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    Ok(Hessian::from_parts(out, h.damping, rho))
}
