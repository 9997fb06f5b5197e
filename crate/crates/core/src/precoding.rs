//! Downlink precoding metrics: SINR, sum-rate, transmit power, the
//! power-budget projection and singular values of a precoder.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// One satellite's M x K transmit precoding matrix and its power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Tpm {
    pub sat_id: usize,
    pub v: CMatrix,
    pub budget: f64,
}

impl Tpm {
    pub fn zeros(sat_id: usize, m: usize, k: usize, budget: f64) -> Self {
        Self { sat_id, v: CMatrix::zeros(m, k), budget }
    }

    pub fn power(&self) -> f64 {
        trace_power(&self.v)
    }

    /// Projects onto the Frobenius ball of radius sqrt(budget).
    pub fn projected(&self) -> Tpm {
        Tpm { sat_id: self.sat_id, v: project_power(&self.v, self.budget.sqrt()), budget: self.budget }
    }

    pub fn is_feasible(&self) -> bool {
        self.power() <= self.budget + 1e-9 && self.v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Cluster-wide ML x K precoder: members' blocks stacked in cluster order.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTpm {
    pub v: CMatrix,
}

impl GlobalTpm {
    pub fn stack(blocks: &[Tpm]) -> Result<Self> {
        Ok(Self { v: stack_rows(blocks.iter().map(|t| &t.v))? })
    }
}

/// Vertically stacks equally wide complex matrices.
pub fn stack_rows<'a>(blocks: impl IntoIterator<Item = &'a CMatrix>) -> Result<CMatrix> {
    let blocks: Vec<&CMatrix> = blocks.into_iter().collect();
    let Some(first) = blocks.first() else {
        return Err(Error::Dimension("cannot stack an empty set of blocks".into()));
    };
    let cols = first.ncols();
    if blocks.iter().any(|b| b.ncols() != cols) {
        return Err(Error::Dimension("stacked blocks must share the column count".into()));
    }
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    Ok(out)
}

fn check_dims(h: &CMatrix, v: &CMatrix, noise: f64) -> Result<()> {
    if h.shape() != v.shape() {
        return Err(Error::Dimension(format!("channel is {:?} but precoder is {:?}", h.shape(), v.shape())));
    }
    if !(noise > 0.0) {
        return Err(Error::Dimension(format!("noise power must be positive (got {noise})")));
    }
    Ok(())
}

/// SINR of every user. Entry `(k, i)` of H^H V is the gain of user `k`'s
/// channel on user `i`'s beam.
pub fn sinrs(h: &CMatrix, v: &CMatrix, noise: f64) -> Result<Vec<f64>> {
    check_dims(h, v, noise)?;
    let gains = h.ad_mul(v);
    Ok((0..h.ncols())
        .map(|k| {
            let signal = gains[(k, k)].norm_sqr();
            let interference: f64 = (0..h.ncols()).filter(|&i| i != k).map(|i| gains[(k, i)].norm_sqr()).sum();
            signal / (interference + noise)
        })
        .collect())
}

pub fn sinr(k: usize, h: &CMatrix, v: &CMatrix, noise: f64) -> Result<f64> {
    if k >= h.ncols() {
        return Err(Error::Dimension(format!("user {k} out of range for {} users", h.ncols())));
    }
    Ok(sinrs(h, v, noise)?[k])
}

/// Sum over users of log2(1 + SINR), in bit/s/Hz.
pub fn spectral_efficiency(h: &CMatrix, v: &CMatrix, noise: f64) -> Result<f64> {
    Ok(sinrs(h, v, noise)?.into_iter().map(|s| (1.0 + s).log2()).sum())
}

/// Bandwidth-scaled sum-rate, Mbps.
pub fn sum_rate(h: &CMatrix, v: &CMatrix, noise: f64, bandwidth_hz: f64) -> Result<f64> {
    Ok(bandwidth_hz / 1e6 * spectral_efficiency(h, v, noise)?)
}

/// tr(V V^H), the squared Frobenius norm.
pub fn trace_power(v: &CMatrix) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Euclidean projection onto `{P : ||P||_F <= radius}`.
///
/// Equals `radius * V / (||V|| + max(0, radius - ||V||))`; inside the ball
/// the input is returned untouched.
pub fn project_power(v: &CMatrix, radius: f64) -> CMatrix {
    let norm = trace_power(v).sqrt();
    if norm <= radius {
        v.clone()
    } else {
        v * Complex64::new(radius / norm, 0.0)
    }
}

/// Singular values in descending order; `min(M, K)` of them.
pub fn singular_values(v: &CMatrix) -> Result<Vec<f64>> {
    let n = v.nrows().min(v.ncols());
    if n == 0 {
        return Ok(Vec::new());
    }
    if v.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::Numerical("singular values of a non-finite matrix".into()));
    }
    if v.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
        return Ok(vec![0.0; n]);
    }
    let svd = v
        .clone()
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("SVD did not converge for a {}x{} matrix", v.nrows(), v.ncols())))?;
    let mut values: Vec<f64> = svd.singular_values.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}
