//! Training objectives.
//!
//! The contrastive objective is anchored on the intensity embedding. For
//! anchor `i` with cosine similarity `s(.,.)` and temperature `tau`:
//!
//! ```text
//! L(i) = -log( exp(s(zi_int, zi_phs)/tau)
//!              / ( exp(s(zi_int, zi_phs)/tau) + S1 + S2 ) )
//! S1   = sum_{j != i} exp(s(zi_int, zj_phs)/tau)
//! S2   = sum_{j != i} exp(s(zi_int, zj_int)/tau)
//! ```
//!
//! and the batch loss is the mean of `L(i)`. Phase embeddings only ever appear
//! as the positive or as `S1` negatives; `S2` contrasts the anchor against the
//! other intensity embeddings of the batch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > 0.0) {
        return Err(Error::ZeroNorm { row: 0 });
    }
    if !(nb > 0.0) {
        return Err(Error::ZeroNorm { row: 1 });
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Paired embeddings: row `i` of `z_int` and row `i` of `z_phs` come from the
/// same time window of the same insertion.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    pub z_int: ArrayView2<'a, f64>,
    pub z_phs: ArrayView2<'a, f64>,
    pub temperature: f64,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(z_int: ArrayView2<'a, f64>, z_phs: ArrayView2<'a, f64>, temperature: f64) -> Result<Self> {
        if z_int.dim() != z_phs.dim() {
            return Err(Error::Shape(format!(
                "intensity {:?} and phase {:?} embeddings differ",
                z_int.dim(),
                z_phs.dim()
            )));
        }
        if z_int.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self {
            z_int,
            z_phs,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.z_int.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss value plus gradients with respect to both embedding matrices.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub d_int: Array2<f64>,
    pub d_phs: Array2<f64>,
}

fn unit_rows(z: ArrayView2<f64>, row_offset_for_errors: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    for (i, &n) in norms.iter().enumerate() {
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm {
                row: i + row_offset_for_errors,
            });
        }
    }
    let mut u = z.to_owned();
    for (mut row, &n) in u.rows_mut().into_iter().zip(&norms) {
        row /= n;
    }
    Ok((u, norms))
}

/// Mean intensity-anchored contrastive loss.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<f64> {
    contrastive_loss_with_grad(batch).map(|g| g.loss)
}

/// Loss and analytic gradients, evaluated with a max-shifted log-sum-exp.
pub fn contrastive_loss_with_grad(batch: &ContrastiveBatch) -> Result<LossGrad> {
    let n = batch.len();
    let tau = batch.temperature;
    let (u, nu) = unit_rows(batch.z_int, 0)?;
    let (v, nv) = unit_rows(batch.z_phs, 0)?;
    // Similarity matrices: cross[i][j] = u_i.v_j, intra[i][j] = u_i.u_j.
    let cross = u.dot(&v.t()).mapv(|s| s.clamp(-1.0, 1.0) / tau);
    let intra = u.dot(&u.t()).mapv(|s| s.clamp(-1.0, 1.0) / tau);

    let mut total = 0.0;
    // Gradients with respect to the logits, scaled by 1/N.
    let mut g_cross = Array2::<f64>::zeros((n, n));
    let mut g_intra = Array2::<f64>::zeros((n, n));
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let pos = cross[[i, i]];
        let mut max = pos;
        for j in (0..n).filter(|&j| j != i) {
            max = max.max(cross[[i, j]]).max(intra[[i, j]]);
        }
        let mut sum = (pos - max).exp();
        for j in (0..n).filter(|&j| j != i) {
            sum += (cross[[i, j]] - max).exp() + (intra[[i, j]] - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - pos;
        g_cross[[i, i]] = ((pos - lse).exp() - 1.0) * inv_n;
        for j in (0..n).filter(|&j| j != i) {
            g_cross[[i, j]] = (cross[[i, j]] - lse).exp() * inv_n;
            g_intra[[i, j]] = (intra[[i, j]] - lse).exp() * inv_n;
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss = {loss}")));
    }

    // d/du_i: sum_j g_cross[i,j] v_j + sum_j (g_intra[i,j] + g_intra[j,i]) u_j, all / tau.
    let g_intra_sym = &g_intra + &g_intra.t();
    let du = (g_cross.dot(&v) + g_intra_sym.dot(&u)) / tau;
    let dv = g_cross.t().dot(&u) / tau;
    Ok(LossGrad {
        loss,
        d_int: through_normalization(&u, &nu, du),
        d_phs: through_normalization(&v, &nv, dv),
    })
}

/// Chain rule through `u = x / |x|`: `dx = (du - (du.u) u) / |x|`.
fn through_normalization(u: &Array2<f64>, norms: &Array1<f64>, mut du: Array2<f64>) -> Array2<f64> {
    for ((mut d, ui), &n) in du.rows_mut().into_iter().zip(u.rows()).zip(norms) {
        let proj = d.dot(&ui);
        d.zip_mut_with(&ui, |dv, &uv| *dv = (*dv - proj * uv) / n);
    }
    du
}

/// Contrastive objective settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Extension: average with the phase-anchored mirror of the loss. Off for
    /// every reproduction run.
    pub symmetric: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            symmetric: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn loss_and_grad(&self, z_int: ArrayView2<f64>, z_phs: ArrayView2<f64>) -> Result<LossGrad> {
        let forward = contrastive_loss_with_grad(&ContrastiveBatch::new(z_int, z_phs, self.temperature)?)?;
        if !self.symmetric {
            return Ok(forward);
        }
        let mirror = contrastive_loss_with_grad(&ContrastiveBatch::new(z_phs, z_int, self.temperature)?)?;
        Ok(LossGrad {
            loss: 0.5 * (forward.loss + mirror.loss),
            d_int: 0.5 * (forward.d_int + mirror.d_phs),
            d_phs: 0.5 * (forward.d_phs + mirror.d_int),
        })
    }
}

fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn check_labels(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    Ok(())
}

/// Mean negative log-softmax of the true class; with `class_weights` the mean
/// is weighted by the weight of each sample's true class.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize], class_weights: Option<&[f64]>) -> Result<f64> {
    cross_entropy_with_grad(logits, labels, class_weights).map(|(l, _)| l)
}

pub fn cross_entropy_with_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Array2<f64>)> {
    check_labels(&logits, labels)?;
    let k = logits.ncols();
    if let Some(w) = class_weights {
        if w.len() != k || w.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidConfig(format!("need {k} non-negative class weights")));
        }
    }
    let weight = |y: usize| class_weights.map_or(1.0, |w| w[y]);
    let norm: f64 = labels.iter().map(|&y| weight(y)).sum();
    if !(norm > 0.0) {
        return Err(Error::InvalidConfig("class weights sum to zero over the batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for (i, &y) in labels.iter().enumerate() {
        let ls = log_softmax_row(logits.row(i));
        let w = weight(y) / norm;
        loss -= w * ls[y];
        let mut g = grad.row_mut(i);
        g.assign(&ls.mapv(|v| v.exp() * w));
        g[y] -= w;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy = {loss}")));
    }
    Ok((loss, grad))
}

/// Row-wise softmax.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&log_softmax_row(row).mapv(f64::exp));
    }
    out
}
