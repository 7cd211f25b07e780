//! Contrastive objectives over unit-norm embeddings.
//!
//! Both losses take in-batch negatives only: row `i` of each input is the
//! positive partner of row `i` of the other, and every other row in the batch
//! is a negative. The positive itself stays in the softmax denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Rows whose norm deviates from 1 by more than this fail the unit contract.
pub const UNIT_TOL: f64 = 1e-9;

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(0.07);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::Config(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

pub(crate) fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{what} must be a matrix")));
    }
    for (i, n) in t.row_norms().iter().enumerate() {
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!(
                "{what} row {i} has norm {n}, expected unit rows"
            )));
        }
    }
    Ok(())
}

fn check_pair(tape: &Tape, a: Var, b: Var) -> Result<usize> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    check_unit_rows(ta, "left embeddings")?;
    check_unit_rows(tb, "right embeddings")?;
    if ta.rows() == 0 || tb.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if ta.shape() != tb.shape() {
        return Err(Error::Shape(format!(
            "paired embeddings differ in shape: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    Ok(ta.rows())
}

/// Mean cross-entropy of `logits` rows against the diagonal targets, where
/// `positive` already holds the diagonal logits as a `[B]` vector.
fn diagonal_cross_entropy(tape: &mut Tape, logits: Var, positive: Var) -> Result<Var> {
    let lse = tape.logsumexp_rows(logits)?;
    let per_row = tape.sub(lse, positive)?;
    tape.mean(per_row)
}

/// Pairwise similarity logits `a·bᵀ / τ` and the matching diagonal `[B]`.
fn scaled_similarities(tape: &mut Tape, a: Var, b: Var, tau: Temperature) -> Result<(Var, Var)> {
    let bt = tape.transpose(b)?;
    let sims = tape.matmul(a, bt)?;
    let logits = tape.scale(sims, 1.0 / tau.value())?;
    let prod = tape.mul(a, b)?;
    let diag = tape.sum_rows(prod)?;
    let diag = tape.scale(diag, 1.0 / tau.value())?;
    Ok((logits, diag))
}

/// One-directional alignment loss: each generated embedding is classified
/// against all real embeddings in the batch.
///
/// `L = −(1/B) Σᵢ log softmax_j(sim(gᵢ, rⱼ)/τ)[i]`
pub fn align_loss(tape: &mut Tape, gen: Var, real: Var, tau: Temperature) -> Result<Var> {
    check_pair(tape, gen, real)?;
    let (logits, diag) = scaled_similarities(tape, gen, real, tau)?;
    diagonal_cross_entropy(tape, logits, diag)
}

/// [`align_loss`] averaged with its reverse direction (real queries against
/// generated candidates). Ablation only.
pub fn symmetric_align_loss(tape: &mut Tape, gen: Var, real: Var, tau: Temperature) -> Result<Var> {
    clip_loss(tape, gen, real, tau)
}

/// Symmetric InfoNCE: the mean of image→text and text→image cross-entropies.
pub fn clip_loss(tape: &mut Tape, img: Var, txt: Var, tau: Temperature) -> Result<Var> {
    check_pair(tape, img, txt)?;
    let (logits, diag) = scaled_similarities(tape, img, txt, tau)?;
    let forward = diagonal_cross_entropy(tape, logits, diag)?;
    let logits_t = tape.transpose(logits)?;
    let backward = diagonal_cross_entropy(tape, logits_t, diag)?;
    let both = tape.add(forward, backward)?;
    tape.scale(both, 0.5)
}

/// `a·bᵀ` for unit-row inputs: entry `(i, j)` is the cosine of `aᵢ` and `bⱼ`.
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_unit_rows(a, "left embeddings")?;
    check_unit_rows(b, "right embeddings")?;
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    crate::numerics::tensor::matmul_values(a, &b.transpose())
}

/// Evaluates a loss on constant inputs and returns its value.
pub fn loss_value(
    f: fn(&mut Tape, Var, Var, Temperature) -> Result<Var>,
    a: &Tensor,
    b: &Tensor,
    tau: Temperature,
) -> Result<f64> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let l = f(&mut tape, va, vb, tau)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(rows: &[Vec<f64>]) -> Tensor {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    fn tau(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    /// Hand evaluation of the one-directional loss from a similarity matrix.
    fn oracle(sims: &[Vec<f64>], t: f64) -> f64 {
        let b = sims.len() as f64;
        sims.iter()
            .enumerate()
            .map(|(i, row)| {
                let denom: f64 = row.iter().map(|s| (s / t).exp()).sum();
                -((row[i] / t).exp() / denom).ln()
            })
            .sum::<f64>()
            / b
    }

    #[test]
    fn single_pair_is_zero() {
        let g = unit(&[vec![1.0, 2.0, 3.0]]);
        let r = unit(&[vec![-1.0, 0.5, 0.0]]);
        assert_eq!(loss_value(align_loss, &g, &r, tau(0.07)).unwrap(), 0.0);
        assert_eq!(loss_value(clip_loss, &g, &r, tau(0.07)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_similarity_gives_ln_b() {
        let rows = unit(&vec![vec![0.3, -0.4, 0.5]; 4]);
        let l = loss_value(align_loss, &rows, &rows, tau(0.07)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let c = loss_value(clip_loss, &rows, &rows, tau(0.07)).unwrap();
        assert!((c - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_similarity_instance() {
        let e = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let expected = oracle(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        assert!((expected - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((expected - 0.313262).abs() < 1e-6);
        let l = loss_value(align_loss, &e, &e, tau(1.0)).unwrap();
        assert!((l - expected).abs() < 1e-12);
        let c = loss_value(clip_loss, &e, &e, tau(1.0)).unwrap();
        assert!((c - expected).abs() < 1e-12);
    }

    #[test]
    fn one_directional_matches_oracle_on_asymmetric_instance() {
        let g = unit(&[vec![1.0, 0.2], vec![0.3, 1.0], vec![-1.0, 0.4]]);
        let r = unit(&[vec![0.9, -0.1], vec![0.5, 0.8], vec![-0.2, 1.0]]);
        let sims = cosine_sim_matrix(&g, &r).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|i| sims.row(i).to_vec()).collect();
        let l = loss_value(align_loss, &g, &r, tau(0.5)).unwrap();
        assert!((l - oracle(&rows, 0.5)).abs() < 1e-12);
        // reverse direction differs, so the symmetric variant does too
        let s = loss_value(symmetric_align_loss, &g, &r, tau(0.5)).unwrap();
        assert!((s - l).abs() > 1e-6);
    }

    #[test]
    fn errors() {
        let e = unit(&[vec![1.0, 0.0]]);
        let not_unit = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(matches!(
            loss_value(align_loss, &not_unit, &e, tau(1.0)),
            Err(Error::Contract(_))
        ));
        let empty = Tensor::zeros(vec![0, 2]);
        assert!(matches!(
            loss_value(align_loss, &empty, &empty, tau(1.0)),
            Err(Error::EmptyBatch)
        ));
        let two = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            loss_value(align_loss, &e, &two, tau(1.0)),
            Err(Error::Shape(_))
        ));
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn cosine_matrix_cases() {
        let a = unit(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let s = cosine_sim_matrix(&a, &a).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);
        let b = unit(&[vec![-1.0, 0.0, 0.0]]);
        assert_eq!(cosine_sim_matrix(&a, &b).unwrap().get(0, 0), -1.0);
        let c = unit(&[vec![1.0, 0.0]]);
        assert!(matches!(cosine_sim_matrix(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn lower_temperature_sharpens_diagonal_dominant_batches() {
        let g = unit(&[vec![1.0, 0.1, 0.0], vec![0.0, 1.0, 0.1], vec![0.1, 0.0, 1.0]]);
        let losses: Vec<f64> = [1.0, 0.5, 0.07]
            .iter()
            .map(|&t| loss_value(align_loss, &g, &g, tau(t)).unwrap())
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
        assert!(losses[2] >= 0.0);
    }
}
