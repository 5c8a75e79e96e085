//! Contrastive and classification losses.
//!
//! The NT-Xent variants treat every view of a sample as a positive of the
//! other views of the same sample and every other embedding in the batch as
//! a negative (the anchor's positives are kept in the denominator, whose
//! cardinality is `b·m − 1`). Losses are divided by the batch size so the
//! regularization weight in the pretraining objective is batch-size
//! independent.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, ArrayD};

/// Temperature for the contrastive losses; must be positive.
#[derive(Copy, Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Temperature(pub f64);

impl Default for Temperature {
    fn default() -> Self {
        Temperature(0.5)
    }
}

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Temperature(t))
        } else {
            Err(Error::Validation(format!("temperature must be > 0, got {t}")))
        }
    }
}

/// Projected embeddings of `b` samples under `m` views, with row metadata.
/// Row `v*b + s` holds view `v` of sample `s`.
#[derive(Clone, Debug)]
pub struct ProjectedFeatures {
    pub z: Array2<f64>,
    pub view_index: Vec<usize>,
    pub sample_index: Vec<usize>,
}

impl ProjectedFeatures {
    /// Stacks per-view `[b, d]` blocks.
    pub fn from_views(views: &[Array2<f64>]) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Validation("need at least 2 views".into()));
        }
        let b = views[0].nrows();
        let d = views[0].ncols();
        if views.iter().any(|v| v.nrows() != b || v.ncols() != d) {
            return Err(Error::Validation("inconsistent view shapes".into()));
        }
        let mut z = Array2::<f64>::zeros((b * views.len(), d));
        let mut view_index = Vec::new();
        let mut sample_index = Vec::new();
        for (vi, v) in views.iter().enumerate() {
            z.slice_mut(ndarray::s![vi * b..(vi + 1) * b, ..]).assign(v);
            for s in 0..b {
                view_index.push(vi);
                sample_index.push(s);
            }
        }
        Ok(ProjectedFeatures {
            z,
            view_index,
            sample_index,
        })
    }

    pub fn num_views(&self) -> usize {
        self.view_index.iter().copied().max().map_or(0, |v| v + 1)
    }

    pub fn batch_size(&self) -> usize {
        self.sample_index.iter().copied().max().map_or(0, |s| s + 1)
    }
}

/// Positive pairs `(anchor, positive)` for rows that share a sample.
fn positive_pairs(sample_index: &[usize]) -> Vec<(usize, usize)> {
    let n = sample_index.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && sample_index[i] == sample_index[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Multi-view NT-Xent over stacked per-view embedding blocks already on a
/// tape. `views[v]` is the `[b, d]` projection of view `v`.
pub fn ntxent_multi_view_tape(
    tape: &Tape,
    views: &[Var],
    t: Temperature,
) -> Result<Var> {
    if views.len() < 2 {
        return Err(Error::Validation(format!(
            "multi-view loss needs m >= 2 views, got {}",
            views.len()
        )));
    }
    let b = {
        let first = tape.value(views[0]);
        first.shape()[0]
    };
    for &v in views {
        let shape = tape.value(v).shape().to_vec();
        if shape.len() != 2 || shape[0] != b {
            return Err(Error::Validation("inconsistent view shapes".into()));
        }
    }
    let m = views.len();
    let z = tape.concat_rows(views);
    let zn = tape.l2_normalize_rows(z);
    let sim = tape.scale(tape.matmul_nt(zn, zn), 1.0 / t.0);
    let lse = tape.row_lse_excl_self(sim);
    // every anchor has exactly m−1 positives
    let sample_index: Vec<usize> = (0..m).flat_map(|_| 0..b).collect();
    let pairs = positive_pairs(&sample_index);
    let pos = tape.gather_pairs(sim, pairs);
    let total = tape.sub(tape.scale(tape.sum(lse), (m - 1) as f64), tape.sum(pos));
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Two-view NT-Xent on a tape; positives are the other view of the same
/// sample.
pub fn ntxent_two_view_tape(tape: &Tape, z1: Var, z2: Var, t: Temperature) -> Result<Var> {
    ntxent_multi_view_tape(tape, &[z1, z2], t)
}

/// Eager two-view NT-Xent over plain arrays.
pub fn ntxent_two_view(z1: &Array2<f64>, z2: &Array2<f64>, t: Temperature) -> Result<f64> {
    if z1.dim() != z2.dim() {
        return Err(Error::Validation(format!(
            "view shape mismatch: {:?} vs {:?}",
            z1.dim(),
            z2.dim()
        )));
    }
    let tape = Tape::new();
    let v1 = tape.constant(z1.clone().into_dyn());
    let v2 = tape.constant(z2.clone().into_dyn());
    Ok(tape.scalar(ntxent_two_view_tape(&tape, v1, v2, t)?))
}

/// Eager multi-view NT-Xent over [`ProjectedFeatures`].
pub fn ntxent_multi_view(zs: &ProjectedFeatures, t: Temperature) -> Result<f64> {
    let m = zs.num_views();
    let b = zs.batch_size();
    if m < 2 {
        return Err(Error::Validation(format!("need m >= 2 views, got {m}")));
    }
    if zs.z.nrows() != b * m {
        return Err(Error::Validation("row count must equal b*m".into()));
    }
    let tape = Tape::new();
    let views: Vec<Var> = (0..m)
        .map(|vi| {
            let rows: Vec<usize> = (0..zs.z.nrows())
                .filter(|&r| zs.view_index[r] == vi)
                .collect();
            let mut block = Array2::<f64>::zeros((rows.len(), zs.z.ncols()));
            for (bi, &r) in rows.iter().enumerate() {
                block.row_mut(bi).assign(&zs.z.row(r));
            }
            tape.constant(block.into_dyn())
        })
        .collect();
    Ok(tape.scalar(ntxent_multi_view_tape(&tape, &views, t)?))
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "label {bad} outside [0,{k})"
        )));
    }
    Ok(())
}

/// Mean cross-entropy of `[B,K]` logits against integer labels, on a tape.
pub fn cross_entropy_tape(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Validation(format!(
            "logits shape {shape:?} incompatible with {} labels",
            labels.len()
        )));
    }
    check_labels(labels, shape[1])?;
    let ls = tape.log_softmax_rows(logits);
    let pairs: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &l)| (i, l)).collect();
    let picked = tape.gather_pairs(ls, pairs);
    Ok(tape.scale(tape.sum(picked), -1.0 / labels.len() as f64))
}

/// Eager mean cross-entropy.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.constant(logits.clone().into_dyn());
    Ok(tape.scalar(cross_entropy_tape(&tape, v, labels)?))
}

/// TRADES objective on a tape:
/// `CE(logits_clean, labels) + beta · mean KL(softmax(clean) ‖ softmax(adv))`.
pub fn trades_loss_tape(
    tape: &Tape,
    logits_clean: Var,
    logits_adv: Var,
    labels: &[usize],
    beta: f64,
) -> Result<Var> {
    if beta < 0.0 {
        return Err(Error::Validation(format!("beta must be >= 0, got {beta}")));
    }
    let ce = cross_entropy_tape(tape, logits_clean, labels)?;
    let b = labels.len() as f64;
    let lsp = tape.log_softmax_rows(logits_clean);
    let lsq = tape.log_softmax_rows(logits_adv);
    let p = tape.exp(lsp);
    let kl = tape.scale(tape.sum(tape.mul(p, tape.sub(lsp, lsq))), 1.0 / b);
    Ok(tape.add(ce, tape.scale(kl, beta)))
}

/// Eager TRADES loss.
pub fn trades_loss(
    logits_clean: &Array2<f64>,
    logits_adv: &Array2<f64>,
    labels: &[usize],
    beta: f64,
) -> Result<f64> {
    if logits_clean.dim() != logits_adv.dim() {
        return Err(Error::Validation("logit shape mismatch".into()));
    }
    let tape = Tape::new();
    let c = tape.constant(logits_clean.clone().into_dyn());
    let a = tape.constant(logits_adv.clone().into_dyn());
    Ok(tape.scalar(trades_loss_tape(&tape, c, a, labels, beta)?))
}

/// Brute-force enumeration of the multi-view contrastive loss, used as a
/// test oracle. Kept independent of the tape implementation.
pub fn ntxent_enumeration_oracle(
    views: &[Array2<f64>],
    t: f64,
) -> f64 {
    let b = views[0].nrows();
    let m = views.len();
    let d = views[0].ncols();
    let n = b * m;
    // normalized rows, row = v*b + s
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for v in views {
        for s in 0..b {
            let r: Vec<f64> = v.row(s).to_vec();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            rows.push(r.iter().map(|x| x / norm).collect());
        }
    }
    let sim = |i: usize, j: usize| -> f64 {
        (0..d).map(|k| rows[i][k] * rows[j][k]).sum::<f64>() / t
    };
    let mut total = 0.0;
    for i in 0..n {
        let s_i = i % b;
        for j in 0..n {
            if j == i || j % b != s_i {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += sim(i, k).exp();
                }
            }
            total += -(sim(i, j).exp() / denom).ln();
        }
    }
    total / b as f64
}

/// Gradient of an eager scalar loss with respect to one input, via the tape.
pub fn grad_of(
    inputs: &[ArrayD<f64>],
    which: usize,
    f: impl Fn(&Tape, &[Var]) -> Var,
) -> ArrayD<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    grads.wrt_or_zeros(vars[which], inputs[which].shape())
}
