//! Qualitative diagnostics: feature inversion maps and adversarial
//! loss-landscape slices over filter-normalized weight directions.

use crate::attack::{eval_attack, PerturbBudget};
use crate::data::{rng_for, stream, ImageBatch, LabeledBatch};
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::model::{BnRoute, ForwardCtx, Param, RobustModel};
use crate::tensor::Tape;
use ndarray::{Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

/// Optimization direction for the feature-inversion objective.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimSign {
    /// Minimize the selected coordinate (the written definition).
    Min,
    /// Maximize it (activation-maximization convention).
    Max,
}

/// Feature-inversion result: the optimized image and the objective
/// trajectory over accepted steps.
pub struct FimResult {
    pub image: Array4<f64>,
    pub trajectory: Vec<f64>,
}

fn feature_coordinate(model: &RobustModel, x: &Array4<f64>, unit_index: usize) -> Result<f64> {
    let tape = Tape::new();
    let ctx = ForwardCtx::attack(&tape, BnRoute::Normal);
    let f = model.forward_features(&ctx, tape.constant(x.clone().into_dyn()));
    let v = tape.value(f);
    Ok(v.view().into_dimensionality::<ndarray::Ix2>().unwrap()[(0, unit_index)])
}

/// Gradient-descent feature inversion from a seed image. Each step is
/// accepted only if it improves the objective (backtracking halves the
/// rate), so the returned trajectory is monotone.
pub fn fim(
    model: &RobustModel,
    x0: &ImageBatch,
    unit_index: usize,
    steps: usize,
    lr: f64,
    sign: FimSign,
) -> Result<FimResult> {
    if x0.len() != 1 {
        return Err(Error::Validation("fim expects a single seed image".into()));
    }
    if unit_index >= model.config.feature_dim {
        return Err(Error::Validation(format!(
            "unit index {unit_index} outside feature dim {}",
            model.config.feature_dim
        )));
    }
    let dir = match sign {
        FimSign::Min => 1.0,
        FimSign::Max => -1.0,
    };
    let mut x = x0.data.clone();
    let mut objective = feature_coordinate(model, &x, unit_index)?;
    let mut trajectory = vec![objective];
    let mut rate = lr;
    for _ in 0..steps {
        let tape = Tape::new();
        let ctx = ForwardCtx::attack(&tape, BnRoute::Normal);
        let leaf = tape.leaf(x.clone().into_dyn());
        let f = model.forward_features(&ctx, leaf);
        let coord = tape.sum(tape.gather_pairs(f, vec![(0, unit_index)]));
        let grads = tape.backward(coord);
        let g = grads.wrt_or_zeros(leaf, x.shape());
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite FIM gradient".into()));
        }
        // descend (or ascend) with backtracking on the clamped iterate
        let mut accepted = false;
        for _ in 0..12 {
            let candidate = (&x - &(g.mapv(|v| v * dir * rate)))
                .mapv(|v| v.clamp(0.0, 1.0))
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let cand_obj = feature_coordinate(model, &candidate, unit_index)?;
            let improved = match sign {
                FimSign::Min => cand_obj < objective,
                FimSign::Max => cand_obj > objective,
            };
            if improved {
                x = candidate;
                objective = cand_obj;
                trajectory.push(objective);
                accepted = true;
                break;
            }
            rate *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(FimResult {
        image: x,
        trajectory,
    })
}

/// Adversarial-loss landscape over two filter-normalized directions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` at `(alphas[i], betas[j])`; NaN marks a failed cell.
    pub losses: Vec<Vec<f64>>,
    pub direction_seed: u64,
}

impl LandscapeGrid {
    pub fn to_array(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.alphas.len(), self.betas.len()));
        for (i, row) in self.losses.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut s = String::from("alpha,beta,loss\n");
        for (i, &a) in self.alphas.iter().enumerate() {
            for (j, &b) in self.betas.iter().enumerate() {
                s.push_str(&format!("{a},{b},{}\n", self.losses[i][j]));
            }
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// One random direction per parameter, filter-normalized: for conv stacks
/// every output-channel filter of the direction is rescaled to the norm of
/// the corresponding weight filter; 2-D weights are normalized per row.
/// Parameters without filter structure (biases, normalization affines) are
/// left unperturbed.
pub fn filter_normalized_directions(
    params: &[&Param],
    seed: u64,
) -> Vec<(u32, Option<ArrayD<f64>>)> {
    let mut rng = rng_for(seed, &[stream::ANALYSIS]);
    params
        .iter()
        .map(|p| {
            let shape = p.value.shape().to_vec();
            if shape.len() < 2 {
                return (p.id, None);
            }
            use rand::Rng;
            let mut d = ArrayD::from_shape_fn(p.value.raw_dim(), |_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            });
            let filters = shape[0];
            let stride: usize = shape[1..].iter().product();
            {
                let dv = d.as_slice_mut().unwrap();
                let wv = p.value.as_slice().unwrap();
                for f in 0..filters {
                    let range = f * stride..(f + 1) * stride;
                    let dn = dv[range.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let wn = wv[range.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scale = if dn > 0.0 { wn / dn } else { 0.0 };
                    for v in &mut dv[range] {
                        *v *= scale;
                    }
                }
            }
            (p.id, Some(d))
        })
        .collect()
}

/// Generic landscape scan: perturbs parameters along `α·d₁ + β·d₂`,
/// evaluates `objective` at every grid point, and restores the original
/// parameters bit-exactly.
pub fn scan_landscape(
    model: &mut RobustModel,
    alphas: &[f64],
    betas: &[f64],
    seed: u64,
    mut objective: impl FnMut(&RobustModel) -> Result<f64>,
) -> Result<LandscapeGrid> {
    let originals: Vec<(u32, ArrayD<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.id, p.value.clone()))
        .collect();
    let d1 = filter_normalized_directions(&model.params(), seed);
    let d2 = filter_normalized_directions(&model.params(), seed ^ 0x5eed_0002);
    let mut losses = vec![vec![f64::NAN; betas.len()]; alphas.len()];
    let mut restore_and_fail: Option<Error> = None;
    'outer: for (i, &a) in alphas.iter().enumerate() {
        for (j, &b) in betas.iter().enumerate() {
            for (idx, p) in model.params_mut().into_iter().enumerate() {
                let (_, ref base) = originals[idx];
                p.value.assign(base);
                if let (_, Some(da)) = &d1[idx] {
                    p.value.scaled_add(a, da);
                }
                if let (_, Some(db)) = &d2[idx] {
                    p.value.scaled_add(b, db);
                }
            }
            match objective(model) {
                Ok(v) => losses[i][j] = v,
                Err(Error::Numerical(_)) | Err(Error::Attack(_)) => {
                    losses[i][j] = f64::NAN;
                }
                Err(e) => {
                    restore_and_fail = Some(e);
                    break 'outer;
                }
            }
        }
    }
    // exact restore
    for (idx, p) in model.params_mut().into_iter().enumerate() {
        p.value.assign(&originals[idx].1);
    }
    if let Some(e) = restore_and_fail {
        return Err(e);
    }
    Ok(LandscapeGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        losses,
        direction_seed: seed,
    })
}

/// Adversarial-CE landscape: at every grid point the batch is re-attacked
/// against the perturbed weights and the CE on the adversarial examples is
/// recorded.
pub fn loss_landscape(
    model: &mut RobustModel,
    batch: &LabeledBatch,
    budget: &PerturbBudget,
    alphas: &[f64],
    betas: &[f64],
    seed: u64,
) -> Result<LandscapeGrid> {
    if model.num_classes().is_none() {
        return Err(Error::State("classifier head not attached".into()));
    }
    let images = batch.images.clone();
    let labels = batch.labels.clone();
    scan_landscape(model, alphas, betas, seed, move |m| {
        let mut rng = rng_for(seed, &[stream::ANALYSIS, 0x1a]);
        let delta = eval_attack(m, &images, &labels, budget, &mut rng)?;
        let logits = m.predict_logits(&delta.apply(&images.data))?;
        cross_entropy(&logits, &labels)
    })
}
