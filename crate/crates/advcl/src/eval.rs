//! Robustness and accuracy metrics: standard accuracy, robust accuracy
//! under PGD, and sweep grids over attack strength.

use crate::attack::{eval_attack, PerturbBudget};
use crate::data::{rng_for, stream, Dataset};
use crate::error::Result;
use crate::model::DifferentiableClassifier;
use crate::plot::{line_chart, Series};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> (usize, usize) {
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        if pred == y {
            correct += 1;
        }
    }
    (correct, labels.len())
}

/// Standard accuracy over benign images.
pub fn eval_sa(
    model: &dyn DifferentiableClassifier,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for batch in data.batches(batch_size) {
        let logits = model.logits(&batch.images.data)?;
        let (c, t) = accuracy(&logits, &batch.labels);
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Robust accuracy: attack every batch with PGD, then measure accuracy on
/// the perturbed images.
pub fn eval_ra(
    model: &dyn DifferentiableClassifier,
    data: &Dataset,
    budget: &PerturbBudget,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for (bi, batch) in data.batches(batch_size).enumerate() {
        let mut rng = rng_for(seed, &[stream::ATTACK, 0xEA1, bi as u64]);
        let delta = eval_attack(model, &batch.images, &batch.labels, budget, &mut rng)?;
        let logits = model.logits(&delta.apply(&batch.images.data))?;
        let (c, t) = accuracy(&logits, &batch.labels);
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// One sweep cell.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub epsilon: f64,
    pub steps: usize,
    pub ra: f64,
}

/// Accuracy report over an attack grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub sa: f64,
    pub ra_grid: Vec<SweepCell>,
    pub dataset: String,
    pub model_fingerprint: String,
    pub budget: PerturbBudget,
    /// Sweep sanity warnings (obfuscated-gradient screen), not failures.
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn ra_at(&self, epsilon: f64, steps: usize) -> Option<f64> {
        self.ra_grid
            .iter()
            .find(|c| c.epsilon == epsilon && c.steps == steps)
            .map(|c| c.ra)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epsilon,steps,ra\n");
        for c in &self.ra_grid {
            out.push_str(&format!("{},{},{}\n", c.epsilon, c.steps, c.ra));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// RA vs ε (at the largest step count) and RA vs steps (at the base ε).
    pub fn save_plots(&self, dir: &Path, base_epsilon: f64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let max_steps = self.ra_grid.iter().map(|c| c.steps).max().unwrap_or(0);
        let by_eps: Vec<(f64, f64)> = self
            .ra_grid
            .iter()
            .filter(|c| c.steps == max_steps)
            .map(|c| (c.epsilon, c.ra))
            .collect();
        let by_steps: Vec<(f64, f64)> = self
            .ra_grid
            .iter()
            .filter(|c| (c.epsilon - base_epsilon).abs() < 1e-12)
            .map(|c| (c.steps as f64, c.ra))
            .collect();
        line_chart(
            &dir.join("ra_vs_epsilon.png"),
            &[Series {
                label: "ra".into(),
                points: by_eps,
            }],
            true,
        )?;
        line_chart(
            &dir.join("ra_vs_steps.png"),
            &[Series {
                label: "ra".into(),
                points: by_steps,
            }],
            true,
        )?;
        Ok(())
    }
}

/// Evaluates SA and the RA grid `eps_list × steps_list`. The ε = 0 column
/// equals SA by construction (a zero-radius attack cannot move the input).
pub fn eval_sweep(
    model: &dyn DifferentiableClassifier,
    data: &Dataset,
    eps_list: &[f64],
    steps_list: &[usize],
    base: &PerturbBudget,
    batch_size: usize,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport> {
    let sa = eval_sa(model, data, batch_size)?;
    let mut grid = Vec::new();
    for &eps in eps_list {
        for &steps in steps_list {
            let b = base.clone().with_epsilon(eps).with_steps(steps);
            let ra = if eps == 0.0 {
                sa
            } else {
                eval_ra(model, data, &b, batch_size, seed)?
            };
            grid.push(SweepCell {
                epsilon: eps,
                steps,
                ra,
            });
        }
    }
    // obfuscated-gradient screen: RA should not increase with attack
    // strength; violations are reported as warnings
    let mut warnings = Vec::new();
    for &steps in steps_list {
        let mut prev: Option<(f64, f64)> = None;
        for &eps in eps_list {
            let ra = grid
                .iter()
                .find(|c| c.epsilon == eps && c.steps == steps)
                .unwrap()
                .ra;
            if let Some((peps, pra)) = prev {
                if ra > pra + 0.005 {
                    warnings.push(format!(
                        "RA increased from {pra:.4} (eps {peps}) to {ra:.4} (eps {eps}) at {steps} steps"
                    ));
                }
            }
            prev = Some((eps, ra));
        }
    }
    for &eps in eps_list {
        if eps == 0.0 {
            continue;
        }
        let mut prev: Option<(usize, f64)> = None;
        for &steps in steps_list {
            let ra = grid
                .iter()
                .find(|c| c.epsilon == eps && c.steps == steps)
                .unwrap()
                .ra;
            if let Some((psteps, pra)) = prev {
                if ra > pra + 0.005 {
                    warnings.push(format!(
                        "RA increased from {pra:.4} ({psteps} steps) to {ra:.4} ({steps} steps) at eps {eps}"
                    ));
                }
            }
            prev = Some((steps, ra));
        }
    }
    Ok(EvalReport {
        sa,
        ra_grid: grid,
        dataset: data.name.clone(),
        model_fingerprint: fingerprint.to_string(),
        budget: base.clone(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackInit, AttackNorm};
    use crate::data::{load_dataset, Split, SyntheticSpec};
    use crate::model::LinearPixelClassifier;
    use ndarray::Array1;

    fn synthetic(n: usize, seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            n,
            image_size: 4,
            seed,
            noise: 0.0,
            texture: 0.0,
            ..Default::default()
        };
        load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec)).unwrap()
    }

    fn budget(eps: f64, steps: usize) -> PerturbBudget {
        PerturbBudget {
            epsilon: eps,
            steps,
            step_size: eps / 4.0 + 1e-9,
            init: AttackInit::Zero,
            norm: AttackNorm::LInf,
        }
    }

    #[test]
    fn constant_model_gets_first_class_accuracy() {
        // argmax of equal logits is class 0; the balanced two-class set
        // gives exactly 0.5
        let data = synthetic(40, 0);
        let clf = LinearPixelClassifier::constant(2, 16);
        let sa = eval_sa(&clf, &data, 16).unwrap();
        assert!((sa - 0.5).abs() < 1e-12);
        // attacks cannot move a constant model
        let ra = eval_ra(&clf, &data, &budget(0.3, 5), 16, 0).unwrap();
        assert_eq!(ra, sa);
    }

    #[test]
    fn zero_epsilon_ra_equals_sa() {
        let data = synthetic(30, 1);
        let mut rng = rng_for(5, &[stream::INIT]);
        use rand::Rng;
        let w = Array2::from_shape_fn((2, 16), |_| rng.gen_range(-1.0..1.0));
        let clf = LinearPixelClassifier::new(w, Array1::zeros(2));
        let sa = eval_sa(&clf, &data, 8).unwrap();
        let ra = eval_ra(&clf, &data, &budget(0.0, 5), 8, 0).unwrap();
        assert_eq!(sa, ra);
    }

    #[test]
    fn linear_margin_ra_matches_analytic_count() {
        // RA of a binary linear model equals the fraction of samples whose
        // margin survives the worst-case linf shift eps*||w1-w0||_1
        let data = synthetic(200, 2);
        let mut rng = rng_for(6, &[stream::INIT]);
        use rand::Rng;
        let w = Array2::from_shape_fn((2, 16), |_| rng.gen_range(-0.5..0.5));
        let b = Array1::from_vec(vec![0.05, -0.05]);
        let clf = LinearPixelClassifier::new(w.clone(), b.clone());
        let eps = 0.02;
        let wdiff_l1: f64 = (0..16).map(|j| (w[(0, j)] - w[(1, j)]).abs()).sum();

        let mut expected_correct = 0usize;
        let mut boundary = 0usize;
        for batch in data.batches(64) {
            let logits = clf.logits(&batch.images.data).unwrap();
            for (i, &y) in batch.labels.iter().enumerate() {
                let margin = logits[(i, y)] - logits[(i, 1 - y)];
                // pixels interior to [0,1] at eps distance: the analytic
                // worst case is exact
                if (margin - eps * wdiff_l1).abs() < 1e-9 {
                    boundary += 1;
                } else if margin > eps * wdiff_l1 {
                    expected_correct += 1;
                }
            }
        }
        assert_eq!(boundary, 0, "degenerate boundary sample");
        let ra = eval_ra(&clf, &data, &budget(eps, 60), 64, 0).unwrap();
        let expected = expected_correct as f64 / 200.0;
        assert!(
            (ra - expected).abs() < 1e-12,
            "ra {ra} vs analytic {expected}"
        );
    }

    #[test]
    fn sweep_shape_eps0_column_and_files() {
        let data = synthetic(30, 3);
        let mut rng = rng_for(7, &[stream::INIT]);
        use rand::Rng;
        let w = Array2::from_shape_fn((2, 16), |_| rng.gen_range(-1.0..1.0));
        let clf = LinearPixelClassifier::new(w, Array1::zeros(2));
        let eps_list = [0.0, 0.01, 0.05];
        let steps_list = [1usize, 5];
        let report = eval_sweep(
            &clf,
            &data,
            &eps_list,
            &steps_list,
            &budget(0.05, 5),
            16,
            0,
            "fp",
        )
        .unwrap();
        assert_eq!(report.ra_grid.len(), eps_list.len() * steps_list.len());
        for &s in &steps_list {
            assert_eq!(report.ra_at(0.0, s).unwrap(), report.sa);
        }
        // RA never exceeds SA beyond noise
        for c in &report.ra_grid {
            assert!(c.ra <= report.sa + 0.005);
        }
        let dir = tempfile::tempdir().unwrap();
        report.save_json(&dir.path().join("report.json")).unwrap();
        report.save_csv(&dir.path().join("report.csv")).unwrap();
        report.save_plots(dir.path(), 0.05).unwrap();
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("ra_vs_epsilon.png").exists());
        assert!(dir.path().join("ra_vs_steps.png").exists());
        let loaded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(loaded.ra_grid.len(), report.ra_grid.len());
    }

    #[test]
    fn sweep_is_deterministic_with_zero_init() {
        let data = synthetic(20, 4);
        let mut rng = rng_for(8, &[stream::INIT]);
        use rand::Rng;
        let w = Array2::from_shape_fn((2, 16), |_| rng.gen_range(-1.0..1.0));
        let clf = LinearPixelClassifier::new(w, Array1::zeros(2));
        let run = || {
            eval_sweep(
                &clf,
                &data,
                &[0.0, 0.02],
                &[1, 3],
                &budget(0.02, 3),
                8,
                0,
                "fp",
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        for (ca, cb) in a.ra_grid.iter().zip(b.ra_grid.iter()) {
            assert_eq!(ca.ra, cb.ra);
        }
    }
}
