//! Projected-gradient-descent engines: adversarial contrastive views,
//! pseudo-label CE attacks, and evaluation attacks.
//!
//! All attacks are ℓ∞: iterative sign-gradient ascent projected into the
//! ε-ball and the valid pixel range. Model parameters are frozen during the
//! inner maximization; by default the model runs with eval-mode (running)
//! batch statistics there, which stabilizes attacks on tiny batches.

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_tape, ntxent_multi_view_tape, Temperature};
use crate::model::{BnRoute, DifferentiableClassifier, ForwardCtx, Mode, RobustModel};
use crate::tensor::{Tape, Var};
use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Perturbation initialization.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    Zero,
    UniformRandom,
}

/// Perturbation norm; only ℓ∞ is supported.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackNorm {
    #[default]
    LInf,
}

/// Which batch statistics the model uses inside the attack loop.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackBnMode {
    #[default]
    Eval,
    Train,
}

/// ℓ∞ attack budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbBudget {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub init: AttackInit,
    #[serde(default)]
    pub norm: AttackNorm,
}

impl PerturbBudget {
    /// Pretraining default: 5-step PGD at ε = 8/255 with random start.
    pub fn pretrain_default() -> Self {
        PerturbBudget {
            epsilon: 8.0 / 255.0,
            steps: 5,
            step_size: 2.0 / 255.0,
            init: AttackInit::UniformRandom,
            norm: AttackNorm::LInf,
        }
    }

    /// Evaluation default: 20-step PGD at ε = 8/255, zero init for
    /// deterministic reports.
    pub fn eval_default() -> Self {
        PerturbBudget {
            epsilon: 8.0 / 255.0,
            steps: 20,
            step_size: 2.0 / 255.0,
            init: AttackInit::Zero,
            norm: AttackNorm::LInf,
        }
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = eps;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Validation(format!("epsilon {} invalid", self.epsilon)));
        }
        if self.steps > 0 && self.step_size <= 0.0 {
            return Err(Error::Validation(
                "step_size must be > 0 when steps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// An ℓ∞-bounded image perturbation.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub delta: Array4<f64>,
}

impl Perturbation {
    pub fn zeros_like(x: &Array4<f64>) -> Self {
        Perturbation {
            delta: Array4::zeros(x.dim()),
        }
    }

    /// Perturbed input, clamped into the valid pixel range.
    pub fn apply(&self, x: &Array4<f64>) -> Array4<f64> {
        (x + &self.delta).mapv(|v| v.clamp(0.0, 1.0))
    }

    pub fn linf_norm(&self) -> f64 {
        self.delta.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

fn init_delta(x: &Array4<f64>, budget: &PerturbBudget, rng: &mut impl Rng) -> Array4<f64> {
    let mut delta = match budget.init {
        AttackInit::Zero => Array4::zeros(x.dim()),
        AttackInit::UniformRandom => {
            let e = budget.epsilon;
            if e == 0.0 {
                Array4::zeros(x.dim())
            } else {
                Array4::from_shape_fn(x.dim(), |_| rng.gen_range(-e..=e))
            }
        }
    };
    project(&mut delta, x, budget.epsilon);
    delta
}

/// Projects `delta` into the ε-ball and keeps `x + delta` inside `[0,1]`.
fn project(delta: &mut Array4<f64>, x: &Array4<f64>, epsilon: f64) {
    ndarray::Zip::from(&mut *delta).and(x).for_each(|d, &xv| {
        let clipped = d.clamp(-epsilon, epsilon);
        *d = (xv + clipped).clamp(0.0, 1.0) - xv;
    });
}

/// Joint PGD over several perturbed inputs. `loss_fn` receives one mounted
/// leaf per input and must return a scalar loss to maximize.
pub fn pgd_multi(
    loss_fn: &mut dyn FnMut(&Tape, &[Var]) -> Result<Var>,
    xs: &[&Array4<f64>],
    budget: &PerturbBudget,
    rng: &mut impl Rng,
) -> Result<Vec<Perturbation>> {
    budget.validate()?;
    let mut deltas: Vec<Array4<f64>> =
        xs.iter().map(|x| init_delta(x, budget, rng)).collect();
    for step in 0..budget.steps {
        let tape = Tape::new();
        let leaves: Vec<Var> = xs
            .iter()
            .zip(&deltas)
            .map(|(x, d)| tape.leaf((*x + d).into_dyn()))
            .collect();
        let loss = loss_fn(&tape, &leaves)?;
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Attack(format!(
                "non-finite attack loss {loss_val} at step {step}"
            )));
        }
        let grads = tape.backward(loss);
        for ((x, delta), &leaf) in xs.iter().zip(deltas.iter_mut()).zip(leaves.iter()) {
            let g = grads.wrt_or_zeros(leaf, x.shape());
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Attack(format!(
                    "non-finite gradient at step {step} (loss {loss_val})"
                )));
            }
            // f64::signum maps 0.0 to 1.0; PGD wants a true sign
            let step_arr = g.mapv(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }) * budget.step_size;
            *delta += &step_arr
                .into_dimensionality::<ndarray::Ix4>()
                .expect("gradient rank");
            project(delta, x, budget.epsilon);
        }
    }
    Ok(deltas.into_iter().map(|delta| Perturbation { delta }).collect())
}

/// Single-input PGD ascent on `loss_fn`.
pub fn pgd(
    loss_fn: &mut dyn FnMut(&Tape, Var) -> Result<Var>,
    x: &Array4<f64>,
    budget: &PerturbBudget,
    rng: &mut impl Rng,
) -> Result<Perturbation> {
    let mut wrapped = |tape: &Tape, vars: &[Var]| loss_fn(tape, vars[0]);
    Ok(pgd_multi(&mut wrapped, &[x], budget, rng)?.remove(0))
}

fn attack_ctx<'t>(tape: &'t Tape, route: BnRoute, bn_mode: AttackBnMode) -> ForwardCtx<'t> {
    let mut ctx = ForwardCtx::new(
        tape,
        match bn_mode {
            AttackBnMode::Eval => Mode::Eval,
            AttackBnMode::Train => Mode::Train,
        },
        route,
    );
    ctx.track_params = false;
    ctx.update_stats = false;
    ctx
}

/// Adversarial view from the 3-view contrastive loss: the perturbation is
/// carried by the original image `x`, with `(τ₁(x), τ₂(x))` fixed. Routes:
/// augmented views through `normal`, the attacked view through `adv_cl`.
pub fn adv_view_3view(
    model: &RobustModel,
    x: &ImageBatch,
    t1x: &ImageBatch,
    t2x: &ImageBatch,
    budget: &PerturbBudget,
    temperature: Temperature,
    bn_mode: AttackBnMode,
    rng: &mut impl Rng,
) -> Result<Perturbation> {
    let mut loss_fn = |tape: &Tape, x_adv: Var| {
        let ctx_n = attack_ctx(tape, BnRoute::Normal, bn_mode);
        let ctx_a = attack_ctx(tape, BnRoute::AdvCl, bn_mode);
        let z1 = model.forward_projection(&ctx_n, model.mount_input(tape, &t1x.data)?);
        let z2 = model.forward_projection(&ctx_n, model.mount_input(tape, &t2x.data)?);
        let z3 = model.forward_projection(&ctx_a, x_adv);
        ntxent_multi_view_tape(tape, &[z1, z2, z3], temperature)
    };
    pgd(&mut loss_fn, &x.data, budget, rng)
}

/// Paired perturbations maximizing the two-view loss over
/// `(τ₁(x)+δ₁, τ₂(x)+δ₂)` jointly (ablation recipe).
pub fn adv_view_paired(
    model: &RobustModel,
    t1x: &ImageBatch,
    t2x: &ImageBatch,
    budget: &PerturbBudget,
    temperature: Temperature,
    bn_mode: AttackBnMode,
    rng: &mut impl Rng,
) -> Result<(Perturbation, Perturbation)> {
    let mut loss_fn = |tape: &Tape, leaves: &[Var]| {
        let ctx_a = attack_ctx(tape, BnRoute::AdvCl, bn_mode);
        let z1 = model.forward_projection(&ctx_a, leaves[0]);
        let z2 = model.forward_projection(&ctx_a, leaves[1]);
        ntxent_multi_view_tape(tape, &[z1, z2], temperature)
    };
    let mut out = pgd_multi(&mut loss_fn, &[&t1x.data, &t2x.data], budget, rng)?;
    let d2 = out.remove(1);
    let d1 = out.remove(0);
    Ok((d1, d2))
}

/// Pseudo-label CE attack: maximizes the ensemble-mean cross-entropy of the
/// selected pseudo heads under the `adv_ce` route.
pub fn adv_ce(
    model: &RobustModel,
    x: &ImageBatch,
    labels_per_head: &[(usize, Vec<usize>)],
    budget: &PerturbBudget,
    bn_mode: AttackBnMode,
    rng: &mut impl Rng,
) -> Result<Perturbation> {
    if labels_per_head.is_empty() {
        return Err(Error::Validation("adv_ce needs at least one head".into()));
    }
    let mut loss_fn = |tape: &Tape, x_adv: Var| {
        let ctx = attack_ctx(tape, BnRoute::AdvCe, bn_mode);
        ensemble_pseudo_ce(model, &ctx, x_adv, labels_per_head)
    };
    pgd(&mut loss_fn, &x.data, budget, rng)
}

/// Mean pseudo-head CE over the ensemble, on an existing context.
pub fn ensemble_pseudo_ce(
    model: &RobustModel,
    ctx: &ForwardCtx,
    x: Var,
    labels_per_head: &[(usize, Vec<usize>)],
) -> Result<Var> {
    let tape = ctx.tape;
    let features = model.forward_features(ctx, x);
    let mut total: Option<Var> = None;
    for (head_index, labels) in labels_per_head {
        let logits = model.pseudo_logits_from_features(ctx, features, *head_index)?;
        let ce = cross_entropy_tape(tape, logits, labels)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce),
            None => ce,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / labels_per_head.len() as f64))
}

/// Evaluation attack: maximizes true-label CE through the classifier.
pub fn eval_attack(
    model: &dyn DifferentiableClassifier,
    images: &ImageBatch,
    labels: &[usize],
    budget: &PerturbBudget,
    rng: &mut impl Rng,
) -> Result<Perturbation> {
    let mut loss_fn = |tape: &Tape, x_adv: Var| {
        let logits = model.logits_tape(tape, x_adv)?;
        cross_entropy_tape(tape, logits, labels)
    };
    pgd(&mut loss_fn, &images.data, budget, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rng_for, stream};
    use crate::model::{Architecture, EncoderConfig, LinearPixelClassifier};
    use ndarray::{Array1, Array2};

    fn budget(eps: f64, steps: usize, step: f64, init: AttackInit) -> PerturbBudget {
        PerturbBudget {
            epsilon: eps,
            steps,
            step_size: step,
            init,
            norm: AttackNorm::LInf,
        }
    }

    fn rand_image(b: usize, c: usize, s: usize, seed: u64) -> ImageBatch {
        let mut rng = rng_for(seed, &[stream::ATTACK, 0]);
        ImageBatch::from_raw(Array4::from_shape_fn((b, c, s, s), |_| {
            rng.gen_range(0.05..0.95)
        }))
    }

    fn small_model(seed: u64) -> RobustModel {
        RobustModel::new(
            EncoderConfig {
                architecture: Architecture::TinyCnn,
                feature_dim: 8,
                projection_dim: 4,
                input_channels: 1,
                input_size: 8,
            },
            seed,
        )
        .unwrap()
    }

    /// loss = Σ w·x over the batch, a linear functional of the input.
    fn linear_loss(w: Array4<f64>) -> impl FnMut(&Tape, Var) -> Result<Var> {
        move |tape, x_adv| {
            let wv = tape.constant(w.clone().into_dyn());
            Ok(tape.sum(tape.mul(x_adv, wv)))
        }
    }

    #[test]
    fn epsilon_zero_gives_zero_delta() {
        let x = rand_image(2, 1, 4, 0);
        let mut rng = rng_for(0, &[stream::ATTACK]);
        let w = Array4::from_elem(x.data.dim(), 1.0);
        let p = pgd(
            &mut linear_loss(w),
            &x.data,
            &budget(0.0, 5, 0.01, AttackInit::UniformRandom),
            &mut rng,
        )
        .unwrap();
        assert!(p.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_steps_zero_init_gives_zero_delta() {
        let x = rand_image(1, 1, 4, 1);
        let mut rng = rng_for(1, &[stream::ATTACK]);
        let w = Array4::from_elem(x.data.dim(), -0.5);
        let p = pgd(
            &mut linear_loss(w),
            &x.data,
            &budget(0.1, 0, 0.01, AttackInit::Zero),
            &mut rng,
        )
        .unwrap();
        assert!(p.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fgsm_equivalence_on_linear_model() {
        // one zero-init step with step_size >= eps lands on eps*sign(w),
        // except where the pixel clamp binds
        let x = rand_image(2, 1, 4, 2);
        let mut rng = rng_for(2, &[stream::ATTACK]);
        let mut w = Array4::from_elem(x.data.dim(), 0.0);
        let mut sgn = 1.0;
        for v in w.iter_mut() {
            *v = sgn * 0.7;
            sgn = -sgn;
        }
        let eps = 0.03;
        let p = pgd(
            &mut linear_loss(w.clone()),
            &x.data,
            &budget(eps, 1, eps, AttackInit::Zero),
            &mut rng,
        )
        .unwrap();
        for ((d, &xv), &wv) in p.delta.iter().zip(x.data.iter()).zip(w.iter()) {
            let expected = ((xv + eps * wv.signum()).clamp(0.0, 1.0)) - xv;
            assert!((d - expected).abs() < 1e-12, "{d} vs {expected}");
        }
        // interior pixels are exactly eps*sign(w)
        assert!(p
            .delta
            .iter()
            .zip(w.iter())
            .any(|(&d, &wv)| (d - eps * wv.signum()).abs() < 1e-15));
    }

    #[test]
    fn ball_and_clamp_invariants_hold() {
        let model = small_model(3);
        let x = rand_image(2, 1, 8, 3);
        let t1 = rand_image(2, 1, 8, 4);
        let t2 = rand_image(2, 1, 8, 5);
        let b = budget(8.0 / 255.0, 3, 2.0 / 255.0, AttackInit::UniformRandom);
        for trial in 0..20 {
            let mut rng = rng_for(trial, &[stream::ATTACK, 7]);
            let p = adv_view_3view(
                &model,
                &x,
                &t1,
                &t2,
                &b,
                Temperature::default(),
                AttackBnMode::Eval,
                &mut rng,
            )
            .unwrap();
            assert!(p.linf_norm() <= b.epsilon + 1e-9);
            let adv = p.apply(&x.data);
            assert!(adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // apply() is a no-op clamp: x+delta already in range
            assert!(adv
                .iter()
                .zip((&x.data + &p.delta).iter())
                .all(|(&a, &b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_init_attack_is_deterministic() {
        let model = small_model(5);
        let x = rand_image(2, 1, 8, 6);
        let t1 = rand_image(2, 1, 8, 7);
        let t2 = rand_image(2, 1, 8, 8);
        let b = budget(0.05, 3, 0.02, AttackInit::Zero);
        let run = || {
            let mut rng = rng_for(9, &[stream::ATTACK]);
            adv_view_3view(
                &model,
                &x,
                &t1,
                &t2,
                &b,
                Temperature::default(),
                AttackBnMode::Eval,
                &mut rng,
            )
            .unwrap()
            .delta
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn three_view_attack_beats_random_noise() {
        let model = small_model(11);
        let b = budget(0.1, 5, 0.03, AttackInit::UniformRandom);
        let t = Temperature::default();
        let clean_loss = |x: &ImageBatch, t1: &ImageBatch, t2: &ImageBatch,
                          delta: &Array4<f64>| {
            let tape = Tape::new();
            let ctx_n = attack_ctx(&tape, BnRoute::Normal, AttackBnMode::Eval);
            let ctx_a = attack_ctx(&tape, BnRoute::AdvCl, AttackBnMode::Eval);
            let z1 =
                model.forward_projection(&ctx_n, tape.constant(t1.data.clone().into_dyn()));
            let z2 =
                model.forward_projection(&ctx_n, tape.constant(t2.data.clone().into_dyn()));
            let adv = (&x.data + delta).mapv(|v| v.clamp(0.0, 1.0));
            let z3 = model.forward_projection(&ctx_a, tape.constant(adv.into_dyn()));
            tape.scalar(ntxent_multi_view_tape(&tape, &[z1, z2, z3], t).unwrap())
        };
        let mut wins = 0;
        for trial in 0..20 {
            let x = rand_image(2, 1, 8, 100 + trial);
            let t1 = rand_image(2, 1, 8, 200 + trial);
            let t2 = rand_image(2, 1, 8, 300 + trial);
            let mut rng = rng_for(trial, &[stream::ATTACK, 1]);
            let p = adv_view_3view(&model, &x, &t1, &t2, &b, t, AttackBnMode::Eval, &mut rng)
                .unwrap();
            let mut noise =
                Array4::from_shape_fn(x.data.dim(), |_| rng.gen_range(-b.epsilon..=b.epsilon));
            project(&mut noise, &x.data, b.epsilon);
            if clean_loss(&x, &t1, &t2, &p.delta) >= clean_loss(&x, &t1, &t2, &noise) {
                wins += 1;
            }
        }
        assert!(wins >= 18, "attack beat noise in only {wins}/20 trials");
    }

    #[test]
    fn paired_attack_contracts() {
        let model = small_model(13);
        let t1 = rand_image(2, 1, 8, 20);
        let t2 = rand_image(2, 1, 8, 21);
        // eps = 0 gives zero perturbations
        let mut rng = rng_for(0, &[stream::ATTACK, 2]);
        let (p1, p2) = adv_view_paired(
            &model,
            &t1,
            &t2,
            &budget(0.0, 3, 0.01, AttackInit::UniformRandom),
            Temperature::default(),
            AttackBnMode::Eval,
            &mut rng,
        )
        .unwrap();
        assert!(p1.delta.iter().all(|&v| v == 0.0));
        assert!(p2.delta.iter().all(|&v| v == 0.0));

        let b = budget(0.08, 4, 0.02, AttackInit::UniformRandom);
        let two_view_loss = |d1: &Array4<f64>, d2: &Array4<f64>| {
            let tape = Tape::new();
            let ctx = attack_ctx(&tape, BnRoute::AdvCl, AttackBnMode::Eval);
            let a1 = (&t1.data + d1).mapv(|v| v.clamp(0.0, 1.0));
            let a2 = (&t2.data + d2).mapv(|v| v.clamp(0.0, 1.0));
            let z1 = model.forward_projection(&ctx, tape.constant(a1.into_dyn()));
            let z2 = model.forward_projection(&ctx, tape.constant(a2.into_dyn()));
            tape.scalar(ntxent_multi_view_tape(&tape, &[z1, z2], Temperature::default()).unwrap())
        };
        let mut wins = 0;
        for trial in 0..20 {
            let mut rng = rng_for(trial, &[stream::ATTACK, 3]);
            let (p1, p2) = adv_view_paired(
                &model,
                &t1,
                &t2,
                &b,
                Temperature::default(),
                AttackBnMode::Eval,
                &mut rng,
            )
            .unwrap();
            assert!(p1.linf_norm() <= b.epsilon + 1e-9);
            assert!(p2.linf_norm() <= b.epsilon + 1e-9);
            let mut n1 =
                Array4::from_shape_fn(t1.data.dim(), |_| rng.gen_range(-b.epsilon..=b.epsilon));
            let mut n2 =
                Array4::from_shape_fn(t2.data.dim(), |_| rng.gen_range(-b.epsilon..=b.epsilon));
            project(&mut n1, &t1.data, b.epsilon);
            project(&mut n2, &t2.data, b.epsilon);
            if two_view_loss(&p1.delta, &p2.delta) >= two_view_loss(&n1, &n2) {
                wins += 1;
            }
        }
        assert!(wins >= 18, "paired attack beat noise in only {wins}/20");
    }

    #[test]
    fn adv_ce_one_step_matches_sign_gradient() {
        let mut model = small_model(17);
        model.attach_pseudo_heads(&[2]);
        let x = rand_image(2, 1, 8, 30);
        let labels = vec![0usize, 1];
        let eps = 0.02;
        // gradient of the head CE at delta = 0
        let tape = Tape::new();
        let ctx = attack_ctx(&tape, BnRoute::AdvCe, AttackBnMode::Eval);
        let leaf = tape.leaf(x.data.clone().into_dyn());
        let loss =
            ensemble_pseudo_ce(&model, &ctx, leaf, &[(0, labels.clone())]).unwrap();
        let grads = tape.backward(loss);
        let g = grads.wrt_or_zeros(leaf, x.data.clone().into_dyn().shape());

        let mut rng = rng_for(31, &[stream::ATTACK]);
        let p = adv_ce(
            &model,
            &x,
            &[(0, labels)],
            &budget(eps, 1, eps, AttackInit::Zero),
            AttackBnMode::Eval,
            &mut rng,
        )
        .unwrap();
        let sign = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        for ((d, &xv), &gv) in p.delta.iter().zip(x.data.iter()).zip(g.iter()) {
            let expected = ((xv + eps * sign(gv)).clamp(0.0, 1.0)) - xv;
            assert!((d - expected).abs() < 1e-12);
        }
        assert!(p.linf_norm() <= eps + 1e-12);
    }

    #[test]
    fn attack_loss_monotone_in_epsilon() {
        let model = small_model(19);
        let x = rand_image(2, 1, 8, 40);
        let t1 = rand_image(2, 1, 8, 41);
        let t2 = rand_image(2, 1, 8, 42);
        let t = Temperature::default();
        let loss_at = |delta: &Array4<f64>| {
            let tape = Tape::new();
            let ctx_n = attack_ctx(&tape, BnRoute::Normal, AttackBnMode::Eval);
            let ctx_a = attack_ctx(&tape, BnRoute::AdvCl, AttackBnMode::Eval);
            let z1 =
                model.forward_projection(&ctx_n, tape.constant(t1.data.clone().into_dyn()));
            let z2 =
                model.forward_projection(&ctx_n, tape.constant(t2.data.clone().into_dyn()));
            let adv = (&x.data + delta).mapv(|v| v.clamp(0.0, 1.0));
            let z3 = model.forward_projection(&ctx_a, tape.constant(adv.into_dyn()));
            tape.scalar(ntxent_multi_view_tape(&tape, &[z1, z2, z3], t).unwrap())
        };
        let mut prev = f64::NEG_INFINITY;
        for eps_num in [2.0, 4.0, 8.0, 16.0] {
            let b = budget(eps_num / 255.0, 10, 2.0 / 255.0, AttackInit::Zero);
            let mut rng = rng_for(50, &[stream::ATTACK]);
            let p =
                adv_view_3view(&model, &x, &t1, &t2, &b, t, AttackBnMode::Eval, &mut rng)
                    .unwrap();
            let l = loss_at(&p.delta);
            assert!(
                l >= prev - 1e-9,
                "loss not monotone in eps: {l} after {prev}"
            );
            prev = l;
        }
    }

    #[test]
    fn constant_logit_classifier_is_unmoved() {
        let clf = LinearPixelClassifier::constant(2, 16);
        let x = rand_image(4, 1, 4, 60);
        let labels = vec![0usize, 1, 0, 1];
        let mut rng = rng_for(0, &[stream::ATTACK]);
        let p = eval_attack(
            &clf,
            &x,
            &labels,
            &budget(0.3, 5, 0.1, AttackInit::Zero),
            &mut rng,
        )
        .unwrap();
        // zero gradients: sign(0) = 0, no movement
        assert!(p.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_margin_oracle() {
        // binary linear classifier: flip iff margin below eps * ||w1-w0||_1
        let dim = 16;
        let mut rng = rng_for(77, &[stream::ATTACK]);
        let w = Array2::from_shape_fn((2, dim), |_| rng.gen_range(-1.0..1.0));
        let bias = Array1::from_vec(vec![0.1, -0.2]);
        let clf = LinearPixelClassifier::new(w.clone(), bias.clone());
        let eps = 0.05;
        let x = ImageBatch::from_raw(Array4::from_shape_fn((50, 1, 4, 4), |_| {
            rng.gen_range(0.3..0.7)
        }));
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let wdiff_l1: f64 = (0..dim).map(|j| (w[(0, j)] - w[(1, j)]).abs()).sum();

        let logits = clf.logits(&x.data).unwrap();
        let mut rng2 = rng_for(78, &[stream::ATTACK]);
        let p = eval_attack(
            &clf,
            &x,
            &labels,
            &budget(eps, 40, eps / 4.0, AttackInit::Zero),
            &mut rng2,
        )
        .unwrap();
        let adv_logits = clf.logits(&p.apply(&x.data)).unwrap();
        for i in 0..50 {
            let y = labels[i];
            let margin = logits[(i, y)] - logits[(i, 1 - y)];
            if margin < 0.0 {
                continue; // already misclassified
            }
            let adv_margin = adv_logits[(i, y)] - adv_logits[(i, 1 - y)];
            let predicted_flip = margin < eps * wdiff_l1;
            // interior pixels: attack shifts margin by exactly eps*||w||_1
            if (margin - eps * wdiff_l1).abs() > 1e-6 {
                assert_eq!(
                    adv_margin < 0.0,
                    predicted_flip,
                    "sample {i}: margin {margin}, threshold {}",
                    eps * wdiff_l1
                );
            }
        }
    }
}
