//! PGD engines: the FGSM closed form on a linear objective, ball/clamp
//! invariants, and the three-view adversarial view.

use advcl::attack::{adv_view_3view, pgd, AttackBnMode, AttackInit, AttackNorm, PerturbBudget};
use advcl::data::{augment, load_dataset, rng_for, stream, AugmentConfig, ImageBatch, Split,
    SyntheticSpec};
use advcl::loss::Temperature;
use advcl::model::{Architecture, EncoderConfig, RobustModel};
use advcl::tensor::{Tape, Var};
use ndarray::Array4;
use std::path::Path;

fn main() -> advcl::Result<()> {
    // FGSM equivalence: one zero-init step of size >= eps on a linear
    // objective lands on eps * sign(w)
    let x = Array4::from_elem((1, 1, 4, 4), 0.5);
    let mut w = Array4::from_elem((1, 1, 4, 4), 0.0);
    for (i, v) in w.iter_mut().enumerate() {
        *v = if i % 2 == 0 { 1.5 } else { -0.7 };
    }
    let eps = 0.05;
    let budget = PerturbBudget {
        epsilon: eps,
        steps: 1,
        step_size: eps,
        init: AttackInit::Zero,
        norm: AttackNorm::LInf,
    };
    let w_for_loss = w.clone();
    let mut loss_fn = move |tape: &Tape, x_adv: Var| -> advcl::Result<Var> {
        let wv = tape.constant(w_for_loss.clone().into_dyn());
        Ok(tape.sum(tape.mul(x_adv, wv)))
    };
    let mut rng = rng_for(0, &[stream::ATTACK]);
    let delta = pgd(&mut loss_fn, &x, &budget, &mut rng)?;
    let exact = delta
        .delta
        .iter()
        .zip(w.iter())
        .all(|(&d, &wv)| (d - eps * wv.signum()).abs() < 1e-12);
    println!("FGSM closed form matched: {exact}");

    // three-view adversarial view on a small model
    let spec = SyntheticSpec {
        n: 8,
        image_size: 16,
        ..Default::default()
    };
    let data = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec))?;
    let batch = data.gather(&[0, 1, 2, 3]);
    let model = RobustModel::new(
        EncoderConfig {
            architecture: Architecture::TinyCnn,
            feature_dim: 16,
            projection_dim: 8,
            input_channels: 1,
            input_size: 16,
        },
        0,
    )?;
    let aug = AugmentConfig::default();
    let t1 = augment(&batch.images, &aug, &mut rng_for(1, &[stream::AUGMENT]));
    let t2 = augment(&batch.images, &aug, &mut rng_for(2, &[stream::AUGMENT]));
    let budget = PerturbBudget::pretrain_default();
    let delta = adv_view_3view(
        &model,
        &batch.images,
        &t1,
        &t2,
        &budget,
        Temperature::default(),
        AttackBnMode::Eval,
        &mut rng_for(3, &[stream::ATTACK]),
    )?;
    let adv = delta.apply(&batch.images.data);
    println!(
        "three-view attack: |delta|_inf = {:.5} <= eps = {:.5}",
        delta.linf_norm(),
        budget.epsilon
    );
    println!(
        "perturbed pixels stay in [0,1]: {}",
        adv.iter().all(|&v| (0.0..=1.0).contains(&v))
    );
    let _ = ImageBatch::from_raw(adv);
    Ok(())
}
