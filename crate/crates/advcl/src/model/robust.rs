//! The robust model: encoder with routed batch norm, projection head,
//! pseudo-label classifier heads, and the downstream classifier.

use super::encoder::{Encoder, EncoderConfig};
use super::layers::{BnRoute, ForwardCtx, Linear, Mode, Param, ParamInit, TriBatchNorm};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array4};

pub struct RobustModel {
    pub config: EncoderConfig,
    pub seed: u64,
    pub encoder: Encoder,
    proj1: Linear,
    proj2: Linear,
    pseudo_heads: Vec<(usize, Linear)>,
    classifier: Option<(usize, Linear)>,
    init: ParamInit,
}

impl RobustModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(seed);
        let encoder = Encoder::new(&mut init, &config);
        let proj1 = Linear::new(&mut init, "proj.fc1", config.feature_dim, config.feature_dim);
        let proj2 = Linear::new(
            &mut init,
            "proj.fc2",
            config.feature_dim,
            config.projection_dim,
        );
        Ok(RobustModel {
            config,
            seed,
            encoder,
            proj1,
            proj2,
            pseudo_heads: Vec::new(),
            classifier: None,
            init,
        })
    }

    /// One linear head per pseudo-label granularity.
    pub fn attach_pseudo_heads(&mut self, k_list: &[usize]) {
        self.pseudo_heads = k_list
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                (
                    k,
                    Linear::new(
                        &mut self.init,
                        &format!("pseudo.{i}"),
                        self.config.feature_dim,
                        k,
                    ),
                )
            })
            .collect();
    }

    /// Downstream classification head.
    pub fn attach_classifier(&mut self, num_classes: usize) {
        self.classifier = Some((
            num_classes,
            Linear::new(
                &mut self.init,
                "classifier",
                self.config.feature_dim,
                num_classes,
            ),
        ));
    }

    /// Re-randomizes the classifier head (fresh finetuning run).
    pub fn reset_classifier(&mut self, num_classes: usize) {
        self.classifier = None;
        self.attach_classifier(num_classes);
    }

    pub fn num_pseudo_heads(&self) -> usize {
        self.pseudo_heads.len()
    }

    pub fn pseudo_head_widths(&self) -> Vec<usize> {
        self.pseudo_heads.iter().map(|(k, _)| *k).collect()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(|(k, _)| *k)
    }

    /// Mounts an image batch on the tape after validating its shape.
    pub fn mount_input(&self, tape: &Tape, x: &Array4<f64>) -> Result<Var> {
        self.validate_input(x)?;
        Ok(tape.constant(x.clone().into_dyn()))
    }

    pub fn validate_input(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.input_channels {
            return Err(Error::Validation(format!(
                "expected {} channels, got {c}",
                self.config.input_channels
            )));
        }
        if h != self.config.input_size || w != self.config.input_size {
            return Err(Error::Validation(format!(
                "expected {0}x{0} input, got {h}x{w}",
                self.config.input_size
            )));
        }
        Ok(())
    }

    /// Encoder features `[B, feature_dim]`.
    pub fn forward_features(&self, ctx: &ForwardCtx, x: Var) -> Var {
        self.encoder.forward(ctx, x)
    }

    /// Projected embeddings `[B, projection_dim]` (not normalized; the
    /// contrastive loss normalizes).
    pub fn forward_projection(&self, ctx: &ForwardCtx, x: Var) -> Var {
        let f = self.forward_features(ctx, x);
        let h = ctx.tape.relu(self.proj1.forward(ctx, f));
        self.proj2.forward(ctx, h)
    }

    /// Logits of pseudo head `head_index` from shared features.
    pub fn forward_pseudo_logits(
        &self,
        ctx: &ForwardCtx,
        x: Var,
        head_index: usize,
    ) -> Result<Var> {
        let f = self.forward_features(ctx, x);
        self.pseudo_logits_from_features(ctx, f, head_index)
    }

    /// Pseudo-head logits given already-computed features.
    pub fn pseudo_logits_from_features(
        &self,
        ctx: &ForwardCtx,
        features: Var,
        head_index: usize,
    ) -> Result<Var> {
        let (_, head) = self.pseudo_heads.get(head_index).ok_or_else(|| {
            Error::Validation(format!(
                "pseudo head {head_index} out of range ({} heads)",
                self.pseudo_heads.len()
            ))
        })?;
        Ok(head.forward(ctx, features))
    }

    /// Downstream classifier logits.
    pub fn forward_classifier(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        let (_, head) = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::State("classifier head not attached".into()))?;
        let f = self.forward_features(ctx, x);
        Ok(head.forward(ctx, f))
    }

    /// Classifier logits on top of precomputed `[B, feature_dim]` features.
    pub fn classifier_from_features(&self, ctx: &ForwardCtx, features: Var) -> Result<Var> {
        let (_, head) = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::State("classifier head not attached".into()))?;
        Ok(head.forward(ctx, features))
    }

    /// Eval-mode classifier logits as a plain array (no gradients).
    pub fn predict_logits(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let ctx = ForwardCtx::attack(&tape, BnRoute::Normal);
        let input = self.mount_input(&tape, x)?;
        let logits = self.forward_classifier(&ctx, input)?;
        let v = tape.value(logits);
        Ok(v.view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    /// Eval-mode features as a plain array.
    pub fn extract_features(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let ctx = ForwardCtx::attack(&tape, BnRoute::Normal);
        let input = self.mount_input(&tape, x)?;
        let f = self.forward_features(&ctx, input);
        let v = tape.value(f);
        Ok(v.view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    /// All trainable parameters: encoder, projection, pseudo heads,
    /// classifier.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.proj1.params());
        v.extend(self.proj2.params());
        for (_, h) in &self.pseudo_heads {
            v.extend(h.params());
        }
        if let Some((_, h)) = &self.classifier {
            v.extend(h.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.proj1.params_mut());
        v.extend(self.proj2.params_mut());
        for (_, h) in &mut self.pseudo_heads {
            v.extend(h.params_mut());
        }
        if let Some((_, h)) = &mut self.classifier {
            v.extend(h.params_mut());
        }
        v
    }

    /// Encoder + projection-head parameters (the pretraining backbone).
    pub fn backbone_param_ids(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.encoder.params().iter().map(|p| p.id).collect();
        v.extend(self.proj1.params().iter().map(|p| p.id));
        v.extend(self.proj2.params().iter().map(|p| p.id));
        v
    }

    pub fn encoder_param_ids(&self) -> Vec<u32> {
        self.encoder.params().iter().map(|p| p.id).collect()
    }

    pub fn pseudo_param_ids(&self) -> Vec<u32> {
        self.pseudo_heads
            .iter()
            .flat_map(|(_, h)| h.params().into_iter().map(|p| p.id))
            .collect()
    }

    pub fn classifier_param_ids(&self) -> Vec<u32> {
        self.classifier
            .as_ref()
            .map(|(_, h)| h.params().into_iter().map(|p| p.id).collect())
            .unwrap_or_default()
    }

    pub fn bn_layers(&self) -> Vec<&TriBatchNorm> {
        self.encoder.bn_layers()
    }

    /// SHA-256 over parameter names and exact value bytes; used for the
    /// encoder-frozen checks and artifact fingerprints.
    pub fn param_hash(&self, ids: Option<&[u32]>) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in self.params() {
            if let Some(keep) = ids {
                if !keep.contains(&p.id) {
                    continue;
                }
            }
            hasher.update(p.name.as_bytes());
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Hash including BN running statistics (full model state).
    pub fn state_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.param_hash(None).as_bytes());
        for bn in self.bn_layers() {
            for route in BnRoute::ALL {
                let s = bn.stats(route);
                for v in s.mean.iter().chain(s.var.iter()) {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Convenience: single forward pass in the given mode/route returning the
/// projection as a plain array.
pub fn project_batch(
    model: &RobustModel,
    x: &Array4<f64>,
    mode: Mode,
    route: BnRoute,
) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let mut ctx = ForwardCtx::new(&tape, mode, route);
    ctx.track_params = false;
    ctx.update_stats = false;
    let input = model.mount_input(&tape, x)?;
    let z = model.forward_projection(&ctx, input);
    let v = tape.value(z);
    Ok(v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}
