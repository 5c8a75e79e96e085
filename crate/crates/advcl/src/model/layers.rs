//! Building blocks: parameters, forward context, conv / linear layers and
//! triple-routed batch normalization.

use crate::tensor::{Tape, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Batch-norm branch selector. Every normalization layer keeps three
/// independent statistics/affine branches; exactly one is read and updated
/// per forward pass.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnRoute {
    /// Normally transformed data: augmented views and frequency views.
    Normal,
    /// Adversarial examples crafted against the contrastive loss.
    AdvCl,
    /// Adversarial examples crafted against the pseudo-label CE loss.
    AdvCe,
}

impl BnRoute {
    pub fn index(self) -> usize {
        match self {
            BnRoute::Normal => 0,
            BnRoute::AdvCl => 1,
            BnRoute::AdvCe => 2,
        }
    }

    pub const ALL: [BnRoute; 3] = [BnRoute::Normal, BnRoute::AdvCl, BnRoute::AdvCe];
}

/// Train/eval switch for batch statistics.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable array with a model-unique id.
#[derive(Debug)]
pub struct Param {
    pub id: u32,
    pub name: String,
    pub value: ArrayD<f64>,
}

/// Hands out parameter ids and initial values during model construction.
pub struct ParamInit {
    next_id: u32,
    pub rng: rand_chacha::ChaCha12Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            next_id: 0,
            rng: crate::data::rng_for(seed, &[crate::data::stream::INIT, 0xB007]),
        }
    }

    pub fn param(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Param {
        let id = self.next_id;
        self.next_id += 1;
        Param {
            id,
            name: name.into(),
            value,
        }
    }

    /// Kaiming-style normal init for conv/linear weights.
    pub fn kaiming(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Param {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            // Box-Muller from two uniforms
            let u1: f64 = self.rng.gen_range(1e-12..1.0);
            let u2: f64 = self.rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        self.param(name, value)
    }
}

/// Per-pass state: the tape, mode, BN route and parameter bindings.
pub struct ForwardCtx<'t> {
    pub tape: &'t Tape,
    pub mode: Mode,
    pub route: BnRoute,
    /// When false, parameters are mounted as constants (attack loops).
    pub track_params: bool,
    /// When false, train-mode BN skips running-statistics updates.
    pub update_stats: bool,
    bindings: Rc<RefCell<HashMap<u32, Var>>>,
}

impl<'t> ForwardCtx<'t> {
    pub fn new(tape: &'t Tape, mode: Mode, route: BnRoute) -> Self {
        ForwardCtx {
            tape,
            mode,
            route,
            track_params: true,
            update_stats: mode == Mode::Train,
            bindings: Rc::new(RefCell::new(HashMap::new())),
        }
    }

    /// Eval-mode context with frozen parameters, as used inside attacks.
    pub fn attack(tape: &'t Tape, route: BnRoute) -> Self {
        let mut ctx = ForwardCtx::new(tape, Mode::Eval, route);
        ctx.track_params = false;
        ctx
    }

    /// Same pass, different BN route. The parameter bindings are shared, so
    /// a parameter used under several routes is mounted exactly once and
    /// its gradient accumulates across views.
    pub fn with_route(&self, route: BnRoute) -> ForwardCtx<'t> {
        ForwardCtx {
            tape: self.tape,
            mode: self.mode,
            route,
            track_params: self.track_params,
            update_stats: self.update_stats,
            bindings: Rc::clone(&self.bindings),
        }
    }

    /// Mounts a parameter on the tape once per pass.
    pub fn bind(&self, p: &Param) -> Var {
        let mut b = self.bindings.borrow_mut();
        if let Some(&v) = b.get(&p.id) {
            return v;
        }
        let v = if self.track_params {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        b.insert(p.id, v);
        v
    }

    /// Parameter-id → tape-var bindings created during this pass.
    pub fn bindings(&self) -> Vec<(u32, Var)> {
        self.bindings.borrow().iter().map(|(&k, &v)| (k, v)).collect()
    }
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            weight: init.kaiming(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k),
            bias: init.param(format!("{name}.bias"), ArrayD::zeros(vec![cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Var {
        ctx.tape.conv2d(
            x,
            ctx.bind(&self.weight),
            ctx.bind(&self.bias),
            self.stride,
            self.pad,
        )
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(init: &mut ParamInit, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: init.kaiming(format!("{name}.weight"), &[d_out, d_in], d_in),
            bias: init.param(format!("{name}.bias"), ArrayD::zeros(vec![d_out])),
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Var {
        let wx = ctx.tape.matmul_nt(x, ctx.bind(&self.weight));
        ctx.tape.add_bias(wx, ctx.bind(&self.bias))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Running statistics of one batch-norm branch.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Batch normalization with three routed branches. Each branch has its own
/// affine parameters and running statistics; a forward pass touches only the
/// branch selected by the context route.
pub struct TriBatchNorm {
    pub name: String,
    pub gamma: [Param; 3],
    pub beta: [Param; 3],
    stats: RefCell<[BnStats; 3]>,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl TriBatchNorm {
    pub fn new(init: &mut ParamInit, name: &str, channels: usize) -> Self {
        let branch = |init: &mut ParamInit, tag: &str, kind: &str| {
            let v = if kind == "gamma" {
                ArrayD::ones(vec![channels])
            } else {
                ArrayD::zeros(vec![channels])
            };
            init.param(format!("{name}.{kind}.{tag}"), v)
        };
        let gamma = [
            branch(init, "normal", "gamma"),
            branch(init, "adv_cl", "gamma"),
            branch(init, "adv_ce", "gamma"),
        ];
        let beta = [
            branch(init, "normal", "beta"),
            branch(init, "adv_cl", "beta"),
            branch(init, "adv_ce", "beta"),
        ];
        let fresh = BnStats {
            mean: Array1::zeros(channels),
            var: Array1::ones(channels),
        };
        TriBatchNorm {
            name: name.to_string(),
            gamma,
            beta,
            stats: RefCell::new([fresh.clone(), fresh.clone(), fresh]),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Var {
        let r = ctx.route.index();
        let gamma = ctx.bind(&self.gamma[r]);
        let beta = ctx.bind(&self.beta[r]);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps);
                if ctx.update_stats {
                    let mut stats = self.stats.borrow_mut();
                    let s = &mut stats[r];
                    s.mean = &s.mean * (1.0 - self.momentum) + &mean * self.momentum;
                    s.var = &s.var * (1.0 - self.momentum) + &var * self.momentum;
                }
                y
            }
            Mode::Eval => {
                let stats = self.stats.borrow();
                let s = &stats[r];
                ctx.tape
                    .batch_norm_eval(x, gamma, beta, &s.mean, &s.var, self.eps)
            }
        }
    }

    pub fn stats(&self, route: BnRoute) -> BnStats {
        self.stats.borrow()[route.index()].clone()
    }

    pub fn set_stats(&self, route: BnRoute, stats: BnStats) {
        self.stats.borrow_mut()[route.index()] = stats;
    }

    pub fn params(&self) -> Vec<&Param> {
        self.gamma.iter().chain(self.beta.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.gamma.iter_mut().chain(self.beta.iter_mut()).collect()
    }
}
