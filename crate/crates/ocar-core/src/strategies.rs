//! The four online continual strategies — ER, OCAR, online EWC, and NGD —
//! each consuming (new batch, buffer batch) and mutating the network plus
//! their own optimizer state, together with the τ and λ schedules.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{to_batch, Example};
use crate::kfac::{
    compute_batch_factors, grad_norm_ratio, GradNormRatio, KfacError, KfacState, LayerFactors,
};
use crate::linalg::{Matrix, Vector};
use crate::nn::{
    empirical_fisher_diag, per_example_flat_scores, LabelMode, LayerGrads, Network, NnError,
};
use crate::replay::ReplayBuffer;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Kfac(#[from] KfacError),
    #[error("dense fisher solve failed: {0}")]
    DenseSolve(crate::linalg::LinalgError),
}

/// Escalation cap for τ when a damped factor fails to invert.
pub const MAX_TAU_ESCALATIONS: usize = 3;

/// How many recent new-data batches feed the fallback estimate of the number
/// of classes in the current stream portion.
const CLASS_ESTIMATE_WINDOW: usize = 20;

/// λ schedule selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Class-incremental: λ = n/k with n = distinct buffer classes and k the
    /// classes in the current stream portion (configured, or estimated from
    /// recent batches when absent).
    ClassRatio { classes_per_task: Option<usize> },
    /// Domain-incremental: λ grows by a fixed increment per step.
    TimeGrowth { delta_lambda: f64 },
    Fixed(f64),
}

/// Hyperparameters shared by the strategies (α, schedules, batch protocol).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub delta_tau: f64,
    pub ema_coeff: f64,
    pub inner_steps: usize,
    pub new_batch_size: usize,
    pub buffer_batch_size: usize,
    pub lambda_mode: LambdaMode,
    /// Monte-Carlo label draws per example for Fisher statistics.
    pub n_mc: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.1,
            delta_tau: 0.0,
            ema_coeff: 0.1,
            inner_steps: 1,
            new_batch_size: 10,
            buffer_batch_size: 10,
            lambda_mode: LambdaMode::Fixed(1.0),
            n_mc: 1,
        }
    }
}

/// Per-step diagnostics every strategy reports.
#[derive(Debug, Clone, Serialize)]
pub struct StepInfo {
    pub train_loss: f64,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub grad_ratio: Option<GradNormRatio>,
}

/// λ schedule: one update given the buffer contents and the estimated class
/// count of the current stream portion. A zero class count (or an empty
/// buffer) falls back to λ = 1, the algorithm's initial value.
pub fn lambda_schedule(
    mode: &LambdaMode,
    buffer: &ReplayBuffer,
    current_portion_classes: usize,
    prev_lambda: f64,
) -> f64 {
    match mode {
        LambdaMode::ClassRatio { .. } => {
            if buffer.is_empty() {
                return 1.0;
            }
            let n = match buffer.distinct_classes() {
                Ok(n) => n,
                Err(_) => return 1.0,
            };
            if n == 0 || current_portion_classes == 0 {
                return 1.0;
            }
            n as f64 / current_portion_classes as f64
        }
        LambdaMode::TimeGrowth { delta_lambda } => prev_lambda + delta_lambda,
        LambdaMode::Fixed(v) => *v,
    }
}

fn concat_batches(new_batch: &[Example], buf_batch: &[Example]) -> (Vec<Example>, Vec<bool>) {
    let mut combined = Vec::with_capacity(new_batch.len() + buf_batch.len());
    combined.extend_from_slice(new_batch);
    combined.extend_from_slice(buf_batch);
    let mut mask = vec![false; new_batch.len()];
    mask.extend(std::iter::repeat_n(true, buf_batch.len()));
    (combined, mask)
}

fn flat_grads(grads: &[LayerGrads]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(&g.weight.data);
        out.extend_from_slice(&g.bias.data);
    }
    out
}

fn grads_from_flat(net: &Network, flat: &[f64]) -> Vec<LayerGrads> {
    let mut out = Vec::with_capacity(net.layers.len());
    let mut off = 0;
    for layer in &net.layers {
        let wn = layer.weight.data.len();
        let weight = Matrix {
            rows: layer.weight.rows,
            cols: layer.weight.cols,
            data: flat[off..off + wn].to_vec(),
        };
        off += wn;
        let bn = layer.bias.len();
        let bias = Vector {
            data: flat[off..off + bn].to_vec(),
        };
        off += bn;
        out.push(LayerGrads { weight, bias });
    }
    out
}

/// One ER step: plain SGD on the mean loss over the concatenated batch, no
/// distinction between new and buffer data. Returns the batch loss.
pub fn er_step(
    net: &mut Network,
    new_batch: &[Example],
    buf_batch: &[Example],
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<f64, StrategyError> {
    let (combined, _) = concat_batches(new_batch, buf_batch);
    let (inputs, targets) = to_batch(&combined);
    let cache = net.forward(&inputs)?;
    let (loss, back) = net.loss_and_grad(&cache, &targets, LabelMode::TrueLabels, rng)?;
    net.apply_update(&back.layer_grads, alpha)?;
    Ok(loss)
}

/// OCAR: K-FAC-preconditioned replay with τ and λ schedules.
#[derive(Debug, Clone)]
pub struct OcarStrategy {
    pub hp: HyperParams,
    pub kfac: KfacState,
    recent_batch_classes: VecDeque<BTreeSet<usize>>,
}

impl OcarStrategy {
    /// Fresh state; τ starts at the learning rate and λ at 1.
    pub fn new(hp: HyperParams, num_layers: usize) -> Self {
        let kfac = KfacState::new(num_layers, hp.ema_coeff, hp.alpha, 1.0);
        OcarStrategy {
            hp,
            kfac,
            recent_batch_classes: VecDeque::new(),
        }
    }

    /// Estimated number of classes in the current stream portion: the
    /// configured value when present, otherwise the union of class ids over
    /// the last few new-data batches.
    fn current_portion_classes(&self, new_batch: &[Example]) -> usize {
        if let LambdaMode::ClassRatio { classes_per_task: Some(k) } = self.hp.lambda_mode {
            return k;
        }
        let mut union: BTreeSet<usize> = new_batch
            .iter()
            .filter_map(|e| e.target.class_id())
            .collect();
        for set in &self.recent_batch_classes {
            union.extend(set.iter().copied());
        }
        union.len()
    }

    fn remember_batch_classes(&mut self, new_batch: &[Example]) {
        let set: BTreeSet<usize> = new_batch
            .iter()
            .filter_map(|e| e.target.class_id())
            .collect();
        self.recent_batch_classes.push_back(set);
        while self.recent_batch_classes.len() > CLASS_ESTIMATE_WINDOW {
            self.recent_batch_classes.pop_front();
        }
    }

    /// One inner step `s` (1-based) of the per-batch loop: schedule updates,
    /// factor refresh at s = 1, preconditioned parameter update.
    #[allow(clippy::too_many_arguments)]
    pub fn ocar_step(
        &mut self,
        net: &mut Network,
        new_batch: &[Example],
        buf_batch: &[Example],
        s: usize,
        classifier_grew: bool,
        buffer: &ReplayBuffer,
        rng: &mut impl Rng,
    ) -> Result<StepInfo, StrategyError> {
        let (combined, mask) = concat_batches(new_batch, buf_batch);
        let (inputs, targets) = to_batch(&combined);
        let cache = net.forward(&inputs)?;
        let (loss, back) = net.loss_and_grad(&cache, &targets, LabelMode::TrueLabels, rng)?;

        self.kfac.tau += self.hp.delta_tau;
        let k = self.current_portion_classes(new_batch);
        self.kfac.lambda = lambda_schedule(&self.hp.lambda_mode, buffer, k, self.kfac.lambda);

        if s == 1 {
            // Fisher statistics: sampled labels, λ-weighted buffer influence;
            // averaged over n_mc draws when configured
            let mut factors: Option<Vec<LayerFactors>> = None;
            for _ in 0..self.hp.n_mc.max(1) {
                let (_, fisher) =
                    net.loss_and_grad(&cache, &targets, LabelMode::SampledLabels, rng)?;
                let batch = compute_batch_factors(&cache, &fisher, &mask, self.kfac.lambda)?;
                factors = Some(match factors {
                    None => batch,
                    Some(acc) => acc
                        .into_iter()
                        .zip(batch)
                        .map(|(a, b)| LayerFactors {
                            a: a.a.add(&b.a),
                            g: a.g.add(&b.g),
                        })
                        .collect(),
                });
            }
            let n_mc = self.hp.n_mc.max(1) as f64;
            let averaged: Vec<LayerFactors> = factors
                .unwrap()
                .into_iter()
                .map(|f| LayerFactors {
                    a: f.a.scale(1.0 / n_mc),
                    g: f.g.scale(1.0 / n_mc),
                })
                .collect();
            self.kfac.ema_update(averaged, classifier_grew)?;
            self.kfac.invert_damped_escalating(MAX_TAU_ESCALATIONS)?;
        }

        let pre = self.kfac.precondition(&back.layer_grads)?;
        let ratio = grad_norm_ratio(&pre, &back.layer_grads, self.hp.alpha);
        net.apply_update(&pre, self.hp.alpha)?;
        Ok(StepInfo {
            train_loss: loss,
            tau: Some(self.kfac.tau),
            lambda: Some(self.kfac.lambda),
            grad_ratio: Some(ratio),
        })
    }

    /// Full per-batch observation: S inner steps, then the class-window
    /// bookkeeping for the λ fallback estimator.
    pub fn observe_batch(
        &mut self,
        net: &mut Network,
        new_batch: &[Example],
        buf_batch: &[Example],
        classifier_grew: bool,
        buffer: &ReplayBuffer,
        rng: &mut impl Rng,
    ) -> Result<StepInfo, StrategyError> {
        let mut info = None;
        for s in 1..=self.hp.inner_steps.max(1) {
            let grew = classifier_grew && s == 1;
            info = Some(self.ocar_step(net, new_batch, buf_batch, s, grew, buffer, rng)?);
        }
        self.remember_batch_classes(new_batch);
        Ok(info.unwrap())
    }
}

/// Online EWC: joint replay loss plus a Fisher-weighted quadratic penalty on
/// per-step weight movement. The Fisher diagonal is the empirical one
/// (squared true-label gradients) computed on buffer data only.
#[derive(Debug, Clone)]
pub struct EwcStrategy {
    pub alpha: f64,
    pub penalty: f64,
    pub ema_coeff: f64,
    pub inner_steps: usize,
    fisher: Option<Vec<LayerGrads>>,
    prev_weights: Option<Vec<LayerGrads>>,
}

impl EwcStrategy {
    pub fn new(alpha: f64, penalty: f64, ema_coeff: f64) -> Self {
        EwcStrategy {
            alpha,
            penalty,
            ema_coeff,
            inner_steps: 1,
            fisher: None,
            prev_weights: None,
        }
    }

    pub fn fisher(&self) -> Option<&[LayerGrads]> {
        self.fisher.as_deref()
    }

    /// Force the Fisher diagonal (tests).
    pub fn set_fisher(&mut self, fisher: Vec<LayerGrads>) {
        self.fisher = Some(fisher);
    }

    fn params_of(net: &Network) -> Vec<LayerGrads> {
        net.layers
            .iter()
            .map(|l| LayerGrads {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect()
    }

    /// Grow stored per-parameter state to the network's current shapes,
    /// zero-filling new Fisher entries and anchoring new weights at their
    /// current values (zero initial penalty).
    fn resize_to(net: &Network, stored: &mut [LayerGrads], fill_from_net: bool) {
        for (l, layer) in net.layers.iter().enumerate() {
            let s = &mut stored[l];
            if s.weight.rows == layer.weight.rows {
                continue;
            }
            let mut weight = if fill_from_net {
                layer.weight.clone()
            } else {
                Matrix::zeros(layer.weight.rows, layer.weight.cols)
            };
            let mut bias = if fill_from_net {
                layer.bias.clone()
            } else {
                Vector::zeros(layer.bias.len())
            };
            for i in 0..s.weight.rows {
                weight.row_mut(i).copy_from_slice(s.weight.row(i));
                bias.data[i] = s.bias.data[i];
            }
            *s = LayerGrads { weight, bias };
        }
    }

    /// Penalty gradient `2·penalty·F ∘ (w − w_prev)`, shaped like the loss
    /// gradient.
    pub fn penalty_grad(&self, net: &Network) -> Vec<LayerGrads> {
        let (fisher, prev) = match (&self.fisher, &self.prev_weights) {
            (Some(f), Some(p)) => (f, p),
            _ => return net.layers.iter().map(LayerGrads::zeros_like).collect(),
        };
        net.layers
            .iter()
            .zip(fisher.iter().zip(prev))
            .map(|(layer, (f, p))| {
                let mut weight = Matrix::zeros(layer.weight.rows, layer.weight.cols);
                for i in 0..weight.data.len() {
                    weight.data[i] = 2.0
                        * self.penalty
                        * f.weight.data[i]
                        * (layer.weight.data[i] - p.weight.data[i]);
                }
                let mut bias = Vector::zeros(layer.bias.len());
                for i in 0..bias.len() {
                    bias.data[i] = 2.0
                        * self.penalty
                        * f.bias.data[i]
                        * (layer.bias.data[i] - p.bias.data[i]);
                }
                LayerGrads { weight, bias }
            })
            .collect()
    }

    /// One EWC step. The Fisher EMA is refreshed from the buffer batch before
    /// the update; the movement anchor becomes this step's pre-update
    /// weights afterwards.
    pub fn observe_batch(
        &mut self,
        net: &mut Network,
        new_batch: &[Example],
        buf_batch: &[Example],
        rng: &mut impl Rng,
    ) -> Result<StepInfo, StrategyError> {
        if let Some(f) = &mut self.fisher {
            Self::resize_to(net, f, false);
        }
        if let Some(p) = &mut self.prev_weights {
            Self::resize_to(net, p, true);
        }

        // Fisher update from buffer data only
        if !buf_batch.is_empty() {
            let (binputs, btargets) = to_batch(buf_batch);
            let bcache = net.forward(&binputs)?;
            let (_, bback) = net.loss_and_grad(&bcache, &btargets, LabelMode::TrueLabels, rng)?;
            let diag = empirical_fisher_diag(net, &bcache, &bback);
            self.fisher = Some(match self.fisher.take() {
                None => diag,
                Some(ema) => ema
                    .into_iter()
                    .zip(diag)
                    .map(|(e, d)| LayerGrads {
                        weight: e
                            .weight
                            .scale(1.0 - self.ema_coeff)
                            .add(&d.weight.scale(self.ema_coeff)),
                        bias: Vector {
                            data: e
                                .bias
                                .data
                                .iter()
                                .zip(&d.bias.data)
                                .map(|(a, b)| (1.0 - self.ema_coeff) * a + self.ema_coeff * b)
                                .collect(),
                        },
                    })
                    .collect(),
            });
        }

        let (combined, _) = concat_batches(new_batch, buf_batch);
        let (inputs, targets) = to_batch(&combined);
        let cache = net.forward(&inputs)?;
        let (loss, back) = net.loss_and_grad(&cache, &targets, LabelMode::TrueLabels, rng)?;
        let pen = self.penalty_grad(net);
        let total: Vec<LayerGrads> = back
            .layer_grads
            .iter()
            .zip(&pen)
            .map(|(g, p)| LayerGrads {
                weight: g.weight.add(&p.weight),
                bias: Vector {
                    data: g
                        .bias
                        .data
                        .iter()
                        .zip(&p.bias.data)
                        .map(|(a, b)| a + b)
                        .collect(),
                },
            })
            .collect();
        let anchor = Self::params_of(net);
        net.apply_update(&total, self.alpha)?;
        self.prev_weights = Some(anchor);
        Ok(StepInfo {
            train_loss: loss,
            tau: None,
            lambda: None,
            grad_ratio: None,
        })
    }
}

/// NGD state: a dense Fisher EMA for the convex setting, or a K-FAC state
/// with fixed λ = 1 and fixed damping for networks.
#[derive(Debug, Clone)]
pub enum NgdState {
    Dense { fisher: Option<Matrix> },
    Kfac(KfacState),
}

/// Natural gradient descent with an EMA of the model Fisher and no schedules.
#[derive(Debug, Clone)]
pub struct NgdStrategy {
    pub alpha: f64,
    pub damping: f64,
    pub ema_coeff: f64,
    pub inner_steps: usize,
    pub state: NgdState,
}

impl NgdStrategy {
    pub fn dense(alpha: f64, damping: f64, ema_coeff: f64) -> Self {
        NgdStrategy {
            alpha,
            damping,
            ema_coeff,
            inner_steps: 1,
            state: NgdState::Dense { fisher: None },
        }
    }

    pub fn kfac(alpha: f64, damping: f64, ema_coeff: f64, num_layers: usize) -> Self {
        NgdStrategy {
            alpha,
            damping,
            ema_coeff,
            inner_steps: 1,
            state: NgdState::Kfac(KfacState::new(num_layers, ema_coeff, damping, 1.0)),
        }
    }

    /// Force the dense Fisher (tests).
    pub fn set_dense_fisher(&mut self, fisher: Matrix) {
        self.state = NgdState::Dense { fisher: Some(fisher) };
    }

    pub fn observe_batch(
        &mut self,
        net: &mut Network,
        new_batch: &[Example],
        buf_batch: &[Example],
        classifier_grew: bool,
        rng: &mut impl Rng,
    ) -> Result<StepInfo, StrategyError> {
        let (combined, mask) = concat_batches(new_batch, buf_batch);
        let (inputs, targets) = to_batch(&combined);
        let cache = net.forward(&inputs)?;
        let (loss, back) = net.loss_and_grad(&cache, &targets, LabelMode::TrueLabels, rng)?;

        match &mut self.state {
            NgdState::Dense { fisher } => {
                let (_, sampled) =
                    net.loss_and_grad(&cache, &targets, LabelMode::SampledLabels, rng)?;
                let scores = per_example_flat_scores(net, &cache, &sampled);
                let batch_f = scores.transpose().matmul(&scores).scale(1.0 / scores.rows as f64);
                let updated = match fisher.take() {
                    Some(f) if f.rows == batch_f.rows => f
                        .scale(1.0 - self.ema_coeff)
                        .add(&batch_f.scale(self.ema_coeff)),
                    // first batch, or parameter count changed
                    _ => batch_f,
                };
                let mut damped = updated.clone();
                damped.add_diagonal(self.damping);
                let grad = flat_grads(&back.layer_grads);
                let mut rhs = Matrix::zeros(grad.len(), 1);
                for (i, g) in grad.iter().enumerate() {
                    rhs[(i, 0)] = *g;
                }
                let sol = crate::linalg::spd_solve(&damped, &rhs)
                    .map_err(StrategyError::DenseSolve)?;
                let direction = grads_from_flat(net, &sol.data);
                net.apply_update(&direction, self.alpha)?;
                *fisher = Some(updated);
            }
            NgdState::Kfac(state) => {
                let (_, sampled) =
                    net.loss_and_grad(&cache, &targets, LabelMode::SampledLabels, rng)?;
                let factors = compute_batch_factors(&cache, &sampled, &mask, 1.0)?;
                state.ema_update(factors, classifier_grew)?;
                state.invert_damped_escalating(MAX_TAU_ESCALATIONS)?;
                let pre = state.precondition(&back.layer_grads)?;
                net.apply_update(&pre, self.alpha)?;
            }
        }
        Ok(StepInfo {
            train_loss: loss,
            tau: None,
            lambda: None,
            grad_ratio: None,
        })
    }
}

/// Uniform handle over the four strategies for the experiment runner.
#[derive(Debug, Clone)]
pub enum Strategy {
    Er { alpha: f64, inner_steps: usize },
    Ocar(Box<OcarStrategy>),
    Ewc(EwcStrategy),
    Ngd(NgdStrategy),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Er { .. } => "er",
            Strategy::Ocar(_) => "ocar",
            Strategy::Ewc(_) => "ewc",
            Strategy::Ngd(_) => "ngd",
        }
    }

    pub fn observe_batch(
        &mut self,
        net: &mut Network,
        new_batch: &[Example],
        buf_batch: &[Example],
        classifier_grew: bool,
        buffer: &ReplayBuffer,
        rng: &mut impl Rng,
    ) -> Result<StepInfo, StrategyError> {
        match self {
            Strategy::Er { alpha, inner_steps } => {
                let mut loss = 0.0;
                for _ in 0..(*inner_steps).max(1) {
                    loss = er_step(net, new_batch, buf_batch, *alpha, rng)?;
                }
                Ok(StepInfo {
                    train_loss: loss,
                    tau: None,
                    lambda: None,
                    grad_ratio: None,
                })
            }
            Strategy::Ocar(s) => {
                s.observe_batch(net, new_batch, buf_batch, classifier_grew, buffer, rng)
            }
            Strategy::Ewc(s) => {
                let mut info = None;
                for _ in 0..s.inner_steps.max(1) {
                    info = Some(s.observe_batch(net, new_batch, buf_batch, rng)?);
                }
                Ok(info.unwrap())
            }
            Strategy::Ngd(s) => {
                let mut info = None;
                for pass in 0..s.inner_steps.max(1) {
                    let grew = classifier_grew && pass == 0;
                    info = Some(s.observe_batch(net, new_batch, buf_batch, grew, rng)?);
                }
                Ok(info.unwrap())
            }
        }
    }
}
