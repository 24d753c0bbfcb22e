//! Per-layer Kronecker-factored Fisher estimation and preconditioning.
//!
//! Each layer's Fisher block is approximated as `Ā ⊗ G` with
//! `Ā = E[ā āᵀ]` over bias-augmented inputs and `G = E[g gᵀ]` over
//! per-example pre-activation gradients taken against sampled labels. Factors
//! are tracked with an EMA, buffer examples enter the expectation with weight
//! λ, and inversion applies factored Tikhonov damping
//! `(A + π√τ·I) ⊗ (G + √τ/π·I)` with the usual trace-balancing π.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, kron, sym_eig, Matrix};
use crate::nn::{BackwardResult, ForwardCache, LayerGrads};

#[derive(Debug, Error)]
pub enum KfacError {
    #[error("layer {layer}: {source}")]
    NotPositiveDefinite {
        layer: usize,
        source: linalg::LinalgError,
    },
    #[error("shape mismatch at layer {layer}: expected {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        got: String,
    },
    #[error("preconditioner inverses are stale; call invert_damped after ema_update")]
    StaleInverse,
    #[error("cannot compute factors from an empty batch")]
    EmptyBatch,
    #[error("no factors accumulated for layer {0} yet")]
    NoFactors(usize),
}

/// One layer's Kronecker factor pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    /// `(in_dim+1)²` second moment of bias-augmented inputs.
    pub a: Matrix,
    /// `out_dim²` second moment of pre-activation output gradients.
    pub g: Matrix,
}

#[derive(Debug, Clone)]
struct LayerInverses {
    a_inv: Matrix,
    g_inv: Matrix,
}

/// EMA state for all layers plus the scalar schedule state.
#[derive(Debug, Clone)]
pub struct KfacState {
    factors: Vec<Option<LayerFactors>>,
    inverses: Option<Vec<LayerInverses>>,
    ema_coeff: f64,
    pub tau: f64,
    pub lambda: f64,
}

/// Damping shifts applied to one layer's factors at a given τ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DampingShifts {
    pub a_shift: f64,
    pub g_shift: f64,
}

/// Eigenvalues of one layer's dense damped block together with the per
/// direction effective damping and step multiplier. For every entry,
/// `multiplier = alpha / (sigma + tau_eff)` holds exactly.
#[derive(Debug, Clone)]
pub struct EffectiveSpectrum {
    pub entries: Vec<SpectrumEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct SpectrumEntry {
    /// Undamped curvature along this eigendirection.
    pub sigma: f64,
    /// Effective Tikhonov shift along this eigendirection (≥ τ).
    pub tau_eff: f64,
    /// Step scaling α/(σ + τ_eff) the preconditioner applies here.
    pub multiplier: f64,
}

/// Result of [`grad_norm_ratio`]; `zero_raw` flags a degenerate denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradNormRatio {
    pub ratio: f64,
    pub zero_raw: bool,
}

impl KfacState {
    /// Fresh state: no factors yet, τ and λ at their initial schedule values.
    pub fn new(num_layers: usize, ema_coeff: f64, tau0: f64, lambda0: f64) -> Self {
        assert!(ema_coeff > 0.0 && ema_coeff <= 1.0, "ema_coeff must be in (0,1]");
        KfacState {
            factors: vec![None; num_layers],
            inverses: None,
            ema_coeff,
            tau: tau0,
            lambda: lambda0,
        }
    }

    /// State with factors injected directly (tests and the ER-reduction path).
    pub fn with_factors(factors: Vec<LayerFactors>, ema_coeff: f64, tau: f64, lambda: f64) -> Self {
        KfacState {
            factors: factors.into_iter().map(Some).collect(),
            inverses: None,
            ema_coeff,
            tau,
            lambda,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.factors.len()
    }

    pub fn ema_coeff(&self) -> f64 {
        self.ema_coeff
    }

    pub fn inverses_fresh(&self) -> bool {
        self.inverses.is_some()
    }

    pub fn factors(&self, layer: usize) -> Option<&LayerFactors> {
        self.factors[layer].as_ref()
    }

    /// Per-layer (trace A, trace G) for step diagnostics.
    pub fn factor_traces(&self) -> Vec<(f64, f64)> {
        self.factors
            .iter()
            .map(|f| match f {
                Some(f) => (f.a.trace(), f.g.trace()),
                None => (0.0, 0.0),
            })
            .collect()
    }

    /// Blend batch factors into the EMA: `F ← (1−γ)·F + γ·F_batch`.
    ///
    /// On the first update a layer's EMA is seeded with the batch factor.
    /// When the classifier grew this step, the last layer's G factor is reset
    /// to the fresh batch factor (its shape changed and old gradient
    /// statistics no longer relate to it) while its A factor keeps the EMA.
    /// Any cached inverses become stale.
    pub fn ema_update(
        &mut self,
        batch: Vec<LayerFactors>,
        classifier_grew: bool,
    ) -> Result<(), KfacError> {
        if batch.len() != self.factors.len() {
            return Err(KfacError::ShapeMismatch {
                layer: 0,
                expected: format!("{} layers", self.factors.len()),
                got: format!("{}", batch.len()),
            });
        }
        let gamma = self.ema_coeff;
        let last = self.factors.len() - 1;
        for (l, fresh) in batch.into_iter().enumerate() {
            let slot = &mut self.factors[l];
            match slot {
                None => *slot = Some(fresh),
                Some(ema) => {
                    let a_match = ema.a.rows == fresh.a.rows;
                    let g_match = ema.g.rows == fresh.g.rows;
                    if !a_match || (!g_match && !(l == last && classifier_grew)) {
                        return Err(KfacError::ShapeMismatch {
                            layer: l,
                            expected: format!("A {0}x{0}, G {1}x{1}", ema.a.rows, ema.g.rows),
                            got: format!("A {0}x{0}, G {1}x{1}", fresh.a.rows, fresh.g.rows),
                        });
                    }
                    ema.a = ema.a.scale(1.0 - gamma).add(&fresh.a.scale(gamma));
                    if l == last && classifier_grew {
                        ema.g = fresh.g;
                    } else {
                        ema.g = ema.g.scale(1.0 - gamma).add(&fresh.g.scale(gamma));
                    }
                }
            }
        }
        self.inverses = None;
        Ok(())
    }

    /// Damping shifts `(π√τ, √τ/π)` for one layer at the current τ.
    pub fn damping_shifts(&self, layer: usize) -> Result<DampingShifts, KfacError> {
        let f = self.factors[layer]
            .as_ref()
            .ok_or(KfacError::NoFactors(layer))?;
        Ok(shifts_for(f, self.tau))
    }

    /// Cache `(A + π√τ·I)⁻¹` and `(G + √τ/π·I)⁻¹` for every layer.
    ///
    /// Fails with `NotPositiveDefinite` when a damped factor cannot be
    /// Cholesky-factored; the caller owns the τ escalation policy.
    pub fn invert_damped(&mut self) -> Result<(), KfacError> {
        let mut inverses = Vec::with_capacity(self.factors.len());
        for (l, f) in self.factors.iter().enumerate() {
            let f = f.as_ref().ok_or(KfacError::NoFactors(l))?;
            let DampingShifts { a_shift, g_shift } = shifts_for(f, self.tau);
            let mut a_damped = f.a.clone();
            a_damped.add_diagonal(a_shift);
            let mut g_damped = f.g.clone();
            g_damped.add_diagonal(g_shift);
            let a_inv = linalg::spd_inverse(&a_damped)
                .map_err(|source| KfacError::NotPositiveDefinite { layer: l, source })?;
            let g_inv = linalg::spd_inverse(&g_damped)
                .map_err(|source| KfacError::NotPositiveDefinite { layer: l, source })?;
            inverses.push(LayerInverses { a_inv, g_inv });
        }
        self.inverses = Some(inverses);
        Ok(())
    }

    /// [`KfacState::invert_damped`] with the retry policy from the algorithm:
    /// on failure multiply τ by 10, at most `max_escalations` times.
    pub fn invert_damped_escalating(&mut self, max_escalations: usize) -> Result<(), KfacError> {
        let mut attempt = 0;
        loop {
            match self.invert_damped() {
                Ok(()) => return Ok(()),
                Err(e @ KfacError::NotPositiveDefinite { .. }) => {
                    if attempt >= max_escalations {
                        return Err(e);
                    }
                    self.tau = if self.tau > 0.0 { self.tau * 10.0 } else { 1e-8 };
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Apply the Kronecker-factored inverse to each layer's `[W|b]` gradient.
    pub fn precondition(&self, grads: &[LayerGrads]) -> Result<Vec<LayerGrads>, KfacError> {
        let inverses = self.inverses.as_ref().ok_or(KfacError::StaleInverse)?;
        if grads.len() != inverses.len() {
            return Err(KfacError::ShapeMismatch {
                layer: 0,
                expected: format!("{} layers", inverses.len()),
                got: format!("{}", grads.len()),
            });
        }
        grads
            .iter()
            .zip(inverses)
            .enumerate()
            .map(|(l, (g, inv))| {
                let combined = g.combined();
                let pre = linalg::kron_precondition(&inv.a_inv, &inv.g_inv, &combined).map_err(
                    |e| KfacError::ShapeMismatch {
                        layer: l,
                        expected: "factor-compatible gradient".into(),
                        got: e.to_string(),
                    },
                )?;
                Ok(LayerGrads::from_combined(&pre))
            })
            .collect()
    }

    /// Eigenvalues of one layer's dense damped block `(A+aI)⊗(G+bI)` with
    /// their undamped curvature, effective damping, and α/(σ+τ_eff) step
    /// multipliers. Diagnostic only; cost is exponential in layer width.
    pub fn effective_spectrum(
        &self,
        layer: usize,
        alpha: f64,
    ) -> Result<EffectiveSpectrum, KfacError> {
        let f = self.factors[layer]
            .as_ref()
            .ok_or(KfacError::NoFactors(layer))?;
        let DampingShifts { a_shift, g_shift } = shifts_for(f, self.tau);
        let mut a_damped = f.a.clone();
        a_damped.add_diagonal(a_shift);
        let mut g_damped = f.g.clone();
        g_damped.add_diagonal(g_shift);
        let damped = kron(&a_damped, &g_damped);
        let undamped = kron(&f.a, &f.g);
        let (vals, vecs) = sym_eig(&damped).map_err(|e| KfacError::ShapeMismatch {
            layer,
            expected: "diagonalizable damped block".into(),
            got: e.to_string(),
        })?;
        let n = vals.len();
        let mut entries = Vec::with_capacity(n);
        for k in 0..n {
            let v: Vec<f64> = (0..n).map(|i| vecs[(i, k)]).collect();
            // damped and undamped blocks share eigenvectors, so the Rayleigh
            // quotient recovers the undamped eigenvalue exactly
            let uv = undamped.matvec(&v);
            let sigma: f64 = v.iter().zip(&uv).map(|(a, b)| a * b).sum();
            let damped_val = vals.data[k];
            entries.push(SpectrumEntry {
                sigma,
                tau_eff: damped_val - sigma,
                multiplier: alpha / damped_val,
            });
        }
        Ok(EffectiveSpectrum { entries })
    }
}

fn shifts_for(f: &LayerFactors, tau: f64) -> DampingShifts {
    let a_mean = f.a.trace() / f.a.rows as f64;
    let g_mean = f.g.trace() / f.g.rows as f64;
    let mut pi = (a_mean / g_mean).sqrt();
    if !pi.is_finite() {
        pi = 1.0;
    }
    let pi = pi.clamp(1e-3, 1e3);
    let sqrt_tau = tau.sqrt();
    DampingShifts {
        a_shift: pi * sqrt_tau,
        g_shift: sqrt_tau / pi,
    }
}

/// Weighted per-batch Kronecker factors.
///
/// Buffer examples (flagged in `buffer_mask`) carry weight λ, new examples
/// weight 1, and the weights are normalized to mean 1 over the batch so the
/// factor scale stays comparable across λ schedules. `fisher_grads` must come
/// from a sampled-label backward pass; λ never touches the loss gradient.
pub fn compute_batch_factors(
    cache: &ForwardCache,
    fisher_grads: &BackwardResult,
    buffer_mask: &[bool],
    lambda: f64,
) -> Result<Vec<LayerFactors>, KfacError> {
    let batch = cache.batch_size();
    if batch == 0 || buffer_mask.is_empty() {
        return Err(KfacError::EmptyBatch);
    }
    assert!(
        lambda >= 0.0 && lambda.is_finite(),
        "buffer weight must be a nonnegative finite scalar, got {lambda}"
    );
    if buffer_mask.len() != batch {
        return Err(KfacError::ShapeMismatch {
            layer: 0,
            expected: format!("{} mask entries", batch),
            got: format!("{}", buffer_mask.len()),
        });
    }
    let raw: Vec<f64> = buffer_mask
        .iter()
        .map(|&b| if b { lambda } else { 1.0 })
        .collect();
    let sum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w * batch as f64 / sum).collect();

    let n_layers = cache.augmented_inputs.len();
    let mut out = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let aug = &cache.augmented_inputs[l];
        let gi = &fisher_grads.output_grads[l];
        out.push(LayerFactors {
            a: weighted_second_moment(aug, &weights),
            g: weighted_second_moment(gi, &weights),
        });
    }
    Ok(out)
}

/// `(1/B)·Σ_b w_b·x_b x_bᵀ` over the rows of `m`.
fn weighted_second_moment(m: &Matrix, weights: &[f64]) -> Matrix {
    let d = m.cols;
    let mut out = Matrix::zeros(d, d);
    for b in 0..m.rows {
        let w = weights[b];
        let row = m.row(b);
        for i in 0..d {
            let wi = w * row[i];
            if wi == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for j in 0..d {
                orow[j] += wi * row[j];
            }
        }
    }
    let inv_b = 1.0 / m.rows as f64;
    for v in out.data.iter_mut() {
        *v *= inv_b;
    }
    out
}

/// `‖α·preconditioned‖₂ / ‖raw‖₂` over all parameters.
pub fn grad_norm_ratio(
    preconditioned: &[LayerGrads],
    raw: &[LayerGrads],
    alpha: f64,
) -> GradNormRatio {
    let pre_sq: f64 = preconditioned.iter().map(|g| g.squared_l2()).sum();
    let raw_sq: f64 = raw.iter().map(|g| g.squared_l2()).sum();
    if raw_sq == 0.0 {
        return GradNormRatio {
            ratio: 0.0,
            zero_raw: true,
        };
    }
    GradNormRatio {
        ratio: alpha * pre_sq.sqrt() / raw_sq.sqrt(),
        zero_raw: false,
    }
}
