//! Targeted l∞-bounded perturbation search and the switching reconstruction
//! loss used when training a generator against a classifier.
//!
//! The update is signed projected gradient descent on the cross-entropy of
//! the target label, evaluated at `m + delta` every iteration:
//!
//! ```text
//! delta ← clip_eps(delta − lr · sign(∇ CE(f(m + delta), target)))
//! ```
//!
//! After a success the budget is tightened by `eps_decay` and the search is
//! warm-restarted from the successful delta; the last budget that still
//! succeeds is kept.

use serde::{Deserialize, Serialize};

use crate::audiofeat::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numkernel::{self, Matrix};
use crate::speakernet::SpeakerClassifier;

/// A perturbation with its l∞ budget and step size.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    delta: Matrix,
    eps: f64,
    lr: f64,
}

impl Perturbation {
    /// All-zero perturbation of the given shape.
    pub fn zeros(rows: usize, cols: usize, eps: f64, lr: f64) -> Result<Self> {
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::invalid(format!("budget must be ≥ 0, got {eps}")));
        }
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("step size must be > 0, got {lr}")));
        }
        Ok(Perturbation {
            delta: Matrix::zeros(rows, cols),
            eps,
            lr,
        })
    }

    /// Wraps an existing delta, projecting it into the budget.
    pub fn from_delta(delta: Matrix, eps: f64, lr: f64) -> Result<Self> {
        let mut p = Self::zeros(0, 0, eps, lr)?;
        p.delta = numkernel::clip_linf(&delta, eps)?;
        Ok(p)
    }

    pub fn delta(&self) -> &Matrix {
        &self.delta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn into_delta(self) -> Matrix {
        self.delta
    }

    /// Changes the budget, re-projecting the current delta.
    pub fn with_eps(self, eps: f64) -> Result<Self> {
        Self::from_delta(self.delta, eps, self.lr)
    }
}

/// One signed step: `clip(delta − lr · sign(grad), eps)`.
pub fn pgd_step(p: &Perturbation, grad: &Matrix) -> Result<Perturbation> {
    p.delta.ensure_same_shape(grad, "pgd_step")?;
    let moved = p
        .delta
        .zip_map(grad, |d, g| d - p.lr * numkernel::signum0(g))?;
    Ok(Perturbation {
        delta: numkernel::clip_linf(&moved, p.eps)?,
        eps: p.eps,
        lr: p.lr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub eps_start: f64,
    pub lr: f64,
    /// Iteration cap per budget.
    pub max_iters: usize,
    pub eps_decay: f64,
    pub eps_min: f64,
    /// Stop iterating a budget as soon as the target label is reached.
    pub early_stop: bool,
    /// After a success, keep shrinking the budget while the attack still
    /// succeeds.
    pub tighten: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            eps_start: 0.8,
            lr: 8e-4,
            max_iters: 1000,
            eps_decay: 0.9,
            eps_min: 0.05,
            early_stop: true,
            tighten: true,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_start.is_nan() || self.eps_start < 0.0 {
            return Err(Error::invalid("eps_start must be ≥ 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be ≥ 1"));
        }
        if !(self.eps_decay > 0.0 && self.eps_decay < 1.0) {
            return Err(Error::invalid("eps_decay must lie in (0, 1)"));
        }
        if !(self.eps_min > 0.0) {
            return Err(Error::invalid("eps_min must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    /// Gradient iterations spent over all budgets.
    pub iterations_used: usize,
    pub final_delta: Matrix,
    pub final_eps: f64,
    /// Cross-entropy of the target at `m + final_delta`.
    pub final_loss: f64,
}

impl AttackOutcome {
    pub fn adversarial_mel(&self, m: &MelSpectrogram) -> Result<MelSpectrogram> {
        m.perturbed(&self.final_delta)
    }
}

struct BudgetRun {
    success: bool,
    iterations: usize,
    delta: Perturbation,
}

fn run_budget(
    f: &SpeakerClassifier,
    m: &MelSpectrogram,
    target: usize,
    start: Perturbation,
    cfg: &PerturbationConfig,
) -> Result<BudgetRun> {
    let mut p = start;
    let hits =
        |p: &Perturbation| -> Result<bool> { Ok(f.predict(&m.perturbed(&p.delta)?)? == target) };
    if hits(&p)? {
        return Ok(BudgetRun {
            success: true,
            iterations: 0,
            delta: p,
        });
    }
    for it in 1..=cfg.max_iters {
        let grad = f.grad_input(&m.perturbed(&p.delta)?, target)?;
        p = pgd_step(&p, &grad)?;
        if cfg.early_stop && hits(&p)? {
            return Ok(BudgetRun {
                success: true,
                iterations: it,
                delta: p,
            });
        }
    }
    let success = hits(&p)?;
    Ok(BudgetRun {
        success,
        iterations: cfg.max_iters,
        delta: p,
    })
}

/// Searches for `delta` with `‖delta‖∞ ≤ eps` such that
/// `predict(f, m + delta) = target`.
pub fn optimize_perturbation(
    f: &SpeakerClassifier,
    m: &MelSpectrogram,
    target: usize,
    cfg: &PerturbationConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if target >= f.n_speakers() {
        return Err(Error::invalid(format!(
            "target label {target} out of range for {} speakers",
            f.n_speakers()
        )));
    }
    let start = Perturbation::zeros(m.frames(), m.n_mels(), cfg.eps_start, cfg.lr)?;
    let first = run_budget(f, m, target, start, cfg)?;
    let mut iterations = first.iterations;
    let mut best = first.delta;
    let success = first.success;

    // Zero iterations means the clean input already hits the target; there
    // is nothing to tighten.
    if success && cfg.tighten && iterations > 0 {
        loop {
            let eps = best.eps() * cfg.eps_decay;
            if eps < cfg.eps_min {
                break;
            }
            let run = run_budget(f, m, target, best.clone().with_eps(eps)?, cfg)?;
            iterations += run.iterations;
            if !run.success {
                break;
            }
            best = run.delta;
        }
    }
    let final_loss = f
        .loss_and_grad_input(&m.perturbed(best.delta())?, target)?
        .0;
    Ok(AttackOutcome {
        success,
        iterations_used: iterations,
        final_eps: best.eps(),
        final_delta: best.into_delta(),
        final_loss,
    })
}

/// `m_hat + delta`.
pub fn make_adversarial_target(m_hat: &MelSpectrogram, p: &Perturbation) -> Result<MelSpectrogram> {
    m_hat.perturbed(p.delta())
}

/// Switching loss: reconstruction error when the attack succeeded, distance
/// to the adversarial target otherwise.
pub fn adv_loss(
    m_gt: &MelSpectrogram,
    m_hat: &MelSpectrogram,
    m_adv: &MelSpectrogram,
    attack_succeeded: bool,
) -> Result<f64> {
    m_gt.values()
        .ensure_same_shape(m_hat.values(), "adv_loss")?;
    m_adv
        .values()
        .ensure_same_shape(m_hat.values(), "adv_loss")?;
    if attack_succeeded {
        numkernel::l1_loss(m_gt.values(), m_hat.values())
    } else {
        numkernel::l1_loss(m_adv.values(), m_hat.values())
    }
}

/// One JSON line per attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub target: usize,
    pub success: bool,
    pub iterations: usize,
    pub final_eps: f64,
    pub final_loss: f64,
}

impl AttackRecord {
    pub fn new(sample_id: usize, target: usize, o: &AttackOutcome) -> Self {
        AttackRecord {
            sample_id,
            target,
            success: o.success,
            iterations: o.iterations_used,
            final_eps: o.final_eps,
            final_loss: o.final_loss,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speakernet::Pooling;
    use rand::Rng;

    fn mel(rows: usize, cols: usize, v: f64) -> MelSpectrogram {
        MelSpectrogram::new(Matrix::filled(rows, cols, v)).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = Perturbation::from_delta(Matrix::filled(2, 3, 0.2), 1.0, 0.1).unwrap();
        assert_eq!(pgd_step(&p, &Matrix::zeros(2, 3)).unwrap(), p);
    }

    #[test]
    fn one_step_arithmetic() {
        let p = Perturbation::zeros(2, 2, 1.0, 0.1).unwrap();
        let q = pgd_step(&p, &Matrix::filled(2, 2, 3.0)).unwrap();
        assert!(q.delta().data().iter().all(|&d| d == -0.1));
        assert!(pgd_step(&p, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn random_step_sequences_respect_the_budget() {
        let mut rng = crate::seed::rng(3, &[]);
        for _ in 0..50 {
            let eps = rng.random_range(0.0..1.0);
            let mut p = Perturbation::zeros(3, 4, eps, rng.random_range(0.01..0.5)).unwrap();
            for _ in 0..20 {
                let g = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
                p = pgd_step(&p, &g).unwrap();
                assert!(p.delta().linf_norm() <= eps);
            }
        }
    }

    #[test]
    fn already_on_target_is_a_no_op() {
        let f = SpeakerClassifier::zeros(4, Pooling::Mean, &[3], 3).unwrap();
        let m = mel(2, 4, -10.0);
        let out = optimize_perturbation(&f, &m, 0, &PerturbationConfig::default()).unwrap();
        assert!(out.success);
        assert_eq!(out.iterations_used, 0);
        assert_eq!(out.final_delta.linf_norm(), 0.0);
    }

    #[test]
    fn zero_budget_fails_off_target() {
        let f = SpeakerClassifier::zeros(4, Pooling::Mean, &[3], 3).unwrap();
        let cfg = PerturbationConfig {
            eps_start: 0.0,
            max_iters: 20,
            ..Default::default()
        };
        let out = optimize_perturbation(&f, &mel(2, 4, -10.0), 2, &cfg).unwrap();
        assert!(!out.success);
        assert_eq!(out.final_delta.linf_norm(), 0.0);
        assert!(optimize_perturbation(&f, &mel(2, 4, 0.0), 3, &cfg).is_err());
    }

    #[test]
    fn adversarial_target_and_switching_loss() {
        let m_hat = mel(3, 4, -5.0);
        let zero = Perturbation::zeros(3, 4, 0.8, 0.1).unwrap();
        assert_eq!(make_adversarial_target(&m_hat, &zero).unwrap(), m_hat);

        let full = Perturbation::from_delta(Matrix::filled(3, 4, 0.8), 0.8, 0.1).unwrap();
        let m_adv = make_adversarial_target(&m_hat, &full).unwrap();
        assert!(m_adv.values().data().iter().all(|&v| v == -5.0 + 0.8));

        let m_gt = mel(3, 4, -7.0);
        let l1 = numkernel::l1_loss(m_gt.values(), m_hat.values()).unwrap();
        assert_eq!(adv_loss(&m_gt, &m_hat, &m_adv, true).unwrap(), l1);
        assert_eq!(adv_loss(&m_gt, &m_hat, &m_hat, false).unwrap(), 0.0);
        assert!((adv_loss(&m_gt, &m_hat, &m_adv, false).unwrap() - 0.8).abs() < 1e-12);
        assert!(adv_loss(&m_gt, &m_hat, &mel(2, 4, 0.0), false).is_err());
    }

    #[test]
    fn record_serializes_as_one_line() {
        let o = AttackOutcome {
            success: true,
            iterations_used: 12,
            final_delta: Matrix::zeros(1, 1),
            final_eps: 0.5,
            final_loss: 0.25,
        };
        let line = AttackRecord::new(4, 2, &o).to_json_line();
        assert_eq!(
            line,
            r#"{"sample_id":4,"target":2,"success":true,"iterations":12,"final_eps":0.5,"final_loss":0.25}"#
        );
    }
}
