//! Query-only oracles and pseudo-Siamese distillation of a substitute
//! classifier from their posteriors.

mod remote;
mod train;

pub use remote::{serve_oracle, RemoteOracle};
pub use train::{
    distill_loss_and_grads, train_substitute, train_substitute_resumable, DistillConfig,
    DistillEpochRecord, DistillProgress, DistillState, LossParts, LossVariant, TrainedSubstitute,
};

use std::sync::atomic::{AtomicU64, Ordering};

use crate::audiofeat::MelSpectrogram;
use crate::error::{Error, Result};
use crate::numkernel::{self, ProbVector};
use crate::speakernet::SpeakerClassifier;

/// Anything that answers `mel → posterior` and nothing else.
pub trait PosteriorOracle: Sync {
    fn query(&self, m: &MelSpectrogram) -> Result<ProbVector>;
    fn query_count(&self) -> u64;
    fn n_classes(&self) -> usize;
}

/// In-process oracle over a hidden classifier, with query accounting.
#[derive(Debug)]
pub struct BlackBoxOracle {
    backing: SpeakerClassifier,
    count: AtomicU64,
    budget: Option<u64>,
}

impl BlackBoxOracle {
    pub fn new(backing: SpeakerClassifier, budget: Option<u64>) -> Self {
        BlackBoxOracle {
            backing,
            count: AtomicU64::new(0),
            budget,
        }
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    /// Checkpoint hash of the hidden classifier, for tamper checks.
    pub fn fingerprint(&self) -> String {
        self.backing.fingerprint()
    }
}

impl PosteriorOracle for BlackBoxOracle {
    fn query(&self, m: &MelSpectrogram) -> Result<ProbVector> {
        let budget = self.budget.unwrap_or(u64::MAX);
        self.count
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                (c < budget).then_some(c + 1)
            })
            .map_err(|used| Error::BudgetExhausted { used, budget })?;
        self.backing.forward(m)
    }

    fn query_count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    fn n_classes(&self) -> usize {
        self.backing.n_speakers()
    }
}

/// `KL(p1 ‖ p1')`: consistency between the clean and the noisy branch.
pub fn intrinsic_loss(p1: &ProbVector, p1_noisy: &ProbVector) -> Result<f64> {
    numkernel::kl_divergence(p1, p1_noisy)
}

/// Returns `(KL(p1 ‖ p2) + KL(p1' ‖ p2), KL(p1' ‖ p2))`.
pub fn structural_loss(
    p1: &ProbVector,
    p1_noisy: &ProbVector,
    p2: &ProbVector,
) -> Result<(f64, f64)> {
    let aux = numkernel::kl_divergence(p1_noisy, p2)?;
    Ok((numkernel::kl_divergence(p1, p2)? + aux, aux))
}

pub fn total_loss(p1: &ProbVector, p1_noisy: &ProbVector, p2: &ProbVector) -> Result<f64> {
    Ok(intrinsic_loss(p1, p1_noisy)? + structural_loss(p1, p1_noisy, p2)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;
    use crate::speakernet::Pooling;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn mel() -> MelSpectrogram {
        MelSpectrogram::new(Matrix::from_fn(3, 4, |r, c| (r + c) as f64 * -2.0)).unwrap()
    }

    #[test]
    fn queries_are_counted_and_deterministic() {
        let o = BlackBoxOracle::new(
            SpeakerClassifier::new(4, Pooling::Mean, &[3], 3, 1).unwrap(),
            None,
        );
        let a = o.query(&mel()).unwrap();
        let b = o.query(&mel()).unwrap();
        assert_eq!(a, b);
        assert_eq!(o.query_count(), 2);
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(o.n_classes(), 3);
    }

    #[test]
    fn budget_is_enforced() {
        let c = SpeakerClassifier::new(4, Pooling::Mean, &[3], 3, 1).unwrap();
        let zero = BlackBoxOracle::new(c.clone(), Some(0));
        assert!(matches!(
            zero.query(&mel()),
            Err(Error::BudgetExhausted { used: 0, budget: 0 })
        ));
        let two = BlackBoxOracle::new(c, Some(2));
        two.query(&mel()).unwrap();
        two.query(&mel()).unwrap();
        assert!(two.query(&mel()).is_err());
        assert_eq!(two.query_count(), 2);
    }

    #[test]
    fn closed_form_values() {
        let half = pv(&[0.5, 0.5]);
        let skew = pv(&[0.9, 0.1]);
        assert_eq!(intrinsic_loss(&half, &half).unwrap(), 0.0);
        assert!((intrinsic_loss(&half, &skew).unwrap() - 0.5108).abs() < 1e-3);
        assert!((intrinsic_loss(&skew, &half).unwrap() - 0.3681).abs() < 1e-3);

        assert_eq!(structural_loss(&half, &half, &half).unwrap(), (0.0, 0.0));
        let (l_str, l_aux) = structural_loss(&half, &half, &skew).unwrap();
        assert!((l_aux - 0.5108).abs() < 1e-3);
        assert!((l_str - 1.0217).abs() < 2e-3);
        let (l_str, l_aux) = structural_loss(&skew, &half, &skew).unwrap();
        assert_eq!(l_str, l_aux);

        assert_eq!(total_loss(&half, &half, &half).unwrap(), 0.0);
        assert!(total_loss(&half, &pv(&[0.2, 0.3, 0.5]), &half).is_err());
    }

    fn posterior(n: usize) -> impl Strategy<Value = ProbVector> {
        proptest::collection::vec(-8.0f64..8.0, n).prop_map(|z| numkernel::softmax(&z).unwrap())
    }

    proptest! {
        #[test]
        fn loss_algebra_holds(
            (p1, p1n, p2) in (2usize..8).prop_flat_map(|n| (posterior(n), posterior(n), posterior(n)))
        ) {
            let ins = intrinsic_loss(&p1, &p1n).unwrap();
            let (l_str, aux) = structural_loss(&p1, &p1n, &p2).unwrap();
            let tot = total_loss(&p1, &p1n, &p2).unwrap();
            prop_assert!(ins >= -1e-9 && aux >= -1e-9 && l_str >= -1e-9);
            prop_assert!(tot >= l_str - 1e-12);
            prop_assert!((tot - l_str - ins).abs() < 1e-9);
            let direct = numkernel::kl_divergence(&p1, &p2).unwrap();
            prop_assert!((l_str - direct - aux).abs() < 1e-9);
        }
    }
}
