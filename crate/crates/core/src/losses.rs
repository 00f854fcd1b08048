//! Supervised and consistency losses, the Gaussian ramp-up weight and their
//! weighted combination.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Gaussian ramp-up `k * exp(-5 (1 - T)^2)` with `T = min(epoch / rampup_epochs, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampUpSchedule {
    pub k: f64,
    pub rampup_epochs: usize,
}

impl Default for RampUpSchedule {
    fn default() -> Self {
        RampUpSchedule {
            k: 1.0,
            rampup_epochs: 24,
        }
    }
}

impl RampUpSchedule {
    /// Ramp-up over 80% of `epochs` (at least one epoch).
    pub fn for_epochs(k: f64, epochs: usize) -> Self {
        RampUpSchedule {
            k,
            rampup_epochs: default_rampup_epochs(epochs),
        }
    }
}

pub fn default_rampup_epochs(epochs: usize) -> usize {
    ((epochs * 4 + 2) / 5).max(1)
}

/// Consistency weight for a zero-based epoch index.
pub fn rampup_weight(epoch: usize, schedule: &RampUpSchedule) -> f64 {
    let horizon = schedule.rampup_epochs.max(1);
    if epoch >= horizon {
        return schedule.k;
    }
    let t = epoch as f64 / horizon as f64;
    schedule.k * math::exp(-5.0 * (1.0 - t) * (1.0 - t))
}

/// Scalar parts of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = sup + lambda * cons`.
pub fn total_loss(sup: f64, cons: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(sup.is_finite() && cons.is_finite() && lambda.is_finite()) {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(LossBreakdown {
        supervised: sup,
        consistency: cons,
        lambda,
        total: sup + lambda * cons,
    })
}

/// Cross-entropy of `probs` against class-id `labels` over labeled samples.
pub fn supervised_ce(tape: &mut Tape, probs: Var, labels: &Tensor, labeled: &[bool]) -> Result<Var> {
    tape.supervised_ce(probs, labels, labeled)
}

/// Per-element mean squared difference between two probability maps.
pub fn consistency_mse(tape: &mut Tape, z: Var, z_tilde: Var) -> Result<Var> {
    tape.consistency_mse(z, z_tilde)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn probs(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)).unwrap()
    }

    #[test]
    fn rampup_examples() {
        let s = RampUpSchedule { k: 1.0, rampup_epochs: 10 };
        assert_eq!(rampup_weight(10, &s), 1.0);
        assert_eq!(rampup_weight(25, &s), 1.0);
        assert!((rampup_weight(0, &s) - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert!((rampup_weight(5, &s) - 0.286_504_796_860_190_1).abs() < 1e-15);
        let k2 = RampUpSchedule { k: 2.5, rampup_epochs: 10 };
        assert_eq!(rampup_weight(10, &k2), 2.5);
    }

    #[test]
    fn default_horizon_is_eighty_percent() {
        assert_eq!(default_rampup_epochs(30), 24);
        assert_eq!(default_rampup_epochs(1), 1);
        assert_eq!(default_rampup_epochs(10), 8);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.4, 3.0, 0.0).unwrap().total, 0.4);
        assert_eq!(total_loss(0.0, 3.0, 0.5).unwrap().total, 1.5);
        assert!((total_loss(0.7, 0.2, 0.5).unwrap().total - 0.8).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn ce_one_hot_and_uniform() {
        let mut tape = Tape::new();
        // 1 sample, 2 classes, 1x2 pixels; labels [1, 0]
        let labels = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let onehot = probs(&mut tape, &[1, 2, 1, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let l = supervised_ce(&mut tape, onehot, &labels, &[true]).unwrap();
        assert!(tape.value(l).data()[0] <= 1e-10);
        let uni = probs(&mut tape, &[1, 2, 1, 2], vec![0.5; 4]);
        let l = supervised_ce(&mut tape, uni, &labels, &[true]).unwrap();
        assert!((tape.value(l).data()[0] - core::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn ce_matches_scalar_loop() {
        let p = [0.2, 0.9, 0.6, 0.35, 0.8, 0.1, 0.4, 0.65, 0.7, 0.25, 0.5, 0.45, 0.3, 0.75, 0.5, 0.55];
        // normalise channel pairs into distributions: [N=2, C=2, H=2, W=2]
        let mut data = vec![0.0; 16];
        for n in 0..2 {
            for px in 0..4 {
                let a = p[n * 8 + px];
                let b = p[n * 8 + 4 + px];
                data[n * 8 + px] = a / (a + b);
                data[n * 8 + 4 + px] = b / (a + b);
            }
        }
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let mut oracle = 0.0;
        for n in 0..2 {
            for px in 0..4 {
                let y = labels[n * 4 + px] as usize;
                oracle -= f64::ln(data[n * 8 + y * 4 + px]);
            }
        }
        oracle /= 8.0;
        let mut tape = Tape::new();
        let v = probs(&mut tape, &[2, 2, 2, 2], data);
        let lt = Tensor::new(vec![2, 2, 2], labels.to_vec()).unwrap();
        let l = supervised_ce(&mut tape, v, &lt, &[true, true]).unwrap();
        assert!((tape.value(l).data()[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn ce_ignores_unlabeled_samples() {
        let labels = Tensor::new(vec![2, 1, 1], vec![1.0, 7.0]).unwrap();
        let run = |second: [f64; 2]| {
            let mut tape = Tape::new();
            let v = probs(&mut tape, &[2, 2, 1, 1], vec![0.3, 0.7, second[0], second[1]]);
            let l = supervised_ce(&mut tape, v, &labels, &[true, false]).unwrap();
            tape.value(l).data()[0]
        };
        assert_eq!(run([0.5, 0.5]).to_bits(), run([0.99, 0.01]).to_bits());
    }

    #[test]
    fn ce_needs_a_labeled_sample() {
        let mut tape = Tape::new();
        let v = probs(&mut tape, &[1, 2, 1, 1], vec![0.5, 0.5]);
        let labels = Tensor::zeros(&[1, 1, 1]);
        assert_eq!(supervised_ce(&mut tape, v, &labels, &[false]), Err(Error::NoLabeledSamples));
    }

    #[test]
    fn consistency_examples() {
        let mut tape = Tape::new();
        let a = probs(&mut tape, &[1, 2, 1, 1], vec![1.0, 0.0]);
        let b = probs(&mut tape, &[1, 2, 1, 1], vec![0.0, 1.0]);
        let l = consistency_mse(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).data()[0], 1.0);
        let l0 = consistency_mse(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l0).data()[0], 0.0);
        let ab = consistency_mse(&mut tape, a, b).unwrap();
        let ba = consistency_mse(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(ab).data()[0].to_bits(), tape.value(ba).data()[0].to_bits());
        let c = probs(&mut tape, &[1, 1, 2, 1], vec![0.0, 1.0]);
        assert!(consistency_mse(&mut tape, a, c).is_err());
    }

    #[test]
    fn consistency_gradient_closed_form() {
        let za = vec![0.1, 0.9, 0.6, 0.4, 0.3, 0.7, 0.2, 0.8];
        let zb = vec![0.4, 0.6, 0.5, 0.5, 0.9, 0.1, 0.25, 0.75];
        let mut tape = Tape::new();
        let a = probs(&mut tape, &[2, 2, 2, 1], za.clone());
        let b = probs(&mut tape, &[2, 2, 2, 1], zb.clone());
        let l = consistency_mse(&mut tape, a, b).unwrap();
        tape.backward(l).unwrap();
        for i in 0..8 {
            let expect = 2.0 * (za[i] - zb[i]) / 8.0;
            assert!((tape.grad(a).unwrap()[i] - expect).abs() < 1e-15);
            assert!((tape.grad(b).unwrap()[i] + expect).abs() < 1e-15);
        }
    }
}
