//! Scalar loss kernels with analytic gradients, bipartite matching between
//! query predictions and ground-truth segments, and a finite-difference
//! verification harness.
//!
//! Conventions: probability tensors are `(C, H, W)` channel-first, target
//! maps are `(H, W)` of class channel indices with [`IGNORE_TARGET`] marking
//! excluded pixels. Gradients are taken with respect to the kernel's direct
//! input (probabilities or logits); there is no autodiff engine behind them.

mod boundary;
mod classification;
mod focal;
pub mod gradcheck;
mod lovasz;
mod matching;

pub use boundary::boundary_loss;
pub use classification::{assignment_to_targets, classification_loss};
pub use focal::weighted_focal_loss;
pub use lovasz::lovasz_softmax;
pub use matching::{assignment_cost, hungarian_match, matching_cost, MatchWeights};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kitti_io::ClassConfig;
use crate::stats::ClassStats;

/// Sentinel marking pixels excluded from losses.
pub const IGNORE_TARGET: usize = usize::MAX;

/// Probability floor; predictions below it are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Re-balance strategy applied to the per-pixel focal weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceStrategy {
    /// Plain focal loss: alpha and beta both 1.
    #[default]
    None,
    /// Semantic re-balance only: alpha active, beta 1.
    Class,
    /// Unified re-balance: alpha times beta.
    Unified,
}

/// One ground-truth segment for mask matching: a class channel plus its
/// binary mask.
#[derive(Debug, Clone)]
pub struct MaskTarget {
    pub class_id: usize,
    pub mask: Array2<bool>,
    pub is_thing: bool,
}

impl MaskTarget {
    pub fn new(class_id: usize, mask: Array2<bool>, is_thing: bool) -> Result<Self> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::Shape("mask target has no positive pixel".into()));
        }
        Ok(MaskTarget {
            class_id,
            mask,
            is_thing,
        })
    }
}

/// Loss mixing weights and the per-class re-balance factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_focal: f64,
    pub lambda_lovasz: f64,
    pub lambda_boundary: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Down-weight applied to the no-object class in the classification loss.
    pub no_object_weight: f64,
    /// Boundary pooling kernel size (odd, >= 3).
    pub boundary_theta: usize,
    /// Per-channel semantic factor (length C).
    pub alpha: Vec<f64>,
    /// Per-channel panoptic factor (length C).
    pub beta: Vec<f64>,
    pub strategy: BalanceStrategy,
}

impl LossWeights {
    /// Unit lambdas and factors for `num_channels` classes.
    pub fn uniform(num_channels: usize) -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_focal: 1.0,
            lambda_lovasz: 1.0,
            lambda_boundary: 1.0,
            gamma: 2.0,
            no_object_weight: 0.1,
            boundary_theta: 3,
            alpha: vec![1.0; num_channels],
            beta: vec![1.0; num_channels],
            strategy: BalanceStrategy::None,
        }
    }

    /// Pull alpha/beta from finalized dataset statistics, mapping train ids
    /// onto class channels.
    pub fn from_stats(stats: &ClassStats, cfg: &ClassConfig, strategy: BalanceStrategy) -> Self {
        let mut w = LossWeights::uniform(cfg.num_classes());
        for id in cfg.class_ids() {
            let ch = cfg.channel_of(id).expect("real class has a channel");
            w.alpha[ch] = stats.alpha[id as usize];
            w.beta[ch] = stats.beta[id as usize];
        }
        w.strategy = strategy;
        w
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_focal", self.lambda_focal),
            ("lambda_lovasz", self.lambda_lovasz),
            ("lambda_boundary", self.lambda_boundary),
            ("gamma", self.gamma),
        ] {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::ConfigValidation(format!(
                    "{name} must be finite and >= 0, got {l}"
                )));
            }
        }
        if self.boundary_theta < 3 || self.boundary_theta % 2 == 0 {
            return Err(Error::ConfigValidation(format!(
                "boundary_theta must be odd >= 3, got {}",
                self.boundary_theta
            )));
        }
        Ok(())
    }

    /// Per-pixel re-balance weight for a class channel under the active
    /// strategy.
    pub fn class_weight(&self, channel: usize) -> f64 {
        match self.strategy {
            BalanceStrategy::None => 1.0,
            BalanceStrategy::Class => self.alpha[channel],
            BalanceStrategy::Unified => self.alpha[channel] * self.beta[channel],
        }
    }
}

/// Evaluated loss terms, in the order they are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub classification: f64,
    pub focal: f64,
    pub lovasz: f64,
    pub boundary: f64,
}

/// Weighted sum of the four loss terms.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("classification", components.classification),
        ("focal", components.focal),
        ("lovasz", components.lovasz),
        ("boundary", components.boundary),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss component")));
        }
    }
    Ok(weights.lambda_cls * components.classification
        + weights.lambda_focal * components.focal
        + weights.lambda_lovasz * components.lovasz
        + weights.lambda_boundary * components.boundary)
}

/// Deep-supervision total: the main term plus identically weighted
/// auxiliary terms, one per tap or decoder layer.
pub fn total_loss_with_aux(
    main: &LossComponents,
    aux: &[LossComponents],
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = total_loss(main, weights)?;
    for a in aux {
        total += total_loss(a, weights)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_is_weighted_sum() {
        let mut w = LossWeights::uniform(3);
        let c = LossComponents {
            classification: 1.0,
            focal: 2.0,
            lovasz: 3.0,
            boundary: 4.0,
        };
        assert_eq!(total_loss(&c, &w).unwrap(), 10.0);

        w.lambda_cls = 1.0;
        w.lambda_focal = 0.0;
        w.lambda_lovasz = 0.0;
        w.lambda_boundary = 0.0;
        assert_eq!(total_loss(&c, &w).unwrap(), c.classification);

        // Doubling a lambda doubles exactly that contribution.
        let mut w2 = LossWeights::uniform(3);
        w2.lambda_focal = 2.0;
        let base = total_loss(&c, &LossWeights::uniform(3)).unwrap();
        assert_eq!(total_loss(&c, &w2).unwrap(), base + c.focal);
    }

    #[test]
    fn non_finite_component_is_named() {
        let w = LossWeights::uniform(2);
        let c = LossComponents {
            lovasz: f64::NAN,
            ..Default::default()
        };
        match total_loss(&c, &w) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("lovasz")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn aux_terms_add_identically_weighted() {
        let w = LossWeights::uniform(2);
        let c = LossComponents {
            classification: 1.0,
            focal: 1.0,
            lovasz: 1.0,
            boundary: 1.0,
        };
        let total = total_loss_with_aux(&c, &[c, c], &w).unwrap();
        assert_eq!(total, 12.0);
    }

    #[test]
    fn theta_must_be_odd() {
        let mut w = LossWeights::uniform(2);
        w.boundary_theta = 4;
        assert!(w.validate().is_err());
    }

    #[test]
    fn mask_target_requires_positive_pixel() {
        let empty = Array2::from_elem((2, 2), false);
        assert!(MaskTarget::new(0, empty, true).is_err());
    }

    #[test]
    fn all_losses_are_non_negative_on_valid_inputs() {
        use crate::loss::gradcheck::fd_instance;
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let c = rng.gen_range(2..=4);
            let (probs, targets) = fd_instance(c, 5, 5, 0.1, &mut rng);
            let mut w = LossWeights::uniform(c);
            w.alpha = (0..c).map(|_| rng.gen_range(0.5..10.0)).collect();
            w.beta = (0..c).map(|_| rng.gen_range(1.0..5.0)).collect();
            w.strategy = BalanceStrategy::Unified;
            assert!(weighted_focal_loss(probs.view(), targets.view(), &w).unwrap().0 >= 0.0);
            assert!(lovasz_softmax(probs.view(), targets.view()).unwrap().0 >= 0.0);
            assert!(boundary_loss(probs.view(), targets.view(), 3).unwrap().0 >= 0.0);
            let logits = Array2::from_shape_fn((3, c + 1), |_| rng.gen_range(-3.0..3.0));
            let cls_targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..=c)).collect();
            assert!(classification_loss(logits.view(), &cls_targets, &w).unwrap().0 >= 0.0);
        }
    }
}
