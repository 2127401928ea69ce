//! Multiply-add accounting. One multiply-add counts as one FLOP; bias adds,
//! nonlinearities and pooling count as zero.

use serde::{Deserialize, Serialize};

use crate::nets::{Backbone, Classifier};
use crate::focuspolicy::PolicyNet;

/// Per-component multiply-add totals for one inference episode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub glance: u64,
    pub focus: u64,
    pub patch_policy: u64,
    pub skip_policy: u64,
    pub classifier: u64,
    /// Per-frame totals, summing across components.
    pub per_frame: Vec<u64>,
}

impl CostLedger {
    pub fn total(&self) -> u64 {
        self.glance + self.focus + self.patch_policy + self.skip_policy + self.classifier
    }

    pub fn add(&mut self, other: &CostLedger) {
        self.glance += other.glance;
        self.focus += other.focus;
        self.patch_policy += other.patch_policy;
        self.skip_policy += other.skip_policy;
        self.classifier += other.classifier;
        self.per_frame.extend_from_slice(&other.per_frame);
    }
}

/// Static per-step costs of a model bundle, so episode accounting is pure
/// arithmetic on the realized keep pattern.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ComponentCosts {
    pub glance_per_frame: u64,
    pub focus_per_patch: u64,
    pub patch_policy_per_frame: u64,
    pub skip_policy_per_frame: u64,
    pub classifier_per_step: u64,
}

impl ComponentCosts {
    pub fn new(
        f_g: &Backbone,
        f_l: &Backbone,
        policy: &PolicyNet,
        skip: Option<&PolicyNet>,
        classifier: &Classifier,
        frame_size: usize,
        patch_size: usize,
    ) -> Self {
        ComponentCosts {
            glance_per_frame: f_g.flops(frame_size, frame_size),
            focus_per_patch: f_l.flops(patch_size, patch_size),
            patch_policy_per_frame: policy.flops_per_step(),
            skip_policy_per_frame: skip.map(|s| s.flops_per_step()).unwrap_or(0),
            classifier_per_step: classifier.flops_per_step(),
        }
    }
}

/// Cost of one episode given which frames were kept. The glance network,
/// both policies and the classifier run every frame; the focus network is
/// charged only for kept frames. The skip policy updates its hidden state on
/// skipped frames too, so it is charged every frame.
pub fn episode_cost(costs: &ComponentCosts, kept: &[bool]) -> CostLedger {
    let mut ledger = CostLedger::default();
    for &keep in kept {
        let mut frame = costs.glance_per_frame
            + costs.patch_policy_per_frame
            + costs.skip_policy_per_frame
            + costs.classifier_per_step;
        ledger.glance += costs.glance_per_frame;
        ledger.patch_policy += costs.patch_policy_per_frame;
        ledger.skip_policy += costs.skip_policy_per_frame;
        ledger.classifier += costs.classifier_per_step;
        if keep {
            ledger.focus += costs.focus_per_patch;
            frame += costs.focus_per_patch;
        }
        ledger.per_frame.push(frame);
    }
    ledger
}

/// Ratio of focus-network cost at patch side P vs full side H.
pub fn patch_cost_ratio(f_l: &Backbone, patch_size: usize, frame_size: usize) -> f64 {
    f_l.flops(patch_size, patch_size) as f64 / f_l.flops(frame_size, frame_size) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ConvBackboneSpec;
    use crate::focuspolicy::PolicyNetSpec;
    use crate::rng::rng_from;

    fn default_f_l() -> Backbone {
        let mut rng = rng_from(0, "t");
        Backbone::new(ConvBackboneSpec::focus_default(1), &mut rng)
    }

    #[test]
    fn ratio_identity_at_equal_sides() {
        let f_l = default_f_l();
        assert!((patch_cost_ratio(&f_l, 64, 64) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_96_vs_224_near_paper_claim() {
        let f_l = default_f_l();
        let r = patch_cost_ratio(&f_l, 96, 224);
        assert!((0.16..=0.21).contains(&r), "ratio {r}");
        // analytic square for conv-dominant nets
        let analytic = (96.0f64 / 224.0).powi(2);
        assert!((analytic - 0.1837).abs() < 1e-3);
    }

    #[test]
    fn ratio_tracks_quadratic_scaling_at_desk_sizes() {
        let f_l = default_f_l();
        for p in [16usize, 24, 32] {
            let measured = patch_cost_ratio(&f_l, p, 64);
            let analytic = (p as f64 / 64.0).powi(2);
            let rel = (measured - analytic).abs() / analytic;
            assert!(rel <= 0.15, "P={p}: measured {measured}, analytic {analytic}");
        }
    }

    #[test]
    fn conv_doubling_input_quadruples_cost() {
        let mut rng = rng_from(0, "t");
        let spec = ConvBackboneSpec {
            input_channels: 1,
            layers: vec![crate::nets::ConvLayerSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                nonlinearity: crate::nets::Nonlinearity::Relu,
            }],
        };
        let net = Backbone::new(spec, &mut rng);
        assert_eq!(net.flops(32, 32) * 4, net.flops(64, 64));
    }

    fn toy_costs() -> ComponentCosts {
        ComponentCosts {
            glance_per_frame: 100,
            focus_per_patch: 1000,
            patch_policy_per_frame: 10,
            skip_policy_per_frame: 5,
            classifier_per_step: 20,
        }
    }

    #[test]
    fn all_kept_charges_focus_every_frame() {
        let ledger = episode_cost(&toy_costs(), &[true; 8]);
        assert_eq!(ledger.focus, 8 * 1000);
        assert_eq!(ledger.total(), ledger.per_frame.iter().sum::<u64>());
    }

    #[test]
    fn half_kept_halves_focus_component() {
        let kept = [true, false, true, false, true, false, true, false];
        let ledger = episode_cost(&toy_costs(), &kept);
        assert_eq!(ledger.focus, 4 * 1000);
        // skipped frames still charge the skip policy (hidden state updates)
        assert_eq!(ledger.skip_policy, 8 * 5);
    }

    #[test]
    fn zero_frames_zero_ledger() {
        let ledger = episode_cost(&toy_costs(), &[]);
        assert_eq!(ledger.total(), 0);
        assert!(ledger.per_frame.is_empty());
    }

    #[test]
    fn focus_cost_increases_with_patch_size() {
        let f_l = default_f_l();
        assert!(f_l.flops(16, 16) < f_l.flops(24, 24));
        assert!(f_l.flops(24, 24) < f_l.flops(32, 32));
    }

    fn policy_spec_costs() -> u64 {
        let mut rng = rng_from(0, "t");
        let p = PolicyNet::new(PolicyNetSpec::patch_policy(16, 8, 8, 25), &mut rng);
        p.flops_per_step()
    }

    #[test]
    fn ledger_additivity() {
        let costs = toy_costs();
        let mut a = episode_cost(&costs, &[true, false]);
        let b = episode_cost(&costs, &[true]);
        let total = a.total() + b.total();
        a.add(&b);
        assert_eq!(a.total(), total);
        assert!(policy_spec_costs() > 0);
    }
}
