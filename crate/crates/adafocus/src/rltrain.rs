//! Reinforcement-learning machinery for the patch policy and the skip gate:
//! reward computation, discounted returns, PPO updates and test-time
//! threshold calibration.

use ndarray::{concatenate, Array1, Array3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{AdaFocusError, Result};
use crate::focuspolicy::{
    decide_skip, eval_action, select_patch, PatchAction, PatchGrid, PolicyNet, SelectMode,
    SkipDecision, SkipMode,
};
use crate::nets::{focus, Backbone, Classifier, ClassifierState};
use crate::nn::ops::{global_avg_pool, sigmoid, softmax};
use crate::nn::optim::Adam;
use crate::nn::param::Params;
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PPOConfig {
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub epochs_per_batch: usize,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            gamma: 0.7,
            clip_epsilon: 0.2,
            epochs_per_batch: 4,
            value_loss_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AdaFocusError::Config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.clip_epsilon <= 0.0 {
            return Err(AdaFocusError::Config(format!(
                "clip_epsilon must be positive, got {}",
                self.clip_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SkipRewardConfig {
    /// Cost coefficient for the patch-area penalty.
    pub lambda: f64,
    /// Patch side in pixels.
    pub patch_size: usize,
}

impl SkipRewardConfig {
    pub fn penalty(&self) -> f64 {
        self.lambda * (self.patch_size * self.patch_size) as f64
    }
}

/// r_t = confidence on the true label under the selected patch minus the
/// same confidence under one random-candidate baseline sharing the prefix.
pub fn patch_reward(p_ty_selected: f64, p_ty_baseline: f64) -> f64 {
    p_ty_selected - p_ty_baseline
}

/// Skip-gate reward: confidence gain of keeping the frame minus the patch
/// cost penalty when the frame was kept; zero when it was dropped.
pub fn skip_reward(kept: bool, p_ty_keep: f64, p_ty_drop: f64, cfg: &SkipRewardConfig) -> f64 {
    if kept {
        (p_ty_keep - p_ty_drop) - cfg.penalty()
    } else {
        0.0
    }
}

/// Backward recursion R_t = r_t + gamma * R_{t+1}, R_{T+1} = 0.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Per-frame record of a stage-II rollout.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub t: usize,
    pub patch: PatchAction,
    pub skip: Option<SkipDecision>,
    pub p_ty_selected: f64,
    pub p_ty_baseline: f64,
    pub p_ty_keep: Option<f64>,
    pub p_ty_drop: Option<f64>,
    pub reward: f64,
    pub ret: f64,
    pub value: f64,
    pub advantage: f64,
    pub skip_reward: Option<f64>,
    pub skip_ret: Option<f64>,
    pub skip_value: Option<f64>,
    pub skip_advantage: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub label: usize,
    /// Glance feature maps per frame; the policy input replayed by PPO.
    pub features: Vec<Array3<f64>>,
    pub frames: Vec<FrameRecord>,
    pub kept: Vec<bool>,
    pub final_probs: Array1<f64>,
}

impl EpisodeTrace {
    pub fn check_invariants(&self, gamma: f64) -> Result<()> {
        let mut next = 0.0;
        for rec in self.frames.iter().rev() {
            let expect = rec.reward + gamma * next;
            if rec.ret != expect {
                return Err(AdaFocusError::Contract(format!(
                    "return recursion broken at t={}: {} vs {}",
                    rec.t, rec.ret, expect
                )));
            }
            next = rec.ret;
            for p in [rec.p_ty_selected, rec.p_ty_baseline]
                .into_iter()
                .chain(rec.p_ty_keep)
                .chain(rec.p_ty_drop)
            {
                if !(0.0..=1.0).contains(&p) {
                    return Err(AdaFocusError::Contract(format!(
                        "probability {p} out of [0,1] at t={}",
                        rec.t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Structured text export, one frame per line: t, action, b, r_t, R_t.
pub fn export_trace(trace: &EpisodeTrace) -> String {
    let mut s = String::new();
    for rec in &trace.frames {
        let b = rec.skip.as_ref().map(|d| if d.keep { 1 } else { 0 }).unwrap_or(1);
        writeln!(s, "t={} a={} b={} r={:.6} ret={:.6}", rec.t, rec.patch.index, b, rec.reward, rec.ret)
            .expect("string write");
    }
    s
}

/// Source of pooled focus features for a (frame, candidate) pair. The
/// direct implementation runs the focus network; callers with frozen
/// backbones may substitute a memoizing wrapper.
pub trait FocusFeatures {
    fn pooled(&mut self, frame_idx: usize, candidate: usize) -> Result<Array1<f64>>;
}

pub struct DirectFocus<'a> {
    pub f_l: &'a Backbone,
    pub frames: &'a [Array3<f64>],
    pub grid: &'a PatchGrid,
}

impl FocusFeatures for DirectFocus<'_> {
    fn pooled(&mut self, frame_idx: usize, candidate: usize) -> Result<Array1<f64>> {
        let offset = self.grid.offsets[candidate];
        let patch = crate::focuspolicy::crop(&self.frames[frame_idx], offset, self.grid.patch_size)?;
        Ok(focus(self.f_l, &patch, self.grid.patch_size)?.pooled())
    }
}

/// Frozen-model view used by rollouts. Backbones and classifiers are
/// immutable here; stage II trains only the policies.
pub struct RolloutCtx<'a> {
    pub classifier: &'a Classifier,
    pub policy: &'a PolicyNet,
    pub skip: Option<&'a PolicyNet>,
    pub grid: &'a PatchGrid,
    pub skip_cfg: SkipRewardConfig,
    pub gamma: f64,
    /// Feed pooled glance features to the classifier (off only for the
    /// feature-reuse ablation).
    pub reuse_glance: bool,
}

fn classifier_input(pool_g: &Array1<f64>, local: &Array1<f64>) -> Array1<f64> {
    concatenate![Axis(0), pool_g.view(), local.view()]
}

fn step_confidence(
    classifier: &Classifier,
    input: &Array1<f64>,
    state: &ClassifierState,
    label: usize,
) -> Result<(f64, Array1<f64>, ClassifierState)> {
    let (pred, next) = classifier.step(input, state)?;
    Ok((pred.probs[label], pred.probs, next))
}

/// Confidence on `label` for every grid candidate at one frame, classified
/// from the same pre-step state. Used by the exact-expectation baseline
/// oracle and the evaluation bench.
pub fn candidate_confidences(
    classifier: &Classifier,
    focus_feats: &mut dyn FocusFeatures,
    frame_idx: usize,
    pool_g: &Array1<f64>,
    state: &ClassifierState,
    label: usize,
    num_candidates: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(num_candidates);
    for k in 0..num_candidates {
        let local = focus_feats.pooled(frame_idx, k)?;
        let (p, _, _) = step_confidence(classifier, &classifier_input(pool_g, &local), state, label)?;
        out.push(p);
    }
    Ok(out)
}

/// Stage-II rollout over one video. Samples the patch policy (and the skip
/// gate when present) every frame, computes the one-sample baseline reward
/// and the keep/drop counterfactuals, and fills returns and advantages.
/// Counterfactual branches classify from a clone of the pre-step state, so
/// the realized trajectory is never perturbed.
pub fn rollout_stage2(
    ctx: &RolloutCtx,
    glance_feats: &[Array3<f64>],
    label: usize,
    focus_feats: &mut dyn FocusFeatures,
    rng: &mut Rng,
) -> Result<EpisodeTrace> {
    let t_len = glance_feats.len();
    let num_candidates = ctx.grid.num_candidates();
    let glance_dim = if ctx.reuse_glance {
        global_avg_pool(&glance_feats[0]).len()
    } else {
        0
    };
    let local_dim = ctx.classifier.input_dim() - glance_dim;
    let zeros_local = Array1::zeros(local_dim);

    let mut cls_state = ctx.classifier.init_state();
    let mut p_state = ctx.policy.init_state();
    let mut s_state = ctx.skip.map(|s| s.init_state());

    let mut frames: Vec<FrameRecord> = Vec::with_capacity(t_len);
    let mut kept_mask = Vec::with_capacity(t_len);
    let mut final_probs = Array1::zeros(ctx.classifier.num_classes());

    for t in 0..t_len {
        let feats = &glance_feats[t];
        let pool_g = if ctx.reuse_glance {
            global_avg_pool(feats)
        } else {
            Array1::zeros(0)
        };

        let (p_cache, p_next) = ctx.policy.forward_cached(feats, &p_state)?;
        let dist = softmax(&p_cache.logits);
        let action = select_patch(&dist, SelectMode::Sample, rng);
        p_state = p_next;

        let mut skip_dec = None;
        let mut skip_value = None;
        if let (Some(skip_net), Some(st)) = (ctx.skip, s_state.as_ref()) {
            let (s_cache, s_next) = skip_net.forward_cached(feats, st)?;
            let p_keep = sigmoid(s_cache.logits[0]);
            skip_dec = Some(decide_skip(p_keep, SkipMode::Sample, rng));
            skip_value = Some(s_cache.value);
            s_state = Some(s_next);
        }
        let kept = skip_dec.as_ref().map(|d| d.keep).unwrap_or(true);
        kept_mask.push(kept);

        let rec = if kept {
            let local_sel = focus_feats.pooled(t, action.index)?;
            let (p_keep_conf, probs_keep, state_keep) = step_confidence(
                ctx.classifier,
                &classifier_input(&pool_g, &local_sel),
                &cls_state,
                label,
            )?;
            let baseline_idx = rng.gen_range(0..num_candidates);
            let local_base = focus_feats.pooled(t, baseline_idx)?;
            let (p_base, _, _) = step_confidence(
                ctx.classifier,
                &classifier_input(&pool_g, &local_base),
                &cls_state,
                label,
            )?;
            let mut p_drop_conf = None;
            if skip_dec.is_some() {
                let (p_drop, _, _) = step_confidence(
                    ctx.classifier,
                    &classifier_input(&pool_g, &zeros_local),
                    &cls_state,
                    label,
                )?;
                p_drop_conf = Some(p_drop);
            }
            final_probs = probs_keep;
            cls_state = state_keep;
            FrameRecord {
                t,
                patch: action,
                skip: skip_dec,
                p_ty_selected: p_keep_conf,
                p_ty_baseline: p_base,
                p_ty_keep: Some(p_keep_conf),
                p_ty_drop: p_drop_conf,
                reward: patch_reward(p_keep_conf, p_base),
                ret: 0.0,
                value: p_cache.value,
                advantage: 0.0,
                skip_reward: p_drop_conf
                    .map(|pd| skip_reward(true, p_keep_conf, pd, &ctx.skip_cfg)),
                skip_ret: None,
                skip_value,
                skip_advantage: None,
            }
        } else {
            // dropped frame: patch has no effect, reward 0 for both policies
            let (p_drop, probs_drop, state_drop) = step_confidence(
                ctx.classifier,
                &classifier_input(&pool_g, &zeros_local),
                &cls_state,
                label,
            )?;
            final_probs = probs_drop;
            cls_state = state_drop;
            FrameRecord {
                t,
                patch: action,
                skip: skip_dec,
                p_ty_selected: p_drop,
                p_ty_baseline: p_drop,
                p_ty_keep: None,
                p_ty_drop: Some(p_drop),
                reward: 0.0,
                ret: 0.0,
                value: p_cache.value,
                advantage: 0.0,
                skip_reward: Some(0.0),
                skip_ret: None,
                skip_value,
                skip_advantage: None,
            }
        };
        frames.push(rec);
    }

    let rewards: Vec<f64> = frames.iter().map(|r| r.reward).collect();
    let returns = discounted_returns(&rewards, ctx.gamma);
    for (rec, &ret) in frames.iter_mut().zip(&returns) {
        rec.ret = ret;
        rec.advantage = ret - rec.value;
    }
    if ctx.skip.is_some() {
        let s_rewards: Vec<f64> = frames.iter().map(|r| r.skip_reward.unwrap_or(0.0)).collect();
        let s_returns = discounted_returns(&s_rewards, ctx.gamma);
        for (rec, &ret) in frames.iter_mut().zip(&s_returns) {
            rec.skip_ret = Some(ret);
            rec.skip_advantage = Some(ret - rec.skip_value.unwrap_or(0.0));
        }
    }

    Ok(EpisodeTrace {
        label,
        features: glance_feats.to_vec(),
        frames,
        kept: kept_mask,
        final_probs,
    })
}

/// Which head of the trace a PPO update trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyRole {
    Patch,
    Skip,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

struct FrameTarget {
    action: usize,
    old_log_prob: f64,
    advantage: f64,
    ret: f64,
}

fn role_targets(traces: &[EpisodeTrace], role: PolicyRole) -> Result<Vec<Vec<FrameTarget>>> {
    traces
        .iter()
        .map(|tr| {
            tr.frames
                .iter()
                .map(|rec| match role {
                    PolicyRole::Patch => Ok(FrameTarget {
                        action: rec.patch.index,
                        old_log_prob: rec.patch.log_prob,
                        advantage: rec.advantage,
                        ret: rec.ret,
                    }),
                    PolicyRole::Skip => {
                        let dec = rec.skip.as_ref().ok_or_else(|| {
                            AdaFocusError::Contract(
                                "skip update requested on a trace without skip records".into(),
                            )
                        })?;
                        Ok(FrameTarget {
                            action: dec.keep as usize,
                            old_log_prob: dec.log_prob,
                            advantage: rec.skip_advantage.unwrap_or(0.0),
                            ret: rec.skip_ret.unwrap_or(0.0),
                        })
                    }
                })
                .collect()
        })
        .collect()
}

/// Clipped-surrogate PPO over a batch of traces. The recurrent policy is
/// replayed over each episode's stored features, so ratios reflect the
/// current parameters; gradients flow through time within each episode.
pub fn ppo_update(
    policy: &mut PolicyNet,
    opt: &mut Adam,
    traces: &[EpisodeTrace],
    role: PolicyRole,
    cfg: &PPOConfig,
) -> Result<PpoStats> {
    cfg.validate()?;
    if traces.is_empty() {
        return Err(AdaFocusError::Contract("ppo_update on empty batch".into()));
    }
    let targets = role_targets(traces, role)?;
    let n_frames: usize = targets.iter().map(|t| t.len()).sum();
    if n_frames == 0 {
        return Err(AdaFocusError::Contract("ppo_update with zero frames".into()));
    }

    // batch-normalized advantages, fixed across the inner epochs
    let mean = targets.iter().flatten().map(|t| t.advantage).sum::<f64>() / n_frames as f64;
    let var = targets
        .iter()
        .flatten()
        .map(|t| (t.advantage - mean).powi(2))
        .sum::<f64>()
        / n_frames as f64;
    let std = var.sqrt() + 1e-8;
    let norm_adv: Vec<Vec<f64>> = targets
        .iter()
        .map(|tr| tr.iter().map(|t| (t.advantage - mean) / std).collect())
        .collect();

    let head = policy.spec.head;
    let scale = 1.0 / n_frames as f64;
    let mut stats = PpoStats::default();

    for _epoch in 0..cfg.epochs_per_batch {
        stats = PpoStats::default();
        policy.zero_grads();

        for (ep, (trace, tr_targets)) in traces.iter().zip(&targets).enumerate() {
            // forward replay over the episode
            let mut state = policy.init_state();
            let mut caches = Vec::with_capacity(trace.features.len());
            for feats in &trace.features {
                let (cache, next) = policy.forward_cached(feats, &state)?;
                caches.push(cache);
                state = next;
            }

            // per-frame gradients on logits and value
            let mut frame_grads = Vec::with_capacity(caches.len());
            for ((cache, target), &adv) in caches.iter().zip(tr_targets).zip(&norm_adv[ep]) {
                let eval = eval_action(head, &cache.logits, target.action);
                let ratio = (eval.log_prob - target.old_log_prob).exp();
                if !ratio.is_finite() {
                    return Err(AdaFocusError::Training(format!(
                        "non-finite PPO ratio at episode {ep}: new {} old {}",
                        eval.log_prob, target.old_log_prob
                    )));
                }
                let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
                let surr_un = ratio * adv;
                let surr_cl = clipped * adv;
                let surr = surr_un.min(surr_cl);
                let use_unclipped = surr_un <= surr_cl;
                if (ratio - 1.0).abs() > cfg.clip_epsilon {
                    stats.clip_fraction += 1.0;
                }
                let v_err = cache.value - target.ret;
                stats.surrogate += surr;
                stats.value_loss += cfg.value_loss_coef * v_err * v_err;
                stats.entropy += eval.entropy;

                // minimize -(surrogate + entropy bonus) + value loss
                let mut g_logits = Array1::zeros(cache.logits.len());
                if use_unclipped {
                    g_logits.scaled_add(-adv * ratio * scale, &eval.g_log_prob);
                }
                g_logits.scaled_add(-cfg.entropy_coef * scale, &eval.g_entropy);
                let g_value = 2.0 * cfg.value_loss_coef * v_err * scale;
                frame_grads.push((g_logits, g_value));
            }

            // backward pass through the episode
            let mut gh = Array1::zeros(policy.spec.hidden_dim);
            for (cache, (g_logits, g_value)) in
                caches.iter().zip(frame_grads).collect::<Vec<_>>().into_iter().rev()
            {
                gh = policy.backward_step(&g_logits, g_value, &gh, cache);
            }
        }

        let total = (cfg.epochs_per_batch * n_frames) as f64 / cfg.epochs_per_batch as f64;
        stats.surrogate /= total;
        stats.value_loss /= total;
        stats.entropy /= total;
        stats.clip_fraction /= total;
        if !(stats.surrogate.is_finite() && stats.value_loss.is_finite()) {
            return Err(AdaFocusError::Training(format!(
                "non-finite PPO losses: surrogate {} value {}",
                stats.surrogate, stats.value_loss
            )));
        }
        opt.apply(policy)?;
        policy.zero_grads();
    }
    Ok(stats)
}

/// Calibration result for the AdaFocus+ keep threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Calibration {
    pub rho: f64,
    pub kept_fraction: f64,
    /// All scores identical: the tie rule keeps everything.
    pub degenerate: bool,
}

/// Threshold rho such that keeping frames with score >= rho yields the
/// smallest kept fraction >= eta; ties at rho are all kept.
pub fn calibrate_threshold(p_keep_scores: &[f64], eta: f64) -> Result<Calibration> {
    if p_keep_scores.is_empty() {
        return Err(AdaFocusError::Contract("calibration scores empty".into()));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(AdaFocusError::Config(format!("eta must lie in (0,1), got {eta}")));
    }
    let n = p_keep_scores.len();
    let mut sorted = p_keep_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let idx = ((eta * n as f64).ceil() as usize).clamp(1, n) - 1;
    let rho = sorted[idx];
    let kept = sorted.iter().filter(|&&s| s >= rho).count();
    Ok(Calibration {
        rho,
        kept_fraction: kept as f64 / n as f64,
        degenerate: sorted.first() == sorted.last(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::focuspolicy::{build_grid, PolicyHeadKind, PolicyNetSpec};
    use crate::nets::{ClassifierHead, ClassifierSpec, ConvBackboneSpec};
    use crate::rng::rng_from;
    use crate::synthdata::{generate_video_with_label, SynthConfig};

    #[test]
    fn patch_reward_arithmetic() {
        assert_eq!(patch_reward(0.5, 0.5), 0.0);
        assert!((patch_reward(0.9, 0.6) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn skip_reward_cases() {
        let cfg = SkipRewardConfig { lambda: 1e-6, patch_size: 128 };
        assert_eq!(skip_reward(false, 0.9, 0.1, &cfg), 0.0);
        assert!((skip_reward(true, 0.5, 0.3, &cfg) - 0.183616).abs() < 1e-12);
        assert!((skip_reward(true, 0.4, 0.4, &cfg) + cfg.penalty()).abs() < 1e-15);
    }

    #[test]
    fn returns_examples() {
        let r = discounted_returns(&[1.0, 1.0, 1.0], 0.7);
        assert!((r[0] - 2.19).abs() < 1e-12);
        assert!((r[1] - 1.7).abs() < 1e-12);
        assert!((r[2] - 1.0).abs() < 1e-12);
        assert_eq!(discounted_returns(&[0.42], 0.7), vec![0.42]);
        let r2 = discounted_returns(&[0.5, -0.2], 0.7);
        assert!((r2[0] - 0.36).abs() < 1e-12);
        assert!((r2[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn calibration_quantile_example() {
        let c = calibrate_threshold(&[0.9, 0.8, 0.1, 0.05], 0.5).unwrap();
        assert_eq!(c.rho, 0.8);
        assert_eq!(c.kept_fraction, 0.5);
        assert!(!c.degenerate);
    }

    #[test]
    fn calibration_all_equal_keeps_everything() {
        let c = calibrate_threshold(&[0.3; 7], 0.5).unwrap();
        assert_eq!(c.rho, 0.3);
        assert_eq!(c.kept_fraction, 1.0);
        assert!(c.degenerate);
    }

    #[test]
    fn calibration_empty_is_contract_error() {
        assert!(matches!(
            calibrate_threshold(&[], 0.5),
            Err(AdaFocusError::Contract(_))
        ));
    }

    #[test]
    fn calibration_coverage_property() {
        let mut rng = rng_from(11, "calib");
        for &eta in &[0.9, 0.7, 0.5] {
            let scores: Vec<f64> = (0..500).map(|_| rng.gen::<f64>()).collect();
            let c = calibrate_threshold(&scores, eta).unwrap();
            let n = scores.len() as f64;
            assert!(
                c.kept_fraction >= eta && c.kept_fraction <= eta + 1.0 / n,
                "eta {eta}: kept {}",
                c.kept_fraction
            );
        }
    }

    /// Small frozen bundle on tiny inputs for rollout tests.
    struct TinyBundle {
        f_g: Backbone,
        f_l: Backbone,
        classifier: Classifier,
        policy: PolicyNet,
        skip: Option<PolicyNet>,
        grid: PatchGrid,
        cfg: SynthConfig,
    }

    fn tiny_bundle(with_skip: bool) -> TinyBundle {
        let cfg = SynthConfig {
            frame_size: 32,
            frames_per_video: 4,
            glyph_size: 6,
            ..SynthConfig::default()
        };
        let mut rng = rng_from(7, "bundle");
        let f_g = Backbone::new(ConvBackboneSpec::glance_default(cfg.channels), &mut rng);
        let f_l = Backbone::new(ConvBackboneSpec::focus_default(cfg.channels), &mut rng);
        let (gh, gw) = f_g.spec.out_hw(cfg.frame_size, cfg.frame_size);
        let gc = f_g.spec.out_channels();
        let grid = build_grid(cfg.frame_size, 12, 3).unwrap();
        let classifier = Classifier::new(
            &ClassifierSpec {
                head: ClassifierHead::Recurrent,
                input_dim: gc + f_l.spec.out_channels(),
                hidden_dim: 32,
                num_classes: cfg.num_classes,
            },
            &mut rng,
        );
        let policy = PolicyNet::new(
            PolicyNetSpec::patch_policy(gc, gh, gw, grid.num_candidates()),
            &mut rng,
        );
        let skip = with_skip
            .then(|| PolicyNet::new(PolicyNetSpec::skip_policy(gc, gh, gw), &mut rng));
        TinyBundle { f_g, f_l, classifier, policy, skip, grid, cfg }
    }

    fn glance_all(f_g: &Backbone, frames: &[Array3<f64>]) -> Vec<Array3<f64>> {
        frames.iter().map(|f| f_g.forward(f)).collect()
    }

    #[test]
    fn rollout_plain_has_no_skip_records() {
        let b = tiny_bundle(false);
        let video = generate_video_with_label(&b.cfg, 3, &mut rng_from(99, "video")).unwrap();
        let feats = glance_all(&b.f_g, &video.frames);
        let ctx = RolloutCtx {
            classifier: &b.classifier,
            policy: &b.policy,
            skip: None,
            grid: &b.grid,
            skip_cfg: SkipRewardConfig { lambda: 1e-6, patch_size: 12 },
            gamma: 0.7,
            reuse_glance: true,
        };
        let mut focus = DirectFocus { f_l: &b.f_l, frames: &video.frames, grid: &b.grid };
        let mut rng = rng_from(1, "roll");
        let trace = rollout_stage2(&ctx, &feats, video.label, &mut focus, &mut rng).unwrap();
        assert_eq!(trace.frames.len(), 4);
        assert!(trace.frames.iter().all(|r| r.skip.is_none() && r.p_ty_drop.is_none()));
        assert!(trace.kept.iter().all(|&k| k));
        trace.check_invariants(0.7).unwrap();
    }

    #[test]
    fn rollout_deterministic_replay() {
        let b = tiny_bundle(true);
        let video = generate_video_with_label(&b.cfg, 5, &mut rng_from(42, "video")).unwrap();
        let feats = glance_all(&b.f_g, &video.frames);
        let ctx = RolloutCtx {
            classifier: &b.classifier,
            policy: &b.policy,
            skip: b.skip.as_ref(),
            grid: &b.grid,
            skip_cfg: SkipRewardConfig { lambda: 1e-6, patch_size: 12 },
            gamma: 0.7,
            reuse_glance: true,
        };
        let run = |seed_name: &str| {
            let mut focus = DirectFocus { f_l: &b.f_l, frames: &video.frames, grid: &b.grid };
            let mut rng = rng_from(3, seed_name);
            rollout_stage2(&ctx, &feats, video.label, &mut focus, &mut rng).unwrap()
        };
        let a = run("r");
        let c = run("r");
        assert_eq!(export_trace(&a), export_trace(&c));
        for (x, y) in a.frames.iter().zip(&c.frames) {
            assert_eq!(x.p_ty_selected.to_bits(), y.p_ty_selected.to_bits());
            assert_eq!(x.ret.to_bits(), y.ret.to_bits());
        }
    }

    #[test]
    fn exact_expectation_baseline_is_zero_mean() {
        let b = tiny_bundle(false);
        let video = generate_video_with_label(&b.cfg, 2, &mut rng_from(17, "video")).unwrap();
        let feats = glance_all(&b.f_g, &video.frames);
        let pool_g = global_avg_pool(&feats[0]);
        let state = b.classifier.init_state();
        let mut focus = DirectFocus { f_l: &b.f_l, frames: &video.frames, grid: &b.grid };
        let confs = candidate_confidences(
            &b.classifier,
            &mut focus,
            0,
            &pool_g,
            &state,
            video.label,
            b.grid.num_candidates(),
        )
        .unwrap();
        let baseline = confs.iter().sum::<f64>() / confs.len() as f64;
        let mean_reward: f64 =
            confs.iter().map(|&p| patch_reward(p, baseline)).sum::<f64>() / confs.len() as f64;
        assert!(mean_reward.abs() <= 1e-6, "mean reward {mean_reward}");
    }

    #[test]
    fn ppo_first_epoch_unclipped_when_params_unchanged() {
        // single inner epoch => ratios at computation time are exactly 1
        let b = tiny_bundle(false);
        let video = generate_video_with_label(&b.cfg, 1, &mut rng_from(5, "video")).unwrap();
        let feats = glance_all(&b.f_g, &video.frames);
        let ctx = RolloutCtx {
            classifier: &b.classifier,
            policy: &b.policy,
            skip: None,
            grid: &b.grid,
            skip_cfg: SkipRewardConfig { lambda: 1e-6, patch_size: 12 },
            gamma: 0.7,
            reuse_glance: true,
        };
        let mut focus = DirectFocus { f_l: &b.f_l, frames: &video.frames, grid: &b.grid };
        let mut rng = rng_from(9, "p");
        let trace = rollout_stage2(&ctx, &feats, video.label, &mut focus, &mut rng).unwrap();
        let mut policy = b.policy.clone();
        let mut opt = Adam::new(3e-4);
        let cfg = PPOConfig { epochs_per_batch: 1, ..PPOConfig::default() };
        let stats = ppo_update(&mut policy, &mut opt, &[trace], PolicyRole::Patch, &cfg).unwrap();
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn ppo_rejects_skip_role_without_skip_records() {
        let b = tiny_bundle(false);
        let video = generate_video_with_label(&b.cfg, 1, &mut rng_from(5, "video")).unwrap();
        let feats = glance_all(&b.f_g, &video.frames);
        let ctx = RolloutCtx {
            classifier: &b.classifier,
            policy: &b.policy,
            skip: None,
            grid: &b.grid,
            skip_cfg: SkipRewardConfig { lambda: 1e-6, patch_size: 12 },
            gamma: 0.7,
            reuse_glance: true,
        };
        let mut focus = DirectFocus { f_l: &b.f_l, frames: &video.frames, grid: &b.grid };
        let mut rng = rng_from(9, "p");
        let trace = rollout_stage2(&ctx, &feats, video.label, &mut focus, &mut rng).unwrap();
        let mut policy = b.policy.clone();
        let mut opt = Adam::new(3e-4);
        let res = ppo_update(&mut policy, &mut opt, &[trace], PolicyRole::Skip, &PPOConfig::default());
        assert!(matches!(res, Err(AdaFocusError::Contract(_))));
    }

    /// Two-armed bandit: arm 0 pays +1, arm 1 pays -1. PPO must
    /// concentrate the categorical head on arm 0.
    #[test]
    fn ppo_bandit_converges() {
        let spec = PolicyNetSpec {
            in_channels: 1,
            feat_h: 1,
            feat_w: 1,
            compressed_channels: 2,
            hidden_dim: 8,
            num_actions: 2,
            head: PolicyHeadKind::Categorical,
        };
        let mut rng = rng_from(123, "bandit");
        let mut policy = PolicyNet::new(spec, &mut rng);
        let mut opt = Adam::new(3e-2);
        let cfg = PPOConfig { learning_rate: 3e-2, ..PPOConfig::default() };
        let feats = Array3::from_elem((1, 1, 1), 1.0);

        for _update in 0..200 {
            let mut traces = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (cache, _) = policy.forward_cached(&feats, &policy.init_state()).unwrap();
                let dist = softmax(&cache.logits);
                let action = select_patch(&dist, SelectMode::Sample, &mut rng);
                let reward = if action.index == 0 { 1.0 } else { -1.0 };
                traces.push(EpisodeTrace {
                    label: 0,
                    features: vec![feats.clone()],
                    frames: vec![FrameRecord {
                        t: 0,
                        patch: action,
                        skip: None,
                        p_ty_selected: 1.0,
                        p_ty_baseline: 0.0,
                        p_ty_keep: None,
                        p_ty_drop: None,
                        reward,
                        ret: reward,
                        value: cache.value,
                        advantage: reward - cache.value,
                        skip_reward: None,
                        skip_ret: None,
                        skip_value: None,
                        skip_advantage: None,
                    }],
                    kept: vec![true],
                    final_probs: Array1::zeros(1),
                });
            }
            ppo_update(&mut policy, &mut opt, &traces, PolicyRole::Patch, &cfg).unwrap();
        }

        let (cache, _) = policy.forward_cached(&feats, &policy.init_state()).unwrap();
        let dist = softmax(&cache.logits);
        assert!(dist[0] >= 0.95, "P(best arm) = {}", dist[0]);
    }

    #[test]
    fn export_format_one_line_per_frame() {
        let b = tiny_bundle(true);
        let video = generate_video_with_label(&b.cfg, 0, &mut rng_from(1, "video")).unwrap();
        let feats = glance_all(&b.f_g, &video.frames);
        let ctx = RolloutCtx {
            classifier: &b.classifier,
            policy: &b.policy,
            skip: b.skip.as_ref(),
            grid: &b.grid,
            skip_cfg: SkipRewardConfig { lambda: 1e-6, patch_size: 12 },
            gamma: 0.7,
            reuse_glance: true,
        };
        let mut focus = DirectFocus { f_l: &b.f_l, frames: &video.frames, grid: &b.grid };
        let mut rng = rng_from(2, "e");
        let trace = rollout_stage2(&ctx, &feats, video.label, &mut focus, &mut rng).unwrap();
        let text = export_trace(&trace);
        assert_eq!(text.lines().count(), trace.frames.len());
        assert!(text.lines().all(|l| l.starts_with("t=")));
    }
}
