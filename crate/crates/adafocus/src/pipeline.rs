//! Three-stage training orchestration, the skip-gate extension, online and
//! offline inference, and bundle checkpoints.

use ndarray::{concatenate, Array1, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::costmodel::{episode_cost, ComponentCosts, CostLedger};
use crate::error::{AdaFocusError, Result};
use crate::focuspolicy::{
    build_grid, crop, decide_skip, select_patch, PatchGrid, PolicyNet, PolicyNetSpec, SelectMode,
    SkipMode,
};
use crate::nets::{
    focus, Backbone, Classifier, ClassifierHead, ClassifierSpec, ClassifyCache,
    ConvBackboneSpec, Prediction,
};
use crate::nn::ops::{
    global_avg_pool, global_avg_pool_backward, sigmoid, softmax, softmax_cross_entropy,
};
use crate::nn::optim::Adam;
use crate::nn::param::{collect_params, param_hash, restore_params, ParamVisitor, Params};
use crate::nn::Linear;
use crate::rltrain::{
    calibrate_threshold, ppo_update, rollout_stage2, Calibration, EpisodeTrace, FocusFeatures,
    PPOConfig, PolicyRole, RolloutCtx, SkipRewardConfig,
};
use crate::rng::{rng_from, Rng};
use crate::synthdata::DatasetSplit;

/// Architectural description from which every component can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub frame_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub grid_k: usize,
    pub classifier_head: ClassifierHead,
    pub classifier_hidden: usize,
    pub adafocus_plus: bool,
    /// Feed the pooled glance features to the classifier alongside the
    /// pooled focus features. Off only for the feature-reuse ablation.
    #[serde(default = "default_true")]
    pub reuse_glance: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BundleSpec {
    fn default() -> Self {
        BundleSpec {
            frame_size: 64,
            channels: 1,
            num_classes: 10,
            patch_size: 16,
            grid_k: 5,
            classifier_head: ClassifierHead::Recurrent,
            classifier_hidden: 64,
            adafocus_plus: false,
            reuse_glance: true,
        }
    }
}

/// The full model: glance and focus backbones, patch policy, optional skip
/// gate, recurrent classifier, and the candidate grid.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub f_g: Backbone,
    pub f_l: Backbone,
    pub classifier: Classifier,
    pub policy: PolicyNet,
    pub skip: Option<PolicyNet>,
    pub grid: PatchGrid,
    /// Last completed stage, for checkpoint lineage.
    pub stage: String,
    /// Calibrated keep threshold, if any.
    pub rho: Option<f64>,
}

impl ModelBundle {
    pub fn new(spec: BundleSpec, seed: u64) -> Result<Self> {
        let grid = build_grid(spec.frame_size, spec.patch_size, spec.grid_k)?;
        let f_g = Backbone::new(
            ConvBackboneSpec::glance_default(spec.channels),
            &mut rng_from(seed, "init/f_g"),
        );
        let f_l = Backbone::new(
            ConvBackboneSpec::focus_default(spec.channels),
            &mut rng_from(seed, "init/f_l"),
        );
        let (gh, gw) = f_g.spec.out_hw(spec.frame_size, spec.frame_size);
        let gc = f_g.spec.out_channels();
        let classifier = Classifier::new(
            &ClassifierSpec {
                head: spec.classifier_head,
                input_dim: if spec.reuse_glance { gc } else { 0 } + f_l.spec.out_channels(),
                hidden_dim: spec.classifier_hidden,
                num_classes: spec.num_classes,
            },
            &mut rng_from(seed, "init/f_c"),
        );
        let policy = PolicyNet::new(
            PolicyNetSpec::patch_policy(gc, gh, gw, grid.num_candidates()),
            &mut rng_from(seed, "init/policy"),
        );
        let skip = spec.adafocus_plus.then(|| {
            PolicyNet::new(
                PolicyNetSpec::skip_policy(gc, gh, gw),
                &mut rng_from(seed, "init/skip"),
            )
        });
        Ok(ModelBundle {
            spec,
            f_g,
            f_l,
            classifier,
            policy,
            skip,
            grid,
            stage: "init".into(),
            rho: None,
        })
    }

    pub fn component_costs(&self) -> ComponentCosts {
        ComponentCosts::new(
            &self.f_g,
            &self.f_l,
            &self.policy,
            self.skip.as_ref(),
            &self.classifier,
            self.spec.frame_size,
            self.spec.patch_size,
        )
    }

    /// Pooled-glance dimension as seen by the classifier: zero when glance
    /// reuse is disabled (feature-reuse ablation).
    pub fn glance_dim(&self) -> usize {
        if self.spec.reuse_glance {
            self.f_g.spec.out_channels()
        } else {
            0
        }
    }

    /// Pooled glance block for the classifier input (empty when reuse is
    /// disabled).
    pub fn pooled_block(&self, feats: &Array3<f64>) -> Array1<f64> {
        if self.spec.reuse_glance {
            global_avg_pool(feats)
        } else {
            Array1::zeros(0)
        }
    }

    pub fn freeze_hashes(&mut self) -> (String, String, String) {
        (
            param_hash(&mut self.f_g),
            param_hash(&mut self.f_l),
            param_hash(&mut self.classifier),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Separate learning rate for the focus network where it is trainable
    /// (stages I and III); `None` falls back to `learning_rate`. A small
    /// value here protects pretrained focus features from being washed out
    /// by the mostly-uninformative random-crop gradients of stage I.
    pub f_l_learning_rate: Option<f64>,
    /// Pretrain only: number of epochs for the glance probe; `None` means
    /// the same as `epochs`. The focus probe always runs all `epochs` (its
    /// patches are far cheaper, and center-patch features converge slowly).
    pub glance_epochs: Option<usize>,
    pub batch_size: usize,
    /// Stage III only: also fine-tune the focus network.
    pub train_f_l: bool,
    /// Stage III patch selection: sample from the policy (default) or argmax.
    pub sample_policy: bool,
    pub eta: f64,
    pub lambda: f64,
    pub ppo: PPOConfig,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (epochs, learning_rate) = match stage {
            Stage::Pretrain => (5, 1e-2),
            Stage::Stage1 => (20, 1e-2),
            Stage::Stage2 => (15, 1e-3),
            Stage::Stage3 => (5, 1e-3),
        };
        StageConfig {
            stage,
            epochs,
            learning_rate,
            f_l_learning_rate: match stage {
                Stage::Stage1 => Some(1e-3),
                _ => None,
            },
            glance_epochs: None,
            batch_size: 32,
            train_f_l: false,
            sample_policy: true,
            eta: 0.5,
            lambda: 1e-6,
            ppo: PPOConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub mean_return: f64,
    pub accuracy: f64,
    pub keep_rate: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epochs: Vec<EpochStats>,
}

fn classifier_input(pool_g: &Array1<f64>, local: &Array1<f64>) -> Array1<f64> {
    concatenate![Axis(0), pool_g.view(), local.view()]
}

/// Backbone plus a throwaway linear probe, jointly optimizable.
struct ProbeParams<'a> {
    net: &'a mut Backbone,
    head: &'a mut Linear,
}

impl Params for ProbeParams<'_> {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.net.visit_params(&format!("{prefix}net."), f);
        self.head.visit_params(&format!("{prefix}head."), f);
    }
}

fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// One pretrain pass over a backbone with a linear probe on pooled
/// features. Returns the mean cross-entropy.
fn probe_epoch(
    net: &mut Backbone,
    head: &mut Linear,
    opt: &mut Adam,
    split: &DatasetSplit,
    batch_size: usize,
    mut input_of: impl FnMut(usize, &mut Rng) -> Result<Array3<f64>>,
    rng: &mut Rng,
) -> Result<f64> {
    let order = shuffled_indices(split.samples.len(), rng);
    let mut total_loss = 0.0;
    for batch in order.chunks(batch_size) {
        for &i in batch {
            let x = input_of(i, rng)?;
            let label = split.samples[i].label;
            let (feats, cache) = net.forward_cached(&x);
            let pooled = global_avg_pool(&feats);
            let logits = head.forward(&pooled);
            let (loss, g_logits) = softmax_cross_entropy(&logits, label);
            total_loss += loss;
            let g_pool = head.backward(&g_logits, &pooled);
            let (c, h, w) = feats.dim();
            let g_feats = global_avg_pool_backward(&g_pool, c, h, w);
            net.backward(&g_feats, &cache);
        }
        let mut joint = ProbeParams { net: &mut *net, head: &mut *head };
        joint.scale_grads(1.0 / batch.len() as f64);
        opt.apply(&mut joint)?;
        joint.zero_grads();
    }
    Ok(total_loss / split.samples.len() as f64)
}

/// Brief standalone training of both backbones with throwaway probes: the
/// glance network on full frames, the focus network on center patches.
pub fn pretrain(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageReport> {
    let classes = bundle.spec.num_classes;
    let p = bundle.spec.patch_size;
    let center = (bundle.spec.frame_size - p) / 2;
    let mut head_g = Linear::new(bundle.f_g.spec.out_channels(), classes, &mut rng_from(seed, "pre/head_g"));
    let mut head_l = Linear::new(
        bundle.f_l.spec.out_channels(),
        classes,
        &mut rng_from(seed, "pre/head_l"),
    );
    let mut opt_g = Adam::new(cfg.learning_rate);
    let mut opt_l = Adam::new(cfg.learning_rate);
    let mut rng = rng_from(seed, "pre/order");
    let mut report = StageReport { stage: "pretrain".into(), epochs: vec![] };

    let glance_epochs = cfg.glance_epochs.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut loss_g = 0.0;
    for epoch in 0..cfg.epochs {
        if epoch < glance_epochs {
            loss_g = probe_epoch(
                &mut bundle.f_g,
                &mut head_g,
                &mut opt_g,
                split,
                cfg.batch_size,
                |i, r| {
                    let t = r.gen_range(0..split.samples[i].frames.len());
                    Ok(split.samples[i].frames[t].clone())
                },
                &mut rng,
            )?;
        }
        let loss_l = probe_epoch(
            &mut bundle.f_l,
            &mut head_l,
            &mut opt_l,
            split,
            cfg.batch_size,
            |i, r| {
                let t = r.gen_range(0..split.samples[i].frames.len());
                crop(&split.samples[i].frames[t], (center, center), p)
            },
            &mut rng,
        )?;
        if std::env::var("ADAFOCUS_DEBUG").is_ok() {
            eprintln!("pretrain epoch {epoch}: loss_g {loss_g:.4} loss_l {loss_l:.4}");
        }
        report.epochs.push(EpochStats {
            loss: 0.5 * (loss_g + loss_l),
            ..EpochStats::default()
        });
    }
    bundle.stage = "pretrain".into();
    Ok(report)
}

/// Pooled glance features for every frame of every sample (glance network
/// frozen for the duration of a stage).
pub fn pooled_glance_cache(bundle: &ModelBundle, split: &DatasetSplit) -> Vec<Vec<Array1<f64>>> {
    split
        .samples
        .iter()
        .map(|s| {
            s.frames
                .iter()
                .map(|f| bundle.pooled_block(&bundle.f_g.forward(f)))
                .collect()
        })
        .collect()
}

/// Full glance feature maps (policy input) for every frame of every sample.
pub fn glance_feature_cache(f_g: &Backbone, split: &DatasetSplit) -> Vec<Vec<Array3<f64>>> {
    split
        .samples
        .iter()
        .map(|s| s.frames.iter().map(|f| f_g.forward(f)).collect())
        .collect()
}

/// Memoizing pooled-focus provider over one sample (valid while the focus
/// network is frozen).
pub struct CachedFocus<'a> {
    pub f_l: &'a Backbone,
    pub frames: &'a [Array3<f64>],
    pub grid: &'a PatchGrid,
    pub cache: &'a mut HashMap<(usize, usize), Array1<f64>>,
}

impl FocusFeatures for CachedFocus<'_> {
    fn pooled(&mut self, frame_idx: usize, candidate: usize) -> Result<Array1<f64>> {
        if let Some(v) = self.cache.get(&(frame_idx, candidate)) {
            return Ok(v.clone());
        }
        let patch = crop(&self.frames[frame_idx], self.grid.offsets[candidate], self.grid.patch_size)?;
        let v = focus(self.f_l, &patch, self.grid.patch_size)?.pooled();
        self.cache.insert((frame_idx, candidate), v.clone());
        Ok(v)
    }
}

struct FrameStep {
    cls: ClassifyCache,
    focus: Option<crate::nets::BackboneCache>,
    patch_hw: (usize, usize),
    g_logits: Array1<f64>,
}

/// Shared supervised episode pass for stages I and III: run the classifier
/// over one video with the given per-frame offsets, accumulate the Eq.-5
/// style mean cross-entropy, and backpropagate into the classifier (and the
/// focus network when `train_f_l`).
fn supervised_episode(
    mut f_l: Option<&mut Backbone>,
    classifier: &mut Classifier,
    frames: &[Array3<f64>],
    pooled_g: &[Array1<f64>],
    offsets: &[(usize, usize)],
    patch_size: usize,
    label: usize,
    frozen_focus: Option<&mut dyn FocusFeatures>,
    offset_to_candidate: impl Fn(usize) -> usize,
) -> Result<(f64, bool)> {
    let t_len = frames.len();
    let mut state = classifier.init_state();
    let mut steps: Vec<FrameStep> = Vec::with_capacity(t_len);
    let mut loss_sum = 0.0;
    let mut frozen_focus = frozen_focus;
    let mut correct = false;

    for t in 0..t_len {
        let (local, fcache, phw) = if let Some(f_l) = f_l.as_deref_mut() {
            let patch = crop(&frames[t], offsets[t], patch_size)?;
            let (feats, cache) = f_l.forward_cached(&patch);
            let (_, h, w) = feats.dim();
            (global_avg_pool(&feats), Some(cache), (h, w))
        } else {
            let provider = frozen_focus
                .as_deref_mut()
                .ok_or_else(|| AdaFocusError::Contract("frozen focus provider missing".into()))?;
            (provider.pooled(t, offset_to_candidate(t))?, None, (0, 0))
        };
        let input = classifier_input(&pooled_g[t], &local);
        let (pred, next, cache) = classifier.step_cached(&input, &state)?;
        state = next;
        let (loss, g_logits) = softmax_cross_entropy(&cache.logits, label);
        loss_sum += loss;
        if t + 1 == t_len {
            correct = pred.argmax() == label;
        }
        steps.push(FrameStep { cls: cache, focus: fcache, patch_hw: phw, g_logits });
    }

    let scale = 1.0 / t_len as f64;
    let glance_dim = pooled_g[0].len();
    let mut gh = Array1::zeros(match classifier {
        Classifier::Recurrent { gru, .. } => gru.hidden_dim,
        Classifier::Averaging { .. } => 0,
    });
    for step in steps.iter().rev() {
        let g_logits = &step.g_logits * scale;
        let (g_input, gh_prev) = classifier.backward_step(&g_logits, &gh, &step.cls)?;
        gh = gh_prev;
        if let (Some(fcache), Some(f_l)) = (&step.focus, f_l.as_deref_mut()) {
            let g_local = g_input.slice(ndarray::s![glance_dim..]).to_owned();
            let (h, w) = step.patch_hw;
            let c = g_local.len();
            let g_feats = global_avg_pool_backward(&g_local, c, h, w);
            f_l.backward(&g_feats, fcache);
        }
    }
    Ok((loss_sum * scale, correct))
}

/// Stage I warm-up: trains the focus network and the classifier on
/// uniformly random in-bounds patch offsets; the glance network is frozen.
pub fn stage1_warmup(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageReport> {
    let pooled = pooled_glance_cache(bundle, split);
    let max_off = bundle.spec.frame_size - bundle.spec.patch_size;
    let p = bundle.spec.patch_size;
    let mut opt_cls = Adam::new(cfg.learning_rate);
    let mut opt_fl = Adam::new(cfg.f_l_learning_rate.unwrap_or(cfg.learning_rate));
    let mut rng = rng_from(seed, "stage1/order");
    let mut report = StageReport { stage: "stage1".into(), epochs: vec![] };

    for _epoch in 0..cfg.epochs {
        let order = shuffled_indices(split.samples.len(), &mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let sample = &split.samples[i];
                let offsets: Vec<(usize, usize)> = (0..sample.frames.len())
                    .map(|_| (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off)))
                    .collect();
                let (loss, ok) = supervised_episode(
                    Some(&mut bundle.f_l),
                    &mut bundle.classifier,
                    &sample.frames,
                    &pooled[i],
                    &offsets,
                    p,
                    sample.label,
                    None,
                    |_| 0,
                )?;
                total_loss += loss;
                correct += ok as usize;
            }
            let scale = 1.0 / batch.len() as f64;
            bundle.f_l.scale_grads(scale);
            bundle.classifier.scale_grads(scale);
            opt_fl.apply(&mut bundle.f_l)?;
            opt_cls.apply(&mut bundle.classifier)?;
            bundle.f_l.zero_grads();
            bundle.classifier.zero_grads();
        }
        report.epochs.push(EpochStats {
            loss: total_loss / split.samples.len() as f64,
            accuracy: correct as f64 / split.samples.len() as f64,
            ..EpochStats::default()
        });
    }
    bundle.stage = "stage1".into();
    Ok(report)
}

/// Stage II: PPO training of the patch policy (and skip gate when present)
/// with all backbones and the classifier frozen. Returns per-epoch mean
/// Eq.-7 return and accuracy.
pub fn stage2_policy_learning(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageReport> {
    let (h_g, h_l, h_c) = bundle.freeze_hashes();
    let glance = glance_feature_cache(&bundle.f_g, split);
    let mut focus_caches: Vec<HashMap<(usize, usize), Array1<f64>>> =
        vec![HashMap::new(); split.samples.len()];
    let mut opt_p = Adam::new(cfg.ppo.learning_rate);
    let mut opt_s = Adam::new(cfg.ppo.learning_rate);
    let mut rng = rng_from(seed, "stage2/rollouts");
    let skip_cfg = SkipRewardConfig { lambda: cfg.lambda, patch_size: bundle.spec.patch_size };
    let mut report = StageReport { stage: "stage2".into(), epochs: vec![] };

    for _epoch in 0..cfg.epochs {
        let order = shuffled_indices(split.samples.len(), &mut rng);
        let mut sum_return = 0.0;
        let mut correct = 0usize;
        let mut kept_frames = 0usize;
        let mut total_frames = 0usize;
        for batch in order.chunks(cfg.ppo.batch_size) {
            let mut traces: Vec<EpisodeTrace> = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &split.samples[i];
                let ctx = RolloutCtx {
                    classifier: &bundle.classifier,
                    policy: &bundle.policy,
                    skip: bundle.skip.as_ref(),
                    grid: &bundle.grid,
                    skip_cfg,
                    gamma: cfg.ppo.gamma,
                    reuse_glance: bundle.spec.reuse_glance,
                };
                let mut focus_feats = CachedFocus {
                    f_l: &bundle.f_l,
                    frames: &sample.frames,
                    grid: &bundle.grid,
                    cache: &mut focus_caches[i],
                };
                let trace =
                    rollout_stage2(&ctx, &glance[i], sample.label, &mut focus_feats, &mut rng)?;
                sum_return += trace.frames.first().map(|r| r.ret).unwrap_or(0.0);
                correct += (Prediction { probs: trace.final_probs.clone() }.argmax()
                    == sample.label) as usize;
                kept_frames += trace.kept.iter().filter(|&&k| k).count();
                total_frames += trace.kept.len();
                traces.push(trace);
            }
            ppo_update(&mut bundle.policy, &mut opt_p, &traces, PolicyRole::Patch, &cfg.ppo)?;
            if let Some(skip) = bundle.skip.as_mut() {
                ppo_update(skip, &mut opt_s, &traces, PolicyRole::Skip, &cfg.ppo)?;
            }
        }
        report.epochs.push(EpochStats {
            mean_return: sum_return / split.samples.len() as f64,
            accuracy: correct as f64 / split.samples.len() as f64,
            keep_rate: kept_frames as f64 / total_frames.max(1) as f64,
            ..EpochStats::default()
        });
    }

    let (h_g2, h_l2, h_c2) = bundle.freeze_hashes();
    if (h_g, h_l, h_c) != (h_g2, h_l2, h_c2) {
        return Err(AdaFocusError::Contract(
            "stage2 freeze contract violated: backbone or classifier changed".into(),
        ));
    }
    bundle.stage = "stage2".into();
    Ok(report)
}

/// Stage III: fine-tune the classifier (and optionally the focus network)
/// under the learned, frozen patch policy.
pub fn stage3_finetune(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageReport> {
    let policy_hash = param_hash(&mut bundle.policy);
    let glance = glance_feature_cache(&bundle.f_g, split);
    let pooled: Vec<Vec<Array1<f64>>> = glance
        .iter()
        .map(|fs| fs.iter().map(|f| bundle.pooled_block(f)).collect())
        .collect();
    let mut focus_caches: Vec<HashMap<(usize, usize), Array1<f64>>> =
        vec![HashMap::new(); split.samples.len()];
    let select = if cfg.sample_policy { SelectMode::Sample } else { SelectMode::Argmax };
    let p = bundle.spec.patch_size;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut opt_fl = Adam::new(cfg.f_l_learning_rate.unwrap_or(cfg.learning_rate));
    let mut rng = rng_from(seed, "stage3/order");
    let mut report = StageReport { stage: "stage3".into(), epochs: vec![] };

    for _epoch in 0..cfg.epochs {
        let order = shuffled_indices(split.samples.len(), &mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let sample = &split.samples[i];
                // frozen policy chooses the per-frame candidates
                let mut p_state = bundle.policy.init_state();
                let mut cands = Vec::with_capacity(sample.frames.len());
                for feats in &glance[i] {
                    let (cache, next) = bundle.policy.forward_cached(feats, &p_state)?;
                    let dist = softmax(&cache.logits);
                    cands.push(select_patch(&dist, select, &mut rng).index);
                    p_state = next;
                }
                let offsets: Vec<(usize, usize)> =
                    cands.iter().map(|&k| bundle.grid.offsets[k]).collect();
                let (loss, ok) = if cfg.train_f_l {
                    supervised_episode(
                        Some(&mut bundle.f_l),
                        &mut bundle.classifier,
                        &sample.frames,
                        &pooled[i],
                        &offsets,
                        p,
                        sample.label,
                        None,
                        |t| cands[t],
                    )?
                } else {
                    let mut frozen = CachedFocus {
                        f_l: &bundle.f_l,
                        frames: &sample.frames,
                        grid: &bundle.grid,
                        cache: &mut focus_caches[i],
                    };
                    supervised_episode(
                        None,
                        &mut bundle.classifier,
                        &sample.frames,
                        &pooled[i],
                        &offsets,
                        p,
                        sample.label,
                        Some(&mut frozen),
                        |t| cands[t],
                    )?
                };
                total_loss += loss;
                correct += ok as usize;
            }
            let scale = 1.0 / batch.len() as f64;
            if cfg.train_f_l {
                bundle.f_l.scale_grads(scale);
                opt_fl.apply(&mut bundle.f_l)?;
                bundle.f_l.zero_grads();
            }
            bundle.classifier.scale_grads(scale);
            opt.apply(&mut bundle.classifier)?;
            bundle.classifier.zero_grads();
        }
        report.epochs.push(EpochStats {
            loss: total_loss / split.samples.len() as f64,
            accuracy: correct as f64 / split.samples.len() as f64,
            ..EpochStats::default()
        });
    }

    if param_hash(&mut bundle.policy) != policy_hash {
        return Err(AdaFocusError::Contract("stage3 must not modify the policy".into()));
    }
    bundle.stage = "stage3".into();
    Ok(report)
}

/// Calibrate the skip threshold on a split: collect keep probabilities over
/// every frame, then take the quantile for the configured keep fraction.
/// Stores rho on the bundle.
pub fn calibrate(bundle: &mut ModelBundle, split: &DatasetSplit, eta: f64) -> Result<Calibration> {
    let skip = bundle.skip.as_ref().ok_or_else(|| {
        AdaFocusError::Config("calibration requires the skip gate to be enabled".into())
    })?;
    let mut scores = Vec::new();
    for sample in &split.samples {
        let mut state = skip.init_state();
        for frame in &sample.frames {
            let feats = bundle.f_g.forward(frame);
            let (cache, next) = skip.forward_cached(&feats, &state)?;
            scores.push(sigmoid(cache.logits[0]));
            state = next;
        }
    }
    let cal = calibrate_threshold(&scores, eta)?;
    bundle.rho = Some(cal.rho);
    Ok(cal)
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// One prediction per processed frame (online) or just the final one
    /// replicated semantics: offline fills only the last entry's value.
    pub predictions: Vec<Prediction>,
    pub actions: Vec<usize>,
    pub kept: Vec<bool>,
    pub ledger: CostLedger,
}

impl InferenceResult {
    pub fn final_prediction(&self) -> &Prediction {
        self.predictions.last().expect("at least one frame")
    }
}

fn skip_threshold(bundle: &ModelBundle, use_plus: bool) -> Result<Option<f64>> {
    if !use_plus {
        return Ok(None);
    }
    let Some(_) = bundle.skip.as_ref() else {
        return Err(AdaFocusError::Config(
            "adaptive skipping requested but the bundle has no skip gate".into(),
        ));
    };
    match bundle.rho {
        Some(r) => Ok(Some(r)),
        None => Err(AdaFocusError::Config(
            "adaptive skipping requires a calibrated threshold; run calibrate first".into(),
        )),
    }
}

/// Online inference: frames strictly in order, a prediction after each.
/// Patch selection is argmax; skipped frames contribute a zero vector in
/// place of the pooled focus features.
pub fn infer_online(
    bundle: &ModelBundle,
    frames: &[Array3<f64>],
    use_plus: bool,
) -> Result<InferenceResult> {
    let rho = skip_threshold(bundle, use_plus)?;
    let local_dim = bundle.classifier.input_dim() - bundle.glance_dim();
    let zeros_local = Array1::zeros(local_dim);
    let mut dummy = rng_from(0, "infer/unused");

    let mut cls_state = bundle.classifier.init_state();
    let mut p_state = bundle.policy.init_state();
    let mut s_state = bundle.skip.as_ref().map(|s| s.init_state());
    let mut out = InferenceResult {
        predictions: Vec::with_capacity(frames.len()),
        actions: Vec::with_capacity(frames.len()),
        kept: Vec::with_capacity(frames.len()),
        ledger: CostLedger::default(),
    };

    for frame in frames {
        let feats = bundle.f_g.forward(frame);
        let pool_g = bundle.pooled_block(&feats);

        let (p_cache, p_next) = bundle.policy.forward_cached(&feats, &p_state)?;
        let dist = softmax(&p_cache.logits);
        let action = select_patch(&dist, SelectMode::Argmax, &mut dummy);
        p_state = p_next;

        let kept = match (bundle.skip.as_ref(), s_state.as_mut(), rho) {
            (Some(skip), Some(st), Some(r)) => {
                let (s_cache, s_next) = skip.forward_cached(&feats, st)?;
                let p_keep = sigmoid(s_cache.logits[0]);
                *st = s_next;
                decide_skip(p_keep, SkipMode::Threshold(r), &mut dummy).keep
            }
            (Some(skip), Some(st), None) => {
                // gate present but plus disabled: still advance its state so
                // resuming with a threshold later sees the same recurrence
                let (_, s_next) = skip.forward_cached(&feats, st)?;
                *st = s_next;
                true
            }
            _ => true,
        };

        let local = if kept {
            let patch = crop(frame, bundle.grid.offsets[action.index], bundle.spec.patch_size)?;
            focus(&bundle.f_l, &patch, bundle.spec.patch_size)?.pooled()
        } else {
            zeros_local.clone()
        };
        let (pred, next) = bundle.classifier.step(&classifier_input(&pool_g, &local), &cls_state)?;
        cls_state = next;
        out.predictions.push(pred);
        out.actions.push(action.index);
        out.kept.push(kept);
    }
    if !bundle.spec.reuse_glance && out.kept.iter().all(|&k| !k) {
        return Err(AdaFocusError::Config(
            "every frame skipped with glance reuse disabled: the classifier has no input".into(),
        ));
    }
    out.ledger = episode_cost(&bundle.component_costs(), &out.kept);
    Ok(out)
}

/// Offline inference: batched phase order (all glance passes, then the
/// policy recurrences, then the focus passes, then the classifier); returns
/// only the final prediction. Must match online's final prediction.
pub fn infer_offline(
    bundle: &ModelBundle,
    frames: &[Array3<f64>],
    use_plus: bool,
) -> Result<InferenceResult> {
    let rho = skip_threshold(bundle, use_plus)?;
    let mut dummy = rng_from(0, "infer/unused");

    // phase 1: glance features for every frame
    let feats: Vec<Array3<f64>> = frames.iter().map(|f| bundle.f_g.forward(f)).collect();
    let pooled: Vec<Array1<f64>> = feats.iter().map(|f| bundle.pooled_block(f)).collect();

    // phase 2: policy recurrences
    let mut p_state = bundle.policy.init_state();
    let mut actions = Vec::with_capacity(frames.len());
    for f in &feats {
        let (cache, next) = bundle.policy.forward_cached(f, &p_state)?;
        actions.push(select_patch(&softmax(&cache.logits), SelectMode::Argmax, &mut dummy).index);
        p_state = next;
    }
    let mut kept = vec![true; frames.len()];
    if let (Some(skip), Some(r)) = (bundle.skip.as_ref(), rho) {
        let mut st = skip.init_state();
        for (k, f) in kept.iter_mut().zip(&feats) {
            let (cache, next) = skip.forward_cached(f, &st)?;
            *k = sigmoid(cache.logits[0]) >= r;
            st = next;
        }
    }

    if !bundle.spec.reuse_glance && kept.iter().all(|&k| !k) {
        return Err(AdaFocusError::Config(
            "every frame skipped with glance reuse disabled: the classifier has no input".into(),
        ));
    }

    // phase 3: focus features for kept frames (parallelizable batch)
    let local_dim = bundle.classifier.input_dim() - bundle.glance_dim();
    let locals: Vec<Array1<f64>> = frames
        .iter()
        .zip(&actions)
        .zip(&kept)
        .map(|((frame, &a), &k)| -> Result<Array1<f64>> {
            if k {
                let patch = crop(frame, bundle.grid.offsets[a], bundle.spec.patch_size)?;
                Ok(focus(&bundle.f_l, &patch, bundle.spec.patch_size)?.pooled())
            } else {
                Ok(Array1::zeros(local_dim))
            }
        })
        .collect::<Result<_>>()?;

    // phase 4: classifier recurrence, keep only the final prediction
    let mut cls_state = bundle.classifier.init_state();
    let mut last = None;
    for (pg, local) in pooled.iter().zip(&locals) {
        let (pred, next) = bundle.classifier.step(&classifier_input(pg, local), &cls_state)?;
        cls_state = next;
        last = Some(pred);
    }
    let ledger = episode_cost(&bundle.component_costs(), &kept);
    Ok(InferenceResult {
        predictions: vec![last.ok_or_else(|| AdaFocusError::Contract("empty video".into()))?],
        actions,
        kept,
        ledger,
    })
}

// --- checkpoints ---------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"AFCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: BundleSpec,
    stage: String,
    rho: Option<f64>,
}

fn write_params<W: Write>(w: &mut W, params: &[(String, Vec<usize>, Vec<f64>)]) -> std::io::Result<()> {
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, shape, values) in params {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn fmt_err(field: &str) -> AdaFocusError {
    AdaFocusError::Format(format!("checkpoint truncated while reading {field}"))
}

fn read_exact_field<R: Read>(r: &mut R, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| fmt_err(field))
}

fn read_u16<R: Read>(r: &mut R, field: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_field(r, &mut b, field)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_field(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn read_params<R: Read>(r: &mut R) -> Result<HashMap<String, (Vec<usize>, Vec<f64>)>> {
    let n = read_u32(r, "param count")? as usize;
    let mut out = HashMap::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u16(r, "param name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_field(r, &mut name, "param name")?;
        let name = String::from_utf8(name)
            .map_err(|_| AdaFocusError::Format("param name is not UTF-8".into()))?;
        let mut ndim = [0u8; 1];
        read_exact_field(r, &mut ndim, "param rank")?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(r, "param dim")? as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            read_exact_field(r, &mut b, "param values")?;
            values.push(f64::from_le_bytes(b));
        }
        out.insert(name, (shape, values));
    }
    Ok(out)
}

/// Serialize the bundle to a versioned binary checkpoint, written atomically
/// (temp file then rename).
pub fn save_bundle(path: &Path, bundle: &mut ModelBundle) -> Result<()> {
    let meta = CheckpointMeta {
        spec: bundle.spec.clone(),
        stage: bundle.stage.clone(),
        rho: bundle.rho,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| AdaFocusError::Format(format!("metadata serialization failed: {e}")))?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    let num_components = 4 + bundle.skip.is_some() as u32;
    buf.extend_from_slice(&num_components.to_le_bytes());
    let write_component = |buf: &mut Vec<u8>, name: &str, params: Vec<(String, Vec<usize>, Vec<f64>)>| {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_params(buf, &params).expect("in-memory write");
    };
    write_component(&mut buf, "f_g", collect_params(&mut bundle.f_g));
    write_component(&mut buf, "f_l", collect_params(&mut bundle.f_l));
    write_component(&mut buf, "f_c", collect_params(&mut bundle.classifier));
    write_component(&mut buf, "policy", collect_params(&mut bundle.policy));
    if let Some(skip) = bundle.skip.as_mut() {
        write_component(&mut buf, "skip", collect_params(skip));
    }

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a bundle checkpoint; reconstructs the architecture from the stored
/// spec and restores every parameter bit-exactly.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let data = std::fs::read(path)?;
    let mut r = &data[..];

    let mut magic = [0u8; 4];
    read_exact_field(&mut r, &mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(AdaFocusError::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CKPT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CKPT_VERSION {
        return Err(AdaFocusError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len8 = [0u8; 8];
    read_exact_field(&mut r, &mut len8, "metadata length")?;
    let meta_len = u64::from_le_bytes(len8) as usize;
    if r.len() < meta_len {
        return Err(fmt_err("metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&r[..meta_len])
        .map_err(|e| AdaFocusError::Format(format!("metadata parse failed: {e}")))?;
    r = &r[meta_len..];

    let mut bundle = ModelBundle::new(meta.spec, 0)?;
    bundle.stage = meta.stage;
    bundle.rho = meta.rho;

    let num_components = read_u32(&mut r, "component count")?;
    for _ in 0..num_components {
        let name_len = read_u16(&mut r, "component name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_field(&mut r, &mut name, "component name")?;
        let params = read_params(&mut r)?;
        match name.as_slice() {
            b"f_g" => restore_params(&mut bundle.f_g, &params)?,
            b"f_l" => restore_params(&mut bundle.f_l, &params)?,
            b"f_c" => restore_params(&mut bundle.classifier, &params)?,
            b"policy" => restore_params(&mut bundle.policy, &params)?,
            b"skip" => {
                let skip = bundle.skip.as_mut().ok_or_else(|| {
                    AdaFocusError::Format("checkpoint has skip params but spec disables it".into())
                })?;
                restore_params(skip, &params)?;
            }
            other => {
                return Err(AdaFocusError::Format(format!(
                    "unknown checkpoint component {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_split, SplitRole, SynthConfig};

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            frame_size: 32,
            frames_per_video: 4,
            glyph_size: 6,
            ..SynthConfig::default()
        }
    }

    fn tiny_spec(plus: bool) -> BundleSpec {
        BundleSpec {
            frame_size: 32,
            patch_size: 12,
            grid_k: 3,
            classifier_hidden: 32,
            adafocus_plus: plus,
            ..BundleSpec::default()
        }
    }

    fn tiny_split(n: usize, seed: u64) -> DatasetSplit {
        generate_split(&tiny_cfg(), n, SplitRole::Train, seed).unwrap()
    }

    fn tiny_stage_cfg(stage: Stage, epochs: usize) -> StageConfig {
        let mut c = StageConfig::defaults(stage);
        c.epochs = epochs;
        c.batch_size = 16;
        c.ppo.batch_size = 16;
        c
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let mut bundle = ModelBundle::new(tiny_spec(true), 42).unwrap();
        bundle.rho = Some(0.375);
        bundle.stage = "stage2".into();
        save_bundle(&path, &mut bundle).unwrap();
        let mut loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded.stage, "stage2");
        assert_eq!(loaded.rho, Some(0.375));
        assert_eq!(bundle.freeze_hashes(), loaded.freeze_hashes());
        assert_eq!(param_hash(&mut bundle.policy), param_hash(&mut loaded.policy));
        assert_eq!(
            param_hash(bundle.skip.as_mut().unwrap()),
            param_hash(loaded.skip.as_mut().unwrap())
        );
    }

    #[test]
    fn checkpoint_truncation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        let mut bundle = ModelBundle::new(tiny_spec(false), 1).unwrap();
        save_bundle(&path, &mut bundle).unwrap();
        let data = std::fs::read(&path).unwrap();
        std::fs::write(&path, &data[..data.len() / 2]).unwrap();
        assert!(matches!(load_bundle(&path), Err(AdaFocusError::Format(_))));
    }

    #[test]
    fn checkpoint_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load_bundle(&path), Err(AdaFocusError::Format(_))));
    }

    #[test]
    fn online_one_prediction_per_frame() {
        let bundle = ModelBundle::new(tiny_spec(false), 3).unwrap();
        let split = tiny_split(10, 5);
        let res = infer_online(&bundle, &split.samples[0].frames, false).unwrap();
        assert_eq!(res.predictions.len(), 4);
        assert_eq!(res.kept, vec![true; 4]);
        assert_eq!(res.ledger.per_frame.len(), 4);
        // single-frame video yields exactly one prediction
        let one = infer_online(&bundle, &split.samples[1].frames[..1], false).unwrap();
        assert_eq!(one.predictions.len(), 1);
    }

    #[test]
    fn online_offline_final_prediction_consistency() {
        let bundle = ModelBundle::new(tiny_spec(true), 9).unwrap();
        let split = tiny_split(10, 77);
        let mut bundle = bundle;
        bundle.rho = Some(0.5);
        for s in &split.samples {
            for plus in [false, true] {
                let on = infer_online(&bundle, &s.frames, plus).unwrap();
                let off = infer_offline(&bundle, &s.frames, plus).unwrap();
                let d = (&on.predictions.last().unwrap().probs
                    - &off.final_prediction().probs)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(d <= 1e-6, "online/offline diverged by {d}");
                assert_eq!(on.kept, off.kept);
                assert_eq!(on.ledger.total(), off.ledger.total());
            }
        }
    }

    #[test]
    fn plus_with_rho_zero_matches_plain() {
        let mut bundle = ModelBundle::new(tiny_spec(true), 4).unwrap();
        bundle.rho = Some(0.0);
        let split = tiny_split(10, 8);
        for s in &split.samples {
            let plain = infer_online(&bundle, &s.frames, false).unwrap();
            let plus = infer_online(&bundle, &s.frames, true).unwrap();
            assert!(plus.kept.iter().all(|&k| k));
            for (a, b) in plain.predictions.iter().zip(&plus.predictions) {
                assert_eq!(a.probs, b.probs);
            }
        }
    }

    #[test]
    fn plus_without_calibration_is_config_error() {
        let bundle = ModelBundle::new(tiny_spec(true), 4).unwrap();
        let split = tiny_split(10, 8);
        assert!(matches!(
            infer_online(&bundle, &split.samples[0].frames, true),
            Err(AdaFocusError::Config(_))
        ));
        // plus requested on a bundle without a skip gate at all
        let plain = ModelBundle::new(tiny_spec(false), 4).unwrap();
        assert!(matches!(
            infer_online(&plain, &split.samples[0].frames, true),
            Err(AdaFocusError::Config(_))
        ));
    }

    #[test]
    fn all_skipped_equals_global_only_path() {
        let mut bundle = ModelBundle::new(tiny_spec(true), 6).unwrap();
        bundle.rho = Some(1.0); // sigmoid < 1 everywhere: every frame dropped
        let split = tiny_split(10, 12);
        for s in &split.samples {
            let res = infer_online(&bundle, &s.frames, true).unwrap();
            assert!(res.kept.iter().all(|&k| !k));
            assert_eq!(res.ledger.focus, 0);
            // reference: classifier stepped with zeroed local features
            let local_dim = bundle.classifier.input_dim() - bundle.glance_dim();
            let zeros = Array1::zeros(local_dim);
            let mut state = bundle.classifier.init_state();
            let mut last = None;
            for frame in &s.frames {
                let pool_g = global_avg_pool(&bundle.f_g.forward(frame));
                let (pred, next) = bundle
                    .classifier
                    .step(&classifier_input(&pool_g, &zeros), &state)
                    .unwrap();
                state = next;
                last = Some(pred);
            }
            assert_eq!(res.predictions.last().unwrap().probs, last.unwrap().probs);
        }
    }

    #[test]
    fn ledger_matches_costmodel_identity() {
        let bundle = ModelBundle::new(tiny_spec(false), 2).unwrap();
        let split = tiny_split(10, 3);
        let res = infer_online(&bundle, &split.samples[0].frames, false).unwrap();
        let expected = episode_cost(&bundle.component_costs(), &res.kept);
        assert_eq!(res.ledger, expected);
    }

    #[test]
    fn stage1_initial_loss_near_uniform_ce() {
        let mut bundle = ModelBundle::new(tiny_spec(false), 21).unwrap();
        let split = tiny_split(20, 31);
        let cfg = tiny_stage_cfg(Stage::Stage1, 1);
        let report = stage1_warmup(&mut bundle, &split, &cfg, 500).unwrap();
        let loss = report.epochs[0].loss;
        assert!(
            (loss - (10.0f64).ln()).abs() < 0.3,
            "first-epoch loss {loss} not near ln(10)"
        );
        assert_eq!(bundle.stage, "stage1");
    }

    #[test]
    fn stage2_freezes_backbones_and_classifier() {
        let mut bundle = ModelBundle::new(tiny_spec(true), 22).unwrap();
        let split = tiny_split(16, 32);
        let before = bundle.freeze_hashes();
        let policy_before = param_hash(&mut bundle.policy);
        let cfg = tiny_stage_cfg(Stage::Stage2, 1);
        let report = stage2_policy_learning(&mut bundle, &split, &cfg, 501).unwrap();
        assert_eq!(bundle.freeze_hashes(), before);
        assert_ne!(param_hash(&mut bundle.policy), policy_before);
        assert_eq!(report.epochs.len(), 1);
        assert!(report.epochs[0].keep_rate > 0.0);
    }

    #[test]
    fn stage3_default_leaves_f_l_and_policy_unchanged() {
        let mut bundle = ModelBundle::new(tiny_spec(false), 23).unwrap();
        let split = tiny_split(12, 33);
        let f_l_before = param_hash(&mut bundle.f_l);
        let cls_before = param_hash(&mut bundle.classifier);
        let cfg = tiny_stage_cfg(Stage::Stage3, 1);
        stage3_finetune(&mut bundle, &split, &cfg, 502).unwrap();
        assert_eq!(param_hash(&mut bundle.f_l), f_l_before);
        assert_ne!(param_hash(&mut bundle.classifier), cls_before);
    }

    #[test]
    fn stage3_can_train_f_l_when_asked() {
        let mut bundle = ModelBundle::new(tiny_spec(false), 24).unwrap();
        let split = tiny_split(10, 34);
        let f_l_before = param_hash(&mut bundle.f_l);
        let mut cfg = tiny_stage_cfg(Stage::Stage3, 1);
        cfg.train_f_l = true;
        stage3_finetune(&mut bundle, &split, &cfg, 503).unwrap();
        assert_ne!(param_hash(&mut bundle.f_l), f_l_before);
    }

    #[test]
    fn pretrain_probe_beats_chance() {
        let mut bundle = ModelBundle::new(tiny_spec(false), 25).unwrap();
        let split = tiny_split(60, 35);
        let mut cfg = tiny_stage_cfg(Stage::Pretrain, 4);
        cfg.learning_rate = 3e-3;
        let report = pretrain(&mut bundle, &split, &cfg, 504).unwrap();
        let first = report.epochs.first().unwrap().loss;
        let last = report.epochs.last().unwrap().loss;
        assert!(last < first, "pretrain loss did not fall: {first} -> {last}");
        assert_eq!(bundle.stage, "pretrain");
    }

    #[test]
    fn calibrate_sets_rho_and_covers_eta() {
        let mut bundle = ModelBundle::new(tiny_spec(true), 26).unwrap();
        let split = tiny_split(10, 36);
        let cal = calibrate(&mut bundle, &split, 0.5).unwrap();
        assert_eq!(bundle.rho, Some(cal.rho));
        let n = (split.samples.len() * 4) as f64;
        assert!(cal.kept_fraction >= 0.5 && cal.kept_fraction <= 0.5 + 1.0 / n);
        // calibration without a skip gate is a configuration error
        let mut plain = ModelBundle::new(tiny_spec(false), 26).unwrap();
        assert!(matches!(
            calibrate(&mut plain, &split, 0.5),
            Err(AdaFocusError::Config(_))
        ));
    }

    #[test]
    fn full_three_stage_run_is_deterministic() {
        let run = || {
            let split = tiny_split(10, 40);
            let mut bundle = ModelBundle::new(tiny_spec(false), 50).unwrap();
            stage1_warmup(&mut bundle, &split, &tiny_stage_cfg(Stage::Stage1, 1), 600).unwrap();
            stage2_policy_learning(&mut bundle, &split, &tiny_stage_cfg(Stage::Stage2, 1), 601)
                .unwrap();
            stage3_finetune(&mut bundle, &split, &tiny_stage_cfg(Stage::Stage3, 1), 602).unwrap();
            (
                bundle.freeze_hashes(),
                param_hash(&mut bundle.policy),
            )
        };
        assert_eq!(run(), run());
    }
}
