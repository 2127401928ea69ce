//! Patch candidate grid, patch cropping, and the two recurrent policies:
//! the categorical patch-selection policy and the Bernoulli skip gate.
//! Both share the same topology: 1x1 channel compressor over the unpooled
//! glance features, a GRU, and output + value heads.

use ndarray::{Array1, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{AdaFocusError, Result};
use crate::nn::conv::ConvCache;
use crate::nn::gru::GruCache;
use crate::nn::ops::{log_softmax, relu, relu_backward, sigmoid, softmax};
use crate::nn::param::{ParamVisitor, Params};
use crate::nn::{Conv2d, GruCell, Linear};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub grid_k: usize,
    pub patch_size: usize,
    pub frame_size: usize,
    /// K = grid_k^2 top-left offsets, row-major.
    pub offsets: Vec<(usize, usize)>,
    /// True when all candidates coincide (H == P).
    pub degenerate: bool,
}

impl PatchGrid {
    pub fn num_candidates(&self) -> usize {
        self.offsets.len()
    }

    /// Candidate whose centre is nearest to the given frame position.
    pub fn nearest(&self, y: f64, x: f64) -> usize {
        let half = self.patch_size as f64 / 2.0;
        self.offsets
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (a.0 as f64 + half - y).powi(2) + (a.1 as f64 + half - x).powi(2);
                let db = (b.0 as f64 + half - y).powi(2) + (b.1 as f64 + half - x).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap()
    }
}

pub fn build_grid(frame_size: usize, patch_size: usize, grid_k: usize) -> Result<PatchGrid> {
    if patch_size > frame_size {
        return Err(AdaFocusError::Config(format!(
            "patch size {patch_size} exceeds frame size {frame_size}"
        )));
    }
    if grid_k == 0 {
        return Err(AdaFocusError::Config("grid_k must be >= 1".into()));
    }
    let span = frame_size - patch_size;
    let axis: Vec<usize> = if grid_k == 1 {
        vec![span / 2]
    } else {
        (0..grid_k)
            .map(|i| ((i * span) as f64 / (grid_k - 1) as f64).round() as usize)
            .collect()
    };
    let mut offsets = Vec::with_capacity(grid_k * grid_k);
    for &y in &axis {
        for &x in &axis {
            offsets.push((y, x));
        }
    }
    Ok(PatchGrid {
        grid_k,
        patch_size,
        frame_size,
        offsets,
        degenerate: span == 0,
    })
}

/// Exact pixel crop, no interpolation, never out of bounds.
pub fn crop(frame: &Array3<f64>, offset: (usize, usize), patch_size: usize) -> Result<Array3<f64>> {
    let (_, h, w) = frame.dim();
    if offset.0 + patch_size > h || offset.1 + patch_size > w {
        return Err(AdaFocusError::Contract(format!(
            "crop offset {offset:?} with P={patch_size} leaves the {h}x{w} frame"
        )));
    }
    Ok(frame
        .slice(ndarray::s![
            ..,
            offset.0..offset.0 + patch_size,
            offset.1..offset.1 + patch_size
        ])
        .to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchAction {
    pub index: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipDecision {
    pub keep: bool,
    pub p_keep: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyHeadKind {
    /// K logits, softmax over patch candidates.
    Categorical,
    /// One logit, sigmoid keep-probability.
    Bernoulli,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyNetSpec {
    pub in_channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub compressed_channels: usize,
    pub hidden_dim: usize,
    pub num_actions: usize,
    pub head: PolicyHeadKind,
}

impl PolicyNetSpec {
    pub fn patch_policy(in_channels: usize, feat_h: usize, feat_w: usize, num_candidates: usize) -> Self {
        PolicyNetSpec {
            in_channels,
            feat_h,
            feat_w,
            compressed_channels: 8,
            hidden_dim: 64,
            num_actions: num_candidates,
            head: PolicyHeadKind::Categorical,
        }
    }

    pub fn skip_policy(in_channels: usize, feat_h: usize, feat_w: usize) -> Self {
        PolicyNetSpec {
            in_channels,
            feat_h,
            feat_w,
            compressed_channels: 8,
            hidden_dim: 64,
            num_actions: 1,
            head: PolicyHeadKind::Bernoulli,
        }
    }
}

/// Recurrent policy over unpooled glance features: 1x1 conv compressor,
/// flatten, GRU, then an action head and a value head on the hidden state.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub spec: PolicyNetSpec,
    pub compressor: Conv2d,
    pub gru: GruCell,
    pub head: Linear,
    pub value: Linear,
}

pub type PolicyState = Array1<f64>;

pub struct PolicyStepCache {
    conv: ConvCache,
    pre_act: Array3<f64>,
    gru: GruCache,
    pub hidden: Array1<f64>,
    pub logits: Array1<f64>,
    pub value: f64,
}

impl PolicyNet {
    pub fn new(spec: PolicyNetSpec, rng: &mut Rng) -> Self {
        let compressor = Conv2d::new(spec.in_channels, spec.compressed_channels, 1, 1, rng);
        let flat = spec.compressed_channels * spec.feat_h * spec.feat_w;
        let gru = GruCell::new(flat, spec.hidden_dim, rng);
        let head = Linear::new(spec.hidden_dim, spec.num_actions, rng);
        let value = Linear::new(spec.hidden_dim, 1, rng);
        PolicyNet {
            spec,
            compressor,
            gru,
            head,
            value,
        }
    }

    pub fn init_state(&self) -> PolicyState {
        self.gru.init_state()
    }

    fn check_features(&self, features: &Array3<f64>) -> Result<()> {
        let (c, h, w) = features.dim();
        if c != self.spec.in_channels || h != self.spec.feat_h || w != self.spec.feat_w {
            return Err(AdaFocusError::Contract(format!(
                "policy features shape ({c},{h},{w}) != spec ({},{},{})",
                self.spec.in_channels, self.spec.feat_h, self.spec.feat_w
            )));
        }
        Ok(())
    }

    pub fn forward_cached(
        &self,
        features: &Array3<f64>,
        state: &PolicyState,
    ) -> Result<(PolicyStepCache, PolicyState)> {
        self.check_features(features)?;
        let (pre_act, conv_cache) = self.compressor.forward_cached(features);
        let act = relu(&pre_act);
        let flat = Array1::from_iter(act.iter().copied());
        let (hidden, gru_cache) = self.gru.step_cached(&flat, state);
        let logits = self.head.forward(&hidden);
        let value = self.value.forward(&hidden)[0];
        Ok((
            PolicyStepCache {
                conv: conv_cache,
                pre_act,
                gru: gru_cache,
                hidden: hidden.clone(),
                logits,
                value,
            },
            hidden,
        ))
    }

    /// BPTT step for PPO. `g_logits` and `g_value` are gradients on the two
    /// heads, `gh_next` the incoming hidden-state gradient; returns the
    /// gradient for the previous hidden state. Gradients w.r.t. the glance
    /// features are discarded (backbones are frozen when policies train).
    pub fn backward_step(
        &mut self,
        g_logits: &Array1<f64>,
        g_value: f64,
        gh_next: &Array1<f64>,
        cache: &PolicyStepCache,
    ) -> Array1<f64> {
        let mut gh = gh_next.clone();
        gh += &self.head.backward(g_logits, &cache.hidden);
        gh += &self.value.backward(&Array1::from_vec(vec![g_value]), &cache.hidden);
        let (g_flat, gh_prev) = self.gru.backward_step(&gh, &cache.gru);
        let g_act =
            Array3::from_shape_vec(cache.pre_act.raw_dim(), g_flat.to_vec()).expect("flat shape");
        let g_pre = relu_backward(&g_act, &cache.pre_act);
        self.compressor.backward(&g_pre, &cache.conv);
        gh_prev
    }

    /// Multiply-adds per step (compressor + GRU + both heads).
    pub fn flops_per_step(&self) -> u64 {
        self.compressor.flops(self.spec.feat_h, self.spec.feat_w)
            + self.gru.flops()
            + self.head.flops()
            + self.value.flops()
    }
}

impl Params for PolicyNet {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.compressor.visit_params(&format!("{prefix}compressor."), f);
        self.gru.visit_params(&format!("{prefix}gru."), f);
        self.head.visit_params(&format!("{prefix}head."), f);
        self.value.visit_params(&format!("{prefix}value."), f);
    }
}

/// Patch-policy forward: categorical distribution over candidates, value
/// estimate, updated state.
pub fn policy_step(
    policy: &PolicyNet,
    features: &Array3<f64>,
    state: &PolicyState,
) -> Result<(Array1<f64>, f64, PolicyState)> {
    debug_assert_eq!(policy.spec.head, PolicyHeadKind::Categorical);
    let (cache, next) = policy.forward_cached(features, state)?;
    Ok((softmax(&cache.logits), cache.value, next))
}

/// Skip-policy forward: keep probability (strictly inside (0,1)), value,
/// updated state. The state updates every frame regardless of the decision.
pub fn skip_step(
    policy: &PolicyNet,
    features: &Array3<f64>,
    state: &PolicyState,
) -> Result<(f64, f64, PolicyState)> {
    debug_assert_eq!(policy.spec.head, PolicyHeadKind::Bernoulli);
    let (cache, next) = policy.forward_cached(features, state)?;
    Ok((sigmoid(cache.logits[0]), cache.value, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Argmax,
}

pub fn select_patch(dist: &Array1<f64>, mode: SelectMode, rng: &mut Rng) -> PatchAction {
    let index = match mode {
        SelectMode::Argmax => {
            // ties broken by lowest index
            let mut best = 0;
            for (i, &p) in dist.iter().enumerate() {
                if p > dist[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.gen_range(0.0..1.0);
            let mut acc = 0.0;
            let mut chosen = dist.len() - 1;
            for (i, &p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    PatchAction {
        index,
        log_prob: dist[index].max(f64::MIN_POSITIVE).ln(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SkipMode {
    Sample,
    /// Keep iff p_keep >= rho (inclusive).
    Threshold(f64),
}

pub fn decide_skip(p_keep: f64, mode: SkipMode, rng: &mut Rng) -> SkipDecision {
    let keep = match mode {
        SkipMode::Sample => rng.gen_range(0.0..1.0) < p_keep,
        SkipMode::Threshold(rho) => p_keep >= rho,
    };
    let log_prob = if keep {
        p_keep.max(f64::MIN_POSITIVE).ln()
    } else {
        (1.0 - p_keep).max(f64::MIN_POSITIVE).ln()
    };
    SkipDecision {
        keep,
        p_keep,
        log_prob,
    }
}

/// Log-probability of a realized action under the current parameters,
/// together with the entropy and the gradient of (log_prob, entropy) w.r.t.
/// the logits. Shared by the PPO update for both head kinds.
pub struct ActionEval {
    pub log_prob: f64,
    pub entropy: f64,
    /// d log_prob / d logits
    pub g_log_prob: Array1<f64>,
    /// d entropy / d logits
    pub g_entropy: Array1<f64>,
}

pub fn eval_action(head: PolicyHeadKind, logits: &Array1<f64>, action: usize) -> ActionEval {
    match head {
        PolicyHeadKind::Categorical => {
            let log_p = log_softmax(logits);
            let p = log_p.mapv(f64::exp);
            let entropy = -(&p * &log_p).sum();
            let mut g_log_prob = -p.clone();
            g_log_prob[action] += 1.0;
            // dH/dl_j = -p_j * (log p_j + H)
            let g_entropy = p.mapv(|pj| -pj) * (log_p.mapv(|lp| lp) + entropy);
            ActionEval {
                log_prob: log_p[action],
                entropy,
                g_log_prob,
                g_entropy,
            }
        }
        PolicyHeadKind::Bernoulli => {
            let p = sigmoid(logits[0]);
            let keep = action == 1;
            let log_prob = if keep { p.ln() } else { (1.0 - p).ln() };
            let entropy = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            // d log_prob / d logit = (1 - p) for keep, -p for drop
            let g_lp = if keep { 1.0 - p } else { -p };
            // dH/dlogit = -p(1-p) * logit ... derive: H(p), dp/dl = p(1-p)
            let dh_dp = -(p.ln() - (1.0 - p).ln());
            let g_h = dh_dp * p * (1.0 - p);
            ActionEval {
                log_prob,
                entropy,
                g_log_prob: Array1::from_vec(vec![g_lp]),
                g_entropy: Array1::from_vec(vec![g_h]),
            }
        }
    }
}
