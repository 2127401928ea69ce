//! The four network roles: glance backbone, focus backbone, recurrent (or
//! averaging) classifier, and the shared recurrent-cell machinery.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{AdaFocusError, Result};
use crate::nn::conv::ConvCache;
use crate::nn::gru::GruCache;
use crate::nn::ops::{global_avg_pool, relu, relu_backward, softmax};
use crate::nn::param::{ParamVisitor, Params};
use crate::nn::{Conv2d, GruCell, Linear};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub nonlinearity: Nonlinearity,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvBackboneSpec {
    pub input_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
}

impl ConvBackboneSpec {
    /// Light glance backbone: 3 stride-2 convs, 8 -> 16 -> 16 channels.
    pub fn glance_default(input_channels: usize) -> Self {
        let layer = |out_channels| ConvLayerSpec {
            out_channels,
            kernel: 3,
            stride: 2,
            nonlinearity: Nonlinearity::Relu,
        };
        ConvBackboneSpec {
            input_channels,
            layers: vec![layer(8), layer(16), layer(16)],
        }
    }

    /// Heavier focus backbone: 4 convs, 16 -> 32 -> 32 -> 64 channels,
    /// strides 1,2,1,2.
    pub fn focus_default(input_channels: usize) -> Self {
        let layer = |out_channels, stride| ConvLayerSpec {
            out_channels,
            kernel: 3,
            stride,
            nonlinearity: Nonlinearity::Relu,
        };
        ConvBackboneSpec {
            input_channels,
            layers: vec![layer(16, 1), layer(32, 2), layer(32, 1), layer(64, 2)],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(self.input_channels)
    }

    pub fn out_hw(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for l in &self.layers {
            h = h.div_ceil(l.stride);
            w = w.div_ceil(l.stride);
        }
        (h, w)
    }
}

/// Which backbone produced a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Glance,
    Focus,
}

#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub source: FeatureSource,
}

impl FeatureMap {
    pub fn pooled(&self) -> Array1<f64> {
        global_avg_pool(&self.data)
    }
}

/// Spatial mean per channel (the only pooling used anywhere).
pub fn pool(fm: &FeatureMap) -> Array1<f64> {
    fm.pooled()
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: ConvBackboneSpec,
    pub convs: Vec<Conv2d>,
}

pub struct BackboneCache {
    conv_caches: Vec<ConvCache>,
    /// Pre-activation outputs per layer, for relu backward.
    pre_acts: Vec<Array3<f64>>,
}

impl Backbone {
    pub fn new(spec: ConvBackboneSpec, rng: &mut Rng) -> Self {
        let mut convs = Vec::with_capacity(spec.layers.len());
        let mut in_c = spec.input_channels;
        for l in &spec.layers {
            convs.push(Conv2d::new(in_c, l.out_channels, l.kernel, l.stride, rng));
            in_c = l.out_channels;
        }
        Backbone { spec, convs }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut cur = x.clone();
        for (conv, l) in self.convs.iter().zip(&self.spec.layers) {
            cur = conv.forward(&cur);
            if l.nonlinearity == Nonlinearity::Relu {
                cur = relu(&cur);
            }
        }
        cur
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, BackboneCache) {
        let mut cur = x.clone();
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut pre_acts = Vec::with_capacity(self.convs.len());
        for (conv, l) in self.convs.iter().zip(&self.spec.layers) {
            let (y, cache) = conv.forward_cached(&cur);
            conv_caches.push(cache);
            pre_acts.push(y.clone());
            cur = if l.nonlinearity == Nonlinearity::Relu {
                relu(&y)
            } else {
                y
            };
        }
        (cur, BackboneCache { conv_caches, pre_acts })
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, g_out: &Array3<f64>, cache: &BackboneCache) -> Array3<f64> {
        let mut g = g_out.clone();
        for i in (0..self.convs.len()).rev() {
            if self.spec.layers[i].nonlinearity == Nonlinearity::Relu {
                g = relu_backward(&g, &cache.pre_acts[i]);
            }
            g = self.convs[i].backward(&g, &cache.conv_caches[i]);
        }
        g
    }

    /// Multiply-adds for one forward pass at the given input spatial size.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (mut h, mut w) = (h, w);
        let mut total = 0u64;
        for conv in &self.convs {
            total += conv.flops(h, w);
            let (oh, ow) = conv.out_hw(h, w);
            h = oh;
            w = ow;
        }
        total
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }
}

impl Params for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}conv{i}."), f);
        }
    }
}

/// Glance forward pass over a full frame.
pub fn glance(f_g: &Backbone, frame: &Array3<f64>) -> Result<FeatureMap> {
    if frame.dim().0 != f_g.spec.input_channels {
        return Err(AdaFocusError::Contract(format!(
            "glance input has {} channels, backbone expects {}",
            frame.dim().0,
            f_g.spec.input_channels
        )));
    }
    Ok(FeatureMap {
        data: f_g.forward(frame),
        source: FeatureSource::Glance,
    })
}

/// Focus forward pass over an exactly P x P patch.
pub fn focus(f_l: &Backbone, patch: &Array3<f64>, patch_size: usize) -> Result<FeatureMap> {
    let (c, h, w) = patch.dim();
    if c != f_l.spec.input_channels || h != patch_size || w != patch_size {
        return Err(AdaFocusError::Contract(format!(
            "focus input shape ({c},{h},{w}) does not match (channels {}, P {patch_size})",
            f_l.spec.input_channels
        )));
    }
    Ok(FeatureMap {
        data: f_l.forward(patch),
        source: FeatureSource::Focus,
    })
}

/// Softmax class distribution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Array1<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierHead {
    Recurrent,
    Averaging,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifierSpec {
    /// Pooled glance dim + pooled focus dim (or focus only when feature
    /// reuse is disabled).
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone)]
pub enum Classifier {
    Recurrent { gru: GruCell, out: Linear },
    Averaging { out: Linear },
}

/// State carried across classify steps.
#[derive(Debug, Clone)]
pub enum ClassifierState {
    Recurrent(Array1<f64>),
    /// Running sum of per-frame softmax outputs and the step count.
    Averaging { sum: Array1<f64>, steps: usize },
}

/// Cache for one recurrent classify step (training only).
pub struct ClassifyCache {
    pub gru: Option<GruCache>,
    pub hidden: Array1<f64>,
    pub input: Array1<f64>,
    pub logits: Array1<f64>,
}

impl Classifier {
    pub fn new(spec: &ClassifierSpec, rng: &mut Rng) -> Self {
        match spec.head {
            ClassifierHead::Recurrent => Classifier::Recurrent {
                gru: GruCell::new(spec.input_dim, spec.hidden_dim, rng),
                out: Linear::new(spec.hidden_dim, spec.num_classes, rng),
            },
            ClassifierHead::Averaging => Classifier::Averaging {
                out: Linear::new(spec.input_dim, spec.num_classes, rng),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Classifier::Recurrent { gru, .. } => gru.input_dim,
            Classifier::Averaging { out } => out.in_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Recurrent { out, .. } | Classifier::Averaging { out } => out.out_dim(),
        }
    }

    pub fn init_state(&self) -> ClassifierState {
        match self {
            Classifier::Recurrent { gru, .. } => ClassifierState::Recurrent(gru.init_state()),
            Classifier::Averaging { out } => ClassifierState::Averaging {
                sum: Array1::zeros(out.out_dim()),
                steps: 0,
            },
        }
    }

    /// One classification step on the concatenated pooled features.
    pub fn step(&self, input: &Array1<f64>, state: &ClassifierState) -> Result<(Prediction, ClassifierState)> {
        if input.len() != self.input_dim() {
            return Err(AdaFocusError::Contract(format!(
                "classifier input dim {} != expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        match (self, state) {
            (Classifier::Recurrent { gru, out }, ClassifierState::Recurrent(h)) => {
                let h_next = gru.step(input, h);
                let probs = softmax(&out.forward(&h_next));
                Ok((Prediction { probs }, ClassifierState::Recurrent(h_next)))
            }
            (Classifier::Averaging { out }, ClassifierState::Averaging { sum, steps }) => {
                let frame_probs = softmax(&out.forward(input));
                let sum = sum + &frame_probs;
                let steps = steps + 1;
                let probs = &sum / steps as f64;
                Ok((Prediction { probs }, ClassifierState::Averaging { sum, steps }))
            }
            _ => Err(AdaFocusError::Contract(
                "classifier state kind does not match classifier head".into(),
            )),
        }
    }

    /// Recurrent step that also returns the caches for BPTT. Only valid for
    /// the recurrent head.
    pub fn step_cached(
        &self,
        input: &Array1<f64>,
        state: &ClassifierState,
    ) -> Result<(Prediction, ClassifierState, ClassifyCache)> {
        match (self, state) {
            (Classifier::Recurrent { gru, out }, ClassifierState::Recurrent(h)) => {
                let (h_next, gcache) = gru.step_cached(input, h);
                let logits = out.forward(&h_next);
                let probs = softmax(&logits);
                Ok((
                    Prediction { probs },
                    ClassifierState::Recurrent(h_next.clone()),
                    ClassifyCache {
                        gru: Some(gcache),
                        hidden: h_next,
                        input: input.clone(),
                        logits,
                    },
                ))
            }
            (Classifier::Averaging { out }, ClassifierState::Averaging { .. }) => {
                let logits = out.forward(input);
                let probs = softmax(&logits);
                let (pred, next) = self.step(input, state)?;
                Ok((
                    pred,
                    next,
                    ClassifyCache {
                        gru: None,
                        hidden: probs,
                        input: input.clone(),
                        logits,
                    },
                ))
            }
            _ => Err(AdaFocusError::Contract(
                "classifier state kind does not match classifier head".into(),
            )),
        }
    }

    /// BPTT step. Returns gradients for the step input and the previous
    /// hidden state. For the averaging head the per-frame loss is applied
    /// directly to the frame logits, so there is no recurrent term.
    pub fn backward_step(
        &mut self,
        g_logits: &Array1<f64>,
        gh_next: &Array1<f64>,
        cache: &ClassifyCache,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        match self {
            Classifier::Recurrent { gru, out } => {
                let gcache = cache.gru.as_ref().ok_or_else(|| {
                    AdaFocusError::Contract("recurrent backward without GRU cache".into())
                })?;
                let mut gh = gh_next.clone();
                gh += &out.backward(g_logits, &cache.hidden);
                let (g_input, gh_prev) = gru.backward_step(&gh, gcache);
                Ok((g_input, gh_prev))
            }
            Classifier::Averaging { out } => {
                let g_input = out.backward(g_logits, &cache.input);
                Ok((g_input, Array1::zeros(gh_next.len())))
            }
        }
    }

    /// Multiply-adds per classify step.
    pub fn flops_per_step(&self) -> u64 {
        match self {
            Classifier::Recurrent { gru, out } => gru.flops() + out.flops(),
            Classifier::Averaging { out } => out.flops(),
        }
    }
}

impl Params for Classifier {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        match self {
            Classifier::Recurrent { gru, out } => {
                gru.visit_params(&format!("{prefix}gru."), f);
                out.visit_params(&format!("{prefix}out."), f);
            }
            Classifier::Averaging { out } => {
                out.visit_params(&format!("{prefix}out."), f);
            }
        }
    }
}
