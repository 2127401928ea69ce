//! Self-checks: finite-difference gradient verification for every network,
//! the exact zero-mean property of the baseline-subtracted reward, and
//! online/offline inference agreement. Shared by the CLI `verify` command
//! and the acceptance suite.

use ndarray::{Array1, Array3};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{AdaFocusError, Result};
use crate::focuspolicy::{PolicyNet, PolicyNetSpec};
use crate::nets::{Backbone, Classifier, ClassifierHead, ClassifierSpec, ConvBackboneSpec};
use crate::nn::linear::Linear;
use crate::nn::ops::{global_avg_pool, global_avg_pool_backward, sigmoid, softmax_cross_entropy};
use crate::nn::param::Params;
use crate::pipeline::{infer_offline, infer_online, ModelBundle};
use crate::rltrain::candidate_confidences;
use crate::rng::{rng_from, Rng};
use crate::synthdata::DatasetSplit;

fn flatten_values<P: Params>(p: &mut P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit_params("", &mut |_, v, _| out.extend(v.iter().copied()));
    out
}

fn flatten_grads<P: Params>(p: &mut P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit_params("", &mut |_, _, g| out.extend(g.iter().copied()));
    out
}

fn assign_values<P: Params>(p: &mut P, flat: &[f64]) {
    let mut i = 0;
    p.visit_params("", &mut |_, mut v, _| {
        for x in v.iter_mut() {
            *x = flat[i];
            i += 1;
        }
    });
    debug_assert_eq!(i, flat.len());
}

/// Compare the analytic directional derivative against central differences
/// along `n_proj` random unit directions. The loss closure must accumulate
/// gradients into the model when invoked. Returns the worst relative error.
pub fn directional_grad_check<P: Params>(
    model: &mut P,
    loss: &mut dyn FnMut(&mut P) -> Result<f64>,
    n_proj: usize,
    eps: f64,
    rng: &mut Rng,
) -> Result<f64> {
    model.zero_grads();
    loss(model)?;
    let grad = flatten_grads(model);
    model.zero_grads();
    let theta = flatten_values(model);
    let n = theta.len();

    let mut worst = 0.0f64;
    for _ in 0..n_proj {
        let mut d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        d.iter_mut().for_each(|x| *x /= norm);

        let analytic: f64 = grad.iter().zip(&d).map(|(g, d)| g * d).sum();
        let plus: Vec<f64> = theta.iter().zip(&d).map(|(t, d)| t + eps * d).collect();
        assign_values(model, &plus);
        let l_plus = loss(model)?;
        let minus: Vec<f64> = theta.iter().zip(&d).map(|(t, d)| t - eps * d).collect();
        assign_values(model, &minus);
        let l_minus = loss(model)?;
        model.zero_grads();
        let numeric = (l_plus - l_minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assign_values(model, &theta);
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_err: f64,
}

const GRAD_PROJECTIONS: usize = 20;
const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

fn backbone_check(name: &str, spec: ConvBackboneSpec, side: usize, seed: u64) -> Result<GradCheckReport> {
    let mut net = Backbone::new(spec, &mut rng_from(seed, "net"));
    let mut rng = rng_from(seed, "data");
    let input = Array3::from_shape_fn((1, side, side), |_| StandardNormal.sample(&mut rng));
    // frozen random probe head: maps pooled features to class logits
    let probe = Linear::new(net.spec.out_channels(), 5, &mut rng_from(seed, "probe"));
    let label = 2usize;
    let mut loss = |net: &mut Backbone| -> Result<f64> {
        let (fm, cache) = net.forward_cached(&input);
        let pooled = global_avg_pool(&fm);
        let (loss, g_logits) = softmax_cross_entropy(&probe.forward(&pooled), label);
        let g_pooled = probe.clone().backward(&g_logits, &pooled);
        let (c, h, w) = fm.dim();
        net.backward(&global_avg_pool_backward(&g_pooled, c, h, w), &cache);
        Ok(loss)
    };
    let err = directional_grad_check(
        &mut net,
        &mut loss,
        GRAD_PROJECTIONS,
        GRAD_EPS,
        &mut rng_from(seed, "proj"),
    )?;
    Ok(GradCheckReport { component: name.into(), max_rel_err: err })
}

fn classifier_check(name: &str, head: ClassifierHead, seed: u64) -> Result<GradCheckReport> {
    let spec = ClassifierSpec { input_dim: 12, hidden_dim: 10, num_classes: 5, head };
    let mut cls = Classifier::new(&spec, &mut rng_from(seed, "cls"));
    let mut rng = rng_from(seed, "data");
    let t_len = 3;
    let inputs: Vec<Array1<f64>> = (0..t_len)
        .map(|_| Array1::from_shape_fn(12, |_| StandardNormal.sample(&mut rng)))
        .collect();
    let label = 1usize;
    let mut loss = |cls: &mut Classifier| -> Result<f64> {
        let mut state = cls.init_state();
        let mut caches = Vec::with_capacity(t_len);
        let mut grads = Vec::with_capacity(t_len);
        let mut total = 0.0;
        for input in &inputs {
            let (_, next, cache) = cls.step_cached(input, &state)?;
            let (l, g) = softmax_cross_entropy(&cache.logits, label);
            total += l / t_len as f64;
            grads.push(g / t_len as f64);
            caches.push(cache);
            state = next;
        }
        let mut gh = Array1::zeros(spec.hidden_dim);
        for t in (0..t_len).rev() {
            let (_, gh_prev) = cls.backward_step(&grads[t], &gh, &caches[t])?;
            gh = gh_prev;
        }
        Ok(total)
    };
    let err = directional_grad_check(
        &mut cls,
        &mut loss,
        GRAD_PROJECTIONS,
        GRAD_EPS,
        &mut rng_from(seed, "proj"),
    )?;
    Ok(GradCheckReport { component: name.into(), max_rel_err: err })
}

/// PPO-style objective on fixed actions and returns: negative log-likelihood
/// plus a value regression term, backpropagated through time.
fn policy_check(name: &str, spec: PolicyNetSpec, bernoulli: bool, seed: u64) -> Result<GradCheckReport> {
    let mut policy = PolicyNet::new(spec.clone(), &mut rng_from(seed, "policy"));
    let mut rng = rng_from(seed, "data");
    let t_len = 3;
    let feats: Vec<Array3<f64>> = (0..t_len)
        .map(|_| {
            Array3::from_shape_fn((spec.in_channels, spec.feat_h, spec.feat_w), |_| {
                StandardNormal.sample(&mut rng)
            })
        })
        .collect();
    let actions: Vec<usize> = (0..t_len).map(|t| t % spec.num_actions.max(1)).collect();
    let returns: Vec<f64> = (0..t_len).map(|t| 0.3 * t as f64 - 0.2).collect();
    let mut loss = |policy: &mut PolicyNet| -> Result<f64> {
        let mut state = policy.init_state();
        let mut caches = Vec::with_capacity(t_len);
        let mut total = 0.0;
        for feat in &feats {
            let (cache, next) = policy.forward_cached(feat, &state)?;
            state = next;
            caches.push(cache);
        }
        let mut g_steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let cache = &caches[t];
            let (nll, mut g_logits) = if bernoulli {
                let p = sigmoid(cache.logits[0]);
                let b = (actions[t] % 2) as f64;
                let nll = -(b * p.ln() + (1.0 - b) * (1.0 - p).ln());
                (nll, Array1::from_vec(vec![p - b]))
            } else {
                softmax_cross_entropy(&cache.logits, actions[t])
            };
            let diff = cache.value - returns[t];
            total += (nll + 0.5 * diff * diff) / t_len as f64;
            g_logits.mapv_inplace(|g| g / t_len as f64);
            g_steps.push((g_logits, diff / t_len as f64));
        }
        let mut gh = Array1::zeros(spec.hidden_dim);
        for t in (0..t_len).rev() {
            let (g_logits, g_value) = &g_steps[t];
            gh = policy.backward_step(g_logits, *g_value, &gh, &caches[t]);
        }
        Ok(total)
    };
    let err = directional_grad_check(
        &mut policy,
        &mut loss,
        GRAD_PROJECTIONS,
        GRAD_EPS,
        &mut rng_from(seed, "proj"),
    )?;
    Ok(GradCheckReport { component: name.into(), max_rel_err: err })
}

/// Gradient-check every network family against central differences.
pub fn verify_gradients(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        backbone_check("glance", ConvBackboneSpec::glance_default(1), 16, seed)?,
        backbone_check("focus", ConvBackboneSpec::focus_default(1), 12, seed.wrapping_add(1))?,
        classifier_check("classifier-recurrent", ClassifierHead::Recurrent, seed.wrapping_add(2))?,
        classifier_check("classifier-averaging", ClassifierHead::Averaging, seed.wrapping_add(3))?,
        policy_check(
            "patch-policy",
            PolicyNetSpec::patch_policy(4, 4, 4, 9),
            false,
            seed.wrapping_add(4),
        )?,
        policy_check(
            "skip-policy",
            PolicyNetSpec::skip_policy(4, 4, 4),
            true,
            seed.wrapping_add(5),
        )?,
    ])
}

/// Exact expectation of the baseline-subtracted patch reward: with the
/// selection and the baseline candidate drawn from the same uniform set,
/// E[r] = 0 identically. Returns the worst absolute deviation over all
/// frames of all samples.
pub fn verify_reward_zero_mean(bundle: &ModelBundle, split: &DatasetSplit) -> Result<f64> {
    if split.samples.is_empty() {
        return Err(AdaFocusError::Contract("empty split".into()));
    }
    let mut worst = 0.0f64;
    let k = bundle.grid.num_candidates();
    for sample in &split.samples {
        let pooled_g: Vec<Array1<f64>> = sample
            .frames
            .iter()
            .map(|f| bundle.pooled_block(&bundle.f_g.forward(f)))
            .collect();
        let mut cache = std::collections::HashMap::new();
        let mut focus_feats = crate::pipeline::CachedFocus {
            f_l: &bundle.f_l,
            frames: &sample.frames,
            grid: &bundle.grid,
            cache: &mut cache,
        };
        let mut state = bundle.classifier.init_state();
        for t in 0..sample.frames.len() {
            let confs = candidate_confidences(
                &bundle.classifier,
                &mut focus_feats,
                t,
                &pooled_g[t],
                &state,
                sample.label,
                k,
            )?;
            let mean = confs.iter().sum::<f64>() / k as f64;
            // E_sel[p] - E_base[p] with both uniform over candidates
            let expected: f64 = confs.iter().map(|p| p - mean).sum::<f64>() / k as f64;
            worst = worst.max(expected.abs());
            // advance the realized trajectory along candidate 0
            let local = crate::rltrain::FocusFeatures::pooled(&mut focus_feats, t, 0)?;
            let input = ndarray::concatenate![ndarray::Axis(0), pooled_g[t].view(), local.view()];
            let (_, next) = bundle.classifier.step(&input, &state)?;
            state = next;
        }
    }
    Ok(worst)
}

/// Worst absolute difference between the online final-frame class
/// distribution and the offline one, over a split.
pub fn verify_online_offline(bundle: &ModelBundle, split: &DatasetSplit, use_plus: bool) -> Result<f64> {
    if split.samples.is_empty() {
        return Err(AdaFocusError::Contract("empty split".into()));
    }
    let mut worst = 0.0f64;
    for sample in &split.samples {
        let online = infer_online(bundle, &sample.frames, use_plus)?;
        let offline = infer_offline(bundle, &sample.frames, use_plus)?;
        let p_on = &online.predictions.last().expect("nonempty video").probs;
        let p_off = &offline.predictions.last().expect("nonempty video").probs;
        for (a, b) in p_on.iter().zip(p_off.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub gradients: Vec<GradCheckReport>,
    pub reward_zero_mean: f64,
    pub online_offline_gap: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.gradients.iter().all(|g| g.max_rel_err <= GRAD_TOL)
            && self.reward_zero_mean <= 1e-6
            && self.online_offline_gap <= 1e-6
    }
}

/// Run the full self-check suite on freshly initialized desk-scale models
/// and a small synthetic split.
pub fn verify_all(seed: u64) -> Result<VerifyReport> {
    use crate::pipeline::BundleSpec;
    use crate::synthdata::{generate_split, SplitRole, SynthConfig};
    let gradients = verify_gradients(seed)?;
    let spec = BundleSpec {
        frame_size: 32,
        patch_size: 12,
        grid_k: 3,
        classifier_hidden: 32,
        adafocus_plus: true,
        ..BundleSpec::default()
    };
    let mut bundle = ModelBundle::new(spec, seed)?;
    let cfg = SynthConfig {
        frame_size: 32,
        frames_per_video: 4,
        glyph_size: 6,
        ..SynthConfig::default()
    };
    let split = generate_split(&cfg, 20, SplitRole::Calibration, seed.wrapping_add(9))?;
    let reward_zero_mean = verify_reward_zero_mean(&bundle, &split)?;
    crate::pipeline::calibrate(&mut bundle, &split, 0.7)?;
    let gap_plain = verify_online_offline(&bundle, &split, false)?;
    let gap_plus = verify_online_offline(&bundle, &split, true)?;
    Ok(VerifyReport {
        gradients,
        reward_zero_mean,
        online_offline_gap: gap_plain.max(gap_plus),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradient_checks_pass() {
        for rep in verify_gradients(11).unwrap() {
            assert!(
                rep.max_rel_err <= GRAD_TOL,
                "{}: rel err {}",
                rep.component,
                rep.max_rel_err
            );
        }
    }

    #[test]
    fn full_verify_passes() {
        let rep = verify_all(13).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn grad_check_detects_broken_gradients() {
        // a loss that reports half the true gradient must fail the check
        let mut probe = Linear::new(4, 3, &mut rng_from(1, "p"));
        let x = Array1::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let mut loss = |l: &mut Linear| -> Result<f64> {
            let (v, g) = softmax_cross_entropy(&l.forward(&x), 1);
            l.backward(&(g * 0.5), &x);
            Ok(v)
        };
        let err = directional_grad_check(&mut probe, &mut loss, 5, 1e-5, &mut rng_from(2, "d"))
            .unwrap();
        assert!(err > GRAD_TOL, "broken gradient slipped through: {err}");
    }
}
