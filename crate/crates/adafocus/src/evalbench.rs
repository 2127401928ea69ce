//! Evaluation bench: metrics, fixed-policy baselines, reward-variant
//! ablations, accuracy-vs-compute sweeps, patch-selection export, and plot
//! emission (CSV data plus simple SVG renderings).

use ndarray::{Array1, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use crate::costmodel::episode_cost;
use crate::error::{AdaFocusError, Result};
use crate::focuspolicy::{crop, select_patch, SelectMode, SkipMode};
use crate::nets::focus;
use crate::nn::ops::{sigmoid, softmax};
use crate::nn::param::param_hash;
use crate::pipeline::{ModelBundle, StageConfig};
use crate::rltrain::{discounted_returns, EpisodeTrace};
use crate::rng::{rng_from, Rng};
use crate::synthdata::{DatasetSplit, VideoSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    Learned,
    Random,
    Central,
    Gaussian,
}

impl PolicyVariant {
    pub const ALL: [PolicyVariant; 4] = [
        PolicyVariant::Learned,
        PolicyVariant::Random,
        PolicyVariant::Central,
        PolicyVariant::Gaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyVariant::Learned => "learned",
            PolicyVariant::Random => "random",
            PolicyVariant::Central => "central",
            PolicyVariant::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Eq.-7 style: selected-patch confidence minus the sampled baseline.
    AdaFocus,
    /// Raw confidence on the true label.
    Confidence,
    /// Confidence increments between consecutive frames.
    Increments,
}

/// Rewrite a trace's rewards under a reward-variant ablation, then refresh
/// returns and advantages. The recorded confidences are reused; only the
/// reward definition changes.
pub fn apply_reward_variant(trace: &mut EpisodeTrace, variant: RewardVariant, gamma: f64) {
    let mut prev = 0.0;
    for rec in trace.frames.iter_mut() {
        rec.reward = match variant {
            RewardVariant::AdaFocus => rec.p_ty_selected - rec.p_ty_baseline,
            RewardVariant::Confidence => rec.p_ty_selected,
            RewardVariant::Increments => rec.p_ty_selected - prev,
        };
        prev = rec.p_ty_selected;
    }
    let rewards: Vec<f64> = trace.frames.iter().map(|r| r.reward).collect();
    let returns = discounted_returns(&rewards, gamma);
    for (rec, ret) in trace.frames.iter_mut().zip(returns) {
        rec.ret = ret;
        rec.advantage = ret - rec.value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Score the prediction after every frame count 1..T.
    Online,
    /// Score only the final prediction.
    Offline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub top1: f64,
    pub mean_flops: f64,
    /// Online mode only: accuracy after processing 1..T frames.
    pub per_frame_accuracy: Vec<f64>,
    pub keep_rate: f64,
    pub seed: u64,
    pub config_hash: String,
    pub variant: String,
    pub samples: usize,
}

fn config_hash(bundle: &ModelBundle, variant: PolicyVariant, mode: EvalMode, plus: bool) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&bundle.spec).expect("spec serializes"));
    h.update(variant.name().as_bytes());
    h.update(format!("{mode:?}/{plus}").as_bytes());
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-frame candidate selection under a policy variant. The learned
/// variant argmaxes the trained policy; the fixed variants never consult it.
fn select_candidates(
    bundle: &ModelBundle,
    glance_feats: &[Array3<f64>],
    variant: PolicyVariant,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let grid = &bundle.grid;
    let center = bundle.spec.frame_size as f64 / 2.0;
    match variant {
        PolicyVariant::Learned => {
            let mut state = bundle.policy.init_state();
            let mut out = Vec::with_capacity(glance_feats.len());
            for feats in glance_feats {
                let (cache, next) = bundle.policy.forward_cached(feats, &state)?;
                out.push(select_patch(&softmax(&cache.logits), SelectMode::Argmax, rng).index);
                state = next;
            }
            Ok(out)
        }
        PolicyVariant::Random => Ok((0..glance_feats.len())
            .map(|_| rng.gen_range(0..grid.num_candidates()))
            .collect()),
        PolicyVariant::Central => Ok(vec![grid.nearest(center, center); glance_feats.len()]),
        PolicyVariant::Gaussian => {
            let sigma = bundle.spec.frame_size as f64 / 4.0;
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            Ok((0..glance_feats.len())
                .map(|_| {
                    let y = center + normal.sample(rng);
                    let x = center + normal.sample(rng);
                    grid.nearest(y, x)
                })
                .collect())
        }
    }
}

struct EpisodeEval {
    correct_at: Vec<bool>,
    kept: Vec<bool>,
    flops: u64,
}

/// Run one video under a policy variant, mirroring online inference but
/// with the variant's patch choices.
fn eval_episode(
    bundle: &ModelBundle,
    sample: &VideoSample,
    variant: PolicyVariant,
    use_plus: bool,
    rng: &mut Rng,
) -> Result<EpisodeEval> {
    let rho = if use_plus {
        match (&bundle.skip, bundle.rho) {
            (Some(_), Some(r)) => Some(r),
            (None, _) => {
                return Err(AdaFocusError::Config(
                    "adaptive skipping requested but the bundle has no skip gate".into(),
                ))
            }
            (_, None) => {
                return Err(AdaFocusError::Config(
                    "adaptive skipping requires a calibrated threshold".into(),
                ))
            }
        }
    } else {
        None
    };
    let glance_feats: Vec<Array3<f64>> =
        sample.frames.iter().map(|f| bundle.f_g.forward(f)).collect();
    let actions = select_candidates(bundle, &glance_feats, variant, rng)?;

    let local_dim = bundle.classifier.input_dim() - bundle.glance_dim();
    let zeros_local = Array1::zeros(local_dim);
    let mut cls_state = bundle.classifier.init_state();
    let mut s_state = bundle.skip.as_ref().map(|s| s.init_state());
    let mut correct_at = Vec::with_capacity(sample.frames.len());
    let mut kept_mask = Vec::with_capacity(sample.frames.len());

    for (t, frame) in sample.frames.iter().enumerate() {
        let pool_g = bundle.pooled_block(&glance_feats[t]);
        let kept = match (bundle.skip.as_ref(), s_state.as_mut()) {
            (Some(skip), Some(st)) => {
                let (cache, next) = skip.forward_cached(&glance_feats[t], st)?;
                let p_keep = sigmoid(cache.logits[0]);
                *st = next;
                match rho {
                    Some(r) => {
                        let mut dummy = rng_from(0, "eval/unused");
                        crate::focuspolicy::decide_skip(p_keep, SkipMode::Threshold(r), &mut dummy)
                            .keep
                    }
                    None => true,
                }
            }
            _ => true,
        };
        let local = if kept {
            let patch = crop(frame, bundle.grid.offsets[actions[t]], bundle.spec.patch_size)?;
            focus(&bundle.f_l, &patch, bundle.spec.patch_size)?.pooled()
        } else {
            zeros_local.clone()
        };
        let input = ndarray::concatenate![ndarray::Axis(0), pool_g.view(), local.view()];
        let (pred, next) = bundle.classifier.step(&input, &cls_state)?;
        cls_state = next;
        correct_at.push(pred.argmax() == sample.label);
        kept_mask.push(kept);
    }
    let flops = episode_cost(&bundle.component_costs(), &kept_mask).total();
    Ok(EpisodeEval { correct_at, kept: kept_mask, flops })
}

/// Evaluate a bundle over a split under one policy variant.
pub fn evaluate(
    bundle: &ModelBundle,
    split: &DatasetSplit,
    mode: EvalMode,
    variant: PolicyVariant,
    use_plus: bool,
    seed: u64,
) -> Result<MetricsRecord> {
    if split.samples.is_empty() {
        return Err(AdaFocusError::Contract("evaluation split is empty".into()));
    }
    let expect = (bundle.spec.channels, bundle.spec.frame_size, bundle.spec.frame_size);
    let got = split.samples[0].frames[0].dim();
    if got != expect {
        return Err(AdaFocusError::Contract(format!(
            "split frame shape {got:?} does not match bundle {expect:?}"
        )));
    }
    let mut rng = rng_from(seed, "eval");
    let t_len = split.samples[0].frames.len();
    let mut correct_at = vec![0usize; t_len];
    let mut total_flops = 0u64;
    let mut kept_frames = 0usize;
    let mut total_frames = 0usize;

    for sample in &split.samples {
        let ep = eval_episode(bundle, sample, variant, use_plus, &mut rng)?;
        for (t, &ok) in ep.correct_at.iter().enumerate() {
            correct_at[t] += ok as usize;
        }
        total_flops += ep.flops;
        kept_frames += ep.kept.iter().filter(|&&k| k).count();
        total_frames += ep.kept.len();
    }

    let n = split.samples.len() as f64;
    let curve: Vec<f64> = correct_at.iter().map(|&c| c as f64 / n).collect();
    let top1 = *curve.last().expect("at least one frame");
    Ok(MetricsRecord {
        top1,
        mean_flops: total_flops as f64 / n,
        per_frame_accuracy: match mode {
            EvalMode::Online => curve,
            EvalMode::Offline => vec![],
        },
        keep_rate: kept_frames as f64 / total_frames.max(1) as f64,
        seed,
        config_hash: config_hash(bundle, variant, mode, use_plus),
        variant: variant.name().into(),
        samples: split.samples.len(),
    })
}

/// Table-5 style ablation: every policy variant on the same bundle.
pub fn ablate_policies(
    bundle: &ModelBundle,
    split: &DatasetSplit,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    PolicyVariant::ALL
        .iter()
        .map(|&v| evaluate(bundle, split, EvalMode::Offline, v, false, seed))
        .collect()
}

/// Feature-reuse ablation: evaluate a reuse-on and a reuse-off bundle
/// (trained by the caller under identical schedules) on the same split.
pub fn ablate_feature_reuse(
    reuse_on: &mut ModelBundle,
    reuse_off: &mut ModelBundle,
    split: &DatasetSplit,
    seed: u64,
) -> Result<(MetricsRecord, MetricsRecord)> {
    if !reuse_on.spec.reuse_glance || reuse_off.spec.reuse_glance {
        return Err(AdaFocusError::Config(
            "ablate_feature_reuse expects (reuse-on, reuse-off) bundles in that order".into(),
        ));
    }
    // the glance backbone is shared context, not an ablation axis
    if param_hash(&mut reuse_on.f_g) != param_hash(&mut reuse_off.f_g) {
        return Err(AdaFocusError::Contract(
            "feature-reuse variants must share the glance backbone".into(),
        ));
    }
    let a = evaluate(reuse_on, split, EvalMode::Offline, PolicyVariant::Learned, false, seed)?;
    let b = evaluate(reuse_off, split, EvalMode::Offline, PolicyVariant::Learned, false, seed)?;
    Ok((a, b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub patch_size: usize,
    pub eta: Option<f64>,
    pub mean_flops: f64,
    pub top1: f64,
}

/// Accuracy-vs-compute sweep over trained bundles (one per patch size /
/// keep fraction setting).
pub fn tradeoff_sweep(
    entries: &[(String, &ModelBundle, Option<f64>)],
    split: &DatasetSplit,
    seed: u64,
) -> Result<Vec<TradeoffPoint>> {
    entries
        .iter()
        .map(|(label, bundle, eta)| {
            let rec = evaluate(
                bundle,
                split,
                EvalMode::Offline,
                PolicyVariant::Learned,
                eta.is_some(),
                seed,
            )?;
            Ok(TradeoffPoint {
                label: label.clone(),
                patch_size: bundle.spec.patch_size,
                eta: *eta,
                mean_flops: rec.mean_flops,
                top1: rec.top1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub sample: usize,
    pub t: usize,
    /// Selected patch's top-left offset (row, col).
    pub offset: (usize, usize),
    /// Ground-truth glyph top-left position (row, col).
    pub glyph: (usize, usize),
}

/// Per-frame selected offsets plus the ground-truth glyph track, enabling
/// overlap scoring of the mechanism.
pub fn export_selections(
    bundle: &ModelBundle,
    split: &DatasetSplit,
    variant: PolicyVariant,
    seed: u64,
) -> Result<Vec<SelectionRecord>> {
    let mut rng = rng_from(seed, "selections");
    let mut out = Vec::new();
    for (i, sample) in split.samples.iter().enumerate() {
        let glance_feats: Vec<Array3<f64>> =
            sample.frames.iter().map(|f| bundle.f_g.forward(f)).collect();
        let actions = select_candidates(bundle, &glance_feats, variant, &mut rng)?;
        for (t, (&a, &g)) in actions.iter().zip(&sample.glyph_track).enumerate() {
            out.push(SelectionRecord {
                sample: i,
                t,
                offset: bundle.grid.offsets[a],
                glyph: g,
            });
        }
    }
    Ok(out)
}

/// Fraction of the glyph's area inside the patch, for one record.
pub fn glyph_coverage(rec: &SelectionRecord, glyph_size: usize, patch_size: usize) -> f64 {
    let overlap = |a0: usize, a1: usize, b0: usize, b1: usize| -> usize {
        a1.min(b1).saturating_sub(a0.max(b0))
    };
    let dy = overlap(rec.offset.0, rec.offset.0 + patch_size, rec.glyph.0, rec.glyph.0 + glyph_size);
    let dx = overlap(rec.offset.1, rec.offset.1 + patch_size, rec.glyph.1, rec.glyph.1 + glyph_size);
    (dy * dx) as f64 / (glyph_size * glyph_size) as f64
}

/// Share of frames where the selected patch covers at least half of the
/// glyph's area.
pub fn glyph_overlap_rate(records: &[SelectionRecord], glyph_size: usize, patch_size: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| glyph_coverage(r, glyph_size, patch_size) >= 0.5)
        .count();
    hits as f64 / records.len() as f64
}

// --- plot emission -------------------------------------------------------

fn ensure_nonempty<T>(records: &[T], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(AdaFocusError::Contract(format!("no {what} records to emit")));
    }
    Ok(())
}

/// Write the trade-off curve as CSV plus an SVG scatter plot
/// (x = mean multiply-adds per video, y = top-1 accuracy).
pub fn emit_tradeoff_plot(points: &[TradeoffPoint], dir: &Path) -> Result<()> {
    ensure_nonempty(points, "trade-off")?;
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("label,patch_size,eta,mean_flops,top1\n");
    for p in points {
        writeln!(
            csv,
            "{},{},{},{},{}",
            p.label,
            p.patch_size,
            p.eta.map(|e| e.to_string()).unwrap_or_default(),
            p.mean_flops,
            p.top1
        )
        .expect("string write");
    }
    std::fs::write(dir.join("tradeoff.csv"), &csv)?;

    let xs: Vec<f64> = points.iter().map(|p| p.mean_flops).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.top1).collect();
    let labels: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
    let svg = scatter_svg(&xs, &ys, &labels, "mean multiply-adds per video", "top-1 accuracy");
    std::fs::write(dir.join("tradeoff.svg"), svg)?;
    Ok(())
}

/// Write online per-frame accuracy curves as CSV plus an SVG line plot.
pub fn emit_online_curves(records: &[MetricsRecord], dir: &Path) -> Result<()> {
    ensure_nonempty(records, "online-curve")?;
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("variant,frame,accuracy\n");
    for rec in records {
        for (t, acc) in rec.per_frame_accuracy.iter().enumerate() {
            writeln!(csv, "{},{},{}", rec.variant, t + 1, acc).expect("string write");
        }
    }
    std::fs::write(dir.join("online_curves.csv"), &csv)?;

    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" viewBox=\"0 0 640 480\">\n",
    );
    svg.push_str("<rect width=\"640\" height=\"480\" fill=\"white\"/>\n");
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    for (i, rec) in records.iter().enumerate() {
        let color = colors[i % colors.len()];
        let n = rec.per_frame_accuracy.len().max(1);
        let pts: Vec<String> = rec
            .per_frame_accuracy
            .iter()
            .enumerate()
            .map(|(t, &a)| {
                let x = 60.0 + 520.0 * t as f64 / (n.max(2) - 1) as f64;
                let y = 440.0 - 400.0 * a;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"70\" y=\"{}\" fill=\"{color}\" font-size=\"14\">{}</text>",
            30 + 18 * i,
            rec.variant
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    std::fs::write(dir.join("online_curves.svg"), svg)?;
    Ok(())
}

/// Write ablation metrics as CSV.
pub fn emit_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    ensure_nonempty(records, "metrics")?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut csv = String::from("variant,top1,mean_flops,keep_rate,seed,config_hash,samples\n");
    for r in records {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.variant, r.top1, r.mean_flops, r.keep_rate, r.seed, r.config_hash, r.samples
        )
        .expect("string write");
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn scatter_svg(xs: &[f64], ys: &[f64], labels: &[&str], x_label: &str, y_label: &str) -> String {
    let (x_min, x_max) = bounds(xs);
    let (y_min, y_max) = bounds(ys);
    let sx = |v: f64| 60.0 + 520.0 * (v - x_min) / (x_max - x_min).max(1e-12);
    let sy = |v: f64| 440.0 - 400.0 * (v - y_min) / (y_max - y_min).max(1e-12);
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" viewBox=\"0 0 640 480\">\n",
    );
    svg.push_str("<rect width=\"640\" height=\"480\" fill=\"white\"/>\n");
    svg.push_str("<line x1=\"60\" y1=\"440\" x2=\"580\" y2=\"440\" stroke=\"black\"/>\n");
    svg.push_str("<line x1=\"60\" y1=\"40\" x2=\"60\" y2=\"440\" stroke=\"black\"/>\n");
    writeln!(svg, "<text x=\"300\" y=\"470\" font-size=\"14\" text-anchor=\"middle\">{x_label}</text>")
        .expect("string write");
    writeln!(
        svg,
        "<text x=\"20\" y=\"240\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 20 240)\">{y_label}</text>"
    )
    .expect("string write");
    for ((&x, &y), label) in xs.iter().zip(ys).zip(labels) {
        writeln!(
            svg,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#1f77b4\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{label}</text>",
            sx(x),
            sy(y),
            sx(x) + 6.0,
            sy(y) - 6.0
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(vs: &[f64]) -> (f64, f64) {
    let min = vs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if (max - min).abs() < 1e-12 {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    }
}

/// Desk-scale patch-size sweep mirroring the paper's four-point structure.
pub const PATCH_SIZES: [usize; 3] = [16, 24, 32];

/// Benchmark keep fractions.
pub const ETAS: [f64; 3] = [0.9, 0.7, 0.5];

/// Stage-II variant whose PPO rewards follow a reward-variant ablation;
/// identical rollouts, rewritten rewards.
pub fn stage2_with_reward_variant(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    cfg: &StageConfig,
    seed: u64,
    variant: RewardVariant,
) -> Result<crate::pipeline::StageReport> {
    use crate::nn::optim::Adam;
    use crate::rltrain::{ppo_update, rollout_stage2, PolicyRole, RolloutCtx, SkipRewardConfig};
    let glance = crate::pipeline::glance_feature_cache(&bundle.f_g, split);
    let mut focus_caches: Vec<std::collections::HashMap<(usize, usize), Array1<f64>>> =
        vec![Default::default(); split.samples.len()];
    let mut opt = Adam::new(cfg.ppo.learning_rate);
    let mut rng = rng_from(seed, "stage2-variant/rollouts");
    let mut report = crate::pipeline::StageReport { stage: "stage2".into(), epochs: vec![] };

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..split.samples.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut sum_return = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.ppo.batch_size) {
            let mut traces = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &split.samples[i];
                let ctx = RolloutCtx {
                    classifier: &bundle.classifier,
                    policy: &bundle.policy,
                    skip: None,
                    grid: &bundle.grid,
                    skip_cfg: SkipRewardConfig {
                        lambda: cfg.lambda,
                        patch_size: bundle.spec.patch_size,
                    },
                    gamma: cfg.ppo.gamma,
                    reuse_glance: bundle.spec.reuse_glance,
                };
                let mut focus_feats = crate::pipeline::CachedFocus {
                    f_l: &bundle.f_l,
                    frames: &sample.frames,
                    grid: &bundle.grid,
                    cache: &mut focus_caches[i],
                };
                let mut trace =
                    rollout_stage2(&ctx, &glance[i], sample.label, &mut focus_feats, &mut rng)?;
                apply_reward_variant(&mut trace, variant, cfg.ppo.gamma);
                sum_return += trace.frames.first().map(|r| r.ret).unwrap_or(0.0);
                correct += (crate::nets::Prediction { probs: trace.final_probs.clone() }.argmax()
                    == sample.label) as usize;
                traces.push(trace);
            }
            ppo_update(&mut bundle.policy, &mut opt, &traces, PolicyRole::Patch, &cfg.ppo)?;
        }
        report.epochs.push(crate::pipeline::EpochStats {
            mean_return: sum_return / split.samples.len() as f64,
            accuracy: correct as f64 / split.samples.len() as f64,
            ..Default::default()
        });
    }
    bundle.stage = "stage2".into();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::BundleSpec;
    use crate::synthdata::{generate_split, SplitRole, SynthConfig};

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            frame_size: 32,
            frames_per_video: 4,
            glyph_size: 6,
            ..SynthConfig::default()
        }
    }

    fn tiny_spec() -> BundleSpec {
        BundleSpec {
            frame_size: 32,
            patch_size: 12,
            grid_k: 3,
            classifier_hidden: 32,
            ..BundleSpec::default()
        }
    }

    fn tiny_split(n: usize, seed: u64) -> DatasetSplit {
        generate_split(&tiny_cfg(), n, SplitRole::Test, seed).unwrap()
    }

    #[test]
    fn untrained_bundle_scores_near_chance() {
        let bundle = ModelBundle::new(tiny_spec(), 2).unwrap();
        let split = tiny_split(500, 71);
        let rec = evaluate(&bundle, &split, EvalMode::Offline, PolicyVariant::Central, false, 1)
            .unwrap();
        assert!(
            (rec.top1 - 0.1).abs() <= 0.03,
            "untrained accuracy {} not near chance",
            rec.top1
        );
        assert!(rec.per_frame_accuracy.is_empty());
        assert_eq!(rec.keep_rate, 1.0);
    }

    #[test]
    fn online_curve_last_point_equals_offline_top1() {
        let bundle = ModelBundle::new(tiny_spec(), 3).unwrap();
        let split = tiny_split(20, 72);
        let online =
            evaluate(&bundle, &split, EvalMode::Online, PolicyVariant::Learned, false, 5).unwrap();
        let offline =
            evaluate(&bundle, &split, EvalMode::Offline, PolicyVariant::Learned, false, 5).unwrap();
        assert_eq!(online.per_frame_accuracy.len(), 4);
        assert_eq!(*online.per_frame_accuracy.last().unwrap(), offline.top1);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let bundle = ModelBundle::new(tiny_spec(), 4).unwrap();
        let split = tiny_split(30, 73);
        let a = evaluate(&bundle, &split, EvalMode::Offline, PolicyVariant::Random, false, 9)
            .unwrap();
        let b = evaluate(&bundle, &split, EvalMode::Offline, PolicyVariant::Random, false, 9)
            .unwrap();
        assert_eq!(a.top1, b.top1);
        assert_eq!(a.mean_flops, b.mean_flops);
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let bundle = ModelBundle::new(tiny_spec(), 4).unwrap();
        let other = generate_split(
            &SynthConfig { frame_size: 64, ..tiny_cfg() },
            10,
            SplitRole::Test,
            1,
        )
        .unwrap();
        assert!(matches!(
            evaluate(&bundle, &other, EvalMode::Offline, PolicyVariant::Central, false, 1),
            Err(AdaFocusError::Contract(_))
        ));
    }

    #[test]
    fn degenerate_grid_makes_all_variants_identical() {
        // P = H: a single candidate, so every policy picks it
        let spec = BundleSpec { patch_size: 32, grid_k: 3, ..tiny_spec() };
        let bundle = ModelBundle::new(spec, 5).unwrap();
        let split = tiny_split(15, 74);
        let recs = ablate_policies(&bundle, &split, 7).unwrap();
        for pair in recs.windows(2) {
            assert!((pair[0].top1 - pair[1].top1).abs() <= 1e-6);
        }
    }

    #[test]
    fn selections_are_on_grid_with_t_records_per_sample() {
        let bundle = ModelBundle::new(tiny_spec(), 6).unwrap();
        let split = tiny_split(10, 75);
        let recs = export_selections(&bundle, &split, PolicyVariant::Gaussian, 3).unwrap();
        assert_eq!(recs.len(), 10 * 4);
        for r in &recs {
            assert!(bundle.grid.offsets.contains(&r.offset));
        }
    }

    #[test]
    fn glyph_coverage_geometry() {
        let rec = SelectionRecord { sample: 0, t: 0, offset: (10, 10), glyph: (10, 10) };
        assert_eq!(glyph_coverage(&rec, 6, 12), 1.0);
        let apart = SelectionRecord { sample: 0, t: 0, offset: (0, 0), glyph: (20, 20) };
        assert_eq!(glyph_coverage(&apart, 6, 12), 0.0);
        let half = SelectionRecord { sample: 0, t: 0, offset: (0, 0), glyph: (0, 9) };
        // 3 of 6 columns covered
        assert!((glyph_coverage(&half, 6, 12) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_selections_have_full_overlap() {
        // selecting the candidate nearest the glyph gives high coverage
        let bundle = ModelBundle::new(tiny_spec(), 8).unwrap();
        let split = tiny_split(10, 76);
        let mut recs = Vec::new();
        for (i, s) in split.samples.iter().enumerate() {
            for (t, &g) in s.glyph_track.iter().enumerate() {
                let k = bundle.grid.nearest(g.0 as f64 + 3.0, g.1 as f64 + 3.0);
                recs.push(SelectionRecord {
                    sample: i,
                    t,
                    offset: bundle.grid.offsets[k],
                    glyph: g,
                });
            }
        }
        let rate = glyph_overlap_rate(&recs, 6, 12);
        assert!(rate >= 0.8, "oracle overlap rate {rate}");
    }

    #[test]
    fn reward_variant_rewrites() {
        let bundle = ModelBundle::new(tiny_spec(), 9).unwrap();
        let split = tiny_split(10, 77);
        let glance = crate::pipeline::glance_feature_cache(&bundle.f_g, &split);
        let ctx = crate::rltrain::RolloutCtx {
            classifier: &bundle.classifier,
            policy: &bundle.policy,
            skip: None,
            grid: &bundle.grid,
            skip_cfg: crate::rltrain::SkipRewardConfig { lambda: 1e-6, patch_size: 12 },
            gamma: 0.7,
            reuse_glance: true,
        };
        let mut cache = Default::default();
        let mut focus_feats = crate::pipeline::CachedFocus {
            f_l: &bundle.f_l,
            frames: &split.samples[0].frames,
            grid: &bundle.grid,
            cache: &mut cache,
        };
        let mut rng = rng_from(1, "rv");
        let trace = crate::rltrain::rollout_stage2(
            &ctx,
            &glance[0],
            split.samples[0].label,
            &mut focus_feats,
            &mut rng,
        )
        .unwrap();

        let mut conf = trace.clone();
        apply_reward_variant(&mut conf, RewardVariant::Confidence, 0.7);
        for rec in &conf.frames {
            assert_eq!(rec.reward, rec.p_ty_selected);
        }
        conf.check_invariants(0.7).unwrap();

        let mut inc = trace.clone();
        apply_reward_variant(&mut inc, RewardVariant::Increments, 0.7);
        assert_eq!(inc.frames[0].reward, inc.frames[0].p_ty_selected);
        for w in inc.frames.windows(2) {
            assert!((w[1].reward - (w[1].p_ty_selected - w[0].p_ty_selected)).abs() < 1e-15);
        }
    }

    #[test]
    fn feature_reuse_pairing_is_validated() {
        let mut on = ModelBundle::new(tiny_spec(), 10).unwrap();
        let mut off =
            ModelBundle::new(BundleSpec { reuse_glance: false, ..tiny_spec() }, 10).unwrap();
        let split = tiny_split(10, 78);
        // reuse-off classifier sees only the pooled focus features
        assert_eq!(off.classifier.input_dim(), off.f_l.spec.out_channels());
        let (a, b) = ablate_feature_reuse(&mut on, &mut off, &split, 1).unwrap();
        assert!(a.top1 >= 0.0 && b.top1 >= 0.0);
        // swapped order is rejected
        assert!(matches!(
            ablate_feature_reuse(&mut off, &mut on, &split, 1),
            Err(AdaFocusError::Config(_))
        ));
    }

    #[test]
    fn tradeoff_flops_increase_with_patch_size() {
        let split = tiny_split(10, 79);
        let bundles: Vec<ModelBundle> = [8usize, 12, 16]
            .iter()
            .map(|&p| ModelBundle::new(BundleSpec { patch_size: p, ..tiny_spec() }, 11).unwrap())
            .collect();
        let entries: Vec<(String, &ModelBundle, Option<f64>)> = bundles
            .iter()
            .map(|b| (format!("P{}", b.spec.patch_size), b, None))
            .collect();
        let pts = tradeoff_sweep(&entries, &split, 2).unwrap();
        assert!(pts[0].mean_flops < pts[1].mean_flops);
        assert!(pts[1].mean_flops < pts[2].mean_flops);
    }

    #[test]
    fn emit_plots_writes_data_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            TradeoffPoint { label: "a".into(), patch_size: 12, eta: None, mean_flops: 1e6, top1: 0.5 },
            TradeoffPoint { label: "b".into(), patch_size: 16, eta: Some(0.5), mean_flops: 2e6, top1: 0.6 },
        ];
        emit_tradeoff_plot(&pts, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap();
        assert!(csv.lines().count() == 3);
        assert!(std::fs::read_to_string(dir.path().join("tradeoff.svg"))
            .unwrap()
            .starts_with("<svg"));
        // re-emission is byte-identical
        emit_tradeoff_plot(&pts, dir.path()).unwrap();
        assert_eq!(csv, std::fs::read_to_string(dir.path().join("tradeoff.csv")).unwrap());
        // empty input writes nothing
        let empty = tempfile::tempdir().unwrap();
        assert!(emit_tradeoff_plot(&[], empty.path()).is_err());
        assert!(std::fs::read_dir(empty.path()).unwrap().next().is_none());
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = ModelBundle::new(tiny_spec(), 12).unwrap();
        let split = tiny_split(10, 80);
        let recs = ablate_policies(&bundle, &split, 3).unwrap();
        let path = dir.path().join("metrics.csv");
        emit_metrics_csv(&recs, &path).unwrap();
        let csv = std::fs::read_to_string(&path).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("learned") && csv.contains("gaussian"));
    }
}
