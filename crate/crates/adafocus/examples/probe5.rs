//! Scratch: stage2 diagnostics on the saved stage1 checkpoint.
use adafocus::evalbench::{export_selections, glyph_overlap_rate, PolicyVariant};
use adafocus::focuspolicy::crop;
use adafocus::nets::focus;
use adafocus::pipeline::{load_bundle, stage2_policy_learning, Stage, StageConfig};
use adafocus::rng::rng_from;
use adafocus::synthdata::{load_split, DatasetSplit};
use ndarray::Array1;
use rand::Rng as _;
use std::path::Path;

fn cat(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    Array1::from_iter(a.iter().chain(b.iter()).copied())
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "contrast".into());
    let bundle = load_bundle(Path::new("/tmp/dbg/g16/stage1.ckpt")).unwrap();
    let test = load_split(Path::new("/tmp/dbg/g16/test.bin")).unwrap();
    let train = load_split(Path::new("/tmp/dbg/g16/train.bin")).unwrap();
    let g = test.config.glyph_size;
    let p = bundle.spec.patch_size;

    if mode == "contrast" {
        let mut rng = rng_from(9, "contrast");
        let mut diff_sum = vec![0.0; test.config.frames_per_video];
        let mut n = 0usize;
        for s in test.samples.iter().take(200) {
            let mut state = bundle.classifier.init_state();
            for (t, frame) in s.frames.iter().enumerate() {
                let pooled = bundle.pooled_block(&bundle.f_g.forward(frame));
                let orc = bundle.grid.nearest(
                    s.glyph_track[t].0 as f64 + g as f64 / 2.0,
                    s.glyph_track[t].1 as f64 + g as f64 / 2.0,
                );
                let rnd = rng.gen_range(0..bundle.grid.num_candidates());
                let local_o = focus(&bundle.f_l, &crop(frame, bundle.grid.offsets[orc], p).unwrap(), p).unwrap().pooled();
                let local_r = focus(&bundle.f_l, &crop(frame, bundle.grid.offsets[rnd], p).unwrap(), p).unwrap().pooled();
                let (po, _) = bundle.classifier.step(&cat(&pooled, &local_o), &state).unwrap();
                let (pr, st_r) = bundle.classifier.step(&cat(&pooled, &local_r), &state).unwrap();
                diff_sum[t] += po.probs[s.label] - pr.probs[s.label];
                state = st_r; // advance along the random path
            }
            n += 1;
        }
        for (t, d) in diff_sum.iter().enumerate() {
            println!("t={t}: mean p_oracle - p_random = {:+.4}", d / n as f64);
        }
        return;
    }

    // mode == stage2 sweep: args lr epochs samples
    let lr: f64 = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = std::env::args().nth(3).map(|v| v.parse().unwrap()).unwrap_or(15);
    let nsamp: usize = std::env::args().nth(4).map(|v| v.parse().unwrap()).unwrap_or(300);
    let mut bundle = bundle;
    let sub = DatasetSplit { config: train.config.clone(), role: train.role, samples: train.samples[..nsamp].to_vec() };
    let mut cfg = StageConfig::defaults(Stage::Stage2);
    cfg.epochs = epochs;
    cfg.ppo.learning_rate = lr;
    let rep = stage2_policy_learning(&mut bundle, &sub, &cfg, 7).unwrap();
    for (i, e) in rep.epochs.iter().enumerate() {
        if i % 2 == 1 || i + 1 == rep.epochs.len() {
            println!("s2 ep {:>2}: return {:+.4} acc {:.3} keep {:.2}", i + 1, e.mean_return, e.accuracy, e.keep_rate);
        }
    }
    let sel_l = export_selections(&bundle, &test, PolicyVariant::Learned, 7).unwrap();
    let sel_r = export_selections(&bundle, &test, PolicyVariant::Random, 7).unwrap();
    println!(
        "overlap learned {:.3} random {:.3}",
        glyph_overlap_rate(&sel_l, g, p),
        glyph_overlap_rate(&sel_r, g, p)
    );
}
