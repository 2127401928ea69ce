//! Scratch: full-pipeline recipe trial with subset stage2 and f_L stage3.
use adafocus::evalbench::{evaluate, export_selections, glyph_overlap_rate, EvalMode, PolicyVariant};
use adafocus::pipeline::{
    pretrain, stage1_warmup, stage2_policy_learning, stage3_finetune, BundleSpec, ModelBundle,
    Stage, StageConfig,
};
use adafocus::synthdata::{generate_split, DatasetSplit, SplitRole, SynthConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let synth = SynthConfig { glyph_size: 16, num_distractors: 5, ..SynthConfig::default() };
    let train = generate_split(&synth, 2000, SplitRole::Train, 11).unwrap();
    let test = generate_split(&synth, 500, SplitRole::Test, 12).unwrap();
    let spec = BundleSpec { adafocus_plus: true, ..BundleSpec::default() };
    let mut bundle = ModelBundle::new(spec, 7).unwrap();

    let mut cfg = StageConfig::defaults(Stage::Pretrain);
    cfg.epochs = 30;
    let rep = pretrain(&mut bundle, &train, &cfg, 7).unwrap();
    println!("[{:>5.0}s] pretrain done, last loss {:.4}", t0.elapsed().as_secs_f64(), rep.epochs.last().unwrap().loss);

    let mut cfg = StageConfig::defaults(Stage::Stage1);
    cfg.epochs = 10;
    let rep = stage1_warmup(&mut bundle, &train, &cfg, 7).unwrap();
    for (i, e) in rep.epochs.iter().enumerate() {
        println!("s1 ep {:>2}: loss {:.4} acc {:.3}", i + 1, e.loss, e.accuracy);
    }

    let sub = DatasetSplit { config: train.config.clone(), role: train.role, samples: train.samples[..600].to_vec() };
    let mut cfg = StageConfig::defaults(Stage::Stage2);
    cfg.epochs = 8;
    let rep = stage2_policy_learning(&mut bundle, &sub, &cfg, 7).unwrap();
    for (i, e) in rep.epochs.iter().enumerate() {
        println!("s2 ep {:>2}: return {:+.4} acc {:.3} keep {:.2}", i + 1, e.mean_return, e.accuracy, e.keep_rate);
    }
    let g = synth.glyph_size;
    let p = bundle.spec.patch_size;
    let sel_l = export_selections(&bundle, &test, PolicyVariant::Learned, 7).unwrap();
    let sel_r = export_selections(&bundle, &test, PolicyVariant::Random, 7).unwrap();
    println!(
        "[{:>5.0}s] overlap learned {:.3} random {:.3}",
        t0.elapsed().as_secs_f64(),
        glyph_overlap_rate(&sel_l, g, p),
        glyph_overlap_rate(&sel_r, g, p)
    );

    let mut cfg = StageConfig::defaults(Stage::Stage3);
    cfg.epochs = 4;
    cfg.train_f_l = true;
    let rep = stage3_finetune(&mut bundle, &train, &cfg, 7).unwrap();
    for (i, e) in rep.epochs.iter().enumerate() {
        println!("s3 ep {:>2}: loss {:.4} acc {:.3}", i + 1, e.loss, e.accuracy);
    }
    for v in [PolicyVariant::Learned, PolicyVariant::Random, PolicyVariant::Central] {
        let m = evaluate(&bundle, &test, EvalMode::Offline, v, false, 7).unwrap();
        println!("{:>8}: top1 {:.3}", v.name(), m.top1);
    }
    println!("[{:>5.0}s] total", t0.elapsed().as_secs_f64());
}
