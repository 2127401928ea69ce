//! Scratch: train to stage1 on the candidate recipe and save checkpoints so
//! stage2 experiments can iterate without retraining.
use adafocus::pipeline::{
    pretrain, save_bundle, stage1_warmup, BundleSpec, ModelBundle, Stage, StageConfig,
};
use adafocus::synthdata::{generate_split, save_split, SplitRole, SynthConfig};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dis: usize = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(3);
    let pre_ep: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(30);
    let glance_ep: usize = args.get(3).map(|v| v.parse().unwrap()).unwrap_or(12);
    let s1_ep: usize = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(6);
    let fl_lr: f64 = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    let synth = SynthConfig { glyph_size: 16, num_distractors: dis, ..SynthConfig::default() };
    let train = generate_split(&synth, 2000, SplitRole::Train, 11).unwrap();
    let test = generate_split(&synth, 500, SplitRole::Test, 12).unwrap();
    let cal = generate_split(&synth, 200, SplitRole::Calibration, 13).unwrap();
    save_split(&train, Path::new("/tmp/dbg/g16/train.bin")).unwrap();
    save_split(&test, Path::new("/tmp/dbg/g16/test.bin")).unwrap();
    save_split(&cal, Path::new("/tmp/dbg/g16/cal.bin")).unwrap();
    let spec = BundleSpec { adafocus_plus: true, ..BundleSpec::default() };
    let mut bundle = ModelBundle::new(spec, 7).unwrap();
    let mut cfg = StageConfig::defaults(Stage::Pretrain);
    cfg.epochs = pre_ep;
    cfg.glance_epochs = Some(glance_ep);
    let t0 = std::time::Instant::now();
    pretrain(&mut bundle, &train, &cfg, 7).unwrap();
    println!("pretrain {pre_ep} ep (glance {glance_ep}) in {:.0}s", t0.elapsed().as_secs_f64());
    save_bundle(Path::new("/tmp/dbg/g16/pretrain.ckpt"), &mut bundle).unwrap();
    let mut cfg = StageConfig::defaults(Stage::Stage1);
    cfg.epochs = s1_ep;
    cfg.f_l_learning_rate = Some(fl_lr);
    let t0 = std::time::Instant::now();
    let rep = stage1_warmup(&mut bundle, &train, &cfg, 7).unwrap();
    println!(
        "stage1 {s1_ep} ep (f_l lr {fl_lr}) in {:.0}s, final acc {:.3}",
        t0.elapsed().as_secs_f64(),
        rep.epochs.last().unwrap().accuracy
    );
    save_bundle(Path::new("/tmp/dbg/g16/stage1.ckpt"), &mut bundle).unwrap();
}
