//! Scratch experiment: can the glance probe learn at all, and how fast?

use adafocus::nets::{Backbone, ConvBackboneSpec};
use adafocus::nn::linear::Linear;
use adafocus::nn::ops::{global_avg_pool, global_avg_pool_backward, softmax_cross_entropy};
use adafocus::nn::optim::Adam;
use adafocus::nn::param::Params;
use adafocus::rng::rng_from;
use adafocus::synthdata::{generate_split, SplitRole, SynthConfig};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng as _;

struct Joint<'a> {
    net: &'a mut Backbone,
    head: &'a mut Linear,
}
impl Params for Joint<'_> {
    fn visit_params(&mut self, prefix: &str, f: &mut adafocus::nn::param::ParamVisitor) {
        self.net.visit_params(&format!("{prefix}n."), f);
        self.head.visit_params(&format!("{prefix}h."), f);
    }
}

fn main() {
    let glyph: usize = std::env::args().nth(1).map(|g| g.parse().unwrap()).unwrap_or(8);
    let noise: f64 = std::env::args().nth(2).map(|g| g.parse().unwrap()).unwrap_or(0.05);
    let dis: usize = std::env::args().nth(3).map(|g| g.parse().unwrap()).unwrap_or(3);
    let cfg = SynthConfig { glyph_size: glyph, noise_std: noise, num_distractors: dis, ..SynthConfig::default() };
    let split = generate_split(&cfg, 2000, SplitRole::Train, 1).unwrap();
    let test = generate_split(&cfg, 400, SplitRole::Test, 2).unwrap();
    for lr in [1e-2] {
        let mut net = Backbone::new(ConvBackboneSpec::glance_default(1), &mut rng_from(0, "n"));
        let mut head = Linear::new(net.spec.out_channels(), cfg.num_classes, &mut rng_from(0, "h"));
        let mut opt = Adam::new(lr);
        let mut rng = rng_from(0, "order");
        println!("== lr {lr}");
        // report pooled feature spread at init
        let frames: Vec<&Array3<f64>> = split.samples.iter().map(|s| &s.frames[0]).collect();
        let pools: Vec<_> = frames.iter().take(10).map(|f| global_avg_pool(&net.forward(f))).collect();
        let mut var = 0.0;
        for c in 0..pools[0].len() {
            let m: f64 = pools.iter().map(|p| p[c]).sum::<f64>() / pools.len() as f64;
            var += pools.iter().map(|p| (p[c] - m).powi(2)).sum::<f64>() / pools.len() as f64;
        }
        println!("pooled feature variance across samples: {:.3e}", var);
        for epoch in 0..12 {
            let mut order: Vec<usize> = (0..split.samples.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut correct = 0usize;
            for chunk in order.chunks(16) {
                for &i in chunk {
                    let t = rng.gen_range(0..split.samples[i].frames.len());
                    let x = &split.samples[i].frames[t];
                    let label = split.samples[i].label;
                    let (fm, cache) = net.forward_cached(x);
                    let pooled = global_avg_pool(&fm);
                    let logits = head.forward(&pooled);
                    let (loss, g) = softmax_cross_entropy(&logits, label);
                    total += loss;
                    let am = logits
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    correct += (am == label) as usize;
                    let gp = head.backward(&g, &pooled);
                    let (c, h, w) = fm.dim();
                    net.backward(&global_avg_pool_backward(&gp, c, h, w), &cache);
                }
                let mut joint = Joint { net: &mut net, head: &mut head };
                joint.scale_grads(1.0 / chunk.len() as f64);
                opt.apply(&mut joint).unwrap();
                joint.zero_grads();
            }
            {
                let mut tc = 0usize;
                for s in &test.samples {
                    let pooled = global_avg_pool(&net.forward(&s.frames[0]));
                    let logits = head.forward(&pooled);
                    let am = logits.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                    tc += (am == s.label) as usize;
                }
                println!(
                    "epoch {epoch:>2}: loss {:.4} acc {:.2} | test {:.3}",
                    total / split.samples.len() as f64,
                    correct as f64 / split.samples.len() as f64,
                    tc as f64 / test.samples.len() as f64
                );
            }
        }
    }
}
