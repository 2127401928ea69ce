//! Scratch: train f_L + linear head on oracle (glyph-nearest grid) patches.
use adafocus::focuspolicy::{build_grid, crop};
use adafocus::nets::{Backbone, ConvBackboneSpec};
use adafocus::nn::linear::Linear;
use adafocus::nn::ops::{global_avg_pool, global_avg_pool_backward, softmax_cross_entropy};
use adafocus::nn::optim::Adam;
use adafocus::nn::param::Params;
use adafocus::rng::rng_from;
use adafocus::synthdata::{generate_split, SplitRole, SynthConfig};
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
    let mode = std::env::args().nth(1).unwrap_or_else(|| "oracle".into());
    let glyph: usize = std::env::args().nth(2).map(|g| g.parse().unwrap()).unwrap_or(8);
    let dis: usize = std::env::args().nth(3).map(|g| g.parse().unwrap()).unwrap_or(3);
    let seed: u64 = std::env::args().nth(5).map(|g| g.parse().unwrap()).unwrap_or(0);
    let cfg = SynthConfig { glyph_size: glyph, num_distractors: dis, ..SynthConfig::default() };
    let grid = build_grid(cfg.frame_size, 16, 5).unwrap();
    let train = generate_split(&cfg, 2000, SplitRole::Train, seed * 10 + 1).unwrap();
    let test = generate_split(&cfg, 400, SplitRole::Test, seed * 10 + 2).unwrap();
    let mut net = Backbone::new(ConvBackboneSpec::focus_default(1), &mut rng_from(seed, "n"));
    let mut head = Linear::new(net.spec.out_channels(), cfg.num_classes, &mut rng_from(seed, "h"));
    let lr: f64 = std::env::args().nth(4).map(|g| g.parse().unwrap()).unwrap_or(1e-2);
    let mut opt = Adam::new(lr);
    let mut rng = rng_from(seed, "order");
    for epoch in 0..30 {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(32) {
            for &i in chunk {
                let s = &train.samples[i];
                let t = rng.gen_range(0..s.frames.len());
                let off = if mode == "oracle" {
                    grid.offsets[grid.nearest(
                        s.glyph_track[t].0 as f64 + glyph as f64 / 2.0,
                        s.glyph_track[t].1 as f64 + glyph as f64 / 2.0,
                    )]
                } else if mode == "center" {
                    ((cfg.frame_size - 16) / 2, (cfg.frame_size - 16) / 2)
                } else {
                    grid.offsets[rng.gen_range(0..grid.num_candidates())]
                };
                let patch = crop(&s.frames[t], off, 16).unwrap();
                let (fm, cache) = net.forward_cached(&patch);
                let pooled = global_avg_pool(&fm);
                let logits = head.forward(&pooled);
                let (loss, g) = softmax_cross_entropy(&logits, s.label);
                total += loss;
                let am = logits.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                correct += (am == s.label) as usize;
                let gp = head.backward(&g, &pooled);
                let (c, h, w) = fm.dim();
                net.backward(&global_avg_pool_backward(&gp, c, h, w), &cache);
            }
            let mut joint = Joint { net: &mut net, head: &mut head };
            joint.scale_grads(1.0 / chunk.len() as f64);
            opt.apply(&mut joint).unwrap();
            joint.zero_grads();
        }
        // test with oracle patches (frame 0)
        let mut tc = 0usize;
        for s in &test.samples {
            let cand = grid.nearest(s.glyph_track[0].0 as f64 + glyph as f64 / 2.0, s.glyph_track[0].1 as f64 + glyph as f64 / 2.0);
            let patch = crop(&s.frames[0], grid.offsets[cand], 16).unwrap();
            let pooled = global_avg_pool(&net.forward(&patch));
            let logits = head.forward(&pooled);
            let am = logits.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            tc += (am == s.label) as usize;
        }
        println!(
            "epoch {epoch}: train loss {:.4} acc {:.3} | oracle-test acc {:.3}",
            total / train.samples.len() as f64,
            correct as f64 / train.samples.len() as f64,
            tc as f64 / test.samples.len() as f64
        );
    }
}
