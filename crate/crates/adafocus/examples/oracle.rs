//! Scratch experiment: does a ground-truth-placed patch help the classifier
//! at all, compared with random patches or no patch?

use adafocus::focuspolicy::crop;
use adafocus::nets::focus;
use adafocus::pipeline::load_bundle;
use adafocus::rng::rng_from;
use adafocus::synthdata::load_split;
use ndarray::Array1;
use rand::Rng;

fn cat(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    Array1::from_iter(a.iter().chain(b.iter()).copied())
}

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: oracle <ckpt> <split.bin>");
    let split_path = args.next().expect("usage: oracle <ckpt> <split.bin> [glyph]");
    let half: f64 = args.next().map(|g| g.parse::<f64>().unwrap() / 2.0).unwrap_or(4.0);
    let bundle = load_bundle(std::path::Path::new(&ckpt)).unwrap();
    let split = load_split(std::path::Path::new(&split_path)).unwrap();
    let p = bundle.spec.patch_size;
    let local_dim = bundle.classifier.input_dim() - bundle.glance_dim();
    let mut rng = rng_from(3, "oracle");

    let mut correct = [0usize; 3]; // oracle, random, none
    for s in &split.samples {
        let pooled: Vec<Array1<f64>> = s
            .frames
            .iter()
            .map(|f| bundle.pooled_block(&bundle.f_g.forward(f)))
            .collect();
        for (mode, c) in correct.iter_mut().enumerate() {
            let mut state = bundle.classifier.init_state();
            let mut last = None;
            for (t, frame) in s.frames.iter().enumerate() {
                let local = match mode {
                    0 => {
                        let (gy, gx) = s.glyph_track[t];
                        let cand = bundle
                            .grid
                            .nearest(gy as f64 + half, gx as f64 + half);
                        let patch = crop(frame, bundle.grid.offsets[cand], p).unwrap();
                        focus(&bundle.f_l, &patch, p).unwrap().pooled()
                    }
                    1 => {
                        let cand = rng.gen_range(0..bundle.grid.num_candidates());
                        let patch = crop(frame, bundle.grid.offsets[cand], p).unwrap();
                        focus(&bundle.f_l, &patch, p).unwrap().pooled()
                    }
                    _ => Array1::zeros(local_dim),
                };
                let (pred, next) = bundle
                    .classifier
                    .step(&cat(&pooled[t], &local), &state)
                    .unwrap();
                state = next;
                last = Some(pred);
            }
            *c += (last.unwrap().argmax() == s.label) as usize;
        }
    }
    let n = split.samples.len() as f64;
    println!(
        "oracle {:.3}  random {:.3}  none {:.3}",
        correct[0] as f64 / n,
        correct[1] as f64 / n,
        correct[2] as f64 / n
    );
}
