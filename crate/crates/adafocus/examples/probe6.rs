//! Scratch: inspect f_L weight/feature statistics in a checkpoint.
use adafocus::focuspolicy::crop;
use adafocus::nets::focus;
use adafocus::pipeline::load_bundle;
use adafocus::synthdata::load_split;
use ndarray::Array1;
use std::path::Path;

fn main() {
    let ck = std::env::args().nth(1).unwrap();
    let bundle = load_bundle(Path::new(&ck)).unwrap();
    let test = load_split(Path::new("/tmp/dbg/g16/test.bin")).unwrap();
    for (i, c) in bundle.f_l.convs.iter().enumerate() {
        let wn = c.w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn = c.b.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("f_l conv{i}: |w| {wn:.4e} |b| {bn:.4e}");
    }
    let p = bundle.spec.patch_size;
    let mut pools: Vec<Array1<f64>> = vec![];
    for s in test.samples.iter().take(20) {
        for &off in bundle.grid.offsets.iter().take(5) {
            pools.push(focus(&bundle.f_l, &crop(&s.frames[0], off, p).unwrap(), p).unwrap().pooled());
        }
    }
    let n = pools.len() as f64;
    let dim = pools[0].len();
    let mut var = 0.0;
    for c in 0..dim {
        let m: f64 = pools.iter().map(|p| p[c]).sum::<f64>() / n;
        var += pools.iter().map(|p| (p[c] - m).powi(2)).sum::<f64>() / n;
    }
    println!("pooled variance across patches: {:.3e}", var / dim as f64);
}
