use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::param::{ParamVisitor, Params};
use crate::rng::Rng;
use crate::visit_pair;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>, // [out, in]
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound));
        Linear {
            gw: Array2::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(out_dim),
            gb: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(&mut self, gy: &Array1<f64>, x: &Array1<f64>) -> Array1<f64> {
        self.gw += &gy
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&x.view().insert_axis(ndarray::Axis(0)));
        self.gb += gy;
        self.w.t().dot(gy)
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn flops(&self) -> u64 {
        (self.w.len()) as u64
    }
}

impl Params for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        visit_pair!(f, prefix, "w", self.w, self.gw);
        visit_pair!(f, prefix, "b", self.b, self.gb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use ndarray::array;

    #[test]
    fn forward_matches_manual() {
        let mut rng = rng_from(0, "t");
        let mut lin = Linear::new(2, 2, &mut rng);
        lin.w = array![[1.0, 2.0], [3.0, 4.0]];
        lin.b = array![0.5, -0.5];
        let y = lin.forward(&array![1.0, 1.0]);
        assert_eq!(y, array![3.5, 6.5]);
    }

    #[test]
    fn flops_64_to_10() {
        let mut rng = rng_from(0, "t");
        let lin = Linear::new(64, 10, &mut rng);
        assert_eq!(lin.flops(), 640);
    }
}
