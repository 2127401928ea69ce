//! A single gated-recurrent-unit cell with backprop-through-time support.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::param::{ParamVisitor, Params};
use crate::rng::Rng;
use crate::visit_pair;

/// Per-step activations needed for the backward pass.
pub struct GruCache {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    n: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub wz: Array2<f64>,
    pub wr: Array2<f64>,
    pub wn: Array2<f64>,
    pub uz: Array2<f64>,
    pub ur: Array2<f64>,
    pub un: Array2<f64>,
    pub bz: Array1<f64>,
    pub br: Array1<f64>,
    pub bn: Array1<f64>,
    pub gwz: Array2<f64>,
    pub gwr: Array2<f64>,
    pub gwn: Array2<f64>,
    pub guz: Array2<f64>,
    pub gur: Array2<f64>,
    pub gun: Array2<f64>,
    pub gbz: Array1<f64>,
    pub gbr: Array1<f64>,
    pub gbn: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruCell {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let mk_w = |rng: &mut Rng| {
            let bound = 1.0 / (input_dim as f64).sqrt();
            Array2::from_shape_fn((hidden_dim, input_dim), |_| rng.gen_range(-bound..bound))
        };
        let mk_u = |rng: &mut Rng| {
            let bound = 1.0 / (hidden_dim as f64).sqrt();
            Array2::from_shape_fn((hidden_dim, hidden_dim), |_| rng.gen_range(-bound..bound))
        };
        GruCell {
            input_dim,
            hidden_dim,
            wz: mk_w(rng),
            wr: mk_w(rng),
            wn: mk_w(rng),
            uz: mk_u(rng),
            ur: mk_u(rng),
            un: mk_u(rng),
            bz: Array1::zeros(hidden_dim),
            br: Array1::zeros(hidden_dim),
            bn: Array1::zeros(hidden_dim),
            gwz: Array2::zeros((hidden_dim, input_dim)),
            gwr: Array2::zeros((hidden_dim, input_dim)),
            gwn: Array2::zeros((hidden_dim, input_dim)),
            guz: Array2::zeros((hidden_dim, hidden_dim)),
            gur: Array2::zeros((hidden_dim, hidden_dim)),
            gun: Array2::zeros((hidden_dim, hidden_dim)),
            gbz: Array1::zeros(hidden_dim),
            gbr: Array1::zeros(hidden_dim),
            gbn: Array1::zeros(hidden_dim),
        }
    }

    /// Zero state at t=0.
    pub fn init_state(&self) -> Array1<f64> {
        Array1::zeros(self.hidden_dim)
    }

    pub fn step(&self, x: &Array1<f64>, h: &Array1<f64>) -> Array1<f64> {
        self.step_cached(x, h).0
    }

    pub fn step_cached(&self, x: &Array1<f64>, h: &Array1<f64>) -> (Array1<f64>, GruCache) {
        assert_eq!(x.len(), self.input_dim, "gru input dim mismatch");
        let z = (self.wz.dot(x) + self.uz.dot(h) + &self.bz).mapv(sigmoid);
        let r = (self.wr.dot(x) + self.ur.dot(h) + &self.br).mapv(sigmoid);
        let n = (self.wn.dot(x) + self.un.dot(&(&r * h)) + &self.bn).mapv(f64::tanh);
        let h_next = (1.0 - &z) * h + &z * &n;
        (
            h_next,
            GruCache {
                x: x.clone(),
                h_prev: h.clone(),
                z,
                r,
                n,
            },
        )
    }

    /// One BPTT step: gradients w.r.t. input and previous hidden state.
    pub fn backward_step(&mut self, gh_next: &Array1<f64>, c: &GruCache) -> (Array1<f64>, Array1<f64>) {
        let dn = gh_next * &c.z;
        let dz = gh_next * &(&c.n - &c.h_prev);
        let mut dh = gh_next * &(1.0 - &c.z);

        let dan = &dn * &(1.0 - &c.n * &c.n);
        let rh = &c.r * &c.h_prev;
        self.gwn += &outer(&dan, &c.x);
        self.gun += &outer(&dan, &rh);
        self.gbn += &dan;

        let drh = self.un.t().dot(&dan);
        let dr = &drh * &c.h_prev;
        dh += &(&drh * &c.r);

        let daz = &dz * &(&c.z * &(1.0 - &c.z));
        let dar = &dr * &(&c.r * &(1.0 - &c.r));
        self.gwz += &outer(&daz, &c.x);
        self.guz += &outer(&daz, &c.h_prev);
        self.gbz += &daz;
        self.gwr += &outer(&dar, &c.x);
        self.gur += &outer(&dar, &c.h_prev);
        self.gbr += &dar;

        let gx = self.wz.t().dot(&daz) + self.wr.t().dot(&dar) + self.wn.t().dot(&dan);
        let gh_prev = dh + self.uz.t().dot(&daz) + self.ur.t().dot(&dar);
        (gx, gh_prev)
    }

    /// Multiply-adds per step: the three gate matrix products on input and
    /// hidden state.
    pub fn flops(&self) -> u64 {
        3 * (self.input_dim * self.hidden_dim + self.hidden_dim * self.hidden_dim) as u64
    }

    pub fn param_count(&self) -> usize {
        3 * (self.wz.len() + self.uz.len() + self.bz.len())
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view()
        .insert_axis(ndarray::Axis(1))
        .dot(&b.view().insert_axis(ndarray::Axis(0)))
}

impl Params for GruCell {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        visit_pair!(f, prefix, "wz", self.wz, self.gwz);
        visit_pair!(f, prefix, "wr", self.wr, self.gwr);
        visit_pair!(f, prefix, "wn", self.wn, self.gwn);
        visit_pair!(f, prefix, "uz", self.uz, self.guz);
        visit_pair!(f, prefix, "ur", self.ur, self.gur);
        visit_pair!(f, prefix, "un", self.un, self.gun);
        visit_pair!(f, prefix, "bz", self.bz, self.gbz);
        visit_pair!(f, prefix, "br", self.br, self.gbr);
        visit_pair!(f, prefix, "bn", self.bn, self.gbn);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn state_is_deterministic() {
        let mut rng = rng_from(0, "t");
        let gru = GruCell::new(4, 8, &mut rng);
        let x1 = Array1::from_elem(4, 0.3);
        let x2 = Array1::from_elem(4, -0.7);
        let run = || {
            let h0 = gru.init_state();
            let h1 = gru.step(&x1, &h0);
            gru.step(&x2, &h1)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn order_sensitivity() {
        // permuting two different inputs changes the final state
        let mut rng = rng_from(3, "t");
        let gru = GruCell::new(4, 8, &mut rng);
        let a = Array1::from_vec(vec![1.0, 0.0, -1.0, 0.5]);
        let b = Array1::from_vec(vec![-0.5, 2.0, 0.3, -1.0]);
        let h0 = gru.init_state();
        let hab = gru.step(&b, &gru.step(&a, &h0));
        let hba = gru.step(&a, &gru.step(&b, &h0));
        let diff: f64 = (&hab - &hba).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "GRU should be order sensitive, diff={diff}");
    }

    #[test]
    fn flops_formula() {
        let mut rng = rng_from(0, "t");
        let gru = GruCell::new(80, 64, &mut rng);
        assert_eq!(gru.flops(), 3 * (80 * 64 + 64 * 64));
    }
}
