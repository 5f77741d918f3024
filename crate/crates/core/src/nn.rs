//! Fully connected networks evaluated on the tape, with optional forward
//! propagation of input tangents (for spatial derivatives of a network field).

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Silu,
}

impl Activation {
    fn apply<'t>(self, h: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => h,
            Activation::Tanh => h.tanh(),
            Activation::Sigmoid => h.sigmoid(),
            Activation::Silu => h.silu(),
        }
    }

    /// Derivative at pre-activation `h` given the output `a = f(h)`.
    fn derivative<'t>(self, h: Var<'t>, a: Var<'t>) -> Option<Var<'t>> {
        match self {
            Activation::Identity => None,
            Activation::Tanh => Some(-a.square().offset(-1.0)),
            Activation::Sigmoid => Some(a * (-a).offset(1.0)),
            Activation::Silu => {
                let s = h.sigmoid();
                Some(s * (h * (-s).offset(1.0)).offset(1.0))
            }
        }
    }

    fn apply_f64(self, h: f64) -> f64 {
        match self {
            Activation::Identity => h,
            Activation::Tanh => h.tanh(),
            Activation::Sigmoid => crate::autodiff::sigmoid(h),
            Activation::Silu => h * crate::autodiff::sigmoid(h),
        }
    }
}

/// Dense layers `a_{k+1} = f(a_k W_k + b_k)`, inputs one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `in x out` per layer.
    pub weights: Vec<Tensor>,
    /// `1 x out` per layer.
    pub biases: Vec<Tensor>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Network parameters registered on a tape.
#[derive(Clone)]
pub struct MlpVars<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

impl Mlp {
    /// Layer sizes `[in, hidden..., out]`, uniform fan-in scaled init.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push(Tensor::from_fn(w[0], w[1], |_, _| dist.sample(rng)));
            biases.push(Tensor::from_fn(1, w[1], |_, _| dist.sample(rng)));
        }
        Ok(Self {
            weights,
            biases,
            hidden,
            output,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn n_outputs(&self) -> usize {
        self.weights.last().map_or(0, Tensor::cols)
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(&self.biases).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> MlpVars<'t> {
        let reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        MlpVars {
            weights: self.weights.iter().map(reg).collect(),
            biases: self.biases.iter().map(reg).collect(),
        }
    }

    /// Plain evaluation, `x` is `batch x in`.
    pub fn forward_f64(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = x.clone();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = a.matmul(w)?;
            let f = self.activation(k);
            let cols = h.cols();
            for (i, v) in h.data_mut().iter_mut().enumerate() {
                *v = f.apply_f64(*v + b.data()[i % cols]);
            }
            a = h;
        }
        Ok(a)
    }

    pub fn forward<'t>(&self, vars: &MlpVars<'t>, x: Var<'t>) -> Var<'t> {
        let mut a = x;
        for k in 0..self.n_layers() {
            a = self.activation(k).apply(a.matmul(vars.weights[k]) + vars.biases[k]);
        }
        a
    }

    /// Output and its derivatives with respect to each input coordinate, by
    /// forward propagation of unit tangents; every step is a tape op, so the
    /// derivatives remain differentiable in the weights.
    pub fn forward_with_input_tangents<'t>(&self, vars: &MlpVars<'t>, x: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let n_in = self.n_inputs();
        let mut a = x;
        let mut da: Vec<Var<'t>> = Vec::new();
        for k in 0..self.n_layers() {
            let h = a.matmul(vars.weights[k]) + vars.biases[k];
            let dh: Vec<Var<'t>> = if k == 0 {
                // d(x W)/dx_j is row j of W, broadcast over the batch
                (0..n_in).map(|j| vars.weights[0].gather_rows(&[j])).collect()
            } else {
                da.iter().map(|d| d.matmul(vars.weights[k])).collect()
            };
            let f = self.activation(k);
            let out = f.apply(h);
            da = match f.derivative(h, out) {
                Some(fp) => dh.into_iter().map(|d| fp * d).collect(),
                None => dh,
            };
            a = out;
        }
        (a, da)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(hidden: Activation, output: Activation) -> Mlp {
        Mlp::new(&[2, 7, 5, 3], hidden, output, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn inputs() -> Tensor {
        Tensor::from_fn(6, 2, |i, j| (i as f64 * 0.13 + j as f64 * 0.41).sin())
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Silu, Activation::Identity] {
            let m = net(act, Activation::Sigmoid);
            let tape = Tape::new();
            let vars = m.register(&tape, false);
            let y = m.forward(&vars, tape.constant(inputs())).value();
            let z = m.forward_f64(&inputs()).unwrap();
            for (a, b) in y.data().iter().zip(z.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn input_tangents_match_finite_differences() {
        for (h, o) in [
            (Activation::Tanh, Activation::Sigmoid),
            (Activation::Silu, Activation::Identity),
        ] {
            let m = net(h, o);
            let tape = Tape::new();
            let vars = m.register(&tape, false);
            let (_, d) = m.forward_with_input_tangents(&vars, tape.constant(inputs()));
            let eps = 1e-6;
            for j in 0..2 {
                let shifted = |sign: f64| {
                    let mut x = inputs();
                    for i in 0..x.rows() {
                        x.set(i, j, x.get(i, j) + sign * eps);
                    }
                    m.forward_f64(&x).unwrap()
                };
                let (p, q) = (shifted(1.0), shifted(-1.0));
                let dj = d[j].value();
                assert_eq!(dj.shape(), p.shape());
                for k in 0..p.len() {
                    let fd = (p.data()[k] - q.data()[k]) / (2.0 * eps);
                    assert!((fd - dj.data()[k]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn init_is_seeded_and_fan_in_bounded() {
        let a = net(Activation::Tanh, Activation::Identity);
        let b = net(Activation::Tanh, Activation::Identity);
        assert_eq!(a, b);
        assert_eq!(a.n_params(), 2 * 7 + 7 + 7 * 5 + 5 + 5 * 3 + 3);
        let bound = 1.0 / 7f64.sqrt();
        assert!(a.weights[1].data().iter().all(|w| w.abs() <= bound));
    }
}
