//! One-hidden-layer perceptron with an analytic input-gradient layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::error::{DiffError, Result};
use super::tape::{Tape, Var};
use super::tensor::{matmul_raw, Tensor};
use super::{join, Trainable};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sin,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Tanh => x.tanh(),
            Self::Relu => x.max(T::zero()),
            Self::Sin => x.sin(),
        }
    }

    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Self::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::Sin => x.cos(),
        }
    }
}

/// `w2 * act(w1 * x + b1) + b2`, applied row-wise to a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct Mlp1<T: Scalar = f64> {
    /// hidden x in
    pub w1: Tensor<T>,
    /// hidden
    pub b1: Tensor<T>,
    /// out x hidden
    pub w2: Tensor<T>,
    /// out
    pub b2: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> Mlp1<T> {
    pub fn zeros(n_in: usize, hidden: usize, n_out: usize, activation: Activation) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, n_in]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[n_out, hidden]),
            b2: Tensor::zeros(&[n_out]),
            activation,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        n_in: usize,
        hidden: usize,
        n_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(n_in, hidden, n_out, activation);
        net.w1 = glorot_matrix(hidden, n_in, rng);
        net.w2 = glorot_matrix(n_out, hidden, rng);
        net
    }

    pub fn from_parts(
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
        activation: Activation,
    ) -> Result<Self> {
        let (h, n_in) = w1.dims2();
        let (n_out, h2) = w2.dims2();
        if w1.rank() != 2 || w2.rank() != 2 || h2 != h || b1.len() != h || b2.len() != n_out {
            return Err(DiffError::ShapeMismatch {
                op: "mlp",
                lhs: w1.shape().to_vec(),
                rhs: w2.shape().to_vec(),
            });
        }
        let _ = n_in;
        Ok(Self {
            w1,
            b1: b1.reshape(&[h])?,
            w2,
            b2: b2.reshape(&[n_out])?,
            activation,
        })
    }

    pub fn n_in(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.w2.shape()[0]
    }

    /// Puts the weights on `tape`, as named slots when `prefix` is given
    /// and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, prefix: Option<&str>) -> Result<BoundMlp1<'t, T>> {
        let put = |name: &str, t: &Tensor<T>| match prefix {
            Some(p) => tape.param(&join(p, name), t),
            None => Ok(tape.constant(t.clone())),
        };
        Ok(BoundMlp1 {
            w1: put("w1", &self.w1)?,
            b1: put("b1", &self.b1)?,
            w2: put("w2", &self.w2)?,
            b2: put("b2", &self.b2)?,
            activation: self.activation,
            n_in: self.n_in(),
            n_out: self.n_out(),
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let (b, n) = x.dims2();
        let n = if x.rank() == 1 { b } else { n };
        let b = if x.rank() == 1 { 1 } else { b };
        if n != self.n_in() {
            return Err(DiffError::ShapeMismatch {
                op: "mlp_value",
                lhs: x.shape().to_vec(),
                rhs: self.w1.shape().to_vec(),
            });
        }
        Ok((b, n))
    }

    fn hidden_pre(&self, x: &Tensor<T>, b: usize) -> Vec<T> {
        let h = self.hidden();
        let mut z = matmul_raw(
            x.data(),
            (b, self.n_in()),
            self.w1.data(),
            (h, self.n_in()),
            true,
        );
        for row in z.chunks_mut(h) {
            for (zi, bi) in row.iter_mut().zip(self.b1.data()) {
                *zi = *zi + *bi;
            }
        }
        z
    }

    /// Tape-free forward pass; a rank-1 `x` is one sample.
    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, _) = self.check_input(x)?;
        let h = self.hidden();
        let a: Vec<T> = self
            .hidden_pre(x, b)
            .into_iter()
            .map(|z| self.activation.apply(z))
            .collect();
        let mut y = matmul_raw(&a, (b, h), self.w2.data(), (self.n_out(), h), true);
        for row in y.chunks_mut(self.n_out()) {
            for (yi, bi) in row.iter_mut().zip(self.b2.data()) {
                *yi = *yi + *bi;
            }
        }
        Ok(Tensor::matrix(b, self.n_out(), y))
    }

    /// Tape-free gradient of a scalar-output net with respect to its input.
    pub fn eval_input_grad(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.n_out() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "mlp_input_grad",
                lhs: self.w2.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let (b, _) = self.check_input(x)?;
        let h = self.hidden();
        let mut g = self.hidden_pre(x, b);
        for row in g.chunks_mut(h) {
            for (gi, wi) in row.iter_mut().zip(self.w2.data()) {
                *gi = self.activation.derivative(*gi) * *wi;
            }
        }
        let out = matmul_raw(&g, (b, h), self.w1.data(), (h, self.n_in()), false);
        Ok(Tensor::matrix(b, self.n_in(), out))
    }
}

impl<T: Scalar> Trainable<T> for Mlp1<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

pub(crate) fn glorot_matrix<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| T::lit(rng.random_range(-limit..limit)))
}

/// An [`Mlp1`] whose weights live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundMlp1<'t, T: Scalar = f64> {
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
    pub activation: Activation,
    n_in: usize,
    n_out: usize,
}

impl<'t, T: Scalar> BoundMlp1<'t, T> {
    fn check(&self, x: Var<'t, T>, op: &'static str) -> Result<(usize, usize)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.n_in {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: shape,
                rhs: vec![self.n_in],
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn pre_activation(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul_t(self.w1)?.add_row(self.b1)
    }

    /// Batched forward pass; `x` is `(batch, n_in)`.
    pub fn value(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(x, "mlp_value")?;
        let z = self.pre_activation(x)?;
        let a = match self.activation {
            Activation::Tanh => z.tanh()?,
            Activation::Relu => z.relu()?,
            Activation::Sin => z.sin()?,
        };
        a.matmul_t(self.w2)?.add_row(self.b2)
    }

    /// `d value / d x` for a scalar-output net, as an ordinary tape
    /// expression `(act'(z) * w2) w1` so it can itself be differentiated.
    pub fn input_grad(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(x, "mlp_input_grad")?;
        if self.n_out != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "mlp_input_grad",
                lhs: vec![self.n_out],
                rhs: vec![1],
            });
        }
        let z = self.pre_activation(x)?;
        let slope = match self.activation {
            Activation::Tanh => {
                let t = z.tanh()?;
                t.square()?.neg()?.shift(T::one())?
            }
            Activation::Sin => z.cos()?,
            // piecewise constant, its own derivative vanishes a.e.
            Activation::Relu => {
                let step = z
                    .value_ref()
                    .map(|v| if v > T::zero() { T::one() } else { T::zero() });
                x.tape().constant(step)
            }
        };
        slope.mul_row(self.w2)?.matmul(self.w1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_unit_tanh() -> Mlp1 {
        Mlp1::from_parts(
            Tensor::matrix(1, 1, vec![1.0]),
            Tensor::vector(vec![0.0]),
            Tensor::matrix(1, 1, vec![1.0]),
            Tensor::vector(vec![0.0]),
            Activation::Tanh,
        )
        .unwrap()
    }

    #[test]
    fn zero_net_outputs_bias() {
        let mut net = Mlp1::<f64>::zeros(3, 4, 2, Activation::Tanh);
        net.b2 = Tensor::vector(vec![0.5, -1.5]);
        let tape = Tape::<f64>::new();
        let bound = net.bind(&tape, None).unwrap();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        assert_eq!(bound.value(x).unwrap().value().data(), &[0.5, -1.5]);
    }

    #[test]
    fn single_tanh_unit_by_hand() {
        let net = one_unit_tanh();
        let y = net.eval(&Tensor::vector(vec![0.5])).unwrap();
        assert!((y.data()[0] - 0.462117157).abs() < 1e-9);
    }

    #[test]
    fn sin_activation_bounded_by_output_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp1::<f64>::glorot(1, 30, 1, Activation::Sin, &mut rng);
        let bound: f64 = net.w2.data().iter().map(|w| w.abs()).sum();
        for i in 0..200 {
            let x = Tensor::vector(vec![(i as f64 - 100.0) * 0.37]);
            assert!(net.eval(&x).unwrap().data()[0].abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn constant_net_has_zero_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp1::<f64>::glorot(2, 8, 1, Activation::Tanh, &mut rng);
        net.w1 = Tensor::zeros(&[8, 2]);
        let g = net
            .eval_input_grad(&Tensor::vector(vec![0.3, -0.2]))
            .unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn input_grad_rejects_vector_output() {
        let net = Mlp1::<f64>::zeros(2, 3, 2, Activation::Tanh);
        assert!(net
            .eval_input_grad(&Tensor::vector(vec![0.0, 0.0]))
            .is_err());
        let tape = Tape::<f64>::new();
        let b = net.bind(&tape, None).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(b.input_grad(x).is_err());
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Tanh, Activation::Sin, Activation::Relu] {
            let mut net = Mlp1::<f64>::glorot(2, 16, 1, act, &mut rng);
            net.b1 = Tensor::from_fn(&[16], |i| 0.1 * i as f64 - 0.7);
            let x = Tensor::matrix(1, 2, vec![0.31, -0.47]);
            let tape = Tape::<f64>::new();
            let bound = net.bind(&tape, None).unwrap();
            let g = bound.input_grad(tape.constant(x.clone())).unwrap().value();
            let eps = 1e-6;
            for k in 0..2 {
                let mut xp = x.clone();
                xp.data_mut()[k] += eps;
                let mut xm = x.clone();
                xm.data_mut()[k] -= eps;
                let fd = (net.eval(&xp).unwrap().data()[0] - net.eval(&xm).unwrap().data()[0])
                    / (2.0 * eps);
                let rel = (fd - g.data()[k]).abs() / g.data()[k].abs().max(1e-3);
                assert!(rel < 1e-6, "{act:?} rel err {rel}");
            }
        }
    }

    #[test]
    fn fitted_quadratic_potential_has_linear_gradient() {
        // Fit U(q) = q^2 / 2 on [-1, 1] by least squares over the output layer
        // of a random tanh basis, then compare dU/dq with q.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 40;
        let mut net = Mlp1::<f64>::glorot(1, h, 1, Activation::Tanh, &mut rng);
        net.w1 = Tensor::from_fn(&[h, 1], |i| 0.5 + 2.5 * (i as f64) / h as f64);
        net.b1 = Tensor::from_fn(&[h], |i| -2.0 + 4.0 * (i as f64) / h as f64);
        let xs: Vec<f64> = (0..201).map(|i| -1.0 + 0.01 * i as f64).collect();
        // normal equations with a tiny ridge
        let feats: Vec<Vec<f64>> = xs
            .iter()
            .map(|&x| {
                let mut f: Vec<f64> = (0..h)
                    .map(|j| (net.w1.data()[j] * x + net.b1.data()[j]).tanh())
                    .collect();
                f.push(1.0);
                f
            })
            .collect();
        let p = h + 1;
        let mut a = vec![vec![0.0; p + 1]; p];
        for (f, &x) in feats.iter().zip(&xs) {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += f[i] * f[j];
                }
                a[i][p] += f[i] * 0.5 * x * x;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1e-10;
        }
        for c in 0..p {
            let piv = (c..p)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, piv);
            for r in 0..p {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=p {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..p).map(|i| a[i][p] / a[i][i]).collect();
        net.w2 = Tensor::matrix(1, h, coef[..h].to_vec());
        net.b2 = Tensor::vector(vec![coef[h]]);
        for q in [-0.8, -0.3, 0.0, 0.4, 0.9] {
            let g = net
                .eval_input_grad(&Tensor::vector(vec![q]))
                .unwrap()
                .data()[0];
            assert!((g - q).abs() < 1e-2, "grad at {q}: {g}");
        }
    }
}
