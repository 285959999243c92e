use rand::Rng;

use crate::diff::{glorot_matrix, join, Result, Tape, Tensor, Trainable, Var};

/// `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`.
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Self {
            w: glorot_matrix(n_out, n_in, rng),
            b: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, prefix: Option<&str>) -> Result<BoundLinear<'t>> {
        let put = |name: &str, t: &Tensor| match prefix {
            Some(p) => tape.param(&join(p, name), t),
            None => Ok(tape.constant(t.clone())),
        };
        Ok(BoundLinear {
            w: put("w", &self.w)?,
            b: put("b", &self.b)?,
        })
    }

    /// Tape-free forward pass on `(batch, in)` rows.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let y = self.bind(&tape, None)?.apply(tape.constant(x.clone()))?;
        Ok(y.value())
    }
}

impl Trainable<f64> for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul_t(self.w)?.add_row(self.b)
    }
}

/// Gated recurrent cell:
/// `z = s(x Wz + h Uz)`, `r = s(x Wr + h Ur)`,
/// `n = tanh(x Wn + (r h) Un)`, `h' = (1 - z) n + z h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    pub input: Linear,
    /// Recurrent weights for the `z` and `r` gates, `(2 H, H)`, no bias.
    pub gates: Tensor,
    /// Recurrent weights for the candidate, `(H, H)`.
    pub cand: Tensor,
}

impl Gru {
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::glorot(n_in, 3 * hidden, rng),
            gates: glorot_matrix(2 * hidden, hidden, rng),
            cand: glorot_matrix(hidden, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.cand.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, prefix: Option<&str>) -> Result<BoundGru<'t>> {
        let put = |name: &str, t: &Tensor| match prefix {
            Some(p) => tape.param(&join(p, name), t),
            None => Ok(tape.constant(t.clone())),
        };
        let input_prefix = prefix.map(|p| join(p, "input"));
        Ok(BoundGru {
            input: self.input.bind(tape, input_prefix.as_deref())?,
            gates: put("gates", &self.gates)?,
            cand: put("cand", &self.cand)?,
            hidden: self.hidden(),
        })
    }
}

impl Trainable<f64> for Gru {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input.visit(&join(prefix, "input"), f);
        f(&join(prefix, "gates"), &self.gates);
        f(&join(prefix, "cand"), &self.cand);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        f(&join(prefix, "gates"), &mut self.gates);
        f(&join(prefix, "cand"), &mut self.cand);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru<'t> {
    input: BoundLinear<'t>,
    gates: Var<'t>,
    cand: Var<'t>,
    hidden: usize,
}

impl<'t> BoundGru<'t> {
    /// Runs the cell over `xs` (each `(batch, in)`) from a zero state and
    /// returns the final hidden state.
    pub fn run(&self, xs: &[Var<'t>]) -> Result<Var<'t>> {
        let hs = self.hidden;
        let b = xs[0].dims2().0;
        let tape = xs[0].tape();
        let mut h = tape.constant(Tensor::zeros(&[b, hs]));
        for &x in xs {
            let xi = self.input.apply(x)?;
            let hg = h.matmul_t(self.gates)?;
            let z = xi.cols(0, hs)?.add(hg.cols(0, hs)?)?.sigmoid()?;
            let r = xi.cols(hs, hs)?.add(hg.cols(hs, hs)?)?.sigmoid()?;
            let n = xi
                .cols(2 * hs, hs)?
                .add(r.mul(h)?.matmul_t(self.cand)?)?
                .tanh()?;
            // h' = n + z (h - n)
            h = n.add(z.mul(h.sub(n)?)?)?;
        }
        Ok(h)
    }
}
