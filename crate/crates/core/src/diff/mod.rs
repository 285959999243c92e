//! Dense tensors, a first-order reverse-mode tape, one-hidden-layer
//! networks with an analytic input-gradient layer, and Adam.

mod adam;
mod error;
mod mlp;
mod tape;
mod tensor;

pub use adam::Adam;
pub use error::{DiffError, Result};
pub(crate) use mlp::glorot_matrix;
pub use mlp::{Activation, BoundMlp1, Mlp1};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

use crate::scalar::Scalar;

/// Joins a slot prefix and a local parameter name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A bundle of named parameter tensors.
///
/// Names produced by `visit` must match the slot names the model registers
/// on a tape, so gradients and optimizer state line up by name.
pub trait Trainable<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// Copies of every parameter, in visiting order.
    fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Overwrites parameters from a snapshot; errors on missing names or
    /// shape changes.
    fn restore(&mut self, snapshot: &[(String, Tensor<T>)]) -> Result<()> {
        let mut err = None;
        self.visit_mut(
            "",
            &mut |n, t| match snapshot.iter().find(|(m, _)| m == n) {
                Some((_, v)) if v.shape() == t.shape() => *t = v.clone(),
                Some((_, v)) => {
                    err.get_or_insert(DiffError::ShapeMismatch {
                        op: "restore",
                        lhs: t.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                None => {
                    err.get_or_insert(DiffError::Domain {
                        op: "restore",
                        detail: format!("missing parameter `{n}`"),
                    });
                }
            },
        );
        err.map_or(Ok(()), Err)
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}
