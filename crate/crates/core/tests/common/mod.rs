//! Shared helpers for the integration targets.
#![allow(dead_code)]

use vin_core::diff::{Gradients, Tensor, Trainable, Var};
use vin_core::models::ModelKind;
use vin_core::physics::{make_pixel_dataset, make_state_dataset, PixelDataConfig, StateDataConfig, SystemSpec};
use vin_core::pixelvae::{stack_windows, PixelHyper, PixelKind, PixelModel};
use vin_core::statespace::{initial_fit, StateHyper, StateObjective};
use vin_core::diff::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst relative error between tape gradients and central differences
/// over up to `per_tensor` evenly spaced entries of every parameter.
///
/// The difference step is `step * max(1, |x|)`. Entries where both values
/// are below `floor` in magnitude are compared against `floor` instead, so
/// that exact zeros do not divide by zero.
pub fn max_relative_error<M: Trainable<f64>>(
    model: &mut M,
    value: impl Fn(&M) -> f64,
    grads: &Gradients,
    per_tensor: usize,
    step: f64,
    floor: f64,
) -> (f64, String) {
    let snap = model.snapshot();
    let mut worst = (0.0, String::new());
    for (name, tensor) in &snap {
        let Some(g) = grads.get(name) else { continue };
        let n = tensor.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|k| k * n / per_tensor + (k * 7) % (n / per_tensor)).collect()
        };
        for i in picks {
            let x = tensor.data()[i];
            let d = step * x.abs().max(1.0);
            let eval_at = |model: &mut M, v: f64| {
                model.visit_mut("", &mut |nm, t| {
                    if nm == name {
                        t.data_mut()[i] = v;
                    }
                });
                value(model)
            };
            // five-point stencil: truncation O(d^4)
            let f1 = eval_at(model, x + d) - eval_at(model, x - d);
            let f2 = eval_at(model, x + 2.0 * d) - eval_at(model, x - 2.0 * d);
            eval_at(model, x);
            let fd = (8.0 * f1 - f2) / (12.0 * d);
            let a = g.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] tape {a:e} fd {fd:e}"));
            }
        }
    }
    worst
}

/// Worst gradient error of the state-space loss for `kind` at width 16.
pub fn statespace_gradient_error(kind: ModelKind, system: SystemSpec) -> (f64, String) {
    let ds = make_state_dataset(&system, &StateDataConfig::new(&system, 3, 17)).unwrap();
    let hyper = StateHyper { hidden: 16, seed: 5, ..Default::default() };
    let mut fit = initial_fit(&ds, kind, &hyper).unwrap();
    let obj = StateObjective::new(kind, &system, &ds.trajectories).unwrap();
    let tape = Tape::new();
    let loss = obj.loss(&tape, &fit).unwrap();
    let grads = tape.backward(loss).unwrap();
    let value = |f: &_| {
        let t = Tape::new();
        obj.loss(&t, f).unwrap().item()
    };
    max_relative_error(&mut fit, value, &grads, 12, 1e-5, 1e-6)
}

/// Worst gradient error of the negative bound with a fixed noise draw at
/// width 16.
pub fn elbo_gradient_error(kind: PixelKind, system: SystemSpec) -> (f64, String) {
    let ds = make_pixel_dataset(&system, &PixelDataConfig::new(&system, 2.0, 3)).unwrap();
    let hyper = PixelHyper { width: 16, gru_hidden: 8, ..Default::default() };
    let mut model = PixelModel::new(kind, &hyper, &mut ChaCha8Rng::seed_from_u64(9));
    // The dynamics output layer starts at zero, which would hide the
    // gradients of the layer below it. The encoder head is shrunk so the
    // SO(2) increment sits away from asin's singularity, where central
    // differences stop being a usable oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    model.visit_mut("", &mut |name, t| {
        if name.starts_with("dyn.") && (name.ends_with("w2") || name.ends_with("b2")) {
            for v in t.data_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.3..0.3);
            }
        }
        if name.starts_with("enc.head") {
            for v in t.data_mut() {
                *v *= 0.1;
            }
        }
    });
    let len = if model.is_sequence() { 10 } else { 1 };
    let starts = [0usize, 4, 9];
    let y = stack_windows(&ds.frames, &starts, len).unwrap();
    let eps = Tensor::matrix(3, 2, vec![0.3, -1.1, 0.8, 0.2, -0.5, 1.4]);
    fn neg_elbo<'t>(m: &PixelModel, tape: &'t Tape, slots: bool, y: &Tensor, eps: &Tensor, len: usize) -> Var<'t> {
        let b = m.bind(tape, slots).unwrap();
        let e = b
            .terms(tape.constant(y.clone()), len, tape.constant(eps.clone()))
            .unwrap()
            .elbo()
            .unwrap();
        e.neg().unwrap()
    }
    let tape = Tape::new();
    let loss = neg_elbo(&model, &tape, true, &y, &eps, len);
    let grads = tape.backward(loss).unwrap();
    let value = |m: &PixelModel| {
        let t = Tape::new();
        neg_elbo(m, &t, false, &y, &eps, len).item()
    };
    // the summed bound is O(1e4), so a 1e-5 step leaves ~1e-7 roundoff
    max_relative_error(&mut model, value, &grads, 6, 1e-4, 1e-4)
}
