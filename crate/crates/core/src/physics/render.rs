//! 28x28 Gaussian-blob renderer.

use super::system::{SystemKind, SystemSpec};
use crate::diff::Tensor;

pub const FRAME_SIDE: usize = 28;
pub const FRAME_PIXELS: usize = FRAME_SIDE * FRAME_SIDE;

const CENTER: f64 = 13.5;
const PENDULUM_SCALE: f64 = 10.0;
/// Keeps the amplitude of a unit-energy spring (sqrt 2) at least 3 px
/// from the border: 13.5 + 7 * 1.414 = 23.4 <= 24.
const SPRING_SCALE: f64 = 7.0;
const BLOB_SIGMA: f64 = 2.0;

/// Image-plane position `(column, row)` of the rendered object.
pub fn object_position(spec: &SystemSpec, q: f64) -> (f64, f64) {
    match spec.kind {
        SystemKind::Pendulum => (
            CENTER + PENDULUM_SCALE * q.sin(),
            CENTER + PENDULUM_SCALE * q.cos(),
        ),
        SystemKind::MassSpring => (CENTER + SPRING_SCALE * q, CENTER),
    }
}

/// Renders a unit-peak isotropic Gaussian blob at the object position,
/// rows first. Intensities lie in `[0, 1]`.
pub fn render_frame(spec: &SystemSpec, q: f64) -> Tensor {
    let (cx, cy) = object_position(spec, q);
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    Tensor::from_fn(&[FRAME_SIDE, FRAME_SIDE], |k| {
        let (row, col) = ((k / FRAME_SIDE) as f64, (k % FRAME_SIDE) as f64);
        (-((col - cx).powi(2) + (row - cy).powi(2)) * inv).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn l2(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn pendulum_at_rest_hangs_down() {
        let f = render_frame(&SystemSpec::pendulum(), 0.0);
        let (idx, _) = f
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let (row, col) = (idx / FRAME_SIDE, idx % FRAME_SIDE);
        assert!(row >= 20, "row {row}");
        assert!((13..=14).contains(&col), "col {col}");
        assert!(f.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn total_intensity_is_translation_invariant() {
        for spec in [SystemSpec::pendulum(), SystemSpec::mass_spring()] {
            let reference = 2.0 * PI * BLOB_SIGMA * BLOB_SIGMA;
            for i in 0..64 {
                let q = -1.4 + 2.8 * i as f64 / 63.0;
                let (c, r) = object_position(&spec, q);
                let margin = c.min(r).min(27.0 - c).min(27.0 - r);
                if margin < 5.0 {
                    // clipped by the border
                    continue;
                }
                let total = render_frame(&spec, q).sum();
                assert!(
                    (total - reference).abs() / reference < 0.01,
                    "q={q} total={total}"
                );
            }
        }
    }

    #[test]
    fn opposite_angles_are_farthest_apart() {
        let spec = SystemSpec::pendulum();
        let qs: Vec<f64> = (0..24).map(|i| i as f64 * PI / 12.0).collect();
        let frames: Vec<Tensor> = qs.iter().map(|&q| render_frame(&spec, q)).collect();
        let mut max = 0.0f64;
        for a in &frames {
            for b in &frames {
                max = max.max(l2(a, b));
            }
        }
        // the blob near the top edge loses a little mass to clipping
        for i in 0..12 {
            let d = l2(&frames[i], &frames[i + 12]);
            assert!(d >= max * 0.99, "pair {i}: {d} vs {max}");
        }
    }

    #[test]
    fn distinct_angles_give_distinct_frames() {
        for spec in [SystemSpec::pendulum(), SystemSpec::mass_spring()] {
            let qs: Vec<f64> = (0..30).map(|i| -1.5 + 0.1 * i as f64).collect();
            for (i, &a) in qs.iter().enumerate() {
                for &b in &qs[i + 1..] {
                    let d = l2(&render_frame(&spec, a), &render_frame(&spec, b));
                    assert!(d > 0.0);
                }
            }
        }
    }

    #[test]
    fn spring_stays_away_from_border() {
        let spec = SystemSpec::mass_spring();
        let amp = 2.0f64.sqrt();
        for q in [-amp, amp] {
            let (c, _) = object_position(&spec, q);
            assert!(c >= 3.0 && c <= (FRAME_SIDE - 1) as f64 - 3.0);
        }
    }
}
