mod common;

use common::{elbo_gradient_error, statespace_gradient_error};
use vin_core::models::ModelKind;
use vin_core::physics::SystemSpec;
use vin_core::pixelvae::PixelKind;

#[test]
fn statespace_losses_match_finite_differences() {
    for system in [SystemSpec::pendulum(), SystemSpec::mass_spring()] {
        for kind in ModelKind::ALL {
            let (err, at) = statespace_gradient_error(kind, system);
            assert!(err < 1e-4, "{kind} on {:?}: {err:e} at {at}", system.kind);
        }
    }
}

#[test]
fn pixel_bound_matches_finite_differences() {
    let kinds = [
        PixelKind::Dynamics(ModelKind::VinSv),
        PixelKind::Dynamics(ModelKind::VinVv),
        PixelKind::Dynamics(ModelKind::VinSo2),
        PixelKind::Dynamics(ModelKind::ResRnn),
        PixelKind::Vae2d,
    ];
    for system in [SystemSpec::pendulum(), SystemSpec::mass_spring()] {
        for kind in kinds {
            let (err, at) = elbo_gradient_error(kind, system);
            assert!(err < 1e-3, "{kind} on {:?}: {err:e} at {at}", system.kind);
        }
    }
}
