//! Reference first- and second-order correlation functions of single-mode
//! light states.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::vcz::sinc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Incoherent,
    Coherent,
    Thermal,
    Entangled,
}

/// A light state with the parameters its correlation functions depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightStateModel {
    pub state: LightState,
    /// Angular width of the source in rad.
    pub angular_width: f64,
    pub wavelength: f64,
    pub coherence_time: f64,
}

impl LightStateModel {
    pub fn new(state: LightState, angular_width: f64, wavelength: f64, coherence_time: f64) -> Self {
        LightStateModel {
            state,
            angular_width,
            wavelength,
            coherence_time,
        }
    }

    fn spatial(&self, x: f64) -> f64 {
        sinc(PI * self.angular_width * x / self.wavelength)
    }

    fn temporal(&self, tau: f64) -> f64 {
        (-PI * tau * tau / (self.coherence_time * self.coherence_time)).exp()
    }
}

/// First-order correlation at baseline `x` and delay `tau`.
pub fn table1_g1(model: &LightStateModel, x: f64, tau: f64) -> f64 {
    match model.state {
        LightState::Incoherent | LightState::Entangled => 0.0,
        LightState::Coherent => 1.0,
        LightState::Thermal => model.spatial(x) * model.temporal(tau).sqrt(),
    }
}

/// Second-order correlation at baseline `x` and delay `tau`.
pub fn table1_g2(model: &LightStateModel, x: f64, tau: f64) -> f64 {
    match model.state {
        LightState::Incoherent | LightState::Coherent => 1.0,
        LightState::Thermal => {
            let s = model.spatial(x);
            1.0 + s * s * model.temporal(tau)
        }
        LightState::Entangled => {
            let s = model.spatial(x);
            s * s * model.temporal(tau)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(state: LightState) -> LightStateModel {
        LightStateModel::new(state, 1e-3, 500e-9, 1e-12)
    }

    #[test]
    fn reference_values() {
        assert_eq!(table1_g2(&m(LightState::Thermal), 0.0, 0.0), 2.0);
        assert_eq!(table1_g1(&m(LightState::Thermal), 0.0, 0.0), 1.0);
        assert_eq!(table1_g2(&m(LightState::Entangled), 0.0, 0.0), 1.0);
        for (x, t) in [(0.0, 0.0), (1e-3, 5e-12), (0.2, -1e-9)] {
            assert_eq!(table1_g1(&m(LightState::Coherent), x, t), 1.0);
            assert_eq!(table1_g2(&m(LightState::Coherent), x, t), 1.0);
            assert_eq!(table1_g1(&m(LightState::Incoherent), x, t), 0.0);
            assert_eq!(table1_g2(&m(LightState::Incoherent), x, t), 1.0);
        }
        // theta x / lambda = 1 puts the spatial factor on its first zero.
        let th = m(LightState::Thermal);
        let x = th.wavelength / th.angular_width;
        assert!((table1_g2(&th, x, 0.0) - 1.0).abs() < 1e-15);
        // |g1|^2 relation between the thermal columns.
        let (x, t) = (1.3e-4, 0.7e-12);
        let g1 = table1_g1(&th, x, t);
        assert!((table1_g2(&th, x, t) - 1.0 - g1 * g1).abs() < 1e-15);
    }
}
