//! The full parameter set of the joint model.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::confounder::ConfounderParams;
use crate::error::Result;
use crate::mediator::{MediatorParams, RandomEffectsLaw};
use crate::survival::SurvivalParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mediator: MediatorParams,
    pub survival: SurvivalParams,
    pub confounder: ConfounderParams,
    /// Row-major random-effect covariance.
    pub re_covariance: [[f64; 4]; 4],
}

impl ModelParams {
    pub fn re_law(&self) -> Result<RandomEffectsLaw> {
        RandomEffectsLaw::new(Matrix4::from_fn(|i, j| self.re_covariance[i][j]))
    }

    pub fn w_dim(&self) -> usize {
        self.mediator.beta2.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.mediator.validate()?;
        self.survival.validate()?;
        self.re_law()?;
        let w = self.w_dim();
        if self.survival.gamma3.len() != w || self.confounder.w_dim() != w {
            return Err(crate::error::Error::invalid("covariate dimensions differ between model parts"));
        }
        Ok(())
    }
}
