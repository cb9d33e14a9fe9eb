use serde::{Deserialize, Serialize};

use crate::analytics::sigma_of;
use crate::error::{ensure, Result};

/// Penalty strength, interaction radius, offspring law and horizon.
///
/// `sigma` is derived from `(lambda, epsilon)` and cached. When a model is
/// specified by `sigma` alone, `epsilon` is set to 1 and `lambda` to the
/// unique value with `sech(sqrt(2 lambda)) = sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    lambda: f64,
    epsilon: f64,
    p0: f64,
    horizon_t: f64,
    sigma: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, epsilon: f64, p0: f64, horizon_t: f64) -> Result<Self> {
        let sigma = sigma_of(lambda, epsilon)?;
        Self::checked(lambda, epsilon, p0, horizon_t, sigma)
    }

    pub fn from_sigma(sigma: f64, p0: f64, horizon_t: f64) -> Result<Self> {
        ensure(sigma > 0.0 && sigma <= 1.0, || format!("sigma must lie in (0, 1], got {sigma}"))?;
        let lambda = 0.5 * (1.0 / sigma).acosh().powi(2);
        Self::checked(lambda, 1.0, p0, horizon_t, sigma)
    }

    fn checked(lambda: f64, epsilon: f64, p0: f64, horizon_t: f64, sigma: f64) -> Result<Self> {
        ensure((0.0..1.0).contains(&p0), || format!("p0 must lie in [0, 1), got {p0}"))?;
        ensure(horizon_t > 0.0 && horizon_t.is_finite(), || {
            format!("horizon must be positive and finite, got {horizon_t}")
        })?;
        Ok(ModelParams { lambda, epsilon, p0, horizon_t, sigma })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn p0(&self) -> f64 {
        self.p0
    }
    pub fn p2(&self) -> f64 {
        1.0 - self.p0
    }
    pub fn horizon(&self) -> f64 {
        self.horizon_t
    }

    pub fn with_horizon(mut self, t: f64) -> Result<Self> {
        ensure(t > 0.0 && t.is_finite(), || format!("horizon must be positive, got {t}"))?;
        self.horizon_t = t;
        Ok(self)
    }
}
