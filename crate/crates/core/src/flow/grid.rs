use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Uniform,
    Custom,
}

/// Timesteps `0 = t_0 < t_1 < … < t_N = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t: Vec<f64>,
    schedule: Schedule,
}

impl TimeGrid {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("time grid needs at least one step".into()));
        }
        let mut t: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        t[n] = 1.0;
        Ok(Self {
            t,
            schedule: Schedule::Uniform,
        })
    }

    pub fn custom(t: Vec<f64>) -> Result<Self> {
        if t.len() < 2 {
            return Err(Error::Input("time grid needs at least two points".into()));
        }
        if t[0] != 0.0 || *t.last().unwrap() != 1.0 {
            return Err(Error::Input("time grid must start at 0 and end at 1".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("time grid must be strictly increasing".into()));
        }
        Ok(Self {
            t,
            schedule: Schedule::Custom,
        })
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.t.len() - 1
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_invariants() {
        for n in [1, 3, 30, 60] {
            let g = TimeGrid::uniform(n).unwrap();
            assert_eq!(g.times().len(), n + 1);
            assert_eq!(g.t(0), 0.0);
            assert_eq!(g.t(n), 1.0);
            assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn custom_grid_validation() {
        assert!(TimeGrid::custom(vec![0.0, 0.3, 1.0]).is_ok());
        assert!(TimeGrid::custom(vec![0.0, 0.3, 0.3, 1.0]).is_err());
        assert!(TimeGrid::custom(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::custom(vec![0.0, 0.9]).is_err());
        assert!(TimeGrid::uniform(0).is_err());
    }
}
