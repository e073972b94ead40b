//! Gradient-flow laboratory for the focus/dilution training stages of a
//! one-layer transformer trained on first-order Markov data.
//!
//! Population objects (proxy attention, output law, exact gradients) live in
//! [`population`]; [`flow`] integrates the gradient flow they define, and
//! [`critical`], [`reduced`] and [`perturbation`] construct and analyse the
//! stationary points visited along the way.

pub mod analysis;
pub mod cli;
pub mod critical;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod markov;
pub mod model;
pub mod perturbation;
pub mod population;
pub mod reduced;
pub mod rng;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use markov::{build_stationary, build_transition, Dataset, MarkovSpec, StationaryDistribution};
pub use model::{ModelParams, ParamGradient};
pub use population::PopulationState;
pub use trajectory::{Metrics, Trajectory};

/// Serialize a dense matrix as a list of rows.
pub(crate) mod serde_mat {
    use crate::linalg::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> Result<Mat, String> {
        let r = rows.len();
        let c = rows.first().map_or(ncols_if_empty, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err("ragged matrix rows".into());
        }
        Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows, 0).map_err(serde::de::Error::custom)
    }
}
