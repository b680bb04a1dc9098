//! Location encoder, image-side MLP and the image embedding record.

mod location;
mod mlp;

pub use location::{encode_location, LocationCache, LocationEncoderConfig, LocationEncoderParams};
pub use mlp::{mlp_backward, mlp_forward, Activation, Layer, MlpCache, MlpParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoCoordinate;
use crate::numkernel::l2_norm;

/// A precomputed visual feature vector, unit-normalized on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
    pub true_location: Option<GeoCoordinate>,
}

impl ImageEmbedding {
    pub fn new(id: impl Into<String>, mut vector: Vec<f64>, true_location: Option<GeoCoordinate>) -> Result<Self> {
        let id = id.into();
        if vector.is_empty() {
            return Err(Error::data(format!("image {id}: empty embedding")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("image {id}: non-finite embedding")));
        }
        let n = l2_norm(&vector);
        if n == 0.0 {
            return Err(Error::data(format!("image {id}: zero embedding")));
        }
        vector.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            id,
            vector,
            true_location,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}
