use std::collections::HashSet;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{sphere_grid, GeoCoordinate};
use crate::io::GalleryConfig;
use crate::losses::ContrastiveSpace;
use crate::numkernel::{normalize_in_place, Matrix};
use crate::params::ParamTensors;
use crate::trainer::ModelState;

/// SHA-256 over everything that changes what the model computes.
pub fn model_hash(model: &ModelState) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.model_config).expect("config serializes"));
    h.update(serde_json::to_vec(&model.train_config.loss).expect("config serializes"));
    for name in model.concepts.names() {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for &i in model.concepts.selected() {
        h.update((i as u64).to_le_bytes());
    }
    let mut feed = |vals: &[f64]| {
        for v in vals {
            h.update(v.to_le_bytes());
        }
    };
    feed(model.concepts.embeddings().data());
    for f in model.params.location.frequencies() {
        feed(f.data());
    }
    feed(&model.params.flatten());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoded candidate coordinates in the model's retrieval space, unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationGallery {
    coordinates: Vec<GeoCoordinate>,
    embeddings: Matrix,
    model_hash: String,
    space: ContrastiveSpace,
}

/// Drops repeated coordinates, keeping first occurrences in order.
pub fn dedup_coordinates(coords: &[GeoCoordinate]) -> Vec<GeoCoordinate> {
    let mut seen = HashSet::new();
    coords.iter().copied().filter(|c| seen.insert(c.key())).collect()
}

/// Training coordinates and/or a uniform grid, de-duplicated.
pub fn gallery_coordinates(training: &[GeoCoordinate], cfg: &GalleryConfig) -> Result<Vec<GeoCoordinate>> {
    let mut all = Vec::new();
    if cfg.include_training {
        all.extend_from_slice(training);
    }
    if let Some(deg) = cfg.grid_deg {
        all.extend(sphere_grid(deg)?);
    }
    Ok(dedup_coordinates(&all))
}

fn normalize_rows(m: &mut Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        if !(normalize_in_place(m.row_mut(r)) > 0.0) {
            return Err(Error::numeric(format!("{what} row {r} has zero norm")));
        }
    }
    Ok(())
}

/// Image-side vectors in the retrieval space: raw embeddings, or `z_img` in concept space.
pub(crate) fn query_space(model: &ModelState, x: &Matrix) -> Result<Matrix> {
    match model.train_config.loss.contrastive_space {
        ContrastiveSpace::Raw => Ok(x.clone()),
        ContrastiveSpace::Concept => model.image_concepts(x),
    }
}

pub fn build_gallery(model: &ModelState, coords: &[GeoCoordinate]) -> Result<LocationGallery> {
    if coords.is_empty() {
        return Err(Error::usage("gallery needs at least one coordinate"));
    }
    let coordinates = dedup_coordinates(coords);
    let space = model.train_config.loss.contrastive_space;
    let mut embeddings = match space {
        ContrastiveSpace::Raw => model.encode_locations(&coordinates)?,
        ContrastiveSpace::Concept => model.location_concepts(&coordinates)?,
    };
    normalize_rows(&mut embeddings, "gallery")?;
    Ok(LocationGallery {
        coordinates,
        embeddings,
        model_hash: model_hash(model),
        space,
    })
}

impl LocationGallery {
    pub fn coordinates(&self) -> &[GeoCoordinate] {
        &self.coordinates
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn space(&self) -> ContrastiveSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn is_current(&self, model: &ModelState) -> bool {
        self.model_hash == model_hash(model)
    }

    /// Re-encodes the same coordinates when the model has changed.
    pub fn refreshed(self, model: &ModelState) -> Result<Self> {
        if self.is_current(model) {
            Ok(self)
        } else {
            build_gallery(model, &self.coordinates)
        }
    }

    /// Gallery from explicit unit rows, for callers that already hold embeddings.
    pub fn from_parts(
        coordinates: Vec<GeoCoordinate>,
        mut embeddings: Matrix,
        model_hash: String,
        space: ContrastiveSpace,
    ) -> Result<Self> {
        if coordinates.len() != embeddings.rows() || coordinates.is_empty() {
            return Err(Error::CountMismatch(format!(
                "{} gallery coordinates but {} embedding rows",
                coordinates.len(),
                embeddings.rows()
            )));
        }
        normalize_rows(&mut embeddings, "gallery")?;
        Ok(Self {
            coordinates,
            embeddings,
            model_hash,
            space,
        })
    }
}
