use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::geo::GeoCoordinate;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    ImageEmbeddings,
    ConceptSet,
    Gallery,
    Checkpoint,
}

/// JSON sidecar describing the rows of a GEMB file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: ManifestKind,
    /// Row identifiers; concept names for `concept_set`.
    pub ids: Vec<String>,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<Vec<f64>>,
    #[serde(default)]
    pub source: String,
    /// Encoder that produced the vectors, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl Manifest {
    pub fn new(kind: ManifestKind, ids: Vec<String>, dim: usize) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            kind,
            ids,
            dim,
            lat: None,
            lon: None,
            source: String::new(),
            model: None,
        }
    }

    pub fn with_locations(mut self, locs: &[GeoCoordinate]) -> Self {
        self.lat = Some(locs.iter().map(GeoCoordinate::lat).collect());
        self.lon = Some(locs.iter().map(GeoCoordinate::lon).collect());
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::data(format!(
                "manifest schema_version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::data(format!("duplicate manifest id {dup:?}")));
        }
        match (&self.lat, &self.lon) {
            (None, None) => {}
            (Some(lat), Some(lon)) => {
                if lat.len() != self.ids.len() || lon.len() != self.ids.len() {
                    return Err(Error::CountMismatch(format!(
                        "{} ids but {} lat / {} lon values",
                        self.ids.len(),
                        lat.len(),
                        lon.len()
                    )));
                }
            }
            _ => return Err(Error::data("manifest must carry both lat and lon or neither")),
        }
        Ok(())
    }

    pub fn check_matches(&self, rows: usize, dims: usize) -> Result<()> {
        self.validate()?;
        if self.ids.len() != rows {
            return Err(Error::CountMismatch(format!(
                "manifest lists {} ids but embedding file has {rows} rows",
                self.ids.len()
            )));
        }
        if self.dim != dims && rows > 0 {
            return Err(Error::CountMismatch(format!(
                "manifest dim {} but embedding file has {dims} columns",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn locations(&self) -> Result<Option<Vec<GeoCoordinate>>> {
        match (&self.lat, &self.lon) {
            (Some(lat), Some(lon)) => lat
                .iter()
                .zip(lon)
                .map(|(&a, &b)| GeoCoordinate::new(a, b).map_err(|e| Error::data(e.to_string())))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            _ => Ok(None),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        atomic_write(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let m = Manifest::new(ManifestKind::ConceptSet, vec!["mountain".into()], 3).with_source("test");
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["kind"], "concept_set");
        assert_eq!(v["schema_version"], 1);
        assert!(v.get("lat").is_none());
    }

    #[test]
    fn rejects_duplicates_and_partial_locations() {
        let m = Manifest::new(ManifestKind::ImageEmbeddings, vec!["a".into(), "a".into()], 3);
        assert!(m.validate().is_err());
        let mut m = Manifest::new(ManifestKind::ImageEmbeddings, vec!["a".into()], 3);
        m.lat = Some(vec![1.0]);
        assert!(m.validate().is_err());
        m.lon = Some(vec![2.0, 3.0]);
        assert!(m.validate().is_err());
        m.lon = Some(vec![2.0]);
        assert_eq!(
            m.locations().unwrap().unwrap()[0],
            GeoCoordinate::new(1.0, 2.0).unwrap()
        );
    }

    #[test]
    fn exporter_style_manifest_parses() {
        let text = r#"{"schema_version":1,"kind":"image_embeddings","ids":["x.jpg"],"dim":4,
                       "lat":[48.85],"lon":[2.35],"source":"clip export","model":"ViT-L/14"}"#;
        let m: Manifest = serde_json::from_str(text).unwrap();
        m.validate().unwrap();
        assert_eq!(m.model.as_deref(), Some("ViT-L/14"));
    }
}
