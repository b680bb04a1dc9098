//! Retrieval over a location gallery, threshold evaluation and downstream probes.

mod gallery;
mod probe;

pub use gallery::{build_gallery, dedup_coordinates, gallery_coordinates, model_hash, LocationGallery};
pub use probe::{
    fuse_features, probe_classification, probe_regression, MetricKind, ProbeConfig, ProbeHyper, ProbeResult,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::{haversine_km, threshold_accuracy, GeoCoordinate, ThresholdSpec};
use crate::io::{fmt_f64, CsvTable};
use crate::numkernel::{dot, normalize_in_place, Matrix};
use crate::trainer::ModelState;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub coordinate: GeoCoordinate,
    pub gallery_index: usize,
    /// Cosine similarity, in `[-1, 1]`.
    pub similarity: f64,
    pub error_km: Option<f64>,
}

/// A model paired with a gallery built from it.
pub struct Retriever<'a> {
    model: &'a ModelState,
    gallery: &'a LocationGallery,
}

impl<'a> Retriever<'a> {
    pub fn new(model: &'a ModelState, gallery: &'a LocationGallery) -> Result<Self> {
        if !gallery.is_current(model) {
            return Err(Error::data("gallery was built from a different model; rebuild it"));
        }
        Ok(Self { model, gallery })
    }

    /// Maps every view into the retrieval space, averages, normalizes.
    pub fn query(&self, views: &[Vec<f64>]) -> Result<Vec<f64>> {
        if views.is_empty() {
            return Err(Error::usage("prediction needs at least one view"));
        }
        let d = self.model.embed_dim();
        if let Some(v) = views.iter().find(|v| v.len() != d) {
            return Err(Error::Shape {
                op: "predict view",
                left: (1, v.len()),
                right: (1, d),
            });
        }
        let x = Matrix::new(views.len(), d, views.concat())?;
        let mapped = gallery::query_space(self.model, &x)?;
        let mut q = vec![0.0; mapped.cols()];
        for row in mapped.iter_rows() {
            for (a, b) in q.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = 1.0 / views.len() as f64;
        q.iter_mut().for_each(|v| *v *= inv);
        if !(normalize_in_place(&mut q) > 0.0) {
            return Err(Error::numeric("query vector has zero norm"));
        }
        Ok(q)
    }

    pub fn predict(&self, views: &[Vec<f64>]) -> Result<Prediction> {
        let q = self.query(views)?;
        Ok(nearest(self.gallery, &q))
    }
}

/// Highest cosine row; the lowest index wins ties.
pub fn nearest(gallery: &LocationGallery, unit_query: &[f64]) -> Prediction {
    let g = gallery.embeddings();
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for r in 0..g.rows() {
        let s = dot(g.row(r), unit_query);
        if s > best_sim {
            best_sim = s;
            best = r;
        }
    }
    Prediction {
        coordinate: gallery.coordinates()[best],
        gallery_index: best,
        similarity: best_sim.clamp(-1.0, 1.0),
        error_km: None,
    }
}

pub fn predict(model: &ModelState, gallery: &LocationGallery, views: &[Vec<f64>]) -> Result<Prediction> {
    Retriever::new(model, gallery)?.predict(views)
}

/// One query image: its views and, for evaluation, its true location.
#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub id: String,
    pub views: Vec<Vec<f64>>,
    pub truth: GeoCoordinate,
}

impl TestItem {
    /// Groups consecutive rows into items of `views` rows each; each group takes the id and
    /// location of its first row.
    pub fn group(ids: &[String], x: &Matrix, truths: &[GeoCoordinate], views: usize) -> Result<Vec<TestItem>> {
        if views == 0 {
            return Err(Error::usage("views must be at least 1"));
        }
        if x.rows() != ids.len() || truths.len() != ids.len() {
            return Err(Error::CountMismatch(format!(
                "{} ids, {} rows, {} locations",
                ids.len(),
                x.rows(),
                truths.len()
            )));
        }
        if !x.rows().is_multiple_of(views) {
            return Err(Error::data(format!(
                "{} rows do not split into groups of {views} views",
                x.rows()
            )));
        }
        Ok((0..x.rows() / views)
            .map(|g| TestItem {
                id: ids[g * views].clone(),
                views: (g * views..(g + 1) * views).map(|r| x.row(r).to_vec()).collect(),
                truth: truths[g * views],
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub truth: GeoCoordinate,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: ThresholdSpec,
    pub fractions: Vec<f64>,
    pub items: Vec<EvalItem>,
}

impl EvalReport {
    pub fn errors_km(&self) -> Vec<f64> {
        self.items
            .iter()
            .map(|i| i.prediction.error_km.expect("set by evaluate"))
            .collect()
    }

    pub fn summary_table(&self, baseline: Option<&[f64]>) -> CsvTable {
        let mut header = vec!["threshold_km", "accuracy"];
        if baseline.is_some() {
            header.push("random_baseline");
        }
        let mut t = CsvTable::new(header);
        for (i, (th, f)) in self.thresholds.thresholds().iter().zip(&self.fractions).enumerate() {
            let mut row = vec![fmt_f64(*th), fmt_f64(*f)];
            if let Some(b) = baseline {
                row.push(fmt_f64(b[i]));
            }
            t.push(row);
        }
        t
    }

    pub fn items_table(&self) -> CsvTable {
        let mut t = CsvTable::new([
            "id",
            "true_lat",
            "true_lon",
            "pred_lat",
            "pred_lon",
            "error_km",
            "similarity",
        ]);
        for it in &self.items {
            let p = &it.prediction;
            t.push([
                it.id.clone(),
                fmt_f64(it.truth.lat()),
                fmt_f64(it.truth.lon()),
                fmt_f64(p.coordinate.lat()),
                fmt_f64(p.coordinate.lon()),
                fmt_f64(p.error_km.unwrap_or(f64::NAN)),
                fmt_f64(p.similarity),
            ]);
        }
        t
    }

    pub fn write_csv(&self, summary: &Path, items: &Path, baseline: Option<&[f64]>) -> Result<()> {
        self.summary_table(baseline).write(summary)?;
        self.items_table().write(items)
    }
}

pub fn evaluate(
    model: &ModelState,
    gallery: &LocationGallery,
    test: &[TestItem],
    spec: &ThresholdSpec,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let r = Retriever::new(model, gallery)?;
    let items = test
        .iter()
        .map(|t| {
            let mut prediction = r.predict(&t.views)?;
            prediction.error_km = Some(haversine_km(t.truth, prediction.coordinate));
            Ok(EvalItem {
                id: t.id.clone(),
                truth: t.truth,
                prediction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = items.iter().map(|i| i.prediction.error_km.unwrap()).collect();
    Ok(EvalReport {
        thresholds: spec.clone(),
        fractions: threshold_accuracy(&errors, spec)?,
        items,
    })
}

/// Expected accuracy of a predictor that picks a gallery row uniformly at random:
/// per threshold, the mean over test locations of the share of gallery points within reach.
pub fn random_gallery_baseline(
    gallery: &[GeoCoordinate],
    truths: &[GeoCoordinate],
    spec: &ThresholdSpec,
) -> Result<Vec<f64>> {
    if gallery.is_empty() || truths.is_empty() {
        return Err(Error::usage("baseline needs a gallery and at least one test location"));
    }
    let mut acc = vec![0.0; spec.thresholds().len()];
    for &t in truths {
        let mut counts = vec![0usize; acc.len()];
        for &g in gallery {
            let d = haversine_km(t, g);
            for (c, &th) in counts.iter_mut().zip(spec.thresholds()) {
                if d <= th {
                    *c += 1;
                }
            }
        }
        for (a, c) in acc.iter_mut().zip(counts) {
            *a += c as f64 / gallery.len() as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / truths.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{random_unit_embeddings, ConceptSet};
    use crate::encoder::{Activation, LocationEncoderConfig};
    use crate::losses::ContrastiveSpace;
    use crate::trainer::{ModelConfig, TrainConfig};

    fn model(space: ContrastiveSpace) -> ModelState {
        let concepts = ConceptSet::new(vec!["a".into(), "b".into()], random_unit_embeddings(2, 8, 4), None).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.loss.contrastive_space = space;
        let mc = ModelConfig {
            location: LocationEncoderConfig {
                scales: vec![1.0, 8.0],
                n_frequencies: 8,
                hidden: 16,
                activation: Activation::Relu,
            },
            img_hidden: vec![16],
            img_activation: Activation::Relu,
        };
        ModelState::init(mc, cfg, concepts).unwrap()
    }

    fn coords() -> Vec<GeoCoordinate> {
        [(10.0, 10.0), (-31.5, 100.2), (44.1, -70.3), (10.0, 10.0), (0.0, 0.0)]
            .iter()
            .map(|&(a, b)| GeoCoordinate::new(a, b).unwrap())
            .collect()
    }

    #[test]
    fn gallery_dedups_and_normalizes() {
        let m = model(ContrastiveSpace::Raw);
        let g = build_gallery(&m, &coords()).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.coordinates()[3], GeoCoordinate::new(0.0, 0.0).unwrap());
        for r in g.embeddings().iter_rows() {
            assert!((dot(r, r) - 1.0).abs() < 1e-12);
        }
        assert!(build_gallery(&m, &[]).is_err());
        let gc = build_gallery(&model(ContrastiveSpace::Concept), &coords()).unwrap();
        assert_eq!(gc.embeddings().cols(), 2);
    }

    #[test]
    fn default_gallery_count() {
        let train = coords();
        let all = gallery_coordinates(&train, &crate::io::GalleryConfig::default()).unwrap();
        let grid = crate::geo::sphere_grid(5.0).unwrap();
        let grid_set: std::collections::HashSet<_> = grid.iter().map(|c| c.key()).collect();
        let unique_train = dedup_coordinates(&train);
        let overlaps = unique_train.iter().filter(|c| grid_set.contains(&c.key())).count();
        assert_eq!(overlaps, 2);
        assert_eq!(all.len(), unique_train.len() + grid.len() - overlaps);
    }

    #[test]
    fn predict_properties() {
        let m = model(ContrastiveSpace::Raw);
        let g = build_gallery(&m, &coords()).unwrap();
        let row = g.embeddings().row(2).to_vec();
        let p = predict(&m, &g, std::slice::from_ref(&row)).unwrap();
        assert_eq!(p.gallery_index, 2);
        assert!((p.similarity - 1.0).abs() < 1e-12);

        let scaled: Vec<f64> = row.iter().map(|v| v * 7.5).collect();
        assert_eq!(predict(&m, &g, &[scaled]).unwrap().gallery_index, 2);
        let ten = vec![row.clone(); 10];
        assert_eq!(predict(&m, &g, &ten).unwrap(), p);

        assert!(predict(&m, &g, &[]).is_err());
        assert!(predict(&m, &g, &[vec![1.0; 3]]).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = vec![
            GeoCoordinate::new(1.0, 1.0).unwrap(),
            GeoCoordinate::new(2.0, 2.0).unwrap(),
        ];
        let g = LocationGallery::from_parts(
            c,
            Matrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            "h".into(),
            ContrastiveSpace::Raw,
        )
        .unwrap();
        assert_eq!(nearest(&g, &[1.0, 0.0]).gallery_index, 0);
    }

    #[test]
    fn stale_gallery_rejected() {
        let mut m = model(ContrastiveSpace::Raw);
        let g = build_gallery(&m, &coords()).unwrap();
        m.params.log_tau += 0.1;
        assert!(predict(&m, &g, &[vec![1.0; 8]]).is_err());
        let g = g.refreshed(&m).unwrap();
        assert!(predict(&m, &g, &[vec![1.0; 8]]).is_ok());
    }

    #[test]
    fn evaluation_on_gallery_rows_is_perfect() {
        let m = model(ContrastiveSpace::Raw);
        let g = build_gallery(&m, &coords()).unwrap();
        let test: Vec<TestItem> = (0..g.len())
            .map(|i| TestItem {
                id: format!("t{i}"),
                views: vec![g.embeddings().row(i).to_vec()],
                truth: g.coordinates()[i],
            })
            .collect();
        let r = evaluate(&m, &g, &test, &ThresholdSpec::default()).unwrap();
        assert_eq!(r.fractions, vec![1.0; 5]);
        let text = String::from_utf8(r.summary_table(None).to_bytes().unwrap()).unwrap();
        assert!(text.starts_with("threshold_km,accuracy\n1,1\n"));
    }

    #[test]
    fn adversarial_gallery_scores_zero() {
        let m = model(ContrastiveSpace::Raw);
        let far = vec![GeoCoordinate::new(-60.0, -120.0).unwrap()];
        let g = build_gallery(&m, &far).unwrap();
        let test = vec![TestItem {
            id: "x".into(),
            views: vec![vec![0.3; 8]],
            truth: GeoCoordinate::new(40.0, 60.0).unwrap(),
        }];
        let r = evaluate(&m, &g, &test, &ThresholdSpec::default()).unwrap();
        assert_eq!(&r.fractions[..4], &[0.0; 4]);
    }

    #[test]
    fn baseline_matches_hand_count() {
        let gallery = coords();
        let truths = vec![GeoCoordinate::new(10.0, 10.0).unwrap()];
        let b = random_gallery_baseline(&gallery, &truths, &ThresholdSpec::default()).unwrap();
        // two identical rows at the truth, one ~1570 km away, the rest farther
        assert_eq!(b[0], 2.0 / 5.0);
        assert_eq!(b[3], 2.0 / 5.0);
        assert_eq!(b[4], 3.0 / 5.0);
    }

    #[test]
    fn grouping_views() {
        let x = Matrix::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let ids: Vec<String> = ["a", "a2", "b", "b2"].iter().map(|s| s.to_string()).collect();
        let t = vec![GeoCoordinate::new(0.0, 0.0).unwrap(); 4];
        let g = TestItem::group(&ids, &x, &t, 2).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].id, "b");
        assert_eq!(g[1].views.len(), 2);
        assert!(TestItem::group(&ids, &x, &t, 3).is_err());
    }
}
