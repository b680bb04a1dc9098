//! Concept analytics: sparse explanations, error-binned influence, class differentials,
//! concept maps, correlation, clustering and linear-probe contributions.

mod cluster;
mod stats;

pub use cluster::{kmeans, KMeansResult, KMEANS_MAX_ITER};
pub use stats::{linear_probe_contributions, median, pearson, Contributions, LinearProbeConfig};

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::geo::{error_bin, ErrorBin, GeoCoordinate};
use crate::inference::Prediction;
use crate::io::{fmt_f64, CsvTable};
use crate::numkernel::{cosine, Matrix};
use crate::trainer::ModelState;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptScore {
    /// Position within the model's selected concepts.
    pub index: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub id: String,
    /// Retained concepts, highest score first.
    pub top: Vec<ConceptScore>,
    /// Length `k`; zero outside the retained set.
    pub sparse: Vec<f64>,
    pub predicted: Option<GeoCoordinate>,
}

/// Indices of the `k_top` largest values, ordered by value descending then index ascending.
pub fn top_k_indices(z: &[f64], k_top: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    idx.truncate(k_top.min(z.len()));
    idx
}

fn clamp_k_top(k_top: usize, k: usize) -> Result<usize> {
    if k_top == 0 {
        return Err(Error::usage("k_top must be at least 1"));
    }
    if k_top > k {
        log::warn!("k_top {k_top} exceeds the {k} available concepts; keeping all");
    }
    Ok(k_top.min(k))
}

/// Keeps the `k_top` largest activations of `z`, zeroing the rest.
pub fn sparsify(z: &[f64], names: &[String], k_top: usize) -> Result<(Vec<ConceptScore>, Vec<f64>)> {
    let keep = top_k_indices(z, clamp_k_top(k_top, z.len())?);
    let mut sparse = vec![0.0; z.len()];
    let top = keep
        .into_iter()
        .map(|i| {
            sparse[i] = z[i];
            ConceptScore {
                index: i,
                name: names[i].clone(),
                score: z[i],
            }
        })
        .collect();
    Ok((top, sparse))
}

pub fn explain(
    model: &ModelState,
    id: &str,
    x_img: &[f64],
    prediction: Option<&Prediction>,
    k_top: usize,
) -> Result<Explanation> {
    let z = model.params.f_img.forward(x_img)?;
    let names: Vec<String> = (0..model.concepts.k())
        .map(|j| model.concepts.selected_name(j).to_string())
        .collect();
    let (top, sparse) = sparsify(&z, &names, k_top)?;
    Ok(Explanation {
        id: id.to_string(),
        top,
        sparse,
        predicted: prediction.map(|p| p.coordinate),
    })
}

pub fn explanations_table(explanations: &[Explanation]) -> CsvTable {
    let mut t = CsvTable::new(["id", "rank", "concept", "score"]);
    for e in explanations {
        for (r, c) in e.top.iter().enumerate() {
            t.push([e.id.clone(), (r + 1).to_string(), c.name.clone(), fmt_f64(c.score)]);
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMedian {
    pub name: String,
    pub median: f64,
    /// Images in the bin that retained the concept.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinInfluence {
    pub bin: ErrorBin,
    pub n_images: usize,
    /// Every concept retained at least once in the bin, by name.
    pub medians: Vec<ConceptMedian>,
    /// Highest medians among concepts with enough support.
    pub top: Vec<ConceptMedian>,
    pub lowest: Vec<ConceptMedian>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceTable {
    pub bins: Vec<BinInfluence>,
    pub notices: Vec<String>,
}

/// Per error bin, the median of each concept's retained scores, and the top/lowest
/// `rank_length` concepts among those retained in at least `min_support` images.
pub fn influence_table(
    explanations: &[Explanation],
    errors_km: &[f64],
    min_support: usize,
    rank_length: usize,
) -> Result<InfluenceTable> {
    if explanations.len() != errors_km.len() {
        return Err(Error::CountMismatch(format!(
            "{} explanations but {} errors",
            explanations.len(),
            errors_km.len()
        )));
    }
    let mut per_bin: BTreeMap<ErrorBin, (usize, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
    for (e, &err) in explanations.iter().zip(errors_km) {
        let entry = per_bin.entry(error_bin(err)?).or_default();
        entry.0 += 1;
        for c in &e.top {
            entry.1.entry(c.name.clone()).or_default().push(c.score);
        }
    }
    let mut bins = Vec::new();
    let mut notices = Vec::new();
    for bin in ErrorBin::ALL {
        let Some((n_images, scores)) = per_bin.remove(&bin) else {
            notices.push(format!("bin {} has no images and is omitted", bin.label()));
            continue;
        };
        let medians: Vec<ConceptMedian> = scores
            .into_iter()
            .map(|(name, mut s)| ConceptMedian {
                name,
                median: median(&mut s).expect("non-empty by construction"),
                support: s.len(),
            })
            .collect();
        let mut ranked: Vec<&ConceptMedian> = medians.iter().filter(|m| m.support >= min_support).collect();
        ranked.sort_by(|a, b| b.median.total_cmp(&a.median).then(a.name.cmp(&b.name)));
        let top = ranked.iter().take(rank_length).map(|m| (*m).clone()).collect();
        let lowest = ranked.iter().rev().take(rank_length).map(|m| (*m).clone()).collect();
        bins.push(BinInfluence {
            bin,
            n_images,
            medians,
            top,
            lowest,
        });
    }
    for n in &notices {
        log::info!("{n}");
    }
    Ok(InfluenceTable { bins, notices })
}

impl InfluenceTable {
    pub fn bin(&self, bin: ErrorBin) -> Option<&BinInfluence> {
        self.bins.iter().find(|b| b.bin == bin)
    }

    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new(["bin", "concept", "median", "support", "rank"]);
        for b in &self.bins {
            let rank_of = |name: &str| {
                if let Some(p) = b.top.iter().position(|m| m.name == name) {
                    format!("top{}", p + 1)
                } else if let Some(p) = b.lowest.iter().position(|m| m.name == name) {
                    format!("lowest{}", p + 1)
                } else {
                    String::new()
                }
            };
            for m in &b.medians {
                t.push([
                    b.bin.label().to_string(),
                    m.name.clone(),
                    fmt_f64(m.median),
                    m.support.to_string(),
                    rank_of(&m.name),
                ]);
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDifferential {
    pub classes: Vec<String>,
    pub concepts: Vec<String>,
    /// `classes × concepts`, mean sparse activation within the class.
    pub means: Matrix,
    /// Class mean minus the mean over all samples of every other class.
    pub differential: Matrix,
}

/// Classes appear in sorted label order.
pub fn class_differential(sparse: &Matrix, labels: &[String], concepts: &[String]) -> Result<ClassDifferential> {
    if sparse.rows() != labels.len() || sparse.cols() != concepts.len() {
        return Err(Error::CountMismatch(format!(
            "{}×{} activations for {} labels and {} concepts",
            sparse.rows(),
            sparse.cols(),
            labels.len(),
            concepts.len()
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (r, l) in labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(r);
    }
    if groups.len() < 2 {
        return Err(Error::data("class differential needs at least two classes"));
    }
    let k = sparse.cols();
    let mut sums = Matrix::zeros(groups.len(), k);
    let mut total = vec![0.0; k];
    for (g, rows) in groups.values().enumerate() {
        for &r in rows {
            for (c, &v) in sparse.row(r).iter().enumerate() {
                let s = sums.get(g, c) + v;
                sums.set(g, c, s);
                total[c] += v;
            }
        }
    }
    let n = labels.len() as f64;
    let mut means = Matrix::zeros(groups.len(), k);
    let mut differential = Matrix::zeros(groups.len(), k);
    for (g, rows) in groups.values().enumerate() {
        let size = rows.len() as f64;
        for c in 0..k {
            let mean = sums.get(g, c) / size;
            let rest = (total[c] - sums.get(g, c)) / (n - size);
            means.set(g, c, mean);
            differential.set(g, c, mean - rest);
        }
    }
    Ok(ClassDifferential {
        classes: groups.keys().map(|s| s.to_string()).collect(),
        concepts: concepts.to_vec(),
        means,
        differential,
    })
}

impl ClassDifferential {
    /// The `top_m` most distinctive concepts per class, as `class, concept, weight` edges.
    pub fn sankey_edges(&self, top_m: usize) -> CsvTable {
        let mut t = CsvTable::new(["class", "concept", "weight"]);
        for (g, class) in self.classes.iter().enumerate() {
            for c in top_k_indices(self.differential.row(g), top_m) {
                t.push([
                    class.clone(),
                    self.concepts[c].clone(),
                    fmt_f64(self.differential.get(g, c)),
                ]);
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMean {
    pub region: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMap {
    pub concept: String,
    pub points: Vec<(GeoCoordinate, f64)>,
    /// Present when region labels were supplied; sorted by region.
    pub regions: Option<Vec<RegionMean>>,
    pub region_labels: Option<Vec<String>>,
}

/// Cosine between each location embedding and a concept direction: the frozen text
/// embedding, or the learned basis column when `use_basis` is set.
pub fn concept_map(
    model: &ModelState,
    concept: &str,
    points: &[GeoCoordinate],
    regions: Option<&[String]>,
    use_basis: bool,
) -> Result<ConceptMap> {
    let set = &model.concepts;
    let idx = set
        .index_of(concept)
        .ok_or_else(|| Error::usage(format!("unknown concept {concept:?}")))?;
    let direction = if use_basis {
        let j = set
            .selected()
            .iter()
            .position(|&s| s == idx)
            .ok_or_else(|| Error::usage(format!("concept {concept:?} is not in the trained selection")))?;
        model.basis().column(j)
    } else {
        set.embedding(idx)
    };
    if let Some(r) = regions {
        if r.len() != points.len() {
            return Err(Error::CountMismatch(format!(
                "{} points but {} region labels",
                points.len(),
                r.len()
            )));
        }
    }
    let emb = model.encode_locations(points)?;
    let sims: Vec<(GeoCoordinate, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, cosine(emb.row(i), &direction).clamp(-1.0, 1.0)))
        .collect();
    let region_means = regions.map(|labels| {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for (l, (_, s)) in labels.iter().zip(&sims) {
            let e = acc.entry(l.as_str()).or_default();
            e.0 += s;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(r, (s, n))| RegionMean {
                region: r.to_string(),
                mean: s / n as f64,
                count: n,
            })
            .collect()
    });
    Ok(ConceptMap {
        concept: concept.to_string(),
        points: sims,
        regions: region_means,
        region_labels: regions.map(|r| r.to_vec()),
    })
}

impl ConceptMap {
    pub fn to_table(&self) -> CsvTable {
        let mut header = vec!["lat", "lon", "similarity"];
        if self.region_labels.is_some() {
            header.push("region");
        }
        let mut t = CsvTable::new(header);
        for (i, (p, s)) in self.points.iter().enumerate() {
            let mut row = vec![fmt_f64(p.lat()), fmt_f64(p.lon()), fmt_f64(*s)];
            if let Some(r) = &self.region_labels {
                row.push(r[i].clone());
            }
            t.push(row);
        }
        t
    }

    pub fn regions_table(&self) -> Option<CsvTable> {
        self.regions.as_ref().map(|rs| {
            let mut t = CsvTable::new(["region", "mean_similarity", "points"]);
            for r in rs {
                t.push([r.region.clone(), fmt_f64(r.mean), r.count.to_string()]);
            }
            t
        })
    }
}

pub fn clusters_table(ids: &[String], assignments: &[usize]) -> CsvTable {
    let mut t = CsvTable::new(["id", "cluster"]);
    for (id, a) in ids.iter().zip(assignments) {
        t.push([id.clone(), a.to_string()]);
    }
    t
}

/// Maps arbitrary labels to dense class ids in sorted order.
pub fn encode_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut names: Vec<String> = labels.to_vec();
    names.sort();
    names.dedup();
    let lookup: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    (labels.iter().map(|l| lookup[l.as_str()]).collect(), names)
}
