//! Synthetic globe with known concept intensity fields.
//!
//! Each concept has a few Gaussian bumps on the sphere. An image embedding at a location is the
//! intensity-weighted sum of concept vectors plus isotropic noise, normalized.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::concepts::{random_unit_embeddings, sample_vocabulary, ConceptSet};
use crate::encoder::ImageEmbedding;
use crate::error::{Error, Result};
use crate::geo::{haversine_km, GeoCoordinate};
use crate::io::{fmt_f64, write_embeddings, CsvTable, Manifest, ManifestKind};
use crate::numkernel::{dot, l2_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: GeoCoordinate,
    pub bandwidth_km: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub embed_dim: usize,
    /// One list of bumps per concept.
    pub bumps: Vec<Vec<Bump>>,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Gram–Schmidt the concept vectors.
    pub orthogonalize: bool,
}

/// Knobs for [`WorldSpec::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub seed: u64,
    pub n_concepts: usize,
    pub embed_dim: usize,
    pub bumps_per_concept: usize,
    pub bandwidth_km: (f64, f64),
    pub amplitude: (f64, f64),
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub orthogonalize: bool,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            seed: 7,
            n_concepts: 16,
            embed_dim: 64,
            bumps_per_concept: 3,
            bandwidth_km: (1000.0, 2500.0),
            amplitude: (0.5, 1.5),
            noise_sigma: 0.05,
            n_train: 2000,
            n_test: 500,
            orthogonalize: true,
        }
    }
}

/// Area-uniform point on the sphere.
fn uniform_sphere_point<R: Rng + ?Sized>(rng: &mut R) -> GeoCoordinate {
    let u: f64 = rng.random();
    let lat = (2.0 * u - 1.0).clamp(-1.0, 1.0).asin().to_degrees();
    let lon = rng.random_range(-180.0..180.0);
    GeoCoordinate::new(lat, lon).expect("sampled coordinate in range")
}

impl WorldSpec {
    pub fn random(p: &WorldParams) -> Result<Self> {
        let (b0, b1) = p.bandwidth_km;
        let (a0, a1) = p.amplitude;
        if !(b0 > 0.0 && b1 >= b0) || !(a0 >= 0.0 && a1 >= a0) {
            return Err(Error::usage(
                "bandwidth and amplitude ranges must be ordered, positive and non-negative",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(0x51));
        let bumps = (0..p.n_concepts)
            .map(|_| {
                (0..p.bumps_per_concept)
                    .map(|_| Bump {
                        center: uniform_sphere_point(&mut rng),
                        bandwidth_km: if b1 > b0 { rng.random_range(b0..b1) } else { b0 },
                        amplitude: if a1 > a0 { rng.random_range(a0..a1) } else { a0 },
                    })
                    .collect()
            })
            .collect();
        let spec = Self {
            seed: p.seed,
            embed_dim: p.embed_dim,
            bumps,
            noise_sigma: p.noise_sigma,
            n_train: p.n_train,
            n_test: p.n_test,
            orthogonalize: p.orthogonalize,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_concepts(&self) -> usize {
        self.bumps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bumps.is_empty() || self.embed_dim == 0 {
            return Err(Error::usage(
                "world needs at least one concept and a positive dimension",
            ));
        }
        for b in self.bumps.iter().flatten() {
            if !(b.amplitude >= 0.0 && b.amplitude.is_finite()) || !(b.bandwidth_km > 0.0 && b.bandwidth_km.is_finite())
            {
                return Err(Error::usage(format!("invalid bump {b:?}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::usage("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::random(&WorldParams::default()).expect("default parameters are valid")
    }
}

/// `w_c(L) = Σ amplitude · exp(−haversine(L, center)² / (2 bandwidth²))`.
pub fn concept_intensity(spec: &WorldSpec, concept: usize, loc: GeoCoordinate) -> Result<f64> {
    let bumps = spec.bumps.get(concept).ok_or_else(|| {
        Error::usage(format!(
            "concept {concept} out of range ({} concepts)",
            spec.n_concepts()
        ))
    })?;
    Ok(bumps
        .iter()
        .map(|b| {
            let dist = haversine_km(loc, b.center);
            b.amplitude * (-(dist * dist) / (2.0 * b.bandwidth_km * b.bandwidth_km)).exp()
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub location: GeoCoordinate,
    /// Unit-norm image embedding.
    pub x_img: Vec<f64>,
    pub true_intensities: Vec<f64>,
}

impl SyntheticSample {
    pub fn to_embedding(&self) -> ImageEmbedding {
        ImageEmbedding::new(self.id.clone(), self.x_img.clone(), Some(self.location)).expect("unit vector")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
    pub concept_names: Vec<String>,
    /// `d × n`, unit columns.
    pub concept_embeddings: Matrix,
}

impl SyntheticWorld {
    pub fn concept_set(&self) -> Result<ConceptSet> {
        ConceptSet::new(self.concept_names.clone(), self.concept_embeddings.clone(), None)
    }

    pub fn train_embeddings(&self) -> Vec<ImageEmbedding> {
        self.train.iter().map(SyntheticSample::to_embedding).collect()
    }

    pub fn test_embeddings(&self) -> Vec<ImageEmbedding> {
        self.test.iter().map(SyntheticSample::to_embedding).collect()
    }
}

/// In-place modified Gram–Schmidt over the columns of `m`.
fn orthonormalize_columns(m: &mut Matrix) {
    let (d, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    for i in 0..n {
        for j in 0..i {
            let proj = dot(&cols[i], &cols[j]);
            let (done, rest) = cols.split_at_mut(i);
            for (x, y) in rest[0].iter_mut().zip(&done[j]) {
                *x -= proj * y;
            }
        }
        let norm = l2_norm(&cols[i]);
        cols[i].iter_mut().for_each(|v| *v /= norm);
    }
    for (c, col) in cols.iter().enumerate() {
        for r in 0..d {
            m.set(r, c, col[r]);
        }
    }
}

fn concept_names(n: usize) -> Vec<String> {
    let vocab = sample_vocabulary();
    if n <= vocab.len() {
        vocab.into_iter().take(n).collect()
    } else {
        (0..n).map(|i| format!("concept_{i:03}")).collect()
    }
}

pub fn generate(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let n = spec.n_concepts();
    let d = spec.embed_dim;
    let mut emb = random_unit_embeddings(n, d, spec.seed);
    if n > d {
        log::warn!("{n} concepts in {d} dimensions cannot be linearly independent");
    } else if spec.orthogonalize {
        orthonormalize_columns(&mut emb);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0xA5));
    let mut draw = |prefix: &str, count: usize| -> Result<Vec<SyntheticSample>> {
        (0..count)
            .map(|i| {
                let location = uniform_sphere_point(&mut rng);
                let w = (0..n)
                    .map(|c| concept_intensity(spec, c, location))
                    .collect::<Result<Vec<_>>>()?;
                let mut x = vec![0.0; d];
                for (c, &wc) in w.iter().enumerate() {
                    for (r, xv) in x.iter_mut().enumerate() {
                        *xv += wc * emb.get(r, c);
                    }
                }
                for xv in x.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *xv += spec.noise_sigma * e;
                }
                let norm = l2_norm(&x);
                if norm == 0.0 {
                    return Err(Error::numeric(format!("{prefix}{i}: image embedding is zero")));
                }
                x.iter_mut().for_each(|v| *v /= norm);
                Ok(SyntheticSample {
                    id: format!("{prefix}{i:05}"),
                    location,
                    x_img: x,
                    true_intensities: w,
                })
            })
            .collect()
    };
    let train = draw("train_", spec.n_train)?;
    let test = draw("test_", spec.n_test)?;
    Ok(SyntheticWorld {
        train,
        test,
        concept_names: concept_names(n),
        concept_embeddings: emb,
    })
}

fn write_split(dir: &Path, name: &str, samples: &[SyntheticSample], world: &SyntheticWorld, d: usize) -> Result<()> {
    let mut data = Vec::with_capacity(samples.len() * d);
    for s in samples {
        data.extend_from_slice(&s.x_img);
    }
    let m = Matrix::new(samples.len(), d, data)?;
    let locs: Vec<GeoCoordinate> = samples.iter().map(|s| s.location).collect();
    let manifest = Manifest::new(
        ManifestKind::ImageEmbeddings,
        samples.iter().map(|s| s.id.clone()).collect(),
        d,
    )
    .with_locations(&locs)
    .with_source("synthetic world");
    write_embeddings(&dir.join(format!("{name}.gemb")), &m, &manifest)?;

    let mut header = vec!["id".to_string(), "lat".into(), "lon".into()];
    header.extend(world.concept_names.iter().cloned());
    let mut t = CsvTable::new(header);
    for s in samples {
        let mut row = vec![s.id.clone(), fmt_f64(s.location.lat()), fmt_f64(s.location.lon())];
        row.extend(s.true_intensities.iter().map(|&v| fmt_f64(v)));
        t.push(row);
    }
    t.write(&dir.join(format!("{name}_intensities.csv")))
}

/// Writes `train.gemb`, `test.gemb`, `concepts.gemb` with manifests, and intensity CSVs.
pub fn write_world(dir: &Path, world: &SyntheticWorld) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = world.concept_embeddings.rows();
    write_split(dir, "train", &world.train, world, d)?;
    write_split(dir, "test", &world.test, world, d)?;
    let manifest =
        Manifest::new(ManifestKind::ConceptSet, world.concept_names.clone(), d).with_source("synthetic world");
    write_embeddings(
        &dir.join("concepts.gemb"),
        &world.concept_embeddings.transpose(),
        &manifest,
    )
}
