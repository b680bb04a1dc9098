//! Concept vocabulary, the learnable concept basis and the two projections into concept space.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::MlpParams;
use crate::error::{Error, Result};
use crate::io::{read_gemb, Manifest, ManifestKind};
use crate::numkernel::{dot, l2_norm, Matrix};

const SAMPLE_VOCABULARY: &str = include_str!("../data/concept_vocabulary.txt");

/// The 64 geography concepts shipped with the crate.
pub fn sample_vocabulary() -> Vec<String> {
    SAMPLE_VOCABULARY
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// Seeded random unit columns, `dim × n`. Stands in for text embeddings when none are supplied.
pub fn random_unit_embeddings(n: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(dim, n);
    for c in 0..n {
        let mut col: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = l2_norm(&col);
        col.iter_mut().for_each(|v| *v /= norm);
        for (r, v) in col.into_iter().enumerate() {
            m.set(r, c, v);
        }
    }
    m
}

/// Named concepts with frozen text embeddings (`d × n`, unit columns) and the selected subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    names: Vec<String>,
    embeddings: Matrix,
    selected: Vec<usize>,
}

impl ConceptSet {
    /// Validates names and re-normalizes every embedding column. `selected = None` keeps all.
    pub fn new(names: Vec<String>, embeddings: Matrix, selected: Option<Vec<usize>>) -> Result<Self> {
        Self::build(names, embeddings, selected, true)
    }

    /// Rebuilds a set whose columns were normalized when it was first constructed.
    pub(crate) fn restore(names: Vec<String>, embeddings: Matrix, selected: Vec<usize>) -> Result<Self> {
        Self::build(names, embeddings, Some(selected), false)
    }

    fn build(names: Vec<String>, embeddings: Matrix, selected: Option<Vec<usize>>, normalize: bool) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::data("concept set is empty"));
        }
        if embeddings.cols() != names.len() {
            return Err(Error::CountMismatch(format!(
                "{} concept names but {} embedding columns",
                names.len(),
                embeddings.cols()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::data("blank concept name"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::data(format!("duplicate concept name {n:?}")));
            }
        }
        if !embeddings.is_finite() {
            return Err(Error::data("concept embeddings contain non-finite values"));
        }
        let mut embeddings = embeddings;
        for c in 0..embeddings.cols() {
            let norm = l2_norm(&embeddings.column(c));
            if norm == 0.0 {
                return Err(Error::data(format!("concept {:?} has a zero embedding", names[c])));
            }
            if normalize {
                for r in 0..embeddings.rows() {
                    let v = embeddings.get(r, c) / norm;
                    embeddings.set(r, c, v);
                }
            }
        }
        let selected = match selected {
            None => (0..names.len()).collect(),
            Some(sel) => {
                let mut uniq = HashSet::new();
                if sel.is_empty() {
                    return Err(Error::usage("concept selection is empty"));
                }
                for &i in &sel {
                    if i >= names.len() || !uniq.insert(i) {
                        return Err(Error::usage(format!("invalid concept selection index {i}")));
                    }
                }
                sel
            }
        };
        Ok(Self {
            names,
            embeddings,
            selected,
        })
    }

    /// Same as [`ConceptSet::new`] but with one embedding per row (`n × d`), as stored on disk.
    pub fn from_rows(names: Vec<String>, rows: &Matrix) -> Result<Self> {
        Self::new(names, rows.transpose(), None)
    }

    /// Restricts the selection to the named concepts, in the given order.
    pub fn with_selection_by_name(self, wanted: &[String]) -> Result<Self> {
        let sel = wanted
            .iter()
            .map(|w| {
                self.index_of(w)
                    .ok_or_else(|| Error::usage(format!("unknown concept {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.names, self.embeddings, Some(sel))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn dim(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Number of selected concepts.
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Name of the `j`-th selected concept.
    pub fn selected_name(&self, j: usize) -> &str {
        &self.names[self.selected[j]]
    }

    /// Frozen embedding of concept `i` (index into the full set).
    pub fn embedding(&self, i: usize) -> Vec<f64> {
        self.embeddings.column(i)
    }

    /// `d × k` matrix of the selected columns.
    pub fn selected_embeddings(&self) -> Matrix {
        self.embeddings
            .select_columns(&self.selected)
            .expect("selection validated on construction")
    }
}

/// `B = E_selected + Δ`; only `delta` is ever trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBasis {
    base: Matrix,
    delta: Matrix,
    concept_indices: Vec<usize>,
}

impl ConceptBasis {
    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn delta(&self) -> &Matrix {
        &self.delta
    }

    pub fn concept_indices(&self) -> &[usize] {
        &self.concept_indices
    }

    pub fn basis(&self) -> Matrix {
        self.base.add(&self.delta).expect("shapes checked in build_basis")
    }
}

/// Projected vector in concept space, aligned to the selected concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptActivation {
    pub values: Vec<f64>,
    pub concept_indices: Vec<usize>,
}

pub fn build_basis(set: &ConceptSet, delta: &Matrix) -> Result<ConceptBasis> {
    let base = set.selected_embeddings();
    if delta.shape() != base.shape() {
        return Err(Error::Shape {
            op: "build_basis",
            left: base.shape(),
            right: delta.shape(),
        });
    }
    if !delta.is_finite() {
        return Err(Error::numeric("concept offset contains non-finite values"));
    }
    Ok(ConceptBasis {
        base,
        delta: delta.clone(),
        concept_indices: set.selected().to_vec(),
    })
}

/// `z_loc = x_locᵀ B`.
pub fn project_location(basis: &ConceptBasis, x_loc: &[f64]) -> Result<ConceptActivation> {
    let b = basis.basis();
    if x_loc.len() != b.rows() {
        return Err(Error::Shape {
            op: "project_location",
            left: (1, x_loc.len()),
            right: b.shape(),
        });
    }
    let values = (0..b.cols()).map(|j| dot(x_loc, &b.column(j))).collect();
    Ok(ConceptActivation {
        values,
        concept_indices: basis.concept_indices.clone(),
    })
}

/// `z_img = f_img(x_img)`.
pub fn project_image(f_img: &MlpParams, x_img: &[f64], concept_indices: &[usize]) -> Result<ConceptActivation> {
    let values = f_img.forward(x_img)?;
    if values.len() != concept_indices.len() {
        return Err(Error::Shape {
            op: "project_image",
            left: (1, values.len()),
            right: (1, concept_indices.len()),
        });
    }
    Ok(ConceptActivation {
        values,
        concept_indices: concept_indices.to_vec(),
    })
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::read(path)?;
        if manifest.kind != ManifestKind::ConceptSet {
            return Err(Error::data(format!(
                "{}: expected a concept_set manifest, found {:?}",
                path.display(),
                manifest.kind
            )));
        }
        return Ok(manifest.ids);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Loads names (text list or concept manifest) and a GEMB file holding one embedding per row.
pub fn load_concept_set(names_path: &Path, embeddings_path: &Path) -> Result<ConceptSet> {
    let names = read_names(names_path)?;
    let rows = read_gemb(embeddings_path)?;
    if rows.rows() != names.len() {
        return Err(Error::CountMismatch(format!(
            "{} lists {} concepts but {} has {} rows",
            names_path.display(),
            names.len(),
            embeddings_path.display(),
            rows.rows()
        )));
    }
    ConceptSet::from_rows(names, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, Layer};
    use proptest::prelude::*;

    fn set_2x2() -> ConceptSet {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        ConceptSet::new(vec!["a".into(), "b".into()], e, None).unwrap()
    }

    #[test]
    fn zero_delta_keeps_text_basis() {
        let set = set_2x2();
        let b = build_basis(&set, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(b.basis(), set.selected_embeddings());
        let neg = set.selected_embeddings().scale(-1.0);
        assert_eq!(build_basis(&set, &neg).unwrap().basis(), Matrix::zeros(2, 2));
        assert!(build_basis(&set, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn columnwise_sum() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.6], vec![0.0, 0.8]]).unwrap();
        let set = ConceptSet::new(vec!["x".into(), "y".into()], e, None).unwrap();
        let delta = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0], vec![0.0, 0.25]]).unwrap();
        let b = build_basis(&set, &delta).unwrap().basis();
        assert_eq!(
            b,
            Matrix::from_rows(&[vec![1.5, -1.0], vec![2.0, 0.6], vec![0.0, 1.05]]).unwrap()
        );
        assert_eq!(set.embeddings().get(0, 0), 1.0);
    }

    #[test]
    fn location_projection() {
        let set = set_2x2();
        // B = [[1,0],[1,1]] as E + Δ
        let delta = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let basis = build_basis(&set, &delta).unwrap();
        assert_eq!(project_location(&basis, &[2.0, 3.0]).unwrap().values, vec![5.0, 3.0]);
        assert_eq!(project_location(&basis, &[1.0, 0.0]).unwrap().values, vec![1.0, 0.0]);
        assert!(project_location(&basis, &[1.0]).is_err());
        let ortho = build_basis(&set, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(project_location(&ortho, &[0.0, 1.0]).unwrap().values, vec![0.0, 1.0]);
    }

    #[test]
    fn image_projection() {
        let f = MlpParams::new(
            vec![Layer {
                weight: Matrix::zeros(2, 3),
                bias: vec![0.25, -0.5],
            }],
            Activation::Relu,
        )
        .unwrap();
        let z = project_image(&f, &[1.0, 2.0, 3.0], &[0, 1]).unwrap();
        assert_eq!(z.values, vec![0.25, -0.5]);
        assert_eq!(z, project_image(&f, &[1.0, 2.0, 3.0], &[0, 1]).unwrap());
        let hand = MlpParams::new(
            vec![
                Layer {
                    weight: Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap(),
                    bias: vec![0.0],
                },
                Layer {
                    weight: Matrix::from_rows(&[vec![2.0]]).unwrap(),
                    bias: vec![1.0],
                },
            ],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(project_image(&hand, &[3.0, 1.0], &[4]).unwrap().values, vec![5.0]);
        assert!(project_image(&f, &[1.0], &[0, 1]).is_err());
    }

    #[test]
    fn validation() {
        let e = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let err = ConceptSet::new(vec!["dune".into(), "dune".into()], e.clone(), None).unwrap_err();
        assert!(err.to_string().contains("dune"));
        assert!(ConceptSet::new(vec!["a".into()], e.clone(), None).is_err());
        assert!(ConceptSet::new(vec!["a".into(), "b".into()], e.clone(), Some(vec![2])).is_err());
        assert!(ConceptSet::new(vec!["a".into(), "b".into()], Matrix::zeros(1, 2), None).is_err());
        let s = ConceptSet::new(vec!["a".into(), "b".into()], e, Some(vec![1])).unwrap();
        assert_eq!(s.k(), 1);
        assert_eq!(s.selected_name(0), "b");
    }

    #[test]
    fn vocabulary_contents() {
        let v = sample_vocabulary();
        assert_eq!(v.len(), 64);
        for c in ["tropical climate", "mountain", "cathedral"] {
            assert!(v.iter().any(|x| x == c), "{c}");
        }
        let set = ConceptSet::new(v, random_unit_embeddings(64, 32, 1), None).unwrap();
        assert_eq!(set.k(), 64);
    }

    proptest! {
        #[test]
        fn projection_is_linear(
            x in proptest::collection::vec(-1.0f64..1.0, 6),
            y in proptest::collection::vec(-1.0f64..1.0, 6),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let set = ConceptSet::new((0..4).map(|i| format!("c{i}")).collect(), random_unit_embeddings(4, 6, 3), None).unwrap();
            let delta = random_unit_embeddings(4, 6, 4).scale(0.3);
            let basis = build_basis(&set, &delta).unwrap();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let zx = project_location(&basis, &x).unwrap().values;
            let zy = project_location(&basis, &y).unwrap().values;
            let zm = project_location(&basis, &mix).unwrap().values;
            for j in 0..4 {
                prop_assert!((zm[j] - (a * zx[j] + b * zy[j])).abs() < 1e-10);
            }
        }

        #[test]
        fn zero_delta_gives_cosines(x in proptest::collection::vec(-1.0f64..1.0, 5)) {
            let norm = l2_norm(&x);
            prop_assume!(norm > 1e-3);
            let unit: Vec<f64> = x.iter().map(|v| v / norm).collect();
            let set = ConceptSet::new((0..3).map(|i| format!("c{i}")).collect(), random_unit_embeddings(3, 5, 8), None).unwrap();
            let basis = build_basis(&set, &Matrix::zeros(5, 3)).unwrap();
            let z = project_location(&basis, &unit).unwrap().values;
            for j in 0..3 {
                let cos = crate::numkernel::cosine(&unit, &set.embedding(j));
                prop_assert!((z[j] - cos).abs() < 1e-12);
            }
        }
    }
}
