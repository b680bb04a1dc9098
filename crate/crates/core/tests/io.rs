use geoconcept::concepts::ConceptSet;
use geoconcept::io::{manifest_path, read_embeddings, read_gemb, write_gemb, Manifest, ManifestKind};
use geoconcept::numkernel::Matrix;
use geoconcept::Error;

fn write_f32_gemb(path: &std::path::Path, rows: usize, dims: usize, data: &[f32]) {
    let mut bytes = b"GEMB".to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend((rows as u64).to_le_bytes());
    bytes.extend((dims as u64).to_le_bytes());
    let mut payload = Vec::new();
    for v in data {
        payload.extend(v.to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    bytes.extend(payload);
    bytes.extend(crc.to_le_bytes());
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn hand_built_exporter_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("concepts.gemb");
    let s = std::f32::consts::FRAC_1_SQRT_2;
    write_f32_gemb(&path, 3, 2, &[1.0, 0.0, 0.0, 1.0, s, s]);
    let json = r#"{
        "schema_version": 1,
        "kind": "concept_set",
        "ids": ["beach", "snow", "palm trees"],
        "dim": 2,
        "source": "exporter",
        "model": "ViT-B/32"
    }"#;
    std::fs::write(manifest_path(&path), json).unwrap();
    let (m, manifest) = read_embeddings(&path).unwrap();
    assert_eq!(m.shape(), (3, 2));
    assert_eq!(manifest.ids.len(), 3);
    assert_eq!(manifest.model.as_deref(), Some("ViT-B/32"));
    assert_eq!(m.get(2, 0), s as f64);
    let set = ConceptSet::from_rows(manifest.ids, &m).unwrap();
    assert_eq!(set.k(), 3);
}

#[test]
fn empty_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.gemb");
    write_gemb(&path, &Matrix::zeros(0, 5)).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 4 + 8 + 8 + 4);
    assert_eq!(read_gemb(&path).unwrap().shape(), (0, 5));
}

#[test]
fn manifest_row_count_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.gemb");
    write_f32_gemb(&path, 2, 1, &[0.5, -0.5]);
    Manifest::new(ManifestKind::ImageEmbeddings, vec!["only".into()], 1)
        .write(&manifest_path(&path))
        .unwrap();
    let err = read_embeddings(&path).unwrap_err();
    assert!(matches!(err, Error::CountMismatch(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn distinct_errors_for_distinct_corruptions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.gemb");
    write_f32_gemb(&path, 1, 2, &[1.0, 2.0]);
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_gemb(&path), Err(Error::BadMagic { .. })));

    let mut bad = good.clone();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_gemb(&path), Err(Error::VersionMismatch { .. })));

    let mut bad = good.clone();
    bad[24] ^= 1;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(read_gemb(&path), Err(Error::Checksum { .. })));
}
