use std::ffi::{CStr, CString};
use std::ptr;

use geoconcept::geo::GeoCoordinate;
use geoconcept::inference::{build_gallery, predict};
use geoconcept::synthworld::{generate, WorldParams, WorldSpec};
use geoconcept::trainer::{save_checkpoint, train, ModelConfig, ModelState, TrainConfig, TrainData};
use geoconcept_ffi::*;

fn trained_model(dir: &std::path::Path) -> (ModelState, Vec<Vec<f64>>, std::path::PathBuf) {
    let spec = WorldSpec::random(&WorldParams {
        n_concepts: 5,
        embed_dim: 12,
        n_train: 96,
        n_test: 8,
        ..WorldParams::default()
    })
    .unwrap();
    let world = generate(&spec).unwrap();
    let data = TrainData::from_embeddings(&world.train_embeddings()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (state, _) = train(&data, world.concept_set().unwrap(), ModelConfig::default(), cfg).unwrap();
    let path = dir.join("m.gckp");
    save_checkpoint(&state, &path).unwrap();
    let tests = world.test.iter().map(|s| s.x_img.clone()).collect();
    (state, tests, path)
}

fn load(path: &std::path::Path) -> *mut GcModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { gc_model_load(c.as_ptr(), &mut m) }, GcStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = gc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_queries_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (state, tests, path) = trained_model(dir.path());
    let m = load(&path);
    unsafe {
        assert_eq!(gc_model_embed_dim(m), 12);
        assert_eq!(gc_model_num_concepts(m), 5);

        let mut buf = [0 as std::ffi::c_char; 64];
        let mut needed = 0usize;
        assert_eq!(
            gc_model_concept_name(m, 0, buf.as_mut_ptr(), buf.len(), &mut needed),
            GcStatus::Ok
        );
        let name = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert_eq!(name, state.concepts.selected_name(0));
        assert_eq!(needed, name.len() + 1);
        assert_eq!(
            gc_model_concept_name(m, 0, buf.as_mut_ptr(), 1, &mut needed),
            GcStatus::BufferTooSmall
        );
        assert_eq!(
            gc_model_concept_name(m, 99, buf.as_mut_ptr(), buf.len(), ptr::null_mut()),
            GcStatus::Usage
        );

        let mut e = vec![0.0; 12];
        assert_eq!(gc_encode_location(m, 10.0, 20.0, e.as_mut_ptr(), 12), GcStatus::Ok);
        let want = state
            .encode_locations(&[GeoCoordinate::new(10.0, 20.0).unwrap()])
            .unwrap();
        assert_eq!(e, want.row(0));
        assert_eq!(gc_encode_location(m, 91.0, 0.0, e.as_mut_ptr(), 12), GcStatus::Usage);
        assert_eq!(gc_encode_location(m, 0.0, 0.0, e.as_mut_ptr(), 3), GcStatus::Usage);
        assert!(!gc_last_error_message().is_null());
        assert_eq!(gc_encode_location(m, 0.0, 0.0, e.as_mut_ptr(), 12), GcStatus::Ok);
        assert!(
            gc_last_error_message().is_null(),
            "a successful call clears the message"
        );

        let mut z = vec![0.0; 5];
        assert_eq!(
            gc_image_concepts(m, tests[0].as_ptr(), 12, z.as_mut_ptr(), 5),
            GcStatus::Ok
        );
        let mut idx = vec![0usize; 5];
        let mut sc = vec![0.0; 5];
        let mut count = 0usize;
        assert_eq!(
            gc_explain(
                m,
                tests[0].as_ptr(),
                12,
                3,
                idx.as_mut_ptr(),
                sc.as_mut_ptr(),
                5,
                &mut count
            ),
            GcStatus::Ok
        );
        assert_eq!(count, 3);
        assert!(sc[0] >= sc[1] && sc[1] >= sc[2]);
        assert_eq!(sc[0], z[idx[0]]);
        assert_eq!(
            gc_explain(
                m,
                tests[0].as_ptr(),
                12,
                50,
                idx.as_mut_ptr(),
                sc.as_mut_ptr(),
                5,
                &mut count
            ),
            GcStatus::Ok
        );
        assert_eq!(count, 5);
        assert_eq!(
            gc_explain(
                m,
                tests[0].as_ptr(),
                12,
                5,
                idx.as_mut_ptr(),
                sc.as_mut_ptr(),
                2,
                &mut count
            ),
            GcStatus::BufferTooSmall
        );

        let mut g = ptr::null_mut();
        assert_eq!(gc_gallery_build_grid(m, 30.0, &mut g), GcStatus::Ok);
        let coords = geoconcept::geo::sphere_grid(30.0).unwrap();
        assert_eq!(gc_gallery_len(g), coords.len());
        let lib_gallery = build_gallery(&state, &coords).unwrap();
        let (mut lat, mut lon, mut sim) = (0.0, 0.0, 0.0);
        let flat: Vec<f64> = tests[..2].concat();
        assert_eq!(
            gc_predict(m, g, flat.as_ptr(), 2, 12, &mut lat, &mut lon, &mut sim),
            GcStatus::Ok
        );
        let want = predict(&state, &lib_gallery, &tests[..2]).unwrap();
        assert_eq!(
            (lat, lon, sim),
            (want.coordinate.lat(), want.coordinate.lon(), want.similarity)
        );
        assert_eq!(
            gc_predict(m, g, flat.as_ptr(), 0, 12, &mut lat, &mut lon, &mut sim),
            GcStatus::Usage
        );
        gc_gallery_free(g);

        let lats = [1.0, 1.0, -5.0];
        let lons = [2.0, 2.0, 7.0];
        let mut g2 = ptr::null_mut();
        assert_eq!(
            gc_gallery_build(m, lats.as_ptr(), lons.as_ptr(), 3, &mut g2),
            GcStatus::Ok
        );
        assert_eq!(gc_gallery_len(g2), 2);
        gc_gallery_free(g2);
        gc_model_free(m);
    }
}

#[test]
fn failures_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.gckp").to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(gc_model_load(missing.as_ptr(), &mut m), GcStatus::Data);
        assert!(m.is_null());
        assert!(last_error().contains("nope.gckp"));
        assert_eq!(gc_model_load(ptr::null(), &mut m), GcStatus::NullPointer);
        assert_eq!(gc_model_load(missing.as_ptr(), ptr::null_mut()), GcStatus::NullPointer);

        let bad = dir.path().join("bad.gckp");
        std::fs::write(&bad, b"GCKPxxxxxxxxxxxxxxxxxxxxx").unwrap();
        let c = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(gc_model_load(c.as_ptr(), &mut m), GcStatus::Data);

        assert_eq!(gc_model_embed_dim(ptr::null()), 0);
        assert_eq!(gc_gallery_len(ptr::null()), 0);
        let mut g = ptr::null_mut();
        assert_eq!(gc_gallery_build_grid(ptr::null(), 10.0, &mut g), GcStatus::NullPointer);
        assert_eq!(last_error(), "model is null");
        gc_model_free(ptr::null_mut());
        gc_gallery_free(ptr::null_mut());
    }
}

#[test]
fn haversine_entry_point() {
    let half = gc_haversine_km(0.0, 0.0, 0.0, 180.0);
    assert!((half - std::f64::consts::PI * geoconcept::geo::EARTH_RADIUS_KM).abs() < 1e-6);
    assert!(gc_haversine_km(95.0, 0.0, 0.0, 0.0).is_nan());
}

#[test]
fn header_declares_every_export() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/geoconcept.h")).unwrap();
    let source = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("GC_STATUS_BUFFER_TOO_SMALL"));
}
