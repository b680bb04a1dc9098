//! C ABI over the geoconcept toolkit.
//!
//! Handles are opaque and owned by the caller once returned; free them with the matching
//! `*_free` function. Every fallible call returns a [`GcStatus`]; on failure a message is
//! available from [`gc_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use geoconcept::geo::{haversine_km, sphere_grid, GeoCoordinate};
use geoconcept::inference::{build_gallery, LocationGallery, Retriever};
use geoconcept::interpret::top_k_indices;
use geoconcept::numkernel::Matrix;
use geoconcept::trainer::{load_checkpoint, ModelState};
use geoconcept::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
    NullPointer = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Trained model loaded from a checkpoint.
pub struct GcModel {
    state: ModelState,
}

/// Location gallery bound to the model it was built from.
pub struct GcGallery {
    gallery: LocationGallery,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

fn from_error(e: Error) -> GcStatus {
    let status = match e.exit_code() {
        1 => GcStatus::Usage,
        3 => GcStatus::Numeric,
        _ => GcStatus::Data,
    };
    set_error(e.to_string());
    status
}

fn guard(f: impl FnOnce() -> Result<(), GcStatus>) -> GcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            GcStatus::Panic
        }
    }
}

fn null(what: &str) -> GcStatus {
    set_error(format!("{what} is null"));
    GcStatus::NullPointer
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], GcStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], GcStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model_ref<'a>(model: *const GcModel) -> Result<&'a GcModel, GcStatus> {
    model.as_ref().ok_or_else(|| null("model"))
}

fn coord(lat: f64, lon: f64) -> Result<GeoCoordinate, GcStatus> {
    GeoCoordinate::new(lat, lon).map_err(from_error)
}

/// Message for the most recent failure on this thread, or null. Valid until the next call
/// into this library from the same thread.
#[no_mangle]
pub extern "C" fn gc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gc_model_load(path: *const c_char, out: *mut *mut GcModel) -> GcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| {
            set_error("path is not valid UTF-8");
            GcStatus::Usage
        })?;
        let state = load_checkpoint(&PathBuf::from(p)).map_err(from_error)?;
        *out = Box::into_raw(Box::new(GcModel { state }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`gc_model_load`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gc_model_free(model: *mut GcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gc_model_embed_dim(model: *const GcModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.embed_dim())
}

/// Number of trained concepts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gc_model_num_concepts(model: *const GcModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.concepts.k())
}

/// Copies the NUL-terminated name of trained concept `index` into `buf`. `needed` receives the
/// size including the terminator, also when the buffer is too small.
///
/// # Safety
/// `buf` must hold `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn gc_model_concept_name(
    model: *const GcModel,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> GcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if index >= m.state.concepts.k() {
            set_error(format!("concept index {index} out of range"));
            return Err(GcStatus::Usage);
        }
        let name = m.state.concepts.selected_name(index).as_bytes();
        if let Some(n) = needed.as_mut() {
            *n = name.len() + 1;
        }
        if cap < name.len() + 1 {
            set_error("buffer too small");
            return Err(GcStatus::BufferTooSmall);
        }
        let dst = slice_mut(buf as *mut u8, cap, "buf")?;
        dst[..name.len()].copy_from_slice(name);
        dst[name.len()] = 0;
        Ok(())
    })
}

/// Writes the location embedding of (`lat`, `lon`) into `out`, which holds `out_len` values.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gc_encode_location(
    model: *const GcModel,
    lat: f64,
    lon: f64,
    out: *mut f64,
    out_len: usize,
) -> GcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.state.embed_dim();
        if out_len != d {
            set_error(format!("output length {out_len} but embedding dimension is {d}"));
            return Err(GcStatus::Usage);
        }
        let e = m.state.encode_locations(&[coord(lat, lon)?]).map_err(from_error)?;
        slice_mut(out, d, "out")?.copy_from_slice(e.row(0));
        Ok(())
    })
}

/// Dense concept activations of one image embedding of length `dim`; `out` holds `k` values.
///
/// # Safety
/// `x` must hold `dim` doubles and `out` must hold `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn gc_image_concepts(
    model: *const GcModel,
    x: *const f64,
    dim: usize,
    out: *mut f64,
    k: usize,
) -> GcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if k != m.state.concepts.k() {
            set_error(format!(
                "output length {k} but the model has {} concepts",
                m.state.concepts.k()
            ));
            return Err(GcStatus::Usage);
        }
        let row = Matrix::new(1, dim, slice(x, dim, "x")?.to_vec()).map_err(from_error)?;
        let z = m.state.image_concepts(&row).map_err(from_error)?;
        slice_mut(out, k, "out")?.copy_from_slice(z.row(0));
        Ok(())
    })
}

/// Sparse explanation: indices and scores of the `k_top` strongest concepts, highest first.
/// `count` receives min(`k_top`, k); both output arrays must hold that many entries.
///
/// # Safety
/// `x` must hold `dim` doubles; `indices` and `scores` must hold `cap` entries each.
#[no_mangle]
pub unsafe extern "C" fn gc_explain(
    model: *const GcModel,
    x: *const f64,
    dim: usize,
    k_top: usize,
    indices: *mut usize,
    scores: *mut f64,
    cap: usize,
    count: *mut usize,
) -> GcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if k_top == 0 {
            set_error("k_top must be at least 1");
            return Err(GcStatus::Usage);
        }
        let row = Matrix::new(1, dim, slice(x, dim, "x")?.to_vec()).map_err(from_error)?;
        let z = m.state.image_concepts(&row).map_err(from_error)?;
        let keep = top_k_indices(z.row(0), k_top);
        if let Some(c) = count.as_mut() {
            *c = keep.len();
        }
        if cap < keep.len() {
            set_error("buffer too small");
            return Err(GcStatus::BufferTooSmall);
        }
        let idx = slice_mut(indices, keep.len(), "indices")?;
        let sc = slice_mut(scores, keep.len(), "scores")?;
        for (o, &j) in keep.iter().enumerate() {
            idx[o] = j;
            sc[o] = z.get(0, j);
        }
        Ok(())
    })
}

fn finish_gallery(m: &GcModel, coords: &[GeoCoordinate], out: *mut *mut GcGallery) -> Result<(), GcStatus> {
    let gallery = build_gallery(&m.state, coords).map_err(from_error)?;
    // SAFETY: checked non-null by callers.
    unsafe { *out = Box::into_raw(Box::new(GcGallery { gallery })) };
    Ok(())
}

/// Builds a gallery from `n` coordinates given as parallel latitude and longitude arrays.
///
/// # Safety
/// `lats` and `lons` must hold `n` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gc_gallery_build(
    model: *const GcModel,
    lats: *const f64,
    lons: *const f64,
    n: usize,
    out: *mut *mut GcGallery,
) -> GcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let la = slice(lats, n, "lats")?;
        let lo = slice(lons, n, "lons")?;
        let coords = la
            .iter()
            .zip(lo)
            .map(|(&a, &b)| coord(a, b))
            .collect::<Result<Vec<_>, _>>()?;
        finish_gallery(m, &coords, out)
    })
}

/// Builds a gallery over a uniform grid with spacing `resolution_deg`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gc_gallery_build_grid(
    model: *const GcModel,
    resolution_deg: f64,
    out: *mut *mut GcGallery,
) -> GcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let coords = sphere_grid(resolution_deg).map_err(from_error)?;
        finish_gallery(m, &coords, out)
    })
}

/// # Safety
/// `gallery` must come from a `gc_gallery_build*` call and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gc_gallery_free(gallery: *mut GcGallery) {
    if !gallery.is_null() {
        drop(Box::from_raw(gallery));
    }
}

/// Number of gallery rows, or 0 for a null handle.
///
/// # Safety
/// `gallery` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gc_gallery_len(gallery: *const GcGallery) -> usize {
    gallery.as_ref().map_or(0, |g| g.gallery.len())
}

/// Geo-localizes `n_views` image embeddings of length `dim`, stored row-major in `views`.
/// The views are averaged into one query.
///
/// # Safety
/// `views` must hold `n_views * dim` doubles; the three outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn gc_predict(
    model: *const GcModel,
    gallery: *const GcGallery,
    views: *const f64,
    n_views: usize,
    dim: usize,
    out_lat: *mut f64,
    out_lon: *mut f64,
    out_similarity: *mut f64,
) -> GcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let g = gallery.as_ref().ok_or_else(|| null("gallery"))?;
        if out_lat.is_null() || out_lon.is_null() || out_similarity.is_null() {
            return Err(null("output"));
        }
        let total = n_views.checked_mul(dim).ok_or_else(|| {
            set_error("view buffer size overflows");
            GcStatus::Usage
        })?;
        let flat = slice(views, total, "views")?;
        let rows: Vec<Vec<f64>> = if dim == 0 {
            Vec::new()
        } else {
            flat.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        let retriever = Retriever::new(&m.state, &g.gallery).map_err(from_error)?;
        let p = retriever.predict(&rows).map_err(from_error)?;
        *out_lat = p.coordinate.lat();
        *out_lon = p.coordinate.lon();
        *out_similarity = p.similarity;
        Ok(())
    })
}

/// Great-circle distance in km, or NaN when either coordinate is invalid.
#[no_mangle]
pub extern "C" fn gc_haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    match (GeoCoordinate::new(lat1, lon1), GeoCoordinate::new(lat2, lon2)) {
        (Ok(a), Ok(b)) => haversine_km(a, b),
        _ => f64::NAN,
    }
}
