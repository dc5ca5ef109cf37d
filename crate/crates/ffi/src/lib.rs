//! C ABI over a trained embedding checkpoint and the evaluation metrics.
//!
//! Every function returns a [`DslStatus`]; on failure the message is kept
//! per thread and read with [`dsl_last_error_message`]. Images are passed
//! as `N×C×H×W` row-major `float` arrays with values in `[0,1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dynsub::checkpoint::load_model;
use dynsub::data::{Dataset, SampleRecord};
use dynsub::evaluation::{dice, nmi, normalized_embeddings, recall_at_k};
use dynsub::layout::SubspaceLayout;
use dynsub::model::EmbeddingModel;
use dynsub::wss::extract_attention;
use dynsub::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Dimension = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque handle to a loaded embedding model.
pub struct DslModel {
    model: EmbeddingModel<f32>,
    layout: SubspaceLayout,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DslStatus {
    match e {
        Error::Config(_) => DslStatus::Config,
        Error::Dimension(_) | Error::Index(_) => DslStatus::Dimension,
        Error::Io(_) => DslStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Image(_) => DslStatus::Format,
        _ => DslStatus::InvalidInput,
    }
}

struct Fail(DslStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DslStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DslStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let m = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", m.unwrap_or_default()));
            DslStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model_ref<'a>(model: *const DslModel) -> Result<&'a DslModel, Fail> {
    model.as_ref().ok_or_else(|| null("model"))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length without the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Loads an embedding checkpoint. On success `*out` owns a handle to
/// release with [`dsl_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsl_model_load(path: *const c_char, out: *mut *mut DslModel) -> DslStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(DslStatus::InvalidInput, "path is not UTF-8".into()))?;
        let loaded = load_model(Path::new(p))?;
        *out = Box::into_raw(Box::new(DslModel { model: loaded.model, layout: loaded.layout }));
        Ok(())
    })
}

/// Releases a handle from [`dsl_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dsl_model_free(model: *mut DslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the expected input shape and the embedding size.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsl_model_shape(
    model: *const DslModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    embedding_dim: *mut usize,
) -> DslStatus {
    guard(|| {
        let m = model_ref(model)?;
        if channels.is_null() || height.is_null() || width.is_null() || embedding_dim.is_null() {
            return Err(null("output pointer"));
        }
        let i = m.model.input;
        (*channels, *height, *width) = (i.channels, i.height, i.width);
        *embedding_dim = m.model.embedding_dim();
        Ok(())
    })
}

/// Writes the number of learners to `*k` and, if `sizes` holds at least
/// that many entries, the slice size of each learner.
///
/// # Safety
/// `model` must be a live handle, `k` valid, `sizes` valid for `cap`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn dsl_model_slices(model: *const DslModel, sizes: *mut usize, cap: usize, k: *mut usize) -> DslStatus {
    guard(|| {
        let m = model_ref(model)?;
        if k.is_null() {
            return Err(null("k"));
        }
        let s = m.layout.slice_sizes();
        *k = s.len();
        if cap < s.len() {
            return Err(Fail(DslStatus::BufferTooSmall, format!("need {} entries", s.len())));
        }
        slice_mut(sizes, cap, "sizes")?[..s.len()].copy_from_slice(&s);
        Ok(())
    })
}

fn as_dataset(m: &DslModel, images: &[f32], n: usize) -> Result<Dataset, Fail> {
    let i = m.model.input;
    let per = i.channels * i.height * i.width;
    if images.len() != n * per {
        return Err(Fail(DslStatus::Dimension, format!("expected {} values for {n} images", n * per)));
    }
    let samples = images
        .chunks(per)
        .enumerate()
        .map(|(k, img)| SampleRecord::new(format!("{k}"), img.to_vec(), i.channels, i.height, i.width, 0, None))
        .collect::<dynsub::Result<Vec<_>>>()?;
    Ok(Dataset::new(samples, vec!["input".into()])?)
}

unsafe fn images_arg<'a>(m: &DslModel, images: *const f32, n: usize) -> Result<&'a [f32], Fail> {
    let i = m.model.input;
    slice(images, n * i.channels * i.height * i.width, "images")
}

/// Embeds `n` images into `out` (`n × embedding_dim` floats). Each row is
/// L2-normalized with coordinates grouped by learner, in learner order.
///
/// # Safety
/// `images` must hold `n·C·H·W` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dsl_model_embed(
    model: *const DslModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> DslStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.model.embedding_dim();
        if out_len < n * d {
            return Err(Fail(DslStatus::BufferTooSmall, format!("need {} floats", n * d)));
        }
        let data = as_dataset(m, images_arg(m, images, n)?, n)?;
        let emb = normalized_embeddings(&m.model, &data)?;
        let out = slice_mut(out, out_len, "out")?;
        let order = m.layout.concat_order();
        for (row, src) in out.chunks_mut(d).zip(emb.chunks(d)) {
            for (o, &c) in row.iter_mut().zip(&order) {
                *o = src[c] as f32;
            }
        }
        Ok(())
    })
}

/// Attention maps of `n` images, upsampled to the input size, into `out`
/// (`n × H × W` floats in `[0,1]`).
///
/// # Safety
/// `images` must hold `n·C·H·W` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dsl_model_attention(
    model: *const DslModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> DslStatus {
    guard(|| {
        let m = model_ref(model)?;
        let hw = m.model.input.height * m.model.input.width;
        if out_len < n * hw {
            return Err(Fail(DslStatus::BufferTooSmall, format!("need {} floats", n * hw)));
        }
        let data = as_dataset(m, images_arg(m, images, n)?, n)?;
        let maps = extract_attention(&m.model, &data)?;
        let out = slice_mut(out, out_len, "out")?;
        for (row, map) in out.chunks_mut(hw).zip(&maps) {
            for (o, v) in row.iter_mut().zip(&map.upsampled) {
                *o = *v as f32;
            }
        }
        Ok(())
    })
}

/// Normalized mutual information between two labelings of `n` items.
///
/// # Safety
/// `labels` and `clusters` must hold `n` entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsl_nmi(labels: *const usize, clusters: *const usize, n: usize, out: *mut f64) -> DslStatus {
    guard(|| {
        let v = nmi(slice(labels, n, "labels")?, slice(clusters, n, "clusters")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Recall@k of `n` row-major `dim`-dimensional embeddings.
///
/// # Safety
/// `embeddings` must hold `n·dim` doubles, `labels` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn dsl_recall_at_k(
    embeddings: *const f64,
    n: usize,
    dim: usize,
    labels: *const usize,
    k: usize,
    out: *mut f64,
) -> DslStatus {
    guard(|| {
        let v = recall_at_k(slice(embeddings, n * dim, "embeddings")?, dim, slice(labels, n, "labels")?, k)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Dice overlap of two binary masks of `n` pixels.
///
/// # Safety
/// `a` and `b` must hold `n` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsl_dice(a: *const u8, b: *const u8, n: usize, out: *mut f64) -> DslStatus {
    guard(|| {
        let v = dice(slice(a, n, "a")?, slice(b, n, "b")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}
