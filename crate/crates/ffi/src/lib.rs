//! C interface to the protopool library.
//!
//! Datasets and models cross the boundary as opaque handles. Every call
//! returns a [`PpStatus`]; on failure the message is kept per thread and can
//! be copied out with [`pp_last_error`]. Handles must be released with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use protopool::analysis::prototype_activation;
use protopool::dataio::{self, generate_synthetic, read_dataset, write_dataset, DataError, FeatureMapDataset, SyntheticSpec};
use protopool::poolcore::{FeatureMap, ForwardMode, ModelConfig, ModelError};
use protopool::training::{
    evaluate, load_checkpoint, predict_logits, save_checkpoint, train, Checkpoint, CheckpointError, TrainConfig,
    TrainError,
};

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Numeric = 6,
    Panic = 7,
}

/// Opaque dataset handle.
pub struct PpDataset {
    inner: FeatureMapDataset,
}

/// Opaque model handle. Keeps the whole checkpoint so a load/save cycle
/// preserves phase and metadata.
pub struct PpModel {
    inner: Checkpoint,
}

/// Synthetic generator settings. Fill with [`pp_synth_spec_default`] and
/// adjust.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PpSynthSpec {
    pub classes: usize,
    pub parts: usize,
    pub parts_per_class: usize,
    pub shared_fraction: f64,
    pub sigma: f64,
    pub background_offset: f64,
    pub jitter: f64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

/// Model size and run length for [`pp_train`]. Everything else keeps the
/// library defaults. `epoch_budget < 0` means no cap.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PpTrainOptions {
    pub slots: usize,
    pub prototypes: usize,
    pub depth: usize,
    pub seed: u64,
    pub epoch_budget: i64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PpStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(PpStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Failure(PpStatus::InvalidArgument, msg.into())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Io { .. } => PpStatus::Io,
            DataError::Format(_) | DataError::Manifest(_) => PpStatus::Format,
            DataError::Invalid(_) | DataError::Spec(_) => PpStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io { .. } => PpStatus::Io,
            _ => PpStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Numeric(_) => PpStatus::Numeric,
            ModelError::Param(_) => PpStatus::InvalidArgument,
            ModelError::Dim(_) | ModelError::Graph(_) => PpStatus::Dimension,
        };
        Failure(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Config(_) => Failure(PpStatus::InvalidArgument, e.to_string()),
            TrainError::Diverged { .. } => Failure(PpStatus::Numeric, e.to_string()),
        }
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PpStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PpStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure::arg("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    if len < need {
        return Err(Failure::arg(format!("{what} holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn put<T>(p: *mut T, v: T) {
    if !p.is_null() {
        *p = v;
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL, or
/// 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn pp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn pp_synth_spec_default() -> PpSynthSpec {
    let s = SyntheticSpec::default();
    PpSynthSpec {
        classes: s.classes,
        parts: s.parts,
        parts_per_class: s.parts_per_class,
        shared_fraction: s.shared_fraction,
        sigma: s.sigma,
        background_offset: s.background_offset,
        jitter: s.jitter,
        height: s.height,
        width: s.width,
        depth: s.depth,
        samples_per_class: s.samples_per_class,
        seed: s.seed,
    }
}

/// # Safety
/// `spec` must be null or valid; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_synthetic(spec: *const PpSynthSpec, out: *mut *mut PpDataset) -> PpStatus {
    guard(|| {
        let s = *handle(spec, "spec")?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let spec = SyntheticSpec {
            classes: s.classes,
            parts: s.parts,
            parts_per_class: s.parts_per_class,
            shared_fraction: s.shared_fraction,
            sigma: s.sigma,
            background_offset: s.background_offset,
            jitter: s.jitter,
            height: s.height,
            width: s.width,
            depth: s.depth,
            samples_per_class: s.samples_per_class,
            seed: s.seed,
        };
        let (ds, _) = generate_synthetic(&spec)?;
        *out = Box::into_raw(Box::new(PpDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_read(path: *const c_char, out: *mut *mut PpDataset) -> PpStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let ds = read_dataset(&path)?;
        *out = Box::into_raw(Box::new(PpDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_write(ds: *const PpDataset, path: *const c_char) -> PpStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        write_dataset(&ds.inner, &path_arg(path)?)?;
        Ok(())
    })
}

/// Stratified train/validation split. Both outputs are new handles.
///
/// # Safety
/// `ds` must be a live handle; `train` and `val` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_split(
    ds: *const PpDataset,
    val_fraction: f64,
    seed: u64,
    train: *mut *mut PpDataset,
    val: *mut *mut PpDataset,
) -> PpStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if train.is_null() || val.is_null() {
            return Err(Failure::null("out"));
        }
        let (t, v) = dataio::split(&ds.inner, val_fraction, seed)?;
        *train = Box::into_raw(Box::new(PpDataset { inner: t }));
        *val = Box::into_raw(Box::new(PpDataset { inner: v }));
        Ok(())
    })
}

/// Number of samples, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_len(ds: *const PpDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Any of the output pointers may be null.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_dims(
    ds: *const PpDataset,
    height: *mut usize,
    width: *mut usize,
    depth: *mut usize,
    classes: *mut usize,
) -> PpStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let (h, w, d) = ds.inner.dims();
        put(height, h);
        put(width, w);
        put(depth, d);
        put(classes, ds.inner.num_classes());
        Ok(())
    })
}

/// Copies sample `index` (row-major `H·W·D`) into `map` and its label into
/// `label`.
///
/// # Safety
/// `ds` must be a live handle; `map` must hold `map_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_sample(
    ds: *const PpDataset,
    index: usize,
    map: *mut f64,
    map_len: usize,
    label: *mut usize,
) -> PpStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if index >= ds.inner.len() {
            return Err(Failure::arg(format!("sample {index} out of range ({} samples)", ds.inner.len())));
        }
        let s = ds.inner.sample(index);
        out_slice(map, map_len, s.map.data().len(), "map")?.copy_from_slice(s.map.data());
        put(label, s.label);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pp_dataset_free(ds: *mut PpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a model on `train`, early-stopping on `val`.
///
/// # Safety
/// Handles must be live; `options` valid; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_train(
    train_ds: *const PpDataset,
    val_ds: *const PpDataset,
    options: *const PpTrainOptions,
    out: *mut *mut PpModel,
) -> PpStatus {
    guard(|| {
        let tr = handle(train_ds, "train dataset")?;
        let va = handle(val_ds, "validation dataset")?;
        let o = *handle(options, "options")?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let classes = tr.inner.num_classes().max(va.inner.num_classes());
        let mut model = ModelConfig::new(classes, o.slots, o.prototypes, o.depth);
        model.input_depth = tr.inner.dims().2;
        let mut cfg = TrainConfig::new(model);
        cfg.seed = o.seed;
        cfg.epoch_budget = u32::try_from(o.epoch_budget).ok();
        let outcome = train(&tr.inner, &va.inner, &cfg)?;
        *out = Box::into_raw(Box::new(PpModel { inner: outcome.checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_model_load(path: *const c_char, out: *mut *mut PpModel) -> PpStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let ck = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(PpModel { inner: ck }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pp_model_save(model: *const PpModel, path: *const c_char) -> PpStatus {
    guard(|| {
        let m = handle(model, "model")?;
        save_checkpoint(&m.inner, &path_arg(path)?)?;
        Ok(())
    })
}

/// Any of the output pointers may be null.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pp_model_dims(
    model: *const PpModel,
    classes: *mut usize,
    slots: *mut usize,
    prototypes: *mut usize,
    depth: *mut usize,
    input_depth: *mut usize,
) -> PpStatus {
    guard(|| {
        let c = &handle(model, "model")?.inner.model.config;
        put(classes, c.classes);
        put(slots, c.slots);
        put(prototypes, c.prototypes);
        put(depth, c.depth);
        put(input_depth, c.input_depth);
        Ok(())
    })
}

/// Hardened prototype index of every slot, class-major (`C·K` entries).
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn pp_model_assignment(model: *const PpModel, out: *mut usize, len: usize) -> PpStatus {
    guard(|| {
        let a = handle(model, "model")?.inner.model.slots.assignment();
        out_slice(out, len, a.len(), "out")?.copy_from_slice(&a);
        Ok(())
    })
}

unsafe fn map_arg(map: *const f64, height: usize, width: usize, depth: usize) -> Result<FeatureMap, Failure> {
    if map.is_null() {
        return Err(Failure::null("map"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(depth))
        .ok_or_else(|| Failure::arg("map size overflows"))?;
    Ok(FeatureMap::new(height, width, depth, std::slice::from_raw_parts(map, n).to_vec())?)
}

/// Class logits of one feature map with hardened slots.
///
/// # Safety
/// `model` must be a live handle; `map` must hold `height·width·depth`
/// doubles; `logits` must hold `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pp_model_forward(
    model: *const PpModel,
    map: *const f64,
    height: usize,
    width: usize,
    depth: usize,
    logits: *mut f64,
    logits_len: usize,
) -> PpStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner.model;
        let z = map_arg(map, height, width, depth)?;
        let out = m.forward(&z, ForwardMode::Eval)?;
        out_slice(logits, logits_len, out.len(), "logits")?.copy_from_slice(&out);
        Ok(())
    })
}

/// Logits for every sample of `ds`, sample-major (`N·C` entries).
///
/// # Safety
/// Handles must be live; `logits` must hold `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pp_model_predict(
    model: *const PpModel,
    ds: *const PpDataset,
    logits: *mut f64,
    logits_len: usize,
) -> PpStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner.model;
        let ds = handle(ds, "dataset")?;
        let out = predict_logits(m, &ds.inner, 64)?;
        out_slice(logits, logits_len, out.len(), "logits")?.copy_from_slice(&out);
        Ok(())
    })
}

/// Top-1 accuracy on `ds`.
///
/// # Safety
/// Handles must be live; `accuracy` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_model_evaluate(model: *const PpModel, ds: *const PpDataset, accuracy: *mut f64) -> PpStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner.model;
        let ds = handle(ds, "dataset")?;
        if accuracy.is_null() {
            return Err(Failure::null("accuracy"));
        }
        *accuracy = evaluate(m, &ds.inner, 64)?.accuracy;
        Ok(())
    })
}

/// Similarity of `prototype` to every location of `map` (`height·width`
/// entries, row-major).
///
/// # Safety
/// `model` must be a live handle; `map` must hold `height·width·depth`
/// doubles; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pp_model_activation(
    model: *const PpModel,
    map: *const f64,
    height: usize,
    width: usize,
    depth: usize,
    prototype: usize,
    out: *mut f64,
    out_len: usize,
) -> PpStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner.model;
        let z = map_arg(map, height, width, depth)?;
        let act = prototype_activation(m, &z, prototype).map_err(|e| Failure::arg(e.to_string()))?;
        out_slice(out, out_len, act.len(), "out")?.copy_from_slice(&act);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pp_model_free(model: *mut PpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
