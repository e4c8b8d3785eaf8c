//! C ABI over `pmlm`.
//!
//! Every fallible call returns a [`PmlmStatus`]; on failure the message is
//! available from [`pmlm_last_error_message`] on the same thread. Handles are
//! opaque, created by `*_load`/`*_new`/`*_assemble` and released by the
//! matching `*_free`. Output arrays follow one convention: the caller passes
//! a buffer and its capacity, the callee always writes the required length
//! to `out_len` and returns `PMLM_STATUS_BUFFER_TOO_SMALL` if it does not fit.
//! Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pmlm::assembly::assemble_pmlm_input;
use pmlm::checkpoint::Checkpoint;
use pmlm::config::{DecodeConfig, RunConfig};
use pmlm::corpus::pack_pair;
use pmlm::finetune::decode_beam;
use pmlm::masking::{CorruptionPlan, FactorizationOrder};
use pmlm::{audit_leakage, Error, ModelConfig, Tokenizer, Transformer, Vocab};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmlmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Data = 5,
    Checkpoint = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Model dimensions accepted by [`pmlm_model_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PmlmModelConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub relative_buckets: usize,
    pub max_relative_distance: usize,
    pub dropout: f64,
}

impl From<PmlmModelConfig> for ModelConfig {
    fn from(c: PmlmModelConfig) -> Self {
        ModelConfig {
            layers: c.layers,
            hidden_size: c.hidden_size,
            heads: c.heads,
            ffn_size: c.ffn_size,
            vocab_size: c.vocab_size,
            max_positions: c.max_positions,
            relative_buckets: c.relative_buckets,
            max_relative_distance: c.max_relative_distance,
            dropout: c.dropout,
            use_relative_bias: true,
        }
    }
}

impl From<&ModelConfig> for PmlmModelConfig {
    fn from(c: &ModelConfig) -> Self {
        PmlmModelConfig {
            layers: c.layers,
            hidden_size: c.hidden_size,
            heads: c.heads,
            ffn_size: c.ffn_size,
            vocab_size: c.vocab_size,
            max_positions: c.max_positions,
            relative_buckets: c.relative_buckets,
            max_relative_distance: c.max_relative_distance,
            dropout: c.dropout,
        }
    }
}

/// Token vocabulary.
pub struct PmlmVocab {
    inner: Vocab,
}

/// 32-bit transformer with its run config.
pub struct PmlmModel {
    inner: Transformer<f32>,
    config: RunConfig,
}

/// One assembled PMLM instance.
pub struct PmlmInstance {
    inner: pmlm::PmlmInstance,
}

struct Failure(PmlmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Utf8 { .. } => PmlmStatus::Io,
            Error::Config(_) => PmlmStatus::Config,
            Error::Checkpoint(_) => PmlmStatus::Checkpoint,
            Error::NonFinite(_) | Error::NonFiniteGradient(_) => PmlmStatus::Numeric,
            _ => PmlmStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> FfiResult) -> PmlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PmlmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            PmlmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PmlmStatus::NullArgument, format!("{what} is null"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PmlmStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, cap: usize, out_len: *mut usize) -> FfiResult {
    if out_len.is_null() {
        return Err(null("out_len"));
    }
    *out_len = src.len();
    if cap < src.len() {
        return Err(Failure(
            PmlmStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pmlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or "" after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pmlm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a one-token-per-line vocabulary file.
#[no_mangle]
pub unsafe extern "C" fn pmlm_vocab_load(path: *const c_char, out: *mut *mut PmlmVocab) -> PmlmStatus {
    guard(|| {
        let inner = Vocab::load(&path_arg(path)?)?;
        put(out, PmlmVocab { inner })
    })
}

/// Entry count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pmlm_vocab_size(vocab: *const PmlmVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.inner.len())
}

/// Word-tokenizes NUL-terminated UTF-8 `text` (lowercased) into ids.
#[no_mangle]
pub unsafe extern "C" fn pmlm_vocab_encode(
    vocab: *const PmlmVocab,
    text: *const c_char,
    buf: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> PmlmStatus {
    guard(|| {
        let v = handle(vocab, "vocab")?;
        if text.is_null() {
            return Err(null("text"));
        }
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| Failure(PmlmStatus::InvalidArgument, "text is not UTF-8".into()))?;
        copy_out(&v.inner.encode(text, &Tokenizer::default()), buf, cap, out_len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn pmlm_vocab_free(vocab: *mut PmlmVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// The small two-layer configuration used in tests.
#[no_mangle]
pub extern "C" fn pmlm_model_config_tiny(vocab_size: usize) -> PmlmModelConfig {
    (&ModelConfig::tiny(vocab_size)).into()
}

/// Freshly initialized model.
#[no_mangle]
pub unsafe extern "C" fn pmlm_model_new(
    config: PmlmModelConfig,
    seed: u64,
    out: *mut *mut PmlmModel,
) -> PmlmStatus {
    guard(|| {
        let inner = Transformer::new(config.into(), seed)?;
        let config = RunConfig {
            model: inner.config.clone(),
            ..RunConfig::default()
        };
        put(out, PmlmModel { inner, config })
    })
}

#[no_mangle]
pub unsafe extern "C" fn pmlm_model_load(path: *const c_char, out: *mut *mut PmlmModel) -> PmlmStatus {
    guard(|| {
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let model = PmlmModel {
            inner: ck.model()?,
            config: ck.run_config()?,
        };
        put(out, model)
    })
}

#[no_mangle]
pub unsafe extern "C" fn pmlm_model_save(model: *const PmlmModel, path: *const c_char) -> PmlmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        Checkpoint::from_model(&m.inner, &m.config).save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Dimensions of a loaded model.
#[no_mangle]
pub unsafe extern "C" fn pmlm_model_config(
    model: *const PmlmModel,
    out: *mut PmlmModelConfig,
) -> PmlmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = (&m.inner.config).into();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pmlm_model_free(model: *mut PmlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Packs `[SOS] s1 [EOS] s2 [EOS]` and assembles the combined instance for a
/// factorization order given as concatenated step positions plus per-step
/// lengths. Every masked position becomes `[MASK]`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pmlm_instance_assemble(
    s1: *const u32,
    s1_len: usize,
    s2: *const u32,
    s2_len: usize,
    positions: *const usize,
    step_lens: *const usize,
    num_steps: usize,
    max_len: usize,
    out: *mut *mut PmlmInstance,
) -> PmlmStatus {
    guard(|| {
        let s1 = slice_arg(s1, s1_len, "s1")?;
        let s2 = slice_arg(s2, s2_len, "s2")?;
        let lens = slice_arg(step_lens, num_steps, "step_lens")?;
        let total: usize = lens.iter().sum();
        let positions = slice_arg(positions, total, "positions")?;
        let x = pack_pair(s1, s2, max_len)?;
        let mut steps = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &n in lens {
            steps.push(positions[at..at + n].to_vec());
            at += n;
        }
        let order = FactorizationOrder::new(steps, &x)?;
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        let inner = assemble_pmlm_input(&x, &order, &plan)?;
        put(out, PmlmInstance { inner })
    })
}

/// Row count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn pmlm_instance_len(inst: *const PmlmInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.inner.len())
}

#[no_mangle]
pub unsafe extern "C" fn pmlm_instance_tokens(
    inst: *const PmlmInstance,
    buf: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> PmlmStatus {
    guard(|| copy_out(&handle(inst, "instance")?.inner.token_ids, buf, cap, out_len))
}

#[no_mangle]
pub unsafe extern "C" fn pmlm_instance_positions(
    inst: *const PmlmInstance,
    buf: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> PmlmStatus {
    guard(|| copy_out(&handle(inst, "instance")?.inner.position_ids, buf, cap, out_len))
}

/// Row-major `len × len` attention mask, 1 where the row may attend the
/// column.
#[no_mangle]
pub unsafe extern "C" fn pmlm_instance_mask(
    inst: *const PmlmInstance,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> PmlmStatus {
    guard(|| {
        let inst = &handle(inst, "instance")?.inner;
        let n = inst.len();
        let flat: Vec<u8> = (0..n)
            .flat_map(|q| inst.attention_mask.row(q).iter().map(|&a| u8::from(a)))
            .collect();
        copy_out(&flat, buf, cap, out_len)
    })
}

/// Runs the leakage audit; `violations` receives the number of forbidden
/// paths found.
#[no_mangle]
pub unsafe extern "C" fn pmlm_instance_audit(
    inst: *const PmlmInstance,
    violations: *mut usize,
) -> PmlmStatus {
    guard(|| {
        let inst = &handle(inst, "instance")?.inner;
        if violations.is_null() {
            return Err(null("violations"));
        }
        *violations = audit_leakage(inst).violations.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pmlm_instance_free(inst: *mut PmlmInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Logits for every prediction row (`[M]` rows, then `[P]` rows, in row
/// order), row-major `rows × vocab`.
#[no_mangle]
pub unsafe extern "C" fn pmlm_model_target_logits(
    model: *const PmlmModel,
    inst: *const PmlmInstance,
    buf: *mut f32,
    cap: usize,
    out_len: *mut usize,
    out_rows: *mut usize,
) -> PmlmStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let inst: &pmlm::PmlmInstance = &handle(inst, "instance")?.inner;
        let rows = inst.target_rows();
        if !out_rows.is_null() {
            *out_rows = rows.len();
        }
        let out = m.eval(inst, &rows)?;
        copy_out(&out.logits.data, buf, cap, out_len)
    })
}

/// Beam-search decode of `src`; `max_out` of 0 uses the model's default.
/// The output excludes the terminating `[EOS]`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pmlm_generate(
    model: *const PmlmModel,
    src: *const u32,
    src_len: usize,
    beam: usize,
    alpha: f64,
    max_out: usize,
    buf: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> PmlmStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let src = slice_arg(src, src_len, "src")?;
        if beam == 0 {
            return Err(Failure(PmlmStatus::InvalidArgument, "beam must be at least 1".into()));
        }
        let cfg = DecodeConfig {
            beam,
            alpha,
            max_out: if max_out == 0 { m.config.decode.max_out } else { max_out },
        };
        let out = decode_beam(&m.inner, src, &cfg)?;
        copy_out(out.best.output(), buf, cap, out_len)
    })
}
