//! C ABI over the `hyena-distill` core.
//!
//! Every function returns an [`HdStatus`]; on failure the message is kept
//! per thread and read back with [`hd_last_error_message`]. Models are
//! opaque [`HdModel`] handles at 32-bit precision, released with
//! [`hd_model_free`]. Token ids are `uint32_t` in `0..258` (bytes, then BOS
//! and EOS).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hyena_distill::evalbench::{token_nll, KahanSum};
use hyena_distill::mixers::MixerKind;
use hyena_distill::model::{Capture, Model, ModelConfig};
use hyena_distill::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Shape = 4,
    Numeric = 5,
    Config = 6,
    Io = 7,
    Corrupt = 8,
    MixerKind = 9,
    Precision = 10,
    Data = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HdMixer {
    Attention = 0,
    Hyena = 1,
}

/// Opaque decoder model.
pub struct HdModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> HdStatus {
    match e {
        Error::Shape(_) => HdStatus::Shape,
        Error::Numeric(_) | Error::Diverged { .. } => HdStatus::Numeric,
        Error::Config(_) | Error::Graph(_) | Error::Bench(_) => HdStatus::Config,
        Error::Io(_) => HdStatus::Io,
        Error::Corrupt(_) | Error::Magic { .. } => HdStatus::Corrupt,
        Error::MixerKind { .. } => HdStatus::MixerKind,
        Error::Precision { .. } => HdStatus::Precision,
        Error::Provenance(_) | Error::Data(_) => HdStatus::Data,
    }
}

struct Fail(HdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const HdModel) -> Result<&'a Model<f32>, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(HdStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn tokens_arg(tokens: *const u32, n: usize) -> Result<Vec<usize>, Fail> {
    if n == 0 {
        return Err(Fail(
            HdStatus::InvalidArgument,
            "empty token sequence".into(),
        ));
    }
    if tokens.is_null() {
        return Err(null("tokens"));
    }
    Ok(std::slice::from_raw_parts(tokens, n)
        .iter()
        .map(|&t| t as usize)
        .collect())
}

unsafe fn write_out(src: &[f32], out: *mut f32, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len < src.len() {
        return Err(Fail(
            HdStatus::BufferTooSmall,
            format!("output needs {} floats, buffer holds {out_len}", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn store_model(m: Model<f32>, out: *mut *mut HdModel) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(HdModel { inner: m }));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Seeded attention decoder over the byte vocabulary.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn hd_model_new_attention(
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    context_len: usize,
    seed: u64,
    out: *mut *mut HdModel,
) -> HdStatus {
    guard(|| {
        let cfg = ModelConfig::attention(d_model, n_heads, n_layers, context_len).with_seed(seed);
        store_model(Model::build(cfg)?, out)
    })
}

/// Seeded Hyena decoder with default operator settings.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn hd_model_new_hyena(
    d_model: usize,
    n_layers: usize,
    context_len: usize,
    seed: u64,
    out: *mut *mut HdModel,
) -> HdStatus {
    guard(|| {
        let cfg = ModelConfig::hyena(d_model, n_layers, context_len).with_seed(seed);
        store_model(Model::build(cfg)?, out)
    })
}

/// Loads a 32-bit checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn hd_model_load(path: *const c_char, out: *mut *mut HdModel) -> HdStatus {
    guard(|| {
        let path = path_arg(path)?;
        store_model(Model::load(path)?, out)
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hd_model_save(model: *const HdModel, path: *const c_char) -> HdStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hd_model_free(model: *mut HdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Architecture of a model.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn hd_model_info(
    model: *const HdModel,
    mixer: *mut HdMixer,
    d_model: *mut usize,
    n_layers: *mut usize,
    vocab_size: *mut usize,
    context_len: *mut usize,
) -> HdStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = m.config();
        if let Some(p) = mixer.as_mut() {
            *p = match m.kind() {
                MixerKind::Attention => HdMixer::Attention,
                MixerKind::Hyena => HdMixer::Hyena,
            };
        }
        for (p, v) in [
            (d_model, c.d_model),
            (n_layers, c.n_layers),
            (vocab_size, c.vocab_size),
            (context_len, c.context_len),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Hex SHA-256 of the parameters, NUL-terminated. Needs 65 bytes.
///
/// # Safety
/// `model` must be a live handle and `buf` point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hd_model_digest(
    model: *const HdModel,
    buf: *mut c_char,
    len: usize,
) -> HdStatus {
    guard(|| {
        let d = model_ref(model)?.digest();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len <= d.len() {
            return Err(Fail(
                HdStatus::BufferTooSmall,
                format!("digest needs {} bytes", d.len() + 1),
            ));
        }
        std::ptr::copy_nonoverlapping(d.as_ptr(), buf.cast::<u8>(), d.len());
        *buf.add(d.len()) = 0;
        Ok(())
    })
}

/// Next-token logits, `n * vocab_size` floats row-major.
///
/// # Safety
/// `tokens` must hold `n` ids and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn hd_model_logits(
    model: *const HdModel,
    tokens: *const u32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> HdStatus {
    guard(|| {
        let m = model_ref(model)?;
        let tokens = tokens_arg(tokens, n)?;
        let logits = m.forward(&tokens, Capture::None)?.logits;
        write_out(logits.data(), out, out_len)
    })
}

/// Residual stream after layer `layer` (0-based), `n * d_model` floats.
///
/// # Safety
/// `tokens` must hold `n` ids and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn hd_model_hidden(
    model: *const HdModel,
    tokens: *const u32,
    n: usize,
    layer: usize,
    out: *mut f32,
    out_len: usize,
) -> HdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if layer >= m.n_layers() {
            return Err(Fail(
                HdStatus::InvalidArgument,
                format!("layer {layer} out of range for {} layers", m.n_layers()),
            ));
        }
        let tokens = tokens_arg(tokens, n)?;
        let hidden = m.hidden_states(&tokens, layer + 1)?;
        write_out(hidden[layer].data(), out, out_len)
    })
}

/// Byte tokens of `text` wrapped in BOS/EOS, `len + 2` ids.
///
/// # Safety
/// `text` must hold `len` bytes and `out` `out_len` ids.
#[no_mangle]
pub unsafe extern "C" fn hd_tokenize(
    text: *const u8,
    len: usize,
    out: *mut u32,
    out_len: usize,
) -> HdStatus {
    guard(|| {
        if text.is_null() && len > 0 {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(text, len)
        };
        let c = hyena_distill::data::tokenize(bytes);
        if out_len < c.len() {
            return Err(Fail(
                HdStatus::BufferTooSmall,
                format!("{} ids need room", c.len()),
            ));
        }
        for (i, &t) in c.tokens().iter().enumerate() {
            *out.add(i) = t as u32;
        }
        Ok(())
    })
}

/// Perplexity of `text` over consecutive non-overlapping windows of
/// `context_len + 1` tokens; a trailing partial window is dropped.
///
/// # Safety
/// `text` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hd_perplexity(
    model: *const HdModel,
    text: *const u8,
    len: usize,
    context_len: usize,
    out: *mut f64,
) -> HdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if text.is_null() {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if context_len == 0 || context_len > m.config().context_len {
            return Err(Fail(
                HdStatus::InvalidArgument,
                format!("context_len must be in 1..={}", m.config().context_len),
            ));
        }
        let c = hyena_distill::data::tokenize(std::slice::from_raw_parts(text, len));
        let ids: Vec<usize> = c.tokens().iter().map(|&t| t as usize).collect();
        let mut sum = KahanSum::default();
        let mut count = 0usize;
        for w in ids.chunks_exact(context_len + 1) {
            let logits = m.forward(&w[..context_len], Capture::None)?.logits;
            token_nll(&logits, &w[1..])?
                .into_iter()
                .for_each(|v| sum.add(v));
            count += context_len;
        }
        if count == 0 {
            return Err(Fail(
                HdStatus::InvalidArgument,
                "text shorter than one window".into(),
            ));
        }
        *out = (sum.value() / count as f64).exp();
        Ok(())
    })
}
