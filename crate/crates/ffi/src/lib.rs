//! C ABI over the cachetrap runtime: model and cache handles, fault
//! injection, classification decode and the address model.
//!
//! Conventions:
//! - every fallible call returns [`CtStatus`]; on failure `ct_last_error`
//!   describes it and out-parameters are left untouched
//! - handles returned through out-parameters are owned by the caller and
//!   released with the matching `*_free`
//! - panics never cross the boundary; they surface as the `Panic` status

use std::ffi::CStr;
use std::os::raw::c_char;
use std::panic::AssertUnwindSafe;

use cachetrap::bitflip::{self, BitCoordinate, FaultReceipt, InjectionMode, TokenPos, Transition};
use cachetrap::config::{CacheDtype, ModelConfig};
use cachetrap::data::Verbalizer;
use cachetrap::engine::{self, FaultHook};
use cachetrap::fault_model::{self, DramMapping, MemoryLayoutModel};
use cachetrap::kv_cache::{CacheLayout, KvCache};
use cachetrap::model::{self, Model, TargetChannel};

mod error;

pub use error::{ct_last_error, CtStatus};
use error::{fail, guard, Failure};

/// Opaque model handle.
pub struct CtModel {
    model: Model,
    /// Present for demo models.
    verbalizer: Option<Verbalizer>,
}

/// Opaque KV-cache handle.
pub struct CtCache {
    cache: KvCache,
}

/// `token_index < 0` targets the last prefix token.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtBitCoordinate {
    pub layer: u32,
    pub kv_head: u32,
    pub channel: u32,
    pub bit: u32,
    pub token_index: i64,
    /// 0 = xor, 1 = set to one.
    pub mode: u32,
}

/// Record of an applied fault; pass back to `ct_cache_revert_fault`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtFaultReceipt {
    pub coordinate: CtBitCoordinate,
    pub resolved_token: u64,
    pub word_offset: u64,
    pub old_word: u32,
    pub new_word: u32,
    pub changed: bool,
    /// 0 = none, 1 = 0 -> 1, 2 = 1 -> 0.
    pub transition: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtPhysicalBit {
    pub byte_address: u64,
    pub bit_offset: u32,
}

pub const CT_MODE_XOR: u32 = 0;
pub const CT_MODE_SET_TO_ONE: u32 = 1;
pub const CT_DTYPE_FP32: u32 = 0;
pub const CT_DTYPE_FP16: u32 = 1;

static VERSION: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ct_version() -> *const c_char {
    VERSION.as_ptr() as *const c_char
}

fn mode_from(raw: u32) -> Result<InjectionMode, Failure> {
    match raw {
        CT_MODE_XOR => Ok(InjectionMode::Xor),
        CT_MODE_SET_TO_ONE => Ok(InjectionMode::SetToOne),
        other => fail(CtStatus::InvalidArgument, format!("unknown injection mode {other}")),
    }
}

fn dtype_from(raw: u32) -> Result<CacheDtype, Failure> {
    match raw {
        CT_DTYPE_FP32 => Ok(CacheDtype::Fp32),
        CT_DTYPE_FP16 => Ok(CacheDtype::Fp16),
        other => fail(CtStatus::InvalidArgument, format!("unknown cache dtype {other}")),
    }
}

impl CtBitCoordinate {
    fn to_core(self) -> Result<BitCoordinate, Failure> {
        Ok(BitCoordinate {
            layer: self.layer as usize,
            kv_head: self.kv_head as usize,
            channel: self.channel as usize,
            bit: self.bit,
            token_pos: if self.token_index < 0 {
                TokenPos::LastPrefix
            } else {
                TokenPos::Index(self.token_index as usize)
            },
            mode: mode_from(self.mode)?,
        })
    }

    fn from_core(c: &BitCoordinate) -> Self {
        Self {
            layer: c.layer as u32,
            kv_head: c.kv_head as u32,
            channel: c.channel as u32,
            bit: c.bit,
            token_index: match c.token_pos {
                TokenPos::LastPrefix => -1,
                TokenPos::Index(t) => t as i64,
            },
            mode: match c.mode {
                InjectionMode::Xor => CT_MODE_XOR,
                InjectionMode::SetToOne => CT_MODE_SET_TO_ONE,
            },
        }
    }
}

impl CtFaultReceipt {
    fn from_core(r: &FaultReceipt) -> Self {
        Self {
            coordinate: CtBitCoordinate::from_core(&r.coordinate),
            resolved_token: r.resolved_token as u64,
            word_offset: r.word_offset as u64,
            old_word: r.old_word,
            new_word: r.new_word,
            changed: r.changed,
            transition: match r.transition {
                Transition::None => 0,
                Transition::ZeroToOne => 1,
                Transition::OneToZero => 2,
            },
        }
    }

    fn to_core(self) -> Result<FaultReceipt, Failure> {
        Ok(FaultReceipt {
            coordinate: self.coordinate.to_core()?,
            resolved_token: self.resolved_token as usize,
            word_offset: self.word_offset as usize,
            old_word: self.old_word,
            new_word: self.new_word,
            changed: self.changed,
            transition: match self.transition {
                0 => Transition::None,
                1 => Transition::ZeroToOne,
                2 => Transition::OneToZero,
                other => return fail(CtStatus::InvalidArgument, format!("unknown transition {other}")),
            },
        })
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(CtStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(CtStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(CtStatus::NullPointer, format!("{what} is NULL"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CtStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(CtStatus::NullPointer, format!("{what} is NULL"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies logits into a caller buffer that must hold the full vocabulary.
unsafe fn write_logits(logits: &[f32], out: *mut f32, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Ok(());
    }
    if out_len < logits.len() {
        return fail(
            CtStatus::BufferTooSmall,
            format!("logit buffer holds {out_len}, vocabulary is {}", logits.len()),
        );
    }
    std::ptr::copy_nonoverlapping(logits.as_ptr(), out, logits.len());
    Ok(())
}

fn parse_config(json: &str) -> Result<ModelConfig, Failure> {
    serde_json::from_str(json).map_err(|e| Failure(CtStatus::Config, format!("model config: {e}")))
}

fn hand_out(model: Model, verbalizer: Option<Verbalizer>, out: *mut *mut CtModel) {
    unsafe { *out = Box::into_raw(Box::new(CtModel { model, verbalizer })) };
}

/// Loads a CTKV v1 checkpoint from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_load(path: *const c_char, out: *mut *mut CtModel) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let path = c_str(path, "path")?;
        borrow_mut(out, "out")?;
        let f = std::fs::File::open(path).map_err(|e| Failure(CtStatus::Io, format!("{path}: {e}")))?;
        let model = model::load_model(std::io::BufReader::new(f))?;
        hand_out(model, None, out);
        Ok(())
    }))
}

/// Loads a CTKV v1 checkpoint from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_load_bytes(data: *const u8, len: usize, out: *mut *mut CtModel) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let bytes = slice(data, len, "data")?;
        borrow_mut(out, "out")?;
        hand_out(model::load_model(bytes)?, None, out);
        Ok(())
    }))
}

/// Deterministic synthetic model from a JSON model config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_synthetic(config_json: *const c_char, seed: u64, out: *mut *mut CtModel) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let cfg = parse_config(c_str(config_json, "config_json")?)?;
        borrow_mut(out, "out")?;
        hand_out(model::build_synthetic_model(cfg, seed)?, None, out);
        Ok(())
    }))
}

/// Hand-wired demo model; `targets_json` is an array of
/// `{"layer", "kv_head", "channel"}`, one per class.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_model_trojan_demo(
    config_json: *const c_char,
    targets_json: *const c_char,
    seed: u64,
    out: *mut *mut CtModel,
) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let cfg = parse_config(c_str(config_json, "config_json")?)?;
        let targets: Vec<TargetChannel> = serde_json::from_str(c_str(targets_json, "targets_json")?)
            .map_err(|e| Failure(CtStatus::Config, format!("targets: {e}")))?;
        borrow_mut(out, "out")?;
        let demo = model::build_trojan_demo_model(cfg, &targets, seed)?;
        hand_out(demo.model, Some(demo.verbalizer), out);
        Ok(())
    }))
}

/// # Safety
/// `model` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ct_model_free(model: *mut CtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_model_vocab_size(model: *const CtModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.vocab_size)
}

/// Label tokens of a demo model's verbalizer, copied into `out`. Writes the
/// class count to `count` even when `out` is too small.
///
/// # Safety
/// `model` must be a live handle; `out` must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn ct_model_label_tokens(
    model: *const CtModel,
    out: *mut u32,
    out_len: usize,
    count: *mut usize,
) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let m = borrow(model, "model")?;
        let v = m
            .verbalizer
            .as_ref()
            .ok_or_else(|| Failure(CtStatus::InvalidArgument, "model has no built-in verbalizer".into()))?;
        *borrow_mut(count, "count")? = v.num_classes();
        if out_len < v.num_classes() {
            return fail(CtStatus::BufferTooSmall, format!("{} classes", v.num_classes()));
        }
        if out.is_null() {
            return fail(CtStatus::NullPointer, "out is NULL");
        }
        std::ptr::copy_nonoverlapping(v.label_tokens().as_ptr(), out, v.num_classes());
        Ok(())
    }))
}

/// Runs the prefix and returns a new cache; optionally writes the logits at
/// the last prefix position (`logits` may be NULL).
///
/// # Safety
/// `tokens` must hold `n_tokens` ids; `logits` NULL or `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn ct_prefill(
    model: *const CtModel,
    tokens: *const u32,
    n_tokens: usize,
    out_cache: *mut *mut CtCache,
    logits: *mut f32,
    logits_len: usize,
) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let m = borrow(model, "model")?;
        let tokens = slice(tokens, n_tokens, "tokens")?;
        borrow_mut(out_cache, "out_cache")?;
        let p = engine::prefill(&m.model, tokens)?;
        write_logits(&p.logits, logits, logits_len)?;
        *out_cache = Box::into_raw(Box::new(CtCache { cache: p.cache }));
        Ok(())
    }))
}

/// # Safety
/// `cache` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ct_cache_free(cache: *mut CtCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// # Safety
/// `cache` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_cache_filled_len(cache: *const CtCache) -> usize {
    cache.as_ref().map_or(0, |c| c.cache.filled_len())
}

/// Size of the cache arena in bytes.
///
/// # Safety
/// `cache` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_cache_byte_len(cache: *const CtCache) -> usize {
    cache.as_ref().map_or(0, |c| c.cache.as_bytes().len())
}

/// Copies the raw cache arena into `out`.
///
/// # Safety
/// `cache` must be a live handle; `out` must hold `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ct_cache_copy_bytes(cache: *const CtCache, out: *mut u8, out_len: usize) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let bytes = borrow(cache, "cache")?.cache.as_bytes();
        if out_len < bytes.len() {
            return fail(CtStatus::BufferTooSmall, format!("arena is {} bytes", bytes.len()));
        }
        if out.is_null() {
            return fail(CtStatus::NullPointer, "out is NULL");
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
        Ok(())
    }))
}

/// Applies a single-bit fault to the value cache.
///
/// # Safety
/// `cache` must be a live handle; `coord` and `receipt` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ct_cache_apply_fault(
    cache: *mut CtCache,
    coord: *const CtBitCoordinate,
    receipt: *mut CtFaultReceipt,
) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let c = borrow_mut(cache, "cache")?;
        let coord = borrow(coord, "coord")?.to_core()?;
        let out = borrow_mut(receipt, "receipt")?;
        let r = bitflip::apply_fault(&mut c.cache, &coord)?;
        *out = CtFaultReceipt::from_core(&r);
        Ok(())
    }))
}

/// Restores the word a receipt recorded.
///
/// # Safety
/// `cache` must be a live handle; `receipt` from `ct_cache_apply_fault` on it.
#[no_mangle]
pub unsafe extern "C" fn ct_cache_revert_fault(cache: *mut CtCache, receipt: *const CtFaultReceipt) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let c = borrow_mut(cache, "cache")?;
        let r = borrow(receipt, "receipt")?.to_core()?;
        if r.word_offset >= c.cache.layout().total_words() {
            return fail(CtStatus::Address, format!("word offset {} outside the arena", r.word_offset));
        }
        bitflip::revert_fault(&mut c.cache, &r);
        Ok(())
    }))
}

fn hook_from(coord: *const CtBitCoordinate, armed: bool) -> Result<FaultHook, Failure> {
    let coordinate = match unsafe { coord.as_ref() } {
        Some(c) => Some(c.to_core()?),
        None => None,
    };
    Ok(FaultHook { coordinate, armed })
}

/// One decode step for `token`. With `coord` non-NULL and `armed` the fault
/// is applied for this step only; the cache is restored before returning.
///
/// # Safety
/// Handles must be live; `coord` NULL or valid; `logits` holds `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn ct_decode(
    model: *const CtModel,
    cache: *mut CtCache,
    token: u32,
    coord: *const CtBitCoordinate,
    armed: bool,
    logits: *mut f32,
    logits_len: usize,
) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let m = borrow(model, "model")?;
        let c = borrow_mut(cache, "cache")?;
        if logits.is_null() {
            return fail(CtStatus::NullPointer, "logits is NULL");
        }
        let hook = hook_from(coord, armed)?;
        let (out, _) = engine::decode_with_hook(&m.model, &mut c.cache, token, &hook)?;
        write_logits(&out, logits, logits_len)
    }))
}

/// Classification decode over `n_classes` label tokens (NULL uses the demo
/// model's verbalizer). Writes the predicted class.
///
/// # Safety
/// Handles must be live; `label_tokens` NULL or `n_classes` ids.
#[no_mangle]
pub unsafe extern "C" fn ct_decode_classify(
    model: *const CtModel,
    cache: *mut CtCache,
    token: u32,
    label_tokens: *const u32,
    n_classes: usize,
    coord: *const CtBitCoordinate,
    armed: bool,
    predicted: *mut u32,
) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let m = borrow(model, "model")?;
        let c = borrow_mut(cache, "cache")?;
        let out = borrow_mut(predicted, "predicted")?;
        let verbalizer = if label_tokens.is_null() {
            m.verbalizer
                .clone()
                .ok_or_else(|| Failure(CtStatus::NullPointer, "label_tokens is NULL and model has no verbalizer".into()))?
        } else {
            Verbalizer::new(slice(label_tokens, n_classes, "label_tokens")?.to_vec())?
        };
        let hook = hook_from(coord, armed)?;
        let r = engine::decode_classify(&m.model, &mut c.cache, token, &verbalizer, &hook)?;
        *out = r.predicted as u32;
        Ok(())
    }))
}

/// Flips or sets bit `bit` of a stored word.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_flip_bit(word: u32, bit: u32, mode: u32, dtype: u32, out: *mut u32) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let out = borrow_mut(out, "out")?;
        *out = bitflip::flip_bit(word, bit, mode_from(mode)?, dtype_from(dtype)?)?;
        Ok(())
    }))
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_read_bit(word: u32, bit: u32, dtype: u32, out: *mut u32) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let out = borrow_mut(out, "out")?;
        *out = bitflip::read_bit(word, bit, dtype_from(dtype)?)?;
        Ok(())
    }))
}

/// Byte address and bit of the value word `coord` targets, for a cache with
/// `filled_len` tokens placed at `arena_base` (in words).
///
/// # Safety
/// `model`, `coord` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ct_linear_address(
    model: *const CtModel,
    coord: *const CtBitCoordinate,
    filled_len: usize,
    arena_base: u64,
    out: *mut CtPhysicalBit,
) -> CtStatus {
    guard(AssertUnwindSafe(|| {
        let m = borrow(model, "model")?;
        let coord = borrow(coord, "coord")?.to_core()?;
        let out = borrow_mut(out, "out")?;
        coord.check_bounds(&m.model.config)?;
        let layout = MemoryLayoutModel::new(CacheLayout::new(&m.model.config), arena_base);
        let p = fault_model::linear_address(&coord, filled_len, &layout)?;
        *out = CtPhysicalBit {
            byte_address: p.byte_address,
            bit_offset: p.bit_offset,
        };
        Ok(())
    }))
}

/// Bank of `address` under the default four-bank XOR-fold mapping.
#[no_mangle]
pub extern "C" fn ct_default_bank_of(address: u64) -> u32 {
    DramMapping::default().bank_of(address)
}
