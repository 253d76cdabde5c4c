//! Compiles a C program against the generated header and the static
//! library, then runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "cachetrap.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "failed: %s (%s)\n", #cond, ct_last_error() ? ct_last_error() : ""); return 1; } } while (0)

int main(void) {
    uint32_t word = 0;
    CHECK(ct_flip_bit(0x3C00, 14, CT_MODE_XOR, CT_DTYPE_FP16, &word) == CT_STATUS_OK);
    CHECK(word == 0x7C00);
    CHECK(ct_flip_bit(0, 40, CT_MODE_XOR, CT_DTYPE_FP32, &word) == CT_STATUS_INPUT);
    CHECK(ct_last_error() != NULL);

    const char *cfg = "{\"n_layers\":2,\"n_heads\":2,\"n_kv_heads\":2,\"d_model\":8,\"head_dim\":4,"
                      "\"ffn_dim\":16,\"vocab_size\":16,\"max_seq\":16,\"cache_dtype\":\"fp16\"}";
    CtModel *model = NULL;
    CHECK(ct_model_synthetic(cfg, 42, &model) == CT_STATUS_OK);
    uint32_t tokens[4] = {1, 2, 3, 4};
    CtCache *cache = NULL;
    float logits[16];
    CHECK(ct_prefill(model, tokens, 4, &cache, logits, 16) == CT_STATUS_OK);
    CHECK(ct_cache_filled_len(cache) == 4);

    float clean[16], armed[16];
    CtBitCoordinate c = {1, 0, 1, 14, -1, CT_MODE_XOR};
    CHECK(ct_decode(model, cache, 5, NULL, false, clean, 16) == CT_STATUS_OK);
    CHECK(ct_decode(model, cache, 5, &c, false, armed, 16) == CT_STATUS_OK);
    CHECK(memcmp(clean, armed, sizeof clean) == 0);
    CHECK(ct_decode(model, cache, 5, &c, true, armed, 16) == CT_STATUS_OK);
    CHECK(memcmp(clean, armed, sizeof clean) != 0);

    CtFaultReceipt r;
    CHECK(ct_cache_apply_fault(cache, &c, &r) == CT_STATUS_OK);
    CHECK(r.changed && r.transition != 0);
    CHECK(ct_cache_revert_fault(cache, &r) == CT_STATUS_OK);

    CtPhysicalBit p;
    CHECK(ct_linear_address(model, &c, 4, 0, &p) == CT_STATUS_OK);
    CHECK(p.bit_offset == 14);
    CHECK(ct_default_bank_of(p.byte_address) < 4);

    ct_cache_free(cache);
    ct_model_free(model);
    printf("ok %s\n", ct_version());
    return 0;
}
"#;

/// `target/<profile>` from the running test binary (`.../deps/abi-xxxx`).
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links() {
    let lib = profile_dir().join("libcachetrap_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let bin = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();

    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler runs");
    assert!(status.success(), "compiling against cachetrap.h failed");

    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
