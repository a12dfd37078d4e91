use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "progrank.h"

int main(void) {
    double runs[3 * 2] = {1.0, 2.0, 1.0, 2.0, 1.0, 2.0};
    PgPenalties pen;
    if (pg_signature_penalties(runs, 3, 2, NULL, &pen) != PG_STATUS_OK) return 1;
    if (pen.p_rep != 0.0 || pen.p_dr != 0.0) return 2;

    PgPool *pool = pg_pool_new("q0");
    PgPenalties heavy = {0.1, 2.3, 0.0, 1e8, 6.0};
    pg_pool_add(pool, "clean-a", 0.80, PG_LABEL_CLEAN, NULL);
    pg_pool_add(pool, "poison", 0.95, PG_LABEL_POISON, &heavy);
    pg_pool_add(pool, "clean-b", 0.70, PG_LABEL_CLEAN, NULL);
    pg_pool_add(pool, "clean-c", 0.60, PG_LABEL_CLEAN, NULL);

    PgRerankConfig cfg = pg_rerank_config_default();
    cfg.k = 2;
    PgRanking *ranking = NULL;
    if (pg_rerank(pool, &cfg, &ranking) != PG_STATUS_OK) return 3;
    printf("%s %s\n", pg_ranking_top_k_id(ranking, 0), pg_ranking_top_k_id(ranking, 1));
    if (strcmp(pg_ranking_top_k_id(ranking, 0), "clean-a") != 0) return 4;

    if (pg_pool_add(pool, NULL, 0.0, PG_LABEL_CLEAN, NULL) != PG_STATUS_NULL_POINTER) return 5;
    char msg[64];
    if (pg_last_error_message(msg, sizeof msg) == 0) return 6;

    pg_ranking_free(ranking);
    pg_pool_free(pool);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(manifest.join("include/progrank.h")).unwrap();
    for symbol in ["pg_signature_penalties", "pg_rerank", "pg_dump_load", "PG_STATUS_PANIC", "typedef struct PgPool PgPool"] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }

    let tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let lib_dir = tmp.parent().unwrap().join(if cfg!(debug_assertions) { "debug" } else { "release" });
    let archive = lib_dir.join("libprogrank_ffi.a");
    assert!(archive.exists(), "static library missing at {}", archive.display());

    let src = tmp.join("ffi_smoke.c");
    let exe = tmp.join("ffi_smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cannot run the C compiler");
    assert!(status.success(), "C compilation failed");

    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "clean-a clean-b");
}
