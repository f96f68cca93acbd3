//! Compiles a C program against the generated header and links it with the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "egflow.h"

int main(void) {
    uint32_t labels[] = {0, 0, 1, 1, 0, 0, 1, 1, 0, 1};
    EgflowTrainOptions opts = egflow_train_options_default();
    opts.steps = 10;
    opts.batch_size = 16;
    opts.integrator_steps = 10;
    EgflowModel *model = NULL;
    if (egflow_train(labels, 5, 2, 2, &opts, &model) != EGFLOW_OK) {
        fprintf(stderr, "train: %s\n", egflow_last_error());
        return 1;
    }
    size_t n = 0, c = 0;
    if (egflow_model_dims(model, &n, &c) != EGFLOW_OK || n != 2 || c != 2) return 2;
    uint32_t out[8];
    size_t ties = 0;
    if (egflow_sample(model, 4, 1, out, &ties) != EGFLOW_OK) return 3;
    for (int i = 0; i < 8; i++) if (out[i] > 1) return 4;
    double bound = 0.0, se = 0.0;
    uint32_t alpha[] = {1, 1};
    if (egflow_loglik(model, alpha, 4, 0.8, 2, &bound, NULL, &se) != EGFLOW_OK) return 5;
    if (!isfinite(bound) || !(se >= 0.0)) return 6;
    EgflowModel *missing = NULL;
    if (egflow_model_load("/nonexistent/model.ck", &missing) != EGFLOW_ERR_IO) return 7;
    if (egflow_last_error() == NULL) return 8;
    egflow_model_free(model);
    printf("ok\n");
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler available; skipping");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include = manifest.join("include");
    // The test binary lives in <target>/<profile>/deps.
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libegflow_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let bin = dir.path().join("client");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror"])
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to compile or link");
    let out = Command::new(&bin).output().unwrap();
    assert!(
        out.status.success(),
        "C client exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
