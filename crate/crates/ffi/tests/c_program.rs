use std::path::{Path, PathBuf};
use std::process::Command;

use isup_grading::grader::{Grader, GraderSpec, HeadKind};
use isup_grading::nn::{EncoderSpec, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Directory holding the library artifacts built alongside this test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = artifact_dir().join("libisup_grading_ffi.a");
    assert!(lib.is_file(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let built = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .output()
        .expect("C compiler runs");
    assert!(built.status.success(), "{}", String::from_utf8_lossy(&built.stderr));

    let model = Grader::new(GraderSpec {
        encoder: EncoderSpec::stride2(256, 8, &[4, 8]),
        attention_dim: 4,
        head: HeadKind::Ordinal,
    })
    .unwrap();
    let params: ParamSet<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(5));
    let ckpt = dir.path().join("grader.ckpt");
    model.checkpoint(&params).save(&ckpt).unwrap();

    let run = Command::new(&exe).arg(&ckpt).arg(dir.path().join("missing.ckpt")).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "exit {:?}: {stdout}{}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains(&format!("version {}", env!("CARGO_PKG_VERSION"))), "{stdout}");
    assert!(stdout.contains("patch 256"), "{stdout}");
}
