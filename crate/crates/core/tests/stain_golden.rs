use std::path::{Path, PathBuf};

use isup_grading::record::PatchPixels;
use isup_grading::stain::{sample_stain_params, stain_augment_pixels, AugmentationConfig, StainMode, StainParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240917;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stain")
}

fn centered_params() -> StainParams {
    sample_stain_params(&mut ChaCha8Rng::seed_from_u64(SEED), &AugmentationConfig::for_mode(StainMode::Centered))
}

/// A 32-pixel patch with hematoxylin-like nuclei on an eosin-like background.
fn tissue_patch() -> PatchPixels {
    let side = 32;
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let nucleus = [(8.0, 9.0), (22.0, 12.0), (14.0, 24.0)]
                .iter()
                .any(|&(cx, cy)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < 16.0);
            let px = if nucleus {
                [92 + (x % 7) as u8, 58 + (y % 5) as u8, 140]
            } else {
                [232 - (y / 2) as u8, 160 + (x % 9) as u8, 205 - (x / 3) as u8]
            };
            data.extend_from_slice(&px);
        }
    }
    PatchPixels::new(side, data).unwrap()
}

#[test]
fn centered_augmentation_matches_golden_fixture() {
    let dir = fixture_dir();
    let input = PatchPixels::load_png(&dir.join("input.png")).unwrap();
    let expected = PatchPixels::load_png(&dir.join("expected.png")).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("params.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"].as_u64(), Some(SEED));
    let recorded: StainParams = serde_json::from_value(meta["params"].clone()).unwrap();
    let params = centered_params();
    assert_eq!(params, recorded);
    assert_eq!(input, tissue_patch());
    assert!(stain_augment_pixels(&input, &params) == expected);
}

/// Rewrites the fixture; run with `cargo test --test stain_golden -- --ignored`
/// after an intentional change to the augmentation.
#[test]
#[ignore]
fn regenerate_golden_fixture() {
    let dir = fixture_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let input = tissue_patch();
    let params = centered_params();
    input.save_png(&dir.join("input.png")).unwrap();
    stain_augment_pixels(&input, &params).save_png(&dir.join("expected.png")).unwrap();
    let meta = serde_json::json!({ "seed": SEED, "rng": "ChaCha8", "mode": "centered", "params": params });
    std::fs::write(dir.join("params.json"), serde_json::to_string_pretty(&meta).unwrap() + "\n").unwrap();
}
