//! Frozen reference outputs. Regenerate with `UPDATE_GOLDENS=1 cargo test --test golden`.

use std::path::PathBuf;

use copyforge::features::{synthetic_embed, FeatureTriple};
use copyforge::fusion::{fused_similarity, Fuser, FusionConfig};
use copyforge::ImageBuffer;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct Golden {
    triple: FeatureTriple,
    fused: Vec<f64>,
    inverse_similarity: f64,
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/checkerboard_golden.json")
}

fn fuser(seed: u64) -> Fuser {
    Fuser::new(FusionConfig {
        input_dim: 8,
        d_model: 64,
        num_layers: 1,
        num_heads: 4,
        seed,
        ..FusionConfig::default()
    })
    .unwrap()
}

fn compute() -> Golden {
    let board = ImageBuffer::checkerboard(16, 16, 4).unwrap();
    let triple = synthetic_embed(&board, 8, 0).unwrap();
    let inverse = synthetic_embed(&board.inverted(), 8, 0).unwrap();
    let f = fuser(0);
    Golden {
        fused: f.fuse(&triple).unwrap().vec,
        inverse_similarity: fused_similarity(&f, &triple, &inverse).unwrap(),
        triple,
    }
}

#[test]
fn checkerboard_goldens() {
    let now = compute();
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        std::fs::write(
            fixture(),
            serde_json::to_string_pretty(&now).unwrap() + "\n",
        )
        .unwrap();
    }
    let frozen: Golden =
        serde_json::from_str(&std::fs::read_to_string(fixture()).unwrap()).unwrap();
    assert_eq!(now.triple, frozen.triple);
    assert_eq!(now.fused.len(), 64);
    for (a, b) in now.fused.iter().zip(&frozen.fused) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
    assert!((now.inverse_similarity - frozen.inverse_similarity).abs() <= 1e-9);
}

#[test]
fn fuser_seed_changes_output() {
    let triple = compute().triple;
    let a = fuser(0).fuse(&triple).unwrap();
    let b = fuser(1).fuse(&triple).unwrap();
    assert_ne!(a, b);
}
