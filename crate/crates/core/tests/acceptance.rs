//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when
//! output capture is on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use copyforge::calibration::{
    grid_search_weights, select_type_threshold_scores, sweep_threshold, LabeledScoreSet, Objective,
    ScoreEntry, ScoreLabel, ThresholdGrid,
};
use copyforge::decision::{
    classify, decide_triples, validate_config, weighted_score, CopyType, DecisionConfig,
};
use copyforge::features::{FeatureTriple, SyntheticEmbedder};
use copyforge::fusion::{Fuser, FusionConfig};
use copyforge::gallery::{copy_rate, index_images, ssim, top_k, top_k_image, SSIM_C1, SSIM_C2};
use copyforge::perturb::{
    apply, robustness_report, standard_suite, Attack, PerturbationSpec, Side,
};
use copyforge::rapta::{
    filter_and_rank, grid_position, grid_position_normalized, nms, sampling_distribution, BBox,
    RegionProposal,
};
use copyforge::ImageBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_setup(d: usize) -> (SyntheticEmbedder, Fuser) {
    let backend = SyntheticEmbedder::new(d, 0).unwrap();
    let fuser = Fuser::new(FusionConfig {
        input_dim: d,
        d_model: d,
        ..FusionConfig::default()
    })
    .unwrap();
    (backend, fuser)
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer {
    ImageBuffer::new(h, w, (0..h * w * 3).map(|_| r.random()).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn naive_cos(a: &[f32], b: &[f32]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    dot(&a, &b) / (dot(&a, &a).sqrt() * dot(&b, &b).sqrt())
}

/// Straight transcription of the two-threshold decision.
fn two_threshold_oracle(s_fus: f64, s_vis: f64, s_clip: f64, s_tex: f64) -> CopyType {
    if s_fus > 0.938 {
        let s_w = 0.24 * s_vis + 0.38 * s_clip + 0.38 * s_tex;
        if s_w > 0.970 {
            CopyType::Retrieve
        } else {
            CopyType::Style
        }
    } else {
        CopyType::NotCopy
    }
}

fn decision_oracle() -> Check {
    let start = Instant::now();
    let cfg = DecisionConfig::default();
    let mut r = rng(1);
    for i in 0..1000 {
        // half the tuples cluster near the thresholds
        let near = i % 2 == 0;
        let draw = |r: &mut ChaCha8Rng| {
            if near {
                r.random_range(0.90..1.0)
            } else {
                r.random_range(-1.0..1.0)
            }
        };
        let t = [draw(&mut r), draw(&mut r), draw(&mut r), draw(&mut r)];
        let got = classify(t[0], [t[1], t[2], t[3]], &cfg).map_err(|e| e.to_string())?;
        let want = two_threshold_oracle(t[0], t[1], t[2], t[3]);
        ensure!(
            got.copy_type == want,
            "tuple {t:?}: got {:?}, oracle {want:?}",
            got.copy_type
        );
        ensure!(
            got.is_copy == (want != CopyType::NotCopy),
            "tuple {t:?}: gate mismatch"
        );
    }
    let (_, fuser) = small_setup(16);
    for _ in 0..200 {
        let base: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let jitter = r.random_range(0.0..0.3f32);
        let other: Vec<Vec<f32>> = base
            .iter()
            .map(|s| {
                s.iter()
                    .map(|v| v + jitter * r.random_range(-1.0..1.0f32))
                    .collect()
            })
            .collect();
        let g = FeatureTriple::new(base[0].clone(), base[1].clone(), base[2].clone()).unwrap();
        let q = FeatureTriple::new(other[0].clone(), other[1].clone(), other[2].clone()).unwrap();
        let v = decide_triples(&g, &q, &fuser, &cfg).map_err(|e| e.to_string())?;
        let (fg, fq) = (fuser.fuse(&g).unwrap(), fuser.fuse(&q).unwrap());
        let s_fus = dot(&fg.vec, &fq.vec);
        let want = two_threshold_oracle(
            s_fus,
            naive_cos(&g.vis, &q.vis),
            naive_cos(&g.clip, &q.clip),
            naive_cos(&g.tex, &q.tex),
        );
        ensure!(
            v.copy_type == want,
            "triple pair: got {:?}, oracle {want:?}",
            v.copy_type
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(())
}

fn operating_point() -> Check {
    let cfg = DecisionConfig::default();
    ensure!(cfg.tau1 == 0.938, "tau1 = {}", cfg.tau1);
    ensure!(cfg.tau2 == 0.970, "tau2 = {}", cfg.tau2);
    ensure!(cfg.omega == [0.24, 0.38, 0.38], "omega = {:?}", cfg.omega);
    ensure!(
        (cfg.omega.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
        "omega sums to {}",
        cfg.omega.iter().sum::<f64>()
    );
    ensure!(
        validate_config(&cfg).is_empty(),
        "violations {:?}",
        validate_config(&cfg)
    );
    let run = copyforge::cli::RunConfig::default();
    ensure!(run.decision == cfg, "run config default differs");
    run.validate().map_err(|e| e.to_string())
}

fn worked_arithmetic() -> Check {
    let cfg = DecisionConfig::default();
    let s_bar = weighted_score([0.90, 0.95, 0.95], cfg.omega).map_err(|e| e.to_string())?;
    ensure!((s_bar - 0.938).abs() <= 1e-9, "s_bar = {s_bar}");
    let v = classify(0.95, [0.90, 0.95, 0.95], &cfg).map_err(|e| e.to_string())?;
    ensure!(v.copy_type == CopyType::Style, "verdict {:?}", v.copy_type);
    let v = classify(1.0, [1.0, 1.0, 1.0], &cfg).map_err(|e| e.to_string())?;
    ensure!(
        v.copy_type == CopyType::Retrieve,
        "verdict {:?}",
        v.copy_type
    );
    Ok(())
}

fn calibration_recovery() -> Check {
    let grid = ThresholdGrid::default()
        .values()
        .map_err(|e| e.to_string())?;
    let mut r = rng(3);
    for trial in 0..20 {
        let hi_neg = r.random_range(0.55..0.90);
        let lo_pos = hi_neg + 0.05;
        let mut samples: Vec<(f64, bool)> = (0..300)
            .map(|_| (r.random_range(0.5..=hi_neg), false))
            .collect();
        samples.extend((0..100).map(|_| (r.random_range(lo_pos..=1.0), true)));
        let max_neg = samples
            .iter()
            .filter(|s| !s.1)
            .map(|s| s.0)
            .fold(f64::MIN, f64::max);
        let min_pos = samples
            .iter()
            .filter(|s| s.1)
            .map(|s| s.0)
            .fold(f64::MAX, f64::min);
        let start = Instant::now();
        let res =
            sweep_threshold(&samples, &grid, Objective::Accuracy).map_err(|e| e.to_string())?;
        ensure!(
            start.elapsed() < Duration::from_secs(10),
            "sweep took {:?}",
            start.elapsed()
        );
        ensure!(
            res.best_accuracy == 1.0,
            "trial {trial}: accuracy {}",
            res.best_accuracy
        );
        ensure!(
            res.best_tau >= max_neg && res.best_tau < min_pos,
            "trial {trial}: tau {} outside [{max_neg}, {min_pos})",
            res.best_tau
        );
    }

    // only s_clip separates; s_vis and s_tex are noise, with extreme rows planted
    let mut entries = Vec::new();
    for _ in 0..300 {
        let noise = |r: &mut ChaCha8Rng| r.random_range(0.0..=1.0);
        let (v, t) = (noise(&mut r), noise(&mut r));
        entries.push(ScoreEntry::new(
            0.5,
            [v, r.random_range(0.80..=0.82), t],
            ScoreLabel::Copy,
        ));
        let (v, t) = (noise(&mut r), noise(&mut r));
        entries.push(ScoreEntry::new(
            0.5,
            [v, r.random_range(0.77..=0.79), t],
            ScoreLabel::Noncopy,
        ));
    }
    entries.push(ScoreEntry::new(0.5, [0.0, 0.80, 0.0], ScoreLabel::Copy));
    entries.push(ScoreEntry::new(0.5, [1.0, 0.79, 1.0], ScoreLabel::Noncopy));
    let set = LabeledScoreSet::new(entries).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let res =
        grid_search_weights(&set, 0.02, &grid, Objective::Accuracy).map_err(|e| e.to_string())?;
    ensure!(
        start.elapsed() < Duration::from_secs(10),
        "weight grid took {:?}",
        start.elapsed()
    );
    let feasible_max = res
        .cells
        .iter()
        .filter(|c| c.accuracy == 1.0)
        .map(|c| c.w_clip)
        .fold(f64::MIN, f64::max);
    ensure!(
        res.best.accuracy == 1.0,
        "best accuracy {}",
        res.best.accuracy
    );
    ensure!(
        res.best.w_clip == feasible_max && feasible_max == 1.0,
        "best w_clip {} (max feasible {feasible_max})",
        res.best.w_clip
    );
    Ok(())
}

fn type_threshold_midpoint() -> Check {
    let t =
        select_type_threshold_scores(&[0.98, 0.99], &[0.94, 0.96]).map_err(|e| e.to_string())?;
    ensure!((t.tau - 0.970).abs() <= 1e-12, "tau_w = {}", t.tau);
    ensure!(t.clean, "separation not reported clean");
    Ok(())
}

/// Independent NMS: repeatedly take the most confident remaining box.
fn nms_oracle(boxes: &[RegionProposal], tau: f64) -> Vec<String> {
    let mut remaining: Vec<&RegionProposal> = boxes.iter().collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for (i, b) in remaining.iter().enumerate() {
            if b.confidence > remaining[best].confidence {
                best = i;
            }
        }
        let chosen = remaining.remove(best);
        let iou = |a: &BBox, b: &BBox| {
            let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
            let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
            let inter = iw * ih;
            inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
        };
        remaining.retain(|b| iou(&chosen.bbox, &b.bbox) <= tau);
        kept.push(chosen.class_label.clone());
    }
    kept
}

fn rapta_pipeline() -> Check {
    let mut r = rng(4);
    for inst in 0..200 {
        let boxes: Vec<RegionProposal> = (0..20)
            .map(|i| {
                let (x, y) = (r.random_range(0.0..80.0), r.random_range(0.0..80.0));
                let (w, h) = (r.random_range(5.0..40.0), r.random_range(5.0..40.0));
                // coarse confidences force ties
                let conf = (r.random_range(0..20) as f64) / 20.0;
                RegionProposal::new(BBox::new(x, y, x + w, y + h), format!("b{i}"), conf)
            })
            .collect();
        let got: Vec<String> = nms(&boxes, 0.5)
            .into_iter()
            .map(|b| b.class_label)
            .collect();
        ensure!(
            got == nms_oracle(&boxes, 0.5),
            "instance {inst}: nms differs from oracle"
        );
    }

    let b = |c: f64| RegionProposal::new(BBox::new(0.0, 0.0, 1.0, 1.0), format!("{c}"), c);
    let kept = filter_and_rank(&[b(0.7), b(0.70000001), b(0.69), b(0.9)], 0.7, 10);
    let labels: Vec<_> = kept.iter().map(|p| p.class_label.as_str()).collect();
    ensure!(
        labels == ["0.9", "0.70000001"],
        "strict filter kept {labels:?}"
    );

    let names = [
        ["top-left", "top-center", "top-right"],
        ["middle-left", "center", "middle-right"],
        ["bottom-left", "bottom-center", "bottom-right"],
    ];
    for (row, line) in names.iter().enumerate() {
        for (col, name) in line.iter().enumerate() {
            let (cx, cy) = (30.0 * col as f64 + 15.0, 30.0 * row as f64 + 15.0);
            let pos = grid_position(
                &BBox::new(cx - 5.0, cy - 5.0, cx + 5.0, cy + 5.0),
                90,
                90,
                3,
                3,
            )
            .map_err(|e| e.to_string())?;
            ensure!(pos.token == *name, "center ({cx}, {cy}) -> {}", pos.token);
        }
    }
    for (u, v, want) in [
        (1.0 / 3.0, 0.5, "center"),
        (2.0 / 3.0, 0.5, "middle-right"),
        (0.0, 0.0, "top-left"),
        (1.0, 1.0, "bottom-right"),
        (0.5, 2.0 / 3.0, "bottom-center"),
    ] {
        let got = grid_position_normalized(u, v, 3, 3)
            .map_err(|e| e.to_string())?
            .token;
        ensure!(got == want, "boundary ({u}, {v}) -> {got}, want {want}");
    }

    for _ in 0..1000 {
        let n = r.random_range(1..12);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, pi, _) =
            sampling_distribution(&scores, r.random_range(0.25..8.0)).map_err(|e| e.to_string())?;
        let total: f64 = pi.iter().sum();
        ensure!((total - 1.0).abs() <= 1e-9, "pi sums to {total}");
    }
    for pool in 0..100 {
        let n = r.random_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..1.0)).collect();
        let argmax = (0..n).fold(0, |best, i| if scores[i] > scores[best] { i } else { best });
        if scores[argmax] <= 0.0 {
            continue;
        }
        let mut last = 0.0;
        for gamma in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let (_, pi, _) = sampling_distribution(&scores, gamma).map_err(|e| e.to_string())?;
            ensure!(
                pi[argmax] + 1e-12 >= last,
                "pool {pool}: mass on argmax fell at gamma {gamma}"
            );
            last = pi[argmax];
        }
    }
    Ok(())
}

fn fusion_contract() -> Check {
    let mut r = rng(5);
    let (_, fuser) = small_setup(32);
    for _ in 0..200 {
        let s = |r: &mut ChaCha8Rng| {
            (0..32)
                .map(|_| r.random_range(-2.0..2.0f32))
                .collect::<Vec<_>>()
        };
        let t = FeatureTriple::new(s(&mut r), s(&mut r), s(&mut r)).unwrap();
        let f = fuser.fuse(&t).map_err(|e| e.to_string())?;
        let norm = dot(&f.vec, &f.vec).sqrt();
        ensure!((norm - 1.0).abs() <= 1e-6, "norm {norm}");
        let same = f.cosine(&fuser.fuse(&t.clone()).unwrap()).unwrap();
        ensure!((same - 1.0).abs() <= 1e-9, "self similarity {same}");
    }
    let fixture =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/checkerboard_golden.json");
    let golden: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&fixture).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let triple: FeatureTriple =
        serde_json::from_value(golden["triple"].clone()).map_err(|e| e.to_string())?;
    let frozen: Vec<f64> =
        serde_json::from_value(golden["fused"].clone()).map_err(|e| e.to_string())?;
    let golden_fuser = Fuser::new(FusionConfig {
        input_dim: 8,
        d_model: 64,
        num_layers: 1,
        num_heads: 4,
        seed: 0,
        ..FusionConfig::default()
    })
    .unwrap();
    for _ in 0..2 {
        let now = golden_fuser.fuse(&triple).map_err(|e| e.to_string())?;
        ensure!(now.vec.len() == frozen.len(), "golden length");
        let worst = now
            .vec
            .iter()
            .zip(&frozen)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure!(worst <= 1e-9, "golden drift {worst}");
    }
    Ok(())
}

fn perturbation_suite() -> Check {
    let suite = standard_suite(0);
    ensure!(suite.len() == 10, "{} specs", suite.len());
    ensure!(
        suite
            .iter()
            .any(|s| s.attack == Attack::Crop { fraction: 0.20 }),
        "crop 0.20 missing"
    );
    ensure!(
        suite
            .iter()
            .any(|s| s.attack == Attack::Occlude { fraction: 0.10 }),
        "occlude 0.10 missing"
    );
    ensure!(
        suite
            .iter()
            .any(|s| s.attack == Attack::Rotate { degrees: 30.0 }),
        "rotate 30 missing"
    );
    let mut r = rng(6);
    for _ in 0..5 {
        let img = random_image(&mut r, 20, 27);
        for kind in [Attack::FlipH, Attack::FlipV] {
            let spec = PerturbationSpec::new(kind, 0);
            let twice = apply(&apply(&img, &spec).unwrap(), &spec).unwrap();
            ensure!(twice == img, "{} is not an involution", spec.name());
        }
        let id = apply(
            &img,
            &PerturbationSpec::new(Attack::SaltPepper { amount: 0.0 }, 3),
        )
        .unwrap();
        ensure!(id == img, "salt_pepper at zero amount changed the image");
        for spec in standard_suite(r.random()) {
            let a = apply(&img, &spec).map_err(|e| e.to_string())?;
            let b = apply(&img, &spec).map_err(|e| e.to_string())?;
            ensure!(
                a.raw_bytes() == b.raw_bytes(),
                "{} not deterministic",
                spec.name()
            );
            ensure!(
                a.pixels().iter().all(|v| (0.0..=1.0).contains(v)),
                "{} out of range",
                spec.name()
            );
        }
    }
    let (backend, fuser) = small_setup(16);
    let g = random_image(&mut r, 24, 24);
    let rows = robustness_report(
        &g,
        &g,
        &suite,
        &backend,
        &fuser,
        &DecisionConfig::default(),
        Side::Generated,
    )
    .map_err(|e| e.to_string())?;
    ensure!(rows.len() == 11, "{} report rows", rows.len());
    Ok(())
}

fn retrieval() -> Check {
    let (backend, fuser) = small_setup(32);
    let mut r = rng(7);
    for gallery_seed in 0..3 {
        let images: Vec<(String, ImageBuffer)> = (0..50)
            .map(|i| {
                (
                    format!("g{gallery_seed}-{i:02}"),
                    random_image(&mut r, 16, 16),
                )
            })
            .collect();
        let index = index_images(&images, &backend, &fuser).map_err(|e| e.to_string())?;
        for q in 0..5 {
            let query = fuser
                .fuse_image(&backend, &random_image(&mut r, 16, 16))
                .unwrap();
            let got = top_k(&query, &index, 50).map_err(|e| e.to_string())?;
            let mut want: Vec<(f64, &str)> = index
                .entries
                .iter()
                .map(|e| (dot(&query.vec, &e.fused.vec), e.id.as_str()))
                .collect();
            want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            for (g, w) in got.iter().zip(&want) {
                ensure!(
                    g.id == w.1,
                    "gallery {gallery_seed} query {q}: ranking differs"
                );
                ensure!(
                    (g.score - w.0).abs() <= 1e-12,
                    "score {} vs {}",
                    g.score,
                    w.0
                );
            }
        }
        let hits =
            top_k_image(&images[17].1, &index, &backend, &fuser, 5).map_err(|e| e.to_string())?;
        ensure!(
            hits[0].id == images[17].0,
            "self query ranked {}",
            hits[0].id
        );
        ensure!(
            (hits[0].score - 1.0).abs() <= 1e-9,
            "self score {}",
            hits[0].score
        );

        let queries: Vec<(String, ImageBuffer)> = images
            .iter()
            .take(20)
            .map(|(id, img)| {
                let spec = PerturbationSpec::new(
                    Attack::GaussianNoise {
                        sigma: r.random_range(0.0..0.4),
                    },
                    1,
                );
                (id.clone(), apply(img, &spec).unwrap())
            })
            .collect();
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let cfg = DecisionConfig {
                tau1: 0.5 + 0.05 * step as f64,
                ..DecisionConfig::default()
            };
            let rate = copy_rate(&queries, &index, &backend, &fuser, &cfg)
                .map_err(|e| e.to_string())?
                .rate;
            ensure!(
                (0.0..=1.0).contains(&rate) && rate <= last,
                "copy rate {rate} after {last}"
            );
            last = rate;
        }
    }
    Ok(())
}

fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut total = 0.0;
    let mut count = 0.0;
    for c in 0..3 {
        for y0 in 0..=h - 8 {
            for x0 in 0..=w - 8 {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + 8 {
                    for x in x0..x0 + 8 {
                        sa += a.get(y, x, c);
                        sb += b.get(y, x, c);
                    }
                }
                let (ma, mb) = (sa / 64.0, sb / 64.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + 8 {
                    for x in x0..x0 + 8 {
                        let (da, db) = (a.get(y, x, c) - ma, b.get(y, x, c) - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / 64.0, vb / 64.0, cov / 64.0);
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1.0;
            }
        }
    }
    total / count
}

fn ssim_baseline() -> Check {
    let mut r = rng(8);
    for pair in 0..10 {
        let a = random_image(&mut r, 32, 32);
        let b = random_image(&mut r, 32, 32);
        let self_sim = ssim(&a, &a).map_err(|e| e.to_string())?;
        ensure!((self_sim - 1.0).abs() <= 1e-12, "ssim(a, a) = {self_sim}");
        let ab = ssim(&a, &b).map_err(|e| e.to_string())?;
        let ba = ssim(&b, &a).map_err(|e| e.to_string())?;
        ensure!(
            (ab - ba).abs() <= 1e-12,
            "pair {pair}: asymmetric {ab} vs {ba}"
        );
        let oracle = naive_ssim(&a, &b);
        ensure!(
            (ab - oracle).abs() <= 1e-9,
            "pair {pair}: {ab} vs oracle {oracle}"
        );
    }
    Ok(())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn cli_determinism() -> Check {
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("detect", vec!["detect", "--manifest", "pairs.jsonl"]),
        ("calibrate", vec!["calibrate", "--manifest", "pairs.jsonl"]),
        ("index", vec!["index", "--gallery", "gallery"]),
        (
            "retrieve",
            vec!["retrieve", "--query", "q.png", "--index", "idx"],
        ),
        (
            "copy-rate",
            vec!["retrieve", "--query", "gallery", "--index", "idx"],
        ),
        (
            "robustness",
            vec![
                "robustness",
                "--generated",
                "q.png",
                "--reference",
                "gallery/a.png",
            ],
        ),
        (
            "augment",
            vec![
                "augment",
                "--image",
                "q.png",
                "--prompt",
                "a street",
                "--detections",
                "boxes.json",
            ],
        ),
        ("perturb", vec!["perturb", "--image", "q.png"]),
    ];
    let run = |ws: &Path, args: &[&str], out: &str| -> Check {
        let mut full = vec!["--config", "run.toml", "--seed", "11", "--out", out];
        full.extend_from_slice(args);
        let o = Command::new(env!("CARGO_BIN_EXE_copyforge"))
            .env_remove("COPYFORGE_CACHE_DIR")
            .current_dir(ws)
            .args(&full)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        Ok(())
    };
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let ws = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = ws.path();
        let mut r = rng(9);
        fs::create_dir(p.join("gallery")).unwrap();
        for name in ["a", "b", "c"] {
            random_image(&mut r, 24, 24)
                .save_png(&p.join(format!("gallery/{name}.png")))
                .unwrap();
        }
        fs::copy(p.join("gallery/a.png"), p.join("q.png")).unwrap();
        fs::write(
            p.join("run.toml"),
            "[backend]\ndim = 32\n[fusion]\ninput_dim = 32\nd_model = 32\n",
        )
        .unwrap();
        fs::write(
            p.join("pairs.jsonl"),
            concat!(
                "{\"query\":\"q.png\",\"reference\":\"gallery/a.png\",\"label\":\"retrieve\"}\n",
                "{\"query\":\"q.png\",\"reference\":\"gallery/b.png\",\"label\":\"noncopy\"}\n",
                "{\"query\":\"gallery/c.png\",\"reference\":\"gallery/b.png\",\"label\":\"noncopy\"}\n",
            ),
        )
        .unwrap();
        fs::write(
            p.join("boxes.json"),
            r#"[{"box":{"x1":2,"y1":2,"x2":10,"y2":10},"class_label":"car","confidence":0.9},
               {"box":{"x1":12,"y1":12,"x2":22,"y2":22},"class_label":"bike","confidence":0.8}]"#,
        )
        .unwrap();
        run(
            p,
            &["index", "--gallery", "gallery", "--index", "idx"],
            "setup",
        )?;
        let mut per_command = BTreeMap::new();
        for (name, args) in &commands {
            let out = format!("out-{name}");
            run(p, args, &out)?;
            per_command.insert(*name, tree(&p.join(&out)));
        }
        outputs.push(per_command);
    }
    for (name, _) in &commands {
        let (a, b) = (&outputs[0][name], &outputs[1][name]);
        ensure!(!a.is_empty(), "{name} wrote nothing");
        ensure!(a == b, "{name}: outputs differ between runs");
    }
    Ok(())
}

fn main() {
    let criteria: [Criterion; 11] = [
        (
            "decision matches straight-line two-threshold oracle",
            decision_oracle,
        ),
        ("default operating point", operating_point),
        ("worked weighted-score arithmetic", worked_arithmetic),
        (
            "calibration recovers planted separation",
            calibration_recovery,
        ),
        ("type threshold midpoint", type_threshold_midpoint),
        ("region-aware prompt pipeline", rapta_pipeline),
        ("fusion contract", fusion_contract),
        ("perturbation suite", perturbation_suite),
        ("retrieval and copy rate", retrieval),
        ("ssim baseline", ssim_baseline),
        ("end-to-end cli determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(()) => println!("PASS  {name} ({:.2?})", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
