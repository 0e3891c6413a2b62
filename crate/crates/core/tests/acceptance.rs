//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Criteria 6 to 8 share one desk-scale pipeline run (with both ablation
//! variants) plus a second run of the same configuration for the
//! bit-identity check; expect several CPU minutes.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isup_grading::grade::{decode_ordinal, encode_ordinal, isup_from_gleason, GleasonGrade, IsupGrade};
use isup_grading::grader::{attention_weights, or_loss, AttentionHead, Grader, GraderSpec, HeadKind};
use isup_grading::metrics::{quadratic_kappa, roc_auc, ConfusionMatrix};
use isup_grading::mil::{bag_loss, topk_bag_pool, BagTarget, InstanceClassifier};
use isup_grading::nn::loss::l2_normalize_rows;
use isup_grading::nn::{AdamConfig, CosineSchedule, EncoderSpec, OptimizerState, ParamSet};
use isup_grading::pipeline::{run_pipeline, PipelineConfig, RunManifest, RUN_MANIFEST};
use isup_grading::record::PatchPixels;
use isup_grading::ssl::{SslModel, NORM_EPS, SslSpec, TeacherStudentState, ViewBatch};
use isup_grading::stain::{hed_to_rgb, rgb_to_hed, sample_stain_params, stain_augment_pixels, AugmentationConfig, StainMode, StainParams};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- oracles

fn oracle_topk(probs: &[[f64; 4]], k: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for j in 0..3 {
        let mut col: Vec<f64> = probs.iter().map(|r| r[j + 1]).collect();
        col.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut s = 0.0;
        for v in &col[..k] {
            s += v;
        }
        out[j] = s / k as f64;
    }
    out
}

fn oracle_kappa(o: &[[u64; 6]; 6]) -> f64 {
    let n: f64 = o.iter().flatten().sum::<u64>() as f64;
    let rows: Vec<f64> = (0..6).map(|i| (0..6).map(|j| o[i][j]).sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..6).map(|j| (0..6).map(|i| o[i][j]).sum::<u64>() as f64).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..6 {
        for j in 0..6 {
            let w = ((i as f64 - j as f64) / 5.0).powi(2);
            num += w * o[i][j] as f64;
            den += w * rows[i] * cols[j] / n;
        }
    }
    1.0 - num / den
}

fn oracle_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn oracle_bce(p: &[f64], y: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(y).map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum();
    s / p.len() as f64
}

fn oracle_attention(v: &[Vec<f64>], b: &[f64], w: &[f64], emb: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = emb
        .iter()
        .map(|e| {
            (0..b.len())
                .map(|a| w[a] * (v[a].iter().zip(e).map(|(x, y)| x * y).sum::<f64>() + b[a]).tanh())
                .sum()
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.iter().map(|e| e / z).collect()
}

fn criterion_1() -> Verdict {
    const N: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 6];

    let mut pool_exact = true;
    for _ in 0..N {
        let l = rng.random_range(1..=12);
        let k = rng.random_range(1..=l);
        let rows: Vec<[f64; 4]> = (0..l)
            .map(|_| {
                let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
                let s: f64 = raw.iter().sum();
                raw.map(|v| v / s)
            })
            .collect();
        let m = Array2::from_shape_fn((l, 4), |(i, j)| rows[i][j]);
        let got = topk_bag_pool(m.view(), k).unwrap();
        pool_exact &= got == oracle_topk(&rows, k);
    }

    for _ in 0..N {
        let mut counts = [[0u64; 6]; 6];
        loop {
            for row in counts.iter_mut() {
                for c in row.iter_mut() {
                    *c = if rng.random_bool(0.4) { rng.random_range(0..8) } else { 0 };
                }
            }
            let cm = ConfusionMatrix { counts };
            let rows = cm.row_totals();
            let cols = cm.col_totals();
            let den: f64 = (0..6)
                .flat_map(|i| (0..6).map(move |j| (i, j)))
                .map(|(i, j)| ((i as f64 - j as f64) / 5.0).powi(2) * rows[i] as f64 * cols[j] as f64)
                .sum();
            if cm.total() > 0 && den > 0.0 {
                break;
            }
        }
        let got = quadratic_kappa(&ConfusionMatrix { counts }).unwrap();
        worst[0] = worst[0].max((got - oracle_kappa(&counts)).abs());
    }

    for _ in 0..N {
        let n = rng.random_range(2..40);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let got = roc_auc(&labels, &scores).unwrap();
        worst[1] = worst[1].max((got - oracle_auc(&labels, &scores)).abs());
    }

    for _ in 0..N {
        let p: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.001..0.999));
        let g = rng.random_range(0..6u8);
        let y: Vec<f64> = (0..5).map(|i| if i < g as usize { 1.0 } else { 0.0 }).collect();
        let got = or_loss(&p, IsupGrade::new(g).unwrap());
        worst[2] = worst[2].max((got - oracle_bce(&p, &y)).abs());
    }

    for _ in 0..N {
        let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.001..0.999));
        let y: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..2u8));
        let got = bag_loss(&b, &BagTarget { y });
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        worst[3] = worst[3].max((got - oracle_bce(&b, &yf)).abs());
    }

    for _ in 0..N {
        let e = rng.random_range(1..6);
        let a = rng.random_range(1..6);
        let l = rng.random_range(1..10);
        let head = AttentionHead {
            embedding_dim: e,
            hidden: a,
        };
        let mut params: ParamSet<f64> = head.init(&mut rng);
        for p in params.params_mut() {
            p.value.mapv_inplace(|_| rng.random_range(-1.5..1.5));
        }
        let emb = Array2::from_shape_fn((l, e), |_| rng.random_range(-2.0..2.0));
        let got = attention_weights(&head, params.params(), emb.view()).unwrap();
        let v: Vec<Vec<f64>> = params.params()[0].value.outer_iter().map(|r| r.iter().copied().collect()).collect();
        let bias: Vec<f64> = params.params()[1].value.iter().copied().collect();
        let w: Vec<f64> = params.params()[2].value.iter().copied().collect();
        let rows: Vec<Vec<f64>> = emb.outer_iter().map(|r| r.to_vec()).collect();
        let want = oracle_attention(&v, &bias, &w, &rows);
        for (g, o) in got.iter().zip(&want) {
            worst[4] = worst[4].max((g - o).abs());
        }
    }

    let tol = 1e-9;
    let pass = pool_exact && worst[..5].iter().all(|&e| e <= tol);
    verdict(
        pass,
        format!(
            "{N} instances per operation; top-k pooling exact: {pool_exact}; max |err| kappa {:.1e}, AUC {:.1e}, or_loss {:.1e}, bag_loss {:.1e}, attention {:.1e} (tol {tol:.0e})",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// -------------------------------------------------------- gradient checks

const FD_STEP: f64 = 1e-5;

fn rel_err(num: f64, ana: f64) -> f64 {
    (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6)
}

fn fd_worst(params: &ParamSet<f64>, analytic: &[f64], loss: impl Fn(&ParamSet<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        *plus.scalar_mut(k).unwrap() += FD_STEP;
        let mut minus = params.clone();
        *minus.scalar_mut(k).unwrap() -= FD_STEP;
        worst = worst.max(rel_err((loss(&plus) - loss(&minus)) / (2.0 * FD_STEP), a));
    }
    worst
}

fn toy_pixels(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Vec<PatchPixels> {
    (0..n)
        .map(|_| PatchPixels::new(side, (0..side * side * 3).map(|_| rng.random()).collect()).unwrap())
        .collect()
}

fn random_views(rng: &mut ChaCha8Rng, b: usize) -> ViewBatch<f64> {
    let mut v = || Array4::from_shape_fn((3, b, 4, 4), |_| rng.random_range(-2.0..2.0));
    ViewBatch {
        d1: v(),
        d2: v(),
        sd1: v(),
        sd2: v(),
    }
}

fn toy_ssl() -> SslModel {
    SslModel::new(SslSpec {
        encoder: EncoderSpec::stride2(8, 2, &[3]),
        fhead_hidden: 4,
        projection_dim: 3,
        shead_hidden: 4,
    })
    .unwrap()
}

fn criterion_2() -> Verdict {
    let seeds = 0..4u64;
    let mut worst = [0.0f64; 3];
    for seed in seeds.clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);

        let mil = InstanceClassifier::new(EncoderSpec::stride2(8, 2, &[3, 4])).unwrap();
        let params: ParamSet<f64> = mil.init(&mut rng);
        let pix = toy_pixels(&mut rng, 5, 8);
        let refs: Vec<&PatchPixels> = pix.iter().collect();
        let input = mil.encoder().prepare_input::<f64>(&refs).unwrap();
        let rows = [0, 1, 2, 3, 4, 0, 1, 2];
        let target = BagTarget {
            y: std::array::from_fn(|_| rng.random_range(0..2u8)),
        };
        let k = rng.random_range(1..=4);
        let (_, g) = mil.bag_loss_and_grad(&params, &input, &rows, &target, k).unwrap();
        worst[0] = worst[0].max(fd_worst(&params, &g.flatten(), |p| {
            mil.bag_loss_and_grad(p, &input, &rows, &target, k).unwrap().0
        }));

        let ssl = toy_ssl();
        let mut state: TeacherStudentState<f64> = ssl.init(&mut rng, 0.9, 0.5);
        for p in state.student.params_mut() {
            p.value.mapv_inplace(|v| v + 0.1 * rng.random_range(-1.0..1.0));
        }
        let views = random_views(&mut rng, 2);
        let (_, g) = ssl.loss_and_grad(&state, &views).unwrap();
        let student = state.student.clone();
        worst[1] = worst[1].max(fd_worst(&student, &g.flatten(), |p| {
            let mut s = state.clone();
            s.student = p.clone();
            ssl.total_loss(&s, &views).unwrap().total
        }));

        let grader = Grader::new(GraderSpec {
            encoder: EncoderSpec::stride2(8, 2, &[3]),
            attention_dim: 4,
            head: HeadKind::Ordinal,
        })
        .unwrap();
        let params: ParamSet<f64> = grader.init(&mut rng);
        let input = Array4::from_shape_fn((3, 5, 4, 4), |_| rng.random_range(-2.0..2.0));
        let grade = IsupGrade::new(rng.random_range(0..6)).unwrap();
        let (_, g) = grader.bag_loss_and_grad(&params, &input, grade).unwrap();
        worst[2] = worst[2].max(fd_worst(&params, &g.flatten(), |p| {
            grader.bag_loss_and_grad(p, &input, grade).unwrap().0
        }));
    }
    let tol = 1e-4;
    verdict(
        worst.iter().all(|&e| e < tol),
        format!(
            "float64, central differences h={FD_STEP:.0e}, {} seeds; max relative error bag_loss∘topk {:.1e}, total_loss {:.1e}, or_loss∘grade_forward {:.1e} (tol {tol:.0e})",
            seeds.count(),
            worst[0],
            worst[1],
            worst[2]
        ),
    )
}

// ------------------------------------------------------ encoding/decoding

fn criterion_3() -> Verdict {
    let mut ok = true;
    for g in IsupGrade::all() {
        let code = encode_ordinal(g);
        ok &= code.sum() == g.value();
        let p = code.as_f64().map(|b| if b == 1.0 { 0.9 } else { 0.1 });
        ok &= decode_ordinal(&p, 0.5).unwrap() == g;
    }
    use GleasonGrade::*;
    let table = [
        (Benign, Benign, 0),
        (G3, G3, 1),
        (G3, G4, 2),
        (G4, G3, 3),
        (G4, G4, 4),
        (G3, G5, 4),
        (G5, G3, 4),
        (G4, G5, 5),
        (G5, G4, 5),
        (G5, G5, 5),
    ];
    let mut mapped = 0;
    for (p, s, want) in table {
        if isup_from_gleason(p, s).ok().map(|g| g.value()) == Some(want) {
            mapped += 1;
        }
    }
    ok &= mapped == table.len();
    verdict(ok, format!("6 grades encode/decode exactly; Gleason pairs mapped {mapped}/{}", table.len()))
}

// ------------------------------------------------------------ stain

fn golden_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/stain")
}

fn golden_matches() -> Result<bool, String> {
    let dir = golden_dir();
    let input = PatchPixels::load_png(&dir.join("input.png")).map_err(|e| e.to_string())?;
    let expected = PatchPixels::load_png(&dir.join("expected.png")).map_err(|e| e.to_string())?;
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("params.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let seed = meta["seed"].as_u64().ok_or("seed missing")?;
    let recorded: StainParams = serde_json::from_value(meta["params"].clone()).map_err(|e| e.to_string())?;
    let params = sample_stain_params(&mut ChaCha8Rng::seed_from_u64(seed), &AugmentationConfig::for_mode(StainMode::Centered));
    Ok(params == recorded && stain_augment_pixels(&input, &params) == expected)
}

fn max_channel_err(a: &PatchPixels, b: &PatchPixels) -> u8 {
    a.data().iter().zip(b.data()).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut round, mut ident) = (0u8, 0u8);
    for i in 0..1000 {
        let side = [8, 16, 32][i % 3];
        let p = &toy_pixels(&mut rng, 1, side)[0];
        round = round.max(max_channel_err(&hed_to_rgb(&rgb_to_hed(p)), p));
        ident = ident.max(max_channel_err(&stain_augment_pixels(p, &StainParams::IDENTITY), p));
    }
    let golden = golden_matches();
    let pass = round <= 2 && ident <= 2 && golden == Ok(true);
    verdict(
        pass,
        format!(
            "1000 random patches: round-trip max error {round}/255, identity augment {ident}/255 (tol 2/255); golden fixture bit-exact: {}",
            match golden {
                Ok(b) => b.to_string(),
                Err(e) => format!("error ({e})"),
            }
        ),
    )
}

// ------------------------------------------------------------ SSL mechanics

fn criterion_5() -> Verdict {
    let model = toy_ssl();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state: TeacherStudentState<f64> = model.init(&mut rng, 0.9, 0.02);

    let mut symmetric = true;
    for _ in 0..50 {
        let v = random_views(&mut rng, 3);
        symmetric &= model.loss_aug(&state, &v.d1, &v.d2).unwrap() == model.loss_aug(&state, &v.d2, &v.d1).unwrap();
    }

    let mut st = state.clone();
    let mut opt = OptimizerState::new(&st.student, AdamConfig::default(), CosineSchedule::new(1e-2, 1e-3, 3));
    let mut oracle: Vec<Vec<f64>> = st.teacher.params().iter().map(|p| p.value.iter().copied().collect()).collect();
    for _ in 0..3 {
        let views = random_views(&mut rng, 2);
        model.train_step(&mut st, &mut opt, &views).unwrap();
        for (t, s) in oracle.iter_mut().zip(st.student.params()) {
            for (tv, &sv) in t.iter_mut().zip(s.value.iter()) {
                *tv = 0.9 * *tv + (1.0 - 0.9) * sv;
            }
        }
    }
    let ema_exact = st
        .teacher
        .params()
        .iter()
        .zip(&oracle)
        .all(|(t, o)| t.value.iter().copied().collect::<Vec<_>>() == *o);

    let mut norm_err: f64 = 0.0;
    for _ in 0..20 {
        let v = random_views(&mut rng, 4);
        for pred in [model.student_predict(&st, &v.d1).unwrap(), model.teacher_predict(&st, &v.sd2).unwrap()] {
            let (normed, _) = l2_normalize_rows(pred.view(), NORM_EPS);
            for row in normed.outer_iter() {
                let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                norm_err = norm_err.max((n - 1.0).abs());
            }
        }
    }
    verdict(
        symmetric && ema_exact && norm_err <= 1e-6,
        format!(
            "loss_aug swap-symmetric (exact) over 50 batches: {symmetric}; teacher equals EMA recurrence after 3 steps (exact): {ema_exact}; max |normalized prediction row norm - 1| {norm_err:.1e} (tol 1e-6)"
        ),
    )
}

// -------------------------------------------------------- end to end

struct DeskRun {
    outcome: isup_grading::pipeline::RunOutcome,
    seconds: f64,
    repeat_identical: Result<(), String>,
    resume: Result<(), String>,
}

fn stage_digests(dir: &Path) -> std::collections::BTreeMap<String, String> {
    let text = std::fs::read_to_string(dir.join(RUN_MANIFEST)).unwrap();
    let m: RunManifest = serde_json::from_str(&text).unwrap();
    m.stages.into_iter().map(|s| (s.name, s.digest)).collect()
}

fn desk_run(root: &Path) -> DeskRun {
    let mut config = PipelineConfig::desk();
    config.run.root = root.to_path_buf();
    config.ablation.no_or = true;
    config.ablation.no_ssl = true;

    let start = Instant::now();
    let outcome = run_pipeline(&config, Some(&root.join("main"))).expect("desk pipeline");
    let seconds = start.elapsed().as_secs_f64();
    eprintln!("desk run with ablations finished in {seconds:.0} s");

    let mut plain = config.clone();
    plain.ablation = Default::default();
    let repeat = run_pipeline(&plain, Some(&root.join("repeat"))).expect("repeat pipeline");
    let a = stage_digests(&outcome.dir);
    let b = stage_digests(&repeat.dir);
    let mut repeat_identical = Ok(());
    for (stage, digest) in &b {
        if a.get(stage) != Some(digest) {
            repeat_identical = Err(format!("stage {stage} differs"));
        }
    }
    if b.len() != 7 {
        repeat_identical = Err(format!("repeat ran {} stages", b.len()));
    }

    let again = run_pipeline(&config, Some(&outcome.dir)).expect("resumed pipeline");
    let resume = if !again.executed.is_empty() {
        Err(format!("re-executed {:?}", again.executed))
    } else if again.reports != outcome.reports {
        Err("reports changed".into())
    } else {
        Ok(())
    };
    DeskRun {
        outcome,
        seconds,
        repeat_identical,
        resume,
    }
}

fn criterion_6(run: &DeskRun) -> Verdict {
    let r = &run.outcome.reports["full"];
    let kappa = r.grading.kappa.unwrap_or(f64::NEG_INFINITY);
    let auc = r.detection.map(|d| d.auc).unwrap_or(f64::NEG_INFINITY);
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu_minutes = run.seconds * threads as f64 / 60.0;
    let pass = kappa >= 0.85 && auc >= 0.95 && cpu_minutes <= 30.0 && run.repeat_identical.is_ok() && run.resume.is_ok();
    verdict(
        pass,
        format!(
            "{} test slides: kappa {kappa:.4} (>= 0.85), AUC {auc:.4} (>= 0.95), accuracy {:.4}, macro-F1 {:.4}; {:.1} min wall x {threads} thread(s) = {cpu_minutes:.1} CPU-min bound (<= 30, includes both ablation variants); repeat run bit-identical: {}; resume skips all stages: {}",
            r.n_slides,
            r.grading.accuracy,
            r.grading.macro_f1,
            run.seconds / 60.0,
            fmt_check(&run.repeat_identical),
            fmt_check(&run.resume)
        ),
    )
}

fn fmt_check(r: &Result<(), String>) -> String {
    match r {
        Ok(()) => "yes".into(),
        Err(e) => format!("no ({e})"),
    }
}

fn criterion_7(run: &DeskRun) -> Verdict {
    let full = &run.outcome.reports["full"].grading;
    let no_or = &run.outcome.reports["no-or"].grading;
    let no_ssl = &run.outcome.reports["no-ssl"].grading;
    let a = full.severe_errors <= no_or.severe_errors && full.mean_abs_error < no_or.mean_abs_error;
    let (k, k_no) = (full.kappa.unwrap_or(f64::NEG_INFINITY), no_ssl.kappa.unwrap_or(f64::NEG_INFINITY));
    let b = k >= k_no;
    verdict(
        a && b,
        format!(
            "(a) severe errors OR {} vs no-OR {}, MAE OR {:.4} vs no-OR {:.4}: {}; (b) kappa SSL {k:.4} vs no-SSL {k_no:.4}: {}",
            full.severe_errors,
            no_or.severe_errors,
            full.mean_abs_error,
            no_or.mean_abs_error,
            if a { "holds" } else { "violated" },
            if b { "holds" } else { "violated" }
        ),
    )
}

fn criterion_8(run: &DeskRun) -> Verdict {
    let e = run.outcome.reports["full"].explainability;
    let rate = e.hit_rate.unwrap_or(0.0);
    verdict(
        rate >= 0.8 && e.with_mask == e.cancer_slides && e.cancer_slides > 0,
        format!(
            "top-attention patch intersects the lesion mask in {}/{} cancerous test slides ({:.1}%, need >= 80%)",
            e.hits,
            e.with_mask,
            100.0 * rate
        ),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut verdicts: Vec<(usize, &str, Verdict, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        let s = t.elapsed().as_secs_f64();
        println!("[{}] {n}. {name}: {} ({s:.1} s)", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((n, name, v, s));
    };
    timed(1, "oracle equivalence", &criterion_1);
    timed(2, "gradient checks", &criterion_2);
    timed(3, "encoding/decoding", &criterion_3);
    timed(4, "stain round trip", &criterion_4);
    timed(5, "SSL mechanics", &criterion_5);

    let root = tempfile::tempdir().expect("temp dir");
    let run = desk_run(root.path());
    timed(6, "end-to-end synthetic run", &|| criterion_6(&run));
    timed(7, "ablation direction", &|| criterion_7(&run));
    timed(8, "explainability", &|| criterion_8(&run));

    let time_limits = [(1usize, 60.0), (2, 120.0)];
    let mut failed: Vec<usize> = verdicts.iter().filter(|v| !v.2.pass).map(|v| v.0).collect();
    for (n, limit) in time_limits {
        if let Some(v) = verdicts.iter().find(|v| v.0 == n) {
            if v.3 > limit {
                println!("criterion {n} exceeded its {limit:.0} s runtime budget ({:.1} s)", v.3);
                failed.push(n);
            }
        }
    }
    failed.sort_unstable();
    failed.dedup();
    println!("acceptance: {}/{} criteria pass", verdicts.len() - failed.len(), verdicts.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
