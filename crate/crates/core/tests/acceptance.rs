//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skf_core::adversarial::{select_target_fake_patch, DiscriminatorScores};
use skf_core::config::TrainConfig;
use skf_core::data::{Dataset, DatasetConfig, Split};
use skf_core::gradcheck;
use skf_core::histogram::soft_histogram;
use skf_core::metrics::{psnr, ssim};
use skf_core::nets::EnhancerConfig;
use skf_core::nn::ParamStore;
use skf_core::semantic_embedding::{FeatureKind, FeatureMap, SemanticEmbedding};
use skf_core::tensor::Tensor;
use skf_core::trainer::{parse_rows, Trainer};
use skf_core::Image;

/// Training setup for the desk-scale ablation runs.
fn desk_config() -> TrainConfig {
    TrainConfig {
        widths: [16, 32, 64],
        semantic_widths: [8, 8, 8],
        batch_size: 4,
        steps: 2000,
        val_every: 0,
        val_limit: 1,
        checkpoint_every: 0,
        ..Default::default()
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: usize,
    passed: bool,
    summary: String,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Direct per-bin evaluation, no windowing or recurrences.
fn brute_histogram(values: &[f64], alpha: f64) -> Vec<f64> {
    (0..256)
        .map(|i| {
            let (lo, hi) = ((i as f64 - 0.5) / 255.0, (i as f64 + 0.5) / 255.0);
            values.iter().map(|&x| sigmoid(alpha * (x - lo)) - sigmoid(alpha * (x - hi))).sum()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        // A masked pixel set: random values of a random image under a random mask.
        let n = rng.random_range(0..=64);
        let mut values = Vec::new();
        for _ in 0..n {
            let (keep, v) = (rng.random_bool(0.6), rng.random::<f64>());
            if keep {
                values.push(v);
            }
        }
        let h = soft_histogram(&values, 400.0).expect("finite values");
        for (a, b) in h.bins.iter().zip(brute_histogram(&values, 400.0)) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        passed: worst <= 1e-9 && secs < 10.0,
        summary: format!("histogram vs brute force, 1000 sets: max bin error {worst:.2e} (<= 1e-9), {secs:.2}s (< 10s)"),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let x: f64 = rng.random();
        let alpha = 400.0;
        let h = soft_histogram(&[x], alpha).expect("finite");
        let mass: f64 = h.bins.iter().sum();
        let closed = sigmoid(alpha * (x + 0.5 / 255.0)) - sigmoid(alpha * (x - 255.5 / 255.0));
        worst = worst.max((mass - closed).abs());
    }
    Outcome { id: 2, passed: worst <= 1e-9, summary: format!("telescoping mass, 1e5 pixels: max error {worst:.2e} (<= 1e-9)") }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let codes: Vec<usize> = (0..2000).map(|_| rng.random_range(0..256)).collect();
    let values: Vec<f64> = codes.iter().map(|&k| k as f64 / 255.0).collect();
    let mut hard = vec![0.0; 256];
    for &k in &codes {
        hard[k] += 1.0;
    }
    let soft = soft_histogram(&values, 1e4).expect("finite");
    let worst = soft.bins.iter().zip(&hard).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Outcome { id: 3, passed: worst <= 1e-3, summary: format!("alpha=1e4 at bin centres vs integer histogram: L_inf {worst:.2e} (<= 1e-3)") }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::run_all(0);
    let secs = start.elapsed().as_secs_f64();
    let sch = results.iter().filter(|r| r.name.starts_with("sch")).map(|r| r.max_relative_error).fold(0.0, f64::max);
    let se = results.iter().filter(|r| r.name.starts_with("se/")).map(|r| r.max_relative_error).fold(0.0, f64::max);
    let groups = results.iter().filter(|r| r.name.starts_with("se/")).count();
    let passed = results.iter().all(|r| r.passed()) && sch <= 1e-4 && se <= 1e-3 && groups == 7 && secs < 60.0;
    Outcome {
        id: 4,
        passed,
        summary: format!("finite differences: SCH rel err {sch:.2e} (<= 1e-4), SE rel err {se:.2e} over {groups} groups (<= 1e-3), {secs:.2}s (< 60s)"),
    }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, kind: FeatureKind) -> FeatureMap {
    let t = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("dims");
    FeatureMap::new(t, 0, kind).expect("3-d")
}

fn permute(f: &FeatureMap, perm: &[usize]) -> FeatureMap {
    let (h, w) = f.spatial();
    let hw = h * w;
    let c = f.channels();
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for (dst, &src) in perm.iter().enumerate() {
            out[ch * hw + dst] = f.data.data()[ch * hw + src];
        }
    }
    FeatureMap::new(Tensor::new(vec![c, h, w], out).expect("dims"), f.level, f.kind).expect("3-d")
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut row_err, mut perm_err): (f64, f64) = (0.0, 0.0);
    for case in 0..100 {
        let c = rng.random_range(1..=8);
        let sc = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(case);
        let se = SemanticEmbedding::new(&mut store, &mut init, "se", c, sc);
        let fi = random_map(&mut rng, c, h, w, FeatureKind::Image);
        let fs = random_map(&mut rng, sc, h, w, FeatureKind::Semantic);
        let attn = se.semantic_attention(&store, &fi, &fs).expect("valid pair");
        for s in attn.row_sums() {
            row_err = row_err.max((s - 1.0).abs());
        }
        let mut perm: Vec<usize> = (0..h * w).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let out = se.se_forward(&store, &fi, &fs).expect("valid pair");
        let out_p = se.se_forward(&store, &permute(&fi, &perm), &permute(&fs, &perm)).expect("valid pair");
        for (a, b) in permute(&out, &perm).data.data().iter().zip(out_p.data.data()) {
            perm_err = perm_err.max((a - b).abs());
        }
    }
    Outcome {
        id: 5,
        passed: row_err <= 1e-5 && perm_err <= 1e-6,
        summary: format!("SE, 100 cases: attention row-sum error {row_err:.2e} (<= 1e-5), permutation equivariance error {perm_err:.2e} (<= 1e-6)"),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let mut classes: Vec<u8> = (0..20).collect();
        for i in 0..n {
            let j = rng.random_range(i..classes.len());
            classes.swap(i, j);
        }
        // Coarse score grid so ties occur often.
        let per_patch: Vec<(u8, f64)> = classes[..n].iter().map(|&c| (c, rng.random_range(0..5) as f64 / 4.0)).collect();
        let mut best: Option<(f64, u8)> = None;
        for &(c, s) in &per_patch {
            let better = match best {
                None => true,
                Some((bs, bc)) => s < bs || (s == bs && c < bc),
            };
            if better {
                best = Some((s, c));
            }
        }
        let got = select_target_fake_patch(&DiscriminatorScores { per_patch }).expect("non-empty");
        if got != best.expect("non-empty").1 {
            mismatches += 1;
        }
    }
    Outcome { id: 6, passed: mismatches == 0, summary: format!("worst-patch selection vs exhaustive argmin, 1000 sets: {mismatches} mismatches") }
}

struct RunResult {
    psnr: f64,
    sce: f64,
    params: usize,
}

fn train_and_test(dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> RunResult {
    let mut t = Trainer::new(TrainConfig { master_seed: seed, ..cfg.clone() }, dataset).expect("valid config");
    t.run().expect("training");
    let report = t.evaluate_split(Split::Test).expect("evaluation");
    RunResult { psnr: report.psnr(), sce: report.segment_color_error(), params: t.g_store.num_scalars() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn criteria_7_8(dataset: &Dataset) -> (Outcome, Outcome) {
    let base = desk_config();
    let rows = parse_rows("baseline,se,sch+se,large", &base).expect("known rows");
    let row = |name: &str| rows.iter().find(|r| r.name == name).expect("row").config.clone();
    let start = Instant::now();
    let mut results: Vec<[RunResult; 3]> = Vec::new();
    for seed in SEEDS {
        let r = [train_and_test(dataset, &row("baseline"), seed), train_and_test(dataset, &row("se"), seed), train_and_test(dataset, &row("sch+se"), seed)];
        println!(
            "    seed {seed}: PSNR baseline {:.3} / se {:.3} / sch+se {:.3} dB; seg color err baseline {:.5} / sch+se {:.5}",
            r[0].psnr, r[1].psnr, r[2].psnr, r[0].sce, r[2].sce
        );
        results.push(r);
    }
    let secs7 = start.elapsed().as_secs_f64();
    let a = results.iter().filter(|r| r[2].psnr > r[1].psnr).count();
    let b = results.iter().filter(|r| r[1].psnr > r[0].psnr).count();
    let c = results.iter().filter(|r| r[2].sce < r[0].sce).count();
    let c7 = Outcome {
        id: 7,
        passed: a >= 4 && b >= 4 && c >= 4 && secs7 <= 1800.0,
        summary: format!(
            "desk ablation over 5 seeds: PSNR(sch+se)>PSNR(se) in {a}/5, PSNR(se)>PSNR(baseline) in {b}/5, seg err(sch+se)<seg err(baseline) in {c}/5 (each >= 4), {secs7:.0}s (<= 1800s)"
        ),
    };

    let large_cfg = row("large");
    let start = Instant::now();
    let large: Vec<RunResult> = SEEDS
        .iter()
        .map(|&seed| {
            let r = train_and_test(dataset, &large_cfg, seed);
            println!("    seed {seed}: PSNR large {:.3} dB", r.psnr);
            r
        })
        .collect();
    let secs8 = start.elapsed().as_secs_f64();
    let se_params = results[0][1].params;
    let gap = large[0].params.abs_diff(se_params) as f64 / se_params as f64;
    let analytic = EnhancerConfig { use_se: true, ..base.enhancer() }.param_count();
    let (m_large, m_se) = (median(large.iter().map(|r| r.psnr).collect()), median(results.iter().map(|r| r[1].psnr).collect()));
    let c8 = Outcome {
        id: 8,
        passed: gap <= 0.05 && analytic == se_params && m_large <= m_se,
        summary: format!(
            "parameter-matched control: large {} vs se {} params (gap {:.2}% <= 5%), median PSNR large {m_large:.3} <= se {m_se:.3} dB, {secs8:.0}s",
            large[0].params,
            se_params,
            gap * 100.0
        ),
    };
    (c7, c8)
}

fn oracle_psnr(a: &Image, b: &Image) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    let (h, w) = a.dims();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (pa, pb) = (a.rgb(p), b.rgb(p));
            for ch in 0..3 {
                s += (pa[ch] - pb[ch]).powi(2);
                n += 1;
            }
        }
    }
    let m = s / n as f64;
    if m == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / m).log10()).min(100.0)
    }
}

/// Direct 2-d window sums with 2-d Gaussian weights.
fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.dims();
    let luma = |img: &Image, y: usize, x: usize| {
        let p = img.rgb(y * w + x);
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    };
    let mut weights = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = weights[i][j] / total;
                    let (p, q) = (luma(a, y0 + i, x0 + j), luma(b, y0 + i, x0 + j));
                    mx += k * p;
                    my += k * q;
                    sxx += k * p * p;
                    syy += k * q * q;
                    sxy += k * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let (mut dp, mut ds): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(11..=24), rng.random_range(11..=24));
        let a = Image::new(h, w, (0..3 * h * w).map(|_| rng.random()).collect()).expect("dims");
        // Correlated second image so SSIM is not trivially near zero.
        let b = Image::new(h, w, a.data().iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect()).expect("dims");
        dp = dp.max((psnr(&a, &b).expect("dims") - oracle_psnr(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).expect("dims") - oracle_ssim(&a, &b)).abs());
    }
    let a = Image::filled(16, 16, [0.3, 0.4, 0.5]);
    let b = Image::filled(16, 16, [0.4, 0.5, 0.6]);
    let twenty = psnr(&a, &b).expect("dims");
    Outcome {
        id: 9,
        passed: dp <= 1e-9 && ds <= 1e-6 && (twenty - 20.0).abs() <= 1e-12,
        summary: format!("metrics vs scalar references, 100 pairs: PSNR err {dp:.2e} dB (<= 1e-9), SSIM err {ds:.2e} (<= 1e-6); uniform 0.1 difference -> {twenty} dB"),
    }
}

fn criterion_10(dataset: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = |name: &str, steps: usize| TrainConfig {
        widths: [8, 12, 16],
        semantic_widths: [4, 4, 4],
        disc_width: 4,
        batch_size: 2,
        steps,
        val_every: 10,
        val_limit: 4,
        checkpoint_every: 10,
        out_dir: Some(dir.path().join(name)),
        master_seed: 7,
        ..Default::default()
    };
    let run = |c: TrainConfig| {
        let mut t = Trainer::new(c, dataset).expect("config");
        t.run().expect("training");
    };
    run(cfg("a", 30));
    run(cfg("b", 30));
    let read = |name: &str| std::fs::read(dir.path().join(name).join("metrics.log")).expect("log");
    let identical = read("a") == read("b");
    run(cfg("c", 10));
    let mut t = Trainer::new(cfg("c", 30), dataset).expect("config");
    t.resume_from(&dir.path().join("c/last.ckpt")).expect("resume");
    t.run().expect("training");
    let resumed = read("c") == read("a");
    let lines = String::from_utf8(read("a")).expect("utf-8").lines().count();
    Outcome {
        id: 10,
        passed: identical && resumed,
        summary: format!("determinism: identical-config logs byte-identical = {identical}, resume at step 10 reproduces 30-step log = {resumed} ({lines} log lines, all components on)"),
    }
}

fn report(o: &Outcome) {
    println!("{} criterion {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.summary);
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. --nocapture) are accepted and ignored.
    let mut outcomes = Vec::new();
    for f in [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_9] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }
    let dataset = Dataset::generate(&DatasetConfig::default()).expect("dataset");
    let o = criterion_10(&dataset);
    report(&o);
    outcomes.push(o);
    let (c7, c8) = criteria_7_8(&dataset);
    report(&c7);
    report(&c8);
    outcomes.push(c7);
    outcomes.push(c8);
    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("\nsummary:");
    for o in &outcomes {
        report(o);
    }
    if failed.is_empty() {
        println!("all {} criteria passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
