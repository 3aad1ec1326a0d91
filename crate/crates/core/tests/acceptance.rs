//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::time::Instant;

use deconoise_core::cli;
use deconoise_core::evaluation::{denoise, summarize, ExperimentRunner, Method, MetricsRecord, RunKey};
use deconoise_core::image::{
    convolve_psf, synthesize_dataset, DatasetManifest, Image, NoiseSpec, PhantomKind, PsfKernel,
};
use deconoise_core::model::{build_on_tape, init_params, ModelConfig};
use deconoise_core::tensor::{gradcheck, reflect_index, PadMode, Tape, Tensor, Var};
use deconoise_core::training::{apply_mask, masked_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const OP_TOL: f64 = 1e-4;
const NET_TOL: f64 = 1e-3;
const CONV_TOL: f64 = 1e-5;
/// 99th percentile of the χ² distribution with 23 degrees of freedom.
const CHI2_23_P99: f64 = 41.638_398;

const DATA_SEED: u64 = 7;
const N_TRAIN: usize = 200;
const N_VAL: usize = 4;
const SEEDS: [u64; 3] = [1, 2, 3];
const SIGMAS: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
const STEPS: usize = 2000;
const BASE_CHANNELS: usize = 16;
const PATCH: usize = 64;
const VIRTUAL_BATCH: usize = 4;
const LR: f64 = 0.001;
const VAL_PATCHES: usize = 4;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Distinct values at least 0.02 apart, so no max-pool window holds a
/// near-tie that a finite-difference step could flip.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.02).collect();
    rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let r = random(rng, tape.value(y).shape());
    let rv = tape.constant(r);
    let p = tape.mul(y, rv).unwrap();
    tape.sum(p)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var], u64) -> Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    let ws = |tape: &mut Tape<f64>, y: Var, t: u64| weighted_sum(tape, y, &mut ChaCha8Rng::seed_from_u64(t));
    vec![
        (
            "conv2d/zero",
            vec![vec![2, 2, 5, 6], vec![3, 2, 3, 3], vec![3]],
            Box::new(move |tp, v, t| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), PadMode::Zero).unwrap();
                ws(tp, y, t)
            }),
        ),
        (
            "conv2d/reflect",
            vec![vec![1, 2, 6, 5], vec![2, 2, 3, 3], vec![2]],
            Box::new(move |tp, v, t| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), PadMode::Reflect).unwrap();
                ws(tp, y, t)
            }),
        ),
        (
            "maxpool2",
            vec![vec![2, 2, 6, 4]],
            Box::new(move |tp, v, t| {
                let y = tp.maxpool2(v[0]).unwrap();
                ws(tp, y, t)
            }),
        ),
        (
            "upsample2",
            vec![vec![1, 3, 3, 2]],
            Box::new(move |tp, v, t| {
                let y = tp.upsample_nearest2(v[0]).unwrap();
                ws(tp, y, t)
            }),
        ),
        (
            "concat",
            vec![vec![2, 2, 3, 3], vec![2, 1, 3, 3]],
            Box::new(move |tp, v, t| {
                let y = tp.concat_channels(v[0], v[1]).unwrap();
                ws(tp, y, t)
            }),
        ),
        (
            "add/sub/mul/affine",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |tp, v, t| {
                let a = tp.add(v[0], v[1]).unwrap();
                let s = tp.sub(a, v[1]).unwrap();
                let m = tp.mul(s, v[1]).unwrap();
                let f = tp.affine(m, -1.5, 0.25);
                ws(tp, f, t)
            }),
        ),
        (
            "gather/mean/sum",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(move |tp, v, _| {
                let g = tp.gather(v[0], &[0, 5, 5, 11]).unwrap();
                let sq = tp.mul(g, g).unwrap();
                let m = tp.mean(sq).unwrap();
                let s = tp.sum(v[1]);
                let ss = tp.mul(s, s).unwrap();
                tp.add(m, ss).unwrap()
            }),
        ),
    ]
}

fn gradient_suite(report: &mut Report) {
    let start = Instant::now();
    let mut worst_op = 0.0f64;
    let mut worst_name = "";
    for (name, shapes, build) in op_cases() {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * trial + shapes.len() as u64);
            let draw = if name == "maxpool2" { separated } else { random };
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| draw(&mut rng, s)).collect();
            let r = gradcheck::check(&inputs, |tp, v| Ok(build(tp, v, trial))).unwrap();
            if r.max_rel_error > worst_op {
                worst_op = r.max_rel_error;
                worst_name = name;
            }
        }
    }
    // relu away from its kink
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + trial);
        let mut x = random(&mut rng, &[1, 2, 4, 4]);
        x.data_mut()
            .iter_mut()
            .filter(|v| v.abs() < 0.05)
            .for_each(|v| *v += 0.1);
        let r = gradcheck::check(&[x], |tp, v| {
            let y = tp.relu(v[0]);
            Ok(weighted_sum(tp, y, &mut ChaCha8Rng::seed_from_u64(trial)))
        })
        .unwrap();
        if r.max_rel_error > worst_op {
            worst_op = r.max_rel_error;
            worst_name = "relu";
        }
    }

    let mut worst_net = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let psf = (trial % 2 == 0).then(|| PsfKernel::gaussian_default(1.0).unwrap());
        let cfg = ModelConfig::new(psf, 50.0, 20.0)
            .unwrap()
            .with_base_channels(2)
            .unwrap();
        let mut p = init_params(2, trial).cast::<f64>();
        for (_, b) in p.layers_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        let x = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..100.0)).collect()).unwrap();
        let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..64)).collect();
        let targets: Vec<f64> = idx.iter().map(|_| rng.gen_range(0.0..100.0)).collect();
        let layers: Vec<Tensor<f64>> = p.layers().iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
        let coords: Vec<Vec<usize>> = layers
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == 0 {
                    (0..t.numel()).collect()
                } else {
                    (0..3).map(|_| rng.gen_range(0..t.numel())).collect()
                }
            })
            .collect();
        let r = gradcheck::check_subset(&layers, &coords, 1e-5, |tp, v| {
            let pairs: Vec<(Var, Var)> = v.chunks(2).map(|c| (c[0], c[1])).collect();
            let (z_hat, s_hat) = build_on_tape(tp, &x, &pairs, &cfg)?;
            masked_loss(tp, s_hat, z_hat, &idx, &targets, 1.0, cfg.std)
        })
        .unwrap();
        worst_net = worst_net.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        1,
        "gradient suite",
        worst_op < OP_TOL && worst_net < NET_TOL && secs < 120.0,
        format!(
            "ops worst {worst_op:.2e} ({worst_name}) < {OP_TOL:e}, network worst {worst_net:.2e} < {NET_TOL:e}, \
             {TRIALS} trials each, {secs:.1}s"
        ),
    );
}

/// Direct "same" cross-correlation by explicit summation.
fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: PadMode) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut out = Vec::with_capacity(n * cout * h * wd);
    for bi in 0..n {
        #[allow(clippy::needless_range_loop)]
        for co in 0..cout {
            for y in 0..h {
                for xo in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - (kh / 2) as isize;
                                let sx = xo as isize + kx as isize - (kw / 2) as isize;
                                let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize;
                                let (sy, sx) = match pad {
                                    PadMode::Zero if !inside => continue,
                                    PadMode::Zero => (sy as usize, sx as usize),
                                    PadMode::Reflect => (reflect_index(sy, h), reflect_index(sx, wd)),
                                };
                                acc += x.data()[((bi * cin + ci) * h + sy) * wd + sx]
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// `s(y, x) = Σ h(i, j) z(y − i + r, x − j + r)` with mirrored borders.
fn brute_psf(img: &Image, psf: &PsfKernel) -> Vec<f64> {
    let (h, w, k) = (img.height(), img.width(), psf.size() as isize);
    let r = k / 2;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let sy = reflect_index(y - (i - r), h);
                    let sx = reflect_index(x - (j - r), w);
                    acc += psf.weight(i as usize, j as usize) as f64 * img.get(sy, sx) as f64;
                }
            }
            out.push(acc);
        }
    }
    out
}

fn convolution_oracle(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_conv = 0.0f64;
    let mut worst_psf = 0.0f64;
    for case in 0..50 {
        let pad = if case % 2 == 0 { PadMode::Zero } else { PadMode::Reflect };
        let (n, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (h, w) = (rng.gen_range(k..k + 8), rng.gen_range(k..k + 8));
        let x = random(&mut rng, &[n, cin, h, w]);
        let wt = random(&mut rng, &[cout, cin, k, k]);
        let b = random(&mut rng, &[cout]);
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (
            tape.constant(x.cast()),
            tape.constant(wt.cast()),
            tape.constant(b.cast()),
        );
        let y = tape.conv2d(xv, wv, Some(bv), pad).unwrap();
        for (g, e) in tape.value(y).data().iter().zip(brute_conv(&x, &wt, b.data(), pad)) {
            worst_conv = worst_conv.max((*g as f64 - e).abs());
        }

        let sigma = rng.gen_range(0.3..2.5);
        let psf = PsfKernel::gaussian_default(sigma).unwrap();
        let side = psf.size();
        let (ih, iw) = (rng.gen_range(side..side + 20), rng.gen_range(side..side + 20));
        let img = Image::new(ih, iw, (0..ih * iw).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let got = convolve_psf(&img, &psf, PadMode::Reflect).unwrap();
        for (g, e) in got.pixels().iter().zip(brute_psf(&img, &psf)) {
            worst_psf = worst_psf.max((*g as f64 - e).abs());
        }
    }
    let mut delta_exact = true;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let img = Image::new(13, 17, (0..13 * 17).map(|_| rng.gen_range(-1e3..1e3)).collect()).unwrap();
        for psf in [PsfKernel::delta(), PsfKernel::gaussian_default(0.0).unwrap()] {
            for pad in [PadMode::Zero, PadMode::Reflect] {
                delta_exact &= convolve_psf(&img, &psf, pad).unwrap() == img;
            }
        }
        let x = img.to_tensor::<f32>();
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let kv = tape.constant(k);
        let y = tape.conv2d(xv, kv, None, PadMode::Reflect).unwrap();
        delta_exact &= tape.value(y) == &x;
    }
    report.line(
        2,
        "convolution oracle",
        worst_conv < CONV_TOL && worst_psf < CONV_TOL && delta_exact,
        format!(
            "50 cases: conv2d max |err| {worst_conv:.2e}, convolve_psf max |err| {worst_psf:.2e} (< {CONV_TOL:e}); \
             delta kernel exact: {delta_exact}"
        ),
    );
}

fn masking_statistics(report: &mut Report) {
    let patch = Image::new(96, 96, (0..96 * 96).map(|v| v as f32).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts_ok = true;
    let mut centre_hits = 0usize;
    let mut counts = [[0u64; 5]; 5];
    for _ in 0..10_000 {
        let m = apply_mask(&patch, 0.03125, 5, &mut rng).unwrap();
        counts_ok &= m.coords.len() == 288;
        for (&(r, c), &(sr, sc)) in m.coords.iter().zip(&m.sources) {
            if (r, c) == (sr, sc) {
                centre_hits += 1;
            }
            if (2..94).contains(&r) && (2..94).contains(&c) {
                counts[sr + 2 - r][sc + 2 - c] += 1;
            }
        }
    }
    let total: u64 = counts.iter().flatten().sum();
    let expected = total as f64 / 24.0;
    let chi2: f64 = counts
        .iter()
        .flatten()
        .enumerate()
        .filter(|&(i, _)| i != 12)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    report.line(
        3,
        "masking statistics",
        counts_ok && centre_hits == 0 && counts[2][2] == 0 && chi2 < CHI2_23_P99,
        format!(
            "288 masked per 96x96 patch: {counts_ok}; zero offsets: {centre_hits}; \
             chi2 = {chi2:.2} < {CHI2_23_P99} (23 dof, alpha 0.01) over 10^4 maskings"
        ),
    );
}

fn template() -> TrainConfig {
    TrainConfig {
        lr: LR,
        epochs: STEPS / 10,
        steps_per_epoch: 10,
        virtual_batch: VIRTUAL_BATCH,
        patch: PATCH,
        base_channels: BASE_CHANNELS,
        val_patches: VAL_PATCHES,
        ..TrainConfig::default()
    }
}

fn mean_of(rows: &[MetricsRecord], experiment: &str, method: Method, sigma: Option<f64>) -> (f64, f64) {
    let s = summarize(rows)
        .into_iter()
        .find(|s| s.experiment == experiment && s.method == method && (sigma.is_none() || s.psf_sigma == sigma))
        .unwrap_or_else(|| panic!("no rows for {experiment}/{method}"));
    (s.mean_psnr_db, s.mean_negative_fraction)
}

fn trends(report: &mut Report, manifest: &DatasetManifest) {
    let mut runner = ExperimentRunner::new(manifest, template())
        .unwrap()
        .with_progress(|line| eprintln!("  {line}"));
    let mut rows = runner.run_comparison(&SEEDS).unwrap();
    rows.extend(runner.run_psf_sweep(&SIGMAS, &SEEDS).unwrap());
    rows.extend(runner.run_positivity_ablation(&SEEDS).unwrap());
    for s in summarize(&rows) {
        let sigma = s.psf_sigma.map_or("none".into(), |v| v.to_string());
        eprintln!(
            "  {:<20} {:<12} psf_sigma={sigma:<4} psnr_db={:.3} negative_fraction={:.4}",
            s.experiment,
            s.method.to_string(),
            s.mean_psnr_db,
            s.mean_negative_fraction
        );
    }

    let (noisy, _) = mean_of(&rows, "comparison", Method::NoisyInput, None);
    let (ours, _) = mean_of(&rows, "comparison", Method::Ours, None);
    let (n2v, _) = mean_of(&rows, "comparison", Method::N2v, None);
    let (n2v_conv, _) = mean_of(&rows, "comparison", Method::N2vConv, None);
    report.line(
        4,
        "method ordering",
        ours - n2v >= 0.3 && ours - noisy >= 3.0 && n2v - noisy >= 3.0,
        format!(
            "ours {ours:.3} dB, n2v {n2v:.3} dB (margin {:+.3}, need >= 0.3); noisy input {noisy:.3} dB \
             (need both >= {:.3})",
            ours - n2v,
            noisy + 3.0
        ),
    );
    report.line(
        5,
        "blurred blind-spot baseline",
        n2v_conv >= n2v,
        format!("n2v_conv {n2v_conv:.3} dB vs n2v {n2v:.3} dB ({:+.3})", n2v_conv - n2v),
    );

    let sweep: Vec<(f64, f64)> = SIGMAS
        .iter()
        .map(|&s| (s, mean_of(&rows, "psf_sweep", Method::Ours, Some(s)).0))
        .collect();
    let best = sweep
        .iter()
        .cloned()
        .fold((f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let at = |sigma: f64| sweep.iter().find(|p| p.0 == sigma).unwrap().1;
    let (m0, m2) = (at(1.0) - at(0.0), at(1.0) - at(2.0));
    report.line(
        6,
        "PSF sweep",
        best.0 == 1.0 && m0 >= 0.2 && m2 >= 0.2,
        format!(
            "{}; best sigma {}; sigma=1 over sigma=0 {m0:+.3}, over sigma=2 {m2:+.3} (need >= 0.2)",
            sweep
                .iter()
                .map(|(s, p)| format!("{s}: {p:.3}"))
                .collect::<Vec<_>>()
                .join(", "),
            best.0
        ),
    );

    let (pos, neg_pos) = mean_of(&rows, "positivity_ablation", Method::Ours, None);
    let (no_pos, neg_no_pos) = mean_of(&rows, "positivity_ablation", Method::OursNoPos, None);
    report.line(
        7,
        "positivity ablation",
        (pos - no_pos).abs() <= 0.5 && neg_pos < 0.05 && neg_pos < neg_no_pos,
        format!(
            "psnr lambda=1 {pos:.3} vs lambda=0 {no_pos:.3} (|diff| {:.3} <= 0.5); negative fraction \
             {neg_no_pos:.4} -> {neg_pos:.4} (need < 0.05)",
            (pos - no_pos).abs()
        ),
    );

    let mut identical = true;
    for &seed in &SEEDS {
        let plain = runner.trained(RunKey::new(None, 0.0, seed)).unwrap().0.clone();
        let zero = runner.trained(RunKey::new(Some(0.0), 0.0, seed)).unwrap().0.clone();
        identical &= plain.params == zero.params;
        for t in runner.test_images() {
            let (a, _) = denoise(&plain, &t.noisy).unwrap();
            let (b, _) = denoise(&zero, &t.noisy).unwrap();
            identical &= a
                .pixels()
                .iter()
                .zip(b.pixels())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    report.line(
        8,
        "reduction identity",
        identical,
        format!(
            "sigma=0, lambda=0 vs no PSF layer over seeds {SEEDS:?}: parameters and outputs bit-identical: {identical}"
        ),
    );
}

fn train_flags(data: &Path, out: &Path) -> Vec<String> {
    let t = template();
    [
        "deconoise",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--psf-sigma",
        "1",
        "--lambda",
        "1",
        "--seed",
        "1",
        "--threads",
        "1",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(
        [
            ("--epochs", t.epochs.to_string()),
            ("--steps", t.steps_per_epoch.to_string()),
            ("--virtual-batch", t.virtual_batch.to_string()),
            ("--patch", t.patch.to_string()),
            ("--lr", t.lr.to_string()),
            ("--base-channels", t.base_channels.to_string()),
            ("--val-patches", t.val_patches.to_string()),
        ]
        .into_iter()
        .flat_map(|(k, v)| [k.to_string(), v]),
    )
    .collect()
}

/// Drops the last (wall-clock) column of each line.
fn without_wall_column(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |p| p.0))
        .collect::<Vec<_>>()
        .join("\n")
}

fn reproducibility(report: &mut Report, data: &Path, work: &Path) {
    let runs: Vec<_> = ["run_a", "run_b"].iter().map(|r| work.join(r)).collect();
    let mut ok = true;
    for run in &runs {
        ok &= cli::run(train_flags(data, run)) == 0;
        ok &= cli::run([
            "deconoise",
            "evaluate",
            "--run",
            run.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--threads",
            "1",
        ]) == 0;
    }
    let read = |run: &Path, f: &str| std::fs::read(run.join(f)).unwrap_or_default();
    let same_bytes = |f: &str| !read(&runs[0], f).is_empty() && read(&runs[0], f) == read(&runs[1], f);
    let checkpoints = same_bytes("best.ckpt") && same_bytes("last.ckpt");
    let eval_csv = same_bytes("eval.csv");
    let metrics = |run: &Path| without_wall_column(&String::from_utf8_lossy(&read(run, "metrics.csv")));
    let metrics_csv = metrics(&runs[0]).lines().count() > 1 && metrics(&runs[0]) == metrics(&runs[1]);
    report.line(
        9,
        "reproducibility",
        ok && checkpoints && eval_csv && metrics_csv,
        format!(
            "two CLI runs with identical flags: checkpoints identical {checkpoints}, eval.csv identical {eval_csv}, \
             metrics.csv identical apart from wall_seconds {metrics_csv}"
        ),
    );
}

fn main() {
    let mut report = Report { failed: 0 };
    gradient_suite(&mut report);
    convolution_oracle(&mut report);
    masking_statistics(&mut report);

    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    let manifest = synthesize_dataset(
        PhantomKind::TextLike,
        N_TRAIN,
        N_VAL,
        128,
        1.0,
        NoiseSpec::Gaussian { sigma: 100.0 },
        &data,
        DATA_SEED,
    )
    .unwrap();
    trends(&mut report, &manifest);
    reproducibility(&mut report, &data, work.path());

    if report.failed > 0 {
        println!("{} criteria failed", report.failed);
        std::process::exit(1);
    }
}
