use deconoise_core::image::io::{load_image, save_image};
use deconoise_core::image::{
    add_noise, convolve_psf, generate_phantoms, synthesize_dataset, DatasetManifest, Image, NoiseSpec, PhantomKind,
    PsfKernel,
};
use deconoise_core::tensor::PadMode;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w).map(|_| rng.gen_range(-50.0..200.0)).collect()).unwrap()
}

/// Pads by explicit mirroring into a larger array, then sums the flipped
/// kernel over each window.
fn oracle_convolve(img: &Image, psf: &PsfKernel) -> Vec<f64> {
    let (h, w, k) = (img.height() as isize, img.width() as isize, psf.size() as isize);
    let r = k / 2;
    let mirror = |i: isize, n: isize| -> isize {
        if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        }
    };
    let pw = w + 2 * r;
    let mut padded = vec![0.0f64; ((h + 2 * r) * pw) as usize];
    for y in -r..h + r {
        for x in -r..w + r {
            padded[((y + r) * pw + x + r) as usize] = img.get(mirror(y, h) as usize, mirror(x, w) as usize) as f64;
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    // s(y, x) = Σ z(y - dy, x - dx) h(dy, dx)
                    let (dy, dx) = (i - r, j - r);
                    acc +=
                        padded[((y - dy + r) * pw + (x - dx + r)) as usize] * psf.weight(i as usize, j as usize) as f64;
                }
            }
            out.push(acc);
        }
    }
    out
}

#[test]
fn convolve_psf_matches_padded_oracle() {
    let psf = PsfKernel::gaussian(1.0, 5).unwrap();
    let img = random_image(1, 16, 16);
    let got = convolve_psf(&img, &psf, PadMode::Reflect).unwrap();
    for (g, e) in got.pixels().iter().zip(oracle_convolve(&img, &psf)) {
        assert!((*g as f64 - e).abs() < 1e-5 * e.abs().max(1.0), "{g} vs {e}");
    }
}

#[test]
fn convolve_psf_matches_oracle_on_many_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let sigma = rng.gen_range(0.0..2.0);
        let psf = PsfKernel::gaussian_default(sigma).unwrap();
        let h = rng.gen_range(psf.size()..psf.size() + 12);
        let w = rng.gen_range(psf.size()..psf.size() + 12);
        let img = random_image(100 + case, h, w);
        let got = convolve_psf(&img, &psf, PadMode::Reflect).unwrap();
        for (g, e) in got.pixels().iter().zip(oracle_convolve(&img, &psf)) {
            assert!(
                (*g as f64 - e).abs() < 1e-5 * e.abs().max(1.0),
                "case {case}: {g} vs {e}"
            );
        }
    }
}

#[test]
fn asymmetric_kernel_is_convolution_not_correlation() {
    let weights = vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let shift = PsfKernel::from_weights(3, weights, 0.0).unwrap();
    let img = random_image(3, 5, 5);
    let out = convolve_psf(&img, &shift, PadMode::Zero).unwrap();
    // kernel tap at (0, +1) moves content one column to the right
    for y in 0..5 {
        assert_eq!(out.get(y, 0), 0.0);
        for x in 1..5 {
            assert_eq!(out.get(y, x), img.get(y, x - 1));
        }
    }
}

#[test]
fn blur_preserves_mass_of_interior_phantoms() {
    let psf = PsfKernel::gaussian_default(1.0).unwrap();
    for mut z in generate_phantoms(PhantomKind::Blobs, 5, 64, 9).unwrap() {
        // clear a border wider than the kernel radius
        for y in 0..64 {
            for x in 0..64 {
                if !(8..56).contains(&y) || !(8..56).contains(&x) {
                    z.set(y, x, 0.0);
                }
            }
        }
        let s = convolve_psf(&z, &psf, PadMode::Reflect).unwrap();
        let (before, after) = (z.mean(), s.mean());
        assert!((before - after).abs() <= 1e-4 * before.max(1.0), "{before} vs {after}");
    }
}

#[test]
fn blur_commutes_with_constant_offset() {
    let psf = PsfKernel::gaussian_default(1.5).unwrap();
    let z = random_image(4, 20, 24);
    let c = 17.25;
    let lhs = convolve_psf(&z.map(|v| v + c), &psf, PadMode::Reflect).unwrap();
    let rhs = convolve_psf(&z, &psf, PadMode::Reflect).unwrap();
    for (a, b) in lhs.pixels().iter().zip(rhs.pixels()) {
        assert!((a - (b + c)).abs() < 1e-5 * a.abs().max(1.0));
    }
}

#[test]
fn gaussian_noise_is_zero_centred() {
    let s = random_image(5, 400, 400);
    let sigma = 70.0;
    let x = add_noise(&s, NoiseSpec::Gaussian { sigma }, 11).unwrap().image;
    let n = s.len() as f64;
    let mean: f64 = x
        .pixels()
        .iter()
        .zip(s.pixels())
        .map(|(a, b)| (a - b) as f64)
        .sum::<f64>()
        / n;
    assert!(mean.abs() <= 4.0 * sigma / n.sqrt(), "mean residual {mean}");
}

#[test]
fn blob_foreground_fraction_is_bounded() {
    let imgs = generate_phantoms(PhantomKind::Blobs, 100, 128, 21).unwrap();
    let fg: usize = imgs
        .iter()
        .map(|i| i.pixels().iter().filter(|&&v| v > 0.0).count())
        .sum();
    let frac = fg as f64 / (100.0 * 128.0 * 128.0);
    assert!((0.01..=0.20).contains(&frac), "foreground fraction {frac}");
}

#[test]
fn text_like_foreground_fraction_is_bounded() {
    let imgs = generate_phantoms(PhantomKind::TextLike, 20, 128, 22).unwrap();
    let fg: usize = imgs
        .iter()
        .map(|i| i.pixels().iter().filter(|&&v| v > 0.0).count())
        .sum();
    let frac = fg as f64 / (20.0 * 128.0 * 128.0);
    assert!((0.05..=0.40).contains(&frac), "foreground fraction {frac}");
}

#[test]
fn synthesize_writes_triples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_dataset(
        PhantomKind::TextLike,
        4,
        2,
        64,
        1.0,
        NoiseSpec::Gaussian { sigma: 100.0 },
        dir.path(),
        3,
    )
    .unwrap();
    assert_eq!((m.train.len(), m.val.len()), (4, 2));
    let ntf = walk(dir.path()).into_iter().filter(|p| p.ends_with(".ntf")).count();
    assert_eq!(ntf, 18);
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, m);
    loaded.validate().unwrap();

    let psf = PsfKernel::gaussian_default(1.0).unwrap();
    let z = load_image(&m.path(m.train[0].phantom.as_ref().unwrap())).unwrap();
    let s = load_image(&m.path(m.train[0].signal.as_ref().unwrap())).unwrap();
    assert_eq!(s, convolve_psf(&z, &psf, PadMode::Reflect).unwrap());
}

#[test]
fn noiseless_dataset_has_identical_noisy_and_signal_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_dataset(PhantomKind::Blobs, 1, 1, 64, 1.0, NoiseSpec::None, dir.path(), 1).unwrap();
    for e in m.train.iter().chain(&m.val) {
        let noisy = std::fs::read(m.path(&e.noisy)).unwrap();
        let signal = std::fs::read(m.path(e.signal.as_ref().unwrap())).unwrap();
        assert_eq!(noisy, signal);
    }
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesize_dataset(PhantomKind::Blobs, 0, 0, 64, 1.0, NoiseSpec::None, dir.path(), 1).unwrap();
    assert!(m.train.is_empty() && m.val.is_empty());
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
}

#[test]
fn manifest_rejects_overlapping_splits() {
    let text = "format=deconoise-dataset-1\ntrain=a.ntf;;\nval=a.ntf;;\n";
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.txt"), text).unwrap();
    assert!(DatasetManifest::load(dir.path()).is_err());
}

#[test]
fn manifest_rejects_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::from_noisy_files(dir.path(), &["missing.ntf"], &[]);
    m.save().unwrap();
    let err = DatasetManifest::load(dir.path()).unwrap().validate().unwrap_err();
    assert!(err.to_string().contains("missing.ntf"), "{err}");
}

fn walk(dir: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.to_string_lossy().into_owned());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn raw_round_trip_is_bit_exact(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let img = random_image(seed, h, w);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ntf");
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        prop_assert_eq!(
            img.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!((back.height(), back.width()), (h, w));
    }
}
