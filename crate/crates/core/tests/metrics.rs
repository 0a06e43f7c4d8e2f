//! Quality metrics against direct reference computations.

mod common;

use std::collections::HashMap;

use common::{random_image, rng};
use dehaze_core::image::Image;
use dehaze_core::training::metrics::{
    entropy, gaussian_taps, mse, psnr, ssim, Quality, PSNR_CAP, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
use proptest::prelude::*;
use rand::RngExt;

fn psnr_reference(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..a.channels() {
                let d = a.get(y, x, c) - b.get(y, x, c);
                sum += d * d;
                n += 1;
            }
        }
    }
    -10.0 * (sum / n as f64).log10()
}

/// Sliding 2-D Gaussian window; centered moments at every valid position.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    let k = SSIM_WINDOW;
    let c = (k as f64 - 1.0) / 2.0;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            win[i * k + j] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut per_channel = 0.0;
    for ch in 0..a.channels() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=a.height() - k {
            for x0 in 0..=a.width() - k {
                let at = |img: &Image, i: usize, j: usize| img.get(y0 + i, x0 + j, ch);
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += win[i * k + j] * at(a, i, j);
                        my += win[i * k + j] * at(b, i, j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (dx, dy) = (at(a, i, j) - mx, at(b, i, j) - my);
                        vx += win[i * k + j] * dx * dx;
                        vy += win[i * k + j] * dy * dy;
                        cov += win[i * k + j] * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / a.channels() as f64
}

fn entropy_reference(img: &Image) -> f64 {
    let mut hist: HashMap<u8, usize> = HashMap::new();
    let luma = img.luma();
    for v in luma.data() {
        *hist.entry((v.clamp(0.0, 1.0) * 255.0).round() as u8).or_default() += 1;
    }
    let n = luma.data().len() as f64;
    hist.values().map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

fn noisy_copy(img: &Image, seed: u64, amount: f64) -> Image {
    let mut r = rng(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + r.random_range(-amount..amount)).clamp(0.0, 1.0);
    }
    out
}

#[test]
fn psnr_and_ssim_match_references_on_random_pairs() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(11..30), r.random_range(11..30));
        let a = random_image(&mut r, h, w, 3);
        let b = noisy_copy(&a, seed + 100, 0.2);
        assert!((psnr(&a, &b).unwrap() - psnr_reference(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-6);
        let c = random_image(&mut r, h, w, 3);
        assert!((ssim(&a, &c).unwrap() - ssim_reference(&a, &c)).abs() < 1e-6);
    }
}

#[test]
fn entropy_matches_reference() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let img = random_image(&mut r, 20, 17, 3);
        assert!((entropy(&img) - entropy_reference(&img)).abs() < 1e-6);
    }
    assert_eq!(entropy(&Image::filled(8, 8, 3, 0.3)), 0.0);
    let halves = Image::from_fn(8, 8, 3, |_, x, _| if x < 4 { 0.0 } else { 1.0 });
    assert!((entropy(&halves) - 1.0).abs() < 1e-15);
}

#[test]
fn identical_images_hit_the_caps() {
    let img = random_image(&mut rng(1), 16, 16, 3);
    assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    assert_eq!(Quality::of(&img, &img).unwrap(), Quality { psnr: 100.0, ssim: 1.0 });
}

#[test]
fn half_offset_gives_six_decibels() {
    let a = Image::filled(12, 12, 3, 0.25);
    let b = Image::filled(12, 12, 3, 0.75);
    assert_eq!(mse(&a, &b).unwrap(), 0.25);
    assert!((psnr(&a, &b).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
    assert_eq!(psnr(&a, &b).unwrap(), 10.0 * 4f64.log10());
}

#[test]
fn size_errors() {
    let a = Image::filled(12, 12, 3, 0.0);
    assert!(psnr(&a, &Image::filled(12, 11, 3, 0.0)).is_err());
    assert!(ssim(&Image::filled(10, 12, 3, 0.0), &Image::filled(10, 12, 3, 0.0)).is_err());
}

#[test]
fn gaussian_taps_are_normalized_and_symmetric() {
    let t = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in 0..t.len() {
        assert_eq!(t[i], t[t.len() - 1 - i]);
    }
}

#[test]
fn quality_mean_averages_fields() {
    let q = Quality::mean(&[Quality { psnr: 10.0, ssim: 0.2 }, Quality { psnr: 20.0, ssim: 0.4 }]);
    assert!((q.psnr - 15.0).abs() < 1e-12 && (q.ssim - 0.3).abs() < 1e-12);
    assert_eq!(Quality::mean(&[]), Quality::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = random_image(&mut r, 12, 13, 3);
        let b = noisy_copy(&a, seed, 0.5);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_drops_as_noise_grows(seed in 0u64..10_000) {
        let a = random_image(&mut rng(seed), 12, 12, 3);
        let offset = |d: f64| a.map(|v| v + d);
        prop_assert!(psnr(&a, &offset(0.01)).unwrap() > psnr(&a, &offset(0.1)).unwrap());
    }
}
