//! Corpus-level properties of the procedural generator families: spectral
//! fingerprints, clamp contracts, and bitwise regeneration at scale.

use vlmdet_core::data::{generate_sample, GeneratorFamily};

/// Power of the luminance at one 2-D DFT bin (a direct Goertzel-style
/// projection; phase-invariant, so it measures the artifact regardless of
/// the per-sample random phase).
fn power_at(img: &vlmdet_core::data::Image, fx: f64, fy: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let (mut re, mut im) = (0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let luma = (img.get(0, y, x) + img.get(1, y, x) + img.get(2, y, x)) as f64 / 3.0;
            let angle = -std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64);
            re += luma * angle.cos();
            im += luma * angle.sin();
        }
    }
    let n = (w * h) as f64;
    (re * re + im * im) / (n * n)
}

#[test]
fn gan_spectrum_peaks_at_artifact_frequency() {
    // Mean power spectrum of GAN_LIKE minus REAL over a seed ensemble peaks
    // at the category's checkerboard frequency; off-artifact bins only see
    // texture sampling noise, which the difference of means cancels.
    let side = 32usize;
    let category = 0u32; // period 4 -> 8 cycles across 32 px
    let period = GeneratorFamily::checker_period(category);
    let f_art = side as f64 / period as f64;
    let bins = [
        (f_art, f_art), // the artifact bin
        (f_art - 2.0, f_art),
        (f_art, f_art - 2.0),
        (f_art + 2.0, f_art + 2.0),
        (f_art - 3.0, f_art + 3.0),
    ];

    let seeds = 200u64;
    let mean_powers = |family: GeneratorFamily| -> Vec<f64> {
        let mut sums = vec![0.0f64; bins.len()];
        for seed in 0..seeds {
            let img = generate_sample(family, category, 9_000 + seed, side).image;
            for (i, &(fx, fy)) in bins.iter().enumerate() {
                sums[i] += power_at(&img, fx, fy);
            }
        }
        sums.iter().map(|s| s / seeds as f64).collect()
    };

    let gan = mean_powers(GeneratorFamily::GanLike);
    let real = mean_powers(GeneratorFamily::Real);
    let artifact_gap = gan[0] - real[0];
    for i in 1..bins.len() {
        let off_gap = gan[i] - real[i];
        assert!(
            artifact_gap > 4.0 * off_gap.abs().max(1e-12),
            "peak {artifact_gap:.3e} vs off-bin {:?} {off_gap:.3e}",
            bins[i]
        );
    }
}

#[test]
fn diffusion_attenuates_high_frequencies() {
    let side = 32usize;
    let hf = (12.0, 12.0);
    let mean_power = |family: GeneratorFamily| -> f64 {
        (0..50)
            .map(|seed| power_at(&generate_sample(family, 1, 11_000 + seed, side).image, hf.0, hf.1))
            .sum::<f64>()
            / 50.0
    };
    let real = mean_power(GeneratorFamily::Real);
    let diffusion = mean_power(GeneratorFamily::DiffusionLike);
    assert!(
        diffusion < real * 0.5,
        "diffusion {diffusion:.3e} vs real {real:.3e}"
    );
}

#[test]
fn unit_range_holds_across_the_corpus() {
    // clamp contract over 1000 samples per family
    for family in GeneratorFamily::ALL {
        for i in 0..1000u64 {
            let sample = generate_sample(family, (i % 20) as u32, 100_000 + i, 16);
            assert!(sample.image.in_unit_range(), "{family:?} seed {i}");
            assert_eq!(sample.label, family.label());
        }
    }
}

#[test]
fn regeneration_is_bitwise_at_encoder_resolution() {
    for family in GeneratorFamily::ALL {
        let a = generate_sample(family, 7, 42, 64);
        let b = generate_sample(family, 7, 42, 64);
        assert!(a.image.bits_eq(&b.image));
        assert_eq!(a.caption, b.caption);
        assert_eq!(a.source_id(), b.source_id());
    }
}
