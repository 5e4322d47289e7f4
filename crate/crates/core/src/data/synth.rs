use super::perturb::gaussian_blur;
use super::{DataError, Image, Result};
use crate::tensor::SeededRng;

/// Source process a sample came from. `Real` is the authentic class
/// (label 0); the other three stand in for distinct synthesis pipelines
/// sharing one tell (missing sensor noise) plus a family-specific artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GeneratorFamily {
    Real,
    GanLike,
    DiffusionLike,
    CommercialLike,
}

impl GeneratorFamily {
    pub const ALL: [GeneratorFamily; 4] = [
        GeneratorFamily::Real,
        GeneratorFamily::GanLike,
        GeneratorFamily::DiffusionLike,
        GeneratorFamily::CommercialLike,
    ];

    pub const FAKES: [GeneratorFamily; 3] = [
        GeneratorFamily::GanLike,
        GeneratorFamily::DiffusionLike,
        GeneratorFamily::CommercialLike,
    ];

    pub fn label(self) -> u8 {
        match self {
            GeneratorFamily::Real => 0,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorFamily::Real => "real",
            GeneratorFamily::GanLike => "gan_like",
            GeneratorFamily::DiffusionLike => "diffusion_like",
            GeneratorFamily::CommercialLike => "commercial_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(GeneratorFamily::Real),
            "gan_like" => Ok(GeneratorFamily::GanLike),
            "diffusion_like" => Ok(GeneratorFamily::DiffusionLike),
            "commercial_like" => Ok(GeneratorFamily::CommercialLike),
            other => Err(DataError::UnknownFamily(other.to_string())),
        }
    }

    fn tag(self) -> u64 {
        match self {
            GeneratorFamily::Real => 1,
            GeneratorFamily::GanLike => 2,
            GeneratorFamily::DiffusionLike => 3,
            GeneratorFamily::CommercialLike => 4,
        }
    }

    /// Checkerboard period in pixels for the upsampling-fingerprint
    /// artifact. Kept below Nyquist so the per-sample random phase carries
    /// full amplitude on the integer grid.
    pub fn checker_period(category: u32) -> usize {
        if category % 2 == 0 {
            4
        } else {
            8
        }
    }
}

/// One generated image with its provenance. Regenerating from
/// `(family, category, seed)` at the same resolution reproduces the pixels
/// bitwise.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub image: Image,
    pub label: u8,
    pub family: GeneratorFamily,
    pub category: u32,
    pub seed: u64,
    pub caption: String,
}

impl SampleRecord {
    pub fn source_id(&self) -> String {
        format!("{}-{}-{}", self.family.name(), self.category, self.seed)
    }
}

const CATEGORY_WORDS: [&str; 20] = [
    "forest", "gravel", "marble", "sand", "water", "clouds", "bricks", "fabric", "grass", "stone",
    "bark", "coral", "dunes", "pebbles", "moss", "rust", "paper", "slate", "waves", "fur",
];

const ORIENTATION_WORDS: [&str; 3] = ["horizontal", "diagonal", "vertical"];
const SCALE_WORDS: [&str; 3] = ["coarse", "medium", "fine"];

/// Every word a generated caption can contain, used to build the closed
/// vocabulary for the text encoder.
pub fn caption_vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.extend_from_slice(&CATEGORY_WORDS);
    words.extend_from_slice(&ORIENTATION_WORDS);
    words.extend_from_slice(&SCALE_WORDS);
    words.extend_from_slice(&["grainy", "clean", "gridded", "smooth", "real", "fake"]);
    words
}

struct CategoryStyle {
    orientation: f64,
    freq_center: f64,
    tint: [f64; 3],
}

fn category_style(category: u32, categories_hint: u32) -> CategoryStyle {
    let mut rng = SeededRng::new(0xCA7E_601D).derive_u64(category as u64);
    let c = categories_hint.max(1) as f64;
    CategoryStyle {
        orientation: std::f64::consts::PI * (category as f64 / c) + rng.next_f64() * 0.2,
        freq_center: 2.0 + (category % 5) as f64 * 2.5 + rng.next_f64(),
        tint: [
            0.9 + 0.2 * rng.next_f64(),
            0.9 + 0.2 * rng.next_f64(),
            0.9 + 0.2 * rng.next_f64(),
        ],
    }
}

struct Grating {
    freq: f64,
    amp: f64,
    theta: f64,
    phase: f64,
}

fn band_limited_texture(
    side: usize,
    style: &CategoryStyle,
    rng: &mut SeededRng,
) -> (Vec<f64>, f64) {
    // Sum of oriented cosine gratings with amplitude ~ 1/f.
    const GRATINGS: usize = 18;
    let mut set = Vec::with_capacity(GRATINGS);
    let mut power = 0.0;
    for k in 0..GRATINGS {
        let lo: f64 = 1.5;
        let hi: f64 = 16.0;
        let freq = if k < 4 {
            // a few gratings pinned near the category band
            (style.freq_center + rng.next_normal() * 0.5).clamp(lo, hi)
        } else {
            (lo.ln() + rng.next_f64() * (hi.ln() - lo.ln())).exp()
        };
        let amp = 1.0 / freq;
        let theta = style.orientation + rng.next_normal() * 0.35;
        let phase = std::f64::consts::TAU * rng.next_f64();
        power += 0.5 * amp * amp;
        set.push(Grating {
            freq,
            amp,
            theta,
            phase,
        });
    }
    // Normalize so the texture has pixel std ~0.15.
    let gain = 0.13 / power.sqrt();
    let inv_side = 1.0 / side as f64;
    let mut out = vec![0.0f64; side * side];
    for g in &set {
        let kx = std::f64::consts::TAU * g.freq * g.theta.cos() * inv_side;
        let ky = std::f64::consts::TAU * g.freq * g.theta.sin() * inv_side;
        let a = g.amp * gain;
        for y in 0..side {
            let row_phase = ky * y as f64 + g.phase;
            for x in 0..side {
                out[y * side + x] += a * (kx * x as f64 + row_phase).cos();
            }
        }
    }
    (out, style.freq_center)
}

struct SynthParams {
    noise_sigma: f64,
    checker_amp: f64,
    checker_period: usize,
    // per-sample phases keep the fingerprint an energy cue rather than a
    // fixed template a linear probe could match directly
    checker_phase: (f64, f64),
    blur_sigma: f64,
    tone_gain: [f64; 3],
}

fn family_params(family: GeneratorFamily, category: u32, rng: &mut SeededRng) -> SynthParams {
    let mut p = SynthParams {
        noise_sigma: 0.0,
        checker_amp: 0.0,
        checker_period: GeneratorFamily::checker_period(category),
        checker_phase: (
            std::f64::consts::TAU * rng.next_f64(),
            std::f64::consts::TAU * rng.next_f64(),
        ),
        blur_sigma: 0.0,
        tone_gain: [1.0, 1.0, 1.0],
    };
    match family {
        GeneratorFamily::Real => {
            p.noise_sigma = 0.04;
        }
        GeneratorFamily::GanLike => {
            // the fingerprint stays subtle: the dominant tell of every fake
            // family is the missing sensor noise, which is what lets a
            // detector trained on one family carry over to the others
            p.noise_sigma = 0.008;
            p.checker_amp = 0.012 + 0.006 * rng.next_f64();
        }
        GeneratorFamily::DiffusionLike => {
            p.noise_sigma = 0.004;
            p.blur_sigma = 0.8 + 0.1 * (category % 3) as f64 + 0.1 * rng.next_f64();
            p.tone_gain = [0.97, 0.99, 1.02];
        }
        GeneratorFamily::CommercialLike => {
            p.noise_sigma = 0.010;
            p.checker_amp = 0.008 + 0.01 * rng.next_f64();
            p.blur_sigma = 0.4 + 0.5 * rng.next_f64();
        }
    }
    p
}

/// Generate one sample. REAL is a band-limited 1/f texture plus per-pixel
/// sensor noise; fake families start from the same texture model and apply
/// their artifact mechanism (periodic checkerboard, high-frequency
/// attenuation, or a randomized mixture) with the sensor noise mostly absent.
pub fn generate_sample(
    family: GeneratorFamily,
    category: u32,
    seed: u64,
    side: usize,
) -> SampleRecord {
    let style = category_style(category, CATEGORY_WORDS.len() as u32);
    let root = SeededRng::new(seed)
        .derive("sample")
        .derive_u64(family.tag())
        .derive_u64(category as u64);
    let mut tex_rng = root.derive("texture");
    let mut fam_rng = root.derive("family");
    let mut noise_rng = root.derive("noise");

    let params = family_params(family, category, &mut fam_rng);
    let (texture, freq_center) = band_limited_texture(side, &style, &mut tex_rng);

    let mut img = Image::zeros(side, side);
    for c in 0..3 {
        let gain = style.tint[c] * params.tone_gain[c];
        let plane = img.channel_mut(c);
        for (p, &t) in plane.iter_mut().zip(&texture) {
            *p = (0.5 + gain * t) as f32;
        }
    }

    if params.blur_sigma > 0.0 {
        img = gaussian_blur(&img, params.blur_sigma).expect("positive sigma");
    }

    if params.checker_amp > 0.0 {
        let w = std::f64::consts::TAU / params.checker_period as f64;
        let (phase_x, phase_y) = params.checker_phase;
        for c in 0..3 {
            let plane = img.channel_mut(c);
            for y in 0..side {
                let cy = (w * y as f64 + phase_y).cos();
                for x in 0..side {
                    let v = params.checker_amp * cy * (w * x as f64 + phase_x).cos();
                    plane[y * side + x] += v as f32;
                }
            }
        }
    }

    if params.noise_sigma > 0.0 {
        for v in img.data_mut() {
            *v += (params.noise_sigma * noise_rng.next_normal()) as f32;
        }
    }
    img.clamp_unit();

    let caption = build_caption(family, category, freq_center, &style, &params, &root);
    SampleRecord {
        image: img,
        label: family.label(),
        family,
        category,
        seed,
        caption,
    }
}

fn build_caption(
    family: GeneratorFamily,
    category: u32,
    freq_center: f64,
    style: &CategoryStyle,
    params: &SynthParams,
    root: &SeededRng,
) -> String {
    let mut words: Vec<&str> = Vec::new();
    words.push(CATEGORY_WORDS[category as usize % CATEGORY_WORDS.len()]);

    let angle = style.orientation.rem_euclid(std::f64::consts::PI);
    let bucket = (angle / (std::f64::consts::PI / 3.0)) as usize;
    words.push(ORIENTATION_WORDS[bucket.min(2)]);

    let scale = if freq_center < 5.0 {
        0
    } else if freq_center < 10.0 {
        1
    } else {
        2
    };
    words.push(SCALE_WORDS[scale]);

    // Appearance words reflect the synthesis parameters, not the family id.
    if params.noise_sigma >= 0.02 {
        words.push("grainy");
    } else {
        words.push("clean");
    }
    if params.checker_amp > 0.0 {
        words.push("gridded");
    }
    if params.blur_sigma >= 0.4 {
        words.push("smooth");
    }

    // Half of all captions carry the authenticity word, mirroring how
    // web-scale caption corpora only sometimes mention it.
    let mut cap_rng = root.derive("caption");
    if cap_rng.next_f64() < 0.5 {
        words.push(if family.label() == 0 { "real" } else { "fake" });
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bitwise_identical() {
        for family in GeneratorFamily::ALL {
            let a = generate_sample(family, 3, 1234, 32);
            let b = generate_sample(family, 3, 1234, 32);
            assert!(a.image.bits_eq(&b.image), "{family:?}");
            assert_eq!(a.caption, b.caption);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_sample(GeneratorFamily::Real, 0, 1, 32);
        let b = generate_sample(GeneratorFamily::Real, 0, 2, 32);
        assert!(!a.image.bits_eq(&b.image));
    }

    #[test]
    fn labels_follow_family() {
        assert_eq!(generate_sample(GeneratorFamily::Real, 0, 5, 16).label, 0);
        for family in GeneratorFamily::FAKES {
            assert_eq!(generate_sample(family, 0, 5, 16).label, 1);
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for family in GeneratorFamily::ALL {
            for seed in 0..100 {
                let s = generate_sample(family, (seed % 20) as u32, seed, 32);
                assert!(s.image.in_unit_range(), "{family:?} seed {seed}");
            }
        }
    }

    #[test]
    fn captions_use_known_vocabulary() {
        let vocab = caption_vocabulary();
        for family in GeneratorFamily::ALL {
            for seed in 0..20 {
                let s = generate_sample(family, seed as u32 % 20, seed, 16);
                for word in s.caption.split_whitespace() {
                    assert!(vocab.contains(&word), "unknown word {word}");
                }
            }
        }
    }

    #[test]
    fn family_name_roundtrip() {
        for family in GeneratorFamily::ALL {
            assert_eq!(GeneratorFamily::parse(family.name()).unwrap(), family);
        }
        assert!(GeneratorFamily::parse("nope").is_err());
    }
}
