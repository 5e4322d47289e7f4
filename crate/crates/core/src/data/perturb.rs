use super::{DataError, Image, Result};

// IJG Annex K base quantization tables, row-major zig-zag-free order.
const LUMA_QUANT: [i32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_QUANT: [i32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling: `s = 5000/q` below 50, `200 - 2q` at or above, then
/// `Q' = clamp(floor((Q*s + 50)/100), 1, 255)`. Quality 50 maps to `s = 100`,
/// leaving the base tables unmodified.
pub fn scaled_quant_tables(quality: u32) -> Result<([i32; 64], [i32; 64])> {
    if !(1..=100).contains(&quality) {
        return Err(DataError::QualityOutOfRange(quality));
    }
    let s: i32 = if quality < 50 {
        (5000 / quality) as i32
    } else {
        200 - 2 * quality as i32
    };
    let scale = |q: &[i32; 64]| {
        let mut out = [0i32; 64];
        for (o, &v) in out.iter_mut().zip(q) {
            *o = ((v * s + 50) / 100).clamp(1, 255);
        }
        out
    };
    Ok((scale(&LUMA_QUANT), scale(&CHROMA_QUANT)))
}

// Orthonormal 8x8 DCT-II matrix; forward is D·f·Dᵀ, inverse Dᵀ·F·D.
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let c = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    d
}

fn block_dct(block: &[[f64; 8]; 8], d: &[[f64; 8]; 8], transpose_d: bool) -> [[f64; 8]; 8] {
    // out = M·block·Mᵀ where M = d (forward) or dᵀ (inverse)
    let m = |i: usize, j: usize| if transpose_d { d[j][i] } else { d[i][j] };
    let mut tmp = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += m(i, k) * block[k][j];
            }
            tmp[i][j] = acc;
        }
    }
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += tmp[i][k] * m(j, k);
            }
            out[i][j] = acc;
        }
    }
    out
}

// Edge-inclusive mirror index: -1 -> 0, -2 -> 1, n -> n-1, n+1 -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Quantization round trip of baseline JPEG (no chroma subsampling, no
/// entropy coding): BT.601 full-range YCbCr, per-channel 8x8 DCT-II,
/// IJG-scaled quantization, inverse transform, clamp to [0, 1]. Images whose
/// sides are not multiples of 8 are mirror-padded and cropped back.
pub fn jpeg_roundtrip(img: &Image, quality: u32) -> Result<Image> {
    let (luma_q, chroma_q) = scaled_quant_tables(quality)?;
    let (w, h) = (img.width(), img.height());
    let pw = w.div_ceil(8) * 8;
    let ph = h.div_ceil(8) * 8;

    // RGB -> YCbCr in the 0..255 domain (JFIF offsets on the chroma planes).
    let mut planes = vec![vec![0.0f64; pw * ph]; 3];
    for y in 0..ph {
        for x in 0..pw {
            let sy = reflect(y as isize, h);
            let sx = reflect(x as isize, w);
            let r = img.get(0, sy, sx) as f64 * 255.0;
            let g = img.get(1, sy, sx) as f64 * 255.0;
            let b = img.get(2, sy, sx) as f64 * 255.0;
            planes[0][y * pw + x] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][y * pw + x] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
            planes[2][y * pw + x] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
        }
    }

    let d = dct_matrix();
    for (ci, plane) in planes.iter_mut().enumerate() {
        let q = if ci == 0 { &luma_q } else { &chroma_q };
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = plane[(by + i) * pw + bx + j] - 128.0;
                    }
                }
                let mut freq = block_dct(&block, &d, false);
                for (i, row) in freq.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let qv = q[i * 8 + j] as f64;
                        *v = (*v / qv).round() * qv;
                    }
                }
                let rec = block_dct(&freq, &d, true);
                for (i, row) in rec.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        plane[(by + i) * pw + bx + j] = v + 128.0;
                    }
                }
            }
        }
    }

    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let yv = planes[0][y * pw + x];
            let cb = planes[1][y * pw + x] - 128.0;
            let cr = planes[2][y * pw + x] - 128.0;
            let r = yv + 1.402 * cr;
            let g = yv - 0.344_136 * cb - 0.714_136 * cr;
            let b = yv + 1.772 * cb;
            out.set(0, y, x, (r / 255.0).clamp(0.0, 1.0) as f32);
            out.set(1, y, x, (g / 255.0).clamp(0.0, 1.0) as f32);
            out.set(2, y, x, (b / 255.0).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian kernel over `[-ceil(3σ), ceil(3σ)]`.
pub fn blur_kernel(sigma: f64) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(DataError::SigmaOutOfRange(sigma));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }
    Ok(kernel)
}

/// Separable Gaussian blur, horizontal then vertical pass, mirror padding,
/// each channel independently. No clamping: convolution with a normalized
/// non-negative kernel cannot leave [0, 1] when the input is in range.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    let kernel = blur_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let mut out = Image::zeros(w, h);
    let mut tmp = vec![0.0f32; w * h];

    for c in 0..3 {
        let src = img.channel(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w);
                    acc += kv * src[y * w + sx] as f64;
                }
                tmp[y * w + x] = acc as f32;
            }
        }
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h);
                    acc += kv * tmp[sy * w + x] as f64;
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio against a unit peak.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
