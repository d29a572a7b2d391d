use ndarray::Array2;

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with edge-replicate padding, without any
/// renormalization.
pub fn gaussian_blur_raw(image: &Array2<f32>, sigma: f64) -> Array2<f32> {
    assert!(sigma > 0.0, "sigma must be positive");
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = image.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            tmp[[r, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| image[[r, clamp(c as isize + k as isize - radius, w)]] as f64 * wt)
                .sum();
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| tmp[[clamp(r as isize + k as isize - radius, h), c]] * wt)
            .sum::<f64>() as f32
    })
}

/// Gaussian blur; when the input peaks at exactly 1 the output is rescaled
/// to peak at 1 as well.
pub fn gaussian_blur(image: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let out = gaussian_blur_raw(image, sigma);
    let in_max = image.iter().copied().fold(f32::MIN, f32::max);
    let out_max = out.iter().copied().fold(f32::MIN, f32::max);
    if in_max == 1.0 && out_max > 0.0 {
        out.mapv(|v| v / out_max)
    } else {
        out
    }
}
