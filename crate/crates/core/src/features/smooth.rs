use crate::volume::Geometry;

/// Normalized 1D Gaussian taps, truncated at 3 sigma.
pub(crate) fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma_vox).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with `sigma_mm` on every axis; edges replicate.
pub(crate) fn gaussian_blur(g: &Geometry, data: &[f64], sigma_mm: f64) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    for axis in 0..3 {
        let taps = gaussian_kernel(sigma_mm / g.spacing[axis]);
        if taps.len() == 1 {
            continue;
        }
        let radius = (taps.len() / 2) as i64;
        let n = g.dims[axis] as i64;
        let stride = strides[axis];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % g.dims[axis]) as i64;
            let base = i - pos as usize * stride;
            let mut acc = 0.0;
            for (k, w) in taps.iter().enumerate() {
                let j = (pos + k as i64 - radius).clamp(0, n - 1) as usize;
                acc += w * cur[base + j * stride];
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Spatial gradient in mm⁻¹: central differences, one-sided on faces.
pub(crate) fn gradient(g: &Geometry, f: &[f64]) -> [Vec<f64>; 3] {
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let mut out: [Vec<f64>; 3] = [vec![0.0; f.len()], vec![0.0; f.len()], vec![0.0; f.len()]];
    for (axis, grad) in out.iter_mut().enumerate() {
        let n = g.dims[axis];
        let s = strides[axis];
        let h = g.spacing[axis];
        for (i, d) in grad.iter_mut().enumerate() {
            let pos = (i / s) % n;
            *d = if pos == 0 {
                (f[i + s] - f[i]) / h
            } else if pos == n - 1 {
                (f[i] - f[i - s]) / h
            } else {
                (f[i + s] - f[i - s]) / (2.0 * h)
            };
        }
    }
    out
}
