use ndarray::Array3;

/// Continuous source index for each of `n_out` output voxel centres when the output voxel
/// is `ratio` input voxels wide. Centres align on the shared physical extent.
pub fn source_coords(n_out: usize, ratio: f64) -> Vec<f64> {
    (0..n_out).map(|i| (i as f64 + 0.5) * ratio - 0.5).collect()
}

struct Tap {
    i0: usize,
    i1: usize,
    w: f64,
}

fn taps(coords: &[f64], n: usize) -> Vec<Tap> {
    coords
        .iter()
        .map(|&x| {
            if n == 1 {
                return Tap { i0: 0, i1: 0, w: 0.0 };
            }
            let x = x.clamp(0.0, (n - 1) as f64);
            let i0 = (x.floor() as usize).min(n - 2);
            Tap { i0, i1: i0 + 1, w: x - i0 as f64 }
        })
        .collect()
}

/// Separable trilinear sampling of `src` at the outer product of per-axis source
/// coordinates, clamping to the edge.
pub fn trilinear_resample(src: &Array3<f32>, coords: &[Vec<f64>; 3]) -> Array3<f32> {
    let shape = src.shape();
    let [tx, ty, tz] = [0, 1, 2].map(|k| taps(&coords[k], shape[k]));
    let mut out = Array3::zeros((tx.len(), ty.len(), tz.len()));
    for (i, a) in tx.iter().enumerate() {
        for (j, b) in ty.iter().enumerate() {
            for (k, c) in tz.iter().enumerate() {
                let v = |x: usize, y: usize, z: usize| src[[x, y, z]] as f64;
                let c00 = v(a.i0, b.i0, c.i0) * (1.0 - c.w) + v(a.i0, b.i0, c.i1) * c.w;
                let c01 = v(a.i0, b.i1, c.i0) * (1.0 - c.w) + v(a.i0, b.i1, c.i1) * c.w;
                let c10 = v(a.i1, b.i0, c.i0) * (1.0 - c.w) + v(a.i1, b.i0, c.i1) * c.w;
                let c11 = v(a.i1, b.i1, c.i0) * (1.0 - c.w) + v(a.i1, b.i1, c.i1) * c.w;
                let c0 = c00 * (1.0 - b.w) + c01 * b.w;
                let c1 = c10 * (1.0 - b.w) + c11 * b.w;
                out[[i, j, k]] = (c0 * (1.0 - a.w) + c1 * a.w) as f32;
            }
        }
    }
    out
}
