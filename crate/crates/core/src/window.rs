//! Box-window statistics over 3D grids via summed-volume tables, shared by
//! the SSIM metric and the SSIM training loss.

/// Summed-volume table with a zero border: `at(z,y,x)` is the sum over the
/// half-open box `[0,z)×[0,y)×[0,x)`.
pub(crate) struct Integral3 {
    h1: usize,
    w1: usize,
    data: Vec<f64>,
}

impl Integral3 {
    pub fn new(dims: [usize; 3], value: impl Fn(usize) -> f64) -> Self {
        let [d, h, w] = dims;
        let (h1, w1) = (h + 1, w + 1);
        let mut data = vec![0.0f64; (d + 1) * h1 * w1];
        for z in 0..d {
            for y in 0..h {
                let mut row = 0.0;
                for x in 0..w {
                    row += value((z * h + y) * w + x);
                    let i = ((z + 1) * h1 + (y + 1)) * w1 + (x + 1);
                    data[i] = row + data[i - w1] + data[i - h1 * w1] - data[i - h1 * w1 - w1];
                }
            }
        }
        Integral3 { h1, w1, data }
    }

    fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.h1 + y) * self.w1 + x]
    }

    /// Sum over `[z0,z1)×[y0,y1)×[x0,x1)`.
    pub fn sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let [z0, y0, x0] = lo;
        let [z1, y1, x1] = hi;
        self.at(z1, y1, x1) - self.at(z0, y1, x1) - self.at(z1, y0, x1) - self.at(z1, y1, x0)
            + self.at(z0, y0, x1)
            + self.at(z0, y1, x0)
            + self.at(z1, y0, x0)
            - self.at(z0, y0, x0)
    }
}

/// Window of half-width `r` around `p`, clipped to the grid.
pub(crate) fn clipped_window(p: [usize; 3], r: usize, dims: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    for a in 0..3 {
        lo[a] = p[a].saturating_sub(r);
        hi[a] = (p[a] + r + 1).min(dims[a]);
    }
    (lo, hi)
}

/// Whether the full window of half-width `r` around `p` lies inside the grid.
pub(crate) fn window_fits(p: [usize; 3], r: usize, dims: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= r && p[a] + r < dims[a])
}

pub(crate) fn unravel(i: usize, dims: [usize; 3]) -> [usize; 3] {
    let [_, h, w] = dims;
    [i / (h * w), (i / w) % h, i % w]
}

/// SSIM with uniform windows: the sum of per-window SSIM over `centers`,
/// the number of centers, and optionally the gradient of that sum with
/// respect to `x`.
pub(crate) struct SsimSum {
    pub sum: f64,
    pub count: usize,
    pub grad_x: Option<Vec<f64>>,
}

/// Local SSIM between `x` and `y` for every index with `is_center(i)` whose
/// full `window³` neighbourhood lies inside `dims`.
pub(crate) fn ssim_sum(
    x: &[f32],
    y: &[f32],
    dims: [usize; 3],
    window: usize,
    c1: f64,
    c2: f64,
    is_center: impl Fn(usize) -> bool,
    want_grad: bool,
) -> SsimSum {
    let r = window / 2;
    let n = (window * window * window) as f64;
    let sx = Integral3::new(dims, |i| x[i] as f64);
    let sy = Integral3::new(dims, |i| y[i] as f64);
    let sxx = Integral3::new(dims, |i| (x[i] as f64).powi(2));
    let syy = Integral3::new(dims, |i| (y[i] as f64).powi(2));
    let sxy = Integral3::new(dims, |i| x[i] as f64 * y[i] as f64);
    let len = x.len();
    let mut sum = 0.0;
    let mut count = 0;
    // per-center coefficients of the gradient (see below)
    let (mut alpha, mut beta, mut gamma) = if want_grad {
        (vec![0.0f64; len], vec![0.0f64; len], vec![0.0f64; len])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..len {
        if !is_center(i) {
            continue;
        }
        let p = unravel(i, dims);
        if !window_fits(p, r, dims) {
            continue;
        }
        let (lo, hi) = clipped_window(p, r, dims);
        let mx = sx.sum(lo, hi) / n;
        let my = sy.sum(lo, hi) / n;
        let vx = sxx.sum(lo, hi) / n - mx * mx;
        let vy = syy.sum(lo, hi) / n - my * my;
        let cxy = sxy.sum(lo, hi) / n - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        count += 1;
        if want_grad {
            // dS/dx_q = [dS/dmx + dS/dvx·(2x_q - 2mx) + dS/dcxy·(y_q - my)] / n
            let ds_dmx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let ds_dvx = -s / b2;
            let ds_dcxy = 2.0 * a1 / (b1 * b2);
            alpha[i] = (ds_dmx - 2.0 * mx * ds_dvx - my * ds_dcxy) / n;
            beta[i] = 2.0 * ds_dvx / n;
            gamma[i] = ds_dcxy / n;
        }
    }
    let grad_x = want_grad.then(|| {
        // Adjoint of the windowed sums: every voxel collects the
        // coefficients of all centers whose window covers it.
        let ia = Integral3::new(dims, |i| alpha[i]);
        let ib = Integral3::new(dims, |i| beta[i]);
        let ig = Integral3::new(dims, |i| gamma[i]);
        (0..len)
            .map(|q| {
                let (lo, hi) = clipped_window(unravel(q, dims), r, dims);
                ia.sum(lo, hi) + x[q] as f64 * ib.sum(lo, hi) + y[q] as f64 * ig.sum(lo, hi)
            })
            .collect()
    });
    SsimSum { sum, count, grad_x }
}
