//! Independent reference implementations used to cross-check the production
//! code paths. Everything here is written directly from the defining
//! formulas — per-window loops, two-loop sums, Gaussian elimination, central
//! finite differences — and deliberately shares no code with the modules it
//! verifies.

use crate::autodiff::ArrD;
use crate::losses::SsimConfig;
use ndarray::{Array1, Array2};

/// SSIM by direct per-window evaluation: for every valid window position,
/// Gaussian-weighted means, variances and covariance, then the two-factor
/// similarity; the result is the average over all windows.
pub fn reference_ssim(x: &Array2<f64>, y: &Array2<f64>, cfg: &SsimConfig) -> f64 {
    let k = cfg.window_side;
    let (h, w) = x.dim();
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);

    // independent Gaussian weights
    let mid = (k / 2) as f64;
    let mut weights = vec![0.0; k * k];
    let mut wsum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let di = i as f64 - mid;
            let dj = j as f64 - mid;
            let v = (-(di * di + dj * dj) / (2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma)).exp();
            weights[i * k + j] = v;
            wsum += v;
        }
    }
    for v in &mut weights {
        *v /= wsum;
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for oi in 0..=(h - k) {
        for oj in 0..=(w - k) {
            let mut mx = 0.0;
            let mut my = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let wt = weights[i * k + j];
                    mx += wt * x[(oi + i, oj + j)];
                    my += wt * y[(oi + i, oj + j)];
                }
            }
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut cxy = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let wt = weights[i * k + j];
                    // weighted second moments minus squared means
                    vx += wt * x[(oi + i, oj + j)] * x[(oi + i, oj + j)];
                    vy += wt * y[(oi + i, oj + j)] * y[(oi + i, oj + j)];
                    cxy += wt * x[(oi + i, oj + j)] * y[(oi + i, oj + j)];
                }
            }
            vx -= mx * mx;
            vy -= my * my;
            cxy -= mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean absolute difference by explicit loop.
pub fn brute_l1(a: &ArrD, b: &ArrD) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y).abs();
    }
    acc / a.len() as f64
}

/// Mean squared difference by explicit loop.
pub fn brute_l2(a: &ArrD, b: &ArrD) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    acc / a.len() as f64
}

/// Content loss by two explicit loops: sum over layers of the elementwise
/// absolute sum divided by the layer size.
pub fn brute_content(a: &[ArrD], b: &[ArrD]) -> f64 {
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        let mut acc = 0.0;
        for (x, y) in fa.iter().zip(fb.iter()) {
            acc += (x - y).abs();
        }
        total += acc / fa.len() as f64;
    }
    total
}

/// Dense linear solve by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        // pivot
        let mut best = col;
        for row in col + 1..n {
            if m[(row, col)].abs() > m[(best, col)].abs() {
                best = row;
            }
        }
        if m[(best, col)].abs() < 1e-300 {
            return None;
        }
        if best != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(best, j)];
                m[(best, j)] = tmp;
            }
            rhs.swap(col, best);
        }
        for row in col + 1..n {
            let f = m[(row, col)] / m[(col, col)];
            for j in col..n {
                m[(row, j)] -= f * m[(col, j)];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for col in (0..n).rev() {
        let mut acc = rhs[col];
        for j in col + 1..n {
            acc -= m[(col, j)] * x[j];
        }
        x[col] = acc / m[(col, col)];
    }
    Some(x)
}

/// Closed-form two-class discriminant direction `S_W^-1 (mu1 - mu0)`,
/// normalized, computed with the elimination solver above.
pub fn lda_direction_closed_form(
    codes_0: &[Array1<f64>],
    codes_1: &[Array1<f64>],
) -> Option<Array1<f64>> {
    let d = codes_0[0].len();
    let mean = |codes: &[Array1<f64>]| {
        let mut m = Array1::<f64>::zeros(d);
        for c in codes {
            m += c;
        }
        m / codes.len() as f64
    };
    let mu0 = mean(codes_0);
    let mu1 = mean(codes_1);
    let mut scatter = Array2::<f64>::zeros((d, d));
    for (codes, mu) in [(codes_0, &mu0), (codes_1, &mu1)] {
        for c in codes {
            let centered = c - mu;
            for i in 0..d {
                for j in 0..d {
                    scatter[(i, j)] += centered[i] * centered[j];
                }
            }
        }
    }
    let mut v = solve_dense(&scatter, &(&mu1 - &mu0))?;
    let norm = v.mapv(|x| x * x).sum().sqrt();
    if norm == 0.0 {
        return None;
    }
    v.mapv_inplace(|x| x / norm);
    Some(v)
}

/// Central finite differences of a scalar function of an array.
pub fn finite_diff_grad(f: &mut dyn FnMut(&ArrD) -> f64, x: &ArrD, step: f64) -> ArrD {
    let mut g = ArrD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + step;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Relative L2 error between two gradients.
pub fn rel_error(a: &ArrD, b: &ArrD) -> f64 {
    let num = (a - b).mapv(|v| v * v).sum().sqrt();
    let den = a
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(b.mapv(|v| v * v).sum().sqrt());
    num / den.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn solver_matches_known_system() {
        let a = Array2::from_shape_vec((2, 2), vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let b = Array1::from_vec(vec![5.0, 10.0]);
        let x = solve_dense(&a, &b).unwrap();
        // 2x + y = 5, x + 3y = 10 => x = 1, y = 3
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
        // singular matrix
        let s = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(solve_dense(&s, &b).is_none());
    }

    #[test]
    fn brute_losses_on_hand_values() {
        let a = ArrD::from_shape_vec(IxDyn(&[2]), vec![0.0, 2.0]).unwrap();
        let b = ArrD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap();
        assert!((brute_l1(&a, &b) - 1.5).abs() < 1e-12);
        assert!((brute_l2(&a, &b) - 2.5).abs() < 1e-12);
        assert!((brute_content(&[a.clone()], &[b]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn reference_ssim_identity() {
        let x = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 31 + j * 17) % 11) as f64 / 11.0);
        let s = reference_ssim(&x, &x, &SsimConfig::default());
        assert!((s - 1.0).abs() < 1e-9);
    }
}
