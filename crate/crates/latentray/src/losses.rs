//! Scalar objectives: L1/L2, Gaussian-windowed SSIM and its dissimilarity,
//! per-layer content losses, the two composite cycle losses, and the
//! adversarial losses.
//!
//! Each loss exists twice: a `_t` variant on [`Tensor`]s that training
//! back-propagates through, and a plain-array variant for callers that only
//! need the value. The array variants delegate to the tensor path so there is
//! exactly one formula for each quantity.

use crate::autodiff::{self, ArrD, Tensor};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::generator::FeatureStack;
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

/// Structural-similarity constants. Defaults follow the common convention:
/// 7x7 Gaussian window with sigma 1.5, k1 = 0.01, k2 = 0.03, and a dynamic
/// range of 2 for images in [-1, 1].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window_side: usize,
    pub gaussian_sigma: f64,
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_side: 7,
            gaussian_sigma: 1.5,
            dynamic_range: 2.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_side < 3 || self.window_side % 2 == 0 {
            return Err(Error::Parameter(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window_side
            )));
        }
        let (c1, c2) = self.stabilizers();
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::Parameter("SSIM stabilizers must be positive".into()));
        }
        Ok(())
    }

    pub fn stabilizers(&self) -> (f64, f64) {
        let c1 = (self.k1 * self.dynamic_range).powi(2);
        let c2 = (self.k2 * self.dynamic_range).powi(2);
        (c1, c2)
    }

    /// Normalized 2-D Gaussian window.
    pub fn window(&self) -> Array2<f64> {
        let k = self.window_side;
        let mid = (k / 2) as f64;
        let s2 = 2.0 * self.gaussian_sigma * self.gaussian_sigma;
        let mut w = Array2::<f64>::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                let di = i as f64 - mid;
                let dj = j as f64 - mid;
                w[(i, j)] = (-(di * di + dj * dj) / s2).exp();
            }
        }
        let sum = w.sum();
        w.mapv_inplace(|v| v / sum);
        w
    }
}

// ---------------------------------------------------------------------------
// Tensor-level losses (differentiable)
// ---------------------------------------------------------------------------

/// Mean absolute difference over all elements.
pub fn l1_t(a: &Tensor, b: &Tensor) -> Tensor {
    autodiff::mean_all(&autodiff::abs(&autodiff::sub(a, b)))
}

/// Mean squared difference over all elements.
pub fn l2_t(a: &Tensor, b: &Tensor) -> Tensor {
    autodiff::mean_all(&autodiff::square(&autodiff::sub(a, b)))
}

/// Per-sample mean squared difference: `(N, ...) -> (N,)`.
pub fn l2_per_sample_t(a: &Tensor, b: &Tensor) -> Tensor {
    autodiff::mean_per_sample(&autodiff::square(&autodiff::sub(a, b)))
}

/// Per-sample SSIM over `(N, 1, H, W)` batches: Gaussian-weighted local
/// statistics in valid-convolution mode, averaged over each sample's map.
pub fn ssim_per_sample_t(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Tensor {
    assert_eq!(x.shape(), y.shape(), "ssim: shape mismatch");
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "ssim expects (N, 1, H, W)");
    assert!(
        shape[2] >= cfg.window_side && shape[3] >= cfg.window_side,
        "ssim: image smaller than window"
    );
    let (c1, c2) = cfg.stabilizers();
    let k = cfg.window_side;
    let win = cfg.window();
    let mut w4 = Array4::<f64>::zeros((1, 1, k, k));
    w4.slice_mut(ndarray::s![0, 0, .., ..]).assign(&win);
    let kernel = Tensor::constant(w4.into_dyn());

    let blur = |t: &Tensor| autodiff::conv2d(t, &kernel, None, 1, 0);

    let mu_x = blur(x);
    let mu_y = blur(y);
    let xx = blur(&autodiff::square(x));
    let yy = blur(&autodiff::square(y));
    let xy = blur(&autodiff::mul(x, y));

    let mu_x2 = autodiff::square(&mu_x);
    let mu_y2 = autodiff::square(&mu_y);
    let mu_xy = autodiff::mul(&mu_x, &mu_y);

    let var_x = autodiff::sub(&xx, &mu_x2);
    let var_y = autodiff::sub(&yy, &mu_y2);
    let cov = autodiff::sub(&xy, &mu_xy);

    let num = autodiff::mul(
        &autodiff::add_scalar(&autodiff::scale(&mu_xy, 2.0), c1),
        &autodiff::add_scalar(&autodiff::scale(&cov, 2.0), c2),
    );
    let den = autodiff::mul(
        &autodiff::add_scalar(&autodiff::add(&mu_x2, &mu_y2), c1),
        &autodiff::add_scalar(&autodiff::add(&var_x, &var_y), c2),
    );
    autodiff::mean_per_sample(&autodiff::div(&num, &den))
}

pub fn ssim_t(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Tensor {
    autodiff::mean_all(&ssim_per_sample_t(x, y, cfg))
}

/// `1 - SSIM`: zero at perfect reconstruction, used inside minimized losses.
pub fn ssim_dissimilarity_t(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Tensor {
    autodiff::add_scalar(&autodiff::neg(&ssim_t(x, y, cfg)), 1.0)
}

pub fn ssim_dissimilarity_per_sample_t(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Tensor {
    autodiff::add_scalar(&autodiff::neg(&ssim_per_sample_t(x, y, cfg)), 1.0)
}

/// Sum over layers of the per-layer normalized L1 feature distance: each term
/// is `(1/N_i) * ||F_i - F̂_i||_1` with `N_i` the per-sample element count of
/// layer `i`; batched inputs average over the batch.
pub fn content_loss_t(feats_a: &[Tensor], feats_b: &[Tensor]) -> Tensor {
    assert_eq!(feats_a.len(), feats_b.len(), "content loss: stack lengths differ");
    assert!(!feats_a.is_empty(), "content loss: empty feature stacks");
    let mut per_sample_terms: Vec<Tensor> = Vec::with_capacity(feats_a.len());
    for (fa, fb) in feats_a.iter().zip(feats_b) {
        assert_eq!(fa.shape(), fb.shape(), "content loss: layer shape mismatch");
        let n_i: usize = fa.shape().iter().skip(1).product();
        let d = autodiff::abs(&autodiff::sub(fa, fb));
        per_sample_terms.push(autodiff::scale(&autodiff::sum_per_sample(&d), 1.0 / n_i as f64));
    }
    autodiff::mean_all(&autodiff::add_n(&per_sample_terms))
}

/// Per-sample content loss: `(N,)` vector of per-layer normalized L1 sums.
pub fn content_loss_per_sample_t(feats_a: &[Tensor], feats_b: &[Tensor]) -> Tensor {
    assert_eq!(feats_a.len(), feats_b.len());
    let mut terms: Vec<Tensor> = Vec::with_capacity(feats_a.len());
    for (fa, fb) in feats_a.iter().zip(feats_b) {
        let n_i: usize = fa.shape().iter().skip(1).product();
        let d = autodiff::abs(&autodiff::sub(fa, fb));
        terms.push(autodiff::scale(&autodiff::sum_per_sample(&d), 1.0 / n_i as f64));
    }
    autodiff::add_n(&terms)
}

/// Synthetic-cycle objective: `L1(w, ŵ) + L2(x, x̂) + (1 - SSIM(x, x̂)) +
/// content(G features)`, unit weights.
pub fn total_syn_loss_t(
    w: &Tensor,
    w_hat: &Tensor,
    x: &Tensor,
    x_hat: &Tensor,
    g_feats: &[Tensor],
    g_feats_hat: &[Tensor],
    cfg: &SsimConfig,
) -> Tensor {
    let latent = l1_t(w, w_hat);
    let pixel = l2_t(x, x_hat);
    let structural = ssim_dissimilarity_t(x, x_hat, cfg);
    let content = content_loss_t(g_feats, g_feats_hat);
    autodiff::add_n(&[latent, pixel, structural, content])
}

/// Real-cycle objective: `L2(I, Î) + (1 - SSIM(I, Î)) + content(E features)`,
/// unit weights.
pub fn total_real_loss_t(
    image: &Tensor,
    recon: &Tensor,
    e_feats: &[Tensor],
    e_feats_hat: &[Tensor],
    cfg: &SsimConfig,
) -> Tensor {
    let pixel = l2_t(image, recon);
    let structural = ssim_dissimilarity_t(image, recon, cfg);
    let content = content_loss_t(e_feats, e_feats_hat);
    autodiff::add_n(&[pixel, structural, content])
}

/// Non-saturating generator loss: `mean softplus(-fake_logits)`.
pub fn gan_g_loss_t(fake_logits: &Tensor) -> Tensor {
    autodiff::mean_all(&autodiff::softplus(&autodiff::neg(fake_logits)))
}

/// Logistic discriminator loss: `mean softplus(fake) + mean softplus(-real)`.
pub fn gan_d_loss_t(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    autodiff::add(
        &autodiff::mean_all(&autodiff::softplus(fake_logits)),
        &autodiff::mean_all(&autodiff::softplus(&autodiff::neg(real_logits))),
    )
}

/// R1 penalty from the (differentiable) gradient of the real logits w.r.t.
/// the real images: `(gamma / 2) * E_n ||grad_n||^2`.
pub fn r1_penalty_t(input_grad: &Tensor, gamma: f64) -> Tensor {
    autodiff::scale(
        &autodiff::mean_all(&autodiff::sum_per_sample(&autodiff::square(input_grad))),
        gamma / 2.0,
    )
}

// ---------------------------------------------------------------------------
// Array-level wrappers
// ---------------------------------------------------------------------------

fn check_same_shape(a: &ArrD, b: &ArrD) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "operand shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference of two equal-shape arrays.
pub fn l1(a: &ArrD, b: &ArrD) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(l1_t(&Tensor::constant(a.clone()), &Tensor::constant(b.clone())).item())
}

/// Mean squared difference of two equal-shape arrays.
pub fn l2(a: &ArrD, b: &ArrD) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(l2_t(&Tensor::constant(a.clone()), &Tensor::constant(b.clone())).item())
}

pub(crate) fn image_to_batch(x: &Image) -> Tensor {
    let side = x.side();
    let data: Vec<f64> = x.pixels().iter().cloned().collect();
    Tensor::constant(ArrD::from_shape_vec(ndarray::IxDyn(&[1, 1, side, side]), data).unwrap())
}

/// Mean SSIM of two images in [-1, 1].
pub fn ssim(x: &Image, y: &Image, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if x.side() != y.side() {
        return Err(Error::Shape(format!(
            "image sides differ: {} vs {}",
            x.side(),
            y.side()
        )));
    }
    if x.side() < cfg.window_side {
        return Err(Error::Shape(format!(
            "image side {} smaller than SSIM window {}",
            x.side(),
            cfg.window_side
        )));
    }
    Ok(ssim_t(&image_to_batch(x), &image_to_batch(y), cfg).item())
}

/// `1 - ssim(x, y)`.
pub fn ssim_dissimilarity(x: &Image, y: &Image, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim(x, y, cfg)?)
}

fn content_loss_stacks(a: &FeatureStack, b: &FeatureStack) -> Result<f64> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Shape(format!(
            "feature stacks have different lengths: {} vs {}",
            a.layers.len(),
            b.layers.len()
        )));
    }
    let mut total = 0.0;
    for (fa, fb) in a.layers.iter().zip(&b.layers) {
        check_same_shape(fa, fb)?;
        let n_i = fa.len() as f64;
        total += fa
            .iter()
            .zip(fb.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n_i;
    }
    Ok(total)
}

/// Content loss over generator feature stacks.
pub fn content_loss_generator(f: &FeatureStack, f_hat: &FeatureStack) -> Result<f64> {
    content_loss_stacks(f, f_hat)
}

/// Content loss over encoder feature stacks — the same formula, applied to
/// features supplied by the encoder.
pub fn content_loss_encoder(f: &FeatureStack, f_hat: &FeatureStack) -> Result<f64> {
    content_loss_stacks(f, f_hat)
}

/// Array-level synthetic-cycle objective.
#[allow(clippy::too_many_arguments)]
pub fn total_syn_loss(
    w: &ArrD,
    w_hat: &ArrD,
    x: &Image,
    x_hat: &Image,
    g_feats: &FeatureStack,
    g_feats_hat: &FeatureStack,
    cfg: &SsimConfig,
) -> Result<f64> {
    Ok(l1(w, w_hat)?
        + l2(&image_arr(x), &image_arr(x_hat))?
        + ssim_dissimilarity(x, x_hat, cfg)?
        + content_loss_generator(g_feats, g_feats_hat)?)
}

/// Array-level real-cycle objective.
pub fn total_real_loss(
    image: &Image,
    recon: &Image,
    e_feats: &FeatureStack,
    e_feats_hat: &FeatureStack,
    cfg: &SsimConfig,
) -> Result<f64> {
    Ok(l2(&image_arr(image), &image_arr(recon))?
        + ssim_dissimilarity(image, recon, cfg)?
        + content_loss_encoder(e_feats, e_feats_hat)?)
}

fn image_arr(x: &Image) -> ArrD {
    x.pixels().clone().into_dyn()
}

/// Adversarial losses from raw logits. Returns `(g_loss, d_loss)`; the R1
/// penalty is computed separately from the discriminator's input gradient
/// (see [`r1_penalty_t`] and the discriminator's `logits_with_input_grad`).
pub fn gan_losses(real_logits: &[f64], fake_logits: &[f64]) -> Result<(f64, f64)> {
    if real_logits.iter().chain(fake_logits).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
    let g = fake_logits.iter().map(|&v| softplus(-v)).sum::<f64>() / fake_logits.len() as f64;
    let d = fake_logits.iter().map(|&v| softplus(v)).sum::<f64>() / fake_logits.len() as f64
        + real_logits.iter().map(|&v| softplus(-v)).sum::<f64>() / real_logits.len() as f64;
    Ok((g, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomParams};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arr(v: &[f64]) -> ArrD {
        ArrD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap()
    }

    #[test]
    fn l1_l2_hand_values() {
        let a = arr(&[0.0, 2.0]);
        let b = arr(&[1.0, 0.0]);
        assert!((l1(&a, &b).unwrap() - 1.5).abs() < 1e-12);
        assert!((l2(&a, &b).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(l2(&a, &a).unwrap(), 0.0);
        assert!(l1(&a, &arr(&[1.0])).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let (img, _) = generate_phantom(&PhantomParams::new(32, 0.5, 5)).unwrap();
        let cfg = SsimConfig::default();
        let s = ssim(&img, &img, &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "ssim(x,x) = {s}");
        assert!(ssim_dissimilarity(&img, &img, &cfg).unwrap().abs() < 1e-6);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image::new(ndarray::Array2::from_elem((32, 32), -1.0)).unwrap();
        let b = Image::new(ndarray::Array2::from_elem((32, 32), 1.0)).unwrap();
        let cfg = SsimConfig::default();
        let c1 = (0.01f64 * 2.0).powi(2);
        let expect = (-2.0 + c1) / (2.0 + c1);
        let got = ssim(&a, &b, &cfg).unwrap();
        assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
        let d = ssim_dissimilarity(&a, &b, &cfg).unwrap();
        assert!((d - (1.0 - expect)).abs() < 1e-9);
    }

    #[test]
    fn ssim_monotone_under_growing_noise() {
        let (x, _) = generate_phantom(&PhantomParams::new(32, 0.5, 5)).unwrap();
        let cfg = SsimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: ndarray::Array2<f64> =
            ndarray::Array2::from_shape_fn((32, 32), |_| rng.gen_range(-1.0..1.0));
        let mut last = 0.0;
        for sigma in [0.05, 0.1, 0.2] {
            let y = Image::from_clamped(x.pixels() + &(noise.mapv(|v| v * sigma))).unwrap();
            let d = ssim_dissimilarity(&x, &y, &cfg).unwrap();
            assert!(d > last, "dissimilarity should grow with noise");
            last = d;
        }
    }

    #[test]
    fn ssim_rejects_bad_shapes() {
        let a = Image::new(ndarray::Array2::zeros((32, 32))).unwrap();
        let b = Image::new(ndarray::Array2::zeros((16, 16))).unwrap();
        assert!(ssim(&a, &b, &SsimConfig::default()).is_err());
        let tiny = Image::new(ndarray::Array2::zeros((4, 4))).unwrap();
        assert!(ssim(&tiny, &tiny, &SsimConfig::default()).is_err());
    }

    #[test]
    fn content_loss_hand_value() {
        let f = FeatureStack {
            layers: vec![arr(&[1.0, 1.0])],
        };
        let f_hat = FeatureStack {
            layers: vec![arr(&[0.0, 3.0])],
        };
        let v = content_loss_generator(&f, &f_hat).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        assert_eq!(content_loss_generator(&f, &f).unwrap(), 0.0);
        assert!((content_loss_encoder(&f, &f_hat).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn content_loss_homogeneous_in_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in [0.5, 2.0, 7.0] {
            let f = FeatureStack {
                layers: vec![ArrD::from_shape_vec(IxDyn(&[2, 3, 4]), base.clone()).unwrap()],
            };
            let shifted: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + c * d).collect();
            let f_hat = FeatureStack {
                layers: vec![ArrD::from_shape_vec(IxDyn(&[2, 3, 4]), shifted).unwrap()],
            };
            let unit: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + d).collect();
            let f_unit = FeatureStack {
                layers: vec![ArrD::from_shape_vec(IxDyn(&[2, 3, 4]), unit).unwrap()],
            };
            let v_c = content_loss_generator(&f, &f_hat).unwrap();
            let v_1 = content_loss_generator(&f, &f_unit).unwrap();
            assert!((v_c - c * v_1).abs() < 1e-9);
        }
    }

    #[test]
    fn total_losses_equal_sum_of_parts() {
        let (x, _) = generate_phantom(&PhantomParams::new(32, 0.45, 1)).unwrap();
        let (xh, _) = generate_phantom(&PhantomParams::new(32, 0.62, 2)).unwrap();
        let cfg = SsimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ArrD::from_shape_fn(IxDyn(&[8]), |_| rng.gen_range(-1.0..1.0));
        let wh = ArrD::from_shape_fn(IxDyn(&[8]), |_| rng.gen_range(-1.0..1.0));
        let f = FeatureStack {
            layers: vec![ArrD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(-1.0..1.0))],
        };
        let fh = FeatureStack {
            layers: vec![ArrD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(-1.0..1.0))],
        };

        let total = total_syn_loss(&w, &wh, &x, &xh, &f, &fh, &cfg).unwrap();
        let parts = l1(&w, &wh).unwrap()
            + l2(&x.pixels().clone().into_dyn(), &xh.pixels().clone().into_dyn()).unwrap()
            + ssim_dissimilarity(&x, &xh, &cfg).unwrap()
            + content_loss_generator(&f, &fh).unwrap();
        assert!((total - parts).abs() < 1e-9);

        let total_r = total_real_loss(&x, &xh, &f, &fh, &cfg).unwrap();
        let parts_r = l2(&x.pixels().clone().into_dyn(), &xh.pixels().clone().into_dyn()).unwrap()
            + ssim_dissimilarity(&x, &xh, &cfg).unwrap()
            + content_loss_encoder(&f, &fh).unwrap();
        assert!((total_r - parts_r).abs() < 1e-9);

        // perfect cycle: every term vanishes
        let zero = total_syn_loss(&w, &w, &x, &x, &f, &f, &cfg).unwrap();
        assert!(zero.abs() < 1e-9);
        assert!(total_real_loss(&x, &x, &f, &f, &cfg).unwrap().abs() < 1e-9);
    }

    #[test]
    fn gan_loss_hand_values() {
        let (g, d) = gan_losses(&[0.0], &[0.0]).unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(gan_losses(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SsimConfig::default();
        let x0 = ArrD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| rng.gen_range(-0.9..0.9));
        let y0 = ArrD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| rng.gen_range(-0.9..0.9));
        let x = Tensor::constant(x0);
        let yp = Tensor::param(y0.clone());
        let loss = ssim_dissimilarity_t(&x, &yp, &cfg);
        loss.backward();
        let analytic = yp.grad().unwrap();

        let mut fd = ArrD::zeros(y0.raw_dim());
        let mut yv = y0.clone();
        let step = 1e-5;
        for i in 0..yv.len() {
            let orig = yv.as_slice().unwrap()[i];
            yv.as_slice_mut().unwrap()[i] = orig + step;
            let fp = ssim_dissimilarity_t(&x, &Tensor::constant(yv.clone()), &cfg).item();
            yv.as_slice_mut().unwrap()[i] = orig - step;
            let fm = ssim_dissimilarity_t(&x, &Tensor::constant(yv.clone()), &cfg).item();
            yv.as_slice_mut().unwrap()[i] = orig;
            fd.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
        }
        let num = (&analytic - &fd).mapv(|v| v * v).sum().sqrt();
        let den = fd.mapv(|v| v * v).sum().sqrt();
        assert!(num / den < 1e-3, "rel err {}", num / den);
    }

    #[test]
    fn tensor_and_array_ssim_agree() {
        let (x, _) = generate_phantom(&PhantomParams::new(32, 0.4, 7)).unwrap();
        let (y, _) = generate_phantom(&PhantomParams::new(32, 0.7, 8)).unwrap();
        let cfg = SsimConfig::default();
        let via_array = ssim(&x, &y, &cfg).unwrap();
        let xt = image_to_batch(&x);
        let yt = image_to_batch(&y);
        let via_tensor = ssim_t(&xt, &yt, &cfg).item();
        assert!((via_array - via_tensor).abs() < 1e-15);
    }
}
