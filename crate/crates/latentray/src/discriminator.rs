//! Convolutional discriminator: a strided conv stack mirroring the generator
//! resolutions, leaky ReLU activations, and a single logit head.
//!
//! Besides plain logits, it can emit the gradient of each logit w.r.t. the
//! input image *as a differentiable graph node*. Because leaky ReLU is
//! piecewise linear, that gradient is an explicit chain of transposed
//! convolutions and constant activation masks, so an R1 penalty built on it
//! back-propagates into the weights like any other loss term.

use crate::autodiff::{self, Tensor};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamSet};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_side: usize,
    /// Channels per resolution from full resolution down to 4x4; the length
    /// must be `log2(side) - 1`, mirroring the generator's tap count.
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn desk(image_side: usize) -> Self {
        let mut channels = crate::generator::GeneratorConfig::default_channels(image_side);
        channels.reverse();
        DiscriminatorConfig { image_side, channels }
    }

    pub fn num_levels(&self) -> usize {
        (self.image_side as f64).log2() as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_side.is_power_of_two() || self.image_side < 8 {
            return Err(Error::Config(format!(
                "image_side must be a power of two >= 8, got {}",
                self.image_side
            )));
        }
        if self.channels.len() != self.num_levels() {
            return Err(Error::Config(format!(
                "discriminator channel schedule has {} entries, need {}",
                self.channels.len(),
                self.num_levels()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    params: ParamSet,
    /// (conv, input resolution) in forward order; first is `from_gray`.
    convs: Vec<(Conv2d, usize)>,
    head: Linear,
}

const LRELU_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let side = config.image_side;

        let mut convs = Vec::new();
        convs.push((
            Conv2d::new(&mut params, "from_gray", 1, config.channels[0], 3, 1, &mut rng),
            side,
        ));
        let mut res = side;
        for i in 0..config.channels.len() - 1 {
            let conv = Conv2d::new(
                &mut params,
                &format!("down{i}"),
                config.channels[i],
                config.channels[i + 1],
                3,
                2,
                &mut rng,
            );
            convs.push((conv, res));
            res /= 2;
        }
        debug_assert_eq!(res, 4);
        let c_last = *config.channels.last().unwrap();
        convs.push((
            Conv2d::new(&mut params, "final_conv", c_last, c_last, 3, 1, &mut rng),
            4,
        ));
        let head = Linear::new(&mut params, "head", c_last * 16, 1, &mut rng);

        Ok(Discriminator {
            config,
            params,
            convs,
            head,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_trainable(&self, flag: bool) {
        self.params.set_trainable(flag);
    }

    fn forward_trace(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut masks = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (conv, _) in &self.convs {
            h = conv.forward(&h);
            // leaky-ReLU derivative mask, captured as a constant
            let mask = Tensor::constant(
                h.value()
                    .mapv(|v| if v >= 0.0 { 1.0 } else { LRELU_SLOPE }),
            );
            masks.push(mask);
            h = autodiff::leaky_relu(&h, LRELU_SLOPE);
        }
        let n = h.shape()[0];
        let c_last = *self.config.channels.last().unwrap();
        let flat = autodiff::reshape(&h, &[n, c_last * 16]);
        let logits = self.head.forward(&flat);
        (logits, masks)
    }

    /// Batched logits `(N, 1)`.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.forward_trace(x).0
    }

    /// Batched logits plus `d logit_n / d x_n` as a graph node of shape
    /// `(N, 1, side, side)`.
    pub fn logits_with_input_grad(&self, x: &Tensor) -> (Tensor, Tensor) {
        let (logits, masks) = self.forward_trace(x);
        let n = x.shape()[0];
        let c_last = *self.config.channels.last().unwrap();

        // d logit / d flat = head weight row, shared by every sample
        let mut u = autodiff::broadcast_row(&self.head.weight, n);
        u = autodiff::reshape(&u, &[n, c_last, 4, 4]);
        for ((conv, in_res), mask) in self.convs.iter().zip(&masks).rev() {
            u = autodiff::mul(&u, mask);
            u = autodiff::conv2d_input_grad(&u, &conv.weight, *in_res, *in_res, conv.stride, conv.pad);
        }
        (logits, u)
    }

    /// Realness logit of one image.
    pub fn discriminate(&self, image: &Image) -> Result<f64> {
        if image.side() != self.config.image_side {
            return Err(Error::Shape(format!(
                "image side {} does not match discriminator side {}",
                image.side(),
                self.config.image_side
            )));
        }
        let x = crate::losses::image_to_batch(image);
        let logit = self.logits(&x).item();
        if !logit.is_finite() {
            return Err(Error::Numeric("discriminator produced a non-finite logit".into()));
        }
        Ok(logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ArrD;
    use ndarray::Array2;
    use rand::Rng;

    fn tiny() -> Discriminator {
        let cfg = DiscriminatorConfig {
            image_side: 16,
            channels: vec![8, 8, 8],
        };
        Discriminator::init(cfg, 2).unwrap()
    }

    fn rand_image_batch(n: usize, side: usize, seed: u64) -> ArrD {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrD::from_shape_fn(IxDyn(&[n, 1, side, side]), |_| rng.gen_range(-0.9..0.9))
    }

    #[test]
    fn deterministic_and_finite_on_flat_input() {
        let d = tiny();
        let img = Image::new(Array2::zeros((16, 16))).unwrap();
        let a = d.discriminate(&img).unwrap();
        let b = d.discriminate(&img).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);

        let wrong = Image::new(Array2::zeros((32, 32))).unwrap();
        assert!(matches!(d.discriminate(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let bad = DiscriminatorConfig {
            image_side: 16,
            channels: vec![8, 8],
        };
        assert!(bad.validate().is_err());
        assert!(DiscriminatorConfig::desk(64).validate().is_ok());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let d = tiny();
        let x0 = rand_image_batch(1, 16, 3);
        let xp = Tensor::param(x0.clone());
        let logit = autodiff::sum_all(&d.logits(&xp));
        logit.backward();
        let analytic = xp.grad().unwrap();

        let step = 1e-4;
        let mut xv = x0.clone();
        let mut max_rel: f64 = 0.0;
        // probe a scattered subset of pixels
        for idx in (0..xv.len()).step_by(17) {
            let orig = xv.as_slice().unwrap()[idx];
            xv.as_slice_mut().unwrap()[idx] = orig + step;
            let fp = autodiff::sum_all(&d.logits(&Tensor::constant(xv.clone()))).item();
            xv.as_slice_mut().unwrap()[idx] = orig - step;
            let fm = autodiff::sum_all(&d.logits(&Tensor::constant(xv.clone()))).item();
            xv.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let an = analytic.as_slice().unwrap()[idx];
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-3, "max rel err {max_rel}");
    }

    #[test]
    fn explicit_input_grad_agrees_with_backward() {
        let d = tiny();
        let x0 = rand_image_batch(2, 16, 4);

        let xp = Tensor::param(x0.clone());
        let s = autodiff::sum_all(&d.logits(&xp));
        s.backward();
        let via_backward = xp.grad().unwrap();

        let (_, grad_node) = d.logits_with_input_grad(&Tensor::constant(x0));
        let via_chain = grad_node.to_array();
        let diff = (&via_backward - &via_chain).mapv(f64::abs).sum();
        let norm = via_backward.mapv(f64::abs).sum();
        assert!(diff / norm < 1e-10, "rel diff {}", diff / norm);
    }

    #[test]
    fn r1_is_differentiable_wrt_weights() {
        let d = tiny();
        let x0 = rand_image_batch(2, 16, 5);
        let x = Tensor::constant(x0);

        let build = |d: &Discriminator| {
            let (_, g) = d.logits_with_input_grad(&x);
            crate::losses::r1_penalty_t(&g, 1.0)
        };

        let r1 = build(&d);
        r1.backward();

        // finite differences on a few scalar weights of the first conv
        let w = &d.convs[0].0.weight;
        let analytic = w.grad().expect("r1 should reach conv weights");
        let step = 1e-5;
        for idx in [0usize, 3, 7] {
            let orig = w.value().as_slice().unwrap()[idx];
            w.update_value(|v| v.as_slice_mut().unwrap()[idx] = orig + step);
            let fp = build(&d).item();
            w.update_value(|v| v.as_slice_mut().unwrap()[idx] = orig - step);
            let fm = build(&d).item();
            w.update_value(|v| v.as_slice_mut().unwrap()[idx] = orig);
            let fd = (fp - fm) / (2.0 * step);
            let an = analytic.as_slice().unwrap()[idx];
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-9);
            assert!(rel < 1e-3, "weight {idx}: rel err {rel} (an={an}, fd={fd})");
        }
    }

    #[test]
    fn r1_on_linear_model_matches_hand_value() {
        // D(x) = w . x + b  =>  grad_x D = w, r1 = (gamma/2) ||w||^2
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w0 = ArrD::from_shape_fn(IxDyn(&[1, 9]), |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::param(w0.clone());
        let n = 3;
        let grad = autodiff::reshape(&autodiff::broadcast_row(&w, n), &[n, 1, 3, 3]);
        let gamma = 1.7;
        let r1 = crate::losses::r1_penalty_t(&grad, gamma);
        let expect = gamma / 2.0 * w0.mapv(|v| v * v).sum();
        assert!((r1.item() - expect).abs() < 1e-12);
    }
}
