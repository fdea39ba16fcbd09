//! Two-branch encoder mapping an image to a W-space latent code.
//!
//! Branch A (style) is a strided residual conv stack ending in global average
//! pooling and a two-layer perceptron that emits per-stage modulation pairs
//! (gamma, beta). Branch B (content) is a strided residual conv stack over
//! the same resolutions; at every stage its features are instance-normalized
//! and then denormalized as `(1 + gamma) * h + beta` with the style branch's
//! coefficients. The modulated stage outputs are the encoder feature taps
//! `E_i`; the fused head is global pooling plus a linear map to the latent
//! dimension.

use crate::autodiff::{self, Tensor};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::generator::{batch_row, FeatureStack, LatentCode};
use crate::nn::{Conv2d, Linear, ParamSet};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub latent_dim: usize,
    /// Downsampling stages per branch (resolution halves each stage, ending
    /// at 4x4); equals the number of feature taps.
    pub blocks_per_branch: usize,
    pub stem_channels: usize,
    /// Output channels of each stage, length `blocks_per_branch`.
    pub channels: Vec<usize>,
    pub num_feature_taps: usize,
}

impl EncoderConfig {
    pub fn desk(image_side: usize, latent_dim: usize) -> Self {
        let stages = (image_side as f64).log2() as usize - 2;
        let full = [32usize, 64, 96, 128, 160, 192];
        EncoderConfig {
            image_side,
            latent_dim,
            blocks_per_branch: stages,
            stem_channels: 16,
            channels: full[..stages.min(full.len())].to_vec(),
            num_feature_taps: stages,
        }
    }

    pub fn stages(&self) -> usize {
        (self.image_side as f64).log2() as usize - 2
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_side.is_power_of_two() || self.image_side < 16 {
            return Err(Error::Config(format!(
                "image_side must be a power of two >= 16, got {}",
                self.image_side
            )));
        }
        if self.latent_dim == 0 || self.stem_channels == 0 {
            return Err(Error::Config("latent_dim and stem_channels must be positive".into()));
        }
        let stages = self.stages();
        if self.blocks_per_branch != stages {
            return Err(Error::Config(format!(
                "blocks_per_branch {} must equal the stage count {stages} for side {}",
                self.blocks_per_branch, self.image_side
            )));
        }
        if self.channels.len() != stages {
            return Err(Error::Config(format!(
                "stage channel schedule has {} entries, need {stages}",
                self.channels.len()
            )));
        }
        if self.num_feature_taps != stages {
            return Err(Error::Config(format!(
                "num_feature_taps {} must equal the fused-pathway stage count {stages}",
                self.num_feature_taps
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

const LRELU_SLOPE: f64 = 0.2;

/// Strided downsample conv followed by a two-conv residual pair.
struct Stage {
    down: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
}

impl Stage {
    fn new(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Stage {
            down: Conv2d::new(params, &format!("{name}.down"), in_ch, out_ch, 3, 2, rng),
            res_a: Conv2d::new(params, &format!("{name}.res_a"), out_ch, out_ch, 3, 1, rng),
            res_b: Conv2d::new(params, &format!("{name}.res_b"), out_ch, out_ch, 3, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = autodiff::leaky_relu(&self.down.forward(x), LRELU_SLOPE);
        let r = self.res_b.forward(&autodiff::leaky_relu(&self.res_a.forward(&h), LRELU_SLOPE));
        autodiff::leaky_relu(&autodiff::add(&h, &r), LRELU_SLOPE)
    }
}

struct Branch {
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Branch {
    fn new(params: &mut ParamSet, name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = Conv2d::new(params, &format!("{name}.stem"), 1, cfg.stem_channels, 3, 1, rng);
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut prev = cfg.stem_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            stages.push(Stage::new(params, &format!("{name}.stage{i}"), prev, c, rng));
            prev = c;
        }
        Branch { stem, stages }
    }
}

pub struct Encoder {
    pub config: EncoderConfig,
    params: ParamSet,
    style_branch: Branch,
    content_branch: Branch,
    style_fc1: Linear,
    style_fc2: Linear,
    head: Linear,
}

impl Encoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let style_branch = Branch::new(&mut params, "style", &config, &mut rng);
        let content_branch = Branch::new(&mut params, "content", &config, &mut rng);

        let c_last = *config.channels.last().unwrap();
        let mod_dim: usize = config.channels.iter().map(|c| 2 * c).sum();
        let style_fc1 = Linear::new(&mut params, "style_fc1", c_last, c_last, &mut rng);
        let style_fc2 = Linear::new(&mut params, "style_fc2", c_last, mod_dim, &mut rng);
        let head = Linear::new(&mut params, "head", c_last, config.latent_dim, &mut rng);

        Ok(Encoder {
            config,
            params,
            style_branch,
            content_branch,
            style_fc1,
            style_fc2,
            head,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn set_trainable(&self, flag: bool) {
        self.params.set_trainable(flag);
    }

    /// Batched forward: `(N, 1, side, side)` to codes `(N, d)` plus the
    /// modulated stage outputs as feature taps.
    pub(crate) fn encode_batch(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        // style branch first: one vector of per-stage (gamma, beta) pairs
        let mut s = autodiff::leaky_relu(&self.style_branch.stem.forward(x), LRELU_SLOPE);
        for stage in &self.style_branch.stages {
            s = stage.forward(&s);
        }
        let pooled = autodiff::global_avg_pool(&s);
        let hidden = autodiff::leaky_relu(&self.style_fc1.forward(&pooled), LRELU_SLOPE);
        let mods = self.style_fc2.forward(&hidden); // (N, sum 2*c_s)

        // content branch, denormalized per stage
        let mut h = autodiff::leaky_relu(&self.content_branch.stem.forward(x), LRELU_SLOPE);
        let mut taps = Vec::with_capacity(self.config.channels.len());
        let mut offset = 0;
        for (stage, &c) in self.content_branch.stages.iter().zip(&self.config.channels) {
            h = stage.forward(&h);
            let gamma_raw = autodiff::slice_cols(&mods, offset, offset + c);
            let beta = autodiff::slice_cols(&mods, offset + c, offset + 2 * c);
            offset += 2 * c;
            let gamma = autodiff::add_scalar(&gamma_raw, 1.0);
            let normed = autodiff::instance_norm(&h, 1e-5);
            h = autodiff::scale_shift_channels(&normed, &gamma, &beta);
            taps.push(h.clone());
        }

        let code = self.head.forward(&autodiff::global_avg_pool(&h));
        (code, taps)
    }

    /// Encode one image to a W-space code.
    pub fn encode(&self, image: &Image) -> Result<LatentCode> {
        Ok(self.encode_with_features(image)?.0)
    }

    /// Encode one image, also returning the fused-pathway feature taps.
    pub fn encode_with_features(&self, image: &Image) -> Result<(LatentCode, FeatureStack)> {
        if image.side() != self.config.image_side {
            return Err(Error::Shape(format!(
                "image side {} does not match encoder side {}",
                image.side(),
                self.config.image_side
            )));
        }
        let x = crate::losses::image_to_batch(image);
        let (code, taps) = self.encode_batch(&x);
        let cv = code.to_array();
        if !autodiff::all_finite(&cv) {
            return Err(Error::Numeric("encoder produced non-finite code".into()));
        }
        let layers = taps
            .iter()
            .map(|t| {
                let v = t.to_array();
                let shape: Vec<usize> = v.shape()[1..].to_vec();
                let data: Vec<f64> = v.index_axis(ndarray::Axis(0), 0).iter().cloned().collect();
                crate::autodiff::ArrD::from_shape_vec(IxDyn(&shape), data).unwrap()
            })
            .collect();
        Ok((
            LatentCode::new_w(batch_row(&cv, 0)),
            FeatureStack { layers },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ArrD;
    use crate::data::{generate_phantom, PhantomParams};
    use rand::Rng;

    fn tiny() -> Encoder {
        let cfg = EncoderConfig {
            image_side: 16,
            latent_dim: 8,
            blocks_per_branch: 2,
            stem_channels: 4,
            channels: vec![6, 8],
            num_feature_taps: 2,
        };
        Encoder::init(cfg, 3).unwrap()
    }

    #[test]
    fn encode_is_deterministic_with_correct_length() {
        let e = tiny();
        let (img, _) = generate_phantom(&PhantomParams::new(32, 0.5, 1)).unwrap();
        let img = Image::new(crate::data::area_resample(img.pixels(), 16)).unwrap();
        let a = e.encode(&img).unwrap();
        let b = e.encode(&img).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.dim(), 8);
        assert_eq!(a.space, crate::generator::Space::W);
    }

    #[test]
    fn features_are_stable_and_counted() {
        let e = tiny();
        let (img32, _) = generate_phantom(&PhantomParams::new(32, 0.6, 2)).unwrap();
        let img = Image::new(crate::data::area_resample(img32.pixels(), 16)).unwrap();
        let (code, feats) = e.encode_with_features(&img).unwrap();
        let (code2, feats2) = e.encode_with_features(&img).unwrap();
        assert_eq!(code.values, code2.values);
        assert_eq!(feats.len(), 2);
        for (a, b) in feats.layers.iter().zip(&feats2.layers) {
            assert_eq!(a, b);
        }
        // identical stacks give a zero encoder content loss
        let zero = crate::losses::content_loss_encoder(&feats, &feats2).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let e = tiny();
        let (img, _) = generate_phantom(&PhantomParams::new(32, 0.5, 1)).unwrap();
        assert!(matches!(e.encode(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn config_consistency_checks() {
        let mut cfg = EncoderConfig::desk(64, 128);
        assert!(cfg.validate().is_ok());
        cfg.num_feature_taps = 3;
        assert!(cfg.validate().is_err());
        let mut cfg2 = EncoderConfig::desk(64, 128);
        cfg2.channels.pop();
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn code_gradient_matches_finite_differences() {
        let e = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = ArrD::from_shape_fn(IxDyn(&[1, 1, 16, 16]), |_| rng.gen_range(-0.9..0.9));

        // scalar probe: sum of all code coordinates
        let xp = Tensor::param(x0.clone());
        let (code, _) = e.encode_batch(&xp);
        autodiff::sum_all(&code).backward();
        let analytic = xp.grad().unwrap();

        let step = 1e-4;
        let mut xv = x0.clone();
        let mut max_rel: f64 = 0.0;
        for idx in (0..xv.len()).step_by(23) {
            let orig = xv.as_slice().unwrap()[idx];
            xv.as_slice_mut().unwrap()[idx] = orig + step;
            let (cp, _) = e.encode_batch(&Tensor::constant(xv.clone()));
            let fp = autodiff::sum_all(&cp).item();
            xv.as_slice_mut().unwrap()[idx] = orig - step;
            let (cm, _) = e.encode_batch(&Tensor::constant(xv.clone()));
            let fm = autodiff::sum_all(&cm).item();
            xv.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let an = analytic.as_slice().unwrap()[idx];
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-3, "max rel err {max_rel}");
    }
}
