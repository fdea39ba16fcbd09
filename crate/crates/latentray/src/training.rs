//! The two training loops: adversarial training of the generator, and
//! cyclic-reconstruction training of the encoder against a frozen generator.
//!
//! Everything is driven by one seeded ChaCha stream per loop, so a fixed
//! `(config, seed, platform)` reproduces loss trajectories bit-exactly. The
//! encoder loop performs exactly two optimizer updates per iteration: one
//! back-propagating the synthetic-cycle loss, one the real-cycle loss, with
//! the generator's parameters and constant noise maps untouched throughout.

use crate::autodiff::Tensor;
use crate::data::{DatasetManifest, Image};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{images_to_batch, Generator, GeneratorConfig, NoiseMode};
use crate::losses::{self, SsimConfig};
use crate::nn::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate_g: f64,
    pub learning_rate_d: f64,
    pub learning_rate_e: f64,
    pub r1_gamma: f64,
    /// Lazy regularization: the R1 term joins the discriminator loss every
    /// this many steps.
    pub r1_interval: usize,
    pub seed: u64,
    /// Emit an intermediate checkpoint every N iterations (0 = only final).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            iterations: 2000,
            learning_rate_g: 2e-3,
            learning_rate_d: 2e-3,
            learning_rate_e: 1e-4,
            r1_gamma: 1.0,
            r1_interval: 16,
            seed: 0,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, iterations and log_every must be positive".into(),
            ));
        }
        if self.learning_rate_g <= 0.0 || self.learning_rate_d <= 0.0 || self.learning_rate_e <= 0.0
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.r1_interval == 0 {
            return Err(Error::Config("r1_interval must be positive".into()));
        }
        Ok(())
    }
}

/// One logged step: iteration index, named loss values, elapsed seconds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub losses: BTreeMap<String, f64>,
    pub wall_time: f64,
}

/// Load and preprocess every image referenced by a manifest.
pub fn load_images(manifest: &DatasetManifest, side: usize) -> Result<Vec<Image>> {
    if manifest.is_empty() {
        return Err(Error::Input("manifest has no records".into()));
    }
    manifest
        .records
        .iter()
        .map(|r| crate::data::preprocess(&manifest.resolve(r), side))
        .collect()
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

fn gather_batch(images: &[Image], idx: &[usize]) -> Tensor {
    let selected: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
    images_to_batch(&selected)
}

fn check_finite(name: &str, v: f64, iteration: usize) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "{name} became non-finite at iteration {iteration}"
        )));
    }
    Ok(v)
}

/// Adversarial training: alternating discriminator and generator steps with
/// the non-saturating logistic loss and lazy R1 on real images.
pub fn train_gan(
    images: &[Image],
    gcfg: GeneratorConfig,
    dcfg: DiscriminatorConfig,
    tcfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Generator, Discriminator, Vec<TrainLogRecord>)> {
    tcfg.validate()?;
    gcfg.validate()?;
    dcfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if gcfg.image_side != dcfg.image_side {
        return Err(Error::Config("generator/discriminator resolutions differ".into()));
    }
    for img in images {
        if img.side() != gcfg.image_side {
            return Err(Error::Config(format!(
                "dataset image side {} does not match configured side {}",
                img.side(),
                gcfg.image_side
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let generator = Generator::init(gcfg.clone(), rng.gen())?;
    let discriminator = Discriminator::init(dcfg, rng.gen())?;
    let mut adam_g = Adam::new(generator.params().tensors(), tcfg.learning_rate_g, 0.0, 0.99);
    let mut adam_d = Adam::new(
        discriminator.params().tensors(),
        tcfg.learning_rate_d,
        0.0,
        0.99,
    );

    let d = gcfg.latent_dim;
    let start = Instant::now();
    let mut log = Vec::new();

    for t in 0..tcfg.iterations {
        let noise_override = match gcfg.noise_mode {
            NoiseMode::Constant => None,
            NoiseMode::Random => Some(generator.sample_noise(&mut rng)),
        };

        // --- discriminator step (fakes detached: G frozen for this pass) ---
        let real = gather_batch(images, &batch_indices(&mut rng, images.len(), tcfg.batch_size));
        let z = Tensor::constant(crate::nn::standard_normal(&[tcfg.batch_size, d], &mut rng));
        generator.set_trainable(false);
        let w = generator.map_batch(&z);
        let (fake, _) = generator.synth_batch(&w, noise_override.as_deref());
        generator.set_trainable(true);

        let apply_r1 = t % tcfg.r1_interval == 0;
        let (real_logits, r1) = if apply_r1 {
            let (logits, grad) = discriminator.logits_with_input_grad(&real);
            (logits, Some(losses::r1_penalty_t(&grad, tcfg.r1_gamma)))
        } else {
            (discriminator.logits(&real), None)
        };
        let fake_logits = discriminator.logits(&fake);
        let d_adv = losses::gan_d_loss_t(&real_logits, &fake_logits);
        let d_total = match &r1 {
            Some(p) => crate::autodiff::add(&d_adv, p),
            None => d_adv.clone(),
        };
        let d_loss_val = check_finite("d_loss", d_total.item(), t)?;
        d_total.backward();
        adam_d.step();

        // --- generator step (D frozen) ---
        discriminator.set_trainable(false);
        let z = Tensor::constant(crate::nn::standard_normal(&[tcfg.batch_size, d], &mut rng));
        let w = generator.map_batch(&z);
        let (fake, _) = generator.synth_batch(&w, noise_override.as_deref());
        let g_loss = losses::gan_g_loss_t(&discriminator.logits(&fake));
        let g_loss_val = check_finite("g_loss", g_loss.item(), t)?;
        g_loss.backward();
        adam_g.step();
        discriminator.set_trainable(true);

        if t % tcfg.log_every == 0 || t + 1 == tcfg.iterations {
            let mut losses_map = BTreeMap::new();
            losses_map.insert("d_loss".to_string(), d_loss_val);
            losses_map.insert("g_loss".to_string(), g_loss_val);
            if let Some(p) = &r1 {
                losses_map.insert("r1".to_string(), p.item());
            }
            log.push(TrainLogRecord {
                iteration: t,
                losses: losses_map,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
        if let Some(dir) = checkpoint_dir {
            if tcfg.checkpoint_every > 0 && t > 0 && t % tcfg.checkpoint_every == 0 {
                crate::checkpoint::save_gan(
                    &generator,
                    &discriminator,
                    &dir.join(format!("gan_{t:06}.ckpt")),
                )?;
            }
        }
    }

    Ok((generator, discriminator, log))
}

/// Summary facts asserted by the encoder-training contract.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderTrainStats {
    /// Total optimizer updates applied to the encoder (2 per iteration).
    pub encoder_updates: u64,
    /// Generator fingerprint before and after training (must be equal).
    pub generator_fingerprint_before: String,
    pub generator_fingerprint_after: String,
}

impl EncoderTrainStats {
    pub fn generator_was_frozen(&self) -> bool {
        self.generator_fingerprint_before == self.generator_fingerprint_after
    }
}

/// Cyclic-reconstruction training of the encoder against a frozen generator.
///
/// Each iteration performs two encoder updates:
/// 1. synthetic cycle `z -> w -> x=G(w) -> ŵ=E(x) -> x̂=G(ŵ)`, minimizing
///    `L1(w, ŵ) + L2(x, x̂) + (1 - SSIM) + content over G features`;
/// 2. real cycle `I -> ŵ=E(I) -> Î=G(ŵ)`, minimizing
///    `L2(I, Î) + (1 - SSIM) + content over E features`.
pub fn train_encoder(
    generator: &Generator,
    images: &[Image],
    ecfg: EncoderConfig,
    tcfg: &TrainConfig,
    ssim_cfg: &SsimConfig,
) -> Result<(Encoder, Vec<TrainLogRecord>, EncoderTrainStats)> {
    tcfg.validate()?;
    ecfg.validate()?;
    ssim_cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if ecfg.latent_dim != generator.config.latent_dim {
        return Err(Error::Config(format!(
            "encoder latent_dim {} does not match generator latent_dim {}",
            ecfg.latent_dim, generator.config.latent_dim
        )));
    }
    if ecfg.image_side != generator.config.image_side {
        return Err(Error::Config("encoder/generator resolutions differ".into()));
    }
    if generator.config.noise_mode != NoiseMode::Constant {
        return Err(Error::Config(
            "encoder training requires the generator's constant noise mode".into(),
        ));
    }

    let fingerprint_before = generator.fingerprint();
    generator.set_trainable(false);

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let encoder = Encoder::init(ecfg, rng.gen())?;
    let mut adam_e = Adam::new(encoder.params().tensors(), tcfg.learning_rate_e, 0.5, 0.99);

    let d = generator.config.latent_dim;
    let start = Instant::now();
    let mut log = Vec::new();

    for t in 0..tcfg.iterations {
        // --- update 1: synthetic cycle ---
        let z = Tensor::constant(crate::nn::standard_normal(&[tcfg.batch_size, d], &mut rng));
        let w = generator.map_batch(&z); // constant: generator is frozen
        let (x, g_feats) = generator.synth_batch(&w, None);
        let (w_hat, _) = encoder.encode_batch(&x);
        let (x_hat, g_feats_hat) = generator.synth_batch(&w_hat, None);
        let syn_loss =
            losses::total_syn_loss_t(&w, &w_hat, &x, &x_hat, &g_feats, &g_feats_hat, ssim_cfg);
        let syn_val = check_finite("syn_loss", syn_loss.item(), t)?;
        syn_loss.backward();
        adam_e.step();

        // --- update 2: real cycle ---
        let real = gather_batch(images, &batch_indices(&mut rng, images.len(), tcfg.batch_size));
        let (w_hat2, e_feats) = encoder.encode_batch(&real);
        let (recon, _) = generator.synth_batch(&w_hat2, None);
        let (_, e_feats_hat) = encoder.encode_batch(&recon);
        let real_loss = losses::total_real_loss_t(&real, &recon, &e_feats, &e_feats_hat, ssim_cfg);
        let real_val = check_finite("real_loss", real_loss.item(), t)?;
        real_loss.backward();
        adam_e.step();

        if t % tcfg.log_every == 0 || t + 1 == tcfg.iterations {
            let mut losses_map = BTreeMap::new();
            losses_map.insert("syn_loss".to_string(), syn_val);
            losses_map.insert("real_loss".to_string(), real_val);
            log.push(TrainLogRecord {
                iteration: t,
                losses: losses_map,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }

    generator.set_trainable(true);
    let stats = EncoderTrainStats {
        encoder_updates: adam_e.steps_taken(),
        generator_fingerprint_before: fingerprint_before,
        generator_fingerprint_after: generator.fingerprint(),
    };
    debug_assert!(stats.generator_was_frozen());
    Ok((encoder, log, stats))
}

/// Write training log records as JSON lines.
pub fn write_log_jsonl(records: &[TrainLogRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("log record serialization cannot fail"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomParams};

    fn tiny_images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| {
                let theta = 0.4 + 0.3 * (i as f64 / n as f64);
                let (img, _) = generate_phantom(&PhantomParams::new(32, theta, i as u64)).unwrap();
                Image::new(crate::data::area_resample(img.pixels(), 16)).unwrap()
            })
            .collect()
    }

    fn tiny_gcfg() -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: 8,
            image_side: 16,
            mapping_layers: 2,
            channels: vec![8, 8, 8],
            convs_per_block: 1,
            noise_mode: NoiseMode::Constant,
            constant_noise_seed: 1,
        }
    }

    fn tiny_dcfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_side: 16,
            channels: vec![8, 8, 8],
        }
    }

    fn tiny_tcfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            iterations,
            log_every: 1,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn loss_sequence(log: &[TrainLogRecord], key: &str) -> Vec<f64> {
        log.iter().map(|r| r.losses[key]).collect()
    }

    #[test]
    fn gan_training_is_seed_deterministic() {
        let images = tiny_images(6);
        let run = || {
            let (_, _, log) =
                train_gan(&images, tiny_gcfg(), tiny_dcfg(), &tiny_tcfg(4), None).unwrap();
            (loss_sequence(&log, "d_loss"), loss_sequence(&log, "g_loss"))
        };
        let (d1, g1) = run();
        let (d2, g2) = run();
        assert_eq!(d1, d2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn gan_training_rejects_bad_inputs() {
        let images = tiny_images(2);
        let mut bad = tiny_tcfg(2);
        bad.batch_size = 0;
        assert!(matches!(
            train_gan(&images, tiny_gcfg(), tiny_dcfg(), &bad, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train_gan(&[], tiny_gcfg(), tiny_dcfg(), &tiny_tcfg(1), None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn encoder_training_freezes_generator_and_counts_updates() {
        let images = tiny_images(6);
        let generator = Generator::init(tiny_gcfg(), 3).unwrap();
        let before = generator.fingerprint();
        let ecfg = EncoderConfig {
            image_side: 16,
            latent_dim: 8,
            blocks_per_branch: 2,
            stem_channels: 4,
            channels: vec![6, 8],
            num_feature_taps: 2,
        };
        let iterations = 3;
        let (_, log, stats) = train_encoder(
            &generator,
            &images,
            ecfg,
            &tiny_tcfg(iterations),
            &SsimConfig::default(),
        )
        .unwrap();
        assert_eq!(stats.encoder_updates, 2 * iterations as u64);
        assert!(stats.generator_was_frozen());
        assert_eq!(generator.fingerprint(), before);
        assert_eq!(log.len(), iterations);
    }

    #[test]
    fn encoder_training_is_seed_deterministic() {
        let images = tiny_images(4);
        let generator = Generator::init(tiny_gcfg(), 3).unwrap();
        let ecfg = EncoderConfig {
            image_side: 16,
            latent_dim: 8,
            blocks_per_branch: 2,
            stem_channels: 4,
            channels: vec![6, 8],
            num_feature_taps: 2,
        };
        let run = || {
            let (_, log, _) = train_encoder(
                &generator,
                &images,
                ecfg.clone(),
                &tiny_tcfg(3),
                &SsimConfig::default(),
            )
            .unwrap();
            (loss_sequence(&log, "syn_loss"), loss_sequence(&log, "real_loss"))
        };
        let (s1, r1) = run();
        let (s2, r2) = run();
        assert_eq!(s1, s2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn encoder_training_rejects_mismatched_dims() {
        let images = tiny_images(2);
        let generator = Generator::init(tiny_gcfg(), 3).unwrap();
        let ecfg = EncoderConfig {
            image_side: 16,
            latent_dim: 9, // != generator's 8
            blocks_per_branch: 2,
            stem_channels: 4,
            channels: vec![6, 8],
            num_feature_taps: 2,
        };
        assert!(matches!(
            train_encoder(&generator, &images, ecfg, &tiny_tcfg(1), &SsimConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
