//! Tiered acceptance harness: every release criterion as an executable
//! check with its threshold pinned in code, emitting one pass/fail row per
//! criterion and a machine-readable JSON report.
//!
//! Tiers nest: `unit` runs the formula/oracle/gradient checks with no
//! training, `integration` adds short determinism and checkpoint runs, and
//! `full` trains the desk-scale pipeline end to end (generator, encoder,
//! inversion cohort, discriminant fit, edit sweep).

pub mod oracle;

use crate::analysis;
use crate::autodiff::{self, ArrD, Tensor};
use crate::data::{self, ClassLabel, Image};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, LatentCode, NoiseMode};
use crate::inversion::{self, InitMode, InversionConfig};
use crate::losses::{self, SsimConfig};
use crate::training::{self, TrainConfig};
use ndarray::{Array1, Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Unit,
    Integration,
    Full,
}

impl std::str::FromStr for Tier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Tier::Unit),
            "integration" => Ok(Tier::Integration),
            "full" => Ok(Tier::Full),
            other => Err(Error::Config(format!(
                "unknown tier '{other}' (expected unit, integration or full)"
            ))),
        }
    }
}

/// One acceptance criterion with its measured value and pinned threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    /// How `measured` relates to `threshold` when passing: "<=" or ">=".
    pub comparison: String,
    pub pass: bool,
    pub detail: String,
}

impl CriterionResult {
    fn le(id: u32, name: &str, measured: f64, threshold: f64, extra_pass: bool, detail: String) -> Self {
        CriterionResult {
            id,
            name: name.to_string(),
            measured,
            threshold,
            comparison: "<=".into(),
            pass: measured <= threshold && extra_pass,
            detail,
        }
    }

    fn ge(id: u32, name: &str, measured: f64, threshold: f64, extra_pass: bool, detail: String) -> Self {
        CriterionResult {
            id,
            name: name.to_string(),
            measured,
            threshold,
            comparison: ">=".into(),
            pass: measured >= threshold && extra_pass,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2}. {:<28} measured={:.6e} ({} {:.2e}) {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.comparison,
            self.threshold,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub tier: Tier,
    pub criteria: Vec<CriterionResult>,
    pub overall_pass: bool,
    pub runtime_seconds: f64,
}

impl AcceptanceReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("report serialization cannot fail"),
        )?;
        Ok(())
    }
}

/// Knobs of the full-tier pipeline. Cohort sizes and thresholds are pinned by
/// the criteria; the network/training shapes below are sized for a single
/// CPU core.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub image_side: usize,
    pub latent_dim: usize,
    pub phantom_count: usize,
    pub gan_iterations: usize,
    pub encoder_iterations: usize,
    pub batch_size: usize,
    pub inversion_steps: usize,
    pub inversion_step_size: f64,
    pub gen_channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub enc_channels: Vec<usize>,
    pub enc_stem: usize,
    pub convs_per_block: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_e: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 2024,
            image_side: 64,
            latent_dim: 64,
            phantom_count: 2000,
            gan_iterations: 1500,
            encoder_iterations: 900,
            batch_size: 8,
            inversion_steps: 80,
            inversion_step_size: 0.05,
            gen_channels: vec![48, 48, 32, 24, 16],
            disc_channels: vec![16, 24, 32, 48, 64],
            enc_channels: vec![16, 24, 32, 48],
            enc_stem: 8,
            convs_per_block: 1,
            lr_g: 2e-3,
            lr_d: 2e-3,
            lr_e: 1e-4,
        }
    }
}

fn progress(msg: &str) {
    eprintln!("[eval] {msg}");
}

fn rand_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(Array2::from_shape_fn((side, side), |_| rng.gen_range(-1.0..1.0))).unwrap()
}

// ---------------------------------------------------------------------------
// Tier: unit
// ---------------------------------------------------------------------------

fn criterion_1_ssim(seed: u64) -> CriterionResult {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut identity_dev: f64 = 0.0;
    for _ in 0..50 {
        let x = rand_image(32, &mut rng);
        let s = losses::ssim(&x, &x, &cfg).unwrap();
        identity_dev = identity_dev.max((s - 1.0).abs());
    }

    let mut symmetry_dev: f64 = 0.0;
    let mut oracle_dev: f64 = 0.0;
    for _ in 0..100 {
        let x = rand_image(32, &mut rng);
        let y = rand_image(32, &mut rng);
        let sxy = losses::ssim(&x, &y, &cfg).unwrap();
        let syx = losses::ssim(&y, &x, &cfg).unwrap();
        symmetry_dev = symmetry_dev.max((sxy - syx).abs());
        let reference = oracle::reference_ssim(x.pixels(), y.pixels(), &cfg);
        oracle_dev = oracle_dev.max((sxy - reference).abs());
    }

    let pass_extra = identity_dev <= 1e-6 && symmetry_dev <= 1e-9;
    CriterionResult::le(
        1,
        "ssim-identity-oracle",
        oracle_dev,
        1e-5,
        pass_extra,
        format!("identity_dev={identity_dev:.2e} (<=1e-6), symmetry_dev={symmetry_dev:.2e} (<=1e-9)"),
    )
}

fn criterion_2_loss_formulas(seed: u64) -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut oracle_dev: f64 = 0.0;
    let mut sum_dev: f64 = 0.0;
    let mut identity_dev: f64 = 0.0;

    for _ in 0..100 {
        let a = ArrD::from_shape_fn(IxDyn(&[3, 7]), |_| rng.gen_range(-2.0..2.0));
        let b = ArrD::from_shape_fn(IxDyn(&[3, 7]), |_| rng.gen_range(-2.0..2.0));
        oracle_dev = oracle_dev.max((losses::l1(&a, &b).unwrap() - oracle::brute_l1(&a, &b)).abs());
        oracle_dev = oracle_dev.max((losses::l2(&a, &b).unwrap() - oracle::brute_l2(&a, &b)).abs());
        identity_dev = identity_dev.max(losses::l1(&a, &a).unwrap().abs());
        identity_dev = identity_dev.max(losses::l2(&a, &a).unwrap().abs());

        let fa = vec![
            ArrD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.gen_range(-1.0..1.0)),
            ArrD::from_shape_fn(IxDyn(&[4, 2, 2]), |_| rng.gen_range(-1.0..1.0)),
        ];
        let fb = vec![
            ArrD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.gen_range(-1.0..1.0)),
            ArrD::from_shape_fn(IxDyn(&[4, 2, 2]), |_| rng.gen_range(-1.0..1.0)),
        ];
        let stack_a = crate::generator::FeatureStack { layers: fa.clone() };
        let stack_b = crate::generator::FeatureStack { layers: fb.clone() };
        let mine = losses::content_loss_generator(&stack_a, &stack_b).unwrap();
        oracle_dev = oracle_dev.max((mine - oracle::brute_content(&fa, &fb)).abs());
        identity_dev = identity_dev.max(losses::content_loss_generator(&stack_a, &stack_a).unwrap());
    }

    // composite losses equal the sum of their parts
    let cfg = SsimConfig::default();
    let x = {
        let (img, _) = data::generate_phantom(&data::PhantomParams::new(32, 0.45, 3)).unwrap();
        img
    };
    let xh = {
        let (img, _) = data::generate_phantom(&data::PhantomParams::new(32, 0.65, 4)).unwrap();
        img
    };
    let w = ArrD::from_shape_fn(IxDyn(&[6]), |_| rng.gen_range(-1.0..1.0));
    let wh = ArrD::from_shape_fn(IxDyn(&[6]), |_| rng.gen_range(-1.0..1.0));
    let f = crate::generator::FeatureStack {
        layers: vec![ArrD::from_shape_fn(IxDyn(&[2, 4, 4]), |_| rng.gen_range(-1.0..1.0))],
    };
    let fh = crate::generator::FeatureStack {
        layers: vec![ArrD::from_shape_fn(IxDyn(&[2, 4, 4]), |_| rng.gen_range(-1.0..1.0))],
    };
    let total = losses::total_syn_loss(&w, &wh, &x, &xh, &f, &fh, &cfg).unwrap();
    let parts = losses::l1(&w, &wh).unwrap()
        + losses::l2(&x.pixels().clone().into_dyn(), &xh.pixels().clone().into_dyn()).unwrap()
        + losses::ssim_dissimilarity(&x, &xh, &cfg).unwrap()
        + losses::content_loss_generator(&f, &fh).unwrap();
    sum_dev = sum_dev.max((total - parts).abs());
    let total_r = losses::total_real_loss(&x, &xh, &f, &fh, &cfg).unwrap();
    let parts_r = losses::l2(&x.pixels().clone().into_dyn(), &xh.pixels().clone().into_dyn()).unwrap()
        + losses::ssim_dissimilarity(&x, &xh, &cfg).unwrap()
        + losses::content_loss_encoder(&f, &fh).unwrap();
    sum_dev = sum_dev.max((total_r - parts_r).abs());
    identity_dev = identity_dev.max(losses::total_syn_loss(&w, &w, &x, &x, &f, &f, &cfg).unwrap());

    let pass_extra = sum_dev <= 1e-9 && identity_dev <= 1e-9;
    CriterionResult::le(
        2,
        "loss-formula-oracles",
        oracle_dev,
        1e-6,
        pass_extra,
        format!("sum_dev={sum_dev:.2e} (<=1e-9), identity_dev={identity_dev:.2e}"),
    )
}

fn tiny_generator(seed: u64) -> Generator {
    Generator::init(
        GeneratorConfig {
            latent_dim: 8,
            image_side: 16,
            mapping_layers: 2,
            channels: vec![8, 8, 8],
            convs_per_block: 1,
            noise_mode: NoiseMode::Constant,
            constant_noise_seed: seed,
        },
        seed,
    )
    .unwrap()
}

fn criterion_3_gradients(seed: u64) -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SsimConfig::default();
    let mut max_rel: f64 = 0.0;
    let mut detail = String::new();

    // ssim dissimilarity w.r.t. the second image (8x8)
    {
        let x = Tensor::constant(ArrD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| {
            rng.gen_range(-0.9..0.9)
        }));
        let y0 = ArrD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| rng.gen_range(-0.9..0.9));
        let yp = Tensor::param(y0.clone());
        losses::ssim_dissimilarity_t(&x, &yp, &cfg).backward();
        let analytic = yp.grad().unwrap();
        let mut f = |ya: &ArrD| {
            losses::ssim_dissimilarity_t(&x, &Tensor::constant(ya.clone()), &cfg).item()
        };
        let fd = oracle::finite_diff_grad(&mut f, &y0, 1e-5);
        let e = oracle::rel_error(&analytic, &fd);
        max_rel = max_rel.max(e);
        detail.push_str(&format!("ssim={e:.1e} "));
    }

    // both content losses w.r.t. the reconstruction stack
    for (tag, shape) in [("content_g", [1usize, 2, 4, 4]), ("content_e", [1usize, 3, 2, 2])] {
        let fa = Tensor::constant(ArrD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0)));
        let fb0 = ArrD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1.0..1.0));
        let fbp = Tensor::param(fb0.clone());
        losses::content_loss_t(&[fa.clone()], &[fbp.clone()]).backward();
        let analytic = fbp.grad().unwrap();
        let mut f = |fb: &ArrD| {
            losses::content_loss_t(&[fa.clone()], &[Tensor::constant(fb.clone())]).item()
        };
        let fd = oracle::finite_diff_grad(&mut f, &fb0, 1e-5);
        let e = oracle::rel_error(&analytic, &fd);
        max_rel = max_rel.max(e);
        detail.push_str(&format!("{tag}={e:.1e} "));
    }

    // total synthetic-cycle loss w.r.t. the predicted code (16x16 generator)
    {
        let g = tiny_generator(11);
        g.set_trainable(false);
        let z1 = Tensor::constant(crate::nn::standard_normal(&[1, 8], &mut rng));
        let z2 = crate::nn::standard_normal(&[1, 8], &mut rng);
        let w_true = g.map_batch(&z1);
        let (x, feats) = g.synth_batch(&w_true, None);
        let w_hat0 = g.map_batch(&Tensor::constant(z2)).to_array();

        let eval_loss = |w_hat: &Tensor| {
            let (x_hat, feats_hat) = g.synth_batch(w_hat, None);
            losses::total_syn_loss_t(&w_true, w_hat, &x, &x_hat, &feats, &feats_hat, &cfg)
        };
        let wp = Tensor::param(w_hat0.clone());
        eval_loss(&wp).backward();
        let analytic = wp.grad().unwrap();
        let mut f = |wa: &ArrD| eval_loss(&Tensor::constant(wa.clone())).item();
        let fd = oracle::finite_diff_grad(&mut f, &w_hat0, 1e-4);
        let e = oracle::rel_error(&analytic, &fd);
        max_rel = max_rel.max(e);
        detail.push_str(&format!("total_syn={e:.1e} "));
    }

    // discriminator logit w.r.t. input pixels (16x16)
    {
        let d = Discriminator::init(
            DiscriminatorConfig {
                image_side: 16,
                channels: vec![8, 8, 8],
            },
            13,
        )
        .unwrap();
        let x0 = ArrD::from_shape_fn(IxDyn(&[1, 1, 16, 16]), |_| rng.gen_range(-0.9..0.9));
        let xp = Tensor::param(x0.clone());
        autodiff::sum_all(&d.logits(&xp)).backward();
        let analytic = xp.grad().unwrap();
        let mut f = |xa: &ArrD| autodiff::sum_all(&d.logits(&Tensor::constant(xa.clone()))).item();
        let fd = oracle::finite_diff_grad(&mut f, &x0, 1e-4);
        let e = oracle::rel_error(&analytic, &fd);
        max_rel = max_rel.max(e);
        detail.push_str(&format!("disc_logit={e:.1e}"));
    }

    CriterionResult::le(3, "gradient-checks", max_rel, 1e-3, true, detail)
}

fn criterion_4_lda(seed: u64) -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let n = 200;
    let mut min_cos = f64::INFINITY;
    for _ in 0..20 {
        // shared anisotropic covariance via a random mixing matrix
        let mix = Array2::from_shape_fn((d, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * 0.4
        });
        let shift = Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0));
        let mut draw = |base: &Array1<f64>, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| {
                    let z = Array1::from_shape_fn(d, |_| {
                        let v: f64 = StandardNormal.sample(rng);
                        v
                    });
                    base + &mix.dot(&z)
                })
                .collect::<Vec<_>>()
        };
        let zero = Array1::zeros(d);
        let c0 = draw(&zero, &mut rng);
        let c1 = draw(&shift, &mut rng);
        let model = analysis::fit_lda(&c0, &c1).unwrap();
        let reference = oracle::lda_direction_closed_form(&c0, &c1).unwrap();
        let mine = Array1::from_vec(model.direction.clone());
        let cos = mine.dot(&reference).abs();
        min_cos = min_cos.min(cos);
    }

    // separation on sampled N(0,1) vs N(4.8,1) projections
    let mut draw_1d = |mean: f64| {
        (0..10_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                Array1::from_vec(vec![mean + z])
            })
            .collect::<Vec<_>>()
    };
    let model = analysis::fit_lda(&draw_1d(0.0), &draw_1d(4.8)).unwrap();
    let score = analysis::separation_score(&model).unwrap();
    let sep_rel = (score - 4.8).abs() / 4.8;

    CriterionResult::ge(
        4,
        "lda-closed-form-oracle",
        min_cos,
        0.999,
        sep_rel <= 0.05,
        format!("separation={score:.3} (4.8 within 5%: rel={sep_rel:.3})"),
    )
}

fn criterion_5_phantom_ctr() -> CriterionResult {
    let thetas = [0.40, 0.50, 0.60, 0.70];
    let mut max_dev: f64 = 0.0;
    let mut increasing = true;
    let mut last = f64::NEG_INFINITY;
    let mut detail = String::new();
    for &theta in &thetas {
        let mut p = data::PhantomParams::new(64, theta, 21);
        p.noise_sigma = 0.0;
        let (img, _) = data::generate_phantom(&p).unwrap();
        match analysis::measure_ctr(&img) {
            Ok(ctr) => {
                max_dev = max_dev.max((ctr - theta).abs());
                if ctr <= last {
                    increasing = false;
                }
                last = ctr;
                detail.push_str(&format!("{theta:.2}->{ctr:.4} "));
            }
            Err(e) => {
                return CriterionResult::le(
                    5,
                    "phantom-ctr-oracle",
                    f64::INFINITY,
                    0.02,
                    false,
                    format!("measurement failed at theta {theta}: {e}"),
                );
            }
        }
    }
    CriterionResult::le(
        5,
        "phantom-ctr-oracle",
        max_dev,
        0.02,
        increasing,
        format!("{detail}strictly_increasing={increasing}"),
    )
}

fn criterion_6_edit_algebra(seed: u64) -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 12;
    let base = LatentCode::new_w(Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)));
    let diff = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
    let v = analysis::DirectionVector::from_difference(&diff, analysis::Provenance::Pair).unwrap();

    let norm_dev = (v.norm() - 1.0).abs();

    let zero_edit = analysis::edit(&analysis::EditRequest {
        base_code: base.clone(),
        direction: v.clone(),
        alphas: vec![0.0],
    })
    .unwrap();
    let identity_exact = zero_edit[0].values == base.values;

    let (a, b) = (0.8, -1.7);
    let step_a = analysis::edit(&analysis::EditRequest {
        base_code: base.clone(),
        direction: v.clone(),
        alphas: vec![a],
    })
    .unwrap();
    let two_step = analysis::edit(&analysis::EditRequest {
        base_code: step_a[0].clone(),
        direction: v.clone(),
        alphas: vec![b],
    })
    .unwrap();
    let one_step = analysis::edit(&analysis::EditRequest {
        base_code: base.clone(),
        direction: v,
        alphas: vec![a + b],
    })
    .unwrap();
    let additivity_dev = two_step[0]
        .values
        .iter()
        .zip(one_step[0].values.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);

    let zero_diff_is_error = matches!(
        analysis::DirectionVector::from_difference(&Array1::zeros(d), analysis::Provenance::Pair),
        Err(Error::ZeroDifference(_))
    );

    CriterionResult::le(
        6,
        "edit-algebra",
        additivity_dev,
        1e-12,
        identity_exact && norm_dev <= 1e-9 && zero_diff_is_error,
        format!(
            "identity_exact={identity_exact}, norm_dev={norm_dev:.1e}, zero_diff_error={zero_diff_is_error}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Tier: integration
// ---------------------------------------------------------------------------

fn tiny_images_16(n: usize) -> Vec<Image> {
    (0..n)
        .map(|i| {
            let theta = 0.38 + 0.3 * (i as f64 / n as f64);
            let (img, _) =
                data::generate_phantom(&data::PhantomParams::new(32, theta, i as u64)).unwrap();
            Image::new(data::area_resample(img.pixels(), 16)).unwrap()
        })
        .collect()
}

fn criterion_7_determinism(seed: u64) -> CriterionResult {
    let images = tiny_images_16(8);
    let gcfg = GeneratorConfig {
        latent_dim: 8,
        image_side: 16,
        mapping_layers: 2,
        channels: vec![8, 8, 8],
        convs_per_block: 1,
        noise_mode: NoiseMode::Constant,
        constant_noise_seed: 5,
    };
    let dcfg = DiscriminatorConfig {
        image_side: 16,
        channels: vec![8, 8, 8],
    };
    let ecfg = EncoderConfig {
        image_side: 16,
        latent_dim: 8,
        blocks_per_branch: 2,
        stem_channels: 4,
        channels: vec![6, 8],
        num_feature_taps: 2,
    };
    let tcfg = TrainConfig {
        batch_size: 2,
        iterations: 10,
        log_every: 1,
        seed,
        ..TrainConfig::default()
    };

    let gan_run = || {
        let (g, _, log) = training::train_gan(&images, gcfg.clone(), dcfg.clone(), &tcfg, None).unwrap();
        let seq: Vec<(f64, f64)> = log
            .iter()
            .map(|r| (r.losses["d_loss"], r.losses["g_loss"]))
            .collect();
        (g, seq)
    };
    let (g1, seq1) = gan_run();
    let (_, seq2) = gan_run();
    let mut max_diff: f64 = 0.0;
    for ((d1, g1v), (d2, g2v)) in seq1.iter().zip(&seq2) {
        max_diff = max_diff.max((d1 - d2).abs()).max((g1v - g2v).abs());
    }

    let enc_run = |generator: &Generator| {
        let (_, log, stats) =
            training::train_encoder(generator, &images, ecfg.clone(), &tcfg, &SsimConfig::default())
                .unwrap();
        let seq: Vec<(f64, f64)> = log
            .iter()
            .map(|r| (r.losses["syn_loss"], r.losses["real_loss"]))
            .collect();
        (seq, stats)
    };
    let fp_before = g1.fingerprint();
    let (eseq1, stats1) = enc_run(&g1);
    let (eseq2, stats2) = enc_run(&g1);
    for ((a1, b1), (a2, b2)) in eseq1.iter().zip(&eseq2) {
        max_diff = max_diff.max((a1 - a2).abs()).max((b1 - b2).abs());
    }
    let frozen = stats1.generator_was_frozen()
        && stats2.generator_was_frozen()
        && g1.fingerprint() == fp_before;
    let updates_ok = stats1.encoder_updates == 20 && stats2.encoder_updates == 20;

    CriterionResult::le(
        7,
        "training-determinism",
        max_diff,
        0.0,
        frozen && updates_ok,
        format!("frozen_generator={frozen}, encoder_updates=2x10={updates_ok}"),
    )
}

fn criterion_8_checkpoint(seed: u64) -> CriterionResult {
    let dir = match tempfile::TempDir::with_prefix("latentray-ckpt") {
        Ok(d) => d,
        Err(e) => {
            return CriterionResult::le(
                8,
                "checkpoint-roundtrip",
                f64::INFINITY,
                0.0,
                false,
                format!("tempdir failed: {e}"),
            )
        }
    };
    let g = tiny_generator(seed);
    let d = Discriminator::init(
        DiscriminatorConfig {
            image_side: 16,
            channels: vec![8, 8, 8],
        },
        seed + 1,
    )
    .unwrap();
    let path = dir.path().join("gan.ckpt");
    crate::checkpoint::save_gan(&g, &d, &path).unwrap();
    let (g2, _) = crate::checkpoint::load_gan(&path).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let z = LatentCode::new_z(Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0)));
    let w = g.map_latent(&z).unwrap();
    let before = g.synthesize(&w).unwrap();
    let after = g2.synthesize(&w).unwrap();
    let max_diff = before
        .pixels()
        .iter()
        .zip(after.pixels().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let noise_equal = g
        .noise_maps()
        .iter()
        .zip(g2.noise_maps().iter())
        .all(|(a, b)| a == b);
    let fingerprints_equal = g.fingerprint() == g2.fingerprint();
    let version_rejected = crate::checkpoint::load_encoder(&path).is_err();

    CriterionResult::le(
        8,
        "checkpoint-roundtrip",
        max_diff,
        0.0,
        noise_equal && fingerprints_equal && version_rejected,
        format!(
            "noise_maps_equal={noise_equal}, fingerprints_equal={fingerprints_equal}, wrong_format_rejected={version_rejected}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Tier: full
// ---------------------------------------------------------------------------

fn sample_codes(generator: &Generator, n: usize, rng: &mut ChaCha8Rng) -> Vec<LatentCode> {
    let d = generator.config.latent_dim;
    let z = Tensor::constant(crate::nn::standard_normal(&[n, d], rng));
    let w = generator.map_batch(&z).to_array();
    (0..n)
        .map(|i| LatentCode::new_w(crate::generator::batch_row(&w, i)))
        .collect()
}

fn render_codes(generator: &Generator, codes: &[LatentCode]) -> Result<Vec<Image>> {
    let side = generator.config.image_side;
    let d = generator.config.latent_dim;
    let mut out = Vec::with_capacity(codes.len());
    for chunk in codes.chunks(32) {
        let mut mat = ArrD::zeros(IxDyn(&[chunk.len(), d]));
        for (i, c) in chunk.iter().enumerate() {
            for j in 0..d {
                mat[[i, j]] = c.values[j];
            }
        }
        let (imgs, _) = generator.synth_batch(&Tensor::constant(mat), None);
        let iv = imgs.to_array();
        for i in 0..chunk.len() {
            let mut px = Array2::<f64>::zeros((side, side));
            for r in 0..side {
                for c in 0..side {
                    px[(r, c)] = iv[[i, 0, r, c]];
                }
            }
            out.push(Image::from_clamped(px)?);
        }
    }
    Ok(out)
}

/// Train the full desk-scale pipeline and score criteria 9-13.
pub fn run_full_pipeline(cfg: &EvalConfig) -> Result<Vec<CriterionResult>> {
    let mut out = Vec::new();
    let side = cfg.image_side;
    let ssim_cfg = SsimConfig::default();

    progress(&format!("rendering {} training phantoms at {side}x{side}", cfg.phantom_count));
    let train_set = data::sample_phantom_dataset(cfg.phantom_count, (0.5, 0.5), cfg.seed, side, 0.02)?;
    let train_images = train_set.render_all()?;

    let gcfg = GeneratorConfig {
        latent_dim: cfg.latent_dim,
        image_side: side,
        mapping_layers: 4,
        channels: cfg.gen_channels.clone(),
        convs_per_block: cfg.convs_per_block,
        noise_mode: NoiseMode::Constant,
        constant_noise_seed: cfg.seed,
    };
    let dcfg = DiscriminatorConfig {
        image_side: side,
        channels: cfg.disc_channels.clone(),
    };
    let tcfg = TrainConfig {
        batch_size: cfg.batch_size,
        iterations: cfg.gan_iterations,
        learning_rate_g: cfg.lr_g,
        learning_rate_d: cfg.lr_d,
        learning_rate_e: cfg.lr_e,
        seed: cfg.seed,
        log_every: 100,
        ..TrainConfig::default()
    };

    progress(&format!("training generator: {} iterations", cfg.gan_iterations));
    let t0 = Instant::now();
    let (generator, _disc, _glog) =
        training::train_gan(&train_images, gcfg, dcfg, &tcfg, None)?;
    progress(&format!("generator trained in {:.0}s", t0.elapsed().as_secs_f64()));

    // criterion 9: generator plausibility
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x95);
    let sample_codes_9 = sample_codes(&generator, 256, &mut rng);
    let samples = render_codes(&generator, &sample_codes_9)?;
    let ok = samples
        .iter()
        .filter(|img| matches!(analysis::measure_ctr(img), Ok(r) if r > 0.2 && r < 0.9))
        .count();
    let frac = ok as f64 / samples.len() as f64;
    out.push(CriterionResult::ge(
        9,
        "generator-plausibility",
        frac,
        0.90,
        true,
        format!("{ok}/256 samples with measurable CTR in (0.2, 0.9)"),
    ));

    // encoder training
    let ecfg = EncoderConfig {
        image_side: side,
        latent_dim: cfg.latent_dim,
        blocks_per_branch: cfg.enc_channels.len(),
        stem_channels: cfg.enc_stem,
        channels: cfg.enc_channels.clone(),
        num_feature_taps: cfg.enc_channels.len(),
    };
    let etcfg = TrainConfig {
        iterations: cfg.encoder_iterations,
        ..tcfg.clone()
    };
    progress(&format!("training encoder: {} iterations", cfg.encoder_iterations));
    let t1 = Instant::now();
    let (encoder, _elog, stats) =
        training::train_encoder(&generator, &train_images, ecfg, &etcfg, &ssim_cfg)?;
    progress(&format!(
        "encoder trained in {:.0}s ({} updates, frozen={})",
        t1.elapsed().as_secs_f64(),
        stats.encoder_updates,
        stats.generator_was_frozen()
    ));

    // held-out synthetic targets
    let mut rng10 = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA0);
    let held_codes = sample_codes(&generator, 64, &mut rng10);
    let held_targets = render_codes(&generator, &held_codes)?;

    // criterion 10: encoder reconstruction SSIM
    let mut enc_ssim = 0.0;
    let mut enc_l2 = 0.0;
    let mut enc_recons = Vec::with_capacity(held_targets.len());
    let enc_codes: Vec<LatentCode> = held_targets
        .iter()
        .map(|img| encoder.encode(img))
        .collect::<Result<_>>()?;
    let enc_renders = render_codes(&generator, &enc_codes)?;
    for (x, xhat) in held_targets.iter().zip(&enc_renders) {
        enc_ssim += losses::ssim(x, xhat, &ssim_cfg)?;
        enc_l2 += losses::l2(&x.pixels().clone().into_dyn(), &xhat.pixels().clone().into_dyn())?;
        enc_recons.push(xhat.clone());
    }
    enc_ssim /= held_targets.len() as f64;
    enc_l2 /= held_targets.len() as f64;
    out.push(CriterionResult::ge(
        10,
        "encoder-reconstruction",
        enc_ssim,
        0.6,
        true,
        format!("mean l2 via encoder = {enc_l2:.5}"),
    ));

    // criterion 11: inversion beats one-shot encoding on mean L2
    let inv_cfg = InversionConfig {
        steps: cfg.inversion_steps,
        step_size: cfg.inversion_step_size,
        init_mode: InitMode::Encoder,
        seed: cfg.seed,
        ..InversionConfig::default()
    };
    progress(&format!("inverting 64 held-out targets ({} steps)", cfg.inversion_steps));
    let batch = inversion::invert_images(&generator, Some(&encoder), &held_targets, None, &inv_cfg)?;
    let mut inv_l2 = 0.0;
    let mut counted = 0usize;
    for (x, res) in held_targets.iter().zip(&batch.results) {
        if let Some(r) = res {
            inv_l2 += losses::l2(
                &x.pixels().clone().into_dyn(),
                &r.reconstruction.pixels().clone().into_dyn(),
            )?;
            counted += 1;
        }
    }
    inv_l2 /= counted.max(1) as f64;
    out.push(CriterionResult::le(
        11,
        "inversion-superiority",
        inv_l2,
        enc_l2,
        counted == held_targets.len(),
        format!("inverted {counted}/64; encoder mean l2 = {enc_l2:.5}"),
    ));

    // criterion 12: latent separability of the inverted cohort
    progress("inverting the 100/250 phantom cohort");
    let cohort = data::sample_phantom_dataset(350, (100.0 / 350.0, 250.0 / 350.0), cfg.seed ^ 0xC0, side, 0.02)?;
    let cohort_images = cohort.render_all()?;
    let t2 = Instant::now();
    let cohort_batch =
        inversion::invert_images(&generator, Some(&encoder), &cohort_images, None, &inv_cfg)?;
    progress(&format!("cohort inverted in {:.0}s", t2.elapsed().as_secs_f64()));
    let mut healthy_codes = Vec::new();
    let mut cardio_codes = Vec::new();
    let mut healthy_latents = Vec::new();
    for (record, res) in cohort.manifest.records.iter().zip(&cohort_batch.results) {
        let Some(r) = res else { continue };
        let arr = r.w_star.values.clone();
        match record.ground_truth.map(|gt| gt.label) {
            Some(ClassLabel::Healthy) => {
                healthy_codes.push(arr);
                healthy_latents.push(r.w_star.clone());
            }
            Some(ClassLabel::Cardiomegaly) => cardio_codes.push(arr),
            None => {}
        }
    }
    let model = analysis::fit_lda(&healthy_codes, &cardio_codes)?;
    let separation = analysis::separation_score(&model)?;
    out.push(CriterionResult::ge(
        12,
        "latent-separability",
        separation,
        2.0,
        true,
        format!(
            "{} healthy / {} cardiomegaly codes, regularized={}",
            healthy_codes.len(),
            cardio_codes.len(),
            model.regularized
        ),
    ));

    // criterion 13: edit efficacy along the discriminant direction
    progress("evaluating edit sweep on 32 healthy codes");
    let direction = analysis::direction_from_lda(&model);
    let (m0, m1) = model.class_means_projected;
    let scale = m1 - m0; // oriented: positive
    let alphas: Vec<f64> = [0.0, 1.0, 2.0, 3.0].iter().map(|k| k * scale).collect();
    let edit_codes: Vec<LatentCode> = healthy_latents.iter().take(32).cloned().collect();
    let report = analysis::evaluate_edit(&generator, &edit_codes, &direction, &alphas, &ssim_cfg)?;
    let rho = report.spearman_alpha_ctr.unwrap_or(f64::NEG_INFINITY);
    let ssim_at_max = report
        .per_alpha
        .last()
        .map(|s| s.mean_ssim_to_base)
        .unwrap_or(0.0);
    let ctr_path: Vec<String> = report
        .per_alpha
        .iter()
        .map(|s| match s.mean_ctr {
            Some(c) => format!("{c:.3}"),
            None => "fail".into(),
        })
        .collect();
    out.push(CriterionResult::ge(
        13,
        "edit-efficacy",
        rho,
        0.9,
        ssim_at_max >= 0.5,
        format!(
            "mean CTR per alpha: [{}], ssim_at_max_alpha={ssim_at_max:.3} (>=0.5), scale={scale:.3}",
            ctr_path.join(", ")
        ),
    ));

    Ok(out)
}

/// Execute the acceptance criteria for a tier and assemble the report.
pub fn run_acceptance(cfg: &EvalConfig, tier: Tier) -> Result<AcceptanceReport> {
    let start = Instant::now();
    let mut criteria = Vec::new();

    progress("running unit criteria (1-6)");
    criteria.push(criterion_1_ssim(cfg.seed ^ 0x11));
    criteria.push(criterion_2_loss_formulas(cfg.seed ^ 0x22));
    criteria.push(criterion_3_gradients(cfg.seed ^ 0x33));
    criteria.push(criterion_4_lda(cfg.seed ^ 0x44));
    criteria.push(criterion_5_phantom_ctr());
    criteria.push(criterion_6_edit_algebra(cfg.seed ^ 0x66));

    if tier != Tier::Unit {
        progress("running integration criteria (7-8)");
        criteria.push(criterion_7_determinism(cfg.seed ^ 0x77));
        criteria.push(criterion_8_checkpoint(cfg.seed ^ 0x88));
    }

    if tier == Tier::Full {
        progress("running full-tier pipeline (9-13)");
        criteria.extend(run_full_pipeline(cfg)?);
    }

    let overall_pass = criteria.iter().all(|c| c.pass);
    Ok(AcceptanceReport {
        tier,
        criteria,
        overall_pass,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_tier_passes_and_reports_every_criterion_once() {
        let report = run_acceptance(&EvalConfig::default(), Tier::Unit).unwrap();
        assert_eq!(report.criteria.len(), 6);
        let mut ids: Vec<u32> = report.criteria.iter().map(|c| c.id).collect();
        ids.dedup();
        assert_eq!(ids, vec![1, 2, 3, 4, 5, 6]);
        for c in &report.criteria {
            assert!(c.pass, "criterion failed: {}", c.line());
        }
        assert!(report.overall_pass);
    }

    #[test]
    fn report_serializes_to_json() {
        let dir = tempfile::tempdir().unwrap();
        let report = AcceptanceReport {
            tier: Tier::Unit,
            criteria: vec![CriterionResult::le(1, "x", 0.0, 1.0, true, String::new())],
            overall_pass: true,
            runtime_seconds: 0.1,
        };
        let p = dir.path().join("report.json");
        report.save_json(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("overall_pass"));
    }
}
