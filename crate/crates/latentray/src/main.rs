//! Command-line pipeline driver: phantom data generation, GAN and encoder
//! training, reconstruction grids, latent inversion, discriminant analysis,
//! direction extraction, latent editing, and the acceptance harness.

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use latentray::analysis::{self, DirectionVector, EditRequest, Provenance};
use latentray::config::RunConfig;
use latentray::data::{self, ClassLabel};
use latentray::eval::{run_acceptance, EvalConfig, Tier};
use latentray::generator::LatentCode;
use latentray::inversion::{self, InitMode, InversionConfig};
use latentray::losses::SsimConfig;
use latentray::training;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "latentray",
    version,
    about = "Style-based synthesis, inversion and latent editing for X-ray-like images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitModeArg {
    Encoder,
    MeanW,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionMode {
    Pair,
    Lda,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled phantom dataset (PNGs + manifest.csv).
    PhantomGen {
        #[arg(long, default_value_t = 350)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        side: usize,
        /// Fraction of healthy records (the rest are cardiomegaly).
        #[arg(long, default_value_t = 0.5)]
        frac_healthy: f64,
        #[arg(long, default_value_t = 0.02)]
        noise_sigma: f64,
    },
    /// Train the generator adversarially on a manifest of images.
    TrainGan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Train the encoder against a frozen generator checkpoint.
    TrainEncoder {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit side-by-side grids: source / encoder recon / optimized recon.
    Reconstruct {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Manifest of real targets; without it, synthetic targets are drawn.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        count: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Optimize latent codes for every image in a manifest.
    Invert {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = InitModeArg::Encoder)]
        init: InitModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a two-class discriminant on a codes file and export projections.
    Lda {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a unit direction from an image pair or a fitted model.
    Direction {
        #[arg(long, value_enum)]
        mode: DirectionMode,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        image_a: Option<PathBuf>,
        #[arg(long)]
        image_b: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate codes along a direction, render strips, and report CTR/SSIM.
    Edit {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        /// Comma-separated strengths, e.g. `0,1,2,3`.
        #[arg(long, default_value = "0,1,2,3")]
        alphas: String,
        /// Multiply every strength by this scale (e.g. an LDA class gap).
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the tiered acceptance harness and write a JSON report.
    Eval {
        #[arg(long, default_value = "unit")]
        tier: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn ensure_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn resolve_config(
    config: Option<&PathBuf>,
    side: Option<usize>,
    iterations: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(side.unwrap_or(64)),
    };
    if let Some(s) = side {
        if cfg.image_side != s {
            cfg = RunConfig::desk(s);
        }
    }
    if let Some(it) = iterations {
        cfg.train.iterations = it;
    }
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn label_string(record: &data::ManifestRecord) -> String {
    match record.ground_truth.map(|gt| gt.label) {
        Some(ClassLabel::Healthy) => "healthy".into(),
        Some(ClassLabel::Cardiomegaly) => "cardiomegaly".into(),
        None => match record.cardio_label {
            data::CardioLabel::Positive => "positive".into(),
            data::CardioLabel::Negative => "negative".into(),
            data::CardioLabel::Uncertain => "uncertain".into(),
            data::CardioLabel::Missing => "missing".into(),
        },
    }
}

fn read_direction(path: &Path) -> anyhow::Result<DirectionVector> {
    let (labels, codes) = inversion::read_codes(path)?;
    let code = codes
        .first()
        .ok_or_else(|| anyhow!("direction file {} is empty", path.display()))?;
    let provenance = match labels.first().map(|s| s.as_str()) {
        Some("lda") => Provenance::Lda,
        _ => Provenance::Pair,
    };
    Ok(DirectionVector::from_difference(&code.values, provenance)?)
}

fn write_direction(path: &Path, v: &DirectionVector) -> anyhow::Result<()> {
    let label = match v.provenance {
        Provenance::Pair => "pair",
        Provenance::Lda => "lda",
    };
    inversion::write_codes(
        path,
        &[label.to_string()],
        &[LatentCode::new_w(v.as_array())],
    )?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::PhantomGen {
            n,
            seed,
            out,
            side,
            frac_healthy,
            noise_sigma,
        } => {
            ensure_out(&out)?;
            let ds = data::sample_phantom_dataset(
                n,
                (frac_healthy, 1.0 - frac_healthy),
                seed,
                side,
                noise_sigma,
            )?;
            let manifest_path = ds.materialize(&out)?;
            let mut cfg = RunConfig::desk(side);
            cfg.seed = seed;
            cfg.save(&out.join("config_resolved.toml"))?;
            println!(
                "wrote {} phantom images and {}",
                ds.manifest.len(),
                manifest_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::TrainGan {
            data: data_path,
            out,
            config,
            iterations,
            batch_size,
            seed,
            side,
        } => {
            ensure_out(&out)?;
            let cfg = resolve_config(config.as_ref(), side, iterations, batch_size, seed)?;
            cfg.save(&out.join("config_resolved.toml"))?;
            let manifest = data::load_manifest(&data_path)?;
            let images = training::load_images(&manifest, cfg.image_side)?;
            let (generator, discriminator, log) = training::train_gan(
                &images,
                cfg.generator.clone(),
                cfg.discriminator.clone(),
                &cfg.train,
                Some(&out),
            )?;
            let ckpt = out.join("gan.ckpt");
            latentray::checkpoint::save_gan(&generator, &discriminator, &ckpt)?;
            training::write_log_jsonl(&log, &out.join("train_gan.jsonl"))?;
            println!(
                "trained generator on {} images for {} iterations -> {}",
                images.len(),
                cfg.train.iterations,
                ckpt.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::TrainEncoder {
            gan,
            data: data_path,
            out,
            config,
            iterations,
            batch_size,
            seed,
        } => {
            ensure_out(&out)?;
            let (generator, _) = latentray::checkpoint::load_gan(&gan)?;
            let side = generator.config.image_side;
            let mut cfg = resolve_config(config.as_ref(), Some(side), iterations, batch_size, seed)?;
            cfg.encoder.latent_dim = generator.config.latent_dim;
            cfg.save(&out.join("config_resolved.toml"))?;
            let manifest = data::load_manifest(&data_path)?;
            let images = training::load_images(&manifest, side)?;
            let (encoder, log, stats) = training::train_encoder(
                &generator,
                &images,
                cfg.encoder.clone(),
                &cfg.train,
                &cfg.ssim,
            )?;
            if !stats.generator_was_frozen() {
                bail!("internal contract violated: generator changed during encoder training");
            }
            let ckpt = out.join("encoder.ckpt");
            latentray::checkpoint::save_encoder(&encoder, &generator.fingerprint(), &ckpt)?;
            training::write_log_jsonl(&log, &out.join("train_encoder.jsonl"))?;
            println!(
                "trained encoder ({} updates, generator frozen) -> {}",
                stats.encoder_updates,
                ckpt.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Reconstruct {
            gan,
            encoder,
            out,
            data: data_path,
            count,
            steps,
            seed,
        } => {
            ensure_out(&out)?;
            let (generator, _) = latentray::checkpoint::load_gan(&gan)?;
            let (enc, _) = latentray::checkpoint::load_encoder(&encoder)?;
            let side = generator.config.image_side;

            let targets: Vec<data::Image> = match &data_path {
                Some(p) => {
                    let manifest = data::load_manifest(p)?;
                    training::load_images(&manifest, side)?
                        .into_iter()
                        .take(count)
                        .collect()
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..count)
                        .map(|_| {
                            let z = LatentCode::new_z(Array1::from_shape_fn(
                                generator.config.latent_dim,
                                |_| {
                                    let v: f64 = rng.gen_range(-1.0..1.0);
                                    v
                                },
                            ));
                            let w = generator.map_latent(&z)?;
                            generator.synthesize(&w)
                        })
                        .collect::<latentray::Result<_>>()?
                }
            };
            if targets.is_empty() {
                bail!("no reconstruction targets");
            }

            let mut inv_cfg = InversionConfig {
                init_mode: InitMode::Encoder,
                seed,
                ..InversionConfig::default()
            };
            if let Some(s) = steps {
                inv_cfg.steps = s;
            }

            let enc_row: Vec<data::Image> = targets
                .iter()
                .map(|t| {
                    let code = enc.encode(t)?;
                    generator.synthesize(&code)
                })
                .collect::<latentray::Result<_>>()?;
            let batch = inversion::invert_images(&generator, Some(&enc), &targets, None, &inv_cfg)?;
            let opt_row: Vec<data::Image> = batch
                .results
                .iter()
                .map(|r| {
                    r.as_ref()
                        .map(|x| x.reconstruction.clone())
                        .ok_or_else(|| anyhow!("an inversion failed"))
                })
                .collect::<anyhow::Result<_>>()?;

            let sheet = out.join("reconstruction_grid.png");
            latentray::viz::save_contact_sheet(
                &sheet,
                &[targets.clone(), enc_row.clone(), opt_row.clone()],
            )?;

            let ssim_cfg = SsimConfig::default();
            let mean = |row: &[data::Image]| -> latentray::Result<(f64, f64)> {
                let mut s = 0.0;
                let mut l = 0.0;
                for (t, r) in targets.iter().zip(row) {
                    s += latentray::losses::ssim(t, r, &ssim_cfg)?;
                    l += latentray::losses::l2(
                        &t.pixels().clone().into_dyn(),
                        &r.pixels().clone().into_dyn(),
                    )?;
                }
                Ok((s / targets.len() as f64, l / targets.len() as f64))
            };
            let (enc_ssim, enc_l2) = mean(&enc_row)?;
            let (opt_ssim, opt_l2) = mean(&opt_row)?;
            let metrics = serde_json::json!({
                "targets": targets.len(),
                "encoder": {"mean_ssim": enc_ssim, "mean_l2": enc_l2},
                "optimized": {"mean_ssim": opt_ssim, "mean_l2": opt_l2},
            });
            std::fs::write(
                out.join("reconstruction_metrics.json"),
                serde_json::to_string_pretty(&metrics)?,
            )?;
            println!(
                "wrote {} (encoder ssim {:.3}, optimized ssim {:.3})",
                sheet.display(),
                enc_ssim,
                opt_ssim
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Invert {
            gan,
            encoder,
            data: data_path,
            out,
            steps,
            init,
            seed,
        } => {
            ensure_out(&out)?;
            let (generator, _) = latentray::checkpoint::load_gan(&gan)?;
            let enc = match &encoder {
                Some(p) => Some(latentray::checkpoint::load_encoder(p)?.0),
                None => None,
            };
            let manifest = data::load_manifest(&data_path)?;
            let images = training::load_images(&manifest, generator.config.image_side)?;
            let mut cfg = InversionConfig {
                init_mode: match init {
                    InitModeArg::Encoder => InitMode::Encoder,
                    InitModeArg::MeanW => InitMode::MeanW,
                },
                seed,
                ..InversionConfig::default()
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let batch = inversion::invert_images(&generator, enc.as_ref(), &images, None, &cfg)?;

            let mut labels = Vec::new();
            let mut codes = Vec::new();
            let mut objectives = Vec::new();
            for (record, res) in manifest.records.iter().zip(&batch.results) {
                if let Some(r) = res {
                    labels.push(label_string(record));
                    codes.push(r.w_star.clone());
                    objectives.push(r.final_objective);
                }
            }
            let codes_path = out.join("codes.csv");
            inversion::write_codes(&codes_path, &labels, &codes)?;
            let summary = serde_json::json!({
                "inverted": codes.len(),
                "failed": batch.failures.len(),
                "mean_final_objective":
                    objectives.iter().sum::<f64>() / objectives.len().max(1) as f64,
            });
            std::fs::write(
                out.join("inversion_summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!(
                "inverted {}/{} images -> {}",
                codes.len(),
                manifest.len(),
                codes_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Lda { codes, out } => {
            ensure_out(&out)?;
            let (labels, code_rows) = inversion::read_codes(&codes)?;
            let mut class0 = Vec::new();
            let mut class1 = Vec::new();
            for (label, code) in labels.iter().zip(&code_rows) {
                match label.as_str() {
                    "healthy" | "negative" => class0.push(code.values.clone()),
                    "cardiomegaly" | "positive" => class1.push(code.values.clone()),
                    _ => {} // uncertain/missing records stay out of the two-class fit
                }
            }
            let model = analysis::fit_lda(&class0, &class1)?;
            let score = analysis::separation_score(&model)?;
            std::fs::write(out.join("lda.json"), serde_json::to_string_pretty(&model)?)?;

            // per-record projections for histogram plots
            let dir = Array1::from_vec(model.direction.clone());
            let mut writer = csv::Writer::from_path(out.join("projections.csv"))?;
            writer.write_record(["label", "projection"])?;
            for (label, code) in labels.iter().zip(&code_rows) {
                writer.write_record([label.clone(), format!("{}", code.values.dot(&dir))])?;
            }
            writer.flush()?;
            println!(
                "fit discriminant on {}+{} codes: separation {:.3} -> {}",
                class0.len(),
                class1.len(),
                score,
                out.join("lda.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Direction {
            mode,
            encoder,
            image_a,
            image_b,
            model,
            out,
        } => {
            ensure_out(&out)?;
            let v = match mode {
                DirectionMode::Pair => {
                    let enc_path =
                        encoder.ok_or_else(|| anyhow!("--encoder required in pair mode"))?;
                    let a = image_a.ok_or_else(|| anyhow!("--image-a required in pair mode"))?;
                    let b = image_b.ok_or_else(|| anyhow!("--image-b required in pair mode"))?;
                    let (enc, _) = latentray::checkpoint::load_encoder(&enc_path)?;
                    let side = enc.config.image_side;
                    let img_a = data::preprocess(&a, side)?;
                    let img_b = data::preprocess(&b, side)?;
                    analysis::direction_from_pair(&enc, &img_a, &img_b)?
                }
                DirectionMode::Lda => {
                    let model_path =
                        model.ok_or_else(|| anyhow!("--model required in lda mode"))?;
                    let text = std::fs::read_to_string(&model_path)?;
                    let model: analysis::LdaModel = serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", model_path.display()))?;
                    analysis::direction_from_lda(&model)
                }
            };
            let path = out.join("direction.csv");
            write_direction(&path, &v)?;
            println!("wrote unit direction ({} dims) -> {}", v.dim(), path.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Edit {
            gan,
            codes,
            direction,
            alphas,
            scale,
            count,
            out,
        } => {
            ensure_out(&out)?;
            let (generator, _) = latentray::checkpoint::load_gan(&gan)?;
            let (_, code_rows) = inversion::read_codes(&codes)?;
            let v = read_direction(&direction)?;
            let alphas: Vec<f64> = alphas
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| anyhow!("bad alpha '{s}'"))
                        .map(|a| a * scale)
                })
                .collect::<anyhow::Result<_>>()?;
            let selected: Vec<LatentCode> = code_rows.into_iter().take(count).collect();
            if selected.is_empty() {
                bail!("codes file is empty");
            }

            let ssim_cfg = SsimConfig::default();
            let report = analysis::evaluate_edit(&generator, &selected, &v, &alphas, &ssim_cfg)?;
            std::fs::write(
                out.join("edit_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;

            // one strip per code across strengths
            let mut rows = Vec::new();
            for code in &selected {
                let edited = analysis::edit(&EditRequest {
                    base_code: code.clone(),
                    direction: v.clone(),
                    alphas: alphas.clone(),
                })?;
                let row: Vec<data::Image> = edited
                    .iter()
                    .map(|c| generator.synthesize(c))
                    .collect::<latentray::Result<_>>()?;
                rows.push(row);
            }
            let sheet = out.join("edit_grid.png");
            latentray::viz::save_contact_sheet(&sheet, &rows)?;
            println!(
                "edited {} codes across {} strengths -> {} (spearman {:?})",
                selected.len(),
                alphas.len(),
                sheet.display(),
                report.spearman_alpha_ctr
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval { tier, out, seed } => {
            ensure_out(&out)?;
            let tier: Tier = tier.parse()?;
            let mut cfg = EvalConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            std::fs::write(
                out.join("eval_config_resolved.json"),
                serde_json::to_string_pretty(&cfg)?,
            )?;
            let report = run_acceptance(&cfg, tier)?;
            for c in &report.criteria {
                println!("{}", c.line());
            }
            println!(
                "overall: {} ({} criteria, {:.1}s)",
                if report.overall_pass { "PASS" } else { "FAIL" },
                report.criteria.len(),
                report.runtime_seconds
            );
            report.save_json(&out.join("report.json"))?;
            Ok(if report.overall_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}
