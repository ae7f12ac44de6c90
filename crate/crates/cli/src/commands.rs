use std::fmt::Write as _;
use std::path::Path;

use aec_core::datagen::{generate_dataset, read_manifest, read_wav, write_wav, MANIFEST_FILE};
use aec_core::eval::{evaluate_dataset, Method, PesqScorer};
use aec_core::model::{
    forward_full, load_checkpoint, receptive_field, ModelConfig, ModelParams, StreamingAec,
};
use aec_core::train::{early_stop_check, load_examples, Trainer, BEST_CHECKPOINT, RESUME_STATE};
use aec_core::{Executor, Tensor, SAMPLE_RATE};
use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::config::{self, number, require_dir, ConfigError, RunConfig};
use crate::{Command, Common};

const RUN_CONFIG_FILE: &str = "run.toml";

/// Resolves the configuration with flag overrides applied last and prints it.
fn resolve(common: &Common, flags: &[(&str, Option<Value>)]) -> Result<RunConfig> {
    let mut sets = common.sets.clone();
    if let Some(seed) = common.seed {
        sets.push(("train.seed".into(), Value::from(seed)));
    }
    for (key, value) in flags {
        if let Some(v) = value {
            sets.push((key.to_string(), v.clone()));
        }
    }
    if common.jobs == 0 {
        return Err(ConfigError("--jobs must be at least 1".into()).into());
    }
    config::resolve(common.config.as_deref(), &sets)
}

fn announce(cfg: &RunConfig) {
    println!("# resolved configuration\n{}", cfg.to_toml());
    println!("seed: {}", cfg.seed());
}

fn read_pair(mix: &Path, far: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, m_rate) = read_wav(mix)?;
    let (f, f_rate) = read_wav(far)?;
    for (path, rate) in [(mix, m_rate), (far, f_rate)] {
        if rate != SAMPLE_RATE {
            bail!(
                "{} is sampled at {rate} Hz, expected {SAMPLE_RATE}",
                path.display()
            );
        }
    }
    if m.len() != f.len() {
        bail!(
            "mixture has {} samples but far end has {}",
            m.len(),
            f.len()
        );
    }
    Ok((m, f))
}

/// Loads a checkpoint and records its architecture in the printed config.
fn load_model(path: &Path, cfg: &mut RunConfig) -> Result<ModelParams<Tensor>> {
    let (model, params) = load_checkpoint(path)?;
    cfg.model = model;
    Ok(params)
}

/// `frame,head,layer_0..layer_{J-1}` rows from a `T × h × J` array.
pub fn attention_csv(attention: &Tensor) -> String {
    let &[frames, heads, layers] = attention.shape() else {
        panic!("attention must be rank 3");
    };
    let mut out = String::from("frame,head");
    for j in 0..layers {
        write!(out, ",layer_{j}").expect("string write");
    }
    out.push('\n');
    for t in 0..frames {
        for h in 0..heads {
            write!(out, "{t},{h}").expect("string write");
            for j in 0..layers {
                write!(out, ",{}", attention.at3(t, h, j)).expect("string write");
            }
            out.push('\n');
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData {
            out,
            ser,
            snr,
            t60,
            common,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("data.ser_db", ser.map(number)),
                    ("data.snr_db", snr.map(number)),
                    ("data.t60", t60.map(number)),
                ],
            )?;
            announce(&cfg);
            require_dir(&out)?;
            let specs = cfg.data.specs(cfg.seed())?;
            let records = generate_dataset(&specs, &out, &Executor::new(common.jobs))?;
            write_text(&out.join(RUN_CONFIG_FILE), &cfg.to_toml())?;
            if common.verbose {
                for r in &records {
                    println!(
                        "{}: SER {:?} dB, SNR {:?} dB",
                        r.id, r.realized_ser_db, r.realized_snr_db
                    );
                }
            }
            println!(
                "wrote {} items to {}",
                records.len(),
                out.join(MANIFEST_FILE).display()
            );
        }
        Command::Train {
            data,
            val_fraction,
            out,
            resume,
            causal,
            common,
        } => {
            let cfg = resolve(&common, &[("model.causal", causal.map(Value::from))])?;
            if !(val_fraction > 0.0 && val_fraction < 1.0) {
                return Err(ConfigError(format!(
                    "--val-fraction {val_fraction} must lie in (0, 1)"
                ))
                .into());
            }
            announce(&cfg);
            require_dir(&out)?;
            let exec = Executor::new(common.jobs);
            let mut records = read_manifest(&data.join(MANIFEST_FILE))?;
            if records.len() < 2 {
                bail!(
                    "need at least two items to split off validation, found {}",
                    records.len()
                );
            }
            records.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed()));
            let n_val = ((records.len() as f64 * val_fraction).round() as usize)
                .clamp(1, records.len() - 1);
            let (val_records, train_records) = records.split_at(n_val);
            let val = load_examples(val_records, &data, &exec)?;
            let train = load_examples(train_records, &data, &exec)?;
            println!(
                "training on {} items, validating on {}",
                train.len(),
                val.len()
            );
            write_text(&out.join(RUN_CONFIG_FILE), &cfg.to_toml())?;
            let mut trainer = match resume {
                Some(path) => {
                    let t = Trainer::resume(&path, exec)?;
                    println!("resuming at epoch {}", t.next_epoch());
                    t
                }
                None => Trainer::from_seed(cfg.model.clone(), cfg.train.clone(), exec)?,
            };
            let patience = trainer.config().early_stop_patience;
            while trainer.next_epoch() < trainer.config().epochs_max
                && !early_stop_check(&trainer.log().val_losses(), patience)
            {
                let r = trainer.run_epoch(&train, &val, Some(&out))?;
                println!(
                    "epoch {:>4}  lr {:.3e}  train {:.6e}  val {:.6e}{}  ({:.1} s)",
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    r.val_loss,
                    if r.best { "  *" } else { "" },
                    r.wall_seconds
                );
            }
            let outcome = trainer.fit(&train, &val, Some(&out))?;
            println!(
                "best epoch {:?} with validation loss {:.6e}{}; checkpoint {}, state {}",
                outcome.best_epoch,
                outcome.best_val_loss,
                if outcome.stopped_early {
                    " (stopped early)"
                } else {
                    ""
                },
                out.join(BEST_CHECKPOINT).display(),
                out.join(RESUME_STATE).display()
            );
        }
        Command::Infer {
            checkpoint,
            mix,
            far,
            out,
            save_attention,
            common,
        } => {
            let mut cfg = resolve(&common, &[])?;
            let params = load_model(&checkpoint, &mut cfg)?;
            announce(&cfg);
            require_dir(&out)?;
            let (m, f) = read_pair(&mix, &far)?;
            let result = forward_full(&params, &cfg.model, &m, &f)?;
            write_wav(&out.join("estimate.wav"), &result.estimate, SAMPLE_RATE)?;
            if save_attention {
                write_text(
                    &out.join("attention.csv"),
                    &attention_csv(&result.attention),
                )?;
            }
            println!(
                "wrote {} samples to {}",
                result.estimate.len(),
                out.join("estimate.wav").display()
            );
        }
        Command::Stream {
            checkpoint,
            mix,
            far,
            out,
            common,
        } => {
            let mut cfg = resolve(&common, &[])?;
            let params = load_model(&checkpoint, &mut cfg)?;
            announce(&cfg);
            require_dir(&out)?;
            let (m, f) = read_pair(&mix, &far)?;
            let model = &cfg.model;
            let frames = model.frames(m.len()).with_context(|| {
                format!("input of {} samples is shorter than one frame", m.len())
            })?;
            // the offline contract covers whole frames only
            let usable = model.output_len(frames);
            let mut engine = StreamingAec::new(model, params)?;
            let estimate = engine.process_utterance(&m[..usable], &f[..usable])?;
            write_wav(&out.join("estimate.wav"), &estimate, SAMPLE_RATE)?;
            println!(
                "streamed {frames} hops of {} samples with {} samples of latency; wrote {}",
                model.stride,
                model.latency(),
                out.join("estimate.wav").display()
            );
        }
        Command::Evaluate {
            data,
            out,
            checkpoint,
            methods,
            scorer,
            common,
        } => {
            let mut cfg = resolve(&common, &[])?;
            let params = checkpoint
                .as_deref()
                .map(|p| load_model(p, &mut cfg))
                .transpose()?;
            let mut chosen = Vec::new();
            for name in &methods {
                chosen.push(match name.as_str() {
                    "identity" => Method::Identity,
                    "nlms" => Method::Nlms(cfg.nlms),
                    "model" => match &params {
                        Some(p) => Method::Model {
                            config: cfg.model.clone(),
                            params: Box::new(p.clone()),
                        },
                        None => {
                            return Err(
                                ConfigError("method `model` needs --checkpoint".into()).into()
                            )
                        }
                    },
                    other => {
                        return Err(ConfigError(format!(
                            "unknown method `{other}` (expected identity, nlms, model)"
                        ))
                        .into())
                    }
                });
            }
            announce(&cfg);
            require_dir(&out)?;
            let records = read_manifest(&data.join(MANIFEST_FILE))?;
            let scorer = scorer.map(PesqScorer::new);
            if scorer.is_none() {
                println!("no --scorer given; PESQ columns are n/a");
            }
            let report = evaluate_dataset(
                &records,
                &data,
                &chosen,
                scorer.as_ref(),
                &Executor::new(common.jobs),
            );
            write_text(&out.join("items.csv"), &report.rows_csv()?)?;
            write_text(&out.join("summary.csv"), &report.aggregates_csv()?)?;
            let table = report.to_table();
            write_text(&out.join("summary.txt"), &table)?;
            print!("{table}");
            let failed: Vec<_> = report.rows.iter().filter(|r| r.error.is_some()).collect();
            for row in &failed {
                eprintln!(
                    "warning: {} ({}) failed: {}",
                    row.id,
                    row.method,
                    row.error.as_deref().unwrap_or("")
                );
            }
            if !report.rows.is_empty() && failed.len() == report.rows.len() {
                bail!("every item failed to evaluate");
            }
        }
        Command::InspectAttention {
            checkpoint,
            mix,
            far,
            out,
            causal,
            common,
        } => {
            let mut cfg = resolve(&common, &[("model.causal", causal.map(Value::from))])?;
            let params = match &checkpoint {
                Some(p) => load_model(p, &mut cfg)?,
                None => ModelParams::init(&cfg.model, cfg.seed()),
            };
            announce(&cfg);
            require_dir(&out)?;
            let (m, f) = read_pair(&mix, &far)?;
            let result = forward_full(&params, &cfg.model, &m, &f)?;
            let path = out.join("attention.csv");
            write_text(&path, &attention_csv(&result.attention))?;
            let shape = result.attention.shape();
            println!(
                "attention grid {} x {} x {} (frames x heads x layers) written to {}",
                shape[0],
                shape[1],
                shape[2],
                path.display()
            );
        }
        Command::Rf { causal, common } => {
            let cfg = resolve(&common, &[("model.causal", causal.map(Value::from))])?;
            announce(&cfg);
            print_rf(&cfg.model);
        }
    }
    Ok(())
}

fn print_rf(model: &ModelConfig) {
    let rf = receptive_field(model);
    println!(
        "nominal receptive field: {} samples / {:.2} s (R * 2^M * L)",
        rf.nominal_samples, rf.nominal_seconds
    );
    println!(
        "dilated convolution span: {} frames = {} samples / {:.4} s",
        rf.conv_frames, rf.conv_samples, rf.conv_seconds
    );
    if model.causal {
        println!("the cumulative normalization and recurrent state carry information from the whole past");
    }
}
