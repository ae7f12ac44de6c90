#![allow(clippy::single_range_in_vec_init)]

//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion does.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use aec_core::datagen::{
    build_mixture, generate_dataset, read_wav, regenerate, region_power, to_db, write_wav,
    DataConfig, NonlinearitySpec, Split, MANIFEST_FILE, TEST_SER_DB, TRAIN_SER_DB,
};
use aec_core::eval::{erle, nlms_cancel, NlmsConfig};
use aec_core::gradcheck::{grad_check_directional, grad_check_many, Difference};
use aec_core::model::{
    conv_path_features, decode, encode, forward_full, forward_graph, load_checkpoint,
    receptive_field, save_checkpoint, ModelConfig, ModelParams, StreamingAec,
};
use aec_core::nn::{
    conv_block, layer_norm, lstm_step, multi_head_attention, prelu, AttentionParams,
    AttentionScale, BlockGeometry, ConvBlockParams, LstmParams, LstmState, NormParams, ParamTree,
};
use aec_core::train::{early_stop_check, lr_schedule, Example, TrainConfig, Trainer};
use aec_core::{Executor, NormKind, Result, Tape, Tensor, Var, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> std::result::Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < limit.as_secs_f64(), || {
        format!("took {secs:.1} s, budget {} s", limit.as_secs())
    })?;
    Ok(secs)
}

fn rand_tensor(shape: &[usize], seed: u64, bound: f64) -> Tensor {
    Tensor::uniform(shape, bound, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn noise(len: usize, seed: u64, amp: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-amp..amp)).collect()
}

/// `Σ y ⊙ R` for a fixed random `R`.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(off_zero(tape.shape(y), seed ^ 0x9e37, 0.25));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Values at least `margin` from zero, so finite differences never straddle a kink.
fn off_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

const GRAD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

/// Worst relative error over every layer check for one seed.
fn layer_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
                   inputs: Vec<Tensor>|
     -> Result<()> {
        let report = grad_check_many(f, &inputs, GRAD_EPS, None)?;
        out.push((name, report.max_rel_error));
        Ok(())
    };
    let (n, l, stride) = (6, 8, 4);
    run(
        "encoder",
        &|t, v| {
            let y = encode(t, v[0], v[1], stride)?;
            project(t, y, seed)
        },
        vec![
            rand_tensor(&[1, 40], seed, 1.0),
            rand_tensor(&[n, 1, l], seed + 1, 0.5),
        ],
    )?;
    run(
        "decoder",
        &|t, v| {
            let y = decode(t, v[0], v[1], stride)?;
            project(t, y, seed)
        },
        vec![
            rand_tensor(&[n, 9], seed + 2, 1.0),
            rand_tensor(&[n, 1, l], seed + 3, 0.5),
        ],
    )?;
    for kind in [NormKind::Cumulative, NormKind::Global] {
        run(
            if kind == NormKind::Cumulative {
                "cLN"
            } else {
                "gLN"
            },
            &|t, v| {
                let y = layer_norm(
                    t,
                    v[0],
                    &NormParams {
                        gain: v[1],
                        bias: v[2],
                    },
                    kind,
                )?;
                project(t, y, seed)
            },
            vec![
                rand_tensor(&[4, 7], seed + 4, 1.0),
                rand_tensor(&[4], seed + 5, 1.0),
                rand_tensor(&[4], seed + 6, 1.0),
            ],
        )?;
    }
    run(
        "prelu",
        &|t, v| {
            let y = prelu(t, v[0], v[1])?;
            project(t, y, seed)
        },
        vec![
            off_zero(&[4, 6], seed + 7, 0.05),
            rand_tensor(&[4], seed + 8, 1.0),
        ],
    )?;
    let (e, h, s, k) = (3, 5, 2, 3);
    let geo = BlockGeometry::new(k, 1 + seed as usize % 4, seed.is_multiple_of(2));
    let shapes: [&[usize]; 14] = [
        &[h, e, 1],
        &[h],
        &[h],
        &[h],
        &[h],
        &[h, 1, k],
        &[h],
        &[h],
        &[h],
        &[h],
        &[e, h, 1],
        &[e],
        &[s, h, 1],
        &[s],
    ];
    let mut block_inputs = vec![rand_tensor(&[e, 10], seed + 9, 1.0)];
    block_inputs.extend(
        shapes
            .iter()
            .enumerate()
            .map(|(i, sh)| rand_tensor(sh, seed * 97 + i as u64, 0.8)),
    );
    run(
        "conv block",
        &|t, v| {
            let p = ConvBlockParams {
                in_w: v[1],
                in_b: v[2],
                in_alpha: v[3],
                in_norm: NormParams {
                    gain: v[4],
                    bias: v[5],
                },
                dw_w: v[6],
                dw_b: v[7],
                dw_alpha: v[8],
                dw_norm: NormParams {
                    gain: v[9],
                    bias: v[10],
                },
                res_w: v[11],
                res_b: v[12],
                skip_w: v[13],
                skip_b: v[14],
            };
            let (res, skip) = conv_block(t, v[0], &p, geo)?;
            let a = project(t, res, seed)?;
            let b = project(t, skip, seed + 1)?;
            t.add(a, b)
        },
        block_inputs,
    )?;
    let sz = 4;
    run(
        "lstm",
        &|t, v| {
            let p = LstmParams {
                w_input: v[3],
                w_hidden: v[4],
                bias: v[5],
            };
            let first = lstm_step(
                t,
                v[0],
                LstmState {
                    hidden: v[1],
                    cell: v[2],
                },
                &p,
            )?;
            let second = lstm_step(t, v[0], first, &p)?;
            let a = project(t, second.hidden, seed)?;
            let b = project(t, second.cell, seed + 1)?;
            t.add(a, b)
        },
        vec![
            rand_tensor(&[1, sz], seed + 10, 1.0),
            rand_tensor(&[1, sz], seed + 11, 1.0),
            rand_tensor(&[1, sz], seed + 12, 1.0),
            rand_tensor(&[sz, 4 * sz], seed + 13, 0.7),
            rand_tensor(&[sz, 4 * sz], seed + 14, 0.7),
            rand_tensor(&[1, 4 * sz], seed + 15, 0.7),
        ],
    )?;
    let (s, f, j) = (4, 8, 6);
    for heads in [1, 4] {
        run(
            "layer attention",
            &|t, v| {
                let p = AttentionParams {
                    w_query: v[2],
                    w_key: v[3],
                    w_value: v[4],
                    w_out: v[5],
                };
                let (ctx, w) =
                    multi_head_attention(t, v[0], v[1], &p, heads, AttentionScale::KeyDim)?;
                let a = project(t, ctx, seed)?;
                let b = project(t, w, seed + 1)?;
                t.add(a, b)
            },
            vec![
                rand_tensor(&[1, s], seed + 16, 1.0),
                rand_tensor(&[j, s], seed + 17, 1.0),
                rand_tensor(&[s, f], seed + 18, 0.8),
                rand_tensor(&[s, f], seed + 19, 0.8),
                rand_tensor(&[s, f], seed + 20, 0.8),
                rand_tensor(&[f, s], seed + 21, 0.8),
            ],
        )?;
    }
    run(
        "mask",
        &|t, v| {
            let z = t.matmul(v[0], v[1])?;
            let z = t.add(z, v[2])?;
            let m = t.sigmoid(z);
            project(t, m, seed)
        },
        vec![
            rand_tensor(&[1, 4], seed + 22, 1.0),
            rand_tensor(&[4, 6], seed + 23, 1.0),
            rand_tensor(&[1, 6], seed + 24, 1.0),
        ],
    )?;
    run(
        "mse loss",
        &|t, v| t.squared_error(v[0], v[1], true),
        vec![
            rand_tensor(&[1, 12], seed + 25, 1.0),
            rand_tensor(&[1, 12], seed + 26, 1.0),
        ],
    )?;
    Ok(out)
}

/// The tiny model end to end on a 400-sample utterance, loss against a random
/// target. Each parameter tensor and both waveforms get two directional checks;
/// see the ledger for why elementwise quotients are not used at this scale.
fn model_check(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, seed);
    let mut inputs = Vec::new();
    params.visit("", &mut |_, t| inputs.push(t.clone()));
    let n_params = inputs.len();
    let len = 400;
    inputs.push(Tensor::row(noise(len, seed + 1, 0.5)));
    inputs.push(Tensor::row(noise(len, seed + 2, 0.5)));
    let target = Tensor::row(noise(len, seed + 3, 0.3));
    let report = grad_check_directional(
        |tape, v| {
            let mut i = 0;
            let p = params.map_leaves("", &mut |_, _| {
                i += 1;
                v[i - 1]
            });
            let g = forward_graph(tape, &p, &cfg, v[n_params], v[n_params + 1])?;
            let target = tape.constant(target.clone());
            tape.squared_error(g.estimate, target, true)
        },
        &inputs,
        Difference::Ladder {
            initial: 1e-4,
            levels: 12,
        },
        2,
        seed,
    )?;
    Ok(report.max_rel_error)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let seeds = 20u64;
    let mut worst_layer = ("", 0.0f64);
    let mut worst_model = 0.0f64;
    for seed in 0..seeds {
        for (name, err) in layer_checks(seed).map_err(|e| e.to_string())? {
            ensure(err < GRAD_TOL, || {
                format!("{name} seed {seed}: relative error {err:e}")
            })?;
            if err > worst_layer.1 {
                worst_layer = (name, err);
            }
        }
        let err = model_check(seed).map_err(|e| e.to_string())?;
        ensure(err < GRAD_TOL, || {
            format!("tiny model seed {seed}: relative error {err:e}")
        })?;
        worst_model = worst_model.max(err);
    }
    let secs = within(Duration::from_secs(300), start)?;
    Ok(format!(
        "{seeds} seeds; worst layer {} {:.1e}, worst end-to-end {:.1e} (< 1e-4); {secs:.1} s",
        worst_layer.0, worst_layer.1, worst_model
    ))
}

fn aec_binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aec"))
}

fn criterion_2() -> Outcome {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 11);
    let len = 2000;
    let mix = noise(len, 1, 0.5);
    let far = noise(len, 2, 0.5);
    let base = forward_full(&params, &cfg, &mix, &far).map_err(|e| e.to_string())?;
    for t in [0usize, 5, 33, 80] {
        let cut = t * cfg.stride + cfg.filter_len;
        let mut m2 = mix.clone();
        let mut f2 = far.clone();
        for i in cut..len {
            m2[i] += 0.3;
            f2[i] -= 0.2;
        }
        let out = forward_full(&params, &cfg, &m2, &f2).map_err(|e| e.to_string())?;
        for n in 0..cfg.filters {
            for frame in 0..=t {
                ensure(out.masks.at2(n, frame) == base.masks.at2(n, frame), || {
                    format!("mask changed at frame {frame}")
                })?;
            }
        }
        let settled = (t + 1) * cfg.stride;
        ensure(out.estimate[..settled] == base.estimate[..settled], || {
            format!("output before frame {t} changed")
        })?;
    }

    // The dilated stack: inputs older than its span leave the probed frame bit-identical.
    let probe_cfg = ModelConfig {
        blocks_per_repeat: 3,
        ..ModelConfig::tiny()
    };
    let rf = receptive_field(&probe_cfg);
    let params = ModelParams::init(&probe_cfg, 5);
    let frames = rf.conv_frames + 20;
    let len = probe_cfg.output_len(frames);
    let mix = noise(len, 8, 0.5);
    let far = noise(len, 9, 0.5);
    let features = |mix: &[f64], far: &[f64]| -> Tensor {
        let mut tape = Tape::new();
        let p = params.to_tape(&mut tape, false);
        let m = tape.constant(Tensor::row(mix.to_vec()));
        let f = tape.constant(Tensor::row(far.to_vec()));
        let m = encode(&mut tape, m, p.encoder_mix, probe_cfg.stride).unwrap();
        let f = encode(&mut tape, f, p.encoder_far, probe_cfg.stride).unwrap();
        let out = conv_path_features(&mut tape, m, f, &p, &probe_cfg).unwrap();
        tape.value(out).clone()
    };
    let probe = frames - 1;
    let row = probe_cfg.layers() * probe_cfg.skip_channels;
    let slice = |t: &Tensor| t.data()[probe * row..(probe + 1) * row].to_vec();
    let base = slice(&features(&mix, &far));
    let first = (probe + 1 - rf.conv_frames) * probe_cfg.stride;
    let mut outside = mix.clone();
    let mut outside_far = far.clone();
    for i in 0..first {
        outside[i] += 1.0;
        outside_far[i] -= 1.0;
    }
    let moved = slice(&features(&outside, &outside_far));
    let max_change = base
        .iter()
        .zip(&moved)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(max_change == 0.0, || {
        format!("probed frame moved by {max_change:e}")
    })?;

    let out = aec_binary().arg("rf").output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), || {
        format!("`aec rf` exited with {}", out.status)
    })?;
    ensure(stdout.contains("30720 samples / 1.92 s"), || {
        format!("`aec rf` printed {stdout:?}")
    })?;
    Ok(format!(
        "future perturbations leave past frames exact; change outside {}-frame span is 0; rf reports 30720 samples / 1.92 s",
        rf.conv_frames
    ))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::full();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("full.ckpt");
    // weights as stored on disk, 32-bit
    save_checkpoint(&path, &cfg, &ModelParams::init(&cfg, 3)).map_err(|e| e.to_string())?;
    let (cfg, params) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut engine = StreamingAec::new(&cfg, params.clone()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let len = 2 * SAMPLE_RATE as usize;
        let mix = noise(len, 1000 + i, 0.5);
        let far = noise(len, 2000 + i, 0.5);
        let offline = forward_full(&params, &cfg, &mix, &far)
            .map_err(|e| e.to_string())?
            .estimate;
        engine.reset();
        let streamed = engine
            .process_utterance(&mix, &far)
            .map_err(|e| e.to_string())?;
        ensure(streamed.len() == offline.len(), || {
            format!("lengths {} vs {}", streamed.len(), offline.len())
        })?;
        let err = offline
            .iter()
            .zip(&streamed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    ensure(worst < 1e-5, || format!("max deviation {worst:e}"))?;
    let secs = within(Duration::from_secs(60), start)?;
    Ok(format!(
        "10 x 2 s, full config, f32 weights: max |stream - offline| = {worst:.1e}; {secs:.1} s"
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let data = DataConfig {
        items: 8,
        samples: SAMPLE_RATE as usize,
        ser_db: Some(0.0),
        t60: Some(0.2),
        nonlinearity: NonlinearitySpec::linear(),
        ..DataConfig::default()
    };
    let items: Vec<_> = data
        .specs(1)
        .map_err(|e| e.to_string())?
        .iter()
        .map(build_mixture)
        .collect::<Result<_>>()
        .map_err(|e| e.to_string())?;
    let examples: Vec<Example> = items
        .iter()
        .map(|i| Example {
            id: i.id.clone(),
            far: i.far.clone(),
            mixture: i.mixture.clone(),
            near: i.near.clone(),
        })
        .collect();
    let cfg = ModelConfig::tiny();
    let train = TrainConfig {
        batch_size: 8,
        grad_clip: None,
        ..TrainConfig::default()
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut trainer =
        Trainer::from_seed(cfg.clone(), train, Executor::new(jobs)).map_err(|e| e.to_string())?;
    let batch: Vec<&Example> = examples.iter().collect();
    let mut first = None;
    for _ in 0..500 {
        let loss = trainer.step(&batch, 1e-3).map_err(|e| e.to_string())?;
        first.get_or_insert(loss);
    }
    let first = first.expect("500 steps ran");
    let last = trainer.evaluate(&examples).map_err(|e| e.to_string())?;
    let drop = 1.0 - last / first;
    let mut erles = Vec::new();
    for item in &items {
        let est = forward_full(trainer.params(), &cfg, &item.mixture, &item.far)
            .map_err(|e| e.to_string())?
            .estimate;
        let n = est.len();
        let regions: Vec<_> = item
            .single_talk
            .iter()
            .map(|r| r.start.min(n)..r.end.min(n))
            .filter(|r| !r.is_empty())
            .collect();
        erles.push(erle(&item.mixture[..n], &est, &regions).map_err(|e| e.to_string())?);
    }
    let min_erle = erles.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_erle = erles.iter().sum::<f64>() / erles.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "MSE {first:.3e} -> {last:.3e} ({:.2} % drop), ERLE min {min_erle:.1} / mean {mean_erle:.1} dB; {secs:.0} s",
        100.0 * drop
    );
    ensure(drop >= 0.95, || format!("loss drop below 95 %: {summary}"))?;
    ensure(min_erle >= 15.0, || format!("ERLE below 15 dB: {summary}"))?;
    within(Duration::from_secs(1800), start)?;
    Ok(summary)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let data = DataConfig {
        items: 10,
        samples: 2 * SAMPLE_RATE as usize,
        lead_silence: 0,
        rir_length: Some(512),
        nonlinearity: NonlinearitySpec::linear(),
        single_talk_only: true,
        ..DataConfig::default()
    };
    let cfg = NlmsConfig::default();
    let mut erles = Vec::new();
    for spec in data.specs(7).map_err(|e| e.to_string())? {
        let item = build_mixture(&spec).map_err(|e| e.to_string())?;
        ensure(item.noise.iter().all(|&v| v == 0.0), || {
            "noise present".into()
        })?;
        let residual = nlms_cancel(&item.far, &item.mixture, &cfg).map_err(|e| e.to_string())?;
        let n = item.mixture.len();
        erles.push(erle(&item.mixture, &residual, &[n / 2..n]).map_err(|e| e.to_string())?);
    }
    let mean = erles.iter().sum::<f64>() / erles.len() as f64;
    ensure(mean >= 20.0, || {
        format!("mean final-half ERLE {mean:.2} dB")
    })?;
    let secs = within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{} single-talk items, 512 taps: mean final-half ERLE {mean:.2} dB; {secs:.1} s",
        erles.len()
    ))
}

fn criterion_6() -> Outcome {
    let base = DataConfig {
        items: 25,
        samples: SAMPLE_RATE as usize,
        snr_db: Some(10.0),
        ..DataConfig::default()
    };
    let mut specs = DataConfig {
        split: Split::Train,
        ..base.clone()
    }
    .specs(11)
    .map_err(|e| e.to_string())?;
    for (i, s) in specs.iter_mut().enumerate() {
        s.ser_db = TRAIN_SER_DB[i % TRAIN_SER_DB.len()];
    }
    let mut test = DataConfig {
        split: Split::Test,
        ..base
    }
    .specs(12)
    .map_err(|e| e.to_string())?;
    for (i, s) in test.iter_mut().enumerate() {
        s.ser_db = TEST_SER_DB[i % TEST_SER_DB.len()];
    }
    specs.extend(test);
    let (mut worst_ser, mut worst_snr) = (0.0f64, 0.0f64);
    for spec in &specs {
        let item = build_mixture(spec).map_err(|e| e.to_string())?;
        for n in 0..item.mixture.len() {
            ensure(
                item.mixture[n] - item.echo[n] - item.noise[n] == item.near[n],
                || format!("{}: mixture - echo - noise != near at sample {n}", item.id),
            )?;
        }
        // independent measurement from the stored components
        let dt = item.double_talk();
        let ser = to_db(region_power(&item.near, &dt) / region_power(&item.echo, &dt));
        let signal: Vec<f64> = item
            .near
            .iter()
            .zip(&item.echo)
            .map(|(a, b)| a + b)
            .collect();
        let snr = to_db(
            region_power(&signal, &[0..signal.len()])
                / region_power(&item.noise, &[0..signal.len()]),
        );
        worst_ser = worst_ser.max((ser - spec.ser_db).abs());
        worst_snr = worst_snr.max((snr - 10.0).abs());
    }
    ensure(worst_ser <= 0.1, || format!("SER off by {worst_ser:.3} dB"))?;
    ensure(worst_snr <= 0.1, || format!("SNR off by {worst_snr:.3} dB"))?;
    Ok(format!(
        "{} items over SER {{-6,-3,0,3,6}} and {{0,3.5,7}} dB: worst SER error {worst_ser:.1e} dB, SNR error {worst_snr:.1e} dB, decomposition exact",
        specs.len()
    ))
}

fn criterion_7() -> Outcome {
    let cfg = ModelConfig::full();
    let params = ModelParams::init(&cfg, 4);
    let len = SAMPLE_RATE as usize;
    let mix = noise(len, 41, 0.5);
    let far = noise(len, 42, 0.5);
    let out = forward_full(&params, &cfg, &mix, &far).map_err(|e| e.to_string())?;
    let &[frames, heads, layers] = out.attention.shape() else {
        return Err(format!("attention shape {:?}", out.attention.shape()));
    };
    ensure(heads == 16 && layers == 24, || {
        format!("grid {frames}x{heads}x{layers}")
    })?;
    let mut worst = 0.0f64;
    for t in 0..frames {
        for h in 0..heads {
            let row: Vec<f64> = (0..layers).map(|j| out.attention.at3(t, h, j)).collect();
            ensure(row.iter().all(|&w| w >= 0.0), || {
                format!("negative weight at frame {t} head {h}")
            })?;
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst < 1e-6, || format!("weights sum off by {worst:e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mix_path, far_path) = (dir.path().join("mix.wav"), dir.path().join("far.wav"));
    write_wav(&mix_path, &mix, SAMPLE_RATE).map_err(|e| e.to_string())?;
    write_wav(&far_path, &far, SAMPLE_RATE).map_err(|e| e.to_string())?;
    let out_dir = dir.path().join("attn");
    let status = aec_binary()
        .arg("inspect-attention")
        .arg("--mix")
        .arg(&mix_path)
        .arg("--far")
        .arg(&far_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        format!("inspect-attention exited with {}", status.status)
    })?;
    let csv = std::fs::read_to_string(out_dir.join("attention.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    ensure(header.len() == 2 + 24 && header[25] == "layer_23", || {
        format!("header {header:?}")
    })?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    ensure(rows.len() == frames * 16, || {
        format!("{} rows for {frames} frames", rows.len())
    })?;
    ensure(rows.iter().all(|r| r.len() == 26), || "ragged rows".into())?;
    Ok(format!(
        "{frames} frames x 16 heads x 24 layers; max |sum - 1| = {worst:.1e}; CLI grid {} rows",
        rows.len()
    ))
}

fn criterion_8() -> Outcome {
    let train = TrainConfig::default();
    let first = lr_schedule(0, train.epochs_max, train.lr_start, train.lr_end)
        .map_err(|e| e.to_string())?;
    let last = lr_schedule(
        train.epochs_max - 1,
        train.epochs_max,
        train.lr_start,
        train.lr_end,
    )
    .map_err(|e| e.to_string())?;
    ensure(first == 1e-4 && last == 1e-8, || {
        format!("endpoints {first:e}, {last:e}")
    })?;
    // improves for six epochs, then stalls with small wobbles above the best
    let mut trace: Vec<f64> = (0..6).map(|e| 1.0 / (e as f64 + 1.0)).collect();
    let best = trace[5];
    trace.extend((0..15).map(|i| best + 0.01 + 0.001 * (i % 3) as f64));
    let patience = train.early_stop_patience;
    let fired = (1..=trace.len()).find(|&n| early_stop_check(&trace[..n], patience));
    let stagnant = fired.map(|n| n - 6);
    ensure(patience == 10 && stagnant == Some(10), || {
        format!("stopped after {stagnant:?} stagnant epochs")
    })?;
    Ok(format!(
        "lr {first:e} -> {last:e} over 200 epochs; early stop after exactly {} stagnant epochs",
        patience
    ))
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::init(&cfg, 9);
    params.round_to_f32();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &cfg, &params).map_err(|e| e.to_string())?;
    let (cfg2, params2) = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let bits =
        |p: &ModelParams<Tensor>| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(cfg2 == cfg && bits(&params2) == bits(&params), || {
        "checkpoint values differ".into()
    })?;
    let bytes = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    save_checkpoint(&ckpt, &cfg2, &params2).map_err(|e| e.to_string())?;
    ensure(
        std::fs::read(&ckpt).map_err(|e| e.to_string())? == bytes,
        || "re-saved checkpoint differs".into(),
    )?;

    let wav = dir.path().join("pcm.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pcm: Vec<f64> = (0..20_000)
        .map(|_| rng.random_range(i16::MIN..=i16::MAX) as f64 / 32768.0)
        .collect();
    pcm.extend([-1.0, 32767.0 / 32768.0, 0.0]);
    write_wav(&wav, &pcm, SAMPLE_RATE).map_err(|e| e.to_string())?;
    let (back, rate) = read_wav(&wav).map_err(|e| e.to_string())?;
    ensure(rate == SAMPLE_RATE && back == pcm, || {
        "WAV samples changed".into()
    })?;

    let specs = DataConfig {
        items: 6,
        samples: 16000,
        ..DataConfig::default()
    }
    .specs(5)
    .map_err(|e| e.to_string())?;
    let first = dir.path().join("first");
    let again = dir.path().join("again");
    generate_dataset(&specs, &first, &Executor::sequential()).map_err(|e| e.to_string())?;
    regenerate(&first.join(MANIFEST_FILE), &again, &Executor::sequential())
        .map_err(|e| e.to_string())?;
    let (a, b) = (tree_bytes(&first), tree_bytes(&again));
    ensure(a == b, || "regenerated dataset differs".into())?;
    Ok(format!(
        "checkpoint bit-exact ({} values), {} PCM samples exact, {} regenerated files byte-identical",
        params.count(),
        pcm.len(),
        a.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", criterion_1),
        ("causality and receptive field", criterion_2),
        ("streaming equivalence", criterion_3),
        ("overfit smoke", criterion_4),
        ("NLMS anchor", criterion_5),
        ("data-pipeline fidelity", criterion_6),
        ("attention sanity", criterion_7),
        ("schedule fidelity", criterion_8),
        ("format round-trips", criterion_9),
    ];
    // ACCEPTANCE_ONLY=3,7 runs a subset while iterating; the default is all
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    // written to the raw handle so the report survives libtest's output capture
    let report = |line: String| {
        let _ = writeln!(std::io::stderr(), "{line}");
    };
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => report(format!("criterion {} {name}: PASS ({detail})", i + 1)),
            Err(why) => {
                report(format!("criterion {} {name}: FAIL ({why})", i + 1));
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
