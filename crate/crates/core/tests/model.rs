use aec_core::model::{
    conv_path_features, encode, forward_full, receptive_field, Fusion, ModelConfig, ModelParams,
    StreamingAec,
};
use aec_core::nn::AttentionScale;
use aec_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

#[test]
fn output_length_follows_framing() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 0);
    for len in [40, 41, 59, 60, 333] {
        let out = forward_full(&params, &cfg, &noise(len, 1), &noise(len, 2)).unwrap();
        let frames = cfg.frames(len).unwrap();
        assert_eq!(out.estimate.len(), cfg.output_len(frames));
        assert_eq!(out.masks.shape(), &[cfg.filters, frames]);
        assert_eq!(out.attention.shape(), &[frames, cfg.heads, cfg.layers()]);
    }
}

#[test]
fn short_inputs_are_rejected() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 0);
    assert!(matches!(
        forward_full(&params, &cfg, &[0.0; 39], &[0.0; 39]),
        Err(Error::TooShort(_))
    ));
    assert!(matches!(
        forward_full(&params, &cfg, &[0.0; 50], &[0.0; 45]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn masks_lie_in_unit_interval() {
    let cfg = ModelConfig::tiny();
    let out = forward_full(
        &ModelParams::init(&cfg, 3),
        &cfg,
        &noise(800, 4),
        &noise(800, 5),
    )
    .unwrap();
    assert!(out.masks.data().iter().all(|&m| m > 0.0 && m < 1.0));
}

#[test]
fn causal_output_ignores_future_input() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 11);
    let len = 1600;
    let mix = noise(len, 1);
    let far = noise(len, 2);
    let base = forward_full(&params, &cfg, &mix, &far).unwrap().estimate;
    for t in [0usize, 7, 30, 70] {
        // the first input sample that frame t+1 sees but frame t does not
        let cut = t * cfg.stride + cfg.filter_len;
        let mut m2 = mix.clone();
        let mut f2 = far.clone();
        for i in cut..len {
            m2[i] += 0.3;
            f2[i] -= 0.2;
        }
        let out = forward_full(&params, &cfg, &m2, &f2).unwrap().estimate;
        let settled = (t + 1) * cfg.stride;
        assert_eq!(&out[..settled], &base[..settled], "frame {t}");
        assert_ne!(out[settled..], base[settled..]);
    }
}

#[test]
fn noncausal_output_sees_the_future() {
    let cfg = ModelConfig {
        causal: false,
        ..ModelConfig::tiny()
    };
    let params = ModelParams::init(&cfg, 11);
    let mix = noise(800, 1);
    let far = noise(800, 2);
    let base = forward_full(&params, &cfg, &mix, &far).unwrap().estimate;
    let mut m2 = mix.clone();
    m2[700] += 0.5;
    let out = forward_full(&params, &cfg, &m2, &far).unwrap().estimate;
    assert_ne!(out[0], base[0]);
}

fn conv_features(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    mix: &[f64],
    far: &[f64],
) -> Tensor {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let m = tape.constant(Tensor::row(mix.to_vec()));
    let f = tape.constant(Tensor::row(far.to_vec()));
    let m = encode(&mut tape, m, p.encoder_mix, cfg.stride).unwrap();
    let f = encode(&mut tape, f, p.encoder_far, cfg.stride).unwrap();
    let out = conv_path_features(&mut tape, m, f, &p, cfg).unwrap();
    tape.value(out).clone()
}

#[test]
fn conv_path_receptive_field_is_exact() {
    let cfg = ModelConfig {
        blocks_per_repeat: 3,
        ..ModelConfig::tiny()
    };
    let rf = receptive_field(&cfg);
    let params = ModelParams::init(&cfg, 5);
    let frames = rf.conv_frames + 20;
    let len = cfg.output_len(frames);
    let mix = noise(len, 8);
    let far = noise(len, 9);
    let base = conv_features(&params, &cfg, &mix, &far);
    let probe = frames - 1;
    let row = cfg.layers() * cfg.skip_channels;
    let probe_row = |t: &Tensor| t.data()[probe * row..(probe + 1) * row].to_vec();
    // Earliest sample inside the field of the probed frame.
    let first = (probe + 1 - rf.conv_frames) * cfg.stride;
    let mut outside = mix.clone();
    for v in &mut outside[..first] {
        *v += 1.0;
    }
    assert_eq!(
        probe_row(&conv_features(&params, &cfg, &outside, &far)),
        probe_row(&base)
    );
    let mut inside = mix.clone();
    inside[first] += 1.0;
    assert_ne!(
        probe_row(&conv_features(&params, &cfg, &inside, &far)),
        probe_row(&base)
    );
}

fn stream_matches_offline(cfg: &ModelConfig, seconds_frames: usize, seed: u64) -> f64 {
    let params = ModelParams::init(cfg, seed);
    let len = seconds_frames * cfg.stride;
    let mix = noise(len, seed + 100);
    let far = noise(len, seed + 200);
    let offline = forward_full(&params, cfg, &mix, &far).unwrap().estimate;
    let mut aec = StreamingAec::new(cfg, params).unwrap();
    let streamed = aec.process_utterance(&mix, &far).unwrap();
    assert_eq!(streamed.len(), offline.len());
    offline
        .iter()
        .zip(&streamed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn streaming_equals_offline() {
    for (i, cfg) in [
        ModelConfig::tiny(),
        ModelConfig {
            fusion: Fusion::Sum,
            attention_scale: AttentionScale::HeadDim,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            kernel: 2,
            filter_len: 60,
            ..ModelConfig::tiny()
        },
    ]
    .iter()
    .enumerate()
    {
        let err = stream_matches_offline(cfg, 300, i as u64);
        assert!(err < 1e-10, "config {i}: {err}");
    }
}

#[test]
fn streaming_rejects_bad_input() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 0);
    let nc = ModelConfig {
        causal: false,
        ..cfg.clone()
    };
    assert!(matches!(
        StreamingAec::new(&nc, params.clone()),
        Err(Error::Contract(_))
    ));
    let mut aec = StreamingAec::new(&cfg, params).unwrap();
    assert!(aec.process_frame(&[0.0; 19], &[0.0; 20]).is_err());
    assert_eq!(
        aec.process_frame(&[0.0; 20], &[0.0; 20]).unwrap(),
        vec![0.0; 20]
    );
}

#[test]
fn stream_reset_restarts_from_zero_state() {
    let cfg = ModelConfig::tiny();
    let mut aec = StreamingAec::new(&cfg, ModelParams::init(&cfg, 1)).unwrap();
    let mix = noise(400, 1);
    let far = noise(400, 2);
    let first = aec.process_utterance(&mix, &far).unwrap();
    aec.reset();
    assert_eq!(aec.process_utterance(&mix, &far).unwrap(), first);
}

#[test]
fn checkpoint_files_round_trip_bit_exactly() {
    use aec_core::model::{load_checkpoint, save_checkpoint};
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    for cfg in [
        ModelConfig::tiny(),
        ModelConfig {
            causal: false,
            fusion: Fusion::Sum,
            ..ModelConfig::tiny()
        },
    ] {
        let mut params = ModelParams::init(&cfg, 21);
        params.round_to_f32();
        save_checkpoint(&path, &cfg, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
        save_checkpoint(&path, &cfg2, &params2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}
