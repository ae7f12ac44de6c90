use aec_core::gradcheck::grad_check_many;
use aec_core::nn::{
    conv_block, depthwise_padding, lstm_step, multi_head_attention, AttentionParams,
    AttentionScale, BlockGeometry, ConvBlockParams, LstmParams, LstmState, NormParams,
};
use aec_core::{NormKind, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64, bound: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, bound, &mut rng)
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(rand_tensor(tape.shape(y), seed ^ 0xabc, 1.0));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn block_params(e: usize, h: usize, s: usize, k: usize, seed: u64) -> Vec<Tensor> {
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
    shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| rand_tensor(sh, seed * 31 + i as u64, 0.8))
        .collect()
}

fn as_block(v: &[Var]) -> ConvBlockParams<Var> {
    ConvBlockParams {
        in_w: v[0],
        in_b: v[1],
        in_alpha: v[2],
        in_norm: NormParams {
            gain: v[3],
            bias: v[4],
        },
        dw_w: v[5],
        dw_b: v[6],
        dw_alpha: v[7],
        dw_norm: NormParams {
            gain: v[8],
            bias: v[9],
        },
        res_w: v[10],
        res_b: v[11],
        skip_w: v[12],
        skip_b: v[13],
    }
}

#[test]
fn conv_block_gradients() {
    let (e, h, s, k, t) = (3, 4, 2, 3, 9);
    for seed in 0..6u64 {
        let causal = seed % 2 == 0;
        let geo = BlockGeometry::new(k, 1 + (seed as usize % 3), causal);
        let mut inputs = vec![rand_tensor(&[e, t], seed + 1000, 1.0)];
        inputs.extend(block_params(e, h, s, k, seed));
        let report = grad_check_many(
            |tape, v| {
                let (res, skip) = conv_block(tape, v[0], &as_block(&v[1..]), geo)?;
                let a = project(tape, res, seed)?;
                let b = project(tape, skip, seed + 1)?;
                tape.add(a, b)
            },
            &inputs,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn depthwise_padding_preserves_length() {
    assert_eq!(depthwise_padding(3, 4, true), (8, 0));
    assert_eq!(depthwise_padding(3, 4, false), (4, 4));
    assert_eq!(depthwise_padding(2, 3, false), (2, 1));
    let (e, h, s) = (3, 4, 2);
    for causal in [true, false] {
        for dilation in [1, 2, 8] {
            let mut tape = Tape::new();
            let x = tape.constant(rand_tensor(&[e, 20], 1, 1.0));
            let p: Vec<Var> = block_params(e, h, s, 3, 2)
                .into_iter()
                .map(|t| tape.constant(t))
                .collect();
            let (res, skip) = conv_block(
                &mut tape,
                x,
                &as_block(&p),
                BlockGeometry::new(3, dilation, causal),
            )
            .unwrap();
            assert_eq!(tape.shape(res), &[e, 20]);
            assert_eq!(tape.shape(skip), &[s, 20]);
        }
    }
}

#[test]
fn causal_block_output_ignores_later_frames() {
    let (e, h, s) = (3, 4, 2);
    let x0 = rand_tensor(&[e, 16], 5, 1.0);
    let run = |x: Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let p: Vec<Var> = block_params(e, h, s, 3, 6)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let (res, _) =
            conv_block(&mut tape, x, &as_block(&p), BlockGeometry::new(3, 2, true)).unwrap();
        tape.value(res).clone()
    };
    let base = run(x0.clone());
    let mut x1 = x0.clone();
    for c in 0..e {
        x1.data_mut()[c * 16 + 10] += 1.0;
    }
    let moved = run(x1);
    for c in 0..e {
        for t in 0..10 {
            assert_eq!(base.at2(c, t), moved.at2(c, t));
        }
    }
}

/// LSTM equations written out per element.
fn lstm_oracle(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    wi: &Tensor,
    wh: &Tensor,
    b: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let s = h.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let gate = |col: usize| -> f64 {
        let mut acc = b.data()[col];
        for (r, &xv) in x.iter().enumerate() {
            acc += xv * wi.at2(r, col);
        }
        for (r, &hv) in h.iter().enumerate() {
            acc += hv * wh.at2(r, col);
        }
        acc
    };
    let mut h_new = vec![0.0; s];
    let mut c_new = vec![0.0; s];
    for j in 0..s {
        let i = sig(gate(j));
        let f = sig(gate(s + j));
        let g = gate(2 * s + j).tanh();
        let o = sig(gate(3 * s + j));
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

#[test]
fn lstm_matches_oracle_and_gradients() {
    let (s_in, s) = (3, 4);
    for seed in 0..5u64 {
        let inputs = vec![
            rand_tensor(&[1, s_in], seed, 1.0),
            rand_tensor(&[1, s], seed + 1, 1.0),
            rand_tensor(&[1, s], seed + 2, 1.0),
            rand_tensor(&[s_in, 4 * s], seed + 3, 0.7),
            rand_tensor(&[s, 4 * s], seed + 4, 0.7),
            rand_tensor(&[1, 4 * s], seed + 5, 0.7),
        ];
        let step = |tape: &mut Tape, v: &[Var]| {
            let p = LstmParams {
                w_input: v[3],
                w_hidden: v[4],
                bias: v[5],
            };
            lstm_step(
                tape,
                v[0],
                LstmState {
                    hidden: v[1],
                    cell: v[2],
                },
                &p,
            )
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = step(&mut tape, &vars).unwrap();
        let (h, c) = lstm_oracle(
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            &inputs[3],
            &inputs[4],
            &inputs[5],
        );
        for j in 0..s {
            assert!((tape.value(out.hidden).data()[j] - h[j]).abs() < 1e-12);
            assert!((tape.value(out.cell).data()[j] - c[j]).abs() < 1e-12);
        }
        // two chained steps so the recurrent path is exercised
        let report = grad_check_many(
            |tape, v| {
                let first = step(tape, v)?;
                let mut next: Vec<Var> = v.to_vec();
                next[1] = first.hidden;
                next[2] = first.cell;
                let second = step(tape, &next)?;
                let a = project(tape, second.hidden, seed)?;
                let b = project(tape, second.cell, seed + 9)?;
                tape.add(a, b)
            },
            &inputs,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
    }
}

fn attention_inputs(s: usize, f: usize, j: usize, seed: u64) -> Vec<Tensor> {
    vec![
        rand_tensor(&[1, s], seed, 1.0),
        rand_tensor(&[j, s], seed + 1, 1.0),
        rand_tensor(&[s, f], seed + 2, 0.8),
        rand_tensor(&[s, f], seed + 3, 0.8),
        rand_tensor(&[s, f], seed + 4, 0.8),
        rand_tensor(&[f, s], seed + 5, 0.8),
    ]
}

fn attention(
    tape: &mut Tape,
    v: &[Var],
    heads: usize,
    scale: AttentionScale,
) -> Result<(Var, Var)> {
    let p = AttentionParams {
        w_query: v[2],
        w_key: v[3],
        w_value: v[4],
        w_out: v[5],
    };
    multi_head_attention(tape, v[0], v[1], &p, heads, scale)
}

/// Per-head scaled dot-product attention with explicit loops.
fn attention_oracle(inp: &[Tensor], heads: usize, divisor: f64) -> (Vec<f64>, Vec<f64>) {
    let (q0, feats, wq, wk, wv, wo) = (&inp[0], &inp[1], &inp[2], &inp[3], &inp[4], &inp[5]);
    let (j, s) = (feats.shape()[0], feats.shape()[1]);
    let f = wq.shape()[1];
    let proj = |row: &[f64], w: &Tensor| -> Vec<f64> {
        (0..f)
            .map(|c| (0..s).map(|r| row[r] * w.at2(r, c)).sum())
            .collect()
    };
    let q = proj(q0.data(), wq);
    let ks: Vec<Vec<f64>> = (0..j)
        .map(|r| proj(&feats.data()[r * s..(r + 1) * s], wk))
        .collect();
    let vs: Vec<Vec<f64>> = (0..j)
        .map(|r| proj(&feats.data()[r * s..(r + 1) * s], wv))
        .collect();
    let width = f / heads;
    let mut weights = vec![0.0; heads * j];
    let mut mixed = vec![0.0; f];
    for h in 0..heads {
        let cols = h * width..(h + 1) * width;
        let scores: Vec<f64> = (0..j)
            .map(|r| cols.clone().map(|c| q[c] * ks[r][c]).sum::<f64>() / divisor)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
        for r in 0..j {
            weights[h * j + r] = (scores[r] - m).exp() / z;
            for c in cols.clone() {
                mixed[c] += weights[h * j + r] * vs[r][c];
            }
        }
    }
    let context = (0..s)
        .map(|o| (0..f).map(|c| mixed[c] * wo.at2(c, o)).sum())
        .collect();
    (context, weights)
}

#[test]
fn attention_matches_oracle_and_gradients() {
    let (s, f, j) = (6, 8, 5);
    for seed in 0..6u64 {
        let heads = [1, 2, 4][seed as usize % 3];
        let scale = if seed < 3 {
            AttentionScale::KeyDim
        } else {
            AttentionScale::HeadDim
        };
        let inputs = attention_inputs(s, f, j, seed * 10);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let (ctx, w) = attention(&mut tape, &vars, heads, scale).unwrap();
        let (ctx_o, w_o) = attention_oracle(&inputs, heads, scale.divisor(s, f, heads));
        for (a, b) in tape.value(ctx).data().iter().zip(&ctx_o) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(w).data().iter().zip(&w_o) {
            assert!((a - b).abs() < 1e-12);
        }
        let report = grad_check_many(
            |tape, v| {
                let (ctx, w) = attention(tape, v, heads, scale)?;
                let a = project(tape, ctx, seed)?;
                let b = project(tape, w, seed + 1)?;
                tape.add(a, b)
            },
            &inputs,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn attention_parameter_count_is_independent_of_heads() {
    let (s, f, j) = (6, 8, 5);
    let inputs = attention_inputs(s, f, j, 3);
    let params: usize = inputs[2..].iter().map(Tensor::numel).sum();
    assert_eq!(params, 3 * s * f + f * s);
    for heads in [1, 2, 4, 8] {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let (ctx, w) = attention(&mut tape, &vars, heads, AttentionScale::KeyDim).unwrap();
        assert_eq!(tape.shape(ctx), &[1, s]);
        assert_eq!(tape.shape(w), &[heads, j]);
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    assert!(attention(&mut tape, &vars, 3, AttentionScale::KeyDim).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_weights_are_distributions(seed in any::<u64>(), heads_pow in 0u32..4, j in 1usize..12, magnitude in 0.1f64..20.0) {
        let heads = 1 << heads_pow;
        let (s, f) = (5, 8);
        let mut inputs = attention_inputs(s, f, j, seed);
        inputs[0].data_mut().iter_mut().for_each(|v| *v *= magnitude);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let (_, w) = attention(&mut tape, &vars, heads, AttentionScale::KeyDim).unwrap();
        for row in tape.value(w).data().chunks(j) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cumulative_norm_prefix_is_stable(seed in any::<u64>(), t in 2usize..20, cut in 1usize..20) {
        // extending the input on the right never changes earlier frames
        let cut = cut.min(t - 1);
        let x = rand_tensor(&[3, t], seed, 2.0);
        let g = rand_tensor(&[3], seed + 1, 1.0);
        let b = rand_tensor(&[3], seed + 2, 1.0);
        let mut tape = Tape::new();
        let (vx, vg, vb) = (tape.constant(x.clone()), tape.constant(g), tape.constant(b));
        let full = tape.norm(vx, vg, vb, NormKind::Cumulative).unwrap();
        let prefix = tape.slice_cols(vx, 0, cut).unwrap();
        let short = tape.norm(prefix, vg, vb, NormKind::Cumulative).unwrap();
        for c in 0..3 {
            for f in 0..cut {
                prop_assert_eq!(tape.value(full).at2(c, f), tape.value(short).at2(c, f));
            }
        }
    }
}
