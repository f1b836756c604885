use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smac_core::cell::MacVariant;
use smac_core::encoder::{
    encode_question, names, output_unit, position_project, project_knowledge_base, EncoderVars,
};
use smac_core::model::{model_gradient_check, MacModel, ModelConfig};
use smac_core::tensor::{central_difference, relative_error, ParamSet, Tape, Tensor};

const D: usize = 8;

fn jittered_model(seed: u64) -> MacModel<f64> {
    jittered_with_width(seed, 5)
}

fn jittered_with_width(seed: u64, d_in: usize) -> MacModel<f64> {
    let config = ModelConfig {
        variant: MacVariant::Simplified,
        d: D,
        p: 3,
        h: 2,
        w: 3,
        d_in,
        vocab: 9,
        answers: 4,
    };
    let mut model = MacModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
    }
    model
}

fn matrix(params: &ParamSet<f64>, name: &str) -> (usize, usize, Vec<f64>) {
    let t = &params.by_name(name).unwrap().tensor;
    (t.shape()[0], t.shape()[1], t.data().to_vec())
}

fn vector(params: &ParamSet<f64>, name: &str) -> Vec<f64> {
    params.by_name(name).unwrap().tensor.data().to_vec()
}

/// `W x` for row-major `W`.
fn apply(rows: usize, cols: usize, w: &[f64], x: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM over `tokens` in the given order; returns every hidden state
/// and the final `(h, c)`. Gate order is input, forget, candidate, output.
fn lstm_oracle(params: &ParamSet<f64>, dir: &str, tokens: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (vocab_rows, e, emb) = matrix(params, names::EMBEDDING);
    assert!(tokens.iter().all(|&t| t < vocab_rows));
    let (g4, _, w_ih) = matrix(params, &names::lstm(dir, "W_ih"));
    let (_, hid, w_hh) = matrix(params, &names::lstm(dir, "W_hh"));
    let b = vector(params, &names::lstm(dir, "b"));
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    let mut states = Vec::new();
    for &tok in tokens {
        let x = &emb[tok * e..(tok + 1) * e];
        let a = apply(g4, e, &w_ih, x);
        let r = apply(g4, hid, &w_hh, &h);
        let z: Vec<f64> = (0..g4).map(|k| a[k] + r[k] + b[k]).collect();
        for j in 0..hid {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hid + j]);
            let g = z[2 * hid + j].tanh();
            let o = sigmoid(z[3 * hid + j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        states.push(h.clone());
    }
    (states, h, c)
}

#[test]
fn lstm_matches_scalar_oracle() {
    let model = jittered_model(1);
    let batch = vec![vec![3, 7], vec![2, 5, 8, 4], vec![6]];
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, &model.params, 3).unwrap();
    let (cw, q) = encode_question(&mut tape, &enc, &batch).unwrap();
    assert_eq!(cw.lengths, vec![2, 4, 1]);
    let words = tape.value(cw.words).clone();
    let q = tape.value(q).clone();
    assert_eq!(words.shape(), &[3, 4, D]);
    assert_eq!(q.shape(), &[3, 2 * D]);
    let half = D / 2;
    for (b, tokens) in batch.iter().enumerate() {
        let (fwd, hf, cf) = lstm_oracle(&model.params, "fwd", tokens);
        let reversed: Vec<usize> = tokens.iter().rev().copied().collect();
        let (mut bwd, hb, cb) = lstm_oracle(&model.params, "bwd", &reversed);
        bwd.reverse();
        for s in 0..tokens.len() {
            let got = &words.data()[(b * 4 + s) * D..(b * 4 + s + 1) * D];
            let want: Vec<f64> = fwd[s].iter().chain(&bwd[s]).copied().collect();
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10, "sample {b} word {s}");
            }
        }
        let want_q: Vec<f64> = [hf, hb, cf, cb].concat();
        assert_eq!(want_q.len(), 4 * half);
        for (x, y) in q.data()[b * 2 * D..(b + 1) * 2 * D].iter().zip(&want_q) {
            assert!((x - y).abs() < 1e-10, "sample {b} q");
        }
    }
}

#[test]
fn single_token_question_and_determinism() {
    let model = jittered_model(2);
    let run = |tokens: Vec<Vec<usize>>| {
        let mut tape = Tape::new();
        let enc = EncoderVars::bind(&mut tape, &model.params, 3).unwrap();
        let (cw, q) = encode_question(&mut tape, &enc, &tokens).unwrap();
        (cw.lengths, tape.value(cw.words).clone(), tape.value(q).clone())
    };
    let (lengths, _, q) = run(vec![vec![4]]);
    assert_eq!(lengths, vec![1]);
    assert_eq!(q.shape(), &[1, 2 * D]);
    assert!(q.is_finite());
    assert_eq!(run(vec![vec![2, 3, 4]]), run(vec![vec![2, 3, 4]]));
}

#[test]
fn hidden_states_stay_inside_the_unit_interval() {
    let mut model = jittered_model(3);
    // Large embeddings saturate the gates without escaping (-1, 1).
    for x in model.params.by_name_mut(names::EMBEDDING).unwrap().tensor.data_mut() {
        *x *= 50.0;
    }
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, &model.params, 3).unwrap();
    let (cw, _) = encode_question(&mut tape, &enc, &[vec![2, 3, 4, 5, 6, 7, 8]]).unwrap();
    assert!(tape.value(cw.words).data().iter().all(|x| x.abs() <= 1.0));
}

#[test]
fn encoder_rejects_bad_tokens() {
    let model = jittered_model(4);
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, &model.params, 3).unwrap();
    assert!(encode_question(&mut tape, &enc, &[vec![]]).is_err());
    assert!(encode_question(&mut tape, &enc, &[vec![99]]).is_err());
    assert!(encode_question(&mut tape, &enc, &[]).is_err());
}

fn kb_of(model: &MacModel<f64>, grid: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, &model.params, 3).unwrap();
    let g = tape.constant(grid.clone());
    let kb = project_knowledge_base(&mut tape, &enc, g, 2, 3).unwrap();
    tape.value(kb.cells).clone()
}

fn random_grid(rng: &mut ChaCha8Rng, batch: usize, d_in: usize) -> Tensor<f64> {
    Tensor::new([batch, 6, d_in], (0..batch * 6 * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn knowledge_base_matches_per_position_oracle() {
    let model = jittered_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = random_grid(&mut rng, 2, 5);
    let out = kb_of(&model, &grid);
    let (d_in, d, w) = matrix(&model.params, names::KB_W);
    let bias = vector(&model.params, names::KB_B);
    for cell in 0..12 {
        let x = &grid.data()[cell * d_in..(cell + 1) * d_in];
        for j in 0..d {
            let want: f64 = (0..d_in).map(|i| x[i] * w[i * d + j]).sum::<f64>() + bias[j];
            assert!((out.data()[cell * d + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn knowledge_base_identity_and_zero_cases() {
    let model = jittered_model(6);
    let zero = kb_of(&model, &Tensor::zeros([1, 6, 5]));
    let bias = vector(&model.params, names::KB_B);
    for cell in zero.data().chunks(D) {
        assert_eq!(cell, bias.as_slice());
    }

    let mut model = jittered_with_width(6, D);
    model.params.assign(names::KB_W, Tensor::eye(D)).unwrap();
    model.params.assign(names::KB_B, Tensor::zeros([D])).unwrap();
    let square = random_grid(&mut ChaCha8Rng::seed_from_u64(6), 1, D);
    assert_eq!(kb_of(&model, &square), square);
}

#[test]
fn knowledge_base_commutes_with_position_permutations() {
    let model = jittered_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = random_grid(&mut rng, 1, 5);
    let perm = [4, 0, 5, 2, 1, 3];
    let mut permuted = grid.clone();
    for (to, &from) in perm.iter().enumerate() {
        permuted.data_mut()[to * 5..(to + 1) * 5].copy_from_slice(&grid.data()[from * 5..(from + 1) * 5]);
    }
    let a = kb_of(&model, &grid);
    let b = kb_of(&model, &permuted);
    for (to, &from) in perm.iter().enumerate() {
        assert_eq!(&b.data()[to * D..(to + 1) * D], &a.data()[from * D..(from + 1) * D]);
    }
}

#[test]
fn position_projection_matches_oracle() {
    let mut model = jittered_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = Tensor::new([2, 2 * D], (0..4 * D).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let project = |model: &MacModel<f64>, step: usize| {
        let mut tape = Tape::new();
        let enc = EncoderVars::bind(&mut tape, &model.params, 3).unwrap();
        let qv = tape.constant(q.clone());
        let out = position_project(&mut tape, &enc, qv, step).unwrap();
        tape.value(out).clone()
    };
    for step in 1..=3 {
        let (rows, cols, u) = matrix(&model.params, &names::pos_u(step));
        let b = vector(&model.params, &names::pos_b(step));
        let got = project(&model, step);
        for s in 0..2 {
            let want = apply(rows, cols, &u, &q.data()[s * 2 * D..(s + 1) * 2 * D]);
            for j in 0..D {
                assert!((got.data()[s * D + j] - want[j] - b[j]).abs() < 1e-12);
            }
        }
    }
    assert_ne!(project(&model, 1), project(&model, 2));

    model.params.assign(&names::pos_u(2), Tensor::zeros([D, 2 * D])).unwrap();
    let b = vector(&model.params, &names::pos_b(2));
    let got = project(&model, 2);
    assert_eq!(&got.data()[..D], b.as_slice());
    assert_eq!(&got.data()[D..], b.as_slice());

    let mut tape = Tape::new();
    let enc = EncoderVars::bind(&mut tape, &model.params, 3).unwrap();
    let qv = tape.constant(q.clone());
    assert!(position_project(&mut tape, &enc, qv, 0).is_err());
    assert!(position_project(&mut tape, &enc, qv, 4).is_err());
}

#[test]
fn output_unit_gradients_match_finite_differences() {
    let model = jittered_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let memory = Tensor::new([2, D], (0..2 * D).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let q = Tensor::new([2, 2 * D], (0..4 * D).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let loss_of = |params: &ParamSet<f64>, memory: &Tensor<f64>| {
        let mut tape = Tape::new();
        let enc = EncoderVars::bind(&mut tape, params, 3).unwrap();
        let m = tape.leaf(memory.clone());
        let qv = tape.constant(q.clone());
        let logits = output_unit(&mut tape, &enc, m, qv).unwrap();
        assert_eq!(tape.shape(logits), &[2, 4]);
        let loss = tape.cross_entropy_logits(logits, &[1, 3]).unwrap();
        (tape, m, loss)
    };
    let mut params = model.params.clone();
    params.zero_grad();
    let (tape, m, loss) = loss_of(&params, &memory);
    let grads = tape.backward(loss).unwrap();
    let grad_m = grads.wrt(m).unwrap().to_vec();
    tape.backward_into(loss, &mut params).unwrap();

    let mut flat = memory.data().to_vec();
    for idx in 0..flat.len() {
        let numeric = central_difference(&mut flat, idx, 1e-5, |x| {
            let t = Tensor::new([2, D], x.to_vec()).unwrap();
            let (tape, _, loss) = loss_of(&params, &t);
            tape.value(loss).item().unwrap()
        });
        assert!(relative_error(grad_m[idx], numeric) < 1e-6, "memory {idx}");
    }
    for name in [names::OUT_W1, names::OUT_B1, names::OUT_W2, names::OUT_B2] {
        let analytic = params.by_name(name).unwrap().tensor.grad().unwrap().to_vec();
        let mut data = params.by_name(name).unwrap().tensor.data().to_vec();
        for idx in (0..data.len()).step_by(3) {
            let numeric = central_difference(&mut data, idx, 1e-5, |x| {
                let mut probe = params.clone();
                probe.by_name_mut(name).unwrap().tensor.data_mut().copy_from_slice(x);
                let (tape, _, loss) = loss_of(&probe, &memory);
                tape.value(loss).item().unwrap()
            });
            assert!(relative_error(analytic[idx], numeric) < 1e-6, "{name}[{idx}]");
        }
    }
}

#[test]
fn full_model_gradient_check() {
    for variant in MacVariant::ALL {
        let report = model_gradient_check(variant, D, 2, 120, 17).unwrap();
        assert!(report.checked >= 120);
        assert!(report.max_rel_error < 1e-4, "{variant}: {:?}", report.worst);
    }
}
