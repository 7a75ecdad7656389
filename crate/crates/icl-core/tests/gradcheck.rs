//! Full-model gradient check: every transformer parameter's tape gradient
//! against central finite differences on the query-prediction MSE loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icl_core::tape::Tape;
use icl_core::tasks::{sample_episode, sample_task, TaskSpec};
use icl_core::tensor::Tensor;
use icl_core::transformer::{
    encode_context, forward_batch, init_model, stage_params, ModelConfig, Prompt,
    TransformerModel,
};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn loss_of(model: &TransformerModel, prompt: &Prompt, target: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars = stage_params(&mut tape, model, false);
    let preds = forward_batch(
        &mut tape,
        &vars,
        &model.config,
        std::slice::from_ref(prompt),
        None,
    )
    .unwrap();
    let t = tape
        .constant(Tensor::new(vec![1, target.len()], target.to_vec()).unwrap());
    let loss = tape.mse_loss(preds, t).unwrap();
    tape.value(loss).data[0]
}

/// Perturb every weight a little so no gradient is structurally zero (the
/// readout initializes to zero, which would make the check vacuous).
fn jitter(model: &mut TransformerModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.for_each_param_mut(|_, t| {
        for v in &mut t.data {
            *v += rng.gen_range(-0.05..0.05);
        }
    });
}

#[test]
fn transformer_gradients_match_central_finite_differences() {
    let started = std::time::Instant::now();
    let config = ModelConfig {
        depth: 1,
        width: 8,
        heads: 2,
        ffn_multiplier: 2,
        max_context_pairs: 3,
        d_x: 3,
        d_y: 1,
        positional: true,
        seed: 2024,
    };
    let mut model = init_model(&config).unwrap();
    jitter(&mut model, 7);

    let spec = TaskSpec::linear(3, 0.0);
    let task = sample_task(&spec, 5).unwrap();
    let ep = sample_episode(&task, 2, 11);
    let prompt = encode_context(&config, &ep.xs, &ep.ys, &ep.query).unwrap();

    // tape gradients
    let mut tape = Tape::new();
    let vars = stage_params(&mut tape, &model, true);
    let preds = forward_batch(&mut tape, &vars, &config, std::slice::from_ref(&prompt), None).unwrap();
    let t = tape.constant(Tensor::new(vec![1, 1], ep.target.clone()).unwrap());
    let loss = tape.mse_loss(preds, t).unwrap();
    tape.backward(loss).unwrap();

    let mut var_list = Vec::new();
    var_list.push(("w_in", vars.w_in));
    var_list.push(("b_in", vars.b_in));
    if let Some(p) = vars.pos {
        var_list.push(("pos", p));
    }
    for (i, l) in vars.layers.iter().enumerate() {
        let _ = i;
        var_list.extend_from_slice(&[
            ("ln1_gain", l.ln1_gain),
            ("ln1_bias", l.ln1_bias),
            ("w_q", l.w_q),
            ("w_k", l.w_k),
            ("w_v", l.w_v),
            ("w_o", l.w_o),
            ("ln2_gain", l.ln2_gain),
            ("ln2_bias", l.ln2_bias),
            ("w_ff1", l.w_ff1),
            ("b_ff1", l.b_ff1),
            ("w_ff2", l.w_ff2),
            ("b_ff2", l.b_ff2),
        ]);
    }
    var_list.push(("ln_f_gain", vars.ln_f_gain));
    var_list.push(("ln_f_bias", vars.ln_f_bias));
    var_list.push(("w_out", vars.w_out));
    var_list.push(("b_out", vars.b_out));

    let mut tape_grads: Vec<(&str, Vec<f64>)> = Vec::new();
    for (name, v) in &var_list {
        tape_grads.push((name, tape.grad(*v).expect("param grad").to_vec()));
    }

    // central finite differences, parameter by parameter
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut idx = 0usize;
    let mut failures = Vec::new();
    let grads = tape_grads.clone();
    let base = model.clone();
    base.for_each_param(|_, t| {
        let (name, g) = &grads[idx];
        assert_eq!(g.len(), t.numel());
        for j in 0..t.numel() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let mut slot = 0;
            plus.for_each_param_mut(|_, pt| {
                if slot == idx {
                    pt.data[j] += FD_STEP;
                }
                slot += 1;
            });
            slot = 0;
            minus.for_each_param_mut(|_, pt| {
                if slot == idx {
                    pt.data[j] -= FD_STEP;
                }
                slot += 1;
            });
            let fd = (loss_of(&plus, &prompt, &ep.target) - loss_of(&minus, &prompt, &ep.target))
                / (2.0 * FD_STEP);
            let got = g[j];
            let rel = (fd - got).abs() / fd.abs().max(got.abs()).max(1e-4);
            max_rel = max_rel.max(rel);
            if rel >= REL_TOL {
                failures.push(format!("{name}[{j}]: fd {fd} vs tape {got} (rel {rel:.2e})"));
            }
            checked += 1;
        }
        idx += 1;
    });

    assert!(
        failures.is_empty(),
        "{} of {checked} gradients failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
    let elapsed = started.elapsed();
    println!(
        "gradcheck: {checked} parameters, max relative error {max_rel:.3e}, {:.2}s",
        elapsed.as_secs_f64()
    );
    assert!(elapsed.as_secs() < 60, "gradcheck exceeded a minute");
}
