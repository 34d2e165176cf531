//! Gradient checks over every differentiable op and the full merged-model loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{merged_forward, MergedModel};
use crate::autodiff::{Graph, ReduceKind, Tensor};
use crate::dataset::gen_task_data;
use crate::digest::mix_seed;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, Coords, GradCheckReport};
use crate::lm::{build_frozen_lm, LMConfig, LmPreset, StubPretrain, BOS};
use crate::tasks::{registry_default, task_loss};

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

type Input = (Vec<usize>, Vec<f64>);

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum with fixed random weights, so every output coordinate carries
/// its own gradient.
fn project(g: &mut Graph<f64>, t: Tensor, seed: u64) -> Result<Tensor> {
    let shape = g.shape(t).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, w) = random(&mut rng, &shape);
    let w = g.tensor(&shape, w)?;
    let p = g.mul(t, w)?;
    Ok(g.sum(p))
}

fn check<F>(f: F, inputs: &[Input]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    finite_diff_check(f, inputs, STEP, TOL, Coords::All)
}

/// One report per differentiable op.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = mix_seed(seed, 1);
    let a34 = random(&mut rng, &[3, 4]);
    let b34 = random(&mut rng, &[3, 4]);
    let b45 = random(&mut rng, &[4, 5]);
    let row = random(&mut rng, &[4]);
    let a33 = random(&mut rng, &[3, 3]);
    let ln_g = random(&mut rng, &[4]);
    let ln_b = random(&mut rng, &[4]);
    // keep relu inputs away from the kink
    let mut relu_in = random(&mut rng, &[3, 4]);
    for v in relu_in.1.iter_mut() {
        *v += 0.1 * v.signum();
    }

    let mut out = Vec::new();
    let mut push = |name: &str, r: GradCheckReport| out.push((name.to_string(), r));
    push(
        "matmul",
        check(|g, x| { let y = g.matmul(x[0], x[1])?; project(g, y, s) }, &[a34.clone(), b45])?,
    );
    push("transpose", check(|g, x| { let y = g.transpose(x[0])?; project(g, y, s) }, &[a34.clone()])?);
    push("add", check(|g, x| { let y = g.add(x[0], x[1])?; project(g, y, s) }, &[a34.clone(), b34.clone()])?);
    push("sub", check(|g, x| { let y = g.sub(x[0], x[1])?; project(g, y, s) }, &[a34.clone(), b34.clone()])?);
    push("mul", check(|g, x| { let y = g.mul(x[0], x[1])?; project(g, y, s) }, &[a34.clone(), b34.clone()])?);
    push(
        "mul_broadcast",
        check(|g, x| { let y = g.mul(x[0], x[1])?; project(g, y, s) }, &[a34.clone(), row.clone()])?,
    );
    push("relu", check(|g, x| { let y = g.relu(x[0]); project(g, y, s) }, &[relu_in])?);
    push("gelu", check(|g, x| { let y = g.gelu(x[0]); project(g, y, s) }, &[a34.clone()])?);
    push("tanh", check(|g, x| { let y = g.tanh(x[0]); project(g, y, s) }, &[a34.clone()])?);
    push("exp", check(|g, x| { let y = g.exp(x[0]); project(g, y, s) }, &[a34.clone()])?);
    push("scale", check(|g, x| { let y = g.scale(x[0], -1.7); project(g, y, s) }, &[a34.clone()])?);
    for axis in 0..2 {
        push(
            &format!("softmax_axis{axis}"),
            check(|g, x| { let y = g.softmax(x[0], axis)?; project(g, y, s) }, &[a34.clone()])?,
        );
    }
    push(
        "causal_softmax",
        check(|g, x| { let y = g.causal_softmax(x[0])?; project(g, y, s) }, &[a33])?,
    );
    push(
        "layer_norm",
        check(
            |g, x| { let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?; project(g, y, s) },
            &[a34.clone(), ln_g, ln_b],
        )?,
    );
    push(
        "concat_rows",
        check(|g, x| { let y = g.concat_rows(&[x[0], x[1]])?; project(g, y, s) }, &[a34.clone(), b34.clone()])?,
    );
    push(
        "concat_cols",
        check(|g, x| { let y = g.concat_cols(&[x[0], x[1]])?; project(g, y, s) }, &[a34.clone(), b34.clone()])?,
    );
    push("slice_rows", check(|g, x| { let y = g.slice_rows(x[0], 1, 2)?; project(g, y, s) }, &[a34.clone()])?);
    push("slice_cols", check(|g, x| { let y = g.slice_cols(x[0], 1, 2)?; project(g, y, s) }, &[a34.clone()])?);
    push(
        "gather_rows",
        check(|g, x| { let y = g.gather_rows(x[0], &[2, 0, 2, 1])?; project(g, y, s) }, &[a34.clone()])?,
    );
    for kind in [ReduceKind::Sum, ReduceKind::Mean] {
        for axis in [None, Some(0), Some(1)] {
            push(
                &format!("reduce_{kind:?}_{axis:?}").to_lowercase(),
                check(|g, x| { let y = g.reduce(x[0], kind, axis)?; project(g, y, s) }, &[a34.clone()])?,
            );
        }
    }
    push("reshape", check(|g, x| { let y = g.reshape(x[0], &[2, 6])?; project(g, y, s) }, &[a34.clone()])?);
    push(
        "cross_entropy",
        check(|g, x| g.cross_entropy(x[0], &[3, 99, 0], 99), &[a34])?,
    );
    Ok(out)
}

/// Checks the task loss of a tiny merged model on two random samples against
/// every trainable parameter, sampling `per_param` coordinates of each. The
/// model is moved off its zero-initialised gates first so every path carries
/// gradient.
pub fn model_gradcheck(seed: u64, per_param: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let mut lm = LMConfig::preset(LmPreset::Tiny);
    lm.d_model = 16;
    lm.heads = 2;
    lm.layers = 2;
    let mut cfg = crate::adapter::ModelConfig::new(lm);
    cfg.encoder.d_enc = 8;
    cfg.adapter.hidden = 8;
    cfg.adapter.prefix_len = 4;
    let reg = registry_default();
    let lm_params = build_frozen_lm(&cfg.lm, None, StubPretrain::default(), seed)?;
    let mut model = MergedModel::new(cfg, reg.clone(), lm_params, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let paths: Vec<String> = model.params.trainable_paths().map(String::from).collect();
    for p in &paths {
        for v in model.params.get_mut(p)?.data.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let mut out = Vec::new();
    for (i, spec) in [&reg[0], &reg[2]].into_iter().enumerate() {
        let sample = gen_task_data(spec, 1, mix_seed(seed, 10 + i as u64), 1.0)?.remove(0);
        // only paths the sample reaches
        let mut g = Graph::<f64>::new();
        merged_forward(&mut g, &model, &sample.payloads, &spec.name, Some(&[BOS, 72, 105]))?;
        let used: Vec<&String> = paths.iter().filter(|p| g.named(p).is_some()).collect();
        let inputs: Vec<Input> = used
            .iter()
            .map(|p| {
                let prm = model.params.get(p).expect("trainable path");
                (prm.shape.clone(), prm.data.iter().map(|&v| v as f64).collect())
            })
            .collect();
        let rep = finite_diff_check(
            |g, x| {
                for (p, &t) in used.iter().zip(x) {
                    g.insert_named(p.as_str(), t);
                }
                let o = merged_forward(g, &model, &sample.payloads, &spec.name, Some(&[BOS, 72, 105]))?;
                let head = task_loss(g, spec, o.head_out, &sample.label)?;
                let logits = o.logits.expect("text present");
                let text = g.cross_entropy(logits, &[72, 105, 33], usize::MAX)?;
                g.add(head, text)
            },
            &inputs,
            STEP,
            TOL,
            Coords::Sample {
                per_input: per_param,
                seed: mix_seed(seed, 3),
            },
        )?;
        out.push((format!("merged_model_{}", spec.name), rep));
    }
    Ok(out)
}
