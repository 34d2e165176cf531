//! Gated late fusion of per-modality token blocks.
//!
//! Each block is mean pooled and scored by a shared linear gate plus a
//! task-specific per-modality bias. A softmax over the present modalities gives
//! one weight per block; blocks are scaled by their weight and concatenated on
//! the token axis in canonical order.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ReduceKind, Real, Tensor};
use crate::encoders::ModalityKind;
use crate::error::{Error, Result};
use crate::nn::{Param, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    LateGated,
    Early,
    ModelInternal,
}

impl FusionKind {
    pub fn ensure_supported(self) -> Result<()> {
        match self {
            FusionKind::LateGated => Ok(()),
            other => Err(Error::Config(format!("fusion variant {other:?} is not implemented"))),
        }
    }
}

pub const GATE_W: &str = "fuse.gate.w";
pub const GATE_B: &str = "fuse.gate.b";

pub fn task_gate_bias_path(task: &str) -> String {
    format!("task.{task}.gate_bias")
}

/// Shared gate parameters, zero initialised.
pub fn init_fusion(params: &mut ParamSet, d_enc: usize) -> Result<()> {
    params.insert(GATE_W, Param::zeros(&[d_enc, 1]))?;
    params.insert(GATE_B, Param::zeros(&[1]))
}

/// Task-specific per-modality gate bias, zero initialised.
pub fn init_task_gate(params: &mut ParamSet, task: &str) -> Result<()> {
    params.insert(task_gate_bias_path(task), Param::zeros(&[ModalityKind::ALL.len(), 1]))
}

/// Softmax weights `[1 × m]` over the `m` present blocks.
pub fn gate_weights<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    task: &str,
    blocks: &[(ModalityKind, Tensor)],
    temperature: f32,
) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(Error::Contract("gate needs at least one modality block".into()));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("gate temperature {temperature} must be positive")));
    }
    let mut pooled = Vec::with_capacity(blocks.len());
    for &(_, b) in blocks {
        let d = g.shape(b)[1];
        let m = g.reduce(b, ReduceKind::Mean, Some(0))?;
        pooled.push(g.reshape(m, &[1, d])?);
    }
    let pooled = g.concat_rows(&pooled)?;
    let w = params.bind(g, GATE_W)?;
    let b = params.bind(g, GATE_B)?;
    let scores = g.matmul(pooled, w)?;
    let scores = g.add(scores, b)?;
    let table = params.bind(g, &task_gate_bias_path(task))?;
    let ids: Vec<usize> = blocks.iter().map(|(k, _)| k.index()).collect();
    let bias = g.gather_rows(table, &ids)?;
    let logits = g.add(scores, bias)?;
    let logits = g.reshape(logits, &[1, blocks.len()])?;
    let logits = if temperature == 1.0 {
        logits
    } else {
        g.scale(logits, T::of(1.0 / temperature as f64))
    };
    g.softmax(logits, 1)
}

/// Scales each block by its weight and concatenates on the token axis.
pub fn late_fuse<T: Real>(g: &mut Graph<T>, blocks: &[(ModalityKind, Tensor)], weights: Tensor) -> Result<Tensor> {
    if g.shape(weights) != [1, blocks.len()] {
        return Err(Error::Shape(format!(
            "{} blocks but weights {:?}",
            blocks.len(),
            g.shape(weights)
        )));
    }
    if blocks.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Contract("blocks must be in canonical modality order".into()));
    }
    let mut scaled = Vec::with_capacity(blocks.len());
    for (i, &(_, b)) in blocks.iter().enumerate() {
        let wi = g.slice_cols(weights, i, 1)?;
        scaled.push(g.mul(b, wi)?);
    }
    g.concat_rows(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, Coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(task: &str, d: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_fusion(&mut ps, d).unwrap();
        init_task_gate(&mut ps, task).unwrap();
        ps
    }

    fn block(g: &mut Graph<f32>, rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.tensor_f32(&[rows, d], &v, false).unwrap()
    }

    #[test]
    fn gate_examples() {
        let ps = setup("t", 4);
        let mut g = Graph::<f32>::new();
        let a = block(&mut g, 2, 4, 1);
        let w = gate_weights(&mut g, &ps, "t", &[(ModalityKind::Imu, a)], 1.0).unwrap();
        assert_eq!(g.data(w), &[1.0]);
        let b = block(&mut g, 3, 4, 2);
        let w = gate_weights(&mut g, &ps, "t", &[(ModalityKind::Imu, a), (ModalityKind::Depth, b)], 1.0).unwrap();
        assert_eq!(g.data(w), &[0.5, 0.5]);
        assert!(matches!(gate_weights(&mut g, &ps, "t", &[], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn weights_sum_to_one_and_renormalise() {
        let mut ps = setup("t", 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in [GATE_W, &task_gate_bias_path("t")] {
            ps.get_mut(p).unwrap().data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        }
        let mut g = Graph::<f32>::new();
        let kinds = [ModalityKind::Imu, ModalityKind::Image, ModalityKind::Pose];
        let blocks: Vec<_> = kinds.iter().enumerate().map(|(i, &k)| (k, block(&mut g, 2, 4, i as u64))).collect();
        let w = gate_weights(&mut g, &ps, "t", &blocks, 1.0).unwrap();
        let s: f64 = g.data(w).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        let w2 = gate_weights(&mut g, &ps, "t", &blocks[..2], 1.0).unwrap();
        let s2: f64 = g.data(w2).iter().map(|&v| v as f64).sum();
        assert!((s2 - 1.0).abs() < 1e-6);
        // removing a modality keeps the relative weights of the rest
        let (a, b) = (g.data(w)[0] / g.data(w)[1], g.data(w2)[0] / g.data(w2)[1]);
        assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::<f32>::new();
        let a = block(&mut g, 2, 3, 1);
        let one = g.tensor_f32(&[1, 1], &[1.0], false).unwrap();
        let f = late_fuse(&mut g, &[(ModalityKind::Imu, a)], one).unwrap();
        assert_eq!(g.data(f), g.data(a));

        let b = block(&mut g, 3, 3, 2);
        let w = g.tensor_f32(&[1, 2], &[0.0, 1.0], false).unwrap();
        let f = late_fuse(&mut g, &[(ModalityKind::Imu, a), (ModalityKind::Audio, b)], w).unwrap();
        assert_eq!(g.shape(f), &[5, 3]);
        assert!(g.data(f)[..6].iter().all(|&v| v == 0.0));
        assert_eq!(&g.data(f)[6..], g.data(b));
        assert!(late_fuse(&mut g, &[(ModalityKind::Imu, a)], w).is_err());
        assert!(late_fuse(&mut g, &[(ModalityKind::Audio, b), (ModalityKind::Imu, a)], w).is_err());
    }

    #[test]
    fn symmetric_gate_is_equivariant_to_swapping_payloads() {
        let ps = setup("t", 4);
        let run = |swap: bool| {
            let mut g = Graph::<f32>::new();
            let (x, y) = (block(&mut g, 2, 4, 7), block(&mut g, 2, 4, 8));
            let (p, q) = if swap { (y, x) } else { (x, y) };
            let blocks = [(ModalityKind::Imu, p), (ModalityKind::Gaze, q)];
            let w = gate_weights(&mut g, &ps, "t", &blocks, 1.0).unwrap();
            let f = late_fuse(&mut g, &blocks, w).unwrap();
            g.data(f).to_vec()
        };
        let (a, b) = (run(false), run(true));
        assert_eq!(&a[..8], &b[8..]);
        assert_eq!(&a[8..], &b[..8]);
    }

    #[test]
    fn gradient_through_gate_and_fusion() {
        let ps = setup("t", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rv = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let inputs = vec![
            (vec![3, 1], rv(3)),
            (vec![12, 1], rv(12)),
            (vec![2, 3], rv(6)),
            (vec![2, 3], rv(6)),
        ];
        let rep = finite_diff_check(
            |g, x| {
                g.insert_named(GATE_W, x[0]);
                g.insert_named(task_gate_bias_path("t"), x[1]);
                let blocks = [(ModalityKind::Imu, x[2]), (ModalityKind::Depth, x[3])];
                let w = gate_weights(g, &ps, "t", &blocks, 0.7)?;
                let f = late_fuse(g, &blocks, w)?;
                let c = g.tensor(&[4, 3], (0..12).map(|i| (i as f64 * 0.9).cos()).collect())?;
                let p = g.mul(f, c)?;
                Ok(g.sum(p))
            },
            &inputs,
            1e-3,
            1e-3,
            Coords::All,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn only_late_gated_is_supported() {
        assert!(FusionKind::LateGated.ensure_supported().is_ok());
        assert!(FusionKind::Early.ensure_supported().is_err());
    }
}
