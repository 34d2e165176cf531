//! Task registry, task heads and per-task losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor};
use crate::encoders::ModalityKind;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::layers::linear;
use crate::nn::{Param, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regression { dim: usize },
    Classification { classes: usize },
    GridRegression { height: usize, width: usize },
}

impl HeadKind {
    pub fn out_dim(self) -> usize {
        match self {
            HeadKind::Regression { dim } => dim,
            HeadKind::Classification { classes } => classes,
            HeadKind::GridRegression { height, width } => height * width,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, HeadKind::Classification { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Mean Euclidean distance over consecutive `group`-sized chunks.
    MeanEuclidean { group: usize },
    Mae,
    Accuracy,
    BalancedAccuracy,
    EventF1 { threshold: f32, other: usize },
    Epe,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MeanEuclidean { .. } => "mean_euclidean",
            MetricKind::Mae => "mae",
            MetricKind::Accuracy => "accuracy",
            MetricKind::BalancedAccuracy => "balanced_accuracy",
            MetricKind::EventF1 { .. } => "event_f1",
            MetricKind::Epe => "epe",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(
            self,
            MetricKind::Accuracy | MetricKind::BalancedAccuracy | MetricKind::EventF1 { .. }
        )
    }

    /// Lower-is-better view of a metric value.
    pub fn error(self, value: f64) -> f64 {
        if self.higher_is_better() {
            1.0 - value
        } else {
            value
        }
    }
}

/// Supervision target of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Values(Vec<f32>),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub modalities: Vec<ModalityKind>,
    pub head: HeadKind,
    pub loss: LossKind,
    pub metric: MetricKind,
    pub units: String,
    pub class_names: Vec<String>,
    /// Regression heads predict `(label - offset) / scale`; `offset` has one
    /// entry per output.
    pub label_offset: Vec<f32>,
    pub label_scale: f32,
}

impl TaskSpec {
    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config(format!("task {} has no modalities", self.name)));
        }
        let ok = match (self.head, self.metric) {
            (HeadKind::Classification { classes }, m) => {
                matches!(
                    m,
                    MetricKind::Accuracy | MetricKind::BalancedAccuracy | MetricKind::EventF1 { .. }
                ) && self.loss == LossKind::CrossEntropy
                    && self.class_names.len() == classes
                    && match m {
                        MetricKind::EventF1 { other, .. } => other < classes,
                        _ => true,
                    }
            }
            (h, m) => {
                let dim = h.out_dim();
                self.loss == LossKind::Mse
                    && self.label_offset.len() == dim
                    && self.label_scale > 0.0
                    && match m {
                        MetricKind::MeanEuclidean { group } => group > 0 && dim % group == 0,
                        MetricKind::Epe => dim % 3 == 0,
                        MetricKind::Mae => true,
                        _ => false,
                    }
            }
        };
        if !ok {
            return Err(Error::Config(format!("task {} has an inconsistent head/loss/metric", self.name)));
        }
        Ok(())
    }

    pub fn normalize(&self, values: &[f32]) -> Vec<f32> {
        values
            .iter()
            .zip(&self.label_offset)
            .map(|(v, o)| (v - o) / self.label_scale)
            .collect()
    }

    pub fn denormalize(&self, values: &[f32]) -> Vec<f32> {
        values
            .iter()
            .zip(&self.label_offset)
            .map(|(v, o)| v * self.label_scale + o)
            .collect()
    }

    pub fn check_label(&self, label: &Label) -> Result<()> {
        match (self.head, label) {
            (HeadKind::Classification { classes }, Label::Class(c)) if *c < classes => Ok(()),
            (h, Label::Values(v)) if !h.is_classification() && v.len() == h.out_dim() => Ok(()),
            _ => Err(Error::Data(format!("label {label:?} does not fit task {}", self.name))),
        }
    }

    pub fn head_path(&self) -> String {
        format!("task.{}.head", self.name)
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub mod shapes {
    //! Label geometry shared by the registry and the generators.

    /// Screen size in centimetres.
    pub const SCREEN_W: f32 = 12.8;
    pub const SCREEN_H: f32 = 6.4;
    pub const DEPTH_GRID: usize = 16;
    pub const DEPTH_BASE_MM: (f32, f32) = (800.0, 1600.0);
    pub const DEPTH_SLOPE_MM: f32 = 300.0;
    pub const POSE_JOINTS: usize = 24;
    pub const POSE_PARAMS: usize = 4;
    pub const HAND_JOINTS: usize = 21;
    pub const HAND_SCALE: (f32, f32) = (0.8, 1.2);
    pub const HAND_SHIFT_MM: f32 = 40.0;
    pub const HAND_HEIGHT_MM: (f32, f32) = (20.0, 80.0);

    /// Rest pose, degrees.
    pub fn pose_rest() -> Vec<f32> {
        (0..POSE_JOINTS * 3).map(|i| 20.0 * ((i as f32) * 0.7).sin()).collect()
    }

    /// Row-major `72 × 4` basis, degrees per unit parameter.
    pub fn pose_basis() -> Vec<f32> {
        let n = POSE_JOINTS * 3;
        let mut b = vec![0.0; n * POSE_PARAMS];
        for i in 0..n {
            for k in 0..POSE_PARAMS {
                b[i * POSE_PARAMS + k] = 30.0 * (((i + 1) * (k + 2)) as f32 * 0.37).cos();
            }
        }
        b
    }

    /// 21 hand joints at unit scale, millimetres, row-major `(x, y, z)`.
    pub fn hand_template() -> Vec<f32> {
        let mut t = vec![0.0, 0.0, 0.0];
        for finger in 0..5 {
            let angle = -0.8 + 0.4 * finger as f32;
            for seg in 1..=4 {
                let r = 20.0 + 15.0 * seg as f32;
                t.extend_from_slice(&[r * angle.sin(), r * angle.cos(), 4.0 * seg as f32]);
            }
        }
        t
    }
}

/// The eight tasks, sorted by name; ids follow that order.
pub fn registry_default() -> Vec<TaskSpec> {
    use shapes::*;
    use ModalityKind::*;
    let reg = |name: &str, modalities: Vec<ModalityKind>, head, metric, units: &str| TaskSpec {
        id: 0,
        name: name.into(),
        modalities,
        head,
        loss: if matches!(head, HeadKind::Classification { .. }) {
            LossKind::CrossEntropy
        } else {
            LossKind::Mse
        },
        metric,
        units: units.into(),
        class_names: Vec::new(),
        label_offset: Vec::new(),
        label_scale: 1.0,
    };

    let mut gaze = reg(
        "gaze",
        vec![Imu, Image, Depth],
        HeadKind::Regression { dim: 2 },
        MetricKind::MeanEuclidean { group: 2 },
        "cm",
    );
    gaze.label_offset = vec![SCREEN_W / 2.0, SCREEN_H / 2.0];
    gaze.label_scale = 3.0;

    let mut depth = reg(
        "depth",
        vec![Imu, Image, Gps, CameraMeta],
        HeadKind::GridRegression {
            height: DEPTH_GRID,
            width: DEPTH_GRID,
        },
        MetricKind::Mae,
        "mm",
    );
    depth.label_offset = vec![(DEPTH_BASE_MM.0 + DEPTH_BASE_MM.1) / 2.0; DEPTH_GRID * DEPTH_GRID];
    depth.label_scale = 300.0;

    let mut gesture = reg(
        "gesture",
        vec![Imu, Gaze],
        HeadKind::Classification { classes: 5 },
        MetricKind::Accuracy,
        "fraction",
    );
    gesture.class_names = names(&["swipe_up", "swipe_down", "push", "pull", "wave"]);

    let mut pose = reg(
        "pose",
        vec![Imu, Image],
        HeadKind::Regression { dim: POSE_JOINTS * 3 },
        MetricKind::MeanEuclidean { group: 3 },
        "deg (angle triplets as points)",
    );
    pose.label_offset = pose_rest();
    pose.label_scale = 30.0;

    let mut touch = reg(
        "touch",
        vec![Image, Depth, Capacitance, Pose],
        HeadKind::Classification { classes: 14 },
        MetricKind::Accuracy,
        "fraction",
    );
    let fingers = ["thumb", "index", "middle", "ring", "pinky", "palm", "knuckle"];
    touch.class_names = fingers
        .iter()
        .flat_map(|f| [format!("{f}_press"), format!("{f}_hover")])
        .collect();

    let mut event = reg(
        "event",
        vec![Imu, Audio, Thermal],
        HeadKind::Classification { classes: 8 },
        MetricKind::EventF1 {
            threshold: 0.5,
            other: 7,
        },
        "macro_f1",
    );
    event.class_names = names(&[
        "door_knock",
        "door_slam",
        "faucet_run",
        "faucet_drip",
        "blender_pulse",
        "blender_run",
        "kettle_boil",
        "other",
    ]);

    let mut activity = reg(
        "activity",
        vec![Imu, Image, Video, Pose],
        HeadKind::Classification { classes: 6 },
        MetricKind::BalancedAccuracy,
        "balanced_fraction",
    );
    activity.class_names = names(&[
        "walk_indoor",
        "walk_outdoor",
        "run_indoor",
        "run_outdoor",
        "sit_indoor",
        "sit_outdoor",
    ]);

    let mut recon = reg(
        "recon3d",
        vec![Image, Depth, Capacitance, Lidar],
        HeadKind::Regression { dim: HAND_JOINTS * 3 },
        MetricKind::Epe,
        "mm",
    );
    let mid_h = (HAND_HEIGHT_MM.0 + HAND_HEIGHT_MM.1) / 2.0;
    recon.label_offset = hand_template()
        .chunks(3)
        .flat_map(|j| [j[0], j[1], j[2] + mid_h])
        .collect();
    recon.label_scale = 40.0;

    let mut all = vec![activity, depth, event, gaze, gesture, pose, recon, touch];
    all.sort_by(|a, b| a.name.cmp(&b.name));
    for (i, t) in all.iter_mut().enumerate() {
        t.id = i;
    }
    all
}

pub fn find_task<'a>(registry: &'a [TaskSpec], name: &str) -> Result<&'a TaskSpec> {
    registry
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Config(format!("unknown task {name:?}")))
}

/// Zero-initialised linear head `d_in → out_dim` under `task.<name>.head`.
pub fn init_head(params: &mut ParamSet, spec: &TaskSpec, d_in: usize) -> Result<()> {
    params.insert(format!("{}.w", spec.head_path()), Param::zeros(&[d_in, spec.out_dim()]))?;
    params.insert(format!("{}.b", spec.head_path()), Param::zeros(&[spec.out_dim()]))
}

/// Linear map of `readout` (`1 × d`) to `1 × out_dim`; logits for classification.
pub fn head_apply<T: Real>(g: &mut Graph<T>, params: &ParamSet, spec: &TaskSpec, readout: Tensor) -> Result<Tensor> {
    if !params.contains(&format!("{}.w", spec.head_path())) {
        return Err(Error::Config(format!("no head registered for task {}", spec.name)));
    }
    linear(g, params, &spec.head_path(), readout)
}

/// MSE on normalised targets for regression heads, cross-entropy otherwise.
pub fn task_loss<T: Real>(g: &mut Graph<T>, spec: &TaskSpec, head_out: Tensor, label: &Label) -> Result<Tensor> {
    spec.check_label(label)?;
    if g.shape(head_out) != [1, spec.out_dim()] {
        return Err(Error::Shape(format!(
            "head output {:?} for task {} with {} outputs",
            g.shape(head_out),
            spec.name,
            spec.out_dim()
        )));
    }
    match label {
        Label::Class(c) => g.cross_entropy(head_out, &[*c], usize::MAX),
        Label::Values(v) => {
            let target = g.tensor_f32(&[1, v.len()], &spec.normalize(v), false)?;
            crate::nn::mse_loss(g, head_out, target)
        }
    }
}

/// Native-unit prediction from one row of head output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Values(Vec<f32>),
    Class { id: usize, probs: Vec<f32> },
}

pub fn decode_head(spec: &TaskSpec, head_row: &[f32]) -> Prediction {
    if spec.head.is_classification() {
        let m = head_row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = head_row.iter().map(|&v| ((v - m) as f64).exp()).collect();
        let z: f64 = e.iter().sum();
        let probs: Vec<f32> = e.iter().map(|&v| (v / z) as f32).collect();
        Prediction::Class {
            id: crate::lm::argmax(head_row),
            probs,
        }
    } else {
        Prediction::Values(spec.denormalize(head_row))
    }
}

/// Metric of `preds` against `labels` in native units.
pub fn compute_metric(spec: &TaskSpec, preds: &[Prediction], labels: &[Label]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels on task {}",
            preds.len(),
            labels.len(),
            spec.name
        )));
    }
    let classes = || -> Result<(Vec<usize>, Vec<usize>, Vec<Vec<f32>>)> {
        let mut p = Vec::new();
        let mut t = Vec::new();
        let mut probs = Vec::new();
        for (pr, l) in preds.iter().zip(labels) {
            match (pr, l) {
                (Prediction::Class { id, probs: pb }, Label::Class(c)) => {
                    p.push(*id);
                    t.push(*c);
                    probs.push(pb.clone());
                }
                _ => return Err(Error::Data(format!("non-class prediction for task {}", spec.name))),
            }
        }
        Ok((p, t, probs))
    };
    let values = || -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for (pr, l) in preds.iter().zip(labels) {
            match (pr, l) {
                (Prediction::Values(a), Label::Values(b)) => {
                    p.push(a.clone());
                    t.push(b.clone());
                }
                _ => return Err(Error::Data(format!("non-value prediction for task {}", spec.name))),
            }
        }
        Ok((p, t))
    };
    match spec.metric {
        MetricKind::MeanEuclidean { group } => {
            let (p, t) = values()?;
            metrics::mean_euclidean(&p, &t, group)
        }
        MetricKind::Mae => {
            let (p, t) = values()?;
            metrics::mae(&p, &t)
        }
        MetricKind::Epe => {
            let (p, t) = values()?;
            metrics::epe(&p, &t)
        }
        MetricKind::Accuracy => {
            let (p, t, _) = classes()?;
            metrics::accuracy(&p, &t)
        }
        MetricKind::BalancedAccuracy => {
            let (p, t, _) = classes()?;
            metrics::balanced_accuracy(&p, &t, spec.out_dim())
        }
        MetricKind::EventF1 { threshold, other } => {
            let (_, t, probs) = classes()?;
            metrics::event_f1(&probs, &t, threshold, other)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, Coords};
    use std::collections::BTreeSet;

    #[test]
    fn registry_shape() {
        let reg = registry_default();
        assert_eq!(reg.len(), 8);
        let names: Vec<&str> = reg.iter().map(|t| t.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        for (i, t) in reg.iter().enumerate() {
            assert_eq!(t.id, i);
            t.validate().unwrap();
            let mut m = t.modalities.clone();
            m.sort();
            assert_eq!(m, t.modalities, "{} modalities not canonical", t.name);
        }
        assert_eq!(registry_default(), reg);
        let dims: Vec<(String, usize)> = reg.iter().map(|t| (t.name.clone(), t.out_dim())).collect();
        assert!(dims.contains(&("pose".into(), 72)));
        assert!(dims.contains(&("touch".into(), 14)));
        assert!(dims.contains(&("recon3d".into(), 63)));
        assert!(dims.contains(&("depth".into(), 256)));
    }

    #[test]
    fn every_modality_is_covered() {
        let seen: BTreeSet<ModalityKind> = registry_default().iter().flat_map(|t| t.modalities.clone()).collect();
        for k in ModalityKind::ALL {
            assert!(seen.contains(&k), "{k} unused");
        }
    }

    #[test]
    fn normalisation_round_trips() {
        let reg = registry_default();
        let gaze = find_task(&reg, "gaze").unwrap();
        let v = vec![1.5, 6.0];
        let back = gaze.denormalize(&gaze.normalize(&v));
        assert!(v.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-5));
        assert!(find_task(&reg, "nope").is_err());
    }

    #[test]
    fn losses() {
        let reg = registry_default();
        let gaze = find_task(&reg, "gaze").unwrap();
        let mut g = Graph::<f32>::new();
        let target = Label::Values(vec![3.0, 2.0]);
        let norm = gaze.normalize(&[3.0, 2.0]);
        let out = g.tensor_f32(&[1, 2], &norm, false).unwrap();
        let l = task_loss(&mut g, gaze, out, &target).unwrap();
        assert_eq!(g.item(l), 0.0);
        let gesture = find_task(&reg, "gesture").unwrap();
        let z = g.zeros(&[1, 5]);
        let l = task_loss(&mut g, gesture, z, &Label::Class(3)).unwrap();
        assert!((g.item(l) - 5f32.ln()).abs() < 1e-6);
        assert!(task_loss(&mut g, gesture, z, &Label::Class(5)).is_err());
        assert!(task_loss(&mut g, gesture, z, &Label::Values(vec![0.0])).is_err());
    }

    #[test]
    fn head_examples_and_gradient() {
        let reg = registry_default();
        let gesture = find_task(&reg, "gesture").unwrap().clone();
        let mut ps = ParamSet::new();
        init_head(&mut ps, &gesture, 4).unwrap();
        ps.get_mut("task.gesture.head.b").unwrap().data = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let mut g = Graph::<f32>::new();
        let z = g.zeros(&[1, 4]);
        let y = head_apply(&mut g, &ps, &gesture, z).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let pose = find_task(&reg, "pose").unwrap();
        assert!(head_apply(&mut g, &ps, pose, z).is_err());

        let rep = finite_diff_check(
            |g, x| {
                g.insert_named("task.gesture.head.w", x[0]);
                g.insert_named("task.gesture.head.b", x[1]);
                let r = g.tensor(&[1, 4], vec![0.3, -0.7, 1.1, 0.2])?;
                let y = head_apply(g, &ps, &gesture, r)?;
                task_loss(g, &gesture, y, &Label::Class(2))
            },
            &[
                (vec![4, 5], (0..20).map(|i| (i as f64 * 0.41).sin()).collect()),
                (vec![5], vec![0.1, -0.2, 0.3, 0.0, 0.5]),
            ],
            1e-3,
            1e-3,
            Coords::All,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn decoded_predictions_feed_metrics() {
        let reg = registry_default();
        let gesture = find_task(&reg, "gesture").unwrap();
        let p = decode_head(gesture, &[0.0, 3.0, 1.0, 0.0, 0.0]);
        match &p {
            Prediction::Class { id, probs } => {
                assert_eq!(*id, 1);
                assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
            _ => panic!(),
        }
        assert_eq!(compute_metric(gesture, &[p], &[Label::Class(1)]).unwrap(), 1.0);
        let gaze = find_task(&reg, "gaze").unwrap();
        let p = decode_head(gaze, &gaze.normalize(&[3.0, 4.0]));
        let v = compute_metric(gaze, &[p], &[Label::Values(vec![0.0, 0.0])]).unwrap();
        assert!((v - 5.0).abs() < 1e-5);
        assert!(MetricKind::Accuracy.higher_is_better());
        assert_eq!(MetricKind::Accuracy.error(0.75), 0.25);
    }
}
