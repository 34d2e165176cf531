//! Synthetic task generators.
//!
//! Every sample draws a latent vector; each modality renders a noisy view of a
//! strict subset of the latent coordinates and the label is a deterministic
//! function of the whole latent. [`views`] lists which coordinates each
//! modality renders.
//!
//! Shared rendering primitives (column/row bumps on 16×16 grids, IMU drift
//! ramps and fixed-phase oscillations) recur across tasks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::digest::mix_seed;
use crate::encoders::{GridPayload, ModalityKind, Payload, SeqPayload};
use crate::error::{Error, Result};
use crate::tasks::shapes::*;
use crate::tasks::{Label, TaskSpec};

use super::SensorSample;

pub const GENERATOR_VERSION: u32 = 1;

pub const GRID: usize = 16;
pub const STEPS: usize = 128;
pub const IMU_RATE_HZ: f32 = 50.0;

/// Latent coordinates rendered by each modality of `task`.
pub fn views(task: &str) -> Result<Vec<(ModalityKind, Vec<usize>)>> {
    use ModalityKind::*;
    Ok(match task {
        // latent [x, y, s]
        "gaze" => vec![(Imu, vec![2]), (Image, vec![0]), (Depth, vec![1])],
        // latent [a, b, base]
        "depth" => vec![(Imu, vec![0]), (Image, vec![0, 1]), (Gps, vec![2]), (CameraMeta, vec![2])],
        // latent [A, B]
        "gesture" => vec![(Imu, vec![1]), (Gaze, vec![0])],
        // latent [p1, p2, p3, p4]
        "pose" => vec![(Imu, vec![2, 3]), (Image, vec![0, 1])],
        // latent [A, B]
        "touch" => vec![(Image, vec![0]), (Depth, vec![1]), (Capacitance, vec![0]), (Pose, vec![1])],
        "event" => vec![(Imu, vec![1]), (Audio, vec![0]), (Thermal, vec![0])],
        "activity" => vec![(Imu, vec![0]), (Image, vec![1]), (Video, vec![1]), (Pose, vec![0])],
        // latent [s, hx, hy, hz]
        "recon3d" => vec![(Image, vec![0, 1]), (Depth, vec![3]), (Capacitance, vec![1, 2]), (Lidar, vec![1, 2, 3])],
        other => return Err(Error::Config(format!("no generator for task {other:?}"))),
    })
}

/// Latent length of `task`.
pub fn latent_dim(task: &str) -> Result<usize> {
    Ok(match task {
        "gaze" | "depth" => 3,
        "gesture" | "touch" | "event" | "activity" => 2,
        "pose" | "recon3d" => 4,
        other => return Err(Error::Config(format!("no generator for task {other:?}"))),
    })
}

/// Sizes of the discrete factors of classification latents.
pub fn factor_sizes(task: &str) -> Option<(usize, usize)> {
    match task {
        "gesture" => Some((3, 2)),
        "touch" => Some((7, 2)),
        "event" => Some((4, 2)),
        "activity" => Some((3, 2)),
        _ => None,
    }
}

/// Class id of a factor pair.
pub fn class_of(task: &str, a: usize, b: usize) -> usize {
    match task {
        "gesture" if a == 2 => 4,
        _ => a * 2 + b,
    }
}

/// Label implied by a latent.
pub fn label_from_latent(task: &str, z: &[f32]) -> Result<Label> {
    if z.len() != latent_dim(task)? {
        return Err(Error::Data(format!("latent of length {} for task {task}", z.len())));
    }
    Ok(match task {
        "gaze" => Label::Values(vec![z[0], z[1]]),
        "depth" => {
            let mut v = Vec::with_capacity(DEPTH_GRID * DEPTH_GRID);
            for r in 0..DEPTH_GRID {
                for c in 0..DEPTH_GRID {
                    v.push(z[2] + DEPTH_SLOPE_MM * (z[0] * unit(c) + z[1] * unit(r)));
                }
            }
            Label::Values(v)
        }
        "pose" => {
            let (rest, basis) = (pose_rest(), pose_basis());
            Label::Values(
                (0..rest.len())
                    .map(|i| rest[i] + (0..POSE_PARAMS).map(|k| basis[i * POSE_PARAMS + k] * z[k]).sum::<f32>())
                    .collect(),
            )
        }
        "recon3d" => Label::Values(
            hand_template()
                .chunks(3)
                .flat_map(|j| [j[0] * z[0] + z[1], j[1] * z[0] + z[2], j[2] * z[0] + z[3]])
                .collect(),
        ),
        _ => Label::Class(class_of(task, z[0] as usize, z[1] as usize)),
    })
}

/// Grid coordinate mapped to `[-1, 1]`.
fn unit(i: usize) -> f32 {
    (i as f32 - 7.5) / 7.5
}

struct Render {
    rng: ChaCha8Rng,
    noise: f32,
}

impl Render {
    fn gauss(&mut self, std: f32) -> f32 {
        if std <= 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std).expect("finite std").sample(&mut self.rng)
    }

    fn add_noise(&mut self, v: &mut [f32], std: f32) {
        let s = std * self.noise;
        for x in v {
            *x += self.gauss(s);
        }
    }

    fn grid(&mut self, channels: usize, fill: impl Fn(usize, usize, usize) -> f32, std: f32, units: &str) -> Payload {
        let mut values = Vec::with_capacity(GRID * GRID * channels);
        for r in 0..GRID {
            for c in 0..GRID {
                for ch in 0..channels {
                    values.push(fill(r, c, ch));
                }
            }
        }
        self.add_noise(&mut values, std);
        Payload::Grid(GridPayload {
            height: GRID,
            width: GRID,
            channels,
            values,
            units: units.into(),
        })
    }

    fn seq(&mut self, channels: usize, rate: f32, fill: impl Fn(usize, usize) -> f32, std: f32) -> Payload {
        self.seq_len(STEPS, channels, rate, fill, std)
    }

    fn seq_len(&mut self, steps: usize, channels: usize, rate: f32, fill: impl Fn(usize, usize) -> f32, std: f32) -> Payload {
        let mut values = Vec::with_capacity(steps * channels);
        for t in 0..steps {
            for ch in 0..channels {
                values.push(fill(t, ch));
            }
        }
        self.add_noise(&mut values, std);
        Payload::Seq(SeqPayload {
            steps,
            channels,
            sample_rate_hz: rate,
            values,
        })
    }
}

fn bump(pos: f32, center: f32, sigma: f32) -> f32 {
    (-(pos - center).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Maps `v ∈ [lo, hi]` to a grid coordinate in `[2, 13]`.
fn to_cell(v: f32, lo: f32, hi: f32) -> f32 {
    2.0 + 11.0 * (v - lo) / (hi - lo)
}

/// Nine IMU channels: accelerometer drift ramps, gyroscope oscillation with a
/// fixed phase, orientation offsets.
#[derive(Clone, Copy, Default)]
struct ImuSignal {
    drift: [f32; 3],
    osc_hz: f32,
    osc_amp: f32,
    orient: [f32; 3],
}

impl ImuSignal {
    fn value(&self, t: usize, ch: usize) -> f32 {
        let ramp = t as f32 / STEPS as f32;
        let time = t as f32 / IMU_RATE_HZ;
        match ch {
            0..=2 => self.drift[ch] * ramp,
            3..=5 => {
                let phase = ch as f32 - 3.0;
                self.osc_amp * (std::f32::consts::TAU * self.osc_hz * time + phase).sin()
            }
            _ => self.orient[ch - 6],
        }
    }
}

fn sample_factors(rng: &mut ChaCha8Rng, task: &str) -> (usize, usize) {
    let (na, nb) = factor_sizes(task).expect("classification task");
    (rng.random_range(0..na), rng.random_range(0..nb))
}

/// Draws the latent and renders every modality of `task`.
fn render(task: &str, r: &mut Render) -> Result<(Vec<f32>, BTreeMap<ModalityKind, Payload>)> {
    use ModalityKind::*;
    let mut out = BTreeMap::new();
    let latent: Vec<f32>;
    match task {
        "gaze" => {
            let x = r.rng.random_range(0.0..SCREEN_W);
            let y = r.rng.random_range(0.0..SCREEN_H);
            let s = x / SCREEN_W + y / SCREEN_H - 1.0;
            let cx = to_cell(x, 0.0, SCREEN_W);
            let cy = to_cell(y, 0.0, SCREEN_H);
            out.insert(Image, r.grid(1, |_, c, _| bump(c as f32, cx, 1.5), 0.05, "normalized"));
            out.insert(Depth, r.grid(1, |row, _, _| 0.6 + 0.4 * bump(row as f32, cy, 1.5), 0.02, "m"));
            let nuisance = r.rng.random_range(0.5..2.0);
            let imu = ImuSignal {
                drift: [s, 0.5 * s, 0.0],
                osc_hz: nuisance,
                osc_amp: 0.2,
                orient: [0.0, 0.0, 1.0],
            };
            out.insert(Imu, r.seq(9, IMU_RATE_HZ, |t, ch| imu.value(t, ch), 0.1));
            latent = vec![x, y, s];
        }
        "depth" => {
            let a = r.rng.random_range(-1.0..1.0f32);
            let b = r.rng.random_range(-1.0..1.0f32);
            let base = r.rng.random_range(DEPTH_BASE_MM.0..DEPTH_BASE_MM.1);
            let bn = (base - 1200.0) / 400.0;
            out.insert(
                Image,
                r.grid(1, |row, c, _| 0.5 + 0.25 * (a * unit(c) + b * unit(row)), 0.05, "normalized"),
            );
            let walk = [r.rng.random_range(-0.2..0.2f32), r.rng.random_range(-0.2..0.2f32)];
            out.insert(
                Gps,
                r.seq(3, 1.0, |t, ch| if ch == 2 { bn } else { walk[ch] * t as f32 / STEPS as f32 }, 0.05),
            );
            let imu = ImuSignal {
                drift: [r.rng.random_range(-0.3..0.3), 0.0, 0.0],
                orient: [a, 0.0, 1.0],
                ..Default::default()
            };
            out.insert(Imu, r.seq(9, IMU_RATE_HZ, |t, ch| imu.value(t, ch), 0.1));
            let meta: Vec<f32> = (0..8)
                .map(|i| match i {
                    0 => bn,
                    1 => 1.0,
                    _ => 0.0,
                })
                .collect();
            let jitter: Vec<f32> = (0..8).map(|_| r.rng.random_range(-0.1..0.1)).collect();
            out.insert(CameraMeta, r.seq_len(1, 8, 1.0, |_, ch| meta[ch] + jitter[ch], 0.05));
            latent = vec![a, b, base];
        }
        "gesture" => {
            let (a, b) = sample_factors(&mut r.rng, task);
            let path = |t: usize, ch: usize| {
                let u = t as f32 / STEPS as f32;
                match (a, ch) {
                    (0, 0) => 0.0,
                    (0, _) => 2.0 * u - 1.0,
                    (1, 0) => 2.0 * u - 1.0,
                    (1, _) => 0.0,
                    (_, 0) => (std::f32::consts::TAU * u).cos(),
                    (_, _) => (std::f32::consts::TAU * u).sin(),
                }
            };
            out.insert(Gaze, r.seq(2, 30.0, path, 0.1));
            let imu = ImuSignal {
                osc_hz: 2.0,
                osc_amp: if b == 0 { 0.2 } else { 1.0 },
                orient: [0.0, 0.0, 1.0],
                ..Default::default()
            };
            out.insert(Imu, r.seq(9, IMU_RATE_HZ, |t, ch| imu.value(t, ch), 0.1));
            latent = vec![a as f32, b as f32];
        }
        "pose" => {
            let p: Vec<f32> = (0..POSE_PARAMS).map(|_| r.rng.random_range(-1.0..1.0)).collect();
            let (cx, cy) = (to_cell(p[0], -1.0, 1.0), to_cell(p[1], -1.0, 1.0));
            out.insert(
                Image,
                r.grid(
                    1,
                    |row, c, _| 0.5 * bump(c as f32, cx, 1.5) + 0.5 * bump(row as f32, cy, 1.5),
                    0.05,
                    "normalized",
                ),
            );
            let imu = ImuSignal {
                drift: [p[2], p[3], 0.0],
                osc_hz: 1.0,
                osc_amp: 0.2,
                orient: [0.0, 0.0, 1.0],
            };
            out.insert(Imu, r.seq(9, IMU_RATE_HZ, |t, ch| imu.value(t, ch), 0.1));
            latent = p;
        }
        "touch" => {
            let (a, b) = sample_factors(&mut r.rng, task);
            let col = 2.0 + 11.0 * a as f32 / 6.0;
            let row = if a % 2 == 0 { 5.0 } else { 10.0 };
            out.insert(
                Image,
                r.grid(
                    1,
                    |y, x, _| bump(x as f32, col, 1.5) * bump(y as f32, row, 2.5),
                    0.05,
                    "normalized",
                ),
            );
            out.insert(
                Capacitance,
                r.grid(
                    1,
                    |y, x, _| bump(x as f32, col, 1.0) * bump(y as f32, row, 1.0),
                    0.05,
                    "normalized drop",
                ),
            );
            let h = if b == 0 { 0.3 } else { 0.5 };
            out.insert(Depth, r.grid(1, |_, _, _| h, 0.03, "m"));
            let flex = if b == 0 { 1.0 } else { -0.5 };
            out.insert(Pose, r.seq(12, 30.0, |_, ch| if ch % 3 == 0 { flex } else { 0.0 }, 0.2));
            latent = vec![a as f32, b as f32];
        }
        "event" => {
            let (a, b) = sample_factors(&mut r.rng, task);
            let band = 2.0 + 3.6 * a as f32;
            let period = 2 + a;
            out.insert(
                Audio,
                r.grid(
                    1,
                    |f, t, _| {
                        let spike = if t % period == 0 { 1.0 } else { 0.4 };
                        spike * bump(f as f32, band, 1.0)
                    },
                    0.05,
                    "log power",
                ),
            );
            let warm = 0.2 * a as f32;
            out.insert(
                Thermal,
                r.grid(1, |y, x, _| warm * bump(x as f32, 8.0, 3.0) * bump(y as f32, 8.0, 3.0), 0.1, "degC rel"),
            );
            let imu = ImuSignal {
                osc_hz: if b == 0 { 1.0 } else { 4.0 },
                osc_amp: 0.6,
                orient: [0.0, 0.0, 1.0],
                ..Default::default()
            };
            out.insert(Imu, r.seq(9, IMU_RATE_HZ, |t, ch| imu.value(t, ch), 0.1));
            latent = vec![a as f32, b as f32];
        }
        "activity" => {
            let (a, b) = sample_factors(&mut r.rng, task);
            let (hz, amp) = [(2.0, 0.5), (4.0, 1.0), (0.5, 0.05)][a];
            let imu = ImuSignal {
                osc_hz: hz,
                osc_amp: amp,
                orient: [0.0, 0.0, 1.0],
                ..Default::default()
            };
            out.insert(Imu, r.seq(9, IMU_RATE_HZ, |t, ch| imu.value(t, ch), 0.1));
            out.insert(
                Pose,
                r.seq(
                    12,
                    30.0,
                    |t, ch| amp * (std::f32::consts::TAU * hz * t as f32 / 30.0 + ch as f32).sin(),
                    0.1,
                ),
            );
            let col = if b == 0 { 4.0 } else { 11.0 };
            out.insert(Image, r.grid(1, |_, c, _| bump(c as f32, col, 2.0), 0.05, "normalized"));
            out.insert(
                Video,
                r.grid(4, |_, c, f| bump(c as f32, col + f as f32 * 0.5, 2.0), 0.15, "normalized"),
            );
            latent = vec![a as f32, b as f32];
        }
        "recon3d" => {
            let s = r.rng.random_range(HAND_SCALE.0..HAND_SCALE.1);
            let hx = r.rng.random_range(-HAND_SHIFT_MM..HAND_SHIFT_MM);
            let hy = r.rng.random_range(-HAND_SHIFT_MM..HAND_SHIFT_MM);
            let hz = r.rng.random_range(HAND_HEIGHT_MM.0..HAND_HEIGHT_MM.1);
            let cx = to_cell(hx, -HAND_SHIFT_MM, HAND_SHIFT_MM);
            let cy = to_cell(hy, -HAND_SHIFT_MM, HAND_SHIFT_MM);
            out.insert(
                Capacitance,
                r.grid(
                    1,
                    |y, x, _| bump(x as f32, cx, 1.2) * bump(y as f32, cy, 1.2),
                    0.05,
                    "normalized drop",
                ),
            );
            out.insert(Depth, r.grid(1, |_, _, _| hz / 100.0, 0.02, "m"));
            out.insert(
                Image,
                r.grid(1, |_, c, _| (s - 0.5) * bump(c as f32, cx, 1.5), 0.05, "normalized"),
            );
            let centre = [hx / HAND_SHIFT_MM, hy / HAND_SHIFT_MM, (hz - 50.0) / 30.0];
            out.insert(Lidar, r.seq(3, 10.0, |_, ch| centre[ch], 0.5));
            latent = vec![s, hx, hy, hz];
        }
        other => return Err(Error::Config(format!("no generator for task {other:?}"))),
    }
    Ok((latent, out))
}

/// `n` samples of `spec`; sample `i` depends only on `(seed, task, i)`.
pub fn gen_task_data(spec: &TaskSpec, n: usize, seed: u64, noise_scale: f32) -> Result<Vec<SensorSample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Config(format!("noise scale {noise_scale} must be finite and non-negative")));
    }
    (0..n)
        .map(|i| {
            let s = mix_seed(mix_seed(seed, spec.id as u64 + 1), i as u64);
            let mut r = Render {
                rng: ChaCha8Rng::seed_from_u64(s),
                noise: noise_scale,
            };
            let (latent, payloads) = render(&spec.name, &mut r)?;
            let label = label_from_latent(&spec.name, &latent)?;
            spec.check_label(&label)?;
            Ok(SensorSample {
                sample_id: i as u64,
                task_id: spec.id,
                task: spec.name.clone(),
                payloads,
                label,
                latent: Some(latent),
            })
        })
        .collect()
}
