//! Per-modality encoders mapping raw payloads to `tokens × d` blocks.
//!
//! Grids are cut into square patches, sequences into sliding windows; either
//! front end is followed by a linear projection and a learned per-modality
//! embedding with one row per token slot.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::nn::layers::{init_linear, linear, INIT_STD};
use crate::nn::{Param, ParamSet};

/// The twelve sensor kinds. Declaration order is the canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityKind {
    Imu,
    Audio,
    Image,
    Depth,
    Capacitance,
    Thermal,
    Video,
    Gaze,
    Pose,
    Gps,
    Lidar,
    CameraMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Grid,
    Sequence,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 12] = [
        ModalityKind::Imu,
        ModalityKind::Audio,
        ModalityKind::Image,
        ModalityKind::Depth,
        ModalityKind::Capacitance,
        ModalityKind::Thermal,
        ModalityKind::Video,
        ModalityKind::Gaze,
        ModalityKind::Pose,
        ModalityKind::Gps,
        ModalityKind::Lidar,
        ModalityKind::CameraMeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Imu => "imu",
            ModalityKind::Audio => "audio",
            ModalityKind::Image => "image",
            ModalityKind::Depth => "depth",
            ModalityKind::Capacitance => "capacitance",
            ModalityKind::Thermal => "thermal",
            ModalityKind::Video => "video",
            ModalityKind::Gaze => "gaze",
            ModalityKind::Pose => "pose",
            ModalityKind::Gps => "gps",
            ModalityKind::Lidar => "lidar",
            ModalityKind::CameraMeta => "camera_meta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn family(self) -> Family {
        use ModalityKind::*;
        match self {
            Image | Depth | Capacitance | Thermal | Audio | Video => Family::Grid,
            Imu | Gaze | Pose | Gps | Lidar | CameraMeta => Family::Sequence,
        }
    }

    /// Channel count every payload of this kind carries.
    pub fn channels(self) -> usize {
        use ModalityKind::*;
        match self {
            Imu => 9,
            Video => 4,
            Audio | Image | Depth | Capacitance | Thermal => 1,
            Gaze => 2,
            Pose => 12,
            Gps | Lidar => 3,
            CameraMeta => 8,
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `height × width × channels`.
    pub values: Vec<f32>,
    pub units: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqPayload {
    pub steps: usize,
    pub channels: usize,
    pub sample_rate_hz: f32,
    /// Row-major `steps × channels`.
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Grid(GridPayload),
    Seq(SeqPayload),
}

impl Payload {
    pub fn values(&self) -> &[f32] {
        match self {
            Payload::Grid(p) => &p.values,
            Payload::Seq(p) => &p.values,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Payload::Grid(p) => vec![p.height, p.width, p.channels],
            Payload::Seq(p) => vec![p.steps, p.channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, want) = match self {
            Payload::Grid(p) => (p.values.len(), p.height * p.width * p.channels),
            Payload::Seq(p) => {
                if p.steps == 0 {
                    return Err(Error::Data("sequence payload has no steps".into()));
                }
                (p.values.len(), p.steps * p.channels)
            }
        };
        if n != want {
            return Err(Error::Data(format!("payload has {n} values, shape needs {want}")));
        }
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("payload contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_enc: usize,
    pub patch: usize,
    pub window: usize,
    pub stride: usize,
    /// Tokens per modality after truncation or zero padding.
    pub cap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_enc: 64,
            patch: 8,
            window: 32,
            stride: 32,
            cap: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.patch == 0 || self.window == 0 || self.stride == 0 || self.cap == 0 {
            return Err(Error::Config(format!("degenerate encoder config {self:?}")));
        }
        Ok(())
    }

    /// Width of one front-end row for `kind`.
    pub fn input_width(&self, kind: ModalityKind) -> usize {
        match kind.family() {
            Family::Grid => self.patch * self.patch * kind.channels(),
            Family::Sequence => self.window * kind.channels(),
        }
    }
}

/// Non-overlapping `patch × patch` tiles in row-major tile order, each
/// flattened as `(row, col, channel)`. The grid is zero padded to a multiple of
/// `patch`. Returns `(rows, width, values)`.
pub fn patchify_grid(p: &GridPayload, patch: usize) -> Result<(usize, usize, Vec<f32>)> {
    Payload::Grid(p.clone()).validate()?;
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (ph, pw) = (p.height.div_ceil(patch), p.width.div_ceil(patch));
    let c = p.channels;
    let dim = patch * patch * c;
    let mut out = vec![0.0; ph * pw * dim];
    for ty in 0..ph {
        for tx in 0..pw {
            let base = (ty * pw + tx) * dim;
            for dy in 0..patch {
                let y = ty * patch + dy;
                if y >= p.height {
                    continue;
                }
                for dx in 0..patch {
                    let x = tx * patch + dx;
                    if x >= p.width {
                        continue;
                    }
                    for ch in 0..c {
                        out[base + (dy * patch + dx) * c + ch] = p.values[(y * p.width + x) * c + ch];
                    }
                }
            }
        }
    }
    Ok((ph * pw, dim, out))
}

/// Sliding windows of `window` steps every `stride` steps, each flattened as
/// `(step, channel)`. The last partial window is zero padded and at least one
/// window is produced. Returns `(rows, width, values)`.
pub fn window_sequence(p: &SeqPayload, window: usize, stride: usize) -> Result<(usize, usize, Vec<f32>)> {
    Payload::Seq(p.clone()).validate()?;
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    let c = p.channels;
    let n = if p.steps <= window {
        1
    } else {
        (p.steps - window).div_ceil(stride) + 1
    };
    let dim = window * c;
    let mut out = vec![0.0; n * dim];
    for w in 0..n {
        let start = w * stride;
        for s in 0..window {
            let t = start + s;
            if t >= p.steps {
                break;
            }
            out[w * dim + s * c..w * dim + (s + 1) * c].copy_from_slice(&p.values[t * c..(t + 1) * c]);
        }
    }
    Ok((n, dim, out))
}

fn proj_path(kind: ModalityKind) -> String {
    format!("enc.{}.proj", kind.name())
}

fn type_path(kind: ModalityKind) -> String {
    format!("enc.{}.type", kind.name())
}

/// Registers projection and type embedding for each kind under `enc.`.
pub fn init_encoders<R: Rng>(
    params: &mut ParamSet,
    cfg: &EncoderConfig,
    kinds: &[ModalityKind],
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for &k in kinds {
        init_linear(params, &proj_path(k), cfg.input_width(k), cfg.d_enc, false, rng)?;
        params.insert(type_path(k), Param::normal(&[cfg.cap, cfg.d_enc], INIT_STD, rng))?;
    }
    Ok(())
}

/// Front end, projection to `d_enc`, type embedding per slot, then exactly
/// `cap` rows (extra tokens truncated, missing ones zero).
pub fn encode_modality<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    cfg: &EncoderConfig,
    kind: ModalityKind,
    payload: &Payload,
) -> Result<Tensor> {
    let (n, dim, values) = match (kind.family(), payload) {
        (Family::Grid, Payload::Grid(p)) => patchify_grid(p, cfg.patch)?,
        (Family::Sequence, Payload::Seq(p)) => window_sequence(p, cfg.window, cfg.stride)?,
        _ => return Err(Error::Config(format!("{kind} payload does not match its encoder family"))),
    };
    if dim != cfg.input_width(kind) {
        return Err(Error::Config(format!(
            "{kind} payload has {} channels, encoder expects {}",
            payload.shape().last().copied().unwrap_or(0),
            kind.channels()
        )));
    }
    let keep = n.min(cfg.cap);
    let x = g.tensor_f32(&[keep, dim], &values[..keep * dim], false)?;
    let h = linear(g, params, &proj_path(kind), x)?;
    let ty = params.bind(g, &type_path(kind))?;
    let slots = g.slice_rows(ty, 0, keep)?;
    let h = g.add(h, slots)?;
    if keep == cfg.cap {
        Ok(h)
    } else {
        let pad = g.zeros(&[cfg.cap - keep, cfg.d_enc]);
        g.concat_rows(&[h, pad])
    }
}

/// Encodes every payload in canonical modality order.
pub fn encode_sample<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    cfg: &EncoderConfig,
    payloads: &BTreeMap<ModalityKind, Payload>,
) -> Result<Vec<(ModalityKind, Tensor)>> {
    payloads
        .iter()
        .map(|(&k, p)| Ok((k, encode_modality(g, params, cfg, k, p)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, Coords};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, c: usize, values: Vec<f32>) -> GridPayload {
        GridPayload {
            height: h,
            width: w,
            channels: c,
            values,
            units: "a.u.".into(),
        }
    }

    fn seq(steps: usize, c: usize, values: Vec<f32>) -> SeqPayload {
        SeqPayload {
            steps,
            channels: c,
            sample_rate_hz: 50.0,
            values,
        }
    }

    #[test]
    fn patchify_examples() {
        let g = grid(4, 4, 1, (0..16).map(|v| v as f32).collect());
        let (n, d, v) = patchify_grid(&g, 4).unwrap();
        assert_eq!((n, d), (1, 16));
        assert_eq!(v, (0..16).map(|v| v as f32).collect::<Vec<_>>());

        let (n, d, v) = patchify_grid(&g, 2).unwrap();
        assert_eq!((n, d), (4, 4));
        for ty in 0..2 {
            for tx in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let want = ((ty * 2 + dy) * 4 + tx * 2 + dx) as f32;
                        assert_eq!(v[(ty * 2 + tx) * 4 + dy * 2 + dx], want);
                    }
                }
            }
        }

        let g = grid(3, 3, 1, vec![1.0; 9]);
        let (n, d, v) = patchify_grid(&g, 2).unwrap();
        assert_eq!((n, d), (4, 4));
        assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 16 - 9);
        assert_eq!(&v[12..16], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_data_error() {
        let g = grid(1, 2, 1, vec![1.0, f32::NAN]);
        assert!(matches!(patchify_grid(&g, 1), Err(Error::Data(_))));
        let s = seq(2, 1, vec![f32::INFINITY, 0.0]);
        assert!(matches!(window_sequence(&s, 1, 1), Err(Error::Data(_))));
    }

    #[test]
    fn window_examples() {
        let s = seq(4, 2, (0..8).map(|v| v as f32).collect());
        let (n, d, v) = window_sequence(&s, 4, 4).unwrap();
        assert_eq!((n, d), (1, 8));
        assert_eq!(v, s.values);

        let s = seq(5, 1, vec![1., 2., 3., 4., 5.]);
        let (n, d, v) = window_sequence(&s, 2, 2).unwrap();
        assert_eq!((n, d), (3, 2));
        assert_eq!(v, vec![1., 2., 3., 4., 5., 0.]);

        let s = seq(6, 1, vec![1., 2., 3., 4., 5., 6.]);
        let (n, _, v) = window_sequence(&s, 3, 3).unwrap();
        assert_eq!(n, 2);
        assert_eq!(v, s.values);

        let s = seq(1, 1, vec![7.]);
        assert_eq!(window_sequence(&s, 4, 2).unwrap().0, 1);
    }

    #[test]
    fn imu_window_arithmetic() {
        let cfg = EncoderConfig {
            window: 16,
            stride: 16,
            cap: 64,
            ..Default::default()
        };
        let s = seq(128, 9, vec![0.1; 128 * 9]);
        let (n, d, _) = window_sequence(&s, cfg.window, cfg.stride).unwrap();
        assert_eq!((n, d), (8, 16 * 9));
    }

    fn params_for(cfg: &EncoderConfig, kinds: &[ModalityKind]) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_encoders(&mut ps, cfg, kinds, &mut rng).unwrap();
        ps
    }

    fn zero_payload(kind: ModalityKind) -> Payload {
        match kind.family() {
            Family::Grid => Payload::Grid(grid(16, 16, kind.channels(), vec![0.0; 256 * kind.channels()])),
            Family::Sequence => Payload::Seq(seq(128, kind.channels(), vec![0.0; 128 * kind.channels()])),
        }
    }

    #[test]
    fn zero_payload_with_zero_projection_gives_type_embedding() {
        let cfg = EncoderConfig::default();
        let mut ps = params_for(&cfg, &[ModalityKind::Imu]);
        ps.get_mut("enc.imu.proj.w").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::<f32>::new();
        let t = encode_modality(&mut g, &ps, &cfg, ModalityKind::Imu, &zero_payload(ModalityKind::Imu)).unwrap();
        assert_eq!(g.data(t), ps.get("enc.imu.type").unwrap().data.as_slice());
    }

    #[test]
    fn every_kind_outputs_cap_by_d() {
        let cfg = EncoderConfig::default();
        let ps = params_for(&cfg, &ModalityKind::ALL);
        for k in ModalityKind::ALL {
            let mut g = Graph::<f32>::new();
            let t = encode_modality(&mut g, &ps, &cfg, k, &zero_payload(k)).unwrap();
            assert_eq!(g.shape(t), &[cfg.cap, cfg.d_enc], "{k}");
            assert_eq!(ModalityKind::parse(k.name()).unwrap(), k);
        }
        let short = Payload::Seq(seq(10, 9, vec![0.0; 90]));
        let mut g = Graph::<f32>::new();
        let t = encode_modality(&mut g, &ps, &cfg, ModalityKind::Imu, &short).unwrap();
        assert_eq!(g.shape(t), &[cfg.cap, cfg.d_enc]);
        assert!(g.data(t)[cfg.d_enc..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn family_mismatch_is_config_error() {
        let cfg = EncoderConfig::default();
        let ps = params_for(&cfg, &ModalityKind::ALL);
        let mut g = Graph::<f32>::new();
        let r = encode_modality(&mut g, &ps, &cfg, ModalityKind::Imu, &zero_payload(ModalityKind::Image));
        assert!(matches!(r, Err(Error::Config(_))));
        let wrong_channels = Payload::Seq(seq(128, 3, vec![0.0; 384]));
        let r = encode_modality(&mut g, &ps, &cfg, ModalityKind::Imu, &wrong_channels);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    fn random_payload(kind: ModalityKind, seed: u64) -> Payload {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match zero_payload(kind) {
            Payload::Grid(mut p) => {
                p.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                Payload::Grid(p)
            }
            Payload::Seq(mut p) => {
                p.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                Payload::Seq(p)
            }
        }
    }

    #[test]
    fn sample_order_is_canonical_and_blocks_independent() {
        let cfg = EncoderConfig::default();
        let ps = params_for(&cfg, &ModalityKind::ALL);
        let kinds = [ModalityKind::Pose, ModalityKind::Imu, ModalityKind::Depth];
        let mut a = BTreeMap::new();
        for (i, &k) in kinds.iter().enumerate() {
            a.insert(k, random_payload(k, i as u64));
        }
        let mut b = BTreeMap::new();
        for (i, &k) in kinds.iter().enumerate().rev() {
            b.insert(k, random_payload(k, i as u64));
        }
        let run = |m: &BTreeMap<ModalityKind, Payload>| {
            let mut g = Graph::<f32>::new();
            encode_sample(&mut g, &ps, &cfg, m)
                .unwrap()
                .into_iter()
                .map(|(k, t)| (k, g.data(t).to_vec()))
                .collect::<Vec<_>>()
        };
        let ra = run(&a);
        assert_eq!(
            ra.iter().map(|x| x.0).collect::<Vec<_>>(),
            vec![ModalityKind::Imu, ModalityKind::Depth, ModalityKind::Pose]
        );
        assert_eq!(ra, run(&b));
        a.remove(&ModalityKind::Depth);
        let rc = run(&a);
        assert_eq!(rc.len(), 2);
        assert_eq!(rc[0], ra[0]);
        assert_eq!(rc[1], ra[2]);

        let mut single = BTreeMap::new();
        single.insert(ModalityKind::Gps, random_payload(ModalityKind::Gps, 1));
        assert_eq!(run(&single).len(), 1);
    }

    #[test]
    fn gradient_through_projection_and_type() {
        let cfg = EncoderConfig {
            d_enc: 4,
            patch: 2,
            window: 4,
            stride: 4,
            cap: 3,
        };
        let ps = params_for(&cfg, &[ModalityKind::Gaze]);
        let payload = Payload::Seq(seq(10, 2, (0..20).map(|i| (i as f32 * 0.37).sin()).collect()));
        let paths = ["enc.gaze.proj.b", "enc.gaze.proj.w", "enc.gaze.type"];
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = paths
            .iter()
            .map(|p| {
                let prm = ps.get(p).unwrap();
                (prm.shape.clone(), prm.data.iter().map(|&v| v as f64 * 10.0 + 0.1).collect())
            })
            .collect();
        let rep = finite_diff_check(
            |g, leaves| {
                for (p, &t) in paths.iter().zip(leaves) {
                    g.insert_named(*p, t);
                }
                let y = encode_modality(g, &ps, &cfg, ModalityKind::Gaze, &payload)?;
                let sq = g.mul(y, y)?;
                let t = g.tanh(sq);
                Ok(g.sum(t))
            },
            &inputs,
            1e-3,
            1e-3,
            Coords::All,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
