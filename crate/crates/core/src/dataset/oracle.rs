//! Closed-form least-squares fits on stored latents.
//!
//! Regression tasks regress the label on `[1, z_visible]`; classification
//! tasks regress the one-hot class on a one-hot of the visible factor values
//! and predict the argmax. The returned error is the task metric's error
//! form, measured on the fitting set.

use nalgebra::DMatrix;

use crate::encoders::ModalityKind;
use crate::error::{Error, Result};
use crate::tasks::{compute_metric, Label, Prediction, TaskSpec};

use super::generators::{factor_sizes, latent_dim};
use super::SensorSample;

fn features(task: &str, z: &[f32], coords: &[usize]) -> Vec<f64> {
    match factor_sizes(task) {
        None => std::iter::once(1.0)
            .chain(coords.iter().map(|&c| z[c] as f64))
            .collect(),
        Some((na, nb)) => {
            let sizes = [na, nb];
            let mut cell = 0;
            let mut width = 1;
            for &c in coords {
                cell = cell * sizes[c] + z[c] as usize;
                width *= sizes[c];
            }
            let mut f = vec![0.0; width];
            f[cell] = 1.0;
            f
        }
    }
}

fn targets(spec: &TaskSpec, label: &Label) -> Result<Vec<f64>> {
    Ok(match label {
        Label::Values(v) => v.iter().map(|&x| x as f64).collect(),
        Label::Class(c) => {
            let mut t = vec![0.0; spec.out_dim()];
            *t.get_mut(*c)
                .ok_or_else(|| Error::Data(format!("class {c} outside task {}", spec.name)))? = 1.0;
            t
        }
    })
}

/// Metric error of the least-squares fit using latent coordinates `coords`.
pub fn latent_fit_error(spec: &TaskSpec, samples: &[SensorSample], coords: &[usize]) -> Result<f64> {
    let dim = latent_dim(&spec.name)?;
    if samples.is_empty() {
        return Err(Error::Data("least squares over an empty sample set".into()));
    }
    if coords.iter().any(|&c| c >= dim) {
        return Err(Error::Index(format!("latent coordinate outside 0..{dim}")));
    }
    let rows = samples
        .iter()
        .map(|s| {
            let z = s
                .latent
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {} has no stored latent", s.sample_id)))?;
            Ok((features(&spec.name, z, coords), targets(spec, &s.label)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (n, p, q) = (rows.len(), rows[0].0.len(), rows[0].1.len());
    let x = DMatrix::from_fn(n, p, |i, j| rows[i].0[j]);
    let y = DMatrix::from_fn(n, q, |i, j| rows[i].1[j]);
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
    let fit = x * beta;
    let preds: Vec<Prediction> = (0..n)
        .map(|i| {
            let row: Vec<f32> = fit.row(i).iter().map(|&v| v as f32).collect();
            if spec.head.is_classification() {
                let id = crate::lm::argmax(&row);
                let mut probs = vec![0.0; row.len()];
                probs[id] = 1.0;
                Prediction::Class { id, probs }
            } else {
                Prediction::Values(row)
            }
        })
        .collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.label.clone()).collect();
    Ok(spec.metric.error(compute_metric(spec, &preds, &labels)?))
}

/// Fit error on the whole latent and on each modality's visible coordinates.
pub fn information_structure(spec: &TaskSpec, samples: &[SensorSample]) -> Result<(f64, Vec<(ModalityKind, f64)>)> {
    let all: Vec<usize> = (0..latent_dim(&spec.name)?).collect();
    let full = latent_fit_error(spec, samples, &all)?;
    let views = super::generators::views(&spec.name)?
        .into_iter()
        .map(|(k, coords)| Ok((k, latent_fit_error(spec, samples, &coords)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((full, views))
}
