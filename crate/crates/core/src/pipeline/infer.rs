use super::{augment, Arm, TrainedModel};
use crate::autodiff::{Element, Graph, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::svdd::{self, SvddModel, DEFAULT_KKT_TOL};

/// Images per eval-mode forward pass.
const CHUNK: usize = 256;

/// Eval-mode latent codes and per-sample reconstruction errors.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub latent: Matrix,
    pub errors: Vec<f64>,
}

impl Features {
    /// Rows handed to SVDD: augmented for the full arm, raw codes otherwise.
    pub fn for_arm(&self, arm: Arm) -> Result<Matrix> {
        if !arm.augmented() {
            return Ok(self.latent.clone());
        }
        let rows = self
            .latent
            .iter_rows()
            .zip(&self.errors)
            .map(|(z, &e)| augment(z, e).map(|f| f.into_values()))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn extract_features<T: Element>(
    model: &TrainedModel<T>,
    images: &Tensor<T>,
) -> Result<Features> {
    let n = *images.shape().first().ok_or(Error::EmptyDataset)?;
    let k = model.networks.latent_dim();
    let mut latent = Vec::with_capacity(n * k);
    let mut errors = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let chunk = images.slice_outer(start, end)?;
        let mut g = Graph::new();
        let x = g.input(chunk.clone());
        let z = model.networks.encoder.forward_eval(&mut g, x)?;
        let x_hat = model.networks.decoder.forward_eval(&mut g, z)?;
        let err = g.row_mse(x_hat, &chunk)?;
        latent.extend(g.value(z).data().iter().map(|v| v.to_f64_lossy()));
        errors.extend(g.value(err).data().iter().map(|v| v.to_f64_lossy()));
        start = end;
    }
    Ok(Features {
        latent: Matrix::new(n, k, latent)?,
        errors,
    })
}

/// Stage two: SVDD on the frozen model's training features.
pub fn fit_svdd_stage<T: Element>(
    model: &TrainedModel<T>,
    train_images: &Tensor<T>,
) -> Result<SvddModel> {
    fit_svdd_stage_for(model, model.arm(), train_images)
}

/// [`fit_svdd_stage`] on the feature layout of `arm`.
pub fn fit_svdd_stage_for<T: Element>(
    model: &TrainedModel<T>,
    arm: Arm,
    train_images: &Tensor<T>,
) -> Result<SvddModel> {
    let feats = extract_features(model, train_images)?.for_arm(arm)?;
    let c = model.config.resolved_c(feats.rows());
    svdd::fit(&feats, c, model.config.kernel, DEFAULT_KKT_TOL)
}

/// Anomaly scores (higher is more anomalous) for `images: [N, C, 32, 32]`.
pub fn score_images<T: Element>(
    model: &TrainedModel<T>,
    sphere: Option<&SvddModel>,
    images: &Tensor<T>,
) -> Result<Vec<f64>> {
    score_images_for(model, model.arm(), sphere, images)
}

/// Scores with the rule of `arm`, which must share the model's training run.
pub fn score_images_for<T: Element>(
    model: &TrainedModel<T>,
    arm: Arm,
    sphere: Option<&SvddModel>,
    images: &Tensor<T>,
) -> Result<Vec<f64>> {
    if arm.training_key() != model.arm().training_key() {
        return Err(Error::Contract(format!(
            "a model trained as {} cannot be scored as {arm}",
            model.arm()
        )));
    }
    let feats = extract_features(model, images)?;
    if !arm.uses_svdd() {
        return Ok(feats.errors);
    }
    let sphere = sphere.ok_or_else(|| {
        Error::Contract(format!(
            "arm {arm} scores with SVDD but the model has no fitted sphere; run the svdd stage first"
        ))
    })?;
    sphere.score_rows(&feats.for_arm(arm)?)
}

/// Trained networks plus the (optional) fitted sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T: Element = f32> {
    pub model: TrainedModel<T>,
    pub svdd: Option<SvddModel>,
}

impl<T: Element> Detector<T> {
    pub fn score_images(&self, images: &Tensor<T>) -> Result<Vec<f64>> {
        score_images(&self.model, self.svdd.as_ref(), images)
    }
}

/// Score of a single preprocessed image `[C, 32, 32]`.
pub fn infer_score<T: Element>(detector: &Detector<T>, image: &Tensor<T>) -> Result<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.reshape(shape)?;
    Ok(detector.score_images(&batch)?[0])
}
