//! The classifier (and optional denoiser) a service instance answers with.

use std::path::Path;

use fgs_core::dataset::{ClassLabel, ImageTile, LabelSet};
use fgs_core::modelzoo::{denoise, encode, load_checkpoint, predict, Network, Prediction};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{which} checkpoint: {source}")]
    Checkpoint {
        which: &'static str,
        #[source]
        source: fgs_core::Error,
    },

    #[error("{0}")]
    Incompatible(String),
}

/// Read-only models shared by every request.
#[derive(Debug)]
pub struct ModelBundle {
    cnn: Network,
    dae: Option<Network>,
    label_set: LabelSet,
    input: [usize; 3],
    model_id: String,
    denoiser_id: Option<String>,
}

/// First 16 hex digits of the SHA-256 of the encoded checkpoint.
pub fn model_id(net: &Network) -> String {
    Sha256::digest(encode(net)).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ModelBundle {
    /// Checks that `cnn` is an image classifier whose outputs match its
    /// label set, and that `dae` (if any) takes the same input shape.
    pub fn new(cnn: Network, dae: Option<Network>) -> Result<Self, LoadError> {
        let bad = |m: String| Err(LoadError::Incompatible(m));
        if cnn.spec().kind != "cnn" {
            return bad(format!("expected a cnn checkpoint, got {:?}", cnn.spec().kind));
        }
        let Some(label_set) = cnn.spec().label_set else {
            return bad("classifier checkpoint declares no label set".into());
        };
        let out = cnn
            .spec()
            .output_shape()
            .map_err(|e| LoadError::Incompatible(e.to_string()))?;
        if out != [label_set.len()] {
            return bad(format!(
                "classifier has {out:?} outputs but label set {label_set} has {} classes",
                label_set.len()
            ));
        }
        let input: [usize; 3] = match cnn.input_shape().try_into() {
            Ok(s) => s,
            Err(_) => return bad(format!("classifier input {:?} is not an image", cnn.input_shape())),
        };
        if let Some(d) = &dae {
            if d.spec().kind != "dae" {
                return bad(format!("expected a dae checkpoint, got {:?}", d.spec().kind));
            }
            if d.input_shape() != input {
                return bad(format!(
                    "denoiser input {:?} differs from classifier input {input:?}",
                    d.input_shape()
                ));
            }
        }
        Ok(Self {
            model_id: model_id(&cnn),
            denoiser_id: dae.as_ref().map(model_id),
            cnn,
            dae,
            label_set,
            input,
        })
    }

    pub fn load(cnn: &Path, dae: Option<&Path>) -> Result<Self, LoadError> {
        let cnn = load_checkpoint(cnn).map_err(|source| LoadError::Checkpoint { which: "classifier", source })?;
        let dae = dae
            .map(load_checkpoint)
            .transpose()
            .map_err(|source| LoadError::Checkpoint { which: "denoiser", source })?;
        Self::new(cnn, dae)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn denoiser_id(&self) -> Option<&str> {
        self.denoiser_id.as_deref()
    }

    pub fn label_set(&self) -> LabelSet {
        self.label_set
    }

    pub fn labels(&self) -> &'static [ClassLabel] {
        self.label_set.classes()
    }

    /// `[height, width, channels]` every tile is brought to before inference.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn has_denoiser(&self) -> bool {
        self.dae.is_some()
    }

    /// Optional denoising pass, then class probabilities. Tiles must already
    /// have the model's input shape.
    pub fn classify(&self, tiles: &[ImageTile], denoised: bool) -> fgs_core::Result<Vec<Prediction>> {
        match (&self.dae, denoised) {
            (Some(dae), true) => predict(&self.cnn, &denoise(dae, tiles)?),
            _ => predict(&self.cnn, tiles),
        }
    }
}
