//! Wire types and request handlers.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::{FromRequest, Multipart, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::Json;
use base64::Engine;
use fgs_core::dataset::decode_png;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::AppState;

/// One uploaded image before decoding.
#[derive(Debug, Clone)]
pub struct Upload {
    pub name: Option<String>,
    /// Raw PNG bytes, or the reason they could not be obtained.
    pub bytes: Result<Vec<u8>, String>,
}

#[derive(Debug, Clone, Default)]
pub struct PredictRequest {
    pub images: Vec<Upload>,
    pub denoise: bool,
    pub batch_id: Option<String>,
}

/// JSON form: `images` holds base64 strings or `{name, data}` objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictJson {
    pub images: Vec<JsonImage>,
    #[serde(default)]
    pub denoise: bool,
    #[serde(default)]
    pub batch_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JsonImage {
    Data(String),
    Named { name: Option<String>, data: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Ok,
    DecodeError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f32>>,
    /// Original `[height, width]` when the image was resized to fit the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resized_from: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model_id: String,
    pub label_set: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<String>,
    pub denoised: bool,
    pub elapsed_ms: f64,
    pub results: Vec<ItemResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser_id: Option<String>,
    pub version: String,
    pub uptime_s: f64,
    pub label_set: String,
    pub max_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub label_set: String,
    pub labels: Vec<String>,
}

pub async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_id: state.models.model_id().into(),
        denoiser_id: state.models.denoiser_id().map(Into::into),
        version: env!("CARGO_PKG_VERSION").into(),
        uptime_s: state.started.elapsed().as_secs_f64(),
        label_set: state.models.label_set().to_string(),
        max_batch: state.max_batch,
    })
}

pub async fn labels(State(state): State<Arc<AppState>>) -> Json<Labels> {
    Json(Labels {
        label_set: state.models.label_set().to_string(),
        labels: state.models.labels().iter().map(|c| c.name().to_string()).collect(),
    })
}

pub async fn predict(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<PredictResponse>, ServiceError> {
    let started = Instant::now();
    let parsed = read_request(req, state.max_batch).await?;
    check_count(parsed.images.len(), state.max_batch)?;
    if parsed.denoise && !state.models.has_denoiser() {
        return Err(ServiceError::BadRequest("denoise requested but no denoiser is loaded".into()));
    }
    let worker = Arc::clone(&state);
    let (denoised, batch_id) = (parsed.denoise, parsed.batch_id.clone());
    let results = tokio::task::spawn_blocking(move || run_batch(&worker, &parsed))
        .await
        .map_err(|e| ServiceError::internal(format!("worker panicked: {e}")))??;
    Ok(Json(PredictResponse {
        model_id: state.models.model_id().into(),
        label_set: state.models.label_set().to_string(),
        batch_id,
        denoised,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        results,
    }))
}

fn check_count(got: usize, max: usize) -> Result<(), ServiceError> {
    if got == 0 {
        return Err(ServiceError::BadRequest("batch contains no images".into()));
    }
    if got > max {
        return Err(ServiceError::TooManyImages { got, max });
    }
    Ok(())
}

async fn read_request(req: Request, max: usize) -> Result<PredictRequest, ServiceError> {
    let ctype = req
        .headers()
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ctype.starts_with("multipart/form-data") {
        let mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
        read_multipart(mp, max).await
    } else if ctype.starts_with("application/json") {
        let Json(body) = Json::<PredictJson>::from_request(req, &())
            .await
            .map_err(|e| ServiceError::BadRequest(e.body_text()))?;
        Ok(from_json(body))
    } else {
        Err(ServiceError::UnsupportedMedia(ctype))
    }
}

/// Text fields `denoise` and `batch_id`; every other field is an image.
/// Stops reading as soon as the batch is known to be too large.
async fn read_multipart(mut mp: Multipart, max: usize) -> Result<PredictRequest, ServiceError> {
    let bad = |e: axum::extract::multipart::MultipartError| ServiceError::BadRequest(e.body_text());
    let mut out = PredictRequest::default();
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        match field.name().unwrap_or("") {
            "denoise" => {
                let v = field.text().await.map_err(bad)?;
                out.denoise = parse_flag(&v)?;
            }
            "batch_id" => out.batch_id = Some(field.text().await.map_err(bad)?),
            _ => {
                if out.images.len() == max {
                    return Err(ServiceError::TooManyImages { got: max + 1, max });
                }
                let name = field.file_name().map(str::to_string);
                let bytes = field.bytes().await.map_err(bad)?;
                out.images.push(Upload {
                    name,
                    bytes: Ok(bytes.to_vec()),
                });
            }
        }
    }
    Ok(out)
}

fn parse_flag(v: &str) -> Result<bool, ServiceError> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "" | "0" | "false" | "no" | "off" => Ok(false),
        other => Err(ServiceError::BadRequest(format!("denoise: expected true or false, got {other:?}"))),
    }
}

fn from_json(body: PredictJson) -> PredictRequest {
    let engine = base64::engine::general_purpose::STANDARD;
    let images = body
        .images
        .into_iter()
        .map(|img| {
            let (name, data) = match img {
                JsonImage::Data(d) => (None, d),
                JsonImage::Named { name, data } => (name, data),
            };
            let bytes = engine.decode(data.trim()).map_err(|e| format!("invalid base64: {e}"));
            Upload { name, bytes }
        })
        .collect();
    PredictRequest {
        images,
        denoise: body.denoise,
        batch_id: body.batch_id,
    }
}

/// Decodes, fits and classifies every upload; undecodable entries are
/// reported individually and do not affect the rest.
pub fn run_batch(state: &AppState, req: &PredictRequest) -> Result<Vec<ItemResult>, ServiceError> {
    let [h, w, _] = state.models.input_shape();
    let mut results = Vec::with_capacity(req.images.len());
    let mut tiles = Vec::new();
    let mut slots = Vec::new();
    for (index, up) in req.images.iter().enumerate() {
        let source = up.name.clone().unwrap_or_else(|| format!("image {index}"));
        let decoded = up.bytes.clone().and_then(|b| decode_png(&b, &source).map_err(|e| e.to_string()));
        let mut item = ItemResult {
            index,
            name: up.name.clone(),
            status: ItemStatus::Ok,
            class: None,
            probabilities: None,
            resized_from: None,
            error: None,
        };
        match decoded {
            Ok(tile) => {
                let tile = if tile.height() != h || tile.width() != w {
                    item.resized_from = Some([tile.height(), tile.width()]);
                    tile.resized(h, w)
                } else {
                    tile
                };
                slots.push(index);
                tiles.push(tile);
            }
            Err(e) => {
                item.status = ItemStatus::DecodeError;
                item.error = Some(e);
            }
        }
        results.push(item);
    }
    if !tiles.is_empty() {
        let preds = state
            .models
            .classify(&tiles, req.denoise)
            .map_err(|e| ServiceError::internal(e.to_string()))?;
        for (slot, p) in slots.into_iter().zip(preds) {
            results[slot].class = p.label.map(|c| c.name().to_string());
            results[slot].probabilities = Some(p.probs);
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_limits() {
        assert!(matches!(check_count(0, 50), Err(ServiceError::BadRequest(_))));
        assert!(check_count(1, 50).is_ok());
        assert!(check_count(50, 50).is_ok());
        assert!(matches!(check_count(51, 50), Err(ServiceError::TooManyImages { got: 51, max: 50 })));
    }

    #[test]
    fn flags_parse() {
        assert!(parse_flag("true").unwrap());
        assert!(parse_flag(" 1 ").unwrap());
        assert!(!parse_flag("false").unwrap());
        assert!(parse_flag("maybe").is_err());
    }

    #[test]
    fn json_images_accept_both_forms() {
        let body: PredictJson =
            serde_json::from_str(r#"{"images": ["AAEC", {"name": "b.png", "data": "!!"}], "denoise": true}"#).unwrap();
        let req = from_json(body);
        assert!(req.denoise);
        assert_eq!(req.images[0].bytes, Ok(vec![0, 1, 2]));
        assert_eq!(req.images[1].name.as_deref(), Some("b.png"));
        assert!(req.images[1].bytes.is_err());
    }
}
