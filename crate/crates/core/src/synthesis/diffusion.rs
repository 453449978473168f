//! Client for an external text-conditioned inpainting service.
//!
//! The service receives `{image, mask, prompt, negative_prompt, seed}` with
//! base64 PNG payloads and answers `{"image": <base64 PNG>}`.

use std::io::Cursor;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{ImageFormat, Luma, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{InpaintBackend, SynthesisTriplet};
use crate::error::{Error, Result};
use crate::synthesis::BackendKind;

pub const ENDPOINT_ENV: &str = "ROADFUSION_DIFFUSION_ENDPOINT";
const MAX_RESPONSE_BYTES: u64 = 256 << 20;

#[derive(Serialize)]
struct Request<'a> {
    image: String,
    mask: String,
    prompt: &'a str,
    negative_prompt: &'a str,
    seed: u64,
}

#[derive(Deserialize)]
struct Response {
    image: String,
}

pub struct DiffusionClient {
    endpoint: String,
    agent: ureq::Agent,
    retries: usize,
    backoff: Duration,
}

impl DiffusionClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        DiffusionClient {
            endpoint: endpoint.into(),
            agent,
            retries,
            backoff: Duration::from_millis(200),
        }
    }

    /// Client for the endpoint named by the environment, if any.
    pub fn from_env(timeout: Duration, retries: usize) -> Option<Self> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .map(|e| Self::new(e, timeout, retries))
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, t: &SynthesisTriplet, body: &str) -> std::result::Result<Array3<f32>, (bool, String)> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        if status >= 500 || status == 429 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}: {}", text.trim())));
        }
        let parsed: Response = serde_json::from_str(&text).map_err(|e| (false, format!("bad response: {e}")))?;
        let bytes = B64.decode(parsed.image).map_err(|e| (false, format!("bad base64: {e}")))?;
        let img = image::load_from_memory(&bytes).map_err(|e| (false, format!("bad image: {e}")))?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let (eh, ew) = t.normal_image.dims();
        if (h as usize, w as usize) != (eh, ew) {
            return Err((false, format!("returned {h}x{w}, expected {eh}x{ew}")));
        }
        Array3::from_shape_vec((eh, ew, 3), rgb.into_raw()).map_err(|e| (false, e.to_string()))
    }
}

pub(crate) fn encode_rgb_png(img: &Array3<f32>) -> Vec<u8> {
    let (h, w, _) = img.dim();
    let buf = image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

pub(crate) fn encode_mask_png(m: &crate::imageops::Mask) -> Vec<u8> {
    let (h, w) = m.dim();
    let buf = image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if m[[y as usize, x as usize]] > 0 { 255u8 } else { 0 }])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

impl InpaintBackend for DiffusionClient {
    fn kind(&self) -> BackendKind {
        BackendKind::Diffusion
    }

    fn inpaint(&self, t: &SynthesisTriplet) -> Result<Array3<f32>> {
        let body = serde_json::to_string(&Request {
            image: B64.encode(encode_rgb_png(&t.normal_image.image)),
            mask: B64.encode(encode_mask_png(&t.mask)),
            prompt: &t.description,
            negative_prompt: &t.negative_prompt,
            seed: t.seed,
        })
        .expect("serializable request");
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * attempt as u32);
            }
            match self.attempt(t, &body) {
                Ok(img) => return Ok(img),
                Err((true, msg)) => {
                    log::warn!("inpainting attempt {} for `{}` failed: {msg}", attempt + 1, t.id);
                    last = msg;
                }
                Err((false, msg)) => {
                    return Err(Error::Rejected {
                        triplet: t.id.clone(),
                        msg,
                    })
                }
            }
        }
        Err(Error::BackendUnavailable {
            triplet: t.id.clone(),
            msg: format!("{} after {} attempts: {last}", self.endpoint, self.retries + 1),
        })
    }
}
