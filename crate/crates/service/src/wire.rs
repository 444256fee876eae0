//! JSON request and response bodies. The command line reads interpolation specs
//! in the same format.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spatialgan_core::data::template_by_id;
use spatialgan_core::interpolation::{Frame, InterpolationSpec, LabelInput, LatentInput, SpatialInput};
use spatialgan_core::types::normalize_image;
use spatialgan_core::{ArchConfig, AttributeLabel, ImageTensor, LandmarkSet, LatentVector, SegmentationMap};

/// One rejected input field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

pub type Checked<T> = std::result::Result<T, Vec<FieldError>>;

fn one(field: &str, message: impl Into<String>) -> Vec<FieldError> {
    vec![FieldError::new(field, message)]
}

/// Segmentation on the wire: base64 of the row-major 8-bit class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexMap {
    pub data: String,
    pub n_s: usize,
    pub height: usize,
    pub width: usize,
}

impl IndexMap {
    pub fn encode(map: &SegmentationMap) -> Self {
        Self { data: B64.encode(map.indices()), n_s: map.classes(), height: map.height(), width: map.width() }
    }

    /// Decodes and checks the map against the model's size and class count.
    pub fn decode(&self, field: &str, size: usize, n_s: usize) -> Checked<SegmentationMap> {
        let mut errs = Vec::new();
        if (self.height, self.width) != (size, size) {
            errs.push(FieldError::new(
                format!("{field}.height"),
                format!("expected {size}x{size} segmentation, got {}x{}", self.height, self.width),
            ));
        }
        if self.n_s != n_s {
            errs.push(FieldError::new(format!("{field}.n_s"), format!("expected {n_s} classes, got {}", self.n_s)));
        }
        let bytes = match B64.decode(&self.data) {
            Ok(b) => b,
            Err(e) => {
                errs.push(FieldError::new(format!("{field}.data"), format!("invalid base64: {e}")));
                return Err(errs);
            }
        };
        if bytes.len() != self.height * self.width {
            errs.push(FieldError::new(
                format!("{field}.data"),
                format!("{} bytes for a {}x{} map", bytes.len(), self.height, self.width),
            ));
        } else if let Some(p) = bytes.iter().position(|&v| v as usize >= self.n_s) {
            let bad = bytes.iter().filter(|&&v| v as usize >= self.n_s).count();
            errs.push(FieldError::new(
                format!("{field}.data"),
                format!(
                    "{bad} pixels have no class in [0, {}); first at ({}, {}) with index {}",
                    self.n_s,
                    p / self.width.max(1),
                    p % self.width.max(1),
                    bytes[p]
                ),
            ));
        }
        if !errs.is_empty() {
            return Err(errs);
        }
        SegmentationMap::from_indices(self.height, self.width, self.n_s, bytes).map_err(|e| one(field, e.to_string()))
    }
}

/// An explicit latent or a seed that expands to one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// The latent drawn for `seed`; the same on every platform.
pub fn latent_from_seed(seed: u64, n_z: usize) -> LatentVector {
    LatentVector::sample(n_z, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl LatentSource {
    pub fn resolve(&self, field: &str, n_z: usize) -> Checked<LatentVector> {
        match (&self.z, self.seed) {
            (Some(_), Some(_)) => Err(one(field, "give either z or seed, not both")),
            (None, None) => Err(one(field, "one of z or seed is required")),
            (None, Some(seed)) => Ok(latent_from_seed(seed, n_z)),
            (Some(z), None) => {
                if z.len() != n_z {
                    return Err(one(field, format!("expected {n_z} latent values, got {}", z.len())));
                }
                LatentVector::new(z.clone()).map_err(|e| one(field, e.to_string()))
            }
        }
    }
}

/// Attribute bits, one 0/1 entry per attribute.
pub fn parse_bits(field: &str, bits: &[u8], n_c: usize) -> Checked<AttributeLabel> {
    let c = AttributeLabel::new(bits.to_vec()).map_err(|e| one(field, e.to_string()))?;
    if c.len() != n_c {
        return Err(one(field, format!("expected {n_c} attribute bits, got {}", c.len())));
    }
    Ok(c)
}

pub fn encode_png(image: &ImageTensor) -> Vec<u8> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("image buffer matches its dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("PNG encoding into memory");
    out.into_inner()
}

/// Decodes PNG bytes to an RGB image normalized to [-1, 1].
pub fn decode_png(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    let raw: Vec<i64> = rgb.as_raw().iter().map(|&v| v as i64).collect();
    normalize_image(rgb.height() as usize, rgb.width() as usize, &raw).map_err(|e| e.to_string())
}

fn decode_image_field(field: &str, b64: &str, size: usize) -> Checked<ImageTensor> {
    let bytes = B64.decode(b64).map_err(|e| one(field, format!("invalid base64: {e}")))?;
    let image = decode_png(&bytes).map_err(|e| one(field, format!("not a PNG image: {e}")))?;
    if (image.height(), image.width()) != (size, size) {
        return Err(one(field, format!("expected {size}x{size} image, got {}x{}", image.height(), image.width())));
    }
    Ok(image)
}

fn merge<A, B>(a: Checked<A>, b: Checked<B>) -> Checked<(A, B)> {
    match (a, b) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        (a, b) => Err(a.err().into_iter().chain(b.err()).flatten().collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub c: Vec<u8>,
    pub s: IndexMap,
}

impl GenerateRequest {
    pub fn resolve(&self, arch: &ArchConfig) -> Checked<(LatentVector, AttributeLabel, SegmentationMap)> {
        let latent = LatentSource { z: self.z.clone(), seed: self.seed };
        let ((z, c), s) = merge(
            merge(latent.resolve("z", arch.n_z), parse_bits("c", &self.c, arch.n_c)),
            self.s.decode("s", arch.image_size, arch.n_s),
        )?;
        Ok((z, c, s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub model_id: String,
    /// Base64 PNG.
    pub image: String,
    pub z: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub c: Vec<u8>,
    pub s: IndexMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentSpec {
    Fixed(LatentSource),
    Lerp { from: LatentSource, to: LatentSource },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSpec {
    Fixed(Vec<u8>),
    Sweep(Vec<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialSpec {
    Fixed(IndexMap),
    Landmarks { from: Vec<(f64, f64)>, to: Vec<(f64, f64)>, template: String },
}

/// Interpolation request body, also the `interpolate --spec` file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationRequestSpec {
    pub latent: LatentSpec,
    pub labels: LabelSpec,
    pub spatial: SpatialSpec,
    pub steps: usize,
}

impl InterpolationRequestSpec {
    /// Number of frames the spec renders, before full validation.
    pub fn frame_count(&self) -> usize {
        match (&self.latent, &self.labels, &self.spatial) {
            (_, LabelSpec::Sweep(cs), _) => cs.len(),
            (LatentSpec::Lerp { .. }, _, SpatialSpec::Landmarks { .. }) => self.steps.saturating_mul(self.steps),
            _ => self.steps,
        }
    }

    pub fn resolve(&self, arch: &ArchConfig) -> Checked<InterpolationSpec> {
        let latent = match &self.latent {
            LatentSpec::Fixed(z) => z.resolve("latent.fixed", arch.n_z).map(LatentInput::Fixed),
            LatentSpec::Lerp { from, to } => merge(from.resolve("latent.lerp.from", arch.n_z), to.resolve("latent.lerp.to", arch.n_z))
                .map(|(a, b)| LatentInput::Lerp(a, b)),
        };
        let labels = match &self.labels {
            LabelSpec::Fixed(c) => parse_bits("labels.fixed", c, arch.n_c).map(LabelInput::Fixed),
            LabelSpec::Sweep(cs) => {
                let (ok, errs): (Vec<_>, Vec<_>) = cs
                    .iter()
                    .enumerate()
                    .map(|(i, c)| parse_bits(&format!("labels.sweep[{i}]"), c, arch.n_c))
                    .partition(|r| r.is_ok());
                if errs.is_empty() {
                    Ok(LabelInput::Sweep(ok.into_iter().map(|r| r.unwrap()).collect()))
                } else {
                    Err(errs.into_iter().flat_map(|r| r.unwrap_err()).collect())
                }
            }
        };
        let size = arch.image_size;
        let spatial = match &self.spatial {
            SpatialSpec::Fixed(m) => m.decode("spatial.fixed", size, arch.n_s).map(SpatialInput::Fixed),
            SpatialSpec::Landmarks { from, to, template } => {
                let mut errs = Vec::new();
                let template = template_by_id(template).map_err(|e| errs.push(FieldError::new("spatial.landmarks.template", e.to_string()))).ok();
                let from = LandmarkSet::new(from.clone());
                let to = LandmarkSet::new(to.clone());
                for (name, l) in [("from", &from), ("to", &to)] {
                    if let Err(e) = l.check_bounds(size, size) {
                        errs.push(FieldError::new(format!("spatial.landmarks.{name}"), e.to_string()));
                    }
                    if let Some(t) = &template {
                        if l.len() != t.n_points {
                            errs.push(FieldError::new(
                                format!("spatial.landmarks.{name}"),
                                format!("template '{}' needs {} points, got {}", t.id, t.n_points, l.len()),
                            ));
                        } else if t.n_s != arch.n_s {
                            errs.push(FieldError::new(
                                "spatial.landmarks.template",
                                format!("template '{}' has {} classes, model has {}", t.id, t.n_s, arch.n_s),
                            ));
                        }
                    }
                }
                match template {
                    Some(template) if errs.is_empty() => Ok(SpatialInput::Landmarks { from, to, template }),
                    _ => {
                        errs.dedup();
                        Err(errs)
                    }
                }
            }
        };
        let ((latent, labels), spatial) = merge(merge(latent, labels), spatial)?;
        let spec = InterpolationSpec { latent, labels, spatial, steps: self.steps };
        spec.inputs(size, size).map_err(|e| one("spec", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub model_id: String,
    pub spec: InterpolationRequestSpec,
}

/// One rendered frame with the inputs that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<f64>,
    pub z: Vec<f32>,
    pub c: Vec<u8>,
    pub s: IndexMap,
}

impl FrameRecord {
    pub fn from_frame(f: &Frame) -> Self {
        Self { index: f.index, t: f.t, t2: f.t2, z: f.z.values().to_vec(), c: f.c.bits().to_vec(), s: IndexMap::encode(&f.s) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameImage {
    #[serde(flatten)]
    pub record: FrameRecord,
    /// Base64 PNG.
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub model_id: String,
    /// Content hash of the resolved spec.
    pub spec_digest: String,
    pub frames: Vec<FrameImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub model_id: String,
    /// Base64 PNG of the model's image size.
    pub image: String,
}

impl SegmentRequest {
    pub fn resolve(&self, arch: &ArchConfig) -> Checked<ImageTensor> {
        decode_image_field("image", &self.image, arch.image_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub model_id: String,
    pub segmentation: IndexMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub arch: ArchConfig,
    pub generator_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelSummary>,
}

/// Error body for every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<FieldError>,
}

pub fn b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn unb64(text: &str) -> std::result::Result<Vec<u8>, String> {
    B64.decode(text).map_err(|e| e.to_string())
}
