//! Domain values shared by every module: images, segmentations, labels, latents.
//!
//! All interface types use the `(height, width, channel)` element order. Batched
//! network tensors are `[N, C, H, W]`; the `*_batch` helpers convert between the two.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Index reserved for the background class in every dataset.
pub const BACKGROUND: u8 = 0;

/// RGB image with values in `[-1, 1]`, stored height-major then width then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidValue(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Rounds back to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Stacks images into an `[N, 3, H, W]` tensor.
    pub fn batch<T: Float>(images: &[ImageTensor]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut out = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Shape("images in a batch differ in size".into()));
            }
            for c in 0..3 {
                out.extend(img.data.iter().skip(c).step_by(3).map(|&v| T::lit(v as f64)));
            }
        }
        Ok(Tensor::new(vec![images.len(), 3, h, w], out))
    }

    /// Splits an `[N, 3, H, W]` tensor into images, clamping into `[-1, 1]`.
    pub fn unbatch<T: Float>(t: &Tensor<T>) -> Vec<ImageTensor> {
        let (n, c, h, w) = t.dims4();
        assert_eq!(c, 3, "unbatch expects RGB channels");
        let plane = h * w;
        (0..n)
            .map(|b| {
                let src = &t.data()[b * 3 * plane..(b + 1) * 3 * plane];
                let mut data = Vec::with_capacity(3 * plane);
                for p in 0..plane {
                    for ch in 0..3 {
                        let v = src[ch * plane + p].as_f64() as f32;
                        data.push(v.clamp(-1.0, 1.0));
                    }
                }
                ImageTensor { height: h, width: w, data }
            })
            .collect()
    }
}

/// Maps 8-bit RGB values to `[-1, 1]` with `v / 127.5 - 1`.
///
/// `raw` is `height * width * 3` values; anything outside `[0, 255]` is rejected.
pub fn normalize_image(height: usize, width: usize, raw: &[i64]) -> Result<ImageTensor> {
    if let Some((offset, &value)) = raw.iter().enumerate().find(|(_, v)| !(0..=255).contains(*v)) {
        return Err(Error::PixelOutOfRange { offset, value });
    }
    let data = raw.iter().map(|&v| (v as f64 / 127.5 - 1.0) as f32).collect();
    ImageTensor::new(height, width, data)
}

/// Inverse of [`normalize_image`] up to rounding.
pub fn denormalize_image(image: &ImageTensor) -> Vec<u8> {
    image.to_rgb8()
}

/// Per-pixel one-hot class map. Stored as class indices, which makes the one-hot
/// invariant hold by construction; [`SegmentationMap::to_one_hot`] expands it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    classes: usize,
    indices: Vec<u8>,
}

impl SegmentationMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        self.indices[row * self.width + col]
    }

    /// Single-class map.
    pub fn filled(height: usize, width: usize, classes: usize, class: u8) -> Result<Self> {
        one_hot_encode(&vec![class as i64; height * width], height, width, classes)
    }

    /// Wraps a row-major class-index map.
    pub fn from_indices(height: usize, width: usize, classes: usize, indices: Vec<u8>) -> Result<Self> {
        let wide: Vec<i64> = indices.iter().map(|&v| v as i64).collect();
        one_hot_encode(&wide, height, width, classes)
    }

    /// Replaces class indices through `map` (indexed by old class).
    pub fn relabel(&self, map: &[u8]) -> Result<Self> {
        if map.len() < self.classes {
            return Err(Error::Shape(format!("relabel table has {} entries for {} classes", map.len(), self.classes)));
        }
        Self::from_indices(
            self.height,
            self.width,
            self.classes,
            self.indices.iter().map(|&c| map[c as usize]).collect(),
        )
    }

    /// Validates a dense `H x W x n_s` array of zeros and ones.
    pub fn from_one_hot(height: usize, width: usize, classes: usize, data: &[f32]) -> Result<Self> {
        check_classes(classes)?;
        if data.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "one-hot map {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        let mut indices = Vec::with_capacity(height * width);
        for p in 0..height * width {
            let px = &data[p * classes..(p + 1) * classes];
            let ones = px.iter().filter(|&&v| v == 1.0).count();
            let zeros = px.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != classes - 1 {
                return Err(Error::NotOneHot { row: p / width, col: p % width });
            }
            indices.push(px.iter().position(|&v| v == 1.0).unwrap() as u8);
        }
        Ok(Self { height, width, classes, indices })
    }

    /// Dense `H x W x n_s` expansion.
    pub fn to_one_hot(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.indices.len() * self.classes];
        for (p, &k) in self.indices.iter().enumerate() {
            out[p * self.classes + k as usize] = 1.0;
        }
        out
    }

    /// Fraction of pixels whose class agrees with `other`.
    pub fn pixel_accuracy(&self, other: &SegmentationMap) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "segmentations {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        let hits = self.indices.iter().zip(&other.indices).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / self.indices.len() as f64)
    }

    /// Mirrors the map left to right.
    pub fn flip_horizontal(&self) -> Self {
        let mut indices = Vec::with_capacity(self.indices.len());
        for row in self.indices.chunks(self.width) {
            indices.extend(row.iter().rev());
        }
        Self { indices, ..self.clone() }
    }

    /// Stacks maps into a one-hot `[N, n_s, H, W]` tensor.
    pub fn batch<T: Float>(maps: &[SegmentationMap]) -> Result<Tensor<T>> {
        let first = maps.first().ok_or_else(|| Error::Shape("empty segmentation batch".into()))?;
        let (h, w, k) = (first.height, first.width, first.classes);
        let plane = h * w;
        let mut out = vec![T::zero(); maps.len() * k * plane];
        for (b, m) in maps.iter().enumerate() {
            if (m.height, m.width, m.classes) != (h, w, k) {
                return Err(Error::Shape("segmentations in a batch differ in shape".into()));
            }
            for (p, &c) in m.indices.iter().enumerate() {
                out[(b * k + c as usize) * plane + p] = T::one();
            }
        }
        Ok(Tensor::new(vec![maps.len(), k, h, w], out))
    }
}

fn check_classes(classes: usize) -> Result<()> {
    if !(2..=256).contains(&classes) {
        return Err(Error::InvalidValue(format!("class count {classes} outside [2, 256]")));
    }
    Ok(())
}

/// Builds a one-hot map from a row-major index map.
pub fn one_hot_encode(index_map: &[i64], height: usize, width: usize, classes: usize) -> Result<SegmentationMap> {
    check_classes(classes)?;
    if index_map.len() != height * width {
        return Err(Error::Shape(format!(
            "index map needs {} entries, got {}",
            height * width,
            index_map.len()
        )));
    }
    let mut indices = Vec::with_capacity(index_map.len());
    for (p, &v) in index_map.iter().enumerate() {
        if v < 0 || v as usize >= classes {
            return Err(Error::ClassOutOfRange { row: p / width, col: p % width, index: v, classes });
        }
        indices.push(v as u8);
    }
    Ok(SegmentationMap { height, width, classes, indices })
}

/// Per-pixel argmax over the class axis of an `H x W x n_s` array; ties go to the
/// lower class index.
pub fn argmax_decode(height: usize, width: usize, classes: usize, data: &[f32]) -> Result<SegmentationMap> {
    check_classes(classes)?;
    if data.len() != height * width * classes {
        return Err(Error::Shape("argmax input has the wrong length".into()));
    }
    let indices = data
        .chunks(classes)
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Ok(SegmentationMap { height, width, classes, indices })
}

/// Binary multi-attribute label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeLabel {
    bits: Vec<u8>,
}

impl AttributeLabel {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidValue(format!("attribute bit {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    /// Parses a comma-separated bit string such as `1,0,1`.
    pub fn parse(text: &str) -> Result<Self> {
        let bits = text
            .split(',')
            .map(|t| match t.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::InvalidValue(format!("attribute bit {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn batch<T: Float>(labels: &[AttributeLabel]) -> Result<Tensor<T>> {
        let n_c = labels.first().map(AttributeLabel::len).unwrap_or(0);
        if labels.iter().any(|l| l.len() != n_c) {
            return Err(Error::Shape("labels in a batch differ in length".into()));
        }
        let data = labels.iter().flat_map(|l| l.bits.iter().map(|&b| T::lit(b as f64))).collect();
        Ok(Tensor::new(vec![labels.len(), n_c], data))
    }
}

impl std::fmt::Display for AttributeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.bits.iter().map(u8::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Standard-normal latent code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    values: Vec<f32>,
}

impl LatentVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("latent vector has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn sample(n_z: usize, rng: &mut impl Rng) -> Self {
        Self { values: (0..n_z).map(|_| rng.sample::<f32, _>(StandardNormal)).collect() }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn batch<T: Float>(zs: &[LatentVector]) -> Result<Tensor<T>> {
        let n_z = zs.first().map(LatentVector::len).unwrap_or(0);
        if zs.iter().any(|z| z.len() != n_z) {
            return Err(Error::Shape("latent vectors in a batch differ in length".into()));
        }
        let data = zs.iter().flat_map(|z| z.values.iter().map(|&v| T::lit(v as f64))).collect();
        Ok(Tensor::new(vec![zs.len(), n_z], data))
    }
}

/// One `(image, label, segmentation)` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    pub image: ImageTensor,
    pub label: AttributeLabel,
    pub segmentation: SegmentationMap,
}

impl JointSample {
    pub fn new(image: ImageTensor, label: AttributeLabel, segmentation: SegmentationMap) -> Result<Self> {
        if (image.height(), image.width()) != (segmentation.height(), segmentation.width()) {
            return Err(Error::Shape(format!(
                "image is {}x{} but segmentation is {}x{}",
                image.height(),
                image.width(),
                segmentation.height(),
                segmentation.width()
            )));
        }
        Ok(Self { image, label, segmentation })
    }
}

/// Ordered landmark coordinates `(x, y)` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks every point lies in `[0, width) x [0, height)`.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (i, &(x, y)) in self.points.iter().enumerate() {
            if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
                return Err(Error::InvalidValue(format!(
                    "landmark {i} at ({x}, {y}) outside {width}x{height}"
                )));
            }
        }
        Ok(())
    }

    /// Parses the sidecar format: one `x y` pair per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => points.push((x, y)),
                _ => {
                    return Err(Error::InvalidValue(format!(
                        "landmark line {}: expected \"x y\", got {line:?}",
                        line_no + 1
                    )))
                }
            }
        }
        Ok(Self { points })
    }

    pub fn to_text(&self) -> String {
        self.points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_single_pixel() {
        let m = one_hot_encode(&[2], 1, 1, 3).unwrap();
        assert_eq!(m.to_one_hot(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_constant_zero_map() {
        let m = one_hot_encode(&[0; 4], 2, 2, 2).unwrap();
        let dense = m.to_one_hot();
        let ch0: Vec<f32> = dense.iter().step_by(2).copied().collect();
        let ch1: Vec<f32> = dense.iter().skip(1).step_by(2).copied().collect();
        assert_eq!(ch0, vec![1.0; 4]);
        assert_eq!(ch1, vec![0.0; 4]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(matches!(one_hot_encode(&[0, 3], 1, 2, 3), Err(Error::ClassOutOfRange { index: 3, .. })));
        assert!(matches!(one_hot_encode(&[-1], 1, 1, 3), Err(Error::ClassOutOfRange { index: -1, .. })));
        assert!(one_hot_encode(&[0], 1, 1, 1).is_err());
    }

    #[test]
    fn from_one_hot_rejects_soft_maps() {
        assert!(matches!(
            SegmentationMap::from_one_hot(1, 1, 2, &[0.5, 0.5]),
            Err(Error::NotOneHot { row: 0, col: 0 })
        ));
        assert!(SegmentationMap::from_one_hot(1, 1, 2, &[1.0, 1.0]).is_err());
        assert_eq!(SegmentationMap::from_one_hot(1, 1, 2, &[0.0, 1.0]).unwrap().indices(), &[1]);
    }

    #[test]
    fn normalize_bounds() {
        let img = normalize_image(1, 1, &[0, 255, 127]).unwrap();
        assert_eq!(img.data()[0], -1.0);
        assert_eq!(img.data()[1], 1.0);
        assert!((img.data()[2] as f64 - (127.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((img.data()[2] as f64 + 0.00392).abs() < 1e-5);
        assert!(matches!(normalize_image(1, 1, &[0, 256, 0]), Err(Error::PixelOutOfRange { offset: 1, .. })));
        assert!(normalize_image(1, 1, &[0, -1, 0]).is_err());
    }

    #[test]
    fn joint_sample_rejects_size_mismatch() {
        let img = normalize_image(2, 2, &[0; 12]).unwrap();
        let seg = one_hot_encode(&[0; 6], 2, 3, 2).unwrap();
        let label = AttributeLabel::new(vec![1, 0]).unwrap();
        assert!(matches!(JointSample::new(img, label, seg), Err(Error::Shape(_))));
    }

    #[test]
    fn image_batch_layout_round_trip() {
        let img = normalize_image(1, 2, &[0, 51, 102, 153, 204, 255]).unwrap();
        let t = ImageTensor::batch::<f64>(std::slice::from_ref(&img)).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(ImageTensor::unbatch(&t)[0], img);
    }

    #[test]
    fn attribute_parse() {
        assert_eq!(AttributeLabel::parse("1, 0,1").unwrap().bits(), &[1, 0, 1]);
        assert!(AttributeLabel::parse("1,2").is_err());
        assert_eq!(AttributeLabel::parse("0,1").unwrap().to_string(), "0,1");
    }

    #[test]
    fn landmark_sidecar_parse() {
        let l = LandmarkSet::parse("1 2\n# c\n3.5 4\n").unwrap();
        assert_eq!(l.points, vec![(1.0, 2.0), (3.5, 4.0)]);
        assert!(LandmarkSet::parse("1 2 3").is_err());
        assert!(l.check_bounds(5, 5).is_ok());
        assert!(l.check_bounds(4, 3).is_err());
    }

    proptest! {
        #[test]
        fn argmax_inverts_one_hot(h in 1usize..9, w in 1usize..9, k in 2usize..6, seed in any::<u64>()) {
            let idx: Vec<i64> = (0..h * w).map(|i| ((seed >> (i % 60)).wrapping_add(i as u64 * 7) % k as u64) as i64).collect();
            let m = one_hot_encode(&idx, h, w, k).unwrap();
            let back = argmax_decode(h, w, k, &m.to_one_hot()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn normalization_round_trips(raw in proptest::collection::vec(0i64..=255, 3)) {
            let img = normalize_image(1, 1, &raw).unwrap();
            let back: Vec<i64> = denormalize_image(&img).into_iter().map(i64::from).collect();
            prop_assert_eq!(back, raw);
        }

        #[test]
        fn normalization_is_monotone(a in 0i64..=255, b in 0i64..=255) {
            let img = normalize_image(1, 1, &[a, b, 0]).unwrap();
            prop_assert_eq!(a.cmp(&b), img.data()[0].partial_cmp(&img.data()[1]).unwrap());
        }
    }
}
