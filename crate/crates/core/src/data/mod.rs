//! Datasets: in-memory joint samples, manifest I/O, batch sampling, landmark
//! templates and the procedural shapes set.

pub mod shapes;
pub mod template;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::types::{denormalize_image, normalize_image, AttributeLabel, ImageTensor, JointSample, LandmarkSet, SegmentationMap};

pub use shapes::{generate_shapes_dataset, ShapesConfig};
pub use template::{build_face_template, landmarks_to_segmentation, template_by_id, RegionTemplate};

/// A fully loaded collection of joint samples sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub n_s: usize,
    pub n_c: usize,
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    /// Class relabeling applied together with a horizontal flip.
    pub mirror_table: Vec<u8>,
    pub samples: Vec<JointSample>,
}

impl Dataset {
    pub fn new(image_size: usize, n_s: usize, n_c: usize, samples: Vec<JointSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.image.height() != image_size || s.image.width() != image_size {
                return Err(Error::Shape(format!(
                    "sample {i} is {}x{}, dataset size is {image_size}",
                    s.image.height(),
                    s.image.width()
                )));
            }
            if s.segmentation.classes() != n_s {
                return Err(Error::Shape(format!("sample {i} has {} classes, expected {n_s}", s.segmentation.classes())));
            }
            if s.label.len() != n_c {
                return Err(Error::Shape(format!("sample {i} has {} attributes, expected {n_c}", s.label.len())));
            }
        }
        Ok(Self {
            image_size,
            n_s,
            n_c,
            class_names: (0..n_s).map(|i| format!("class{i}")).collect(),
            attribute_names: (0..n_c).map(|i| format!("attr{i}")).collect(),
            mirror_table: (0..n_s as u8).collect(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `n` samples as a second dataset.
    pub fn split_off(&mut self, n: usize) -> Dataset {
        let tail = self.samples.split_off(self.samples.len().saturating_sub(n));
        Dataset { samples: tail, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            image_size: self.image_size,
            n_s: self.n_s,
            n_c: self.n_c,
            class_names: self.class_names.clone(),
            attribute_names: self.attribute_names.clone(),
            mirror_table: self.mirror_table.clone(),
            samples: Vec::new(),
        }
    }

    /// Horizontally mirrored copy of sample `i`.
    pub fn flipped(&self, i: usize) -> Result<JointSample> {
        let s = &self.samples[i];
        let size = self.image_size;
        let mut data = Vec::with_capacity(s.image.data().len());
        for r in 0..size {
            for c in (0..size).rev() {
                data.extend_from_slice(&s.image.pixel(r, c));
            }
        }
        JointSample::new(
            ImageTensor::new(size, size, data)?,
            s.label.clone(),
            s.segmentation.flip_horizontal().relabel(&self.mirror_table)?,
        )
    }

    pub fn segmentations(&self) -> Vec<SegmentationMap> {
        self.samples.iter().map(|s| s.segmentation.clone()).collect()
    }
}

// ---- manifests -------------------------------------------------------------

/// Where and how to load a manifest-described dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Directory that relative manifest paths resolve against (defaults to the
    /// manifest's directory).
    pub root: Option<PathBuf>,
    pub manifest: PathBuf,
    pub image_size: usize,
    pub n_s: usize,
    pub n_c: usize,
    pub attribute_names: Vec<String>,
    /// Template used for landmark sidecar segmentations (`*.txt` / `*.pts`).
    pub template: Option<String>,
}

/// One manifest line: `image_path<TAB or spaces>segmentation_path<...>bits`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub line: usize,
    pub image: PathBuf,
    pub segmentation: PathBuf,
    pub label: AttributeLabel,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                row: line_no,
                message: format!("expected 3 fields (image, segmentation, bits), found {}", fields.len()),
            });
        }
        let label = AttributeLabel::parse(fields[2])
            .map_err(|e| Error::Manifest { row: line_no, message: e.to_string() })?;
        rows.push(ManifestRow { line: line_no, image: fields[0].into(), segmentation: fields[1].into(), label });
    }
    Ok(rows)
}

pub fn load_rgb(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::Shape(format!("{} is {}x{}, expected {size}x{size}", path.display(), img.width(), img.height())));
    }
    let raw: Vec<i64> = img.as_raw().iter().map(|&v| v as i64).collect();
    normalize_image(size, size, &raw)
}

pub fn load_index_map(path: &Path, size: usize, n_s: usize) -> Result<SegmentationMap> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    let img = img.as_luma8().ok_or_else(|| {
        Error::InvalidValue(format!("{} is not a single-channel 8-bit index image", path.display()))
    })?;
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::Shape(format!("{} is {}x{}, expected {size}x{size}", path.display(), img.width(), img.height())));
    }
    SegmentationMap::from_indices(size, size, n_s, img.as_raw().clone())
}

/// Reads every manifest row eagerly and validates it.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.attribute_names.len() != spec.n_c && !spec.attribute_names.is_empty() {
        return Err(Error::Config(format!(
            "{} attribute names for n_c = {}",
            spec.attribute_names.len(),
            spec.n_c
        )));
    }
    let text = fs::read_to_string(&spec.manifest).map_err(|e| Error::io(&spec.manifest, e))?;
    let root = spec
        .root
        .clone()
        .unwrap_or_else(|| spec.manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let template = spec.template.as_deref().map(template_by_id).transpose()?;
    if let Some(t) = &template {
        if t.n_s != spec.n_s {
            return Err(Error::Config(format!("template '{}' has n_s = {}, dataset says {}", t.id, t.n_s, spec.n_s)));
        }
    }
    let mut samples = Vec::new();
    for row in parse_manifest(&text)? {
        let wrap = |e: Error| Error::Manifest { row: row.line, message: e.to_string() };
        if row.label.len() != spec.n_c {
            return Err(wrap(Error::Shape(format!("{} attribute bits, expected {}", row.label.len(), spec.n_c))));
        }
        let image = load_rgb(&root.join(&row.image), spec.image_size).map_err(wrap)?;
        let seg_path = root.join(&row.segmentation);
        let is_sidecar = matches!(seg_path.extension().and_then(|e| e.to_str()), Some("txt" | "pts"));
        let segmentation = if is_sidecar {
            let t = template.as_ref().ok_or_else(|| {
                wrap(Error::Config("landmark sidecar given but no template configured".into()))
            })?;
            let text = fs::read_to_string(&seg_path).map_err(|e| wrap(Error::io(&seg_path, e)))?;
            let landmarks = LandmarkSet::parse(&text).map_err(wrap)?;
            landmarks_to_segmentation(&landmarks, spec.image_size, spec.image_size, t).map_err(wrap)?
        } else {
            load_index_map(&seg_path, spec.image_size, spec.n_s).map_err(wrap)?
        };
        samples.push(JointSample::new(image, row.label, segmentation).map_err(wrap)?);
    }
    let mut ds = Dataset::new(spec.image_size, spec.n_s, spec.n_c, samples)?;
    if !spec.attribute_names.is_empty() {
        ds.attribute_names = spec.attribute_names.clone();
    }
    if let Some(t) = template {
        ds.class_names = t.class_names.clone();
        ds.mirror_table = t.mirror_table();
    }
    Ok(ds)
}

pub fn save_rgb_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, denormalize_image(image))
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn save_index_png(map: &SegmentationMap, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, map.indices().to_vec())
        .ok_or_else(|| Error::Shape("index map size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

/// Writes PNG images, index maps and a `manifest.txt` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "segmentations"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::from("# image segmentation attributes\n");
    for (i, s) in ds.samples.iter().enumerate() {
        let img = format!("images/{i:05}.png");
        let seg = format!("segmentations/{i:05}.png");
        save_rgb_png(&s.image, &dir.join(&img))?;
        save_index_png(&s.segmentation, &dir.join(&seg))?;
        manifest.push_str(&format!("{img}\t{seg}\t{}\n", s.label));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---- sampling --------------------------------------------------------------

/// Draws batches without replacement; the permutation is redrawn once fewer than
/// a full batch of unseen indices remain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    pub flip: bool,
}

impl BatchSampler {
    pub fn new(len: usize) -> Self {
        Self { order: (0..len).collect(), cursor: len, flip: false }
    }

    pub fn next_indices(&mut self, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if m == 0 || m > self.order.len() {
            return Err(Error::InvalidValue(format!(
                "cannot draw a batch of {m} from {} samples",
                self.order.len()
            )));
        }
        if self.cursor + m > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + m].to_vec();
        self.cursor += m;
        Ok(out)
    }

    /// Next batch of samples; with `flip` set each one is mirrored with probability 1/2.
    pub fn next_batch(&mut self, ds: &Dataset, m: usize, rng: &mut impl Rng) -> Result<Vec<JointSample>> {
        if self.order.len() != ds.len() {
            return Err(Error::InvalidState("sampler was built for a different dataset".into()));
        }
        let idx = self.next_indices(m, rng)?;
        idx.into_iter()
            .map(|i| if self.flip && rng.random_bool(0.5) { ds.flipped(i) } else { Ok(ds.samples[i].clone()) })
            .collect()
    }
}

/// One-shot batch draw (fresh permutation): `m` distinct samples.
pub fn sample_batch(ds: &Dataset, m: usize, rng: &mut impl Rng) -> Result<Vec<JointSample>> {
    BatchSampler::new(ds.len()).next_batch(ds, m, rng)
}

/// Stacks samples into `(images, labels, one-hot segmentations)` tensors.
pub fn stack<T: Float>(batch: &[JointSample]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let images: Vec<ImageTensor> = batch.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<AttributeLabel> = batch.iter().map(|s| s.label.clone()).collect();
    let segs: Vec<SegmentationMap> = batch.iter().map(|s| s.segmentation.clone()).collect();
    Ok((ImageTensor::batch(&images)?, AttributeLabel::batch(&labels)?, SegmentationMap::batch(&segs)?))
}

/// Plausible frontal 68-point face on a `size x size` canvas, used for demos and
/// tests. `yaw` in [-1, 1] shifts the inner features sideways; `open` in [0, 1]
/// opens the mouth.
pub fn reference_face(size: usize, yaw: f64, open: f64) -> LandmarkSet {
    let s = size as f64;
    let mut pts = Vec::with_capacity(68);
    let shift = 0.08 * yaw;
    // jaw 0-16: lower half-ellipse from the right ear (image left) to the left ear
    for i in 0..17 {
        let a = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
        pts.push((0.5 + 0.38 * a.cos(), 0.42 + 0.48 * a.sin()));
    }
    // brows 17-21 and 22-26
    for (x0, x1) in [(0.2, 0.42), (0.58, 0.8)] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let x = x0 + (x1 - x0) * t;
            pts.push((x + shift, 0.3 - 0.04 * (1.0 - (2.0 * t - 1.0).powi(2))));
        }
    }
    // nose bridge 27-30, nostrils 31-35
    for i in 0..4 {
        pts.push((0.5 + shift, 0.38 + 0.06 * i as f64));
    }
    for i in 0..5 {
        let t = i as f64 / 4.0;
        pts.push((0.42 + 0.16 * t + shift, 0.62 + 0.025 * (1.0 - (2.0 * t - 1.0).powi(2))));
    }
    // eyes 36-41 and 42-47
    for cx in [0.32, 0.68] {
        for i in 0..6 {
            let a = std::f64::consts::PI * i as f64 / 3.0;
            pts.push((cx + shift - 0.07 * a.cos(), 0.42 - 0.03 * a.sin()));
        }
    }
    // outer lip 48-59, inner lip 60-67
    let mouth_h = 0.04 + 0.06 * open;
    for i in 0..12 {
        let a = std::f64::consts::PI * i as f64 / 6.0;
        pts.push((0.5 + shift - 0.14 * a.cos(), 0.76 - mouth_h * a.sin()));
    }
    for i in 0..8 {
        let a = std::f64::consts::PI * i as f64 / 4.0;
        pts.push((0.5 + shift - 0.09 * a.cos(), 0.76 - 0.6 * mouth_h * a.sin()));
    }
    LandmarkSet::new(
        pts.into_iter()
            .map(|(x, y)| ((x * s).clamp(0.0, s - 1e-6), (y * s).clamp(0.0, s - 1e-6)))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn tiny() -> Dataset {
        generate_shapes_dataset(&ShapesConfig { count: 100, image_size: 16, ..Default::default() }).unwrap()
    }

    #[test]
    fn manifest_parsing() {
        let rows = parse_manifest("# header\na.png\tb.png\t1,0\n\nc.png d.png 0,1\ne.png f.png 1,1\n").unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].line, 4);
        assert!(matches!(parse_manifest("a.png b.png"), Err(Error::Manifest { row: 1, .. })));
        assert!(matches!(parse_manifest("\na b 1,2"), Err(Error::Manifest { row: 2, .. })));
    }

    #[test]
    fn batch_indices_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BatchSampler::new(100);
        let idx = s.next_indices(16, &mut rng).unwrap();
        assert_eq!(idx.iter().collect::<HashSet<_>>().len(), 16);
        // a full epoch without repeats
        let mut seen: HashSet<usize> = idx.into_iter().collect();
        for _ in 0..5 {
            seen.extend(s.next_indices(16, &mut rng).unwrap());
        }
        assert_eq!(seen.len(), 96);
        assert!(s.next_indices(101, &mut rng).is_err());
        assert!(s.next_indices(0, &mut rng).is_err());
    }

    #[test]
    fn write_and_reload_round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let spec = DatasetSpec {
            root: None,
            manifest,
            image_size: 16,
            n_s: 4,
            n_c: 3,
            attribute_names: vec![],
            template: None,
        };
        let back = load_dataset(&spec).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.segmentation, b.segmentation);
            assert_eq!(a.label, b.label);
            assert_eq!(denormalize_image(&a.image), denormalize_image(&b.image));
        }
        let wrong = DatasetSpec { n_c: 2, ..spec.clone() };
        assert!(matches!(load_dataset(&wrong), Err(Error::Manifest { row: 2, .. })));
        fs::remove_file(dir.path().join("images/00001.png")).unwrap();
        let err = load_dataset(&spec).unwrap_err().to_string();
        assert!(err.contains("manifest row 3"), "{err}");
    }

    #[test]
    fn landmark_sidecars_load_through_template() {
        let dir = tempfile::tempdir().unwrap();
        let size = 32;
        let img = ImageTensor::new(size, size, vec![0.0; size * size * 3]).unwrap();
        save_rgb_png(&img, &dir.path().join("a.png")).unwrap();
        fs::write(dir.path().join("a.txt"), reference_face(size, 0.0, 0.0).to_text()).unwrap();
        fs::write(dir.path().join("m.txt"), "a.png a.txt 1,0,1,0,0\n").unwrap();
        let spec = DatasetSpec {
            root: None,
            manifest: dir.path().join("m.txt"),
            image_size: size,
            n_s: 7,
            n_c: 5,
            attribute_names: vec![],
            template: Some("face68".into()),
        };
        let ds = load_dataset(&spec).unwrap();
        let classes: HashSet<u8> = ds.samples[0].segmentation.indices().iter().copied().collect();
        assert_eq!(classes.len(), 7, "{classes:?}");
        let flipped = ds.flipped(0).unwrap();
        let left = ds.samples[0].segmentation.indices().iter().filter(|&&c| c == 2).count();
        let right_after = flipped.segmentation.indices().iter().filter(|&&c| c == 3).count();
        assert_eq!(left, right_after);
    }

    #[test]
    fn face_segmentation_is_valid_under_jitter() {
        let t = build_face_template();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = reference_face(32, 0.0, 0.0);
        for _ in 0..1000 {
            let pts = base
                .points
                .iter()
                .map(|&(x, y)| {
                    ((x + rng.random_range(-1.5..1.5)).clamp(0.0, 31.99), (y + rng.random_range(-1.5..1.5)).clamp(0.0, 31.99))
                })
                .collect();
            let m = landmarks_to_segmentation(&LandmarkSet::new(pts), 32, 32, &t).unwrap();
            let dense = m.to_one_hot();
            for px in dense.chunks(7) {
                assert_eq!(px.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(px.iter().filter(|&&v| v == 0.0).count(), 6);
            }
        }
    }
}
