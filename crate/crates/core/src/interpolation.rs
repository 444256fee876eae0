//! Input sweeps for the generator: latent interpolation, landmark-domain spatial
//! interpolation (every frame a valid one-hot map) and attribute sweeps.

use sha2::{Digest, Sha256};

use crate::data::template::{landmarks_to_segmentation, RegionTemplate};
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::types::{AttributeLabel, ImageTensor, LandmarkSet, LatentVector, SegmentationMap};

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidValue(format!("interpolation parameter {t} outside [0, 1]")));
    }
    Ok(())
}

/// Uniform grid of `steps` values from 0 to 1 inclusive.
pub fn t_grid(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::InvalidValue(format!("need at least 2 steps, got {steps}")));
    }
    Ok((0..steps).map(|i| if i == steps - 1 { 1.0 } else { i as f64 / (steps - 1) as f64 }).collect())
}

/// `(1 - t) z0 + t z1`; the endpoints are returned unchanged.
pub fn lerp_latent(z0: &LatentVector, z1: &LatentVector, t: f64) -> Result<LatentVector> {
    check_t(t)?;
    if z0.len() != z1.len() {
        return Err(Error::Shape(format!("latent lengths differ: {} vs {}", z0.len(), z1.len())));
    }
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(z1.clone());
    }
    LatentVector::new(
        z0.values()
            .iter()
            .zip(z1.values())
            .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
            .collect(),
    )
}

/// Pointwise `(1 - t) l0[k] + t l1[k]`; the endpoints are returned unchanged.
pub fn lerp_landmarks(l0: &LandmarkSet, l1: &LandmarkSet, t: f64) -> Result<LandmarkSet> {
    check_t(t)?;
    if l0.len() != l1.len() {
        return Err(Error::Shape(format!("landmark counts differ: {} vs {}", l0.len(), l1.len())));
    }
    if t == 0.0 {
        return Ok(l0.clone());
    }
    if t == 1.0 {
        return Ok(l1.clone());
    }
    Ok(LandmarkSet::new(
        l0.points
            .iter()
            .zip(&l1.points)
            .map(|(&(x0, y0), &(x1, y1))| ((1.0 - t) * x0 + t * x1, (1.0 - t) * y0 + t * y1))
            .collect(),
    ))
}

/// Rasterized maps of landmark sets interpolated over a uniform grid.
pub fn segmentation_sequence(
    l0: &LandmarkSet,
    l1: &LandmarkSet,
    steps: usize,
    template: &RegionTemplate,
    height: usize,
    width: usize,
) -> Result<Vec<SegmentationMap>> {
    t_grid(steps)?
        .into_iter()
        .map(|t| landmarks_to_segmentation(&lerp_landmarks(l0, l1, t)?, height, width, template))
        .collect()
}

/// Channel-space blend of two one-hot maps in `(height, width, class)` order.
///
/// Shown only to illustrate why maps are interpolated through landmarks: the result
/// is generally not one-hot and is not a valid generator input.
pub fn channel_space_lerp(a: &SegmentationMap, b: &SegmentationMap, t: f64) -> Result<Vec<f32>> {
    check_t(t)?;
    if (a.height(), a.width(), a.classes()) != (b.height(), b.width(), b.classes()) {
        return Err(Error::Shape("maps differ in size or class count".into()));
    }
    Ok(a.to_one_hot()
        .iter()
        .zip(b.to_one_hot())
        .map(|(&x, y)| ((1.0 - t) * x as f64 + t * y as f64) as f32)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentInput {
    Fixed(LatentVector),
    Lerp(LatentVector, LatentVector),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelInput {
    Fixed(AttributeLabel),
    /// One frame per label, in order.
    Sweep(Vec<AttributeLabel>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpatialInput {
    Fixed(SegmentationMap),
    Landmarks { from: LandmarkSet, to: LandmarkSet, template: RegionTemplate },
}

/// What to render. Exactly one input may vary, or latent and spatial inputs
/// together for a `steps x steps` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationSpec {
    pub latent: LatentInput,
    pub labels: LabelInput,
    pub spatial: SpatialInput,
    pub steps: usize,
}

/// One rendered frame with its resolved inputs. `t` is the position along the
/// varied axis (`t2` along the second axis of a grid).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub t: f64,
    pub t2: Option<f64>,
    pub z: LatentVector,
    pub c: AttributeLabel,
    pub s: SegmentationMap,
    pub image: ImageTensor,
}

impl InterpolationSpec {
    fn varies(&self) -> (bool, bool, bool) {
        (
            matches!(self.latent, LatentInput::Lerp(..)),
            matches!(self.labels, LabelInput::Sweep(..)),
            matches!(self.spatial, SpatialInput::Landmarks { .. }),
        )
    }

    /// Content hash of the spec, stable across runs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let put_f32 = |h: &mut Sha256, v: &[f32]| v.iter().for_each(|x| h.update(x.to_le_bytes()));
        match &self.latent {
            LatentInput::Fixed(z) => {
                h.update(b"zf");
                put_f32(&mut h, z.values());
            }
            LatentInput::Lerp(a, b) => {
                h.update(b"zl");
                put_f32(&mut h, a.values());
                put_f32(&mut h, b.values());
            }
        }
        match &self.labels {
            LabelInput::Fixed(c) => {
                h.update(b"cf");
                h.update(c.bits());
            }
            LabelInput::Sweep(cs) => {
                h.update(b"cs");
                for c in cs {
                    h.update(c.bits());
                    h.update(b";");
                }
            }
        }
        match &self.spatial {
            SpatialInput::Fixed(s) => {
                h.update(b"sf");
                h.update((s.height() as u64).to_le_bytes());
                h.update((s.classes() as u64).to_le_bytes());
                h.update(s.indices());
            }
            SpatialInput::Landmarks { from, to, template } => {
                h.update(b"sl");
                h.update(template.id.as_bytes());
                for (x, y) in from.points.iter().chain(&to.points) {
                    h.update(x.to_le_bytes());
                    h.update(y.to_le_bytes());
                }
            }
        }
        h.update((self.steps as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Resolved `(t, t2, z, c, s)` inputs for every frame.
    #[allow(clippy::type_complexity)]
    pub fn inputs(&self, height: usize, width: usize) -> Result<Vec<(f64, Option<f64>, LatentVector, AttributeLabel, SegmentationMap)>> {
        let (vz, vc, vs) = self.varies();
        let varied = [vz, vc, vs].iter().filter(|&&v| v).count();
        if varied == 0 {
            return Err(Error::InvalidValue("interpolation spec varies no input".into()));
        }
        if vc && varied > 1 {
            return Err(Error::InvalidValue("an attribute sweep cannot be combined with other sweeps".into()));
        }
        let latent_at = |t: f64| match &self.latent {
            LatentInput::Fixed(z) => Ok(z.clone()),
            LatentInput::Lerp(a, b) => lerp_latent(a, b, t),
        };
        let spatial_at = |t: f64| match &self.spatial {
            SpatialInput::Fixed(s) => Ok(s.clone()),
            SpatialInput::Landmarks { from, to, template } => {
                landmarks_to_segmentation(&lerp_landmarks(from, to, t)?, height, width, template)
            }
        };
        let mut out = Vec::new();
        match &self.labels {
            LabelInput::Sweep(labels) => {
                if labels.is_empty() {
                    return Err(Error::InvalidValue("attribute sweep has no labels".into()));
                }
                let (z, s) = (latent_at(0.0)?, spatial_at(0.0)?);
                let n = labels.len();
                for (i, c) in labels.iter().enumerate() {
                    let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                    out.push((t, None, z.clone(), c.clone(), s.clone()));
                }
            }
            LabelInput::Fixed(c) => {
                let grid = t_grid(self.steps)?;
                if vz && vs {
                    for &ts in &grid {
                        let s = spatial_at(ts)?;
                        for &tz in &grid {
                            out.push((tz, Some(ts), latent_at(tz)?, c.clone(), s.clone()));
                        }
                    }
                } else {
                    for &t in &grid {
                        out.push((t, None, latent_at(t)?, c.clone(), spatial_at(t)?));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Renders the sweep described by `spec`.
pub fn generate_interpolation(bundle: &ModelBundle, spec: &InterpolationSpec) -> Result<Vec<Frame>> {
    let size = bundle.arch().image_size;
    let inputs = spec.inputs(size, size)?;
    let mut frames = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(16) {
        let z: Vec<_> = chunk.iter().map(|x| x.2.clone()).collect();
        let c: Vec<_> = chunk.iter().map(|x| x.3.clone()).collect();
        let s: Vec<_> = chunk.iter().map(|x| x.4.clone()).collect();
        let images = bundle.generator.generate(&z, &c, &s)?;
        for ((t, t2, z, c, s), image) in chunk.iter().cloned().zip(images) {
            frames.push(Frame { index: frames.len(), t, t2, z, c, s, image });
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_face_template, reference_face};
    use crate::networks::ArchConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn latent_lerp_examples() {
        let z0 = LatentVector::new(vec![0.0, 0.0]).unwrap();
        let z1 = LatentVector::new(vec![2.0, 4.0]).unwrap();
        assert_eq!(lerp_latent(&z0, &z1, 0.5).unwrap().values(), &[1.0, 2.0]);
        assert_eq!(lerp_latent(&z0, &z1, 0.0).unwrap(), z0);
        assert!(lerp_latent(&z0, &z1, 1.5).is_err());
        assert!(lerp_latent(&z0, &LatentVector::new(vec![1.0]).unwrap(), 0.5).is_err());
        let seq: Vec<f32> = t_grid(9).unwrap().iter().map(|&t| lerp_latent(&z0, &z1, t).unwrap().values()[1]).collect();
        assert!(seq.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn landmark_lerp_examples() {
        let a = LandmarkSet::new(vec![(10.0, 20.0)]);
        let b = LandmarkSet::new(vec![(30.0, 40.0)]);
        assert_eq!(lerp_landmarks(&a, &b, 0.25).unwrap().points, vec![(15.0, 25.0)]);
        assert_eq!(lerp_landmarks(&a, &b, 1.0).unwrap(), b);
        assert!(lerp_landmarks(&a, &LandmarkSet::new(vec![]), 0.5).is_err());
    }

    #[test]
    fn landmark_sequence_frames_are_one_hot_but_channel_blends_are_not() {
        let t = build_face_template();
        let a = reference_face(32, -0.8, 0.0);
        let b = reference_face(32, 0.8, 1.0);
        let frames = segmentation_sequence(&a, &b, 6, &t, 32, 32).unwrap();
        assert_eq!(frames.len(), 6);
        assert_eq!(frames[0], landmarks_to_segmentation(&a, 32, 32, &t).unwrap());
        assert_eq!(frames[5], landmarks_to_segmentation(&b, 32, 32, &t).unwrap());
        for f in &frames {
            assert!(f.to_one_hot().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let blend = channel_space_lerp(&frames[0], &frames[5], 0.5).unwrap();
        assert!(blend.iter().any(|&v| v == 0.5));
        assert!(segmentation_sequence(&a, &b, 1, &t, 32, 32).is_err());
    }

    #[test]
    fn centroid_follows_a_moving_square() {
        let square = |x: f64, y: f64| LandmarkSet::new(vec![(x, y), (x + 6.0, y), (x + 6.0, y + 6.0), (x, y + 6.0)]);
        let template = RegionTemplate {
            id: "square".into(),
            n_points: 4,
            n_s: 2,
            class_names: vec!["bg".into(), "sq".into()],
            regions: vec![crate::data::template::Region { name: "sq".into(), class: 1, points: vec![0, 1, 2, 3] }],
            mirror_classes: vec![],
        };
        let frames = segmentation_sequence(&square(2.2, 3.1), &square(20.7, 14.4), 7, &template, 32, 32).unwrap();
        let centroid = |m: &SegmentationMap| {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for (p, &c) in m.indices().iter().enumerate() {
                if c == 1 {
                    sx += (p % 32) as f64 + 0.5;
                    sy += (p / 32) as f64 + 0.5;
                    n += 1.0;
                }
            }
            (sx / n, sy / n)
        };
        let (c0, c1) = (centroid(&frames[0]), centroid(&frames[6]));
        for (k, f) in frames.iter().enumerate() {
            let t = k as f64 / 6.0;
            let (cx, cy) = centroid(f);
            assert!((cx - ((1.0 - t) * c0.0 + t * c1.0)).abs() <= 1.0);
            assert!((cy - ((1.0 - t) * c0.1 + t * c1.1)).abs() <= 1.0);
        }
    }

    #[test]
    fn sweeps_render_expected_frame_counts() {
        let arch = ArchConfig { image_size: 32, n_s: 7, n_c: 2, n_z: 4, base_channels: 4, ..ArchConfig::reference(7, 2) };
        let bundle = ModelBundle::new(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = LatentVector::sample(4, &mut rng);
        let c = AttributeLabel::new(vec![1, 0]).unwrap();
        let spatial = SpatialInput::Landmarks {
            from: reference_face(32, -0.5, 0.0),
            to: reference_face(32, 0.5, 1.0),
            template: build_face_template(),
        };
        let spec = InterpolationSpec {
            latent: LatentInput::Fixed(z.clone()),
            labels: LabelInput::Fixed(c.clone()),
            spatial: spatial.clone(),
            steps: 8,
        };
        let frames = generate_interpolation(&bundle, &spec).unwrap();
        assert_eq!(frames.len(), 8);
        assert_eq!(frames, generate_interpolation(&bundle, &spec).unwrap());

        let fixed_s = SpatialInput::Fixed(frames[0].s.clone());
        let labels = vec![c.clone(), AttributeLabel::new(vec![0, 1]).unwrap(), AttributeLabel::new(vec![1, 1]).unwrap()];
        let sweep = InterpolationSpec {
            latent: LatentInput::Fixed(z.clone()),
            labels: LabelInput::Sweep(labels),
            spatial: fixed_s.clone(),
            steps: 2,
        };
        assert_eq!(generate_interpolation(&bundle, &sweep).unwrap().len(), 3);

        let grid = InterpolationSpec {
            latent: LatentInput::Lerp(z.clone(), LatentVector::sample(4, &mut rng)),
            labels: LabelInput::Fixed(c.clone()),
            spatial,
            steps: 3,
        };
        assert_eq!(generate_interpolation(&bundle, &grid).unwrap().len(), 9);
        assert_ne!(grid.digest(), spec.digest());

        let nothing = InterpolationSpec { latent: LatentInput::Fixed(z), labels: LabelInput::Fixed(c), spatial: fixed_s, steps: 4 };
        assert!(generate_interpolation(&bundle, &nothing).is_err());
    }
}
