//! Polygon region templates over landmark sets and their rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LandmarkSet, SegmentationMap};

/// One closed polygon over landmark indices, filled with `class`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub class: u8,
    pub points: Vec<usize>,
}

/// Ordered region list; later regions overwrite earlier ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTemplate {
    pub id: String,
    pub n_points: usize,
    pub n_s: usize,
    pub class_names: Vec<String>,
    pub regions: Vec<Region>,
    /// Class pairs exchanged by a horizontal flip (e.g. left/right brow).
    pub mirror_classes: Vec<(u8, u8)>,
}

impl RegionTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.n_s {
            return Err(Error::Template(format!("{} class names for n_s = {}", self.class_names.len(), self.n_s)));
        }
        for r in &self.regions {
            if r.class == 0 || r.class as usize >= self.n_s {
                return Err(Error::Template(format!("region {} uses class {} outside 1..{}", r.name, r.class, self.n_s)));
            }
            if r.points.len() < 3 {
                return Err(Error::Template(format!("region {} has fewer than 3 points", r.name)));
            }
            if let Some(&p) = r.points.iter().find(|&&p| p >= self.n_points) {
                return Err(Error::Template(format!(
                    "region {} references landmark {p} but the template has {} points",
                    r.name, self.n_points
                )));
            }
        }
        for &(a, b) in &self.mirror_classes {
            if a as usize >= self.n_s || b as usize >= self.n_s {
                return Err(Error::Template(format!("mirror pair ({a}, {b}) out of range")));
            }
        }
        Ok(())
    }

    /// Class relabeling applied alongside a horizontal flip.
    pub fn mirror_table(&self) -> Vec<u8> {
        let mut table: Vec<u8> = (0..self.n_s as u8).collect();
        for &(a, b) in &self.mirror_classes {
            table[a as usize] = b;
            table[b as usize] = a;
        }
        table
    }
}

/// Six-region face template over the 68-point landmark convention (n_s = 7).
///
/// | class | region     | landmark indices                      |
/// |-------|------------|---------------------------------------|
/// | 1     | face hull  | jaw 0-16, then brows 26 down to 17    |
/// | 2     | left brow  | 22-26                                 |
/// | 3     | right brow | 17-21                                 |
/// | 4     | eyes       | 36-41 and 42-47 (two polygons)        |
/// | 5     | nose       | 27, 31-35                             |
/// | 6     | mouth      | outer lip ring 48-59                  |
///
/// "Left" and "right" are from the subject's point of view.
pub fn build_face_template() -> RegionTemplate {
    let region = |name: &str, class: u8, points: Vec<usize>| Region { name: name.into(), class, points };
    let hull: Vec<usize> = (0..=16).chain((17..=26).rev()).collect();
    RegionTemplate {
        id: "face68".into(),
        n_points: 68,
        n_s: 7,
        class_names: ["background", "face", "left_brow", "right_brow", "eyes", "nose", "mouth"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        regions: vec![
            region("face", 1, hull),
            region("left_brow", 2, (22..=26).collect()),
            region("right_brow", 3, (17..=21).collect()),
            region("right_eye", 4, (36..=41).collect()),
            region("left_eye", 4, (42..=47).collect()),
            region("nose", 5, vec![27, 31, 32, 33, 34, 35]),
            region("mouth", 6, (48..=59).collect()),
        ],
        mirror_classes: vec![(2, 3)],
    }
}

/// Looks a template up by id.
pub fn template_by_id(id: &str) -> Result<RegionTemplate> {
    match id {
        "face68" => Ok(build_face_template()),
        other => Err(Error::Template(format!("unknown template '{other}'"))),
    }
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        / 2.0
}

/// Even-odd crossing test of a point against a closed polygon (boundary excluded).
pub fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// True when `(x, y)` lies exactly on the segment `a`-`b`.
pub fn on_segment(a: (f64, f64), b: (f64, f64), x: f64, y: f64) -> bool {
    let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
    cross == 0.0 && x >= a.0.min(b.0) && x <= a.0.max(b.0) && y >= a.1.min(b.1) && y <= a.1.max(b.1)
}

/// Pixels of an `h x w` grid whose centre lies inside the polygon or on its boundary.
///
/// Scanline fill: for each row, edge crossings at the row's centre line are sorted
/// and a pixel is inside when an odd number of crossings lies to its right. Zero-area
/// polygons produce no pixels.
pub fn rasterize_polygon(poly: &[(f64, f64)], h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    if poly.len() < 3 || signed_area(poly) == 0.0 {
        return mask;
    }
    let n = poly.len();
    let mut crossings = Vec::with_capacity(n);
    for row in 0..h {
        let y = row as f64 + 0.5;
        crossings.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[j];
            if (yi > y) != (yj > y) {
                crossings.push((xj - xi) * (y - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        for col in 0..w {
            let x = col as f64 + 0.5;
            let right = crossings.len() - crossings.partition_point(|&c| c <= x);
            if right % 2 == 1 {
                mask[row * w + col] = true;
            }
        }
    }
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let c0 = (a.0.min(b.0) - 0.5).ceil().max(0.0) as usize;
        let c1 = (a.0.max(b.0) - 0.5).floor();
        let r0 = (a.1.min(b.1) - 0.5).ceil().max(0.0) as usize;
        let r1 = (a.1.max(b.1) - 0.5).floor();
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        for row in r0..=(r1 as usize).min(h.saturating_sub(1)) {
            for col in c0..=(c1 as usize).min(w.saturating_sub(1)) {
                if on_segment(a, b, col as f64 + 0.5, row as f64 + 0.5) {
                    mask[row * w + col] = true;
                }
            }
        }
    }
    mask
}

/// Fills every template region in order; uncovered pixels stay background.
pub fn landmarks_to_segmentation(
    landmarks: &LandmarkSet,
    height: usize,
    width: usize,
    template: &RegionTemplate,
) -> Result<SegmentationMap> {
    template.validate()?;
    if landmarks.len() != template.n_points {
        return Err(Error::Template(format!(
            "template '{}' needs {} landmarks, got {}",
            template.id,
            template.n_points,
            landmarks.len()
        )));
    }
    landmarks.check_bounds(height, width)?;
    let mut indices = vec![0u8; height * width];
    for region in &template.regions {
        let poly: Vec<(f64, f64)> = region.points.iter().map(|&i| landmarks.points[i]).collect();
        for (dst, inside) in indices.iter_mut().zip(rasterize_polygon(&poly, height, width)) {
            if inside {
                *dst = region.class;
            }
        }
    }
    SegmentationMap::from_indices(height, width, template.n_s, indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(poly: &[(f64, f64)], h: usize, w: usize) -> Vec<bool> {
        let n = poly.len();
        let mut area2 = 0.0;
        for i in 0..n {
            area2 += poly[i].0 * poly[(i + 1) % n].1 - poly[(i + 1) % n].0 * poly[i].1;
        }
        let mut out = vec![false; h * w];
        if area2 == 0.0 {
            return out;
        }
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                let edge = (0..n).any(|i| on_segment(poly[i], poly[(i + 1) % n], x, y));
                out[r * w + c] = edge || point_in_polygon(poly, x, y);
            }
        }
        out
    }

    fn triangle_template() -> RegionTemplate {
        RegionTemplate {
            id: "tri".into(),
            n_points: 3,
            n_s: 2,
            class_names: vec!["background".into(), "tri".into()],
            regions: vec![Region { name: "tri".into(), class: 1, points: vec![0, 1, 2] }],
            mirror_classes: vec![],
        }
    }

    #[test]
    fn triangle_on_two_by_two() {
        let l = LandmarkSet::new(vec![(0.5, 0.5), (1.5, 0.5), (0.5, 1.5)]);
        let m = landmarks_to_segmentation(&l, 2, 2, &triangle_template()).unwrap();
        assert_eq!(m.indices(), &[1, 1, 1, 0]);
    }

    #[test]
    fn collinear_region_is_empty() {
        let l = LandmarkSet::new(vec![(0.5, 0.5), (1.0, 1.0), (1.5, 1.5)]);
        let m = landmarks_to_segmentation(&l, 2, 2, &triangle_template()).unwrap();
        assert!(m.indices().iter().all(|&c| c == 0));
    }

    #[test]
    fn malformed_template_rejected() {
        let mut t = triangle_template();
        t.regions[0].points = vec![0, 1, 5];
        let l = LandmarkSet::new(vec![(0.5, 0.5), (1.5, 0.5), (0.5, 1.5)]);
        assert!(matches!(landmarks_to_segmentation(&l, 2, 2, &t), Err(Error::Template(_))));
        let short = LandmarkSet::new(vec![(0.5, 0.5)]);
        assert!(landmarks_to_segmentation(&short, 2, 2, &triangle_template()).is_err());
    }

    #[test]
    fn face_template_shape() {
        let t = build_face_template();
        t.validate().unwrap();
        let classes: std::collections::BTreeSet<u8> = t.regions.iter().map(|r| r.class).collect();
        assert_eq!(classes.len(), 6);
        assert_eq!(t.n_s, 7);
        assert!(t.regions.iter().flat_map(|r| &r.points).all(|&p| p < 68));
        let mouth = t.regions.iter().find(|r| r.name == "mouth").unwrap();
        assert_eq!(mouth.points, (48..=59).collect::<Vec<_>>());
        assert_eq!(t.mirror_table(), vec![0, 1, 3, 2, 4, 5, 6]);
    }

    #[test]
    fn later_regions_overwrite() {
        let mut t = triangle_template();
        t.n_s = 3;
        t.class_names.push("inner".into());
        t.n_points = 6;
        t.regions.push(Region { name: "inner".into(), class: 2, points: vec![3, 4, 5] });
        let l = LandmarkSet::new(vec![(0.0, 0.0), (3.9, 0.0), (0.0, 3.9), (0.5, 0.5), (1.5, 0.5), (0.5, 1.5)]);
        let m = landmarks_to_segmentation(&l, 4, 4, &t).unwrap();
        assert_eq!(m.class_at(0, 0), 2);
        assert_eq!(m.class_at(0, 2), 1);
        assert_eq!(m.class_at(3, 3), 0);
    }

    fn polygon() -> impl Strategy<Value = Vec<(f64, f64)>> {
        // coordinates on a quarter-pixel lattice so that centre/edge ties occur
        proptest::collection::vec((0u32..64, 0u32..64), 3..8)
            .prop_map(|pts| pts.into_iter().map(|(x, y)| (x as f64 / 4.0, y as f64 / 4.0)).collect())
    }

    proptest! {
        #[test]
        fn scanline_matches_brute_force(poly in polygon(), h in 1usize..17, w in 1usize..17) {
            prop_assert_eq!(rasterize_polygon(&poly, h, w), brute_force(&poly, h, w));
        }

        #[test]
        fn scanline_matches_brute_force_continuous(
            poly in proptest::collection::vec((0.0f64..16.0, 0.0f64..16.0), 3..9),
        ) {
            prop_assert_eq!(rasterize_polygon(&poly, 16, 16), brute_force(&poly, 16, 16));
        }
    }
}
