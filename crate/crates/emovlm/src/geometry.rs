//! Facial geometry: compile landmark polygons and a patch grid into region
//! membership masks, and expand membership into patch-to-patch attention
//! masks for the localized micro-expression attention.
//!
//! Membership rule: a patch belongs to a region when the fraction of its
//! pixel centers lying inside the region polygon reaches the configured
//! threshold. Point-in-polygon uses the even-odd rule with the boundary
//! counted as inside (a point exactly on an edge, detected with an exact
//! zero cross product, is in).

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// One face-mesh keypoint in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
}

impl Landmark {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Data(format!(
                "landmark ({x}, {y}) outside the unit square"
            )));
        }
        Ok(Landmark { x, y })
    }
}

/// Number of keypoints in the face-mesh convention used by landmark files.
pub const MESH_POINTS: usize = 468;

/// A named micro-expression region: an ordered landmark-index loop forming a
/// simple polygon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRegion {
    pub name: String,
    pub indices: Vec<usize>,
}

impl FaceRegion {
    pub fn new(name: impl Into<String>, indices: Vec<usize>) -> Self {
        FaceRegion {
            name: name.into(),
            indices,
        }
    }

    /// Resolve the polygon against a landmark set, checking indices and
    /// degeneracy (fewer than 3 distinct points).
    pub fn polygon(&self, landmarks: &[Landmark]) -> Result<Vec<(f64, f64)>> {
        let mut poly = Vec::with_capacity(self.indices.len());
        for &i in &self.indices {
            let lm = landmarks.get(i).ok_or(Error::Index {
                index: i,
                len: landmarks.len(),
            })?;
            poly.push((lm.x, lm.y));
        }
        let mut distinct: Vec<(f64, f64)> = Vec::new();
        for p in &poly {
            if !distinct.contains(p) {
                distinct.push(*p);
            }
        }
        if distinct.len() < 3 {
            return Err(Error::Geometry(format!(
                "region `{}` has {} distinct points, need at least 3",
                self.name,
                distinct.len()
            )));
        }
        Ok(poly)
    }

    /// Full invariant check: valid polygon and no two non-adjacent edges
    /// intersect (simple polygon).
    pub fn validate(&self, landmarks: &[Landmark]) -> Result<()> {
        let poly = self.polygon(landmarks)?;
        let n = poly.len();
        for i in 0..n {
            let a1 = poly[i];
            let a2 = poly[(i + 1) % n];
            for j in i + 1..n {
                // skip adjacent edges (they share a vertex)
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let b1 = poly[j];
                let b2 = poly[(j + 1) % n];
                if segments_intersect(a1, a2, b1, b2) {
                    return Err(Error::Geometry(format!(
                        "region `{}` self-intersects between edges {i} and {j}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Partition of an image into square patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || image_h == 0 || image_w == 0 {
            return Err(Error::Config("patch grid dimensions must be positive".into()));
        }
        if image_h % patch != 0 || image_w % patch != 0 {
            return Err(Error::Config(format!(
                "patch {patch} must divide image {image_h}x{image_w} exactly"
            )));
        }
        Ok(PatchGrid {
            image_h,
            image_w,
            patch,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn n_cols(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.n_rows() * self.n_cols()
    }

    /// Normalized center of pixel (px, py) counted from the top-left.
    pub fn pixel_center(&self, px: usize, py: usize) -> (f64, f64) {
        (
            (px as f64 + 0.5) / self.image_w as f64,
            (py as f64 + 0.5) / self.image_h as f64,
        )
    }
}

/// Boolean patch-to-region membership.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    /// `[n_patches, n_regions]`
    pub membership: Array2<bool>,
    pub grid: PatchGrid,
    pub threshold: f64,
}

/// Boolean patch-to-patch attention permission matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    /// `[n_patches, n_patches]`
    pub allowed: Array2<bool>,
}

impl AttentionMask {
    /// Diagonal all true and no all-false row.
    pub fn validate(&self) -> Result<()> {
        let n = self.allowed.nrows();
        if self.allowed.ncols() != n {
            return Err(Error::Shape {
                context: "attention mask".into(),
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", n, self.allowed.ncols()),
            });
        }
        for i in 0..n {
            if !self.allowed[[i, i]] {
                return Err(Error::Geometry(format!("attention mask diagonal false at {i}")));
            }
            if !self.allowed.row(i).iter().any(|&b| b) {
                return Err(Error::Geometry(format!("attention mask row {i} is all false")));
            }
        }
        Ok(())
    }
}

/// Even-odd point-in-polygon with boundary counted as inside.
pub fn point_in_polygon(pt: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let (px, py) = pt;
    let n = poly.len();
    // boundary test: exact collinearity within the edge's bounding box
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        if cross == 0.0
            && px >= x1.min(x2)
            && px <= x1.max(x2)
            && py >= y1.min(y2)
            && py <= y1.max(y2)
        {
            return true;
        }
    }
    // crossing parity
    let mut inside = false;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        if (y1 > py) != (y2 > py) {
            let x_cross = x1 + (x2 - x1) * (py - y1) / (y2 - y1);
            if px < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_intersect(a1: (f64, f64), a2: (f64, f64), b1: (f64, f64), b2: (f64, f64)) -> bool {
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |d: f64, p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
        d == 0.0
            && r.0 >= p.0.min(q.0)
            && r.0 <= p.0.max(q.0)
            && r.1 >= p.1.min(q.1)
            && r.1 <= p.1.max(q.1)
    };
    on(d1, b1, b2, a1) || on(d2, b1, b2, a2) || on(d3, a1, a2, b1) || on(d4, a1, a2, b2)
}

/// Compile patch-to-region membership: `membership[p, r]` is true when the
/// fraction of patch `p`'s pixel centers inside region `r` reaches
/// `threshold`.
pub fn compile_region_mask(
    landmarks: &[Landmark],
    regions: &[FaceRegion],
    grid: PatchGrid,
    threshold: f64,
) -> Result<RegionMask> {
    if landmarks.is_empty() {
        return Err(Error::Input("landmark set is empty".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Input(format!("threshold {threshold} outside (0, 1]")));
    }
    let polygons: Vec<Vec<(f64, f64)>> = regions
        .iter()
        .map(|r| r.polygon(landmarks))
        .collect::<Result<_>>()?;

    let mut membership = Array2::from_elem((grid.n_patches(), regions.len()), false);
    let pixels_per_patch = (grid.patch * grid.patch) as f64;
    for pr in 0..grid.n_rows() {
        for pc in 0..grid.n_cols() {
            let p = pr * grid.n_cols() + pc;
            for (r, poly) in polygons.iter().enumerate() {
                let mut count = 0usize;
                for dy in 0..grid.patch {
                    for dx in 0..grid.patch {
                        let center =
                            grid.pixel_center(pc * grid.patch + dx, pr * grid.patch + dy);
                        if point_in_polygon(center, poly) {
                            count += 1;
                        }
                    }
                }
                membership[[p, r]] = count as f64 / pixels_per_patch >= threshold;
            }
        }
    }
    Ok(RegionMask {
        membership,
        grid,
        threshold,
    })
}

/// Expand membership into pairwise attention permissions: patches sharing a
/// region may attend to each other, patches in no region fall back to global
/// attention, and self-attention is always permitted.
pub fn expand_to_attention_mask(mask: &RegionMask) -> AttentionMask {
    let n = mask.membership.nrows();
    let n_regions = mask.membership.ncols();
    let mut allowed = Array2::from_elem((n, n), false);
    for i in 0..n {
        let in_any = (0..n_regions).any(|r| mask.membership[[i, r]]);
        for j in 0..n {
            allowed[[i, j]] = if !in_any {
                true
            } else {
                i == j || (0..n_regions).any(|r| mask.membership[[i, r]] && mask.membership[[j, r]])
            };
        }
    }
    AttentionMask { allowed }
}

/// The fixed 7-region table over the 468-point face-mesh index convention.
///
/// The mesh topology itself does not prescribe region polygons; this table is
/// this repo's choice of anatomically grouped index loops (eye and lip loops
/// follow the usual mesh contours, the jaw is the lower face-oval arc closed
/// by a chord, the nose is a bridge/nostril/base diamond).
pub fn canonical_face_regions() -> Vec<FaceRegion> {
    vec![
        FaceRegion::new(
            "right_eye",
            vec![
                33, 7, 163, 144, 145, 153, 154, 155, 133, 173, 157, 158, 159, 160, 161, 246,
            ],
        ),
        FaceRegion::new(
            "left_eye",
            vec![
                263, 249, 390, 373, 374, 380, 381, 382, 362, 398, 384, 385, 386, 387, 388, 466,
            ],
        ),
        FaceRegion::new("right_brow", vec![46, 53, 52, 65, 55, 107, 66, 105, 63, 70]),
        FaceRegion::new(
            "left_brow",
            vec![276, 283, 282, 295, 285, 336, 296, 334, 293, 300],
        ),
        FaceRegion::new("nose", vec![6, 98, 2, 327]),
        FaceRegion::new(
            "mouth",
            vec![
                61, 146, 91, 181, 84, 17, 314, 405, 321, 375, 291, 409, 270, 269, 267, 0, 37, 39,
                40, 185,
            ],
        ),
        FaceRegion::new(
            "jaw",
            vec![
                454, 323, 361, 288, 397, 365, 379, 378, 400, 377, 152, 148, 176, 149, 150, 136,
                172, 58, 132, 93, 234,
            ],
        ),
    ]
}
