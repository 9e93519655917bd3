//! Non-learned contour geometry: per-class region extraction from a mask,
//! Moore-neighbor boundary tracing, arc-length resampling, coordinate
//! normalization, and the 6-element shape descriptor.
//!
//! No gradients flow through this module; everything here is a pure function
//! of the input mask.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{CgqrError, Result};

/// Fixed resampled point count per contour.
pub const DEFAULT_N_POINTS: usize = 64;

/// A traced, resampled, normalized class boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub class_id: u8,
    /// (x_norm, y_norm) pairs, `n_points` of them when `present`.
    pub points: Vec<(f64, f64)>,
    pub present: bool,
}

impl Contour {
    pub fn absent(class_id: u8) -> Contour {
        Contour { class_id, points: Vec::new(), present: false }
    }
}

/// Centroid, normalized area/perimeter, and coordinate dispersion of one
/// contour. Absent classes carry the all-zeros descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShapeDescriptor {
    pub mu_x: f64,
    pub mu_y: f64,
    pub area: f64,
    pub perimeter: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl ShapeDescriptor {
    pub fn as_array(&self) -> [f64; 6] {
        [self.mu_x, self.mu_y, self.area, self.perimeter, self.sigma_x, self.sigma_y]
    }
}

/// Extract one contour per class `1..=n_classes`. For each class the largest
/// 4-connected component is selected, holes are filled, the outer boundary is
/// traced, resampled to `n_points` by uniform arc length, and normalized by
/// the image dimensions. Classes without pixels yield `present = false`.
pub fn extract_contours(mask: &Array2<u8>, n_classes: u8, n_points: usize) -> Result<Vec<Contour>> {
    if n_points < 4 {
        return Err(CgqrError::Config("n_points must be >= 4".into()));
    }
    let (h, w) = mask.dim();
    let mut out = Vec::with_capacity(n_classes as usize);
    for class in 1..=n_classes {
        let comp = largest_component(mask, class);
        let Some(comp) = comp else {
            out.push(Contour::absent(class));
            continue;
        };
        let filled = fill_holes(&comp);
        let traced = trace_boundary(&filled);
        let points: Vec<(f64, f64)> = resample_closed(&traced, n_points)
            .into_iter()
            .map(|(y, x)| (x / w as f64, y / h as f64))
            .collect();
        let points = orient_ccw(points);
        out.push(Contour { class_id: class, points, present: true });
    }
    Ok(out)
}

/// Pixel count of the largest 4-connected component of `class` (used as the
/// descriptor's area numerator).
pub fn largest_component_size(mask: &Array2<u8>, class: u8) -> usize {
    largest_component(mask, class).map(|c| c.iter().filter(|&&v| v).count()).unwrap_or(0)
}

/// Descriptor of one contour. `region_pixel_count` is the pixel count of the
/// traced region; `image_size` is (H, W).
pub fn describe(
    contour: &Contour,
    region_pixel_count: usize,
    image_size: (usize, usize),
) -> ShapeDescriptor {
    if !contour.present || contour.points.is_empty() {
        return ShapeDescriptor::default();
    }
    let (h, w) = image_size;
    let n = contour.points.len() as f64;
    let mu_x = contour.points.iter().map(|p| p.0).sum::<f64>() / n;
    let mu_y = contour.points.iter().map(|p| p.1).sum::<f64>() / n;
    let var_x = contour.points.iter().map(|p| (p.0 - mu_x).powi(2)).sum::<f64>() / n;
    let var_y = contour.points.iter().map(|p| (p.1 - mu_y).powi(2)).sum::<f64>() / n;

    // closed polyline length in pixel units, scaled by the 2(W+H) convention
    let mut perim_px = 0.0;
    for i in 0..contour.points.len() {
        let (x0, y0) = contour.points[i];
        let (x1, y1) = contour.points[(i + 1) % contour.points.len()];
        let dx = (x1 - x0) * w as f64;
        let dy = (y1 - y0) * h as f64;
        perim_px += (dx * dx + dy * dy).sqrt();
    }
    ShapeDescriptor {
        mu_x,
        mu_y,
        area: region_pixel_count as f64 / (w * h) as f64,
        perimeter: perim_px / (2.0 * (w + h) as f64),
        sigma_x: var_x.sqrt(),
        sigma_y: var_y.sqrt(),
    }
}

/// Composition: contours then descriptors, one per class.
pub fn descriptors_from_mask(
    mask: &Array2<u8>,
    n_classes: u8,
    n_points: usize,
) -> Result<Vec<ShapeDescriptor>> {
    let contours = extract_contours(mask, n_classes, n_points)?;
    Ok(contours
        .iter()
        .map(|c| describe(c, largest_component_size(mask, c.class_id), mask.dim()))
        .collect())
}

pub fn dump_contours_csv(contours: &[Contour], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "class,x_norm,y_norm").unwrap();
    for c in contours {
        for (x, y) in &c.points {
            writeln!(buf, "{},{:.6},{:.6}", c.class_id, x, y).unwrap();
        }
    }
    crate::pgm::atomic_write(path, &buf)
}

// ---------------------------------------------------------------------------
// internals
// ---------------------------------------------------------------------------

fn largest_component(mask: &Array2<u8>, class: u8) -> Option<Array2<bool>> {
    let (h, w) = mask.dim();
    let mut label = Array2::<u32>::zeros((h, w));
    let mut sizes: Vec<usize> = vec![0]; // index 0 unused
    let mut next = 1u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != class || label[[y, x]] != 0 {
                continue;
            }
            let id = next;
            next += 1;
            sizes.push(0);
            stack.push((y, x));
            label[[y, x]] = id;
            while let Some((cy, cx)) = stack.pop() {
                sizes[id as usize] += 1;
                for (ny, nx) in neighbors4(cy, cx, h, w) {
                    if mask[[ny, nx]] == class && label[[ny, nx]] == 0 {
                        label[[ny, nx]] = id;
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    if next == 1 {
        return None;
    }
    // first component wins ties (scan order is deterministic)
    let best = (1..next).max_by_key(|&id| (sizes[id as usize], std::cmp::Reverse(id))).unwrap();
    Some(Array2::from_shape_fn((h, w), |ix| label[ix] == best))
}

fn neighbors4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut v = Vec::with_capacity(4);
    if y > 0 {
        v.push((y - 1, x));
    }
    if y + 1 < h {
        v.push((y + 1, x));
    }
    if x > 0 {
        v.push((y, x - 1));
    }
    if x + 1 < w {
        v.push((y, x + 1));
    }
    v.into_iter()
}

/// Fill interior holes: complement cells not 8-connected to the border become
/// part of the region.
fn fill_holes(comp: &Array2<bool>) -> Array2<bool> {
    let (h, w) = comp.dim();
    let mut outside = Array2::<bool>::from_elem((h, w), false);
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !comp[[y, x]] {
                if !outside[[y, x]] {
                    outside[[y, x]] = true;
                    stack.push((y, x));
                }
            }
        }
    }
    // 4-connected background flood: cavities reachable from the border only
    // through diagonal gaps count as holes, matching what the 8-connected
    // Moore walk treats as interior
    while let Some((cy, cx)) = stack.pop() {
        for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let ny = cy as i64 + dy;
            let nx = cx as i64 + dx;
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !comp[[ny, nx]] && !outside[[ny, nx]] {
                outside[[ny, nx]] = true;
                stack.push((ny, nx));
            }
        }
    }
    Array2::from_shape_fn((h, w), |ix| !outside[ix])
}

/// Moore-neighbor ring, clockwise in image coordinates (y down).
const RING: [(i64, i64); 8] =
    [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// Outer-boundary pixel sequence of a hole-free region, traced by
/// Moore-neighbor following with Jacob's stopping criterion. Returns pixel
/// (y, x) coordinates in trace order; single-pixel regions yield one pixel.
fn trace_boundary(inside: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = inside.dim();
    let Some(start) = (0..h * w).map(|i| (i / w, i % w)).find(|&(y, x)| inside[[y, x]]) else {
        return Vec::new();
    };
    let is_in = |y: i64, x: i64| -> bool {
        y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && inside[[y as usize, x as usize]]
    };
    let s = (start.0 as i64, start.1 as i64);
    // scan order guarantees the west neighbor is outside
    let b0 = (s.0, s.1 - 1);
    let mut seq = vec![start];
    let mut seen = std::collections::HashSet::new();
    let mut p = s;
    let mut b = b0;
    let cap = 8 * h * w + 8;
    for _ in 0..cap {
        // index of backtrack cell in the ring around p
        let rel = (b.0 - p.0, b.1 - p.1);
        let bi = RING.iter().position(|&r| r == rel).expect("backtrack is a Moore neighbor");
        let mut found = None;
        for k in 1..=8 {
            let r = RING[(bi + k) % 8];
            let cand = (p.0 + r.0, p.1 + r.1);
            if is_in(cand.0, cand.1) {
                let prev = RING[(bi + k - 1) % 8];
                found = Some((cand, (p.0 + prev.0, p.1 + prev.1)));
                break;
            }
        }
        let Some((next, back)) = found else {
            break; // isolated pixel
        };
        if next == s && back == b0 {
            break; // re-entered the start in the original state
        }
        if !seen.insert((p, b)) {
            break;
        }
        seq.push((next.0 as usize, next.1 as usize));
        b = back;
        p = next;
    }
    // the first pixel may be re-emitted at the end of the walk
    if seq.len() > 1 && seq.last() == seq.first() {
        seq.pop();
    }
    seq
}

/// Uniform arc-length resampling of a closed pixel polyline to `n` points,
/// in (y, x) floating coordinates.
fn resample_closed(path: &[(usize, usize)], n: usize) -> Vec<(f64, f64)> {
    if path.is_empty() {
        return Vec::new();
    }
    let pts: Vec<(f64, f64)> = path.iter().map(|&(y, x)| (y as f64, x as f64)).collect();
    if pts.len() == 1 {
        return vec![pts[0]; n];
    }
    let m = pts.len();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    let mut total = 0.0;
    for i in 0..m {
        let a = pts[i];
        let b = pts[(i + 1) % m];
        total += ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        cum.push(total);
    }
    if total == 0.0 {
        return vec![pts[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for i in 0..n {
        let target = total * i as f64 / n as f64;
        while seg + 1 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let a = pts[seg % m];
        let b = pts[(seg + 1) % m];
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 { (target - cum[seg]) / seg_len } else { 0.0 };
        out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
    }
    out
}

/// Enforce counter-clockwise order in mathematical axes (x right, y up):
/// with y pointing down this means the shoelace sum over (x, y) is positive.
fn orient_ccw(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let n = points.len();
    if n < 3 {
        return points;
    }
    let mut shoelace = 0.0;
    for i in 0..n {
        let (x0, y0) = points[i];
        let (x1, y1) = points[(i + 1) % n];
        shoelace += x0 * y1 - x1 * y0;
    }
    if shoelace < 0.0 {
        points.into_iter().rev().collect()
    } else {
        points
    }
}

// ---------------------------------------------------------------------------
// enumeration oracles shared with the acceptance suite
// ---------------------------------------------------------------------------

/// Independent boundary oracle: the largest 4-connected component of `class`
/// with holes filled, keeping pixels that have a 4-neighbor outside the
/// filled region (out-of-grid counts as outside). Pure enumeration; no
/// tracing involved.
pub fn boundary_pixel_oracle(
    mask: &Array2<u8>,
    class: u8,
) -> Option<std::collections::BTreeSet<(usize, usize)>> {
    let comp = largest_component(mask, class)?;
    let filled = fill_holes(&comp);
    let (h, w) = filled.dim();
    let mut set = std::collections::BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if !filled[[y, x]] {
                continue;
            }
            let mut edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if !edge {
                edge = !filled[[y - 1, x]]
                    || !filled[[y + 1, x]]
                    || !filled[[y, x - 1]]
                    || !filled[[y, x + 1]];
            } else {
                edge = true;
            }
            if edge {
                set.insert((y, x));
            }
        }
    }
    Some(set)
}

/// The traced (pre-resampling) boundary pixel set, exposed for oracle tests.
pub fn traced_pixel_set(
    mask: &Array2<u8>,
    class: u8,
) -> Option<std::collections::BTreeSet<(usize, usize)>> {
    let comp = largest_component(mask, class)?;
    let filled = fill_holes(&comp);
    Some(trace_boundary(&filled).into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn block_mask() -> Array2<u8> {
        let mut mask = Array2::<u8>::zeros((8, 8));
        for y in 2..6 {
            for x in 2..6 {
                mask[[y, x]] = 1;
            }
        }
        mask
    }

    #[test]
    fn all_background_gives_absent_contours() {
        let contours = extract_contours(&Array2::zeros((8, 8)), 3, 16).unwrap();
        assert_eq!(contours.len(), 3);
        for c in &contours {
            assert!(!c.present);
            assert!(c.points.is_empty());
        }
    }

    #[test]
    fn block_boundary_matches_enumeration_oracle() {
        let mask = block_mask();
        let traced = traced_pixel_set(&mask, 1).unwrap();
        let oracle = boundary_pixel_oracle(&mask, 1).unwrap();
        assert_eq!(traced, oracle);
        assert_eq!(traced.len(), 12); // perimeter of a 4x4 block
        let contours = extract_contours(&mask, 1, 16).unwrap();
        assert!(contours[0].present);
        assert_eq!(contours[0].points.len(), 16);
        for &(x, y) in &contours[0].points {
            assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn largest_component_wins() {
        let mut mask = Array2::<u8>::zeros((10, 10));
        // 3x3 = 9 pixels
        for y in 1..4 {
            for x in 1..4 {
                mask[[y, x]] = 1;
            }
        }
        // 2x2 = 4 pixels
        for y in 6..8 {
            for x in 6..8 {
                mask[[y, x]] = 1;
            }
        }
        let traced = traced_pixel_set(&mask, 1).unwrap();
        for &(y, x) in &traced {
            assert!(y < 4 && x < 4, "pixel ({y},{x}) from the small component");
        }
        assert_eq!(largest_component_size(&mask, 1), 9);
    }

    #[test]
    fn describe_absent_is_zeros() {
        let d = describe(&Contour::absent(1), 0, (8, 8));
        assert_eq!(d, ShapeDescriptor::default());
    }

    #[test]
    fn describe_repeated_point_zero_sigma() {
        let c = Contour { class_id: 1, points: vec![(0.5, 0.5); 8], present: true };
        let d = describe(&c, 1, (8, 8));
        assert_eq!(d.sigma_x, 0.0);
        assert_eq!(d.sigma_y, 0.0);
        assert_eq!(d.perimeter, 0.0);
    }

    #[test]
    fn describe_block_centroid_and_area() {
        let mask = block_mask();
        let ds = descriptors_from_mask(&mask, 1, 64).unwrap();
        let d = ds[0];
        assert!((d.mu_x - 0.4375).abs() < 2e-2, "mu_x {}", d.mu_x);
        assert!((d.mu_y - 0.4375).abs() < 2e-2, "mu_y {}", d.mu_y);
        assert!((d.area - 0.25).abs() < 1e-12);
    }

    #[test]
    fn translation_equivariance() {
        let mask = block_mask();
        let mut shifted = Array2::<u8>::zeros((8, 8));
        for y in 2..6 {
            for x in 2..6 {
                shifted[[y + 1, x + 2]] = 1;
            }
        }
        let d0 = descriptors_from_mask(&mask, 1, 64).unwrap()[0];
        let d1 = descriptors_from_mask(&shifted, 1, 64).unwrap()[0];
        assert!((d1.mu_x - d0.mu_x - 2.0 / 8.0).abs() < 1e-3);
        assert!((d1.mu_y - d0.mu_y - 1.0 / 8.0).abs() < 1e-3);
        assert!((d1.area - d0.area).abs() < 1e-12);
        assert!((d1.sigma_x - d0.sigma_x).abs() < 1e-3);
        assert!((d1.sigma_y - d0.sigma_y).abs() < 1e-3);
    }

    #[test]
    fn per_class_independence() {
        let mut mask = block_mask();
        let d0 = descriptors_from_mask(&mask, 2, 64).unwrap();
        // add a class-2 region; class-1 descriptor must not move
        mask[[7, 7]] = 2;
        mask[[7, 6]] = 2;
        mask[[6, 7]] = 2;
        mask[[6, 6]] = 2;
        let d1 = descriptors_from_mask(&mask, 2, 64).unwrap();
        assert_eq!(d0[0], d1[0]);
        assert!(d1[1].area > 0.0);
    }

    #[test]
    fn scale_invariance_of_centroid() {
        // large enough that the half-pixel drift of index-based coordinate
        // normalization stays under the tolerance
        let mut mask = Array2::<u8>::zeros((32, 32));
        for y in 8..24 {
            for x in 8..24 {
                mask[[y, x]] = 1;
            }
        }
        let up = crate::data::resize_nearest(&mask, (64, 64));
        let d0 = descriptors_from_mask(&mask, 1, 64).unwrap()[0];
        let d1 = descriptors_from_mask(&up, 1, 64).unwrap()[0];
        assert!((d0.mu_x - d1.mu_x).abs() < 1e-2, "{} vs {}", d0.mu_x, d1.mu_x);
        assert!((d0.mu_y - d1.mu_y).abs() < 1e-2);
        assert!((d0.area - d1.area).abs() < 1e-2);
    }

    #[test]
    fn idempotent_extraction() {
        let mask = block_mask();
        let a = extract_contours(&mask, 1, 32).unwrap();
        let b = extract_contours(&mask, 1, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_masks_match_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..120 {
            let h = rng.gen_range(4..=16);
            let w = rng.gen_range(4..=16);
            let mask = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..3u8));
            for class in 1..=2u8 {
                let (Some(traced), Some(oracle)) =
                    (traced_pixel_set(&mask, class), boundary_pixel_oracle(&mask, class))
                else {
                    continue;
                };
                assert_eq!(traced, oracle, "mask {mask:?} class {class}");
                checked += 1;
            }
        }
        assert!(checked >= 100, "only {checked} oracle comparisons ran");
    }

    #[test]
    fn points_are_ccw() {
        let mask = block_mask();
        let c = &extract_contours(&mask, 1, 32).unwrap()[0];
        let mut shoelace = 0.0;
        for i in 0..c.points.len() {
            let (x0, y0) = c.points[i];
            let (x1, y1) = c.points[(i + 1) % c.points.len()];
            shoelace += x0 * y1 - x1 * y0;
        }
        assert!(shoelace > 0.0);
    }

    #[test]
    fn csv_dump_has_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let contours = extract_contours(&block_mask(), 1, 8).unwrap();
        dump_contours_csv(&contours, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "class,x_norm,y_norm");
        assert_eq!(lines.len(), 1 + 8);
    }
}
