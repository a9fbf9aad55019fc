//! Frame-differencing pipeline used by the automated checks: background
//! subtraction, grayscale closing, median filtering, thresholding, connected
//! components, centroid tracking and a global SSIM score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, ImageError, Roi};

#[derive(Debug, Error, PartialEq)]
pub enum CvError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("kernel size must be odd and at least 3, got {0}")]
    BadKernel(usize),
    #[error("mm per pixel must be positive, got {0}")]
    BadCalibration(f64),
    #[error("no calibration fiducial found")]
    NoFiducial,
}

/// Stage parameters for [`foreground_mask`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvParams {
    pub close_kernel: usize,
    pub median_kernel: usize,
    pub threshold: u8,
    pub min_area: usize,
}

impl Default for CvParams {
    fn default() -> Self {
        Self {
            close_kernel: 5,
            median_kernel: 5,
            threshold: 30,
            min_area: 50,
        }
    }
}

/// Per-pixel absolute difference.
pub fn subtract_background(frame: &GrayImage, background: &GrayImage) -> Result<GrayImage, CvError> {
    frame.ensure_same_size(background)?;
    let pixels = frame
        .pixels()
        .iter()
        .zip(background.pixels())
        .map(|(&a, &b)| a.abs_diff(b))
        .collect();
    Ok(GrayImage::from_pixels(frame.width(), frame.height(), pixels)?)
}

fn check_kernel(k: usize) -> Result<(), CvError> {
    if k < 3 || k % 2 == 0 {
        return Err(CvError::BadKernel(k));
    }
    Ok(())
}

/// Separable k x k window reduction with the window clipped to the image.
fn window_reduce(img: &GrayImage, k: usize, pick: fn(u8, u8) -> u8) -> GrayImage {
    let (w, h) = img.dimensions();
    let r = k / 2;
    let mut rows = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let v = (lo..=hi).map(|i| img.get(i, y)).reduce(pick).unwrap_or(0);
            rows.set(x, y, v);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let v = (lo..=hi).map(|j| rows.get(x, j)).reduce(pick).unwrap_or(0);
            out.set(x, y, v);
        }
    }
    out
}

/// Grayscale dilation (maximum filter) with a square structuring element.
pub fn dilate(img: &GrayImage, k: usize) -> Result<GrayImage, CvError> {
    check_kernel(k)?;
    Ok(window_reduce(img, k, u8::max))
}

/// Grayscale erosion (minimum filter) with a square structuring element.
pub fn erode(img: &GrayImage, k: usize) -> Result<GrayImage, CvError> {
    check_kernel(k)?;
    Ok(window_reduce(img, k, u8::min))
}

/// Dilation followed by erosion.
pub fn morph_close(img: &GrayImage, k: usize) -> Result<GrayImage, CvError> {
    erode(&dilate(img, k)?, k)
}

/// k x k median with border replication.
pub fn median_filter(img: &GrayImage, k: usize) -> Result<GrayImage, CvError> {
    check_kernel(k)?;
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    Ok(GrayImage::from_fn(img.width(), img.height(), |x, y| {
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(img.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        let mid = window.len() / 2;
        *window.select_nth_unstable(mid).1
    }))
}

/// Pixels at or above `t` become 255, the rest 0.
pub fn threshold(img: &GrayImage, t: u8) -> GrayImage {
    let pixels = img.pixels().iter().map(|&p| if p >= t { 255 } else { 0 }).collect();
    GrayImage::from_pixels(img.width(), img.height(), pixels).expect("same dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    /// Foreground pixel count of the component.
    pub area: usize,
    /// Mean position of the component's pixels.
    pub centroid: (f64, f64),
}

impl BoundingBox {
    pub fn roi(&self) -> Roi {
        Roi::new(self.x, self.y, self.w, self.h)
    }

    fn offset(mut self, dx: usize, dy: usize) -> Self {
        self.x += dx;
        self.y += dy;
        self.centroid.0 += dx as f64;
        self.centroid.1 += dy as f64;
        self
    }
}

fn find_root(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

/// 8-connected components of the nonzero pixels, filtered by area and sorted
/// by left edge (then top edge).
pub fn find_bounding_boxes(binary: &GrayImage, min_area: usize) -> Vec<BoundingBox> {
    let (w, h) = binary.dimensions();
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    // first pass: provisional labels, equivalences recorded in `parent`
    for y in 0..h {
        for x in 0..w {
            if binary.get(x, y) == 0 {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut push = |l: u32| {
                if l != 0 {
                    neighbours[n] = l;
                    n += 1;
                }
            };
            if x > 0 {
                push(labels[y * w + x - 1]);
            }
            if y > 0 {
                if x > 0 {
                    push(labels[(y - 1) * w + x - 1]);
                }
                push(labels[(y - 1) * w + x]);
                if x + 1 < w {
                    push(labels[(y - 1) * w + x + 1]);
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let mut root = find_root(&mut parent, neighbours[0]);
                for &other in &neighbours[1..n] {
                    let r = find_root(&mut parent, other);
                    if r != root {
                        let (lo, hi) = (root.min(r), root.max(r));
                        parent[hi as usize] = lo;
                        root = lo;
                    }
                }
                root
            };
            labels[y * w + x] = label;
        }
    }

    struct Acc {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        area: usize,
        sx: f64,
        sy: f64,
    }
    let mut acc: Vec<Option<Acc>> = (0..parent.len()).map(|_| None).collect();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let root = find_root(&mut parent, l) as usize;
            let a = acc[root].get_or_insert(Acc {
                x0: x,
                y0: y,
                x1: x,
                y1: y,
                area: 0,
                sx: 0.0,
                sy: 0.0,
            });
            a.x0 = a.x0.min(x);
            a.y0 = a.y0.min(y);
            a.x1 = a.x1.max(x);
            a.y1 = a.y1.max(y);
            a.area += 1;
            a.sx += x as f64;
            a.sy += y as f64;
        }
    }
    let mut boxes: Vec<BoundingBox> = acc
        .into_iter()
        .flatten()
        .filter(|a| a.area >= min_area.max(1))
        .map(|a| BoundingBox {
            x: a.x0,
            y: a.y0,
            w: a.x1 - a.x0 + 1,
            h: a.y1 - a.y0 + 1,
            area: a.area,
            centroid: (a.sx / a.area as f64, a.sy / a.area as f64),
        })
        .collect();
    boxes.sort_by_key(|b| (b.x, b.y));
    boxes
}

/// Runs subtraction, closing, median filtering and thresholding.
pub fn foreground_mask(frame: &GrayImage, background: &GrayImage, params: &CvParams) -> Result<GrayImage, CvError> {
    let diff = subtract_background(frame, background)?;
    let closed = morph_close(&diff, params.close_kernel)?;
    let smoothed = median_filter(&closed, params.median_kernel)?;
    Ok(threshold(&smoothed, params.threshold))
}

/// Foreground blobs split by which frame the (bright) object occupied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveDetection {
    /// Regions brighter in the earlier frame: where an object used to be.
    pub vacated: Vec<BoundingBox>,
    /// Regions brighter in the later frame: where an object now is.
    pub appeared: Vec<BoundingBox>,
}

fn mean_in(img: &GrayImage, roi: Roi) -> f64 {
    let crop = img.crop_roi(roi);
    let n = crop.pixels().len().max(1) as f64;
    crop.pixels().iter().map(|&p| p as f64).sum::<f64>() / n
}

/// Finds the blobs that changed between `before` and `after` inside `roi`.
/// Coordinates in the result are in full-frame pixels.
pub fn detect_moves(
    before: &GrayImage,
    after: &GrayImage,
    roi: Roi,
    params: &CvParams,
) -> Result<MoveDetection, CvError> {
    before.ensure_same_size(after)?;
    let b = before.crop_roi(roi);
    let a = after.crop_roi(roi);
    let mask = foreground_mask(&a, &b, params)?;
    let mut out = MoveDetection::default();
    for bx in find_bounding_boxes(&mask, params.min_area) {
        let delta = mean_in(&a, bx.roi()) - mean_in(&b, bx.roi());
        let placed = bx.offset(roi.x, roi.y);
        if delta < 0.0 {
            out.vacated.push(placed);
        } else {
            out.appeared.push(placed);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub before: BoundingBox,
    pub after: BoundingBox,
    pub dx_mm: f64,
    pub dy_mm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tracking {
    pub tracks: Vec<Track>,
    /// Set when the two box lists could not be paired one to one.
    pub partial: bool,
}

/// Pairs boxes by nearest centroid (globally shortest pairs first) and
/// converts centroid shifts to millimetres.
pub fn track_displacement(
    boxes_before: &[BoundingBox],
    boxes_after: &[BoundingBox],
    mm_per_px: f64,
) -> Result<Tracking, CvError> {
    if !(mm_per_px > 0.0 && mm_per_px.is_finite()) {
        return Err(CvError::BadCalibration(mm_per_px));
    }
    let mut pairs = Vec::with_capacity(boxes_before.len() * boxes_after.len());
    for (i, b) in boxes_before.iter().enumerate() {
        for (j, a) in boxes_after.iter().enumerate() {
            let d = (a.centroid.0 - b.centroid.0).hypot(a.centroid.1 - b.centroid.1);
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    let mut used_b = vec![false; boxes_before.len()];
    let mut used_a = vec![false; boxes_after.len()];
    let mut tracks = Vec::new();
    for (_, i, j) in pairs {
        if used_b[i] || used_a[j] {
            continue;
        }
        used_b[i] = true;
        used_a[j] = true;
        let (b, a) = (boxes_before[i], boxes_after[j]);
        tracks.push(Track {
            before: b,
            after: a,
            dx_mm: (a.centroid.0 - b.centroid.0) * mm_per_px,
            dy_mm: (a.centroid.1 - b.centroid.1) * mm_per_px,
        });
    }
    tracks.sort_by_key(|t| (t.before.x, t.before.y));
    Ok(Tracking {
        tracks,
        partial: boxes_before.len() != boxes_after.len(),
    })
}

/// Scale from a bright bar of known length inside `roi`.
pub fn calibrate_mm_per_px(frame: &GrayImage, roi: Roi, fiducial_mm: f64) -> Result<f64, CvError> {
    let crop = frame.crop_roi(roi);
    let lo = crop.pixels().iter().copied().min().ok_or(CvError::NoFiducial)?;
    let hi = crop.pixels().iter().copied().max().ok_or(CvError::NoFiducial)?;
    if hi.saturating_sub(lo) < 50 {
        return Err(CvError::NoFiducial);
    }
    let mask = threshold(&crop, ((lo as u16 + hi as u16) / 2) as u8);
    let widest = find_bounding_boxes(&mask, 10)
        .into_iter()
        .max_by_key(|b| b.w)
        .ok_or(CvError::NoFiducial)?;
    Ok(fiducial_mm / widest.w as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionVerdict {
    pub commanded_mm: f64,
    pub observed_mm: Option<f64>,
    pub tolerance_mm: f64,
    pub pass: bool,
    pub trace: Vec<Track>,
}

/// Compares the commanded travel with the largest tracked displacement along
/// `axis`. No tracked object counts as a failure.
pub fn verify_motion(commanded_mm: f64, axis: Axis, tracking: &Tracking, tolerance_mm: f64) -> MotionVerdict {
    let along = |t: &Track| match axis {
        Axis::X => t.dx_mm,
        Axis::Y => t.dy_mm,
    };
    let observed_mm = tracking
        .tracks
        .iter()
        .map(along)
        .max_by(|a, b| a.abs().total_cmp(&b.abs()));
    let pass = observed_mm.is_some_and(|o| (o - commanded_mm).abs() <= tolerance_mm);
    MotionVerdict {
        commanded_mm,
        observed_mm,
        tolerance_mm,
        pass,
        trace: tracking.tracks.clone(),
    }
}

impl MotionVerdict {
    pub fn no_detection(&self) -> bool {
        self.observed_mm.is_none()
    }
}

pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Single-window structural similarity over the whole image.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64, CvError> {
    a.ensure_same_size(b)?;
    let n = a.pixels().len();
    if n == 0 {
        return Ok(1.0);
    }
    let nf = n as f64;
    let mean = |img: &GrayImage| img.pixels().iter().map(|&p| p as f64).sum::<f64>() / nf;
    let (ma, mb) = (mean(a), mean(b));
    let cov = |x: &GrayImage, mx: f64, y: &GrayImage, my: f64| {
        x.pixels()
            .iter()
            .zip(y.pixels())
            .map(|(&p, &q)| (p as f64 - mx) * (q as f64 - my))
            .sum::<f64>()
            / nf
    };
    let va = cov(a, ma, a, ma);
    let vb = cov(b, mb, b, mb);
    let vab = cov(a, ma, b, mb);
    let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2);
    let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
    Ok(num / den)
}
