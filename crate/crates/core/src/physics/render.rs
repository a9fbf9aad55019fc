//! Synthetic camera frames.
//!
//! Three views exist: the focal-length `screen` camera (the image the lens
//! forms on the screen), the focal-length `side` camera (a close-up of both
//! carriages on their rails plus a calibration fiducial) and the vanishing-rod
//! `beakers` camera. Frames are 8-bit grayscale with seeded Gaussian sensor
//! noise, so a given `(state, seed)` always renders to the same bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ideal_image_distance, ExperimentState, ImageDistance, LensBenchState, PhysicsError, RodRigState};
use crate::clock::Millis;
use crate::image::{Frame, GrayImage, Roi};

/// Refractive-index difference mapped to full contrast (glass against water).
pub const CONTRAST_REF_DELTA_MU: f64 = 0.14;

const SCREEN_BG: f32 = 60.0;
const SCREEN_DARK: f32 = 15.0;
const SCREEN_GLOW: f32 = 75.0;
const GLYPH: f32 = 220.0;

const SIDE_BG: f32 = 30.0;
const RAIL: f32 = 90.0;
const CARRIAGE: f32 = 230.0;
const FIDUCIAL: f32 = 200.0;

const AIR: f32 = 40.0;
const WALL: f32 = 110.0;
const OIL: f32 = 150.0;
const WATER: f32 = 120.0;
const ROD_DELTA: f32 = 90.0;
const HOLDER: f32 = 250.0;

/// Geometry of the carriage close-up camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideViewLayout {
    /// Bench offset (cm) shown at the left edge of the object strip.
    pub object_origin_cm: f64,
    /// Bench offset (cm) shown at the left edge of the screen strip.
    pub screen_origin_cm: f64,
    pub px_per_mm: f64,
    pub fiducial_mm: f64,
    pub carriage_width_px: f64,
}

impl Default for SideViewLayout {
    fn default() -> Self {
        Self {
            object_origin_cm: 18.0,
            screen_origin_cm: 18.0,
            px_per_mm: 8.0,
            fiducial_mm: 10.0,
            carriage_width_px: 8.0,
        }
    }
}

impl SideViewLayout {
    pub const OBJECT_STRIP: (f64, f64) = (24.0, 62.0);
    pub const SCREEN_STRIP: (f64, f64) = (104.0, 142.0);

    /// Region holding only the calibration fiducial.
    pub fn fiducial_roi(&self, cfg: &RenderConfig) -> Roi {
        Roi::new(0, 190, cfg.width, cfg.height.saturating_sub(190))
    }

    /// Region holding both carriages and nothing else that moves.
    pub fn tracking_roi(&self, cfg: &RenderConfig) -> Roi {
        Roi::new(0, 0, cfg.width, 160)
    }

    pub fn carriage_x(&self, offset_cm: f64, origin_cm: f64) -> f64 {
        (offset_cm - origin_cm) * 10.0 * self.px_per_mm
    }
}

/// Geometry of the beaker camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeakerLayout {
    pub px_per_mm: f64,
    pub fiducial_mm: f64,
}

impl Default for BeakerLayout {
    fn default() -> Self {
        Self {
            px_per_mm: 2.0,
            fiducial_mm: 50.0,
        }
    }
}

impl BeakerLayout {
    pub const OIL_BEAKER: (f64, f64) = (40.0, 140.0);
    pub const WATER_BEAKER: (f64, f64) = (180.0, 280.0);
    pub const BEAKER_TOP: f64 = 70.0;
    pub const LIQUID_FLOOR: f64 = 218.0;
    pub const FULL_SURFACE: f64 = 130.0;
    pub const ROD_LEN_BELOW_HOLDER: f64 = 80.0;
    pub const HOLDER_HEIGHT: f64 = 12.0;

    pub fn surface_y(level: f64) -> f64 {
        Self::LIQUID_FLOOR - (Self::LIQUID_FLOOR - Self::FULL_SURFACE) * level
    }

    pub fn water_crop(&self) -> Roi {
        let (x0, x1) = Self::WATER_BEAKER;
        Roi::new(x0 as usize, Self::BEAKER_TOP as usize, (x1 - x0) as usize, 152)
    }

    /// Rows above the liquid where only the rod holders change between frames.
    pub fn tracking_roi(&self, cfg: &RenderConfig) -> Roi {
        Roi::new(0, 0, cfg.width, 112)
    }

    pub fn fiducial_roi(&self, cfg: &RenderConfig) -> Roi {
        Roi::new(0, 224, cfg.width, cfg.height.saturating_sub(224))
    }

    pub fn tip_y(&self, rig: &RodRigState) -> f64 {
        Self::FULL_SURFACE - rig.liquid_gap_mm * self.px_per_mm + rig.travel_mm() * self.px_per_mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Defocus blur per centimetre of screen misplacement.
    pub k_blur_px_per_cm: f64,
    pub max_blur_px: f64,
    pub noise_sigma: f64,
    pub side: SideViewLayout,
    pub beakers: BeakerLayout,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            k_blur_px_per_cm: 4.0,
            max_blur_px: 40.0,
            noise_sigma: 2.0,
            side: SideViewLayout::default(),
            beakers: BeakerLayout::default(),
        }
    }
}

impl RenderConfig {
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraView {
    Screen,
    Side,
    Beakers,
}

impl CameraView {
    /// Camera ids name their view, optionally behind a `node/` prefix.
    pub fn from_camera_id(camera_id: &str) -> Option<Self> {
        let name = camera_id.rsplit('/').next().unwrap_or(camera_id);
        match name {
            "screen" => Some(CameraView::Screen),
            "side" => Some(CameraView::Side),
            "beakers" => Some(CameraView::Beakers),
            _ => None,
        }
    }
}

pub fn rod_contrast(mu_rod: f64, mu_medium: f64) -> f64 {
    ((mu_rod - mu_medium).abs() / CONTRAST_REF_DELTA_MU).clamp(0.0, 1.0)
}

/// Gaussian defocus radius on the screen camera; `None` when the object sits
/// at or inside the focal point and no real image forms.
pub fn defocus_sigma_px(bench: &LensBenchState, cfg: &RenderConfig) -> Option<f64> {
    let u = bench.u_cm();
    if u <= 0.0 {
        return None;
    }
    let v_ideal = ideal_image_distance(u, bench.focal_len_cm).ok()?.finite()?;
    Some((cfg.k_blur_px_per_cm * (bench.v_cm() - v_ideal).abs()).min(cfg.max_blur_px))
}

pub fn render_frame(
    state: &ExperimentState,
    camera_id: &str,
    cfg: &RenderConfig,
    seed: u64,
    timestamp_ms: Millis,
) -> Result<Frame, PhysicsError> {
    state.validate()?;
    let view = CameraView::from_camera_id(camera_id)
        .ok_or_else(|| PhysicsError::UnknownCamera(camera_id.to_string()))?;
    let mut canvas = match (view, state) {
        (CameraView::Screen, ExperimentState::FocalLength(bench)) => draw_screen(bench, cfg),
        (CameraView::Side, ExperimentState::FocalLength(bench)) => draw_side(bench, cfg),
        (CameraView::Beakers, ExperimentState::VanishingRod(rig)) => draw_beakers(rig, cfg),
        _ => return Err(PhysicsError::UnknownCamera(camera_id.to_string())),
    };
    if cfg.noise_sigma > 0.0 {
        canvas.add_noise(cfg.noise_sigma, seed);
    }
    Ok(Frame::new(canvas.quantize(), timestamp_ms, camera_id))
}

fn draw_screen(bench: &LensBenchState, cfg: &RenderConfig) -> Canvas {
    let mut canvas = Canvas::new(cfg.width, cfg.height, SCREEN_BG);
    if !bench.light_on {
        canvas.fill(SCREEN_DARK);
        return canvas;
    }
    let u = bench.u_cm();
    let v_ideal = match ideal_image_distance(u.max(f64::MIN_POSITIVE), bench.focal_len_cm) {
        Ok(ImageDistance::Finite(v)) if u > 0.0 => v,
        _ => {
            canvas.fill(SCREEN_GLOW);
            return canvas;
        }
    };
    // Glyph size follows the in-focus magnification; misplacing the screen
    // only spreads the light.
    let m = v_ideal / u;
    let cx = cfg.width as f64 / 2.0;
    let cy = cfg.height as f64 / 2.0;
    canvas.fill_rect(cx - 10.0 * m, cy - 45.0 * m, cx + 10.0 * m, cy + 15.0 * m, GLYPH);
    canvas.fill_triangle(
        [(cx - 25.0 * m, cy + 15.0 * m), (cx + 25.0 * m, cy + 15.0 * m), (cx, cy + 45.0 * m)],
        GLYPH,
    );
    let sigma = (cfg.k_blur_px_per_cm * (bench.v_cm() - v_ideal).abs()).min(cfg.max_blur_px);
    canvas.gaussian_blur(sigma);
    canvas
}

fn draw_side(bench: &LensBenchState, cfg: &RenderConfig) -> Canvas {
    let layout = &cfg.side;
    let w = cfg.width as f64;
    let mut canvas = Canvas::new(cfg.width, cfg.height, SIDE_BG);
    let (oy0, oy1) = SideViewLayout::OBJECT_STRIP;
    let (sy0, sy1) = SideViewLayout::SCREEN_STRIP;
    canvas.fill_rect(0.0, oy1, w, oy1 + 4.0, RAIL);
    canvas.fill_rect(0.0, sy1, w, sy1 + 4.0, RAIL);
    let half = layout.carriage_width_px / 2.0;
    let ox = layout.carriage_x(bench.u_cm(), layout.object_origin_cm);
    let sx = layout.carriage_x(bench.v_cm(), layout.screen_origin_cm);
    canvas.fill_rect(ox - half, oy0, ox + half, oy1, CARRIAGE);
    canvas.fill_rect(sx - half, sy0, sx + half, sy1, CARRIAGE);
    let fid = layout.fiducial_mm * layout.px_per_mm;
    canvas.fill_rect((w - fid) / 2.0, 200.0, (w + fid) / 2.0, 206.0, FIDUCIAL);
    canvas
}

fn draw_beakers(rig: &RodRigState, cfg: &RenderConfig) -> Canvas {
    let layout = &cfg.beakers;
    let w = cfg.width as f64;
    let mut canvas = Canvas::new(cfg.width, cfg.height, AIR);
    let top = BeakerLayout::BEAKER_TOP;
    let floor = BeakerLayout::LIQUID_FLOOR;
    let tip = layout.tip_y(rig);
    let holder_bottom = tip - BeakerLayout::ROD_LEN_BELOW_HOLDER;
    for ((x0, x1), liquid, mu, level) in [
        (BeakerLayout::OIL_BEAKER, OIL, rig.mu_oil, rig.oil_level),
        (BeakerLayout::WATER_BEAKER, WATER, rig.mu_water, rig.water_level),
    ] {
        let surface = BeakerLayout::surface_y(level);
        canvas.fill_rect(x0 + 2.0, surface, x1 - 2.0, floor, liquid);
        canvas.fill_rect(x0, top, x0 + 2.0, floor + 2.0, WALL);
        canvas.fill_rect(x1 - 2.0, top, x1, floor + 2.0, WALL);
        canvas.fill_rect(x0, floor, x1, floor + 2.0, WALL);

        let rc = (x0 + x1) / 2.0;
        let in_air = AIR + ROD_DELTA * rod_contrast(rig.mu_rod, rig.mu_air) as f32;
        let in_liquid = liquid + ROD_DELTA * rod_contrast(rig.mu_rod, mu) as f32;
        canvas.fill_rect(rc - 5.0, 0.0, rc + 5.0, tip.min(surface), in_air);
        if tip > surface {
            canvas.fill_rect(rc - 5.0, surface, rc + 5.0, tip.min(floor), in_liquid);
        }
        canvas.fill_rect(
            rc - 15.0,
            holder_bottom - BeakerLayout::HOLDER_HEIGHT,
            rc + 15.0,
            holder_bottom,
            HOLDER,
        );
    }
    let fid = layout.fiducial_mm * layout.px_per_mm;
    canvas.fill_rect((w - fid) / 2.0, 228.0, (w + fid) / 2.0, 234.0, FIDUCIAL);
    canvas
}

/// Floating-point drawing surface with area-weighted (anti-aliased) fills.
struct Canvas {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new(width: usize, height: usize, bg: f32) -> Self {
        Self {
            width,
            height,
            data: vec![bg; width * height],
        }
    }

    fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|p| *p = value);
    }

    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: f32) {
        if x1 <= x0 || y1 <= y0 {
            return;
        }
        let px0 = x0.floor().max(0.0) as usize;
        let py0 = y0.floor().max(0.0) as usize;
        let px1 = (x1.ceil().max(0.0) as usize).min(self.width);
        let py1 = (y1.ceil().max(0.0) as usize).min(self.height);
        for py in py0..py1 {
            let cov_y = overlap(py as f64, y0, y1);
            if cov_y <= 0.0 {
                continue;
            }
            for px in px0..px1 {
                let cov = (cov_y * overlap(px as f64, x0, x1)) as f32;
                if cov > 0.0 {
                    let p = &mut self.data[py * self.width + px];
                    *p += cov * (value - *p);
                }
            }
        }
    }

    fn fill_triangle(&mut self, pts: [(f64, f64); 3], value: f32) {
        const SUB: usize = 4;
        let xs = pts.map(|p| p.0);
        let ys = pts.map(|p| p.1);
        let min_x = xs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(self.width);
        let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(self.height);
        for py in min_y..max_y {
            for px in min_x..max_x {
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let x = px as f64 + (sx as f64 + 0.5) / SUB as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SUB as f64;
                        if inside_triangle(&pts, x, y) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let cov = hits as f32 / (SUB * SUB) as f32;
                    let p = &mut self.data[py * self.width + px];
                    *p += cov * (value - *p);
                }
            }
        }
    }

    /// Separable Gaussian blur with border replication.
    fn gaussian_blur(&mut self, sigma: f64) {
        if sigma < 1e-3 {
            return;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);

        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += weight * self.data[(y * w + sx) as usize] as f64;
                }
                tmp[(y * w + x) as usize] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += weight * tmp[(sy * w + x) as usize] as f64;
                }
                self.data[(y * w + x) as usize] = acc as f32;
            }
        }
    }

    fn add_noise(&mut self, sigma: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("noise sigma is finite and positive");
        for p in &mut self.data {
            *p += normal.sample(&mut rng) as f32;
        }
    }

    fn quantize(self) -> GrayImage {
        let pixels = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        GrayImage::from_pixels(self.width, self.height, pixels).expect("canvas has w*h samples")
    }
}

/// Length of `[p, p+1] ∩ [lo, hi]`.
fn overlap(p: f64, lo: f64, hi: f64) -> f64 {
    ((p + 1.0).min(hi) - p.max(lo)).max(0.0)
}

fn inside_triangle(pts: &[(f64, f64); 3], x: f64, y: f64) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64)| (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1);
    let d1 = sign(pts[0], pts[1]);
    let d2 = sign(pts[1], pts[2]);
    let d3 = sign(pts[2], pts[0]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}
