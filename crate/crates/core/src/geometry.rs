//! Coordinate frames, rectangles and activation windows.
//!
//! All rectangles are half-open: `[x0, x1) × [y0, y1)` in continuous image
//! pixels. Grid cell `(i, j)` of a window covers `[i, i+1) × [j, j+1)` in grid
//! units, with its center at `(i + 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::PoseInstance;

const ASPECT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !finite || x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidRect { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// COCO-style `[x, y, w, h]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    /// Intersection, or `None` when it has no area.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        Rect::new(self.x0.max(other.x0), self.y0.max(other.y0), self.x1.min(other.x1), self.y1.min(other.y1)).ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Rect {
        Rect { x0: self.x0 + dx, y0: self.y0 + dy, x1: self.x1 + dx, y1: self.y1 + dy }
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageExtent {
    pub width: u32,
    pub height: u32,
}

impl ImageExtent {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn rect(&self) -> Rect {
        Rect { x0: 0.0, y0: 0.0, x1: self.width as f64, y1: self.height as f64 }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.rect().contains(p)
    }
}

/// Region over which a probability map is defined, plus its grid resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationWindow {
    rect: Rect,
    grid_w: usize,
    grid_h: usize,
}

impl ActivationWindow {
    /// Fails unless the rect's aspect ratio matches `grid_w : grid_h`.
    pub fn new(rect: Rect, grid_w: usize, grid_h: usize) -> Result<Self> {
        if grid_w == 0 || grid_h == 0 {
            return Err(Error::InvalidWindow(format!("grid {grid_w}x{grid_h}")));
        }
        let rect = Rect::new(rect.x0, rect.y0, rect.x1, rect.y1)?;
        let rect_aspect = rect.width() / rect.height();
        let grid_aspect = grid_w as f64 / grid_h as f64;
        if ((rect_aspect / grid_aspect) - 1.0).abs() > ASPECT_TOLERANCE {
            return Err(Error::InvalidWindow(format!(
                "rect aspect {rect_aspect} does not match grid {grid_w}x{grid_h}"
            )));
        }
        Ok(Self { rect, grid_w, grid_h })
    }

    pub fn rect(&self) -> &Rect {
        &self.rect
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn cell_count(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Cell width in image pixels.
    pub fn cell_w(&self) -> f64 {
        self.rect.width() / self.grid_w as f64
    }

    /// Cell height in image pixels.
    pub fn cell_h(&self) -> f64 {
        self.rect.height() / self.grid_h as f64
    }

    pub fn image_to_grid(&self, p: &Point) -> Point {
        Point::new((p.x - self.rect.x0) / self.cell_w(), (p.y - self.rect.y0) / self.cell_h())
    }

    pub fn grid_to_image(&self, p: &Point) -> Point {
        Point::new(p.x * self.cell_w() + self.rect.x0, p.y * self.cell_h() + self.rect.y0)
    }

    /// Image-space center of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> Point {
        self.grid_to_image(&Point::new(col as f64 + 0.5, row as f64 + 0.5))
    }

    /// Cell containing an image point, if any.
    pub fn cell_of(&self, p: &Point) -> Option<(usize, usize)> {
        if !self.rect.contains(p) {
            return None;
        }
        let g = self.image_to_grid(p);
        let col = (g.x.floor() as usize).min(self.grid_w - 1);
        let row = (g.y.floor() as usize).min(self.grid_h - 1);
        Some((col, row))
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.rect.contains(p)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> ActivationWindow {
        ActivationWindow { rect: self.rect.translate(dx, dy), ..*self }
    }
}

/// How a window is derived from a bounding box.
///
/// The aspect ratio is implied by the grid (`grid_w / grid_h`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub padding: f64,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { padding: 1.25, grid_w: 48, grid_h: 64 }
    }
}

impl WindowConfig {
    pub fn aspect_w_h(&self) -> f64 {
        self.grid_w as f64 / self.grid_h as f64
    }
}

/// Pads `bbox` about its center, then grows the side that falls short of the
/// target aspect ratio. The result may extend past the image border.
pub fn window_from_bbox(bbox: &Rect, cfg: &WindowConfig) -> Result<ActivationWindow> {
    if !cfg.padding.is_finite() || cfg.padding < 1.0 {
        return Err(Error::InvalidArgument(format!("padding {} < 1", cfg.padding)));
    }
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::InvalidRect { x0: bbox.x0, y0: bbox.y0, x1: bbox.x1, y1: bbox.y1 });
    }
    let aspect = cfg.aspect_w_h();
    let mut w = bbox.width() * cfg.padding;
    let mut h = bbox.height() * cfg.padding;
    if w > h * aspect {
        h = w / aspect;
    } else {
        w = h * aspect;
    }
    let c = bbox.center();
    let rect = Rect::new(c.x - 0.5 * w, c.y - 0.5 * h, c.x + 0.5 * w, c.y + 0.5 * h)?;
    ActivationWindow::new(rect, cfg.grid_w, cfg.grid_h)
}

/// The five regions cut out by the bounding box, the activation window and
/// the image border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeypointArea {
    /// Inside the bounding box.
    A,
    /// Inside window and image, outside the bounding box.
    B,
    /// Inside the window, outside the image.
    C,
    /// Inside the image, outside the window.
    D,
    /// Outside both window and image.
    E,
}

impl KeypointArea {
    pub const ALL: [KeypointArea; 5] =
        [KeypointArea::A, KeypointArea::B, KeypointArea::C, KeypointArea::D, KeypointArea::E];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Areas A, B and C lie inside the activation window.
    pub fn in_window(self) -> bool {
        matches!(self, KeypointArea::A | KeypointArea::B | KeypointArea::C)
    }

    pub fn label(self) -> char {
        (b'A' + self as u8) as char
    }
}

pub fn classify_keypoint(p: &Point, bbox: &Rect, window: &ActivationWindow, image: &ImageExtent) -> KeypointArea {
    if bbox.contains(p) {
        return KeypointArea::A;
    }
    match (window.contains(p), image.contains(p)) {
        (true, true) => KeypointArea::B,
        (true, false) => KeypointArea::C,
        (false, true) => KeypointArea::D,
        (false, false) => KeypointArea::E,
    }
}

/// Euclidean distance from `p` to the boundary of `rect`, whether `p` is inside
/// or outside.
pub fn boundary_distance(rect: &Rect, p: &Point) -> f64 {
    let inside = p.x >= rect.x0 && p.x <= rect.x1 && p.y >= rect.y0 && p.y <= rect.y1;
    if inside {
        (p.x - rect.x0).min(rect.x1 - p.x).min(p.y - rect.y0).min(rect.y1 - p.y)
    } else {
        let dx = (rect.x0 - p.x).max(p.x - rect.x1).max(0.0);
        let dy = (rect.y0 - p.y).max(p.y - rect.y1).max(0.0);
        dx.hypot(dy)
    }
}

/// One person together with the window and image it is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct AreaContext<'a> {
    pub instance: &'a PoseInstance,
    pub window: &'a ActivationWindow,
    pub image: ImageExtent,
}

/// Percentages of labeled keypoints falling into areas A–E.
pub fn domain_vector<'a, I>(items: I) -> Result<[f64; 5]>
where
    I: IntoIterator<Item = AreaContext<'a>>,
{
    let mut counts = [0u64; 5];
    for ctx in items {
        for kp in ctx.instance.keypoints.iter().filter(|k| k.is_labeled()) {
            let area = classify_keypoint(&kp.point(), &ctx.instance.bbox, ctx.window, &ctx.image);
            counts[area.index()] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no labeled keypoints"));
    }
    Ok(counts.map(|c| 100.0 * c as f64 / total as f64))
}
