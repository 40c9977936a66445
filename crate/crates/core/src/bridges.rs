//! Procedural three-span bridge silhouette corpus.
//!
//! Eight sub-types of symmetric facade line art, rendered black-on-white
//! without anti-aliasing. Horizontal geometry lives in meters (300 m total,
//! 80+140+80 for beam classes, 67+166+67 otherwise) and scales to the
//! canvas width; vertical geometry is a fraction of the canvas height with
//! the deck line fixed at 55%. Jitter is global per image, never per side;
//! exact mirror symmetry comes from rasterizing the left half and copying
//! it mirrored onto the right.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pgm::{self, GrayImage, PgmError};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const TOTAL_SPAN_M: f64 = 300.0;
pub const BEAM_SPANS_M: (f64, f64, f64) = (80.0, 140.0, 80.0);
pub const OTHER_SPANS_M: (f64, f64, f64) = (67.0, 166.0, 67.0);
/// Stays/slings/spandrels per half-span before the member-count jitter.
pub const BASE_MEMBERS: i32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeClass {
    BeamEqualSection,
    BeamVPierRigidFrame,
    ArchTopBearing,
    ArchBottomBearing,
    CableStayedHarp,
    CableStayedFan,
    SuspensionVerticalSling,
    SuspensionDiagonalSling,
}

impl BridgeClass {
    pub const ALL: [BridgeClass; 8] = [
        BridgeClass::BeamEqualSection,
        BridgeClass::BeamVPierRigidFrame,
        BridgeClass::ArchTopBearing,
        BridgeClass::ArchBottomBearing,
        BridgeClass::CableStayedHarp,
        BridgeClass::CableStayedFan,
        BridgeClass::SuspensionVerticalSling,
        BridgeClass::SuspensionDiagonalSling,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BridgeClass::BeamEqualSection => "beam_equal_section",
            BridgeClass::BeamVPierRigidFrame => "beam_v_pier_rigid_frame",
            BridgeClass::ArchTopBearing => "arch_top_bearing",
            BridgeClass::ArchBottomBearing => "arch_bottom_bearing",
            BridgeClass::CableStayedHarp => "cable_stayed_harp",
            BridgeClass::CableStayedFan => "cable_stayed_fan",
            BridgeClass::SuspensionVerticalSling => "suspension_vertical_sling",
            BridgeClass::SuspensionDiagonalSling => "suspension_diagonal_sling",
        }
    }

    /// Span triple in meters; beams sit on shorter side spans.
    pub fn spans_m(&self) -> (f64, f64, f64) {
        match self {
            BridgeClass::BeamEqualSection | BridgeClass::BeamVPierRigidFrame => BEAM_SPANS_M,
            _ => OTHER_SPANS_M,
        }
    }
}

impl fmt::Display for BridgeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BridgeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BridgeClass::ALL
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown bridge class {s:?}"))
    }
}

/// Global jitter multipliers; applied to whole-bridge parameters only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Vertical-element height factor in [0.85, 1.15].
    pub height_factor: f64,
    /// Member count offset in {-1, 0, +1}.
    pub member_offset: i32,
    /// Deck thickness factor in [0.8, 1.2].
    pub deck_factor: f64,
    /// Stroke width in pixels, 1 or 2.
    pub stroke_width: u32,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter { height_factor: 1.0, member_offset: 0, deck_factor: 1.0, stroke_width: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSpec {
    pub class: BridgeClass,
    pub spans_m: (f64, f64, f64),
    pub jitter: Jitter,
    pub seed: u64,
}

impl BridgeSpec {
    /// Draws the jitter vector (and a per-image seed tag) from a stream.
    pub fn sample(class: BridgeClass, rng: &mut impl Rng) -> Self {
        let jitter = Jitter {
            height_factor: rng.random_range(0.85..1.15),
            member_offset: rng.random_range(-1..=1),
            deck_factor: rng.random_range(0.8..1.2),
            stroke_width: if rng.random_range(0..2) == 0 { 1 } else { 2 },
        };
        BridgeSpec { class, spans_m: class.spans_m(), jitter, seed: rng.random() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { width: 192, height: 48 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RenderError {
    /// Canvas extents must be positive multiples of 8 (network constraint).
    BadCanvas { width: usize, height: usize },
    /// Geometry would leave the canvas; names the offending element.
    OutOfCanvas { element: &'static str },
}

impl fmt::Display for RenderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenderError::BadCanvas { width, height } => {
                write!(f, "canvas {width}x{height} must be positive multiples of 8")
            }
            RenderError::OutOfCanvas { element } => {
                write!(f, "{element} does not fit the canvas")
            }
        }
    }
}

impl std::error::Error for RenderError {}

// ── Rasterizer ──────────────────────────────────────────────────────

struct Canvas {
    w: i64,
    h: i64,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Canvas { w: w as i64, h: h as i64, px: vec![255; w * h] }
    }

    fn plot(&mut self, x: i64, y: i64, stroke: u32) {
        for dy in 0..stroke as i64 {
            for dx in 0..stroke as i64 {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && px < self.w && py >= 0 && py < self.h {
                    self.px[(py * self.w + px) as usize] = 0;
                }
            }
        }
    }

    fn fill_rect(&mut self, x0: i64, x1: i64, y0: i64, y1: i64) {
        for y in y0.max(0)..y1.min(self.h) {
            for x in x0.max(0)..x1.min(self.w) {
                self.px[(y * self.w + x) as usize] = 0;
            }
        }
    }

    /// Solid vertical bar centered on a continuous x coordinate.
    fn vbar(&mut self, x: f64, y0: f64, y1: f64, width: i64) {
        let left = (x - width as f64 / 2.0).round() as i64;
        let (top, bot) = (y0.min(y1), y0.max(y1));
        self.fill_rect(left, left + width, top.floor() as i64, bot.ceil() as i64 + 1);
    }

    /// Bresenham segment between continuous endpoints.
    fn seg(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, stroke: u32) {
        let (mut x, mut y) = (x0.round() as i64, y0.round() as i64);
        let (tx, ty) = (x1.round() as i64, y1.round() as i64);
        let dx = (tx - x).abs();
        let dy = -(ty - y).abs();
        let sx = if x < tx { 1 } else { -1 };
        let sy = if y < ty { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.plot(x, y, stroke);
            if x == tx && y == ty {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Plots y = f(x) per integer column over [x0, x1], joining adjacent
    /// columns vertically so steep curves stay connected.
    fn curve(&mut self, x0: f64, x1: f64, f: impl Fn(f64) -> f64, stroke: u32) {
        let (c0, c1) = ((x0.floor() as i64).min(x1.floor() as i64), (x0.floor() as i64).max(x1.floor() as i64));
        let mut prev: Option<i64> = None;
        for cx in c0..=c1 {
            let y = f(cx as f64 + 0.5).round() as i64;
            if let Some(py) = prev {
                let (lo, hi) = (py.min(y), py.max(y));
                for yy in lo..=hi {
                    self.plot(cx, yy, stroke);
                }
            } else {
                self.plot(cx, y, stroke);
            }
            prev = Some(y);
        }
    }

    /// Copies the left half mirrored onto the right half; exact symmetry
    /// by construction.
    fn mirror_left_onto_right(&mut self) {
        for y in 0..self.h {
            for x in 0..self.w / 2 {
                self.px[(y * self.w + (self.w - 1 - x)) as usize] =
                    self.px[(y * self.w + x) as usize];
            }
        }
    }
}

// ── Renderer ────────────────────────────────────────────────────────

struct Layout {
    sx: f64,
    center: f64,
    /// Main pier x positions in pixels.
    xa: f64,
    xb: f64,
    deck_row: i64,
    deck_thick: i64,
    ground: f64,
    stroke: u32,
    members: i32,
    hf: f64,
}

impl Layout {
    fn new(spec: &BridgeSpec, cfg: &RenderConfig) -> Self {
        let sx = cfg.width as f64 / TOTAL_SPAN_M;
        let h = cfg.height as f64;
        let deck_row = (h * 0.55).floor() as i64;
        let deck_thick =
            (((h / 16.0) * spec.jitter.deck_factor).round() as i64).max(1);
        Layout {
            sx,
            center: cfg.width as f64 / 2.0,
            xa: spec.spans_m.0 * sx,
            xb: (spec.spans_m.0 + spec.spans_m.1) * sx,
            deck_row,
            deck_thick,
            ground: h - 1.0,
            stroke: spec.jitter.stroke_width,
            members: (BASE_MEMBERS + spec.jitter.member_offset).max(2),
            hf: spec.jitter.height_factor,
        }
    }

    fn deck_top(&self) -> f64 {
        self.deck_row as f64
    }

    fn deck_bot(&self) -> f64 {
        (self.deck_row + self.deck_thick) as f64
    }

    /// Anchor columns strictly inside the main span, symmetric about the
    /// centerline: 2*members - 1 points.
    fn anchors(&self) -> Vec<f64> {
        let n = 2 * self.members as usize;
        (1..n).map(|k| self.xa + (self.xb - self.xa) * k as f64 / n as f64).collect()
    }

    fn tower_top(&self) -> Result<f64, RenderError> {
        let top = self.deck_row as f64 - 0.80 * self.deck_row as f64 * self.hf;
        if top < 1.0 {
            return Err(RenderError::OutOfCanvas { element: "tower" });
        }
        Ok(top)
    }
}

fn draw_deck(c: &mut Canvas, l: &Layout, extra_depth: i64) {
    c.fill_rect(0, c.w, l.deck_row, l.deck_row + l.deck_thick + extra_depth);
}

fn pier_width(l: &Layout) -> i64 {
    l.stroke as i64 + 1
}

fn draw(spec: &BridgeSpec, cfg: &RenderConfig, c: &mut Canvas) -> Result<(), RenderError> {
    let l = Layout::new(spec, cfg);
    if l.deck_bot() + 2.0 > l.ground {
        return Err(RenderError::OutOfCanvas { element: "deck" });
    }
    match spec.class {
        BridgeClass::BeamEqualSection => {
            let girder = (cfg.height as f64 / 24.0).round().max(1.0) as i64;
            draw_deck(c, &l, girder);
            for x in [l.xa, l.xb] {
                c.vbar(x, l.deck_bot() + girder as f64, l.ground, pier_width(&l));
            }
        }
        BridgeClass::BeamVPierRigidFrame => {
            let girder = (cfg.height as f64 / 24.0).round().max(1.0) as i64;
            draw_deck(c, &l, girder);
            let spread = 14.0 * l.sx * l.hf;
            let top = l.deck_bot() + girder as f64;
            for x in [l.xa, l.xb] {
                c.seg(x, l.ground, x - spread, top, l.stroke);
                c.seg(x, l.ground, x + spread, top, l.stroke);
            }
        }
        BridgeClass::ArchTopBearing => {
            if l.ground - l.deck_bot() < 4.0 {
                return Err(RenderError::OutOfCanvas { element: "arch rib" });
            }
            draw_deck(c, &l, 0);
            // Crown sits just under the deck, dipping lower for small
            // height factors.
            let apex = l.deck_bot() + (l.ground - l.deck_bot()) * 0.25 * (1.15 - l.hf);
            let (half, center, ground) = (l.center - l.xa, l.center, l.ground);
            let arch = move |x: f64| apex + (ground - apex) * ((x - center) / half).powi(2);
            c.curve(l.xa, l.xb, &arch, l.stroke);
            for xk in l.anchors() {
                c.vbar(xk, arch(xk), l.deck_bot(), l.stroke as i64);
            }
            for x in [l.xa, l.xb, l.xa / 2.0] {
                c.vbar(x, l.deck_bot(), l.ground, pier_width(&l));
            }
        }
        BridgeClass::ArchBottomBearing => {
            let apex = l.deck_top() - 0.72 * l.deck_row as f64 * l.hf;
            if apex < 1.0 {
                return Err(RenderError::OutOfCanvas { element: "arch rib" });
            }
            draw_deck(c, &l, 0);
            let (half, center, deck_top) = (l.center - l.xa, l.center, l.deck_top());
            let arch = move |x: f64| apex + (deck_top - apex) * ((x - center) / half).powi(2);
            c.curve(l.xa, l.xb, &arch, l.stroke);
            for xk in l.anchors() {
                c.vbar(xk, arch(xk), l.deck_top(), l.stroke as i64);
            }
            for x in [l.xa, l.xb, l.xa / 2.0] {
                c.vbar(x, l.deck_bot(), l.ground, pier_width(&l));
            }
        }
        BridgeClass::CableStayedHarp | BridgeClass::CableStayedFan => {
            let top = l.tower_top()?;
            draw_deck(c, &l, 0);
            // Left tower only; the mirror produces the right one.
            c.vbar(l.xa, top, l.ground, pier_width(&l));
            let tower_h = l.deck_top() - top;
            let reach_center = (l.center - l.xa) - 2.0;
            let reach_side = (l.xa - 3.0).min(reach_center);
            let m = l.members as f64;
            for k in 1..=l.members {
                let frac = k as f64 / m;
                let (anchor_y_c, anchor_y_s) = match spec.class {
                    // Harp: anchors climb the tower, stays stay parallel.
                    BridgeClass::CableStayedHarp => {
                        (l.deck_top() - tower_h * frac, l.deck_top() - tower_h * frac)
                    }
                    // Fan: everything hangs from just below the tower top.
                    _ => (top + 1.0, top + 1.0),
                };
                c.seg(l.xa, anchor_y_c, l.xa + reach_center * frac, l.deck_top(), l.stroke);
                c.seg(l.xa, anchor_y_s, l.xa - reach_side * frac, l.deck_top(), l.stroke);
            }
        }
        BridgeClass::SuspensionVerticalSling | BridgeClass::SuspensionDiagonalSling => {
            let top = l.tower_top()?;
            let low = l.deck_top() - (0.12 * l.deck_row as f64 * l.hf).max(1.5);
            if low <= top + 1.0 {
                return Err(RenderError::OutOfCanvas { element: "main cable" });
            }
            draw_deck(c, &l, 0);
            c.vbar(l.xa, top, l.ground, pier_width(&l));
            let (half, center) = (l.center - l.xa, l.center);
            let cable = move |x: f64| low + (top - low) * ((x - center) / half).powi(2);
            c.curve(l.xa, l.xb, &cable, l.stroke);
            // Side-span backstay down to the abutment at deck level.
            c.seg(2.0, l.deck_top(), l.xa, top, l.stroke);
            let spacing_half = (l.xb - l.xa) / (2.0 * l.members as f64) / 2.0;
            for xk in l.anchors() {
                match spec.class {
                    BridgeClass::SuspensionVerticalSling => {
                        c.vbar(xk, cable(xk), l.deck_top(), l.stroke as i64);
                    }
                    _ => {
                        let (xl, xr) = (xk - spacing_half, xk + spacing_half);
                        c.seg(xk, l.deck_top(), xl, cable(xl), l.stroke);
                        c.seg(xk, l.deck_top(), xr, cable(xr), l.stroke);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Rasterizes one spec to black-on-white line art, exactly
/// mirror-symmetric about the vertical centerline.
pub fn render(spec: &BridgeSpec, cfg: &RenderConfig) -> Result<GrayImage, RenderError> {
    if cfg.width == 0 || cfg.height == 0 || cfg.width % 8 != 0 || cfg.height % 8 != 0 {
        return Err(RenderError::BadCanvas { width: cfg.width, height: cfg.height });
    }
    let mut canvas = Canvas::new(cfg.width, cfg.height);
    draw(spec, cfg, &mut canvas)?;
    canvas.mirror_left_onto_right();
    Ok(GrayImage::new(cfg.width, cfg.height, canvas.px))
}

// ── Corpus I/O ──────────────────────────────────────────────────────

#[derive(Debug)]
pub enum CorpusError {
    Render(RenderError),
    Image(PgmError),
    Io { path: PathBuf, source: io::Error },
    Manifest { path: PathBuf, line: usize, reason: String },
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::Render(e) => e.fmt(f),
            CorpusError::Image(e) => e.fmt(f),
            CorpusError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CorpusError::Manifest { path, line, reason } => {
                write!(f, "{} line {line}: {reason}", path.display())
            }
        }
    }
}

impl std::error::Error for CorpusError {}

impl From<RenderError> for CorpusError {
    fn from(e: RenderError) -> Self {
        CorpusError::Render(e)
    }
}

impl From<PgmError> for CorpusError {
    fn from(e: PgmError) -> Self {
        CorpusError::Image(e)
    }
}

/// One manifest line per rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub class: BridgeClass,
    pub seed: u64,
    pub jitter: Jitter,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Renders `per_class` images per sub-type into `out_dir` along with a
/// JSON-lines manifest. Each class draws its jitter from its own named
/// stream, so corpora are reproducible class by class.
pub fn generate_corpus(
    per_class: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &RenderConfig,
) -> Result<Vec<ManifestEntry>, CorpusError> {
    fs::create_dir_all(out_dir)
        .map_err(|source| CorpusError::Io { path: out_dir.to_path_buf(), source })?;
    let mut entries = Vec::with_capacity(per_class * BridgeClass::ALL.len());
    for class in BridgeClass::ALL {
        let mut rng = stream(seed, &format!("dataset/{}", class.name()));
        for index in 0..per_class {
            let spec = BridgeSpec::sample(class, &mut rng);
            let image = render(&spec, cfg)?;
            let file = format!("{}_{index:04}.pgm", class.name());
            pgm::write_pgm(&image, &out_dir.join(&file))?;
            entries.push(ManifestEntry { file, class, seed: spec.seed, jitter: spec.jitter });
        }
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let mut lines = String::new();
    for entry in &entries {
        lines.push_str(&serde_json::to_string(entry).expect("manifest entries serialize"));
        lines.push('\n');
    }
    fs::write(&manifest_path, lines)
        .map_err(|source| CorpusError::Io { path: manifest_path, source })?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, CorpusError> {
    let path = dir.join(MANIFEST_NAME);
    let text =
        fs::read_to_string(&path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| CorpusError::Manifest {
            path: path.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads every manifest image as an `[H, W, 1]` tensor scaled to [0, 1],
/// in manifest order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Tensor<f32>>, CorpusError> {
    let entries = read_manifest(dir)?;
    let mut images = Vec::with_capacity(entries.len());
    for entry in &entries {
        let img = pgm::read_pgm(&dir.join(&entry.file))?;
        let data: Vec<f32> = img.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        images.push(
            Tensor::new(vec![img.height, img.width, 1], data).expect("pixel count matches header"),
        );
    }
    Ok(images)
}
