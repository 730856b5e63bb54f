//! Procedural tiles and slides: thin low-contrast filaments threaded through
//! round cells, with cell-edge arcs and fold lines as hard negatives and a
//! per-slide stain style.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::types::{BBox, Image, Label, TileImage};

pub const DEFAULT_TILE_SIZE: usize = 128;
pub const MIN_TILE_SIZE: usize = 64;

/// Stain / scanner appearance shared by every tile of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub hue_shift: f32,
    pub contrast: f32,
    pub brightness: f32,
    pub background_tint: [f32; 3],
}

impl Default for StyleParams {
    fn default() -> Self {
        Self {
            hue_shift: 0.0,
            contrast: 1.0,
            brightness: 1.0,
            background_tint: [0.94, 0.90, 0.93],
        }
    }
}

impl StyleParams {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f32, lo: f32, hi: f32| v.is_finite() && (lo..=hi).contains(&v);
        if !in_range(self.hue_shift, -0.1, 0.1) {
            return Err(param_err!("hue_shift {} outside [-0.1, 0.1]", self.hue_shift));
        }
        if !in_range(self.contrast, 0.7, 1.3) {
            return Err(param_err!("contrast {} outside [0.7, 1.3]", self.contrast));
        }
        if !in_range(self.brightness, 0.8, 1.2) {
            return Err(param_err!("brightness {} outside [0.8, 1.2]", self.brightness));
        }
        if self.background_tint.iter().any(|&t| !in_range(t, 0.0, 1.0)) {
            return Err(param_err!("background_tint {:?} outside [0, 1]", self.background_tint));
        }
        Ok(())
    }

    /// Draws a random style from the admissible ranges.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let base = rng.gen_range(0.86f32..0.97);
        Self {
            hue_shift: rng.gen_range(-0.1f32..=0.1),
            contrast: rng.gen_range(0.7f32..=1.3),
            brightness: rng.gen_range(0.8f32..=1.2),
            background_tint: [
                (base + rng.gen_range(-0.03f32..0.03)).clamp(0.0, 1.0),
                (base + rng.gen_range(-0.06f32..0.0)).clamp(0.0, 1.0),
                (base + rng.gen_range(-0.03f32..0.03)).clamp(0.0, 1.0),
            ],
        }
    }

    /// Brightness/contrast followed by a hue rotation, clamped to `[0, 1]`.
    pub fn apply(&self, rgb: [f32; 3]) -> [f32; 3] {
        let adj = rgb.map(|v| ((v * self.brightness) - 0.5) * self.contrast + 0.5);
        // Hue rotation in YIQ space.
        let y = 0.299 * adj[0] + 0.587 * adj[1] + 0.114 * adj[2];
        let i = 0.596 * adj[0] - 0.274 * adj[1] - 0.322 * adj[2];
        let q = 0.211 * adj[0] - 0.523 * adj[1] + 0.312 * adj[2];
        let angle = self.hue_shift * std::f32::consts::TAU;
        let (s, c) = angle.sin_cos();
        let (i2, q2) = (i * c - q * s, i * s + q * c);
        [
            (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0),
            (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0),
            (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0),
        ]
    }
}

#[derive(Debug, Clone)]
struct Cell {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    theta: f32,
    darkening: [f32; 3],
    nucleus: f32,
    /// Drawn after the filaments, partially hiding them.
    occluding: bool,
}

#[derive(Debug, Clone)]
struct Stroke {
    points: Vec<(f32, f32)>,
    width: f32,
    darkening: [f32; 3],
    dots: Vec<(f32, f32, f32)>,
}

#[derive(Debug, Clone)]
struct Geometry {
    cells: Vec<Cell>,
    filaments: Vec<Stroke>,
    confounders: Vec<Stroke>,
    noise_seed: u64,
}

fn catmull_rom(ctrl: &[(f32, f32)], samples_per_seg: usize) -> Vec<(f32, f32)> {
    let n = ctrl.len();
    let at = |i: isize| ctrl[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity((n - 1) * samples_per_seg + 1);
    for seg in 0..n - 1 {
        let (p0, p1, p2, p3) = (
            at(seg as isize - 1),
            at(seg as isize),
            at(seg as isize + 1),
            at(seg as isize + 2),
        );
        for s in 0..samples_per_seg {
            let t = s as f32 / samples_per_seg as f32;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f32, b: f32, c: f32, d: f32| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out.push(ctrl[n - 1]);
    out
}

fn polyline_length(points: &[(f32, f32)]) -> f32 {
    points
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

fn random_filament(rng: &mut ChaCha8Rng, size: f32) -> Stroke {
    let margin = 0.06 * size;
    let lo = margin;
    let hi = size - margin;
    let mut points = Vec::new();
    let mut ctrl = Vec::new();
    for attempt in 0..64 {
        let n_ctrl = rng.gen_range(4..=6);
        let target = rng.gen_range(0.38..0.6) * size;
        let step = target / (n_ctrl - 1) as f32;
        let mut x = rng.gen_range(0.2..0.8) * size;
        let mut y = rng.gen_range(0.2..0.8) * size;
        let mut heading = rng.gen_range(0.0..std::f32::consts::TAU);
        ctrl.clear();
        ctrl.push((x, y));
        for _ in 1..n_ctrl {
            heading += rng.gen_range(-0.6..0.6);
            x = (x + step * heading.cos()).clamp(lo, hi);
            y = (y + step * heading.sin()).clamp(lo, hi);
            ctrl.push((x, y));
        }
        points = catmull_rom(&ctrl, 10);
        if polyline_length(&points) >= 0.32 * size {
            break;
        }
        if attempt == 63 {
            // Diagonal fallback always satisfies the length floor.
            ctrl = vec![(lo, lo), (0.5 * size, 0.45 * size), (hi, hi)];
            points = catmull_rom(&ctrl, 10);
        }
    }
    let width = rng.gen_range(0.014..0.02) * size;
    let c = rng.gen_range(0.19..0.25);
    let darkening = [0.8 * c, c, 0.65 * c];
    let mut dots = Vec::new();
    for &(px, py) in &ctrl {
        if rng.gen_bool(0.4) {
            dots.push((px, py, rng.gen_range(0.011..0.016) * size));
        }
    }
    Stroke {
        points,
        width,
        darkening,
        dots,
    }
}

fn random_cell(rng: &mut ChaCha8Rng, size: f32, center: Option<(f32, f32)>) -> Cell {
    let a = rng.gen_range(0.045..0.095) * size;
    let b = a * rng.gen_range(0.65..1.0);
    let (cx, cy) = match center {
        Some((x, y)) => (x + rng.gen_range(-0.6..0.6) * a, y + rng.gen_range(-0.6..0.6) * a),
        None => (rng.gen_range(0.0..size), rng.gen_range(0.0..size)),
    };
    let tone = rng.gen_range(0.6..1.0);
    Cell {
        cx,
        cy,
        a,
        b,
        theta: rng.gen_range(0.0..std::f32::consts::PI),
        darkening: [0.12 * tone, 0.24 * tone, 0.08 * tone],
        nucleus: rng.gen_range(0.18..0.3),
        occluding: rng.gen_bool(0.25),
    }
}

fn cell_edge_arc(rng: &mut ChaCha8Rng, cell: &Cell, size: f32) -> Stroke {
    let span = rng.gen_range(1.0..2.6f32);
    let start = rng.gen_range(0.0..std::f32::consts::TAU);
    let scale = rng.gen_range(0.98..1.06);
    let n = 24;
    let (s, c) = cell.theta.sin_cos();
    let points = (0..=n)
        .map(|i| {
            let t = start + span * i as f32 / n as f32;
            let (u, v) = (cell.a * scale * t.cos(), cell.b * scale * t.sin());
            (cell.cx + u * c - v * s, cell.cy + u * s + v * c)
        })
        .collect();
    let d = rng.gen_range(0.1..0.17);
    Stroke {
        points,
        width: rng.gen_range(0.006..0.011) * size,
        darkening: [0.7 * d, d, 0.8 * d],
        dots: Vec::new(),
    }
}

fn fold_line(rng: &mut ChaCha8Rng, size: f32) -> Stroke {
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let (cx, cy) = (rng.gen_range(0.2..0.8) * size, rng.gen_range(0.2..0.8) * size);
    let half = size;
    let (s, c) = angle.sin_cos();
    let d = rng.gen_range(0.06..0.12);
    Stroke {
        points: vec![(cx - half * c, cy - half * s), (cx + half * c, cy + half * s)],
        width: rng.gen_range(0.03..0.05) * size,
        darkening: [d, d, 0.9 * d],
        dots: Vec::new(),
    }
}

fn tile_geometry(seed: u64, label: Label, size: usize) -> Geometry {
    let salt = if label.is_positive() { 0x9e37_79b9_7f4a_7c15 } else { 0x6a09_e667_f3bc_c909 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let s = size as f32;
    let n_cells = rng.gen_range(10..=40);
    let mut filaments = Vec::new();
    if label.is_positive() {
        for _ in 0..rng.gen_range(1..=3) {
            filaments.push(random_filament(&mut rng, s));
        }
    }
    let mut cells = Vec::with_capacity(n_cells);
    for i in 0..n_cells {
        // Thread filaments through cells: a share of cells sits on the path.
        let anchor = if !filaments.is_empty() && i % 3 == 0 {
            let f = &filaments[i % filaments.len()];
            Some(f.points[rng.gen_range(0..f.points.len())])
        } else {
            None
        };
        cells.push(random_cell(&mut rng, s, anchor));
    }
    let n_arcs = if label.is_positive() { rng.gen_range(0..=3) } else { rng.gen_range(2..=6) };
    let mut confounders = Vec::new();
    for _ in 0..n_arcs {
        let cell = &cells[rng.gen_range(0..cells.len())];
        confounders.push(cell_edge_arc(&mut rng, cell, s));
    }
    let n_folds = if label.is_positive() { rng.gen_range(0..=1) } else { rng.gen_range(0..=2) };
    for _ in 0..n_folds {
        confounders.push(fold_line(&mut rng, s));
    }
    Geometry {
        cells,
        filaments,
        confounders,
        noise_seed: rng.gen(),
    }
}

fn darken(canvas: &mut [f32], size: usize, x: usize, y: usize, cov: f32, d: &[f32; 3]) {
    let i = (y * size + x) * 3;
    for c in 0..3 {
        canvas[i + c] *= 1.0 - cov * d[c];
    }
}

fn draw_cell(canvas: &mut [f32], size: usize, cell: &Cell, alpha: f32) {
    let r = cell.a.max(cell.b) + 1.0;
    let (x0, x1) = ((cell.cx - r).floor().max(0.0) as usize, ((cell.cx + r).ceil().max(0.0) as usize).min(size));
    let (y0, y1) = ((cell.cy - r).floor().max(0.0) as usize, ((cell.cy + r).ceil().max(0.0) as usize).min(size));
    let (s, c) = cell.theta.sin_cos();
    let nucleus_dark = [0.45, 0.55, 0.3];
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f32 + 0.5 - cell.cx, y as f32 + 0.5 - cell.cy);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            let rho = ((u / cell.a).powi(2) + (v / cell.b).powi(2)).sqrt();
            let edge = ((1.0 - rho) * cell.b + 0.5).clamp(0.0, 1.0);
            if edge > 0.0 {
                darken(canvas, size, x, y, alpha * edge, &cell.darkening);
            }
            let rn = cell.nucleus;
            let nuc = ((rn - rho) * cell.b + 0.5).clamp(0.0, 1.0);
            if nuc > 0.0 {
                darken(canvas, size, x, y, alpha * nuc, &nucleus_dark);
            }
        }
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * abx, a.1 + t * aby);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Pixel-space extent of a stroke including its line width and dots.
fn stroke_extent(st: &Stroke) -> (f32, f32, f32, f32) {
    let pad = 0.5 * st.width + 0.5;
    let mut ext = (f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &(x, y) in &st.points {
        ext = (ext.0.min(x - pad), ext.1.min(y - pad), ext.2.max(x + pad), ext.3.max(y + pad));
    }
    for &(x, y, r) in &st.dots {
        let p = r + 0.5;
        ext = (ext.0.min(x - p), ext.1.min(y - p), ext.2.max(x + p), ext.3.max(y + p));
    }
    ext
}

fn draw_stroke(canvas: &mut [f32], size: usize, st: &Stroke) {
    let (ex0, ey0, ex1, ey1) = stroke_extent(st);
    let clampi = |v: f32| (v.max(0.0) as usize).min(size);
    let (x0, x1) = (clampi(ex0.floor()), clampi(ex1.ceil()));
    let (y0, y1) = (clampi(ey0.floor()), clampi(ey1.ceil()));
    let half = 0.5 * st.width;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let mut d = f32::INFINITY;
            for w in st.points.windows(2) {
                d = d.min(segment_distance(p, w[0], w[1]));
            }
            let mut cov = (half + 0.5 - d).clamp(0.0, 1.0);
            for &(cx, cy, r) in &st.dots {
                let dd = ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt();
                cov = cov.max((r + 0.5 - dd).clamp(0.0, 1.0));
            }
            if cov > 0.0 {
                darken(canvas, size, x, y, cov, &st.darkening);
            }
        }
    }
}

fn stroke_box(st: &Stroke, size: usize) -> BBox {
    let s = size as f32;
    let (x0, y0, x1, y1) = stroke_extent(st);
    BBox::new(x0.clamp(0.0, s), y0.clamp(0.0, s), x1.clamp(0.0, s), y1.clamp(0.0, s))
}

/// Renders one tile. Geometry depends only on `(seed, label, size)`; the
/// style only changes colours, so boxes are style-independent.
pub fn gen_tile(seed: u64, label: Label, style: &StyleParams, size: usize) -> Result<TileImage> {
    if size < MIN_TILE_SIZE {
        return Err(param_err!("tile size {size} below minimum {MIN_TILE_SIZE}"));
    }
    style.validate()?;
    let geo = tile_geometry(seed, label, size);
    let mut canvas = Image::filled(size, size, style.background_tint).into_data();
    for cell in geo.cells.iter().filter(|c| !c.occluding) {
        draw_cell(&mut canvas, size, cell, 1.0);
    }
    for st in &geo.confounders {
        draw_stroke(&mut canvas, size, st);
    }
    for st in &geo.filaments {
        draw_stroke(&mut canvas, size, st);
    }
    for cell in geo.cells.iter().filter(|c| c.occluding) {
        draw_cell(&mut canvas, size, cell, 0.7);
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(geo.noise_seed);
    let noise = Normal::new(0.0f32, 0.012).expect("valid std");
    for px in canvas.chunks_exact_mut(3) {
        let n = noise.sample(&mut noise_rng);
        let styled = style.apply([px[0] + n, px[1] + n, px[2] + n]);
        px.copy_from_slice(&styled);
    }
    let boxes = geo.filaments.iter().map(|f| stroke_box(f, size)).collect();
    TileImage::new(format!("tile_{seed}"), Image::new(size, size, canvas)?, label, boxes)
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Stand-alone tiles (each with its own random style).
    pub tiles: usize,
    pub positive_ratio: f64,
    pub slides: usize,
    pub tiles_per_slide: usize,
    pub slide_positive_ratio: f64,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tiles: 100,
            positive_ratio: 0.5,
            slides: 0,
            tiles_per_slide: 12,
            slide_positive_ratio: 0.5,
            tile_size: DEFAULT_TILE_SIZE,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 && self.slides == 0 {
            return Err(param_err!("nothing to generate: zero tiles and zero slides"));
        }
        if self.slides > 0 && self.tiles_per_slide == 0 {
            return Err(param_err!("tiles_per_slide must be positive"));
        }
        for (name, r) in [("positive_ratio", self.positive_ratio), ("slide_positive_ratio", self.slide_positive_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(param_err!("{name} {r} outside [0, 1]"));
            }
        }
        if self.tile_size < MIN_TILE_SIZE {
            return Err(param_err!("tile size {} below minimum {MIN_TILE_SIZE}", self.tile_size));
        }
        Ok(())
    }
}

/// Slide membership and slide-level truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub slide_label: Label,
    pub tile_ids: Vec<String>,
    pub style: StyleParams,
}

#[derive(Debug, Clone)]
pub struct Slide {
    pub manifest: SlideManifest,
    pub tiles: Vec<TileImage>,
}

/// An in-memory synthetic dataset.
#[derive(Debug, Clone, Default)]
pub struct SynthDataset {
    pub tiles: Vec<TileImage>,
    pub slides: Vec<Slide>,
}

fn shuffled_labels(rng: &mut ChaCha8Rng, n: usize, ratio: f64) -> Vec<Label> {
    let n_pos = (n as f64 * ratio).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_pos { Label::Positive } else { Label::Negative })
        .collect();
    labels.shuffle(rng);
    labels
}

/// Generates stand-alone tiles and slides. Everything is a pure function of
/// the config.
pub fn gen_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tiles = Vec::with_capacity(config.tiles);
    for (i, label) in shuffled_labels(&mut rng, config.tiles, config.positive_ratio).into_iter().enumerate() {
        let style = StyleParams::sample(&mut rng);
        let seed = rng.gen::<u64>() >> 1;
        let mut tile = gen_tile(seed, label, &style, config.tile_size)?;
        tile.tile_id = format!("t{i:05}");
        tiles.push(tile);
    }
    let mut slides = Vec::with_capacity(config.slides);
    for (s, slide_label) in shuffled_labels(&mut rng, config.slides, config.slide_positive_ratio)
        .into_iter()
        .enumerate()
    {
        let style = StyleParams::sample(&mut rng);
        let n = config.tiles_per_slide;
        let n_pos = if slide_label.is_positive() {
            rng.gen_range(1..=(n / 4).max(1))
        } else {
            0
        };
        let mut labels: Vec<Label> = (0..n)
            .map(|i| if i < n_pos { Label::Positive } else { Label::Negative })
            .collect();
        labels.shuffle(&mut rng);
        let slide_id = format!("s{s:04}");
        let mut slide_tiles = Vec::with_capacity(n);
        for (j, label) in labels.into_iter().enumerate() {
            let seed = rng.gen::<u64>() >> 1;
            let mut tile = gen_tile(seed, label, &style, config.tile_size)?;
            tile.tile_id = format!("{slide_id}_t{j:03}");
            slide_tiles.push(tile);
        }
        slides.push(Slide {
            manifest: SlideManifest {
                slide_id,
                slide_label,
                tile_ids: slide_tiles.iter().map(|t| t.tile_id.clone()).collect(),
                style,
            },
            tiles: slide_tiles,
        });
    }
    Ok(SynthDataset { tiles, slides })
}
