//! Synthetic multimodal SOD/COD scenes and their on-disk layout.
//!
//! A scene has a value-noise textured background and one or two target
//! shapes. SOD targets contrast strongly with the background; COD targets
//! reuse the background texture at a different phase with their mean
//! intensity matched to their surroundings. Auxiliary maps (depth, thermal,
//! flow) reveal only the target. With probability `distractor_prob` a
//! non-target shape of the opposite kind is added: a camouflaged one in SOD
//! scenes and a salient one in COD scenes, so the same kind of scene can
//! carry different labels under the two tasks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::types::{Cell, Domain, Task};

pub const MIN_IMAGE_SIZE: usize = 32;
/// Largest foreground fraction a valid sample may have.
pub const MAX_COVERAGE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub task: Task,
    /// `(3, H, W)` in `[0, 1]`.
    pub rgb: Tensor,
    /// `(1, H, W)` in `[0, 1]`, present iff the domain is not rgb.
    pub aux: Option<Tensor>,
    /// `(H, W)` with values in `{0, 1}`.
    pub gt: Tensor,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.gt.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidSample {
                id: self.id.clone(),
                msg,
            })
        };
        let gs = self.gt.shape();
        if gs.len() != 2 || gs[0] != gs[1] {
            return bad(format!("ground truth must be square (H, W), got {gs:?}"));
        }
        let (h, w) = (gs[0], gs[1]);
        if self.rgb.shape() != [3, h, w] {
            return bad(format!("rgb is {:?}, expected (3, {h}, {w})", self.rgb.shape()));
        }
        match (&self.aux, self.domain.has_aux()) {
            (Some(a), true) if a.shape() != [1, h, w] => {
                return bad(format!("aux is {:?}, expected (1, {h}, {w})", a.shape()))
            }
            (None, true) => return bad(format!("domain {} requires an aux map", self.domain)),
            (Some(_), false) => return bad("rgb samples carry no aux map".into()),
            _ => {}
        }
        let in_unit = |t: &Tensor| t.data().iter().all(|x| (0.0..=1.0).contains(x));
        if !in_unit(&self.rgb) || !self.aux.as_ref().map_or(true, in_unit) {
            return bad("pixel values outside [0, 1]".into());
        }
        if self.gt.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            return bad("mask is not binary".into());
        }
        let fg = self.gt.sum();
        if fg < 1.0 {
            return bad("mask has no foreground".into());
        }
        if fg / (h * w) as f64 > MAX_COVERAGE {
            return bad(format!("mask covers {:.1}% of the image", 100.0 * fg / (h * w) as f64));
        }
        Ok(())
    }
}

/// Sample counts of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub min_octaves: usize,
    pub max_octaves: usize,
    /// Lattice cells per side of the coarsest noise octave.
    pub base_cells: usize,
    pub distractor_prob: f64,
    /// Keys are `domain_task` directory names.
    pub cells: BTreeMap<String, CellCounts>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::uniform(0, 50, 20)
    }
}

impl DatasetSpec {
    /// Every one of the eight cells with the same counts.
    pub fn uniform(seed: u64, train: usize, test: usize) -> Self {
        DatasetSpec {
            seed,
            image_size: 72,
            noise: 0.02,
            min_octaves: 2,
            max_octaves: 4,
            base_cells: 3,
            distractor_prob: 0.5,
            cells: Cell::all()
                .into_iter()
                .map(|c| (c.dir_name(), CellCounts { train, test }))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size must be at least {MIN_IMAGE_SIZE}, got {}",
                self.image_size
            )));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("noise must be >= 0 and distractor_prob in [0, 1]".into()));
        }
        if self.min_octaves == 0 || self.min_octaves > self.max_octaves || self.base_cells == 0 {
            return Err(Error::Config("invalid texture parameters".into()));
        }
        for key in self.cells.keys() {
            key.parse::<Cell>()?;
        }
        Ok(())
    }

    pub fn counts(&self, cell: Cell) -> CellCounts {
        self.cells
            .get(&cell.dir_name())
            .copied()
            .unwrap_or(CellCounts { train: 0, test: 0 })
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }

    fn generator(&self) -> SceneParams {
        SceneParams {
            noise: self.noise,
            min_octaves: self.min_octaves,
            max_octaves: self.max_octaves,
            base_cells: self.base_cells,
            distractor_prob: self.distractor_prob,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or test)"))),
        }
    }
}

// ---------------------------------------------------------------------------
// scene synthesis

#[derive(Clone, Copy, Debug)]
struct SceneParams {
    noise: f64,
    min_octaves: usize,
    max_octaves: usize,
    base_cells: usize,
    distractor_prob: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        DatasetSpec::default().generator()
    }
}

/// Periodic multi-octave value noise on the unit square, normalized to
/// `[0, 1]`.
struct ValueNoise {
    octaves: Vec<(usize, f64, Vec<f64>)>,
}

impl ValueNoise {
    fn new(rng: &mut Rng, octaves: usize, base_cells: usize) -> Self {
        let octaves = (0..octaves)
            .map(|k| {
                let n = base_cells << k;
                let lattice = (0..n * n).map(|_| rng.gen::<f64>()).collect();
                (n, 0.5f64.powi(k as i32), lattice)
            })
            .collect();
        ValueNoise { octaves }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        for (n, amp, lattice) in &self.octaves {
            let n = *n;
            let fx = (x * n as f64).rem_euclid(n as f64);
            let fy = (y * n as f64).rem_euclid(n as f64);
            let (x0, y0) = (fx.floor() as usize % n, fy.floor() as usize % n);
            let (x1, y1) = ((x0 + 1) % n, (y0 + 1) % n);
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(fx.fract()), smooth(fy.fract()));
            let v = |xi: usize, yi: usize| lattice[yi * n + xi];
            let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
            let bottom = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
            total += amp * (top * (1.0 - ty) + bottom * ty);
            norm += amp;
        }
        total / norm
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Polygon { points: Vec<(f64, f64)> },
}

impl Shape {
    fn random(rng: &mut Rng, cx: f64, cy: f64, radius: f64) -> Shape {
        if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cx,
                cy,
                rx: radius * rng::uniform(rng, 0.7, 1.0),
                ry: radius * rng::uniform(rng, 0.5, 1.0),
                angle: rng::uniform(rng, 0.0, std::f64::consts::PI),
            }
        } else {
            let k = rng.gen_range(5..=8);
            let phase = rng::uniform(rng, 0.0, std::f64::consts::TAU);
            let points = (0..k)
                .map(|i| {
                    let a = phase + std::f64::consts::TAU * i as f64 / k as f64;
                    let r = radius * rng::uniform(rng, 0.6, 1.0);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            Shape::Polygon { points }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (dx, dy) = (x - cx, y - cy);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { points } => {
                let mut inside = false;
                let n = points.len();
                for i in 0..n {
                    let (xi, yi) = points[i];
                    let (xj, yj) = points[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    fn rasterize(&self, size: usize) -> Vec<bool> {
        (0..size * size)
            .map(|i| self.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
            .collect()
    }
}

fn dilate(mask: &[bool], size: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let s = size as isize;
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && yy < s && xx >= 0 && xx < s && mask[(yy * s + xx) as usize]
                })
            })
        })
        .collect()
}

fn luminance(rgb: &[Vec<f64>; 3], i: usize) -> f64 {
    (rgb[0][i] + rgb[1][i] + rgb[2][i]) / 3.0
}

fn mean_over(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

struct Canvas {
    size: usize,
    rgb: [Vec<f64>; 3],
    texture: ValueNoise,
    tint: [f64; 3],
    base: f64,
    amplitude: f64,
}

impl Canvas {
    fn background(rng: &mut Rng, size: usize, p: &SceneParams) -> Canvas {
        let octaves = rng.gen_range(p.min_octaves..=p.max_octaves);
        let texture = ValueNoise::new(rng, octaves, p.base_cells);
        let base = if rng.gen_bool(0.5) {
            rng::uniform(rng, 0.15, 0.35)
        } else {
            rng::uniform(rng, 0.65, 0.85)
        };
        let tint = [0; 3].map(|_| rng::uniform(rng, -0.05, 0.05));
        let amplitude = rng::uniform(rng, 0.2, 0.3);
        let mut canvas = Canvas {
            size,
            rgb: [vec![0.0; size * size], vec![0.0; size * size], vec![0.0; size * size]],
            texture,
            tint,
            base,
            amplitude,
        };
        for i in 0..size * size {
            let v = canvas.textured(i, (0.0, 0.0));
            for c in 0..3 {
                canvas.rgb[c][i] = v[c];
            }
        }
        canvas
    }

    fn textured(&self, i: usize, phase: (f64, f64)) -> [f64; 3] {
        let s = self.size as f64;
        let x = ((i % self.size) as f64 + 0.5) / s + phase.0;
        let y = ((i / self.size) as f64 + 0.5) / s + phase.1;
        let t = self.texture.sample(x, y) - 0.5;
        [0, 1, 2].map(|c| self.base + self.tint[c] + self.amplitude * t)
    }

    /// Flat contrasting fill with a faint texture of its own.
    fn paint_salient(&mut self, rng: &mut Rng, region: &[bool]) {
        let delta = rng::uniform(rng, 0.42, 0.5);
        let level = if self.base < 0.5 { self.base + delta } else { self.base - delta };
        let tint = [0; 3].map(|_| rng::uniform(rng, -0.05, 0.05));
        let phase = (rng.gen::<f64>(), rng.gen::<f64>());
        let s = self.size as f64;
        for (i, _) in region.iter().enumerate().filter(|(_, &m)| m) {
            let x = ((i % self.size) as f64 + 0.5) / s + phase.0;
            let y = ((i / self.size) as f64 + 0.5) / s + phase.1;
            let t = 0.1 * (self.texture.sample(x, y) - 0.5);
            for c in 0..3 {
                self.rgb[c][i] = level + tint[c] + t;
            }
        }
    }

    /// Background texture at a different phase, shifted so the region's mean
    /// intensity sits within a few hundredths of its surroundings.
    fn paint_camouflaged(&mut self, rng: &mut Rng, region: &[bool]) {
        let phase = (rng::uniform(rng, 0.2, 0.8), rng::uniform(rng, 0.2, 0.8));
        for (i, _) in region.iter().enumerate().filter(|(_, &m)| m) {
            let v = self.textured(i, phase);
            for c in 0..3 {
                self.rgb[c][i] = v[c];
            }
        }
        let ring: Vec<bool> = dilate(region, self.size, 3)
            .into_iter()
            .zip(region)
            .map(|(d, &m)| d && !m)
            .collect();
        let n = self.size * self.size;
        let surround = mean_over((0..n).filter(|&i| ring[i]).map(|i| luminance(&self.rgb, i)));
        let inside = mean_over((0..n).filter(|&i| region[i]).map(|i| luminance(&self.rgb, i)));
        if let (Some(surround), Some(inside)) = (surround, inside) {
            let shift = surround - inside + rng::uniform(rng, -0.03, 0.03);
            for i in (0..n).filter(|&i| region[i]) {
                for c in 0..3 {
                    self.rgb[c][i] += shift;
                }
            }
        }
    }
}

fn aux_map(rng: &mut Rng, domain: Domain, mask: &[bool], size: usize) -> Vec<f64> {
    let n = size * size;
    match domain {
        Domain::Rgb => unreachable!("rgb has no auxiliary map"),
        Domain::Depth => {
            let angle = rng::uniform(rng, 0.0, std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let lo = rng::uniform(rng, 0.1, 0.2);
            let span = rng::uniform(rng, 0.2, 0.35);
            let plane = rng::uniform(rng, 0.8, 0.95);
            (0..n)
                .map(|i| {
                    if mask[i] {
                        return plane;
                    }
                    let x = (i % size) as f64 / size as f64 - 0.5;
                    let y = (i / size) as f64 / size as f64 - 0.5;
                    lo + span * (0.5 + x * dx + y * dy)
                })
                .collect()
        }
        Domain::Thermal => {
            let base = rng::uniform(rng, 0.1, 0.25);
            let heat = rng::uniform(rng, 0.5, 0.7);
            let sigma = rng::uniform(rng, 1.5, 2.5);
            let blurred = gaussian_blur(&mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<_>>(), size, sigma);
            blurred.into_iter().map(|b| base + heat * b).collect()
        }
        Domain::Flow => {
            let motion = rng::uniform(rng, 0.5, 0.9);
            let still = rng::uniform(rng, 0.0, 0.05);
            (0..n).map(|i| if mask[i] { motion } else { still }).collect()
        }
    }
}

fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / total).collect();
    let s = size as isize;
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as isize, (i % size) as isize);
                kernel
                    .iter()
                    .enumerate()
                    .map(|(j, w)| {
                        let off = j as isize - r;
                        let (yy, xx) = if horizontal { (y, (x + off).clamp(0, s - 1)) } else { ((y + off).clamp(0, s - 1), x) };
                        w * input[(yy * s + xx) as usize]
                    })
                    .sum()
            })
            .collect()
    };
    pass(&pass(src, true), false)
}

fn place_targets(rng: &mut Rng, size: usize) -> Vec<bool> {
    let s = size as f64;
    loop {
        let count = rng.gen_range(1..=2);
        let mut mask = vec![false; size * size];
        for _ in 0..count {
            let cx = s * rng::uniform(rng, 0.3, 0.7);
            let cy = s * rng::uniform(rng, 0.3, 0.7);
            let radius = s * rng::uniform(rng, 0.1, 0.2);
            for (m, inside) in mask.iter_mut().zip(Shape::random(rng, cx, cy, radius).rasterize(size)) {
                *m |= inside;
            }
        }
        let fg = mask.iter().filter(|&&m| m).count();
        if fg >= 1 && (fg as f64) <= 0.4 * (size * size) as f64 {
            return mask;
        }
    }
}

/// A distractor shape at least four pixels away from every target pixel, or
/// `None` when no such placement was found.
fn place_distractor(rng: &mut Rng, targets: &[bool], size: usize) -> Option<Vec<bool>> {
    let keep_out = dilate(targets, size, 4);
    let s = size as f64;
    for _ in 0..40 {
        let cx = s * rng::uniform(rng, 0.2, 0.8);
        let cy = s * rng::uniform(rng, 0.2, 0.8);
        let radius = s * rng::uniform(rng, 0.08, 0.14);
        let shape = Shape::random(rng, cx, cy, radius).rasterize(size);
        let area = shape.iter().filter(|&&m| m).count();
        if area > 0 && !shape.iter().zip(&keep_out).any(|(&a, &b)| a && b) {
            return Some(shape);
        }
    }
    None
}

fn generate_with(domain: Domain, task: Task, seed: u64, size: usize, params: &SceneParams) -> Result<Sample> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!("image size must be at least {MIN_IMAGE_SIZE}, got {size}")));
    }
    let mut rng = rng::seeded(seed);
    let mut canvas = Canvas::background(&mut rng, size, params);
    let targets = place_targets(&mut rng, size);
    let distractor = if rng.gen_bool(params.distractor_prob) {
        place_distractor(&mut rng, &targets, size)
    } else {
        None
    };
    match task {
        Task::Sod => {
            if let Some(d) = &distractor {
                canvas.paint_camouflaged(&mut rng, d);
            }
            canvas.paint_salient(&mut rng, &targets);
        }
        Task::Cod => {
            if let Some(d) = &distractor {
                canvas.paint_salient(&mut rng, d);
            }
            canvas.paint_camouflaged(&mut rng, &targets);
        }
    }

    let noise = params.noise;
    let noisy = |v: f64, rng: &mut Rng| (v + noise * rng::normal(rng)).clamp(0.0, 1.0);
    let mut rgb = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for i in 0..size * size {
            let v = canvas.rgb[c][i];
            rgb.push(noisy(v, &mut rng));
        }
    }
    let aux = if domain.has_aux() {
        let raw = aux_map(&mut rng, domain, &targets, size);
        let data = raw.into_iter().map(|v| noisy(v, &mut rng)).collect();
        Some(Tensor::new(&[1, size, size], data)?)
    } else {
        None
    };
    Ok(Sample {
        id: format!("{seed:016x}"),
        domain,
        task,
        rgb: Tensor::new(&[3, size, size], rgb)?,
        aux,
        gt: Tensor::new(&[size, size], targets.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?,
    })
}

/// One scene; a pure function of its arguments.
pub fn generate_sample(domain: Domain, task: Task, seed: u64, size: usize) -> Result<Sample> {
    generate_with(domain, task, seed, size, &SceneParams::default())
}

/// Per-sample seed derived from the master seed, the cell and the sample
/// index within the cell.
pub fn sample_seed(master: u64, cell: Cell, index: usize) -> u64 {
    rng::mix_seed(&[master, cell.domain.index() as u64, cell.task.index() as u64, index as u64])
}

// ---------------------------------------------------------------------------
// storage

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub cells: BTreeMap<String, CellCounts>,
    pub total: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{id}.rgb.ten")),
        dir.join(format!("{id}.aux.ten")),
        dir.join(format!("{id}.gt.pgm")),
    )
}

pub fn split_dir(root: &Path, cell: Cell, split: Split) -> PathBuf {
    root.join(cell.dir_name()).join(split.name())
}

/// Writes every cell of the spec below `out` and returns the manifest.
/// Train samples take indices `0..train`, test samples continue after them.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let params = spec.generator();
    let mut total = 0;
    for cell in Cell::all() {
        let counts = spec.counts(cell);
        for (split, range) in [(Split::Train, 0..counts.train), (Split::Test, counts.train..counts.train + counts.test)] {
            let dir = split_dir(out, cell, split);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for index in range {
                let mut sample = generate_with(cell.domain, cell.task, sample_seed(spec.seed, cell, index), spec.image_size, &params)?;
                sample.id = format!("{index:05}");
                write_sample(&dir, &sample)?;
                total += 1;
            }
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        seed: spec.seed,
        cells: Cell::all().into_iter().map(|c| (c.dir_name(), spec.counts(c))).collect(),
        total,
    };
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    let (rgb, aux, gt) = sample_paths(dir, &sample.id);
    sample.rgb.save_ten(&rgb)?;
    if let Some(a) = &sample.aux {
        a.save_ten(&aux)?;
    }
    write_pgm(&gt, &sample.gt)
}

/// Binary P5 PGM with 0/255 values.
pub fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.data().iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("expected P5 magic, found `{}`", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM header field `{s}`")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::format(path, format!("expected maxval 255, found {max}")));
    }
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| Error::format(path, "truncated PGM payload"))?;
    let mut data = Vec::with_capacity(w * h);
    for &b in body {
        match b {
            0 => data.push(0.0),
            255 => data.push(1.0),
            v => return Err(Error::format(path, format!("mask value {v} is neither 0 nor 255"))),
        }
    }
    Tensor::new(&[h, w], data)
}

/// Loads one split of one cell in lexicographic id order, validating every
/// sample. A missing split directory is an empty split.
pub fn load_split(root: &Path, domain: Domain, task: Task, split: Split) -> Result<Vec<Sample>> {
    let dir = split_dir(root, Cell::new(domain, task), split);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".gt.pgm") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let (rgb_path, aux_path, gt_path) = sample_paths(&dir, &id);
            let rgb = Tensor::load_ten(&rgb_path)?;
            let aux = if domain.has_aux() {
                Some(Tensor::load_ten(&aux_path)?)
            } else {
                if aux_path.exists() {
                    return Err(Error::InvalidSample {
                        id,
                        msg: "rgb sample has an aux map on disk".into(),
                    });
                }
                None
            };
            let gt = read_pgm(&gt_path)?;
            let sample = Sample {
                id,
                domain,
                task,
                rgb,
                aux,
                gt,
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_rasterize_sensibly() {
        let e = Shape::Ellipse {
            cx: 8.0,
            cy: 8.0,
            rx: 4.0,
            ry: 2.0,
            angle: 0.0,
        };
        let m = e.rasterize(16);
        assert!(m[8 * 16 + 8]);
        assert!(!m[8 * 16 + 13]);
        assert!(!m[11 * 16 + 8]);
        let square = Shape::Polygon {
            points: vec![(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)],
        };
        assert_eq!(square.rasterize(8).iter().filter(|&&b| b).count(), 16);
    }

    #[test]
    fn noise_is_periodic_and_bounded() {
        let mut r = rng::seeded(3);
        let n = ValueNoise::new(&mut r, 3, 3);
        for i in 0..50 {
            let x = i as f64 / 37.0;
            let v = n.sample(x, 0.3);
            assert!((0.0..=1.0).contains(&v));
            assert!((v - n.sample(x + 1.0, 1.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_mass_away_from_edges() {
        let mut src = vec![0.0; 21 * 21];
        src[10 * 21 + 10] = 1.0;
        let b = gaussian_blur(&src, 21, 1.5);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn small_images_are_rejected() {
        assert!(generate_sample(Domain::Rgb, Task::Sod, 1, 16).is_err());
    }

    #[test]
    fn split_names_roundtrip() {
        for s in [Split::Train, Split::Test] {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
    }
}
