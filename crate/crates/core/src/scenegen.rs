//! Procedural scenes with exact depth, shape labels and texture labels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::formats;
use crate::renderer::Camera;
use crate::seeding;

pub const SHAPE_CLASSES: usize = 8;
pub const TEXTURE_CLASSES: usize = 8;

pub const SHAPE_NAMES: [&str; SHAPE_CLASSES] =
    ["sphere", "cube", "pillar", "slab", "twin_spheres", "stacked_boxes", "snowman", "row_of_three"];

pub const TEXTURE_NAMES: [&str; TEXTURE_CLASSES] = [
    "checker_warm",
    "stripes_warm",
    "dots_warm",
    "solid_warm",
    "checker_cool",
    "stripes_cool",
    "dots_cool",
    "solid_cool",
];

/// Height of the ground plane the objects rest on.
pub const GROUND_Y: f64 = -0.6;
const GROUND_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Checker,
    Stripes,
    Dots,
    Solid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub pattern: Pattern,
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
}

impl Texture {
    /// Texture of class `class` with colors jittered by `rng`.
    pub fn of_class(class: usize, rng: &mut impl Rng) -> Self {
        let pattern = [Pattern::Checker, Pattern::Stripes, Pattern::Dots, Pattern::Solid][class % 4];
        let (primary, secondary) =
            if class < 4 { ([0.85, 0.2, 0.15], [0.95, 0.85, 0.3]) } else { ([0.15, 0.3, 0.85], [0.9, 0.9, 0.95]) };
        let mut jitter = |c: [f64; 3]| c.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        Self { pattern, primary: jitter(primary), secondary: jitter(secondary) }
    }

    pub fn solid(color: [f64; 3]) -> Self {
        Self { pattern: Pattern::Solid, primary: color, secondary: color }
    }

    /// Color at world position `p`.
    pub fn color_at(&self, p: [f64; 3]) -> [f64; 3] {
        let second = match self.pattern {
            Pattern::Solid => false,
            Pattern::Checker => {
                let s = p.iter().map(|v| (v * 5.0).floor() as i64).sum::<i64>();
                s.rem_euclid(2) == 1
            }
            Pattern::Stripes => ((p[1] * 8.0).floor() as i64).rem_euclid(2) == 1,
            Pattern::Dots => {
                let d2: f64 = p.iter().map(|v| (v * 4.0 - (v * 4.0).round()).powi(2)).sum();
                d2 < 0.3 * 0.3
            }
        };
        if second {
            self.secondary
        } else {
            self.primary
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    /// Horizontal square `|x|, |z| <= extent` at height `y`.
    Ground {
        y: f64,
        extent: f64,
    },
}

impl Geometry {
    /// Smallest `t > 0` with `o + t·d` on the surface.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Geometry::Sphere { center, radius } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > 0.0)
            }
            Geometry::Box { center, half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let lo = center[k] - half[k] - o[k];
                    let hi = center[k] + half[k] - o[k];
                    if d[k].abs() < 1e-12 {
                        if lo > 0.0 || hi < 0.0 {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = (lo / d[k], hi / d[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 || t1 <= 0.0 {
                    None
                } else if t0 > 0.0 {
                    Some(t0)
                } else {
                    Some(t1)
                }
            }
            Geometry::Ground { y, extent } => {
                if d[1].abs() < 1e-12 {
                    return None;
                }
                let t = (y - o[1]) / d[1];
                let x = o[0] + t * d[0];
                let z = o[2] + t * d[2];
                (t > 0.0 && x.abs() <= extent && z.abs() <= extent).then_some(t)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub geometry: Geometry,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub shape_class: usize,
    pub texture_class: usize,
    pub seed: u64,
}

fn sphere(c: [f64; 3], r: f64) -> Geometry {
    Geometry::Sphere { center: c, radius: r }
}

fn cuboid(c: [f64; 3], h: [f64; 3]) -> Geometry {
    Geometry::Box { center: c, half: h }
}

/// Foreground geometry of `shape_class`, jittered by `rng`.
fn object_geometry(shape_class: usize, rng: &mut impl Rng) -> Vec<Geometry> {
    let s = rng.gen_range(0.9..1.1);
    let dx = rng.gen_range(-0.1..0.1);
    let dz = rng.gen_range(-0.1..0.1);
    let g = GROUND_Y;
    match shape_class {
        0 => {
            let r = 0.45 * s;
            vec![sphere([dx, g + r, dz], r)]
        }
        1 => {
            let h = 0.38 * s;
            vec![cuboid([dx, g + h, dz], [h; 3])]
        }
        2 => {
            let h = [0.16 * s, 0.6 * s, 0.16 * s];
            vec![cuboid([dx, g + h[1], dz], h)]
        }
        3 => {
            let h = [0.65 * s, 0.12 * s, 0.45 * s];
            vec![cuboid([dx, g + h[1], dz], h)]
        }
        4 => {
            let r = 0.27 * s;
            vec![sphere([dx - 0.38, g + r, dz], r), sphere([dx + 0.38, g + r, dz], r)]
        }
        5 => {
            let lo = [0.4 * s, 0.2 * s, 0.4 * s];
            let hi = [0.22 * s, 0.2 * s, 0.22 * s];
            vec![cuboid([dx, g + lo[1], dz], lo), cuboid([dx, g + 2.0 * lo[1] + hi[1], dz], hi)]
        }
        6 => {
            let (r1, r2) = (0.33 * s, 0.2 * s);
            let y1 = g + r1;
            vec![sphere([dx, y1, dz], r1), sphere([dx, y1 + r1 + r2 - 0.05, dz], r2)]
        }
        _ => {
            let h = 0.14 * s;
            [-0.5, 0.0, 0.5].into_iter().map(|x| cuboid([dx + x, g + h, dz], [h; 3])).collect()
        }
    }
}

impl SceneSpec {
    /// Builds the scene for the given labels. Geometry and texture draw from
    /// separate streams of `seed`, so changing the texture class leaves the
    /// geometry, and hence the depth map, untouched.
    pub fn generate(shape_class: usize, texture_class: usize, seed: u64) -> Result<Self> {
        if shape_class >= SHAPE_CLASSES || texture_class >= TEXTURE_CLASSES {
            return Err(Error::contract(format!("class out of range: shape {shape_class}, texture {texture_class}")));
        }
        let mut geo_rng = seeding::rng(seed, &[0]);
        let mut tex_rng = seeding::rng(seed, &[1]);
        let texture = Texture::of_class(texture_class, &mut tex_rng);
        let mut primitives = vec![Primitive {
            geometry: Geometry::Ground { y: GROUND_Y, extent: 1.0 },
            texture: Texture::solid(GROUND_COLOR),
        }];
        primitives.extend(
            object_geometry(shape_class, &mut geo_rng)
                .into_iter()
                .map(|geometry| Primitive { geometry, texture: texture.clone() }),
        );
        Ok(Self { primitives, shape_class, texture_class, seed })
    }

    /// Same geometry with another texture class.
    pub fn with_texture(&self, texture_class: usize) -> Result<Self> {
        Self::generate(self.shape_class, texture_class, self.seed)
    }

    /// Nearest hit along a ray: `(distance, color)`.
    pub fn trace(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, &Primitive)> = None;
        for p in &self.primitives {
            if let Some(t) = p.geometry.intersect(o, d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, p));
                }
            }
        }
        best.map(|(t, p)| {
            let x = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            (t, p.texture.color_at(x))
        })
    }
}

/// Ray-traces `spec` from `camera`. Depth is the distance along each unit
/// ray, clamped to `[near, far]`; pixels whose ray hits nothing before `far`
/// are black at depth `far`.
pub fn render_scene(spec: &SceneSpec, camera: &Camera, res: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    camera.validate()?;
    let rays = camera.generate_rays(res)?;
    let mut img = Vec::with_capacity(res * res * 3);
    let mut depth = Vec::with_capacity(res * res);
    for (o, d) in rays.origins.iter().zip(&rays.directions) {
        match spec.trace(*o, *d).filter(|&(t, _)| t <= camera.far) {
            Some((t, c)) => {
                img.extend(c.iter().map(|&v| v as f32));
                depth.push(t.clamp(camera.near, camera.far) as f32);
            }
            None => {
                img.extend([0.0f32; 3]);
                depth.push(camera.far as f32);
            }
        }
    }
    Ok((Tensor::new(vec![res, res, 3], img)?, Tensor::new(vec![res, res], depth)?))
}

/// Labels and seed of one dataset item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemSpec {
    pub idx: usize,
    pub shape_class: usize,
    pub texture_class: usize,
    pub seed: u64,
}

impl ItemSpec {
    pub fn scene(&self) -> Result<SceneSpec> {
        SceneSpec::generate(self.shape_class, self.texture_class, self.seed)
    }
}

/// Dataset-level settings, stored next to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInfo {
    pub items: usize,
    pub seed: u64,
    pub resolution: usize,
    /// Items with `idx >= items - val_items` form the held-out split.
    pub val_items: usize,
    /// Probability that an item's texture class equals its shape class.
    pub texture_correlation: f64,
    pub cue_conflict: bool,
}

impl DatasetInfo {
    pub fn train_items(&self) -> usize {
        self.items - self.val_items
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "items = {}", self.items);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "val_items = {}", self.val_items);
        let _ = writeln!(s, "texture_correlation = {}", self.texture_correlation);
        let _ = writeln!(s, "cue_conflict = {}", self.cue_conflict);
        let _ = writeln!(s, "shape_classes = {}", SHAPE_NAMES.join(","));
        let _ = writeln!(s, "texture_classes = {}", TEXTURE_NAMES.join(","));
        let _ = writeln!(s, "layout = train/<idx>.png, train/<idx>.tpdm, manifest.tsv");
        s
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut info = DatasetInfo {
            items: 0,
            seed: 0,
            resolution: 0,
            val_items: 0,
            texture_correlation: 0.0,
            cue_conflict: false,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(path, format!("bad line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "items" => info.items = parse_value(k, v, path)?,
                "seed" => info.seed = parse_value(k, v, path)?,
                "resolution" => info.resolution = parse_value(k, v, path)?,
                "val_items" => info.val_items = parse_value(k, v, path)?,
                "texture_correlation" => info.texture_correlation = parse_value(k, v, path)?,
                "cue_conflict" => info.cue_conflict = v == "true",
                _ => {}
            }
        }
        Ok(info)
    }
}

/// Item labels for an ordinary dataset: shape classes balanced within one
/// item, textures matching the shape class with probability
/// `texture_correlation` and uniform otherwise.
pub fn dataset_items(n: usize, seed: u64, texture_correlation: f64) -> Result<Vec<ItemSpec>> {
    if n < SHAPE_CLASSES {
        return Err(Error::config(format!("a dataset needs at least {SHAPE_CLASSES} items, got {n}")));
    }
    let mut shapes: Vec<usize> = (0..n).map(|i| i % SHAPE_CLASSES).collect();
    shapes.shuffle(&mut seeding::rng(seed, &[1]));
    let mut tex_rng = seeding::rng(seed, &[2]);
    Ok(shapes
        .into_iter()
        .enumerate()
        .map(|(idx, shape_class)| {
            let texture_class = if tex_rng.gen::<f64>() < texture_correlation {
                shape_class
            } else {
                tex_rng.gen_range(0..TEXTURE_CLASSES)
            };
            ItemSpec { idx, shape_class, texture_class, seed: seeding::derive(seed, &[3, idx as u64]) }
        })
        .collect())
}

/// Item labels for a cue-conflict set: every ordered pair of distinct
/// classes appears once per shuffled cycle of `K·(K−1)` items.
pub fn cue_conflict_items(n: usize, seed: u64) -> Vec<ItemSpec> {
    let pairs: Vec<(usize, usize)> =
        (0..SHAPE_CLASSES).flat_map(|s| (0..TEXTURE_CLASSES).filter(move |&t| t != s).map(move |t| (s, t))).collect();
    let mut rng = seeding::rng(seed, &[4]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut cycle = pairs.clone();
        cycle.shuffle(&mut rng);
        for (s, t) in cycle.into_iter().take(n - out.len()) {
            let idx = out.len();
            out.push(ItemSpec { idx, shape_class: s, texture_class: t, seed: seeding::derive(seed, &[5, idx as u64]) });
        }
    }
    out
}

/// A loaded or generated dataset item.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub spec: ItemSpec,
    /// `S × S × 3` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `S × S` ray distances.
    pub depth: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub items: Vec<Item>,
}

impl Dataset {
    /// Renders items in memory. Images are quantized to 8 bits exactly as a
    /// save/load round trip would.
    pub fn from_specs(specs: Vec<ItemSpec>, info: DatasetInfo, camera: &Camera) -> Result<Self> {
        let items = specs
            .into_iter()
            .map(|spec| {
                let (mut image, depth) = render_scene(&spec.scene()?, camera, info.resolution)?;
                for v in image.data_mut() {
                    *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
                Ok(Item { spec, image, depth })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { info, items })
    }

    pub fn generate(
        n: usize,
        seed: u64,
        resolution: usize,
        val_fraction: f64,
        texture_correlation: f64,
        camera: &Camera,
    ) -> Result<Self> {
        let info = DatasetInfo {
            items: n,
            seed,
            resolution,
            val_items: (n as f64 * val_fraction).floor() as usize,
            texture_correlation,
            cue_conflict: false,
        };
        Self::from_specs(dataset_items(n, seed, texture_correlation)?, info, camera)
    }

    pub fn generate_cue_conflict(n: usize, seed: u64, resolution: usize, camera: &Camera) -> Result<Self> {
        let info =
            DatasetInfo { items: n, seed, resolution, val_items: n, texture_correlation: 0.0, cue_conflict: true };
        Self::from_specs(cue_conflict_items(n, seed), info, camera)
    }

    pub fn train(&self) -> &[Item] {
        &self.items[..self.info.train_items()]
    }

    pub fn val(&self) -> &[Item] {
        &self.items[self.info.train_items()..]
    }

    /// Writes `manifest.tsv`, `dataset.cfg` and `train/<idx>.{png,tpdm}`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let train = root.join("train");
        fs::create_dir_all(&train).map_err(|e| Error::io(&train, e))?;
        let mut manifest = String::from("idx\tshape_class\ttexture_class\tseed\n");
        for item in &self.items {
            let s = &item.spec;
            let _ = writeln!(manifest, "{}\t{}\t{}\t{}", s.idx, s.shape_class, s.texture_class, s.seed);
            formats::write_png_rgb(&train.join(format!("{}.png", s.idx)), &item.image)?;
            formats::write_tpdm(&train.join(format!("{}.tpdm", s.idx)), &item.depth)?;
        }
        write_file(&root.join("manifest.tsv"), &manifest)?;
        write_file(&root.join("dataset.cfg"), &self.info.to_text())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let cfg_path = root.join("dataset.cfg");
        let info = DatasetInfo::parse(&read_file(&cfg_path)?, &cfg_path)?;
        let manifest_path = root.join("manifest.tsv");
        let text = read_file(&manifest_path)?;
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(&manifest_path, format!("line {}: `{line}`", lineno + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let idx: usize = cols[0].parse().map_err(|_| bad())?;
            let spec = ItemSpec {
                idx,
                shape_class: cols[1].parse().map_err(|_| bad())?,
                texture_class: cols[2].parse().map_err(|_| bad())?,
                seed: cols[3].parse().map_err(|_| bad())?,
            };
            if spec.shape_class >= SHAPE_CLASSES || spec.texture_class >= TEXTURE_CLASSES {
                return Err(bad());
            }
            let image = formats::read_png_rgb(&root.join("train").join(format!("{idx}.png")))?;
            let depth_path = root.join("train").join(format!("{idx}.tpdm"));
            let depth = formats::read_tpdm(&depth_path)?;
            if image.shape()[..2] != *depth.shape() {
                return Err(Error::format(depth_path, "depth size differs from image size"));
            }
            items.push(Item { spec, image, depth });
        }
        if items.len() != info.items {
            return Err(Error::format(
                manifest_path,
                format!("{} rows but dataset.cfg says {}", items.len(), info.items),
            ));
        }
        Ok(Self { info, items })
    }
}

/// Generates and writes an ordinary dataset under `root`.
pub fn make_dataset(
    root: &Path,
    n: usize,
    seed: u64,
    resolution: usize,
    val_fraction: f64,
    texture_correlation: f64,
) -> Result<DatasetInfo> {
    let ds = Dataset::generate(n, seed, resolution, val_fraction, texture_correlation, &Camera::default())?;
    ds.save(root)?;
    Ok(ds.info)
}

/// Generates and writes a cue-conflict set under `root/cueconflict`.
pub fn make_cue_conflict(root: &Path, n: usize, seed: u64, resolution: usize) -> Result<PathBuf> {
    let dir = root.join("cueconflict");
    Dataset::generate_cue_conflict(n, seed, resolution, &Camera::default())?.save(&dir)?;
    Ok(dir)
}

fn parse_value<F: std::str::FromStr>(key: &str, v: &str, path: &Path) -> Result<F> {
    v.parse().map_err(|_| Error::format(path, format!("bad value `{v}` for `{key}`")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
