//! Problem instances: generation, normalization, the eight square symmetries
//! and the plain-text file format.
//!
//! File layout (UTF-8, whitespace separated):
//!
//! ```text
//! CETSP 1 <n>
//! <depot_x> <depot_y> 0
//! <cx> <cy> <r>        # n lines
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::InstanceError;
use crate::geometry::{Disk, Point};

/// Deterministic generator for stream `stream` of a seeded family.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub depot: Point,
    pub targets: Vec<Disk>,
    pub id: String,
}

impl Instance {
    pub fn new(depot: Point, targets: Vec<Disk>) -> Self {
        Self { depot, targets, id: String::new() }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Number of targets `n` (the depot is not counted).
    pub fn n(&self) -> usize {
        self.targets.len()
    }

    /// Disk of node `i`, where node 0 is the depot (radius zero).
    pub fn node_disk(&self, i: usize) -> Disk {
        if i == 0 {
            Disk::new(self.depot, 0.0)
        } else {
            self.targets[i - 1]
        }
    }

    pub fn in_unit_square(&self) -> bool {
        std::iter::once(self.depot)
            .chain(self.targets.iter().map(|d| d.center))
            .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RadiusKind {
    Constant,
    Random,
}

impl RadiusKind {
    pub fn name(self) -> &'static str {
        match self {
            RadiusKind::Constant => "constant",
            RadiusKind::Random => "random",
        }
    }
}

impl std::str::FromStr for RadiusKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(RadiusKind::Constant),
            "random" => Ok(RadiusKind::Random),
            other => Err(format!("unknown radius type {other:?} (expected constant|random)")),
        }
    }
}

/// Size-indexed constant radii used for the constant-radius family.
pub const CONSTANT_RADII: [(usize, f64); 5] =
    [(20, 0.1), (40, 0.05), (60, 0.05), (80, 0.01), (100, 0.01)];

/// Radius for a problem size under the constant-radius family. Sizes off the
/// table take the value of the nearest tabulated size, ties going to the
/// smaller size.
pub fn radius_for_size(size: usize) -> f64 {
    nearest_in_map(&CONSTANT_RADII, size)
}

fn nearest_in_map(map: &[(usize, f64)], size: usize) -> f64 {
    let mut best = map[0];
    for &(s, r) in map {
        let d = s.abs_diff(size);
        let bd = best.0.abs_diff(size);
        if d < bd || (d == bd && s < best.0) {
            best = (s, r);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadiusConfig {
    pub kind: RadiusKind,
    pub constant_map: Vec<(usize, f64)>,
    /// Half-open range `[lo, hi)` for random radii.
    pub random_range: (f64, f64),
}

impl RadiusConfig {
    pub fn new(kind: RadiusKind) -> Self {
        Self { kind, constant_map: CONSTANT_RADII.to_vec(), random_range: (0.0, 0.1) }
    }

    pub fn constant_for(&self, size: usize) -> f64 {
        nearest_in_map(&self.constant_map, size)
    }

    fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.random_range;
        if !(0.0 <= lo && lo < hi) {
            return Err(format!("random radius range [{lo}, {hi}) is empty or negative"));
        }
        if self.constant_map.is_empty() || self.constant_map.iter().any(|&(_, r)| r <= 0.0) {
            return Err("constant radius map must be non-empty with positive radii".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    Clustered,
    Mixed,
}

impl std::str::FromStr for Distribution {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "clustered" => Ok(Distribution::Clustered),
            "mixed" => Ok(Distribution::Mixed),
            other => Err(format!("unknown distribution {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub sizes: Vec<usize>,
    pub distribution: Distribution,
    pub radius: RadiusConfig,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(sizes: Vec<usize>, radius: RadiusKind, seed: u64) -> Self {
        Self { sizes, distribution: Distribution::Uniform, radius: RadiusConfig::new(radius), seed }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err("sizes must be a non-empty set of positive counts".into());
        }
        self.radius.validate()
    }
}

const CLUSTERS: usize = 5;
const CLUSTER_SIGMA: f64 = 0.05;

fn uniform_point<R: Rng + ?Sized>(rng: &mut R) -> Point {
    Point::new(rng.random::<f64>(), rng.random::<f64>())
}

fn clustered_point<R: Rng + ?Sized>(rng: &mut R, centers: &[Point]) -> Point {
    let c = centers[rng.random_range(0..centers.len())];
    let normal = Normal::new(0.0, CLUSTER_SIGMA).expect("positive sigma");
    loop {
        let p = Point::new(c.x + normal.sample(rng), c.y + normal.sample(rng));
        if (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y) {
            return p;
        }
    }
}

/// Draw one instance with `size` targets.
pub fn generate<R: Rng + ?Sized>(cfg: &GenConfig, size: usize, rng: &mut R) -> Instance {
    let depot = uniform_point(rng);
    let centers: Vec<Point> = match cfg.distribution {
        Distribution::Uniform => Vec::new(),
        _ => (0..CLUSTERS)
            .map(|_| Point::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)))
            .collect(),
    };
    let targets = (0..size)
        .map(|_| {
            let c = match cfg.distribution {
                Distribution::Uniform => uniform_point(rng),
                Distribution::Clustered => clustered_point(rng, &centers),
                Distribution::Mixed => {
                    if rng.random::<f64>() < 0.5 {
                        uniform_point(rng)
                    } else {
                        clustered_point(rng, &centers)
                    }
                }
            };
            let r = match cfg.radius.kind {
                RadiusKind::Constant => cfg.radius.constant_for(size),
                RadiusKind::Random => {
                    let (lo, hi) = cfg.radius.random_range;
                    rng.random_range(lo..hi)
                }
            };
            Disk::new(c, r)
        })
        .collect();
    Instance::new(depot, targets)
}

/// Instance number `index` of the seeded family; independent of any other index.
pub fn generate_indexed(cfg: &GenConfig, size: usize, index: u64) -> Instance {
    let mut rng = stream_rng(cfg.seed ^ (size as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), index);
    generate(cfg, size, &mut rng).with_id(format!("s{}-n{}-{}", cfg.seed, size, index))
}

/// One of the eight rotations/reflections of the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Symmetry(u8);

impl Symmetry {
    pub const IDENTITY: Symmetry = Symmetry(0);

    pub fn all() -> [Symmetry; 8] {
        std::array::from_fn(|i| Symmetry(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn apply(self, p: Point) -> Point {
        let (x, y) = (p.x, p.y);
        match self.0 {
            0 => Point::new(x, y),
            1 => Point::new(y, x),
            2 => Point::new(x, 1.0 - y),
            3 => Point::new(y, 1.0 - x),
            4 => Point::new(1.0 - x, y),
            5 => Point::new(1.0 - y, x),
            6 => Point::new(1.0 - x, 1.0 - y),
            _ => Point::new(1.0 - y, 1.0 - x),
        }
    }

    pub fn inverse(self) -> Symmetry {
        match self.0 {
            3 => Symmetry(5),
            5 => Symmetry(3),
            k => Symmetry(k),
        }
    }

    pub fn apply_instance(self, inst: &Instance) -> Instance {
        Instance {
            depot: self.apply(inst.depot),
            targets: inst.targets.iter().map(|d| Disk::new(self.apply(d.center), d.radius)).collect(),
            id: inst.id.clone(),
        }
    }
}

/// The eight symmetric images of a unit-square instance, identity first.
pub fn augment8(inst: &Instance) -> Result<[Instance; 8], InstanceError> {
    if let Some(p) = std::iter::once(inst.depot)
        .chain(inst.targets.iter().map(|d| d.center))
        .find(|p| !((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)))
    {
        return Err(InstanceError::OutsideUnitSquare { x: p.x, y: p.y });
    }
    Ok(Symmetry::all().map(|s| s.apply_instance(inst)))
}

/// Result of [`normalize`]: `true_length = normalized_length * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub instance: Instance,
    pub scale: f64,
    pub offset: Point,
}

impl Normalized {
    pub fn denormalize_point(&self, p: Point) -> Point {
        p * self.scale + self.offset
    }
}

/// Map an instance into the unit square. Instances whose depot and centers
/// already lie in `[0,1]²` are returned unchanged; otherwise the bounding box
/// is shifted to the origin and everything (radii included) is divided by the
/// larger box side.
pub fn normalize(inst: &Instance) -> Result<Normalized, InstanceError> {
    if inst.targets.is_empty() {
        return Err(InstanceError::Empty);
    }
    let pts: Vec<Point> =
        std::iter::once(inst.depot).chain(inst.targets.iter().map(|d| d.center)).collect();
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in &pts {
        lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let extent = (hi.x - lo.x).max(hi.y - lo.y);
    if extent <= 0.0 {
        return Err(InstanceError::ZeroExtent);
    }
    if inst.in_unit_square() {
        return Ok(Normalized { instance: inst.clone(), scale: 1.0, offset: Point::new(0.0, 0.0) });
    }
    let f = |p: Point| (p - lo) * (1.0 / extent);
    let instance = Instance {
        depot: f(inst.depot),
        targets: inst.targets.iter().map(|d| Disk::new(f(d.center), d.radius / extent)).collect(),
        id: inst.id.clone(),
    };
    Ok(Normalized { instance, scale: extent, offset: lo })
}

fn fmt12(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.11e}")
    }
}

/// Render an instance in the text format (12 significant digits).
pub fn to_text(inst: &Instance) -> String {
    let mut s = format!("CETSP 1 {}\n", inst.n());
    let _ = writeln!(s, "{} {} 0", fmt12(inst.depot.x), fmt12(inst.depot.y));
    for d in &inst.targets {
        let _ = writeln!(s, "{} {} {}", fmt12(d.center.x), fmt12(d.center.y), fmt12(d.radius));
    }
    s
}

fn parse_fields(line: &str, lineno: usize, expected: usize) -> Result<Vec<f64>, InstanceError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != expected {
        return Err(InstanceError::ColumnCount { line: lineno, expected, found: fields.len() });
    }
    fields
        .iter()
        .map(|f| {
            let v: f64 = f
                .parse()
                .map_err(|_| InstanceError::NonNumeric { line: lineno, field: f.to_string() })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(InstanceError::NonFinite { line: lineno })
            }
        })
        .collect()
}

/// Meaningful lines (1-based numbering preserved) with blank lines and `#` comments dropped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parse the text format. Trailing sections (such as a `DYNAMIC` block) are
/// not allowed here; see [`crate::dynamic`] for scenario files.
pub fn from_text(text: &str) -> Result<Instance, InstanceError> {
    let lines: Vec<(usize, &str)> = content_lines(text).collect();
    parse_lines(&lines).and_then(|(inst, rest)| match rest.first() {
        None => Ok(inst),
        Some(_) => Err(InstanceError::CountMismatch { declared: inst.n(), found: inst.n() + rest.len() }),
    })
}

/// Content lines tagged with their 1-based line number.
pub(crate) type NumberedLines<'a> = [(usize, &'a str)];

pub(crate) fn parse_lines<'a>(lines: &'a NumberedLines<'a>) -> Result<(Instance, &'a NumberedLines<'a>), InstanceError> {
    let (hl, header) = *lines
        .first()
        .ok_or(InstanceError::MalformedHeader { line: 1, reason: "empty file".into() })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "CETSP" || parts[1] != "1" {
        return Err(InstanceError::MalformedHeader {
            line: hl,
            reason: format!("expected `CETSP 1 <n>`, found {header:?}"),
        });
    }
    let n: usize = parts[2].parse().map_err(|_| InstanceError::MalformedHeader {
        line: hl,
        reason: format!("target count {:?} is not a non-negative integer", parts[2]),
    })?;
    let (dl, depot_line) = *lines.get(1).ok_or(InstanceError::MissingDepot)?;
    let dv = parse_fields(depot_line, dl, 3)?;
    if dv[2] != 0.0 {
        return Err(InstanceError::DepotRadius { line: dl });
    }
    let body = &lines[2..];
    let mut targets = Vec::with_capacity(n);
    for &(ln, l) in body.iter().take_while(|(_, l)| !l.starts_with("DYNAMIC")).take(n) {
        let v = parse_fields(l, ln, 3)?;
        if v[2] < 0.0 {
            return Err(InstanceError::NegativeRadius { line: ln });
        }
        targets.push(Disk::new(Point::new(v[0], v[1]), v[2]));
    }
    if targets.len() != n {
        return Err(InstanceError::CountMismatch { declared: n, found: targets.len() });
    }
    if n == 0 {
        return Err(InstanceError::Empty);
    }
    let rest = &body[n..];
    if let Some(&(_, l)) = rest.first() {
        if !l.starts_with("DYNAMIC") {
            let extra = rest.iter().take_while(|(_, l)| !l.starts_with("DYNAMIC")).count();
            return Err(InstanceError::CountMismatch { declared: n, found: n + extra });
        }
    }
    Ok((Instance::new(Point::new(dv[0], dv[1]), targets), rest))
}

pub fn save(path: impl AsRef<Path>, inst: &Instance) -> Result<(), InstanceError> {
    fs::write(path, to_text(inst))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Instance, InstanceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(from_text(&text)?.with_id(id))
}

/// Best-effort importer for four-column `x y z r` benchmark rows. The first
/// row is taken as the depot (its radius is discarded) and `z` is ignored.
/// Lines that do not hold exactly four numbers are skipped.
pub fn import_benchmark(text: &str) -> Result<Instance, InstanceError> {
    let rows: Vec<(usize, [f64; 4])> = content_lines(text)
        .filter_map(|(ln, l)| {
            let v: Vec<f64> = l.split_whitespace().filter_map(|f| f.parse().ok()).collect();
            (v.len() == 4 && l.split_whitespace().count() == 4).then(|| (ln, [v[0], v[1], v[2], v[3]]))
        })
        .collect();
    let (_, depot) = rows.first().ok_or(InstanceError::MissingDepot)?;
    let mut targets = Vec::with_capacity(rows.len().saturating_sub(1));
    for &(ln, [x, y, _, r]) in &rows[1..] {
        if r < 0.0 {
            return Err(InstanceError::NegativeRadius { line: ln });
        }
        targets.push(Disk::new(Point::new(x, y), r));
    }
    if targets.is_empty() {
        return Err(InstanceError::Empty);
    }
    Ok(Instance::new(Point::new(depot[0], depot[1]), targets))
}
