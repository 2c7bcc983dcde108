//! Labelled synthetic phantoms and native-resolution sampling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resample_image, resample_labels, LabelMap, Spacing, Volume};

/// Closed per-axis spacing intervals in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RangeRepr", into = "Vec<(f64, f64)>")]
pub struct SpacingRange(Vec<(f64, f64)>);

impl SpacingRange {
    pub fn new(axes: Vec<(f64, f64)>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi && hi.is_finite())) {
            return Err(Error::Config(format!("invalid spacing range {axes:?}")));
        }
        Ok(Self(axes))
    }

    pub fn cube(lo: f64, hi: f64, dim: usize) -> Result<Self> {
        Self::new(vec![(lo, hi); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn axes(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn contains(&self, s: &Spacing) -> bool {
        s.dim() == self.dim()
            && self.0.iter().zip(s.as_slice()).all(|(&(lo, hi), &v)| v >= lo && v <= hi)
    }

    pub fn midpoint(&self) -> Spacing {
        Spacing::new(self.0.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect())
            .expect("range bounds are positive")
    }

    /// Independent uniform draw per axis; degenerate axes return their bound exactly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Spacing {
        let v = self
            .0
            .iter()
            .map(|&(lo, hi)| if lo == hi { lo } else { rng.random_range(lo..=hi) })
            .collect();
        Spacing::new(v).expect("range bounds are positive")
    }

    /// Componentwise clamp of `s` into the range.
    pub fn clamp(&self, s: &Spacing) -> Result<Spacing> {
        if s.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: s.dim(),
            });
        }
        Spacing::new(
            self.0
                .iter()
                .zip(s.as_slice())
                .map(|(&(lo, hi), &v)| v.clamp(lo, hi))
                .collect(),
        )
    }
}

/// Accepts either the axis list or the textual form ("[1, 3.5]^3").
#[derive(Deserialize)]
#[serde(untagged)]
enum RangeRepr {
    Axes(Vec<(f64, f64)>),
    Text(String),
}

impl TryFrom<RangeRepr> for SpacingRange {
    type Error = Error;

    fn try_from(r: RangeRepr) -> Result<Self> {
        match r {
            RangeRepr::Axes(v) => Self::new(v),
            RangeRepr::Text(s) => s.parse(),
        }
    }
}

impl TryFrom<Vec<(f64, f64)>> for SpacingRange {
    type Error = Error;

    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SpacingRange> for Vec<(f64, f64)> {
    fn from(r: SpacingRange) -> Self {
        r.0
    }
}

impl fmt::Display for SpacingRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(lo, hi)| format!("[{lo}, {hi}]")).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Parses interval products such as `[0.5, 3.5]³`, `SPIDER [1, 5]×[0.2, 1.5]²`
/// or `[0.7,1.1]^2x[1,1.4]`. A leading dataset name is ignored.
impl FromStr for SpacingRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("cannot parse spacing range {s:?}: {why}"));
        let start = s.find('[').ok_or_else(|| bad("no interval"))?;
        let mut rest = s[start..].trim();
        let mut axes = Vec::new();
        while !rest.is_empty() {
            if !rest.starts_with('[') {
                return Err(bad("expected '['"));
            }
            let close = rest.find(']').ok_or_else(|| bad("unclosed interval"))?;
            let (lo, hi) = rest[1..close].split_once(',').ok_or_else(|| bad("missing comma"))?;
            let lo: f64 = lo.trim().parse().map_err(|_| bad("lower bound"))?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad("upper bound"))?;
            rest = rest[close + 1..].trim_start();
            let mut power = 1;
            if let Some(c) = rest.chars().next() {
                let sup = match c {
                    '¹' => Some(1),
                    '²' => Some(2),
                    '³' => Some(3),
                    _ => None,
                };
                if let Some(p) = sup {
                    power = p;
                    rest = rest[c.len_utf8()..].trim_start();
                } else if c == '^' {
                    let digits: String = rest[1..].chars().take_while(char::is_ascii_digit).collect();
                    power = digits.parse().map_err(|_| bad("exponent"))?;
                    rest = rest[1 + digits.len()..].trim_start();
                }
            }
            axes.extend(std::iter::repeat_n((lo, hi), power));
            if let Some(c) = rest.chars().next() {
                if matches!(c, '×' | 'x' | 'X' | '*') {
                    rest = rest[c.len_utf8()..].trim_start();
                    if rest.is_empty() {
                        return Err(bad("dangling product"));
                    }
                } else {
                    return Err(bad("expected product sign"));
                }
            }
        }
        Self::new(axes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    /// Solid, randomly oriented ellipsoid; `size_mm` bounds the semi-axes.
    Ellipsoid,
    /// Straight capsule; `size_mm` bounds the radius, `length_mm` the length.
    Tube,
    /// Hollow sphere; `size_mm` bounds the outer radius.
    Shell,
}

/// One structure role: its label, geometry ranges and intensity contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub kind: StructureKind,
    pub label: u8,
    pub size_mm: (f64, f64),
    #[serde(default)]
    pub length_mm: (f64, f64),
    #[serde(default)]
    pub thickness_mm: (f64, f64),
    /// Intensity added on top of the background.
    pub contrast: (f64, f64),
    #[serde(default = "one_one")]
    pub count: (usize, usize),
}

fn one_one() -> (usize, usize) {
    (1, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dim: usize,
    pub reference_spacing: f64,
    pub canvas_size_mm: f64,
    pub num_classes: usize,
    pub structures: Vec<StructureSpec>,
    /// Gaussian noise standard deviation, as a fraction of the dynamic range.
    pub noise_sigma: f64,
    pub background: f64,
    /// Amplitude of the smooth background modulation.
    pub background_variation: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::default_3d()
    }
}

impl PhantomSpec {
    /// Three foreground classes in 3-D: solid ellipsoid, tube, hollow shell.
    pub fn default_3d() -> Self {
        Self {
            dim: 3,
            reference_spacing: 0.5,
            canvas_size_mm: 64.0,
            num_classes: 4,
            structures: vec![
                StructureSpec {
                    kind: StructureKind::Ellipsoid,
                    label: 1,
                    size_mm: (11.0, 16.0),
                    length_mm: (0.0, 0.0),
                    thickness_mm: (0.0, 0.0),
                    contrast: (0.45, 0.9),
                    count: (1, 1),
                },
                StructureSpec {
                    kind: StructureKind::Tube,
                    label: 2,
                    size_mm: (5.0, 7.0),
                    length_mm: (34.0, 52.0),
                    thickness_mm: (0.0, 0.0),
                    contrast: (0.45, 0.9),
                    count: (1, 1),
                },
                StructureSpec {
                    kind: StructureKind::Shell,
                    label: 3,
                    size_mm: (13.0, 17.0),
                    length_mm: (0.0, 0.0),
                    thickness_mm: (5.0, 7.0),
                    contrast: (0.45, 0.9),
                    count: (1, 1),
                },
            ],
            noise_sigma: 0.04,
            background: 0.1,
            background_variation: 0.05,
            seed: 0,
        }
    }

    pub fn reference(&self) -> Spacing {
        Spacing::isotropic(self.reference_spacing, self.dim).expect("validated spacing")
    }

    pub fn canvas_voxels(&self) -> usize {
        (self.canvas_size_mm / self.reference_spacing).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.dim) {
            return fail(format!("phantom dim must be 2 or 3, got {}", self.dim));
        }
        if !(self.reference_spacing > 0.0 && self.canvas_size_mm > self.reference_spacing) {
            return fail("reference spacing and canvas size must be positive".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        let mut roles = vec![false; self.num_classes];
        for s in &self.structures {
            if s.label == 0 || s.label as usize >= self.num_classes {
                return fail(format!("structure label {} outside 1..{}", s.label, self.num_classes));
            }
            if !(s.size_mm.0 > 0.0 && s.size_mm.0 <= s.size_mm.1) || s.count.0 > s.count.1 {
                return fail(format!("bad size/count range for label {}", s.label));
            }
            if s.kind == StructureKind::Shell && !(s.thickness_mm.0 > 0.0 && s.thickness_mm.1 < s.size_mm.0) {
                return fail("shell thickness must be positive and below the radius".into());
            }
            if s.kind == StructureKind::Tube && !(s.length_mm.0 > 0.0 && s.length_mm.0 <= s.length_mm.1) {
                return fail("tube length range must be positive".into());
            }
            if s.count.1 > 0 {
                roles[s.label as usize] = true;
            }
        }
        if let Some(c) = (1..self.num_classes).find(|&c| !roles[c]) {
            return fail(format!("class {c} has no structure role"));
        }
        Ok(())
    }
}

/// Minimum share of voxels every foreground class must occupy.
pub const MIN_CLASS_FRACTION: f64 = 0.005;

const MAX_ATTEMPTS: usize = 50;

#[derive(Debug, Clone)]
enum Shape {
    Ellipsoid { center: [f64; 3], axes: [[f64; 3]; 3], semi: [f64; 3] },
    Tube { a: [f64; 3], b: [f64; 3], radius: f64 },
    Shell { center: [f64; 3], outer: f64, inner: f64 },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Ellipsoid { center, axes, semi } => {
                let d = sub(p, *center);
                (0..3)
                    .map(|i| {
                        let q = dot(d, axes[i]) / semi[i];
                        q * q
                    })
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Tube { a, b, radius } => {
                let ab = sub(*b, *a);
                let t = (dot(sub(p, *a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
                let c = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
                let d = sub(p, c);
                dot(d, d) <= radius * radius
            }
            Shape::Shell { center, outer, inner } => {
                let d = sub(p, *center);
                let r2 = dot(d, d);
                r2 <= outer * outer && r2 >= inner * inner
            }
        }
    }

    /// Axis-aligned physical bounding box.
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Ellipsoid { center, semi, .. } => {
                let r = semi.iter().copied().fold(0.0, f64::max);
                (center.map(|c| c - r), center.map(|c| c + r))
            }
            Shape::Tube { a, b, radius } => {
                let lo = [0, 1, 2].map(|i| a[i].min(b[i]) - radius);
                let hi = [0, 1, 2].map(|i| a[i].max(b[i]) + radius);
                (lo, hi)
            }
            Shape::Shell { center, outer, .. } => (center.map(|c| c - outer), center.map(|c| c + outer)),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Random direction in the active dimensions (z stays 0 for 2-D canvases).
fn direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> [f64; 3] {
    if dim == 2 {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        [0.0, a.cos(), a.sin()]
    } else {
        let v: [f64; 3] = UnitSphere.sample(rng);
        v
    }
}

/// Random orthonormal frame (rotation) in the active dimensions.
fn frame<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> [[f64; 3]; 3] {
    let u = direction(rng, dim);
    if dim == 2 {
        return [[1.0, 0.0, 0.0], u, [0.0, -u[2], u[1]]];
    }
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut v = sub(helper, u.map(|x| x * dot(helper, u)));
    let n = dot(v, v).sqrt();
    v = v.map(|x| x / n);
    let w = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    [u, v, w]
}

fn place<R: Rng + ?Sized>(s: &StructureSpec, dim: usize, canvas: f64, rng: &mut R) -> Option<Shape> {
    let active = |i: usize| dim == 3 || i > 0;
    let mid = canvas / 2.0;
    let center_in = |margin: f64, rng: &mut R| -> Option<[f64; 3]> {
        if 2.0 * margin > canvas {
            return None;
        }
        Some([0, 1, 2].map(|i| {
            if active(i) {
                rng.random_range(margin..=canvas - margin)
            } else {
                0.0
            }
        }))
    };
    for _ in 0..MAX_ATTEMPTS {
        let shape = match s.kind {
            StructureKind::Ellipsoid => {
                let semi = [0; 3].map(|_| uniform(rng, s.size_mm));
                let reach = semi.iter().copied().fold(0.0, f64::max);
                let center = center_in(reach, rng)?;
                Shape::Ellipsoid { center, axes: frame(rng, dim), semi }
            }
            StructureKind::Shell => {
                let outer = uniform(rng, s.size_mm);
                let inner = outer - uniform(rng, s.thickness_mm);
                let center = center_in(outer, rng)?;
                Shape::Shell { center, outer, inner }
            }
            StructureKind::Tube => {
                let radius = uniform(rng, s.size_mm);
                let half = uniform(rng, s.length_mm) / 2.0;
                let u = direction(rng, dim);
                let jitter = (canvas / 2.0 - radius).max(0.0) * 0.5;
                let c = [0, 1, 2].map(|i| if active(i) { mid + rng.random_range(-jitter..=jitter) } else { 0.0 });
                let a = [0, 1, 2].map(|i| c[i] - half * u[i]);
                let b = [0, 1, 2].map(|i| c[i] + half * u[i]);
                Shape::Tube { a, b, radius }
            }
        };
        let (lo, hi) = shape.bounds();
        let fits = (0..3).filter(|&i| active(i)).all(|i| lo[i] >= 0.0 && hi[i] <= canvas);
        if fits {
            return Some(shape);
        }
    }
    None
}

/// Sum of a few random low-frequency cosines with unit peak amplitude.
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, canvas: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = direction(rng, dim).map(|x| x * std::f64::consts::TAU / (canvas * rng.random_range(0.8..2.0)));
                (k, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves.iter().map(|(k, ph)| (dot(*k, p) + ph).cos()).sum::<f64>() / self.waves.len() as f64
    }
}

/// Rasterises one phantom at the reference spacing.
pub fn generate_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let n = spec.canvas_voxels();
    let s = spec.reference_spacing;
    let canvas = n as f64 * s;
    let dims = if spec.dim == 2 { [1, n, n] } else { [n, n, n] };
    let total = dims.iter().product::<usize>();
    let field = SmoothField::new(rng, spec.dim, canvas);
    let mut image = vec![0f32; total];
    for z in 0..dims[0] {
        for y in 0..n {
            for x in 0..n {
                let p = [if spec.dim == 2 { 0.0 } else { (z as f64 + 0.5) * s }, (y as f64 + 0.5) * s, (x as f64 + 0.5) * s];
                image[(z * n + y) * n + x] = (spec.background + spec.background_variation * field.at(p)) as f32;
            }
        }
    }
    let mut labels = vec![0u8; total];
    for st in &spec.structures {
        let count = if st.count.0 >= st.count.1 { st.count.0 } else { rng.random_range(st.count.0..=st.count.1) };
        for _ in 0..count {
            let shape = place(st, spec.dim, canvas, rng).ok_or_else(|| {
                Error::Infeasible(format!("{:?} (label {}) does not fit a {canvas} mm canvas", st.kind, st.label))
            })?;
            let level = uniform(rng, st.contrast) as f32;
            let (lo, hi) = shape.bounds();
            let range = |a: usize| -> (usize, usize) {
                if dims[a] == 1 {
                    return (0, 1);
                }
                let i0 = ((lo[a] / s - 0.5).floor().max(0.0)) as usize;
                let i1 = (((hi[a] / s - 0.5).ceil() + 1.0).max(0.0) as usize).min(dims[a]);
                (i0, i1)
            };
            let (z0, z1) = range(0);
            let (y0, y1) = range(1);
            let (x0, x1) = range(2);
            for z in z0..z1 {
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = [if spec.dim == 2 { 0.0 } else { (z as f64 + 0.5) * s }, (y as f64 + 0.5) * s, (x as f64 + 0.5) * s];
                        if shape.contains(p) {
                            let i = (z * n + y) * n + x;
                            labels[i] = st.label;
                            image[i] = spec.background as f32 + level;
                        }
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let (mn, mx) = image.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let noise = Normal::new(0.0, spec.noise_sigma * (mx - mn).max(1e-6) as f64).expect("finite sigma");
        for v in &mut image {
            *v += noise.sample(rng) as f32;
        }
    }
    let counts = labels.iter().fold(vec![0usize; spec.num_classes], |mut c, &l| {
        c[l as usize] += 1;
        c
    });
    for (c, &k) in counts.iter().enumerate().skip(1) {
        if (k as f64) < MIN_CLASS_FRACTION * total as f64 {
            return Err(Error::Infeasible(format!(
                "class {c} covers {:.3}% of voxels",
                100.0 * k as f64 / total as f64
            )));
        }
    }
    let shape: Vec<usize> = vec![n; spec.dim];
    let spacing = spec.reference();
    Ok((
        Volume::new(shape.clone(), spacing.clone(), image)?,
        LabelMap::new(shape, spacing, spec.num_classes, labels)?,
    ))
}

/// Phantom `index` of the family defined by `spec.seed`, retrying with fresh
/// draws when a layout leaves a class too small.
pub fn generate_indexed(spec: &PhantomSpec, index: u64) -> Result<(Volume, LabelMap)> {
    let mut last = None;
    for attempt in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(phantom_seed(spec.seed, index, attempt));
        match generate_phantom(spec, &mut rng) {
            Ok(pair) => return Ok(pair),
            Err(e @ Error::Infeasible(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn phantom_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    let mut x = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 31;
    x.wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Draws a spacing from `range` and resamples both members of `pair` to it.
pub fn sample_native<R: Rng + ?Sized>(
    image: &Volume,
    labels: &LabelMap,
    range: &SpacingRange,
    rng: &mut R,
) -> Result<(Volume, LabelMap, Spacing)> {
    check_above_reference(range, image.spacing())?;
    let spacing = range.sample(rng);
    let img = resample_image(image, &spacing)?;
    let lab = resample_labels(labels, &spacing)?;
    Ok((img, lab, spacing))
}

pub fn check_above_reference(range: &SpacingRange, reference: &Spacing) -> Result<()> {
    if range.dim() != reference.dim() {
        return Err(Error::DimMismatch {
            expected: reference.dim(),
            actual: range.dim(),
        });
    }
    if range.axes().iter().zip(reference.as_slice()).any(|(&(lo, _), &r)| lo < r) {
        return Err(Error::BelowReference {
            range: range.axes().to_vec(),
            reference: reference.as_slice().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            canvas_size_mm: 48.0,
            reference_spacing: 1.0,
            ..PhantomSpec::default_3d()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = small_spec();
        let a = generate_indexed(&spec, 3).unwrap();
        let b = generate_indexed(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_indexed(&spec, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn binary_phantom_has_two_labels() {
        let mut spec = small_spec();
        spec.num_classes = 2;
        spec.structures.truncate(1);
        let (_, lab) = generate_indexed(&spec, 0).unwrap();
        assert_eq!(lab.label_set(), vec![0, 1]);
    }

    #[test]
    fn two_dimensional_phantoms() {
        let mut spec = small_spec();
        spec.dim = 2;
        let (img, lab) = generate_indexed(&spec, 1).unwrap();
        assert_eq!(img.shape(), &[48, 48]);
        assert_eq!(lab.label_set(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn oversized_structures_are_infeasible() {
        let mut spec = small_spec();
        spec.structures[0].size_mm = (40.0, 41.0);
        assert!(matches!(generate_indexed(&spec, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn missing_role_is_a_config_error() {
        let mut spec = small_spec();
        spec.num_classes = 5;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_range_gives_exact_spacing() {
        let spec = small_spec();
        let (img, lab) = generate_indexed(&spec, 0).unwrap();
        let range = SpacingRange::cube(1.0, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, s) = sample_native(&img, &lab, &range, &mut rng).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn range_below_reference_is_rejected() {
        let spec = small_spec();
        let (img, lab) = generate_indexed(&spec, 0).unwrap();
        let range = SpacingRange::cube(0.5, 2.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_native(&img, &lab, &range, &mut rng),
            Err(Error::BelowReference { .. })
        ));
    }

    #[test]
    fn native_labels_are_a_subset() {
        let spec = small_spec();
        let (img, lab) = generate_indexed(&spec, 2).unwrap();
        let range = SpacingRange::cube(1.0, 3.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (_, l, s) = sample_native(&img, &lab, &range, &mut rng).unwrap();
            assert!(range.contains(&s));
            assert!(l.label_set().iter().all(|x| lab.label_set().contains(x)));
        }
    }

    #[test]
    fn parses_table_style_ranges() {
        let r: SpacingRange = "BRATS [0.5, 3.5]³".parse().unwrap();
        assert_eq!(r.axes(), &[(0.5, 3.5); 3]);
        let r: SpacingRange = "SPIDER [1, 5]×[0.2, 1.5]²".parse().unwrap();
        assert_eq!(r.axes(), &[(1.0, 5.0), (0.2, 1.5), (0.2, 1.5)]);
        let r: SpacingRange = "MM-WHS [0.7, 1.1]²×[1, 1.4]".parse().unwrap();
        assert_eq!(r.axes(), &[(0.7, 1.1), (0.7, 1.1), (1.0, 1.4)]);
        let r: SpacingRange = "[0.7,1.1]^2x[1,1.4]".parse().unwrap();
        assert_eq!(r.dim(), 3);
        assert!("[1, 0.5]".parse::<SpacingRange>().is_err());
        assert!("[1, 2]×".parse::<SpacingRange>().is_err());
        assert!("no interval".parse::<SpacingRange>().is_err());
    }

    #[test]
    fn clamp_is_componentwise() {
        let r = SpacingRange::cube(0.5, 3.5, 3).unwrap();
        let s = Spacing::new(vec![0.2, 2.0, 6.0]).unwrap();
        assert_eq!(r.clamp(&s).unwrap().as_slice(), &[0.5, 2.0, 3.5]);
    }
}
