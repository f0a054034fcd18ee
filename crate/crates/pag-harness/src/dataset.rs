//! Seeded synthetic datasets for the four per-pixel tasks.
//!
//! Every sample is a pure function of (kind, size, classes, seed, split,
//! index), so regeneration is bitwise reproducible and the train/eval splits
//! stay disjoint through a fixed seed offset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pag_core::losses::TaskTarget;
use pag_core::Tensor;

use crate::config::TaskKind;
use crate::error::{HarnessError, Result};

/// Ignore value in semantic label maps.
pub const IGNORE: f64 = 255.0;

/// Split tag mixed into per-sample seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(&self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Eval => 0x6576_616c_0000_0001,
        }
    }
}

/// Facet base colors for the depth and normal tasks.
const PALETTE: [[f64; 3]; 7] = [
    [0.82, 0.36, 0.36],
    [0.36, 0.82, 0.36],
    [0.36, 0.36, 0.82],
    [0.82, 0.82, 0.36],
    [0.82, 0.36, 0.82],
    [0.36, 0.82, 0.82],
    [0.72, 0.55, 0.32],
];

/// Border colors identifying shape classes. Shape interiors all share one
/// fill, so the class of an interior pixel can only be recovered by carrying
/// border evidence inward -- roughly one block of propagation per two input
/// pixels. Removing depth or skipping whole layers strands deep interiors,
/// while background pixels stay cheap to label.
const SHAPE_PALETTE: [[f64; 3]; 7] = [
    [0.80, 0.30, 0.30],
    [0.30, 0.80, 0.30],
    [0.25, 0.35, 0.85],
    [0.82, 0.78, 0.25],
    [0.78, 0.28, 0.78],
    [0.28, 0.78, 0.78],
    [0.85, 0.55, 0.25],
];

/// Common interior fill shared by every class: clearly distinct from the
/// background so the cheap gates can find shapes, yet carrying no class
/// information of its own.
const FILL_COLOR: [f64; 3] = [0.74, 0.62, 0.38];
const BORDER_WIDTH: f64 = 2.0;

const BG_COLOR: f64 = 0.5;
const BG_NOISE: f64 = 0.04;
const FG_NOISE: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Sample {
    /// RGB image, 3 x size x size, values in [0, 1].
    pub image: Tensor,
    pub target: TaskTarget,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub kind: TaskKind,
    pub samples: Vec<Sample>,
}

fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_draw<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate `n` samples of the given kind and square size.
pub fn gen_dataset(
    kind: TaskKind,
    size: usize,
    n: usize,
    seed: u64,
    classes: usize,
    split: Split,
) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(HarnessError::Data("dataset needs at least one sample".into()));
    }
    if size < 8 {
        return Err(HarnessError::Data(format!("canvas size {size} too small")));
    }
    if classes < 2 || classes - 1 > SHAPE_PALETTE.len() {
        return Err(HarnessError::Data(format!("classes {classes} outside [2, 8]")));
    }
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, split.tag(), i as u64));
            match kind {
                TaskKind::Semantic => shapes_sample(size, classes, &mut rng, false),
                TaskKind::Boundary => shapes_sample(size, classes, &mut rng, true),
                TaskKind::Depth => depth_sample(size, &mut rng),
                TaskKind::Normal => normal_sample(size, &mut rng),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { kind, samples })
}

#[derive(Clone, Copy)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (fy, fx) = (y as f64, x as f64);
        match self {
            Shape::Circle { cy, cx, r } => (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => fy >= *y0 && fy <= *y1 && fx >= *x0 && fx <= *x1,
        }
    }

    /// Inside the shape but within BORDER_WIDTH of its outline.
    fn on_border(&self, y: usize, x: usize) -> bool {
        if !self.contains(y, x) {
            return false;
        }
        let (fy, fx) = (y as f64, x as f64);
        match self {
            Shape::Circle { cy, cx, r } => {
                ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt() >= r - BORDER_WIDTH
            }
            Shape::Rect { y0, x0, y1, x1 } => {
                fy - y0 < BORDER_WIDTH
                    || y1 - fy < BORDER_WIDTH
                    || fx - x0 < BORDER_WIDTH
                    || x1 - fx < BORDER_WIDTH
            }
        }
    }
}

fn shapes_sample(size: usize, classes: usize, rng: &mut ChaCha8Rng, boundary: bool) -> Result<Sample> {
    let mut labels = vec![0usize; size * size];
    let mut border = vec![false; size * size];
    let count = rng.gen_range(3..=5);
    for _ in 0..count {
        let class = rng.gen_range(1..classes);
        let shape = if rng.gen_bool(0.5) {
            Shape::Circle {
                cy: rng.gen_range(0.0..size as f64),
                cx: rng.gen_range(0.0..size as f64),
                r: rng.gen_range(5.0..11.0),
            }
        } else {
            let cy = rng.gen_range(0.0..size as f64);
            let cx = rng.gen_range(0.0..size as f64);
            let hy = rng.gen_range(4.0..10.0);
            let hx = rng.gen_range(4.0..10.0);
            Shape::Rect { y0: cy - hy, x0: cx - hx, y1: cy + hy, x1: cx + hx }
        };
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y, x) {
                    labels[y * size + x] = class;
                    border[y * size + x] = shape.on_border(y, x);
                }
            }
        }
    }

    // Edges: pixels whose 4-neighborhood crosses a label change.
    let mut edge = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let here = labels[y * size + x];
            let mut differs = false;
            if y > 0 && labels[(y - 1) * size + x] != here {
                differs = true;
            }
            if y + 1 < size && labels[(y + 1) * size + x] != here {
                differs = true;
            }
            if x > 0 && labels[y * size + x - 1] != here {
                differs = true;
            }
            if x + 1 < size && labels[y * size + x + 1] != here {
                differs = true;
            }
            edge[y * size + x] = differs;
        }
    }

    let mut image = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let lab = labels[i];
            let (base, noise) = if lab == 0 {
                ([BG_COLOR, BG_COLOR, BG_COLOR], BG_NOISE)
            } else if border[i] {
                (SHAPE_PALETTE[lab - 1], FG_NOISE)
            } else {
                (FILL_COLOR, FG_NOISE)
            };
            for c in 0..3 {
                let v = (base[c] + noise * normal_draw(rng)).clamp(0.0, 1.0);
                image.set3(c, y, x, v);
            }
        }
    }

    let target = if boundary {
        let edges = Tensor::from_fn(&[size, size], |i| if edge[i] { 1.0 } else { 0.0 })?;
        TaskTarget::Boundary { edges }
    } else {
        let label_map = Tensor::from_fn(&[size, size], |i| {
            if edge[i] {
                IGNORE
            } else {
                labels[i] as f64
            }
        })?;
        TaskTarget::Semantic { labels: label_map, classes }
    };
    Ok(Sample { image, target })
}

/// Region index from the signs of two random splitting lines.
struct Facets {
    lines: [(f64, f64, f64); 2],
}

impl Facets {
    fn random(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut line = || {
            let cy = rng.gen_range(0.2..0.8) * size as f64;
            let cx = rng.gen_range(0.2..0.8) * size as f64;
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            // Normal form: a*y + b*x = c.
            let (a, b) = (angle.cos(), angle.sin());
            (a, b, a * cy + b * cx)
        };
        Facets { lines: [line(), line()] }
    }

    fn region(&self, y: usize, x: usize) -> usize {
        let mut id = 0;
        for (i, (a, b, c)) in self.lines.iter().enumerate() {
            if a * y as f64 + b * x as f64 > *c {
                id |= 1 << i;
            }
        }
        id
    }
}

fn depth_sample(size: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let facets = Facets::random(size, rng);
    // Per region: a base log-depth plus a gentle plane.
    let params: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.2..1.8),
                rng.gen_range(-0.012..0.012),
                rng.gen_range(-0.012..0.012),
            )
        })
        .collect();
    let mid = size as f64 / 2.0;
    let mut log_depth = Tensor::zeros(&[1, size, size]);
    let mut image = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let id = facets.region(y, x);
            let (a, by, bx) = params[id];
            let d = (a + by * (y as f64 - mid) + bx * (x as f64 - mid)).clamp(0.0, 2.0);
            log_depth.set3(0, y, x, d);
            let shade = 1.0 - 0.45 * (d / 2.0);
            let base = PALETTE[id % PALETTE.len()];
            for c in 0..3 {
                let v = (base[c] * shade + 0.03 * normal_draw(rng)).clamp(0.0, 1.0);
                image.set3(c, y, x, v);
            }
        }
    }
    Ok(Sample { image, target: TaskTarget::Depth { log_depth } })
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [normal_draw(rng), normal_draw(rng), normal_draw(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn normal_sample(size: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let facets = Facets::random(size, rng);
    let normals: Vec<[f64; 3]> = (0..4).map(|_| random_unit(rng)).collect();
    let lights: [[f64; 3]; 3] = [
        [0.324, 0.540, 0.864],
        [-0.743, 0.248, 0.619],
        [0.258, -0.904, 0.342],
    ];
    let mut target = Tensor::zeros(&[3, size, size]);
    let mut image = Tensor::zeros(&[3, size, size]);
    for y in 0..size {
        for x in 0..size {
            let n = normals[facets.region(y, x)];
            for c in 0..3 {
                target.set3(c, y, x, n[c]);
                let l = lights[c];
                let lambert = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0);
                let v = (0.15 + 0.8 * lambert + 0.02 * normal_draw(rng)).clamp(0.0, 1.0);
                image.set3(c, y, x, v);
            }
        }
    }
    Ok(Sample { image, target: TaskTarget::Normal { normals: target } })
}

/// Deterministic crop plus optional left-right flip of a sample.
pub fn crop_flip(sample: &Sample, dy: usize, dx: usize, out: usize, flip: bool) -> Result<Sample> {
    let size = sample.image.dims()[1];
    if dy + out > size || dx + out > size {
        return Err(HarnessError::Data(format!(
            "crop {out} at ({dy}, {dx}) escapes canvas {size}"
        )));
    }
    let src_x = |x: usize| if flip { dx + out - 1 - x } else { dx + x };
    let image = Tensor::from_fn(&[3, out, out], |i| {
        let c = i / (out * out);
        let y = (i / out) % out;
        let x = i % out;
        sample.image.get3(c, dy + y, src_x(x))
    })?;
    let crop2 = |t: &Tensor| {
        Tensor::from_fn(&[out, out], |i| {
            let y = i / out;
            let x = i % out;
            t.get2(dy + y, src_x(x))
        })
    };
    let target = match &sample.target {
        TaskTarget::Semantic { labels, classes } => TaskTarget::Semantic {
            labels: crop2(labels)?,
            classes: *classes,
        },
        TaskTarget::Boundary { edges } => TaskTarget::Boundary { edges: crop2(edges)? },
        TaskTarget::Depth { log_depth } => {
            let d = Tensor::from_fn(&[1, out, out], |i| {
                let y = (i / out) % out;
                let x = i % out;
                log_depth.get3(0, dy + y, src_x(x))
            })?;
            TaskTarget::Depth { log_depth: d }
        }
        TaskTarget::Normal { normals } => {
            // Mirroring flips the horizontal component of the normals.
            let n = Tensor::from_fn(&[3, out, out], |i| {
                let c = i / (out * out);
                let y = (i / out) % out;
                let x = i % out;
                let v = normals.get3(c, dy + y, src_x(x));
                if flip && c == 0 {
                    -v
                } else {
                    v
                }
            })?;
            TaskTarget::Normal { normals: n }
        }
    };
    Ok(Sample { image, target })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(TaskKind::Semantic, 24, 3, 9, 4, Split::Train).unwrap();
        let b = gen_dataset(TaskKind::Semantic, 24, 3, 9, 4, Split::Train).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.image, sb.image);
        }
    }

    #[test]
    fn splits_differ() {
        let a = gen_dataset(TaskKind::Semantic, 24, 2, 9, 4, Split::Train).unwrap();
        let b = gen_dataset(TaskKind::Semantic, 24, 2, 9, 4, Split::Eval).unwrap();
        assert!(a.samples[0].image != b.samples[0].image);
    }

    #[test]
    fn semantic_labels_stay_in_range() {
        let d = gen_dataset(TaskKind::Semantic, 28, 4, 3, 4, Split::Train).unwrap();
        for s in &d.samples {
            let TaskTarget::Semantic { labels, classes } = &s.target else {
                panic!("wrong target kind")
            };
            assert_eq!(*classes, 4);
            for &v in labels.data() {
                assert!(v == IGNORE || (v >= 0.0 && v < 4.0 && v.fract() == 0.0));
            }
        }
    }

    #[test]
    fn normal_targets_are_unit_length() {
        let d = gen_dataset(TaskKind::Normal, 20, 3, 11, 4, Split::Eval).unwrap();
        for s in &d.samples {
            let TaskTarget::Normal { normals } = &s.target else {
                panic!("wrong target kind")
            };
            for y in 0..20 {
                for x in 0..20 {
                    let n: f64 = (0..3).map(|c| normals.get3(c, y, x).powi(2)).sum();
                    assert!((n.sqrt() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn depth_targets_are_finite_and_bounded() {
        let d = gen_dataset(TaskKind::Depth, 20, 3, 13, 4, Split::Train).unwrap();
        for s in &d.samples {
            let TaskTarget::Depth { log_depth } = &s.target else {
                panic!("wrong target kind")
            };
            for &v in log_depth.data() {
                assert!((0.0..=2.0).contains(&v));
            }
        }
    }

    #[test]
    fn crop_flip_mirrors_normals() {
        let d = gen_dataset(TaskKind::Normal, 20, 1, 5, 4, Split::Train).unwrap();
        let plain = crop_flip(&d.samples[0], 2, 2, 16, false).unwrap();
        let flipped = crop_flip(&d.samples[0], 2, 2, 16, true).unwrap();
        let TaskTarget::Normal { normals: a } = &plain.target else { panic!() };
        let TaskTarget::Normal { normals: b } = &flipped.target else { panic!() };
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(a.get3(0, y, x), -b.get3(0, y, 15 - x));
                assert_eq!(a.get3(1, y, x), b.get3(1, y, 15 - x));
                assert_eq!(a.get3(2, y, x), b.get3(2, y, 15 - x));
            }
        }
    }

    #[test]
    fn boundary_targets_are_binary() {
        let d = gen_dataset(TaskKind::Boundary, 24, 2, 3, 4, Split::Train).unwrap();
        for s in &d.samples {
            let TaskTarget::Boundary { edges } = &s.target else { panic!() };
            assert!(edges.is_binary());
            assert!(edges.sum() > 0.0, "expected some edge pixels");
        }
    }
}
