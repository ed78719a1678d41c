//! Synthetic referring-segmentation task.
//!
//! Scenes hold 1-4 non-overlapping colored shapes on a noisy gray background,
//! rendered with 4x4 supersampled anti-aliasing. Expressions come from three
//! templates — "color shape", "superlative shape", "relation color shape" —
//! and the generator only emits expressions its own resolver maps to exactly
//! one object, so every sample has an unambiguous referent by construction.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const VOCAB: [&str; 13] = [
    "red", "green", "blue", "yellow", "square", "circle", "triangle", "largest", "smallest",
    "leftmost", "rightmost", "top", "bottom",
];

pub fn word_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|&w| w == word)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    fn word(self) -> usize {
        self as usize
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.90, 0.08, 0.08],
            Color::Green => [0.05, 0.85, 0.05],
            Color::Blue => [0.10, 0.15, 0.95],
            Color::Yellow => [0.95, 0.90, 0.08],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    fn word(self) -> usize {
        self as usize + 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Leftmost,
    Rightmost,
    Top,
    Bottom,
}

impl Relation {
    const ALL: [Relation; 4] = [
        Relation::Leftmost,
        Relation::Rightmost,
        Relation::Top,
        Relation::Bottom,
    ];

    fn word(self) -> usize {
        self as usize + 9
    }

    /// Coordinate the relation ranks by, negated where "smaller wins".
    fn key(self, o: &SceneObject) -> f64 {
        match self {
            Relation::Leftmost => -o.cx,
            Relation::Rightmost => o.cx,
            Relation::Top => -o.cy,
            Relation::Bottom => o.cy,
        }
    }
}

/// One rendered object. `r` is the circumradius in pixels.
#[derive(Clone, Copy, Debug)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl SceneObject {
    /// Indicator of the shape at continuous image coordinates.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.r * self.r,
            Shape::Square => {
                let h = self.r / std::f64::consts::SQRT_2;
                dx.abs() <= h && dy.abs() <= h
            }
            Shape::Triangle => {
                // equilateral, apex up (screen y grows downward)
                let vs: Vec<(f64, f64)> = [-90.0f64, 30.0, 150.0]
                    .iter()
                    .map(|a| {
                        let rad = a.to_radians();
                        (self.cx + self.r * rad.cos(), self.cy + self.r * rad.sin())
                    })
                    .collect();
                let mut sign = 0.0f64;
                for i in 0..3 {
                    let (x1, y1) = vs[i];
                    let (x2, y2) = vs[(i + 1) % 3];
                    let cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
                    if cross.abs() > 1e-12 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }
}

/// A referring expression over scene objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expression {
    ColorShape(Color, Shape),
    Superlative { largest: bool, shape: Shape },
    Relation(Relation, Color, Shape),
}

impl Expression {
    pub fn tokens(&self) -> Vec<usize> {
        match *self {
            Expression::ColorShape(c, s) => vec![c.word(), s.word()],
            Expression::Superlative { largest, shape } => {
                vec![if largest { 7 } else { 8 }, shape.word()]
            }
            Expression::Relation(r, c, s) => vec![r.word(), c.word(), s.word()],
        }
    }

    pub fn text(&self) -> String {
        self.tokens()
            .iter()
            .map(|&t| VOCAB[t])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Superlatives need this much circumradius gap to the runner-up.
const SIZE_MARGIN: f64 = 3.0;
/// Relations need this much coordinate gap to the runner-up.
const COORD_MARGIN: f64 = 6.0;

/// Index of the unique object the expression refers to, or `None` when the
/// expression is ambiguous or degenerate (superlatives and relations also
/// require at least two candidates and a clear margin).
pub fn resolve(objects: &[SceneObject], expr: &Expression) -> Option<usize> {
    match *expr {
        Expression::ColorShape(color, shape) => {
            let mut hits = objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.color == color && o.shape == shape);
            let first = hits.next()?;
            hits.next().is_none().then_some(first.0)
        }
        Expression::Superlative { largest, shape } => {
            let mut ranked: Vec<(usize, f64)> = objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.shape == shape)
                .map(|(i, o)| (i, if largest { o.r } else { -o.r }))
                .collect();
            if ranked.len() < 2 {
                return None;
            }
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            (ranked[0].1 - ranked[1].1 >= SIZE_MARGIN).then_some(ranked[0].0)
        }
        Expression::Relation(rel, color, shape) => {
            let mut ranked: Vec<(usize, f64)> = objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.color == color && o.shape == shape)
                .map(|(i, o)| (i, rel.key(o)))
                .collect();
            if ranked.len() < 2 {
                return None;
            }
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            (ranked[0].1 - ranked[1].1 >= COORD_MARGIN).then_some(ranked[0].0)
        }
    }
}

/// Every (expression, referent) pair the resolver accepts for this scene.
pub fn candidate_expressions(objects: &[SceneObject]) -> Vec<(Expression, usize)> {
    let mut out = Vec::new();
    for shape in Shape::ALL {
        for color in Color::ALL {
            let e = Expression::ColorShape(color, shape);
            if let Some(i) = resolve(objects, &e) {
                out.push((e, i));
            }
            for rel in Relation::ALL {
                let e = Expression::Relation(rel, color, shape);
                if let Some(i) = resolve(objects, &e) {
                    out.push((e, i));
                }
            }
        }
        for largest in [true, false] {
            let e = Expression::Superlative { largest, shape };
            if let Some(i) = resolve(objects, &e) {
                out.push((e, i));
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// Row-major [3, size, size] RGB in [0, 1].
    pub image: Vec<f64>,
    pub size: usize,
    pub tokens: Vec<usize>,
    /// Ground truth: pixel majority-covered by the referent.
    pub mask: Vec<bool>,
    pub objects: Vec<SceneObject>,
    pub expression: Expression,
    pub referent: usize,
}

impl SyntheticSample {
    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![3, self.size, self.size],
            self.image.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("image buffer matches its shape")
    }
}

fn place_objects(rng: &mut SplitMix64, size: usize) -> Vec<SceneObject> {
    let want = 1 + [0, 1, 1, 2, 2, 3][rng.below(6)];
    let mut objects: Vec<SceneObject> = Vec::new();
    'outer: for _ in 0..want {
        // bias repeats of an earlier shape (and often its color) so that
        // superlative and relation expressions stay common in the mix
        let repeat = (!objects.is_empty() && rng.below(2) == 0)
            .then(|| objects[rng.below(objects.len())]);
        let (shape, color) = match repeat {
            Some(o) => (
                o.shape,
                if rng.below(2) == 0 {
                    o.color
                } else {
                    Color::ALL[rng.below(4)]
                },
            ),
            None => (Shape::ALL[rng.below(3)], Color::ALL[rng.below(4)]),
        };
        // size budget shrinks with scene crowding or placement stalls
        let cap = ([19.0, 16.0, 14.5, 13.5][want - 1] - objects.len() as f64).max(12.0);
        for _ in 0..60 {
            let mut r = rng.uniform(11.0, cap);
            if shape == Shape::Triangle {
                // area parity: a triangle is the leanest shape per circumradius
                r = (r * 1.25).min(cap + 1.0);
            }
            let lo = r + 2.0;
            let hi = size as f64 - r - 2.0;
            let cx = rng.uniform(lo, hi);
            let cy = rng.uniform(lo, hi);
            let clear = objects.iter().all(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d >= o.r + r + 2.0
            });
            if clear {
                objects.push(SceneObject {
                    shape,
                    color,
                    cx,
                    cy,
                    r,
                });
                continue 'outer;
            }
        }
        break; // crowded scene: settle for fewer objects
    }
    objects
}

/// Fraction of the pixel covered by the object, 4x4 supersampled.
fn coverage(o: &SceneObject, px: usize, py: usize) -> f64 {
    let mut hit = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px as f64 + (sx as f64 + 0.5) / 4.0;
            let y = py as f64 + (sy as f64 + 0.5) / 4.0;
            if o.contains(x, y) {
                hit += 1;
            }
        }
    }
    hit as f64 / 16.0
}

fn render(objects: &[SceneObject], rng: &mut SplitMix64, size: usize) -> (Vec<f64>, Vec<Vec<bool>>) {
    let n = size * size;
    let base = rng.uniform(0.15, 0.35);
    let mut image = vec![0.0; 3 * n];
    for v in image.iter_mut() {
        *v = (base + rng.uniform(-0.04, 0.04)).clamp(0.0, 1.0);
    }
    let mut masks = vec![vec![false; n]; objects.len()];
    for (oi, o) in objects.iter().enumerate() {
        // touched pixel window only; objects never overlap by placement
        let x0 = (o.cx - o.r - 2.0).floor().max(0.0) as usize;
        let x1 = ((o.cx + o.r + 2.0).ceil() as usize).min(size);
        let y0 = (o.cy - o.r - 2.0).floor().max(0.0) as usize;
        let y1 = ((o.cy + o.r + 2.0).ceil() as usize).min(size);
        let rgb = o.color.rgb();
        for py in y0..y1 {
            for px in x0..x1 {
                let c = coverage(o, px, py);
                if c > 0.0 {
                    let at = py * size + px;
                    for ch in 0..3 {
                        let v = &mut image[ch * n + at];
                        *v += c * (rgb[ch] - *v);
                    }
                    masks[oi][at] = c > 0.5;
                }
            }
        }
    }
    (image, masks)
}

/// One deterministic sample from a dedicated rng stream.
pub fn generate_sample(rng: &mut SplitMix64, size: usize) -> SyntheticSample {
    loop {
        let objects = place_objects(rng, size);
        let candidates = candidate_expressions(&objects);
        if candidates.is_empty() {
            continue; // hopelessly ambiguous scene; re-draw
        }
        // pick the template class first so rarer classes keep a fair share
        let mut classes: [Vec<(Expression, usize)>; 3] = Default::default();
        for &(e, i) in &candidates {
            let k = match e {
                Expression::ColorShape(..) => 0,
                Expression::Superlative { .. } => 1,
                Expression::Relation(..) => 2,
            };
            classes[k].push((e, i));
        }
        let present: Vec<&Vec<(Expression, usize)>> =
            classes.iter().filter(|c| !c.is_empty()).collect();
        let class = present[rng.below(present.len())];
        let (expression, referent) = class[rng.below(class.len())];
        let (image, masks) = render(&objects, rng, size);
        let mask = masks[referent].clone();
        if !mask.iter().any(|&m| m) {
            continue; // referent too small to own a pixel; re-draw
        }
        return SyntheticSample {
            image,
            size,
            tokens: expression.tokens(),
            mask,
            objects,
            expression,
            referent,
        };
    }
}

/// Deterministic dataset: sample i draws from the i-th split of `seed`.
pub fn generate_dataset(seed: u64, n: usize, size: usize) -> Vec<SyntheticSample> {
    let mut root = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let mut stream = root.split();
            generate_sample(&mut stream, size)
        })
        .collect()
}

/// Tokenize a whitespace expression against the fixed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            word_id(w).ok_or_else(|| {
                Error::Config(format!(
                    "unknown word `{w}` (vocabulary: {})",
                    VOCAB.join(" ")
                ))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: Shape, color: Color, cx: f64, cy: f64, r: f64) -> SceneObject {
        SceneObject {
            shape,
            color,
            cx,
            cy,
            r,
        }
    }

    #[test]
    fn vocabulary_ids_round_trip() {
        assert_eq!(VOCAB.len(), 13);
        for (i, w) in VOCAB.iter().enumerate() {
            assert_eq!(word_id(w), Some(i));
        }
        assert_eq!(tokenize("leftmost red square").unwrap(), vec![9, 0, 4]);
        assert!(tokenize("mauve blob").is_err());
    }

    #[test]
    fn resolver_requires_uniqueness_and_margins() {
        let a = obj(Shape::Square, Color::Red, 20.0, 20.0, 8.0);
        let b = obj(Shape::Square, Color::Red, 44.0, 44.0, 12.0);
        let c = obj(Shape::Circle, Color::Blue, 44.0, 20.0, 7.0);
        let scene = vec![a, b, c];

        // color+shape: unique for the circle, ambiguous for the squares
        assert_eq!(
            resolve(&scene, &Expression::ColorShape(Color::Blue, Shape::Circle)),
            Some(2)
        );
        assert_eq!(
            resolve(&scene, &Expression::ColorShape(Color::Red, Shape::Square)),
            None
        );
        assert_eq!(
            resolve(&scene, &Expression::ColorShape(Color::Green, Shape::Circle)),
            None
        );

        // superlative: only with >= 2 same-shape objects and a size margin
        assert_eq!(
            resolve(
                &scene,
                &Expression::Superlative {
                    largest: true,
                    shape: Shape::Square
                }
            ),
            Some(1)
        );
        assert_eq!(
            resolve(
                &scene,
                &Expression::Superlative {
                    largest: false,
                    shape: Shape::Circle
                }
            ),
            None
        );

        // relation: margin on the ranking coordinate
        assert_eq!(
            resolve(
                &scene,
                &Expression::Relation(Relation::Leftmost, Color::Red, Shape::Square)
            ),
            Some(0)
        );
        let tight = vec![a, obj(Shape::Square, Color::Red, 24.0, 44.0, 8.0)];
        assert_eq!(
            resolve(
                &tight,
                &Expression::Relation(Relation::Leftmost, Color::Red, Shape::Square)
            ),
            None
        );
    }

    #[test]
    fn superlative_margin_enforced() {
        let scene = vec![
            obj(Shape::Circle, Color::Red, 20.0, 20.0, 8.0),
            obj(Shape::Circle, Color::Blue, 44.0, 44.0, 10.5),
        ];
        assert_eq!(
            resolve(
                &scene,
                &Expression::Superlative {
                    largest: true,
                    shape: Shape::Circle
                }
            ),
            None
        );
        let clear = vec![
            obj(Shape::Circle, Color::Red, 20.0, 20.0, 8.0),
            obj(Shape::Circle, Color::Blue, 44.0, 44.0, 11.5),
        ];
        assert_eq!(
            resolve(
                &clear,
                &Expression::Superlative {
                    largest: true,
                    shape: Shape::Circle
                }
            ),
            Some(1)
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(42, 6, 64);
        let b = generate_dataset(42, 6, 64);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.mask, y.mask);
            assert!(x
                .image
                .iter()
                .zip(&y.image)
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = generate_dataset(43, 6, 64);
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn samples_are_well_formed() {
        for s in generate_dataset(7, 24, 64) {
            assert_eq!(s.image.len(), 3 * 64 * 64);
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(!s.tokens.is_empty() && s.tokens.len() <= 6);
            assert!(s.tokens.iter().all(|&t| t < VOCAB.len()));
            assert!(s.mask.iter().any(|&m| m), "empty referent mask");
            // the stored expression still resolves to the stored referent
            assert_eq!(resolve(&s.objects, &s.expression), Some(s.referent));
        }
    }

    #[test]
    fn square_mask_area_matches_geometry() {
        let o = obj(Shape::Square, Color::Green, 32.0, 32.0, 10.0);
        let mut rng = SplitMix64::new(1);
        let (_, masks) = render(&[o], &mut rng, 64);
        let count = masks[0].iter().filter(|&&m| m).count() as f64;
        let side = 2.0 * 10.0 / std::f64::consts::SQRT_2;
        let area = side * side;
        assert!(
            (count - area).abs() <= 4.0 * side,
            "count {count} vs area {area}"
        );
    }

    #[test]
    fn referent_pixels_show_the_referent_color() {
        let s = &generate_dataset(99, 1, 64)[0];
        let rgb = s.objects[s.referent].color.rgb();
        let n = 64 * 64;
        // interior pixels (coverage 1) carry the pure object color
        let interior: Vec<usize> = (0..n)
            .filter(|&i| {
                s.mask[i]
                    && (0..3).all(|ch| (s.image[ch * n + i] - rgb[ch]).abs() < 1e-9)
            })
            .collect();
        assert!(!interior.is_empty());
    }
}
