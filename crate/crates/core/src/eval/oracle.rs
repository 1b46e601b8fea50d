//! Rule-based judge of generated scenes: components, colors, shapes, layout.

use serde::{Deserialize, Serialize};

use crate::prompts::PromptSpec;
use crate::scene::{channel_distance, Color, Palette, Relation, Shape, BACKGROUND};

/// Pixels farther than this from the background in some channel are foreground.
pub const FOREGROUND_THRESHOLD: f32 = 0.15;
/// Components smaller than this are treated as sampling speckle.
pub const MIN_COMPONENT_PIXELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeGuess {
    Known(Shape),
    Unknown,
}

/// Bounding-box fill ratio to shape.
pub fn classify_fill(ratio: f64) -> ShapeGuess {
    if ratio >= 0.9 {
        ShapeGuess::Known(Shape::Square)
    } else if (0.70..=0.86).contains(&ratio) {
        ShapeGuess::Known(Shape::Circle)
    } else if (0.42..=0.58).contains(&ratio) {
        ShapeGuess::Known(Shape::Triangle)
    } else {
        ShapeGuess::Unknown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub pixels: usize,
    pub mean_rgb: [f32; 3],
    pub color: Color,
    pub fill_ratio: f64,
    pub shape: ShapeGuess,
    /// `(x, y)` in pixels.
    pub centroid: (f64, f64),
}

/// 4-connected foreground components of a `[3, R, R]` image, in scan order of their first pixel.
pub fn components(image: &[f32], resolution: usize, palette: &Palette) -> Vec<Component> {
    let r = resolution;
    let plane = r * r;
    let px = |i: usize| [image[i], image[plane + i], image[2 * plane + i]];
    let fg: Vec<bool> = (0..plane).map(|i| channel_distance(px(i), [BACKGROUND; 3]) > FOREGROUND_THRESHOLD).collect();
    let mut seen = vec![false; plane];
    let mut out = Vec::new();
    for start in 0..plane {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / r, i % r);
            let mut push = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < r {
                push(i + 1);
            }
            if y > 0 {
                push(i - r);
            }
            if y + 1 < r {
                push(i + r);
            }
        }
        if members.len() < MIN_COMPONENT_PIXELS {
            continue;
        }
        let n = members.len() as f64;
        let mut rgb = [0.0f64; 3];
        let (mut cx, mut cy) = (0.0, 0.0);
        let (mut x0, mut x1, mut y0, mut y1) = (r, 0, r, 0);
        for &i in &members {
            let p = px(i);
            for c in 0..3 {
                rgb[c] += p[c] as f64;
            }
            let (y, x) = (i / r, i % r);
            cx += x as f64 + 0.5;
            cy += y as f64 + 0.5;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let mean_rgb = rgb.map(|v| (v / n) as f32);
        let fill_ratio = n / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        out.push(Component {
            pixels: members.len(),
            mean_rgb,
            color: palette.nearest(mean_rgb),
            fill_ratio,
            shape: classify_fill(fill_ratio),
            centroid: (cx / n, cy / n),
        });
    }
    out
}

/// Per-category outcome; `None` where a category does not apply to the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    /// Every requested shape is present.
    pub two_object: Option<bool>,
    /// Every requested shape appears in its requested color.
    pub color_binding: bool,
    /// Centroids of the two subjects satisfy the relation.
    pub spatial: Option<bool>,
}

pub fn binding_oracle(image: &[f32], resolution: usize, prompt: &PromptSpec, palette: &Palette) -> Verdicts {
    let comps = components(image, resolution, palette);
    let has_shape = |s: Shape| comps.iter().any(|c| c.shape == ShapeGuess::Known(s));
    let find = |s: Shape, col: Color| comps.iter().find(|c| c.shape == ShapeGuess::Known(s) && c.color == col);
    let subjects = &prompt.scene;
    let color_binding = subjects.iter().all(|s| find(s.shape, s.color).is_some());
    let two_object = (subjects.len() == 2).then(|| subjects.iter().all(|s| has_shape(s.shape)));
    let spatial = (prompt.relation != Relation::None && subjects.len() == 2).then(|| {
        let locate = |i: usize| {
            let s = &subjects[i];
            find(s.shape, s.color).or_else(|| comps.iter().find(|c| c.shape == ShapeGuess::Known(s.shape))).map(|c| c.centroid)
        };
        match (locate(0), locate(1)) {
            (Some(a), Some(b)) => prompt.relation.holds_centroids(a, b),
            _ => false,
        }
    });
    Verdicts { two_object, color_binding, spatial }
}

/// Accuracy per category over a set of verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BindingAccuracy {
    pub color_binding: f64,
    pub two_object: f64,
    pub spatial: f64,
    /// Color-binding accuracy over two-subject prompts only.
    pub two_object_color_binding: f64,
    pub n: usize,
    pub n_two_object: usize,
    pub n_spatial: usize,
}

impl BindingAccuracy {
    pub fn from_verdicts(v: &[Verdicts]) -> Self {
        let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        let two: Vec<&Verdicts> = v.iter().filter(|x| x.two_object.is_some()).collect();
        let spatial: Vec<bool> = v.iter().filter_map(|x| x.spatial).collect();
        Self {
            color_binding: frac(v.iter().filter(|x| x.color_binding).count(), v.len()),
            two_object: frac(two.iter().filter(|x| x.two_object == Some(true)).count(), two.len()),
            spatial: frac(spatial.iter().filter(|&&s| s).count(), spatial.len()),
            two_object_color_binding: frac(two.iter().filter(|x| x.color_binding).count(), two.len()),
            n: v.len(),
            n_two_object: two.len(),
            n_spatial: spatial.len(),
        }
    }
}
