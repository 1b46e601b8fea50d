//! Synthetic compositional scenes: sampling, rasterization, ground-truth masks.
//!
//! Images are `[3, R, R]` planar RGB in `[0, 1]` on a mid-gray background.
//! Subjects sit centred in the cells of a 2x2 grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::PromptSpec;

pub const BACKGROUND: f32 = 0.5;
pub const GRID: usize = 2;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Area of the shape over the area of its bounding box.
    pub fn analytic_fill_ratio(self) -> f64 {
        match self {
            Shape::Square => 1.0,
            Shape::Circle => std::f64::consts::FRAC_PI_4,
            Shape::Triangle => 0.5,
        }
    }

    /// Coverage test in the unit box `[0,1]^2`, y pointing down.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // apex at top centre, base along the bottom edge
            Shape::Triangle => (0.0..=1.0).contains(&v) && (u - 0.5).abs() <= v / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).unwrap()
    }
}

/// RGB triples for the six colors, indexed by [`Color::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub rgb: [[f32; 3]; 6],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            rgb: [
                [0.90, 0.10, 0.10],
                [0.10, 0.75, 0.15],
                [0.10, 0.25, 0.90],
                [0.95, 0.85, 0.10],
                [0.55, 0.10, 0.75],
                [0.95, 0.50, 0.05],
            ],
        }
    }
}

/// Largest per-channel absolute difference.
pub fn channel_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

impl Palette {
    pub fn color(&self, c: Color) -> [f32; 3] {
        self.rgb[c.index()]
    }

    /// Colors must be pairwise at least 64/255 apart and visibly off the background.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.rgb.iter().enumerate() {
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("palette entry {i} outside [0,1]")));
            }
            if channel_distance(*a, [BACKGROUND; 3]) < 0.3 {
                return Err(Error::Config(format!("palette entry {i} too close to the background")));
            }
            for (j, b) in self.rgb.iter().enumerate().skip(i + 1) {
                if channel_distance(*a, *b) < 64.0 / 255.0 {
                    return Err(Error::Config(format!("palette entries {i} and {j} are too similar")));
                }
            }
        }
        Ok(())
    }

    /// Nearest palette color by Euclidean RGB distance.
    pub fn nearest(&self, rgb: [f32; 3]) -> Color {
        let d = |c: &[f32; 3]| c.iter().zip(&rgb).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        *Color::ALL
            .iter()
            .min_by(|a, b| d(&self.rgb[a.index()]).total_cmp(&d(&self.rgb[b.index()])))
            .unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..GRID).flat_map(|row| (0..GRID).map(move |col| Cell { row, col }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    None,
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const SPATIAL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    /// Words joining the two subject phrases; `None` for the plain conjunction.
    pub fn phrase(self) -> Option<&'static str> {
        match self {
            Relation::None => None,
            Relation::LeftOf => Some("to the left of"),
            Relation::RightOf => Some("to the right of"),
            Relation::Above => Some("above"),
            Relation::Below => Some("below"),
        }
    }

    /// Whether subject 1 in `a` stands in this relation to subject 2 in `b`.
    pub fn holds(self, a: Cell, b: Cell) -> bool {
        match self {
            Relation::None => true,
            Relation::LeftOf => a.col < b.col,
            Relation::RightOf => a.col > b.col,
            Relation::Above => a.row < b.row,
            Relation::Below => a.row > b.row,
        }
    }

    /// Same test on continuous centroids `(x, y)`.
    pub fn holds_centroids(self, a: (f64, f64), b: (f64, f64)) -> bool {
        match self {
            Relation::None => true,
            Relation::LeftOf => a.0 < b.0,
            Relation::RightOf => a.0 > b.0,
            Relation::Above => a.1 < b.1,
            Relation::Below => a.1 > b.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationMode {
    None,
    Spatial,
}

/// Draw a scene description. Two-subject scenes use distinct shapes and distinct colors.
pub fn sample_scene(seed: u64, num_subjects: usize, mode: RelationMode) -> Result<PromptSpec> {
    if !(1..=2).contains(&num_subjects) {
        return Err(Error::InvalidScene(format!("num_subjects must be 1 or 2, got {num_subjects}")));
    }
    if mode == RelationMode::Spatial && num_subjects != 2 {
        return Err(Error::InvalidScene("spatial relations need two subjects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape_a = Shape::ALL[rng.random_range(0..3)];
    let color_a = Color::ALL[rng.random_range(0..6)];
    let cells: Vec<Cell> = Cell::all().collect();
    if num_subjects == 1 {
        let cell = cells[rng.random_range(0..cells.len())];
        return PromptSpec::new(vec![SubjectSpec { shape: shape_a, color: color_a, cell }], Relation::None);
    }
    let shape_b = loop {
        let s = Shape::ALL[rng.random_range(0..3)];
        if s != shape_a {
            break s;
        }
    };
    let color_b = loop {
        let c = Color::ALL[rng.random_range(0..6)];
        if c != color_a {
            break c;
        }
    };
    let (relation, cell_a, cell_b) = match mode {
        RelationMode::None => {
            let i = rng.random_range(0..cells.len());
            let mut j = rng.random_range(0..cells.len() - 1);
            if j >= i {
                j += 1;
            }
            (Relation::None, cells[i], cells[j])
        }
        RelationMode::Spatial => {
            let relation = Relation::SPATIAL[rng.random_range(0..4)];
            // subjects share a row (horizontal relations) or a column (vertical ones)
            let lane = rng.random_range(0..GRID);
            let (lo, hi) = match relation {
                Relation::LeftOf | Relation::RightOf => (Cell::new(lane, 0), Cell::new(lane, 1)),
                _ => (Cell::new(0, lane), Cell::new(1, lane)),
            };
            match relation {
                Relation::LeftOf | Relation::Above => (relation, lo, hi),
                _ => (relation, hi, lo),
            }
        }
    };
    PromptSpec::new(
        vec![
            SubjectSpec { shape: shape_a, color: color_a, cell: cell_a },
            SubjectSpec { shape: shape_b, color: color_b, cell: cell_b },
        ],
        relation,
    )
}

/// Pixel placement of one subject: top-left corner and side length.
pub fn subject_box(cell: Cell, resolution: usize) -> (usize, usize, usize) {
    let cell_px = resolution / GRID;
    let margin = (cell_px / 8).max(1);
    let size = cell_px - 2 * margin;
    (cell.col * cell_px + margin, cell.row * cell_px + margin, size)
}

/// Fractional coverage of each pixel by a shape, 4x4 supersampled.
pub fn coverage(shape: Shape, cell: Cell, resolution: usize) -> Vec<f32> {
    let (x0, y0, size) = subject_box(cell, resolution);
    let mut cov = vec![0.0f32; resolution * resolution];
    let s = SUPERSAMPLE as f64;
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = ((x - x0) as f64 + (sx as f64 + 0.5) / s) / size as f64;
                    let v = ((y - y0) as f64 + (sy as f64 + 0.5) / s) / size as f64;
                    if shape.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            cov[y * resolution + x] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    cov
}

/// Ground-truth binary mask of one noun, keyed by its token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounMask {
    pub position: usize,
    pub mask: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub resolution: usize,
    /// `[3, R, R]` planar RGB in `[0, 1]`.
    pub image: Vec<f32>,
    /// One mask per subject, in scene order.
    pub masks: Vec<NounMask>,
    pub prompt: PromptSpec,
    pub seed: u64,
}

impl SceneSample {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let r = self.resolution;
        [self.image[y * r + x], self.image[r * r + y * r + x], self.image[2 * r * r + y * r + x]]
    }

    pub fn mask_for(&self, position: usize) -> Option<&[f32]> {
        self.masks.iter().find(|m| m.position == position).map(|m| m.mask.as_slice())
    }
}

/// Rasterize a prompt's scene. `resolution` must be a positive multiple of 4.
pub fn render_scene(prompt: &PromptSpec, resolution: usize, palette: &Palette, seed: u64) -> Result<SceneSample> {
    if resolution == 0 || !resolution.is_multiple_of(4) {
        return Err(Error::InvalidScene(format!("resolution {resolution} is not a multiple of 4")));
    }
    let positions = prompt.subject_noun_positions()?;
    let plane = resolution * resolution;
    let mut image = vec![BACKGROUND; 3 * plane];
    let mut masks = Vec::with_capacity(prompt.scene.len());
    for (subject, &position) in prompt.scene.iter().zip(&positions) {
        let cov = coverage(subject.shape, subject.cell, resolution);
        let rgb = palette.color(subject.color);
        for (p, &c) in cov.iter().enumerate() {
            if c > 0.0 {
                for (ch, &value) in rgb.iter().enumerate() {
                    let px = &mut image[ch * plane + p];
                    *px = *px * (1.0 - c) + value * c;
                }
            }
        }
        let mask = cov.iter().map(|&c| if c >= 0.5 { 1.0 } else { 0.0 }).collect();
        masks.push(NounMask { position, mask });
    }
    Ok(SceneSample { resolution, image, masks, prompt: prompt.clone(), seed })
}

/// Subjects-per-scene policy for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectMode {
    One,
    Two,
    Mixed,
}

/// Relation policy for two-subject scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationPolicy {
    None,
    Spatial,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub subjects: SubjectMode,
    pub relations: RelationPolicy,
    pub palette: Palette,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 2000,
            resolution: 32,
            subjects: SubjectMode::Two,
            relations: RelationPolicy::Mixed,
            palette: Palette::default(),
        }
    }
}

/// Per-sample seed derived from the dataset seed.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// The `index`-th scene of a generated dataset.
pub fn generate_sample(spec: &GenerationSpec, index: usize) -> Result<SceneSample> {
    let seed = sample_seed(spec.seed, index);
    let two = match spec.subjects {
        SubjectMode::One => false,
        SubjectMode::Two => true,
        SubjectMode::Mixed => !index.is_multiple_of(4),
    };
    let mode = match (two, spec.relations) {
        (false, _) | (true, RelationPolicy::None) => RelationMode::None,
        (true, RelationPolicy::Spatial) => RelationMode::Spatial,
        (true, RelationPolicy::Mixed) => {
            if index.is_multiple_of(2) {
                RelationMode::None
            } else {
                RelationMode::Spatial
            }
        }
    };
    let prompt = sample_scene(seed, if two { 2 } else { 1 }, mode)?;
    render_scene(&prompt, spec.resolution, &spec.palette, seed)
}

pub fn generate(spec: &GenerationSpec) -> Result<Vec<SceneSample>> {
    spec.palette.validate()?;
    (0..spec.count).map(|i| generate_sample(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_square() -> PromptSpec {
        PromptSpec::new(
            vec![SubjectSpec { shape: Shape::Square, color: Color::Red, cell: Cell::new(0, 0) }],
            Relation::None,
        )
        .unwrap()
    }

    #[test]
    fn default_palette_is_valid() {
        Palette::default().validate().unwrap();
        let mut p = Palette::default();
        p.rgb[1] = [0.9, 0.12, 0.1];
        assert!(p.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_scene(7, 2, RelationMode::None).unwrap(), sample_scene(7, 2, RelationMode::None).unwrap());
        let one = sample_scene(3, 1, RelationMode::None).unwrap();
        assert_eq!(one.scene.len(), 1);
        assert_eq!(one.relation, Relation::None);
        assert!(sample_scene(3, 1, RelationMode::Spatial).is_err());
    }

    #[test]
    fn spatial_scenes_satisfy_their_relation() {
        for seed in 0..200 {
            let p = sample_scene(seed, 2, RelationMode::Spatial).unwrap();
            assert_ne!(p.relation, Relation::None);
            assert!(p.relation.holds(p.scene[0].cell, p.scene[1].cell));
            if p.relation == Relation::LeftOf {
                assert!(p.scene[0].cell.col < p.scene[1].cell.col);
            }
        }
    }

    #[test]
    fn red_square_color_and_background() {
        let s = render_scene(&red_square(), 32, &Palette::default(), 0).unwrap();
        let mask = s.mask_for(2).unwrap();
        let mut mean = [0.0f64; 3];
        let mut n = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                if mask[y * 32 + x] > 0.5 {
                    let p = s.pixel(x, y);
                    for c in 0..3 {
                        mean[c] += p[c] as f64;
                    }
                    n += 1.0;
                }
            }
        }
        let red = Palette::default().color(Color::Red);
        for c in 0..3 {
            assert!((mean[c] / n - red[c] as f64).abs() < 0.02);
        }
        assert_eq!(s.pixel(31, 31), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn circle_fill_ratio_within_bounding_box() {
        // Oracle: count mask pixels in the subject box directly.
        let (_, _, size) = subject_box(Cell::new(1, 1), 32);
        let cov = coverage(Shape::Circle, Cell::new(1, 1), 32);
        let filled = cov.iter().filter(|&&c| c >= 0.5).count();
        let ratio = filled as f64 / (size * size) as f64;
        assert!((0.74..=0.82).contains(&ratio), "circle fill ratio {ratio}");
    }

    #[test]
    fn masks_keep_a_border_margin() {
        for cell in Cell::all() {
            for shape in Shape::ALL {
                let cov = coverage(shape, cell, 32);
                for i in 0..32 {
                    for edge in [i, 31 * 32 + i, i * 32, i * 32 + 31] {
                        assert_eq!(cov[edge], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_spec_mixes_relations() {
        let spec = GenerationSpec { count: 40, ..Default::default() };
        let data = generate(&spec).unwrap();
        assert!(data.iter().all(|s| s.masks.len() == 2));
        assert!(data.iter().any(|s| s.prompt.relation == Relation::None));
        assert!(data.iter().any(|s| s.prompt.relation != Relation::None));
    }
}
