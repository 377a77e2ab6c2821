//! Scenes, edits and the rasterizer.

use iclip_numerics::{RngStream, Tensor};

use super::tokenizer::{tokenize, Tokens};

pub const IMG: usize = 32;
pub const CHANNELS: usize = 3;
pub const GRID: usize = 4;
pub const CELL: usize = IMG / GRID;
pub const N_COLORS: usize = 8;
pub const MAX_SHAPES: usize = 3;

pub const COLOR_NAMES: [&str; N_COLORS] = ["black", "white", "red", "green", "blue", "yellow", "purple", "orange"];

pub const PALETTE: [[f32; 3]; N_COLORS] = [
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.5, 0.0, 0.5],
    [1.0, 0.5, 0.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether local pixel `(y, x)` of a cell is covered.
    pub fn covers(self, y: usize, x: usize) -> bool {
        let (y, x) = (y as i32, x as i32);
        match self {
            ShapeKind::Square => (1..=6).contains(&y) && (1..=6).contains(&x),
            ShapeKind::Circle => (2 * y - 7).pow(2) + (2 * x - 7).pow(2) <= 40,
            ShapeKind::Triangle => (1..=6).contains(&y) && (2 * x - 7).abs() <= 2 * (y - 1) + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    /// Row-major index on the grid.
    pub cell: usize,
}

/// Background plus up to three shapes of pairwise distinct kinds in distinct
/// cells, each differing in color from the background. Distinct kinds keep
/// "the square" unambiguous.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneSpec {
    pub background: usize,
    pub shapes: Vec<Shape>,
}

impl SceneSpec {
    pub fn shape(&self, kind: ShapeKind) -> Option<&Shape> {
        self.shapes.iter().find(|s| s.kind == kind)
    }

    pub fn is_valid(&self) -> bool {
        let n = self.shapes.len();
        self.background < N_COLORS
            && n <= MAX_SHAPES
            && self.shapes.iter().all(|s| s.color < N_COLORS && s.color != self.background && s.cell < GRID * GRID)
            && (0..n).all(|i| {
                (i + 1..n).all(|j| self.shapes[i].kind != self.shapes[j].kind && self.shapes[i].cell != self.shapes[j].cell)
            })
    }

    /// Shapes sorted by kind, so equal scenes compare equal.
    pub fn canonical(mut self) -> SceneSpec {
        self.shapes.sort();
        self
    }

    pub fn free_cells(&self) -> Vec<usize> {
        (0..GRID * GRID).filter(|c| self.shapes.iter().all(|s| s.cell != *c)).collect()
    }

    pub fn sample(rng: &mut RngStream) -> SceneSpec {
        let background = rng.below(N_COLORS);
        let n = 1 + rng.below(MAX_SHAPES);
        let mut kinds = ShapeKind::ALL.to_vec();
        rng.shuffle(&mut kinds);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        rng.shuffle(&mut cells);
        let shapes = (0..n)
            .map(|i| {
                let mut color = rng.below(N_COLORS - 1);
                if color >= background {
                    color += 1;
                }
                Shape {
                    kind: kinds[i],
                    color,
                    cell: cells[i],
                }
            })
            .collect();
        SceneSpec { background, shapes }.canonical()
    }
}

/// `[IMG, IMG, CHANNELS]`, values from the palette, no anti-aliasing.
pub fn render(scene: &SceneSpec) -> Tensor {
    let mut data = Vec::with_capacity(IMG * IMG * CHANNELS);
    for y in 0..IMG {
        for x in 0..IMG {
            let cell = (y / CELL) * GRID + x / CELL;
            let color = scene
                .shapes
                .iter()
                .find(|s| s.cell == cell && s.kind.covers(y % CELL, x % CELL))
                .map_or(scene.background, |s| s.color);
            data.extend_from_slice(&PALETTE[color]);
        }
    }
    Tensor::new(vec![IMG, IMG, CHANNELS], data).expect("render shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EditKind {
    RecolorShape,
    RecolorBackground,
    AddShape,
    RemoveShape,
    ChangeKind,
}

impl EditKind {
    pub const ALL: [EditKind; 5] = [
        EditKind::RecolorShape,
        EditKind::RecolorBackground,
        EditKind::AddShape,
        EditKind::RemoveShape,
        EditKind::ChangeKind,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EditSpec {
    RecolorShape { kind: ShapeKind, color: usize },
    RecolorBackground { color: usize },
    AddShape { kind: ShapeKind, color: usize, cell: usize },
    RemoveShape { kind: ShapeKind },
    ChangeKind { from: ShapeKind, to: ShapeKind },
}

impl EditSpec {
    pub fn kind(&self) -> EditKind {
        match self {
            EditSpec::RecolorShape { .. } => EditKind::RecolorShape,
            EditSpec::RecolorBackground { .. } => EditKind::RecolorBackground,
            EditSpec::AddShape { .. } => EditKind::AddShape,
            EditSpec::RemoveShape { .. } => EditKind::RemoveShape,
            EditSpec::ChangeKind { .. } => EditKind::ChangeKind,
        }
    }

    /// The one canonical instruction for this edit. The cell of an added
    /// shape is not mentioned.
    pub fn instruction_text(&self) -> String {
        match *self {
            EditSpec::RecolorShape { kind, color } => format!("make the {} {}", kind.name(), COLOR_NAMES[color]),
            EditSpec::RecolorBackground { color } => format!("make the background {}", COLOR_NAMES[color]),
            EditSpec::AddShape { kind, color, .. } => format!("add a {} {}", COLOR_NAMES[color], kind.name()),
            EditSpec::RemoveShape { kind } => format!("remove the {}", kind.name()),
            EditSpec::ChangeKind { from, to } => format!("turn the {} into a {}", from.name(), to.name()),
        }
    }

    pub fn instruction(&self) -> Tokens {
        tokenize(&self.instruction_text()).expect("template words are in the vocabulary")
    }

    /// The edited scene, or `None` when the edit does not apply.
    pub fn apply(&self, scene: &SceneSpec) -> Option<SceneSpec> {
        let mut out = scene.clone();
        match *self {
            EditSpec::RecolorShape { kind, color } => {
                let s = out.shapes.iter_mut().find(|s| s.kind == kind)?;
                if color == s.color || color == scene.background || color >= N_COLORS {
                    return None;
                }
                s.color = color;
            }
            EditSpec::RecolorBackground { color } => {
                if color == scene.background || color >= N_COLORS || scene.shapes.iter().any(|s| s.color == color) {
                    return None;
                }
                out.background = color;
            }
            EditSpec::AddShape { kind, color, cell } => {
                if scene.shapes.len() >= MAX_SHAPES
                    || scene.shape(kind).is_some()
                    || color == scene.background
                    || color >= N_COLORS
                    || !scene.free_cells().contains(&cell)
                {
                    return None;
                }
                out.shapes.push(Shape { kind, color, cell });
            }
            EditSpec::RemoveShape { kind } => {
                let i = out.shapes.iter().position(|s| s.kind == kind)?;
                out.shapes.remove(i);
            }
            EditSpec::ChangeKind { from, to } => {
                if scene.shape(to).is_some() {
                    return None;
                }
                out.shapes.iter_mut().find(|s| s.kind == from)?.kind = to;
            }
        }
        Some(out.canonical())
    }

    /// The grid cells whose pixels this edit may touch; `None` means the
    /// whole background.
    pub fn touched_cells(&self, scene: &SceneSpec) -> Option<Vec<usize>> {
        match *self {
            EditSpec::RecolorBackground { .. } => None,
            EditSpec::AddShape { cell, .. } => Some(vec![cell]),
            EditSpec::RecolorShape { kind, .. } | EditSpec::RemoveShape { kind } | EditSpec::ChangeKind { from: kind, .. } => {
                Some(scene.shape(kind).map(|s| vec![s.cell]).unwrap_or_default())
            }
        }
    }
}

/// Every edit that applies to `scene`, in a fixed order.
pub fn enumerate_edits(scene: &SceneSpec) -> Vec<EditSpec> {
    let mut out = Vec::new();
    for kind in ShapeKind::ALL {
        for color in 0..N_COLORS {
            out.push(EditSpec::RecolorShape { kind, color });
        }
    }
    for color in 0..N_COLORS {
        out.push(EditSpec::RecolorBackground { color });
    }
    for kind in ShapeKind::ALL {
        for color in 0..N_COLORS {
            for cell in 0..GRID * GRID {
                out.push(EditSpec::AddShape { kind, color, cell });
            }
        }
    }
    for kind in ShapeKind::ALL {
        out.push(EditSpec::RemoveShape { kind });
    }
    for from in ShapeKind::ALL {
        for to in ShapeKind::ALL {
            if from != to {
                out.push(EditSpec::ChangeKind { from, to });
            }
        }
    }
    out.retain(|e| e.apply(scene).is_some());
    out
}

/// All distinct instructions the templates can produce, sorted.
pub fn instruction_space() -> Vec<Tokens> {
    let mut out: Vec<Tokens> = Vec::new();
    for kind in ShapeKind::ALL {
        for color in 0..N_COLORS {
            out.push(EditSpec::RecolorShape { kind, color }.instruction());
            out.push(EditSpec::AddShape { kind, color, cell: 0 }.instruction());
        }
        out.push(EditSpec::RemoveShape { kind }.instruction());
        for to in ShapeKind::ALL {
            if to != kind {
                out.push(EditSpec::ChangeKind { from: kind, to }.instruction());
            }
        }
    }
    for color in 0..N_COLORS {
        out.push(EditSpec::RecolorBackground { color }.instruction());
    }
    out.sort();
    out.dedup();
    out
}

/// Draws an edit kind uniformly, resampling when it cannot apply (for
/// example adding a shape to a full scene), then its arguments uniformly.
pub fn sample_edit(scene: &SceneSpec, rng: &mut RngStream) -> EditSpec {
    loop {
        let kind = EditKind::ALL[rng.below(EditKind::ALL.len())];
        if let Some(e) = sample_edit_of_kind(scene, kind, rng) {
            return e;
        }
    }
}

pub fn sample_edit_of_kind(scene: &SceneSpec, kind: EditKind, rng: &mut RngStream) -> Option<EditSpec> {
    let options: Vec<EditSpec> = enumerate_edits(scene).into_iter().filter(|e| e.kind() == kind).collect();
    if options.is_empty() {
        return None;
    }
    Some(options[rng.below(options.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_renders_constant() {
        let img = render(&SceneSpec {
            background: 0,
            shapes: vec![],
        });
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_leave_cell_corners_to_the_background() {
        for k in ShapeKind::ALL {
            assert!(!k.covers(0, 0) && !k.covers(0, CELL - 1) && !k.covers(CELL - 1, 0) && !k.covers(CELL - 1, CELL - 1));
        }
    }

    #[test]
    fn kinds_have_distinct_masks() {
        let mask = |k: ShapeKind| (0..CELL * CELL).map(|i| k.covers(i / CELL, i % CELL)).collect::<Vec<_>>();
        assert_ne!(mask(ShapeKind::Square), mask(ShapeKind::Circle));
        assert_ne!(mask(ShapeKind::Square), mask(ShapeKind::Triangle));
        assert_ne!(mask(ShapeKind::Circle), mask(ShapeKind::Triangle));
    }

    #[test]
    fn instruction_space_size() {
        // 24 recolor + 8 background + 24 add + 3 remove + 6 change.
        assert_eq!(instruction_space().len(), 65);
    }

    #[test]
    fn sampled_scenes_and_edits_are_valid() {
        let mut rng = RngStream::new(3, "scene-test");
        for _ in 0..500 {
            let s = SceneSpec::sample(&mut rng);
            assert!(s.is_valid());
            let e = sample_edit(&s, &mut rng);
            assert!(e.apply(&s).unwrap().is_valid());
        }
    }
}
