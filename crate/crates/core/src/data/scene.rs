use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;

pub const GRID: usize = 3;
pub const CELL: usize = 8;
pub const IMAGE_SIDE: usize = GRID * CELL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Bar];

    /// Whether pixel `(x, y)` of an 8×8 cell is covered by the shape.
    fn covers(self, x: usize, y: usize) -> bool {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        match self {
            Shape::Circle => (fx - 4.0).powi(2) + (fy - 4.0).powi(2) <= 9.0,
            Shape::Square => (1..7).contains(&x) && (1..7).contains(&y),
            Shape::Triangle => (1..7).contains(&y) && (fx - 4.0).abs() <= (y as f64) * 0.5 + 0.25,
            Shape::Bar => (3..5).contains(&y),
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    /// Palette entries are multiples of 1/255 so images survive PPM
    /// round trips exactly.
    pub fn rgb(self) -> [f64; 3] {
        let c = match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 170, 60],
            Color::Blue => [30, 60, 220],
            Color::Yellow => [240, 210, 20],
            Color::Purple => [150, 30, 170],
        };
        c.map(|v| v as f64 / 255.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    /// Row-major index into the 3×3 grid.
    pub cell: usize,
}

/// One to three objects in distinct grid cells, sorted by cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    objects: Vec<Object>,
}

impl Scene {
    pub fn new(mut objects: Vec<Object>) -> Option<Self> {
        objects.sort_by_key(|o| o.cell);
        let distinct = objects.windows(2).all(|w| w[0].cell != w[1].cell);
        let ok = (1..=3).contains(&objects.len()) && distinct && objects.iter().all(|o| o.cell < GRID * GRID);
        ok.then_some(Scene { objects })
    }

    /// Object count uniform in 1..=3, distinct cells, uniform shape and color.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.random_range(1..=3);
        let cells = index::sample(rng, GRID * GRID, n);
        let objects = cells
            .iter()
            .map(|cell| Object {
                shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
                color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                cell,
            })
            .collect();
        Scene::new(objects).expect("sampled scene is valid")
    }

    pub fn from_seed(seed: u64) -> Self {
        Scene::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    pub fn render(&self) -> Image {
        let mut img = Image::filled(IMAGE_SIDE, [1.0, 1.0, 1.0]);
        for o in &self.objects {
            let (ox, oy) = ((o.cell % GRID) * CELL, (o.cell / GRID) * CELL);
            for y in 0..CELL {
                for x in 0..CELL {
                    if o.shape.covers(x, y) {
                        img.set(ox + x, oy + y, o.color.rgb());
                    }
                }
            }
        }
        img
    }
}
