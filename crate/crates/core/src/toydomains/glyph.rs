/// A glyph class: a shape over the unit square and its base color.
#[derive(Clone, Copy, Debug)]
pub struct Glyph {
    pub name: &'static str,
    pub color: [f64; 3],
    shape: Shape,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Square,
    Disk,
    Triangle,
    Ring,
    Plus,
    Diamond,
    Frame,
    Hourglass,
}

impl Glyph {
    /// Whether the point `(u, v)` of the unit square is inked.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self.shape {
            Shape::Square => true,
            Shape::Disk => r2 <= 0.25,
            Shape::Triangle => du.abs() <= 0.5 * v,
            Shape::Ring => (0.08..=0.25).contains(&r2),
            Shape::Plus => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
            Shape::Frame => du.abs() > 0.28 || dv.abs() > 0.28,
            Shape::Hourglass => du.abs() <= dv.abs(),
        }
    }
}

pub const GLYPHS: [Glyph; 8] = [
    Glyph { name: "square", color: [0.85, 0.15, 0.15], shape: Shape::Square },
    Glyph { name: "disk", color: [0.15, 0.65, 0.2], shape: Shape::Disk },
    Glyph { name: "triangle", color: [0.15, 0.3, 0.85], shape: Shape::Triangle },
    Glyph { name: "ring", color: [0.95, 0.55, 0.1], shape: Shape::Ring },
    Glyph { name: "plus", color: [0.6, 0.2, 0.75], shape: Shape::Plus },
    Glyph { name: "diamond", color: [0.1, 0.65, 0.75], shape: Shape::Diamond },
    Glyph { name: "frame", color: [0.8, 0.75, 0.1], shape: Shape::Frame },
    Glyph { name: "hourglass", color: [0.85, 0.2, 0.6], shape: Shape::Hourglass },
];
