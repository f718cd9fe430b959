use crate::geometry::BBox;

/// Pyramid levels in use, identified by their index in the C/P naming.
pub const LEVELS: [u8; 3] = [3, 4, 5];

/// Input-relative strides of the three pyramid levels.
pub const STRIDES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub level: u8,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGrid {
    pub level: u8,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Index of this level's first anchor in [`AnchorSet::anchors`].
    pub offset: usize,
}

/// All anchors of one input size, ordered level-major, then row, column and
/// scale: the anchor of cell `(y, x)` with scale `a` at a level is
/// `offset + (y * width + x) * A + a`.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub levels: Vec<LevelGrid>,
    pub per_cell: usize,
}

impl AnchorSet {
    /// Square anchors of side `sizes[level] * scale` centred on every cell.
    pub fn generate(image_size: usize, sizes: &[f64; 3], scales: &[f64]) -> Self {
        let mut anchors = Vec::new();
        let mut levels = Vec::new();
        for (li, (&level, &stride)) in LEVELS.iter().zip(&STRIDES).enumerate() {
            let (h, w) = (image_size / stride, image_size / stride);
            levels.push(LevelGrid {
                level,
                stride,
                height: h,
                width: w,
                offset: anchors.len(),
            });
            for y in 0..h {
                for x in 0..w {
                    for &s in scales {
                        let side = sizes[li] * s;
                        anchors.push(Anchor {
                            level,
                            cx: (x as f64 + 0.5) * stride as f64,
                            cy: (y as f64 + 0.5) * stride as f64,
                            width: side,
                            height: side,
                        });
                    }
                }
            }
        }
        Self {
            anchors,
            levels,
            per_cell: scales.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}
