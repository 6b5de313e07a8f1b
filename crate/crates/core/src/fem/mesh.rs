use serde::{Deserialize, Serialize};

use super::FemError;
use crate::coeff::ContrastField;

/// Elements allowed in one mesh before we assume the parameters are wrong.
pub const MAX_ELEMENTS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: [f64; 2],
    pub x2: [f64; 2],
}

impl Rect {
    pub fn new(x1: [f64; 2], x2: [f64; 2]) -> Self {
        Self { x1, x2 }
    }

    /// Rectangle symmetric about the origin.
    pub fn centered(half1: f64, half2: f64) -> Self {
        Self { x1: [-half1, half1], x2: [-half2, half2] }
    }

    pub fn range(&self, axis: usize) -> [f64; 2] {
        if axis == 0 {
            self.x1
        } else {
            self.x2
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1[1] - self.x1[0]) * (self.x2[1] - self.x2[0])
    }
}

/// Tensor-product grid of bilinear rectangles.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredMesh {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl StructuredMesh {
    pub fn from_coordinates(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, FemError> {
        for c in [&xs, &ys] {
            if c.len() < 2 || c.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(FemError::InvalidMesh("coordinates must be strictly increasing".into()));
            }
        }
        Ok(Self { xs, ys })
    }

    /// Element count along x1.
    pub fn n1(&self) -> usize {
        self.xs.len() - 1
    }

    /// Element count along x2.
    pub fn n2(&self) -> usize {
        self.ys.len() - 1
    }

    pub fn element_count(&self) -> usize {
        self.n1() * self.n2()
    }

    pub fn node_count(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.xs.len() + i
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        [self.xs[i], self.ys[j]]
    }

    pub fn domain(&self) -> Rect {
        Rect::new(
            [self.xs[0], *self.xs.last().unwrap()],
            [self.ys[0], *self.ys.last().unwrap()],
        )
    }

    /// Every element split in two along each direction.
    pub fn refined(&self) -> Self {
        let split = |c: &[f64]| {
            let mut out = Vec::with_capacity(2 * c.len() - 1);
            for w in c.windows(2) {
                out.push(w[0]);
                out.push(0.5 * (w[0] + w[1]));
            }
            out.push(*c.last().unwrap());
            out
        };
        Self { xs: split(&self.xs), ys: split(&self.ys) }
    }

    pub fn max_spacing(&self, axis: usize) -> f64 {
        let c = if axis == 0 { &self.xs } else { &self.ys };
        c.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Graded tensor grid over `domain`.
///
/// Element edges are snapped to every cell wall and to the lines at distance
/// `eps` and `2 eps` from it. Spacing is at most `min(target_h, eps/3)` within
/// `2 eps` of a wall and at most `target_h` elsewhere.
pub fn build_mesh(
    domain: &Rect,
    field: &ContrastField,
    target_h: f64,
) -> Result<StructuredMesh, FemError> {
    if !(target_h.is_finite() && target_h > 0.0) {
        return Err(FemError::InvalidMesh(format!("target_h must be positive, got {target_h}")));
    }
    let eps = field.eps();
    let axis_coords = |axis: usize| -> Result<Vec<f64>, FemError> {
        let [lo, hi] = domain.range(axis);
        if !(hi > lo) {
            return Err(FemError::InvalidMesh(format!("empty range [{lo}, {hi}] on axis {axis}")));
        }
        let walls = field.cell_walls(axis, lo, hi);
        let mut breaks = vec![lo, hi];
        for &w in &walls {
            for off in [-2.0 * eps, -eps, 0.0, eps, 2.0 * eps] {
                let b = w + off;
                if b > lo && b < hi {
                    breaks.push(b);
                }
            }
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        let layer_h = target_h.min(eps / 3.0);
        let near_wall = |x: f64| walls.iter().any(|w| (x - w).abs() < 2.0 * eps);
        let mut coords = vec![breaks[0]];
        for seg in breaks.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let h = if near_wall(0.5 * (a + b)) { layer_h } else { target_h };
            let n = ((b - a) / h - 1e-9).ceil().max(1.0);
            if n > MAX_ELEMENTS as f64 {
                return Err(FemError::TooManyElements(n as usize));
            }
            let n = n as usize;
            for k in 1..n {
                coords.push(a + (b - a) * k as f64 / n as f64);
            }
            coords.push(b);
        }
        Ok(coords)
    };
    let xs = axis_coords(0)?;
    let ys = axis_coords(1)?;
    let elements = (xs.len() - 1).saturating_mul(ys.len() - 1);
    if elements > MAX_ELEMENTS {
        return Err(FemError::TooManyElements(elements));
    }
    StructuredMesh::from_coordinates(xs, ys)
}
