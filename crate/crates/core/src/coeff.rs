//! High-contrast coefficient fields.
//!
//! The plane is paved by rectangles `(-l1, l1) x (-l2, l2)` translated by the
//! lattice `2l1 Z x 2l2 Z`. Each rectangle carries a hard core where the
//! coefficient equals one, a thin soft frame of width `eps` along its boundary
//! where it equals `eps^(2 gamma)`, and a smooth transition layer of width
//! `eps` in between. The mirrored and X-defect variants replace the central
//! column (and row) of rectangles by enlarged ones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound of `|S'|` for the quintic smoothstep.
pub const TRANSITION_SLOPE_BOUND: f64 = 1.875;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoeffError {
    #[error("lattice requires l1 >= l2 > 0, got l1 = {l1}, l2 = {l2}")]
    InvalidLattice { l1: f64, l2: f64 },
    #[error("contrast profile requires 0 < eps < l2 = {l2}, got eps = {eps}")]
    InvalidEps { eps: f64, l2: f64 },
    #[error("contrast exponent gamma must lie in (1/2, 1), got {0}")]
    InvalidGamma(f64),
    #[error("shift {name} = {value} must lie in [0, {bound})")]
    InvalidShift { name: &'static str, value: f64, bound: f64 },
    #[error("mirrored field requires eps < (l1 - h)/4 = {bound}, got eps = {eps}")]
    FrameTouchesInterface { eps: f64, bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub l1: f64,
    pub l2: f64,
}

impl Lattice {
    pub fn new(l1: f64, l2: f64) -> Result<Self, CoeffError> {
        if !(l1.is_finite() && l2.is_finite() && l2 > 0.0 && l1 >= l2) {
            return Err(CoeffError::InvalidLattice { l1, l2 });
        }
        let lattice = Self { l1, l2 };
        if let Some((a, b)) = lattice.near_degenerate_levels() {
            log::warn!(
                "limit eigenvalues {a} and {b} are within 1e-3 relative distance; (l1/l2)^2 = {} is close to a small rational",
                (l1 / l2).powi(2)
            );
        }
        Ok(lattice)
    }

    pub fn half(&self, axis: usize) -> f64 {
        if axis == 0 {
            self.l1
        } else {
            self.l2
        }
    }

    /// First pair among the ten lowest Neumann levels of the cell that are
    /// closer than `1e-3` in relative distance.
    pub fn near_degenerate_levels(&self) -> Option<(f64, f64)> {
        let levels = crate::bands::limit_spectrum(self, 10);
        levels.entries.windows(2).find_map(|w| {
            let (a, b) = (w[0].mu, w[1].mu);
            ((b - a).abs() <= 1e-3 * b.abs().max(a.abs()) && b > 0.0).then_some((a, b))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastProfile {
    pub eps: f64,
    pub gamma: f64,
}

impl ContrastProfile {
    pub fn new(lattice: &Lattice, eps: f64, gamma: f64) -> Result<Self, CoeffError> {
        if !(eps.is_finite() && eps > 0.0 && eps < lattice.l2) {
            return Err(CoeffError::InvalidEps { eps, l2: lattice.l2 });
        }
        if !(gamma > 0.5 && gamma < 1.0) {
            return Err(CoeffError::InvalidGamma(gamma));
        }
        Ok(Self { eps, gamma })
    }

    /// Coefficient value on the soft frame, `eps^(2 gamma)`.
    pub fn soft_value(&self) -> f64 {
        self.eps.powf(2.0 * self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldVariant {
    Periodic,
    /// Right half-plane shifted by `+h`, left half-plane by `-h`.
    Mirrored { h: f64 },
    /// Mirror shifts in both coordinates: an enlarged column crossing an
    /// enlarged row.
    XDefect { h1: f64, h2: f64 },
    /// Contrast switched off, `a = 1` everywhere. The lattice still drives
    /// mesh alignment.
    Uniform,
}

/// Cell layout along one coordinate axis.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AxisLayout {
    half: f64,
    /// Half-width added to the central cell; zero means plain periodic.
    shift: f64,
}

impl AxisLayout {
    fn wrap(&self, x: f64) -> f64 {
        let period = 2.0 * self.half;
        x - period * (x / period).round()
    }

    /// Distance from `x` to the nearest cell wall along this axis.
    fn wall_distance(&self, x: f64) -> f64 {
        let u = x.abs();
        if u < self.shift {
            self.half + self.shift - u
        } else {
            (self.half - self.wrap(u - self.shift).abs()).max(0.0)
        }
    }

    /// Cell walls inside `[lo, hi]`, sorted.
    fn walls(&self, lo: f64, hi: f64) -> Vec<f64> {
        let period = 2.0 * self.half;
        let first = self.half + self.shift;
        let mut walls = Vec::new();
        let reach = lo.abs().max(hi.abs());
        let count = ((reach - first) / period).ceil().max(0.0) as i64 + 1;
        for k in 0..=count {
            let w = first + period * k as f64;
            for cand in [w, -w] {
                if cand >= lo - 1e-12 && cand <= hi + 1e-12 {
                    walls.push(cand);
                }
            }
        }
        walls.sort_by(f64::total_cmp);
        walls.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        walls
    }
}

/// Pointwise evaluable coefficient `a(x)`. Immutable after construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastField {
    pub lattice: Lattice,
    pub profile: ContrastProfile,
    pub variant: FieldVariant,
}

impl ContrastField {
    pub fn new(
        lattice: Lattice,
        profile: ContrastProfile,
        variant: FieldVariant,
    ) -> Result<Self, CoeffError> {
        let check_shift = |name, value: f64, bound: f64| {
            if value.is_finite() && value >= 0.0 && value < bound {
                Ok(())
            } else {
                Err(CoeffError::InvalidShift { name, value, bound })
            }
        };
        match variant {
            FieldVariant::Periodic | FieldVariant::Uniform => {}
            FieldVariant::Mirrored { h } => {
                check_shift("h", h, lattice.l1)?;
                let bound = (lattice.l1 - h) / 4.0;
                if profile.eps >= bound {
                    return Err(CoeffError::FrameTouchesInterface { eps: profile.eps, bound });
                }
            }
            FieldVariant::XDefect { h1, h2 } => {
                check_shift("h1", h1, lattice.l1)?;
                check_shift("h2", h2, lattice.l2)?;
            }
        }
        Ok(Self { lattice, profile, variant })
    }

    pub fn periodic(l1: f64, l2: f64, eps: f64, gamma: f64) -> Result<Self, CoeffError> {
        let lattice = Lattice::new(l1, l2)?;
        let profile = ContrastProfile::new(&lattice, eps, gamma)?;
        Self::new(lattice, profile, FieldVariant::Periodic)
    }

    /// Same lattice and profile, different variant.
    pub fn with_variant(&self, variant: FieldVariant) -> Result<Self, CoeffError> {
        Self::new(self.lattice, self.profile, variant)
    }

    pub fn eps(&self) -> f64 {
        self.profile.eps
    }

    fn axis(&self, axis: usize) -> AxisLayout {
        let shift = match (self.variant, axis) {
            (FieldVariant::Mirrored { h }, 0) => h,
            (FieldVariant::XDefect { h1, .. }, 0) => h1,
            (FieldVariant::XDefect { h2, .. }, 1) => h2,
            _ => 0.0,
        };
        AxisLayout { half: self.lattice.half(axis), shift }
    }

    /// Distance to the boundary of the (possibly enlarged) cell containing `x`.
    pub fn wall_distance(&self, x: [f64; 2]) -> f64 {
        self.axis(0).wall_distance(x[0]).min(self.axis(1).wall_distance(x[1]))
    }

    /// Cell walls along `axis` that fall inside `[lo, hi]`.
    pub fn cell_walls(&self, axis: usize, lo: f64, hi: f64) -> Vec<f64> {
        self.axis(axis).walls(lo, hi)
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        if self.variant == FieldVariant::Uniform {
            return 1.0;
        }
        let s = transition_profile(self.wall_distance(x) / self.profile.eps);
        let soft = self.profile.soft_value();
        if s >= 1.0 {
            1.0
        } else if s <= 0.0 {
            soft
        } else {
            soft + (1.0 - soft) * s
        }
    }
}

/// `min(l1 - |x1|, l2 - |x2|)` for `x` in the closed reference cell.
pub fn frame_distance(lattice: &Lattice, x: [f64; 2]) -> f64 {
    (lattice.l1 - x[0].abs()).min(lattice.l2 - x[1].abs())
}

/// Quintic smoothstep on `(1, 2)`, zero below and one above.
pub fn transition_profile(t: f64) -> f64 {
    if t <= 1.0 {
        0.0
    } else if t >= 2.0 {
        1.0
    } else {
        let s = t - 1.0;
        s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}
