//! Bilinear finite elements on structured rectangular grids.
//!
//! Assembles the stiffness form `(a grad u, grad v)` and the mass form
//! `(u, v)` with 2x2 Gauss quadrature. Opposite sides are either identified
//! with a Bloch phase, `u(high) = exp(i phi) u(low)`, or carry a homogeneous
//! Dirichlet condition. Slave and constrained nodes are eliminated, so the
//! resulting pencil stays Hermitian with a positive definite mass matrix.

mod mesh;
mod sparse;

pub use mesh::{build_mesh, Rect, StructuredMesh, MAX_ELEMENTS};
pub use sparse::CsrMatrix;

use std::f64::consts::PI;

use num_complex::Complex64 as c64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeff::{ContrastField, Lattice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("mesh would need {0} elements")]
    TooManyElements(usize),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("coefficient is not finite at ({x1}, {x2})")]
    NonFiniteCoefficient { x1: f64, x2: f64 },
    #[error("cannot identify sides along axis {axis}: {reason}")]
    IdentificationMismatch { axis: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "phase", rename_all = "snake_case")]
pub enum SideCondition {
    /// Quasi-periodic identification of the two opposite sides.
    Bloch(f64),
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub x1: SideCondition,
    pub x2: SideCondition,
}

impl BoundarySpec {
    pub fn bloch(phi1: f64, phi2: f64) -> Self {
        Self { x1: SideCondition::Bloch(phi1), x2: SideCondition::Bloch(phi2) }
    }

    pub fn dirichlet() -> Self {
        Self { x1: SideCondition::Dirichlet, x2: SideCondition::Dirichlet }
    }

    fn axis(&self, axis: usize) -> SideCondition {
        if axis == 0 {
            self.x1
        } else {
            self.x2
        }
    }
}

/// How each mesh node maps onto the reduced unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    /// Per node: `Some((dof, factor))` meaning `u_node = factor * U[dof]`,
    /// or `None` for a Dirichlet node.
    nodes: Vec<Option<(usize, c64)>>,
    dofs: usize,
}

impl DofMap {
    pub fn new(mesh: &StructuredMesh, bc: &BoundarySpec) -> Result<Self, FemError> {
        let (n1, n2) = (mesh.n1(), mesh.n2());
        for axis in 0..2 {
            let n = if axis == 0 { n1 } else { n2 };
            if let SideCondition::Bloch(phi) = bc.axis(axis) {
                if !phi.is_finite() {
                    return Err(FemError::IdentificationMismatch {
                        axis,
                        reason: format!("phase {phi} is not finite"),
                    });
                }
            } else if n < 2 {
                return Err(FemError::IdentificationMismatch {
                    axis,
                    reason: "Dirichlet sides need at least one interior node".into(),
                });
            }
        }
        let fixed = |axis: usize, k: usize, n: usize| {
            bc.axis(axis) == SideCondition::Dirichlet && (k == 0 || k == n)
        };
        let wrap = |axis: usize, k: usize, n: usize| -> (usize, c64) {
            match bc.axis(axis) {
                SideCondition::Bloch(phi) if k == n => (0, c64::from_polar(1.0, phi)),
                _ => (k, c64::new(1.0, 0.0)),
            }
        };
        let mut master = vec![usize::MAX; mesh.node_count()];
        let mut dofs = 0;
        for j in 0..=n2 {
            for i in 0..=n1 {
                if fixed(0, i, n1) || fixed(1, j, n2) {
                    continue;
                }
                let (im, _) = wrap(0, i, n1);
                let (jm, _) = wrap(1, j, n2);
                if (im, jm) == (i, j) {
                    master[mesh.node_index(i, j)] = dofs;
                    dofs += 1;
                }
            }
        }
        let mut nodes = vec![None; mesh.node_count()];
        for j in 0..=n2 {
            for i in 0..=n1 {
                if fixed(0, i, n1) || fixed(1, j, n2) {
                    continue;
                }
                let (im, f1) = wrap(0, i, n1);
                let (jm, f2) = wrap(1, j, n2);
                nodes[mesh.node_index(i, j)] = Some((master[mesh.node_index(im, jm)], f1 * f2));
            }
        }
        Ok(Self { nodes, dofs })
    }

    pub fn dof_count(&self) -> usize {
        self.dofs
    }

    pub fn node(&self, node: usize) -> Option<(usize, c64)> {
        self.nodes[node]
    }

    /// Nodal values of a reduced vector.
    pub fn expand(&self, u: &[c64]) -> Vec<c64> {
        self.nodes
            .iter()
            .map(|n| n.map_or(c64::new(0.0, 0.0), |(d, f)| f * u[d]))
            .collect()
    }
}

/// Assembled pencil `(K, M)` of one boundary-value problem.
#[derive(Debug, Clone)]
pub struct BlochProblem {
    pub mesh: StructuredMesh,
    pub bc: BoundarySpec,
    pub dofs: DofMap,
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
}

impl BlochProblem {
    pub fn dim(&self) -> usize {
        self.dofs.dof_count()
    }

    pub fn expand(&self, u: &[c64]) -> Vec<c64> {
        self.dofs.expand(u)
    }
}

const GAUSS: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

/// Element stiffness and mass on `[x0, x1] x [y0, y1]`, local nodes ordered
/// counter-clockwise from the lower-left corner.
fn element_matrices(
    field: &ContrastField,
    x: [f64; 2],
    y: [f64; 2],
) -> Result<([[f64; 4]; 4], [[f64; 4]; 4]), FemError> {
    let (hx, hy) = (x[1] - x[0], y[1] - y[0]);
    let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let mut ke = [[0.0; 4]; 4];
    let mut me = [[0.0; 4]; 4];
    let weight = 0.25 * hx * hy;
    for &s in &GAUSS {
        for &t in &GAUSS {
            let px = x[0] + 0.5 * (1.0 + s) * hx;
            let py = y[0] + 0.5 * (1.0 + t) * hy;
            let a = field.eval([px, py]);
            if !a.is_finite() {
                return Err(FemError::NonFiniteCoefficient { x1: px, x2: py });
            }
            let mut n = [0.0; 4];
            let mut gx = [0.0; 4];
            let mut gy = [0.0; 4];
            for (k, &(sk, tk)) in corners.iter().enumerate() {
                n[k] = 0.25 * (1.0 + sk * s) * (1.0 + tk * t);
                gx[k] = 0.25 * sk * (1.0 + tk * t) * 2.0 / hx;
                gy[k] = 0.25 * tk * (1.0 + sk * s) * 2.0 / hy;
            }
            for p in 0..4 {
                for q in 0..4 {
                    ke[p][q] += weight * a * (gx[p] * gx[q] + gy[p] * gy[q]);
                    me[p][q] += weight * n[p] * n[q];
                }
            }
        }
    }
    Ok((ke, me))
}

/// Assembles stiffness and mass of `field` on `mesh` under `bc`.
pub fn assemble(
    mesh: &StructuredMesh,
    field: &ContrastField,
    bc: &BoundarySpec,
) -> Result<BlochProblem, FemError> {
    let dofs = DofMap::new(mesh, bc)?;
    let (n1, n2) = (mesh.n1(), mesh.n2());
    type Entry = (usize, usize, c64, c64);
    // One task per element row; concatenating in row order keeps the
    // summation order independent of scheduling.
    let rows: Result<Vec<Vec<Entry>>, FemError> = (0..n2)
        .into_par_iter()
        .map(|ej| {
            let mut out = Vec::with_capacity(16 * n1);
            for ei in 0..n1 {
                let (ke, me) = element_matrices(
                    field,
                    [mesh.xs[ei], mesh.xs[ei + 1]],
                    [mesh.ys[ej], mesh.ys[ej + 1]],
                )?;
                let local = [
                    mesh.node_index(ei, ej),
                    mesh.node_index(ei + 1, ej),
                    mesh.node_index(ei + 1, ej + 1),
                    mesh.node_index(ei, ej + 1),
                ];
                let mapped = local.map(|n| dofs.node(n));
                for p in 0..4 {
                    let Some((dp, fp)) = mapped[p] else { continue };
                    for q in 0..4 {
                        let Some((dq, fq)) = mapped[q] else { continue };
                        let w = fp.conj() * fq;
                        out.push((dp, dq, w * ke[p][q], w * me[p][q]));
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let entries: Vec<Entry> = rows?.into_iter().flatten().collect();
    let n = dofs.dof_count();
    let stiffness = CsrMatrix::from_triplets(n, entries.iter().map(|&(r, c, k, _)| (r, c, k)).collect());
    let mass = CsrMatrix::from_triplets(n, entries.into_iter().map(|(r, c, _, m)| (r, c, m)).collect());
    Ok(BlochProblem { mesh: mesh.clone(), bc: *bc, dofs, stiffness, mass })
}

/// Lowest `count` Bloch eigenvalues of `-Laplace` on the period cell at the
/// given phases, in closed form.
pub fn constant_coefficient_oracle(lattice: &Lattice, phase: [f64; 2], count: usize) -> Vec<f64> {
    let mut reach = 2i64;
    loop {
        let mut values = Vec::new();
        for m1 in -reach..=reach {
            for m2 in -reach..=reach {
                let k1 = (phase[0] + 2.0 * PI * m1 as f64) / (2.0 * lattice.l1);
                let k2 = (phase[1] + 2.0 * PI * m2 as f64) / (2.0 * lattice.l2);
                values.push(k1 * k1 + k2 * k2);
            }
        }
        values.sort_by(f64::total_cmp);
        values.truncate(count);
        // every value beyond the enumerated box exceeds this bound
        let k1 = (2.0 * PI * reach as f64 - 2.0 * PI) / (2.0 * lattice.l1);
        let k2 = (2.0 * PI * reach as f64 - 2.0 * PI) / (2.0 * lattice.l2);
        let bound = (k1 * k1).min(k2 * k2);
        if values.len() == count && values.last().is_none_or(|&v| v <= bound) {
            return values;
        }
        reach *= 2;
    }
}
