//! Stopping-time constructions: the sparse family behind the domination of
//! the Christ–Goldberg maximal operator, and the Calderón–Zygmund
//! decomposition.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{Cube, FamilyMember, Field, FieldValue, Mesh, SparseFamily};
use crate::smallmat::Vector;
use crate::weightlab::{reducing_matrix, MatrixWeight, ReducingMatrix};

/// Maximal sub-cubes of `j` (same grid) whose `h`-average strictly exceeds
/// twice the average over `j`, in cube order.
pub fn stopping_children(mesh: &Mesh, j: &Cube, h: &Field<f64>) -> Result<Vec<Cube>> {
    if h.mesh() != mesh {
        return Err(Error::InvalidMesh("field lives on a different mesh".into()));
    }
    let b = mesh.cube_box(j);
    if b.is_empty() {
        return Err(Error::EmptyCube(*j));
    }
    if let Some(c) = b.cells().find(|&c| !(h.values()[c] >= 0.0)) {
        return Err(Error::InvalidParameter(format!("h is negative at cell {c}")));
    }
    Ok(stopping_children_in(mesh, j, h.values()))
}

/// Top-down scan over the cells of `j` only; other entries of `values` are
/// never read.
fn stopping_children_in(mesh: &Mesh, j: &Cube, values: &[f64]) -> Vec<Cube> {
    let mean = |c: &Cube| {
        let b = mesh.cube_box(c);
        let mut s = 0.0;
        for row in b.rows() {
            for v in &values[row] {
                s += v;
            }
        }
        s / b.len() as f64
    };
    let avg = mean(j);
    if avg == 0.0 {
        return Vec::new();
    }
    let threshold = 2.0 * avg;
    let mut selected = Vec::new();
    let mut frontier = mesh.children(j);
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for c in frontier {
            if mean(&c) > threshold {
                selected.push(c);
            } else {
                next.extend(mesh.children(&c));
            }
        }
        frontier = next;
    }
    selected.sort();
    selected
}

/// One cube of the stopping tree.
#[derive(Clone, Debug)]
pub struct StoppingNode {
    pub cube: Cube,
    pub reducing: ReducingMatrix,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// `⟨|A_J W⁻¹ f|⟩_J`.
    pub average: f64,
    /// `⟨|A_J W⁻¹ f|⟩_L` for each child `L`, in `children` order.
    pub child_averages: Vec<f64>,
    pub e_cells: Vec<u32>,
}

/// The stopping tree over one grid.
#[derive(Clone, Debug)]
pub struct StoppingTree {
    pub grid: usize,
    pub nodes: Vec<StoppingNode>,
    pub family: SparseFamily,
}

/// Violation of the per-node stopping invariants.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum NodeViolation {
    /// A child's average does not exceed twice its parent's.
    WeakChild { node: usize, child: usize },
    /// Children cover more than half of the parent, in cells.
    Overfull { node: usize, child_cells: usize, parent_cells: usize },
}

impl StoppingTree {
    /// Checks the strict threshold and `Σ|L| ≤ |J|/2` at every node, in
    /// integer cell counts.
    pub fn check_nodes(&self) -> Vec<NodeViolation> {
        let mesh = &self.family.mesh;
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let mut child_cells = 0;
            for (&c, &a) in node.children.iter().zip(&node.child_averages) {
                if !(a > 2.0 * node.average) {
                    out.push(NodeViolation::WeakChild { node: i, child: c });
                }
                child_cells += mesh.cube_cell_count(&self.nodes[c].cube);
            }
            let parent_cells = mesh.cube_cell_count(&node.cube);
            if 2 * child_cells > parent_cells {
                out.push(NodeViolation::Overfull { node: i, child_cells, parent_cells });
            }
        }
        out
    }
}

/// Stopping-time family over every level-0 cube of grid `grid`.
pub fn build_sparse_family(w: &MatrixWeight, f: &Field<Vector>, grid: usize) -> Result<StoppingTree> {
    let mesh = *w.mesh();
    if grid >= mesh.grid_count() {
        return Err(Error::InvalidParameter(format!("grid {grid} out of range")));
    }
    build_sparse_family_from(w, f, &mesh.cubes_at(grid, 0))
}

/// Stopping-time family grown from the given roots (all in one grid).
///
/// Each node `J` gets its own reducing matrix `A_J`; its children are the
/// stopping cubes of `|A_J W⁻¹ f|` inside `J`, and `E_J` is what they leave
/// uncovered. Nodes are stored in depth-first pre-order.
pub fn build_sparse_family_from(
    w: &MatrixWeight,
    f: &Field<Vector>,
    roots: &[Cube],
) -> Result<StoppingTree> {
    let mesh = *w.mesh();
    if f.mesh() != &mesh {
        return Err(Error::InvalidMesh("signal lives on a different mesh".into()));
    }
    if f.value_dim() != w.n() {
        return Err(Error::DimensionMismatch { expected: w.n(), got: f.value_dim() });
    }
    let grid = roots.first().map_or(0, |r| r.grid);
    if roots.iter().any(|r| r.grid != grid) {
        return Err(Error::InvalidParameter("roots span several grids".into()));
    }
    let g = w.apply_inverse(f);
    let mut h = vec![0.0; mesh.cell_count()];
    let mut covered = vec![false; mesh.cell_count()];
    let mut nodes: Vec<StoppingNode> = Vec::new();
    let mut stack: Vec<(Cube, Option<usize>)> = roots.iter().rev().map(|r| (*r, None)).collect();
    while let Some((cube, parent)) = stack.pop() {
        let reducing = reducing_matrix(w, &cube)?;
        let a = reducing.a.as_matrix();
        let b = mesh.cube_box(&cube);
        for c in b.cells() {
            h[c] = a.mul_vec(g.get(c)).norm();
        }
        let kids = stopping_children_in(&mesh, &cube, &h);
        let mut s = 0.0;
        for c in b.cells() {
            s += h[c];
        }
        let average = s / b.len() as f64;
        let child_averages: Vec<f64> = kids
            .iter()
            .map(|k| {
                let kb = mesh.cube_box(k);
                let mut s = 0.0;
                for c in kb.cells() {
                    s += h[c];
                    covered[c] = true;
                }
                s / kb.len() as f64
            })
            .collect();
        let mut e_cells = Vec::new();
        for c in b.cells() {
            if covered[c] {
                covered[c] = false;
            } else {
                e_cells.push(c as u32);
            }
        }
        let index = nodes.len();
        if let Some(p) = parent {
            nodes[p].children.push(index);
        }
        nodes.push(StoppingNode {
            cube,
            reducing,
            parent,
            children: Vec::new(),
            average,
            child_averages,
            e_cells,
        });
        stack.extend(kids.into_iter().rev().map(|k| (k, Some(index))));
    }
    // Children were pushed as they were visited; `child_averages` follows
    // the sorted cube order, which depth-first visiting preserves.
    let family = SparseFamily {
        mesh,
        members: nodes
            .iter()
            .map(|n| FamilyMember {
                cube: n.cube,
                parent: n.parent,
                e_cells: n.e_cells.clone(),
                reducing: Some(n.reducing.a),
            })
            .collect(),
        weight_fingerprint: Some(w.fingerprint()),
    };
    Ok(StoppingTree { grid, nodes, family })
}

/// Calderón–Zygmund decomposition of `|f|` at height `λ` over grid 0.
#[derive(Clone, Debug)]
pub struct CzDecomposition {
    pub lambda: f64,
    /// Maximal grid-0 cubes with `⟨|f|⟩_Q > λ`, in cube order.
    pub cubes: Vec<Cube>,
    /// `⟨|f|⟩_{Q_j}` per cube.
    pub means: Vec<f64>,
    /// Cell membership in `Ω = ∪ Q_j`.
    pub omega: Vec<bool>,
    pub abs_f: Field<f64>,
    pub g: Field<f64>,
    pub b: Field<f64>,
    /// Set when the root itself exceeds `λ`, voiding `g ≤ 2^d λ`.
    pub root_selected: bool,
}

impl CzDecomposition {
    /// `b_j = (|f| − ⟨|f|⟩_{Q_j}) χ_{Q_j}` as a field.
    pub fn component(&self, j: usize) -> Field<f64> {
        let mesh = *self.abs_f.mesh();
        let bx = mesh.cube_box(&self.cubes[j]);
        Field::from_fn(mesh, |c| if bx.contains_cell(c) { self.b.values()[c] } else { 0.0 })
            .expect("finite")
    }

    pub fn omega_measure(&self) -> f64 {
        self.omega.iter().filter(|&&o| o).count() as f64 * self.abs_f.mesh().cell_volume()
    }
}

pub fn cz_decompose<V: FieldValue>(f: &Field<V>, lambda: f64) -> Result<CzDecomposition> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("λ = {lambda} must be positive")));
    }
    let mesh = *f.mesh();
    let abs_f = f.magnitude();
    let root = Cube { grid: 0, level: 0, coords: [0, 0] };
    let mut cubes = Vec::new();
    let mut frontier = vec![root];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for c in frontier {
            if abs_f.mean_over(&mesh.cube_box(&c)) > lambda {
                cubes.push(c);
            } else {
                next.extend(mesh.children(&c));
            }
        }
        frontier = next;
    }
    cubes.sort();
    let mut g = abs_f.values().to_vec();
    let mut b = vec![0.0; mesh.cell_count()];
    let mut omega = vec![false; mesh.cell_count()];
    let mut means = Vec::with_capacity(cubes.len());
    for c in &cubes {
        let bx = mesh.cube_box(c);
        let m = abs_f.mean_over(&bx);
        means.push(m);
        for cell in bx.cells() {
            omega[cell] = true;
            g[cell] = m;
            b[cell] = abs_f.values()[cell] - m;
        }
    }
    Ok(CzDecomposition {
        lambda,
        root_selected: cubes.first() == Some(&root),
        cubes,
        means,
        omega,
        g: Field::new(mesh, g)?,
        b: Field::new(mesh, b)?,
        abs_f,
    })
}
