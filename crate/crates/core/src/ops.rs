//! Operator evaluation: the Christ–Goldberg maximal operator, dyadic
//! maximal functions, sparse operators and commutator forms, a discrete
//! Hilbert transform and distribution functions.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{Cube, Field, SparseFamily};
use crate::smallmat::{op_norm, Matrix, Vector};
use crate::weightlab::MatrixWeight;

fn check_signal(w: &MatrixWeight, f: &Field<Vector>) -> Result<()> {
    if f.mesh() != w.mesh() {
        return Err(Error::InvalidMesh("signal lives on a different mesh".into()));
    }
    if f.value_dim() != w.n() {
        return Err(Error::DimensionMismatch { expected: w.n(), got: f.value_dim() });
    }
    Ok(())
}

fn check_scalar(w: &MatrixWeight, h: &Field<f64>) -> Result<()> {
    if h.mesh() != w.mesh() {
        return Err(Error::InvalidMesh("field lives on a different mesh".into()));
    }
    Ok(())
}

/// Dyadic Christ–Goldberg maximal function over one grid:
/// `sup_{Q∋x} ⨍_Q |W(x)W⁻¹(y)f(y)| dy`.
///
/// Levels run fine to coarse; a pair `(Q, x)` is skipped when
/// `‖W(x)‖ ⟨|W⁻¹f|⟩_Q` cannot beat the value already found at `x`.
pub fn maximal_mw_grid(w: &MatrixWeight, f: &Field<Vector>, grid: usize) -> Result<Field<f64>> {
    check_signal(w, f)?;
    let mesh = *w.mesh();
    if grid >= mesh.grid_count() {
        return Err(Error::InvalidParameter(format!("grid {grid} out of range")));
    }
    let g = w.apply_inverse(f);
    let abs_g: Vec<f64> = g.values().iter().map(Vector::norm).collect();
    let mut best = vec![0.0f64; mesh.cell_count()];
    if w.n() == 1 {
        let wx: Vec<f64> = w.field().values().iter().map(|m| m[(0, 0)]).collect();
        for level in (0..=mesh.depth()).rev() {
            let idx = mesh.level_index(grid, level);
            let means = idx.means(&abs_g);
            for (x, &s) in idx.slot.iter().enumerate() {
                best[x] = best[x].max(wx[x] * means[s as usize]);
            }
        }
        return Field::new(mesh, best);
    }
    let wn: Vec<f64> = w.field().values().iter().map(op_norm).collect();
    for level in (0..=mesh.depth()).rev() {
        let idx = mesh.level_index(grid, level);
        let means = idx.means(&abs_g);
        let updates: Vec<Vec<(usize, f64)>> = idx
            .cubes
            .par_iter()
            .enumerate()
            .map(|(s, cube)| {
                let b = mesh.cube_box(cube);
                let count = b.len() as f64;
                let mut out = Vec::new();
                for x in b.cells() {
                    if wn[x] * means[s] <= best[x] {
                        continue;
                    }
                    let wx = w.at(x);
                    let mut sum = 0.0;
                    for y in b.cells() {
                        sum += wx.mul_vec(g.get(y)).norm();
                    }
                    out.push((x, sum / count));
                }
                out
            })
            .collect();
        for (x, v) in updates.into_iter().flatten() {
            best[x] = best[x].max(v);
        }
    }
    Field::new(mesh, best)
}

/// Christ–Goldberg maximal function over all admitted cubes (every grid).
pub fn maximal_mw(w: &MatrixWeight, f: &Field<Vector>) -> Result<Field<f64>> {
    let mesh = *w.mesh();
    let mut best = vec![0.0f64; mesh.cell_count()];
    for grid in 0..mesh.grid_count() {
        let m = maximal_mw_grid(w, f, grid)?;
        for (b, v) in best.iter_mut().zip(m.values()) {
            *b = b.max(*v);
        }
    }
    Field::new(mesh, best)
}

/// Dyadic maximal function of `|h|` over the given grid.
pub fn dyadic_maximal_grid(h: &Field<f64>, grid: usize) -> Result<Field<f64>> {
    let mesh = *h.mesh();
    if grid >= mesh.grid_count() {
        return Err(Error::InvalidParameter(format!("grid {grid} out of range")));
    }
    let abs: Vec<f64> = h.values().iter().map(|v| v.abs()).collect();
    let mut best = vec![0.0f64; mesh.cell_count()];
    for level in 0..=mesh.depth() {
        let idx = mesh.level_index(grid, level);
        let means = idx.means(&abs);
        for (b, &s) in best.iter_mut().zip(&idx.slot) {
            *b = b.max(means[s as usize]);
        }
    }
    Field::new(mesh, best)
}

/// Dyadic maximal function `M^D h` over the standard grid.
pub fn dyadic_maximal(h: &Field<f64>) -> Result<Field<f64>> {
    dyadic_maximal_grid(h, 0)
}

/// `M^D_q h = M^D(|h|^q)^{1/q}`.
pub fn dyadic_maximal_q(h: &Field<f64>, q: f64) -> Result<Field<f64>> {
    if !(q >= 1.0 && q.is_finite()) {
        return Err(Error::InvalidParameter(format!("exponent {q} must be at least 1")));
    }
    if q == 1.0 {
        return dyadic_maximal(h);
    }
    let m = dyadic_maximal(&h.map(|v| v.abs().powf(q)))?;
    Ok(m.map(|v| v.powf(1.0 / q)))
}

/// Per-member data shared by the sparse operators.
struct Prepared<'a> {
    family: &'a SparseFamily,
    a: Vec<Matrix>,
    a_inv: Vec<Matrix>,
}

fn prepare<'a>(family: &'a SparseFamily, w: &MatrixWeight) -> Result<Prepared<'a>> {
    if family.mesh != *w.mesh() || family.weight_fingerprint != Some(w.fingerprint()) {
        return Err(Error::FamilyWeightMismatch);
    }
    let mut a = Vec::with_capacity(family.len());
    let mut a_inv = Vec::with_capacity(family.len());
    for m in &family.members {
        let r = m.reducing.as_ref().ok_or(Error::FamilyWeightMismatch)?;
        if r.dim() != w.n() {
            return Err(Error::FamilyWeightMismatch);
        }
        a.push(*r.as_matrix());
        a_inv.push(*r.inverse()?.as_matrix());
    }
    Ok(Prepared { family, a, a_inv })
}

impl Prepared<'_> {
    /// Adds `term(member, cell)` over each member's cube, members in order.
    fn accumulate(&self, term: impl Fn(usize, &[usize]) -> Vec<f64> + Sync) -> Vec<f64> {
        let mesh = &self.family.mesh;
        let parts: Vec<(Vec<usize>, Vec<f64>)> = (0..self.family.len())
            .into_par_iter()
            .map(|i| {
                let cells: Vec<usize> = mesh.cube_box(&self.family.members[i].cube).cells().collect();
                let t = term(i, &cells);
                (cells, t)
            })
            .collect();
        let mut out = vec![0.0; mesh.cell_count()];
        for (cells, t) in parts {
            for (c, v) in cells.into_iter().zip(t) {
                out[c] += v;
            }
        }
        out
    }
}

/// `Σ_Q ‖W(x)A_Q⁻¹‖ ⟨|A_Q W⁻¹f|⟩_Q χ_Q(x)` over the family's members.
pub fn sparse_matrix_op(family: &SparseFamily, w: &MatrixWeight, f: &Field<Vector>) -> Result<Field<f64>> {
    check_signal(w, f)?;
    let p = prepare(family, w)?;
    let g = w.apply_inverse(f);
    let out = p.accumulate(|i, cells| {
        let mut s = 0.0;
        for &y in cells {
            s += p.a[i].mul_vec(g.get(y)).norm();
        }
        let avg = s / cells.len() as f64;
        cells.iter().map(|&x| op_norm(&w.at(x).matmul(&p.a_inv[i])) * avg).collect()
    });
    Field::new(family.mesh, out)
}

/// `Σ_Q ‖W(x)A_Q⁻¹‖ ⟨h⟩_Q χ_Q(x)`.
pub fn sparse_scalar_op(family: &SparseFamily, w: &MatrixWeight, h: &Field<f64>) -> Result<Field<f64>> {
    check_scalar(w, h)?;
    let p = prepare(family, w)?;
    let out = p.accumulate(|i, cells| {
        let mut s = 0.0;
        for &y in cells {
            s += h.values()[y];
        }
        let avg = s / cells.len() as f64;
        cells.iter().map(|&x| op_norm(&w.at(x).matmul(&p.a_inv[i])) * avg).collect()
    });
    Field::new(family.mesh, out)
}

/// Cells of one member with their `(plain, star)` contributions.
type MemberPart = (Vec<usize>, Vec<(f64, f64)>);

/// Both sparse commutator forms at once:
/// `Σ_Q |b(x) − b_Q| ⨍_Q |W(x)W⁻¹(y)f(y)| dy χ_Q(x)` and
/// `Σ_Q ⨍_Q |b(y) − b_Q| |W(x)W⁻¹(y)f(y)| dy χ_Q(x)`.
pub fn commutator_sparse_pair(
    family: &SparseFamily,
    w: &MatrixWeight,
    b: &Field<f64>,
    f: &Field<Vector>,
) -> Result<(Field<f64>, Field<f64>)> {
    check_signal(w, f)?;
    check_scalar(w, b)?;
    if family.mesh != *w.mesh() {
        return Err(Error::FamilyWeightMismatch);
    }
    let mesh = family.mesh;
    let g = w.apply_inverse(f);
    let scalar = w.n() == 1;
    let abs_g: Vec<f64> = g.values().iter().map(Vector::norm).collect();
    let parts: Vec<MemberPart> = family
        .members
        .par_iter()
        .map(|m| {
            let cells: Vec<usize> = mesh.cube_box(&m.cube).cells().collect();
            let count = cells.len() as f64;
            let mut sb = 0.0;
            for &y in &cells {
                sb += b.values()[y];
            }
            let bq = sb / count;
            let osc: Vec<f64> = cells.iter().map(|&y| (b.values()[y] - bq).abs()).collect();
            let terms = if scalar {
                let mut s = 0.0;
                let mut s_star = 0.0;
                for (&y, o) in cells.iter().zip(&osc) {
                    s += abs_g[y];
                    s_star += o * abs_g[y];
                }
                cells
                    .iter()
                    .zip(&osc)
                    .map(|(&x, o)| {
                        let wx = w.at(x)[(0, 0)];
                        (o * wx * s / count, wx * s_star / count)
                    })
                    .collect()
            } else {
                cells
                    .par_iter()
                    .zip(&osc)
                    .map(|(&x, o)| {
                        let wx = w.at(x);
                        let mut s = 0.0;
                        let mut s_star = 0.0;
                        for (&y, oy) in cells.iter().zip(&osc) {
                            let v = wx.mul_vec(g.get(y)).norm();
                            s += v;
                            s_star += oy * v;
                        }
                        (o * s / count, s_star / count)
                    })
                    .collect()
            };
            (cells, terms)
        })
        .collect();
    let mut plain = vec![0.0; mesh.cell_count()];
    let mut star = vec![0.0; mesh.cell_count()];
    for (cells, terms) in parts {
        for (c, (t, ts)) in cells.into_iter().zip(terms) {
            plain[c] += t;
            star[c] += ts;
        }
    }
    Ok((Field::new(mesh, plain)?, Field::new(mesh, star)?))
}

pub fn commutator_sparse(
    family: &SparseFamily,
    w: &MatrixWeight,
    b: &Field<f64>,
    f: &Field<Vector>,
) -> Result<Field<f64>> {
    Ok(commutator_sparse_pair(family, w, b, f)?.0)
}

pub fn commutator_sparse_star(
    family: &SparseFamily,
    w: &MatrixWeight,
    b: &Field<f64>,
    f: &Field<Vector>,
) -> Result<Field<f64>> {
    Ok(commutator_sparse_pair(family, w, b, f)?.1)
}

/// A linear operator on scalar fields.
pub trait ScalarOperator: Sync {
    fn apply(&self, h: &Field<f64>) -> Result<Field<f64>>;
}

/// Midpoint-rule principal value of `∫ h(y)/(x − y) dy` on a 1D mesh, the
/// singular cell omitted.
#[derive(Clone, Copy, Debug, Default)]
pub struct HilbertTransform;

impl ScalarOperator for HilbertTransform {
    fn apply(&self, h: &Field<f64>) -> Result<Field<f64>> {
        let mesh = *h.mesh();
        if mesh.dim() != 1 {
            return Err(Error::UnsupportedSpatialDim(mesh.dim()));
        }
        let n = mesh.cell_count();
        // Midpoints differ by whole cells, so the kernel times the cell
        // width is 1/(i − j).
        let inv: Vec<f64> = (0..n).map(|k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect();
        let v = h.values();
        let out: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                for (j, hj) in v.iter().enumerate() {
                    if j < i {
                        s += hj * inv[i - j];
                    } else if j > i {
                        s -= hj * inv[j - i];
                    }
                }
                s
            })
            .collect();
        Field::new(mesh, out)
    }
}

pub fn hilbert_transform(h: &Field<f64>) -> Result<Field<f64>> {
    HilbertTransform.apply(h)
}

fn components(g: &Field<Vector>, k: usize) -> Field<f64> {
    g.map(|v| v[k])
}

fn assemble(parts: &[Field<f64>], n: usize) -> Result<Field<Vector>> {
    let mesh = *parts[0].mesh();
    Field::from_fn(mesh, |c| {
        let mut v = Vector::zeros(n);
        for (k, p) in parts.iter().enumerate() {
            v[k] = p.values()[c];
        }
        v
    })
}

fn apply_weight(w: &MatrixWeight, g: &Field<Vector>) -> Result<Field<Vector>> {
    let mesh = *w.mesh();
    Field::from_fn(mesh, |c| w.at(c).mul_vec(g.get(c)))
}

/// `T_W f = W T(W⁻¹f)`, with `T` acting componentwise.
pub fn t_w(t: &impl ScalarOperator, w: &MatrixWeight, f: &Field<Vector>) -> Result<Field<Vector>> {
    check_signal(w, f)?;
    let g = w.apply_inverse(f);
    let parts = (0..w.n()).map(|k| t.apply(&components(&g, k))).collect::<Result<Vec<_>>>()?;
    apply_weight(w, &assemble(&parts, w.n())?)
}

/// `W [T, b] W⁻¹ f = W (T(b g) − b T(g))` with `g = W⁻¹f`.
pub fn commutator_full(
    t: &impl ScalarOperator,
    w: &MatrixWeight,
    b: &Field<f64>,
    f: &Field<Vector>,
) -> Result<Field<Vector>> {
    check_signal(w, f)?;
    check_scalar(w, b)?;
    let g = w.apply_inverse(f);
    let parts = (0..w.n())
        .map(|k| {
            let gk = components(&g, k);
            let bg = Field::from_fn(*gk.mesh(), |c| b.values()[c] * gk.values()[c])?;
            let t_bg = t.apply(&bg)?;
            let t_g = t.apply(&gk)?;
            Field::from_fn(*gk.mesh(), |c| t_bg.values()[c] - b.values()[c] * t_g.values()[c])
        })
        .collect::<Result<Vec<_>>>()?;
    apply_weight(w, &assemble(&parts, w.n())?)
}

/// Distribution function of a field sampled on a λ grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelSetReport {
    pub lambdas: Vec<f64>,
    /// `|{g > λ}|` per λ.
    pub measures: Vec<f64>,
    /// `sup_λ λ |{g > λ}|` over the grid.
    pub weak: f64,
    pub argmax: Option<usize>,
}

impl LevelSetReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "lambda,measure")?;
        for (l, m) in self.lambdas.iter().zip(&self.measures) {
            writeln!(w, "{l:?},{m:?}")?;
        }
        Ok(())
    }
}

/// Exact cell measure of `{g > λ}` for ascending positive `lambdas`.
pub fn superlevel(g: &Field<f64>, lambdas: &[f64]) -> Result<LevelSetReport> {
    if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidParameter("λ values must be positive".into()));
    }
    if lambdas.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidParameter("λ values must ascend".into()));
    }
    let mut sorted = g.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let vol = g.mesh().cell_volume();
    let measures: Vec<f64> = lambdas
        .iter()
        .map(|&l| (sorted.len() - sorted.partition_point(|&v| v <= l)) as f64 * vol)
        .collect();
    let mut weak = 0.0;
    let mut argmax = None;
    for (i, (l, m)) in lambdas.iter().zip(&measures).enumerate() {
        if l * m > weak {
            weak = l * m;
            argmax = Some(i);
        }
    }
    Ok(LevelSetReport { lambdas: lambdas.to_vec(), measures, weak, argmax })
}

/// Ratio between consecutive λ values.
pub const LAMBDA_RATIO: f64 = 1.189_207_115_002_721;

/// Geometric λ grid with ratio `2^{1/4}` from `mean · 2⁻⁴` past `2 · max`.
pub fn lambda_grid(l1_norm: f64, root_measure: f64, max_value: f64) -> Vec<f64> {
    let start = l1_norm / root_measure / 16.0;
    if !(start > 0.0 && start.is_finite()) {
        return Vec::new();
    }
    let stop = 2.0 * max_value.max(start);
    let mut out = Vec::new();
    let mut k = 0;
    loop {
        let l = start * 2f64.powf(k as f64 / 4.0);
        out.push(l);
        if l > stop {
            break;
        }
        k += 1;
    }
    out
}

/// Cubes of the family containing a cell, in member order.
pub fn members_containing(family: &SparseFamily, cell: usize) -> Vec<Cube> {
    family
        .members
        .iter()
        .filter(|m| family.mesh.cube_box(&m.cube).contains_cell(cell))
        .map(|m| m.cube)
        .collect()
}
