//! Matrix weights and their constants: reducing matrices, matrix `A₁`,
//! directional scalar weights, Fujii–Wilson `A∞`, and reverse Hölder
//! exponents.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::{CellBox, Cube, Field, MeshIndex, Mesh};
use crate::smallmat::{
    cholesky_inverse, mat_pow, op_norm, sym_eig, Matrix, SpdMatrix, Vector, PD_FLOOR,
};

/// Slack granted to direction sampling in reducing-matrix certificates.
pub const DELTA_DIR: f64 = 1e-2;
/// Relative stopping tolerance of the enclosing-ellipsoid solver.
pub const MVEE_TOL: f64 = 1e-8;
const WHITENING_TOL: f64 = 1e-3;
/// Default `c` in `q = 1 + c / [W]_{A∞,sc}`.
pub const DEFAULT_RH_C: f64 = 0.125;
/// Directions per default sampling plan.
pub const PLAN_SIZE: usize = 720;
const GENERIC_PLAN_SIZE: usize = 2000;
const INVERSE_CHECK_TOL: f64 = 1e-10;

/// An SPD-matrix-valued weight with cached pointwise inverses.
#[derive(Clone, Debug)]
pub struct MatrixWeight {
    field: Field<Matrix>,
    inv: Vec<Matrix>,
    fingerprint: u64,
}

impl MatrixWeight {
    pub fn new(field: Field<Matrix>) -> Result<Self> {
        let n = field.value_dim();
        let mut inv = Vec::with_capacity(field.values().len());
        let mut hasher = DefaultHasher::new();
        field.header().n.hash(&mut hasher);
        field.mesh().cell_count().hash(&mut hasher);
        for (cell, m) in field.values().iter().enumerate() {
            let spd = SpdMatrix::new(*m).map_err(|e| match e {
                Error::NotPositiveDefinite => Error::NonPositiveWeight {
                    cell,
                    value: sym_eig(m).map_or(f64::NAN, |s| s.min()),
                },
                other => other,
            })?;
            let wi = mat_pow(&spd, -1.0)?;
            let defect = op_norm(&m.matmul(wi.as_matrix()).sub(&Matrix::identity(n)));
            if defect > INVERSE_CHECK_TOL {
                let eig = sym_eig(m)?;
                return Err(Error::NearSingular { min_eig: eig.min(), floor: PD_FLOOR * eig.max() });
            }
            inv.push(*wi.as_matrix());
            for x in m.to_row_major() {
                x.to_bits().hash(&mut hasher);
            }
        }
        Ok(Self { field, inv, fingerprint: hasher.finish() })
    }

    /// Scalar weight viewed as a `1 × 1` matrix weight.
    pub fn from_scalar(w: &Field<f64>) -> Result<Self> {
        check_positive(w)?;
        Self::new(w.map(|&v| Matrix::diag(&[v])))
    }

    pub fn identity(mesh: Mesh, n: usize) -> Self {
        Self::new(Field::constant(mesh, Matrix::identity(n))).expect("identity is SPD")
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.field.value_dim()
    }

    #[inline]
    pub fn mesh(&self) -> &Mesh {
        self.field.mesh()
    }

    #[inline]
    pub fn field(&self) -> &Field<Matrix> {
        &self.field
    }

    #[inline]
    pub fn at(&self, cell: usize) -> &Matrix {
        self.field.get(cell)
    }

    #[inline]
    pub fn inv(&self, cell: usize) -> &Matrix {
        &self.inv[cell]
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// The scalar weight `x ↦ |W(x)e|`.
    pub fn direction_weight(&self, e: &Vector) -> Field<f64> {
        self.field.map(|m| m.mul_vec(e).norm())
    }

    /// `W⁻¹ f` cellwise.
    pub fn apply_inverse(&self, f: &Field<Vector>) -> Field<Vector> {
        let vals = f.values().iter().zip(&self.inv).map(|(v, wi)| wi.mul_vec(v)).collect();
        Field::new(*f.mesh(), vals).expect("finite product")
    }

    pub fn average(&self, cube: &Cube) -> Result<Matrix> {
        self.field.average(cube)
    }
}

fn check_positive(w: &Field<f64>) -> Result<()> {
    match w.values().iter().position(|&v| !(v > 0.0)) {
        Some(cell) => Err(Error::NonPositiveWeight { cell, value: w.values()[cell] }),
        None => Ok(()),
    }
}

/// Unit directions over which direction-dependent suprema are sampled.
#[derive(Clone, Debug, Serialize)]
pub struct DirectionPlan {
    pub label: String,
    #[serde(skip)]
    pub directions: Vec<Vector>,
}

impl DirectionPlan {
    /// Default plan: the single direction for `n = 1`, 720 angles on the half
    /// circle for `n = 2`, a Fibonacci hemisphere plus basis and eigenvector
    /// directions of the root average for `n = 3`, and a seeded random
    /// hemisphere plus basis beyond.
    pub fn for_weight(w: &MatrixWeight) -> Self {
        let n = w.n();
        match n {
            1 => Self { label: "scalar".into(), directions: vec![Vector::basis(1, 0)] },
            2 => Self::angles(PLAN_SIZE, 0.0),
            3 => {
                let mut plan = Self::sphere(PLAN_SIZE, 0.5);
                plan.directions.extend((0..3).map(|i| Vector::basis(3, i)));
                let root = Cube { grid: 0, level: 0, coords: [0, 0] };
                if let Ok(eig) = w.average(&root).and_then(|m| sym_eig(&m)) {
                    for j in 0..3 {
                        let v: Vec<f64> = (0..3).map(|i| eig.vectors[(i, j)]).collect();
                        plan.directions.push(Vector::from_slice(&v));
                    }
                }
                plan.label = format!("fibonacci-{PLAN_SIZE}+basis+eigen");
                plan
            }
            _ => {
                let mut plan = Self::random(n, GENERIC_PLAN_SIZE, 0);
                plan.directions.extend((0..n).map(|i| Vector::basis(n, i)));
                plan.label = format!("random-{GENERIC_PLAN_SIZE}+basis");
                plan
            }
        }
    }

    /// `count` equispaced angles `π(k + offset)/count` on the half circle.
    pub fn angles(count: usize, offset: f64) -> Self {
        let directions = (0..count)
            .map(|k| {
                let t = PI * (k as f64 + offset) / count as f64;
                Vector::from_slice(&[t.cos(), t.sin()])
            })
            .collect();
        Self { label: format!("angles-{count}"), directions }
    }

    /// Fibonacci lattice on the upper unit hemisphere; `offset ∈ (0, 1)`
    /// shifts the heights.
    pub fn sphere(count: usize, offset: f64) -> Self {
        let golden = PI * (3.0 - 5f64.sqrt());
        let directions = (0..count)
            .map(|k| {
                let z = (k as f64 + offset) / count as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * k as f64 + PI * offset;
                Vector::from_slice(&[r * phi.cos(), r * phi.sin(), z])
            })
            .collect();
        Self { label: format!("fibonacci-{count}"), directions }
    }

    pub fn random(n: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let directions = (0..count)
            .map(|_| loop {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let v = Vector::from_slice(&v);
                let r = v.norm();
                if r > 1e-3 && r <= 1.0 {
                    let s = if v[n - 1] < 0.0 { -1.0 } else { 1.0 };
                    break v.scale(s / r);
                }
            })
            .collect();
        Self { label: format!("random-{count}"), directions }
    }

    /// Companion plan interleaved with this one, for certification.
    fn offset_companion(&self, n: usize) -> Self {
        match n {
            1 => self.clone(),
            2 => Self::angles(PLAN_SIZE, 0.5),
            3 => Self::sphere(PLAN_SIZE, 0.25),
            _ => Self::random(n, GENERIC_PLAN_SIZE, 1),
        }
    }

    /// Directions `m e / |m e|`.
    fn mapped(&self, m: &Matrix) -> Vec<Vector> {
        self.directions
            .iter()
            .map(|e| {
                let v = m.mul_vec(e);
                v.scale(1.0 / v.norm())
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// A reducing matrix `A` for `ρ_Q(e) = ⨍_Q |W(y)e| dy` with certified
/// `c_lo |Ae| ≤ ρ_Q(e) ≤ c_hi |Ae|` on the sampled directions.
#[derive(Clone, Debug)]
pub struct ReducingMatrix {
    pub cube: Cube,
    pub a: SpdMatrix,
    pub a_inv: Matrix,
    pub c_lo: f64,
    pub c_hi: f64,
    pub iterations: usize,
}

impl ReducingMatrix {
    pub fn spread(&self) -> f64 {
        self.c_hi / self.c_lo
    }
}

/// `ρ_Q(e)` for each direction, summed over cells in cell order.
fn rho_values(w: &MatrixWeight, b: &CellBox, dirs: &[Vector]) -> Vec<f64> {
    let mut acc = vec![0.0; dirs.len()];
    for row in b.rows() {
        for cell in row {
            let m = w.at(cell);
            for (a, e) in acc.iter_mut().zip(dirs) {
                *a += m.mul_vec(e).norm();
            }
        }
    }
    let count = b.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    acc
}

struct Mvee {
    /// Ellipsoid `{x : xᵀ M x ≤ 1}` containing every point.
    m: Matrix,
    iterations: usize,
}

/// Dense symmetric positive-definite solve by Cholesky, for the small
/// Newton systems below. `None` when `h` is not numerically positive definite.
fn solve_spd(h: &[f64], rhs: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for j in 0..k {
        let mut d = h[j * k + j];
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[j * k + j] = d;
        for i in (j + 1)..k {
            let mut s = h[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = s / d;
        }
    }
    let mut y = rhs.to_vec();
    for i in 0..k {
        for p in 0..i {
            y[i] -= l[i * k + p] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    for i in (0..k).rev() {
        for p in (i + 1)..k {
            y[i] -= l[p * k + i] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    Some(y)
}

/// Upper-triangle coordinates of a symmetric `n × n` matrix.
fn sym_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|j| (j..n).map(move |l| (j, l))).collect()
}

fn sym_from(m: &[f64], pairs: &[(usize, usize)], n: usize) -> Matrix {
    let mut out = Matrix::zeros(n);
    for (&(j, l), &v) in pairs.iter().zip(m) {
        out[(j, l)] = v;
        out[(l, j)] = v;
    }
    out
}

/// Coefficients `a` with `pᵀ M p = a · m`.
fn lift(p: &Vector, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs.iter().map(|&(j, l)| if j == l { p[j] * p[j] } else { 2.0 * p[j] * p[l] }).collect()
}

/// Barrier value `-t log det M - Σ log(1 - aᵢ·m)`, or `None` outside the
/// feasible region.
fn barrier_value(m: &[f64], rows: &[Vec<f64>], t: f64, pairs: &[(usize, usize)], n: usize) -> Option<f64> {
    let mm = sym_from(m, pairs, n);
    let eig = sym_eig(&mm).ok()?;
    if !(eig.min() > 0.0) {
        return None;
    }
    let mut v = -t * eig.values.as_slice().iter().map(|x| x.ln()).sum::<f64>();
    for a in rows {
        let s = 1.0 - a.iter().zip(m).map(|(x, y)| x * y).sum::<f64>();
        if !(s > 0.0) {
            return None;
        }
        v -= s.ln();
    }
    Some(v)
}

/// Minimizes `-log det M` subject to `pᵢᵀ M pᵢ ≤ 1` over the given points by
/// a log-barrier Newton method, to an absolute gap of `tol` in `log det`.
fn mvee_barrier(points: &[&Vector], start: Matrix, tol: f64, steps: &mut usize) -> Option<Matrix> {
    let n = start.dim();
    let pairs = sym_pairs(n);
    let k = pairs.len();
    let rows: Vec<Vec<f64>> = points.iter().map(|p| lift(p, &pairs)).collect();
    let mut m: Vec<f64> = pairs.iter().map(|&(j, l)| start[(j, l)]).collect();
    let mut t = 100.0;
    loop {
        for _ in 0..100 {
            let mm = sym_from(&m, &pairs, n);
            let mi = cholesky_inverse(&mm)?;
            let mut grad: Vec<f64> =
                pairs.iter().map(|&(j, l)| if j == l { -t * mi[(j, l)] } else { -2.0 * t * mi[(j, l)] }).collect();
            // Hessian of -log det: tr(M⁻¹ Eₐ M⁻¹ E_b) for the symmetric basis.
            let basis: Vec<Matrix> = pairs
                .iter()
                .map(|&(j, l)| {
                    let mut e = Matrix::zeros(n);
                    e[(j, l)] = 1.0;
                    e[(l, j)] = 1.0;
                    mi.matmul(&e)
                })
                .collect();
            let mut h = vec![0.0; k * k];
            for a in 0..k {
                for b in a..k {
                    let (x, y) = (&basis[a], &basis[b]);
                    let mut tr = 0.0;
                    for p in 0..n {
                        for q in 0..n {
                            tr += x[(p, q)] * y[(q, p)];
                        }
                    }
                    h[a * k + b] = t * tr;
                    h[b * k + a] = t * tr;
                }
            }
            for row in &rows {
                let s = 1.0 - row.iter().zip(&m).map(|(x, y)| x * y).sum::<f64>();
                for a in 0..k {
                    grad[a] += row[a] / s;
                    for b in 0..k {
                        h[a * k + b] += row[a] * row[b] / (s * s);
                    }
                }
            }
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            // Near the optimum of a sharply determined ellipsoid the Newton
            // system loses definiteness in floating point; the iterate is
            // still strictly feasible, so keep it.
            let Some(step) = solve_spd(&h, &neg, k) else {
                return Some(sym_from(&m, &pairs, n));
            };
            let decrement: f64 = -grad.iter().zip(&step).map(|(g, d)| g * d).sum::<f64>();
            *steps += 1;
            let f0 = barrier_value(&m, &rows, t, &pairs, n)?;
            // Below this the decrement is at the rounding level of f.
            if decrement / 2.0 <= 1e-10 * (1.0 + f0.abs()) {
                break;
            }
            let mut alpha = 1.0;
            loop {
                let trial: Vec<f64> = m.iter().zip(&step).map(|(x, d)| x + alpha * d).collect();
                if let Some(f) = barrier_value(&trial, &rows, t, &pairs, n) {
                    if f <= f0 - 0.25 * alpha * decrement {
                        m = trial;
                        break;
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-12 {
                    break;
                }
            }
        }
        if points.len() as f64 / t <= tol {
            break;
        }
        t *= 64.0;
    }
    Some(sym_from(&m, &pairs, n))
}

/// Minimum-volume origin-centred ellipsoid enclosing `points`.
///
/// Active-set scheme: the ellipsoid is solved exactly on a small support
/// (seeded greedily, as in Kumar–Yildirim), then the most violated points
/// join the support until every point satisfies `pᵀ M p ≤ 1 + tol`. The
/// returned matrix is rescaled so that all points lie inside.
fn mvee_centered(points: &[Vector], tol: f64) -> Option<Mvee> {
    let n = points[0].dim();
    let mut support: Vec<usize> = Vec::new();
    // Greedy spanning seed: repeatedly take the point with the largest
    // component orthogonal to those already chosen.
    let mut basis: Vec<Vector> = Vec::new();
    for _ in 0..n {
        let residual = |p: &Vector| {
            let mut r = *p;
            for b in &basis {
                let c = r.dot(b);
                for i in 0..n {
                    r[i] -= c * b[i];
                }
            }
            r
        };
        let (i, r) = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, residual(p)))
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))?;
        if !(r.norm() > 0.0) {
            return None;
        }
        basis.push(r.scale(1.0 / r.norm()));
        support.push(i);
    }
    let top = points.iter().map(|p| p.dot(p)).fold(0.0, f64::max);
    let mut m = Matrix::identity(n).scale(0.5 / top);
    let mut iterations = 0;
    // Grow the support cheaply at a loose tolerance, then tighten.
    for round_tol in [1e-3_f64.max(tol), tol] {
        loop {
            let active: Vec<&Vector> = support.iter().map(|&i| &points[i]).collect();
            m = mvee_barrier(&active, m, round_tol, &mut iterations)?;
            let g: Vec<f64> = points.iter().map(|p| m.quad_form(p)).collect();
            let mut violators: Vec<usize> =
                (0..points.len()).filter(|i| g[*i] > 1.0 + round_tol && !support.contains(i)).collect();
            if violators.is_empty() {
                break;
            }
            violators.sort_by(|a, b| g[*b].total_cmp(&g[*a]));
            // Prefer violators pointing in distinct directions.
            let mut picked: Vec<usize> = Vec::new();
            for i in violators {
                let p = &points[i];
                let distinct = picked.iter().all(|&j| {
                    let q = &points[j];
                    p.dot(q).abs() < 0.9999 * p.norm() * q.norm()
                });
                if distinct {
                    picked.push(i);
                    if picked.len() == 2 * n {
                        break;
                    }
                }
            }
            let worst = picked.iter().map(|&i| g[i]).fold(1.0, f64::max);
            support.extend(picked);
            // Warm start strictly inside the enlarged support.
            m = m.scale(0.5 / worst);
        }
    }
    let gmax = points.iter().map(|p| m.quad_form(p)).fold(0.0, f64::max);
    Some(Mvee { m: m.scale(1.0 / gmax), iterations })
}

/// Reducing matrix on `cube` with the weight's default direction plan.
pub fn reducing_matrix(w: &MatrixWeight, cube: &Cube) -> Result<ReducingMatrix> {
    reducing_matrix_with(w, cube, &DirectionPlan::for_weight(w))
}

/// Reducing matrix on `cube` sampled along `plan`.
///
/// A first ellipsoid fitted to the plan's boundary points whitens the
/// norm; the final ellipsoid is fitted to the plan pulled back through that
/// whitening, so the samples are spread evenly over the norm's unit sphere.
/// The result is rescaled so that `c_lo ≤ 1 ≤ c_hi`.
pub fn reducing_matrix_with(
    w: &MatrixWeight,
    cube: &Cube,
    plan: &DirectionPlan,
) -> Result<ReducingMatrix> {
    let b = w.mesh().cube_box(cube);
    if b.is_empty() {
        return Err(Error::EmptyCube(*cube));
    }
    let n = w.n();
    if n == 1 {
        let mut s = 0.0;
        for c in b.cells() {
            s += w.at(c)[(0, 0)];
        }
        let avg = s / b.len() as f64;
        let a = SpdMatrix::new(Matrix::diag(&[avg]))?;
        return Ok(ReducingMatrix {
            cube: *cube,
            a,
            a_inv: Matrix::diag(&[1.0 / avg]),
            c_lo: 1.0,
            c_hi: 1.0,
            iterations: 0,
        });
    }

    let fit = |dirs: &[Vector], tol: f64| -> Result<(Vec<f64>, Mvee)> {
        let rho = rho_values(w, &b, dirs);
        let top = rho.iter().copied().fold(0.0, f64::max);
        if let Some(i) = rho.iter().position(|&r| !(r > PD_FLOOR * top)) {
            return Err(Error::DegenerateNorm { cube: *cube, direction: dirs[i].as_slice().to_vec() });
        }
        let points: Vec<Vector> = dirs.iter().zip(&rho).map(|(e, r)| e.scale(1.0 / r)).collect();
        let ell = mvee_centered(&points, tol).ok_or(Error::NotPositiveDefinite)?;
        Ok((rho, ell))
    };

    // The first ellipsoid only sets the sampling frame; a loose fit suffices.
    let (rho0, first) = fit(&plan.directions, WHITENING_TOL)?;
    let whiten = SpdMatrix::from_nearly_symmetric(first.m)?;
    let unwhiten = mat_pow(&whiten, -0.5)?;
    let dirs1 = plan.mapped(unwhiten.as_matrix());
    let (rho1, second) = fit(&dirs1, MVEE_TOL)?;
    let a = mat_pow(&SpdMatrix::from_nearly_symmetric(second.m)?, 0.5)?;

    let dirs2 = plan.offset_companion(n).mapped(unwhiten.as_matrix());
    let rho2 = rho_values(w, &b, &dirs2);
    let samples = || {
        plan.directions
            .iter()
            .zip(&rho0)
            .chain(dirs1.iter().zip(&rho1))
            .chain(dirs2.iter().zip(&rho2))
    };
    let lo = samples()
        .map(|(e, r)| r / a.as_matrix().mul_vec(e).norm())
        .fold(f64::INFINITY, f64::min);
    let a = SpdMatrix::from_nearly_symmetric(a.as_matrix().scale(lo))?;
    let (mut c_lo, mut c_hi) = (1.0f64, 1.0f64);
    for (e, r) in samples() {
        let ratio = r / a.as_matrix().mul_vec(e).norm();
        c_lo = c_lo.min(ratio);
        c_hi = c_hi.max(ratio);
    }
    let a_inv = *mat_pow(&a, -1.0)?.as_matrix();
    Ok(ReducingMatrix {
        cube: *cube,
        a,
        a_inv,
        c_lo,
        c_hi,
        iterations: first.iterations + second.iterations,
    })
}

/// Reducing matrices for every admitted cube, in [`Mesh::all_cubes`] order.
#[derive(Clone, Debug)]
pub struct ReducingTable {
    pub entries: Vec<ReducingMatrix>,
    lookup: HashMap<Cube, usize>,
}

impl ReducingTable {
    pub fn build(w: &MatrixWeight) -> Result<Self> {
        let plan = DirectionPlan::for_weight(w);
        Self::build_for(w, &w.mesh().all_cubes(), &plan)
    }

    pub fn build_for(w: &MatrixWeight, cubes: &[Cube], plan: &DirectionPlan) -> Result<Self> {
        let entries = cubes
            .par_iter()
            .map(|c| reducing_matrix_with(w, c, plan))
            .collect::<Result<Vec<_>>>()?;
        let lookup = entries.iter().enumerate().map(|(i, r)| (r.cube, i)).collect();
        Ok(Self { entries, lookup })
    }

    pub fn get(&self, cube: &Cube) -> Option<&ReducingMatrix> {
        self.lookup.get(cube).map(|&i| &self.entries[i])
    }

    /// Largest certified `c_hi / c_lo`.
    pub fn worst_spread(&self) -> f64 {
        self.entries.iter().map(|r| r.spread()).fold(1.0, f64::max)
    }
}

/// Where a supremum over `(Q, x)` is attained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Extremum {
    pub value: f64,
    pub cube: Cube,
    pub cell: usize,
}

fn better(a: Option<Extremum>, b: Option<Extremum>) -> Option<Extremum> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.value > x.value { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

/// `[W]_{A₁}`: the maximum over cells `x` and admitted cubes `Q ∋ x` of
/// `⨍_Q ‖W(y)W⁻¹(x)‖ dy`.
pub fn a1_constant(w: &MatrixWeight) -> f64 {
    a1_extremum(w, &(0..w.mesh().grid_count()).collect::<Vec<_>>()).value
}

/// `[W]_{A₁}` restricted to the listed grids, with its maximizer.
///
/// Levels are visited fine to coarse; a pair `(Q, x)` is skipped when the
/// bound `⨍_Q ‖W‖ · ‖W⁻¹(x)‖` cannot beat the maximum over completed levels.
pub fn a1_extremum(w: &MatrixWeight, grids: &[usize]) -> Extremum {
    let mesh = *w.mesh();
    let wn: Vec<f64> = w.field().values().iter().map(op_norm).collect();
    let win: Vec<f64> = w.inv.iter().map(op_norm).collect();
    let mut best: Option<Extremum> = None;
    for &g in grids {
        for level in (0..=mesh.depth()).rev() {
            let floor = best.map_or(0.0, |b| b.value);
            let found = mesh
                .cubes_at(g, level)
                .par_iter()
                .map(|cube| {
                    let b = mesh.cube_box(cube);
                    let count = b.len() as f64;
                    let mut norm_sum = 0.0;
                    for c in b.cells() {
                        norm_sum += wn[c];
                    }
                    let norm_mean = norm_sum / count;
                    let mut local: Option<Extremum> = None;
                    for x in b.cells() {
                        if norm_mean * win[x] <= floor {
                            continue;
                        }
                        let wi = &w.inv[x];
                        let mut s = 0.0;
                        for y in b.cells() {
                            s += op_norm(&w.at(y).matmul(wi));
                        }
                        let value = s / count;
                        local = better(local, Some(Extremum { value, cube: *cube, cell: x }));
                    }
                    local
                })
                .collect::<Vec<_>>();
            for f in found {
                best = better(best, f);
            }
        }
    }
    best.expect("mesh has cells")
}

/// `max_Q max_{x∈Q} ‖A_Q W⁻¹(x)‖` over the cubes of `table`.
pub fn a1_via_reducing(w: &MatrixWeight, table: &ReducingTable) -> f64 {
    let mesh = w.mesh();
    table
        .entries
        .par_iter()
        .map(|r| {
            let a = r.a.as_matrix();
            mesh.cube_box(&r.cube)
                .cells()
                .map(|x| op_norm(&a.matmul(w.inv(x))))
                .fold(0.0, f64::max)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max)
}

/// Scalar `[w]_{A₁} = max_Q ⟨w⟩_Q / min_Q w` over all admitted cubes.
pub fn scalar_a1(w: &Field<f64>) -> Result<f64> {
    scalar_a1_indexed(w, &w.mesh().index())
}

pub fn scalar_a1_indexed(w: &Field<f64>, index: &MeshIndex) -> Result<f64> {
    check_positive(w)?;
    let mut best = 0.0f64;
    for grid in &index.grids {
        for level in grid {
            let means = level.means(w.values());
            let mins = level.mins(w.values());
            for (m, lo) in means.iter().zip(&mins) {
                best = best.max(m / lo);
            }
        }
    }
    Ok(best)
}

/// Fujii–Wilson `[w]_{A∞}` with the dyadic maximal function localized to
/// each cube: `max_Q (1/w(Q)) ∫_Q M^D(w χ_Q)`, over every grid.
///
/// For a cell `x`, `M^D(wχ_Q)(x)` is the largest average along the chain of
/// cubes from `x` up to `Q`, so one fine-to-coarse pass with running maxima
/// yields every cube's integral.
pub fn fujii_wilson_ainf(w: &Field<f64>) -> Result<f64> {
    fujii_wilson_ainf_indexed(w, &w.mesh().index())
}

pub fn fujii_wilson_ainf_indexed(w: &Field<f64>, index: &MeshIndex) -> Result<f64> {
    check_positive(w)?;
    let mut best = 0.0f64;
    for grid in &index.grids {
        let mut running = vec![0.0f64; w.values().len()];
        for level in grid.iter().rev() {
            let means = level.means(w.values());
            let mut maximal = vec![0.0; level.cubes.len()];
            let mut mass = vec![0.0; level.cubes.len()];
            for (cell, (&s, &v)) in level.slot.iter().zip(w.values()).enumerate() {
                let s = s as usize;
                running[cell] = running[cell].max(means[s]);
                maximal[s] += running[cell];
                mass[s] += v;
            }
            for (m, w_q) in maximal.iter().zip(&mass) {
                best = best.max(m / w_q);
            }
        }
    }
    Ok(best)
}

/// Scalar constants of one directional weight `|W(·)e|`.
#[derive(Clone, Debug, Serialize)]
pub struct DirectionConstants {
    pub direction: Vec<f64>,
    pub a1: f64,
    pub ainf: f64,
}

/// `[W]_{A∞,sc}` sampled over `plan`, with the per-direction constants.
pub fn ainf_sc(w: &MatrixWeight, plan: &DirectionPlan) -> Result<(f64, Vec<DirectionConstants>)> {
    if plan.is_empty() {
        return Err(Error::InvalidParameter("empty direction plan".into()));
    }
    let index = w.mesh().index();
    let per = plan
        .directions
        .par_iter()
        .map(|e| {
            let we = w.direction_weight(e);
            Ok(DirectionConstants {
                direction: e.as_slice().to_vec(),
                a1: scalar_a1_indexed(&we, &index)?,
                ainf: fujii_wilson_ainf_indexed(&we, &index)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let value = per.iter().map(|p| p.ainf).fold(0.0, f64::max);
    Ok((value, per))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReverseHolderReport {
    pub c: f64,
    pub q: f64,
    pub max_ratio: f64,
    pub worst_cube: Option<Cube>,
}

/// Largest `(⨍_Q ‖W A_Q⁻¹‖^q)^{1/q} / ⨍_Q ‖W A_Q⁻¹‖` over the table's
/// cubes, at exponent `q`.
pub fn reverse_holder_at(w: &MatrixWeight, table: &ReducingTable, q: f64) -> (f64, Option<Cube>) {
    let mesh = w.mesh();
    let ratios: Vec<f64> = table
        .entries
        .par_iter()
        .map(|r| {
            let b = mesh.cube_box(&r.cube);
            let (mut s1, mut sq) = (0.0, 0.0);
            for x in b.cells() {
                let v = op_norm(&w.at(x).matmul(&r.a_inv));
                s1 += v;
                sq += v.powf(q);
            }
            let k = b.len() as f64;
            (sq / k).powf(1.0 / q) / (s1 / k)
        })
        .collect();
    let mut best = (0.0, None);
    for (r, e) in ratios.iter().zip(&table.entries) {
        if *r > best.0 {
            best = (*r, Some(e.cube));
        }
    }
    best
}

/// Reverse Hölder report at `q = 1 + c / [W]_{A∞,sc}`.
pub fn reverse_holder_report(w: &MatrixWeight, c: f64) -> Result<ReverseHolderReport> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("reverse Hölder c = {c} must be positive")));
    }
    let (ainf, _) = ainf_sc(w, &DirectionPlan::for_weight(w))?;
    let table = ReducingTable::build(w)?;
    let q = 1.0 + c / ainf;
    let (max_ratio, worst_cube) = reverse_holder_at(w, &table, q);
    Ok(ReverseHolderReport { c, q, max_ratio, worst_cube })
}

/// All weight constants of one weight.
#[derive(Clone, Debug, Serialize)]
pub struct WeightConstants {
    pub a1: f64,
    pub a1_red: f64,
    pub ainf_sc: f64,
    pub q: f64,
    pub s: f64,
    pub q_conj: f64,
    pub s_conj: f64,
    pub r: f64,
    pub r_conj: f64,
    pub c: f64,
    pub directions: String,
    pub direction_count: usize,
    pub delta_dir: f64,
    pub reducing_spread: f64,
    pub reverse_holder_max: f64,
    pub a1_argmax: Extremum,
    pub per_direction: Vec<DirectionConstants>,
}

impl WeightConstants {
    pub fn compute(w: &MatrixWeight, c: f64) -> Result<Self> {
        let table = ReducingTable::build(w)?;
        Self::compute_with(w, &table, c)
    }

    pub fn compute_with(w: &MatrixWeight, table: &ReducingTable, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidParameter(format!("reverse Hölder c = {c} must be positive")));
        }
        let plan = DirectionPlan::for_weight(w);
        let a1_argmax = a1_extremum(w, &(0..w.mesh().grid_count()).collect::<Vec<_>>());
        let a1_red = a1_via_reducing(w, table);
        let (ainf, per_direction) = ainf_sc(w, &plan)?;
        let q = 1.0 + c / ainf;
        let q_conj = q / (q - 1.0);
        let r_conj = 2.0 * q_conj;
        let (reverse_holder_max, _) = reverse_holder_at(w, table, q);
        Ok(Self {
            a1: a1_argmax.value,
            a1_red,
            ainf_sc: ainf,
            q,
            s: q,
            q_conj,
            s_conj: q_conj,
            r: r_conj / (r_conj - 1.0),
            r_conj,
            c,
            directions: plan.label.clone(),
            direction_count: plan.len(),
            delta_dir: DELTA_DIR,
            reducing_spread: table.worst_spread(),
            reverse_holder_max,
            a1_argmax,
            per_direction,
        })
    }

    pub fn max_direction_a1(&self) -> f64 {
        self.per_direction.iter().map(|p| p.a1).fold(0.0, f64::max)
    }
}
