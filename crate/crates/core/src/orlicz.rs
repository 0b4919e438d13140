//! Young functions `t log(e + t)` and `e^t − 1`, Luxemburg norms on cubes,
//! dyadic BMO and the John–Nirenberg and Orlicz–Hölder checks.

use std::f64::consts::E;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Cube, Field};

/// Target residual of the Luxemburg bisection.
pub const LUXEMBURG_RESIDUAL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum YoungFunction {
    /// `Φ(t) = t log(e + t)`, the `L log L` scale.
    #[serde(rename = "LlogL")]
    Phi,
    /// `Φ̄(t) = e^t − 1`, the `exp L` scale.
    #[serde(rename = "expL")]
    PhiBar,
}

impl YoungFunction {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            YoungFunction::Phi => t * (E + t).ln(),
            YoungFunction::PhiBar => t.exp_m1(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            YoungFunction::Phi => "LlogL",
            YoungFunction::PhiBar => "expL",
        }
    }

    /// `Φ⁻¹(y)` for `y ≥ 0`.
    pub fn inverse(self, y: f64) -> f64 {
        match self {
            YoungFunction::PhiBar => y.ln_1p(),
            YoungFunction::Phi => {
                if y <= 0.0 {
                    return 0.0;
                }
                let (mut lo, mut hi) = (0.0, y.max(1.0));
                while self.eval(hi) < y {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.eval(mid) < y {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        }
    }

    /// Checks `φ(0) = 0`, monotonicity and midpoint convexity on `samples`
    /// (ascending, nonnegative). Returns the first offending sample.
    pub fn check_shape(self, samples: &[f64]) -> Option<f64> {
        if self.eval(0.0) != 0.0 {
            return Some(0.0);
        }
        for p in samples.windows(2) {
            let (a, b) = (p[0], p[1]);
            let (fa, fb) = (self.eval(a), self.eval(b));
            let mid = self.eval(0.5 * (a + b));
            if fb < fa || mid > 0.5 * (fa + fb) * (1.0 + 1e-12) {
                return Some(b);
            }
        }
        None
    }
}

fn mean_phi(values: &[f64], phi: YoungFunction, lambda: f64) -> f64 {
    values.iter().map(|v| phi.eval(v / lambda)).sum::<f64>() / values.len() as f64
}

/// Luxemburg norm of a sample set: `inf{λ > 0 : mean φ(|v|/λ) ≤ 1}`.
///
/// The returned λ has mean `φ(|v|/λ) ≤ 1` and lies within relative `1e-13`
/// of the infimum.
pub fn luxemburg_values(values: &[f64], phi: YoungFunction) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let top = abs.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0.0);
    }
    let mut hi = top;
    while mean_phi(&abs, phi, hi) > 1.0 {
        hi *= 2.0;
    }
    let mut lo = hi;
    while mean_phi(&abs, phi, lo) <= 1.0 {
        lo *= 0.5;
    }
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mean_phi(&abs, phi, mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// `‖f‖_{φ,Q}`.
pub fn luxemburg_norm(f: &Field<f64>, q: &Cube, phi: YoungFunction) -> Result<f64> {
    let b = f.mesh().cube_box(q);
    if b.is_empty() {
        return Err(Error::EmptyCube(*q));
    }
    let v: Vec<f64> = b.cells().map(|c| f.values()[c]).collect();
    luxemburg_values(&v, phi)
}

/// `|mean φ(|f|/λ) − 1|` at a computed norm.
pub fn luxemburg_residual(f: &Field<f64>, q: &Cube, phi: YoungFunction, lambda: f64) -> f64 {
    let b = f.mesh().cube_box(q);
    let v: Vec<f64> = b.cells().map(|c| f.values()[c].abs()).collect();
    (mean_phi(&v, phi, lambda) - 1.0).abs()
}

/// `⨍_Q |hg| / (‖h‖_{L log L,Q} ‖g‖_{exp L,Q})`, or `None` when a norm
/// vanishes.
pub fn orlicz_holder_check(h: &Field<f64>, g: &Field<f64>, q: &Cube) -> Result<Option<f64>> {
    if h.mesh() != g.mesh() {
        return Err(Error::InvalidMesh("fields live on different meshes".into()));
    }
    let nh = luxemburg_norm(h, q, YoungFunction::Phi)?;
    let ng = luxemburg_norm(g, q, YoungFunction::PhiBar)?;
    if nh == 0.0 || ng == 0.0 {
        return Ok(None);
    }
    let b = h.mesh().cube_box(q);
    let mean = b.cells().map(|c| (h.values()[c] * g.values()[c]).abs()).sum::<f64>() / b.len() as f64;
    Ok(Some(mean / (nh * ng)))
}

/// A field with its dyadic BMO norm.
#[derive(Clone, Debug)]
pub struct BmoFunction {
    pub b: Field<f64>,
    pub bmo: f64,
    pub argmax: Cube,
}

impl BmoFunction {
    pub fn new(b: Field<f64>) -> Self {
        let (bmo, argmax) = bmo_extremum(&b, &[0]);
        BmoFunction { b, bmo, argmax }
    }

    /// Rescales to unit BMO norm; constants stay as they are.
    pub fn normalized(&self) -> Self {
        if self.bmo == 0.0 {
            return self.clone();
        }
        BmoFunction { b: self.b.scale(1.0 / self.bmo), bmo: 1.0, argmax: self.argmax }
    }
}

/// `max_Q ⨍_Q |b − ⟨b⟩_Q|` over the listed grids, with a maximizing cube.
pub fn bmo_extremum(b: &Field<f64>, grids: &[usize]) -> (f64, Cube) {
    let mesh = *b.mesh();
    let mut best = (0.0, Cube { grid: grids.first().copied().unwrap_or(0), level: 0, coords: [0, 0] });
    for &g in grids {
        for level in 0..=mesh.depth() {
            let idx = mesh.level_index(g, level);
            let means = idx.means(b.values());
            let dev: Vec<f64> =
                b.values().iter().zip(&idx.slot).map(|(v, &s)| (v - means[s as usize]).abs()).collect();
            let osc = idx.means(&dev);
            for (o, cube) in osc.iter().zip(&idx.cubes) {
                if *o > best.0 {
                    best = (*o, *cube);
                }
            }
        }
    }
    best
}

/// Dyadic (grid 0) BMO norm.
pub fn bmo_norm(b: &Field<f64>) -> f64 {
    bmo_extremum(b, &[0]).0
}

/// `‖b − ⟨b⟩_Q‖_{exp L,Q} / ‖b‖_BMO`, zero when `b` is constant.
pub fn jn_expl_check(b: &BmoFunction, q: &Cube) -> Result<f64> {
    if b.bmo == 0.0 {
        return Ok(0.0);
    }
    let mean = b.b.average(q)?;
    let bx = b.b.mesh().cube_box(q);
    let v: Vec<f64> = bx.cells().map(|c| b.b.values()[c] - mean).collect();
    Ok(luxemburg_values(&v, YoungFunction::PhiBar)? / b.bmo)
}

/// Largest John–Nirenberg ratio over every grid-0 cube.
pub fn jn_expl_max(b: &BmoFunction) -> Result<(f64, Cube)> {
    let mesh = *b.b.mesh();
    let cubes: Vec<Cube> = (0..=mesh.depth()).flat_map(|k| mesh.cubes_at(0, k)).collect();
    let ratios = cubes.par_iter().map(|q| jn_expl_check(b, q)).collect::<Result<Vec<_>>>()?;
    let mut best = (0.0, cubes[0]);
    for (r, q) in ratios.into_iter().zip(cubes) {
        if r > best.0 {
            best = (r, q);
        }
    }
    Ok(best)
}

/// Logarithmically spaced samples of `[lo, hi]`, `per_decade` per factor 10.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let steps = ((hi / lo).log10() * per_decade as f64).round() as usize;
    (0..=steps)
        .map(|k| lo * 10f64.powf(k as f64 / per_decade as f64))
        .collect()
}

/// `max Φ(st) / (Φ(s)Φ(t))` over `samples²`, with the maximizing pair.
pub fn phi_submultiplicativity_check(samples: &[f64]) -> (f64, f64, f64) {
    let phi = YoungFunction::Phi;
    let mut best = (0.0, 0.0, 0.0);
    for &s in samples {
        for &t in samples {
            let r = phi.eval(s * t) / (phi.eval(s) * phi.eval(t));
            if r > best.0 {
                best = (r, s, t);
            }
        }
    }
    best
}

/// One line of an Orlicz report.
#[derive(Clone, Debug, Serialize)]
pub struct OrliczRow {
    pub cube: Cube,
    pub norm_kind: YoungFunction,
    pub value: f64,
    pub residual: f64,
}
