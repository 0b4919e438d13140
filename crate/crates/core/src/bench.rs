//! Weight, signal and symbol generators, experiment configuration, and the
//! endpoint experiments that produce report rows.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{carleson_ratio, certify_sparse, Field, Mesh, SparseReport, SparseViolation};
use crate::ops::{
    commutator_full, commutator_sparse_pair, lambda_grid, maximal_mw, superlevel, t_w, HilbertTransform,
    LAMBDA_RATIO,
};
use crate::orlicz::{bmo_norm, YoungFunction};
use crate::smallmat::{sym_eig, Matrix, Vector, MAX_DIM};
use crate::sparsekit::{build_sparse_family, StoppingTree};
use crate::weightlab::{
    a1_constant, ainf_sc, DirectionPlan, MatrixWeight, WeightConstants, DEFAULT_RH_C,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightSpec {
    Identity,
    /// `R(angle) diag(eigenvalues) R(angle)ᵀ`, the rotation acting on the
    /// first two coordinates.
    Constant {
        #[serde(default)]
        eigenvalues: Vec<f64>,
        #[serde(default)]
        angle: f64,
    },
    /// `diag(|x − center|^{−α_k})`, missing exponents taken as 0.
    DiagonalPower {
        exponents: Vec<f64>,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// `R(θ(x)) diag(|x − center|^{−alpha}, |x − center|^{−beta}, 1, …) R(θ(x))ᵀ`
    /// with `θ = 2π·turns·u + jump·⌊pieces·u⌋`, `u` the first coordinate
    /// over the side.
    RotatedDiagonal {
        alpha: f64,
        #[serde(default)]
        beta: f64,
        #[serde(default = "one")]
        turns: f64,
        #[serde(default)]
        pieces: u32,
        #[serde(default)]
        jump: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// `exp(S(x))` with independent symmetric `S(x)`, `‖S(x)‖ ≤ amplitude`.
    RandomLogBounded {
        amplitude: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn one() -> f64 {
    1.0
}

fn default_mass() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SignalSpec {
    /// Point mass: `mass / |cell|` times `direction` on the cell holding
    /// `position`.
    Spike {
        position: Vec<f64>,
        #[serde(default = "default_mass")]
        mass: f64,
        #[serde(default)]
        direction: Option<Vec<f64>>,
    },
    MultiSpike {
        count: usize,
        #[serde(default = "default_mass")]
        mass: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Tent `max(0, 1 − |x − center|/width)` times `direction`.
    Bump {
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        direction: Option<Vec<f64>>,
    },
    /// Heavy-tailed magnitudes `u^power` with random directions.
    Random {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_power")]
        power: i32,
    },
}

fn default_power() -> i32 {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SymbolSpec {
    /// `log |x − center|`.
    LogDistance {
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// Fractional part of `u / period`, `u` the first coordinate.
    Sawtooth { period: f64 },
    Constant { value: f64 },
}

/// Explicit λ range; the ratio between steps is always `2^{1/4}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSpec {
    pub lo: f64,
    pub hi: f64,
}

impl LambdaSpec {
    pub fn grid(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let l = self.lo * 2f64.powf(k as f64 / 4.0);
            if l > self.hi * (1.0 + 1e-12) {
                break;
            }
            out.push(l);
            k += 1;
        }
        out
    }
}

fn default_id() -> String {
    "exp".into()
}

fn default_side() -> f64 {
    1.0
}

fn default_c() -> f64 {
    DEFAULT_RH_C
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_id")]
    pub id: String,
    pub d: usize,
    #[serde(rename = "L")]
    pub depth: u32,
    #[serde(default = "default_side")]
    pub side: f64,
    pub n: usize,
    pub weight: WeightSpec,
    pub signal: SignalSpec,
    #[serde(default)]
    pub b: Option<SymbolSpec>,
    /// Rescale `b` to unit BMO norm (constants are left alone).
    #[serde(default = "default_true")]
    pub normalize_b: bool,
    #[serde(default)]
    pub lambda: Option<LambdaSpec>,
    /// Angle count for `n = 2`; the default plan otherwise.
    #[serde(default)]
    pub directions: Option<usize>,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Fallback seed for random generators without their own.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Record wall-clock time in `runtime_ms` (otherwise 0).
    #[serde(default)]
    pub timings: bool,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Vec<Self>> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| config_err(e.to_string()))?;
        let list = match v {
            serde_json::Value::Array(items) => items,
            other => vec![other],
        };
        list.into_iter()
            .map(|item| serde_json::from_value(item).map_err(|e| config_err(e.to_string())))
            .collect()
    }

    pub fn mesh(&self) -> Result<Mesh> {
        Mesh::new(self.d, self.depth, self.side).map_err(|e| config_err(e.to_string()))
    }

    fn point(&self, p: &Option<Vec<f64>>, what: &str) -> Result<[f64; 2]> {
        match p {
            None => Ok([self.side / 3.0; 2]),
            Some(v) => self.fixed_point(v, what),
        }
    }

    fn fixed_point(&self, v: &[f64], what: &str) -> Result<[f64; 2]> {
        if v.len() != self.d || v.iter().any(|x| !x.is_finite()) {
            return Err(config_err(format!("{what} needs {} finite coordinates", self.d)));
        }
        let mut p = [0.0; 2];
        p[..self.d].copy_from_slice(v);
        Ok(p)
    }

    fn direction(&self, v: &Option<Vec<f64>>) -> Result<Vector> {
        match v {
            None => Ok(Vector::from_slice(&vec![1.0 / (self.n as f64).sqrt(); self.n])),
            Some(v) => {
                if v.len() != self.n {
                    return Err(config_err(format!("direction needs {} coordinates", self.n)));
                }
                let e = Vector::from_slice(v);
                if !(e.norm() > 0.0) || !e.is_finite() {
                    return Err(config_err(format!("direction needs {} coordinates, not all zero", self.n)));
                }
                Ok(e.scale(1.0 / e.norm()))
            }
        }
    }

    fn seed_for(&self, own: Option<u64>, what: &str) -> Result<u64> {
        own.or(self.seed).ok_or_else(|| config_err(format!("{what} is random and needs a seed")))
    }

    pub fn validate(&self) -> Result<()> {
        self.mesh()?;
        if self.n == 0 || self.n > MAX_DIM {
            return Err(config_err(format!("n = {} must be in 1..={MAX_DIM}", self.n)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(config_err("c must be positive"));
        }
        let d = self.d as f64;
        match &self.weight {
            WeightSpec::Identity => {}
            WeightSpec::Constant { eigenvalues, angle } => {
                if !eigenvalues.is_empty() && eigenvalues.len() != self.n {
                    return Err(config_err("constant weight needs n eigenvalues"));
                }
                if eigenvalues.iter().any(|&e| !(e > 0.0 && e.is_finite())) || !angle.is_finite() {
                    return Err(config_err("constant weight eigenvalues must be positive"));
                }
            }
            WeightSpec::DiagonalPower { exponents, center } => {
                if exponents.len() > self.n || exponents.iter().any(|&a| !(0.0..d).contains(&a)) {
                    return Err(config_err(format!("power exponents must lie in [0, {d}), at most n of them")));
                }
                self.point(center, "center")?;
            }
            WeightSpec::RotatedDiagonal { alpha, beta, turns, jump, center, .. } => {
                if self.n < 2 {
                    return Err(config_err("rotated-diagonal needs n ≥ 2"));
                }
                if !(0.0..d).contains(alpha) || !(0.0..d).contains(beta) {
                    return Err(config_err(format!("alpha and beta must lie in [0, {d})")));
                }
                if !turns.is_finite() || !jump.is_finite() {
                    return Err(config_err("turns and jump must be finite"));
                }
                self.point(center, "center")?;
            }
            WeightSpec::RandomLogBounded { amplitude, seed } => {
                if !(*amplitude >= 0.0 && *amplitude <= 20.0) {
                    return Err(config_err("amplitude must lie in [0, 20]"));
                }
                self.seed_for(*seed, "random-log-bounded weight")?;
            }
        }
        match &self.signal {
            SignalSpec::Spike { position, mass, direction } => {
                self.fixed_point(position, "spike position")?;
                self.mesh()?.cell_at(position).map_err(|e| config_err(e.to_string()))?;
                if !(*mass > 0.0 && mass.is_finite()) {
                    return Err(config_err("mass must be positive"));
                }
                self.direction(direction)?;
            }
            SignalSpec::MultiSpike { count, mass, seed } => {
                if *count == 0 || !(*mass > 0.0 && mass.is_finite()) {
                    return Err(config_err("multi-spike needs a positive count and mass"));
                }
                self.seed_for(*seed, "multi-spike signal")?;
            }
            SignalSpec::Bump { center, width, direction } => {
                self.fixed_point(center, "bump center")?;
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(config_err("bump width must be positive"));
                }
                self.direction(direction)?;
            }
            SignalSpec::Random { seed, power } => {
                self.seed_for(*seed, "random signal")?;
                if !(0..=32).contains(power) {
                    return Err(config_err("power must lie in 0..=32"));
                }
            }
        }
        match &self.b {
            Some(SymbolSpec::LogDistance { center }) => {
                self.point(center, "b center")?;
            }
            Some(SymbolSpec::Sawtooth { period }) if !(*period > 0.0 && period.is_finite()) => {
                return Err(config_err("sawtooth period must be positive"));
            }
            Some(SymbolSpec::Constant { value }) if !value.is_finite() => {
                return Err(config_err("constant b must be finite"));
            }
            _ => {}
        }
        if let Some(l) = &self.lambda {
            if !(l.lo > 0.0 && l.hi >= l.lo && l.hi.is_finite()) {
                return Err(config_err("λ range needs 0 < lo ≤ hi"));
            }
        }
        if let Some(k) = self.directions {
            if self.n != 2 || k == 0 {
                return Err(config_err("a direction count applies to n = 2 only"));
            }
        }
        Ok(())
    }

    pub fn build_weight(&self) -> Result<MatrixWeight> {
        self.validate()?;
        let mesh = self.mesh()?;
        let n = self.n;
        let dist = |c: usize, p: &[f64; 2]| {
            let x = mesh.cell_midpoint(c);
            (0..self.d).map(|k| (x[k] - p[k]).powi(2)).sum::<f64>().sqrt()
        };
        let field = match &self.weight {
            WeightSpec::Identity => return Ok(MatrixWeight::identity(mesh, n)),
            WeightSpec::Constant { eigenvalues, angle } => {
                let ev = if eigenvalues.is_empty() { vec![1.0; n] } else { eigenvalues.clone() };
                Field::constant(mesh, rotate(&Matrix::diag(&ev), *angle))
            }
            WeightSpec::DiagonalPower { exponents, center } => {
                let p = self.point(center, "center")?;
                Field::from_fn(mesh, |c| {
                    let r = dist(c, &p);
                    let ev: Vec<f64> =
                        (0..n).map(|k| r.powf(-exponents.get(k).copied().unwrap_or(0.0))).collect();
                    Matrix::diag(&ev)
                })?
            }
            WeightSpec::RotatedDiagonal { alpha, beta, turns, pieces, jump, center } => {
                let p = self.point(center, "center")?;
                Field::from_fn(mesh, |c| {
                    let r = dist(c, &p);
                    let u = mesh.cell_midpoint(c)[0] / self.side;
                    let theta = 2.0 * PI * turns * u + jump * (*pieces as f64 * u).floor();
                    let mut ev = vec![1.0; n];
                    ev[0] = r.powf(-alpha);
                    ev[1] = r.powf(-beta);
                    rotate(&Matrix::diag(&ev), theta)
                })?
            }
            WeightSpec::RandomLogBounded { amplitude, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed_for(*seed, "weight")?);
                Field::from_fn(mesh, |_| {
                    let mut s = Matrix::zeros(n);
                    for i in 0..n {
                        for j in 0..=i {
                            let v = rng.gen_range(-1.0..1.0);
                            s[(i, j)] = v;
                            s[(j, i)] = v;
                        }
                    }
                    let eig = sym_eig(&s).expect("symmetric");
                    let top = eig.values.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                    let scale = amplitude * rng.gen_range(0.0..1.0) / top;
                    eig.reconstruct_with(|l| (l * scale).exp())
                })?
            }
        };
        MatrixWeight::new(field)
    }

    pub fn build_signal(&self) -> Result<Field<Vector>> {
        self.validate()?;
        let mesh = self.mesh()?;
        let n = self.n;
        match &self.signal {
            SignalSpec::Spike { position, mass, direction } => {
                let cell = mesh.cell_at(position)?;
                let v = self.direction(direction)?.scale(mass / mesh.cell_volume());
                Field::from_fn(mesh, |c| if c == cell { v } else { Vector::zeros(n) })
            }
            SignalSpec::MultiSpike { count, mass, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed_for(*seed, "signal")?);
                let mut values = vec![Vector::zeros(n); mesh.cell_count()];
                for _ in 0..*count {
                    let cell = rng.gen_range(0..mesh.cell_count());
                    let e = random_unit(&mut rng, n);
                    let v = &mut values[cell];
                    for k in 0..n {
                        v[k] += e[k] * mass / mesh.cell_volume();
                    }
                }
                Field::new(mesh, values)
            }
            SignalSpec::Bump { center, width, direction } => {
                let p = self.fixed_point(center, "bump center")?;
                let e = self.direction(direction)?;
                Field::from_fn(mesh, |c| {
                    let x = mesh.cell_midpoint(c);
                    let r = (0..self.d).map(|k| (x[k] - p[k]).powi(2)).sum::<f64>().sqrt();
                    e.scale((1.0 - r / width).max(0.0))
                })
            }
            SignalSpec::Random { seed, power } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed_for(*seed, "signal")?);
                Field::from_fn(mesh, |_| {
                    let m = rng.gen_range(0.0f64..1.0).powi(*power);
                    random_unit(&mut rng, n).scale(m)
                })
            }
        }
    }

    /// The symbol `b` and its dyadic BMO norm after optional normalization.
    pub fn build_symbol(&self) -> Result<(Field<f64>, f64)> {
        self.validate()?;
        let mesh = self.mesh()?;
        let spec = self.b.as_ref().ok_or_else(|| config_err("experiment needs a b spec"))?;
        let b = match spec {
            SymbolSpec::LogDistance { center } => {
                let p = self.point(center, "b center")?;
                Field::from_fn(mesh, |c| {
                    let x = mesh.cell_midpoint(c);
                    (0..self.d).map(|k| (x[k] - p[k]).powi(2)).sum::<f64>().sqrt().ln()
                })?
            }
            SymbolSpec::Sawtooth { period } => Field::from_fn(mesh, |c| {
                let u = mesh.cell_midpoint(c)[0] / period;
                u - u.floor()
            })?,
            SymbolSpec::Constant { value } => Field::constant(mesh, *value),
        };
        let norm = bmo_norm(&b);
        if self.normalize_b && norm > 0.0 {
            let b = b.scale(1.0 / norm);
            let norm = bmo_norm(&b);
            return Ok((b, norm));
        }
        Ok((b, norm))
    }

    pub fn plan(&self, w: &MatrixWeight) -> DirectionPlan {
        match self.directions {
            Some(k) if self.n == 2 => DirectionPlan::angles(k, 0.0),
            _ => DirectionPlan::for_weight(w),
        }
    }

    pub fn weight_id(&self) -> String {
        spec_id(&self.weight)
    }

    pub fn signal_id(&self) -> String {
        spec_id(&self.signal)
    }
}

fn rotate(m: &Matrix, theta: f64) -> Matrix {
    let n = m.dim();
    if n < 2 || theta == 0.0 {
        return *m;
    }
    let mut r = Matrix::identity(n);
    let (s, c) = theta.sin_cos();
    r[(0, 0)] = c;
    r[(0, 1)] = -s;
    r[(1, 0)] = s;
    r[(1, 1)] = c;
    r.matmul(m).matmul(&r.transpose())
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = Vector::from_slice(&v);
        let r = v.norm();
        if r > 1e-3 && r <= 1.0 {
            return v.scale(1.0 / r);
        }
    }
}

/// Compact comma-free label of a tagged spec: `kind(key=value;…)`.
fn spec_id(spec: &impl Serialize) -> String {
    let v = serde_json::to_value(spec).expect("spec serializes");
    let obj = v.as_object().expect("tagged spec");
    let kind = obj.get("kind").and_then(|k| k.as_str()).unwrap_or("?");
    let params: Vec<String> = obj
        .iter()
        .filter(|(k, v)| *k != "kind" && !v.is_null())
        .map(|(k, v)| format!("{k}={}", v.to_string().replace(',', " ")))
        .collect();
    if params.is_empty() {
        kind.to_string()
    } else {
        format!("{kind}({})", params.join(";"))
    }
}

/// One λ of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub weight_id: String,
    pub f_id: String,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub depth: u32,
    pub a1: f64,
    pub ainf_sc: f64,
    pub lambda: f64,
    pub lhs_measure: f64,
    pub rhs_bound: f64,
    pub ratio: f64,
    pub runtime_ms: f64,
}

/// Supremum of `ratio` over one experiment variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupRatio {
    pub experiment_id: String,
    pub sup_ratio: f64,
    pub lambda_at_sup: f64,
    /// Resolution of the λ grid: the true supremum is below
    /// `sup_ratio · lambda_ratio`.
    pub lambda_ratio: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<SupRatio>,
}

impl ExperimentReport {
    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
        self.summaries.extend(other.summaries);
    }

    pub fn summary(&self, experiment_id: &str) -> Option<&SupRatio> {
        self.summaries.iter().find(|s| s.experiment_id == experiment_id)
    }

    pub fn rows_of<'a>(&'a self, experiment_id: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.experiment_id == experiment_id)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_rows_csv(&self.rows, w)
    }
}

pub fn write_rows_csv(rows: &[ReportRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    // Keep the header even without rows.
    if rows.is_empty() {
        out.write_record([
            "experiment_id",
            "weight_id",
            "f_id",
            "n",
            "d",
            "L",
            "a1",
            "ainf_sc",
            "lambda",
            "lhs_measure",
            "rhs_bound",
            "ratio",
            "runtime_ms",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows_csv(r: impl std::io::Read) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// The two constants entering every endpoint bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EndpointConstants {
    pub a1: f64,
    pub ainf_sc: f64,
}

impl EndpointConstants {
    pub fn compute(cfg: &ExperimentConfig, w: &MatrixWeight) -> Result<Self> {
        Ok(Self { a1: a1_constant(w), ainf_sc: ainf_sc(w, &cfg.plan(w))?.0 })
    }

    /// `max(log(a1 + e), ainf_sc)`.
    pub fn log_factor(&self) -> f64 {
        (self.a1 + std::f64::consts::E).ln().max(self.ainf_sc)
    }
}

struct Context {
    cfg: ExperimentConfig,
    w: MatrixWeight,
    f: Field<Vector>,
    consts: EndpointConstants,
    l1: f64,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let w = cfg.build_weight()?;
        let f = cfg.build_signal()?;
        let consts = EndpointConstants::compute(cfg, &w)?;
        let l1 = f.magnitude().integral();
        if !(l1 > 0.0) {
            return Err(config_err("signal vanishes identically"));
        }
        Ok(Self { cfg: cfg.clone(), w, f, consts, l1 })
    }

    fn lambdas(&self, g: &Field<f64>) -> Vec<f64> {
        match &self.cfg.lambda {
            Some(l) => l.grid(),
            None => lambda_grid(self.l1, self.w.mesh().root_measure(), g.max()),
        }
    }

    /// Rows `|{g > λ}|` against `rhs(λ)`.
    fn rows(
        &self,
        id: String,
        g: &Field<f64>,
        lambdas: &[f64],
        rhs: impl Fn(f64) -> f64,
        runtime_ms: f64,
    ) -> Result<ExperimentReport> {
        let levels = superlevel(g, lambdas)?;
        let mut rows = Vec::with_capacity(lambdas.len());
        let mut best = SupRatio { experiment_id: id.clone(), sup_ratio: 0.0, lambda_at_sup: lambdas[0], lambda_ratio: LAMBDA_RATIO };
        for (&lambda, &lhs) in lambdas.iter().zip(&levels.measures) {
            let rhs_bound = rhs(lambda);
            if !(rhs_bound > 0.0) {
                return Err(Error::InvalidParameter(format!("rhs vanishes at λ = {lambda}")));
            }
            let ratio = lhs / rhs_bound;
            if ratio > best.sup_ratio {
                best.sup_ratio = ratio;
                best.lambda_at_sup = lambda;
            }
            rows.push(ReportRow {
                experiment_id: id.clone(),
                weight_id: self.cfg.weight_id(),
                f_id: self.cfg.signal_id(),
                n: self.cfg.n,
                d: self.cfg.d,
                depth: self.cfg.depth,
                a1: self.consts.a1,
                ainf_sc: self.consts.ainf_sc,
                lambda,
                lhs_measure: lhs,
                rhs_bound,
                ratio,
                runtime_ms,
            });
        }
        Ok(ExperimentReport { rows, summaries: vec![best] })
    }
}

fn elapsed(cfg: &ExperimentConfig, start: Instant) -> f64 {
    if cfg.timings {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

fn require_line(cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if cfg.d != 1 {
        return Err(config_err(format!("{what} uses the Hilbert transform and needs d = 1")));
    }
    Ok(())
}

/// `|{M_W f > λ}|` against `a1 · ainf_sc · ‖f‖₁ / λ`.
pub fn run_maximal_endpoint(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let ctx = Context::new(cfg)?;
    let m = maximal_mw(&ctx.w, &ctx.f)?;
    let k = ctx.consts.a1 * ctx.consts.ainf_sc * ctx.l1;
    let lambdas = ctx.lambdas(&m);
    ctx.rows(format!("{}/maximal", cfg.id), &m, &lambdas, |l| k / l, elapsed(cfg, start))
}

/// `|{|T_W f| > λ}|` for the Hilbert transform against
/// `a1 · ainf_sc · ‖f‖₁ / λ`.
pub fn run_czo_endpoint(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    require_line(cfg, "czo")?;
    let start = Instant::now();
    let ctx = Context::new(cfg)?;
    let t = t_w(&HilbertTransform, &ctx.w, &ctx.f)?.magnitude();
    let k = ctx.consts.a1 * ctx.consts.ainf_sc * ctx.l1;
    let lambdas = ctx.lambdas(&t);
    ctx.rows(format!("{}/czo", cfg.id), &t, &lambdas, |l| k / l, elapsed(cfg, start))
}

/// Sparse families of `f` over every grid.
pub fn families(w: &MatrixWeight, f: &Field<Vector>) -> Result<Vec<StoppingTree>> {
    (0..w.mesh().grid_count()).map(|g| build_sparse_family(w, f, g)).collect()
}

/// Commutator experiment. Variants, as suffixes of the experiment id:
///
/// * `full/phi`: `|C_{b,W}(H) f|` against `‖b‖ a1 K² ∫Φ(|f|/λ)`,
///   `K = max(log(a1 + e), ainf_sc)`;
/// * `full/phi-alt`: the same lhs against `‖b‖ a1 ainf_sc K ∫Φ(|f|/λ)`;
/// * `full/l1`: the same lhs against `‖b‖ a1 K² ‖f‖₁/λ`;
/// * `sparse/l1`: the sparse form summed over every grid's family against
///   `‖b‖ a1 ainf_sc K ‖f‖₁/λ`;
/// * `sparse-star/phi`: the starred sparse form against the `full/phi`
///   bound.
pub fn run_commutator_endpoint(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    require_line(cfg, "commutator")?;
    let start = Instant::now();
    let ctx = Context::new(cfg)?;
    let (b, bmo) = cfg.build_symbol()?;
    let mesh = *ctx.w.mesh();
    let full = commutator_full(&HilbertTransform, &ctx.w, &b, &ctx.f)?.magnitude();
    let mut plain = vec![0.0; mesh.cell_count()];
    let mut star = vec![0.0; mesh.cell_count()];
    for t in families(&ctx.w, &ctx.f)? {
        let (p, s) = commutator_sparse_pair(&t.family, &ctx.w, &b, &ctx.f)?;
        for c in 0..mesh.cell_count() {
            plain[c] += p.values()[c];
            star[c] += s.values()[c];
        }
    }
    let plain = Field::new(mesh, plain)?;
    let star = Field::new(mesh, star)?;
    let runtime = elapsed(cfg, start);
    // A constant symbol has zero BMO norm; the bounds then use 1 so that
    // rows stay finite while the left sides vanish.
    let scale = if bmo > 0.0 { bmo } else { 1.0 };
    let a1 = ctx.consts.a1;
    let kf = ctx.consts.log_factor();
    let fmag = ctx.f.magnitude();
    let phi_integral = |l: f64| {
        fmag.values().iter().map(|v| YoungFunction::Phi.eval(v / l)).sum::<f64>() * mesh.cell_volume()
    };
    let lambdas = match &cfg.lambda {
        Some(l) => l.grid(),
        None => lambda_grid(ctx.l1, mesh.root_measure(), full.max().max(star.max()).max(plain.max())),
    };
    let id = &cfg.id;
    let l1 = ctx.l1;
    let ainf = ctx.consts.ainf_sc;
    let mut report = ctx.rows(format!("{id}/full/phi"), &full, &lambdas, |l| scale * a1 * kf * kf * phi_integral(l), runtime)?;
    report.extend(ctx.rows(format!("{id}/full/phi-alt"), &full, &lambdas, |l| scale * a1 * ainf * kf * phi_integral(l), runtime)?);
    report.extend(ctx.rows(format!("{id}/full/l1"), &full, &lambdas, |l| scale * a1 * kf * kf * l1 / l, runtime)?);
    report.extend(ctx.rows(format!("{id}/sparse/l1"), &plain, &lambdas, |l| scale * a1 * ainf * kf * l1 / l, runtime)?);
    report.extend(ctx.rows(format!("{id}/sparse-star/phi"), &star, &lambdas, |l| scale * a1 * kf * kf * phi_integral(l), runtime)?);
    Ok(report)
}

/// Cross-inequality margins of a constants audit; each is nonnegative when
/// the corresponding inequality holds.
#[derive(Clone, Debug, Serialize)]
pub struct AuditMargins {
    /// `a1 − max_e [w_e]_{A₁}`.
    pub direction_a1: f64,
    /// `a1 − a1_red`.
    pub reducing_below: f64,
    /// `2 · spread · a1_red − a1`.
    pub reducing_above: f64,
    /// `ainf_sc / a1`, the recorded comparability constant.
    pub ainf_over_a1: f64,
    /// `2 − reverse Hölder maximum`.
    pub reverse_holder: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstantsAudit {
    pub experiment_id: String,
    pub weight_id: String,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub depth: u32,
    pub constants: WeightConstants,
    pub margins: AuditMargins,
    pub runtime_ms: f64,
}

impl ConstantsAudit {
    /// Scalar fields in report order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let c = &self.constants;
        let m = &self.margins;
        vec![
            ("a1", c.a1),
            ("a1_red", c.a1_red),
            ("ainf_sc", c.ainf_sc),
            ("q", c.q),
            ("r", c.r),
            ("reducing_spread", c.reducing_spread),
            ("reverse_holder_max", c.reverse_holder_max),
            ("max_direction_a1", c.max_direction_a1()),
            ("margin_direction_a1", m.direction_a1),
            ("margin_reducing_below", m.reducing_below),
            ("margin_reducing_above", m.reducing_above),
            ("ainf_over_a1", m.ainf_over_a1),
            ("margin_reverse_holder", m.reverse_holder),
            ("runtime_ms", self.runtime_ms),
        ]
    }

    /// Violated proven inequalities: direction constants below `a1`, and
    /// `a1_red ≤ a1 ≤ 2 · spread · a1_red`. Reducing matrices are certified
    /// on sampled directions only, so `a1_red` gets the `delta_dir` slack.
    pub fn violations(&self) -> Vec<String> {
        let tol = 1e-9 * self.constants.a1;
        let mut out = Vec::new();
        if self.margins.direction_a1 < -tol {
            out.push(format!("direction constant exceeds a1 by {:e}", -self.margins.direction_a1));
        }
        if self.margins.reducing_below < -self.constants.delta_dir * self.constants.a1 {
            out.push(format!("a1_red exceeds a1 by {:e}", -self.margins.reducing_below));
        }
        if self.margins.reducing_above < -tol {
            let x = &self.constants.a1_argmax;
            out.push(format!("a1 = {} at cube {:?} cell {} exceeds 2·spread·a1_red", x.value, x.cube, x.cell));
        }
        out
    }
}

/// `experiment_id,name,value` lines for several audits.
pub fn write_audits_csv(audits: &[ConstantsAudit], mut w: impl Write) -> Result<()> {
    writeln!(w, "experiment_id,name,value")?;
    for a in audits {
        for (k, v) in a.entries() {
            writeln!(w, "{},{k},{v:?}", a.experiment_id)?;
        }
    }
    Ok(())
}

pub fn run_constants_audit(cfg: &ExperimentConfig) -> Result<ConstantsAudit> {
    let start = Instant::now();
    let w = cfg.build_weight()?;
    let constants = WeightConstants::compute(&w, cfg.c)?;
    let margins = AuditMargins {
        direction_a1: constants.a1 - constants.max_direction_a1(),
        reducing_below: constants.a1 - constants.a1_red,
        reducing_above: 2.0 * constants.reducing_spread * constants.a1_red - constants.a1,
        ainf_over_a1: constants.ainf_sc / constants.a1,
        reverse_holder: 2.0 - constants.reverse_holder_max,
    };
    Ok(ConstantsAudit {
        experiment_id: format!("{}/constants", cfg.id),
        weight_id: cfg.weight_id(),
        n: cfg.n,
        d: cfg.d,
        depth: cfg.depth,
        constants,
        margins,
        runtime_ms: elapsed(cfg, start),
    })
}

/// Certification of the stopping family on one grid.
#[derive(Clone, Debug, Serialize)]
pub struct FamilyCertificate {
    pub grid: usize,
    pub members: usize,
    pub sparse: SparseReport,
    /// `(covered cells, cube cells)` of the worst Carleson ratio.
    pub carleson: Option<(u64, u64)>,
    pub carleson_ok: bool,
    /// Largest `M_W^{D} f − 2 T_S f` over cells, and where.
    pub domination_gap: f64,
    pub domination_cell: usize,
    pub domination_ok: bool,
    /// First failed check, naming the cube and cell.
    pub first_violation: Option<String>,
}

impl FamilyCertificate {
    pub fn ok(&self) -> bool {
        self.sparse.ok && self.carleson_ok && self.domination_ok
    }
}

fn describe(tree: &StoppingTree, v: &SparseViolation) -> String {
    let cube = |i: usize| tree.family.members[i].cube;
    match v {
        SparseViolation::OutsideCube { member, cell } => {
            format!("E set of {:?} holds cell {cell} outside the cube", cube(*member))
        }
        SparseViolation::Overlap { first, second, cell } => {
            format!("E sets of {:?} and {:?} share cell {cell}", cube(*first), cube(*second))
        }
        SparseViolation::TooSmall { member, e_cells, q_cells } => {
            format!("{:?}: |E| = {e_cells} cells < |Q|/2 = {q_cells}/2", cube(*member))
        }
    }
}

/// Builds and certifies the stopping family on every grid: `1/2`-sparse,
/// Carleson constant at most 2, and `M_W^D f ≤ 2 T_S f` up to
/// `1e-9 ‖f‖₁ / |root|`.
pub fn certify_families(w: &MatrixWeight, f: &Field<Vector>) -> Result<Vec<FamilyCertificate>> {
    let mesh = *w.mesh();
    let slack = 1e-9 * f.magnitude().integral() / mesh.root_measure();
    let mut out = Vec::new();
    for grid in 0..mesh.grid_count() {
        let t = build_sparse_family(w, f, grid)?;
        let sparse = certify_sparse(&t.family, 0.5);
        let ratio = carleson_ratio(&t.family);
        let carleson_ok = ratio.as_ref().is_none_or(|r| r.at_most(2, 1));
        let s = crate::ops::sparse_matrix_op(&t.family, w, f)?;
        let m = crate::ops::maximal_mw_grid(w, f, grid)?;
        let (mut gap, mut cell) = (f64::NEG_INFINITY, 0);
        for c in 0..mesh.cell_count() {
            let g = m.values()[c] - 2.0 * s.values()[c];
            if g > gap {
                gap = g;
                cell = c;
            }
        }
        let first_violation = if let Some(v) = sparse.violations.first() {
            Some(describe(&t, v))
        } else if !carleson_ok {
            ratio.as_ref().map(|r| {
                format!("Carleson: {:?} has {} descendant cells over {}", t.family.members[r.member].cube, r.covered_cells, r.cube_cells)
            })
        } else if gap > slack {
            Some(format!("domination: cell {cell} has M − 2T = {gap:e}"))
        } else {
            None
        };
        out.push(FamilyCertificate {
            grid,
            members: t.family.len(),
            sparse,
            carleson: ratio.map(|r| (r.covered_cells, r.cube_cells)),
            carleson_ok,
            domination_gap: gap,
            domination_cell: cell,
            domination_ok: gap <= slack,
            first_violation,
        });
    }
    Ok(out)
}

/// Twenty `(W, f)` pairs mixing every generator, in `d = 1` at depth
/// `depth1` and `d = 2` at depth `depth2`.
pub fn default_suite(depth1: u32, depth2: u32) -> Vec<ExperimentConfig> {
    let base = |id: &str, d: usize, n: usize, weight: WeightSpec, signal: SignalSpec| ExperimentConfig {
        id: id.into(),
        d,
        depth: if d == 1 { depth1 } else { depth2 },
        side: 1.0,
        n,
        weight,
        signal,
        b: None,
        normalize_b: true,
        lambda: None,
        directions: None,
        c: DEFAULT_RH_C,
        seed: Some(7),
        timings: false,
    };
    let rot = |alpha: f64, pieces: u32| WeightSpec::RotatedDiagonal {
        alpha,
        beta: 0.0,
        turns: 1.0,
        pieces,
        jump: 0.7,
        center: None,
    };
    let random = |seed: u64| SignalSpec::Random { seed: Some(seed), power: 4 };
    let spike1 = SignalSpec::Spike { position: vec![0.7], mass: 1.0, direction: None };
    let spike2 = SignalSpec::Spike { position: vec![0.2, 0.6], mass: 1.0, direction: None };
    let multi = |seed: u64| SignalSpec::MultiSpike { count: 5, mass: 1.0, seed: Some(seed) };
    let bump1 = SignalSpec::Bump { center: vec![0.4], width: 0.2, direction: None };
    let bump2 = SignalSpec::Bump { center: vec![0.5, 0.5], width: 0.3, direction: None };
    vec![
        base("s01", 1, 1, WeightSpec::Identity, random(1)),
        base("s02", 1, 2, WeightSpec::Identity, spike1.clone()),
        base("s03", 1, 2, WeightSpec::Constant { eigenvalues: vec![4.0, 0.25], angle: 0.3 }, random(2)),
        base("s04", 1, 1, WeightSpec::DiagonalPower { exponents: vec![0.5], center: None }, random(3)),
        base("s05", 1, 2, WeightSpec::DiagonalPower { exponents: vec![0.3, 0.7], center: None }, multi(4)),
        base("s06", 1, 2, rot(0.5, 0), random(5)),
        base("s07", 1, 2, rot(0.8, 3), spike1.clone()),
        base("s08", 1, 2, rot(0.9, 5), bump1.clone()),
        base("s09", 1, 3, rot(0.6, 2), random(6)),
        base("s10", 1, 2, WeightSpec::RandomLogBounded { amplitude: 1.0, seed: Some(8) }, random(7)),
        base("s11", 1, 3, WeightSpec::RandomLogBounded { amplitude: 0.7, seed: Some(9) }, multi(10)),
        base("s12", 1, 1, WeightSpec::RandomLogBounded { amplitude: 1.5, seed: Some(11) }, bump1),
        base("s13", 1, 2, rot(0.3, 7), multi(12)),
        base("s14", 1, 2, WeightSpec::RandomLogBounded { amplitude: 2.0, seed: Some(13) }, spike1),
        base("s15", 2, 1, WeightSpec::Identity, random(14)),
        base("s16", 2, 2, rot(1.2, 2), random(15)),
        base("s17", 2, 2, WeightSpec::DiagonalPower { exponents: vec![1.0, 0.5], center: None }, spike2),
        base("s18", 2, 2, WeightSpec::RandomLogBounded { amplitude: 1.0, seed: Some(16) }, bump2),
        base("s19", 2, 3, rot(0.8, 1), multi(17)),
        base("s20", 2, 2, WeightSpec::Constant { eigenvalues: vec![9.0, 1.0], angle: 1.0 }, random(18)),
    ]
}
