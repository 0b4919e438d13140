//! Built-in smoke checks, one `PASS`/`FAIL` line each.

use std::io::Write;

use mwlab::bench::{
    certify_families, default_suite, run_constants_audit, run_maximal_endpoint, ExperimentConfig, SignalSpec,
    WeightSpec,
};
use mwlab::mesh::{Field, Mesh};
use mwlab::ops::hilbert_transform;
use mwlab::orlicz::{luxemburg_values, YoungFunction};

use crate::Failure;

type Check = fn() -> mwlab::Result<Option<String>>;

/// Runs every check and returns the names of those that failed.
pub fn run(out: &mut dyn Write) -> Result<Vec<String>, Failure> {
    let checks: [(&str, Check); 5] = [
        ("identity-constants", identity_constants),
        ("sparse-certificates", sparse_certificates),
        ("luxemburg-constants", luxemburg_constants),
        ("hilbert-skew", hilbert_skew),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(None) => writeln!(out, "PASS {name}")?,
            Ok(Some(detail)) => {
                writeln!(out, "FAIL {name}: {detail}")?;
                failed.push(format!("{name}: {detail}"));
            }
            Err(e) => {
                writeln!(out, "FAIL {name}: {e}")?;
                failed.push(format!("{name}: {e}"));
            }
        }
    }
    Ok(failed)
}

fn identity_config() -> ExperimentConfig {
    let mut cfg = default_suite(8, 4).remove(0);
    cfg.id = "identity".into();
    cfg.n = 2;
    cfg.weight = WeightSpec::Identity;
    cfg.signal = SignalSpec::Spike { position: vec![0.3], mass: 1.0, direction: None };
    cfg
}

fn identity_constants() -> mwlab::Result<Option<String>> {
    let a = run_constants_audit(&identity_config())?;
    let c = &a.constants;
    let off = [c.a1, c.a1_red, c.ainf_sc].iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    Ok((off > 1e-12).then(|| format!("a1 = {}, a1_red = {}, ainf_sc = {}", c.a1, c.a1_red, c.ainf_sc)))
}

fn sparse_certificates() -> mwlab::Result<Option<String>> {
    for cfg in default_suite(7, 3).iter().step_by(4) {
        let w = cfg.build_weight()?;
        let f = cfg.build_signal()?;
        for c in certify_families(&w, &f)? {
            if let Some(v) = c.first_violation {
                return Ok(Some(format!("{} grid {}: {v}", cfg.id, c.grid)));
            }
        }
    }
    Ok(None)
}

fn luxemburg_constants() -> mwlab::Result<Option<String>> {
    let ones = [1.0; 8];
    let pairs = [
        (luxemburg_values(&ones, YoungFunction::PhiBar)?, 1.0 / std::f64::consts::LN_2),
        (luxemburg_values(&ones, YoungFunction::Phi)?, 1.0 / YoungFunction::Phi.inverse(1.0)),
    ];
    for (got, want) in pairs {
        if (got - want).abs() > 1e-10 * want {
            return Ok(Some(format!("norm {got} against {want}")));
        }
    }
    Ok(None)
}

fn hilbert_skew() -> mwlab::Result<Option<String>> {
    let mesh = Mesh::new(1, 8, 1.0)?;
    let f = Field::from_fn(mesh, |c| ((c * 7919) % 101) as f64 - 50.0)?;
    let g = Field::from_fn(mesh, |c| ((c * 104_729) % 89) as f64 - 44.0)?;
    let (hf, hg) = (hilbert_transform(&f)?, hilbert_transform(&g)?);
    let dot = |a: &Field<f64>, b: &Field<f64>| a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum::<f64>();
    let (lhs, rhs) = (dot(&hf, &g), -dot(&f, &hg));
    Ok(((lhs - rhs).abs() > 1e-9 * lhs.abs().max(1.0)).then(|| format!("<Hf, g> = {lhs}, -<f, Hg> = {rhs}")))
}

fn determinism() -> mwlab::Result<Option<String>> {
    let cfg = &default_suite(9, 4)[3];
    let a = run_maximal_endpoint(cfg)?;
    let b = run_maximal_endpoint(cfg)?;
    Ok((a.rows != b.rows).then(|| format!("{}: rows differ between runs", cfg.id)))
}
