//! Spectral norms, empirical Lipschitz probes, the composition bound and
//! finite-difference gradient checks.
//!
//! Empirical estimates are maxima of `‖f(x+δ) − f(x)‖ / ‖δ‖` over sampled
//! pairs and therefore lower bounds of the true constant. They are compared
//! against declared upper bounds and must never exceed them.
//!
//! Path probes push each pair through a branch stage by stage. Writing
//! `r_k` for the stage-k difference ratio, the end-to-end ratio is exactly
//! `Π r_k ≤ Π max r_k`, so using the measured maxima as constants for the
//! unprojected stages yields a composed bound that dominates the end-to-end
//! estimate up to rounding.

use std::fmt::Write as _;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

pub use crate::spectral::{power_iteration, PowerEstimate};

use crate::autograd::{Graph, Var};
use crate::ensemble::{BranchId, Model};
use crate::error::{LelError, Result};
use crate::params::{ParamId, ParamStore};

/// Batched map over axis 0, one stage of a branch.
/// Map probed by the verifier.
/// Objective for gradient checks: value and the clamp activity pattern.
pub type EvalFn<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<bool>)> + 'a;

pub type StageFn<'a> = Box<dyn Fn(&ArrayD<f64>) -> Result<ArrayD<f64>> + 'a>;

pub struct Stage<'a> {
    pub name: String,
    /// Declared constant; `None` means the stage is measured.
    pub declared: Option<f64>,
    pub apply: StageFn<'a>,
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// Pairs per scale.
    pub n_pairs: usize,
    /// Perturbation norms relative to the base point's norm.
    pub scales: Vec<f64>,
    pub seed: u64,
    /// Pairs evaluated per call of the probed map.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_pairs: 1000,
            scales: vec![1e-3, 1e-2, 1e-1],
            seed: 0,
            chunk: 250,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub probes: usize,
    /// Scale at which the maximum ratio occurred.
    pub worst_scale: f64,
}

fn sample_norm(a: &ArrayD<f64>, i: usize) -> f64 {
    a.index_axis(Axis(0), i).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diff_norm(a: &ArrayD<f64>, i: usize, b: &ArrayD<f64>, j: usize) -> f64 {
    a.index_axis(Axis(0), i)
        .iter()
        .zip(b.index_axis(Axis(0), j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_finite(out: &ArrayD<f64>, what: &str, first_index: usize) -> Result<()> {
    for (i, row) in out.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(LelError::numeric(
                what.to_string(),
                format!("non-finite output for probe input {}", first_index + i),
            ));
        }
    }
    Ok(())
}

/// Perturbed copies of pool rows: returns `(base indices, perturbed batch, ‖δ‖)`.
fn perturb_chunk(
    pool: &ArrayD<f64>,
    start: usize,
    len: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, ArrayD<f64>, Vec<f64>) {
    let m = pool.shape()[0];
    let mut shape = pool.shape().to_vec();
    shape[0] = len;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let mut idx = Vec::with_capacity(len);
    let mut norms = Vec::with_capacity(len);
    for i in 0..len {
        let j = (start + i) % m;
        idx.push(j);
        let base = pool.index_axis(Axis(0), j);
        let d: Vec<f64> = (0..base.len()).map(|_| StandardNormal.sample(rng)).collect();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn = sample_norm(pool, j);
        let target = if bn > 0.0 {
            scale * bn
        } else {
            scale * (base.len() as f64).sqrt()
        };
        let mut slot = out.index_axis_mut(Axis(0), i);
        for ((o, &b), &dv) in slot.iter_mut().zip(base.iter()).zip(d.iter()) {
            *o = b + dv * target / dn;
        }
        // the realized perturbation after rounding
        norms.push(diff_norm(&out, i, pool, j));
    }
    (idx, out, norms)
}

/// Maximum difference ratio of `f` over random-direction pairs around the
/// rows of `pool` (`[M × …]`), `n_pairs` per scale.
pub fn empirical_lipschitz(
    f: &dyn Fn(&ArrayD<f64>) -> Result<ArrayD<f64>>,
    pool: &ArrayD<f64>,
    cfg: &ProbeConfig,
) -> Result<LipschitzEstimate> {
    if pool.shape().first().copied().unwrap_or(0) == 0 {
        return Err(LelError::Contract("empty probe pool".into()));
    }
    let base = f(pool)?;
    check_finite(&base, "empirical_lipschitz base", 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = LipschitzEstimate {
        value: 0.0,
        probes: 0,
        worst_scale: cfg.scales.first().copied().unwrap_or(0.0),
    };
    for &scale in &cfg.scales {
        let mut done = 0;
        while done < cfg.n_pairs {
            let len = cfg.chunk.min(cfg.n_pairs - done);
            let (idx, xp, dn) = perturb_chunk(pool, done, len, scale, &mut rng);
            let yp = f(&xp)?;
            check_finite(&yp, "empirical_lipschitz", done)?;
            for i in 0..len {
                if dn[i] > 0.0 {
                    let r = diff_norm(&yp, i, &base, idx[i]) / dn[i];
                    if r > best.value {
                        best.value = r;
                        best.worst_scale = scale;
                    }
                }
            }
            best.probes += len;
            done += len;
        }
    }
    Ok(best)
}

/// Product of the constants along a path; every entry must be declared.
pub fn compose_bound(path: &[(String, Option<f64>)]) -> Result<f64> {
    path.iter().try_fold(1.0, |acc, (name, c)| match c {
        Some(v) => Ok(acc * v),
        None => Err(LelError::Contract(format!(
            "module {name} declares no Lipschitz constant"
        ))),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub name: String,
    pub declared: Option<f64>,
    /// Maximum per-stage ratio observed along the path.
    pub measured: f64,
    /// Constant used in the composed bound.
    pub used: f64,
    pub label: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathReport {
    pub path: String,
    pub stages: Vec<StageReport>,
    pub end_to_end: f64,
    pub bound: f64,
    pub probes: usize,
    pub pass: bool,
}

/// Stage-by-stage probe of a composed path.
pub fn probe_path(
    path: &str,
    stages: &[Stage<'_>],
    pool: &ArrayD<f64>,
    cfg: &ProbeConfig,
    tol: f64,
) -> Result<PathReport> {
    let n = stages.len();
    let mut base = vec![pool.clone()];
    for st in stages {
        let y = (st.apply)(base.last().unwrap())?;
        check_finite(&y, &st.name, 0)?;
        base.push(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stage_max = vec![0.0f64; n];
    let mut end_max = 0.0f64;
    let mut probes = 0;
    for &scale in &cfg.scales {
        let mut done = 0;
        while done < cfg.n_pairs {
            let len = cfg.chunk.min(cfg.n_pairs - done);
            let (idx, xp, dn0) = perturb_chunk(pool, done, len, scale, &mut rng);
            let mut prev = dn0.clone();
            let mut h = xp;
            for (k, st) in stages.iter().enumerate() {
                h = (st.apply)(&h)?;
                check_finite(&h, &st.name, done)?;
                for i in 0..len {
                    let d = diff_norm(&h, i, &base[k + 1], idx[i]);
                    if prev[i] > 0.0 {
                        stage_max[k] = stage_max[k].max(d / prev[i]);
                    }
                    prev[i] = d;
                }
            }
            for i in 0..len {
                if dn0[i] > 0.0 {
                    end_max = end_max.max(prev[i] / dn0[i]);
                }
            }
            probes += len;
            done += len;
        }
    }
    let mut reports = Vec::with_capacity(n);
    let mut pass = true;
    for (k, st) in stages.iter().enumerate() {
        let (used, label) = match st.declared {
            Some(d) => {
                if stage_max[k] > d * (1.0 + tol) {
                    pass = false;
                }
                (d, "declared")
            }
            None => (stage_max[k], "measured"),
        };
        reports.push(StageReport {
            name: st.name.clone(),
            declared: st.declared,
            measured: stage_max[k],
            used,
            label,
        });
    }
    let bound = compose_bound(
        &reports
            .iter()
            .map(|r| (r.name.clone(), Some(r.used)))
            .collect::<Vec<_>>(),
    )?;
    pass &= end_max <= bound * (1.0 + tol);
    Ok(PathReport {
        path: path.to_string(),
        stages: reports,
        end_to_end: end_max,
        bound,
        probes,
        pass,
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates (chosen deterministically).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_residual: f64,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within `10·h`.
    pub excluded: usize,
    pub pass: bool,
}

fn pick_coords(n: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < n => rand::seq::index::sample(rng, n, m).into_vec(),
        _ => (0..n).collect(),
    }
}

/// Shared core: `eval(x) -> (φ(x), kink pattern)` against an analytic
/// gradient of `φ` at `x0`.
fn check_coords(
    name: &str,
    x0: &[f64],
    analytic: &[f64],
    coords: &[usize],
    cfg: &GradCheckConfig,
    eval: &mut EvalFn<'_>,
) -> Result<GradCheckReport> {
    let (_, base_pattern) = eval(x0)?;
    let mut x = x0.to_vec();
    let mut rows = Vec::new();
    let mut excluded = 0;
    for &i in coords {
        let mut at = |v: f64, x: &mut Vec<f64>| -> Result<(f64, Vec<bool>)> {
            x[i] = x0[i] + v;
            let r = eval(x);
            x[i] = x0[i];
            r
        };
        let (fp, pp) = at(cfg.h, &mut x)?;
        let (fm, pm) = at(-cfg.h, &mut x)?;
        let (_, pfp) = at(10.0 * cfg.h, &mut x)?;
        let (_, pfm) = at(-10.0 * cfg.h, &mut x)?;
        if [&pp, &pm, &pfp, &pfm].iter().any(|p| **p != base_pattern) {
            excluded += 1;
            continue;
        }
        rows.push((analytic[i], (fp - fm) / (2.0 * cfg.h)));
    }
    let scale = rows.iter().map(|(_, n)| n.abs()).fold(0.0, f64::max);
    let max_residual = rows
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale).max(1e-7))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        max_residual,
        checked: rows.len(),
        excluded,
        pass: max_residual < cfg.tol,
    })
}

fn projection(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
}

fn weighted_sum(y: &ArrayD<f64>, r: &ArrayD<f64>) -> f64 {
    y.iter().zip(r.iter()).map(|(a, b)| a * b).sum()
}

/// Central-difference check of the gradient of `⟨r, f(x)⟩` with respect to
/// the input `x`, for a fixed random projection `r`.
pub fn grad_check(
    name: &str,
    f: &dyn Fn(&mut Graph, Var) -> Result<Var>,
    x: &ArrayD<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut g = Graph::with_kink_tracking();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    let r = projection(g.shape(y), cfg.seed);
    let grads = g.backward(y, Some(r.clone()));
    let analytic: Vec<f64> = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
        .iter()
        .copied()
        .collect();
    let shape = x.shape().to_vec();
    let mut eval = |v: &[f64]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::with_kink_tracking();
        let xv = g.constant(ArrayD::from_shape_vec(IxDyn(&shape), v.to_vec()).unwrap());
        let y = f(&mut g, xv)?;
        Ok((weighted_sum(g.value(y), &r), g.kink_pattern().unwrap().to_vec()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = pick_coords(x.len(), cfg.max_coords, &mut rng);
    let x0: Vec<f64> = x.iter().copied().collect();
    check_coords(name, &x0, &analytic, &coords, cfg, &mut eval)
}

/// Like [`grad_check`] but with respect to the stored parameters `ids`.
pub fn grad_check_params(
    name: &str,
    f: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>,
    store: &ParamStore,
    ids: &[ParamId],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut g = Graph::with_kink_tracking();
    let y = f(&mut g, store)?;
    let r = projection(g.shape(y), cfg.seed);
    let grads = g.backward(y, Some(r.clone())).params(&g);
    let mut analytic = Vec::new();
    let mut x0 = Vec::new();
    let mut layout = Vec::new();
    for &id in ids {
        let gv = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, a)| a.clone())
            .unwrap_or_else(|| ArrayD::zeros(store.value(id).raw_dim()));
        layout.push((id, x0.len(), store.value(id).len()));
        analytic.extend(gv.iter().copied());
        x0.extend(store.value(id).iter().copied());
    }
    let mut work = store.clone();
    let mut eval = |v: &[f64]| -> Result<(f64, Vec<bool>)> {
        for &(id, off, len) in &layout {
            let dst = work.value_mut(id);
            for (d, s) in dst.iter_mut().zip(&v[off..off + len]) {
                *d = *s;
            }
        }
        let mut g = Graph::with_kink_tracking();
        let y = f(&mut g, &work)?;
        Ok((weighted_sum(g.value(y), &r), g.kink_pattern().unwrap().to_vec()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = pick_coords(x0.len(), cfg.max_coords, &mut rng);
    check_coords(name, &x0, &analytic, &coords, cfg, &mut eval)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleCheck {
    pub name: String,
    pub declared: Option<f64>,
    pub empirical: f64,
    pub margin: Option<f64>,
    pub probes: usize,
    pub label: &'static str,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub sigma: f64,
    /// `None` for weights that are reported but not constrained.
    pub bound: Option<f64>,
    pub converged: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerificationReport {
    pub weights: Vec<WeightCheck>,
    pub modules: Vec<ModuleCheck>,
    pub paths: Vec<PathReport>,
    pub grad_checks: Vec<GradCheckReport>,
    /// Maximum composed bound over branches (the fused output is a convex
    /// combination of branch outputs).
    pub fused_bound: f64,
}

impl VerificationReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for w in self.weights.iter().filter(|w| !w.pass) {
            out.push(format!("weight {}: σ_max {} > {:?}", w.name, w.sigma, w.bound));
        }
        for m in self.modules.iter().filter(|m| !m.pass) {
            out.push(format!(
                "module {}: L̂ {} > declared {:?}",
                m.name, m.empirical, m.declared
            ));
        }
        for p in self.paths.iter().filter(|p| !p.pass) {
            out.push(format!("path {}: L̂ {} vs bound {}", p.path, p.end_to_end, p.bound));
        }
        for g in self.grad_checks.iter().filter(|g| !g.pass) {
            out.push(format!("gradient {}: residual {:e}", g.name, g.max_residual));
        }
        out
    }

    pub fn pass(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<44} {:>12} {:>12} {:>8}",
            "weight", "sigma_max", "bound", "status"
        );
        for w in &self.weights {
            let bound = w.bound.map_or("-".to_string(), |b| format!("{b:.6}"));
            let _ = writeln!(
                s,
                "{:<44} {:>12.8} {:>12} {:>8}",
                w.name,
                w.sigma,
                bound,
                status(w.pass)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<44} {:>12} {:>12} {:>9} {:>8}",
            "module", "declared", "empirical", "label", "status"
        );
        for m in &self.modules {
            let d = m.declared.map_or("-".to_string(), |d| format!("{d:.6}"));
            let _ = writeln!(
                s,
                "{:<44} {:>12} {:>12.6} {:>9} {:>8}",
                m.name,
                d,
                m.empirical,
                m.label,
                status(m.pass)
            );
        }
        for p in &self.paths {
            let _ = writeln!(s);
            let _ = writeln!(s, "path {} ({} probes)", p.path, p.probes);
            for st in &p.stages {
                let _ = writeln!(
                    s,
                    "  {:<42} {:>9} used {:>12.6} measured {:>12.6}",
                    st.name, st.label, st.used, st.measured
                );
            }
            let _ = writeln!(
                s,
                "  end-to-end L̂ {:.6} <= bound {:.6}  {}",
                p.end_to_end,
                p.bound,
                status(p.pass)
            );
        }
        if !self.grad_checks.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "{:<44} {:>12} {:>8} {:>8} {:>8}",
                "gradient check", "max_resid", "checked", "excluded", "status"
            );
            for g in &self.grad_checks {
                let _ = writeln!(
                    s,
                    "{:<44} {:>12.3e} {:>8} {:>8} {:>8}",
                    g.name,
                    g.max_residual,
                    g.checked,
                    g.excluded,
                    status(g.pass)
                );
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "fused bound {:.6}; overall {}",
            self.fused_bound,
            status(self.pass())
        );
        s
    }

    /// One JSON object per line, tagged by `kind`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        let mut push = |kind: &str, v: serde_json::Value| {
            let mut obj = serde_json::Map::new();
            obj.insert("kind".into(), kind.into());
            if let serde_json::Value::Object(m) = v {
                obj.extend(m);
            }
            s.push_str(&serde_json::Value::Object(obj).to_string());
            s.push('\n');
        };
        for w in &self.weights {
            push("weight", serde_json::to_value(w).unwrap());
        }
        for m in &self.modules {
            push("module", serde_json::to_value(m).unwrap());
        }
        for p in &self.paths {
            push("path", serde_json::to_value(p).unwrap());
        }
        for g in &self.grad_checks {
            push("grad_check", serde_json::to_value(g).unwrap());
        }
        push(
            "summary",
            serde_json::json!({"fused_bound": self.fused_bound, "pass": self.pass()}),
        );
        s
    }
}

fn status(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub probe: ProbeConfig,
    pub power_iters: usize,
    pub power_tol: f64,
    /// Relative slack on every bound comparison.
    pub tol: f64,
    /// Run gradient checks on this many windows (0 disables).
    pub grad_samples: usize,
    pub grad: GradCheckConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            power_iters: 1000,
            power_tol: 1e-12,
            tol: 1e-6,
            grad_samples: 1,
            grad: GradCheckConfig {
                max_coords: Some(48),
                ..GradCheckConfig::default()
            },
        }
    }
}

/// Probe pool: the given windows followed by as many standard-normal
/// windows of the same shape.
pub fn probe_pool(windows: &ArrayD<f64>, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = ArrayD::from_shape_simple_fn(windows.raw_dim(), || StandardNormal.sample(&mut rng));
    ndarray::concatenate(Axis(0), &[windows.view(), noise.view()]).unwrap()
}

/// Full verification of a model: every annotated weight, every stage of
/// every branch (declared stages probed standalone), path composition per
/// branch and optional gradient checks.
pub fn verify_model(model: &Model, pool: &ArrayD<f64>, cfg: &VerifyConfig) -> Result<VerificationReport> {
    model.check_input_shape(pool.shape())?;
    let mut report = VerificationReport::default();
    for (_, p) in model.store.iter() {
        if p.value.ndim() != 2 {
            continue;
        }
        let w = p.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let est = power_iteration(w, cfg.power_iters, cfg.power_tol, None);
        let bound = match p.constraint {
            crate::params::Constraint::SpectralNorm(b) => Some(b),
            _ => None,
        };
        let settled = est.converged || est.residual <= crate::spectral::STALL_RESIDUAL;
        let pass = bound.is_none_or(|b| settled && est.sigma <= b * (1.0 + cfg.tol));
        report.weights.push(WeightCheck {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            sigma: est.sigma,
            bound,
            converged: est.converged,
            pass,
        });
    }

    let mut fused = 0.0f64;
    for (bi, id) in BranchId::ALL.into_iter().enumerate() {
        let stages = model.stages(id);
        let mut h = pool.clone();
        for (k, st) in stages.iter().enumerate() {
            if let Some(d) = st.declared {
                let pcfg = ProbeConfig {
                    seed: cfg.probe.seed.wrapping_add((bi * 100 + k) as u64),
                    ..cfg.probe.clone()
                };
                let est = empirical_lipschitz(&*st.apply, &h, &pcfg)?;
                report.modules.push(ModuleCheck {
                    name: st.name.clone(),
                    declared: Some(d),
                    empirical: est.value,
                    margin: Some(d - est.value),
                    probes: est.probes,
                    label: "declared",
                    pass: est.value <= d * (1.0 + cfg.tol),
                });
            }
            h = (st.apply)(&h)?;
        }
        let pcfg = ProbeConfig {
            seed: cfg.probe.seed.wrapping_add(10_000 + bi as u64),
            ..cfg.probe.clone()
        };
        let path = probe_path(id.as_str(), &stages, pool, &pcfg, cfg.tol)?;
        for st in path.stages.iter().filter(|s| s.declared.is_none()) {
            report.modules.push(ModuleCheck {
                name: st.name.clone(),
                declared: None,
                empirical: st.measured,
                margin: None,
                probes: path.probes,
                label: "measured",
                pass: true,
            });
        }
        fused = fused.max(path.bound);
        report.paths.push(path);
    }
    report.fused_bound = fused;

    if cfg.grad_samples > 0 {
        let n = cfg.grad_samples.min(pool.shape()[0]);
        for s in 0..n {
            let x = pool.slice_axis(Axis(0), ndarray::Slice::from(s..s + 1)).to_owned();
            for id in BranchId::ALL {
                let br = model.branch(id);
                let f = |g: &mut Graph, v: Var| -> Result<Var> {
                    Ok(br.forward_graph(g, &model.store, v, crate::lgca::Mode::Eval)?.0)
                };
                let gc = GradCheckConfig {
                    seed: cfg.grad.seed.wrapping_add(s as u64),
                    ..cfg.grad.clone()
                };
                report
                    .grad_checks
                    .push(grad_check(&format!("{id} input #{s}"), &f, &x, &gc)?);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn compose_examples() {
        assert_eq!(
            compose_bound(&[("a".into(), Some(2.0)), ("b".into(), Some(3.0))]).unwrap(),
            6.0
        );
        assert_eq!(
            compose_bound(&[("a".into(), Some(1.0)), ("b".into(), Some(1.0))]).unwrap(),
            1.0
        );
        let err = compose_bound(&[("attn".into(), None)]).unwrap_err();
        assert!(matches!(err, LelError::Contract(m) if m.contains("attn")));
    }

    #[test]
    fn constant_map_has_zero_estimate() {
        let pool = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |d| d[0] as f64 + d[1] as f64);
        let f = |x: &ArrayD<f64>| -> Result<ArrayD<f64>> { Ok(ArrayD::from_elem(IxDyn(&[x.shape()[0], 2]), 7.0)) };
        let cfg = ProbeConfig {
            n_pairs: 50,
            ..Default::default()
        };
        assert_eq!(empirical_lipschitz(&f, &pool, &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let pool = ArrayD::ones(IxDyn(&[2, 2]));
        let f = |x: &ArrayD<f64>| -> Result<ArrayD<f64>> { Ok(x.mapv(|v| if v > 1.0 { f64::NAN } else { v })) };
        let err = empirical_lipschitz(&f, &pool, &ProbeConfig::default()).unwrap_err();
        assert!(err.to_string().contains("probe input"));
    }

    #[test]
    fn linear_map_grad_check_is_exact() {
        let w = array![[1.0, -2.0], [0.5, 3.0], [0.0, 1.0]].into_dyn();
        let f = move |g: &mut Graph, x: Var| -> Result<Var> {
            let wv = g.constant(w.clone());
            Ok(g.matmul(x, wv))
        };
        let x = array![[0.3, -0.7, 1.1]].into_dyn();
        let rep = grad_check("linear", &f, &x, &GradCheckConfig::default()).unwrap();
        assert!(rep.max_residual < 1e-9, "{}", rep.max_residual);
        assert_eq!(rep.excluded, 0);
    }

    #[test]
    fn clamp_gradient_inside_and_outside() {
        let mut g = Graph::new();
        let x = g.input(array![0.5, 3.0, -4.0, 1.0].into_dyn());
        let y = g.clamp(x, 2.0);
        let gr = g.backward(y, None);
        let d = gr.get(x).unwrap();
        assert_eq!(d.as_slice().unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn kinks_near_point_are_excluded() {
        let f = |g: &mut Graph, x: Var| -> Result<Var> { Ok(g.relu(x)) };
        let x = array![1e-5, 0.5, -0.5].into_dyn();
        let rep = grad_check("relu", &f, &x, &GradCheckConfig::default()).unwrap();
        assert_eq!(rep.excluded, 1);
        assert_eq!(rep.checked, 2);
        assert!(rep.pass);
    }
}
