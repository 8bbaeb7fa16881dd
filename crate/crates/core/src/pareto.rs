//! Two-objective gradient combination on the simplex with an adaptive
//! orthogonality penalty, plus the optimizers that apply the result.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoConfig {
    pub lambda0: f64,
    pub kappa: f64,
    pub pgd_steps: usize,
    /// Largest change of α per projected-gradient step.
    pub pgd_lr: f64,
    /// α returned when every α is optimal.
    pub tie_alpha: f64,
    /// Add zero-mean Gaussian noise (σ = 0.01‖h‖) in the conflict branch.
    pub noise: bool,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.5,
            kappa: 4.0,
            pgd_steps: 50,
            pgd_lr: 0.1,
            tie_alpha: 0.5,
            noise: false,
        }
    }
}

impl ParetoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pareto: {m}")));
        if self.lambda0 < 0.0 {
            return bad("lambda0 must be >= 0");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be > 0");
        }
        if self.pgd_steps == 0 {
            return bad("pgd_steps must be >= 1");
        }
        if !(self.pgd_lr > 0.0) {
            return bad("pgd_lr must be > 0");
        }
        if !(0.0..=1.0).contains(&self.tie_alpha) {
            return bad("tie_alpha must lie in [0, 1]");
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine of the angle between `a` and `b`; `(0, true)` when either is zero.
pub fn cos_theta(a: &[f64], b: &[f64]) -> (f64, bool) {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return (0.0, true);
    }
    ((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0), false)
}

/// `λ0 / (1 + exp(κ cos θ))`
pub fn adaptive_lambda(cos: f64, cfg: &ParetoConfig) -> f64 {
    cfg.lambda0 / (1.0 + (cfg.kappa * cos).exp())
}

/// The α-objective `‖α g_m + (1−α) g_u‖² + λ α (1−α) |g_m·g_u|` in terms of
/// `mm = ‖g_m‖²`, `uu = ‖g_u‖²`, `mu = g_m·g_u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaObjective {
    pub mm: f64,
    pub uu: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl AlphaObjective {
    pub fn new(g_m: &[f64], g_u: &[f64], lambda: f64) -> Self {
        Self {
            mm: dot(g_m, g_m),
            uu: dot(g_u, g_u),
            mu: dot(g_m, g_u),
            lambda,
        }
    }

    pub fn value(&self, a: f64) -> f64 {
        let b = 1.0 - a;
        a * a * self.mm + 2.0 * a * b * self.mu + b * b * self.uu + self.lambda * a * b * self.mu.abs()
    }

    pub fn derivative(&self, a: f64) -> f64 {
        2.0 * a * self.mm + 2.0 * (1.0 - 2.0 * a) * self.mu - 2.0 * (1.0 - a) * self.uu
            + self.lambda * (1.0 - 2.0 * a) * self.mu.abs()
    }

    pub fn curvature(&self) -> f64 {
        2.0 * (self.mm - 2.0 * self.mu + self.uu) - 2.0 * self.lambda * self.mu.abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSolution {
    pub alpha_m: f64,
    pub alpha_u: f64,
    pub steps: usize,
    /// Every α is optimal and `tie_alpha` was returned.
    pub tie: bool,
}

/// Minimizes the α-objective over `α_m ∈ [0, 1]` by projected gradient
/// descent from 0.5 with inverse-curvature steps capped at `pgd_lr`.
pub fn solve_alpha(g_m: &[f64], g_u: &[f64], lambda: f64, cfg: &ParetoConfig) -> Result<AlphaSolution> {
    if g_m.len() != g_u.len() {
        return Err(Error::shape("solve_alpha", format!("{} vs {}", g_m.len(), g_u.len())));
    }
    solve_objective(&AlphaObjective::new(g_m, g_u, lambda), cfg)
}

pub fn solve_objective(obj: &AlphaObjective, cfg: &ParetoConfig) -> Result<AlphaSolution> {
    let check = |v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical("non-finite gradient in alpha solver".into()))
        }
    };
    let scale = obj.mm + obj.uu;
    check(scale)?;
    let curv = check(obj.curvature())?;
    let flat = scale == 0.0 || (curv.abs() <= 1e-12 * scale && obj.derivative(0.5).abs() <= 1e-12 * scale);
    if flat {
        return Ok(AlphaSolution {
            alpha_m: cfg.tie_alpha,
            alpha_u: 1.0 - cfg.tie_alpha,
            steps: 0,
            tie: true,
        });
    }
    let mut a: f64 = 0.5;
    let mut steps = 0;
    for _ in 0..cfg.pgd_steps {
        steps += 1;
        let grad = check(obj.derivative(a))?;
        let raw = if curv.abs() > 0.0 { grad / curv.abs() } else { grad.signum() * cfg.pgd_lr };
        let next = (a - raw.clamp(-cfg.pgd_lr, cfg.pgd_lr)).clamp(0.0, 1.0);
        let moved = (next - a).abs();
        a = next;
        if moved < 1e-8 {
            break;
        }
    }
    if curv <= 0.0 {
        // concave or linear: the minimum sits at an endpoint
        for end in [0.0, 1.0] {
            if obj.value(end) < obj.value(a) {
                a = end;
            }
        }
    }
    Ok(AlphaSolution {
        alpha_m: a,
        alpha_u: 1.0 - a,
        steps,
        tie: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// cos θ ≥ 0: plain average.
    NonConflict,
    /// cos θ < 0: weighted direction with rescaled magnitude.
    Conflict,
    /// Conflict whose weighted direction vanished; symmetric projections used.
    ConflictFallback,
    /// Both gradients zero.
    Zero,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::NonConflict => "non-conflict",
            Branch::Conflict => "conflict",
            Branch::ConflictFallback => "conflict-fallback",
            Branch::Zero => "zero",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub cos_theta: f64,
    pub degenerate: bool,
    pub norm_m: f64,
    pub norm_u: f64,
    pub alpha_m: f64,
    pub alpha_u: f64,
    pub lambda: f64,
    pub branch: Branch,
    pub h_norm: f64,
}

/// `(1 + |cos θ| / (1 + ‖g_m‖/‖g_u‖)) ‖g_m + g_u‖`
pub fn conflict_magnitude(g_m: &[f64], g_u: &[f64], cos: f64) -> f64 {
    let (nm, nu) = (dot(g_m, g_m).sqrt(), dot(g_u, g_u).sqrt());
    let sum: Vec<f64> = g_m.iter().zip(g_u).map(|(a, b)| a + b).collect();
    (1.0 + cos.abs() / (1.0 + nm / nu)) * dot(&sum, &sum).sqrt()
}

/// Combines the two objective gradients over the shared parameters.
pub fn combine(g_m: &[f64], g_u: &[f64], cfg: &ParetoConfig, rng: Option<&mut Rng>) -> Result<(Vec<f64>, Diagnostics)> {
    if g_m.len() != g_u.len() {
        return Err(Error::shape("combine", format!("{} vs {}", g_m.len(), g_u.len())));
    }
    let (nm, nu) = (dot(g_m, g_m).sqrt(), dot(g_u, g_u).sqrt());
    if !nm.is_finite() || !nu.is_finite() {
        return Err(Error::Numerical("non-finite objective gradient".into()));
    }
    let (cos, degenerate) = cos_theta(g_m, g_u);
    let mut diag = Diagnostics {
        cos_theta: cos,
        degenerate,
        norm_m: nm,
        norm_u: nu,
        alpha_m: 0.5,
        alpha_u: 0.5,
        lambda: 0.1 * cfg.lambda0,
        branch: Branch::NonConflict,
        h_norm: 0.0,
    };
    if nm == 0.0 && nu == 0.0 {
        diag.branch = Branch::Zero;
        return Ok((vec![0.0; g_m.len()], diag));
    }
    let h: Vec<f64> = if cos >= 0.0 {
        g_m.iter().zip(g_u).map(|(a, b)| 0.5 * a + 0.5 * b).collect()
    } else {
        let lambda = adaptive_lambda(cos, cfg);
        let sol = solve_alpha(g_m, g_u, lambda, cfg)?;
        diag.lambda = lambda;
        diag.alpha_m = sol.alpha_m;
        diag.alpha_u = sol.alpha_u;
        let v: Vec<f64> = g_m.iter().zip(g_u).map(|(a, b)| sol.alpha_m * a + sol.alpha_u * b).collect();
        let nv = dot(&v, &v).sqrt();
        let mag = conflict_magnitude(g_m, g_u, cos);
        if nv >= 1e-12 {
            diag.branch = Branch::Conflict;
            let mut h: Vec<f64> = v.iter().map(|x| x / nv * mag).collect();
            if cfg.noise {
                if let Some(rng) = rng {
                    let sigma = 0.01 * mag;
                    if sigma > 0.0 {
                        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numerical(e.to_string()))?;
                        for x in &mut h {
                            *x += normal.sample(rng);
                        }
                    }
                }
            }
            h
        } else {
            diag.branch = Branch::ConflictFallback;
            // g_m without its g_u component plus g_u without its g_m component
            let pm = dot(g_m, g_u) / (nu * nu);
            let pu = dot(g_m, g_u) / (nm * nm);
            g_m.iter()
                .zip(g_u)
                .map(|(a, b)| (a - pm * b) + (b - pu * a))
                .collect()
        }
    };
    diag.h_norm = dot(&h, &h).sqrt();
    Ok((h, diag))
}

/// Final per-parameter gradients: the combined vector over `shared`
/// parameters, and `g_m + g_u` elsewhere. With `cfg = None` every parameter
/// gets `g_m + g_u`.
pub fn combine_stores(
    g_m: &ParamStore,
    g_u: &ParamStore,
    shared: impl Fn(&str) -> bool,
    cfg: Option<&ParetoConfig>,
    rng: Option<&mut Rng>,
) -> Result<(ParamStore, Option<Diagnostics>)> {
    let mut out = g_m.clone();
    out.axpy(1.0, g_u)?;
    let Some(cfg) = cfg else { return Ok((out, None)) };
    let sm = g_m.filter(&shared);
    let su = g_u.filter(&shared);
    if sm.is_empty() {
        return Ok((out, None));
    }
    let (h, diag) = combine(&sm.flatten(), &su.flatten(), cfg, rng)?;
    let mut combined = sm;
    combined.unflatten(&h)?;
    out.merge(combined);
    Ok((out, Some(diag)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum: 0.9 }
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape())));
            }
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    let v = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((x, m), d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *m = momentum * *m + d;
                        *x -= lr * *m;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (((x, mi), vi), d) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
