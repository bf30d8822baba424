//! Polak-Ribière conjugate gradient on `−E`.
//!
//! Every epoch takes one full gradient, forms a search direction, brackets
//! the maximum of `−E` along it using only the sign of a subsampled slope,
//! places three full-data probes in the bracket and steps to the vertex of the
//! parabola through them.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::Kernel;
use crate::matcore::dot_vec;
use crate::nn::{self, Batch, MlpParams};

/// Gradient, error and flops at the base point of a line search.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `−½ ∂E/∂W`, flat.
    pub grad: Vec<f32>,
    pub error: f64,
    pub n_patterns: usize,
    pub flops: u64,
}

/// What the optimizer needs from a training backend.
///
/// Implementations hold a base parameter vector and a current direction `d`;
/// all probes are taken at `base + step · d` without moving the base until
/// [`LineObjective::commit`].
pub trait LineObjective {
    fn dim(&self) -> usize;

    fn gradient(&mut self) -> Result<Evaluation>;

    fn set_direction(&mut self, d: &[f32]) -> Result<()>;

    /// Full-data error at `base + step · d`.
    fn error_along(&mut self, step: f32) -> Result<(f64, u64)>;

    /// Per-pattern slope of `−E` at `base + step · d`, estimated from roughly
    /// `fraction` of the patterns.
    fn slope_along(&mut self, step: f32, fraction: f32) -> Result<(f64, u64)>;

    fn commit(&mut self, step: f32) -> Result<()>;

    fn params(&self) -> &MlpParams;

    /// A model clock in seconds. When present, epoch times are measured on
    /// it instead of the wall clock, which makes histories reproducible.
    fn virtual_clock(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    #[default]
    PolakRibiere,
    /// β forced to 0: plain steepest ascent on `−E`.
    SteepestAscent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSearchCfg {
    pub initial_step: f32,
    pub growth: f32,
    pub max_expansions: usize,
    pub sign_sample_fraction: f32,
    /// Interpolated point is accepted when its slope is below this fraction of
    /// the slope at step 0; otherwise the bracket is bisected once more.
    pub slope_tolerance: f32,
    /// Compare every subsampled sign against the full-data sign.
    pub audit_signs: bool,
}

impl Default for LineSearchCfg {
    fn default() -> Self {
        LineSearchCfg {
            initial_step: 1e-3,
            growth: 2.0,
            max_expansions: 40,
            sign_sample_fraction: 0.1,
            slope_tolerance: 0.1,
            audit_signs: false,
        }
    }
}

impl LineSearchCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.growth > 1.0) {
            return Err(Error::Invalid(format!("growth must exceed 1, got {}", self.growth)));
        }
        if !(self.sign_sample_fraction > 0.0 && self.sign_sample_fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "sign_sample_fraction must be in (0, 1], got {}",
                self.sign_sample_fraction
            )));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::Invalid(format!(
                "initial_step must be positive, got {}",
                self.initial_step
            )));
        }
        if self.max_expansions == 0 {
            return Err(Error::Invalid("max_expansions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub epochs: usize,
    pub line: LineSearchCfg,
    pub beta: BetaRule,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            epochs: 10,
            line: LineSearchCfg::default(),
            beta: BetaRule::PolakRibiere,
        }
    }
}

/// Carried between epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CgState {
    pub prev_grad: Vec<f32>,
    pub direction: Vec<f32>,
    pub iteration: usize,
    pub last_step: f32,
}

/// `max(0, g_newᵀ(g_new − g_old) / g_oldᵀg_old)`; 0 when `g_old` vanishes.
pub fn pr_beta(g_new: &[f32], g_old: &[f32]) -> Result<f32> {
    if g_new.len() != g_old.len() {
        return Err(crate::error::shape_err(
            "pr_beta",
            format!("{} vs {}", g_new.len(), g_old.len()),
        ));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in g_new.iter().zip(g_old) {
        num += a as f64 * (a as f64 - b as f64);
        den += b as f64 * b as f64;
    }
    if den == 0.0 || !den.is_finite() {
        return Ok(0.0);
    }
    Ok((num / den).max(0.0) as f32)
}

/// `g + β · d_prev`, or `g` on the first iteration and on restarts.
pub fn next_direction(g: &[f32], state: &CgState, rule: BetaRule) -> Result<Vec<f32>> {
    if state.iteration == 0 || state.direction.is_empty() {
        return Ok(g.to_vec());
    }
    if state.direction.len() != g.len() {
        return Err(crate::error::shape_err(
            "next_direction",
            format!("gradient {} vs direction {}", g.len(), state.direction.len()),
        ));
    }
    let beta = match rule {
        BetaRule::PolakRibiere => pr_beta(g, &state.prev_grad)?,
        BetaRule::SteepestAscent => 0.0,
    };
    Ok(combine(g, beta, &state.direction))
}

fn combine(g: &[f32], beta: f32, d: &[f32]) -> Vec<f32> {
    if beta == 0.0 {
        return g.to_vec();
    }
    g.iter().zip(d).map(|(&a, &b)| a + beta * b).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket {
    pub lo: f32,
    pub hi: f32,
    /// False when no sign change was seen within the expansion budget.
    pub bracketed: bool,
    pub probes: usize,
}

/// Expands `start · growthⁿ` until the slope sign turns negative.
///
/// `ascending(s)` reports whether the slope of the maximized objective is
/// positive at step `s`. The caller guarantees it is positive at 0.
pub fn bracket_by_sign<F>(start: f32, cfg: &LineSearchCfg, mut ascending: F) -> Result<Bracket>
where
    F: FnMut(f32) -> Result<bool>,
{
    let mut lo = 0.0f32;
    let mut s = start;
    for n in 0..cfg.max_expansions {
        if !ascending(s)? {
            return Ok(Bracket {
                lo,
                hi: s,
                bracketed: true,
                probes: n + 1,
            });
        }
        lo = s;
        s *= cfg.growth;
        if !s.is_finite() {
            break;
        }
    }
    let hi = if s.is_finite() { s } else { lo };
    Ok(Bracket {
        lo: if hi == lo { lo / cfg.growth } else { lo },
        hi,
        bracketed: false,
        probes: cfg.max_expansions,
    })
}

/// Vertex of the parabola through three samples, clamped to `[s0, s2]`.
///
/// Collinear samples give `s1`; a convex fit has no interior maximum, so the
/// best sample is returned instead.
pub fn quad_interpolate(s0: f32, f0: f64, s1: f32, f1: f64, s2: f32, f2: f64) -> f32 {
    let (a, b, c) = (s0 as f64, s1 as f64, s2 as f64);
    let d01 = (f1 - f0) / (b - a);
    let d12 = (f2 - f1) / (c - b);
    let curv = (d12 - d01) / (c - a);
    if !curv.is_finite() || curv == 0.0 {
        return s1;
    }
    if curv > 0.0 {
        let best = [(s0, f0), (s1, f1), (s2, f2)]
            .into_iter()
            .fold((s1, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
        return best.0;
    }
    let num = (b - a).powi(2) * (f1 - f2) - (b - c).powi(2) * (f1 - f0);
    let den = (b - a) * (f1 - f2) - (b - c) * (f1 - f0);
    if den == 0.0 {
        return s1;
    }
    let v = b - 0.5 * num / den;
    (v.clamp(a, c)) as f32
}

/// Outcome of one line search.
#[derive(Clone, Debug, PartialEq)]
pub struct LineResult {
    /// Accepted step; 0 when no probe improved on the base point.
    pub step: f32,
    /// Error at the accepted point.
    pub error: f64,
    pub bracket: Bracket,
    pub flops: u64,
    pub sign_checks: usize,
    pub sign_agreements: usize,
}

fn score(err: f64) -> f64 {
    if err.is_finite() {
        -err
    } else {
        f64::NEG_INFINITY
    }
}

/// Locates the maximum of `−E` along the objective's current direction.
///
/// `base_error` is `E` at step 0 and `slope0` the full-data per-pattern slope
/// there; a non-positive `slope0` is a direction error. When the subsampled
/// signs lead nowhere the search is repeated once with full-data signs.
pub fn line_search<O: LineObjective + ?Sized>(
    obj: &mut O,
    base_error: f64,
    slope0: f64,
    start: f32,
    cfg: &LineSearchCfg,
) -> Result<LineResult> {
    if !(slope0 > 0.0) {
        return Err(Error::Direction(slope0));
    }
    let first = search_once(obj, base_error, slope0, start, cfg)?;
    if first.step > 0.0 || cfg.sign_sample_fraction >= 1.0 {
        return Ok(first);
    }
    let full = LineSearchCfg {
        sign_sample_fraction: 1.0,
        audit_signs: false,
        ..*cfg
    };
    let mut second = search_once(obj, base_error, slope0, start, &full)?;
    second.flops += first.flops;
    second.sign_checks = first.sign_checks;
    second.sign_agreements = first.sign_agreements;
    Ok(second)
}

fn search_once<O: LineObjective + ?Sized>(
    obj: &mut O,
    base_error: f64,
    slope0: f64,
    start: f32,
    cfg: &LineSearchCfg,
) -> Result<LineResult> {
    let mut flops = 0u64;
    let mut checks = 0usize;
    let mut agree = 0usize;
    let mut sign_at = |obj: &mut O, s: f32, flops: &mut u64| -> Result<bool> {
        let (slope, f) = obj.slope_along(s, cfg.sign_sample_fraction)?;
        *flops += f;
        let positive = slope > 0.0;
        if cfg.audit_signs && cfg.sign_sample_fraction < 1.0 {
            let (full, _) = obj.slope_along(s, 1.0)?;
            checks += 1;
            if (full > 0.0) == positive {
                agree += 1;
            }
        }
        Ok(positive)
    };

    let mut bracket = bracket_by_sign(start, cfg, |s| sign_at(obj, s, &mut flops))?;
    if bracket.bracketed && bracket.lo == 0.0 {
        // The first probe overshot: shrink until the slope is positive again.
        let mut hi = bracket.hi;
        for _ in 0..cfg.max_expansions {
            let s = hi / cfg.growth;
            bracket.probes += 1;
            if sign_at(obj, s, &mut flops)? {
                bracket.lo = s;
                break;
            }
            hi = s;
        }
        bracket.hi = hi;
    }

    let mut samples: Vec<(f32, f64)> = vec![(0.0, score(base_error))];
    let eval = |obj: &mut O, s: f32, samples: &mut Vec<(f32, f64)>, flops: &mut u64| -> Result<f64> {
        if let Some(&(_, f)) = samples.iter().find(|p| p.0 == s) {
            return Ok(f);
        }
        let (e, fl) = obj.error_along(s)?;
        *flops += fl;
        let f = score(e);
        samples.push((s, f));
        Ok(f)
    };

    let (s0, s2) = (bracket.lo, bracket.hi);
    let s1 = 0.5 * (s0 + s2);
    let f0 = eval(obj, s0, &mut samples, &mut flops)?;
    let f1 = eval(obj, s1, &mut samples, &mut flops)?;
    let f2 = eval(obj, s2, &mut samples, &mut flops)?;
    let star = quad_interpolate(s0, f0, s1, f1, s2, f2);
    eval(obj, star, &mut samples, &mut flops)?;

    if star > 0.0 {
        let (slope, f) = obj.slope_along(star, cfg.sign_sample_fraction)?;
        flops += f;
        if slope.abs() > cfg.slope_tolerance as f64 * slope0 {
            let other = if slope > 0.0 {
                if star < s1 { s1 } else { s2 }
            } else if star > s1 {
                s1
            } else {
                s0
            };
            let mid = 0.5 * (star + other);
            if mid > 0.0 && mid != star {
                eval(obj, mid, &mut samples, &mut flops)?;
            }
        }
    }

    let (mut step, mut best) = samples[0];
    for &(s, f) in &samples[1..] {
        if f > best {
            step = s;
            best = f;
        }
    }
    if step != 0.0 && best <= samples[0].1 {
        step = 0.0;
        best = samples[0].1;
    }
    Ok(LineResult {
        step,
        error: -best,
        bracket,
        flops,
        sign_checks: checks,
        sign_agreements: agree,
    })
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Error before the epoch's step.
    pub start_error: f64,
    /// Error after the step.
    pub error: f64,
    pub step: f32,
    pub seconds: f64,
    pub gflops: f64,
    pub flops: u64,
    pub restarted: bool,
    pub bracketed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CgReport {
    pub history: Vec<EpochRecord>,
    pub sign_checks: usize,
    pub sign_agreements: usize,
}

impl CgReport {
    /// Epochs whose error ended strictly below where they started.
    pub fn decreasing_epochs(&self) -> usize {
        self.history.iter().filter(|r| r.error < r.start_error).count()
    }
}

pub const HISTORY_CSV_HEADER: &str = "epoch,error,step,seconds,gflops";

pub fn write_history_csv<W: std::io::Write>(mut w: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_CSV_HEADER}")?;
    for r in history {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.error, r.step, r.seconds, r.gflops)?;
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs of conjugate gradient, calling `on_epoch` after
/// each one.
pub fn cg_train_with<O, F>(obj: &mut O, cfg: &CgConfig, mut on_epoch: F) -> Result<CgReport>
where
    O: LineObjective + ?Sized,
    F: FnMut(&EpochRecord),
{
    if cfg.epochs == 0 {
        return Err(Error::Invalid("epochs must be at least 1".into()));
    }
    cfg.line.validate()?;
    let mut state = CgState::default();
    let mut report = CgReport::default();
    let mut start = cfg.line.initial_step;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let v0 = obj.virtual_clock();
        let ev = obj.gradient()?;
        let n = ev.n_patterns.max(1) as f64;
        let mut flops = ev.flops;

        let mut d = next_direction(&ev.grad, &state, cfg.beta)?;
        let mut restarted = state.iteration == 0;
        let mut slope0 = 2.0 * dot_vec(&ev.grad, &d) / n;
        if !(slope0 > 0.0) {
            d = ev.grad.clone();
            slope0 = 2.0 * dot_vec(&ev.grad, &d) / n;
            restarted = true;
        }
        obj.set_direction(&d)?;

        let line = if slope0 > 0.0 {
            match line_search(obj, ev.error, slope0, start, &cfg.line) {
                Ok(r) => Some(r),
                Err(Error::Direction(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let (step, error, bracketed) = match &line {
            Some(r) => {
                flops += r.flops;
                report.sign_checks += r.sign_checks;
                report.sign_agreements += r.sign_agreements;
                (r.step, r.error, r.bracket.bracketed)
            }
            None => (0.0, ev.error, false),
        };

        if step > 0.0 {
            obj.commit(step)?;
            state.prev_grad = ev.grad;
            state.direction = d;
            state.iteration += 1;
            start = step / (cfg.line.growth * cfg.line.growth);
        } else {
            // Nothing gained: restart along the gradient with a shorter probe.
            state = CgState::default();
            start /= cfg.line.growth * cfg.line.growth;
            restarted = true;
        }
        state.last_step = step;

        let seconds = match (v0, obj.virtual_clock()) {
            (Some(a), Some(b)) => b - a,
            _ => t0.elapsed().as_secs_f64(),
        };
        let rec = EpochRecord {
            epoch,
            start_error: ev.error,
            error,
            step,
            seconds,
            gflops: if seconds > 0.0 { flops as f64 / seconds / 1e9 } else { 0.0 },
            flops,
            restarted,
            bracketed,
        };
        on_epoch(&rec);
        report.history.push(rec);
    }
    Ok(report)
}

pub fn cg_train<O: LineObjective + ?Sized>(obj: &mut O, cfg: &CgConfig) -> Result<CgReport> {
    cg_train_with(obj, cfg, |_| {})
}

/// Single-process objective over an in-memory batch.
pub struct BatchObjective {
    params: MlpParams,
    batch: Batch,
    kernel: Kernel,
    direction: Vec<f32>,
    sample: Option<(u32, Batch)>,
}

impl BatchObjective {
    pub fn new(params: MlpParams, batch: Batch, kernel: Kernel) -> Result<Self> {
        let shape = params.shape();
        if batch.x.cols() != shape.n_i || batch.t.cols() != shape.n_o {
            return Err(crate::error::shape_err(
                "BatchObjective",
                format!("batch {}→{} for net {}/{}/{}", batch.x.cols(), batch.t.cols(), shape.n_i, shape.n_h, shape.n_o),
            ));
        }
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        Ok(BatchObjective {
            direction: vec![0.0; params.param_count()],
            params,
            batch,
            kernel,
            sample: None,
        })
    }

    pub fn into_params(self) -> MlpParams {
        self.params
    }

    fn trial(&self, step: f32) -> Result<MlpParams> {
        let mut p = self.params.clone();
        if step != 0.0 {
            p.add_scaled(step, &self.direction)?;
        }
        Ok(p)
    }

    fn sample_for(&mut self, fraction: f32) -> Result<&Batch> {
        if fraction >= 1.0 {
            return Ok(&self.batch);
        }
        let key = fraction.to_bits();
        if self.sample.as_ref().map(|s| s.0) != Some(key) {
            let stride = sample_stride(fraction);
            self.sample = Some((key, self.batch.subsample(stride)?));
        }
        Ok(&self.sample.as_ref().expect("sample cached").1)
    }
}

/// Subsample stride that keeps roughly `fraction` of the patterns.
pub fn sample_stride(fraction: f32) -> usize {
    if fraction >= 1.0 {
        1
    } else {
        (1.0 / fraction as f64).round().max(1.0) as usize
    }
}

/// Slope of `−E` per pattern: `2 · g · d / n`.
pub(crate) fn slope_of(g: &nn::GradResult, d: &[f32]) -> f64 {
    2.0 * dot_vec(&g.to_flat(), d) / g.n_patterns.max(1) as f64
}

impl LineObjective for BatchObjective {
    fn dim(&self) -> usize {
        self.params.param_count()
    }

    fn gradient(&mut self) -> Result<Evaluation> {
        let g = nn::gradient(&self.params, &self.batch, &self.kernel)?;
        Ok(Evaluation {
            grad: g.to_flat(),
            error: g.error,
            n_patterns: g.n_patterns,
            flops: g.flops,
        })
    }

    fn set_direction(&mut self, d: &[f32]) -> Result<()> {
        if d.len() != self.dim() {
            return Err(crate::error::shape_err(
                "set_direction",
                format!("{} for {} parameters", d.len(), self.dim()),
            ));
        }
        self.direction.copy_from_slice(d);
        Ok(())
    }

    fn error_along(&mut self, step: f32) -> Result<(f64, u64)> {
        let p = self.trial(step)?;
        nn::error(&p, &self.batch, &self.kernel)
    }

    fn slope_along(&mut self, step: f32, fraction: f32) -> Result<(f64, u64)> {
        let p = self.trial(step)?;
        let kernel = self.kernel;
        let sample = self.sample_for(fraction)?;
        let g = nn::gradient(&p, sample, &kernel)?;
        Ok((slope_of(&g, &self.direction), g.flops))
    }

    fn commit(&mut self, step: f32) -> Result<()> {
        self.params.add_scaled(step, &self.direction)
    }

    fn params(&self) -> &MlpParams {
        &self.params
    }
}
