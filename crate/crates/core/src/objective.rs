//! Training objective: foreground cross-entropy, background max-uncertainty
//! regularizer, log-barrier size penalty, and the localizer's full-image
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::prob::{self, Posterior, RegMode, PROB_FLOOR};

/// Relative lower clamp on region sizes inside the barrier logarithms.
pub const SIZE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the background regularizer.
    pub lambda: f64,
    pub t_init: f64,
    pub t_factor: f64,
    pub t_max: f64,
    pub mode: RegMode,
    /// Pseudo-binarization slope.
    pub omega: f64,
    /// Pseudo-binarization midpoint.
    pub sigma: f64,
    /// Whether the log-barrier size terms are active.
    pub size_barrier: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1e-7,
            t_init: 5.0,
            t_factor: 1.01,
            t_max: 10.0,
            mode: RegMode::Eem,
            omega: 5.0,
            sigma: 0.15,
            size_barrier: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("loss.lambda must be ≥ 0, got {}", self.lambda)));
        }
        for (name, v) in [("loss.t_init", self.t_init), ("loss.t_max", self.t_max)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.t_factor >= 1.0) || !self.t_factor.is_finite() {
            return Err(Error::Config(format!(
                "loss.t_factor must be ≥ 1, got {}",
                self.t_factor
            )));
        }
        if self.t_init > self.t_max {
            return Err(Error::Config(format!(
                "loss.t_init ({}) exceeds loss.t_max ({})",
                self.t_init, self.t_max
            )));
        }
        crate::masking::check_binarize_params(self.omega, self.sigma)
    }
}

/// Itemized objective of one sample (or the mean over a batch).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_fg: f64,
    pub reg_bg: f64,
    pub barrier: f64,
    pub ce_full: f64,
    /// `ce_fg + λ · reg_bg + barrier`
    pub total: f64,
}

impl LossBreakdown {
    /// The scalar actually minimized: `total + ce_full`.
    pub fn optimized(&self) -> f64 {
        self.total + self.ce_full
    }

    pub fn is_finite(&self) -> bool {
        [self.ce_fg, self.reg_bg, self.barrier, self.ce_full, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Arithmetic mean of per-sample breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.ce_fg += b.ce_fg / n;
            m.reg_bg += b.reg_bg / n;
            m.barrier += b.barrier / n;
            m.ce_full += b.ce_full / n;
            m.total += b.total / n;
        }
        m
    }
}

/// `−(1/t) [log(s⁺/|Ω|) + log(s⁻/|Ω|)]` with sizes clamped to `[ε|Ω|, |Ω|]`.
pub fn barrier(s_plus: f64, s_minus: f64, t: f64, domain: usize) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("barrier parameter t must be > 0, got {t}")));
    }
    if domain == 0 {
        return Err(Error::InvalidInput("empty image domain".into()));
    }
    let omega = domain as f64;
    let term = |s: f64| (s / omega).clamp(SIZE_EPS, 1.0).ln();
    Ok(-(term(s_plus) + term(s_minus)) / t)
}

/// Loss terms for one sample given the classifier posteriors on the masked
/// images and the mask sizes. `ce_full` is left at zero; see [`localizer_loss`].
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    p: &Posterior,
    p_plus: &Posterior,
    p_minus: &Posterior,
    s_plus: f64,
    s_minus: f64,
    domain: usize,
    cfg: &LossConfig,
    t: f64,
) -> Result<LossBreakdown> {
    if p.classes() != p_plus.classes() || p.classes() != p_minus.classes() {
        return Err(Error::Shape("posteriors have different class counts".into()));
    }
    let ce_fg = prob::cross_entropy(p, p_plus);
    let reg_bg = prob::regularizer(p_minus, cfg.mode);
    let barrier = if cfg.size_barrier {
        barrier(s_plus, s_minus, t, domain)?
    } else {
        0.0
    };
    Ok(LossBreakdown {
        ce_fg,
        reg_bg,
        barrier,
        ce_full: 0.0,
        total: ce_fg + cfg.lambda * reg_bg + barrier,
    })
}

/// Full-image cross-entropy of the localizer posterior.
pub fn localizer_loss(p: &Posterior, p_hat: &Posterior) -> f64 {
    prob::cross_entropy(p, p_hat)
}

/// `min(t_init · t_factor^epoch, t_max)`.
pub fn t_schedule(epoch: usize, cfg: &LossConfig) -> f64 {
    (cfg.t_init * cfg.t_factor.powi(epoch as i32)).min(cfg.t_max)
}

/// Graph handles of the objective terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce_fg: Var,
    pub reg_bg: Var,
    pub barrier: Option<Var>,
    pub ce_full: Var,
    pub total: Var,
    /// `total + ce_full`, the backward root.
    pub optimized: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            ce_fg: g.scalar(self.ce_fg)?,
            reg_bg: g.scalar(self.reg_bg)?,
            barrier: self.barrier.map(|b| g.scalar(b)).transpose()?.unwrap_or(0.0),
            ce_full: g.scalar(self.ce_full)?,
            total: g.scalar(self.total)?,
        })
    }
}

fn neg_log_prob(g: &mut Graph, posterior: Var, label: usize) -> Result<Var> {
    let py = g.index(posterior, label)?;
    let py = g.clamp(py, PROB_FLOOR, 1.0);
    let lp = g.log(py);
    Ok(g.scale(lp, -1.0))
}

fn regularizer_graph(g: &mut Graph, posterior: Var, mode: RegMode) -> Var {
    let c = g.value(posterior).len() as f64;
    let clamped = g.clamp(posterior, PROB_FLOOR, 1.0);
    let logs = g.log(clamped);
    match mode {
        RegMode::Eem => {
            let plogp = g.mul(posterior, logs).expect("same shape");
            g.sum(plogp)
        }
        RegMode::Sem => {
            let s = g.sum(logs);
            g.scale(s, -1.0 / c)
        }
    }
}

fn barrier_graph(g: &mut Graph, mask: Var, domain: f64) -> Var {
    let s = g.sum(mask);
    let frac = g.scale(s, 1.0 / domain);
    let frac = g.clamp(frac, SIZE_EPS, 1.0);
    g.log(frac)
}

/// Builds the objective on a graph from the classifier posteriors `p_plus`,
/// `p_minus`, the localizer posterior `p_full` and the foreground mask.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph(
    g: &mut Graph,
    label: usize,
    p_plus: Var,
    p_minus: Var,
    p_full: Var,
    mask_plus: Var,
    cfg: &LossConfig,
    t: f64,
) -> Result<LossVars> {
    let ce_fg = neg_log_prob(g, p_plus, label)?;
    let reg_bg = regularizer_graph(g, p_minus, cfg.mode);
    let ce_full = neg_log_prob(g, p_full, label)?;
    let weighted = g.scale(reg_bg, cfg.lambda);
    let mut total = g.add(ce_fg, weighted)?;
    let mut barrier = None;
    if cfg.size_barrier {
        if !(t > 0.0) {
            return Err(Error::Config(format!("barrier parameter t must be > 0, got {t}")));
        }
        let domain = g.value(mask_plus).len() as f64;
        let neg = g.scale(mask_plus, -1.0);
        let mask_minus = g.add_scalar(neg, 1.0);
        let lp = barrier_graph(g, mask_plus, domain);
        let lm = barrier_graph(g, mask_minus, domain);
        let both = g.add(lp, lm)?;
        let b = g.scale(both, -1.0 / t);
        total = g.add(total, b)?;
        barrier = Some(b);
    }
    let optimized = g.add(total, ce_full)?;
    Ok(LossVars {
        ce_fg,
        reg_bg,
        barrier,
        ce_full,
        total,
        optimized,
    })
}
