//! The finite-difference suite behind the `gradcheck` command: closed-form
//! regularizer gradients, objective terms, the masking chain and the full
//! training graph on a small instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{finite_diff_check, rel_error};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{ModelParams, NetConfig};
use crate::objective::{objective_graph, LossConfig};
use crate::prob::{self, Posterior, RegMode};
use crate::tensor::Tensor;
use crate::trainer::{sample_graph, TrainConfig};

/// Tolerance for the closed-form binary gradients.
pub const CLOSED_FORM_TOL: f64 = 1e-6;
/// Tolerance for composite graph paths.
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Both gradients must be this close to zero at the uniform posterior.
pub const STATIONARY_TOL: f64 = 1e-9;
/// Minimum distance from any kink or selection boundary for the end-to-end
/// instance, far above the probe step.
pub const E2E_MARGIN: f64 = 1e-4;
pub const E2E_SIZE: usize = 16;

/// Closed-form `d/dp₁` of the two regularizers on `(p₁, 1 − p₁)`.
#[derive(Clone, Copy)]
pub struct ClosedForms {
    pub eem: fn(f64) -> Result<f64>,
    pub sem: fn(f64) -> Result<f64>,
}

impl Default for ClosedForms {
    fn default() -> Self {
        ClosedForms {
            eem: prob::grad_neg_entropy_binary,
            sem: prob::grad_uniform_ce_binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteItem {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteItem {
    fn new(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        SuiteItem {
            name,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

/// `p₁ ∈ {0.05, 0.10, …, 0.95}`.
pub fn probe_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

fn binary_reg(p1: f64, mode: RegMode) -> Result<f64> {
    Ok(prob::regularizer(&Posterior::new(vec![p1, 1.0 - p1])?, mode))
}

fn numeric_binary(p1: f64, mode: RegMode) -> Result<f64> {
    let h = 1e-5;
    Ok((binary_reg(p1 + h, mode)? - binary_reg(p1 - h, mode)?) / (2.0 * h))
}

/// Largest relative error of `closed` against central differences over the
/// probe grid, excluding `p₁ = 0.5` where both vanish.
pub fn closed_form_error(closed: fn(f64) -> Result<f64>, mode: RegMode) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p1 in probe_grid() {
        if (p1 - 0.5).abs() < 1e-12 {
            continue;
        }
        worst = worst.max(rel_error(closed(p1)?, numeric_binary(p1, mode)?));
    }
    Ok(worst)
}

/// `max(|closed(0.5)|, |numeric(0.5)|)`.
pub fn stationary_error(closed: fn(f64) -> Result<f64>, mode: RegMode) -> Result<f64> {
    Ok(closed(0.5)?.abs().max(numeric_binary(0.5, mode)?.abs()))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("sized above")
}

/// Weighted readout `Σ wᵢ yᵢ` with fixed irregular weights.
fn readout(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let w = Tensor::new(
        g.shape(y).to_vec(),
        (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect(),
    )?;
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn objective_items(rng: &mut ChaCha8Rng) -> Result<Vec<SuiteItem>> {
    let mut items = Vec::new();
    let logits = random(&[3], rng, -1.5, 1.5);
    let mask = random(&[4, 4], rng, 0.1, 0.9);
    for (name, mode) in [
        ("objective.composed_eem", RegMode::Eem),
        ("objective.composed_sem", RegMode::Sem),
    ] {
        let cfg = LossConfig {
            lambda: 0.7,
            mode,
            ..LossConfig::default()
        };
        let m = mask.clone();
        let r = finite_diff_check(
            |g, z| {
                let p_plus = g.softmax(z)?;
                let zm = g.scale(z, -0.5);
                let p_minus = g.softmax(zm)?;
                let zf = g.scale(z, 2.0);
                let p_full = g.softmax(zf)?;
                let mv = g.constant(m.clone());
                let lv = objective_graph(g, 1, p_plus, p_minus, p_full, mv, &cfg, 5.0)?;
                Ok(lv.optimized)
            },
            &logits,
            1e-6,
        )?;
        items.push(SuiteItem::new(name, r.max_rel_error, COMPOSITE_TOL));
    }
    let cfg = LossConfig::default();
    let r = finite_diff_check(
        |g, m| {
            let p = g.constant(Tensor::from_vec(vec![0.6, 0.4]));
            let lv = objective_graph(g, 0, p, p, p, m, &cfg, 5.0)?;
            Ok(lv.barrier.expect("barrier enabled"))
        },
        &mask,
        1e-6,
    )?;
    items.push(SuiteItem::new("objective.barrier", r.max_rel_error, COMPOSITE_TOL));
    Ok(items)
}

fn masking_item(rng: &mut ChaCha8Rng) -> Result<SuiteItem> {
    let cams = random(&[6, 4, 4], rng, -1.0, 1.0);
    let image = random(&[3, 8, 8], rng, 0.0, 1.0);
    let r = finite_diff_check(
        |g, x| {
            let maps = g.group_mean(x, 3)?;
            let scores = g.spatial_mean(maps)?;
            let post = g.softmax(scores)?;
            let fused = g.weighted_channel_sum(maps, post)?;
            let norm = g.min_max_normalize(fused);
            let up = g.upsample_bilinear(norm, 8, 8)?;
            let mask = g.scaled_sigmoid(up, 5.0, 0.15);
            let img = g.constant(image.clone());
            let masked = g.mul_channels(img, mask)?;
            readout(g, masked)
        },
        &cams,
        1e-6,
    )?;
    Ok(SuiteItem::new("masking.chain", r.max_rel_error, COMPOSITE_TOL))
}

/// A seeded 16×16 training instance whose graph keeps every kink and
/// selection boundary at least [`E2E_MARGIN`] away.
pub struct E2eInstance {
    pub image: Tensor,
    pub label: usize,
    pub params: ModelParams,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub margin: f64,
}

fn e2e_graph(inst: &E2eInstance, g: &mut Graph, x: Var, params: &ModelParams, trainable: bool) -> Result<Var> {
    let pv = params.attach(g, trainable);
    let sv = sample_graph(g, x, inst.label, &pv, params, &inst.cfg, 5.0)?;
    Ok(sv.loss.optimized)
}

impl E2eInstance {
    /// Scans seeds from `start` until the margin condition holds.
    pub fn find(start: u64, mode: RegMode) -> Result<E2eInstance> {
        let cfg = TrainConfig {
            loss: LossConfig {
                lambda: 0.5,
                mode,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        for seed in start..start + 200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let image = random(&[3, E2E_SIZE, E2E_SIZE], &mut rng, 0.0, 1.0);
            let params = ModelParams::init(NetConfig::default(), seed)?;
            let mut inst = E2eInstance {
                image,
                label: (seed % 2) as usize,
                params,
                cfg: cfg.clone(),
                seed,
                margin: 0.0,
            };
            let mut g = Graph::new();
            let x = g.constant(inst.image.clone());
            e2e_graph(&inst, &mut g, x, &inst.params, false)?;
            inst.margin = g.nonsmooth_margin();
            if inst.margin >= E2E_MARGIN {
                return Ok(inst);
            }
        }
        Err(Error::InvalidInput(format!(
            "no seed in {start}..{} keeps non-smooth points {E2E_MARGIN} away",
            start + 200
        )))
    }

    /// Componentwise check over every input pixel.
    pub fn input_error(&self) -> Result<f64> {
        let r = finite_diff_check(|g, x| e2e_graph(self, g, x, &self.params, false), &self.image, 1e-6)?;
        Ok(r.max_rel_error)
    }

    /// Componentwise check over `per_tensor` evenly spaced entries of every
    /// parameter tensor.
    pub fn param_error(&self, per_tensor: usize) -> Result<f64> {
        let mut g = Graph::new();
        let pv = self.params.attach(&mut g, true);
        let x = g.constant(self.image.clone());
        let sv = sample_graph(&mut g, x, self.label, &pv, &self.params, &self.cfg, 5.0)?;
        let grads = g.backward(sv.loss.optimized)?;
        let value = |p: &ModelParams| -> Result<f64> {
            let mut g = Graph::new();
            let x = g.constant(self.image.clone());
            let root = e2e_graph(self, &mut g, x, p, false)?;
            g.scalar(root)
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (ti, &v) in pv.vars().iter().enumerate() {
            let n = self.params.tensors()[ti].len();
            let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
            let step = (n / per_tensor).max(1);
            for j in (0..n).step_by(step).take(per_tensor) {
                let mut plus = self.params.clone();
                plus.tensors_mut()[ti].data_mut()[j] += h;
                let mut minus = self.params.clone();
                minus.tensors_mut()[ti].data_mut()[j] -= h;
                let numeric = (value(&plus)? - value(&minus)?) / (2.0 * h);
                worst = worst.max(rel_error(analytic.data()[j], numeric));
            }
        }
        Ok(worst)
    }
}

/// Runs every item; `forms` supplies the closed-form gradients under test.
pub fn run_suite(forms: &ClosedForms) -> Result<Vec<SuiteItem>> {
    let mut items = vec![
        SuiteItem::new(
            "prob.eem_closed_form",
            closed_form_error(forms.eem, RegMode::Eem)?,
            CLOSED_FORM_TOL,
        ),
        SuiteItem::new(
            "prob.sem_closed_form",
            closed_form_error(forms.sem, RegMode::Sem)?,
            CLOSED_FORM_TOL,
        ),
        SuiteItem::new(
            "prob.eem_stationary_at_uniform",
            stationary_error(forms.eem, RegMode::Eem)?,
            STATIONARY_TOL,
        ),
        SuiteItem::new(
            "prob.sem_stationary_at_uniform",
            stationary_error(forms.sem, RegMode::Sem)?,
            STATIONARY_TOL,
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    items.extend(objective_items(&mut rng)?);
    items.push(masking_item(&mut rng)?);
    for (mode, input_name, param_name) in [
        (RegMode::Eem, "nets.end_to_end_input_eem", "nets.end_to_end_params_eem"),
        (RegMode::Sem, "nets.end_to_end_input_sem", "nets.end_to_end_params_sem"),
    ] {
        let inst = E2eInstance::find(0, mode)?;
        items.push(SuiteItem::new(input_name, inst.input_error()?, COMPOSITE_TOL));
        items.push(SuiteItem::new(param_name, inst.param_error(12)?, COMPOSITE_TOL));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_pass() {
        let f = ClosedForms::default();
        assert!(closed_form_error(f.eem, RegMode::Eem).unwrap() <= CLOSED_FORM_TOL);
        assert!(closed_form_error(f.sem, RegMode::Sem).unwrap() <= CLOSED_FORM_TOL);
        assert!(stationary_error(f.eem, RegMode::Eem).unwrap() <= STATIONARY_TOL);
        assert!(stationary_error(f.sem, RegMode::Sem).unwrap() <= STATIONARY_TOL);
    }

    #[test]
    fn sign_flip_is_caught() {
        fn flipped(p1: f64) -> Result<f64> {
            prob::grad_neg_entropy_binary(p1).map(|g| -g)
        }
        assert!(closed_form_error(flipped, RegMode::Eem).unwrap() > 1.0);
    }

    #[test]
    fn objective_and_masking_items_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for item in objective_items(&mut rng).unwrap() {
            assert!(item.passed, "{item:?}");
        }
        let item = masking_item(&mut rng).unwrap();
        assert!(item.passed, "{item:?}");
    }
}
