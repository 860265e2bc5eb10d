//! End-to-end training of the localizer/classifier pair and the test-time
//! pipeline (localizer → mask → classifier on the foreground image).

use std::fmt::Write as _;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, pseudo_binarize, BinaryMask, SoftMask};
use crate::metrics::MetricsReport;
use crate::nets::{
    classifier_forward, classifier_graph, localizer_forward, localizer_graph, ModelParams,
    NetConfig, ParamVars, PoolConfig,
};
use crate::objective::{objective_graph, t_schedule, LossBreakdown, LossConfig};
use crate::prob::Posterior;
use crate::synthdata::{Dataset, LabeledImage};
use crate::tensor::Tensor;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MAXMIN_WSL_THREADS";

/// Soft masks are foreground where the value is at least this.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub at_epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lr_decay: Vec<LrDecay>,
    pub loss: LossConfig,
    pub pool: PoolConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            lr_decay: Vec::new(),
            loss: LossConfig::default(),
            pool: PoolConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "train.weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        for d in &self.lr_decay {
            if !(d.factor > 0.0) || !d.factor.is_finite() {
                return Err(Error::Config(format!("lr decay factor {} must be > 0", d.factor)));
            }
        }
        self.loss.validate()?;
        self.pool.validate()
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_decay
            .iter()
            .filter(|d| d.at_epoch <= epoch)
            .fold(self.lr, |lr, d| lr * d.factor)
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        OptimizerState {
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `g = grad + wd·param; v = μv + g; param −= lr·(g + μv)`.
pub fn sgd_nesterov_update(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    grad.expect_shape(param.shape())?;
    velocity.expect_shape(param.shape())?;
    for ((p, &gr), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = gr + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
    Ok(())
}

/// Worker count from the environment, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to `threads` workers; results keep input order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Graph handles of one training sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub loss: crate::objective::LossVars,
    pub mask_plus: Var,
    pub p_plus: Var,
    pub p_full: Var,
}

/// Builds the full per-sample objective: localizer, pseudo-binarized mask,
/// masked images through the classifier, and the loss terms.
///
/// When `λ = 0` the background branch only feeds the reported regularizer,
/// so it is evaluated on detached copies and skipped by the backward pass.
pub fn sample_graph(
    g: &mut Graph,
    x: Var,
    label: usize,
    pv: &ParamVars,
    params: &ModelParams,
    cfg: &TrainConfig,
    t: f64,
) -> Result<SampleVars> {
    let net = params.config();
    let loc = localizer_graph(g, x, pv, net, &cfg.pool)?;
    let m_plus = g.scaled_sigmoid(loc.raw_mask, cfg.loss.omega, cfg.loss.sigma);
    let neg = g.scale(m_plus, -1.0);
    let m_minus = g.add_scalar(neg, 1.0);
    let x_plus = g.mul_channels(x, m_plus)?;
    let p_plus = classifier_graph(g, x_plus, pv, net, &cfg.pool)?;
    let p_minus = if cfg.loss.lambda == 0.0 {
        let xv = g.value(x).clone();
        let mv = g.value(m_minus).clone();
        let xc = g.constant(xv);
        let mc = g.constant(mv);
        let x_minus = g.mul_channels(xc, mc)?;
        let frozen = params.attach(g, false);
        classifier_graph(g, x_minus, &frozen, net, &cfg.pool)?
    } else {
        let x_minus = g.mul_channels(x, m_minus)?;
        classifier_graph(g, x_minus, pv, net, &cfg.pool)?
    };
    let loss = objective_graph(g, label, p_plus, p_minus, loc.posterior, m_plus, &cfg.loss, t)?;
    Ok(SampleVars {
        loss,
        mask_plus: m_plus,
        p_plus,
        p_full: loc.posterior,
    })
}

struct SampleGrad {
    loss: LossBreakdown,
    grads: Vec<Tensor>,
    correct: bool,
}

fn sample_gradient(
    img: &LabeledImage,
    params: &ModelParams,
    cfg: &TrainConfig,
    t: f64,
) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let pv = params.attach(&mut g, true);
    let x = g.constant(img.pixels.clone());
    let sv = sample_graph(&mut g, x, img.label, &pv, params, cfg, t)?;
    let loss = sv.loss.breakdown(&g)?;
    let probs = g.value(sv.p_plus).data();
    // a non-finite posterior also makes the loss non-finite; the caller reports it
    let predicted = if probs.iter().all(|p| p.is_finite()) {
        Posterior::new(probs.to_vec())?.argmax()
    } else {
        usize::MAX
    };
    let mut grads = g.backward(sv.loss.optimized)?;
    let grads = pv
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(SampleGrad {
        loss,
        grads,
        correct: predicted == img.label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean over the batch, evaluated before the update.
    pub loss: LossBreakdown,
    /// Batch samples whose foreground posterior argmax matched the label.
    pub correct: usize,
}

/// One optimization step on `batch`: per-sample objectives averaged, one
/// backward per sample, one Nesterov-SGD update of every parameter.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[&LabeledImage],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    t: f64,
    lr: f64,
    step: usize,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let shape = batch[0].pixels.shape();
    if let Some(bad) = batch.iter().find(|i| i.pixels.shape() != shape) {
        return Err(Error::Shape(format!(
            "batch mixes image shapes {shape:?} and {:?}",
            bad.pixels.shape()
        )));
    }
    let frozen: &ModelParams = params;
    let per_sample = par_map(batch, worker_threads(), |img| sample_gradient(img, frozen, cfg, t))?;
    let losses: Vec<LossBreakdown> = per_sample.iter().map(|s| s.loss).collect();
    let loss = LossBreakdown::mean(&losses);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{loss:?}"),
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Tensor> = params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for s in &per_sample {
        for (acc, g) in total.iter_mut().zip(&s.grads) {
            acc.axpy(scale, g)?;
        }
    }
    if let Some(i) = total.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("gradient of {} is non-finite; loss {loss:?}", crate::nets::PARAM_NAMES[i]),
        });
    }
    for ((p, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(&total)
        .zip(opt.velocity.iter_mut())
    {
        sgd_nesterov_update(p, g, v, lr, cfg.momentum, cfg.weight_decay)?;
    }
    if let Some(i) = params.tensors().iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("{} is non-finite after the update; loss {loss:?}", crate::nets::PARAM_NAMES[i]),
        });
    }
    Ok(StepOutcome {
        loss,
        correct: per_sample.iter().filter(|s| s.correct).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub t: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Index of the last step of the epoch.
    pub step: usize,
    pub t: f64,
    pub lr: f64,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    /// Percent, from the pre-update foreground predictions seen during the epoch.
    pub train_error: f64,
    /// Percent on the validation split after the epoch, if there is one.
    pub val_error: Option<f64>,
}

const LOSS_COLUMNS: &str = "ce_fg,reg_bg,barrier,ce_full,total";

fn loss_fields(l: &LossBreakdown) -> String {
    format!("{},{},{},{},{}", l.ce_fg, l.reg_bg, l.barrier, l.ce_full, l.total)
}

pub fn steps_csv(steps: &[StepLog]) -> String {
    let mut s = format!("step,epoch,t,{LOSS_COLUMNS}\n");
    for r in steps {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.epoch, r.t, loss_fields(&r.loss));
    }
    s
}

pub fn epochs_csv(epochs: &[EpochLog]) -> String {
    let mut s = format!("step,epoch,t,{LOSS_COLUMNS},lr,train_error,val_error\n");
    for r in epochs {
        let val = r.val_error.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{val}",
            r.step,
            r.epoch,
            r.t,
            loss_fields(&r.loss),
            r.lr,
            r.train_error
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Parameters of the epoch with the lowest validation error (latest on
    /// ties); the final parameters when there is no validation split.
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn fit(ds: &Dataset, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with(ds, cfg, |_, _| Ok(()))
}

/// Like [`fit`], calling `on_epoch` after every epoch with its log entry and
/// the current parameters.
pub fn fit_with(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<FitResult> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let mut params = ModelParams::init(cfg.net.clone(), cfg.seed)?;
    let mut opt = OptimizerState::zeros_like(&params);
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_val = f64::INFINITY;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let t = t_schedule(epoch, &cfg.loss);
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(ds.train.len(), cfg.seed, epoch);
        let mut epoch_losses = Vec::new();
        let mut correct = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = idx.iter().map(|&i| &ds.train[i]).collect();
            let out = train_step(&batch, &mut params, &mut opt, cfg, t, lr, step)?;
            correct += out.correct;
            epoch_losses.push(out.loss);
            steps.push(StepLog {
                step,
                epoch,
                t,
                loss: out.loss,
            });
            step += 1;
        }
        let val_error = if ds.val.is_empty() {
            None
        } else {
            // inputs were already accepted by training, so a rejection here comes from the weights
            let eval = evaluate(&ds.val, &params, cfg).map_err(|e| match e {
                Error::InvalidInput(detail) => Error::NonFiniteLoss {
                    step: step - 1,
                    detail: format!("validation forward pass: {detail}"),
                },
                other => other,
            })?;
            Some(eval.report.cl_error)
        };
        let log = EpochLog {
            epoch,
            step: step - 1,
            t,
            lr,
            loss: LossBreakdown::mean(&epoch_losses),
            train_error: 100.0 * (1.0 - correct as f64 / ds.train.len() as f64),
            val_error,
        };
        match val_error {
            Some(v) if v <= best_val => {
                best_val = v;
                best = params.clone();
                best_epoch = Some(epoch);
            }
            None => {
                best = params.clone();
                best_epoch = Some(epoch);
            }
            _ => {}
        }
        on_epoch(&log, &params)?;
        epochs.push(log);
    }
    Ok(FitResult {
        params,
        best,
        best_epoch,
        epochs,
        steps,
    })
}

/// Test-time output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Classifier posterior on the foreground image.
    pub p_plus: Posterior,
    /// Localizer posterior on the full image.
    pub p_full: Posterior,
    pub mask: SoftMask,
}

/// Localizer, pseudo-binarized mask, classifier on `X ⊙ M⁺`, argmax.
pub fn predict(x: &Tensor, params: &ModelParams, cfg: &TrainConfig) -> Result<Prediction> {
    let loc = localizer_forward(x, params, &cfg.pool)?;
    let mask = pseudo_binarize(&loc.raw_mask, cfg.loss.omega, cfg.loss.sigma)?;
    let p_plus = classifier_forward(&apply_mask(x, &mask)?, params, &cfg.pool)?;
    Ok(Prediction {
        label: p_plus.argmax(),
        p_plus,
        p_full: loc.posterior,
        mask,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn binary_masks(&self) -> Vec<BinaryMask> {
        self.predictions
            .iter()
            .map(|p| p.mask.binarize(MASK_THRESHOLD))
            .collect()
    }
}

/// Predicts every image and scores labels and masks.
pub fn evaluate(images: &[LabeledImage], params: &ModelParams, cfg: &TrainConfig) -> Result<Evaluation> {
    let predictions = par_map(images, worker_threads(), |img| predict(&img.pixels, params, cfg))?;
    let preds: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let truths: Vec<usize> = images.iter().map(|i| i.label).collect();
    let masks: Vec<BinaryMask> = predictions
        .iter()
        .map(|p| p.mask.binarize(MASK_THRESHOLD))
        .collect();
    let gts: Vec<BinaryMask> = images.iter().map(|i| i.gt_mask.clone()).collect();
    Ok(Evaluation {
        report: MetricsReport::compute(&preds, &truths, &masks, &gts)?,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GenConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                widths: [4, 6, 6],
                modalities: 2,
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn toy_images(n: usize, size: usize) -> Vec<LabeledImage> {
        let ds = generate(&GenConfig {
            height: size,
            width: size,
            train_per_class: n.div_ceil(2),
            val_per_class: 0,
            test_per_class: 0,
            stripe_period: 4.0,
            dot_period: 4.0,
            ..GenConfig::default()
        })
        .unwrap();
        ds.train.into_iter().take(n).collect()
    }

    #[test]
    fn nesterov_examples() {
        let mut p = Tensor::scalar(1.0);
        let mut v = Tensor::scalar(0.0);
        sgd_nesterov_update(&mut p, &Tensor::scalar(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_abs_diff_eq!(p.item().unwrap(), 0.81, epsilon = 1e-15);
        assert_eq!(v.item().unwrap(), 1.0);

        let mut p = Tensor::from_vec(vec![2.0, -1.0]);
        let mut v = Tensor::zeros(&[2]);
        sgd_nesterov_update(&mut p, &Tensor::from_vec(vec![0.5, 1.0]), &mut v, 0.2, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.9, -1.2]);

        let mut p = Tensor::scalar(3.0);
        let mut v = Tensor::scalar(0.0);
        sgd_nesterov_update(&mut p, &Tensor::scalar(0.0), &mut v, 0.5, 0.9, 0.0).unwrap();
        assert_eq!(p.item().unwrap(), 3.0);
    }

    #[test]
    fn lr_decay_schedule() {
        let cfg = TrainConfig {
            lr: 0.1,
            lr_decay: vec![
                LrDecay { at_epoch: 2, factor: 0.5 },
                LrDecay { at_epoch: 4, factor: 0.1 },
            ],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(2), 0.05);
        assert_abs_diff_eq!(cfg.lr_at(7), 0.005, epsilon = 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cfg = tiny_cfg();
        let imgs = toy_images(2, 16);
        let batch: Vec<&LabeledImage> = imgs.iter().collect();
        let mut params = ModelParams::init(cfg.net.clone(), 3).unwrap();
        let before = params.clone();
        let mut opt = OptimizerState::zeros_like(&params);
        let out = train_step(&batch, &mut params, &mut opt, &cfg, 5.0, 0.0, 0).unwrap();
        assert_eq!(params, before);
        assert!(out.loss.is_finite() && out.loss.total > 0.0);
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = tiny_cfg();
        let imgs = toy_images(2, 16);
        let batch: Vec<&LabeledImage> = imgs.iter().collect();
        let run = || {
            let mut params = ModelParams::init(cfg.net.clone(), 3).unwrap();
            let mut opt = OptimizerState::zeros_like(&params);
            train_step(&batch, &mut params, &mut opt, &cfg, 5.0, 0.01, 0).unwrap();
            (params, opt)
        };
        let (a, va) = run();
        let (b, vb) = run();
        assert_eq!(a, b);
        assert_eq!(va, vb);
    }

    #[test]
    fn descends_on_a_toy_sample() {
        let cfg = tiny_cfg();
        let imgs = toy_images(1, 16);
        let batch: Vec<&LabeledImage> = imgs.iter().collect();
        let mut params = ModelParams::init(cfg.net.clone(), 1).unwrap();
        let mut opt = OptimizerState::zeros_like(&params);
        let mut losses = Vec::new();
        for step in 0..11 {
            let out = train_step(&batch, &mut params, &mut opt, &cfg, 5.0, 0.01, step).unwrap();
            losses.push(out.loss.optimized());
        }
        assert!(losses[10] < losses[0], "{losses:?}");
        assert!(losses[2] < losses[0], "{losses:?}");
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let cfg = tiny_cfg();
        let imgs = toy_images(2, 16);
        let params = ModelParams::init(cfg.net.clone(), 2).unwrap();
        let a = sample_gradient(&imgs[0], &params, &cfg, 5.0).unwrap();
        let b = sample_gradient(&imgs[1], &params, &cfg, 5.0).unwrap();
        // with momentum 0 and no decay the update is exactly −lr · mean gradient
        let plain = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..cfg.clone()
        };
        let mut p = params.clone();
        let mut opt = OptimizerState::zeros_like(&p);
        let batch: Vec<&LabeledImage> = imgs.iter().collect();
        train_step(&batch, &mut p, &mut opt, &plain, 5.0, 1.0, 0).unwrap();
        for i in 0..p.len() {
            for j in 0..p.tensors()[i].len() {
                let want = params.tensors()[i].data()[j]
                    - 0.5 * (a.grads[i].data()[j] + b.grads[i].data()[j]);
                assert_abs_diff_eq!(p.tensors()[i].data()[j], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn detached_background_branch_matches_full_graph_when_lambda_is_zero() {
        let imgs = toy_images(1, 16);
        let cfg = TrainConfig {
            loss: LossConfig {
                lambda: 0.0,
                ..LossConfig::default()
            },
            ..tiny_cfg()
        };
        let params = ModelParams::init(cfg.net.clone(), 4).unwrap();
        let detached = sample_gradient(&imgs[0], &params, &cfg, 5.0).unwrap();
        let tiny = TrainConfig {
            loss: LossConfig {
                lambda: 1e-300,
                ..cfg.loss
            },
            ..cfg.clone()
        };
        let attached = sample_gradient(&imgs[0], &params, &tiny, 5.0).unwrap();
        assert_eq!(detached.loss.reg_bg, attached.loss.reg_bg);
        for (x, y) in detached.grads.iter().zip(&attached.grads) {
            assert!(x.max_abs_diff(y) <= 1e-15);
        }
    }

    #[test]
    fn fit_contracts() {
        let ds = generate(&GenConfig {
            height: 16,
            width: 16,
            train_per_class: 3,
            val_per_class: 1,
            test_per_class: 0,
            stripe_period: 4.0,
            dot_period: 4.0,
            ..GenConfig::default()
        })
        .unwrap();
        let zero = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let r = fit(&ds, &zero).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.params, ModelParams::init(zero.net.clone(), zero.seed).unwrap());

        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let mut seen = 0;
        let r = fit_with(&ds, &cfg, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 3);
        assert_eq!(r.epochs.len(), 3);
        assert_eq!(r.steps.len(), 3 * 2);
        assert!(r.epochs.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(r.best_epoch.is_some());
        let again = fit(&ds, &cfg).unwrap();
        assert_eq!(again.params, r.params);
        assert_eq!(again.epochs, r.epochs);
        assert_eq!(epochs_csv(&r.epochs).lines().count(), 4);
        assert!(steps_csv(&r.steps).starts_with("step,epoch,t,ce_fg,reg_bg,barrier,ce_full,total\n"));
    }

    #[test]
    fn evaluation_follows_foreground_posterior() {
        let cfg = tiny_cfg();
        let imgs = toy_images(4, 16);
        let params = ModelParams::init(cfg.net.clone(), 9).unwrap();
        let ev = evaluate(&imgs, &params, &cfg).unwrap();
        assert_eq!(ev.predictions.len(), 4);
        for p in &ev.predictions {
            assert_eq!(p.label, p.p_plus.argmax());
        }
        assert_eq!(ev.report.confusion.total(), 4 * 256);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
