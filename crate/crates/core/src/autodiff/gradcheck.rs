//! Central finite-difference oracle for graph gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Absolute floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// Flat index where the largest error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with an absolute floor.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval(f: &impl Fn(&mut Graph, Var) -> Result<Var>, x: Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.param(x);
    let root = f(&mut g, xv)?;
    g.scalar(root)
}

/// Compares `backward()` of the scalar graph built by `f` at `x` against
/// central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`, componentwise.
pub fn finite_diff_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step {h} must be positive")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let root = f(&mut g, xv)?;
    let grads = g.backward(root)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.data().first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = rel_error(a, numeric);
        if i == 0 || err > report.max_rel_error {
            report = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Scalar readout `Σ wᵢ yᵢ` with fixed irregular weights, so every output
    /// component contributes a distinct amount.
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

    #[test]
    fn square_is_exact() {
        let r = finite_diff_check(|g, x| g.mul(x, x), &Tensor::scalar(3.0), 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn entropy_of_softmax() {
        let z = random(&[5], 1, -2.0, 2.0);
        let r = finite_diff_check(
            |g, x| {
                let p = g.softmax(x)?;
                let lp = g.log(p);
                let plp = g.mul(p, lp)?;
                let s = g.sum(plp);
                Ok(g.scale(s, -1.0))
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn elementwise_ops() {
        let x = random(&[3, 4], 2, 0.2, 2.0);
        type Build = fn(&mut Graph, Var) -> Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("log", |g, x| Ok(g.log(x))),
            ("exp", |g, x| Ok(g.exp(x))),
            ("scale", |g, x| Ok(g.scale(x, -2.5))),
            ("add_scalar", |g, x| Ok(g.add_scalar(x, 0.3))),
            ("sigmoid", |g, x| Ok(g.scaled_sigmoid(x, 5.0, 0.15))),
            ("mul", |g, x| g.mul(x, x)),
            ("add", |g, x| {
                let e = g.exp(x);
                g.add(x, e)
            }),
            ("sub", |g, x| {
                let e = g.log(x);
                g.sub(e, x)
            }),
            ("clamp", |g, x| Ok(g.clamp(x, 0.0, 10.0))),
            ("relu", |g, x| {
                let s = g.add_scalar(x, -1.1);
                Ok(g.relu(s))
            }),
            ("reshape", |g, x| g.reshape(x, vec![12])),
        ];
        for (name, f) in cases {
            let r = finite_diff_check(|g, x| {
                let y = f(g, x)?;
                readout(g, y)
            }, &x, 1e-6)
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn structural_ops() {
        let img = random(&[6, 4, 4], 3, -1.0, 1.0);
        type Build = fn(&mut Graph, Var) -> Result<Var>;
        let cases: Vec<(&str, Build)> = vec![
            ("mean_pool2", |g, x| g.mean_pool2(x)),
            ("spatial_mean", |g, x| g.spatial_mean(x)),
            ("channel_sum", |g, x| g.channel_sum(x)),
            ("group_mean", |g, x| g.group_mean(x, 3)),
            ("top_k", |g, x| g.top_k_mean(x, 5)),
            ("bottom_k", |g, x| g.bottom_k_mean(x, 3)),
            ("min_max", |g, x| {
                let s = g.channel_sum(x)?;
                Ok(g.min_max_normalize(s))
            }),
            ("upsample", |g, x| {
                let s = g.channel_sum(x)?;
                g.upsample_bilinear(s, 7, 9)
            }),
            ("mul_channels", |g, x| {
                let s = g.channel_sum(x)?;
                g.mul_channels(x, s)
            }),
            ("weighted_channel_sum", |g, x| {
                let w = g.spatial_mean(x)?;
                g.weighted_channel_sum(x, w)
            }),
            ("softmax", |g, x| {
                let m = g.spatial_mean(x)?;
                g.softmax(m)
            }),
            ("index", |g, x| {
                let m = g.spatial_mean(x)?;
                let p = g.softmax(m)?;
                g.index(p, 2)
            }),
        ];
        for (name, f) in cases {
            let r = finite_diff_check(|g, x| {
                let y = f(g, x)?;
                readout(g, y)
            }, &img, 1e-6)
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "{name}: {r:?}");
        }
    }

    #[test]
    fn matmul_both_sides() {
        let a = random(&[3, 4], 4, -1.0, 1.0);
        let b = random(&[4, 2], 5, -1.0, 1.0);
        let bc = b.clone();
        let r = finite_diff_check(
            move |g, x| {
                let bv = g.constant(bc.clone());
                let y = g.matmul(x, bv)?;
                readout(g, y)
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        let r = finite_diff_check(
            move |g, x| {
                let av = g.constant(a.clone());
                let y = g.matmul(av, x)?;
                readout(g, y)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn conv_gradients_against_finite_differences() {
        let input = random(&[2, 5, 5], 6, -1.0, 1.0);
        let weight = random(&[3, 2, 3, 3], 7, -0.5, 0.5);
        let bias = random(&[3], 8, -0.5, 0.5);
        let (w2, b2) = (weight.clone(), bias.clone());
        let r = finite_diff_check(
            move |g, x| {
                let w = g.constant(w2.clone());
                let b = g.constant(b2.clone());
                let y = g.conv2d(x, w, b)?;
                readout(g, y)
            },
            &input,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "input: {r:?}");
        let (i2, b3) = (input.clone(), bias.clone());
        let r = finite_diff_check(
            move |g, w| {
                let x = g.constant(i2.clone());
                let b = g.constant(b3.clone());
                let y = g.conv2d(x, w, b)?;
                readout(g, y)
            },
            &weight,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "weight: {r:?}");
        let r = finite_diff_check(
            move |g, b| {
                let x = g.constant(input.clone());
                let w = g.constant(weight.clone());
                let y = g.conv2d(x, w, b)?;
                readout(g, y)
            },
            &bias,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "bias: {r:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_check(|g, x| g.mul(x, x), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
