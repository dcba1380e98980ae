//! Central finite-difference checks of tape gradients.
//!
//! The numeric side differentiates an f64 reference implementation of the
//! same computation, so f32 rounding in the forward kernels cannot swamp a
//! step of `1e-3`. The reference also pins the forward values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, Padding, Tensor, Var};
use crate::error::{Error, Result};

/// One partial derivative, computed both ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    /// Which input tensor was perturbed.
    pub input: usize,
    /// Flat element index within that input.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`; the floor keeps derivatives that
    /// are zero up to rounding from producing meaningless ratios.
    pub fn rel_err(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub probes: Vec<Probe>,
    /// Largest absolute gap between the tape's forward output and the reference.
    pub forward_err: f64,
}

impl Report {
    pub fn worst(&self, floor: f64) -> f64 {
        self.probes.iter().map(|p| p.rel_err(floor)).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `tape(inputs)` with central differences of
/// `reference` at `probes` random coordinates of every input. Both must
/// produce the same flat output; non-scalar outputs are reduced with fixed
/// random weights.
pub fn check_gradients(
    inputs: &[Tensor],
    tape: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    h: f64,
    probes: usize,
    seed: u64,
) -> Result<Report> {
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = tape(&mut g, &vars)?;
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let expected = reference(&base);
    let got = g.value(out).data();
    if got.len() != expected.len() {
        return Err(Error::shape(
            "gradcheck",
            format!("tape produced {} values, reference {}", got.len(), expected.len()),
        ));
    }
    let forward_err = got.iter().zip(&expected).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Option<Vec<f32>> =
        (got.len() > 1).then(|| (0..got.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let loss = match &weights {
        None => out,
        Some(w) => g.weighted_sum(out, w)?,
    };
    let grads = g.backward(loss)?;
    let reduce = |values: Vec<f64>| match &weights {
        None => values[0],
        Some(w) => values.iter().zip(w).map(|(v, &w)| v * w as f64).sum(),
    };

    let mut result = Vec::with_capacity(inputs.len() * probes);
    for (input, var) in vars.iter().enumerate() {
        let n = inputs[input].numel();
        let analytic = grads.get(*var);
        for _ in 0..probes.min(n) {
            let index = rng.random_range(0..n);
            let mut x = base.clone();
            x[input][index] = base[input][index] + h;
            let plus = reduce(reference(&x));
            x[input][index] = base[input][index] - h;
            let minus = reduce(reference(&x));
            result.push(Probe {
                input,
                index,
                analytic: analytic.map_or(0.0, |a| a[index] as f64),
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(Report {
        probes: result,
        forward_err,
    })
}

/// Plain-loop f64 versions of the layers, NHWC throughout.
mod reference {
    pub fn conv2d(
        x: &[f64],
        [n, h, w, c]: [usize; 4],
        k: &[f64],
        [kh, kw, co]: [usize; 3],
        bias: &[f64],
        stride: usize,
        same: bool,
    ) -> Vec<f64> {
        let (oh, ow, pt, pl) = if same {
            let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, ph / 2, pw / 2)
        } else {
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        };
        let mut out = Vec::with_capacity(n * oh * ow * co);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for f in 0..co {
                        let mut acc = bias[f];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xi = ((b * h + iy as usize) * w + ix as usize) * c + ci;
                                    acc += x[xi] * k[((ky * kw + kx) * c + ci) * co + f];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    pub fn dense(x: &[f64], batch: usize, w: &[f64], units: usize, bias: &[f64]) -> Vec<f64> {
        let features = x.len() / batch;
        let mut out = Vec::with_capacity(batch * units);
        for b in 0..batch {
            for u in 0..units {
                out.push(bias[u] + (0..features).map(|f| x[b * features + f] * w[f * units + u]).sum::<f64>());
            }
        }
        out
    }

    pub fn softmax(x: &[f64], cols: usize) -> Vec<f64> {
        x.chunks(cols)
            .flat_map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / s)
            })
            .collect()
    }

    pub fn cross_entropy(x: &[f64], cols: usize, labels: &[usize]) -> f64 {
        let p = softmax(x, cols);
        -labels.iter().enumerate().map(|(r, &l)| p[r * cols + l].ln()).sum::<f64>() / labels.len() as f64
    }

    /// `moments = None` normalizes with the biased batch moments.
    pub fn batchnorm(
        x: &[f64],
        c: usize,
        gamma: &[f64],
        beta: &[f64],
        moments: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Vec<f64> {
        let count = (x.len() / c) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match moments {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => (0..c)
                .map(|ch| {
                    let m = x.iter().skip(ch).step_by(c).sum::<f64>() / count;
                    let v = x.iter().skip(ch).step_by(c).map(|v| (v - m).powi(2)).sum::<f64>() / count;
                    (m, v)
                })
                .unzip(),
        };
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i % c;
                gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
            })
            .collect()
    }

    pub fn maxpool2(x: &[f64], [n, h, w, c]: [usize; 4]) -> Vec<f64> {
        let mut out = Vec::new();
        for b in 0..n {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    for ch in 0..c {
                        let at = |dy: usize, dx: usize| x[((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                        out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                    }
                }
            }
        }
        out
    }

    pub fn upsample2(x: &[f64], [n, h, w, c]: [usize; 4]) -> Vec<f64> {
        let mut out = Vec::new();
        for b in 0..n {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let src = ((b * h + oy / 2) * w + ox / 2) * c;
                    out.extend_from_slice(&x[src..src + c]);
                }
            }
        }
        out
    }
}

/// Finite-difference step used by [`op_suite`].
pub const SUITE_STEP: f64 = 1e-3;
/// Relative-error floor used when judging [`op_suite`] probes.
pub const SUITE_FLOOR: f64 = 1e-6;

/// Values spaced `gap` apart in random order and kept `gap / 2` away from
/// zero, so relu kinks and maxpool ties stay outside the stencil.
fn spaced(shape: Vec<usize>, gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, values).expect("shape matches")
}

fn uniform(shape: Vec<usize>, scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

/// Gradient checks for every differentiable layer on small random inputs,
/// with `probes` coordinates per input tensor.
pub fn op_suite(probes: usize, seed: u64) -> Result<Vec<(&'static str, Report)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = SUITE_STEP;
    let mut out = Vec::new();

    let dims = [2, 6, 6, 3];
    let x = uniform(dims.to_vec(), 1.0, &mut rng);
    let k = uniform(vec![3, 3, 3, 4], 0.5, &mut rng);
    let b = uniform(vec![4], 0.5, &mut rng);
    for (name, stride, padding) in [("conv2d same", 1, Padding::Same), ("conv2d strided valid", 2, Padding::Valid)] {
        let report = check_gradients(
            &[x.clone(), k.clone(), b.clone()],
            |g, v| g.conv2d(v[0], v[1], v[2], stride, padding),
            |v| reference::conv2d(&v[0], dims, &v[1], [3, 3, 4], &v[2], stride, padding == Padding::Same),
            h,
            probes,
            rng.random(),
        )?;
        out.push((name, report));
    }

    let x = uniform(vec![3, 7], 1.0, &mut rng);
    let w = uniform(vec![7, 5], 0.5, &mut rng);
    let b = uniform(vec![5], 0.5, &mut rng);
    let report = check_gradients(
        &[x, w, b],
        |g, v| g.dense(v[0], v[1], v[2]),
        |v| reference::dense(&v[0], 3, &v[1], 5, &v[2]),
        h,
        probes,
        rng.random(),
    )?;
    out.push(("dense", report));

    let x = spaced(vec![2, 4, 4, 2], 0.02, &mut rng);
    let report = check_gradients(
        &[x],
        |g, v| Ok(g.relu(v[0])),
        |v| v[0].iter().map(|x| x.max(0.0)).collect(),
        h,
        probes,
        rng.random(),
    )?;
    out.push(("relu", report));

    let x = uniform(vec![2, 4, 4, 2], 3.0, &mut rng);
    let report = check_gradients(
        &[x],
        |g, v| Ok(g.sigmoid(v[0])),
        |v| v[0].iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        h,
        probes,
        rng.random(),
    )?;
    out.push(("sigmoid", report));

    let x = uniform(vec![4, 7], 2.0, &mut rng);
    let report = check_gradients(
        &[x.clone()],
        |g, v| g.softmax(v[0]),
        |v| reference::softmax(&v[0], 7),
        h,
        probes,
        rng.random(),
    )?;
    out.push(("softmax", report));
    let labels = [0, 3, 6, 2];
    let report = check_gradients(
        &[x],
        |g, v| g.softmax_cross_entropy(v[0], &labels),
        |v| vec![reference::cross_entropy(&v[0], 7, &labels)],
        h,
        probes,
        rng.random(),
    )?;
    out.push(("softmax cross-entropy", report));

    let x = uniform(vec![2, 3, 3, 3], 1.0, &mut rng);
    let gamma = uniform(vec![3], 1.0, &mut rng);
    let beta = uniform(vec![3], 0.5, &mut rng);
    let eps = 1e-3f32;
    let zeros = [0.0f32; 3];
    let ones = [1.0f32; 3];
    let report = check_gradients(
        &[x.clone(), gamma.clone(), beta.clone()],
        |g, v| g.batchnorm2d(v[0], v[1], v[2], Mode::Train, (&zeros, &ones), eps).map(|(y, _)| y),
        |v| reference::batchnorm(&v[0], 3, &v[1], &v[2], None, eps as f64),
        h,
        probes,
        rng.random(),
    )?;
    out.push(("batchnorm train", report));
    let (mean, var) = ([0.1f32, -0.2, 0.0], [0.5f32, 1.5, 1.0]);
    let (mean64, var64) = (mean.map(f64::from), var.map(f64::from));
    let report = check_gradients(
        &[x, gamma, beta],
        |g, v| g.batchnorm2d(v[0], v[1], v[2], Mode::Infer, (&mean, &var), eps).map(|(y, _)| y),
        |v| reference::batchnorm(&v[0], 3, &v[1], &v[2], Some((&mean64, &var64)), eps as f64),
        h,
        probes,
        rng.random(),
    )?;
    out.push(("batchnorm infer", report));

    let dims = [2, 6, 6, 2];
    let x = spaced(dims.to_vec(), 0.02, &mut rng);
    let report =
        check_gradients(&[x], |g, v| g.maxpool2d(v[0]), |v| reference::maxpool2(&v[0], dims), h, probes, rng.random())?;
    out.push(("maxpool2d", report));

    let dims = [2, 3, 3, 2];
    let x = uniform(dims.to_vec(), 1.0, &mut rng);
    let report =
        check_gradients(&[x], |g, v| g.upsample2d(v[0]), |v| reference::upsample2(&v[0], dims), h, probes, rng.random())?;
    out.push(("upsample2d", report));

    Ok(out)
}
