//! Non-parametric per-channel density for latents without side information.
//!
//! Each channel owns a small monotone network mapping a real value to the
//! logit of its cumulative distribution. Bin masses are differences of the
//! CDF half a unit either side of the value.

use ndarray::Array4;
use rand::Rng;

use super::LIKELIHOOD_FLOOR;
use crate::nn::layers::{sigmoid, softplus};
use crate::nn::Param;

#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    /// `[channels, out, in]`, passed through softplus to keep the map monotone.
    pub matrices: Vec<Param>,
    /// `[channels, out]`
    pub biases: Vec<Param>,
    /// `[channels, out]`, passed through tanh; one fewer than `matrices`.
    pub factors: Vec<Param>,
    channels: usize,
    dims: Vec<usize>,
}

crate::impl_module!(FactorizedDensity { matrices, biases, factors });

/// Parameter transforms evaluated once per call.
struct Prepared {
    sp: Vec<Vec<f64>>,
    sig: Vec<Vec<f64>>,
    ta: Vec<Vec<f64>>,
}

/// Per-evaluation activations kept for the backward pass.
struct Trace {
    h: Vec<f64>,
    u: Vec<f64>,
}

struct Grads {
    dh: Vec<Vec<f64>>,
    db: Vec<Vec<f64>>,
    da: Vec<Vec<f64>>,
}

impl FactorizedDensity {
    /// `filters` are the hidden widths, e.g. `[3, 3, 3, 3]`.
    pub fn new<R: Rng + ?Sized>(channels: usize, filters: &[usize], init_scale: f64, rng: &mut R) -> Self {
        let mut dims = vec![1];
        dims.extend_from_slice(filters);
        dims.push(1);
        let layers = dims.len() - 1;
        let scale = init_scale.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..layers {
            let (din, dout) = (dims[k], dims[k + 1]);
            let init = (1.0 / scale / dout as f64).exp_m1().ln();
            matrices.push(Param::filled(&[channels, dout, din], init));
            biases.push(Param::uniform(&[channels, dout], 0.5, rng));
            if k + 1 < layers {
                factors.push(Param::zeros(&[channels, dout]));
            }
        }
        FactorizedDensity {
            matrices,
            biases,
            factors,
            channels,
            dims,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn prepare(&self) -> Prepared {
        Prepared {
            sp: self.matrices.iter().map(|m| m.value.iter().map(|&v| softplus(v)).collect()).collect(),
            sig: self.matrices.iter().map(|m| m.value.iter().map(|&v| sigmoid(v)).collect()).collect(),
            ta: self.factors.iter().map(|f| f.value.iter().map(|&v| v.tanh()).collect()).collect(),
        }
    }

    fn trace_len(&self) -> (usize, usize) {
        let layers = self.layers();
        (self.dims[..layers].iter().sum(), self.dims[1..].iter().sum())
    }

    fn logit(&self, prep: &Prepared, c: usize, x: f64, trace: Option<&mut Trace>) -> f64 {
        let mut buf = [0.0f64; 16];
        let mut next = [0.0f64; 16];
        buf[0] = x;
        let mut tr = trace;
        let (mut ho, mut uo) = (0, 0);
        for k in 0..self.layers() {
            let (din, dout) = (self.dims[k], self.dims[k + 1]);
            if let Some(t) = tr.as_deref_mut() {
                t.h[ho..ho + din].copy_from_slice(&buf[..din]);
            }
            let m = &prep.sp[k][c * dout * din..(c + 1) * dout * din];
            let b = &self.biases[k].value.as_slice().unwrap()[c * dout..(c + 1) * dout];
            for o in 0..dout {
                let mut acc = b[o];
                for i in 0..din {
                    acc += m[o * din + i] * buf[i];
                }
                next[o] = acc;
            }
            if let Some(t) = tr.as_deref_mut() {
                t.u[uo..uo + dout].copy_from_slice(&next[..dout]);
            }
            if k + 1 < self.layers() {
                let a = &prep.ta[k][c * dout..(c + 1) * dout];
                for o in 0..dout {
                    next[o] += a[o] * next[o].tanh();
                }
            }
            buf[..dout].copy_from_slice(&next[..dout]);
            ho += din;
            uo += dout;
        }
        buf[0]
    }

    /// Propagates `g = dL/dlogit` back through one evaluation; returns `dL/dx`.
    fn backward(&self, prep: &Prepared, c: usize, trace: &Trace, g: f64, grads: Option<&mut Grads>) -> f64 {
        let mut gbuf = [0.0f64; 16];
        let mut gprev = [0.0f64; 16];
        gbuf[0] = g;
        let layers = self.layers();
        let mut ho: usize = self.dims[..layers].iter().sum();
        let mut uo: usize = self.dims[1..].iter().sum();
        let mut grads = grads;
        for k in (0..layers).rev() {
            let (din, dout) = (self.dims[k], self.dims[k + 1]);
            ho -= din;
            uo -= dout;
            let u = &trace.u[uo..uo + dout];
            let h = &trace.h[ho..ho + din];
            if k + 1 < layers {
                let a = &prep.ta[k][c * dout..(c + 1) * dout];
                for o in 0..dout {
                    let t = u[o].tanh();
                    if let Some(gr) = grads.as_deref_mut() {
                        gr.da[k][c * dout + o] += gbuf[o] * t * (1.0 - a[o] * a[o]);
                    }
                    gbuf[o] *= 1.0 + a[o] * (1.0 - t * t);
                }
            }
            let m = &prep.sp[k][c * dout * din..(c + 1) * dout * din];
            let sg = &prep.sig[k][c * dout * din..(c + 1) * dout * din];
            for i in 0..din {
                gprev[i] = 0.0;
            }
            for o in 0..dout {
                for i in 0..din {
                    gprev[i] += m[o * din + i] * gbuf[o];
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                for o in 0..dout {
                    gr.db[k][c * dout + o] += gbuf[o];
                    for i in 0..din {
                        let j = c * dout * din + o * din + i;
                        gr.dh[k][j] += gbuf[o] * h[i] * sg[o * din + i];
                    }
                }
            }
            gbuf[..din].copy_from_slice(&gprev[..din]);
        }
        gbuf[0]
    }

    fn new_trace(&self) -> Trace {
        let (hl, ul) = self.trace_len();
        Trace {
            h: vec![0.0; hl],
            u: vec![0.0; ul],
        }
    }

    /// Cumulative probability `P(X <= x)` for channel `c`.
    pub fn cdf(&self, c: usize, x: f64) -> f64 {
        let prep = self.prepare();
        sigmoid(self.logit(&prep, c, x, None))
    }

    /// Unfloored mass of the unit bin centered at `x`.
    pub fn bin_mass(&self, c: usize, x: f64) -> f64 {
        let prep = self.prepare();
        self.bin_mass_prepared(&prep, c, x)
    }

    fn bin_mass_prepared(&self, prep: &Prepared, c: usize, x: f64) -> f64 {
        let lo = self.logit(prep, c, x - 0.5, None);
        let up = self.logit(prep, c, x + 0.5, None);
        let s = if lo + up > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * up) - sigmoid(s * lo)).abs()
    }

    /// Folded probabilities for the integer support `[lo, hi]`: the two edge
    /// symbols absorb all mass beyond the range.
    pub fn support_pmf(&self, c: usize, lo: i32, hi: i32) -> Vec<f64> {
        let prep = self.prepare();
        (lo..=hi)
            .map(|s| {
                let x = s as f64;
                if lo == hi {
                    1.0
                } else if s == lo {
                    sigmoid(self.logit(&prep, c, x + 0.5, None))
                } else if s == hi {
                    sigmoid(-self.logit(&prep, c, x - 0.5, None))
                } else {
                    self.bin_mass_prepared(&prep, c, x)
                }
            })
            .collect()
    }

    /// Floored per-element likelihoods; `x` is `[n, channels, h, w]`.
    pub fn likelihoods(&self, x: &Array4<f64>) -> Array4<f64> {
        assert_eq!(x.dim().1, self.channels, "channel count");
        let prep = self.prepare();
        let mut out = x.as_standard_layout().to_owned();
        let (_, c, h, w) = x.dim();
        let hw = h * w;
        for (i, v) in out.as_slice_mut().unwrap().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = self.bin_mass_prepared(&prep, ch, *v).max(LIKELIHOOD_FLOOR);
        }
        out
    }

    /// Total bits `sum -log2 p(x)`.
    pub fn bits(&self, x: &Array4<f64>) -> f64 {
        self.likelihoods(x).iter().map(|p| -p.log2()).sum()
    }

    /// Total bits, their gradient with respect to `x` scaled by `x_scale`,
    /// and (when the parameters are trainable) accumulation of
    /// `param_scale * dbits/dtheta` into the parameter gradients.
    pub fn bits_and_grad(&mut self, x: &Array4<f64>, x_scale: f64, param_scale: f64) -> (f64, Array4<f64>) {
        assert_eq!(x.dim().1, self.channels, "channel count");
        let prep = self.prepare();
        let want = self.matrices.iter().any(|m| m.wants_grad()) && param_scale != 0.0;
        let mut grads = Grads {
            dh: self.matrices.iter().map(|m| vec![0.0; m.value.len()]).collect(),
            db: self.biases.iter().map(|m| vec![0.0; m.value.len()]).collect(),
            da: self.factors.iter().map(|m| vec![0.0; m.value.len()]).collect(),
        };
        let (_, c, h, w) = x.dim();
        let hw = h * w;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut dx = vec![0.0; xs.len()];
        let mut tl = self.new_trace();
        let mut tu = self.new_trace();
        let mut total = 0.0;
        for (i, &v) in xs.iter().enumerate() {
            let ch = (i / hw) % c;
            let lo = self.logit(&prep, ch, v - 0.5, Some(&mut tl));
            let up = self.logit(&prep, ch, v + 0.5, Some(&mut tu));
            let s = if lo + up > 0.0 { -1.0 } else { 1.0 };
            let (su, sl) = (sigmoid(s * up), sigmoid(s * lo));
            let d = su - sl;
            let p = d.abs();
            if p.is_nan() {
                total = f64::NAN;
                continue;
            }
            if p < LIKELIHOOD_FLOOR {
                total += -LIKELIHOOD_FLOOR.log2();
                continue;
            }
            total += -p.log2();
            let dbits_dp = -1.0 / (p * std::f64::consts::LN_2);
            let sgn = d.signum();
            let dp_du = sgn * s * su * (1.0 - su);
            let dp_dl = -sgn * s * sl * (1.0 - sl);
            let gu = dbits_dp * dp_du;
            let gl = dbits_dp * dp_dl;
            let gr = if want { Some(&mut grads) } else { None };
            let dxu = self.backward(&prep, ch, &tu, gu, gr);
            let gr = if want { Some(&mut grads) } else { None };
            let dxl = self.backward(&prep, ch, &tl, gl, gr);
            dx[i] = x_scale * (dxu + dxl);
        }
        if want {
            for (p, g) in self.matrices.iter_mut().zip(&grads.dh) {
                p.grad.as_slice_mut().unwrap().iter_mut().zip(g).for_each(|(a, b)| *a += param_scale * b);
            }
            for (p, g) in self.biases.iter_mut().zip(&grads.db) {
                p.grad.as_slice_mut().unwrap().iter_mut().zip(g).for_each(|(a, b)| *a += param_scale * b);
            }
            for (p, g) in self.factors.iter_mut().zip(&grads.da) {
                p.grad.as_slice_mut().unwrap().iter_mut().zip(g).for_each(|(a, b)| *a += param_scale * b);
            }
        }
        (total, Array4::from_shape_vec(x.dim(), dx).unwrap())
    }
}
