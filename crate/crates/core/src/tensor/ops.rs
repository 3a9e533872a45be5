//! Operation constructors for the gradient tape.
//!
//! Shape mismatches panic: the model builder guarantees consistent shapes, so
//! a violation here is a programming error, not a runtime condition. The only
//! fallible ops are the positive-definite factorizations, which surface
//! `Error::Numerics`.

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::error::Result;

use super::conv::{self, Pad};
use super::linalg;
use super::{Scalar, Tape, Var};

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [C,H,W], got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got {shape:?}");
    (shape[0], shape[1])
}

impl<S: Scalar> Tape<S> {
    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _, _| vec![g.clone(), g.mapv(|v| -v)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, p, _| vec![g * p[1], g * p[0]]),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = self.value(a) / self.value(b);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, p, y| vec![g / p[1], -(g * y) / p[1]]),
        )
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, vec![a], Box::new(move |g, _, _| vec![g.mapv(|v| v * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).mapv(|v| v + c);
        self.push(value, vec![a], Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.exp());
        self.push(value, vec![a], Box::new(|g, _, y| vec![g * y]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_stable);
        self.push(
            value,
            vec![a],
            Box::new(|g, _, y| {
                let one = S::one();
                let dy = y.mapv(|v| v * (one - v));
                vec![g * &dy]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        let value = self
            .value(a)
            .mapv(|v| if v > S::zero() { v } else { v * slope });
        self.push(
            value,
            vec![a],
            Box::new(move |g, p, _| {
                let mask = p[0].mapv(|v| if v > S::zero() { S::one() } else { slope });
                vec![g * &mask]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, S::zero())
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = S::from_float(0.7978845608028654); // sqrt(2/pi)
        let c = S::from_float(0.044715);
        let half = S::from_float(0.5);
        let one = S::one();
        let three = S::from_float(3.0);
        let value = self
            .value(a)
            .mapv(|x| half * x * (one + (k * (x + c * x * x * x)).tanh()));
        self.push(
            value,
            vec![a],
            Box::new(move |g, p, _| {
                let d = p[0].mapv(|x| {
                    let t = (k * (x + c * x * x * x)).tanh();
                    half * (one + t) + half * x * (one - t * t) * k * (one + three * c * x * x)
                });
                vec![g * &d]
            }),
        )
    }

    /// clip((x + 3) / 6, 0, 1)
    pub fn hard_sigmoid(&mut self, a: Var) -> Var {
        let three = S::from_float(3.0);
        let sixth = S::from_float(1.0 / 6.0);
        let value = self.value(a).mapv(|x| {
            let v = (x + three) * sixth;
            v.max(S::zero()).min(S::one())
        });
        self.push(
            value,
            vec![a],
            Box::new(move |g, p, _| {
                let mask = p[0].mapv(|x| if x > -three && x < three { sixth } else { S::zero() });
                vec![g * &mask]
            }),
        )
    }

    /// Stride-1 convolution: x [Ci,H,W] * w [Co,Ci,kh,kw] (+ bias [Co]).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: Pad) -> Var {
        let (ci, h, wd) = dims3(self.shape(x));
        let ws = self.shape(w);
        assert_eq!(ws.len(), 4, "conv2d kernel must be [Co,Ci,kh,kw]");
        assert_eq!(ws[1], ci, "conv2d: input has {ci} channels, kernel expects {}", ws[1]);
        let (kh, kw) = (ws[2], ws[3]);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let bv = bias.map(|b| {
            self.value(b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
        });
        let y = conv::conv2d(&xv, &wv, bv.as_ref(), pad);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.push(
            y.into_dyn(),
            parents,
            Box::new(move |g, p, _| {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let xv = p[0].view().into_dimensionality::<Ix3>().unwrap();
                let wv = p[1].view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let dx = conv::conv2d_grad_input(&gv, &wv, h, wd, pad);
                let (dw, db) = conv::conv2d_grad_weights(&gv, &xv, kh, kw, pad);
                let mut out = vec![dx.into_dyn(), dw.into_dyn()];
                if has_bias {
                    out.push(db.into_dyn());
                }
                out
            }),
        )
    }

    /// Concatenate along axis 0 (channels of [C,H,W] maps).
    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_c: incompatible shapes");
        let lens: Vec<usize> = parts.iter().map(|&v| self.shape(v)[0]).collect();
        self.push(
            value,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(lens.len());
                let mut at = 0;
                for &l in &lens {
                    out.push(
                        g.slice_axis(Axis(0), Slice::from(at..at + l)).to_owned(),
                    );
                    at += l;
                }
                out
            }),
        )
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn slice_c(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0], "slice_c out of range");
        let value = self
            .value(x)
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&shape));
                dx.slice_axis_mut(Axis(0), Slice::from(start..start + len))
                    .assign(g);
                vec![dx]
            }),
        )
    }

    /// Global average pool over H,W: [C,H,W] -> [C].
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        let n = S::from_float((h * w) as f64);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mut y = Array1::<S>::zeros(c);
        for (i, plane) in xv.outer_iter().enumerate() {
            y[i] = plane.iter().copied().sum::<S>() / n;
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let gv = g[[ci]] / n;
                    dx.slice_axis_mut(Axis(0), Slice::from(ci..ci + 1))
                        .mapv_inplace(|_| gv);
                }
                vec![dx]
            }),
        )
    }

    /// Global max pool over H,W: [C,H,W] -> [C]. First maximum wins on ties.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mut y = Array1::<S>::zeros(c);
        let mut argmax = vec![0usize; c];
        for (i, plane) in xv.outer_iter().enumerate() {
            let mut best = plane[[0, 0]];
            let mut best_at = 0usize;
            for (j, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_at = j;
                }
            }
            y[i] = best;
            argmax[i] = best_at;
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let (iy, ix) = (argmax[ci] / w, argmax[ci] % w);
                    dx[[ci, iy, ix]] = g[[ci]];
                }
                vec![dx]
            }),
        )
    }

    /// Per-pixel mean over channels: [C,H,W] -> [1,H,W].
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        let n = S::from_float(c as f64);
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0));
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[c, h, w]));
                for mut plane in dx.axis_iter_mut(Axis(0)) {
                    plane.assign(&g.index_axis(Axis(0), 0).mapv(|v| v / n));
                }
                vec![dx]
            }),
        )
    }

    /// Per-pixel max over channels: [C,H,W] -> [1,H,W]. First max wins.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mut y = ArrayD::<S>::zeros(IxDyn(&[1, h, w]));
        let mut argmax = vec![0usize; h * w];
        for iy in 0..h {
            for ix in 0..w {
                let mut best = xv[[0, iy, ix]];
                let mut best_c = 0usize;
                for ci in 1..c {
                    let v = xv[[ci, iy, ix]];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                y[[0, iy, ix]] = best;
                argmax[iy * w + ix] = best_c;
            }
        }
        self.push(
            y,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[c, h, w]));
                for iy in 0..h {
                    for ix in 0..w {
                        dx[[argmax[iy * w + ix], iy, ix]] = g[[0, iy, ix]];
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Broadcast-multiply a channel vector: [C,H,W] * [C].
    pub fn mul_channels(&mut self, x: Var, v: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert_eq!(self.shape(v), &[c], "mul_channels: vector length mismatch");
        let mut value = self.value(x).clone();
        for (ci, mut plane) in value.axis_iter_mut(Axis(0)).enumerate() {
            let s = self.value(v)[[ci]];
            plane.mapv_inplace(|t| t * s);
        }
        self.push(
            value,
            vec![x, v],
            Box::new(move |g, p, _| {
                let mut dx = g.clone();
                for (ci, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let s = p[1][[ci]];
                    plane.mapv_inplace(|t| t * s);
                }
                let mut dv = Array1::<S>::zeros(c);
                for ci in 0..c {
                    let gp = g.index_axis(Axis(0), ci);
                    let xp = p[0].index_axis(Axis(0), ci);
                    dv[ci] = gp.iter().zip(xp.iter()).map(|(&a, &b)| a * b).sum();
                }
                let _ = (h, w);
                vec![dx, dv.into_dyn()]
            }),
        )
    }

    /// Broadcast-multiply a spatial map: [C,H,W] * [1,H,W].
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert_eq!(self.shape(m), &[1, h, w], "mul_spatial: map shape mismatch");
        let mut value = self.value(x).clone();
        let mv = self.value(m).index_axis(Axis(0), 0).to_owned();
        for mut plane in value.axis_iter_mut(Axis(0)) {
            plane.zip_mut_with(&mv, |t, &s| *t *= s);
        }
        self.push(
            value,
            vec![x, m],
            Box::new(move |g, p, _| {
                let mv = p[1].index_axis(Axis(0), 0).to_owned();
                let mut dx = g.clone();
                for mut plane in dx.axis_iter_mut(Axis(0)) {
                    plane.zip_mut_with(&mv, |t, &s| *t *= s);
                }
                let mut dm = ArrayD::<S>::zeros(IxDyn(&[1, h, w]));
                {
                    let mut dm0 = dm.index_axis_mut(Axis(0), 0);
                    for ci in 0..c {
                        let gp = g.index_axis(Axis(0), ci);
                        let xp = p[0].index_axis(Axis(0), ci);
                        dm0.zip_mut_with(&(&gp * &xp), |t, &s| *t += s);
                    }
                }
                vec![dx, dm]
            }),
        )
    }

    /// Affine map on rows: [N,di] x [di,do] + [do].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, di) = dims2(self.shape(x));
        let (diw, dout) = dims2(self.shape(w));
        assert_eq!(di, diw, "linear: dimension mismatch");
        assert_eq!(self.shape(b), &[dout], "linear: bias length mismatch");
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let mut y = xv.dot(&wv);
        for mut row in y.rows_mut() {
            for (j, t) in row.iter_mut().enumerate() {
                *t += self.value(b)[[j]];
            }
        }
        self.push(
            y.into_dyn(),
            vec![x, w, b],
            Box::new(move |g, p, _| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let wv = p[1].view().into_dimensionality::<Ix2>().unwrap();
                let dx = gv.dot(&wv.t());
                let dw = xv.t().dot(&gv);
                let db = gv.sum_axis(Axis(0));
                let _ = n;
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }),
        )
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let (n, d) = dims2(self.shape(x));
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let dn = S::from_float(d as f64);
        let mut mean = Array1::<S>::zeros(n);
        let mut inv_std = Array1::<S>::zeros(n);
        let mut y = Array2::<S>::zeros((n, d));
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            mean[i] = mu;
            inv_std[i] = is;
            for j in 0..d {
                let xhat = (row[j] - mu) * is;
                y[[i, j]] = xhat * self.value(gamma)[[j]] + self.value(beta)[[j]];
            }
        }
        self.push(
            y.into_dyn(),
            vec![x, gamma, beta],
            Box::new(move |g, p, _| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let gam = p[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dx = Array2::<S>::zeros((n, d));
                let mut dgamma = Array1::<S>::zeros(d);
                let mut dbeta = Array1::<S>::zeros(d);
                for i in 0..n {
                    let mu = mean[i];
                    let is = inv_std[i];
                    let xrow = xv.row(i);
                    let grow = gv.row(i);
                    let mut m1 = S::zero(); // mean of dxhat
                    let mut m2 = S::zero(); // mean of dxhat * xhat
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * is;
                        let dxhat = grow[j] * gam[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * is;
                        let dxhat = grow[j] * gam[j];
                        dx[[i, j]] = is * (dxhat - m1 - xhat * m2);
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = dims2(self.shape(x));
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let mut y = Array2::<S>::zeros((n, m));
        for i in 0..n {
            let row = xv.row(i);
            let mx = row.iter().copied().fold(row[0], |a, b| a.max(b));
            let mut sum = S::zero();
            for j in 0..m {
                let e = (row[j] - mx).exp();
                y[[i, j]] = e;
                sum += e;
            }
            for j in 0..m {
                y[[i, j]] /= sum;
            }
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Box::new(move |g, _, y| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let yv = y.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<S>::zeros((n, m));
                for i in 0..n {
                    let dot = gv
                        .row(i)
                        .iter()
                        .zip(yv.row(i).iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<S>();
                    for j in 0..m {
                        dx[[i, j]] = yv[[i, j]] * (gv[[i, j]] - dot);
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k) = dims2(self.shape(a));
        let (kb, _) = dims2(self.shape(b));
        assert_eq!(k, kb, "matmul: inner dimension mismatch");
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let y = av.dot(&bv);
        self.push(
            y.into_dyn(),
            vec![a, b],
            Box::new(|g, p, _| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = p[0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = p[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![gv.dot(&bv.t()).into_dyn(), av.t().dot(&gv).into_dyn()]
            }),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .t()
            .to_owned();
        self.push(
            value.into_dyn(),
            vec![a],
            Box::new(|g, _, _| {
                vec![g
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .t()
                    .to_owned()
                    .into_dyn()]
            }),
        )
    }

    /// Slice columns [start, start+len) of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = dims2(self.shape(x));
        assert!(start + len <= m, "slice_cols out of range");
        let value = self
            .value(x)
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[n, m]));
                dx.slice_axis_mut(Axis(1), Slice::from(start..start + len))
                    .assign(g);
                vec![dx]
            }),
        )
    }

    /// Concatenate matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: incompatible shapes");
        let lens: Vec<usize> = parts.iter().map(|&v| self.shape(v)[1]).collect();
        self.push(
            value,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(lens.len());
                let mut at = 0;
                for &l in &lens {
                    out.push(g.slice_axis(Axis(1), Slice::from(at..at + l)).to_owned());
                    at += l;
                }
                out
            }),
        )
    }

    /// Rearrange non-overlapping p x p patches into tokens:
    /// [C,H,W] -> [N, C*p*p] with N = (H/p)*(W/p). Bijective.
    pub fn space_to_depth(&mut self, x: Var, p: usize) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert!(h % p == 0 && w % p == 0, "space_to_depth: {h}x{w} not divisible by {p}");
        let value = space_to_depth_raw(self.value(x), p);
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| vec![depth_to_space_raw(g, c, h, w, p)]),
        )
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, t: Var, c: usize, h: usize, w: usize, p: usize) -> Var {
        let shape = self.shape(t);
        assert_eq!(shape, &[(h / p) * (w / p), c * p * p], "depth_to_space: bad token shape");
        let value = depth_to_space_raw(self.value(t), c, h, w, p);
        self.push(
            value,
            vec![t],
            Box::new(move |g, _, _| vec![space_to_depth_raw(g, p)]),
        )
    }

    /// Reflect-pad right and bottom edges of a [C,H,W] map.
    pub fn pad_reflect_rb(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert!(ph < h && pw < w, "reflect pad larger than input");
        let value = pad_reflect_raw(self.value(x), ph, pw);
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for iy in 0..h + ph {
                        let sy = if iy < h { iy } else { 2 * h - 2 - iy };
                        for ix in 0..w + pw {
                            let sx = if ix < w { ix } else { 2 * w - 2 - ix };
                            dx[[ci, sy, sx]] += g[[ci, iy, ix]];
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Keep the top-left h x w region of a [C,H,W] map.
    pub fn crop_rb(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, hx, wx) = dims3(self.shape(x));
        assert!(h <= hx && w <= wx, "crop larger than input");
        let value = self
            .value(x)
            .slice(ndarray::s![.., 0..h, 0..w].as_ref())
            .to_owned();
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::<S>::zeros(IxDyn(&[c, hx, wx]));
                dx.slice_mut(ndarray::s![.., 0..h, 0..w].as_ref()).assign(g);
                vec![dx]
            }),
        )
    }

    /// Mean of all elements -> [1].
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = S::from_float(self.value(x).len() as f64);
        let shape = self.shape(x).to_vec();
        let m = self.value(x).iter().copied().sum::<S>() / n;
        let value = ArrayD::from_elem(IxDyn(&[1]), m);
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| {
                let gv = g[[0]] / n;
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    /// Reinterpret the element buffer with a new shape (row-major).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(x).to_vec();
        assert_eq!(
            self.value(x).len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: non-contiguous value");
        self.push(
            value,
            vec![x],
            Box::new(move |g, _, _| {
                vec![g.clone().into_shape_with_order(IxDyn(&old)).unwrap()]
            }),
        )
    }

    /// Extract 3x3 neighborhoods with stride 3 from an [H,W] image as
    /// column vectors: -> [9, n].
    pub fn unfold3x3_s3(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "unfold expects [H,W]");
        let (h, w) = (shape[0], shape[1]);
        assert!(h >= 3 && w >= 3, "unfold needs at least 3x3");
        let (ni, nj) = ((h - 3) / 3 + 1, (w - 3) / 3 + 1);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let mut y = Array2::<S>::zeros((9, ni * nj));
        for i in 0..ni {
            for j in 0..nj {
                for dy in 0..3 {
                    for dx in 0..3 {
                        y[[dy * 3 + dx, i * nj + j]] = xv[[3 * i + dy, 3 * j + dx]];
                    }
                }
            }
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let mut dx = Array2::<S>::zeros((h, w));
                for i in 0..ni {
                    for j in 0..nj {
                        for dy in 0..3 {
                            for dx2 in 0..3 {
                                dx[[3 * i + dy, 3 * j + dx2]] += g[[dy * 3 + dx2, i * nj + j]];
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Subtract the per-row mean of a [k,n] matrix.
    pub fn center_rows(&mut self, x: Var) -> Var {
        let (k, n) = dims2(self.shape(x));
        let nn = S::from_float(n as f64);
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let mut y = xv.to_owned();
        for mut row in y.rows_mut() {
            let mu = row.iter().copied().sum::<S>() / nn;
            row.mapv_inplace(|v| v - mu);
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = gv.to_owned();
                for mut row in dx.rows_mut() {
                    let mu = row.iter().copied().sum::<S>() / nn;
                    row.mapv_inplace(|v| v - mu);
                }
                let _ = k;
                vec![dx.into_dyn()]
            }),
        )
    }

    /// log(det A) of a symmetric positive-definite matrix -> [1].
    pub fn logdet_psd(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let l = linalg::cholesky(&av)?;
        let ld = linalg::logdet_from_cholesky(&l);
        let inv = linalg::inverse_from_cholesky(&l);
        let value = ArrayD::from_elem(IxDyn(&[1]), ld);
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, _, _| {
                let g0 = g[[0]];
                vec![inv.t().mapv(|v| v * g0).into_dyn()]
            }),
        ))
    }

    /// A^-1 of a symmetric positive-definite matrix.
    pub fn psd_inverse(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let l = linalg::cholesky(&av)?;
        let inv = linalg::inverse_from_cholesky(&l);
        Ok(self.push(
            inv.into_dyn(),
            vec![a],
            Box::new(|g, _, y| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let yv = y.view().into_dimensionality::<Ix2>().unwrap();
                let da = yv.t().dot(&gv).dot(&yv.t()).mapv(|v| -v);
                vec![da.into_dyn()]
            }),
        ))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn space_to_depth_raw<S: Scalar>(x: &ArrayD<S>, p: usize) -> ArrayD<S> {
    let (c, h, w) = dims3(x.shape());
    let (hp, wp) = (h / p, w / p);
    let mut y = Array2::<S>::zeros((hp * wp, c * p * p));
    for ti in 0..hp {
        for tj in 0..wp {
            let t = ti * wp + tj;
            for ci in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        y[[t, (ci * p + dy) * p + dx]] = x[[ci, ti * p + dy, tj * p + dx]];
                    }
                }
            }
        }
    }
    y.into_dyn()
}

fn depth_to_space_raw<S: Scalar>(t: &ArrayD<S>, c: usize, h: usize, w: usize, p: usize) -> ArrayD<S> {
    let (hp, wp) = (h / p, w / p);
    let mut x = ArrayD::<S>::zeros(IxDyn(&[c, h, w]));
    for ti in 0..hp {
        for tj in 0..wp {
            let tok = ti * wp + tj;
            for ci in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        x[[ci, ti * p + dy, tj * p + dx]] = t[[tok, (ci * p + dy) * p + dx]];
                    }
                }
            }
        }
    }
    x
}

fn pad_reflect_raw<S: Scalar>(x: &ArrayD<S>, ph: usize, pw: usize) -> ArrayD<S> {
    let (c, h, w) = dims3(x.shape());
    let mut y = ArrayD::<S>::zeros(IxDyn(&[c, h + ph, w + pw]));
    for ci in 0..c {
        for iy in 0..h + ph {
            let sy = if iy < h { iy } else { 2 * h - 2 - iy };
            for ix in 0..w + pw {
                let sx = if ix < w { ix } else { 2 * w - 2 - ix };
                y[[ci, iy, ix]] = x[[ci, sy, sx]];
            }
        }
    }
    y
}
