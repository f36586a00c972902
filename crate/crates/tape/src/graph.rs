use crate::kernels::{col2im, im2col, roi_align_taps, ConvGeom, Roi};
use crate::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChanOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softplus(Var),
    Reverse(Var),
    Reshape(Var),
    Sum(Var),
    L2Norm(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SpatialMean(Var),
    SpatialStd {
        x: Var,
        mean: Vec<T>,
    },
    Chan {
        x: Var,
        s: Var,
        op: ChanOp,
    },
    SampleAbsSum(Var),
    SampleScale(Var, Var),
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    RoiAlign {
        fm: Var,
        batches: Vec<usize>,
        taps: Vec<(usize, T)>,
        per_cell: usize,
    },
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    SigmoidBce {
        logits: Var,
        idx: Vec<usize>,
        targets: Vec<T>,
        scale: T,
    },
    SmoothL1 {
        pred: Var,
        idx: Vec<usize>,
        targets: Vec<T>,
        beta: T,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a computation; [`Graph::backward`] walks it in
/// reverse to produce gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

fn mat(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected matrix, got {shape:?}");
    (shape[0], shape[1])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(t, Op::Softplus(a), ng)
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn reverse_grad(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        let ng = self.ng(a);
        self.push(t, Op::Reverse(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape.to_vec());
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of scalar-shaped vars; zero constant for an empty list.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        match vars.split_first() {
            None => self.constant(Tensor::scalar(T::zero())),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &v| self.add(acc, v)),
        }
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let ng = self.ng(a);
        self.push(Tensor::scalar(n), Op::L2Norm(a), ng)
    }

    /// 2-D convolution, square kernel, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = nchw(self.shape(x));
        let (o, wc, kh, kw) = nchw(self.shape(w));
        assert_eq!(c, wc, "conv input has {c} channels, weight expects {wc}");
        assert_eq!(kh, kw, "only square kernels");
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[o], "conv bias shape");
        }
        let geom = ConvGeom::new(c, h, wd, kh, stride, pad);
        let (rows, p) = (geom.rows(), geom.cols());
        let keep_cols = self.ng(w);
        let mut saved = if keep_cols { vec![T::zero(); n * rows * p] } else { Vec::new() };
        let mut scratch = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); n * o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                let cols = if keep_cols {
                    &mut saved[i * rows * p..(i + 1) * rows * p]
                } else {
                    &mut scratch[..]
                };
                im2col(&geom, &xv[i * c * h * wd..(i + 1) * c * h * wd], cols);
                let dst = &mut out[i * o * p..(i + 1) * o * p];
                if let Some(bv) = bv {
                    for (oc, row) in dst.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v = bv[oc]);
                    }
                }
                let beta = if bv.is_some() { T::one() } else { T::zero() };
                T::gemm(o, rows, p, T::one(), wv, rows, 1, cols, p, 1, beta, dst, p, 1);
            }
        }
        let t = Tensor::new(vec![n, o, geom.ho, geom.wo], out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: saved,
            },
            ng,
        )
    }

    /// Batch normalization using the statistics of this batch. Returns the
    /// output together with the per-channel batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, Vec<T>, Vec<T>) {
        let (n, c, h, w) = nchw(self.shape(x));
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut v = T::zero();
            for i in 0..n {
                for &e in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    v += (e - mu) * (e - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        (v, mean, var)
    }

    /// Normalization with fixed statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let a = g[ch] * inv_std[ch];
                let off = bt[ch] - a * mean[ch];
                for j in base..base + hw {
                    out[j] = a * xv[j] + off;
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            ng,
        )
    }

    /// `x[N,K] · w[M,K]ᵀ + b[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = mat(self.shape(x));
        let (m, wk) = mat(self.shape(w));
        assert_eq!(k, wk, "linear: input width {k}, weight expects {wk}");
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), m);
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(x).data(),
            k,
            1,
            self.value(w).data(),
            1,
            k,
            beta,
            &mut out,
            m,
            1,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, m], out), Op::Linear { x, w, b }, ng)
    }

    /// Per-(sample, channel) mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        let hw = T::from_usize(h * w).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], out), Op::SpatialMean(x), ng)
    }

    /// Per-(sample, channel) `sqrt(population variance + eps²)`: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_std(&mut self, x: Var, eps: T) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        let hw = T::from_usize(h * w).unwrap();
        let mut mean = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for p in self.value(x).data().chunks(h * w) {
            let mu = p.iter().copied().sum::<T>() / hw;
            let var = p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / hw;
            mean.push(mu);
            out.push((var + eps * eps).sqrt());
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], out), Op::SpatialStd { x, mean }, ng)
    }

    /// Broadcasts `s[N,C]` over the spatial axes of `x[N,C,H,W]`.
    pub fn chan(&mut self, x: Var, s: Var, op: ChanOp) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        assert_eq!(self.shape(s), &[n, c], "channel operand shape");
        let hw = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let k = sv[i];
            match op {
                ChanOp::Add => plane.iter_mut().for_each(|v| *v += k),
                ChanOp::Sub => plane.iter_mut().for_each(|v| *v -= k),
                ChanOp::Mul => plane.iter_mut().for_each(|v| *v *= k),
                ChanOp::Div => plane.iter_mut().for_each(|v| *v = *v / k),
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::Chan { x, s, op }, ng)
    }

    /// Per-sample L1 norm: `[N, ...] -> [N]`, accumulated in f64.
    pub fn sample_abs_sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let n = shape[0];
        let per = self.value(x).numel() / n;
        let out = self
            .value(x)
            .data()
            .chunks(per)
            .map(|c| T::lit(c.iter().map(|v| v.abs().to_f64().unwrap()).sum::<f64>()))
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n], out), Op::SampleAbsSum(x), ng)
    }

    /// Multiplies each sample of `x[N, ...]` by `s[N]`.
    pub fn sample_scale(&mut self, x: Var, s: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        assert_eq!(self.shape(s), &[n], "per-sample scale shape");
        let per = self.value(x).numel() / n;
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(Tensor::new(shape, out), Op::SampleScale(x, s), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, p) = mat(self.shape(a));
        let (nb, q) = mat(self.shape(b));
        assert_eq!(n, nb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, p + q], out), Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = mat(self.shape(x));
        assert!(start + len <= d);
        let xv = self.value(x).data();
        let out = (0..n)
            .flat_map(|i| xv[i * d + start..i * d + start + len].iter().copied())
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, len], out), Op::SliceCols { x, start }, ng)
    }

    /// Bilinear region pooling of `fm[N,C,H,W]` into `[R, C, out, out]`.
    /// Boxes are in input-image coordinates; `spatial_scale` maps them to
    /// feature coordinates (half-pixel aligned).
    pub fn roi_align(
        &mut self,
        fm: Var,
        rois: &[Roi<T>],
        spatial_scale: T,
        out_size: (usize, usize),
        sampling: usize,
    ) -> Var {
        let (n, c, h, w) = nchw(self.shape(fm));
        let (oh, ow) = out_size;
        let cells = oh * ow;
        let per_cell = sampling * sampling * 4;
        let mut taps = Vec::with_capacity(rois.len() * cells * per_cell);
        for roi in rois {
            assert!(roi.batch < n, "roi batch index out of range");
            taps.extend(roi_align_taps(roi, spatial_scale, h, w, oh, ow, sampling));
        }
        let fv = self.value(fm).data();
        let mut out = vec![T::zero(); rois.len() * c * cells];
        for (r, roi) in rois.iter().enumerate() {
            let rt = &taps[r * cells * per_cell..(r + 1) * cells * per_cell];
            for ch in 0..c {
                let plane = &fv[(roi.batch * c + ch) * h * w..(roi.batch * c + ch + 1) * h * w];
                let dst = &mut out[(r * c + ch) * cells..(r * c + ch + 1) * cells];
                for (cell, d) in dst.iter_mut().enumerate() {
                    *d = rt[cell * per_cell..(cell + 1) * per_cell]
                        .iter()
                        .map(|&(i, wt)| wt * plane[i])
                        .sum();
                }
            }
        }
        let ng = self.ng(fm);
        self.push(
            Tensor::new(vec![rois.len(), c, oh, ow], out),
            Op::RoiAlign {
                fm,
                batches: rois.iter().map(|r| r.batch).collect(),
                taps,
                per_cell,
            },
            ng,
        )
    }

    /// Mean of the selected rows of `x[R,D]`, giving `[D]`.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (r, d) = mat(self.shape(x));
        assert!(!rows.is_empty(), "mean_rows over no rows");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); d];
        for &i in rows {
            assert!(i < r);
            for (o, &v) in out.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let k = T::from_usize(rows.len()).unwrap();
        out.iter_mut().for_each(|v| *v = *v / k);
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![d], out),
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// `Σ_r weight_r · (−log softmax(logits_r)[label_r])` over rows of `logits[R,K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Var {
        let (r, k) = mat(self.shape(logits));
        assert_eq!(labels.len(), r);
        assert_eq!(weights.len(), r);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); r * k];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            assert!(labels[i] < k, "label {} out of range", labels[i]);
            loss += weights[i] * (z.ln() + mx - row[labels[i]]);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// `scale · Σ_i BCE(sigmoid(logits[idx_i]), targets_i)` over flat indices.
    pub fn sigmoid_bce(&mut self, logits: Var, idx: &[usize], targets: &[T], scale: T) -> Var {
        assert_eq!(idx.len(), targets.len());
        let lv = self.value(logits).data();
        let loss = idx
            .iter()
            .zip(targets)
            .map(|(&i, &t)| {
                let l = lv[i];
                l.max(T::zero()) - l * t + (T::one() + (-l.abs()).exp()).ln()
            })
            .sum::<T>()
            * scale;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits,
                idx: idx.to_vec(),
                targets: targets.to_vec(),
                scale,
            },
            ng,
        )
    }

    /// `scale · Σ_i smoothL1_beta(pred[idx_i] − targets_i)` over flat indices.
    pub fn smooth_l1(&mut self, pred: Var, idx: &[usize], targets: &[T], beta: T, scale: T) -> Var {
        assert_eq!(idx.len(), targets.len());
        let pv = self.value(pred).data();
        let half = T::lit(0.5);
        let loss = idx
            .iter()
            .zip(targets)
            .map(|(&i, &t)| {
                let d = (pv[i] - t).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum::<T>()
            * scale;
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                idx: idx.to_vec(),
                targets: targets.to_vec(),
                beta,
                scale,
            },
            ng,
        )
    }
}

fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln()
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not depend on the differentiated output or
    /// does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

struct Acc<'a, T: Real> {
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Real> Acc<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first touch.
    fn buf(&mut self, v: Var) -> &mut [T] {
        let nodes = self.nodes;
        let shape = nodes[v.0].value.shape();
        self.grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
            .data_mut()
    }

    fn add_with(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        for (i, g) in self.buf(v).iter_mut().enumerate() {
            *g += f(i);
        }
    }
}

impl<T: Real> Graph<T> {
    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let mut acc = Acc {
                grads: &mut grads[..idx],
                nodes: &self.nodes,
            };
            self.backward_node(node, gy.data(), &mut acc);
            // keep intermediate gradients available for inspection
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], acc: &mut Acc<'_, T>) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add_with(*a, |i| gy[i]);
                acc.add_with(*b, |i| gy[i]);
            }
            Op::Sub(a, b) => {
                acc.add_with(*a, |i| gy[i]);
                acc.add_with(*b, |i| -gy[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc.add_with(*a, |i| gy[i] * vb[i]);
                acc.add_with(*b, |i| gy[i] * va[i]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc.add_with(*a, |i| gy[i] / vb[i]);
                acc.add_with(*b, |i| -gy[i] * va[i] / (vb[i] * vb[i]));
            }
            Op::Scale(a, c) => acc.add_with(*a, |i| gy[i] * *c),
            Op::Relu(a) => {
                let va = val(*a);
                acc.add_with(*a, |i| if va[i] > T::zero() { gy[i] } else { T::zero() });
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc.add_with(*a, |i| gy[i] * sigmoid(va[i]));
            }
            Op::Reverse(a) => acc.add_with(*a, |i| -gy[i]),
            Op::Reshape(a) => acc.add_with(*a, |i| gy[i]),
            Op::Sum(a) => acc.add_with(*a, |_| gy[0]),
            Op::L2Norm(a) => {
                let n = node.value.data()[0];
                let va = val(*a);
                if n > T::zero() {
                    acc.add_with(*a, |i| gy[0] * va[i] / n);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols, gy, acc),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = nchw(node.value.shape());
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_dy[ch] += gy[j];
                            sum_dy_xhat[ch] += gy[j] * xhat[j];
                        }
                    }
                }
                if acc.wants(*gamma) {
                    let g = acc.buf(*gamma);
                    for ch in 0..c {
                        g[ch] += sum_dy_xhat[ch];
                    }
                }
                if acc.wants(*beta) {
                    let g = acc.buf(*beta);
                    for ch in 0..c {
                        g[ch] += sum_dy[ch];
                    }
                }
                if acc.wants(*x) {
                    let gv = val(*gamma);
                    let g = acc.buf(*x);
                    for i in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch] / m;
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                g[j] += k * (m * gy[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = nchw(node.value.shape());
                let hw = h * w;
                let xv = val(*x);
                let gv = val(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_dy[ch] += gy[j];
                            sum_dy_xhat[ch] += gy[j] * (xv[j] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                acc.add_with(*gamma, |ch| sum_dy_xhat[ch]);
                acc.add_with(*beta, |ch| sum_dy[ch]);
                acc.add_with(*x, |j| {
                    let ch = (j / hw) % c;
                    gy[j] * gv[ch] * inv_std[ch]
                });
            }
            Op::Linear { x, w, b } => {
                let (n, m) = mat(node.value.shape());
                let k = self.shape(*x)[1];
                if acc.wants(*x) {
                    let wv = val(*w);
                    let g = acc.buf(*x);
                    T::gemm(n, m, k, T::one(), gy, m, 1, wv, k, 1, T::one(), g, k, 1);
                }
                if acc.wants(*w) {
                    let xv = val(*x);
                    let g = acc.buf(*w);
                    T::gemm(m, n, k, T::one(), gy, 1, m, xv, k, 1, T::one(), g, k, 1);
                }
                if let Some(b) = b {
                    acc.add_with(*b, |j| (0..n).map(|i| gy[i * m + j]).sum());
                }
            }
            Op::SpatialMean(x) => {
                let (_, _, h, w) = nchw(self.shape(*x));
                let hw = h * w;
                let k = T::one() / T::from_usize(hw).unwrap();
                acc.add_with(*x, |j| gy[j / hw] * k);
            }
            Op::SpatialStd { x, mean } => {
                let (_, _, h, w) = nchw(self.shape(*x));
                let hw = h * w;
                let m = T::from_usize(hw).unwrap();
                let xv = val(*x);
                let sd = node.value.data();
                acc.add_with(*x, |j| {
                    let p = j / hw;
                    gy[p] * (xv[j] - mean[p]) / (m * sd[p])
                });
            }
            Op::Chan { x, s, op } => {
                let (_, _, h, w) = nchw(self.shape(*x));
                let hw = h * w;
                let xv = val(*x);
                let sv = val(*s);
                match op {
                    ChanOp::Add | ChanOp::Sub => {
                        let sign = if *op == ChanOp::Add { T::one() } else { -T::one() };
                        acc.add_with(*x, |j| gy[j]);
                        acc.add_with(*s, |p| sign * gy[p * hw..(p + 1) * hw].iter().copied().sum::<T>());
                    }
                    ChanOp::Mul => {
                        acc.add_with(*x, |j| gy[j] * sv[j / hw]);
                        acc.add_with(*s, |p| {
                            (p * hw..(p + 1) * hw).map(|j| gy[j] * xv[j]).sum::<T>()
                        });
                    }
                    ChanOp::Div => {
                        acc.add_with(*x, |j| gy[j] / sv[j / hw]);
                        acc.add_with(*s, |p| {
                            let k = sv[p] * sv[p];
                            -(p * hw..(p + 1) * hw).map(|j| gy[j] * xv[j]).sum::<T>() / k
                        });
                    }
                }
            }
            Op::SampleAbsSum(x) => {
                let n = node.value.numel();
                let xv = val(*x);
                let per = xv.len() / n;
                acc.add_with(*x, |j| {
                    let v = xv[j];
                    if v > T::zero() {
                        gy[j / per]
                    } else if v < T::zero() {
                        -gy[j / per]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::SampleScale(x, s) => {
                let xv = val(*x);
                let sv = val(*s);
                let n = sv.len();
                let per = xv.len() / n;
                acc.add_with(*x, |j| gy[j] * sv[j / per]);
                acc.add_with(*s, |i| (i * per..(i + 1) * per).map(|j| gy[j] * xv[j]).sum::<T>());
            }
            Op::ConcatCols(a, b) => {
                let (_, d) = mat(node.value.shape());
                let p = self.shape(*a)[1];
                let q = d - p;
                acc.add_with(*a, |j| gy[(j / p) * d + j % p]);
                acc.add_with(*b, |j| gy[(j / q) * d + p + j % q]);
            }
            Op::SliceCols { x, start } => {
                let (_, len) = mat(node.value.shape());
                let d = self.shape(*x)[1];
                let start = *start;
                acc.add_with(*x, |j| {
                    let col = j % d;
                    if col >= start && col < start + len {
                        gy[(j / d) * len + col - start]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::RoiAlign {
                fm,
                batches,
                taps,
                per_cell,
            } => {
                if !acc.wants(*fm) {
                    return;
                }
                let (_, c, h, w) = nchw(self.shape(*fm));
                let (_, _, oh, ow) = nchw(node.value.shape());
                let cells = oh * ow;
                let g = acc.buf(*fm);
                for (r, &bi) in batches.iter().enumerate() {
                    let rt = &taps[r * cells * per_cell..(r + 1) * cells * per_cell];
                    for ch in 0..c {
                        let plane = &mut g[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                        let src = &gy[(r * c + ch) * cells..(r * c + ch + 1) * cells];
                        for (cell, &d) in src.iter().enumerate() {
                            for &(i, wt) in &rt[cell * per_cell..(cell + 1) * per_cell] {
                                plane[i] += wt * d;
                            }
                        }
                    }
                }
            }
            Op::MeanRows { x, rows } => {
                if !acc.wants(*x) {
                    return;
                }
                let d = node.value.numel();
                let k = T::one() / T::from_usize(rows.len()).unwrap();
                let g = acc.buf(*x);
                for &r in rows {
                    for j in 0..d {
                        g[r * d + j] += gy[j] * k;
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                acc.add_with(*logits, |j| {
                    let (r, col) = (j / k, j % k);
                    let onehot = if labels[r] == col { T::one() } else { T::zero() };
                    gy[0] * weights[r] * (probs[j] - onehot)
                });
            }
            Op::SigmoidBce {
                logits,
                idx,
                targets,
                scale,
            } => {
                if !acc.wants(*logits) {
                    return;
                }
                let lv = val(*logits);
                let g = acc.buf(*logits);
                for (&i, &t) in idx.iter().zip(targets) {
                    g[i] += gy[0] * *scale * (sigmoid(lv[i]) - t);
                }
            }
            Op::SmoothL1 {
                pred,
                idx,
                targets,
                beta,
                scale,
            } => {
                if !acc.wants(*pred) {
                    return;
                }
                let pv = val(*pred);
                let g = acc.buf(*pred);
                for (&i, &t) in idx.iter().zip(targets) {
                    let d = pv[i] - t;
                    let slope = if d.abs() < *beta {
                        d / *beta
                    } else {
                        d.signum()
                    };
                    g[i] += gy[0] * *scale * slope;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[T],
        gy: &[T],
        acc: &mut Acc<'_, T>,
    ) {
        let n = self.shape(x)[0];
        let o = self.shape(w)[0];
        let (rows, p) = (geom.rows(), geom.cols());
        let in_len = geom.c * geom.h * geom.w;
        if let Some(b) = b {
            acc.add_with(b, |oc| {
                (0..n)
                    .map(|i| gy[(i * o + oc) * p..(i * o + oc + 1) * p].iter().copied().sum::<T>())
                    .sum()
            });
        }
        if acc.wants(w) {
            let g = acc.buf(w);
            for i in 0..n {
                let dout = &gy[i * o * p..(i + 1) * o * p];
                let c = &cols[i * rows * p..(i + 1) * rows * p];
                T::gemm(o, p, rows, T::one(), dout, p, 1, c, 1, p, T::one(), g, rows, 1);
            }
        }
        if acc.wants(x) {
            let wv = self.value(w).data();
            let mut dcols = vec![T::zero(); rows * p];
            let g = acc.buf(x);
            for i in 0..n {
                let dout = &gy[i * o * p..(i + 1) * o * p];
                T::gemm(rows, o, p, T::one(), wv, 1, rows, dout, p, 1, T::zero(), &mut dcols, p, 1);
                col2im(geom, &dcols, &mut g[i * in_len..(i + 1) * in_len]);
            }
        }
    }
}
