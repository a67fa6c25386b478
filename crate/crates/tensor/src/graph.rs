use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::{Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pairwise similarity used by the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    /// `exp(<u, v> / tau)`
    ExpInner,
    /// `<u, v>`
    RawInner,
}

/// Row indices into a feature matrix for one contrastive anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveAnchor {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Conv2d { x: Var, k: Var, geom: ConvGeom, ho: usize, wo: usize, cols: Vec<F> },
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    MulSpatial(Var, Var),
    BilinearSample { x: Var, coords: Var },
    DeformConv { x: Var, offsets: Var, w: Var, geom: ConvGeom, ho: usize, wo: usize, cols: Vec<F> },
    PixelShuffle { x: Var, s: usize },
    PixelUnshuffle { x: Var, s: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    WeightedSum { weights: Var, inputs: Vec<Var> },
    Contrastive { feats: Var, anchors: Vec<ContrastiveAnchor>, mode: SimilarityMode, tau: F },
    FaultySquare(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Dynamic tape. Nodes are appended in evaluation order, so every input of
/// node `k` has an index below `k`.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<F: Real>(what: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn grad_slot<'a, F: Real>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn add_into<F: Real>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, delta: &[F]) {
    if let Some(slot) = grad_slot(grads, nodes, v) {
        for (s, &d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor, zeros if `v` was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<F> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return dim_err(format!("transpose expects rank 2, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, what: &str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(what, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.unary(a, |x| x * s);
        let rg = self.needs(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let t = self.unary(a, |x| x + s);
        let rg = self.needs(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > F::zero() { x } else { F::zero() });
        let rg = self.needs(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.tanh());
        let rg = self.needs(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.exp());
        let rg = self.needs(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.ln());
        let rg = self.needs(&[a]);
        self.push(t, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = F::of(t.len().max(1) as f64);
        let s: F = t.data().iter().copied().sum::<F>() / n;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ---------------------------------------------------------------- normalization

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return dim_err(format!("softmax axis {axis} invalid for {:?}", shape));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                // Accumulated in f64 so 32-bit outputs still sum to 1 within rounding.
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(src[at(k)].as_f64());
                }
                let e: Vec<f64> = (0..len).map(|k| (src[at(k)].as_f64() - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (k, ek) in e.iter().enumerate() {
                    out[at(k)] = F::of(ek / z);
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x: a, outer, len, inner }, rg))
    }

    /// Normalizes over the last axis then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Dimension("layer_norm on scalar".into()))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                shape,
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let df = F::of(d as f64);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                let xh = (row[k] - mu) * rs;
                xhat[r * d + k] = xh;
                out[r * d + k] = xh * gm[k] + bt[k];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    // ---------------------------------------------------------------- convolution

    fn conv_geom(&self, x: Var, k: Var, padding: usize, dilation: usize) -> Result<(ConvGeom, usize, usize, usize)> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return dim_err(format!("conv: input {:?}, kernel {:?}", sx, sk));
        }
        if dilation == 0 {
            return dim_err("conv: dilation must be positive");
        }
        let geom = ConvGeom {
            channels: sx[0],
            height: sx[1],
            width: sx[2],
            kh: sk[2],
            kw: sk[3],
            padding,
            dilation,
        };
        let (ho, wo) = geom.output_hw().ok_or_else(|| {
            TensorError::Dimension(format!(
                "conv: kernel {}x{} (dilation {dilation}) larger than padded input {:?} (padding {padding})",
                sk[2], sk[3], sx
            ))
        })?;
        Ok((geom, ho, wo, sk[0]))
    }

    /// Stride-1 cross-correlation with zero padding. `x[C_in×H×W]`,
    /// `k[C_out×C_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, padding: usize, dilation: usize) -> Result<Var> {
        let (geom, ho, wo, cout) = self.conv_geom(x, k, padding, dilation)?;
        let cols = kernels::im2col(self.value(x).data(), &geom, ho, wo);
        let ck = geom.channels * geom.taps();
        let mut out = vec![F::zero(); cout * ho * wo];
        kernels::matmul_acc(self.value(k).data(), &cols, &mut out, cout, ck, ho * wo);
        let rg = self.needs(&[x, k]);
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, geom, ho, wo, cols }, rg))
    }

    /// Deformable convolution. `offsets[2·kh·kw×Ho×Wo]` holds `(Δi, Δj)` for
    /// tap `n` in channels `2n`, `2n+1`; sampling is bilinear with zero
    /// extension outside the grid.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, w: Var, padding: usize, dilation: usize) -> Result<Var> {
        let (geom, ho, wo, cout) = self.conv_geom(x, w, padding, dilation)?;
        let taps = geom.taps();
        if self.shape(offsets) != [2 * taps, ho, wo] {
            return dim_err(format!(
                "deform_conv2d: offsets {:?}, expected {:?}",
                self.shape(offsets),
                [2 * taps, ho, wo]
            ));
        }
        let xs = self.value(x).data();
        let off = self.value(offsets).data();
        let (h, wd) = (geom.height, geom.width);
        let plane = ho * wo;
        let mut cols = vec![F::zero(); geom.channels * taps * plane];
        for n in 0..taps {
            let (ti, tj) = geom.tap(n);
            for i in 0..ho {
                for j in 0..wo {
                    let p = i * wo + j;
                    let pi = F::of((i as isize + ti) as f64) + off[2 * n * plane + p];
                    let pj = F::of((j as isize + tj) as f64) + off[(2 * n + 1) * plane + p];
                    for c in 0..geom.channels {
                        let src = &xs[c * h * wd..(c + 1) * h * wd];
                        cols[(c * taps + n) * plane + p] = kernels::bilinear(src, h, wd, pi, pj);
                    }
                }
            }
        }
        let mut out = vec![F::zero(); cout * plane];
        kernels::matmul_acc(self.value(w).data(), &cols, &mut out, cout, geom.channels * taps, plane);
        let rg = self.needs(&[x, offsets, w]);
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(t, Op::DeformConv { x, offsets, w, geom, ho, wo, cols }, rg))
    }

    /// Bilinear read of every channel of `x[C×H×W]` at `coords = [row, col]`.
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(coords) != [2] {
            return dim_err(format!("bilinear_sample: x {:?}, coords {:?}", sx, self.shape(coords)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let pc = self.value(coords).data();
        let (pi, pj) = (pc[0], pc[1]);
        let xs = self.value(x).data();
        let out = (0..c).map(|ch| kernels::bilinear(&xs[ch * h * w..(ch + 1) * h * w], h, w, pi, pj)).collect();
        let rg = self.needs(&[x, coords]);
        Ok(self.push(Tensor::new(vec![c], out)?, Op::BilinearSample { x, coords }, rg))
    }

    /// `x[C×…] + b[C]`
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || self.shape(b) != [sx[0]] {
            return dim_err(format!("add_channel_bias: x {:?}, b {:?}", sx, self.shape(b)));
        }
        let inner = self.value(x).len() / sx[0];
        let bs = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (c, chunk) in out.chunks_mut(inner.max(1)).enumerate().take(sx[0]) {
            chunk.iter_mut().for_each(|v| *v += bs[c]);
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddChannelBias(x, b), rg))
    }

    /// `x[…×d] + b[d]`
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = sx.last().copied().unwrap_or(0);
        if d == 0 || self.shape(b) != [d] {
            return dim_err(format!("add_row_bias: x {:?}, b {:?}", sx, self.shape(b)));
        }
        let bs = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(bs).for_each(|(v, &bv)| *v += bv);
        }
        let rg = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddRowBias(x, b), rg))
    }

    /// `a[C×…] ⊙ b[…]`, broadcasting `b` over the leading axis.
    pub fn mul_spatial(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || self.shape(b) != &sa[1..] {
            return dim_err(format!("mul_spatial: a {:?}, b {:?}", sa, self.shape(b)));
        }
        let bs = self.value(b).data();
        let inner = bs.len();
        let out = self.value(a).data().iter().enumerate().map(|(k, &v)| v * bs[k % inner]).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, Op::MulSpatial(a, b), rg))
    }

    // ---------------------------------------------------------------- rearrangement

    /// `[C·S²×H×W] → [C×SH×SW]`; channel `c·S² + s·S + t` at `(i, j)` lands
    /// at `(S·i + s, S·j + t)` of channel `c`.
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if s == 0 || sx.len() != 3 || sx[0] % (s * s) != 0 {
            return dim_err(format!("pixel_shuffle: {:?} with factor {s}", sx));
        }
        let (c, h, w) = (sx[0] / (s * s), sx[1], sx[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            for y in 0..s * h {
                for xx in 0..s * w {
                    out.push(src[kernels::shuffle_src(ch, y, xx, s, h, w)]);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![c, s * h, s * w], out)?, Op::PixelShuffle { x, s }, rg))
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if s == 0 || sx.len() != 3 || sx[1] % s != 0 || sx[2] % s != 0 {
            return dim_err(format!("pixel_unshuffle: {:?} with factor {s}", sx));
        }
        let (c, h, w) = (sx[0], sx[1] / s, sx[2] / s);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        let mut k = 0;
        for ch in 0..c {
            for y in 0..s * h {
                for xx in 0..s * w {
                    out[kernels::shuffle_src(ch, y, xx, s, h, w)] = src[k];
                    k += 1;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![c * s * s, h, w], out)?, Op::PixelUnshuffle { x, s }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} invalid for {:?}", base));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return dim_err(format!("concat: {:?} incompatible with {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.needs(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let base = self.shape(x).to_vec();
        if axis >= base.len() || start + len > base[axis] {
            return dim_err(format!("slice [{start}, {}) on axis {axis} of {:?}", start + len, base));
        }
        let (outer, full, inner) = kernels::split_axis(&base, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = base;
        shape[axis] = len;
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// `Σ_k weights[k] · inputs[k]`
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        if self.shape(weights) != [inputs.len()] || inputs.is_empty() {
            return dim_err(format!(
                "weighted_sum: weights {:?} for {} inputs",
                self.shape(weights),
                inputs.len()
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return dim_err(format!("weighted_sum: {:?} vs {:?}", self.shape(v), shape));
            }
        }
        let ws = self.value(weights).data().to_vec();
        let mut out = vec![F::zero(); shape.iter().product()];
        for (&v, &wk) in inputs.iter().zip(&ws) {
            for (o, &x) in out.iter_mut().zip(self.value(v).data()) {
                *o += wk * x;
            }
        }
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let rg = self.needs(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightedSum { weights, inputs: inputs.to_vec() }, rg))
    }

    // ---------------------------------------------------------------- losses

    /// Mean contrastive loss over anchors whose log argument is defined.
    ///
    /// Rows of `feats[P×C]` are region representations. For each anchor the
    /// loss is `-ln(Σ_pos sim / (Σ_pos sim + Σ_neg sim))`. Anchors with an
    /// empty positive or negative list are skipped, as are `RawInner`
    /// anchors with a non-positive numerator or denominator. Returns the
    /// loss and the number of skipped anchors.
    pub fn contrastive(
        &mut self,
        feats: Var,
        anchors: &[ContrastiveAnchor],
        mode: SimilarityMode,
        tau: F,
    ) -> Result<(Var, usize)> {
        let sf = self.shape(feats);
        if sf.len() != 2 {
            return dim_err(format!("contrastive: features must be rank 2, got {:?}", sf));
        }
        if mode == SimilarityMode::ExpInner && tau <= F::zero() {
            return Err(TensorError::Usage("temperature must be positive".into()));
        }
        let (rows, c) = (sf[0], sf[1]);
        let fs = self.value(feats).data();
        let mut kept = Vec::new();
        let mut total = F::zero();
        for a in anchors {
            if a.positives.is_empty() || a.negatives.is_empty() {
                continue;
            }
            if a.anchor >= rows || a.positives.iter().chain(&a.negatives).any(|&r| r >= rows) {
                return Err(TensorError::Dimension(format!("contrastive: row index out of range ({rows} rows)")));
            }
            if let Some(l) = anchor_loss(fs, c, a, mode, tau) {
                total += l;
                kept.push(a.clone());
            }
        }
        let skipped = anchors.len() - kept.len();
        if kept.is_empty() {
            return Err(TensorError::Usage("contrastive loss has no usable anchors".into()));
        }
        let value = total / F::of(kept.len() as f64);
        let rg = self.needs(&[feats]);
        let v = self.push(Tensor::scalar(value), Op::Contrastive { feats, anchors: kept, mode, tau }, rg);
        Ok((v, skipped))
    }

    /// `x²` recorded with a deliberately wrong backward (`x` instead of `2x`).
    /// Exists so gradient-check tooling can prove it detects broken ops.
    #[doc(hidden)]
    pub fn faulty_square(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v * v);
        let rg = self.needs(&[x]);
        self.push(t, Op::FaultySquare(x), rg)
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d loss / d v` into every reachable node that requires a
    /// gradient. Repeated calls add to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut seed = self.grads[loss.0].take().unwrap_or_else(|| vec![F::zero()]);
        seed[0] += F::one();
        // Work on a private buffer so the persistent grads accumulate additively.
        let mut work: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![F::one()]);
        self.grads[loss.0] = Some(seed);
        for k in (0..=loss.0).rev() {
            let Some(g) = work[k].take() else { continue };
            if k != loss.0 {
                match &mut self.grads[k] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            self.backward_node(k, &g, &mut work);
        }
        Ok(())
    }

    fn backward_node(&self, k: usize, g: &[F], work: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let node = &nodes[k];
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, kk, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = grad_slot(work, nodes, *a) {
                    kernels::matmul_a_bt_acc(g, val(*b), da, m, n, kk);
                }
                if let Some(db) = grad_slot(work, nodes, *b) {
                    kernels::matmul_at_b_acc(val(*a), g, db, m, kk, n);
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(da) = grad_slot(work, nodes, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => add_into(work, nodes, *a, g),
            Op::Add(a, b) => {
                add_into(work, nodes, *a, g);
                add_into(work, nodes, *b, g);
            }
            Op::Sub(a, b) => {
                add_into(work, nodes, *a, g);
                if let Some(db) = grad_slot(work, nodes, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(da) = grad_slot(work, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i];
                    }
                }
                if let Some(db) = grad_slot(work, nodes, *b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = grad_slot(work, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s);
                }
            }
            Op::AddScalar(a) => add_into(work, nodes, *a, g),
            Op::Relu(a) => {
                let va = val(*a);
                if let Some(da) = grad_slot(work, nodes, *a) {
                    for i in 0..g.len() {
                        if va[i] > F::zero() {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(da) = grad_slot(work, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * (F::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                if let Some(da) = grad_slot(work, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let va = val(*a);
                if let Some(da) = grad_slot(work, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / va[i];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = grad_slot(work, nodes, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = grad_slot(work, nodes, *a) {
                    let n = F::of(da.len().max(1) as f64);
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                if let Some(dx) = grad_slot(work, nodes, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |kk: usize| (o * len + kk) * inner + i;
                            let dot: F = (0..*len).map(|kk| g[at(kk)] * y[at(kk)]).sum();
                            for kk in 0..*len {
                                dx[at(kk)] += y[at(kk)] * (g[at(kk)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.len();
                let gm = val(*gamma);
                let rows = rstd.len();
                let df = F::of(d as f64);
                if let Some(dg) = grad_slot(work, nodes, *gamma) {
                    for r in 0..rows {
                        for kk in 0..d {
                            dg[kk] += g[r * d + kk] * xhat[r * d + kk];
                        }
                    }
                }
                if let Some(db) = grad_slot(work, nodes, *beta) {
                    for r in 0..rows {
                        for kk in 0..d {
                            db[kk] += g[r * d + kk];
                        }
                    }
                }
                if let Some(dx) = grad_slot(work, nodes, *x) {
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for kk in 0..d {
                            let gy = g[r * d + kk] * gm[kk];
                            m1 += gy;
                            m2 += gy * xhat[r * d + kk];
                        }
                        m1 = m1 / df;
                        m2 = m2 / df;
                        for kk in 0..d {
                            let gy = g[r * d + kk] * gm[kk];
                            dx[r * d + kk] += rstd[r] * (gy - m1 - xhat[r * d + kk] * m2);
                        }
                    }
                }
            }
            Op::Conv2d { x, k: kern, geom, ho, wo, cols } => {
                let cout = nodes[kern.0].value.shape()[0];
                let ck = geom.channels * geom.taps();
                let plane = ho * wo;
                if let Some(dk) = grad_slot(work, nodes, *kern) {
                    kernels::matmul_a_bt_acc(g, cols, dk, cout, plane, ck);
                }
                if nodes[x.0].requires_grad {
                    let mut dcols = vec![F::zero(); ck * plane];
                    kernels::matmul_at_b_acc(val(*kern), g, &mut dcols, cout, ck, plane);
                    let dx = grad_slot(work, nodes, *x).expect("requires grad");
                    kernels::col2im_acc(&dcols, geom, *ho, *wo, dx);
                }
            }
            Op::DeformConv { x, offsets, w, geom, ho, wo, cols } => {
                let cout = nodes[w.0].value.shape()[0];
                let taps = geom.taps();
                let ck = geom.channels * taps;
                let plane = ho * wo;
                if let Some(dw) = grad_slot(work, nodes, *w) {
                    kernels::matmul_a_bt_acc(g, cols, dw, cout, plane, ck);
                }
                let need_x = nodes[x.0].requires_grad;
                let need_off = nodes[offsets.0].requires_grad;
                if need_x || need_off {
                    let mut dcols = vec![F::zero(); ck * plane];
                    kernels::matmul_at_b_acc(val(*w), g, &mut dcols, cout, ck, plane);
                    let xs = val(*x);
                    let off = val(*offsets);
                    let (h, wd) = (geom.height, geom.width);
                    let mut dx = vec![F::zero(); if need_x { xs.len() } else { 0 }];
                    let mut doff = vec![F::zero(); off.len()];
                    for n in 0..taps {
                        let (ti, tj) = geom.tap(n);
                        for i in 0..*ho {
                            for j in 0..*wo {
                                let p = i * wo + j;
                                let pi = F::of((i as isize + ti) as f64) + off[2 * n * plane + p];
                                let pj = F::of((j as isize + tj) as f64) + off[(2 * n + 1) * plane + p];
                                let (mut gi, mut gj) = (F::zero(), F::zero());
                                for c in 0..geom.channels {
                                    let gc = dcols[(c * taps + n) * plane + p];
                                    let src = &xs[c * h * wd..(c + 1) * h * wd];
                                    let dst = if need_x { Some(&mut dx[c * h * wd..(c + 1) * h * wd]) } else { None };
                                    let (a, b) = kernels::bilinear_backward(src, dst, h, wd, pi, pj, gc);
                                    gi += a;
                                    gj += b;
                                }
                                doff[2 * n * plane + p] += gi;
                                doff[(2 * n + 1) * plane + p] += gj;
                            }
                        }
                    }
                    if need_x {
                        add_into(work, nodes, *x, &dx);
                    }
                    if need_off {
                        add_into(work, nodes, *offsets, &doff);
                    }
                }
            }
            Op::BilinearSample { x, coords } => {
                let sx = nodes[x.0].value.shape();
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let pc = val(*coords);
                let xs = val(*x);
                let need_x = nodes[x.0].requires_grad;
                let mut dx = vec![F::zero(); if need_x { xs.len() } else { 0 }];
                let (mut gi, mut gj) = (F::zero(), F::zero());
                for ch in 0..c {
                    let src = &xs[ch * h * w..(ch + 1) * h * w];
                    let dst = if need_x { Some(&mut dx[ch * h * w..(ch + 1) * h * w]) } else { None };
                    let (a, b) = kernels::bilinear_backward(src, dst, h, w, pc[0], pc[1], g[ch]);
                    gi += a;
                    gj += b;
                }
                if need_x {
                    add_into(work, nodes, *x, &dx);
                }
                add_into(work, nodes, *coords, &[gi, gj]);
            }
            Op::AddChannelBias(x, b) => {
                add_into(work, nodes, *x, g);
                if let Some(db) = grad_slot(work, nodes, *b) {
                    let inner = g.len() / db.len();
                    for (c, chunk) in g.chunks(inner.max(1)).enumerate().take(db.len()) {
                        db[c] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                add_into(work, nodes, *x, g);
                if let Some(db) = grad_slot(work, nodes, *b) {
                    let d = db.len();
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                }
            }
            Op::MulSpatial(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let inner = vb.len();
                if let Some(da) = grad_slot(work, nodes, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * vb[i % inner];
                    }
                }
                if let Some(db) = grad_slot(work, nodes, *b) {
                    for i in 0..g.len() {
                        db[i % inner] += g[i] * va[i];
                    }
                }
            }
            Op::PixelShuffle { x, s } => {
                let sx = nodes[x.0].value.shape();
                let (c, h, w) = (sx[0] / (s * s), sx[1], sx[2]);
                if let Some(dx) = grad_slot(work, nodes, *x) {
                    let mut kk = 0;
                    for ch in 0..c {
                        for y in 0..s * h {
                            for xx in 0..s * w {
                                dx[kernels::shuffle_src(ch, y, xx, *s, h, w)] += g[kk];
                                kk += 1;
                            }
                        }
                    }
                }
            }
            Op::PixelUnshuffle { x, s } => {
                let sx = nodes[x.0].value.shape();
                let (c, h, w) = (sx[0], sx[1] / s, sx[2] / s);
                if let Some(dx) = grad_slot(work, nodes, *x) {
                    let mut kk = 0;
                    for ch in 0..c {
                        for y in 0..s * h {
                            for xx in 0..s * w {
                                dx[kk] += g[kernels::shuffle_src(ch, y, xx, *s, h, w)];
                                kk += 1;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if let Some(dv) = grad_slot(work, nodes, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            dv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = kernels::split_axis(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = grad_slot(work, nodes, *x) {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dx[(o * full + start) * inner..(o * full + start + len) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::WeightedSum { weights, inputs } => {
                let ws = val(*weights).to_vec();
                if nodes[weights.0].requires_grad {
                    let dw: Vec<F> = inputs
                        .iter()
                        .map(|&v| val(v).iter().zip(g).map(|(&x, &gg)| x * gg).sum())
                        .collect();
                    add_into(work, nodes, *weights, &dw);
                }
                for (&v, &wk) in inputs.iter().zip(&ws) {
                    if let Some(dv) = grad_slot(work, nodes, v) {
                        dv.iter_mut().zip(g).for_each(|(d, &gg)| *d += wk * gg);
                    }
                }
            }
            Op::Contrastive { feats, anchors, mode, tau } => {
                if let Some(df) = grad_slot(work, nodes, *feats) {
                    let fs = nodes[feats.0].value.data();
                    let c = nodes[feats.0].value.shape()[1];
                    let scale = g[0] / F::of(anchors.len() as f64);
                    for a in anchors {
                        anchor_backward(fs, df, c, a, *mode, *tau, scale);
                    }
                }
            }
            Op::FaultySquare(x) => {
                let vx = val(*x);
                if let Some(dx) = grad_slot(work, nodes, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * vx[i];
                    }
                }
            }
        }
    }
}

fn row<F: Real>(fs: &[F], c: usize, r: usize) -> &[F] {
    &fs[r * c..(r + 1) * c]
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn log_sum_exp<F: Real>(xs: impl Iterator<Item = F> + Clone) -> F {
    let mx = xs.clone().fold(F::neg_infinity(), F::max);
    mx + xs.map(|x| (x - mx).exp()).sum::<F>().ln()
}

/// Inner products of the anchor with its positives then negatives.
fn anchor_scores<F: Real>(fs: &[F], c: usize, a: &ContrastiveAnchor) -> (Vec<F>, Vec<F>) {
    let u = row(fs, c, a.anchor);
    let pos = a.positives.iter().map(|&r| dot(u, row(fs, c, r))).collect();
    let neg = a.negatives.iter().map(|&r| dot(u, row(fs, c, r))).collect();
    (pos, neg)
}

fn anchor_loss<F: Real>(fs: &[F], c: usize, a: &ContrastiveAnchor, mode: SimilarityMode, tau: F) -> Option<F> {
    let (pos, neg) = anchor_scores(fs, c, a);
    match mode {
        SimilarityMode::ExpInner => {
            let sp = pos.iter().map(|&s| s / tau);
            let sa = sp.clone().chain(neg.iter().map(|&s| s / tau));
            Some(log_sum_exp(sa) - log_sum_exp(sp))
        }
        SimilarityMode::RawInner => {
            let p: F = pos.iter().copied().sum();
            let n: F = neg.iter().copied().sum();
            (p > F::zero() && p + n > F::zero()).then(|| (p + n).ln() - p.ln())
        }
    }
}

fn anchor_backward<F: Real>(
    fs: &[F],
    df: &mut [F],
    c: usize,
    a: &ContrastiveAnchor,
    mode: SimilarityMode,
    tau: F,
    scale: F,
) {
    let (pos, neg) = anchor_scores(fs, c, a);
    // d loss / d <anchor, row>
    let (dpos, dneg): (Vec<F>, Vec<F>) = match mode {
        SimilarityMode::ExpInner => {
            let sp = pos.iter().map(|&s| s / tau);
            let sa = sp.clone().chain(neg.iter().map(|&s| s / tau));
            let (lse_all, lse_pos) = (log_sum_exp(sa), log_sum_exp(sp));
            let dp = pos
                .iter()
                .map(|&s| ((s / tau - lse_all).exp() - (s / tau - lse_pos).exp()) / tau)
                .collect();
            let dn = neg.iter().map(|&s| (s / tau - lse_all).exp() / tau).collect();
            (dp, dn)
        }
        SimilarityMode::RawInner => {
            let p: F = pos.iter().copied().sum();
            let n: F = neg.iter().copied().sum();
            let d = p + n;
            let gp = F::one() / d - F::one() / p;
            (vec![gp; pos.len()], vec![F::one() / d; neg.len()])
        }
    };
    let others = a.positives.iter().zip(&dpos).chain(a.negatives.iter().zip(&dneg));
    for (&r, &ds) in others {
        let ds = ds * scale;
        for k in 0..c {
            let (uk, vk) = (fs[a.anchor * c + k], fs[r * c + k]);
            df[a.anchor * c + k] += ds * vk;
            df[r * c + k] += ds * uk;
        }
    }
}
