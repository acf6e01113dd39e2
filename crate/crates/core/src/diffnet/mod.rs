//! A small reverse-mode differentiable compute library.
//!
//! A [`Graph`] records operations eagerly as they are applied; each node
//! owns its forward value and, after [`Graph::backward`], its gradient.
//! Node ids grow monotonically and every op only consumes earlier nodes, so
//! a reverse sweep over ids is a valid topological order.
//!
//! Feature maps are single-sample `[C, H, W]` tensors; batching is done by
//! running independent graphs and summing their parameter gradients.

mod gradcheck;
mod io;
mod optim;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::warp::{apply_site_kernels, window_taps, Dims, Mask, Site, KERNEL_TAPS};

pub use gradcheck::{grad_check, CoordCheck, GradCheckOptions, GradCheckReport};
pub use io::{load_params, params_from_bytes, params_to_bytes, save_params, WEIGHTS_MAGIC};
pub use optim::Adam;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Uniform `U(-b, b)` with `b = gain · √(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::ShapeMismatch(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Parameter gradients keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Vec<f64>) {
        self.map.insert(name.into(), g);
    }

    /// `self += k · other`, adding entries missing on either side.
    pub fn add_scaled(&mut self, other: &Grads, k: f64) {
        for (name, g) in &other.map {
            let dst = self.map.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (d, s) in dst.iter_mut().zip(g) {
                *d += k * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.map.values().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Handle to a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed sampling plan for [`Graph::site_warp`].
#[derive(Clone, Debug)]
pub struct SitePlan {
    pub sites: Vec<Site>,
    pub src: Dims,
    pub dst: Dims,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        xpad: Vec<f64>,
        kh: usize,
        kw: usize,
    },
    MaskMul {
        x: Var,
        mask: Arc<[f64]>,
    },
    PixelAffine {
        x: Var,
        b: Var,
        scale: Arc<[f64]>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Add(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    DepthToSpace(Var, usize),
    ChannelScale {
        x: Var,
        w: Var,
    },
    SiteWarp {
        feat: Var,
        kernels: Var,
        plan: Arc<SitePlan>,
        kernel_channels: usize,
    },
    MaskedL1 {
        x: Var,
        target: Arc<[f64]>,
        mask: Arc<[f64]>,
        norm: f64,
    },
    Dot {
        x: Var,
        weights: Arc<[f64]>,
    },
    SumSquares(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Eager computation graph with reverse-mode gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, Var>,
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    if !accumulate {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    gemm_acc(m, k, n, a, (rsa, csa), b, (rsb, csb), c, (n, 1));
}

/// `C += A·B` with arbitrary non-negative (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |r: usize, q: usize, s: (usize, usize)| (r - 1) * s.0 + (q - 1) * s.1;
    assert!(last(m, k, sa) < a.len() && last(k, n, sb) < b.len() && last(m, n, sc) < c.len());
    // SAFETY: the assertion above bounds the furthest element addressed by
    // each stride pattern within its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// Geometry of a same-padded convolution evaluated as shifted GEMMs over a
/// zero-padded, row-flattened input.
#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    wp: usize,
    plane: usize,
    /// Flat index of output pixel (0, 0) inside a padded plane.
    start: usize,
    /// Flat span covering every output pixel.
    span: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, kh: usize, kw: usize) -> Self {
        let (ph, pw) = (kh / 2, kw / 2);
        let wp = w + 2 * pw;
        Self {
            h,
            w,
            ph,
            pw,
            wp,
            plane: (h + 2 * ph) * wp,
            start: ph * wp + pw,
            span: if h == 0 || w == 0 { 0 } else { (h - 1) * wp + w },
        }
    }

    /// Offset into a padded plane of the input read by tap `(ky, kx)` for output pixel (0, 0).
    fn tap_start(&self, ky: usize, kx: usize) -> usize {
        self.start + ky * self.wp + kx - self.ph * self.wp - self.pw
    }

    fn pad(&self, x: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * self.plane];
        for ci in 0..c {
            for y in 0..self.h {
                let dst = ci * self.plane + (y + self.ph) * self.wp + self.pw;
                out[dst..dst + self.w].copy_from_slice(&x[(ci * self.h + y) * self.w..][..self.w]);
            }
        }
        out
    }
}

/// Normalization factors and updated mask of a partial convolution.
///
/// Taps inside the image count their mask value, taps in the zero padding
/// count as valid for normalization but cannot validate a pixel by
/// themselves. The factor is `kh·kw / (Σ m_in + n_pad)` where `Σ m_in > 0`,
/// else zero. An all-ones mask therefore yields factor 1 everywhere.
pub fn pconv_factors(mask: &Mask, kh: usize, kw: usize) -> (Vec<f64>, Mask) {
    let (w, h) = (mask.width(), mask.height());
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut factors = vec![0.0; w * h];
    let mut updated = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (mut valid, mut pad) = (0usize, 0usize);
            for ky in -ph..=ph {
                for kx in -pw..=pw {
                    let (sy, sx) = (y as isize + ky, x as isize + kx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        pad += 1;
                    } else if mask.get(sx as usize, sy as usize) {
                        valid += 1;
                    }
                }
            }
            if valid > 0 {
                factors[y * w + x] = (kh * kw) as f64 / (valid + pad) as f64;
                updated.set(x, y, true);
            }
        }
    }
    (factors, updated)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Gradient of the last backward root with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    /// Same-padded stride-1 cross-correlation: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.expect_rank(x, 3, "conv2d input")?;
        self.expect_rank(w, 4, "conv2d weight")?;
        let (cin, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let ws = self.shape(w).to_vec();
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if ws[1] != cin || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight {ws:?} incompatible with input channels {cin} (odd kernels required)"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        let xpad = if kh == 1 && kw == 1 {
            gemm_acc(
                cout,
                cin,
                hw,
                self.data(w),
                (cin, 1),
                self.data(x),
                (hw, 1),
                &mut out,
                (hw, 1),
            );
            Vec::new()
        } else {
            let geo = ConvGeom::new(h, wd, kh, kw);
            let xpad = geo.pad(self.data(x), cin);
            let taps = kh * kw;
            let mut ypad = vec![0.0; cout * geo.span];
            for ky in 0..kh {
                for kx in 0..kw {
                    let t = ky * kw + kx;
                    gemm_acc(
                        cout,
                        cin,
                        geo.span,
                        &self.data(w)[t..],
                        (cin * taps, taps),
                        &xpad[geo.tap_start(ky, kx)..],
                        (geo.plane, 1),
                        &mut ypad,
                        (geo.span, 1),
                    );
                }
            }
            for co in 0..cout {
                for y in 0..h {
                    out[(co * h + y) * wd..][..wd].copy_from_slice(&ypad[co * geo.span + y * geo.wp..][..wd]);
                }
            }
            xpad
        };
        if let Some(b) = b {
            for (co, &bv) in self.data(b).iter().enumerate() {
                out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(vec![cout, h, wd], out)?,
            Op::Conv2d { x, w, b, xpad, kh, kw },
            needs,
        ))
    }

    /// Multiplies `x [C,H,W]` by a per-pixel constant broadcast over channels.
    pub fn mask_mul(&mut self, x: Var, mask: Arc<[f64]>) -> Result<Var> {
        self.expect_rank(x, 3, "mask_mul")?;
        let s = self.shape(x).to_vec();
        let hw = s[1] * s[2];
        if mask.len() != hw {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} pixels for feature {s:?}",
                mask.len()
            )));
        }
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(hw.max(1))
            .flat_map(|plane| plane.iter().zip(mask.iter()).map(|(v, m)| v * m))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(s, out)?, Op::MaskMul { x, mask }, needs))
    }

    /// `y[c,p] = x[c,p]·scale[p] + b[c]` where `scale[p] ≠ 0`, else 0.
    pub fn pixel_affine(&mut self, x: Var, b: Var, scale: Arc<[f64]>) -> Result<Var> {
        self.expect_rank(x, 3, "pixel_affine")?;
        let s = self.shape(x).to_vec();
        let hw = s[1] * s[2];
        if scale.len() != hw || self.shape(b) != [s[0]] {
            return Err(Error::ShapeMismatch("pixel_affine shapes".into()));
        }
        let bias = self.data(b).to_vec();
        let mut out = vec![0.0; s[0] * hw];
        for (c, (o, xi)) in out
            .chunks_exact_mut(hw.max(1))
            .zip(self.data(x).chunks_exact(hw.max(1)))
            .enumerate()
        {
            for p in 0..hw {
                if scale[p] != 0.0 {
                    o[p] = xi[p] * scale[p] + bias[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor::new(s, out)?, Op::PixelAffine { x, b, scale }, needs))
    }

    /// Partial convolution with a per-pixel validity mask.
    ///
    /// Returns the output and the updated mask (valid where any in-image
    /// tap of the window was valid).
    pub fn pconv2d(&mut self, x: Var, mask: &Mask, w: Var, b: Var) -> Result<(Var, Mask)> {
        self.expect_rank(x, 3, "pconv2d input")?;
        self.expect_rank(w, 4, "pconv2d weight")?;
        let s = self.shape(x);
        if mask.width() != s[2] || mask.height() != s[1] {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} for feature {s:?}",
                mask.width(),
                mask.height()
            )));
        }
        let (kh, kw) = (self.shape(w)[2], self.shape(w)[3]);
        let m: Arc<[f64]> = mask.as_f64().into();
        let xm = self.mask_mul(x, m)?;
        let y = self.conv2d(xm, w, None)?;
        let (factors, updated) = pconv_factors(mask, kh, kw);
        let out = self.pixel_affine(y, b, factors.into())?;
        Ok((out, updated))
    }

    /// Affine map over the last axis: `x [N,in]` or `[in]`, `w [out,in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.expect_rank(w, 2, "linear weight")?;
        let xs = self.shape(x).to_vec();
        let (nout, nin) = (self.shape(w)[0], self.shape(w)[1]);
        let (rows, out_shape) = match xs.as_slice() {
            [n] if *n == nin => (1, vec![nout]),
            [r, n] if *n == nin => (*r, vec![*r, nout]),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "linear input {xs:?} for weight [{nout}, {nin}]"
                )))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [nout] {
                return Err(Error::ShapeMismatch("linear bias".into()));
            }
        }
        let mut out = vec![0.0; rows * nout];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(nout.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            nin,
            nout,
            self.data(x),
            false,
            self.data(w),
            true,
            &mut out,
            b.is_some(),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        };
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu(x, slope), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v * k).collect(),
        };
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, k), needs)
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            if self.shape(v).len() != tail.len() + 1 || self.shape(v)[1..] != tail[..] {
                return Err(Error::ShapeMismatch(format!(
                    "concat {:?} with trailing dims {tail:?}",
                    self.shape(v)
                )));
            }
            lead += self.shape(v)[0];
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec()), needs))
    }

    /// Rows `[start, start+len)` of the first axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::ShapeMismatch(format!("slice {start}..{} of {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, start, len }, needs))
    }

    /// Sub-pixel rearrangement `[C·s², H, W] → [C, sH, sW]`.
    pub fn depth_to_space(&mut self, x: Var, s: usize) -> Result<Var> {
        self.expect_rank(x, 3, "depth_to_space")?;
        let out = depth_to_space(self.value(x), s)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::DepthToSpace(x, s), needs))
    }

    /// `x [C,H,W] ⊙ w [1,H,W]` broadcast over channels.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        self.expect_rank(x, 3, "channel_scale")?;
        let s = self.shape(x).to_vec();
        if self.shape(w) != [1, s[1], s[2]] {
            return Err(Error::ShapeMismatch(format!(
                "channel_scale weight {:?} for {s:?}",
                self.shape(w)
            )));
        }
        let hw = s[1] * s[2];
        let wv = self.data(w);
        let data: Vec<f64> = self
            .data(x)
            .chunks_exact(hw.max(1))
            .flat_map(|plane| plane.iter().zip(wv).map(|(a, b)| a * b))
            .collect();
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor { shape: s, data }, Op::ChannelScale { x, w }, needs))
    }

    /// Resamples `feat [C,H,W]` onto `plan.dst` with per-site kernels.
    ///
    /// `kernels` is `[n_sites, C·9]` (depthwise) or `[n_sites, 9]` (shared);
    /// pixels without a site are zero.
    pub fn site_warp(&mut self, feat: Var, kernels: Var, plan: Arc<SitePlan>) -> Result<Var> {
        self.expect_rank(feat, 3, "site_warp feature")?;
        let fs = self.shape(feat).to_vec();
        let c = fs[0];
        if fs[1] != plan.src.height || fs[2] != plan.src.width {
            return Err(Error::ShapeMismatch(format!(
                "feature {fs:?} for plan source {}x{}",
                plan.src.width, plan.src.height
            )));
        }
        let ks = self.shape(kernels).to_vec();
        let n = plan.sites.len();
        let kernel_channels = match ks.as_slice() {
            [rows, cols] if *rows == n && *cols == c * KERNEL_TAPS => c,
            [rows, cols] if *rows == n && *cols == KERNEL_TAPS => 1,
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "kernels {ks:?} for {n} sites and {c} channels"
                )))
            }
        };
        let values = apply_site_kernels(
            self.data(feat),
            plan.src,
            c,
            &plan.sites,
            self.data(kernels),
            kernel_channels,
        );
        let hw = plan.dst.len();
        let mut out = vec![0.0; c * hw];
        for (s, v) in plan.sites.iter().zip(values.chunks_exact(c.max(1))) {
            for (ch, &val) in v.iter().enumerate() {
                out[ch * hw + s.index] = val;
            }
        }
        let shape = vec![c, plan.dst.height, plan.dst.width];
        let needs = self.needs(feat) || self.needs(kernels);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::SiteWarp {
                feat,
                kernels,
                plan,
                kernel_channels,
            },
            needs,
        ))
    }

    /// `Σ_valid |x − target| / norm` with a per-pixel mask broadcast over channels.
    pub fn masked_l1(&mut self, x: Var, target: Arc<[f64]>, mask: Arc<[f64]>, norm: f64) -> Result<Var> {
        self.expect_rank(x, 3, "masked_l1")?;
        let s = self.shape(x);
        let hw = s[1] * s[2];
        if target.len() != self.value(x).len() || mask.len() != hw {
            return Err(Error::ShapeMismatch("masked_l1 shapes".into()));
        }
        let mut sum = 0.0;
        for (c, xs) in self.data(x).chunks_exact(hw.max(1)).enumerate() {
            let ts = &target[c * hw..(c + 1) * hw];
            for p in 0..hw {
                if mask[p] != 0.0 {
                    sum += (xs[p] - ts[p]).abs();
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(sum / norm),
            Op::MaskedL1 { x, target, mask, norm },
            needs,
        ))
    }

    /// `Σ x ⊙ weights`.
    pub fn dot(&mut self, x: Var, weights: Arc<[f64]>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch("dot weights".into()));
        }
        let v = self.data(x).iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::Dot { x, weights }, needs))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Collapses any shape into a vector.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.data(x).iter().map(|a| a * a).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::SumSquares(x), needs)
    }

    /// Reverse sweep from a scalar root with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_seeded(root, 1.0)
    }

    /// Reverse sweep from a scalar root with gradient `seed`.
    pub fn backward_seeded(&mut self, root: Var, seed: f64) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![seed]);
        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradients of every parameter leaf from the last backward sweep;
    /// parameters the root does not depend on get zeros.
    pub fn param_grads(&self) -> Grads {
        let mut out = Grads::default();
        for (name, v) in &self.params {
            let g = self
                .grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Sub-pixel rearrangement `[C·s², H, W] → [C, sH, sW]`:
/// `y[c, h·s+i, w·s+j] = x[c·s² + i·s + j, h, w]`.
pub fn depth_to_space(x: &Tensor, s: usize) -> Result<Tensor> {
    let [cs, h, w] = x.shape[..] else {
        return Err(Error::ShapeMismatch("depth_to_space expects [C,H,W]".into()));
    };
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::ShapeMismatch(format!("{cs} channels not divisible by {s}²")));
    }
    let c = cs / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for i in 0..s {
            for j in 0..s {
                let src = &x.data[((ci * s + i) * s + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[(ci * oh + y * s + i) * ow + xx * s + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn space_to_depth_raw(y: &[f64], c: usize, oh: usize, ow: usize, s: usize) -> Vec<f64> {
    let (h, w) = (oh / s, ow / s);
    let mut out = vec![0.0; y.len()];
    for ci in 0..c {
        for i in 0..s {
            for j in 0..s {
                let dst = &mut out[((ci * s + i) * s + j) * h * w..][..h * w];
                for yy in 0..h {
                    for xx in 0..w {
                        dst[yy * w + xx] = y[(ci * oh + yy * s + i) * ow + xx * s + j];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`depth_to_space`]: `[C, sH, sW] → [C·s², H, W]`.
pub fn space_to_depth(y: &Tensor, s: usize) -> Result<Tensor> {
    let [c, oh, ow] = y.shape[..] else {
        return Err(Error::ShapeMismatch("space_to_depth expects [C,H,W]".into()));
    };
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {oh}x{ow} not divisible by {s}"
        )));
    }
    Tensor::new(
        vec![c * s * s, oh / s, ow / s],
        space_to_depth_raw(&y.data, c, oh, ow, s),
    )
}

/// Parameter names of a residual block `x + conv2(relu(conv1(x)))`.
pub fn residual_block_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.conv1.w"),
        format!("{prefix}.conv1.b"),
        format!("{prefix}.conv2.w"),
        format!("{prefix}.conv2.b"),
    ]
}

/// Registers the weights of a residual block with `c` channels and `k × k` kernels.
/// Gain applied to the second convolution of a freshly initialised residual
/// block, so deep stacks start close to the identity.
pub const RESIDUAL_GAIN: f64 = 0.1;

pub fn init_residual_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c: usize,
    k: usize,
) -> Result<()> {
    let [w1, b1, w2, b2] = residual_block_names(prefix);
    store.insert(w1, kaiming_uniform(rng, &[c, c, k, k], c * k * k, 1.0))?;
    store.insert(b1, Tensor::zeros(&[c]))?;
    store.insert(w2, kaiming_uniform(rng, &[c, c, k, k], c * k * k, RESIDUAL_GAIN))?;
    store.insert(b2, Tensor::zeros(&[c]))?;
    Ok(())
}

impl Graph {
    /// `x + conv2(relu(conv1(x)))`.
    pub fn residual_block(&mut self, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = residual_block_names(prefix);
        let (w1, b1) = (self.param(store, &w1)?, self.param(store, &b1)?);
        let (w2, b2) = (self.param(store, &w2)?, self.param(store, &b2)?);
        let h = self.conv2d(x, w1, Some(b1))?;
        let h = self.relu(h);
        let h = self.conv2d(h, w2, Some(b2))?;
        if self.shape(h) != self.shape(x) {
            return Err(Error::ShapeMismatch("residual block must preserve channels".into()));
        }
        self.add(x, h)
    }

    /// Masked residual block built from partial convolutions; every
    /// intermediate is re-confined to `mask`.
    pub fn masked_residual_block(&mut self, store: &ParamStore, prefix: &str, x: Var, mask: &Mask) -> Result<Var> {
        let [w1, b1, w2, b2] = residual_block_names(prefix);
        let (w1, b1) = (self.param(store, &w1)?, self.param(store, &b1)?);
        let (w2, b2) = (self.param(store, &w2)?, self.param(store, &b2)?);
        let m: Arc<[f64]> = mask.as_f64().into();
        let (h, _) = self.pconv2d(x, mask, w1, b1)?;
        let h = self.mask_mul(h, m.clone())?;
        let h = self.relu(h);
        let (h, _) = self.pconv2d(h, mask, w2, b2)?;
        let h = self.mask_mul(h, m)?;
        self.add(x, h)
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var, from: usize) -> Option<&'a mut Vec<f64>> {
    assert!(v.0 < from, "graph cycle: node {from} consumes node {}", v.0);
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn shp(nodes: &[Node], v: Var) -> &[usize] {
    &nodes[v.0].value.shape
}

fn dat(nodes: &[Node], v: Var) -> &[f64] {
    &nodes[v.0].value.data
}

fn nd(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].needs_grad
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, xpad, kh, kw } => {
            let (kh, kw) = (*kh, *kw);
            let xs = shp(nodes, *x);
            let (cin, h, wd) = (xs[0], xs[1], xs[2]);
            let hw = h * wd;
            let cout = shp(nodes, *w)[0];
            let taps = kh * kw;
            if let Some(b) = b {
                if let Some(gb) = acc(nodes, grads, *b, id) {
                    for (co, gbv) in gb.iter_mut().enumerate() {
                        *gbv += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            let wv = dat(nodes, *w);
            if xpad.is_empty() {
                let xv = dat(nodes, *x);
                if let Some(gw) = acc(nodes, grads, *w, id) {
                    gemm_acc(cout, hw, cin, g, (hw, 1), xv, (1, hw), gw, (cin, 1));
                }
                if let Some(gx) = acc(nodes, grads, *x, id) {
                    gemm_acc(cin, cout, hw, wv, (1, cin), g, (hw, 1), gx, (hw, 1));
                }
            } else {
                let geo = ConvGeom::new(h, wd, kh, kw);
                let mut gpad = vec![0.0; cout * geo.span];
                for co in 0..cout {
                    for y in 0..h {
                        gpad[co * geo.span + y * geo.wp..][..wd].copy_from_slice(&g[(co * h + y) * wd..][..wd]);
                    }
                }
                if let Some(gw) = acc(nodes, grads, *w, id) {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let t = ky * kw + kx;
                            gemm_acc(
                                cout,
                                geo.span,
                                cin,
                                &gpad,
                                (geo.span, 1),
                                &xpad[geo.tap_start(ky, kx)..],
                                (1, geo.plane),
                                &mut gw[t..],
                                (cin * taps, taps),
                            );
                        }
                    }
                }
                if nd(nodes, *x) {
                    let mut gxpad = vec![0.0; cin * geo.plane];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let t = ky * kw + kx;
                            gemm_acc(
                                cin,
                                cout,
                                geo.span,
                                &wv[t..],
                                (taps, cin * taps),
                                &gpad,
                                (geo.span, 1),
                                &mut gxpad[geo.tap_start(ky, kx)..],
                                (geo.plane, 1),
                            );
                        }
                    }
                    if let Some(gx) = acc(nodes, grads, *x, id) {
                        for ci in 0..cin {
                            for y in 0..h {
                                let src = &gxpad[ci * geo.plane + (y + geo.ph) * geo.wp + geo.pw..][..wd];
                                gx[(ci * h + y) * wd..][..wd]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, s)| *d += s);
                            }
                        }
                    }
                }
            }
        }
        Op::MaskMul { x, mask } => {
            let hw = mask.len();
            if let Some(gx) = acc(nodes, grads, *x, id) {
                for (gxs, gs) in gx.chunks_exact_mut(hw.max(1)).zip(g.chunks_exact(hw.max(1))) {
                    for p in 0..hw {
                        gxs[p] += gs[p] * mask[p];
                    }
                }
            }
        }
        Op::PixelAffine { x, b, scale } => {
            let hw = scale.len();
            if let Some(gx) = acc(nodes, grads, *x, id) {
                for (gxs, gs) in gx.chunks_exact_mut(hw.max(1)).zip(g.chunks_exact(hw.max(1))) {
                    for p in 0..hw {
                        gxs[p] += gs[p] * scale[p];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b, id) {
                for (c, gs) in g.chunks_exact(hw.max(1)).enumerate() {
                    gb[c] += (0..hw).filter(|&p| scale[p] != 0.0).map(|p| gs[p]).sum::<f64>();
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (nout, nin) = (shp(nodes, *w)[0], shp(nodes, *w)[1]);
            let rows = dat(nodes, *x).len() / nin.max(1);
            if let Some(b) = b {
                if let Some(gb) = acc(nodes, grads, *b, id) {
                    for row in g.chunks_exact(nout.max(1)) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            if nd(nodes, *w) {
                let xv = dat(nodes, *x);
                if let Some(gw) = acc(nodes, grads, *w, id) {
                    gemm(nout, rows, nin, g, true, xv, false, gw, true);
                }
            }
            if nd(nodes, *x) {
                let wv = dat(nodes, *w);
                if let Some(gx) = acc(nodes, grads, *x, id) {
                    gemm(rows, nout, nin, g, false, wv, false, gx, true);
                }
            }
        }
        Op::Relu(x) => {
            let xv = dat(nodes, *x);
            if let Some(gx) = acc(nodes, grads, *x, id) {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::LeakyRelu(x, slope) => {
            let xv = dat(nodes, *x);
            if let Some(gx) = acc(nodes, grads, *x, id) {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += if *v > 0.0 { *s } else { slope * s };
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = acc(nodes, grads, v, id) {
                    gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Scale(x, k) => {
            if let Some(gx) = acc(nodes, grads, *x, id) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += k * s);
            }
        }
        Op::Concat(xs) => {
            let mut offset = 0;
            for &v in xs {
                let n = dat(nodes, v).len();
                if let Some(gv) = acc(nodes, grads, v, id) {
                    gv.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, s)| *d += s);
                }
                offset += n;
            }
        }
        Op::Slice { x, start, len } => {
            let inner = dat(nodes, *x).len() / shp(nodes, *x)[0].max(1);
            if let Some(gx) = acc(nodes, grads, *x, id) {
                gx[start * inner..(start + len) * inner]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, s)| *d += s);
            }
        }
        Op::DepthToSpace(x, s) => {
            let xs = shp(nodes, *x).to_vec();
            let back = space_to_depth_raw(g, xs[0] / (s * s), xs[1] * s, xs[2] * s, *s);
            if let Some(gx) = acc(nodes, grads, *x, id) {
                gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
            }
        }
        Op::ChannelScale { x, w } => {
            let hw = dat(nodes, *w).len();
            if nd(nodes, *w) {
                let xv = dat(nodes, *x);
                if let Some(gw) = acc(nodes, grads, *w, id) {
                    for (gs, xs) in g.chunks_exact(hw.max(1)).zip(xv.chunks_exact(hw.max(1))) {
                        for p in 0..hw {
                            gw[p] += gs[p] * xs[p];
                        }
                    }
                }
            }
            if nd(nodes, *x) {
                let wv = dat(nodes, *w);
                if let Some(gx) = acc(nodes, grads, *x, id) {
                    for (gxs, gs) in gx.chunks_exact_mut(hw.max(1)).zip(g.chunks_exact(hw.max(1))) {
                        for p in 0..hw {
                            gxs[p] += gs[p] * wv[p];
                        }
                    }
                }
            }
        }
        Op::SiteWarp {
            feat,
            kernels,
            plan,
            kernel_channels,
        } => {
            let c = shp(nodes, *feat)[0];
            let kc = *kernel_channels;
            let hw_dst = plan.dst.len();
            let hw_src = plan.src.len();
            let per_site = kc * KERNEL_TAPS;
            if nd(nodes, *kernels) {
                let fv = dat(nodes, *feat);
                if let Some(gk) = acc(nodes, grads, *kernels, id) {
                    for (s, gks) in plan.sites.iter().zip(gk.chunks_exact_mut(per_site)) {
                        let taps = window_taps(s, plan.src);
                        for ch in 0..c {
                            let go = g[ch * hw_dst + s.index];
                            if go == 0.0 {
                                continue;
                            }
                            let kcol = if kc == 1 { 0 } else { ch };
                            let plane = &fv[ch * hw_src..(ch + 1) * hw_src];
                            for t in 0..KERNEL_TAPS {
                                gks[kcol * KERNEL_TAPS + t] += go * plane[taps[t]];
                            }
                        }
                    }
                }
            }
            if nd(nodes, *feat) {
                let kv = dat(nodes, *kernels);
                if let Some(gf) = acc(nodes, grads, *feat, id) {
                    for (s, ks) in plan.sites.iter().zip(kv.chunks_exact(per_site)) {
                        let taps = window_taps(s, plan.src);
                        for ch in 0..c {
                            let go = g[ch * hw_dst + s.index];
                            let kcol = if kc == 1 { 0 } else { ch };
                            let plane = &mut gf[ch * hw_src..(ch + 1) * hw_src];
                            for t in 0..KERNEL_TAPS {
                                plane[taps[t]] += go * ks[kcol * KERNEL_TAPS + t];
                            }
                        }
                    }
                }
            }
        }
        Op::MaskedL1 { x, target, mask, norm } => {
            let hw = mask.len();
            let xv = dat(nodes, *x);
            let k = g[0] / norm;
            if let Some(gx) = acc(nodes, grads, *x, id) {
                for p in 0..xv.len() {
                    if mask[p % hw] != 0.0 {
                        let d = xv[p] - target[p];
                        if d > 0.0 {
                            gx[p] += k;
                        } else if d < 0.0 {
                            gx[p] -= k;
                        }
                    }
                }
            }
        }
        Op::Dot { x, weights } => {
            let k = g[0];
            if let Some(gx) = acc(nodes, grads, *x, id) {
                gx.iter_mut().zip(weights.iter()).for_each(|(d, w)| *d += k * w);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x, id) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::SumSquares(x) => {
            let xv = dat(nodes, *x);
            let k = g[0];
            if let Some(gx) = acc(nodes, grads, *x, id) {
                gx.iter_mut().zip(xv).for_each(|(d, v)| *d += 2.0 * k * v);
            }
        }
    }
}

#[cfg(test)]
mod tests;
