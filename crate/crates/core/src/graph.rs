//! Reverse-mode automatic differentiation over complex tensors.
//!
//! The tape is built eagerly: every op computes its value on construction
//! and records the operation for the backward sweep. For a real-valued
//! scalar loss L the stored gradient of a complex value z = x + iy is
//! `g = ∂L/∂x + i·∂L/∂y` (equivalently 2·∂L/∂z̄),
//! so a step z ← z − η·g decreases L to first order and the convention
//! collapses to the ordinary gradient on the real axis. For a complex-linear
//! op T the backward rule is the adjoint Tᴴ applied to the cotangent.

use crate::error::{Error, Result};
use crate::fft::{fft2_ortho, ifft2_ortho};
use crate::mri::EncodingOperator;
use crate::tensor::CTensor;
use num_complex::Complex64;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        name: Option<String>,
        trainable: bool,
    },
    Add,
    Sub,
    Neg,
    Mul,
    Div,
    Conj,
    ScaleConst(Complex64),
    AddScalarConst,
    MulConst(Arc<CTensor>),
    ClampMinRe(f64),
    ReluRe,
    Abs2,
    ExpH,
    LogH,
    SqrtH,
    Reshape {
        from: Vec<usize>,
    },
    ConcatLast {
        left: usize,
    },
    SumAll,
    SumAxis0,
    SumAxisLast,
    BroadcastAxis0,
    Transpose2,
    Matmul,
    AddRowVec,
    ReImConcat,
    MeanSpatial,
    ScaleByNode,
    Conv2d,
    Conv1dTemporal,
    ModRelu,
    AvgPool2,
    Upsample2,
    Fft2 {
        inverse: bool,
    },
    EncodeFwd(Arc<EncodingOperator>),
    EncodeAdj(Arc<EncodingOperator>),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: CTensor,
}

/// Gradients keyed by trainable-leaf name. Parameters unreachable from the
/// loss are simply absent; [`Gradients::get`] materializes their zero.
#[derive(Debug, Default)]
pub struct Gradients {
    by_name: HashMap<String, CTensor>,
}

impl Gradients {
    pub fn get(&self, name: &str, shape: &[usize]) -> CTensor {
        self.by_name
            .get(name)
            .cloned()
            .unwrap_or_else(|| CTensor::zeros(shape))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &CTensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Complex64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: CTensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, value: CTensor) -> NodeId {
        self.push(
            Op::Leaf {
                name: None,
                trainable: false,
            },
            vec![],
            value,
        )
    }

    pub fn param(&mut self, name: &str, value: CTensor) -> NodeId {
        self.push(
            Op::Leaf {
                name: Some(name.to_string()),
                trainable: true,
            },
            vec![],
            value,
        )
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(&mut self, context: &str, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        self.value(a).check_same_shape(self.value(b), context)?;
        let value = match op {
            Op::Add => self.value(a).add(self.value(b)),
            Op::Sub => self.value(a).sub(self.value(b)),
            Op::Mul => self.value(a).mul(self.value(b)),
            Op::Div => self.value(a).zip(self.value(b), |x, y| x / y),
            _ => unreachable!(),
        };
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("div", a, b, Op::Div)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).neg();
        self.push(Op::Neg, vec![a], value)
    }

    pub fn conj(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).conj();
        self.push(Op::Conj, vec![a], value)
    }

    pub fn scale(&mut self, a: NodeId, c: Complex64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::ScaleConst(c), vec![a], value)
    }

    pub fn scale_re(&mut self, a: NodeId, c: f64) -> NodeId {
        self.scale(a, Complex64::new(c, 0.0))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: Complex64) -> NodeId {
        let value = self.value(a).map(|z| z + c);
        self.push(Op::AddScalarConst, vec![a], value)
    }

    pub fn add_scalar_re(&mut self, a: NodeId, c: f64) -> NodeId {
        self.add_scalar(a, Complex64::new(c, 0.0))
    }

    pub fn mul_const(&mut self, a: NodeId, m: Arc<CTensor>) -> Result<NodeId> {
        self.value(a).check_same_shape(&m, "mul_const")?;
        let value = self.value(a).mul(&m);
        Ok(self.push(Op::MulConst(m), vec![a], value))
    }

    pub fn clamp_min_re(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|z| Complex64::new(z.re.max(c), 0.0));
        self.push(Op::ClampMinRe(c), vec![a], value)
    }

    pub fn relu_re(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|z| Complex64::new(z.re.max(0.0), 0.0));
        self.push(Op::ReluRe, vec![a], value)
    }

    pub fn abs2(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|z| Complex64::new(z.norm_sqr(), 0.0));
        self.push(Op::Abs2, vec![a], value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|z| z.exp());
        self.push(Op::ExpH, vec![a], value)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|z| z.ln());
        self.push(Op::LogH, vec![a], value)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|z| z.sqrt());
        self.push(Op::SqrtH, vec![a], value)
    }

    // ---- structure ----------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let from = self.value(a).shape().to_vec();
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape { from }, vec![a], value))
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last leading axes", &sa, &sb));
        }
        let (fa, fb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = fa + fb;
        let mut data = Vec::with_capacity(rows * (fa + fb));
        let da = self.value(a).data();
        let db = self.value(b).data();
        for r in 0..rows {
            data.extend_from_slice(&da[r * fa..(r + 1) * fa]);
            data.extend_from_slice(&db[r * fb..(r + 1) * fb]);
        }
        let value = CTensor::from_data(&shape, data)?;
        Ok(self.push(Op::ConcatLast { left: fa }, vec![a, b], value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: Complex64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll, vec![a], CTensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale_re(s, 1.0 / n)
    }

    /// [t, c] -> [c]
    pub fn sum_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::Invalid("sum_axis0 expects a 2-D tensor".into()));
        }
        let (t, c) = (sh[0], sh[1]);
        let mut out = CTensor::zeros(&[c]);
        for ti in 0..t {
            for ci in 0..c {
                let v = out.data()[ci] + self.value(a).data()[ti * c + ci];
                out.data_mut()[ci] = v;
            }
        }
        Ok(self.push(Op::SumAxis0, vec![a], out))
    }

    /// [t, c] -> [t]
    pub fn sum_axis_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::Invalid("sum_axis_last expects a 2-D tensor".into()));
        }
        let (t, c) = (sh[0], sh[1]);
        let data: Vec<Complex64> = (0..t)
            .map(|ti| self.value(a).data()[ti * c..(ti + 1) * c].iter().sum())
            .collect();
        let value = CTensor::from_data(&[t], data)?;
        Ok(self.push(Op::SumAxisLast, vec![a], value))
    }

    /// [c] -> [t, c]
    pub fn broadcast_axis0(&mut self, a: NodeId, t: usize) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 1 {
            return Err(Error::Invalid(
                "broadcast_axis0 expects a 1-D tensor".into(),
            ));
        }
        let c = sh[0];
        let mut data = Vec::with_capacity(t * c);
        for _ in 0..t {
            data.extend_from_slice(self.value(a).data());
        }
        let value = CTensor::from_data(&[t, c], data)?;
        Ok(self.push(Op::BroadcastAxis0, vec![a], value))
    }

    pub fn transpose2(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::Invalid("transpose2 expects a 2-D tensor".into()));
        }
        let value = transpose2(self.value(a));
        Ok(self.push(Op::Transpose2, vec![a], value))
    }

    /// [t, m] x [m, n] -> [t, n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul [t,m]x[m,n]", &sa, &sb));
        }
        let value = matmul(self.value(a), self.value(b));
        Ok(self.push(Op::Matmul, vec![a, b], value))
    }

    /// [t, n] + [n] broadcast row add (bias).
    pub fn add_row_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_row_vec [t,n]+[n]", &sa, &sb));
        }
        let (t, n) = (sa[0], sa[1]);
        let mut value = self.value(a).clone();
        for ti in 0..t {
            for ni in 0..n {
                let v = value.data()[ti * n + ni] + self.value(b).data()[ni];
                value.data_mut()[ti * n + ni] = v;
            }
        }
        Ok(self.push(Op::AddRowVec, vec![a, b], value))
    }

    /// Complex [t, f] -> real [t, 2f]: re components then im components.
    pub fn re_im_concat(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::Invalid("re_im_concat expects a 2-D tensor".into()));
        }
        let (t, f) = (sh[0], sh[1]);
        let mut out = CTensor::zeros(&[t, 2 * f]);
        for ti in 0..t {
            for fi in 0..f {
                let z = self.value(a).data()[ti * f + fi];
                out.data_mut()[ti * 2 * f + fi] = Complex64::new(z.re, 0.0);
                out.data_mut()[ti * 2 * f + f + fi] = Complex64::new(z.im, 0.0);
            }
        }
        Ok(self.push(Op::ReImConcat, vec![a], out))
    }

    /// Global spatial average: [t, x, y, f] -> [t, f].
    pub fn mean_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::Invalid("mean_spatial expects [t,x,y,f]".into()));
        }
        let (t, x, y, f) = (sh[0], sh[1], sh[2], sh[3]);
        let mut out = CTensor::zeros(&[t, f]);
        let d = self.value(a).data();
        for ti in 0..t {
            for p in 0..x * y {
                for fi in 0..f {
                    let v = out.data()[ti * f + fi] + d[(ti * x * y + p) * f + fi];
                    out.data_mut()[ti * f + fi] = v;
                }
            }
        }
        let scale = 1.0 / (x * y) as f64;
        for v in out.data_mut() {
            *v *= scale;
        }
        Ok(self.push(Op::MeanSpatial, vec![a], out))
    }

    /// Tensor scaled by a scalar node (e.g. the trainable DC λ).
    pub fn scale_by_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::Invalid("scale_by_node: scale must be scalar".into()));
        }
        let c = self.scalar(s);
        let value = self.value(a).scale(c);
        Ok(self.push(Op::ScaleByNode, vec![a, s], value))
    }

    // ---- network primitives -------------------------------------------

    /// Complex 2-D cross-correlation with zero padding, per frame.
    /// input [t,x,y,f_in], weights [f_out,f_in,kx,ky], bias [f_out].
    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weights).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if si.len() != 4 {
            return Err(Error::Invalid(format!(
                "conv2d input must be [t,x,y,f_in], got {:?}",
                si
            )));
        }
        if sw.len() != 4 || sw[1] != si[3] {
            return Err(Error::shape(
                "conv2d weights [f_out,f_in,kx,ky] vs input channel axis f",
                &sw,
                &si,
            ));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv2d bias [f_out]", &sb, &[sw[0]]));
        }
        if sw[2].is_multiple_of(2) || sw[3].is_multiple_of(2) {
            return Err(Error::Invalid("conv2d kernel sizes must be odd".into()));
        }
        let value = conv2d_forward(self.value(input), self.value(weights), self.value(bias));
        Ok(self.push(Op::Conv2d, vec![input, weights, bias], value))
    }

    /// Complex 1-D convolution along the frame axis with circular padding.
    /// input [t,x,y,f_in], weights [f_out,f_in,kt], bias [f_out].
    pub fn conv1d_temporal(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weights).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if si.len() != 4 {
            return Err(Error::Invalid(format!(
                "conv1d_temporal input must be [t,x,y,f_in], got {:?}",
                si
            )));
        }
        if sw.len() != 3 || sw[1] != si[3] {
            return Err(Error::shape(
                "conv1d_temporal weights [f_out,f_in,kt] vs input channel axis f",
                &sw,
                &si,
            ));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv1d_temporal bias [f_out]", &sb, &[sw[0]]));
        }
        if sw[2].is_multiple_of(2) {
            return Err(Error::Invalid("temporal kernel size must be odd".into()));
        }
        let value = conv1d_t_forward(self.value(input), self.value(weights), self.value(bias));
        Ok(self.push(Op::Conv1dTemporal, vec![input, weights, bias], value))
    }

    /// out = ReLU(|z| + b) · z/|z|, with out = 0 at z = 0. Channel-last
    /// input of any rank; real bias [f].
    pub fn modrelu(&mut self, z: NodeId, bias: NodeId) -> Result<NodeId> {
        let sz = self.value(z).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sb.len() != 1 || sb[0] != *sz.last().unwrap() {
            return Err(Error::shape("modrelu bias vs channel axis f", &sb, &sz));
        }
        let f = sb[0];
        let zd = self.value(z).data();
        let bd = self.value(bias).data();
        let data: Vec<Complex64> = zd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = v.norm();
                let b = bd[i % f].re;
                if m > 0.0 && m + b > 0.0 {
                    v * ((m + b) / m)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        let value = CTensor::from_data(&sz, data)?;
        Ok(self.push(Op::ModRelu, vec![z, bias], value))
    }

    /// 2×2 complex average pooling over (x, y); [t,x,y,f], even dims.
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 4 || !sh[1].is_multiple_of(2) || !sh[2].is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "avg_pool2 needs [t,x,y,f] with even x and y, got {:?}",
                sh
            )));
        }
        let value = pool2_forward(self.value(a));
        Ok(self.push(Op::AvgPool2, vec![a], value))
    }

    /// Nearest-neighbor 2× spatial upsampling; [t,x,y,f].
    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::Invalid("upsample2 expects [t,x,y,f]".into()));
        }
        let value = upsample2_forward(self.value(a));
        Ok(self.push(Op::Upsample2, vec![a], value))
    }

    /// Orthonormal FFT over the last two axes.
    pub fn fft2(&mut self, a: NodeId) -> NodeId {
        let value = fft2_ortho(self.value(a));
        self.push(Op::Fft2 { inverse: false }, vec![a], value)
    }

    pub fn ifft2(&mut self, a: NodeId) -> NodeId {
        let value = ifft2_ortho(self.value(a));
        self.push(Op::Fft2 { inverse: true }, vec![a], value)
    }

    /// y = A x (constant operator).
    pub fn encode_forward(&mut self, op: &Arc<EncodingOperator>, x: NodeId) -> Result<NodeId> {
        let value = op.forward(self.value(x))?;
        Ok(self.push(Op::EncodeFwd(op.clone()), vec![x], value))
    }

    /// x = Aᴴ y (constant operator).
    pub fn encode_adjoint(&mut self, op: &Arc<EncodingOperator>, y: NodeId) -> Result<NodeId> {
        let value = op.adjoint(self.value(y))?;
        Ok(self.push(Op::EncodeAdj(op.clone()), vec![y], value))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a real scalar loss. Returns gradients for every
    /// trainable named leaf reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let l = lv.scalar_value();
        if l.im.abs() > 1e-9 * l.re.abs().max(1.0) {
            return Err(Error::Invalid(format!(
                "backward: loss must be real, got {}",
                l
            )));
        }

        let mut cotangents: Vec<Option<CTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        cotangents[loss.0] = Some(CTensor::scalar_re(1.0));

        let mut grads = Gradients::default();
        for i in (0..self.nodes.len()).rev() {
            let g = match cotangents[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Op::Leaf { name, trainable } = &node.op {
                if *trainable {
                    if let Some(name) = name {
                        match grads.by_name.get_mut(name) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                grads.by_name.insert(name.clone(), g);
                            }
                        }
                    }
                }
                continue;
            }
            let input_grads = self.backward_op(node, &g);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                match &mut cotangents[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(grads)
    }

    fn backward_op(&self, node: &Node, g: &CTensor) -> Vec<CTensor> {
        let inp = |k: usize| self.value(node.inputs[k]);
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.neg()],
            Op::Neg => vec![g.neg()],
            Op::Mul => vec![inp(1).conj().mul(g), inp(0).conj().mul(g)],
            Op::Div => {
                let a = inp(0);
                let b = inp(1);
                let ga = b.map(|z| (1.0 / z).conj()).mul(g);
                let gb = a.zip(b, |x, y| (-(x / (y * y))).conj()).mul(g);
                vec![ga, gb]
            }
            Op::Conj => vec![g.conj()],
            Op::ScaleConst(c) => vec![g.scale(c.conj())],
            Op::AddScalarConst => vec![g.clone()],
            Op::MulConst(m) => vec![m.conj().mul(g)],
            Op::ClampMinRe(c) => {
                vec![inp(0).zip(g, |z, gv| {
                    if z.re > *c {
                        Complex64::new(gv.re, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })]
            }
            Op::ReluRe => {
                vec![inp(0).zip(g, |z, gv| {
                    if z.re > 0.0 {
                        Complex64::new(gv.re, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })]
            }
            Op::Abs2 => vec![inp(0).zip(g, |z, gv| 2.0 * z * gv.re)],
            Op::ExpH => vec![node.value.conj().mul(g)],
            Op::LogH => vec![inp(0).map(|z| (1.0 / z).conj()).mul(g)],
            Op::SqrtH => vec![node.value.map(|w| (0.5 / w).conj()).mul(g)],
            Op::Reshape { from } => vec![g.reshape(from).expect("reshape backward")],
            Op::ConcatLast { left } => {
                let sh = node.value.shape();
                let f = *sh.last().unwrap();
                let rows: usize = sh[..sh.len() - 1].iter().product();
                let fa = *left;
                let fb = f - fa;
                let mut sa = sh.to_vec();
                *sa.last_mut().unwrap() = fa;
                let mut sb = sh.to_vec();
                *sb.last_mut().unwrap() = fb;
                let mut da = Vec::with_capacity(rows * fa);
                let mut db = Vec::with_capacity(rows * fb);
                for r in 0..rows {
                    da.extend_from_slice(&g.data()[r * f..r * f + fa]);
                    db.extend_from_slice(&g.data()[r * f + fa..(r + 1) * f]);
                }
                vec![
                    CTensor::from_data(&sa, da).unwrap(),
                    CTensor::from_data(&sb, db).unwrap(),
                ]
            }
            Op::SumAll => {
                let gv = g.scalar_value();
                vec![inp(0).map(|_| gv)]
            }
            Op::SumAxis0 => {
                let sh = inp(0).shape();
                let (t, c) = (sh[0], sh[1]);
                let mut out = CTensor::zeros(&[t, c]);
                for ti in 0..t {
                    out.data_mut()[ti * c..(ti + 1) * c].copy_from_slice(g.data());
                }
                vec![out]
            }
            Op::SumAxisLast => {
                let sh = inp(0).shape();
                let (t, c) = (sh[0], sh[1]);
                let mut out = CTensor::zeros(&[t, c]);
                for ti in 0..t {
                    for ci in 0..c {
                        out.data_mut()[ti * c + ci] = g.data()[ti];
                    }
                }
                vec![out]
            }
            Op::BroadcastAxis0 => {
                let sh = node.value.shape();
                let (t, c) = (sh[0], sh[1]);
                let mut out = CTensor::zeros(&[c]);
                for ti in 0..t {
                    for ci in 0..c {
                        let v = out.data()[ci] + g.data()[ti * c + ci];
                        out.data_mut()[ci] = v;
                    }
                }
                vec![out]
            }
            Op::Transpose2 => vec![transpose2(g)],
            Op::Matmul => {
                // w = a b: g_a = g bᴴ, g_b = aᴴ g
                let a = inp(0);
                let b = inp(1);
                let bh = transpose2(&b.conj());
                let ah = transpose2(&a.conj());
                vec![matmul(g, &bh), matmul(&ah, g)]
            }
            Op::AddRowVec => {
                let sh = node.value.shape();
                let (t, n) = (sh[0], sh[1]);
                let mut gb = CTensor::zeros(&[n]);
                for ti in 0..t {
                    for ni in 0..n {
                        let v = gb.data()[ni] + g.data()[ti * n + ni];
                        gb.data_mut()[ni] = v;
                    }
                }
                vec![g.clone(), gb]
            }
            Op::ReImConcat => {
                let sh = inp(0).shape();
                let (t, f) = (sh[0], sh[1]);
                let mut out = CTensor::zeros(&[t, f]);
                for ti in 0..t {
                    for fi in 0..f {
                        let gre = g.data()[ti * 2 * f + fi].re;
                        let gim = g.data()[ti * 2 * f + f + fi].re;
                        out.data_mut()[ti * f + fi] = Complex64::new(gre, gim);
                    }
                }
                vec![out]
            }
            Op::MeanSpatial => {
                let sh = inp(0).shape();
                let (t, x, y, f) = (sh[0], sh[1], sh[2], sh[3]);
                let scale = 1.0 / (x * y) as f64;
                let mut out = CTensor::zeros(&[t, x, y, f]);
                for ti in 0..t {
                    for p in 0..x * y {
                        for fi in 0..f {
                            out.data_mut()[(ti * x * y + p) * f + fi] =
                                g.data()[ti * f + fi] * scale;
                        }
                    }
                }
                vec![out]
            }
            Op::ScaleByNode => {
                let x = inp(0);
                let s = inp(1).scalar_value();
                let gx = g.scale(s.conj());
                let gs = CTensor::scalar(x.conj().mul(g).data().iter().sum());
                vec![gx, gs]
            }
            Op::Conv2d => conv2d_backward(inp(0), inp(1), g),
            Op::Conv1dTemporal => conv1d_t_backward(inp(0), inp(1), g),
            Op::ModRelu => modrelu_backward(inp(0), inp(1), g),
            Op::AvgPool2 => vec![pool2_backward(inp(0).shape(), g)],
            Op::Upsample2 => vec![upsample2_backward(inp(0).shape(), g)],
            Op::Fft2 { inverse } => {
                vec![if *inverse {
                    fft2_ortho(g)
                } else {
                    ifft2_ortho(g)
                }]
            }
            Op::EncodeFwd(op) => vec![op.adjoint(g).expect("encode backward")],
            Op::EncodeAdj(op) => vec![op.forward(g).expect("encode backward")],
        }
    }
}

// ---- heavy kernels, kept free so forward and backward share them --------

fn transpose2(a: &CTensor) -> CTensor {
    let sh = a.shape();
    let (r, c) = (sh[0], sh[1]);
    let mut out = CTensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.data()[i * c + j];
        }
    }
    out
}

fn matmul(a: &CTensor, b: &CTensor) -> CTensor {
    let (t, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = CTensor::zeros(&[t, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for ti in 0..t {
        for mi in 0..m {
            let av = ad[ti * m + mi];
            if av == Complex64::new(0.0, 0.0) {
                continue;
            }
            let bb = &bd[mi * n..(mi + 1) * n];
            let oo = &mut od[ti * n..(ti + 1) * n];
            for ni in 0..n {
                oo[ni] += av * bb[ni];
            }
        }
    }
    out
}

fn conv2d_forward(input: &CTensor, w: &CTensor, bias: &CTensor) -> CTensor {
    let (t, nx, ny, fi) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (fo, _, kx, ky) = {
        let s = w.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (px, py) = (kx / 2, ky / 2);
    // weights re-laid out as [dx, dy, f_in, f_out] for a contiguous inner loop
    let mut wt = vec![Complex64::new(0.0, 0.0); kx * ky * fi * fo];
    for o in 0..fo {
        for i in 0..fi {
            for dx in 0..kx {
                for dy in 0..ky {
                    wt[((dx * ky + dy) * fi + i) * fo + o] =
                        w.data()[((o * fi + i) * kx + dx) * ky + dy];
                }
            }
        }
    }
    let mut out = CTensor::zeros(&[t, nx, ny, fo]);
    let id = input.data();
    let od = out.data_mut();
    let bd = bias.data();
    let mut acc = vec![Complex64::new(0.0, 0.0); fo];
    for ti in 0..t {
        for x in 0..nx {
            for y in 0..ny {
                acc[..fo].copy_from_slice(&bd[..fo]);
                for dx in 0..kx {
                    let sx = x as isize + dx as isize - px as isize;
                    if sx < 0 || sx >= nx as isize {
                        continue;
                    }
                    for dy in 0..ky {
                        let sy = y as isize + dy as isize - py as isize;
                        if sy < 0 || sy >= ny as isize {
                            continue;
                        }
                        let ib = ((ti * nx + sx as usize) * ny + sy as usize) * fi;
                        let wb = (dx * ky + dy) * fi * fo;
                        for i in 0..fi {
                            let a = id[ib + i];
                            let wrow = &wt[wb + i * fo..wb + (i + 1) * fo];
                            for o in 0..fo {
                                acc[o] += a * wrow[o];
                            }
                        }
                    }
                }
                let ob = ((ti * nx + x) * ny + y) * fo;
                od[ob..ob + fo].copy_from_slice(&acc);
            }
        }
    }
    out
}

fn conv2d_backward(input: &CTensor, w: &CTensor, g: &CTensor) -> Vec<CTensor> {
    let (t, nx, ny, fi) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (fo, _, kx, ky) = {
        let s = w.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (px, py) = (kx / 2, ky / 2);
    let id = input.data();
    let gd = g.data();
    let wd = w.data();

    // conj(w) as [dx, dy, f_out, f_in]
    let mut wc = vec![Complex64::new(0.0, 0.0); kx * ky * fo * fi];
    for o in 0..fo {
        for i in 0..fi {
            for dx in 0..kx {
                for dy in 0..ky {
                    wc[((dx * ky + dy) * fo + o) * fi + i] =
                        wd[((o * fi + i) * kx + dx) * ky + dy].conj();
                }
            }
        }
    }

    let mut g_in = CTensor::zeros(&[t, nx, ny, fi]);
    {
        let gid = g_in.data_mut();
        // scatter: each output position contributes to the inputs it read
        for ti in 0..t {
            for x in 0..nx {
                for y in 0..ny {
                    let gb = ((ti * nx + x) * ny + y) * fo;
                    for dx in 0..kx {
                        let sx = x as isize + dx as isize - px as isize;
                        if sx < 0 || sx >= nx as isize {
                            continue;
                        }
                        for dy in 0..ky {
                            let sy = y as isize + dy as isize - py as isize;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let ib = ((ti * nx + sx as usize) * ny + sy as usize) * fi;
                            let wb = (dx * ky + dy) * fo * fi;
                            for o in 0..fo {
                                let gv = gd[gb + o];
                                if gv == Complex64::new(0.0, 0.0) {
                                    continue;
                                }
                                let wrow = &wc[wb + o * fi..wb + (o + 1) * fi];
                                for i in 0..fi {
                                    gid[ib + i] += gv * wrow[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut g_w = CTensor::zeros(&[fo, fi, kx, ky]);
    {
        let gwd = g_w.data_mut();
        for ti in 0..t {
            for x in 0..nx {
                for y in 0..ny {
                    let gb = ((ti * nx + x) * ny + y) * fo;
                    for dx in 0..kx {
                        let sx = x as isize + dx as isize - px as isize;
                        if sx < 0 || sx >= nx as isize {
                            continue;
                        }
                        for dy in 0..ky {
                            let sy = y as isize + dy as isize - py as isize;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let ib = ((ti * nx + sx as usize) * ny + sy as usize) * fi;
                            for o in 0..fo {
                                let gv = gd[gb + o];
                                if gv == Complex64::new(0.0, 0.0) {
                                    continue;
                                }
                                for i in 0..fi {
                                    gwd[((o * fi + i) * kx + dx) * ky + dy] +=
                                        id[ib + i].conj() * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut g_b = CTensor::zeros(&[fo]);
    {
        let gbd = g_b.data_mut();
        for chunk in gd.chunks(fo) {
            for o in 0..fo {
                gbd[o] += chunk[o];
            }
        }
    }
    vec![g_in, g_w, g_b]
}

fn conv1d_t_forward(input: &CTensor, w: &CTensor, bias: &CTensor) -> CTensor {
    let (t, nx, ny, fi) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (fo, _, kt) = {
        let s = w.shape();
        (s[0], s[1], s[2])
    };
    let off = (kt / 2) as isize;
    let np = nx * ny;
    let mut out = CTensor::zeros(&[t, nx, ny, fo]);
    let id = input.data();
    let wd = w.data();
    let bd = bias.data();
    let od = out.data_mut();
    let mut acc = vec![Complex64::new(0.0, 0.0); fo];
    for ti in 0..t {
        for p in 0..np {
            acc[..fo].copy_from_slice(&bd[..fo]);
            for k in 0..kt {
                let st = (ti as isize + k as isize - off).rem_euclid(t as isize) as usize;
                let ib = (st * np + p) * fi;
                for i in 0..fi {
                    let a = id[ib + i];
                    for o in 0..fo {
                        acc[o] += a * wd[(o * fi + i) * kt + k];
                    }
                }
            }
            let ob = (ti * np + p) * fo;
            od[ob..ob + fo].copy_from_slice(&acc);
        }
    }
    out
}

fn conv1d_t_backward(input: &CTensor, w: &CTensor, g: &CTensor) -> Vec<CTensor> {
    let (t, nx, ny, fi) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (fo, _, kt) = {
        let s = w.shape();
        (s[0], s[1], s[2])
    };
    let off = (kt / 2) as isize;
    let np = nx * ny;
    let id = input.data();
    let wd = w.data();
    let gd = g.data();

    let mut g_in = CTensor::zeros(&[t, nx, ny, fi]);
    let mut g_w = CTensor::zeros(&[fo, fi, kt]);
    let mut g_b = CTensor::zeros(&[fo]);
    {
        let gid = g_in.data_mut();
        let gwd = g_w.data_mut();
        let gbd = g_b.data_mut();
        for ti in 0..t {
            for p in 0..np {
                let gb = (ti * np + p) * fo;
                for o in 0..fo {
                    gbd[o] += gd[gb + o];
                }
                for k in 0..kt {
                    let st = (ti as isize + k as isize - off).rem_euclid(t as isize) as usize;
                    let ib = (st * np + p) * fi;
                    for o in 0..fo {
                        let gv = gd[gb + o];
                        if gv == Complex64::new(0.0, 0.0) {
                            continue;
                        }
                        for i in 0..fi {
                            gid[ib + i] += gv * wd[(o * fi + i) * kt + k].conj();
                            gwd[(o * fi + i) * kt + k] += id[ib + i].conj() * gv;
                        }
                    }
                }
            }
        }
    }
    vec![g_in, g_w, g_b]
}

fn modrelu_backward(z: &CTensor, bias: &CTensor, g: &CTensor) -> Vec<CTensor> {
    let f = bias.shape()[0];
    let zd = z.data();
    let bd = bias.data();
    let gd = g.data();
    let mut g_z = CTensor::zeros(z.shape());
    let mut g_b = CTensor::zeros(&[f]);
    {
        let gzd = g_z.data_mut();
        let gbd = g_b.data_mut();
        for (i, &v) in zd.iter().enumerate() {
            let m = v.norm();
            let b = bd[i % f].re;
            if m > 0.0 && m + b > 0.0 {
                let gv = gd[i];
                // w = z + b z/m: ∂w/∂z = 1 + b/(2m), ∂w/∂z̄ = -b z²/(2m³)
                let dwdz = 1.0 + b / (2.0 * m);
                let dwdzbar = -b * v * v / (2.0 * m * m * m);
                gzd[i] = gv * dwdz + gv.conj() * dwdzbar;
                gbd[i % f] += Complex64::new((gv * (v / m).conj()).re, 0.0);
            }
        }
    }
    vec![g_z, g_b]
}

fn pool2_forward(a: &CTensor) -> CTensor {
    let s = a.shape();
    let (t, nx, ny, f) = (s[0], s[1], s[2], s[3]);
    let (ox, oy) = (nx / 2, ny / 2);
    let mut out = CTensor::zeros(&[t, ox, oy, f]);
    let ad = a.data();
    let od = out.data_mut();
    for ti in 0..t {
        for x in 0..ox {
            for y in 0..oy {
                for fi in 0..f {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for dx in 0..2 {
                        for dy in 0..2 {
                            acc += ad[((ti * nx + 2 * x + dx) * ny + 2 * y + dy) * f + fi];
                        }
                    }
                    od[((ti * ox + x) * oy + y) * f + fi] = acc * 0.25;
                }
            }
        }
    }
    out
}

fn pool2_backward(in_shape: &[usize], g: &CTensor) -> CTensor {
    let (t, nx, ny, f) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ox, oy) = (nx / 2, ny / 2);
    let mut out = CTensor::zeros(in_shape);
    let od = out.data_mut();
    let gd = g.data();
    for ti in 0..t {
        for x in 0..ox {
            for y in 0..oy {
                for fi in 0..f {
                    let gv = gd[((ti * ox + x) * oy + y) * f + fi] * 0.25;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            od[((ti * nx + 2 * x + dx) * ny + 2 * y + dy) * f + fi] = gv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn upsample2_forward(a: &CTensor) -> CTensor {
    let s = a.shape();
    let (t, nx, ny, f) = (s[0], s[1], s[2], s[3]);
    let (ox, oy) = (nx * 2, ny * 2);
    let mut out = CTensor::zeros(&[t, ox, oy, f]);
    let ad = a.data();
    let od = out.data_mut();
    for ti in 0..t {
        for x in 0..ox {
            for y in 0..oy {
                for fi in 0..f {
                    od[((ti * ox + x) * oy + y) * f + fi] =
                        ad[((ti * nx + x / 2) * ny + y / 2) * f + fi];
                }
            }
        }
    }
    out
}

fn upsample2_backward(in_shape: &[usize], g: &CTensor) -> CTensor {
    let (t, nx, ny, f) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ox, oy) = (nx * 2, ny * 2);
    let mut out = CTensor::zeros(in_shape);
    let od = out.data_mut();
    let gd = g.data();
    for ti in 0..t {
        for x in 0..ox {
            for y in 0..oy {
                for fi in 0..f {
                    od[((ti * nx + x / 2) * ny + y / 2) * f + fi] +=
                        gd[((ti * ox + x) * oy + y) * f + fi];
                }
            }
        }
    }
    out
}
