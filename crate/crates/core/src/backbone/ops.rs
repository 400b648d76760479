//! CPU implementations of the ONNX operators found in exported image
//! classification backbones. Every op computes each batch item
//! independently, so results do not depend on batch composition.

use std::sync::Arc;

use super::onnx::{AttrValue, Node, ONNX_FLOAT, ONNX_INT64};
use super::tensor::{broadcast_binary, matmul, normalize_axis, strides, Tensor};
use super::BackboneError;

pub const SUPPORTED_OPS: &[&str] = &[
    "Add",
    "AveragePool",
    "BatchNormalization",
    "Cast",
    "Clip",
    "Concat",
    "Constant",
    "Conv",
    "Div",
    "Dropout",
    "Flatten",
    "Gather",
    "Gemm",
    "GlobalAveragePool",
    "GlobalMaxPool",
    "Identity",
    "MatMul",
    "MaxPool",
    "Mul",
    "ReduceMean",
    "Relu",
    "Reshape",
    "Shape",
    "Sigmoid",
    "Squeeze",
    "Sub",
    "Tanh",
    "Unsqueeze",
];

fn rt(msg: impl Into<String>) -> BackboneError {
    BackboneError::Runtime(msg.into())
}

type Inputs<'a> = [Option<Arc<Tensor>>];

fn required<'a>(node: &Node, inputs: &'a Inputs, i: usize) -> Result<&'a Tensor, BackboneError> {
    inputs
        .get(i)
        .and_then(|t| t.as_deref())
        .ok_or_else(|| rt(format!("{} `{}`: missing input {i}", node.op_type, node.name)))
}

/// Runs one node; returns its outputs in order.
pub fn run(node: &Node, inputs: &Inputs, opset: i64) -> Result<Vec<Tensor>, BackboneError> {
    let out = match node.op_type.as_str() {
        "Identity" | "Dropout" => required(node, inputs, 0)?.clone(),
        "Relu" => unary(required(node, inputs, 0)?, |v| v.max(0.0))?,
        "Sigmoid" => unary(required(node, inputs, 0)?, |v| 1.0 / (1.0 + (-v).exp()))?,
        "Tanh" => unary(required(node, inputs, 0)?, f32::tanh)?,
        "Clip" => clip(node, inputs)?,
        "Add" => binary(node, inputs, |a, b| a + b, |a, b| a + b)?,
        "Sub" => binary(node, inputs, |a, b| a - b, |a, b| a - b)?,
        "Mul" => binary(node, inputs, |a, b| a * b, |a, b| a * b)?,
        "Div" => binary(node, inputs, |a, b| a / b, |a, b| if b == 0 { 0 } else { a / b })?,
        "Conv" => conv(
            node,
            required(node, inputs, 0)?,
            required(node, inputs, 1)?,
            inputs.get(2).and_then(|t| t.as_deref()),
        )?,
        "MaxPool" => pool(node, required(node, inputs, 0)?, PoolKind::Max)?,
        "AveragePool" => pool(node, required(node, inputs, 0)?, PoolKind::Average)?,
        "GlobalAveragePool" => global_pool(required(node, inputs, 0)?, false)?,
        "GlobalMaxPool" => global_pool(required(node, inputs, 0)?, true)?,
        "BatchNormalization" => batch_norm(node, inputs)?,
        "Flatten" => flatten(node, required(node, inputs, 0)?)?,
        "Gemm" => gemm(node, inputs)?,
        "MatMul" => matmul_op(required(node, inputs, 0)?, required(node, inputs, 1)?)?,
        "Concat" => concat(node, inputs)?,
        "Reshape" => {
            reshape(required(node, inputs, 0)?, required(node, inputs, 1)?, node.attr_int("allowzero", 0) != 0)?
        }
        "ReduceMean" => reduce_mean(node, inputs, opset)?,
        "Shape" => {
            let s = required(node, inputs, 0)?.shape();
            Tensor::i64(vec![s.len()], s.iter().map(|&d| d as i64).collect())
        }
        "Gather" => gather(node, required(node, inputs, 0)?, required(node, inputs, 1)?)?,
        "Unsqueeze" => unsqueeze(node, inputs)?,
        "Squeeze" => squeeze(node, inputs)?,
        "Constant" => constant(node)?,
        "Cast" => cast(node, required(node, inputs, 0)?)?,
        other => return Err(BackboneError::UnsupportedOp(other.to_string())),
    };
    Ok(vec![out])
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor, BackboneError> {
    Ok(Tensor::f32(x.shape().to_vec(), x.as_f32()?.iter().map(|&v| f(v)).collect()))
}

fn binary(
    node: &Node,
    inputs: &Inputs,
    ff: impl Fn(f32, f32) -> f32,
    fi: impl Fn(i64, i64) -> i64,
) -> Result<Tensor, BackboneError> {
    let a = required(node, inputs, 0)?;
    let b = required(node, inputs, 1)?;
    match (a, b) {
        (Tensor::F32 { shape: sa, data: da }, Tensor::F32 { shape: sb, data: db }) => {
            let (shape, data) = broadcast_binary(da, sa, db, sb, ff)?;
            Ok(Tensor::f32(shape, data))
        }
        (Tensor::I64 { shape: sa, data: da }, Tensor::I64 { shape: sb, data: db }) => {
            let (shape, data) = broadcast_binary(da, sa, db, sb, fi)?;
            Ok(Tensor::i64(shape, data))
        }
        _ => Err(rt(format!("{}: mixed element types", node.op_type))),
    }
}

fn clip(node: &Node, inputs: &Inputs) -> Result<Tensor, BackboneError> {
    let x = required(node, inputs, 0)?;
    let scalar = |i: usize| -> Result<Option<f32>, BackboneError> {
        match inputs.get(i).and_then(|t| t.as_deref()) {
            Some(t) => Ok(t.as_f32()?.first().copied()),
            None => Ok(None),
        }
    };
    let lo = scalar(1)?.unwrap_or_else(|| node.attr_float("min", f32::NEG_INFINITY));
    let hi = scalar(2)?.unwrap_or_else(|| node.attr_float("max", f32::INFINITY));
    unary(x, |v| v.max(lo).min(hi))
}

fn spatial_2d(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize), BackboneError> {
    match x.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(rt(format!("{what}: expected a rank-4 NCHW tensor, got {s:?}"))),
    }
}

struct Window {
    kernel: [usize; 2],
    stride: [usize; 2],
    dilation: [usize; 2],
    // top, left, bottom, right
    pads: [usize; 4],
    out: [usize; 2],
}

fn window(node: &Node, h: usize, w: usize, kernel: [usize; 2], ceil_mode: bool) -> Result<Window, BackboneError> {
    let two = |name: &str| -> [usize; 2] {
        match node.attr_ints(name) {
            Some([a, b]) => [*a as usize, *b as usize],
            _ => [1, 1],
        }
    };
    let stride = two("strides");
    let dilation = two("dilations");
    if stride.contains(&0) || dilation.contains(&0) || kernel.contains(&0) {
        return Err(rt(format!("{}: zero stride, dilation or kernel", node.op_type)));
    }
    let input = [h, w];
    let eff = [(kernel[0] - 1) * dilation[0] + 1, (kernel[1] - 1) * dilation[1] + 1];
    let auto_pad = node.attr_str("auto_pad").unwrap_or_else(|| "NOTSET".into());
    let mut pads = [0usize; 4];
    match auto_pad.as_str() {
        "NOTSET" => {
            if let Some(p) = node.attr_ints("pads") {
                if p.len() != 4 || p.iter().any(|&v| v < 0) {
                    return Err(rt(format!("{}: expected 4 non-negative pads", node.op_type)));
                }
                pads = [p[0] as usize, p[1] as usize, p[2] as usize, p[3] as usize];
            }
        }
        "VALID" => {}
        "SAME_UPPER" | "SAME_LOWER" => {
            for d in 0..2 {
                let out = input[d].div_ceil(stride[d]);
                let total = ((out - 1) * stride[d] + eff[d]).saturating_sub(input[d]);
                let (small, big) = (total / 2, total - total / 2);
                if auto_pad == "SAME_UPPER" {
                    pads[d] = small;
                    pads[d + 2] = big;
                } else {
                    pads[d] = big;
                    pads[d + 2] = small;
                }
            }
        }
        other => return Err(rt(format!("{}: unsupported auto_pad {other}", node.op_type))),
    }
    let mut out = [0usize; 2];
    for d in 0..2 {
        let padded = input[d] + pads[d] + pads[d + 2];
        if padded < eff[d] {
            return Err(rt(format!("{}: kernel larger than padded input", node.op_type)));
        }
        let span = padded - eff[d];
        out[d] = if ceil_mode { span.div_ceil(stride[d]) + 1 } else { span / stride[d] + 1 };
        // a window may not start inside the trailing pad
        if ceil_mode && (out[d] - 1) * stride[d] >= input[d] + pads[d] {
            out[d] -= 1;
        }
    }
    Ok(Window { kernel, stride, dilation, pads, out })
}

fn kernel_from(node: &Node, fallback: Option<[usize; 2]>) -> Result<[usize; 2], BackboneError> {
    match node.attr_ints("kernel_shape") {
        Some([a, b]) => Ok([*a as usize, *b as usize]),
        Some(other) => Err(rt(format!("{}: only 2-D kernels are supported, got {other:?}", node.op_type))),
        None => fallback.ok_or_else(|| rt(format!("{}: missing kernel_shape", node.op_type))),
    }
}

fn conv(node: &Node, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, BackboneError> {
    let (n, c, h, w) = spatial_2d(x, "Conv")?;
    let (m, cg, kh, kw) = match weight.shape() {
        &[m, cg, kh, kw] => (m, cg, kh, kw),
        s => return Err(rt(format!("Conv: expected rank-4 weights, got {s:?}"))),
    };
    let group = node.attr_int("group", 1).max(1) as usize;
    if cg * group != c || m % group != 0 {
        return Err(rt(format!(
            "Conv: {c} input channels incompatible with weights {:?} and group {group}",
            weight.shape()
        )));
    }
    let win = window(node, h, w, kernel_from(node, Some([kh, kw]))?, false)?;
    let [oh, ow] = win.out;
    let xd = x.as_f32()?;
    let wd = weight.as_f32()?;
    let bd = match bias {
        Some(b) => Some(b.as_f32()?),
        None => None,
    };
    let mg = m / group;
    let kdim = cg * kh * kw;
    let mut out = vec![0f32; n * m * oh * ow];
    let mut cols = vec![0f32; kdim * oh * ow];
    for b in 0..n {
        for g in 0..group {
            // im2col for this batch item and group
            for ci in 0..cg {
                let plane = &xd[((b * c) + g * cg + ci) * h * w..][..h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (ci * kh + ki) * kw + kj;
                        let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * win.stride[0] + ki * win.dilation[0]) as isize - win.pads[0] as isize;
                            for ox in 0..ow {
                                let ix = (ox * win.stride[1] + kj * win.dilation[1]) as isize - win.pads[1] as isize;
                                dst[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    plane[iy as usize * w + ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
            let wg = &wd[g * mg * kdim..(g + 1) * mg * kdim];
            let y = matmul(wg, &cols, mg, kdim, oh * ow);
            for oc in 0..mg {
                let channel = g * mg + oc;
                let dst = &mut out[(b * m + channel) * oh * ow..][..oh * ow];
                let bias_v = bd.map(|bd| bd[channel]).unwrap_or(0.0);
                for (d, &v) in dst.iter_mut().zip(&y[oc * oh * ow..(oc + 1) * oh * ow]) {
                    *d = v + bias_v;
                }
            }
        }
    }
    Ok(Tensor::f32(vec![n, m, oh, ow], out))
}

#[derive(Clone, Copy, PartialEq)]
enum PoolKind {
    Max,
    Average,
}

fn pool(node: &Node, x: &Tensor, kind: PoolKind) -> Result<Tensor, BackboneError> {
    let (n, c, h, w) = spatial_2d(x, &node.op_type)?;
    let win = window(node, h, w, kernel_from(node, None)?, node.attr_int("ceil_mode", 0) != 0)?;
    let include_pad = node.attr_int("count_include_pad", 0) != 0;
    let [oh, ow] = win.out;
    let xd = x.as_f32()?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in xd.chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if kind == PoolKind::Max { f32::NEG_INFINITY } else { 0.0 };
                let mut count = 0usize;
                let mut padded_count = 0usize;
                for ki in 0..win.kernel[0] {
                    let iy = (oy * win.stride[0] + ki * win.dilation[0]) as isize - win.pads[0] as isize;
                    for kj in 0..win.kernel[1] {
                        let ix = (ox * win.stride[1] + kj * win.dilation[1]) as isize - win.pads[1] as isize;
                        // positions in the trailing ceil-mode overhang count for neither mode
                        if iy < h as isize + win.pads[2] as isize && ix < w as isize + win.pads[3] as isize {
                            padded_count += 1;
                        }
                        if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        count += 1;
                        match kind {
                            PoolKind::Max => acc = acc.max(v),
                            PoolKind::Average => acc += v,
                        }
                    }
                }
                out.push(match kind {
                    PoolKind::Max => acc,
                    PoolKind::Average => {
                        let denom = if include_pad { padded_count } else { count };
                        acc / denom.max(1) as f32
                    }
                });
            }
        }
    }
    Ok(Tensor::f32(vec![n, c, oh, ow], out))
}

fn global_pool(x: &Tensor, max: bool) -> Result<Tensor, BackboneError> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(rt(format!("global pooling expects rank >= 3, got {s:?}")));
    }
    let spatial: usize = s[2..].iter().product();
    let xd = x.as_f32()?;
    let out = xd
        .chunks_exact(spatial.max(1))
        .map(|p| {
            if max {
                p.iter().copied().fold(f32::NEG_INFINITY, f32::max)
            } else {
                p.iter().sum::<f32>() / spatial as f32
            }
        })
        .collect();
    let mut shape = s[..2].to_vec();
    shape.extend(std::iter::repeat_n(1, s.len() - 2));
    Ok(Tensor::f32(shape, out))
}

fn batch_norm(node: &Node, inputs: &Inputs) -> Result<Tensor, BackboneError> {
    let x = required(node, inputs, 0)?;
    let scale = required(node, inputs, 1)?.as_f32()?;
    let bias = required(node, inputs, 2)?.as_f32()?;
    let mean = required(node, inputs, 3)?.as_f32()?;
    let var = required(node, inputs, 4)?.as_f32()?;
    let eps = node.attr_float("epsilon", 1e-5);
    let s = x.shape();
    if s.len() < 2 {
        return Err(rt("BatchNormalization: rank must be >= 2"));
    }
    let c = s[1];
    if [scale.len(), bias.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
        return Err(rt("BatchNormalization: parameter length does not match channels"));
    }
    let inner: usize = s[2..].iter().product();
    let mut out = x.as_f32()?.to_vec();
    for (i, chunk) in out.chunks_exact_mut(inner.max(1)).enumerate() {
        let ch = i % c;
        let k = scale[ch] / (var[ch] + eps).sqrt();
        let off = bias[ch] - mean[ch] * k;
        for v in chunk {
            *v = *v * k + off;
        }
    }
    Ok(Tensor::f32(s.to_vec(), out))
}

fn flatten(node: &Node, x: &Tensor) -> Result<Tensor, BackboneError> {
    let s = x.shape();
    let axis = node.attr_int("axis", 1);
    let axis = if axis < 0 { axis + s.len() as i64 } else { axis };
    if axis < 0 || axis as usize > s.len() {
        return Err(rt(format!("Flatten: axis {axis} out of range")));
    }
    let outer: usize = s[..axis as usize].iter().product();
    let inner: usize = s[axis as usize..].iter().product();
    x.clone().with_shape(vec![outer, inner])
}

fn gemm(node: &Node, inputs: &Inputs) -> Result<Tensor, BackboneError> {
    let a = required(node, inputs, 0)?;
    let b = required(node, inputs, 1)?;
    let c = inputs.get(2).and_then(|t| t.as_deref());
    let (ta, tb) = (node.attr_int("transA", 0) != 0, node.attr_int("transB", 0) != 0);
    let (alpha, beta) = (node.attr_float("alpha", 1.0), node.attr_float("beta", 1.0));
    let (ar, ac) = match a.shape() {
        &[r, c] => (r, c),
        s => return Err(rt(format!("Gemm: A must be 2-D, got {s:?}"))),
    };
    let (br, bc) = match b.shape() {
        &[r, c] => (r, c),
        s => return Err(rt(format!("Gemm: B must be 2-D, got {s:?}"))),
    };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(rt(format!("Gemm: inner dimensions differ ({k} vs {k2})")));
    }
    let ad = a.as_f32()?;
    let bd = b.as_f32()?;
    let a_mat: Vec<f32> = if ta { transpose(ad, ar, ac) } else { ad.to_vec() };
    let b_mat: Vec<f32> = if tb { transpose(bd, br, bc) } else { bd.to_vec() };
    let mut y = matmul(&a_mat, &b_mat, m, k, n);
    if alpha != 1.0 {
        y.iter_mut().for_each(|v| *v *= alpha);
    }
    if let Some(c) = c {
        let (_, cb) = broadcast_binary(&y, &[m, n], c.as_f32()?, c.shape(), |yv, cv| yv + beta * cv)?;
        y = cb;
    }
    Ok(Tensor::f32(vec![m, n], y))
}

fn transpose(d: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

fn matmul_op(a: &Tensor, b: &Tensor) -> Result<Tensor, BackboneError> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.len() < 2 || sb.len() != 2 {
        return Err(rt(format!("MatMul: supported shapes are [.., m, k] x [k, n], got {sa:?} x {sb:?}")));
    }
    let k = sa[sa.len() - 1];
    if k != sb[0] {
        return Err(rt(format!("MatMul: inner dimensions differ ({k} vs {})", sb[0])));
    }
    let m: usize = sa[..sa.len() - 1].iter().product();
    let y = matmul(a.as_f32()?, b.as_f32()?, m, k, sb[1]);
    let mut shape = sa[..sa.len() - 1].to_vec();
    shape.push(sb[1]);
    Ok(Tensor::f32(shape, y))
}

fn concat(node: &Node, inputs: &Inputs) -> Result<Tensor, BackboneError> {
    let parts: Vec<&Tensor> = inputs.iter().filter_map(|t| t.as_deref()).collect();
    let first = parts.first().ok_or_else(|| rt("Concat: no inputs"))?;
    let rank = first.shape().len();
    let axis = normalize_axis(node.attr_int("axis", 0), rank)?;
    for p in &parts {
        let s = p.shape();
        if s.len() != rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape()[i]) {
            return Err(rt(format!("Concat: incompatible shapes {:?} and {s:?}", first.shape())));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let chunk = |p: &Tensor| p.shape()[axis..].iter().product::<usize>();
    match first {
        Tensor::F32 { .. } => {
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in &parts {
                    let c = chunk(p);
                    out.extend_from_slice(&p.as_f32()?[o * c..(o + 1) * c]);
                }
            }
            Ok(Tensor::f32(shape, out))
        }
        Tensor::I64 { .. } => {
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in &parts {
                    let c = chunk(p);
                    out.extend_from_slice(&p.as_i64()?[o * c..(o + 1) * c]);
                }
            }
            Ok(Tensor::i64(shape, out))
        }
    }
}

fn reshape(x: &Tensor, shape: &Tensor, allow_zero: bool) -> Result<Tensor, BackboneError> {
    let spec = shape.to_i64_vec();
    let mut out: Vec<usize> = Vec::with_capacity(spec.len());
    let mut infer = None;
    for (i, &d) in spec.iter().enumerate() {
        match d {
            -1 if infer.is_none() => {
                infer = Some(i);
                out.push(1);
            }
            0 if !allow_zero => out.push(*x.shape().get(i).ok_or_else(|| rt("Reshape: 0 refers to a missing dim"))?),
            d if d >= 0 => out.push(d as usize),
            _ => return Err(rt(format!("Reshape: invalid target {spec:?}"))),
        }
    }
    if let Some(i) = infer {
        let known: usize = out.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| d).product();
        if known == 0 || x.len() % known != 0 {
            return Err(rt(format!("Reshape: cannot infer dimension for {:?} -> {spec:?}", x.shape())));
        }
        out[i] = x.len() / known;
    }
    x.clone().with_shape(out)
}

fn axes_of(node: &Node, inputs: &Inputs, input_index: usize) -> Result<Option<Vec<i64>>, BackboneError> {
    if let Some(t) = inputs.get(input_index).and_then(|t| t.as_deref()) {
        return Ok(Some(t.to_i64_vec()));
    }
    Ok(node.attr_ints("axes").map(|a| a.to_vec()))
}

fn reduce_mean(node: &Node, inputs: &Inputs, opset: i64) -> Result<Tensor, BackboneError> {
    let x = required(node, inputs, 0)?;
    let rank = x.shape().len();
    let axes = if opset >= 18 { axes_of(node, inputs, 1)? } else { node.attr_ints("axes").map(|a| a.to_vec()) };
    let keep = node.attr_int("keepdims", 1) != 0;
    let mut reduce = vec![false; rank];
    match axes {
        Some(list) if !list.is_empty() => {
            for a in list {
                reduce[normalize_axis(a, rank)?] = true;
            }
        }
        _ => reduce.iter_mut().for_each(|r| *r = true),
    }
    let s = x.shape();
    let out_full: Vec<usize> = s.iter().zip(&reduce).map(|(&d, &r)| if r { 1 } else { d }).collect();
    let count: usize = s.iter().zip(&reduce).filter(|(_, &r)| r).map(|(d, _)| d).product();
    let out_strides = strides(&out_full);
    let mut acc = vec![0f32; out_full.iter().product()];
    let in_strides = strides(s);
    for (flat, &v) in x.as_f32()?.iter().enumerate() {
        let mut o = 0;
        for d in 0..rank {
            let idx = (flat / in_strides[d]) % s[d];
            if !reduce[d] {
                o += idx * out_strides[d];
            }
        }
        acc[o] += v;
    }
    acc.iter_mut().for_each(|v| *v /= count.max(1) as f32);
    let shape = if keep { out_full } else { s.iter().zip(&reduce).filter(|(_, &r)| !r).map(|(&d, _)| d).collect() };
    Ok(Tensor::f32(shape, acc))
}

fn gather(node: &Node, data: &Tensor, indices: &Tensor) -> Result<Tensor, BackboneError> {
    let s = data.shape();
    let axis = normalize_axis(node.attr_int("axis", 0), s.len())?;
    let idx: Vec<usize> = indices
        .to_i64_vec()
        .iter()
        .map(|&i| {
            let j = if i < 0 { i + s[axis] as i64 } else { i };
            if j < 0 || j as usize >= s[axis] {
                Err(rt(format!("Gather: index {i} out of range")))
            } else {
                Ok(j as usize)
            }
        })
        .collect::<Result<_, _>>()?;
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut shape = s[..axis].to_vec();
    shape.extend_from_slice(indices.shape());
    shape.extend_from_slice(&s[axis + 1..]);
    macro_rules! pick {
        ($d:expr, $ctor:path) => {{
            let d = $d;
            let mut out = Vec::with_capacity(outer * idx.len() * inner);
            for o in 0..outer {
                for &i in &idx {
                    out.extend_from_slice(&d[(o * s[axis] + i) * inner..][..inner]);
                }
            }
            $ctor(shape, out)
        }};
    }
    Ok(match data {
        Tensor::F32 { data, .. } => pick!(data, Tensor::f32),
        Tensor::I64 { data, .. } => pick!(data, Tensor::i64),
    })
}

fn unsqueeze(node: &Node, inputs: &Inputs) -> Result<Tensor, BackboneError> {
    let x = required(node, inputs, 0)?;
    let axes = axes_of(node, inputs, 1)?.ok_or_else(|| rt("Unsqueeze: missing axes"))?;
    let rank = x.shape().len() + axes.len();
    let mut axes: Vec<usize> = axes.iter().map(|&a| normalize_axis(a, rank)).collect::<Result<_, _>>()?;
    axes.sort_unstable();
    let mut shape = x.shape().to_vec();
    for a in axes {
        shape.insert(a, 1);
    }
    x.clone().with_shape(shape)
}

fn squeeze(node: &Node, inputs: &Inputs) -> Result<Tensor, BackboneError> {
    let x = required(node, inputs, 0)?;
    let s = x.shape();
    let shape: Vec<usize> = match axes_of(node, inputs, 1)? {
        Some(axes) => {
            let axes: Vec<usize> = axes.iter().map(|&a| normalize_axis(a, s.len())).collect::<Result<_, _>>()?;
            s.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect()
        }
        None => s.iter().copied().filter(|&d| d != 1).collect(),
    };
    x.clone().with_shape(shape)
}

fn constant(node: &Node) -> Result<Tensor, BackboneError> {
    match node.attr("value") {
        Some(AttrValue::Tensor(t)) => return Ok(t.clone()),
        Some(_) => return Err(rt("Constant: `value` must be a tensor")),
        None => {}
    }
    match (node.attr("value_float"), node.attr("value_floats"), node.attr("value_int"), node.attr("value_ints")) {
        (Some(AttrValue::Float(f)), ..) => Ok(Tensor::f32(vec![], vec![*f])),
        (_, Some(AttrValue::Floats(fs)), ..) => Ok(Tensor::f32(vec![fs.len()], fs.clone())),
        (_, _, Some(AttrValue::Int(i)), _) => Ok(Tensor::i64(vec![], vec![*i])),
        (_, _, _, Some(AttrValue::Ints(is))) => Ok(Tensor::i64(vec![is.len()], is.clone())),
        _ => Err(rt("Constant: unsupported or missing value attribute")),
    }
}

fn cast(node: &Node, x: &Tensor) -> Result<Tensor, BackboneError> {
    let to = node.attr_int("to", ONNX_FLOAT as i64) as i32;
    let shape = x.shape().to_vec();
    match (to, x) {
        (ONNX_FLOAT, Tensor::F32 { .. }) | (ONNX_INT64, Tensor::I64 { .. }) => Ok(x.clone()),
        (ONNX_FLOAT, Tensor::I64 { data, .. }) => Ok(Tensor::f32(shape, data.iter().map(|&v| v as f32).collect())),
        (ONNX_INT64, Tensor::F32 { data, .. }) => Ok(Tensor::i64(shape, data.iter().map(|&v| v as i64).collect())),
        (other, _) => Err(rt(format!("Cast: unsupported target type {other}"))),
    }
}
