//! ONNX `ModelProto` subset: graph, nodes, attributes, initializers and
//! value infos. Also a small builder used to write fixture models.

use std::sync::Arc;

use super::proto::{self, Reader, Writer};
use super::tensor::Tensor;
use super::BackboneError;

pub const ONNX_FLOAT: i32 = 1;
pub const ONNX_INT32: i32 = 6;
pub const ONNX_INT64: i32 = 7;
pub const ONNX_DOUBLE: i32 = 11;

#[derive(Debug, Clone, PartialEq)]
pub enum Dim {
    Value(i64),
    Param(String),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueInfo {
    pub name: String,
    pub elem_type: i32,
    /// `None` when the value info carries no shape.
    pub dims: Option<Vec<Dim>>,
}

#[derive(Debug, Clone)]
pub enum AttrValue {
    Float(f32),
    Int(i64),
    Bytes(Vec<u8>),
    Tensor(Tensor),
    Floats(Vec<f32>),
    Ints(Vec<i64>),
    Other,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op_type: String,
    pub domain: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: Vec<(String, AttrValue)>,
}

impl Node {
    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn attr_int(&self, name: &str, default: i64) -> i64 {
        match self.attr(name) {
            Some(AttrValue::Int(v)) => *v,
            _ => default,
        }
    }

    pub fn attr_float(&self, name: &str, default: f32) -> f32 {
        match self.attr(name) {
            Some(AttrValue::Float(v)) => *v,
            _ => default,
        }
    }

    pub fn attr_ints(&self, name: &str) -> Option<&[i64]> {
        match self.attr(name) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn attr_str(&self, name: &str) -> Option<String> {
        match self.attr(name) {
            Some(AttrValue::Bytes(b)) => Some(String::from_utf8_lossy(b).into_owned()),
            _ => None,
        }
    }

    /// Input `i`, treating an empty name as an omitted optional input.
    pub fn input(&self, i: usize) -> Option<&str> {
        self.inputs.get(i).map(String::as_str).filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub initializers: Vec<(String, Arc<Tensor>)>,
    pub inputs: Vec<ValueInfo>,
    pub outputs: Vec<ValueInfo>,
}

#[derive(Debug, Clone, Default)]
pub struct Model {
    pub ir_version: i64,
    pub opsets: Vec<(String, i64)>,
    pub graph: Graph,
}

impl Model {
    /// Opset version of the default (`ai.onnx`) domain.
    pub fn default_opset(&self) -> Option<i64> {
        self.opsets.iter().find(|(d, _)| d.is_empty() || d == "ai.onnx").map(|(_, v)| *v)
    }

    pub fn decode(bytes: &[u8]) -> Result<Model, BackboneError> {
        let mut model = Model::default();
        let mut have_graph = false;
        let mut r = Reader::new(bytes);
        while let Some((field, v)) = r.next_field()? {
            match field {
                1 => model.ir_version = proto::as_i64(v, "ir_version")?,
                7 => {
                    model.graph = decode_graph(proto::as_bytes(v, "graph")?)?;
                    have_graph = true;
                }
                8 => model.opsets.push(decode_opset(proto::as_bytes(v, "opset_import")?)?),
                _ => {}
            }
        }
        if !have_graph {
            return Err(BackboneError::Malformed("model has no graph".into()));
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.varint(1, self.ir_version);
        w.string(2, "pareidolia-core");
        w.message(7, encode_graph(&self.graph));
        for (domain, version) in &self.opsets {
            let mut o = Writer::new();
            if !domain.is_empty() {
                o.string(1, domain);
            }
            o.varint(2, *version);
            w.message(8, o);
        }
        w.finish()
    }
}

fn decode_opset(b: &[u8]) -> Result<(String, i64), BackboneError> {
    let mut r = Reader::new(b);
    let (mut domain, mut version) = (String::new(), 0);
    while let Some((field, v)) = r.next_field()? {
        match field {
            1 => domain = proto::as_string(v, "opset domain")?,
            2 => version = proto::as_i64(v, "opset version")?,
            _ => {}
        }
    }
    Ok((domain, version))
}

fn decode_graph(b: &[u8]) -> Result<Graph, BackboneError> {
    let mut g = Graph::default();
    let mut r = Reader::new(b);
    while let Some((field, v)) = r.next_field()? {
        match field {
            1 => g.nodes.push(decode_node(proto::as_bytes(v, "node")?)?),
            5 => {
                let (name, t) = decode_tensor(proto::as_bytes(v, "initializer")?)?;
                g.initializers.push((name, Arc::new(t)));
            }
            11 => g.inputs.push(decode_value_info(proto::as_bytes(v, "input")?)?),
            12 => g.outputs.push(decode_value_info(proto::as_bytes(v, "output")?)?),
            15 => return Err(BackboneError::Malformed("sparse initializers are not supported".into())),
            _ => {}
        }
    }
    Ok(g)
}

fn decode_node(b: &[u8]) -> Result<Node, BackboneError> {
    let mut n = Node {
        name: String::new(),
        op_type: String::new(),
        domain: String::new(),
        inputs: vec![],
        outputs: vec![],
        attributes: vec![],
    };
    let mut r = Reader::new(b);
    while let Some((field, v)) = r.next_field()? {
        match field {
            1 => n.inputs.push(proto::as_string(v, "node input")?),
            2 => n.outputs.push(proto::as_string(v, "node output")?),
            3 => n.name = proto::as_string(v, "node name")?,
            4 => n.op_type = proto::as_string(v, "op_type")?,
            5 => n.attributes.push(decode_attribute(proto::as_bytes(v, "attribute")?)?),
            7 => n.domain = proto::as_string(v, "node domain")?,
            _ => {}
        }
    }
    Ok(n)
}

fn decode_attribute(b: &[u8]) -> Result<(String, AttrValue), BackboneError> {
    let mut name = String::new();
    let mut declared = 0i64;
    let mut f = None;
    let mut i = None;
    let mut s = None;
    let mut t = None;
    let mut floats = Vec::new();
    let mut ints = Vec::new();
    let mut r = Reader::new(b);
    while let Some((field, v)) = r.next_field()? {
        match field {
            1 => name = proto::as_string(v, "attribute name")?,
            2 => f = Some(proto::as_f32(v, "attribute f")?),
            3 => i = Some(proto::as_i64(v, "attribute i")?),
            4 => s = Some(proto::as_bytes(v, "attribute s")?.to_vec()),
            5 => t = Some(decode_tensor(proto::as_bytes(v, "attribute t")?)?.1),
            7 => proto::push_f32s(&mut floats, v, "attribute floats")?,
            8 => proto::push_i64s(&mut ints, v, "attribute ints")?,
            20 => declared = proto::as_i64(v, "attribute type")?,
            _ => {}
        }
    }
    // AttributeType: FLOAT=1 INT=2 STRING=3 TENSOR=4 FLOATS=6 INTS=7
    let value = match declared {
        1 => AttrValue::Float(f.unwrap_or(0.0)),
        2 => AttrValue::Int(i.unwrap_or(0)),
        3 => AttrValue::Bytes(s.unwrap_or_default()),
        4 => t.map(AttrValue::Tensor).unwrap_or(AttrValue::Other),
        6 => AttrValue::Floats(floats),
        7 => AttrValue::Ints(ints),
        0 => {
            if let Some(t) = t {
                AttrValue::Tensor(t)
            } else if let Some(s) = s {
                AttrValue::Bytes(s)
            } else if !ints.is_empty() {
                AttrValue::Ints(ints)
            } else if !floats.is_empty() {
                AttrValue::Floats(floats)
            } else if let Some(i) = i {
                AttrValue::Int(i)
            } else if let Some(f) = f {
                AttrValue::Float(f)
            } else {
                AttrValue::Other
            }
        }
        _ => AttrValue::Other,
    };
    Ok((name, value))
}

pub fn decode_tensor(b: &[u8]) -> Result<(String, Tensor), BackboneError> {
    let mut name = String::new();
    let mut dims = Vec::new();
    let mut data_type = 0i32;
    let mut raw: Option<&[u8]> = None;
    let mut floats = Vec::new();
    let mut ints = Vec::new();
    let mut int32s = Vec::new();
    let mut doubles = Vec::new();
    let mut external = false;
    let mut r = Reader::new(b);
    while let Some((field, v)) = r.next_field()? {
        match field {
            1 => proto::push_i64s(&mut dims, v, "tensor dims")?,
            2 => data_type = proto::as_i64(v, "tensor data_type")? as i32,
            4 => proto::push_f32s(&mut floats, v, "float_data")?,
            5 => proto::push_i64s(&mut int32s, v, "int32_data")?,
            7 => proto::push_i64s(&mut ints, v, "int64_data")?,
            8 => name = proto::as_string(v, "tensor name")?,
            9 => raw = Some(proto::as_bytes(v, "raw_data")?),
            10 => proto::push_f64s(&mut doubles, v, "double_data")?,
            13 => external = true,
            14 => external |= proto::as_i64(v, "data_location")? == 1,
            _ => {}
        }
    }
    if external {
        return Err(BackboneError::Malformed(format!("tensor `{name}` uses external data, which is not supported")));
    }
    if dims.iter().any(|&d| d < 0) {
        return Err(BackboneError::Malformed(format!("tensor `{name}` has a negative dimension")));
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let count: usize = shape.iter().product();
    let bad_len = |got: usize| BackboneError::Malformed(format!("tensor `{name}`: {got} values for shape {shape:?}"));
    let tensor = match data_type {
        ONNX_FLOAT | ONNX_DOUBLE => {
            let data: Vec<f32> = match (raw, data_type) {
                (Some(r), ONNX_FLOAT) => r.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                (Some(r), _) => r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
                (None, ONNX_FLOAT) => floats,
                (None, _) => doubles.iter().map(|&d| d as f32).collect(),
            };
            if data.len() != count {
                return Err(bad_len(data.len()));
            }
            Tensor::f32(shape, data)
        }
        ONNX_INT64 | ONNX_INT32 => {
            let data: Vec<i64> = match (raw, data_type) {
                (Some(r), ONNX_INT64) => r.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
                (Some(r), _) => r.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64).collect(),
                (None, ONNX_INT64) => ints,
                (None, _) => int32s,
            };
            if data.len() != count {
                return Err(bad_len(data.len()));
            }
            Tensor::i64(shape, data)
        }
        other => {
            return Err(BackboneError::Malformed(format!("tensor `{name}` has unsupported data type {other}")));
        }
    };
    Ok((name, tensor))
}

fn decode_value_info(b: &[u8]) -> Result<ValueInfo, BackboneError> {
    let mut vi = ValueInfo { name: String::new(), elem_type: 0, dims: None };
    let mut r = Reader::new(b);
    while let Some((field, v)) = r.next_field()? {
        match field {
            1 => vi.name = proto::as_string(v, "value_info name")?,
            2 => {
                // TypeProto.tensor_type (1) -> elem_type (1), shape (2)
                let mut tr = Reader::new(proto::as_bytes(v, "type")?);
                while let Some((tf, tv)) = tr.next_field()? {
                    if tf != 1 {
                        continue;
                    }
                    let mut ttr = Reader::new(proto::as_bytes(tv, "tensor_type")?);
                    while let Some((f, x)) = ttr.next_field()? {
                        match f {
                            1 => vi.elem_type = proto::as_i64(x, "elem_type")? as i32,
                            2 => vi.dims = Some(decode_shape(proto::as_bytes(x, "shape")?)?),
                            _ => {}
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(vi)
}

fn decode_shape(b: &[u8]) -> Result<Vec<Dim>, BackboneError> {
    let mut dims = Vec::new();
    let mut r = Reader::new(b);
    while let Some((field, v)) = r.next_field()? {
        if field != 1 {
            continue;
        }
        let mut dim = Dim::Unknown;
        let mut dr = Reader::new(proto::as_bytes(v, "dim")?);
        while let Some((f, x)) = dr.next_field()? {
            match f {
                1 => dim = Dim::Value(proto::as_i64(x, "dim_value")?),
                2 => dim = Dim::Param(proto::as_string(x, "dim_param")?),
                _ => {}
            }
        }
        dims.push(dim);
    }
    Ok(dims)
}

fn encode_tensor(name: &str, t: &Tensor) -> Writer {
    let mut w = Writer::new();
    let dims: Vec<i64> = t.shape().iter().map(|&d| d as i64).collect();
    w.packed_i64(1, &dims);
    match t {
        Tensor::F32 { data, .. } => {
            w.varint(2, ONNX_FLOAT as i64);
            w.string(8, name);
            let raw: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.bytes(9, &raw);
        }
        Tensor::I64 { data, .. } => {
            w.varint(2, ONNX_INT64 as i64);
            w.string(8, name);
            let raw: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.bytes(9, &raw);
        }
    }
    w
}

fn encode_value_info(vi: &ValueInfo) -> Writer {
    let mut tensor_type = Writer::new();
    tensor_type.varint(1, vi.elem_type as i64);
    if let Some(dims) = &vi.dims {
        let mut shape = Writer::new();
        for d in dims {
            let mut dw = Writer::new();
            match d {
                Dim::Value(v) => {
                    dw.varint(1, *v);
                }
                Dim::Param(p) => {
                    dw.string(2, p);
                }
                Dim::Unknown => {}
            }
            shape.message(1, dw);
        }
        tensor_type.message(2, shape);
    }
    let mut ty = Writer::new();
    ty.message(1, tensor_type);
    let mut w = Writer::new();
    w.string(1, &vi.name);
    w.message(2, ty);
    w
}

fn encode_graph(g: &Graph) -> Writer {
    let mut w = Writer::new();
    for n in &g.nodes {
        let mut nw = Writer::new();
        for i in &n.inputs {
            nw.string(1, i);
        }
        for o in &n.outputs {
            nw.string(2, o);
        }
        if !n.name.is_empty() {
            nw.string(3, &n.name);
        }
        nw.string(4, &n.op_type);
        for (name, value) in &n.attributes {
            let mut aw = Writer::new();
            aw.string(1, name);
            match value {
                AttrValue::Float(f) => {
                    aw.fixed32(2, *f).varint(20, 1);
                }
                AttrValue::Int(i) => {
                    aw.varint(3, *i).varint(20, 2);
                }
                AttrValue::Bytes(s) => {
                    aw.bytes(4, s).varint(20, 3);
                }
                AttrValue::Tensor(t) => {
                    aw.message(5, encode_tensor("", t)).varint(20, 4);
                }
                AttrValue::Floats(fs) => {
                    aw.packed_f32(7, fs).varint(20, 6);
                }
                AttrValue::Ints(is) => {
                    aw.packed_i64(8, is).varint(20, 7);
                }
                AttrValue::Other => {}
            }
            nw.message(5, aw);
        }
        w.message(1, nw);
    }
    w.string(2, "graph");
    for (name, t) in &g.initializers {
        w.message(5, encode_tensor(name, t));
    }
    for vi in &g.inputs {
        w.message(11, encode_value_info(vi));
    }
    for vi in &g.outputs {
        w.message(12, encode_value_info(vi));
    }
    w
}

/// Incremental construction of single-input, single-output float graphs.
pub struct GraphBuilder {
    graph: Graph,
    counter: usize,
}

impl GraphBuilder {
    pub fn new(input: &str, input_dims: Vec<Dim>) -> Self {
        GraphBuilder {
            graph: Graph {
                inputs: vec![ValueInfo { name: input.into(), elem_type: ONNX_FLOAT, dims: Some(input_dims) }],
                ..Graph::default()
            },
            counter: 0,
        }
    }

    pub fn initializer(&mut self, prefix: &str, t: Tensor) -> String {
        self.counter += 1;
        let name = format!("{prefix}_{}", self.counter);
        self.graph.initializers.push((name.clone(), Arc::new(t)));
        name
    }

    /// Adds a node with one output and returns the output name.
    pub fn node(&mut self, op: &str, inputs: &[&str], attributes: Vec<(&str, AttrValue)>) -> String {
        self.counter += 1;
        let out = format!("{}_{}", op.to_ascii_lowercase(), self.counter);
        self.node_named(op, inputs, &out, attributes);
        out
    }

    pub fn node_named(&mut self, op: &str, inputs: &[&str], output: &str, attributes: Vec<(&str, AttrValue)>) {
        self.graph.nodes.push(Node {
            name: format!("{op}_{}", self.graph.nodes.len()),
            op_type: op.into(),
            domain: String::new(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: vec![output.to_string()],
            attributes: attributes.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
    }

    pub fn finish(mut self, output: &str, output_dims: Vec<Dim>, opset: i64) -> Model {
        self.graph.outputs.push(ValueInfo { name: output.into(), elem_type: ONNX_FLOAT, dims: Some(output_dims) });
        Model { ir_version: 8, opsets: vec![(String::new(), opset)], graph: self.graph }
    }
}

pub fn ints(v: &[i64]) -> AttrValue {
    AttrValue::Ints(v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_roundtrips_through_encoding() {
        let mut b = GraphBuilder::new("input", vec![Dim::Param("N".into()), Dim::Value(3)]);
        let w = b.initializer("w", Tensor::f32(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let shape = b.initializer("shape", Tensor::i64(vec![2], vec![-1, 2]));
        let m = b.node("MatMul", &["input", &w], vec![("alpha", AttrValue::Float(0.5))]);
        b.node_named("Reshape", &[&m, &shape], "features", vec![("axes", ints(&[0, 1]))]);
        let model = b.finish("features", vec![Dim::Param("N".into()), Dim::Value(2)], 13);
        let decoded = Model::decode(&model.encode()).unwrap();
        assert_eq!(decoded.default_opset(), Some(13));
        assert_eq!(decoded.graph.nodes.len(), 2);
        assert_eq!(decoded.graph.nodes[0].attr_float("alpha", 0.0), 0.5);
        assert_eq!(decoded.graph.nodes[1].attr_ints("axes"), Some(&[0i64, 1][..]));
        assert_eq!(decoded.graph.inputs[0], model.graph.inputs[0]);
        assert_eq!(decoded.graph.outputs[0].dims, Some(vec![Dim::Param("N".into()), Dim::Value(2)]));
        let (_, w) = &decoded.graph.initializers[0];
        assert_eq!(w.shape(), &[3, 2]);
        assert_eq!(w.as_f32().unwrap()[5], 6.0);
        assert_eq!(decoded.graph.initializers[1].1.as_i64().unwrap(), &[-1, 2]);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Model::decode(b"\xff\xff\xff").is_err());
        // a valid message without a graph
        let mut w = Writer::new();
        w.varint(1, 7);
        assert!(matches!(Model::decode(&w.finish()), Err(BackboneError::Malformed(_))));
    }
}
