//! Frozen backbone inference. Models are ONNX graphs that take an
//! `N×3×224×224` float input and return `N×d` features, the activation that
//! enters the final classifier layer. The graph runs on a small built-in
//! CPU interpreter (see [`ops::SUPPORTED_OPS`]).

pub mod cache;
pub mod fixtures;
pub mod onnx;
pub mod ops;
pub mod proto;
pub mod tensor;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Orientation, PixelTensor, IMAGE_SIDE, TENSOR_LEN};
use onnx::{Dim, Model};
use tensor::Tensor;

pub use cache::{cache_read, cache_write};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error("unsupported operator `{0}`")]
    UnsupportedOp(String),
    #[error("model opset {0} is older than the minimum supported opset 13")]
    OldOpset(i64),
    #[error("model output must be rank 2 (batch × features), got {0:?}")]
    OutputRank(Vec<Dim>),
    #[error("inference failed: {0}")]
    Runtime(String),
    #[error("non-finite activation in row {row} (unit {unit})")]
    NonFinite { row: usize, unit: usize },
    #[error("empty image batch")]
    EmptyBatch,
    #[error("invalid feature matrix: {0}")]
    InvalidMatrix(String),
    #[error("feature cache {path}: {message}")]
    CacheFormat { path: String, message: String },
    #[error("stale feature cache {path}: written for model {found}, requested {expected}")]
    StaleCache { path: String, found: String, expected: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Content digest used as a model identity: SHA-256 truncated to 128 bits,
/// rendered as 32 lowercase hex characters.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..16])
}

/// An `n_images × feature_dim` activation matrix with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    record_ids: Vec<String>,
    model_hash: String,
    transform: Orientation,
}

impl FeatureMatrix {
    pub fn new(
        cols: usize,
        values: Vec<f32>,
        record_ids: Vec<String>,
        model_hash: impl Into<String>,
        transform: Orientation,
    ) -> Result<Self> {
        let rows = record_ids.len();
        if values.len() != rows * cols {
            return Err(BackboneError::InvalidMatrix(format!("{} values for {rows}×{cols}", values.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = record_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(BackboneError::InvalidMatrix(format!("duplicate record id `{dup}`")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(BackboneError::NonFinite { row: pos / cols.max(1), unit: pos % cols.max(1) });
        }
        Ok(FeatureMatrix { rows, cols, values, record_ids, model_hash: model_hash.into(), transform })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.values[i * self.cols + j] as f64).collect()
    }

    pub fn record_ids(&self) -> &[String] {
        &self.record_ids
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn transform(&self) -> Orientation {
        self.transform
    }

    /// Column means in 64-bit.
    pub fn column_means(&self) -> Vec<f64> {
        let mut acc = vec![0f64; self.cols];
        for row in self.row_iter() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.rows as f64);
        acc
    }

    /// Rows in the given order (used for resampling and reordering).
    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            ids.push(self.record_ids[i].clone());
        }
        FeatureMatrix::new(self.cols, values, ids, self.model_hash.clone(), self.transform)
    }
}

/// A loaded, immutable inference graph.
#[derive(Debug)]
pub struct BackboneModel {
    model: Model,
    input_name: String,
    output_name: String,
    feature_dim: usize,
    model_hash: String,
    opset: i64,
}

impl BackboneModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|source| BackboneError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let model = Model::decode(bytes)?;
        let model_hash = content_hash(bytes);
        let opset = model.default_opset().ok_or_else(|| BackboneError::Malformed("no default-domain opset".into()))?;
        if opset < 13 {
            return Err(BackboneError::OldOpset(opset));
        }
        for node in &model.graph.nodes {
            if !node.domain.is_empty() && node.domain != "ai.onnx" {
                return Err(BackboneError::UnsupportedOp(format!("{}::{}", node.domain, node.op_type)));
            }
            if !ops::SUPPORTED_OPS.contains(&node.op_type.as_str()) {
                return Err(BackboneError::UnsupportedOp(node.op_type.clone()));
            }
        }
        let init_names: HashSet<&str> = model.graph.initializers.iter().map(|(n, _)| n.as_str()).collect();
        let inputs: Vec<_> = model.graph.inputs.iter().filter(|vi| !init_names.contains(vi.name.as_str())).collect();
        let input = match inputs.as_slice() {
            [single] => (*single).clone(),
            other => {
                return Err(BackboneError::Malformed(format!(
                    "expected exactly one graph input, found {}",
                    other.len()
                )));
            }
        };
        if let Some(dims) = &input.dims {
            let expected = [3, IMAGE_SIDE as i64, IMAGE_SIDE as i64];
            let ok =
                dims.len() == 4 && dims[1..].iter().zip(expected).all(|(d, e)| !matches!(d, Dim::Value(v) if *v != e));
            if !ok {
                return Err(BackboneError::Malformed(format!("input must be N×3×224×224, declared {dims:?}")));
            }
        }
        let output = match model.graph.outputs.as_slice() {
            [single] => single.clone(),
            other => {
                return Err(BackboneError::Malformed(format!(
                    "expected exactly one graph output, found {}",
                    other.len()
                )));
            }
        };
        let mut backbone = BackboneModel {
            input_name: input.name.clone(),
            output_name: output.name.clone(),
            model,
            feature_dim: 0,
            model_hash,
            opset,
        };
        backbone.feature_dim = match &output.dims {
            Some(dims) if dims.len() != 2 => return Err(BackboneError::OutputRank(dims.clone())),
            Some(dims) => match dims[1] {
                Dim::Value(v) if v > 0 => v as usize,
                _ => backbone.probe_width()?,
            },
            None => backbone.probe_width()?,
        };
        Ok(backbone)
    }

    fn probe_width(&self) -> Result<usize> {
        let out = self.run(Tensor::f32(vec![1, 3, IMAGE_SIDE, IMAGE_SIDE], vec![0.0; TENSOR_LEN]))?;
        match out.shape() {
            &[1, d] if d > 0 => Ok(d),
            s => Err(BackboneError::OutputRank(s.iter().map(|&d| Dim::Value(d as i64)).collect())),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn input_name(&self) -> &str {
        &self.input_name
    }

    pub fn output_name(&self) -> &str {
        &self.output_name
    }

    /// Runs the graph on an `N×3×224×224` tensor.
    pub fn run(&self, input: Tensor) -> Result<Tensor> {
        let mut values: HashMap<&str, Arc<Tensor>> = HashMap::new();
        for (name, t) in &self.model.graph.initializers {
            values.insert(name.as_str(), Arc::clone(t));
        }
        values.insert(self.input_name.as_str(), Arc::new(input));
        for node in &self.model.graph.nodes {
            let inputs = node
                .inputs
                .iter()
                .map(|name| {
                    if name.is_empty() {
                        Ok(None)
                    } else {
                        values.get(name.as_str()).cloned().map(Some).ok_or_else(|| {
                            BackboneError::Malformed(format!("node `{}` reads undefined value `{name}`", node.name))
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let outs = ops::run(node, &inputs, self.opset)?;
            for (name, t) in node.outputs.iter().zip(outs) {
                if !name.is_empty() {
                    values.insert(name.as_str(), Arc::new(t));
                }
            }
        }
        let out = values
            .remove(self.output_name.as_str())
            .ok_or_else(|| BackboneError::Malformed(format!("output `{}` is never produced", self.output_name)))?;
        Ok(Arc::try_unwrap(out).unwrap_or_else(|shared| (*shared).clone()))
    }

    /// Penultimate activations for each image, rows in input order.
    /// Images are processed in independent chunks of `batch_size`.
    pub fn extract_features(
        &self,
        images: &[PixelTensor],
        record_ids: Vec<String>,
        transform: Orientation,
        batch_size: usize,
    ) -> Result<FeatureMatrix> {
        if images.is_empty() {
            return Err(BackboneError::EmptyBatch);
        }
        if images.len() != record_ids.len() {
            return Err(BackboneError::InvalidMatrix(format!(
                "{} images but {} record ids",
                images.len(),
                record_ids.len()
            )));
        }
        let d = self.feature_dim;
        let chunks: Vec<Vec<f32>> = images
            .par_chunks(batch_size.max(1))
            .enumerate()
            .map(|(ci, chunk)| {
                let mut data = Vec::with_capacity(chunk.len() * TENSOR_LEN);
                for img in chunk {
                    data.extend_from_slice(img.as_slice());
                }
                let out = self.run(Tensor::f32(vec![chunk.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data))?;
                if out.shape() != [chunk.len(), d] {
                    return Err(BackboneError::Runtime(format!(
                        "expected output {:?}, got {:?}",
                        [chunk.len(), d],
                        out.shape()
                    )));
                }
                let values = out.as_f32()?.to_vec();
                if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                    let row = ci * batch_size.max(1) + pos / d;
                    return Err(BackboneError::NonFinite { row, unit: pos % d });
                }
                Ok(values)
            })
            .collect::<Result<_>>()?;
        FeatureMatrix::new(d, chunks.concat(), record_ids, self.model_hash.clone(), transform)
    }
}

pub fn load_backbone(path: &Path) -> Result<BackboneModel> {
    BackboneModel::load(path)
}

#[cfg(test)]
mod tests {
    use super::onnx::{ints, AttrValue, GraphBuilder};
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i}")).collect()
    }

    #[test]
    fn identity_backbone_averages_constant_input() {
        let m = BackboneModel::from_bytes(&fixtures::identity_backbone().encode()).unwrap();
        assert_eq!(m.feature_dim(), 12);
        let fm = m.extract_features(&[PixelTensor::filled(0.5)], ids(1), Orientation::Upright, 4).unwrap();
        assert!(fm.row(0).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let m = BackboneModel::from_bytes(&fixtures::desk_backbone(3).encode()).unwrap();
        let img = PixelTensor::from_vec((0..TENSOR_LEN).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect()).unwrap();
        let fm = m.extract_features(&vec![img; 3], ids(3), Orientation::Upright, 2).unwrap();
        assert_eq!(fm.row(0), fm.row(1));
        assert_eq!(fm.row(0), fm.row(2));
    }

    #[test]
    fn rejects_old_opset_and_bad_output_rank() {
        let mut model = fixtures::identity_backbone();
        model.opsets = vec![(String::new(), 11)];
        assert!(matches!(BackboneModel::from_bytes(&model.encode()), Err(BackboneError::OldOpset(11))));

        let mut b =
            GraphBuilder::new("input", vec![Dim::Param("N".into()), Dim::Value(3), Dim::Value(224), Dim::Value(224)]);
        b.node_named(
            "AveragePool",
            &["input"],
            "features",
            vec![("kernel_shape", ints(&[112, 112])), ("strides", ints(&[112, 112]))],
        );
        let model = b.finish("features", vec![Dim::Param("N".into()), Dim::Value(3), Dim::Value(2), Dim::Value(2)], 13);
        assert!(matches!(BackboneModel::from_bytes(&model.encode()), Err(BackboneError::OutputRank(_))));
    }

    #[test]
    fn undeclared_output_width_is_probed() {
        let mut model = fixtures::identity_backbone();
        model.graph.outputs[0].dims = None;
        let m = BackboneModel::from_bytes(&model.encode()).unwrap();
        assert_eq!(m.feature_dim(), 12);
    }

    #[test]
    fn unsupported_ops_rejected_at_load() {
        let mut b =
            GraphBuilder::new("input", vec![Dim::Param("N".into()), Dim::Value(3), Dim::Value(224), Dim::Value(224)]);
        b.node_named("Einsum", &["input"], "features", vec![("equation", AttrValue::Bytes(b"ij".to_vec()))]);
        let model = b.finish("features", vec![Dim::Param("N".into()), Dim::Value(4)], 13);
        assert!(matches!(BackboneModel::from_bytes(&model.encode()), Err(BackboneError::UnsupportedOp(_))));
        assert!(matches!(BackboneModel::from_bytes(b"junk"), Err(BackboneError::Malformed(_))));
    }

    #[test]
    fn non_finite_activation_reports_row() {
        // x / x is NaN only for an all-zero image
        let mut b =
            GraphBuilder::new("input", vec![Dim::Param("N".into()), Dim::Value(3), Dim::Value(224), Dim::Value(224)]);
        let g = b.node("GlobalAveragePool", &["input"], vec![]);
        let f = b.node("Flatten", &[&g], vec![]);
        b.node_named("Div", &[&f, &f], "features", vec![]);
        let m =
            BackboneModel::from_bytes(&b.finish("features", vec![Dim::Param("N".into()), Dim::Value(3)], 13).encode())
                .unwrap();
        let imgs = vec![PixelTensor::filled(0.5), PixelTensor::filled(0.0)];
        match m.extract_features(&imgs, ids(2), Orientation::Upright, 1) {
            Err(BackboneError::NonFinite { row: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn feature_matrix_invariants() {
        assert!(FeatureMatrix::new(2, vec![0.0; 4], vec!["a".into(), "a".into()], "h", Orientation::Upright).is_err());
        assert!(FeatureMatrix::new(2, vec![0.0; 3], vec!["a".into(), "b".into()], "h", Orientation::Upright).is_err());
        assert!(matches!(
            FeatureMatrix::new(
                2,
                vec![0.0, 1.0, f32::INFINITY, 0.0],
                vec!["a".into(), "b".into()],
                "h",
                Orientation::Upright
            ),
            Err(BackboneError::NonFinite { row: 1, unit: 0 })
        ));
        let fm =
            FeatureMatrix::new(2, vec![1.0, 2.0, 3.0, 6.0], vec!["a".into(), "b".into()], "h", Orientation::Upright)
                .unwrap();
        assert_eq!(fm.column_means(), vec![2.0, 4.0]);
        assert_eq!(fm.column(1), vec![2.0, 6.0]);
    }

    #[test]
    fn content_hash_is_32_hex_chars() {
        let h = content_hash(b"abc");
        assert_eq!(h.len(), 32);
        // SHA-256("abc") starts with ba7816bf8f01cfea414140de5dae2223
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223");
    }
}
