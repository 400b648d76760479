//! Small synthetic backbones used by tests and the desk-scale fixture.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::onnx::{ints, AttrValue, Dim, GraphBuilder, Model};
use super::tensor::Tensor;

fn image_input() -> Vec<Dim> {
    vec![Dim::Param("N".into()), Dim::Value(3), Dim::Value(224), Dim::Value(224)]
}

fn features(d: usize) -> Vec<Dim> {
    vec![Dim::Param("N".into()), Dim::Value(d as i64)]
}

/// Average-pools each channel over a 2×2 grid of 112×112 blocks: d = 12.
pub fn identity_backbone() -> Model {
    let mut b = GraphBuilder::new("input", image_input());
    let p =
        b.node("AveragePool", &["input"], vec![("kernel_shape", ints(&[112, 112])), ("strides", ints(&[112, 112]))]);
    b.node_named("Flatten", &[&p], "features", vec![("axis", AttrValue::Int(1))]);
    b.finish("features", features(12), 13)
}

pub fn linear_weight(i: usize, j: usize) -> f32 {
    (((i * 48 + j) % 7) as f32 - 3.0) / 10.0
}

pub fn linear_bias(i: usize) -> f32 {
    0.1 * i as f32 - 0.4
}

/// 4×4 average pooling per channel (48 values) followed by a fixed 48→8
/// affine map with weights [`linear_weight`] and bias [`linear_bias`].
pub fn linear_backbone() -> Model {
    let mut b = GraphBuilder::new("input", image_input());
    let p = b.node("AveragePool", &["input"], vec![("kernel_shape", ints(&[56, 56])), ("strides", ints(&[56, 56]))]);
    let f = b.node("Flatten", &[&p], vec![]);
    let w: Vec<f32> = (0..8).flat_map(|i| (0..48).map(move |j| linear_weight(i, j))).collect();
    let w = b.initializer("fc_weight", Tensor::f32(vec![8, 48], w));
    let bias = b.initializer("fc_bias", Tensor::f32(vec![8], (0..8).map(linear_bias).collect()));
    b.node_named("Gemm", &[&f, &w, &bias], "features", vec![("transB", AttrValue::Int(1))]);
    b.finish("features", features(8), 13)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let u = (rng.next_u64() >> 40) as f32 / (1u64 << 24) as f32;
            (2.0 * u - 1.0) * scale
        })
        .collect()
}

pub const DESK_FEATURE_DIM: usize = 64;

/// Small convolutional backbone with seeded weights:
/// conv7×7/4 → relu → maxpool2 → batchnorm → conv3×3/2 → relu →
/// avgpool to 2×2 → flatten → fc → relu, producing 64 features.
pub fn desk_backbone(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new("input", image_input());

    let c1 = 12;
    let w1 = b.initializer(
        "conv1_weight",
        Tensor::f32(vec![c1, 3, 7, 7], uniform(&mut rng, c1 * 3 * 49, (3.0 / 147.0f32).sqrt())),
    );
    let b1 = b.initializer("conv1_bias", Tensor::f32(vec![c1], uniform(&mut rng, c1, 0.05)));
    let x = b.node(
        "Conv",
        &["input", &w1, &b1],
        vec![("kernel_shape", ints(&[7, 7])), ("strides", ints(&[4, 4])), ("pads", ints(&[3, 3, 3, 3]))],
    );
    let x = b.node("Relu", &[&x], vec![]);
    let x = b.node("MaxPool", &[&x], vec![("kernel_shape", ints(&[2, 2])), ("strides", ints(&[2, 2]))]);

    let scale = b.initializer("bn_scale", Tensor::f32(vec![c1], vec![1.0; c1]));
    let shift = b.initializer("bn_shift", Tensor::f32(vec![c1], vec![0.0; c1]));
    let mean = b.initializer("bn_mean", Tensor::f32(vec![c1], vec![0.2; c1]));
    let var = b.initializer("bn_var", Tensor::f32(vec![c1], vec![0.25; c1]));
    let x = b.node("BatchNormalization", &[&x, &scale, &shift, &mean, &var], vec![("epsilon", AttrValue::Float(1e-5))]);

    let c2 = 16;
    let w2 = b.initializer(
        "conv2_weight",
        Tensor::f32(vec![c2, c1, 3, 3], uniform(&mut rng, c2 * c1 * 9, (3.0 / (c1 * 9) as f32).sqrt())),
    );
    let x = b.node(
        "Conv",
        &[&x, &w2],
        vec![("kernel_shape", ints(&[3, 3])), ("strides", ints(&[2, 2])), ("pads", ints(&[1, 1, 1, 1]))],
    );
    let x = b.node("Relu", &[&x], vec![]);
    let x = b.node("AveragePool", &[&x], vec![("kernel_shape", ints(&[7, 7])), ("strides", ints(&[7, 7]))]);
    let x = b.node("Flatten", &[&x], vec![]);

    let d_in = c2 * 4;
    let w3 = b.initializer(
        "fc_weight",
        Tensor::f32(
            vec![DESK_FEATURE_DIM, d_in],
            uniform(&mut rng, DESK_FEATURE_DIM * d_in, (3.0 / d_in as f32).sqrt()),
        ),
    );
    let b3 = b.initializer("fc_bias", Tensor::f32(vec![DESK_FEATURE_DIM], vec![0.1; DESK_FEATURE_DIM]));
    let x = b.node("Gemm", &[&x, &w3, &b3], vec![("transB", AttrValue::Int(1))]);
    b.node_named("Relu", &[&x], "features", vec![]);
    b.finish("features", features(DESK_FEATURE_DIM), 13)
}
