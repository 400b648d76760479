use pareidolia_core::backbone::{cache, fixtures, BackboneModel};
use pareidolia_core::dataset::{Orientation, PixelTensor, IMAGE_SIDE};

fn pattern(n: usize) -> PixelTensor {
    let s = IMAGE_SIDE;
    let mut v = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        for r in 0..s {
            for col in 0..s {
                let k = ((c + 1 + n) * r + 2 * col + r * col / 50) % 97;
                v.push(k as f32 / 97.0 - 0.5);
            }
        }
    }
    PixelTensor::from_vec(v).unwrap()
}

// Reference rows from torch (avg_pool2d(56) -> flatten -> x @ W.T + b) on the same inputs.
const TORCH_ROWS: [[f32; 8]; 2] = [
    [-0.3987768, -0.2960581, -0.1962872, -0.1058246, 1.217611e-05, 0.09783394, 0.1991006, 0.3012232],
    [-0.3986831, -0.3056862, -0.2011397, -0.0991936, 0.001937929, 0.0990838, 0.2036809, 0.3013169],
];

#[test]
fn linear_backbone_matches_reference_framework() {
    let m = BackboneModel::from_bytes(&fixtures::linear_backbone().encode()).unwrap();
    let ids = vec!["a".to_string(), "b".to_string()];
    let fm = m.extract_features(&[pattern(0), pattern(1)], ids, Orientation::Upright, 2).unwrap();
    for (i, expected) in TORCH_ROWS.iter().enumerate() {
        for (got, want) in fm.row(i).iter().zip(expected) {
            assert!((got - want).abs() < 1e-6, "row {i}: {got} vs {want}");
        }
    }
}

#[test]
fn features_do_not_depend_on_batch_size() {
    let m = BackboneModel::from_bytes(&fixtures::desk_backbone(11).encode()).unwrap();
    let imgs: Vec<_> = (0..5).map(pattern).collect();
    let ids: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
    let one = m.extract_features(&imgs, ids.clone(), Orientation::Upright, 1).unwrap();
    let all = m.extract_features(&imgs, ids.clone(), Orientation::Upright, 5).unwrap();
    let odd = m.extract_features(&imgs, ids, Orientation::Upright, 3).unwrap();
    assert_eq!(one.values(), all.values());
    assert_eq!(one.values(), odd.values());
}

#[test]
fn extracted_features_survive_cache_roundtrip() {
    let bytes = fixtures::desk_backbone(5).encode();
    let m = BackboneModel::from_bytes(&bytes).unwrap();
    let ids: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
    let imgs: Vec<_> = (0..3).map(pattern).collect();
    let fm = m.extract_features(&imgs, ids, Orientation::Inverted, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppfc");
    cache::cache_write(&fm, &path).unwrap();
    let back = cache::cache_read_checked(&path, m.model_hash()).unwrap();
    assert_eq!(back, fm);
    assert!(fm.values().iter().any(|&v| v > 0.0));
}
