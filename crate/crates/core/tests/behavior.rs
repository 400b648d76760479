use pareidolia_core::backbone::FeatureMatrix;
use pareidolia_core::behavior::{self, BatteryInput};
use pareidolia_core::dataset::{Label, Orientation};
use pareidolia_core::head::LinearHead;
use proptest::prelude::*;

fn fm(prefix: &str, d: usize, values: Vec<f32>) -> FeatureMatrix {
    let ids = (0..values.len() / d).map(|i| format!("{prefix}{i}")).collect();
    FeatureMatrix::new(d, values, ids, "0".repeat(32), Orientation::Upright).unwrap()
}

fn abs_t(r: &behavior::EffectReport) -> f64 {
    r.stat.result().map(|s| s.t.abs()).unwrap_or(f64::NAN)
}

fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() < 1e-12
}

const D: usize = 3;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relabeling_with_swapped_columns_preserves_effects(
        w in prop::collection::vec(-1.0f64..1.0, D * 2),
        b in prop::collection::vec(-0.5f64..0.5, 2),
        xa in prop::collection::vec(-3.0f32..3.0, D * 12),
        xb in prop::collection::vec(-3.0f32..3.0, D * 12),
        xi in prop::collection::vec(-3.0f32..3.0, D * 12),
    ) {
        let head = LinearHead::from_parts(D, w, [b[0], b[1]]).unwrap();
        let swapped = head.swapped_columns();
        let (a, base) = (fm("a", D, xa.clone()), fm("b", D, xb));

        let r = behavior::rate_test("p", &head, &a, &base, Label::Face).unwrap();
        let s = behavior::rate_test("p", &swapped, &a, &base, Label::Object).unwrap();
        prop_assert!(same(r.difference.abs(), s.difference.abs()));
        prop_assert!(same(abs_t(&r), abs_t(&s)));

        let up = fm("u", D, xa);
        let inv = fm("u", D, xi);
        let faces = vec![Label::Face; up.rows()];
        let flipped = vec![Label::Object; up.rows()];
        let r = behavior::inversion_test("f", &head, &up, &inv, &faces).unwrap();
        let s = behavior::inversion_test("f", &swapped, &up, &inv, &flipped).unwrap();
        prop_assert!(same(r.difference.abs(), s.difference.abs()));
        prop_assert!(same(abs_t(&r), abs_t(&s)));
    }

    #[test]
    fn corrected_p_bounds(
        w in prop::collection::vec(-1.0f64..1.0, D * 2),
        xs in prop::collection::vec(-3.0f32..3.0, D * 40),
    ) {
        let head = LinearHead::from_parts(D, w, [0.0, 0.0]).unwrap();
        let part = |i: usize, tag: &str| fm(tag, D, xs[i * D * 8..(i + 1) * D * 8].to_vec());
        let (fu, fi) = (part(0, "f"), part(1, "f"));
        let (ou, oi) = (part(2, "o"), part(3, "o"));
        let par = part(4, "p");
        let battery = behavior::run_battery(&BatteryInput {
            head: &head,
            pareidolia: &par,
            objects_upright: &ou,
            objects_inverted: &oi,
            faces_upright: &fu,
            faces_inverted: &fi,
        }).unwrap();
        prop_assert_eq!(battery.family_size, 4);
        for r in battery.reports() {
            prop_assert_eq!(r.difference, r.mean_a - r.mean_b);
            for t in std::iter::once(&r.stat).chain(&r.variants) {
                if let Some(s) = t.result() {
                    prop_assert!(s.p_corrected >= s.p_raw && s.p_corrected <= 1.0);
                    prop_assert_eq!(s.family_size, 4);
                }
            }
        }
    }
}

#[test]
fn outcomes_csv_and_summary_json() {
    use pareidolia_core::provenance::{csv_reader, Provenance};
    let head = LinearHead::from_parts(1, vec![1.0, -1.0], [0.0, 0.0]).unwrap();
    let set = fm("p", 1, vec![1.0, -1.0, 2.0]);
    let out = behavior::classify_set(&head, &set, &[Label::Object; 3]).unwrap();
    let report = behavior::pareidolia_test(&head, &set, &fm("o", 1, vec![-1.0, -2.0, 1.0])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let prov = Provenance::new("f".repeat(32), 3);
    let csv_path = dir.path().join("pareidolia.csv");
    behavior::write_outcomes_csv(&csv_path, &prov, &[("test_pareidolia", &out)]).unwrap();
    let mut r = csv_reader(&csv_path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["set", "record_id", "label", "p_face", "predicted", "correct"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][4], "face");
    assert_eq!(&rows[0][5], "0");

    let json_path = dir.path().join("pareidolia.json");
    behavior::write_summary_json(&json_path, &prov, &report).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(v["provenance"]["seed"], 3);
    assert_eq!(v["counts_a"]["k"], 2);
    assert_eq!(v["stat"]["status"], "defined");
    assert!(v["stat"]["p_corrected"].is_number());
}
