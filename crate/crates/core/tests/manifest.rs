use proptest::prelude::*;
use synlungs_core::dataset::{read_manifest, write_manifest, Annotation, Manifest, MANIFEST_HEADER};
use synlungs_core::labeler::Label;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 5e-6 * a.abs().max(1e-300)
}

fn annotation() -> impl Strategy<Value = Annotation> {
    (
        0u32..5,
        0u32..4,
        prop::array::uniform3(-300.0f64..300.0),
        0.5f64..40.0,
        0.0f64..=1.0,
        any::<bool>(),
        prop::sample::select(vec![0.5, 0.6, 1.2]),
    )
        .prop_map(|(scan, lesion, center, d, p, malignant, cutoff)| {
            let (bbox_min, bbox_max) = Annotation::cube_bbox(center, d);
            Annotation {
                scan_id: format!("twin{scan:04}_W12"),
                lesion_id: format!("L{lesion:02}"),
                center_mm: center,
                diameter_mm: d,
                bbox_min,
                bbox_max,
                mask_path: format!("masks/twin{scan:04}_W12.mhd"),
                probability: p,
                label: if malignant { Label::Malignant } else { Label::Benign },
                scanner: "W12".into(),
                filter_cutoff: cutoff,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_survive_a_round_trip(rows in prop::collection::vec(annotation(), 0..12)) {
        let mut rows = rows;
        rows.sort_by(|a, b| (&a.scan_id, &a.lesion_id).cmp(&(&b.scan_id, &b.lesion_id)));
        rows.dedup_by(|a, b| a.scan_id == b.scan_id && a.lesion_id == b.lesion_id);
        let m = Manifest { rows, ..Manifest::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        prop_assert_eq!(back.rows.len(), m.rows.len());
        for (a, b) in m.rows.iter().zip(&back.rows) {
            prop_assert_eq!(&a.scan_id, &b.scan_id);
            prop_assert_eq!(&a.lesion_id, &b.lesion_id);
            prop_assert_eq!(&a.mask_path, &b.mask_path);
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.filter_cutoff, b.filter_cutoff);
            for k in 0..3 {
                prop_assert!(close(a.center_mm[k], b.center_mm[k]));
                prop_assert!(close(a.bbox_min[k], b.bbox_min[k]));
                prop_assert!(close(a.bbox_max[k], b.bbox_max[k]));
            }
            prop_assert!(close(a.diameter_mm, b.diameter_mm));
            prop_assert!(close(a.probability, b.probability));
        }
    }
}

#[test]
fn header_is_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.csv");
    write_manifest(&Manifest::default(), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.trim_end(), MANIFEST_HEADER.join(","));
}

#[test]
fn duplicate_rows_are_refused() {
    let a = Annotation {
        scan_id: "s".into(),
        lesion_id: "L00".into(),
        center_mm: [0.0; 3],
        diameter_mm: 5.0,
        bbox_min: [-2.5; 3],
        bbox_max: [2.5; 3],
        mask_path: "masks/s.mhd".into(),
        probability: 0.1,
        label: Label::Benign,
        scanner: "W12".into(),
        filter_cutoff: 0.6,
    };
    let m = Manifest { rows: vec![a.clone(), a], ..Manifest::default() };
    let dir = tempfile::tempdir().unwrap();
    assert!(write_manifest(&m, &dir.path().join("m.csv")).is_err());
}
