use std::path::Path;

use bea_harness::dump::{
    load_detections, read_detections, write_detections, DetectionRecord, ImageRecord,
};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        0.0..1.0f64,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(f64::MIN_POSITIVE),
        Just(1.0 / 3.0),
    ]
}

fn detection() -> impl Strategy<Value = DetectionRecord> {
    (
        prop::array::uniform4(finite()),
        finite(),
        0usize..3,
        prop::collection::vec(finite(), 3),
        finite(),
    )
        .prop_map(
            |([cx, cy, w, h], confidence, class_id, class_probs, u_pred)| DetectionRecord {
                cx,
                cy,
                w,
                h,
                confidence,
                class_id,
                class_probs,
                u_pred,
            },
        )
}

fn image() -> impl Strategy<Value = ImageRecord> {
    (
        "[a-z]{1,6}-[0-9]{1,5}",
        finite(),
        prop::collection::vec(detection(), 0..4),
    )
        .prop_map(|(image_id, u_ood, detections)| ImageRecord {
            image_id,
            u_ood,
            detections,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn thousand_image_dump_round_trips(records in prop::collection::vec(image(), 1000)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut buf = Vec::new();
        write_detections(&mut buf, &records).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let loaded = load_detections(&path).unwrap();
        prop_assert_eq!(&loaded, &records);
        // bit-exact, not merely equal (distinguishes -0.0)
        for (a, b) in loaded.iter().zip(&records) {
            prop_assert_eq!(a.u_ood.to_bits(), b.u_ood.to_bits());
        }
    }

    #[test]
    fn small_dumps_round_trip(records in prop::collection::vec(image(), 0..20)) {
        let mut buf = Vec::new();
        write_detections(&mut buf, &records).unwrap();
        prop_assert_eq!(read_detections(buf.as_slice(), Path::new("mem")).unwrap(), records);
    }
}
