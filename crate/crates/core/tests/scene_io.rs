use crowd_hat::scene::load_scenes_with_report;
use crowd_hat::{iou, load_scenes, save_scenes, Detection, Point, SceneRecord};
use proptest::prelude::*;

fn det() -> impl Strategy<Value = Detection> {
    (
        0.0..640.0f64,
        0.0..480.0f64,
        0.1..80.0f64,
        0.1..80.0f64,
        -20.0..20.0f64,
    )
        .prop_map(|(cx, cy, w, h, s)| Detection::new(cx, cy, w, h, s))
}

fn scene() -> impl Strategy<Value = SceneRecord> {
    (
        "[a-z0-9_-]{1,12}",
        prop::collection::vec((0.0..640.0f64, 0.0..480.0f64), 0..30),
        prop::collection::vec(det(), 0..30),
        prop::option::of(prop::collection::vec(det(), 0..30)),
    )
        .prop_map(|(id, pts, boxes, proposals)| SceneRecord {
            id,
            width: 640,
            height: 480,
            points: pts.into_iter().map(|(x, y)| Point::new(x, y)).collect(),
            boxes,
            proposals,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn save_then_load_is_identity(scenes in prop::collection::vec(scene(), 100)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        save_scenes(&scenes, &p).unwrap();
        prop_assert_eq!(load_scenes(&p).unwrap(), scenes);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in det(), b in det()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }
}

#[test]
fn iou_examples() {
    let a = Detection::new(5.0, 5.0, 10.0, 10.0, 0.0);
    let b = Detection::new(10.0, 5.0, 10.0, 10.0, 0.0);
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    let far = Detection::new(105.0, 5.0, 10.0, 10.0, 0.0);
    assert_eq!(iou(&a, &far), 0.0);
}

#[test]
fn empty_and_trivial_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    assert!(load_scenes(&p).unwrap().is_empty());

    std::fs::write(
        &p,
        r#"{"id":"a","width":10,"height":10,"points":[],"boxes":[],"proposals":null}"#,
    )
    .unwrap();
    let s = load_scenes(&p).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].count(), 0);
}

#[test]
fn wire_format_is_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.jsonl");
    let mut s = SceneRecord::new("x", 100, 50);
    s.points.push(Point::new(1.5, 2.0));
    s.boxes.push(Detection::new(3.0, 4.0, 5.0, 6.0, -0.5));
    save_scenes(&[s], &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["points"], serde_json::json!([[1.5, 2.0]]));
    assert_eq!(v["boxes"], serde_json::json!([[3.0, 4.0, 5.0, 6.0, -0.5]]));
}

#[test]
fn bad_line_is_reported_by_number() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    std::fs::write(
        &p,
        "{\"id\":\"a\",\"width\":10,\"height\":10}\n{\"id\":\"b\",\"width\":10\n",
    )
    .unwrap();
    let err = load_scenes(&p).unwrap_err().to_string();
    assert!(err.contains("bad.jsonl:2:"), "{err}");
}

#[test]
fn out_of_frame_coordinates_are_clamped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    std::fs::write(
        &p,
        r#"{"id":"a","width":10,"height":10,"points":[[-1,5],[3,12]],"boxes":[[11,5,2,2,0]]}"#,
    )
    .unwrap();
    let r = load_scenes_with_report(&p).unwrap();
    assert_eq!(r.clamped, 3);
    let s = &r.scenes[0];
    assert_eq!(s.points[0], Point::new(0.0, 5.0));
    assert_eq!(s.points[1], Point::new(3.0, 10.0));
    assert_eq!(s.boxes[0].cx, 10.0);
}
