use crowd_hat::compress::{
    compress_1d_area, compress_1d_conf, compress_2d_area, compress_2d_conf, compress_scene,
    dump_features, load_features, read_dump, save_features, CompressedFeatures, CompressionConfig,
};
use crowd_hat::{Detection, DetectorOutput};
use proptest::prelude::*;

fn output(boxes: Vec<Detection>, proposals: Option<Vec<Detection>>) -> DetectorOutput {
    DetectorOutput {
        id: "t".into(),
        width: 100,
        height: 100,
        boxes,
        proposals,
    }
}

#[test]
fn spec_examples() {
    let a = Detection::new(25.0, 25.0, 10.0, 20.0, 0.0);
    let b = Detection::new(75.0, 25.0, 20.0, 20.0, 2.0);
    let m = compress_2d_area(&[a, b], 100.0, 100.0, 2);
    assert!((m.at(0, 0) - 0.02).abs() < 1e-15);
    assert!((m.at(1, 0) - 0.04).abs() < 1e-15);
    assert_eq!(m.at(0, 1), 0.0);
    assert_eq!(m.at(1, 1), 0.0);

    assert_eq!(compress_2d_conf(&[a], 100.0, 100.0, 2).at(0, 0), 0.5);
    let c = compress_2d_conf(&[b], 100.0, 100.0, 2);
    assert!((c.at(1, 0) - 0.880797).abs() < 1e-6);

    assert_eq!(compress_1d_conf(&[a], 4, 1.0), vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(
        compress_1d_area(&[a], 100.0, 100.0, 4, 25.0),
        vec![0.0, 1.0, 0.0, 0.0]
    );

    assert!(compress_2d_area(&[], 100.0, 100.0, 3)
        .as_slice()
        .iter()
        .all(|v| *v == 0.0));
    assert_eq!(compress_1d_conf(&[], 5, 1.0), vec![0.0; 5]);
}

#[test]
fn far_edge_goes_to_last_cell() {
    let d = Detection::new(100.0, 100.0, 4.0, 4.0, 0.0);
    let m = compress_2d_area(&[d], 100.0, 100.0, 4);
    assert!(m.at(3, 3) > 0.0);
    // very confident box: sigmoid rounds to 1 and must still land in range
    let hot = Detection::new(1.0, 1.0, 4.0, 4.0, 60.0);
    assert_eq!(compress_1d_conf(&[hot], 8, 1.0)[7], 1.0);
}

#[test]
fn channel_count_follows_detector_kind() {
    let one = CompressionConfig {
        two_stage: false,
        ..CompressionConfig::default()
    };
    let f = compress_scene(&output(vec![], None), &one).unwrap();
    assert_eq!(f.channels, 2);
    assert_eq!(f.channel_names(), ["box_area", "box_conf"]);
    assert!(f.t2d.iter().chain(&f.t1d).all(|v| *v == 0.0));
    assert_eq!(f.t2d.len(), 2 * 64 * 64);

    let two = CompressionConfig::default();
    assert!(compress_scene(&output(vec![], None), &two).is_err());
    assert_eq!(
        compress_scene(&output(vec![], Some(vec![])), &two)
            .unwrap()
            .channels,
        4
    );
}

#[test]
fn scaling_coefficients_below_one_are_rejected() {
    let cfg = CompressionConfig {
        alpha_box_area: 0.5,
        ..CompressionConfig::default()
    };
    assert!(compress_scene(&output(vec![], Some(vec![])), &cfg).is_err());
}

fn det() -> impl Strategy<Value = Detection> {
    (
        0.0..=100.0f64,
        0.0..=100.0f64,
        0.5..30.0f64,
        0.5..30.0f64,
        -8.0..8.0f64,
    )
        .prop_map(|(cx, cy, w, h, s)| Detection::new(cx, cy, w, h, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channels_equal_standalone_ops(
        boxes in prop::collection::vec(det(), 0..40),
        proposals in prop::collection::vec(det(), 0..40),
    ) {
        let cfg = CompressionConfig { grid_size: 8, hist_len: 16, ..CompressionConfig::default() };
        let f = compress_scene(&output(boxes.clone(), Some(proposals.clone())), &cfg).unwrap();
        for (c, dets, aa, ac) in [
            (0, &boxes, cfg.alpha_box_area, cfg.alpha_box_conf),
            (2, &proposals, cfg.alpha_proposal_area, cfg.alpha_proposal_conf),
        ] {
            let area = compress_2d_area(dets, 100.0, 100.0, 8);
            let conf = compress_2d_conf(dets, 100.0, 100.0, 8);
            prop_assert_eq!(f.channel_2d(c), area.as_slice());
            prop_assert_eq!(f.channel_2d(c + 1), conf.as_slice());
            prop_assert_eq!(f.channel_1d(c), &compress_1d_area(dets, 100.0, 100.0, 16, aa)[..]);
            prop_assert_eq!(f.channel_1d(c + 1), &compress_1d_conf(dets, 16, ac)[..]);
        }
        let conf_total: f64 = boxes.iter().map(|d| d.confidence()).sum();
        prop_assert!((f.channel_2d(1).iter().sum::<f64>() - conf_total).abs() < 1e-9);
        prop_assert!(f.t2d.iter().chain(&f.t1d).all(|v| *v >= 0.0));
    }

    #[test]
    fn shuffling_detections_changes_nothing(
        boxes in prop::collection::vec(det(), 0..40),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let cfg = CompressionConfig { grid_size: 4, hist_len: 8, two_stage: false, ..CompressionConfig::default() };
        let a = compress_scene(&output(boxes.clone(), None), &cfg).unwrap();
        let mut shuffled = boxes;
        shuffled.shuffle(&mut crowd_hat::rng::stream(seed, &[]));
        let b = compress_scene(&output(shuffled, None), &cfg).unwrap();
        // sums in a different order may differ in the last bits
        for (x, y) in a.t2d.iter().zip(&b.t2d) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(a.t1d, b.t1d);
    }

    #[test]
    fn histogram_mass_is_detection_count(boxes in prop::collection::vec(det(), 0..60), len in 1usize..64) {
        let n = boxes.len() as f64;
        prop_assert_eq!(compress_1d_conf(&boxes, len, 1.7).iter().sum::<f64>(), n);
        prop_assert_eq!(compress_1d_area(&boxes, 100.0, 100.0, len, 200.0).iter().sum::<f64>(), n);
    }
}

fn sample_features() -> CompressedFeatures {
    let cfg = CompressionConfig {
        grid_size: 4,
        hist_len: 6,
        ..CompressionConfig::default()
    };
    let boxes = vec![
        Detection::new(10.0, 80.0, 7.0, 9.0, 1.3),
        Detection::new(99.0, 3.0, 2.5, 4.0, -0.2),
    ];
    compress_scene(&output(boxes.clone(), Some(boxes)), &cfg).unwrap()
}

#[test]
fn dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = sample_features();
    dump_features(&f, dir.path()).unwrap();
    assert_eq!(read_dump(dir.path(), 4).unwrap(), f);
    let csvs = std::fs::read_dir(dir.path()).unwrap().count();
    assert!(csvs >= 4);

    let zero = CompressedFeatures::zeros(2, 3, 3);
    let zdir = tempfile::tempdir().unwrap();
    dump_features(&zero, zdir.path()).unwrap();
    assert_eq!(read_dump(zdir.path(), 2).unwrap(), zero);
}

#[test]
fn binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.bin");
    let f = sample_features();
    save_features(&f, &p).unwrap();
    assert_eq!(load_features(&p).unwrap(), f);
}
