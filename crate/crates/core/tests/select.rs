use crowd_hat::geometry::logit;
use crowd_hat::select::{decouple_then_align, round_count};
use crowd_hat::Detection;
use proptest::prelude::*;

fn with_conf(p: f64) -> Detection {
    Detection::new(0.0, 0.0, 1.0, 1.0, logit(p))
}

#[test]
fn examples() {
    let five: Vec<Detection> = [0.6, 0.9, 0.5, 0.8, 0.7]
        .iter()
        .map(|&p| with_conf(p))
        .collect();
    let r = decouple_then_align(&five, 10.0);
    assert_eq!((r.n_c, r.n_final, r.boxes.len()), (5, 5, 5));

    let r = decouple_then_align(&five, 3.0);
    let kept: Vec<f64> = r
        .boxes
        .iter()
        .map(|d| (d.confidence() * 10.0).round() / 10.0)
        .collect();
    assert_eq!(kept, vec![0.9, 0.8, 0.7]);
    assert_eq!(r.n_hat, 3.0);

    assert!(decouple_then_align(&five, 0.0).boxes.is_empty());
}

#[test]
fn rounding_is_half_up() {
    assert_eq!(round_count(2.5), 3);
    assert_eq!(round_count(2.49), 2);
    assert_eq!(round_count(-1.0), 0);
    assert_eq!(round_count(f64::NAN), 0);
}

proptest! {
    #[test]
    fn output_is_a_sorted_prefix(scores in prop::collection::vec(-5.0..5.0f64, 0..40), n_hat in 0.0..60.0f64) {
        let boxes: Vec<Detection> = scores.iter().enumerate().map(|(i, &s)| Detection::new(i as f64, 0.0, 1.0, 1.0, s)).collect();
        let r = decouple_then_align(&boxes, n_hat);
        let want = round_count(n_hat).min(boxes.len());
        prop_assert_eq!(r.n_final, want);
        prop_assert_eq!(r.boxes.len(), want);
        prop_assert_eq!(r.n_c, boxes.len());

        // stable sort by score is the reference ordering
        let mut sorted = boxes.clone();
        sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
        prop_assert_eq!(&r.boxes[..], &sorted[..want]);
    }
}
