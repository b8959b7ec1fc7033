use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcons::metrics::{
    delta_accuracy, distribution_distance, histogram_divergence, rmse, seg_metrics, to_8bit_scale, write_csv,
    LabelMap, MetricError, MetricReport,
};
use semcons::Tensor;

fn rgb(h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor {
    Tensor::from_fn(&[3, h, w], f)
}

#[test]
fn delta_accuracy_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rgb(4, 4, |_| rng.gen_range(0..256) as f64);
    for delta in [0.5, 5.0, 10.0] {
        assert_eq!(delta_accuracy(&a, &a, delta).unwrap(), 1.0);
    }
    let shifted = a.map(|v| v + 5.0);
    assert_eq!(delta_accuracy(&shifted, &a, 5.0).unwrap(), 0.0);
    assert_eq!(delta_accuracy(&shifted, &a, 10.0).unwrap(), 1.0);

    let gt = Tensor::zeros(&[1, 3, 2, 2]);
    let mut pred = gt.clone();
    // pixel (1, 0), green channel
    pred.data_mut()[4 + 2] = 20.0;
    assert_eq!(delta_accuracy(&pred, &gt, 10.0).unwrap(), 0.75);
}

#[test]
fn rmse_examples() {
    let a = rgb(3, 5, |i| (i % 7) as f64 * 30.0);
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    assert_eq!(rmse(&a.map(|v| v + 12.0), &a).unwrap(), 12.0);
    let (h, w) = (4, 6);
    let checker = Tensor::from_fn(&[3, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        if (y + x) % 2 == 0 { 10.0 } else { 0.0 }
    });
    let v = rmse(&checker, &Tensor::zeros(&[3, h, w])).unwrap();
    assert!((v - 50f64.sqrt()).abs() < 1e-12);
    assert!((v - 7.071).abs() < 1e-3);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Tensor::<f64>::zeros(&[3, 2, 2]);
    let b = Tensor::<f64>::zeros(&[3, 2, 3]);
    assert!(matches!(rmse(&a, &b), Err(MetricError::Shape(..))));
    assert!(matches!(delta_accuracy(&a, &b, 5.0), Err(MetricError::Shape(..))));
}

#[test]
fn eight_bit_scaling() {
    let t = Tensor::from_vec(vec![-1.0, 0.0, 1.0]);
    assert_eq!(to_8bit_scale(&t).data(), &[0.0, 127.5, 255.0]);
}

fn labels(h: usize, w: usize, c: usize, ids: Vec<usize>) -> LabelMap {
    LabelMap::new(h, w, c, ids).unwrap()
}

#[test]
fn seg_metrics_examples() {
    let gt = labels(2, 2, 2, vec![0, 0, 1, 1]);
    let m = seg_metrics(&gt, &gt).unwrap();
    assert_eq!((m.pixel_acc, m.class_acc, m.mean_iou), (1.0, 1.0, 1.0));

    let all_zero = labels(2, 2, 2, vec![0; 4]);
    let m = seg_metrics(&all_zero, &gt).unwrap();
    assert_eq!((m.pixel_acc, m.class_acc, m.mean_iou), (0.5, 0.5, 0.25));

    let swapped = labels(2, 2, 2, vec![1, 1, 0, 0]);
    assert_eq!(seg_metrics(&swapped, &gt).unwrap().mean_iou, 0.0);

    assert!(matches!(
        seg_metrics(&labels(2, 2, 3, vec![0; 4]), &gt),
        Err(MetricError::ClassCount(3, 2))
    ));
    assert!(matches!(
        LabelMap::new(1, 2, 2, vec![0, 2]),
        Err(MetricError::InvalidLabel { index: 1, label: 2, classes: 2 })
    ));
}

#[test]
fn histogram_examples() {
    assert_eq!(distribution_distance(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
    assert_eq!(distribution_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert_eq!(distribution_distance(&[0.5, 0.5], &[0.75, 0.25]).unwrap(), 0.25);
    assert!(matches!(
        distribution_distance(&[0.5, 0.4], &[0.5, 0.5]),
        Err(MetricError::NotDistribution(_))
    ));
    let map = labels(2, 2, 2, vec![0, 0, 0, 1]);
    assert_eq!(histogram_divergence(&map, &[0.5, 0.5]).unwrap(), 0.25);
}

#[test]
fn report_serialization() {
    let mut r = MetricReport::new();
    r.push("pixel_acc", 0.75, 4096).unwrap();
    r.push("rmse", 12.5, 4096).unwrap();
    assert!(r.push("mean_iou", 1.5, 1).is_err());
    assert!(r.push("rmse", f64::NAN, 1).is_err());
    let json = r.to_json().unwrap();
    assert_eq!(MetricReport::from_json(&json).unwrap(), r);

    let mut other = MetricReport::new();
    other.push("pixel_acc", 0.25, 4096).unwrap();
    other.push("rmse", 7.5, 4096).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &[("a.png".into(), r), ("b.png".into(), other)]).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "image,pixel_acc,rmse\na.png,0.75,12.5\nb.png,0.25,7.5\nmean,0.5,10\n"
    );
}

fn label_strategy() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1usize..6, 1usize..6, 2usize..5).prop_flat_map(|(h, w, c)| {
        (
            prop::collection::vec(0..c, h * w),
            prop::collection::vec(0..c, h * w),
        )
            .prop_map(move |(a, b)| (labels(h, w, c, a), labels(h, w, c, b)))
    })
}

proptest! {
    #[test]
    fn delta_accuracy_is_monotone(seed in 0u64..1000, d1 in 0.0f64..50.0, d2 in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rgb(5, 5, |_| rng.gen_range(0..256) as f64);
        let b = rgb(5, 5, |_| rng.gen_range(0..256) as f64);
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        prop_assert!(delta_accuracy(&a, &b, lo).unwrap() <= delta_accuracy(&a, &b, hi).unwrap());
    }

    #[test]
    fn rmse_triangle_bound(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || rgb(4, 3, |_| rng.gen_range(0.0..255.0));
        let (a, b, c) = (img(), img(), img());
        prop_assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-9);
    }

    #[test]
    fn seg_metrics_ignore_class_relabeling((pred, gt) in label_strategy(), shift in 1usize..5) {
        let c = gt.classes();
        let relabel = |m: &LabelMap| labels(m.height(), m.width(), c, m.ids().iter().map(|&i| (i + shift) % c).collect());
        let a = seg_metrics(&pred, &gt).unwrap();
        let b = seg_metrics(&relabel(&pred), &relabel(&gt)).unwrap();
        prop_assert!((a.pixel_acc - b.pixel_acc).abs() < 1e-12);
        prop_assert!((a.class_acc - b.class_acc).abs() < 1e-12);
        prop_assert!((a.mean_iou - b.mean_iou).abs() < 1e-12);
        for v in [a.pixel_acc, a.class_acc, a.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn distribution_distance_is_symmetric_and_bounded((a, b) in label_strategy()) {
        let (fa, fb) = (a.frequencies(), b.frequencies());
        let d = distribution_distance(&fa, &fb).unwrap();
        prop_assert!((d - distribution_distance(&fb, &fa).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }
}
