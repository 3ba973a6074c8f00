use proptest::prelude::*;

use isd_core::augment::{flip_image, half_rotation, mix_images, FlipMap};
use isd_core::detector::{ArchConfig, ConvDetector, DetectorModel, PredictionGrid};
use isd_core::eval::{average_precision, iou, match_class, nms, Interpolation};
use isd_core::ssl_losses::{js_divergence, kl_divergence, weight_schedule};
use isd_core::{AnnotatedObject, Annotation, BBox, Detection, Image};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.02..0.5f64, 0.02..0.5f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn detection() -> impl Strategy<Value = Detection> {
    (1..=3usize, 0.0..1.0f64, bbox()).prop_map(|(class_id, score, bbox)| Detection { class_id, score, bbox })
}

fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn nms_output_is_sorted_separated_and_stable(dets in prop::collection::vec(detection(), 0..40), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for w in kept.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept.clone());
        // The best detection of every class survives.
        for c in 1..=3 {
            let best = dets.iter().filter(|d| d.class_id == c).map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                prop_assert!(kept.iter().any(|d| d.class_id == c && d.score == best));
            }
        }
    }

    #[test]
    fn ap_is_bounded_and_order_free(
        gts in prop::collection::vec(bbox(), 1..5),
        extra in prop::collection::vec(bbox(), 0..6),
        rotate in 0usize..10,
    ) {
        let ann = Annotation::new(gts.iter().map(|&b| AnnotatedObject { class_id: 1, bbox: b, difficult: false }).collect());
        let mut dets: Vec<Detection> = gts.iter().chain(&extra).enumerate()
            .map(|(i, &bbox)| Detection { class_id: 1, score: 1.0 / (i + 2) as f64, bbox })
            .collect();
        let m = match_class(&[dets.clone()], std::slice::from_ref(&ann), 1, 0.5).unwrap();
        let ap = average_precision(&m, Interpolation::AllPoint);
        prop_assert!((0.0..=1.0).contains(&ap));
        let n = dets.len();
        dets.rotate_left(rotate % n);
        let m2 = match_class(&[dets], &[ann], 1, 0.5).unwrap();
        prop_assert_eq!(average_precision(&m2, Interpolation::AllPoint), ap);
        let eleven = average_precision(&m, Interpolation::ElevenPoint);
        prop_assert!((0.0..=1.0).contains(&eleven));
    }

    #[test]
    fn exact_detections_have_positive_ap(gts in prop::collection::vec(bbox(), 1..6)) {
        let ann = Annotation::new(gts.iter().map(|&b| AnnotatedObject { class_id: 2, bbox: b, difficult: false }).collect());
        let dets: Vec<Detection> = gts.iter().map(|&bbox| Detection { class_id: 2, score: 0.9, bbox }).collect();
        let m = match_class(&[dets], &[ann], 2, 0.5).unwrap();
        // Overlapping GT can swap partners, but no GT is claimed twice.
        prop_assert!(m.hits.iter().filter(|&&h| h).count() <= gts.len());
        let ap = average_precision(&m, Interpolation::AllPoint);
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }

    #[test]
    fn divergences_behave(p in dist(4), q in dist(4)) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        let js = js_divergence(&p, &q).unwrap();
        prop_assert!((js - js_divergence(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(js <= std::f64::consts::LN_2 + 1e-12);
        // JS is at most half the symmetrized KL.
        let bound = 0.25 * (kl_divergence(&p, &q).unwrap() + kl_divergence(&q, &p).unwrap());
        prop_assert!(js <= bound + 1e-12);
    }

    #[test]
    fn schedule_stays_in_unit_interval(total in 1usize..5000, up_frac in 0.0..0.5f64, down_frac in 0.0..0.5f64, t_frac in 0.0..=1.0f64) {
        let up = (total as f64 * up_frac) as usize;
        let down = (total as f64 * down_frac) as usize;
        let t = ((total as f64 * t_frac) as usize).max(1);
        let w = weight_schedule(t, up, total, down).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn mixing_with_complement_is_symmetric(seed in 0u64..1000, lam in 0.0..=1.0f64) {
        let a = Image::filled(3, 4, 4, (seed % 7) as f64 / 7.0);
        let b = flip_image(&Image::from_vec(3, 4, 4, (0..48).map(|i| ((i as u64 * seed) % 11) as f64 / 11.0).collect()).unwrap());
        prop_assert_eq!(mix_images(&a, &b, lam).unwrap().data, mix_images(&b, &a, 1.0 - lam).unwrap().data);
        prop_assert_eq!(flip_image(&flip_image(&b)).data, b.data);
    }
}

#[test]
fn flip_correspondence_is_an_involution_matching_mirrored_images() {
    let model = ConvDetector::new(ArchConfig::toy(), 3).unwrap();
    let map = FlipMap::new(model.default_boxes()).unwrap();
    for k in 0..map.len() {
        assert_eq!(map.partner(map.partner(k)), k);
        let (a, b) = (model.default_boxes().get(k), model.default_boxes().get(map.partner(k)));
        assert!((a.cx - (1.0 - b.cx)).abs() < 1e-12 && a.cy == b.cy && a.w == b.w && a.h == b.h);
    }
    let width = 4;
    let cls: Vec<f64> = (0..map.len() * width).map(|i| ((i % 7) + 1) as f64).collect();
    let cls: Vec<f64> = cls
        .chunks(width)
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s).collect::<Vec<_>>()
        })
        .collect();
    let loc = (0..map.len()).map(|k| [k as f64, 0.5, -0.25, 1.0]).collect();
    let g = PredictionGrid::new(width, cls, loc).unwrap();
    let twice = map.apply(&map.apply(&g).unwrap()).unwrap();
    assert_eq!(twice, g);
}

#[test]
fn half_rotation_has_no_fixed_points() {
    for n in 2..40 {
        let p = half_rotation(n);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }
}
