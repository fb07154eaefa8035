use std::collections::BTreeSet;

use daaf_core::model::grouping::NUM_KEYPOINTS;
use daaf_core::synth::*;
use daaf_core::Error;

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        num_ids: 8,
        train_ids: 4,
        images_per_id: 6,
        cameras: 3,
        seed,
        ..DatasetConfig::default()
    }
}

fn samples(cfg: &DatasetConfig) -> Vec<Sample> {
    let plan = plan_dataset(cfg).unwrap();
    plan.entries.iter().map(|e| render_entry(cfg, e).unwrap()).collect()
}

#[test]
fn rendering_is_deterministic() {
    let spec = IdentitySpec::generate(11, 3);
    assert_eq!(spec, IdentitySpec::generate(11, 3));
    let mut rng = rng_for(1, 2, 3);
    let bg = BackgroundStyle::random(&mut rng, 0.8);
    let cam = CameraStyle::for_camera(11, 1);
    let a = render_person(&spec, &Pose::neutral(), &cam, &bg, 42).unwrap();
    let b = render_person(&spec, &Pose::neutral(), &cam, &bg, 42).unwrap();
    assert_eq!(a, b);
    let cfg = small_config(5);
    let plan = plan_dataset(&cfg).unwrap();
    assert_eq!(
        render_entry(&cfg, &plan.entries[7]).unwrap(),
        render_entry(&cfg, &plan.entries[7]).unwrap()
    );
}

#[test]
fn masks_and_keypoints_are_consistent() {
    let cfg = DatasetConfig {
        num_ids: 12,
        train_ids: 6,
        images_per_id: 10,
        ..small_config(2)
    };
    let (mut visible, mut total) = (0, 0);
    for s in samples(&cfg) {
        let on = s.mask.data().iter().filter(|&&m| m == 1.0).count();
        assert!(on > 0 && on < IMAGE_H * IMAGE_W);
        assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for kp in &s.keypoints {
            total += 1;
            if kp.visible {
                visible += 1;
                let (u, v) = kp.pixel();
                assert!(s.mask_at(u, v), "{kp:?}");
            }
        }
    }
    // Only wide arm poses can push a wrist past the frame edge.
    assert!(visible * 100 >= total * 99, "{visible}/{total}");
}

#[test]
fn identities_are_separable_on_raw_pixels() {
    let all = samples(&DatasetConfig {
        num_ids: 10,
        train_ids: 5,
        images_per_id: 6,
        ..small_config(9)
    });
    let dist = |a: &Sample, b: &Sample| -> f64 {
        a.image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(x, y)| f64::from(x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            let slot = if a.identity == b.identity {
                &mut intra
            } else {
                &mut inter
            };
            slot.0 += dist(a, b);
            slot.1 += 1;
        }
    }
    assert!(inter.0 / inter.1 as f64 > intra.0 / intra.1 as f64);
}

#[test]
fn thin_strip_keeps_most_keypoints() {
    let all = samples(&small_config(3));
    for s in &all {
        for side in Side::ALL {
            let o = occlude(s, 1e-9, side, Fill::Solid([0.0; 3])).unwrap();
            assert!(o.visible_count() >= NUM_KEYPOINTS - 1, "{side:?}");
        }
    }
}

#[test]
fn bottom_half_hides_legs() {
    for s in samples(&small_config(4)) {
        let o = occlude(&s, 0.5, Side::Bottom, Fill::Noise(1)).unwrap();
        for k in [13, 14, 15, 16] {
            assert!(!o.keypoints[k].visible);
        }
        assert!(o.keypoints[0].visible);
        assert_eq!((o.identity, o.camera), (s.identity, s.camera));
        assert!(o.mask.data()[IMAGE_H / 2 * IMAGE_W..].iter().all(|&m| m == 0.0));
        assert_eq!(o.image.data()[..IMAGE_W], s.image.data()[..IMAGE_W]);
    }
}

#[test]
fn complementary_halves_hide_everything() {
    for s in samples(&small_config(6)).iter().take(12) {
        for (a, b) in [(Side::Top, Side::Bottom), (Side::Left, Side::Right)] {
            let o = occlude(
                &occlude(s, 0.5, a, Fill::Solid([0.5; 3])).unwrap(),
                0.5,
                b,
                Fill::Noise(3),
            )
            .unwrap();
            assert_eq!(o.visible_count(), 0);
            assert!(o.mask.data().iter().all(|&m| m == 0.0));
        }
    }
}

#[test]
fn occlusion_rejects_bad_fraction() {
    let s = &samples(&small_config(1))[0];
    assert!(matches!(
        occlude(s, 0.0, Side::Top, Fill::Noise(0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        occlude(s, 1.0, Side::Top, Fill::Noise(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn split_follows_protocol() {
    let cfg = DatasetConfig::default();
    let plan = plan_dataset(&cfg).unwrap();
    assert_eq!(plan.entries.len(), 64 * 20);
    let ids = |split: Split| plan.split(split).map(|e| e.identity).collect::<BTreeSet<_>>();
    let train = ids(Split::Train);
    let query = ids(Split::Query);
    let gallery = ids(Split::Gallery);
    assert_eq!(train.len(), 32);
    assert!(train.is_disjoint(&query) && train.is_disjoint(&gallery));
    assert_eq!(query, gallery);
    assert_eq!(query.len(), 32);
    for q in plan.split(Split::Query) {
        assert!(plan
            .split(Split::Gallery)
            .any(|g| g.identity == q.identity && g.camera != q.camera));
    }
    for id in &query {
        let cams: BTreeSet<_> = plan
            .split(Split::Query)
            .filter(|e| e.identity == *id)
            .map(|e| e.camera)
            .collect();
        assert_eq!(cams.len(), 2);
    }
    assert_eq!(plan, plan_dataset(&cfg).unwrap());
}

#[test]
fn invalid_splits_are_config_errors() {
    let base = DatasetConfig::default();
    for cfg in [
        DatasetConfig {
            num_ids: 1,
            train_ids: 0,
            ..base.clone()
        },
        DatasetConfig {
            train_ids: 64,
            ..base.clone()
        },
        DatasetConfig {
            images_per_id: 3,
            ..base.clone()
        },
        DatasetConfig {
            cameras: 1,
            ..base.clone()
        },
    ] {
        assert!(matches!(plan_dataset(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn occluded_queries_keep_labels() {
    let cfg = DatasetConfig {
        query_occlusion: Some(QueryOcclusion {
            fraction: 0.5,
            side: Side::Bottom,
        }),
        ..small_config(8)
    };
    let clean = small_config(8);
    let plan = plan_dataset(&cfg).unwrap();
    for e in plan.entries.iter() {
        let a = render_entry(&cfg, e).unwrap();
        let b = render_entry(&clean, e).unwrap();
        assert_eq!((a.identity, a.camera), (b.identity, b.camera));
        match e.split {
            Split::Query => assert!(a.visible_count() < b.visible_count()),
            _ => assert_eq!(a, b),
        }
    }
}
