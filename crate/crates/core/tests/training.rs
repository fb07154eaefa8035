use std::collections::BTreeMap;

use daaf_core::model::{is_hab_param, is_inference_param, is_pab_param};
use daaf_core::synth::{plan_dataset, render_entry, DatasetConfig, Split};
use daaf_core::training::*;
use daaf_core::{Error, Tensor};

fn labels(ids: u32, per_id: usize) -> Vec<u32> {
    (0..ids).flat_map(|i| std::iter::repeat_n(i, per_id)).collect()
}

#[test]
fn pk_batches_follow_the_contract() {
    let labels = labels(12, 8);
    let mut s = PkSampler::new(&labels, 4, 4, 3).unwrap();
    assert_eq!(s.batches_per_epoch(), 12 * 8 / 16);
    let mut seen = vec![0usize; labels.len()];
    for _ in 0..s.batches_per_epoch() {
        let b = s.next_batch();
        assert_eq!(b.len(), 16);
        let mut ids = Vec::new();
        for chunk in b.chunks(4) {
            assert!(chunk.iter().all(|&i| labels[i] == labels[chunk[0]]));
            ids.push(labels[chunk[0]]);
        }
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        for i in b {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1), "one epoch visits every image once");
    assert_eq!(s.state(), (0, 6));
    s.next_batch();
    assert_eq!(s.state(), (1, 1));
}

#[test]
fn uneven_identities_are_topped_up() {
    let mut labels = labels(5, 6);
    labels.extend([9, 9]);
    let mut s = PkSampler::new(&labels, 2, 4, 0).unwrap();
    for _ in 0..20 {
        let b = s.next_batch();
        for chunk in b.chunks(4) {
            let mut c = chunk.to_vec();
            c.sort_unstable();
            c.dedup();
            assert_eq!(c.len(), 4, "no repeated image inside a chunk");
            assert!(labels[chunk[0]] != 9, "identities with fewer than K images are skipped");
        }
    }
}

#[test]
fn sampler_is_seeded_and_restorable() {
    let labels = labels(10, 6);
    let draw = |seed| {
        let mut s = PkSampler::new(&labels, 3, 2, seed).unwrap();
        (0..15).map(|_| s.next_batch()).collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));

    let mut a = PkSampler::new(&labels, 3, 2, 5).unwrap();
    for _ in 0..13 {
        a.next_batch();
    }
    let (epoch, cursor) = a.state();
    let mut b = PkSampler::new(&labels, 3, 2, 5).unwrap();
    b.restore(epoch, cursor);
    for _ in 0..10 {
        assert_eq!(a.next_batch(), b.next_batch());
    }
}

#[test]
fn too_few_identities_is_a_sampling_error() {
    assert!(matches!(
        PkSampler::new(&labels(3, 4), 4, 4, 0),
        Err(Error::Sampling(_))
    ));
    assert!(matches!(
        PkSampler::new(&labels(8, 3), 2, 4, 0),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = daaf_core::model::ParamStore::<f64>::new();
    store.insert("w", Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
    let mut adam = Adam::new(0.01);
    let g = [2.0, -0.5, 0.0];
    adam.update(&mut store, [("w", &g[..])]).unwrap();
    let w = store.get("w").unwrap().data();
    // With bias correction, m_hat = g and v_hat = g^2 after one step.
    assert!((w[0] - (1.0 - 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    assert!((w[1] - (1.0 + 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    assert_eq!(w[2], 1.0);
    assert!(matches!(
        adam.update(&mut store, [("nope", &g[..])]),
        Err(Error::Config(_))
    ));
}

fn small_train_set() -> TrainSet {
    let cfg = DatasetConfig {
        num_ids: 8,
        train_ids: 4,
        images_per_id: 6,
        cameras: 2,
        ..DatasetConfig::default()
    };
    let plan = plan_dataset(&cfg).unwrap();
    let samples: Vec<_> = plan
        .split(Split::Train)
        .map(|e| render_entry(&cfg, e).unwrap())
        .collect();
    TrainSet::from_samples(&samples)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        p: 2,
        k: 2,
        decoder_channels: 4,
        ..TrainConfig::default()
    }
}

fn snapshot(t: &Trainer<f32>) -> BTreeMap<String, Tensor<f32>> {
    t.bundle
        .params
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect()
}

#[test]
fn disabled_branches_are_untouched() {
    let data = small_train_set();
    for (hab, pab) in [(false, false), (true, false), (false, true)] {
        let mut t = Trainer::<f32>::new(
            TrainConfig {
                hab,
                pab,
                ..small_config()
            },
            &data,
        )
        .unwrap();
        let before = snapshot(&t);
        for _ in 0..2 {
            let l = t.train_step(&data).unwrap();
            assert_eq!(l.mask == 0.0, !hab);
            assert_eq!(l.keypoint == 0.0, !pab);
        }
        for (name, v) in snapshot(&t) {
            let moved = v != before[&name];
            let expected = if is_hab_param(&name) {
                hab
            } else if is_pab_param(&name) {
                pab
            } else {
                assert!(is_inference_param(&name));
                true
            };
            assert_eq!(moved, expected, "{name} with hab={hab} pab={pab}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = small_train_set();
    let run = || {
        let mut t = Trainer::<f32>::new(small_config(), &data).unwrap();
        let losses: Vec<_> = (0..3).map(|_| t.train_step(&data).unwrap()).collect();
        (losses, snapshot(&t))
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = small_train_set();
    let cfg = small_config();
    let mut straight = Trainer::<f32>::new(cfg.clone(), &data).unwrap();
    let mut first = Trainer::<f32>::new(cfg.clone(), &data).unwrap();
    for _ in 0..2 {
        straight.train_step(&data).unwrap();
        first.train_step(&data).unwrap();
    }
    let bytes = first.checkpoint().encode();
    let ck = daaf_core::model::checkpoint::Checkpoint::decode(&bytes).unwrap();
    let mut resumed = Trainer::<f32>::resume(cfg.clone(), &data, &ck).unwrap();
    assert_eq!(resumed.step_count(), 2);
    for _ in 0..2 {
        assert_eq!(straight.train_step(&data).unwrap(), resumed.train_step(&data).unwrap());
    }
    assert_eq!(snapshot(&straight), snapshot(&resumed));

    let other = TrainConfig {
        grouping: daaf_core::model::GroupingKind::Four,
        ..cfg
    };
    assert!(matches!(
        Trainer::<f32>::resume(other, &data, &ck),
        Err(Error::Config(_))
    ));
}

#[test]
fn invalid_training_configs_are_rejected() {
    let data = small_train_set();
    for cfg in [
        TrainConfig { p: 1, ..small_config() },
        TrainConfig {
            lr: 0.0,
            ..small_config()
        },
        TrainConfig {
            sigma: -1.0,
            ..small_config()
        },
        TrainConfig {
            log_interval: 0,
            ..small_config()
        },
    ] {
        assert!(matches!(Trainer::<f32>::new(cfg, &data), Err(Error::Config(_))));
    }
    assert!(matches!(
        Trainer::<f32>::new(TrainConfig { p: 8, ..small_config() }, &data),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn part_image_targets_tile_the_image() {
    let img = Tensor::<f64>::from_fn(&[3, 8, 2], |i| i as f64 + 1.0);
    let parts = part_image_targets(&img, 3).unwrap();
    let mut sum = Tensor::<f64>::zeros(&[3, 8, 2]);
    for p in &parts {
        for (s, &v) in sum.data_mut().iter_mut().zip(p.data()) {
            assert!(*s == 0.0 || v == 0.0, "stripes overlap");
            *s += v;
        }
    }
    assert_eq!(sum, img);
}

#[test]
fn first_stripe_holds_the_head() {
    use daaf_core::synth::*;
    let spec = IdentitySpec::generate(0, 0);
    let s = render_person(
        &spec,
        &Pose::neutral(),
        &CameraStyle::identity(0),
        &BackgroundStyle::plain(0.5),
        0,
    )
    .unwrap();
    let rows = stripe_rows(IMAGE_H, 6, 0);
    assert!(rows
        .clone()
        .any(|v| (0..IMAGE_W as isize).any(|u| s.mask_at(u, v as isize))));
    let widths: Vec<usize> = (0..6).map(|p| stripe_rows(IMAGE_H, 6, p).len()).collect();
    assert!(widths.iter().max().unwrap() - widths.iter().min().unwrap() <= 1);
}
