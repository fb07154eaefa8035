use daaf_core::attention::*;
use daaf_core::model::{self, ModelBundle, ModelConfig};
use daaf_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, 64, 32], |_| rng.gen_range(0.0..1.0))
}

/// Component map from one full forward pass per component, reading the
/// gradient of the block-1 node directly.
fn direct_map(bundle: &ModelBundle<f64>, img: &Tensor<f64>, n: usize) -> Tensor<f64> {
    let cfg = &bundle.config;
    let mut tape = Tape::new();
    let vars = bundle.params.bind(&mut tape, model::is_inference_param, true);
    let x = tape.constant(img.clone().reshape(&[1, 3, 64, 32]).unwrap());
    let out = model::backbone_forward(&mut tape, &vars, cfg, x).unwrap();
    let e = model::embed(&mut tape, &vars, cfg, out.features).unwrap();
    let mut seed = vec![0.0; cfg.embed_dim];
    seed[n] = 1.0;
    tape.backward_with_seed(e, seed).unwrap();
    let a = tape.value(out.lowlevel).clone();
    let g = tape.grad(out.lowlevel).unwrap();
    let [_, k, h, w] = a.dims4("test").unwrap();
    Tensor::from_fn(&[h, w], |p| {
        (0..k)
            .map(|c| (g[c * h * w + p] * a.data()[c * h * w + p]).abs())
            .sum::<f64>()
            / k as f64
    })
}

#[test]
fn component_maps_match_direct_computation() {
    let bundle = ModelBundle::<f64>::init(ModelConfig::default(), 11).unwrap();
    let img = image(1);
    let prober = Prober::new(&bundle, &img).unwrap();
    for n in [0, 7, 31] {
        let m = prober.component_map(ProbeLayer::Block1, n).unwrap();
        assert_eq!(m.values.shape(), &[32, 16]);
        let want = direct_map(&bundle, &img, n);
        for (a, b) in m.values.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn holistic_map_is_the_component_mean() {
    let bundle = ModelBundle::<f64>::init(ModelConfig::default(), 12).unwrap();
    let img = image(2);
    let prober = Prober::new(&bundle, &img).unwrap();
    let holistic = prober.holistic_map().unwrap();
    assert_eq!(holistic.target, ProbeTarget::Holistic);
    let mut mean = Tensor::<f64>::zeros(&[32, 16]);
    for n in 0..32 {
        let m = direct_map(&bundle, &img, n);
        assert!(m.data().iter().all(|&v| v >= 0.0));
        for (s, &v) in mean.data_mut().iter_mut().zip(m.data()) {
            *s += v / 32.0;
        }
    }
    let err = holistic
        .values
        .data()
        .iter()
        .zip(mean.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");
    assert!(holistic.values.data().iter().any(|&v| v > 0.0));
}

#[test]
fn pooled_channel_maps_have_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f64>::from_fn(&[1, 5, 4, 2], |_| rng.gen_range(-1.0..1.0));
    let maps = grad_cam_maps(&a, |t, x| t.global_avg_pool(x), &[0, 3]).unwrap();
    for (m, c) in maps.iter().zip([0, 3]) {
        // d mean(A_c) / d A_k = [k == c] / (h w)
        for (p, &v) in m.data().iter().enumerate() {
            let want = a.data()[c * 8 + p].abs() / 8.0 / 5.0;
            assert!((v - want).abs() < 1e-15);
        }
    }
}

#[test]
fn partial_map_averages_its_group() {
    let bundle = ModelBundle::<f64>::init(ModelConfig::default(), 13).unwrap();
    let img = image(4);
    let prober = Prober::new(&bundle, &img).unwrap();
    let part = prober.partial_map(2).unwrap();
    let maps = prober.pooled_channel_maps(&(16..24).collect::<Vec<_>>()).unwrap();
    assert_eq!(part.values, mean_map(&maps).unwrap());
    assert!(part.values.data().iter().all(|&v| v >= 0.0));
    assert!(matches!(prober.partial_map(6), Err(Error::Config(_))));
}

#[test]
fn zero_gradient_probe_gives_zero_map() {
    let mut bundle = ModelBundle::<f64>::init(ModelConfig::default(), 14).unwrap();
    bundle.params.get_mut("embed.fc2.w").unwrap().data_mut().fill(0.0);
    bundle.params.get_mut("embed.fc2.b").unwrap().data_mut().fill(0.5);
    let img = image(5);
    let prober = Prober::new(&bundle, &img).unwrap();
    for layer in [ProbeLayer::Block1, ProbeLayer::Block4] {
        let m = prober.component_map(layer, 3).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0), "{layer:?}");
    }
    let a = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0);
    let maps = grad_cam_maps(&a, |t, _| Ok(t.constant(Tensor::full(&[1, 3], 1.0))), &[1]).unwrap();
    assert!(maps[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn probe_arguments_are_validated() {
    let bundle = ModelBundle::<f64>::init(ModelConfig::default(), 0).unwrap();
    let img = image(6);
    let prober = Prober::new(&bundle, &img).unwrap();
    assert!(matches!(
        prober.component_map(ProbeLayer::Block4, 32),
        Err(Error::Config(_))
    ));
    assert_eq!(ProbeLayer::parse("block4").unwrap(), ProbeLayer::Block4);
    assert!(ProbeLayer::parse("block2").is_err());
    let two = Tensor::<f64>::zeros(&[2, 3, 64, 32]);
    let p = Prober::new(&bundle, &two).unwrap();
    assert!(p.activation(ProbeLayer::Block1).is_ok());
    assert!(p.component_map(ProbeLayer::Block1, 0).is_err());
}

#[test]
fn mass_inside_counts_masked_pixels() {
    let map = Tensor::new(&[2, 2], vec![1.0f64, 3.0, 0.0, 0.0]).unwrap();
    // 4x4 mask with only the top-right quadrant set.
    let mut mask = vec![0.0f32; 16];
    for v in 0..2 {
        for u in 2..4 {
            mask[v * 4 + u] = 1.0;
        }
    }
    assert!((mass_inside(&map, &mask, 4, 4).unwrap() - 0.75).abs() < 1e-12);
    assert!(mass_inside(&map, &mask, 3, 4).is_err());
}

#[test]
fn maps_are_linear_in_the_probed_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::<f64>::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
    let head = |c: f64| {
        let w = w.clone();
        move |t: &mut Tape<f64>, x| {
            let p = t.global_avg_pool(x)?;
            let sq = t.mul(p, p)?;
            let wv = t.constant(w.clone());
            let y = t.dense(sq, wv, None)?;
            Ok(t.scale(y, c))
        }
    };
    let one = grad_cam_maps(&a, head(1.0), &[0, 1]).unwrap();
    let three = grad_cam_maps(&a, head(3.0), &[0, 1]).unwrap();
    for (x, y) in one.iter().zip(&three) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            assert!((3.0 * u - v).abs() < 1e-14);
        }
    }
}

#[test]
fn equal_groups_average_to_the_all_channel_map() {
    let cfg = ModelConfig {
        block_channels: [24, 36, 48],
        ..ModelConfig::default()
    };
    let bundle = ModelBundle::<f64>::init(cfg, 15).unwrap();
    let img = image(9);
    let prober = Prober::new(&bundle, &img).unwrap();
    let groups: Vec<_> = (0..6).map(|g| prober.partial_map(g).unwrap().values).collect();
    let all = mean_map(&prober.pooled_channel_maps(&(0..48).collect::<Vec<_>>()).unwrap()).unwrap();
    let avg = mean_map(&groups).unwrap();
    let dot: f64 = avg.data().iter().zip(all.data()).map(|(a, b)| a * b).sum();
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(dot / (norm(&avg) * norm(&all)) > 0.99);
}

#[test]
fn silenced_group_has_zero_map() {
    let mut bundle = ModelBundle::<f64>::init(ModelConfig::default(), 16).unwrap();
    let w = bundle.params.get_mut("backbone.block4.conv2.w").unwrap();
    let per = 50 * 9;
    w.data_mut()[16 * per..24 * per].fill(0.0);
    bundle.params.get_mut("backbone.block4.conv2.b").unwrap().data_mut()[16..24].fill(0.0);
    let img = image(10);
    let prober = Prober::new(&bundle, &img).unwrap();
    assert!(prober.partial_map(2).unwrap().values.data().iter().all(|&v| v == 0.0));
    assert!(prober.partial_map(1).unwrap().values.data().iter().any(|&v| v > 0.0));
}
