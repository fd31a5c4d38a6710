use itlsca::nn::{make_model, train, Mode, ModelSpec, Samples, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grads(model: &mut itlsca::nn::Model<f64>) -> Vec<f64> {
    model.params_mut().iter().flat_map(|p| p.grad.clone()).collect()
}

#[test]
fn duplicated_batch_gives_the_same_mean_gradient() {
    let mut spec = ModelSpec::mlp(3);
    spec.dropout_rate = 0.0;
    for spec in [ModelSpec::lr(3), spec] {
        let mut m = make_model::<f64>(&spec, 4).unwrap();
        let x = vec![0.3, -1.0, 2.0, 1.1, 0.2, -0.4, 0.0, 0.9, 0.5];
        let y = [5u8, 17, 5];
        m.loss_and_grad(m.batch(x.clone()).unwrap(), &y);
        let once = grads(&mut m);
        let twice_x: Vec<f64> = x.iter().chain(&x).cloned().collect();
        let twice_y: Vec<u8> = y.iter().chain(&y).cloned().collect();
        let mut m2 = make_model::<f64>(&spec, 4).unwrap();
        m2.loss_and_grad(m2.batch(twice_x).unwrap(), &twice_y);
        for (a, b) in once.iter().zip(grads(&mut m2)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn patience_one_stops_after_first_worse_epoch() {
    let x: Vec<f32> = (0..64).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
    let train_y = vec![0u8; 32];
    let val_y = vec![1u8; 32];
    let mut cfg = TrainConfig::new(3);
    cfg.patience = 1;
    cfg.learning_rate = 0.05;
    // one step per epoch, so no lookahead sync lands in the first epochs
    cfg.batch_size = 32;
    cfg.max_epochs = 50;
    let spec = ModelSpec::lr(2);
    let run = |cfg: &TrainConfig| {
        let mut m = make_model::<f32>(&spec, 1).unwrap();
        let h = train(
            &mut m,
            Samples {
                inputs: &x,
                labels: &train_y,
            },
            Samples {
                inputs: &x,
                labels: &val_y,
            },
            cfg,
        )
        .unwrap();
        (m, h)
    };
    let (m, h) = run(&cfg);
    assert_eq!(h.epochs(), 2);
    assert!(h.stopped_early);
    assert_eq!(h.best_epoch, 1);
    assert!(h.val_loss[1] > h.val_loss[0]);
    let mut one = cfg.clone();
    one.max_epochs = 1;
    let (m1, _) = run(&one);
    assert_eq!(m.state_vector(), m1.state_vector());
}

#[test]
fn separable_toy_problem_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 400;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let cls = rng.random_bool(0.5);
        let a: f32 = rng.random_range(0.2..2.0) * if cls { 1.0 } else { -1.0 };
        x.extend([a, rng.random_range(-1.0..1.0)]);
        y.push(if cls { 200u8 } else { 3 });
    }
    for spec in [ModelSpec::lr(2), ModelSpec::mlp(2)] {
        let mut m = make_model::<f32>(&spec, 2).unwrap();
        m.fit_standardizer(&x);
        let mut cfg = TrainConfig::new(5);
        cfg.learning_rate = 0.05;
        cfg.max_epochs = 100;
        cfg.batch_size = 32;
        let s = Samples { inputs: &x, labels: &y };
        train(&mut m, s, s, &cfg).unwrap();
        let probs = m.predict_many(&x).unwrap();
        let correct = probs
            .chunks(256)
            .zip(&y)
            .filter(|(p, &t)| {
                let arg = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                arg == t as usize
            })
            .count();
        assert!(correct as f64 / n as f64 >= 0.99, "{:?}: {correct}/{n}", spec.kind);
    }
}

#[test]
fn same_seed_same_history_and_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f32> = (0..300 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<u8> = (0..300).map(|_| rng.random()).collect();
    let run = || {
        let mut m = make_model::<f32>(&ModelSpec::mlp(6), 10).unwrap();
        let mut cfg = TrainConfig::new(10);
        cfg.max_epochs = 4;
        let h = train(
            &mut m,
            Samples {
                inputs: &x[..200 * 6],
                labels: &y[..200],
            },
            Samples {
                inputs: &x[200 * 6..],
                labels: &y[200..],
            },
            &cfg,
        )
        .unwrap();
        (m.state_vector(), h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn warm_start_begins_from_the_given_weights() {
    let x: Vec<f32> = (0..40).map(|i| i as f32 / 40.0).collect();
    let y = vec![9u8; 20];
    let mut src = make_model::<f32>(&ModelSpec::mlp(2), 1).unwrap();
    src.fit_standardizer(&x);
    let mut dst = make_model::<f32>(&ModelSpec::mlp(2), 2).unwrap();
    dst.fit_standardizer(&x);
    dst.transfer_from(&src).unwrap();
    let probe = dst.batch(x[..4].to_vec()).unwrap();
    assert_eq!(dst.forward(probe.clone(), Mode::Eval).data, src.forward(probe, Mode::Eval).data);
    let mut cfg = TrainConfig::new(0);
    cfg.max_epochs = 2;
    let s = Samples { inputs: &x, labels: &y };
    let h = train(&mut dst, s, s, &cfg).unwrap();
    assert_eq!(h.epochs(), 2);
}
