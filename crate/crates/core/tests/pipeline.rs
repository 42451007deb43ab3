use mor_core::{
    balance_report, generate_task, read_dataset_cache, train, write_dataset_cache, Activation, Checkpoint, GateMode, Model,
    ModelSpec, Rng, TaskSpec, TrainConfig,
};

fn spec(mode: GateMode, routers: usize) -> ModelSpec {
    ModelSpec {
        dims: vec![6, 5, 6],
        n_experts: 4,
        n_routers: routers,
        k_experts: 2,
        k_routers: routers,
        rank: 2,
        alpha: 4.0,
        mode,
        activation: Activation::Tanh,
    }
}

fn task() -> TaskSpec {
    TaskSpec {
        d_in: 6,
        d_out: 6,
        n_clusters: 3,
        ..TaskSpec::default()
    }
}

#[test]
fn trained_model_survives_checkpoint_round_trip() {
    let mut rng = Rng::new(17);
    let (_, data) = generate_task(&task(), &mut rng, 200).unwrap();
    let model = Model::init(&spec(GateMode::Mor, 3), None, &mut rng).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 25,
        seed: 17,
        ..TrainConfig::default()
    };
    let out = train(model, &data, &cfg).unwrap();
    assert_eq!(out.epochs.len(), 4);
    assert_eq!(out.steps.len(), 24);

    let text = Checkpoint::new(out.model.clone(), 17, 3).to_json().unwrap();
    let restored = Checkpoint::from_json(&text).unwrap().model;
    for s in data.samples.iter().take(20) {
        assert_eq!(restored.predict(&s.x).unwrap(), out.model.predict(&s.x).unwrap());
    }
}

#[test]
fn frozen_forward_replays_natural_forward() {
    let mut rng = Rng::new(5);
    let mut model = Model::init(&spec(GateMode::Mor, 2), None, &mut rng).unwrap();
    for (_, m) in model.params_mut() {
        m.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, 0.3));
    }
    let (_, data) = generate_task(&task(), &mut rng, 50).unwrap();
    for s in &data.samples {
        let (y, trace) = model.forward(&s.x, None).unwrap();
        let (z, _) = model.forward_frozen(&s.x, &trace.selections()).unwrap();
        assert_eq!(y, z);
    }
}

#[test]
fn stats_feed_balance_report() {
    let mut rng = Rng::new(8);
    let (_, data) = generate_task(&task(), &mut rng, 64).unwrap();
    for (mode, r) in [(GateMode::Single, 1), (GateMode::Mor, 2)] {
        let model = Model::init(&spec(mode, r), None, &mut rng).unwrap();
        let mut stats = model.new_stats();
        for s in &data.samples {
            model.forward(&s.x, Some(&mut stats)).unwrap();
        }
        let rep = balance_report(&stats).unwrap();
        assert_eq!(rep.layers.len(), 2);
        for l in &rep.layers {
            assert_eq!(l.histogram.iter().sum::<u64>(), 64 * 2);
            assert!(l.coefficient_of_variation >= 0.0);
        }
    }
}

#[test]
fn dataset_cache_through_a_file() {
    let dir = std::env::temp_dir().join(format!("mor-core-cache-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("data.bin");
    let (_, data) = generate_task(&task(), &mut Rng::new(2), 30).unwrap();
    let mut f = std::fs::File::create(&path).unwrap();
    write_dataset_cache(&mut f, 2, &task(), &data).unwrap();
    drop(f);
    let (seed, spec, back) = read_dataset_cache(&mut std::fs::File::open(&path).unwrap()).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    assert_eq!((seed, spec), (2, task()));
    assert_eq!(back, data);
}
