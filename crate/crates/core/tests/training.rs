use countlab::data::{Dataset, Interval};
use countlab::model::ModelConfig;
use countlab::trainer::{train, NoCheckpoints, TrainConfig, TrainPath};

fn small_data() -> Dataset {
    Dataset::generate_with(3, |mut s| {
        s.count = 640;
        s.n01 = Interval::new(s.n01.lo / 4, s.n01.hi / 4);
        s.n2 = Interval::new(0, s.n2.hi / 4);
        s
    })
    .unwrap()
}

#[test]
fn count_and_token_routes_train_identically() {
    let data = small_data();
    for (ln, skip) in [(true, false), (false, true)] {
        let mut model = ModelConfig::new(8, 4).with_layer_norm(ln);
        model.skip_to_output = skip;
        let mut fast = TrainConfig::new(model, 9);
        fast.epochs = 1;
        let full = TrainConfig {
            path: TrainPath::FullReference,
            ..fast.clone()
        };
        let a = train(&fast, &data, &mut NoCheckpoints).unwrap();
        let b = train(&full, &data, &mut NoCheckpoints).unwrap();
        let gap = a
            .params
            .flatten()
            .iter()
            .zip(b.params.flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-6, "parameter gap {gap} (layer norm {ln}, skip {skip})");
        assert!((a.log.epochs[0].train_loss - b.log.epochs[0].train_loss).abs() <= 1e-9);
    }
}

#[test]
fn dropout_trains_on_the_token_route() {
    let data = small_data();
    let mut model = ModelConfig::new(8, 4);
    model.dropout = 0.2;
    let mut cfg = TrainConfig::new(model, 2);
    cfg.epochs = 1;
    cfg.path = TrainPath::FullReference;
    let out = train(&cfg, &data, &mut NoCheckpoints).unwrap();
    assert!(out.params.is_finite());
    let again = train(&cfg, &data, &mut NoCheckpoints).unwrap();
    assert_eq!(out.params, again.params);
}
