use proptest::prelude::{prop_assert, prop_assert_eq, prop_oneof, proptest, Just, ProptestConfig, Strategy};
use rand::Rng;
use vamkit::network::Block;
use vamkit::{AttentionMap, AttentionSource, EmbeddingNet, GateMode, NetworkConfig, Phase, Shape, StreamKey, Tensor};

fn image(key: StreamKey) -> Tensor {
    let mut rng = key.rng();
    let s = Shape::new(1, 3, 32, 32);
    Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn oracle(key: StreamKey) -> AttentionMap {
    let mut rng = key.rng();
    let s = Shape::new(1, 1, 8, 8);
    AttentionMap::new(Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()).unwrap()
}

fn net(mode: GateMode, source: AttentionSource, seed: u64) -> EmbeddingNet {
    let cfg = NetworkConfig {
        gate_mode: mode,
        attention_source: source,
        ..NetworkConfig::default()
    };
    EmbeddingNet::build(cfg, StreamKey::root(seed)).unwrap()
}

fn gate_modes() -> impl Strategy<Value = GateMode> {
    prop_oneof![Just(GateMode::Impdrop), Just(GateMode::Product), Just(GateMode::None)]
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn each_half_has_unit_norm(mode in gate_modes(), seed in 0u64..10_000, train in proptest::bool::ANY) {
        let net = net(mode, AttentionSource::OracleMask, seed);
        let root = StreamKey::root(seed);
        let phase = if train { Phase::Train } else { Phase::Eval };
        let e = net.embed_one(&image(root.label("img")), phase, root.label("mask"), Some(&oracle(root.label("p")))).unwrap();
        prop_assert_eq!(e.len(), 64);
        let (g, a) = e.halves();
        prop_assert!((norm(g) - 1.0).abs() < 1e-5, "global norm {}", norm(g));
        // An all-dropped attention branch may normalize a zero vector.
        let na = norm(a);
        prop_assert!((na - 1.0).abs() < 1e-5 || na == 0.0, "attention norm {}", na);
    }

    #[test]
    fn eval_embedding_is_a_pure_function(mode in gate_modes(), seed in 0u64..10_000, k1 in 0u64..100, k2 in 0u64..100) {
        let net = net(mode, AttentionSource::LearnedHead, seed);
        let img = image(StreamKey::root(seed).label("img"));
        let a = net.embed_one(&img, Phase::Eval, StreamKey::root(k1), None).unwrap();
        let b = net.embed_one(&img, Phase::Eval, StreamKey::root(k2), None).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn train_embedding_is_determined_by_key(seed in 0u64..10_000) {
        let net = net(GateMode::Impdrop, AttentionSource::LearnedHead, seed);
        let img = image(StreamKey::root(seed).label("img"));
        let a = net.embed_one(&img, Phase::Train, StreamKey::root(seed).label("k"), None).unwrap();
        let b = net.embed_one(&img, Phase::Train, StreamKey::root(seed).label("k"), None).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn perturbing_an_upper_parameter_reaches_both_branches() {
    let mut net = net(GateMode::Product, AttentionSource::OracleMask, 3);
    let img = image(StreamKey::root(1));
    let p = oracle(StreamKey::root(2));
    let before = net.embed_one(&img, Phase::Eval, StreamKey::root(0), Some(&p)).unwrap();
    let upper: Vec<usize> = net
        .layers()
        .filter(|(_, block, layer)| *block == Block::Upper && layer.weights.is_some())
        .map(|(i, _, _)| i)
        .collect();
    assert_eq!(upper.len(), 2, "one conv and one dense in the shared stack");
    let last = *upper.last().unwrap();
    let w = net.layer_mut(last).unwrap().weights.as_mut().unwrap();
    for v in w.data_mut().iter_mut() {
        *v *= -1.0;
    }
    let after = net.embed_one(&img, Phase::Eval, StreamKey::root(0), Some(&p)).unwrap();
    let (g0, a0) = before.halves();
    let (g1, a1) = after.halves();
    assert_ne!(g0, g1);
    assert_ne!(a0, a1);
}

#[test]
fn shared_stack_has_one_parameter_set() {
    let net = net(GateMode::Impdrop, AttentionSource::LearnedHead, 0);
    let per_block = |b: Block| net.layers().filter(|(_, block, l)| *block == b && l.weights.is_some()).count();
    assert_eq!(per_block(Block::Upper), 2);
    assert_eq!(per_block(Block::Lower), 2);
    assert_eq!(per_block(Block::AttentionHead), 2);
    assert_eq!(net.params().count(), 12);
}
