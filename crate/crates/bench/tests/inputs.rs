use tracecast::graphnet::{GraphConfig, GraphModel};
use tracecast::training::predict;
use tracecast_bench::filled;

#[test]
fn bench_inputs_feed_the_models() {
    let model = GraphModel::build(GraphConfig::new(4, 6, 2, 2), 0).unwrap();
    let y = predict(&model, &filled(&[3, 4, 6], 1)).unwrap();
    assert_eq!(y.shape(), &[3, 4, 2]);
    assert!(y.is_finite());
}
