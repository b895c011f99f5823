use dpclip::bench::{bench_dataset, build_reference_model, DataSource, ModelKind};
use dpclip::clipping::Strategy;
use dpclip::privacy::RdpLedger;
use dpclip::trainer::{train_step, OptimizerState, TrainConfig};

fn updated_params(kind: ModelKind, method: Strategy) -> Vec<f64> {
    let ds = bench_dataset(kind, &DataSource::Synthetic, 20, 3).unwrap();
    let mut model = build_reference_model(kind, 2, ds.record_shape(), ds.num_classes, 3).unwrap();
    let cfg = TrainConfig { method, sigma: 0.0, batch_size: 8, clip: 0.5, seed: 11, ..TrainConfig::default() };
    let mut opt = OptimizerState::new(&model);
    let mut ledger = RdpLedger::default();
    let (x, y) = ds.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    train_step(&mut model, &mut opt, &x, &y, &cfg, &mut ledger).unwrap();
    model.flat_params()
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn check(kind: ModelKind) {
    let reference = updated_params(kind, Strategy::Reweight);
    for method in [Strategy::Nxbp, Strategy::MultiLoss] {
        let other = updated_params(kind, method);
        let gap = relative_gap(&other, &reference);
        assert!(gap <= 1e-6, "{kind}: {method} differs from reweight by {gap:e}");
    }
    // Clipping must bind for the comparison to say anything.
    let unclipped = updated_params(kind, Strategy::NonPrivate);
    assert!(relative_gap(&unclipped, &reference) > 1e-9, "{kind}: no gradient was clipped");
}

#[test]
fn mlp_updates_agree_across_methods() {
    check(ModelKind::Mlp);
}

#[test]
fn cnn_updates_agree_across_methods() {
    check(ModelKind::Cnn);
}

#[test]
fn rnn_updates_agree_across_methods() {
    check(ModelKind::Rnn);
}

#[test]
fn lstm_updates_agree_across_methods() {
    check(ModelKind::Lstm);
}

#[test]
fn transformer_updates_agree_across_methods() {
    check(ModelKind::Transformer);
}
