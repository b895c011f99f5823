use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let m = PyModule::new(py, "dpclip").unwrap();
        dpclip_py::register(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("dpclip", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            panic!("{e}");
        }
    });
}

#[test]
fn privacy_goldens() {
    run(r#"
import math
assert dpclip.gaussian_rdp_eps(1.0, 1.0, 2.0) == 1.0
l = dpclip.RdpLedger([2.0])
l.compose([1.0])
eps, alpha = l.to_dp(math.exp(-1))
assert abs(eps - 2.0) < 1e-12 and alpha == 2.0
assert dpclip.DEFAULT_ALPHAS == [1.25, 1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
"#);
}

#[test]
fn fast_norms_and_clipped_gradients() {
    run(r#"
ds = dpclip.bench_dataset("rnn", 12)
model = dpclip.reference_model("rnn", [28, 28], ds.num_classes, seed=3)
fast = model.per_example_norms(ds.features, ds.targets)
naive = model.naive_per_example_norms(ds.features, ds.targets)
assert all(abs(f - n) <= 1e-6 * n for f, n in zip(fast, naive))
grads = model.clipped_gradient(ds.features, ds.targets, clip=0.5)
assert len(grads) == len(model.param_names)
assert sum(len(g) for g in grads) == model.param_count
"#);
}

#[test]
fn errors_become_python_exceptions() {
    run(r#"
for bad in [lambda: dpclip.Tensor([2, 2], [1.0]),
            lambda: dpclip.gaussian_rdp_eps(1.0, 1.0, 1.0),
            lambda: dpclip.reference_model("perceptron", [4], 2),
            lambda: dpclip.idx_from_bytes(b"\x00\x00\x08", b"")]:
    try:
        bad()
    except ValueError:
        continue
    raise AssertionError("no exception")
try:
    dpclip.load_idx("/nonexistent/a", "/nonexistent/b")
    raise AssertionError("no exception")
except OSError:
    pass
"#);
}

#[test]
fn train_returns_metrics_and_report() {
    run(r#"
ds = dpclip.synth("separable", 60, [8], 2, 1)
model = dpclip.reference_model("mlp", [8], 2)
out = dpclip.train(model, ds, epochs=2, batch_size=10, sigma=1.0, noise_scale="clip-multiplier")
assert [m["epoch"] for m in out["metrics"]] == [1, 2]
assert out["privacy"]["steps"] == 12
assert out["config"]["batch_size"] == 10
try:
    dpclip.train(model, ds, epochz=1)
    raise AssertionError("unknown field accepted")
except ValueError:
    pass
"#);
}
