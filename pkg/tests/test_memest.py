import json

import numpy as np
import pytest

from hetplan.core import ModelSpec, ParallelConfig
from hetplan.errors import InputError, ParseError
from hetplan.fixtures import memory_training_set, toy_model
from hetplan.memest import (
    CSV_HEADER,
    FEATURES,
    MIB,
    PREDICTION_FLOOR,
    MemoryModel,
    MemorySample,
    config_features,
    evaluate,
    heuristic_estimate,
    is_runnable,
    mape,
    predict,
    predict_config,
    read_samples,
    synthetic_peak_memory,
    train,
    write_samples,
)

BIG = ModelSpec(n_layers=24, n_hidden=2048, n_heads=16, seq_len=1024, vocab_size=50257, n_params=10**9)


def activation_bytes(model, conf):
    return conf.bs_micro * model.seq_len * model.n_hidden * model.n_layers / conf.pp * model.bytes_per_element \
        * min(conf.pp, conf.n_mb)


def test_heuristic_weight_term():
    conf = ParallelConfig.make(pp=2, tp=2, dp=1, bs_global=1, bs_micro=1)
    weights = heuristic_estimate(BIG, conf) - activation_bytes(BIG, conf) / MIB
    assert weights == pytest.approx(4e9 / MIB, rel=1e-12)
    assert round(weights, 1) == 3814.7


def test_heuristic_tp_halves_state():
    c1 = ParallelConfig.make(pp=1, tp=1, dp=1, bs_global=1, bs_micro=1)
    c2 = ParallelConfig.make(pp=1, tp=2, dp=1, bs_global=1, bs_micro=1)
    s1 = heuristic_estimate(BIG, c1) - activation_bytes(BIG, c1) / MIB
    s2 = heuristic_estimate(BIG, c2) - activation_bytes(BIG, c2) / MIB
    assert s2 == pytest.approx(s1 / 2, rel=1e-12)
    assert s1 == pytest.approx(16e9 / MIB, rel=1e-12)


def test_is_runnable_examples():
    assert not is_runnable(30000, 32768, 0.10)
    assert is_runnable(29491.2, 32768, 0.10)
    assert is_runnable(0, 32768, 0.10)
    assert is_runnable(32768, 32768, 0.0)
    with pytest.raises(InputError):
        is_runnable(1, 0, 0.1)
    with pytest.raises(InputError):
        is_runnable(1, 10, 0.6)


def test_heuristic_underestimates_ground_truth():
    samples = memory_training_set()
    under = 0
    for s in samples:
        model = ModelSpec(n_layers=s.n_layers, n_hidden=s.n_hiddens, n_heads=s.n_heads, seq_len=1024,
                          vocab_size=50257)
        conf = ParallelConfig.make(s.pp, s.tp, s.dp, s.bs_global, s.bs_micro)
        under += heuristic_estimate(model, conf) < s.measured_max
    assert under / len(samples) >= 0.9


def samples_with(targets_fn, n=None, seed=0):
    base = memory_training_set()
    if n is not None:
        idx = np.random.default_rng(seed).choice(len(base), n, replace=False)
        base = [base[i] for i in sorted(idx)]
    return [MemorySample(*s.features(), float(targets_fn(s))) for s in base]


def test_constant_target():
    data = samples_with(lambda s: 5000.0, n=300)
    model = train(data, iterations=500, seed=0)
    preds = [predict(model, s) for s in data]
    assert max(abs(p - 5000.0) / 5000.0 for p in preds) < 0.01


def test_linear_target_held_out():
    def lin(s):
        return 512.0 + 3.0 * s.n_layers + 0.5 * s.n_hiddens + 40.0 * s.bs_micro + 7.0 * s.tp + 2.0 * s.bs_mini

    data = samples_with(lin)
    rng = np.random.default_rng(1)
    order = rng.permutation(len(data))
    cut = int(0.8 * len(data))
    train_set = [data[i] for i in order[:cut]]
    held = [data[i] for i in order[cut:]]
    model = train(train_set, iterations=3000, seed=0)
    assert evaluate(model, held) < 5.0


def test_determinism_same_seed():
    data = samples_with(lambda s: 1000.0 + s.bs_micro, n=200)
    a = train(data, iterations=200, seed=3)
    b = train(data, iterations=200, seed=3)
    for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(wa, wb)
    c = train(data, iterations=200, seed=4)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_architecture_and_metadata():
    data = samples_with(lambda s: 1000.0 + s.bs_micro, n=100)
    m = train(data, iterations=10, seed=0)
    shapes = [w.shape for w in m.weights]
    assert shapes == [(10, 200), (200, 200), (200, 200), (200, 200), (200, 1)]
    md = m.metadata
    assert md["weight_layers"] == 5 and md["hidden"] == 200
    assert md["lr"] == 1e-3 and md["batch_size"] == 32 and md["seed"] == 0
    assert np.isfinite(md["final_loss"])


def test_constant_feature_flagged():
    base = [s for s in memory_training_set() if s.n_layers == 24 and s.n_hiddens == 1024][:50]
    data = [MemorySample(*s.features(), 1000.0 + 10 * s.bs_micro) for s in base]
    m = train(data, iterations=10, seed=0)
    assert "n_layers" in m.metadata["flagged_constant_features"]
    assert m.feat_std[FEATURES.index("n_layers")] == 1.0
    assert np.all(m.feat_std > 0)


def test_train_preconditions():
    s = memory_training_set()[0]
    with pytest.raises(InputError):
        train([s], iterations=10)
    with pytest.raises(InputError):
        train([s, s], iterations=10)
    with pytest.raises(InputError):
        train(memory_training_set()[:5], iterations=0)


def test_prediction_floor():
    data = samples_with(lambda s: 1000.0 + s.bs_micro, n=50)
    m = train(data, iterations=5, seed=0, target_transform="identity")
    m.biases[-1][:] = -1e9
    assert predict(m, data[0]) == PREDICTION_FLOOR


def test_predict_pure_and_round_trip(toy_mem_model):
    s = memory_training_set()[123]
    a = predict(toy_mem_model, s)
    assert a == predict(toy_mem_model, s)
    m2 = MemoryModel.from_dict(json.loads(json.dumps(toy_mem_model.to_dict())))
    assert predict(m2, s) == a


def test_fit_to_ground_truth(toy_mem_model):
    data = memory_training_set()
    assert evaluate(toy_mem_model, data) < 10.0
    log = toy_mem_model.metadata["loss_log"]
    assert len(log) == 5
    assert all(b <= 1.05 * a for a, b in zip(log, log[1:]))


def test_monotone_in_bs_micro(toy_mem_model):
    model = toy_model()
    for pp, tp, dp in [(4, 1, 4), (2, 2, 4), (8, 2, 1), (4, 4, 1)]:
        preds = [predict_config(toy_mem_model, model, ParallelConfig.make(pp, tp, dp, 64, b))
                 for b in (1, 2, 4, 8, 16) if (64 // dp) % b == 0]
        assert all(b >= 0.95 * a for a, b in zip(preds, preds[1:]))


def test_mlp_beats_heuristic_on_offset_data():
    rng = np.random.default_rng(0)
    base = memory_training_set()
    idx = rng.choice(len(base), 1500, replace=False)
    data, heur = [], []
    for i in sorted(idx):
        s = base[i]
        model = ModelSpec(n_layers=s.n_layers, n_hidden=s.n_hiddens, n_heads=s.n_heads, seq_len=1024,
                          vocab_size=50257)
        h = heuristic_estimate(model, ParallelConfig.make(s.pp, s.tp, s.dp, s.bs_global, s.bs_micro))
        heur.append(h)
        data.append(MemorySample(*s.features(), float((h + 2048.0) * (1 + 0.02 * rng.standard_normal()))))
    m = train(data, iterations=2000, seed=0)
    assert evaluate(m, data) < mape(heur, [s.measured_max for s in data])


def test_sample_csv_round_trip_and_errors():
    data = memory_training_set()[:20]
    assert read_samples(write_samples(data)) == data
    with pytest.raises(ParseError):
        read_samples("a,b\n1,2\n")
    header = ",".join(CSV_HEADER)
    with pytest.raises(ParseError, match="row 2"):
        read_samples(header + "\n1,2,3\n")
    with pytest.raises(ParseError, match="row 2"):
        read_samples(header + "\n4,24,1024,16,1,2,1,1,8,8,100.0\n")  # pp*tp*dp != n_gpus


def test_features_and_ground_truth():
    model = toy_model()
    conf = ParallelConfig.make(2, 2, 4, 64, 2)
    assert config_features(model, conf) == (16, 24, 2048, 16, 2, 2, 4, 2, 16, 64)
    bigger = ParallelConfig.make(2, 2, 4, 64, 4)
    assert synthetic_peak_memory(model, bigger) > synthetic_peak_memory(model, conf)
