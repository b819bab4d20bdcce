import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikeadapt.convert import AnnModel
from spikeadapt.io import (
    Dataset,
    FormatError,
    MetricsWriter,
    ShapeMismatchError,
    TruncatedBlobError,
    UnsupportedVersionError,
    load_dataset,
    load_model,
    read_metrics,
    save_dataset,
    save_model,
)
from spikeadapt.netcore import LayerSpec, SpikingNetwork, SurrogateConfig, mlp


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def sample_snn(seed=0):
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec("conv2d", f32(rng.normal(size=(3, 1, 3, 3))), f32(rng.normal(size=3)), stride=2, padding=1, a_max=1.5, alpha=1.25),
        LayerSpec("normalization", gamma=f32(rng.uniform(0.5, 1.5, 3)), beta=f32(rng.normal(size=3)), mean=f32(rng.normal(size=3)), std=f32(rng.uniform(0.5, 2, 3))),
        LayerSpec("dense", f32(rng.normal(size=(4, 48))), f32(rng.normal(size=4)), v_th=0.75),
        LayerSpec("output-accumulator"),
    ]
    return SpikingNetwork((1, 8, 8), layers, SurrogateConfig("rectangular", 0.4), calibration={"a_max": [1.5], "percentile": 99.0})


def assert_same_model(a, b):
    assert type(a) is type(b) and a.input_shape == b.input_shape
    for la, lb in zip(a.layers, b.layers, strict=True):
        assert la.kind == lb.kind and la.stride == lb.stride and la.padding == lb.padding
        for name in ("weight", "bias", "gamma", "beta", "mean", "std"):
            va, vb = getattr(la, name), getattr(lb, name)
            assert (va is None) == (vb is None)
            if va is not None:
                assert va.shape == vb.shape and va.tobytes() == vb.tobytes()
        for name in ("v_th", "alpha", "alpha_init", "a_max"):
            assert getattr(la, name) == getattr(lb, name)


# ---------------------------------------------------------------- models


def test_snn_round_trip_bitwise(tmp_path):
    net = sample_snn()
    back = load_model(save_model(net, tmp_path / "m.json"))
    assert_same_model(net, back)
    assert back.surrogate == net.surrogate and back.calibration == net.calibration


@given(st.integers(0, 10_000))
def test_random_mlp_round_trip(tmp_path_factory, seed):
    net = mlp([5, 7, 3], np.random.default_rng(seed), norm=True)
    for layer in net.layers:
        for name in ("weight", "bias", "gamma", "beta", "mean", "std"):
            if getattr(layer, name) is not None:
                setattr(layer, name, f32(getattr(layer, name)))
    path = tmp_path_factory.mktemp("rt") / "m.json"
    assert_same_model(net, load_model(save_model(net, path)))


def test_ann_round_trip(tmp_path):
    ann = AnnModel((4,), [LayerSpec("dense", f32(np.arange(12.0).reshape(3, 4) / 7))])
    assert_same_model(ann, load_model(save_model(ann, tmp_path / "a.json")))


def test_resave_is_byte_identical(tmp_path):
    p1 = save_model(sample_snn(), tmp_path / "a.json")
    p2 = save_model(load_model(p1), tmp_path / "b.json")
    assert p1.with_suffix(".bin").read_bytes() == p2.with_suffix(".bin").read_bytes()


def test_truncated_blob(tmp_path):
    p = save_model(sample_snn(), tmp_path / "m.json")
    blob = p.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(TruncatedBlobError) as exc:
        load_model(p)
    assert "truncated blob" in str(exc.value)


def test_unsupported_version(tmp_path):
    p = save_model(sample_snn(), tmp_path / "m.json")
    manifest = json.loads(p.read_text())
    manifest["version"] = 99
    p.write_text(json.dumps(manifest))
    with pytest.raises(UnsupportedVersionError) as exc:
        load_model(p)
    assert "unsupported version" in str(exc.value)
    del manifest["version"]
    p.write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_model(p)


def test_shape_inconsistency(tmp_path):
    p = save_model(sample_snn(), tmp_path / "m.json")
    manifest = json.loads(p.read_text())
    manifest["layers"][2]["tensors"]["weight"]["shape"] = [4, 47]
    p.write_text(json.dumps(manifest))
    with pytest.raises(ShapeMismatchError) as exc:
        load_model(p)
    assert "shape inconsistency" in str(exc.value)
    blob = p.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes() + b"\0\0\0\0")
    with pytest.raises(ShapeMismatchError):
        load_model(p)


def test_error_classes_are_distinct():
    assert len({TruncatedBlobError.code, UnsupportedVersionError.code, ShapeMismatchError.code}) == 3


# ---------------------------------------------------------------- datasets


def small_dataset(n=10, labels=True):
    rng = np.random.default_rng(3)
    images = f32(rng.uniform(0, 1, (n, 1, 4, 4)))
    return Dataset(images, rng.integers(0, 3, n) if labels else None, 3)


def test_dataset_round_trip(tmp_path):
    ds = small_dataset()
    save_dataset(tmp_path / "d", {"train": ds, "test": small_dataset(labels=False)})
    back = load_dataset(tmp_path / "d", "train")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.n_classes == 3
    assert load_dataset(tmp_path / "d", "test").labels is None
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d", "valid")


def test_batches_keep_partial_tail():
    ds = small_dataset(10)
    assert [len(x) for x, _ in ds.batches(4)] == [4, 4, 2]
    with pytest.raises(ValueError):
        next(ds.batches(0))


def test_shuffle_is_seeded():
    ds = small_dataset(10)
    a = [y.tolist() for _, y in ds.batches(3, shuffle_seed=5)]
    b = [y.tolist() for _, y in ds.batches(3, shuffle_seed=5)]
    assert a == b
    order = np.concatenate(ds.batch_indices(3, 5))
    assert sorted(order.tolist()) == list(range(10))
    assert np.concatenate([y for _, y in ds.batches(3, 5)]).tolist() == ds.labels[order].tolist()


def test_label_out_of_range_rejected(tmp_path):
    ds = small_dataset()
    ds.labels[0] = 3
    save_dataset(tmp_path / "d", {"test": ds})
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d")


def test_dataset_blob_size_checked(tmp_path):
    save_dataset(tmp_path / "d", {"test": small_dataset()})
    blob = tmp_path / "d" / "test.bin"
    data = blob.read_bytes()
    blob.write_bytes(data[:-8])
    with pytest.raises(TruncatedBlobError):
        load_dataset(tmp_path / "d")
    blob.write_bytes(data + b"\0" * 4)
    with pytest.raises(ShapeMismatchError):
        load_dataset(tmp_path / "d")


# ---------------------------------------------------------------- metrics


def records():
    return [
        {"batch": i, "entropy": 0.5 / (i + 1), "accuracy": 0.25 * i, "firing_rates": [0.1, 0.2], "alphas": [1.0, 2.0], "synops": 10 * i, "wall_ms": None}
        for i in range(3)
    ]


@pytest.mark.parametrize("fmt,suffix", [("jsonl", ".jsonl"), ("csv", ".csv")])
def test_metrics_round_trip(tmp_path, fmt, suffix):
    w = MetricsWriter(tmp_path / f"m{suffix}", fmt)
    for r in records():
        w.add(r)
    w.close()
    assert read_metrics(tmp_path / f"m{suffix}") == records()


def test_metrics_batch_index_must_increase(tmp_path):
    w = MetricsWriter(tmp_path / "m.jsonl")
    w.add(records()[1])
    with pytest.raises(ValueError):
        w.add(records()[0])
    with pytest.raises(ValueError):
        MetricsWriter(tmp_path / "m.txt", "xml")
