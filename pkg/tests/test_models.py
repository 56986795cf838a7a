import numpy as np
import pytest

from neurogame.layer import NeurogameLayerConfig
from neurogame.models import (
    BUILDERS,
    CheckpointError,
    Model,
    ModelSpec,
    build_cnn_age_gender,
    build_mlp_gender,
    build_neurogame_age_gender,
    build_neurogame_gender,
    count_params,
    load_checkpoint,
    save_checkpoint,
    walk_shapes,
)
from neurogame.training import Adam, loss_and_grads


def test_mlp_param_count_by_hand():
    dense = 64 * 64 * 3 * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * 1 + 1
    bn = 2 * (256 + 128 + 64)
    assert dense == 3_187_201 and bn == 896
    assert count_params(build_mlp_gender()) == dense + bn == 3_188_097
    assert Model(build_mlp_gender()).n_params() == 3_188_097


def test_cnn_spatial_trace():
    rows = walk_shapes(build_cnn_age_gender())["trunk"]
    spatial = [shape[0] for kind, shape, _ in rows if kind in ("conv", "maxpool")]
    assert spatial == [126, 63, 61, 30, 28, 14, 12, 6]
    assert ("flatten", (9216,), 0) in rows


def test_neurogame_variants_not_larger():
    assert count_params(build_neurogame_gender()) <= count_params(build_mlp_gender())
    assert count_params(build_neurogame_age_gender()) <= count_params(build_cnn_age_gender())
    ng = walk_shapes(build_neurogame_age_gender())["trunk"]
    assert all(n == 0 for kind, _, n in ng if kind == "neurogame")


def test_spec_roundtrip_and_errors():
    spec = build_neurogame_gender((16, 16, 1), hidden=(8,))
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        walk_shapes(build_cnn_age_gender((8, 8, 1)))
    with pytest.raises(ValueError):
        walk_shapes(ModelSpec("x", (4,), [{"type": "warp"}]))


SMALL = {
    "mlp-gender": dict(input_shape=(12, 12, 3), hidden=(16, 8)),
    "neurogame-gender": dict(input_shape=(12, 12, 3), hidden=(16, 8)),
    "cnn-agegender": dict(input_shape=(20, 20, 1), filters=(4, 6), dense=(8,)),
    "neurogame-agegender": dict(input_shape=(20, 20, 1), filters=(3, 6), dense=(8,)),
}


@pytest.mark.parametrize("name", list(BUILDERS))
def test_forward_ranges_and_zero_input(name):
    model = Model(BUILDERS[name](**SMALL[name]), seed=1)
    x = np.random.default_rng(0).uniform(0, 1, (5,) + tuple(model.spec.input_shape)).astype(np.float32)
    for inp in (x, np.zeros_like(x)):
        out = model.forward(inp, training=False)
        assert out["gender"].shape == (5,)
        assert np.all((out["gender"] >= 0) & (out["gender"] <= 1))
        if "age" in out:
            assert np.all(out["age"] >= 0)
        assert all(np.all(np.isfinite(v)) for v in out.values())
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 3, 3, 3), np.float32))


@pytest.mark.parametrize("name", list(BUILDERS))
def test_training_step_keeps_params_finite(name):
    model = Model(BUILDERS[name](**SMALL[name]), seed=2)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (6,) + tuple(model.spec.input_shape)).astype(np.float32)
    gender = rng.integers(0, 2, 6).astype(np.float32)
    age = rng.uniform(0, 116, 6).astype(np.float32)
    opt = Adam()
    before = {k: v.copy() for k, v in model.parameters().items()}
    for _ in range(3):
        out = model.forward(x, training=True)
        _, grads = loss_and_grads(out, gender, age)
        model.backward(grads)
        opt.step(model)
        model.iteration += 1
    after = model.parameters()
    assert all(np.all(np.isfinite(v)) for v in after.values())
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def _without_neurogame(spec):
    return ModelSpec(spec.name, spec.input_shape, [d for d in spec.layers if d["type"] != "neurogame"], spec.heads)


@pytest.mark.parametrize("name", ["neurogame-gender", "neurogame-agegender"])
def test_passthrough_equals_plain_composition(name):
    spec = BUILDERS[name](**SMALL[name])
    ng = Model(spec, seed=3, dtype=np.float64)
    plain = Model(_without_neurogame(spec), seed=3, dtype=np.float64)
    ng.set_passthrough()
    x = np.random.default_rng(2).uniform(0, 1, (4,) + tuple(spec.input_shape))
    a, b = ng.forward(x), plain.forward(x)
    for head in a:
        assert np.array_equal(a[head], b[head])


def test_cnn_passthrough_equals_baseline_with_matching_filters():
    base = build_cnn_age_gender((20, 20, 1), filters=(3, 6), dense=(8,))
    ng = build_neurogame_age_gender((20, 20, 1), filters=(3, 6), dense=(8,))
    m_base, m_ng = Model(base, seed=4), Model(ng, seed=4)
    m_ng.set_passthrough()
    x = np.random.default_rng(3).uniform(0, 1, (3, 20, 20, 1)).astype(np.float32)
    for head, y in m_base.forward(x).items():
        assert np.array_equal(y, m_ng.forward(x)[head])


def test_masked_positions_do_not_reach_first_dense():
    spec = build_neurogame_gender((8, 8, 1), hidden=(4,), neurogame=NeurogameLayerConfig(top_p=0.5))
    model = Model(spec, seed=5, dtype=np.float64)
    x = np.random.default_rng(4).uniform(0, 1, (2, 8, 8, 1))
    model.forward(x, training=False)
    flat_in = model.trunk[3]._shape  # (N, H, W, C) as seen by flatten
    mask = model.neurogame_layers()[0].last_mask.mask
    dense = model.trunk[4]
    pre = dense._x @ dense.params["W"]
    # perturb weights at dropped positions: pre-activation must not move
    w = dense.params["W"].copy()
    dropped = ~mask.transpose(0, 3, 1, 2).reshape(2, -1).astype(bool)
    rows = np.nonzero(dropped.all(axis=0))[0]
    dense.params["W"][rows] += 100.0
    assert np.array_equal(dense._x @ dense.params["W"], pre)
    dense.params["W"] = w
    assert flat_in[1:] == (6, 6, 3)


def test_diagnostics_for_four_layers():
    spec = build_neurogame_age_gender((48, 48, 1), filters=(3, 4, 4, 4), dense=(8,))
    model = Model(spec, seed=0)
    model.collect_diagnostics(True)
    model.forward(np.random.default_rng(5).uniform(0, 1, (1, 48, 48, 1)).astype(np.float32))
    layers = model.neurogame_layers()
    assert [l.name for l in layers] == ["neurogame0", "neurogame1", "neurogame2", "neurogame3"]
    assert all(l.diagnostics for l in layers)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = Model(build_neurogame_gender((12, 12, 1), hidden=(8,)), seed=6)
    model.iteration = 41
    x = np.random.default_rng(6).uniform(0, 1, (4, 12, 12, 1)).astype(np.float32)
    # update BN running stats so buffers are non-trivial
    model.forward(x, training=True)
    before = model.forward(x)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, config={"k": 1}, extra={"note": "x"})
    loaded, header = load_checkpoint(path)
    assert loaded.iteration == 41 and header["config"] == {"k": 1} and header["extra"] == {"note": "x"}
    for name, arr in {**model.parameters(), **model.buffers()}.items():
        got = {**loaded.parameters(), **loaded.buffers()}[name]
        assert got.dtype == np.float32 and np.array_equal(got, arr)
    after = loaded.forward(x)
    assert np.array_equal(before["gender"], after["gender"])
    assert path.read_bytes().startswith(b"NEUROGAME-CHECKPOINT 1\n")


def test_checkpoint_corruption(tmp_path):
    model = Model(build_mlp_gender((4, 4, 1), hidden=(2,)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    for bad in ("trunc.ckpt", "junk.ckpt", "missing.ckpt"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / bad)
