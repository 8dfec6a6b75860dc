import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandprobe import tensor as T
from bandprobe import unet
from bandprobe.tensor import ShapeError
from bandprobe.unet import CheckpointError, UNetConfig


def _unit(cin, cout):
    return 9 * cin * cout + cout + 2 * cout


def _count_by_hand(in_bands, classes, base):
    w = [base * 2**i for i in range(5)]
    total = _unit(in_bands, w[0]) + _unit(w[0], w[0])
    for i in range(1, 5):
        total += _unit(w[i - 1], w[i]) + _unit(w[i], w[i])
    for lvl in range(4):
        total += 4 * w[lvl + 1] * w[lvl] + w[lvl] + _unit(2 * w[lvl], w[lvl]) + _unit(w[lvl], w[lvl])
    return total + w[0] * classes + classes


def test_parameter_count_default_desk_config():
    model = unet.build(UNetConfig(12, 2, 16))
    # frozen from the shape laws above
    assert model.num_parameters() == 1945362 == _count_by_hand(12, 2, 16)


@pytest.mark.parametrize("bands,classes,base", [(4, 2, 4), (12, 2, 8), (3, 3, 1)])
def test_parameter_count_formula(bands, classes, base):
    assert unet.build(UNetConfig(bands, classes, base)).num_parameters() == _count_by_hand(bands, classes, base)


def test_widths_double():
    assert UNetConfig(base_width=16).widths == [16, 32, 64, 128, 256]


def test_same_seed_same_parameters():
    a, b = unet.build(UNetConfig(12, 2, 4), seed=3), unet.build(UNetConfig(12, 2, 4), seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = unet.build(UNetConfig(12, 2, 4), seed=4)
    assert a.params["enc0.0.conv.weight"].data.tobytes() != c.params["enc0.0.conv.weight"].data.tobytes()


def test_base_width_one_is_legal():
    model = unet.build(UNetConfig(12, 2, 1))
    model.reset_running_stats()
    out = model.eval().forward(np.zeros((12, 16, 16), dtype=np.float32))
    assert out.shape == (2, 16, 16)


@pytest.mark.parametrize("cfg", [dict(in_bands=0), dict(num_classes=1), dict(base_width=0), dict(depth=3)])
def test_invalid_config(cfg):
    with pytest.raises(ValueError):
        UNetConfig(**cfg)


def _eval_model(base=4, bands=12, seed=0):
    model = unet.build(UNetConfig(bands, 2, base), seed=seed)
    model.reset_running_stats()
    return model.eval()


def test_forward_full_size_shape():
    model = _eval_model(base=1)
    with T.no_grad():
        out = model.forward(np.random.default_rng(0).random((12, 256, 256), dtype=np.float32))
    assert out.shape == (2, 256, 256)


def test_forward_minimum_size():
    assert _eval_model().forward(np.zeros((12, 16, 16), np.float32)).shape == (2, 16, 16)


def test_forward_rejects_indivisible():
    with pytest.raises(ShapeError, match="multiples of 16"):
        _eval_model().forward(np.zeros((12, 250, 250), np.float32))


def test_forward_rejects_wrong_band_count():
    with pytest.raises(ShapeError, match="12 bands"):
        _eval_model().forward(np.zeros((11, 16, 16), np.float32))


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), n=st.integers(1, 2))
def test_output_spatial_shape_property(h, w, n):
    model = _eval_model(base=2)
    x = np.zeros((n, 12, 16 * h, 16 * w), np.float32)
    with T.no_grad():
        out = model.forward(x)
    assert out.shape == (n, 2, 16 * h, 16 * w)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_eval_forward_is_bitwise_deterministic(rng):
    model = _eval_model()
    x = rng.random((12, 32, 32), dtype=np.float32)
    with T.no_grad():
        a = model.forward(x).data
        b = model.forward(x).data
    assert a.tobytes() == b.tobytes()


def test_eval_forward_does_not_touch_state(rng):
    model = _eval_model()
    before = [a.tobytes() for _, a in model.state_arrays()]
    model.forward(rng.random((2, 12, 16, 16), dtype=np.float32))
    assert [a.tobytes() for _, a in model.state_arrays()] == before


def test_eval_before_training_stats_errors():
    model = unet.build(UNetConfig(12, 2, 2)).eval()
    with pytest.raises(RuntimeError, match="running statistics"):
        model.forward(np.zeros((12, 16, 16), np.float32))


class _Fixed:
    """Stand-in model whose forward returns given probabilities."""

    training = False
    dtype = np.float32

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float32)

    def forward(self, x):
        return T.Tensor(np.broadcast_to(self.probs, (x.shape[0],) + self.probs.shape))


@pytest.mark.parametrize("probs,label", [((0.9, 0.1), 0), ((0.5, 0.5), 0), ((0.2, 0.8), 1)])
def test_predict_mask_argmax_and_tie(probs, label):
    fake = _Fixed(np.array(probs).reshape(2, 1, 1))
    assert unet.predict_mask(fake, np.zeros((12, 1, 1))).item() == label


def test_predict_mask_requires_eval():
    model = unet.build(UNetConfig(12, 2, 2))
    with pytest.raises(RuntimeError, match="eval"):
        unet.predict_mask(model, np.zeros((12, 16, 16)))


def test_predict_masks_independent_of_threads(rng):
    model = _eval_model()
    x = rng.random((10, 12, 16, 16), dtype=np.float32)
    one = unet.predict_masks(model, x, batch_size=4, threads=1)
    three = unet.predict_masks(model, x, batch_size=4, threads=3)
    assert one.tobytes() == three.tobytes()
    assert one.shape == (10, 16, 16) and one.dtype == np.uint8


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_roundtrip_bytes(tmp_path, rng):
    model = _eval_model(seed=5)
    for s in model.bn.values():
        s.running_mean = rng.random(s.channels).astype(np.float32)
    path = tmp_path / "m.ckpt"
    unet.save(model, path)
    blob = path.read_bytes()
    assert blob[:4] == b"BPCK"
    again = unet.load(path)
    assert unet.dumps(again) == blob
    x = rng.random((12, 16, 16), dtype=np.float32)
    with T.no_grad():
        assert model.forward(x).data.tobytes() == again.forward(x).data.tobytes()


def test_checkpoint_mismatch_is_hard_error():
    model = _eval_model()
    arrays = model.state_arrays()
    arrays[0], arrays[1] = arrays[1], arrays[0]
    with pytest.raises(CheckpointError, match="mismatch"):
        model.load_state_arrays(arrays)


def test_checkpoint_bad_magic_and_truncation():
    blob = unet.dumps(_eval_model())
    with pytest.raises(CheckpointError, match="magic"):
        unet.loads(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        unet.loads(blob[:-10])


def test_checkpoint_renamed_entry_rejected():
    blob = unet.dumps(_eval_model())
    bad = blob.replace(b"enc0.0.conv.weight", b"enc0.0.conv.wXight", 1)
    with pytest.raises(CheckpointError, match="expected enc0.0.conv.weight"):
        unet.loads(bad)


def test_concat_levels_match():
    # forward asserts the skip/upsample shapes internally; any odd-level bug would trip it
    model = _eval_model(base=2)
    model.forward(np.zeros((1, 12, 48, 32), np.float32))
