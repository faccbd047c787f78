"""SCCK checkpoint round-trip and framing tests."""

import numpy as np
import pytest

from scancad.autodiff import (
    AdamState,
    Tensor,
    adam_step,
    read_checkpoint,
    write_checkpoint,
)


def _params(rng):
    return {
        "a.weight": Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32), requires_grad=True),
        "a.bias": Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True),
        "z.weight": Tensor(rng.standard_normal((5,)).astype(np.float32), requires_grad=True),
    }


class TestRoundTrip:
    def test_values_and_moments_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        params = _params(rng)
        state = AdamState.for_params(params)
        grads = {k: rng.standard_normal(p.shape).astype(np.float32) for k, p in params.items()}
        for _ in range(3):
            adam_step(params, grads, state, lr=0.01)
        path = tmp_path / "model.scck"
        write_checkpoint(path, 3, params, state)
        it, loaded, lstate = read_checkpoint(path)
        assert it == 3
        assert lstate.step == 3
        assert sorted(loaded) == sorted(params)
        for k in params:
            np.testing.assert_array_equal(loaded[k].data, params[k].data)
            np.testing.assert_array_equal(lstate.m[k], state.m[k])
            np.testing.assert_array_equal(lstate.v[k], state.v[k])
            assert loaded[k].requires_grad

    def test_without_optimizer_state_zero_moments(self, tmp_path):
        rng = np.random.default_rng(1)
        params = _params(rng)
        path = tmp_path / "model.scck"
        write_checkpoint(path, 0, params)
        _, _, state = read_checkpoint(path)
        for k in params:
            assert np.all(state.m[k] == 0) and np.all(state.v[k] == 0)

    def test_canonical_bytes(self, tmp_path):
        """Same content in different dict order -> identical file bytes."""
        rng = np.random.default_rng(2)
        params = _params(rng)
        reordered = {k: params[k] for k in reversed(list(params))}
        p1, p2 = tmp_path / "a.scck", tmp_path / "b.scck"
        write_checkpoint(p1, 5, params)
        write_checkpoint(p2, 5, reordered)
        assert p1.read_bytes() == p2.read_bytes()


class TestFraming:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.scck"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ValueError, match="magic"):
            read_checkpoint(path)

    def test_bad_version(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "v.scck"
        write_checkpoint(path, 1, _params(rng))
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            read_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        rng = np.random.default_rng(4)
        path = tmp_path / "t.scck"
        write_checkpoint(path, 1, _params(rng))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(ValueError, match="trailing"):
            read_checkpoint(path)
