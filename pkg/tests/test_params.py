"""Parameter store registration, init determinism, checkpoint archives."""

import zipfile

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from rxfusion.params import ParamStore, load_checkpoint, save_checkpoint


def _build_store(seed=0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    store.uniform("enc/w", (4, 3), 3, rng)
    store.uniform("enc/b", (4,), 3, rng)
    store.zeros("head/bias", (2,))
    return store


class TestStore:
    def test_duplicate_name_rejected(self):
        store = _build_store()
        with pytest.raises(KeyError):
            store.add("enc/w", np.zeros((4, 3)))

    def test_registration_order_preserved(self):
        store = _build_store()
        assert [k for k, _ in store.items()] == ["enc/w", "enc/b", "head/bias"]

    def test_uniform_bound_and_determinism(self):
        a = _build_store(seed=7)
        b = _build_store(seed=7)
        c = _build_store(seed=8)
        assert_array_equal(a["enc/w"].data, b["enc/w"].data)
        assert not np.array_equal(a["enc/w"].data, c["enc/w"].data)
        bound = 1.0 / np.sqrt(3)
        assert np.abs(a["enc/w"].data).max() <= bound

    def test_all_tensors_require_grad(self):
        store = _build_store()
        assert all(t.requires_grad for t in store.tensors())

    def test_zero_grad_clears(self):
        store = _build_store()
        t = store["enc/w"]
        t.grad = np.ones_like(t.data)
        store.zero_grad()
        assert t.grad is None

    def test_n_scalars(self):
        assert _build_store().n_scalars() == 12 + 4 + 2


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        store = _build_store(seed=3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, config={"depth": 2}, extra={"note": "x"})
        arrays, manifest = load_checkpoint(path)
        assert manifest["config"] == {"depth": 2}
        assert manifest["extra"] == {"note": "x"}
        for name, t in store.items():
            assert_array_equal(arrays[name], t.data)

    def test_checkpoint_is_plain_zip(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, _build_store(), config={})
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
        assert "manifest.json" in names
        assert "enc__w.rxt" in names

    def test_load_arrays_full_cycle(self, tmp_path):
        src = _build_store(seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, src, config={})
        dst = _build_store(seed=2)
        arrays, _ = load_checkpoint(path)
        dst.load_arrays(arrays)
        assert_array_equal(dst["enc/w"].data, src["enc/w"].data)

    def test_load_arrays_rejects_mismatched_names(self):
        store = _build_store()
        with pytest.raises(KeyError, match="mismatch"):
            store.load_arrays({"enc/w": np.zeros((4, 3))})

    def test_load_arrays_rejects_wrong_shape(self):
        store = _build_store()
        arrays = store.state_arrays()
        arrays["enc/b"] = np.zeros((5,))
        with pytest.raises(ValueError, match="shape"):
            store.load_arrays(arrays)
