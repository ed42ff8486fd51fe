"""Optimizer math, co-training determinism, checkpoints and resume."""

import numpy as np
import pytest

from cvfc.autodiff import Tensor
from cvfc.checkpoint import (
    CONFIG_JSON_KEY,
    load_training_state,
    read_tensors,
    save_training_state,
    write_tensors,
)
from cvfc.config import TrainConfig
from cvfc.data import synth_generate
from cvfc.errors import (
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    ShapeError,
    TrainingAbort,
)
from cvfc.model import build_model
from cvfc.train import SGD, co_train_step, epoch_lr, sgd_step, train


def _tiny_cfg(**kw):
    base = dict(
        seed=3,
        epochs=2,
        lr=0.01,
        weight_decay=0.01,
        batch_size=4,
        image_size=16,
        branch1="tiny38",
        branch2="tiny50",
        branch3="tiny38",
        augment=True,
    )
    base.update(kw)
    return TrainConfig(**base)


def _batch(n=4, size=16, seed=0):
    patches = synth_generate(seed=seed, count=n, size=size)
    return np.stack([p.image for p in patches]), np.stack([p.label for p in patches])


class TestSgdStep:
    def test_plain_formula(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        sgd_step(p, np.array([0.5]), lr=0.1, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.95)

    def test_weight_decay_formula(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        sgd_step(p, np.array([0.5]), lr=0.1, weight_decay=0.01)
        assert p.data[0] == pytest.approx(0.949)

    def test_zero_grad_zero_decay_fixed_point(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        sgd_step(p, np.array([0.0]), lr=0.1, weight_decay=0.0)
        assert p.data[0] == 1.0

    def test_nonfinite_grad_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(TrainingAbort, match="w13"):
            sgd_step(p, np.array([np.nan]), lr=0.1, weight_decay=0.0, name="w13")

    def test_shape_mismatch(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with pytest.raises(ShapeError):
            sgd_step(p, np.array([1.0]), lr=0.1, weight_decay=0.0)


class TestSgdOptimizer:
    def test_weight_decay_geometric_contraction(self):
        p = Tensor(np.full(3, 2.0, dtype=np.float64), requires_grad=True)
        opt = SGD({"w": p}, lr=0.1, weight_decay=0.01)
        k = 20
        for _ in range(k):
            opt.zero_grad()
            opt.step()
        expect = 2.0 * (1 - 0.1 * 0.01) ** k
        np.testing.assert_allclose(p.data, expect, atol=1e-9)

    def test_momentum_accumulates(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = SGD({"w": p}, lr=1.0, weight_decay=0.0, momentum=0.5)
        p.grad = np.array([1.0])
        opt.step()  # v = 1, w = -1
        p.grad = np.array([1.0])
        opt.step()  # v = 1.5, w = -2.5
        assert p.data[0] == pytest.approx(-2.5)

    def test_every_param_in_exactly_one_group(self):
        model = build_model(_tiny_cfg())
        opt = SGD(model.params(), lr=0.01)
        assert set(opt.params) == set(model.params())
        assert len(opt.params) == len(model.params())

    def test_nonfinite_gradient_named(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD({"lonely.weight": p}, lr=0.1)
        p.grad = np.array([np.inf])
        with pytest.raises(TrainingAbort, match="lonely.weight"):
            opt.step()


class TestEpochLr:
    def test_constant_default(self):
        cfg = _tiny_cfg(lr=0.006, epochs=10)
        assert epoch_lr(cfg, 0) == epoch_lr(cfg, 9) == 0.006

    def test_poly_decays(self):
        cfg = _tiny_cfg(lr=0.006, epochs=10, lr_schedule="poly")
        values = [epoch_lr(cfg, e) for e in range(10)]
        assert values[0] == 0.006
        assert all(a > b for a, b in zip(values, values[1:]))


class TestCoTrainStep:
    def test_descent_on_fixed_batch(self):
        cfg = _tiny_cfg(lr=1e-3, weight_decay=0.0)
        model = build_model(cfg)
        images, labels = _batch()
        opt = SGD(model.params(), lr=1e-3, weight_decay=0.0)
        # the step's breakdown is the loss before the update
        first = co_train_step(model, images, labels, opt)
        after, _ = model.objective(images, labels, training=True)
        assert after.item() < first.total

    def test_bitwise_deterministic(self):
        images, labels = _batch()

        def run():
            cfg = _tiny_cfg(lr=0.01)
            model = build_model(cfg)
            opt = SGD(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
            return [co_train_step(model, images, labels, opt).to_dict() for _ in range(3)]

        assert run() == run()

    def test_gradients_reach_every_parameter(self):
        cfg = _tiny_cfg()
        model = build_model(cfg)
        opt = SGD(model.params(), lr=0.01)
        seen = {name: False for name in model.params()}
        for seed in (0, 1):
            images, labels = _batch(seed=seed)
            opt.zero_grad()
            total, _ = model.objective(images, labels, training=True)
            total.backward()
            for name, p in model.params().items():
                if p.grad is not None and np.any(p.grad != 0):
                    seen[name] = True
        dead = [n for n, ok in seen.items() if not ok]
        assert not dead, f"parameters with no gradient: {dead}"


class TestTrainLoop:
    def test_epochs_zero_rejected(self):
        with pytest.raises(ConfigError):
            _tiny_cfg(epochs=0)

    def test_smoke_one_epoch(self):
        cfg = _tiny_cfg(epochs=1)
        patches = synth_generate(seed=8, count=8, size=16)
        logged = []
        result = train(cfg, patches, log_fn=logged.append)
        assert result.final_epoch == 1
        assert len(logged) == 1
        assert logged[0]["epoch"] == 1
        assert np.isfinite(logged[0]["total"])

    def test_dataset_smaller_than_batch_rejected(self):
        cfg = _tiny_cfg(batch_size=16)
        patches = synth_generate(seed=8, count=4, size=16)
        with pytest.raises(DataError):
            train(cfg, patches)

    def test_wrong_patch_size_rejected(self):
        cfg = _tiny_cfg()
        patches = synth_generate(seed=8, count=4, size=32)
        with pytest.raises(DataError):
            train(cfg, patches)

    def test_full_determinism(self):
        cfg = _tiny_cfg(epochs=2)
        patches = synth_generate(seed=9, count=8, size=16)
        r1 = train(cfg, patches)
        r2 = train(cfg, patches)
        assert r1.history == r2.history
        p1, p2 = r1.model.params(), r2.model.params()
        for name in p1:
            np.testing.assert_array_equal(p1[name].data, p2[name].data)


class TestCheckpointFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(10)
        tensors = {
            "a.w": rng.normal(size=(3, 4)).astype(np.float32),
            "b.w": rng.normal(size=(2,)).astype(np.float64),
            "__counter__": np.array([7, 9], dtype=np.uint64),
            "__blob__": np.frombuffer(b"hello", dtype=np.uint8).copy(),
        }
        path = tmp_path / "t.cvfc"
        write_tensors(path, tensors)
        back = read_tensors(path)
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_truncated_file_is_corrupt(self, tmp_path):
        path = tmp_path / "t.cvfc"
        write_tensors(path, {"w": np.zeros(4, dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 6])
        with pytest.raises(CorruptCheckpointError):
            read_tensors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.cvfc"
        write_tensors(path, {"w": np.zeros(2, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError, match="magic"):
            read_tensors(path)

    def test_version_bump_is_version_error(self, tmp_path):
        path = tmp_path / "t.cvfc"
        write_tensors(path, {"w": np.zeros(2, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[4] = 2  # little-endian u32 version field
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            read_tensors(path)

    def test_flipped_payload_bit_is_corrupt(self, tmp_path):
        path = tmp_path / "t.cvfc"
        write_tensors(path, {"w": np.ones(8, dtype=np.float32)})
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError, match="CRC"):
            read_tensors(path)

    def test_layout_fields(self, tmp_path):
        import struct

        path = tmp_path / "t.cvfc"
        write_tensors(path, {"ab": np.zeros((2, 3), dtype=np.float32)})
        raw = path.read_bytes()
        assert raw[:4] == b"CVFC"
        version, count = struct.unpack_from("<II", raw, 4)
        assert version == 1 and count == 1
        (name_len,) = struct.unpack_from("<H", raw, 12)
        assert name_len == 2
        assert raw[14:16] == b"ab"
        dtype_code, ndim = struct.unpack_from("<BB", raw, 16)
        assert dtype_code == 0 and ndim == 2
        dims = struct.unpack_from("<2Q", raw, 18)
        assert dims == (2, 3)


class TestTrainingState:
    def test_save_load_bitwise(self, tmp_path):
        cfg = _tiny_cfg(epochs=1)
        patches = synth_generate(seed=20, count=4, size=16)
        result = train(cfg, patches)
        path = tmp_path / "model.cvfc"
        save_training_state(path, result.model, result.optimizer, result.final_epoch, cfg)
        model2, opt2, epoch, cfg2 = load_training_state(path)
        assert epoch == 1
        assert cfg2 == cfg
        p1, p2 = result.model.params(), model2.params()
        for name in p1:
            np.testing.assert_array_equal(p1[name].data, p2[name].data)
        b1, b2 = result.model.buffers(), model2.buffers()
        for name in b1:
            np.testing.assert_array_equal(b1[name], b2[name])

    def test_save_load_save_byte_identical(self, tmp_path):
        cfg = _tiny_cfg(epochs=1)
        patches = synth_generate(seed=21, count=4, size=16)
        result = train(cfg, patches)
        p1, p2 = tmp_path / "a.cvfc", tmp_path / "b.cvfc"
        save_training_state(p1, result.model, result.optimizer, 1, cfg)
        model2, opt2, epoch, cfg2 = load_training_state(p1)
        save_training_state(p2, model2, opt2, epoch, cfg2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        patches = synth_generate(seed=22, count=8, size=16)

        full_cfg = _tiny_cfg(epochs=4)
        full = train(full_cfg, patches)

        half_cfg = _tiny_cfg(epochs=2)
        half = train(half_cfg, patches)
        path = tmp_path / "half.cvfc"
        # continuing run keeps the original total-epoch target
        save_training_state(path, half.model, half.optimizer, half.final_epoch, full_cfg)
        model, opt, done, cfg = load_training_state(path)
        resumed = train(cfg, patches, resume_from=(model, opt, done))

        assert [r["epoch"] for r in resumed.history] == [3, 4]
        np.testing.assert_array_equal(
            np.array([r["total"] for r in full.history[2:]]),
            np.array([r["total"] for r in resumed.history]),
        )
        pf, pr = full.model.params(), resumed.model.params()
        for name in pf:
            np.testing.assert_array_equal(pf[name].data, pr[name].data)

    def test_config_hash_mismatch_detected(self, tmp_path):
        cfg = _tiny_cfg(epochs=1)
        patches = synth_generate(seed=23, count=4, size=16)
        result = train(cfg, patches)
        path = tmp_path / "m.cvfc"
        save_training_state(path, result.model, result.optimizer, 1, cfg)
        tensors = read_tensors(path)
        doc = bytes(tensors[CONFIG_JSON_KEY].tobytes()).decode()
        tensors[CONFIG_JSON_KEY] = np.frombuffer(
            doc.replace('"lr": 0.01', '"lr": 0.02').encode(), dtype=np.uint8
        ).copy()
        write_tensors(path, tensors)
        with pytest.raises(CorruptCheckpointError, match="hash"):
            load_training_state(path)
