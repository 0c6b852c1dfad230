"""Checkpoint format, schedule anchors, training-step semantics, resume."""

import json

import numpy as np
import pytest

from voxrep import model as M
from voxrep import train as T
from voxrep.augment import AugmentConfig
from voxrep.errors import DataError, FormatError, TrainingError
from voxrep.model import FpnConfig
from voxrep.optim import AdamState
from voxrep.phantom import OrganClass, PhantomSpec, generate_dataset
from voxrep.sampler import PatchSpec, SamplerConfig
from voxrep.autograd import Tape, Tensor, backward
from voxrep.optim import collect_grads, zero_grads


def tiny_config(seed=0, **overrides):
    kwargs = dict(
        total_batches=3,
        volumes_per_batch=1,
        seed=seed,
        patch=PatchSpec((8, 8, 4)),
        fpn=FpnConfig(levels=2, base_channels=2, projector_hidden=8, projection_dim=8),
        sampler=SamplerConfig(positives_per_pair=4),
        augment=AugmentConfig(),
        val_volumes=1,
        val_batches=1,
        val_interval=1,
        checkpoint_interval=0,
    )
    kwargs.update(overrides)
    return T.PretrainConfig(**kwargs)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    spec = PhantomSpec(extents=(16, 16, 8), spacing=(1.0, 1.0, 2.0), organ_classes=[
        OrganClass("blob", (1, 1), (2.0, 4.0), 200.0, 10.0)])
    return generate_dataset(spec, count=4, seed=123, out_dir=out)


class TestCheckpointFormat:
    def make(self):
        rng = np.random.default_rng(0)
        tensors = {
            "encoder.stage0.conv0.weight": rng.standard_normal((2, 1, 3, 3, 3)).astype(np.float32),
            "projector.linear0.bias": rng.standard_normal(4).astype(np.float32),
            "scalar.step": np.float32(3.0),
        }
        meta = {"config": {"fpn": {"levels": 2}}, "rng_state": {"seed": 1},
                "representation_dim": 6}
        return T.Checkpoint(version=1, step=17, metadata=meta, tensors=tensors)

    def test_round_trip_bitwise(self, tmp_path):
        ckpt = self.make()
        path = tmp_path / "a.vxckpt"
        T.save_checkpoint(path, ckpt)
        back = T.load_checkpoint(path)
        assert back.step == 17
        assert back.metadata == ckpt.metadata
        assert sorted(back.tensors) == sorted(ckpt.tensors)
        for name in ckpt.tensors:
            np.testing.assert_array_equal(back.tensors[name], ckpt.tensors[name])
        T.save_checkpoint(tmp_path / "b.vxckpt", back)
        assert (tmp_path / "a.vxckpt").read_bytes() == (tmp_path / "b.vxckpt").read_bytes()

    def test_unknown_magic(self, tmp_path):
        path = tmp_path / "bad.vxckpt"
        path.write_bytes(b"NOTCKPT0" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            T.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v.vxckpt"
        T.save_checkpoint(path, self.make())
        raw = bytearray(path.read_bytes())
        raw[8:12] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            T.load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "t.vxckpt"
        T.save_checkpoint(path, self.make())
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 5])
        with pytest.raises(FormatError, match="truncated"):
            T.load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.vxckpt"
        T.save_checkpoint(path, self.make())
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            T.load_checkpoint(path)


class TestSchedule:
    def test_frozen_before_threshold(self):
        schedule = T.FinetuneSchedule()
        assert T.backbone_lr(0, schedule) == 0.0
        assert T.backbone_lr(14999, schedule) == 0.0

    def test_endpoints_exact(self):
        schedule = T.FinetuneSchedule()
        assert T.backbone_lr(15000, schedule) == 0.00003
        assert T.backbone_lr(16200, schedule) == 0.0003
        assert T.backbone_lr(20000, schedule) == 0.0003

    def test_geometric_midpoint(self):
        schedule = T.FinetuneSchedule()
        want = 0.00003 * np.sqrt(10.0)
        got = T.backbone_lr(15600, schedule)
        assert abs(got - want) <= 1e-12 * want


class TestPretrainStep:
    def test_two_identical_steps_bitwise(self, tiny_manifest):
        config = tiny_config()
        store = T.VolumeStore(T.read_manifest(tiny_manifest), config.patch)
        batch = T.make_pretrain_batch(store, config, step=0)

        results = []
        for _ in range(2):
            state = T.TrainState(step=0, params=T.init_pretrain_params(config),
                                 optimizer=AdamState(lr=config.learning_rate))
            state, value = T.pretrain_step(state, batch, config)
            results.append((value, {k: v.data.copy() for k, v in state.params.items()}))
        assert results[0][0] == results[1][0]
        for name in results[0][1]:
            np.testing.assert_array_equal(results[0][1][name], results[1][1][name])

    def test_one_batch_descent_direction(self, tiny_manifest):
        config = tiny_config()
        store = T.VolumeStore(T.read_manifest(tiny_manifest), config.patch)
        wins = 0
        for seed in range(10):
            cfg = tiny_config(seed=seed)
            batch = T.make_pretrain_batch(store, cfg, step=0)
            state = T.TrainState(step=0, params=T.init_pretrain_params(cfg),
                                 optimizer=AdamState(lr=cfg.learning_rate))
            before = T._batch_loss(state.params, cfg, batch).item()
            state, _ = T.pretrain_step(state, batch, cfg)
            after = T._batch_loss(state.params, cfg, batch).item()
            wins += after < before
        assert wins >= 9

    def test_single_pair_batch_gives_zero_loss_and_projector_grad(self, tiny_manifest):
        config = tiny_config(sampler=SamplerConfig(positives_per_pair=1))
        store = T.VolumeStore(T.read_manifest(tiny_manifest), config.patch)
        batch = T.make_pretrain_batch(store, config, step=0)
        assert batch.num_pairs == 1
        params = T.init_pretrain_params(config)
        zero_grads(params)
        with Tape() as tape:
            loss = T._batch_loss(params, config, batch)
        assert loss.item() == 0.0
        backward(loss, tape)
        grads = collect_grads(params)
        for name, g in grads.items():
            if name.startswith("projector."):
                np.testing.assert_allclose(g, 0.0, atol=1e-12)


class TestPretrainLoop:
    def test_zero_batches_writes_init_checkpoint(self, tiny_manifest, tmp_path):
        config = tiny_config(total_batches=0)
        final = T.pretrain(config, tiny_manifest, tmp_path / "run")
        assert final.step == 0
        files = sorted(p.name for p in (tmp_path / "run").iterdir())
        assert files == ["ckpt_final.vxckpt", "metrics.jsonl"]
        loaded = T.load_checkpoint(tmp_path / "run" / "ckpt_final.vxckpt")
        assert loaded.metadata["representation_dim"] == M.representation_dim(config.fpn)

    def test_run_and_resume_bitwise(self, tiny_manifest, tmp_path):
        config = tiny_config(total_batches=4, checkpoint_interval=2)
        full = T.pretrain(config, tiny_manifest, tmp_path / "full")
        T.pretrain(config, tiny_manifest, tmp_path / "part")  # writes ckpt at step 2
        resumed = T.pretrain(config, tiny_manifest, tmp_path / "resumed",
                             resume_from=tmp_path / "part" / "ckpt_000002.vxckpt")
        assert resumed.step == full.step == 4
        a = (tmp_path / "full" / "ckpt_final.vxckpt").read_bytes()
        b = (tmp_path / "resumed" / "ckpt_final.vxckpt").read_bytes()
        assert a == b

    def test_same_config_reruns_bitwise(self, tiny_manifest, tmp_path):
        config = tiny_config(total_batches=2)
        T.pretrain(config, tiny_manifest, tmp_path / "r1")
        T.pretrain(config, tiny_manifest, tmp_path / "r2")
        assert (tmp_path / "r1" / "ckpt_final.vxckpt").read_bytes() == \
            (tmp_path / "r2" / "ckpt_final.vxckpt").read_bytes()
        # metrics identical apart from wall time
        for l1, l2 in zip((tmp_path / "r1" / "metrics.jsonl").read_text().splitlines(),
                          (tmp_path / "r2" / "metrics.jsonl").read_text().splitlines()):
            d1, d2 = json.loads(l1), json.loads(l2)
            d1.pop("wall_ms"), d2.pop("wall_ms")
            assert d1 == d2

    def test_metrics_schema(self, tiny_manifest, tmp_path):
        config = tiny_config(total_batches=2)
        T.pretrain(config, tiny_manifest, tmp_path / "m")
        lines = [json.loads(l) for l in (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()]
        assert len(lines) == 3  # init val line + 2 steps
        for line in lines:
            for key in ("step", "loss", "lr_backbone", "lr_head", "wall_ms"):
                assert key in line
        assert all(np.isfinite(line["loss"]) for line in lines[1:])

    def test_worker_prefetch_matches_inline(self, tiny_manifest, tmp_path):
        base = tiny_config(total_batches=3)
        T.pretrain(base, tiny_manifest, tmp_path / "w0")
        threaded = tiny_config(total_batches=3, workers=2)
        T.pretrain(threaded, tiny_manifest, tmp_path / "w2")
        assert (tmp_path / "w0" / "ckpt_final.vxckpt").read_bytes() == \
            (tmp_path / "w2" / "ckpt_final.vxckpt").read_bytes()


@pytest.fixture(scope="module")
def tiny_backbone_ckpt(tiny_manifest, tmp_path_factory):
    config = tiny_config(total_batches=2)
    return T.pretrain(config, tiny_manifest, tmp_path_factory.mktemp("pre"))


def probe_config(**overrides):
    kwargs = dict(mode="linear", total_batches=3, batch_size=2, num_classes=2,
                  seed=1, patch=PatchSpec((8, 8, 4)))
    kwargs.update(overrides)
    return T.ProbeConfig(**kwargs)


class TestProbe:
    def test_frozen_backbone_unchanged(self, tiny_backbone_ckpt, tiny_manifest, tmp_path):
        ckpt = T.train_probe(tiny_backbone_ckpt, probe_config(), tiny_manifest,
                             tmp_path / "probe", frozen=True)
        for name, arr in tiny_backbone_ckpt.tensors.items():
            if name.startswith(("encoder.", "decoder.")):
                np.testing.assert_array_equal(ckpt.tensors[name], arr)
        assert any(k.startswith("linear_head.") for k in ckpt.tensors)

    def test_linear_probe_parameter_count(self, tiny_backbone_ckpt, tiny_manifest, tmp_path):
        config = probe_config(num_classes=3)
        ckpt = T.train_probe(tiny_backbone_ckpt, config, tiny_manifest,
                             tmp_path / "probe2", frozen=True)
        head_sizes = sum(v.size for k, v in ckpt.tensors.items()
                         if k.startswith("linear_head."))
        fpn = T.fpn_config_from_metadata(tiny_backbone_ckpt.metadata)
        want = sum(3 * fpn.channels(l) for l in fpn.representation_levels) + 3
        assert head_sizes == want

    def test_nonlinear_probe_runs(self, tiny_backbone_ckpt, tiny_manifest, tmp_path):
        ckpt = T.train_probe(tiny_backbone_ckpt, probe_config(mode="nonlinear"),
                             tiny_manifest, tmp_path / "probe3", frozen=True)
        assert any(k.startswith("nonlinear_head.") for k in ckpt.tensors)
        assert ckpt.metadata["head"]["mode"] == "nonlinear"

    def test_probe_deterministic(self, tiny_backbone_ckpt, tiny_manifest, tmp_path):
        a = T.train_probe(tiny_backbone_ckpt, probe_config(), tiny_manifest,
                          tmp_path / "pa", frozen=True)
        b = T.train_probe(tiny_backbone_ckpt, probe_config(), tiny_manifest,
                          tmp_path / "pb", frozen=True)
        assert (tmp_path / "pa" / "ckpt_final.vxckpt").read_bytes() == \
            (tmp_path / "pb" / "ckpt_final.vxckpt").read_bytes()

    def test_cross_entropy_label_range_error(self):
        logits = Tensor(np.zeros((1, 2, 2, 2, 2), np.float32))
        labels = np.full((1, 2, 2, 2), 5)
        with pytest.raises(DataError):
            T.cross_entropy(logits, labels, num_classes=2)


class TestFinetune:
    def test_freeze_then_ramp(self, tiny_backbone_ckpt, tiny_manifest, tmp_path):
        schedule = T.FinetuneSchedule(freeze_batches=2, ramp_batches=2,
                                      backbone_lr_start=1e-4, backbone_lr_end=1e-3)
        config = probe_config(mode="nonlinear", total_batches=5)
        ckpt = T.finetune(tiny_backbone_ckpt, config, schedule, tiny_manifest,
                          tmp_path / "ft")
        # backbone must have moved after the unfreeze point
        changed = any(
            not np.array_equal(ckpt.tensors[name], tiny_backbone_ckpt.tensors[name])
            for name in tiny_backbone_ckpt.tensors if name.startswith("encoder."))
        assert changed
        lines = [json.loads(l) for l in
                 (tmp_path / "ft" / "metrics.jsonl").read_text().splitlines()]
        assert [l["lr_backbone"] for l in lines[:2]] == [0.0, 0.0]
        assert lines[2]["lr_backbone"] == pytest.approx(1e-4)
        assert lines[4]["lr_backbone"] == pytest.approx(1e-3)

    def test_frozen_phase_only_trains_head(self, tiny_backbone_ckpt, tiny_manifest, tmp_path):
        schedule = T.FinetuneSchedule(freeze_batches=100, ramp_batches=10)
        config = probe_config(mode="nonlinear", total_batches=3)
        ckpt = T.finetune(tiny_backbone_ckpt, config, schedule, tiny_manifest,
                          tmp_path / "ft2")
        for name, arr in tiny_backbone_ckpt.tensors.items():
            if name.startswith(("encoder.", "decoder.")):
                np.testing.assert_array_equal(ckpt.tensors[name], arr)
