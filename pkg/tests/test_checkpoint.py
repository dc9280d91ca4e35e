import numpy as np
import pytest

from maskdistill import (DataError, DistillConfig, OptimConfig, init_model, load_checkpoint,
                         load_run_state, load_store, new_pipeline_state, save_checkpoint,
                         save_run_state, save_store, synthetic_gratings, split_manifest)
from maskdistill.checkpoint import MAGIC
from maskdistill.teachers import make_target_provider
from maskdistill.trainer import train_stage

from helpers import small_config


def test_store_roundtrip_bit_exact(tmp_path):
    store = init_model(small_config(), seed=3)
    path = str(tmp_path / "model.ckpt")
    save_store(path, store, extra_meta={"stage_index": 1, "epoch_in_stage": 4,
                                        "seeds": [1, 2]})
    loaded = load_store(path)
    assert loaded.digest() == store.digest()
    assert loaded.config == store.config
    assert loaded.meta["stage_index"] == 1
    assert loaded.meta["config_hash"] == store.config_hash()
    # payloads are little-endian float32
    assert all(v.dtype == np.float32 for v in loaded.params.values())


def test_double_roundtrip_stable(tmp_path):
    store = init_model(small_config(), seed=4)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_store(p1, store)
    again = load_store(p1)
    save_store(p2, again)
    assert load_store(p2).digest() == store.digest()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_float64_store_downcast(tmp_path):
    store = init_model(small_config(), seed=5, dtype=np.float64)
    path = str(tmp_path / "m.ckpt")
    save_store(path, store)
    loaded = load_store(path)
    assert loaded.dtype == np.float32
    assert np.allclose(loaded["enc.ln.g"], store["enc.ln.g"].astype(np.float32))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(DataError):
        load_checkpoint(str(path))
    assert MAGIC != b"NOTMAGIC"


def test_generic_tensor_container_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32),
               "b/c": rng.standard_normal(7).astype(np.float32)}
    path = str(tmp_path / "t.ckpt")
    save_checkpoint(path, tensors, {"note": "fixture", "n": 2})
    meta, loaded = load_checkpoint(path)
    assert meta == {"note": "fixture", "n": 2}
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])


def test_run_state_roundtrip_preserves_everything(tmp_path):
    cfg = small_config()
    data, _ = split_manifest(synthetic_gratings(128, 10, 32, seed=1), 0.25, seed=1)
    state = new_pipeline_state(cfg, [2, 1], base_seed=8)
    optim = OptimConfig(base_lr=2e-3, batch_size=32, warmup_epochs=1,
                        total_epochs=2, steps_per_epoch=len(data) // 32)
    distill = DistillConfig(target="block_2", mask_ratio=0.75)
    provider = make_target_provider(distill, teacher=state.teacher,
                                    projection_dim=cfg.projection_dim)
    train_stage(state, data, optim, distill, target_provider=provider, stop_after_epoch=0)
    path = str(tmp_path / "run.ckpt")
    save_run_state(path, state)
    loaded, stage, epoch = load_run_state(path)
    assert (stage, epoch) == (0, 1)
    assert loaded.student.digest() == state.student.digest()
    assert loaded.teacher.digest() == state.teacher.digest()
    assert loaded.seeds == state.seeds
    assert loaded.loss_trace == state.loss_trace
    assert loaded.opt_state.step == state.opt_state.step
    for k in state.opt_state.m:
        assert np.allclose(loaded.opt_state.m[k], state.opt_state.m[k].astype(np.float32))


def test_load_store_rejects_run_state(tmp_path):
    cfg = small_config()
    state = new_pipeline_state(cfg, [1], base_seed=0)
    path = str(tmp_path / "run.ckpt")
    save_run_state(path, state)
    with pytest.raises(DataError):
        load_store(path)
