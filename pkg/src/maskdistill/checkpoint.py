"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(metadata plus a tensor index of name/shape/offset), then the concatenated
tensor payloads as little-endian 32-bit floats. Round trips are bit-exact for
float32 stores; other dtypes are cast to float32 on save.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig, MomentumPolicy
from .errors import DataError
from .store import ParameterStore

MAGIC = b"MKDCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    index = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": "<f4", "offset": offset, "nbytes": arr.nbytes})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta,
                         "tensors": index}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        payload = f.read()
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], tensors


def save_store(path: str, store: ParameterStore, extra_meta: dict | None = None) -> None:
    """Write a parameter store as a plain checkpoint (the stage-end artifact)."""
    meta = {"kind": "store",
            "model_config": store.config.to_dict(),
            "init_seed": store.init_seed,
            "config_hash": store.config_hash()}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, store.params, meta)


def load_store(path: str) -> ParameterStore:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") not in ("store", None):
        raise DataError(f"{path} holds {meta.get('kind')!r}, not a parameter store")
    if "model_config" not in meta:
        raise DataError(f"{path} lacks a model config record")
    config = ModelConfig(**meta["model_config"])
    return ParameterStore(params=tensors, config=config,
                          init_seed=meta.get("init_seed", 0), meta=meta)


def save_run_state(path: str, state) -> None:
    """Mid-run snapshot: student + teacher + optimizer moments, with enough
    metadata (stage, epoch, seeds, policy) to resume bit-exactly."""
    tensors: dict[str, np.ndarray] = {}
    for k, v in state.student.params.items():
        tensors[f"student.{k}"] = v
    if state.teacher is not None:
        for k, v in state.teacher.params.items():
            tensors[f"teacher.{k}"] = v
    opt_step = 0
    if state.opt_state is not None:
        opt_step = state.opt_state.step
        for k, v in state.opt_state.m.items():
            tensors[f"opt.m.{k}"] = v
        for k, v in state.opt_state.v.items():
            tensors[f"opt.v.{k}"] = v
    meta = {"kind": "run_state",
            "stage_index": state.stage_index,
            "epoch_in_stage": state.epoch_in_stage,
            "epochs_per_stage": list(state.epochs_per_stage),
            "seeds": [int(s) for s in state.seeds],
            "base_seed": state.base_seed,
            "policy": state.policy.to_dict(),
            "student_init_policy": state.student_init_policy,
            "loss_trace": list(state.loss_trace),
            "opt_step": opt_step,
            "student_config": state.student.config.to_dict(),
            "student_init_seed": state.student.init_seed,
            "teacher_config": None if state.teacher is None else state.teacher.config.to_dict(),
            "teacher_init_seed": None if state.teacher is None else state.teacher.init_seed}
    save_checkpoint(path, tensors, meta)


def load_run_state(path: str):
    """Returns (PipelineState, stage_index, epoch_in_stage) ready to resume."""
    from .pipeline import PipelineState
    from .trainer import OptimizerState

    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "run_state":
        raise DataError(f"{path} is not a run-state snapshot")
    student_cfg = ModelConfig(**meta["student_config"])
    student = ParameterStore(
        params={k[len("student."):]: v for k, v in tensors.items() if k.startswith("student.")},
        config=student_cfg, init_seed=meta.get("student_init_seed", 0))
    teacher = None
    if meta["teacher_config"] is not None:
        teacher = ParameterStore(
            params={k[len("teacher."):]: v for k, v in tensors.items() if k.startswith("teacher.")},
            config=ModelConfig(**meta["teacher_config"]),
            init_seed=meta.get("teacher_init_seed", 0))
    opt = None
    m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
    v = {k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    if m:
        opt = OptimizerState(m=m, v=v, step=meta.get("opt_step", 0))
    state = PipelineState(stage_index=meta["stage_index"],
                          epoch_in_stage=meta["epoch_in_stage"],
                          epochs_per_stage=list(meta["epochs_per_stage"]),
                          teacher=teacher, student=student,
                          policy=MomentumPolicy(**meta["policy"]),
                          student_init_policy=meta["student_init_policy"],
                          seeds=[int(s) for s in meta["seeds"]],
                          base_seed=meta["base_seed"],
                          loss_trace=list(meta["loss_trace"]))
    state.opt_state = opt
    return state, meta["stage_index"], meta["epoch_in_stage"]
