"""The bootstrapped-teacher state machine.

Training proceeds in stages separated by breakpoints. Within a stage the
teacher is frozen (vanilla policy) or EMA-tracked (constant/cosine policies);
at a vanilla breakpoint the teacher takes the student's encoder weights and the
student is re-initialized. The three classic paradigms fall out of the policy
choice: a frozen pre-trained teacher is constant(1) with imported weights, an
online EMA teacher is constant(m < 1), and staged bootstrapping is vanilla.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .config import DistillConfig, MomentumPolicy, ModelConfig, OptimConfig
from .data import DatasetManifest
from .errors import ConfigError
from .store import ENCODER_PREFIX, ParameterStore, init_model
from .trainer import OptimizerState, StepRow, train_stage
from .teachers import make_target_provider


def stage_seed(base_seed: int, stage_index: int) -> int:
    """Deterministic per-stage seed derived from (base_seed, stage_index)."""
    ss = np.random.SeedSequence((base_seed, 2, stage_index))
    return int(ss.generate_state(1, np.uint64)[0])


def teacher_seed(base_seed: int) -> int:
    """Seed for the stage-0 random teacher, distinct from every stage seed."""
    ss = np.random.SeedSequence((base_seed, 1))
    return int(ss.generate_state(1, np.uint64)[0])


def momentum_coefficient(policy: MomentumPolicy, step: int, total_steps: int,
                         at_breakpoint: bool = False) -> float:
    """Teacher-update coefficient m for one step.

    vanilla: 0 at breakpoints, 1 otherwise (frozen within a stage).
    constant(c): always c. cosine(a, b): annealed from a at step 0 to b at the
    final step.
    """
    if policy.kind == "vanilla":
        return 0.0 if at_breakpoint else 1.0
    if policy.kind == "constant":
        return float(policy.value)
    frac = step / total_steps if total_steps > 0 else 1.0
    return policy.end - (policy.end - policy.start) * (math.cos(math.pi * frac) + 1.0) / 2.0


def update_teacher(teacher: ParameterStore, student: ParameterStore, m: float) -> ParameterStore:
    """In-place convex combination: teacher <- m*teacher + (1-m)*student.

    m == 1 leaves the teacher bit-exactly unchanged; m == 0 copies the student.
    Only names present in the teacher store are touched (the teacher is a plain
    encoder; decoder/projection weights have no counterpart).
    """
    if m == 1.0:
        return teacher
    for name, t in teacher.params.items():
        if name not in student.params:
            raise ConfigError(f"student store lacks teacher parameter {name!r}")
        s = student.params[name]
        if s.shape != t.shape:
            raise ConfigError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        if m == 0.0:
            t[...] = s
        else:
            t *= m
            t += (1.0 - m) * s.astype(t.dtype)
    return teacher


@dataclass
class PipelineState:
    """Mutable state of a multi-stage run."""

    stage_index: int
    epoch_in_stage: int
    epochs_per_stage: list[int]
    teacher: ParameterStore | None
    student: ParameterStore
    policy: MomentumPolicy = field(default_factory=MomentumPolicy.vanilla)
    student_init_policy: str = "reinit"
    seeds: list[int] = field(default_factory=list)
    base_seed: int = 0
    loss_trace: list[float] = field(default_factory=list)
    opt_state: OptimizerState | None = None

    def __post_init__(self):
        if self.stage_index >= len(self.epochs_per_stage):
            raise ConfigError("stage_index beyond the stage plan")
        if self.student_init_policy not in ("reinit", "keep"):
            raise ConfigError("student_init_policy must be 'reinit' or 'keep'")
        if not self.seeds:
            self.seeds = [stage_seed(self.base_seed, i)
                          for i in range(len(self.epochs_per_stage))]


def new_pipeline_state(config: ModelConfig, stages: list[int], base_seed: int = 0,
                       teacher: ParameterStore | None = None,
                       policy: MomentumPolicy | None = None,
                       student_reinit: bool = True, dtype=np.float32) -> PipelineState:
    """Fresh state: seeded random teacher (unless one is supplied) and student."""
    seeds = [stage_seed(base_seed, i) for i in range(len(stages))]
    if teacher is None:
        teacher = init_model(config, teacher_seed(base_seed), dtype=dtype,
                             encoder_only=True)
    student = init_model(config, seeds[0], dtype=dtype)
    return PipelineState(stage_index=0, epoch_in_stage=0, epochs_per_stage=list(stages),
                         teacher=teacher, student=student,
                         policy=policy or MomentumPolicy.vanilla(),
                         student_init_policy="reinit" if student_reinit else "keep",
                         seeds=seeds, base_seed=base_seed)


def advance_breakpoint(state: PipelineState) -> PipelineState:
    """Cross a stage boundary: under the vanilla policy the teacher takes the
    student's encoder weights (decoder/projection excluded); the student is
    re-initialized with the next stage's seed unless the policy says keep."""
    if state.epoch_in_stage != state.epochs_per_stage[state.stage_index]:
        raise RuntimeError(
            f"breakpoint called mid-stage (epoch {state.epoch_in_stage} of "
            f"{state.epochs_per_stage[state.stage_index]})")
    if state.stage_index + 1 >= len(state.epochs_per_stage):
        raise RuntimeError("no next stage to advance into")
    if state.policy.kind == "vanilla":
        teacher_cfg = None if state.teacher is None else state.teacher.config
        if teacher_cfg is not None and teacher_cfg.embed_dim != state.student.config.embed_dim:
            raise ConfigError(
                "cross-size teacher: student cannot be assigned to the teacher at a breakpoint")
        state.teacher = state.student.encoder_subset()
    state.stage_index += 1
    state.epoch_in_stage = 0
    state.loss_trace = []
    state.opt_state = None
    if state.student_init_policy == "reinit":
        state.student = init_model(state.student.config, state.seeds[state.stage_index],
                                   dtype=state.student.dtype)
    return state


@dataclass
class PipelineResult:
    checkpoints: list          # per stage: ParameterStore or file path
    metrics: list[tuple]       # (stage, epoch, loss, lr) rows
    state: PipelineState
    manifest_path: str | None = None


def run_pipeline(model_cfg: ModelConfig, distill: DistillConfig, optim: OptimConfig,
                 stages: list[int], data: DatasetManifest, *,
                 policy: MomentumPolicy | None = None, student_reinit: bool = True,
                 base_seed: int = 0, teacher: ParameterStore | None = None,
                 teacher_features: np.ndarray | None = None, augment=None,
                 out_dir: str | None = None, dtype=np.float32,
                 save_every_epoch: bool = False, per_step_metrics: bool = False,
                 resume_from: str | None = None) -> PipelineResult:
    """Drive a full multi-stage run; deterministic given seeds.

    Writes one checkpoint per stage end (plus per-epoch snapshots when asked),
    a stage manifest, and per-epoch metrics rows. With ``out_dir=None`` all
    results stay in memory.
    """
    from .checkpoint import load_run_state, save_run_state, save_store

    policy = policy or MomentumPolicy.vanilla()
    spe = len(data.records) // optim.batch_size
    if spe < 1:
        raise ConfigError("dataset smaller than one batch")
    start_stage, start_epoch = 0, 0
    if resume_from is not None:
        state, start_stage, start_epoch = load_run_state(resume_from)
    else:
        state = new_pipeline_state(model_cfg, stages, base_seed=base_seed, teacher=teacher,
                                   policy=policy, student_reinit=student_reinit, dtype=dtype)
    if teacher_features is not None and policy.kind != "vanilla":
        raise ConfigError("precomputed-feature teachers only support the vanilla policy")

    total_steps_all = sum(stages) * spe
    metrics: list[tuple] = []
    checkpoints: list = []
    checkpoint_by_stage: dict[int, str] = {}
    step_rows: list[StepRow] | None = [] if per_step_metrics else None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    if resume_from is not None and list(state.epochs_per_stage) != list(stages):
        raise ConfigError("resume checkpoint stage plan differs from the requested stages")

    for s in range(start_stage, len(stages)):
        stage_epochs = stages[s]
        # warmup cannot exceed the stage length; clip for short desk-scale stages
        stage_optim = OptimConfig(**{**optim.to_dict(),
                                     "warmup_epochs": min(optim.warmup_epochs, stage_epochs),
                                     "total_epochs": stage_epochs,
                                     "steps_per_epoch": spe})
        if state.opt_state is None:
            state.opt_state = OptimizerState.for_params(state.student.params)
        if s == 0 and teacher_features is not None:
            provider = make_target_provider(distill, features=teacher_features,
                                            projection_dim=model_cfg.projection_dim)
            if augment is not None:
                raise ConfigError("precomputed teacher features require augmentation off")
        else:
            provider = make_target_provider(distill, teacher=state.teacher,
                                            projection_dim=model_cfg.projection_dim)

        hook = None
        if policy.kind != "vanilla":
            offset = sum(stages[:s]) * spe

            def hook(step, _offset=offset):
                m = momentum_coefficient(policy, _offset + step, total_steps_all)
                update_teacher(state.teacher, state.student, m)

        epoch0 = start_epoch if s == start_stage else 0

        def on_epoch_end(epoch):
            if out_dir is not None and save_every_epoch:
                save_run_state(os.path.join(out_dir, f"snapshot_s{s}_e{epoch + 1}.ckpt"), state)

        _, trace = _train_stage_with_snapshots(state, data, stage_optim, distill,
                                               provider, augment, epoch0, hook,
                                               step_rows, on_epoch_end)
        for e in range(epoch0, stage_epochs):
            metrics.append((s, e, trace[e], lr_at_epoch_end(e, stage_optim)))

        if out_dir is not None:
            ckpt_path = os.path.join(out_dir, f"stage_{s}.ckpt")
            save_store(ckpt_path, state.student,
                       extra_meta={"stage_index": s, "epoch_in_stage": state.epoch_in_stage,
                                   "seeds": state.seeds, "base_seed": state.base_seed})
            checkpoints.append(ckpt_path)
            checkpoint_by_stage[s] = ckpt_path
        else:
            checkpoints.append(state.student.copy())
        if s + 1 < len(stages):
            advance_breakpoint(state)

    manifest_path = None
    if out_dir is not None:
        manifest_path = os.path.join(out_dir, "manifest.json")
        with open(manifest_path, "w") as f:
            json.dump({
                "base_seed": state.base_seed,
                "policy": policy.to_dict(),
                "stages": [{"index": i, "epochs": stages[i], "seed": state.seeds[i],
                            "checkpoint": checkpoint_by_stage.get(i)}
                           for i in range(len(stages))],
                "student_reinit": student_reinit,
                "model_config_hash": model_cfg.config_hash(),
            }, f, indent=2)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stage", "epoch", "loss", "lr"])
            writer.writerows(metrics)
        if step_rows is not None:
            with open(os.path.join(out_dir, "steps.csv"), "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["step", "epoch", "lr", "loss"])
                writer.writerows((r.step, r.epoch, r.lr, r.loss) for r in step_rows)
    return PipelineResult(checkpoints=checkpoints, metrics=metrics, state=state,
                          manifest_path=manifest_path)


def lr_at_epoch_end(epoch: int, optim: OptimConfig) -> float:
    from .trainer import lr_at

    return lr_at(min((epoch + 1) * optim.steps_per_epoch - 1, optim.total_steps - 1), optim)


def _train_stage_with_snapshots(state, data, stage_optim, distill, provider, augment,
                                start_epoch, hook, step_rows, on_epoch_end):
    """train_stage, one epoch at a time, so snapshots can be written between epochs."""
    trace = list(state.loss_trace)
    for epoch in range(start_epoch, stage_optim.total_epochs):
        _, trace = train_stage(state, data, stage_optim, distill,
                               target_provider=provider, augment=augment,
                               opt_state=state.opt_state, start_epoch=epoch,
                               step_hook=hook, step_rows=step_rows,
                               stop_after_epoch=epoch)
        on_epoch_end(epoch)
    return state.student, trace
