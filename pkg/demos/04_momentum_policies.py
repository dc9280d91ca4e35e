"""Three teacher-update paradigms, one momentum knob.

The coefficient m in  teacher <- m*teacher + (1-m)*student  spans the design
space: m=1 with imported weights is a frozen pre-trained teacher, m slightly
below 1 is an online EMA teacher, and the staged ("vanilla") policy freezes
the teacher within a stage and copies the student at breakpoints (m=0 there).
"""

from maskdistill import (DistillConfig, ModelConfig, MomentumPolicy, OptimConfig,
                         init_model, momentum_coefficient, run_pipeline, split_manifest,
                         synthetic_gratings)

print("momentum coefficients by policy:")
for policy, label in [(MomentumPolicy.vanilla(), "vanilla"),
                      (MomentumPolicy.constant(0.9998), "constant(0.9998)"),
                      (MomentumPolicy.cosine(0.996, 1.0), "cosine(0.996, 1)")]:
    mid = momentum_coefficient(policy, 500, 1000)
    at_bp = momentum_coefficient(policy, 500, 1000, at_breakpoint=True)
    print(f"  {label:<18} mid-run m={mid:.4f}   at breakpoint m={at_bp:.4f}")

corpus = synthetic_gratings(600, 10, 32, seed=7)
train, _ = split_manifest(corpus, 0.1, seed=7)
model = ModelConfig(image_size=32, patch_size=8, embed_dim=64, depth=2, num_heads=4)
distill = DistillConfig(target="block_2", mask_ratio=0.75)
optim = OptimConfig(base_lr=4e-3, batch_size=64, warmup_epochs=1)

print("\nrunning 2 short stages under each policy; watch the teacher digest:")
imported = init_model(model, seed=123, encoder_only=True)
for policy, label, teacher in [
    (MomentumPolicy.constant(1.0), "frozen teacher (m=1)", imported.copy()),
    (MomentumPolicy.constant(0.999), "online EMA (m=0.999)", imported.copy()),
    (MomentumPolicy.vanilla(), "staged handoff", None),
]:
    before = teacher.digest()[:12] if teacher is not None else "fresh-random"
    result = run_pipeline(model, distill, optim, [2, 2], train, base_seed=0,
                          policy=policy, teacher=teacher)
    after = result.state.teacher.digest()[:12]
    moved = "unchanged" if before == after else "moved"
    print(f"  {label:<22} teacher {before} -> {after} ({moved})")
