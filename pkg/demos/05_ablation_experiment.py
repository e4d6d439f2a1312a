"""Ablation grid: every selection variant plus a location-count sweep.

Each cell is train -> prune -> fine-tune -> evaluate, aggregated as the
mean over seeds.  Shrink or grow the seed list to taste; everything is
deterministic per seed.
"""

from prunekit import harness, model_io, pruner

kw = dict(dims=(1, 12, 12), noise=0.25, amplitude=0.8, jitter=1.2)
train_ds = model_io.synth_dataset(11, 600, 8, split="train", **kw)
test_ds = model_io.synth_dataset(12, 300, 8, split="test", **kw)
spec = harness.desk_net(input_dims=(1, 12, 12), num_classes=8, widths=(6, 8, 8, 10))

seeds = (0, 1)
cells = [harness.ExperimentCell(v, s, 10) for v in pruner.VARIANTS for s in seeds]
cells += [harness.ExperimentCell("cpli", s, 1) for s in seeds]

result = harness.run_experiment(
    harness.ExperimentPlan(cells=tuple(cells)), spec, train_ds, test_ds,
    harness.TrainConfig(epochs=10, batch_size=32, lr=0.05),
    harness.TrainConfig(epochs=5, batch_size=32, lr=0.01),
    pruner.PruneConfig(flops_target=2.0, probe_images=96))

print("baseline accuracy per seed:", result.baseline_accuracy)
print()
print(harness.format_experiment_table(result))
