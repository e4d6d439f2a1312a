"""End to end: train, prune to a 2x FLOPs budget, fine-tune, report."""

from prunekit import harness, model_io, pruner

kw = dict(dims=(1, 12, 12), noise=0.25, amplitude=0.8, jitter=1.2)
train_ds = model_io.synth_dataset(11, 600, 8, split="train", **kw)
test_ds = model_io.synth_dataset(12, 300, 8, split="test", **kw)

spec = harness.desk_net(input_dims=(1, 12, 12), num_classes=8, widths=(6, 8, 8, 10))
ckpt = harness.train(spec, train_ds,
                     harness.TrainConfig(epochs=10, batch_size=32, lr=0.05, seed=0),
                     eval_data=test_ds)
print(f"baseline accuracy {ckpt.metadata['accuracy']:.4f}, "
      f"FLOPs {harness.flops_count(spec).total}")

cfg = pruner.PruneConfig(flops_target=2.0, probe_images=96, num_locations=10,
                         variant="cpli", seed=0)
pruned, report, traces = harness.prune(ckpt, train_ds, test_ds, cfg)
for t in traces:
    print(f"  conv {t.conv_ordinal}: kept {len(t.support)}/{t.budget} "
          f"channels {list(t.support)}, lambda {t.lambda_final:.3g}, "
          f"probe error {t.residual_before:.2f} -> {t.residual_after:.2f}")
print(f"pruned: CR {report.compression_ratio:.2f}x, accuracy "
      f"{report.accuracy_baseline:.4f} -> {report.accuracy_pruned:.4f} before fine-tuning")

tuned = harness.finetune(pruned, train_ds,
                         harness.TrainConfig(epochs=5, batch_size=32, lr=0.01,
                                             seed=0), eval_data=test_ds)
report = report.with_finetuned(harness.evaluate(tuned, test_ds))
print(f"fine-tuned accuracy {report.accuracy_finetuned:.4f} "
      f"(drop {report.accuracy_drop:+.4f})")
print()
print(harness.format_report(report))
