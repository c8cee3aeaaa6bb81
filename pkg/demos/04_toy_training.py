"""
A short toy segmentation run
============================

Trains the toy SE-residual LinkNet on synthetic 32^3 cases with plain SGD
and the validation-plateau learning-rate rule. The acceptance run uses 20
cases and 50 epochs (about five minutes on one core); pass a smaller
epoch count for a quick look:

    python demos/04_toy_training.py 5
"""
import sys
import tempfile

from gliopipe.config import RunConfig, toy_train_config
from gliopipe.train import prepare_dataset, run_training
from gliopipe.volcore import synthetic_cohort

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
run = RunConfig(task="segment", train=toy_train_config("segment", epochs=epochs))
data = prepare_dataset(synthetic_cohort(20, 0), run, "segment")

out = tempfile.mkdtemp(prefix="gliopipe_")
result = run_training("segment", data, run, out_dir=out)
for r in result.records:
    if r.split == "val":
        print(f"epoch {r.epoch:2d}  loss {r.loss:.4f}  dice {r.dice:.4f}  iou {r.iou:.4f}  lr {r.lr:g}")
print("curves, metrics and checkpoint in", out)
