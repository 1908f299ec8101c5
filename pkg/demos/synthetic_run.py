"""Train one supervision setting on a small synthetic task and print the report.

Usage: python demos/synthetic_run.py [qa|qa+self|full|full+self] [epochs]
"""

import sys

from tqground.config import RunConfig
from tqground.data import synth_splits
from tqground.losses import SupervisionSetting
from tqground.metrics import evaluate
from tqground.trainer import eval_records, infer, train

setting = SupervisionSetting.parse(sys.argv[1] if len(sys.argv) > 1 else "qa+self")
cfg = RunConfig()
cfg.synth.n_train, cfg.synth.n_val = 200, 100
cfg.train.epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 5

tr, va = synth_splits(cfg.synth)
model, log = train(tr, setting, cfg)
for row in log.epochs:
    print(f"epoch {row['epoch']:2d}  total {row['total']:.4f}")
print(evaluate(eval_records(infer(va, model, setting, cfg.wsqg))).to_table(), end="")
