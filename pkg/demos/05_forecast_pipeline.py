"""
From raw series to a forecast report
====================================

The same steps the command line runs, driven from Python on a small
configuration: prepare, train the denoiser, train the forecaster, evaluate
it against the historical-index baseline.
"""
import sys
import tempfile
from pathlib import Path

from stllmdf import cli
from stllmdf.config import load_config

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
cfg = load_config(layers=2, heads=4, epochs=8)
print("config hash", cfg.hash(), "-> artifacts in", out)

prep = cli.cmd_prepare(cfg, out)
print("windows: train %d, val %d, test %d" % (len(prep.train), len(prep.val), len(prep.test)))

cli.cmd_train_denoiser(cfg, out)
cli.cmd_train(cfg, out)

model = cli.cmd_eval(cfg, out)
hi = cli.cmd_eval(cfg, out, baseline="hi")
print("\n%-12s %8s %8s" % ("", "MAE", "RMSE"))
print("%-12s %8.3f %8.3f" % ("forecaster", model.mae, model.rmse))
print("%-12s %8.3f %8.3f" % ("HI baseline", hi.mae, hi.rmse))
for row in model.per_horizon:
    print("  horizon %-7s MAE %.3f" % (row["label"], row["mae"]))
