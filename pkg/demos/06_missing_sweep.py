"""
Forecast error as inputs go missing
===================================

Re-uses a trained run directory (see 05_forecast_pipeline.py) and sweeps the
missing ratio, comparing no recovery, mean imputation and diffusion recovery.
The grid here goes past the 0.5% used by the acceptance sweep; at these
larger ratios mean imputation can come out ahead on forecast error even
though the diffusion fills are closer to the truth entry by entry.
"""
import sys
from pathlib import Path

from stllmdf import cli
from stllmdf.config import load_config

if len(sys.argv) < 2:
    sys.exit("usage: python3 06_missing_sweep.py RUN_DIR  (a directory filled by 05_forecast_pipeline.py)")
out = Path(sys.argv[1])
cfg = load_config(layers=2, heads=4, epochs=8,
                  missing_grid=(0.0, 0.01, 0.02, 0.05))

rows = cli.cmd_sweep_missing(cfg, out)
print("%-6s %10s %10s %10s" % ("p", "off", "mean", "diffusion"))
for r in rows:
    print("%-6g %10.4f %10.4f %10.4f" % (r["p"], r["mae_recovery_off"], r["mae_mean_impute"],
                                         r["mae_recovery_on"]))
print("\nwritten to", out / "sweep.csv")
