"""
Filling gaps with a diffusion model
===================================

Train a small noise predictor on clean windows, knock out a few entries,
and let a 50-step DDIM chain fill them back in while the observed entries
are held at their true values.
"""
import numpy as np

from stllmdf import data as D
from stllmdf.diffusion import DiffusionSchedule, NoisePredictor, ReverseSamplerConfig, \
    mean_impute, recover_missing
from stllmdf.training import train_denoiser

src = D.synthetic_series(steps=2000, nodes=4, seed=0)
train, val, test = D.split_chronological(D.build_windows(src, D.WindowSpec(12, 12)))
(train, val, test), norm = D.fit_apply_normalizer(train, val, test)

schedule = DiffusionSchedule.linear(1000, 1e-4, 0.02)
print("schedule: S=%d, abar_S=%.2e" % (schedule.steps, schedule.alpha_bars[-1]))

net = NoisePredictor(num_features=1, hidden=32, width=5, rng=np.random.default_rng(0))
curve = train_denoiser(net, train.inputs, train.mask, schedule, epochs=60, batch_size=16)
print("noise-prediction loss: first epoch %.3f, last epoch %.3f" % (curve[0]["loss"], curve[-1]["loss"]))

bad, _ = D.inject_missing(test, D.CorruptionSpec(0.02, seed=0))
missing = ~bad.mask
print("removed %d of %d input entries" % (missing.sum(), missing.size))

res = recover_missing(bad.inputs, bad.mask, net, schedule, ReverseSamplerConfig("ddim"),
                      num_steps=50, num_samples=16, sample_ids=bad.offsets)
imputed = mean_impute(bad.inputs, bad.mask)

truth = test.inputs[missing]
print("mean abs error on the removed entries (normalized units)")
print("  left as zeros    %.4f" % np.abs(bad.inputs[missing] - truth).mean())
print("  mean imputation  %.4f" % np.abs(imputed[missing] - truth).mean())
print("  diffusion        %.4f" % np.abs(res.values[missing] - truth).mean())
print("observed entries untouched:", np.array_equal(res.values[~missing], bad.inputs[~missing]))
