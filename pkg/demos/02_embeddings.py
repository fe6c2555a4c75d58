"""
Feature, periodicity and adaptive embeddings
============================================

A window of shape (batch, m, N, d) becomes a hidden tensor of width
d_h = 3 * d_f + d_a: one block of feature projection, two of calendar
lookups (day of week, time of day) and one learnable per-position,
per-node table.
"""
import numpy as np

from stllmdf.embedding import EmbeddingConfig, EmbeddingTables, embed

cfg = EmbeddingConfig(input_len=12, num_nodes=4, num_features=1, d_f=24, d_a=80, slots_per_day=288)
tables = EmbeddingTables(cfg, np.random.default_rng(0))
print("d_f = %d, d_a = %d  ->  d_h = %d" % (cfg.d_f, cfg.d_a, cfg.d_h))

x = np.random.default_rng(1).standard_normal((2, 12, 4, 1)).astype(np.float32)
dow = np.zeros((2, 12), dtype=int)
tod = np.tile(np.arange(12), (2, 1))
z = embed(x, dow, tod, tables)
print("input", x.shape, "->", "hidden", z.shape)

# the calendar part does not depend on the node
tod_part = z.data[..., 2 * cfg.d_f:3 * cfg.d_f]
print("time-of-day block identical across nodes:", np.allclose(tod_part[:, :, :1], tod_part))

for name, p in tables.parameters().items():
    print("  %-8s %s" % (name, p.shape))
