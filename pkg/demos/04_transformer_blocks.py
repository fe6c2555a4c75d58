"""
Transformer blocks over node-timestep tokens
============================================

The hidden tensor (batch, m, N, d_h) is flattened into m * N tokens and run
through pre-norm attention + feed-forward blocks.  The factorized layout
attends over time first and over nodes second.
"""
import numpy as np

from stllmdf.autodiff import Tensor
from stllmdf.transformer import BlockParams, stllm_forward

rng = np.random.default_rng(0)
d_h, heads = 32, 4
blocks = [BlockParams(d_h, heads, 4 * d_h, rng) for _ in range(2)]
z = Tensor(rng.standard_normal((3, 12, 4, d_h)).astype(np.float32))

for layout in ("joint", "factorized"):
    out = stllm_forward(z, blocks, 1e-6, layout)
    print("%-10s %s -> %s" % (layout, z.shape, out.shape))

n = sum(p.size for b in blocks for p in b.parameters().values())
print("parameters in two blocks:", n)
