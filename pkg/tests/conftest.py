import numpy as np
import pytest

import bdattn as bd


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Trigger JIT compilation of both kernels at both precisions up front,
    so timed assertions later in the suite measure the algorithms only."""
    for precision in (bd.Precision.P32, bd.Precision.P64):
        a = bd.Tensor2D(np.ones((4, 3)), precision)
        b = bd.Tensor2D(np.ones((3, 8)), precision)
        bd.matmul(a, b)
        x = bd.Tensor2D(np.ones((2, 4)), precision)
        c = bd.Tensor2D(np.ones((2, 4)), precision)
        bd.fused_kv_proj(x, c, d_h=2, n_heads=2, tag=bd.Tag.FIRST)
        bd.fused_kv_proj(x, c, d_h=2, n_heads=2, tag=bd.Tag.LAST)
