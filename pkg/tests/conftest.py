import numpy as np
import pytest

from vills.tensor import Tensor


def xavier_tensor(rng, shape, dtype=np.float64):
    scale = 1.0 / np.sqrt(shape[0]) if len(shape) > 1 else 1.0
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)


def make_loss_graph_params(rng, dim=8, hidden=16, bottleneck=8, prototypes=16, queries=4):
    """Well-conditioned f64 resampler+head parameters for gradient checks.

    The 0.02-scale training init leaves pre-normalization embeddings tiny,
    where l2_normalize curvature invalidates finite differences; gradient
    correctness is checked at unit scale instead.
    """
    params = {
        "resampler.queries": Tensor(rng.standard_normal((queries, dim)), requires_grad=True),
        "resampler.wq": xavier_tensor(rng, (dim, dim)),
        "resampler.wk": xavier_tensor(rng, (dim, dim)),
        "resampler.wv": xavier_tensor(rng, (dim, dim)),
        "resampler.wo": xavier_tensor(rng, (dim, dim)),
    }
    for name in ("feature", "masking"):
        params.update(
            {
                f"head.{name}.w1": xavier_tensor(rng, (dim, hidden)),
                f"head.{name}.b1": Tensor(rng.standard_normal(hidden) * 0.1, requires_grad=True),
                f"head.{name}.w2": xavier_tensor(rng, (hidden, hidden)),
                f"head.{name}.b2": Tensor(rng.standard_normal(hidden) * 0.1, requires_grad=True),
                f"head.{name}.w3": xavier_tensor(rng, (hidden, bottleneck)),
                f"head.{name}.b3": Tensor(rng.standard_normal(bottleneck) * 0.1, requires_grad=True),
                f"head.{name}.prototypes": Tensor(
                    rng.standard_normal((prototypes, bottleneck)), requires_grad=True
                ),
            }
        )
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
