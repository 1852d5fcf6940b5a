"""KL-regularized normalization: python bindings over the C++ core.

The extension module `_klnorm` carries the implementation; this package
re-exports its public surface.
"""

from _klnorm import (  # noqa: F401
    Model,
    NumericalError,
    beta_at,
    cross_entropy,
    kl_diag_gauss,
    load_model,
    make_synthetic,
    run_config,
    train_all,
)

__all__ = [
    "Model",
    "NumericalError",
    "beta_at",
    "cross_entropy",
    "kl_diag_gauss",
    "load_model",
    "make_synthetic",
    "run_config",
    "train_all",
]
