"""Python bindings for the privpool core."""

from ._privpool import (
    Model,
    avg_pool,
    avg_pr_pool,
    bce_loss,
    cov_pool,
    covariance,
    eig_sqrt,
    float_bits,
    generate_dataset,
    multiscale_attention_loss,
    ns_sqrt,
    rasterize_keypoints,
    run_suite,
    sqrt_residual,
    variance_regularizer,
)

__all__ = [
    "Model",
    "avg_pool",
    "avg_pr_pool",
    "bce_loss",
    "cov_pool",
    "covariance",
    "eig_sqrt",
    "float_bits",
    "generate_dataset",
    "multiscale_attention_loss",
    "ns_sqrt",
    "rasterize_keypoints",
    "run_suite",
    "sqrt_residual",
    "variance_regularizer",
]
