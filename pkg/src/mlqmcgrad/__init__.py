"""Multilevel quasi-Monte Carlo gradient estimation for an elliptic
tracking-control problem with lognormal random diffusion.

Subpackage layout:

- ``covariance``: Matern covariance kernels.
- ``circulant_field``: circulant-embedding sampling of the lognormal field.
- ``fem``: P1 finite elements, state/adjoint solves, multigrid-PCG.
- ``qmc``: rank-1 lattice rules, random shifting, inverse normal map.
- ``estimators``: MC/QMC/MLMC/MLQMC gradient estimators and allocation.
- ``cli``: configuration-driven experiment runner.
"""

from .covariance import MaternParams, MeanField, matern_cov
from .circulant_field import (
    CirculantEmbedding,
    FieldRealization,
    NestingViolation,
    PaddingExhausted,
    UniformGrid,
    build_embedding,
    eval_field,
    factor_row,
    restrict_to_coarse,
    sample_field,
)

__version__ = "0.1.0"
