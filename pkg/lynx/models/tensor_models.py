from enum import Enum

import numpy as np
import numpy.typing as npt
from pydantic import Field

from .base import LynxModel

# Row-major float32 matrix; weights are stored D_out x D_in
DenseMatrix = npt.NDArray[np.float32]

RNG_ALGORITHM = "numpy.PCG64"


class DistributionKind(str, Enum):
    GAUSSIAN = "gaussian"
    SPIKE_SLAB = "spike-slab"


class RandomSpec(LynxModel):
    """Generator recipe for weight-like (gaussian) and activation-like (spike-slab) matrices"""
    kind: DistributionKind = DistributionKind.GAUSSIAN
    seed: int = Field(0, ge=0, lt=2**64)

    # gaussian
    mean: float = Field(0.0, allow_inf_nan=False)
    stddev: float = Field(1.0, gt=0.0, allow_inf_nan=False)

    # spike-slab
    active_fraction: float = Field(0.1, gt=0.0, le=1.0)
    spike_stddev: float = Field(0.01, gt=0.0, allow_inf_nan=False)
    slab_stddev: float = Field(1.0, gt=0.0, allow_inf_nan=False)

    @classmethod
    def gaussian(cls, mean: float = 0.0, stddev: float = 1.0, seed: int = 0) -> "RandomSpec":
        return cls.build(kind=DistributionKind.GAUSSIAN, mean=mean, stddev=stddev, seed=seed)

    @classmethod
    def spike_slab(
        cls,
        active_fraction: float = 0.1,
        spike_stddev: float = 0.01,
        slab_stddev: float = 1.0,
        seed: int = 0,
    ) -> "RandomSpec":
        return cls.build(
            kind=DistributionKind.SPIKE_SLAB,
            active_fraction=active_fraction,
            spike_stddev=spike_stddev,
            slab_stddev=slab_stddev,
            seed=seed,
        )
