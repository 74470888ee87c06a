"""Random perturbation of a nominal model on a declared uncertain support.

Each supported entry of (A0, B0) is scaled by an independent factor
``1 + delta`` with ``delta ~ Uniform(-eta/100, +eta/100)``.  Entries outside
the support, including structural zeros, are copied verbatim.  Draws use
numpy's PCG64 generator seeded from the spec, iterating the support in
row-major order, so a seed pins the perturbed model bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .model import SmallSignalModel

PRNG_ALGORITHM = "numpy.random.PCG64"


@dataclass(frozen=True)
class UncertaintySpec:
    """Perturbation level (percent), uncertain index sets, and seed."""

    eta: float
    support_a: tuple
    support_b: tuple
    seed: int

    def __post_init__(self):
        if self.eta < 0:
            raise InvalidParameterError(f"eta must be >= 0, got {self.eta}")
        object.__setattr__(self, "support_a", _canonical(self.support_a))
        object.__setattr__(self, "support_b", _canonical(self.support_b))

    def validate_against(self, nominal: SmallSignalModel) -> None:
        n, m = nominal.n, nominal.m
        for (i, j) in self.support_a:
            if not (0 <= i < n and 0 <= j < n):
                raise InvalidParameterError(f"support_a entry {(i, j)} out of range")
        for (i, j) in self.support_b:
            if not (0 <= i < n and 0 <= j < m):
                raise InvalidParameterError(f"support_b entry {(i, j)} out of range")
            if nominal.b[i, j] == 0.0:
                raise InvalidParameterError(
                    f"support_b entry {(i, j)} sits on a structural zero of B"
                )


def _canonical(support) -> tuple:
    return tuple(sorted((int(i), int(j)) for i, j in support))


def perturb_model(nominal: SmallSignalModel, spec: UncertaintySpec) -> SmallSignalModel:
    """Draw the 'actual' model for one contingency.

    Deterministic given ``spec.seed``; block structure and labels carry over.
    """
    spec.validate_against(nominal)
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    half = spec.eta / 100.0
    a = np.array(nominal.a, dtype=float)
    b = np.array(nominal.b, dtype=float)
    for (i, j) in spec.support_a:
        a[i, j] *= 1.0 + rng.uniform(-half, half)
    for (i, j) in spec.support_b:
        b[i, j] *= 1.0 + rng.uniform(-half, half)
    return SmallSignalModel(a=a, b=b, blocks=nominal.blocks, labels=nominal.labels)


def default_support(model: SmallSignalModel, seed: int = 0, eta: float = 0.0) -> UncertaintySpec:
    """Support skeleton covering the physically uncertain entries.

    All nonzero off-block entries of A (coupling), plus nonzero within-block
    entries of the speed-equation rows (inertia, damping, actuator gain), plus
    every nonzero entry of B.  Speed rows are found through state labels
    ending in ``.speed``; unlabeled models fall back to off-block entries only.
    """
    blocks = model.blocks
    speed_rows = {
        i for i, lab in enumerate(model.labels) if str(lab).endswith(".speed")
    }
    support_a = []
    for i in range(model.n):
        gi = blocks.gen_of_state(i)
        sl = blocks.states_of(gi)
        for j in np.nonzero(model.a[i])[0]:
            off_block = not (sl.start <= j < sl.stop)
            if off_block or i in speed_rows:
                support_a.append((i, int(j)))
    support_b = [(int(i), int(j)) for i, j in zip(*np.nonzero(model.b))]
    return UncertaintySpec(
        eta=eta, support_a=tuple(support_a), support_b=tuple(support_b), seed=seed
    )
