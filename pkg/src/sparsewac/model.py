"""Block-structured small-signal power-system models.

A model is a continuous-time LTI pair ``(A, B)`` whose states and inputs are
partitioned by generator.  The default benchmark is a swing-plus-actuator
synthetic multi-machine model with three states per generator
(angle deviation, speed deviation, actuator state) and one control input per
generator except a designated reference generator.  Higher-fidelity matrices
can be dropped in through the model file format.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import yaml

from .errors import InvalidParameterError, ModelParseError, ModelValidationError

STATES_PER_GEN = 3
_STATE_SUFFIXES = ("angle", "speed", "actuator")

# Torque produced per unit of actuator state.  Sized like a static exciter
# gain so that well-tuned feedback gains stay O(1) in per-unit coordinates.
ACTUATOR_TORQUE_GAIN = 25.0


@dataclass(frozen=True)
class BlockStructure:
    """Partition of states and inputs by generator.

    ``state_offsets`` has ``gen_count + 1`` strictly increasing entries with
    ``state_offsets[0] == 0``; generator ``g`` owns states
    ``state_offsets[g]:state_offsets[g + 1]``.  ``input_of_gen[j]`` is the
    generator owning input ``j``.
    """

    gen_count: int
    state_offsets: tuple
    input_of_gen: tuple

    def __post_init__(self):
        if self.gen_count < 1:
            raise ModelValidationError("gen_count must be positive")
        offs = tuple(int(v) for v in self.state_offsets)
        if len(offs) != self.gen_count + 1 or offs[0] != 0:
            raise ModelValidationError(
                f"state_offsets must have {self.gen_count + 1} entries starting at 0"
            )
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise ModelValidationError("state_offsets must be strictly increasing")
        owners = tuple(int(g) for g in self.input_of_gen)
        if any(g < 0 or g >= self.gen_count for g in owners):
            raise ModelValidationError("input_of_gen references an unknown generator")
        object.__setattr__(self, "state_offsets", offs)
        object.__setattr__(self, "input_of_gen", owners)

    @property
    def n(self) -> int:
        return self.state_offsets[-1]

    @property
    def m(self) -> int:
        return len(self.input_of_gen)

    def states_of(self, gen: int) -> slice:
        return slice(self.state_offsets[gen], self.state_offsets[gen + 1])

    def inputs_of(self, gen: int) -> list:
        return [j for j, g in enumerate(self.input_of_gen) if g == gen]

    def gen_of_state(self, i: int) -> int:
        return int(np.searchsorted(self.state_offsets, i, side="right") - 1)

    def off_block_mask(self) -> np.ndarray:
        """Boolean (m, n) mask of gain entries lying in off-diagonal blocks."""
        owner_of_input = np.asarray(self.input_of_gen)
        owner_of_state = np.repeat(
            np.arange(self.gen_count),
            np.diff(self.state_offsets),
        )
        return owner_of_input[:, None] != owner_of_state[None, :]


@dataclass(frozen=True)
class SmallSignalModel:
    """Continuous-time LTI model ``x' = A x + B u`` with generator blocks."""

    a: np.ndarray
    b: np.ndarray
    blocks: BlockStructure
    labels: tuple = ()

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        n = self.blocks.n
        m = self.blocks.m
        if a.shape != (n, n):
            raise ModelValidationError(f"A must be {n}x{n}, got {a.shape}")
        if b.shape != (n, m):
            raise ModelValidationError(f"B must be {n}x{m}, got {b.shape}")
        for j, gen in enumerate(self.blocks.input_of_gen):
            rows = np.nonzero(b[:, j])[0]
            sl = self.blocks.states_of(gen)
            if any(r < sl.start or r >= sl.stop for r in rows):
                raise ModelValidationError(
                    f"input {j} drives states outside generator {gen} (B not block-diagonal)"
                )
        if self.labels and len(self.labels) != n:
            raise ModelValidationError("labels length must equal the state dimension")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.blocks.n

    @property
    def m(self) -> int:
        return self.blocks.m

    def content_hash(self) -> str:
        """Short digest of the matrices and block structure (cell pairing key)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.a).tobytes())
        h.update(np.ascontiguousarray(self.b).tobytes())
        h.update(repr(self.blocks.state_offsets).encode())
        h.update(repr(self.blocks.input_of_gen).encode())
        return h.hexdigest()[:12]


@dataclass(frozen=True)
class GeneratorSpec:
    """Physical parameters of one synthetic machine.

    ``synchronizing_coeffs[j]`` is the stiffness coupling this machine to
    machine ``j`` (per-unit torque per rad); the self entry acts as an
    anchor stiffness to the rest of the network, zero self entries give the
    marginal relative-angle mode.
    """

    inertia: float
    damping: float
    synchronizing_coeffs: tuple
    exciter_lag: float

    def __post_init__(self):
        if self.inertia <= 0:
            raise InvalidParameterError(f"inertia must be positive, got {self.inertia}")
        if self.exciter_lag <= 0:
            raise InvalidParameterError(
                f"exciter_lag must be positive, got {self.exciter_lag}"
            )
        coeffs = tuple(float(k) for k in self.synchronizing_coeffs)
        if any(k < 0 for k in coeffs):
            raise InvalidParameterError("synchronizing coefficients must be >= 0")
        object.__setattr__(self, "synchronizing_coeffs", coeffs)


def build_swing_model(specs, reference_gen: int = 0) -> SmallSignalModel:
    """Assemble the 3-state-per-machine swing+actuator model from specs.

    Every machine gets one input except ``reference_gen``, so ``m = n_g - 1``.
    The coupling matrix must be symmetric; zero self-stiffness rows are
    accepted and yield the marginal uniform-angle mode.
    """
    n_g = len(specs)
    if n_g < 2:
        raise InvalidParameterError("need at least 2 generators")
    if not 0 <= reference_gen < n_g:
        raise InvalidParameterError(f"reference_gen {reference_gen} out of range")
    coupling = np.array([s.synchronizing_coeffs for s in specs], dtype=float)
    if coupling.shape != (n_g, n_g):
        raise InvalidParameterError(
            "each synchronizing_coeffs row must have one entry per generator"
        )
    scale = max(1.0, np.abs(coupling).max())
    if not np.allclose(coupling, coupling.T, rtol=0, atol=1e-12 * scale):
        raise InvalidParameterError("coupling matrix must be symmetric")

    n = STATES_PER_GEN * n_g
    owners = tuple(g for g in range(n_g) if g != reference_gen)
    blocks = BlockStructure(
        gen_count=n_g,
        state_offsets=tuple(STATES_PER_GEN * g for g in range(n_g + 1)),
        input_of_gen=owners,
    )
    a = np.zeros((n, n))
    b = np.zeros((n, n_g - 1))
    for g, spec in enumerate(specs):
        i0 = STATES_PER_GEN * g
        row_sum = coupling[g, g] + sum(coupling[g, j] for j in range(n_g) if j != g)
        a[i0, i0 + 1] = 1.0
        a[i0 + 1, i0] = -row_sum / spec.inertia
        a[i0 + 1, i0 + 1] = -spec.damping / spec.inertia
        a[i0 + 1, i0 + 2] = ACTUATOR_TORQUE_GAIN / spec.inertia
        a[i0 + 2, i0 + 2] = -1.0 / spec.exciter_lag
        for j in range(n_g):
            if j != g and coupling[g, j] != 0.0:
                a[i0 + 1, STATES_PER_GEN * j] = coupling[g, j] / spec.inertia
    for col, g in enumerate(owners):
        b[STATES_PER_GEN * g + 2, col] = 1.0 / specs[g].exciter_lag

    labels = tuple(
        f"g{g}.{suf}" for g in range(n_g) for suf in _STATE_SUFFIXES
    )
    return SmallSignalModel(a=a, b=b, blocks=blocks, labels=labels)


def default_benchmark(n_g: int = 10, seed: int = 0, reference_gen: int = 0):
    """Seeded multi-machine benchmark with underdamped swing modes.

    Ring coupling plus a few long-range chords over a dominant anchor
    stiffness; damping leaves the open loop stable with real margin, so the
    entry-wise perturbation protocol mostly preserves open-loop stability
    while aggressive feedback matched to the wrong model can destabilize.
    Returns (specs, model).
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    coupling = np.zeros((n_g, n_g))
    for g in range(n_g):
        k = float(rng.uniform(2.0, 6.0))
        coupling[g, (g + 1) % n_g] = k
        coupling[(g + 1) % n_g, g] = k
    for g in range(min(3, n_g // 2)):
        j = (g + n_g // 2) % n_g
        k = float(rng.uniform(1.0, 3.0))
        coupling[g, j] += k
        coupling[j, g] += k
    for g in range(n_g):
        coupling[g, g] = float(rng.uniform(10.0, 20.0))

    specs = [
        GeneratorSpec(
            inertia=float(rng.uniform(5.0, 12.0)),
            damping=float(rng.uniform(4.0, 8.0)),
            synchronizing_coeffs=tuple(coupling[g]),
            exciter_lag=float(rng.uniform(0.15, 0.3)),
        )
        for g in range(n_g)
    ]
    return specs, build_swing_model(specs, reference_gen=reference_gen)


def single_block(a, b) -> SmallSignalModel:
    """Wrap arbitrary (A, B) as a one-generator model (tests, imports)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    blocks = BlockStructure(
        gen_count=1,
        state_offsets=(0, a.shape[0]),
        input_of_gen=tuple(0 for _ in range(b.shape[1])),
    )
    return SmallSignalModel(a=a, b=b, blocks=blocks)


def card_off(k, blocks: BlockStructure) -> int:
    """Number of nonzero gain entries in off-diagonal generator blocks."""
    k = _gain_matrix(k, blocks)
    return int(np.count_nonzero(k[blocks.off_block_mask()]))


def comm_graph(k, blocks: BlockStructure) -> set:
    """Directed communication links implied by a gain matrix.

    Link ``(i, j)`` (i listens to j, i != j) is present iff block ``K_ij``
    (rows = inputs of generator i, columns = states of generator j) has at
    least one nonzero entry.  Self blocks never produce links.
    """
    k = _gain_matrix(k, blocks)
    links = set()
    for r in range(blocks.m):
        gi = blocks.input_of_gen[r]
        for gj in range(blocks.gen_count):
            if gj == gi:
                continue
            if np.any(k[r, blocks.states_of(gj)]):
                links.add((gi, gj))
    return links


def _gain_matrix(k, blocks: BlockStructure) -> np.ndarray:
    k = np.asarray(getattr(k, "k", k), dtype=float)
    if k.shape != (blocks.m, blocks.n):
        raise ModelValidationError(
            f"gain must be {blocks.m}x{blocks.n}, got {k.shape}"
        )
    return k


# ---------------------------------------------------------------------------
# Model file format (YAML; floats written with 17 significant digits so the
# save/load round trip is exact).
# ---------------------------------------------------------------------------

class _ModelDumper(yaml.SafeDumper):
    pass


def _represent_float(dumper, value):
    if value != value:
        text = ".nan"
    elif value == float("inf"):
        text = ".inf"
    elif value == float("-inf"):
        text = "-.inf"
    else:
        text = format(value, ".17g")
    return dumper.represent_scalar("tag:yaml.org,2002:float", text)


_ModelDumper.add_representer(float, _represent_float)


def dump_yaml(data, path):
    """Write a YAML document atomically with exact float formatting."""
    import os
    import tempfile

    path = str(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            yaml.dump(data, fh, Dumper=_ModelDumper, sort_keys=False)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: SmallSignalModel, path) -> None:
    data = {
        "format": "sparsewac-model",
        "n": model.n,
        "m": model.m,
        "n_g": model.blocks.gen_count,
        "state_offsets": list(model.blocks.state_offsets),
        "input_of_gen": list(model.blocks.input_of_gen),
        "a": [[float(v) for v in row] for row in model.a],
        "b": [[float(v) for v in row] for row in model.b],
    }
    if model.labels:
        data["labels"] = list(model.labels)
    dump_yaml(data, path)


def load_model(path) -> SmallSignalModel:
    """Load and validate a model file; raises ModelParseError on bad syntax
    or missing fields and ModelValidationError on invariant violations."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise ModelParseError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ModelParseError(f"{path}: expected a mapping at top level")
    missing = [k for k in ("n", "m", "n_g", "state_offsets", "input_of_gen", "a", "b")
               if k not in data]
    if missing:
        raise ModelParseError(f"{path}: missing fields: {', '.join(missing)}")
    try:
        n = int(data["n"])
        m = int(data["m"])
        n_g = int(data["n_g"])
        a = np.array(data["a"], dtype=float)
        b = np.array(data["b"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelParseError(f"{path}: malformed numeric field: {exc}") from exc
    blocks = BlockStructure(
        gen_count=n_g,
        state_offsets=tuple(data["state_offsets"]),
        input_of_gen=tuple(data["input_of_gen"]),
    )
    if blocks.n != n:
        raise ModelValidationError(
            f"{path}: declared n={n} but state_offsets end at {blocks.n}"
        )
    if blocks.m != m:
        raise ModelValidationError(
            f"{path}: declared m={m} but input_of_gen has {blocks.m} entries"
        )
    if a.ndim != 2 or a.shape != (n, n):
        raise ModelValidationError(f"{path}: A has shape {a.shape}, expected {(n, n)}")
    if b.ndim != 2 or b.shape != (n, m):
        raise ModelValidationError(f"{path}: B has shape {b.shape}, expected {(n, m)}")
    labels = tuple(data.get("labels", ()))
    return SmallSignalModel(a=a, b=b, blocks=blocks, labels=labels)
