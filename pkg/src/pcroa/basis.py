"""Orthogonal polynomial bases for a scalar germ, Gauss rules, Galerkin tensors.

Both shipped families use the classical normalisation with ``psi_0 = 1``:
Legendre ``P_i`` for a germ uniform on [-1, 1] (density 1/2), probabilists'
Hermite ``He_i`` for a standard normal germ.  All inner products are taken
with respect to the probability measure, so ``gamma_0 = 1``.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import linalg
from .errors import PcroaError
from .mvpoly import Poly

log = logging.getLogger(__name__)

CACHE_FORMAT = "pcroa-tensor v1"
ENTRY_TOL = 1e-12


class BasisFamily(str, Enum):
    LEGENDRE = "legendre"
    HERMITE = "hermite"

    @classmethod
    def parse(cls, value) -> "BasisFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise PcroaError(f"unknown basis family {value!r}", module="basis",
                             operation="parse", code="unknown_family") from None

    # Three-term recurrence  psi_{i+1} = (a_i xi + b_i) psi_i - c_i psi_{i-1}
    def recurrence(self, i: int):
        if self is BasisFamily.LEGENDRE:
            return (2 * i + 1) / (i + 1), 0.0, i / (i + 1)
        return 1.0, 0.0, float(i)

    # Monic Jacobi-matrix coefficients (alpha_k, beta_k) of the probability measure.
    def jacobi_coeffs(self, n: int):
        k = np.arange(1, n)
        alpha = np.zeros(n)
        if self is BasisFamily.LEGENDRE:
            beta = k**2 / (4.0 * k**2 - 1.0)
        else:
            beta = k.astype(float)
        return alpha, beta

    @property
    def support(self):
        return (-1.0, 1.0) if self is BasisFamily.LEGENDRE else (-math.inf, math.inf)


def basis_poly(family, i: int, var: str = "xi") -> Poly:
    """``psi_i`` as a polynomial in the germ variable."""
    coeffs = basis_coeffs(BasisFamily.parse(family), i)
    return Poly((var,), {(k,): c for k, c in enumerate(coeffs) if c != 0.0})


@lru_cache(maxsize=None)
def _coeff_table(family: BasisFamily, upto: int):
    rows = [np.array([1.0])]
    if upto >= 1:
        a, b, _ = family.recurrence(0)
        rows.append(np.array([b, a]))
    for i in range(1, upto):
        a, b, c = family.recurrence(i)
        nxt = np.zeros(i + 2)
        nxt[1:] += a * rows[i]
        nxt[: i + 1] += b * rows[i]
        nxt[:i] -= c * rows[i - 1]
        rows.append(nxt)
    return tuple(tuple(r) for r in rows)


def basis_coeffs(family, i: int):
    """Monomial coefficients (ascending powers) of ``psi_i``."""
    if i < 0:
        raise ValueError("basis index must be non-negative")
    return np.array(_coeff_table(BasisFamily.parse(family), i)[i])


def evaluate(family, p: int, xi) -> np.ndarray:
    """``psi_0..psi_p`` at the points ``xi``; shape ``xi.shape + (p+1,)``."""
    family = BasisFamily.parse(family)
    xi = np.asarray(xi, dtype=float)
    out = np.empty(xi.shape + (p + 1,))
    out[..., 0] = 1.0
    if p >= 1:
        a, b, _ = family.recurrence(0)
        out[..., 1] = a * xi + b
    for i in range(1, p):
        a, b, c = family.recurrence(i)
        out[..., i + 1] = (a * xi + b) * out[..., i] - c * out[..., i - 1]
    return out


def norm_constant(family, i: int) -> float:
    family = BasisFamily.parse(family)
    if i < 0:
        raise ValueError("basis index must be non-negative")
    if family is BasisFamily.LEGENDRE:
        return 1.0 / (2 * i + 1)
    return float(math.factorial(i))


def norm_constants(family, p: int) -> np.ndarray:
    return np.array([norm_constant(family, i) for i in range(p + 1)])


def gauss_nodes(family, nnodes: int):
    """Golub-Welsch rule for the family's probability measure (weights sum to 1)."""
    if nnodes < 1:
        raise ValueError("need at least one node")
    family = BasisFamily.parse(family)
    alpha, beta = family.jacobi_coeffs(nnodes)
    J = np.diag(alpha) + np.diag(np.sqrt(beta), 1) + np.diag(np.sqrt(beta), -1)
    try:
        evals, evecs = linalg.sym_eig(J)
    except np.linalg.LinAlgError as exc:
        raise PcroaError(f"Jacobi-matrix eigensolver failed: {exc}", module="basis",
                         operation="gauss_nodes", code="numeric") from exc
    weights = evecs[0, :] ** 2
    weights = weights / weights.sum()
    return evals, weights


def quadrature_nodes_for(rank: int, p: int) -> int:
    return math.ceil((rank * p + 1) / 2) + 1


@dataclass(frozen=True)
class GalerkinTensor:
    """Normalised triple/quad/... products ``<psi_i1 ... psi_i{r-1}, psi_q> / gamma_q``.

    ``entries`` maps ``(i1, ..., i_{r-1}, q)`` with ``i1 <= ... <= i_{r-1}`` to the value.
    """

    family: BasisFamily
    p: int
    rank: int
    entries: dict = field(repr=False)

    def __getitem__(self, idx):
        *lead, q = idx
        return self.entries.get(tuple(sorted(lead)) + (q,), 0.0)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.p + 1,) * self.rank)
        for idx, v in self.entries.items():
            *lead, q = idx
            for perm in set(itertools.permutations(lead)):
                out[perm + (q,)] = v
        return out

    def __len__(self):
        return len(self.entries)


def _compute_tensor(family: BasisFamily, p: int, rank: int) -> dict:
    nodes, weights = gauss_nodes(family, quadrature_nodes_for(rank, p))
    psi = evaluate(family, p, nodes)  # (nodes, p+1)
    gam = norm_constants(family, p)
    entries = {}
    for lead in itertools.combinations_with_replacement(range(p + 1), rank - 1):
        prod = weights.copy()
        for i in lead:
            prod = prod * psi[:, i]
        vals = prod @ psi / gam
        for q, v in enumerate(vals):
            if abs(v) >= ENTRY_TOL:
                entries[lead + (q,)] = float(v)
    return entries


def _cache_path(cache_dir, family, p, rank) -> Path:
    return Path(cache_dir) / f"tensor_{family.value}_p{p}_r{rank}.txt"


def _header(family, p, rank):
    return f"{CACHE_FORMAT} {family.value} p={p} rank={rank}"


def save_tensor(tensor: GalerkinTensor, path) -> None:
    path = Path(path)
    lines = [_header(tensor.family, tensor.p, tensor.rank)]
    for idx in sorted(tensor.entries):
        lines.append(" ".join(str(i) for i in idx) + " " + f"{tensor.entries[idx]:.17g}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tensor-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensor(path, family=None, p=None, rank=None) -> GalerkinTensor:
    """Read a cache file; raises ``ValueError`` if it is corrupt or does not match."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError("empty tensor file")
    head = text[0].split()
    if " ".join(head[:2]) != CACHE_FORMAT or len(head) != 5:
        raise ValueError(f"bad header {text[0]!r}")
    fam = BasisFamily.parse(head[2])
    fp = int(head[3].removeprefix("p="))
    fr = int(head[4].removeprefix("rank="))
    if (family is not None and fam != BasisFamily.parse(family)) or \
            (p is not None and fp != p) or (rank is not None and fr != rank):
        raise ValueError("tensor file does not match the requested family/p/rank")
    entries = {}
    for line in text[1:]:
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != fr + 1:
            raise ValueError(f"bad entry line {line!r}")
        idx = tuple(int(x) for x in parts[:-1])
        if any(not 0 <= i <= fp for i in idx):
            raise ValueError(f"index out of range in {line!r}")
        entries[idx] = float(parts[-1])
    return GalerkinTensor(fam, fp, fr, entries)


_memory_cache: dict = {}


def galerkin_tensor(family, p: int, rank: int, cache_dir=None) -> GalerkinTensor:
    """Rank-``rank`` Galerkin tensor, loaded from ``cache_dir`` when a matching file exists."""
    family = BasisFamily.parse(family)
    if p < 0 or rank < 2:
        raise ValueError("need p >= 0 and rank >= 2")
    key = (family, p, rank)
    if cache_dir is None and key in _memory_cache:
        return _memory_cache[key]
    if cache_dir is not None:
        path = _cache_path(cache_dir, family, p, rank)
        if path.exists():
            try:
                return load_tensor(path, family, p, rank)
            except (ValueError, OSError) as exc:
                log.warning("ignoring corrupt tensor cache %s: %s", path, exc)
    tensor = GalerkinTensor(family, p, rank, _compute_tensor(family, p, rank))
    _memory_cache[key] = tensor
    if cache_dir is not None:
        try:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            save_tensor(tensor, _cache_path(cache_dir, family, p, rank))
        except OSError as exc:
            log.warning("could not write tensor cache in %s: %s", cache_dir, exc)
    return tensor


def inner_product(family, indices, nnodes=None) -> float:
    """``E[psi_i1 * ... * psi_ik]`` by Gauss quadrature (exact for enough nodes)."""
    family = BasisFamily.parse(family)
    indices = list(indices)
    deg = sum(indices)
    nodes, w = gauss_nodes(family, nnodes or deg // 2 + 2)
    psi = evaluate(family, max(indices, default=0), nodes)
    prod = w.copy()
    for i in indices:
        prod = prod * psi[:, i]
    return float(prod.sum())
