"""Segment grids, Legendre-Gauss-Lobatto node meshes and quadrature coefficients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .model import ExperimentData

#: Relative tolerance (times the experiment span) for matching measurement
#: times to mesh nodes; absorbs decimal round-off in data files.
ALIGNMENT_RTOL = 1e-9


class MeshAlignmentError(ValueError):
    """A measurement time does not coincide with any mesh node."""


def lgl_nodes(m: int) -> np.ndarray:
    """Legendre-Gauss-Lobatto nodes on [-1, 1], sorted ascending.

    The m nodes are -1, +1 and the roots of P'_{m-1}, the derivative of the
    Legendre polynomial of degree m-1.  Newton iteration on the recurrence
    with Chebyshev-Gauss-Lobatto starting points; converges to 1e-14 for
    the practical range m <= 20.
    """
    if m < 2:
        raise ValueError(f"need at least 2 nodes, got m={m}")
    if m == 2:
        return np.array([-1.0, 1.0])

    n = m - 1  # Legendre degree
    x = np.cos(np.pi * np.arange(m) / n)  # CGL guess, descending
    x_prev = x + 1.0
    vand = np.zeros((m, m))
    it = 0
    while np.max(np.abs(x - x_prev)) > 1e-14 and it < 100:
        vand[:, 0] = 1.0
        vand[:, 1] = x
        for k in range(1, n):
            vand[:, k + 1] = (
                (2 * k + 1) * x * vand[:, k] - k * vand[:, k - 1]
            ) / (k + 1)
        x_prev = x.copy()
        # roots of x P_n - P_{n-1}, which coincide with roots of (1-x^2) P'_n
        x = x_prev - (x_prev * vand[:, n] - vand[:, n - 1]) / ((m) * vand[:, n])
        it += 1

    x = np.sort(x)
    x = 0.5 * (x - x[::-1])  # enforce exact symmetry about 0
    x[0], x[-1] = -1.0, 1.0
    return x


def _barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    m = nodes.size
    w = np.ones(m)
    for j in range(m):
        diff = nodes[j] - np.delete(nodes, j)
        w[j] = 1.0 / np.prod(diff)
    return w


def lagrange_integral_coeffs(nodes: np.ndarray) -> np.ndarray:
    """Integrals of the Lagrange basis over each node-to-node sub-interval.

    Returns C with C[j, k] = integral over [nodes[k], nodes[k+1]] of the
    j-th Lagrange basis polynomial of the given nodes.  Computed by
    Gauss-Legendre quadrature of degree >= m, exact for the polynomial
    integrand.  Each column of C sums to its sub-interval length because
    the basis sums to one.
    """
    nodes = np.asarray(nodes, dtype=float)
    m = nodes.size
    if m < 2:
        raise ValueError("need at least 2 nodes")
    if np.any(np.diff(nodes) <= 0.0):
        raise ValueError("nodes must be strictly increasing (no repeats)")

    bary = _barycentric_weights(nodes)
    gl_x, gl_w = np.polynomial.legendre.leggauss(m)  # exact to degree 2m-1
    coeffs = np.empty((m, m - 1))
    for k in range(m - 1):
        a, b = nodes[k], nodes[k + 1]
        half = 0.5 * (b - a)
        pts = a + half * (gl_x + 1.0)
        # basis values at quadrature points; pts never coincide with nodes
        diffs = pts[:, None] - nodes[None, :]  # (q, m)
        full = np.prod(diffs, axis=1)  # (q,)
        lam = bary[None, :] * (full[:, None] / diffs)  # (q, m)
        coeffs[:, k] = half * (gl_w[:, None] * lam).sum(axis=0)
    return coeffs


@dataclass(frozen=True)
class SegmentGrid:
    """Segment boundaries t(1) < ... < t(ns+1) spanning the experiment."""

    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.size < 2:
            raise ValueError("a grid needs at least one segment (2 boundaries)")
        if np.any(np.diff(b) <= 0.0):
            raise ValueError("grid boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_segments(self) -> int:
        return self.boundaries.size - 1

    @property
    def span(self) -> float:
        return float(self.boundaries[-1] - self.boundaries[0])

    @staticmethod
    def from_times(times: Sequence[float], stride: int = 1) -> "SegmentGrid":
        """Boundaries taken every `stride` measurement intervals."""
        times = np.asarray(times, dtype=float)
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if (times.size - 1) % stride != 0:
            raise ValueError(
                f"stride {stride} does not divide the {times.size - 1} "
                "sampling intervals evenly"
            )
        return SegmentGrid(times[::stride])

    @staticmethod
    def uniform(t0: float, t1: float, n_segments: int) -> "SegmentGrid":
        return SegmentGrid(np.linspace(t0, t1, n_segments + 1))


@dataclass
class CollocationMesh:
    """Per-segment LGL node mesh with precomputed quadrature coefficients.

    Nodes shared by adjacent segments appear once in the global arrays;
    `node_ids[i]` maps segment i's local nodes to global node indices.
    `meas_node[k]` is the global node carrying measurement k (filled when
    the mesh is built against experiment data).
    """

    grid: SegmentGrid
    nodes_per_segment: np.ndarray
    seg_times: List[np.ndarray]
    coeffs: List[np.ndarray]
    node_ids: List[np.ndarray]
    node_times: np.ndarray
    meas_node: Optional[np.ndarray] = None

    @property
    def n_segments(self) -> int:
        return self.grid.n_segments

    @property
    def n_nodes(self) -> int:
        return self.node_times.size

    @property
    def span(self) -> float:
        return self.grid.span

    def segment_of_node(self, gid: int) -> tuple:
        """First (segment, local node) pair owning global node `gid`."""
        for i, ids in enumerate(self.node_ids):
            j = np.searchsorted(ids, gid)
            if j < ids.size and ids[j] == gid:
                return i, int(j)
        raise IndexError(f"node {gid} not in mesh")


def build_mesh(
    grid: SegmentGrid,
    nodes_per_segment: Union[int, Sequence[int]],
    data: Optional[ExperimentData] = None,
) -> CollocationMesh:
    """Build per-segment LGL meshes and map measurement times onto nodes.

    Every measurement time must coincide with a mesh node within
    ALIGNMENT_RTOL times the experiment span; a time that matches no node
    raises MeshAlignmentError naming the offending time.
    """
    ns = grid.n_segments
    if np.isscalar(nodes_per_segment):
        counts = np.full(ns, int(nodes_per_segment))
    else:
        counts = np.asarray(nodes_per_segment, dtype=int)
        if counts.size != ns:
            raise ValueError("one node count per segment is required")
    if np.any(counts < 2):
        raise ValueError("each segment needs at least 2 nodes")

    seg_times: List[np.ndarray] = []
    coeffs: List[np.ndarray] = []
    node_ids: List[np.ndarray] = []
    all_times: List[float] = []
    offset = 0
    for i in range(ns):
        a, b = grid.boundaries[i], grid.boundaries[i + 1]
        ref = lgl_nodes(int(counts[i]))
        tau = a + 0.5 * (ref + 1.0) * (b - a)
        tau[0], tau[-1] = a, b  # boundaries exact
        seg_times.append(tau)
        coeffs.append(lagrange_integral_coeffs(tau))
        ids = offset + np.arange(counts[i])
        node_ids.append(ids)
        # shared boundary node: segment end == next segment start
        start = 1 if i > 0 else 0
        all_times.extend(tau[start:])
        offset = ids[-1]
    node_times = np.asarray(all_times)

    mesh = CollocationMesh(
        grid=grid,
        nodes_per_segment=counts,
        seg_times=seg_times,
        coeffs=coeffs,
        node_ids=node_ids,
        node_times=node_times,
    )

    if data is not None:
        if (
            data.times[0] < grid.boundaries[0] - ALIGNMENT_RTOL * grid.span
            or data.times[-1] > grid.boundaries[-1] + ALIGNMENT_RTOL * grid.span
        ):
            raise MeshAlignmentError(
                "measurement times extend beyond the segment grid"
            )
        tol = ALIGNMENT_RTOL * grid.span
        meas_node = np.empty(data.n_samples, dtype=int)
        for k, t in enumerate(data.times):
            j = np.searchsorted(node_times, t)
            best, err = -1, np.inf
            for cand in (j - 1, j):
                if 0 <= cand < node_times.size:
                    d = abs(node_times[cand] - t)
                    if d < err:
                        best, err = cand, d
            if err > tol:
                raise MeshAlignmentError(
                    f"measurement time t={t!r} matches no mesh node "
                    f"(closest is {node_times[best]!r}, off by {err:.3e})"
                )
            meas_node[k] = best
        mesh.meas_node = meas_node

    return mesh
