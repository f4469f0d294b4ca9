"""Bounded robust least squares over keypoint offsets.

For every directed edge u->v in a component the residual is

    r = x_v - x_u - T_uv(x_u)

where ``x`` are offsets from the initial keypoint locations and ``T_uv`` is
the edge's 3x3 flow field. Each block contributes ``s * rho(|r|^2)``; every
offset is kept inside the L1 ball of radius ``K``. Many independent
components are solved in lockstep, each with its own damping and stopping
state, so results do not depend on how components are batched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .align import eval_flow_batch
from .graph import SIMILARITY_FLOOR, MatchGraph

log = logging.getLogger(__name__)

MODES = ("full", "no_partition", "intra_only", "intra_inter")
LOSS_CODES = {"none": 0, "cauchy": 1, "tukey": 2}
DENSE_LIMIT = 400  # unknowns; smaller components are solved in batched stacks
CHOLESKY_LIMIT = 3000  # unknowns; larger components use a sparse LU


class ProblemError(ValueError):
    pass


class SolveError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# robust losses


def robust_loss(kind: str, scale: float, s):
    """Value and derivative (w.r.t. the squared norm ``s``) of a robust loss.

    cauchy: c^2 log(1 + s/c^2). tukey: c^2/3 (1 - (1 - s/c^2)^3) inside the
    bound, c^2/3 beyond it. none: s. Every loss has unit slope at s = 0, so
    value and derivative stay consistent.
    """
    if scale <= 0:
        raise ValueError("loss scale must be positive")
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0):
        raise ValueError("squared norm must be non-negative")
    value, deriv = _loss(np.full(s_arr.shape, LOSS_CODES[kind]), np.full(s_arr.shape, scale), s_arr)
    if np.ndim(s) == 0:
        return float(value), float(deriv)
    return value, deriv


def _loss(code: np.ndarray, scale: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c2 = scale * scale
    value = s.copy()
    deriv = np.ones_like(s)
    cauchy = code == 1
    if cauchy.any():
        q = s[cauchy] / c2[cauchy]
        value[cauchy] = c2[cauchy] * np.log1p(q)
        deriv[cauchy] = 1.0 / (1.0 + q)
    tukey = code == 2
    if tukey.any():
        q = np.minimum(s[tukey] / c2[tukey], 1.0)
        one = 1.0 - q
        value[tukey] = c2[tukey] / 3.0 * (1.0 - one ** 3)
        deriv[tukey] = one * one
    return value, deriv


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "cauchy"
    scale: float = 4.0

    def __post_init__(self):
        if self.kind not in LOSS_CODES:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("loss scale must be positive")

    def __call__(self, s):
        return robust_loss(self.kind, self.scale, s)


# ---------------------------------------------------------------------------
# flows and options


@dataclass
class FlowSet:
    """Flow fields attached to graph edges, indexed by edge id."""

    grids: np.ndarray  # (E, 3, 3, 2)
    spacing: np.ndarray  # (E,)
    low_confidence: np.ndarray  # (E,) bool
    present: np.ndarray  # (E,) bool

    @classmethod
    def empty(cls, num_edges: int) -> "FlowSet":
        return cls(np.zeros((num_edges, 3, 3, 2)), np.ones(num_edges),
                   np.zeros(num_edges, dtype=bool), np.zeros(num_edges, dtype=bool))

    def set(self, edge: int, grid, spacing: float, low_confidence: bool = False) -> None:
        self.grids[edge] = np.asarray(grid, dtype=np.float64).reshape(3, 3, 2)
        self.spacing[edge] = spacing
        self.low_confidence[edge] = low_confidence
        self.present[edge] = True


@dataclass(frozen=True)
class SolverOptions:
    K: float = 16.0
    cauchy_scale: float = 4.0
    tukey_scale: float = 1.0
    mode: str = "full"
    max_iterations: int = 200
    constant_flow: bool = False
    low_confidence_weight: float = 0.1
    initial_damping: float = 1e-4
    function_tolerance: float = 1e-8
    step_tolerance: float = 1e-4

    def __post_init__(self):
        mode = self.mode.replace("-", "_")
        if mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "mode", mode)
        if self.K <= 0 or self.cauchy_scale <= 0 or self.tukey_scale <= 0:
            raise ValueError("K and loss scales must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


# ---------------------------------------------------------------------------
# problem construction


def select_roots(graph: MatchGraph, track_of: np.ndarray) -> np.ndarray:
    """Per track, the node with the highest connectivity score (lowest id on ties)."""
    from .graph import connectivity_scores

    gamma = connectivity_scores(graph, track_of)
    n_tracks = int(track_of.max()) + 1 if len(track_of) else 0
    # sort by track, then score descending, then node id ascending
    order = np.lexsort((np.arange(len(track_of)), -gamma, track_of))
    first = np.ones(len(order), dtype=bool)
    first[1:] = track_of[order][1:] != track_of[order][:-1]
    roots = np.empty(n_tracks, dtype=np.int64)
    roots[track_of[order][first]] = order[first]
    return roots


def component_anchors(graph: MatchGraph, components: list[np.ndarray]) -> np.ndarray:
    """Node with the highest similarity-weighted degree in each component."""
    degree = np.bincount(graph.src, weights=graph.similarity, minlength=graph.num_nodes)
    out = []
    for nodes in components:
        nodes = np.sort(nodes)
        out.append(nodes[int(np.argmax(degree[nodes]))])
    return np.asarray(out, dtype=np.int64)


def graph_components(graph: MatchGraph) -> list[np.ndarray]:
    """Connected components of the match graph with at least one edge."""
    n = graph.num_nodes
    adj = sp.coo_matrix((np.ones(graph.num_edges), (graph.src, graph.dst)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    order = np.argsort(labels, kind="stable")
    parts = np.split(order, np.flatnonzero(np.diff(labels[order])) + 1)
    return [p for p in parts if len(p) > 1]


@dataclass
class RefinementProblem:
    """Residual blocks for one or more independent components.

    ``nodes`` lists every graph node in scope; ``node_component`` and
    ``fixed`` are aligned with it. Blocks reference graph node ids.
    """

    nodes: np.ndarray
    node_component: np.ndarray
    fixed: np.ndarray
    block_edge: np.ndarray
    block_src: np.ndarray
    block_dst: np.ndarray
    block_weight: np.ndarray
    block_loss: np.ndarray
    block_scale: np.ndarray
    grids: np.ndarray
    spacing: np.ndarray
    K: float
    mode: str
    options: SolverOptions = field(default_factory=SolverOptions)

    @property
    def num_components(self) -> int:
        return int(self.node_component.max()) + 1 if len(self.node_component) else 0

    @property
    def num_blocks(self) -> int:
        return len(self.block_edge)

    @property
    def fixed_nodes(self) -> np.ndarray:
        return self.nodes[self.fixed]

    @property
    def free_nodes(self) -> np.ndarray:
        return self.nodes[~self.fixed]

    def block_kinds(self) -> list[str]:
        names = {v: k for k, v in LOSS_CODES.items()}
        return [names[int(c)] for c in self.block_loss]


def build_problem(
    graph: MatchGraph,
    flows: FlowSet,
    components: list[np.ndarray],
    track_of: np.ndarray | None = None,
    options: SolverOptions = SolverOptions(),
    fixed_nodes: np.ndarray | None = None,
) -> RefinementProblem:
    """Assemble residual blocks for node sets optimized independently.

    ``components`` holds graph node ids per component. Edges with both ends in
    one component become blocks: same-track edges use the Cauchy loss, edges
    between tracks the Tukey loss (dropped in ``intra_only`` mode). In
    ``no_partition`` mode every edge uses the Cauchy loss and one anchor per
    component is fixed instead of one root per track. ``fixed_nodes``
    overrides the automatic choice.
    """
    mode = options.mode
    n = graph.num_nodes
    comp_of = np.full(n, -1, dtype=np.int64)
    for c, nodes in enumerate(components):
        nodes = np.asarray(nodes, dtype=np.int64)
        if np.any(comp_of[nodes] >= 0):
            raise ProblemError("components overlap")
        comp_of[nodes] = c
    if mode != "no_partition" and track_of is None:
        raise ProblemError(f"mode {mode!r} needs a track assignment")

    cs, cd = comp_of[graph.src], comp_of[graph.dst]
    in_scope = (cs >= 0) & (cs == cd)
    if mode == "no_partition":
        intra = np.ones(graph.num_edges, dtype=bool)
    else:
        intra = track_of[graph.src] == track_of[graph.dst]
        if mode == "intra_only":
            in_scope &= intra
    edges = np.flatnonzero(in_scope)
    # block order: by component, then edge id
    edges = edges[np.argsort(cs[edges], kind="stable")]
    missing = edges[~flows.present[edges]]
    if len(missing):
        e = int(missing[0])
        raise ProblemError(
            f"edge {e} ({int(graph.src[e])} -> {int(graph.dst[e])}) has no flow field"
        )

    weight = graph.weights()[edges]
    weight = np.where(flows.low_confidence[edges], weight * options.low_confidence_weight, weight)
    weight = np.maximum(weight, SIMILARITY_FLOOR)
    is_intra = intra[edges]
    loss = np.where(is_intra, LOSS_CODES["cauchy"], LOSS_CODES["tukey"])
    scale = np.where(is_intra, options.cauchy_scale, options.tukey_scale)

    nodes = np.flatnonzero(comp_of >= 0)
    fixed_mask = np.zeros(n, dtype=bool)
    if fixed_nodes is not None:
        fixed_mask[np.asarray(fixed_nodes, dtype=np.int64)] = True
    elif mode == "no_partition":
        fixed_mask[component_anchors(graph, [np.asarray(c) for c in components])] = True
    else:
        fixed_mask[select_roots(graph, track_of)] = True
    grids = flows.grids[edges].copy()
    if options.constant_flow:
        grids[:] = grids[:, 1:2, 1:2, :]
    return RefinementProblem(
        nodes=nodes,
        node_component=comp_of[nodes],
        fixed=fixed_mask[nodes],
        block_edge=edges,
        block_src=graph.src[edges].copy(),
        block_dst=graph.dst[edges].copy(),
        block_weight=weight,
        block_loss=loss,
        block_scale=scale,
        grids=grids,
        spacing=flows.spacing[edges].copy(),
        K=options.K,
        mode=mode,
        options=options,
    )


# ---------------------------------------------------------------------------
# evaluation


def project_l1(x: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of each row of ``(n, 2)`` onto the L1 ball."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    total = a.sum(axis=1)
    outside = total > radius
    if not outside.any():
        return x.copy()
    out = x.copy()
    ao = a[outside]
    theta = 0.5 * (total[outside] - radius)
    shrunk = ao - theta[:, None]
    # if one coordinate would go negative, all mass goes to the larger one
    single = np.any(shrunk < 0, axis=1)
    big = np.argmax(ao, axis=1)
    one_hot = np.zeros_like(ao)
    one_hot[np.arange(len(ao)), big] = radius
    proj = np.where(single[:, None], one_hot, np.maximum(shrunk, 0.0))
    out[outside] = np.sign(x[outside]) * proj
    return out


@dataclass
class _Linearization:
    residual: np.ndarray  # (B, 2)
    flow_jac: np.ndarray  # (B, 2, 2)
    value: np.ndarray  # (B,) weighted loss per block
    weight: np.ndarray  # (B,) s * rho'


def _evaluate(problem: RefinementProblem, offsets: np.ndarray, blocks=slice(None)) -> _Linearization:
    """Linearize the blocks selected by ``blocks`` at ``offsets`` (indexed by graph node id)."""
    xu = offsets[problem.block_src[blocks]]
    xv = offsets[problem.block_dst[blocks]]
    disp, jac = eval_flow_batch(problem.grids[blocks], problem.spacing[blocks], xu)
    r = xv - xu - disp
    s = r[:, 0] * r[:, 0] + r[:, 1] * r[:, 1]
    val, der = _loss(problem.block_loss[blocks], problem.block_scale[blocks], s)
    w = problem.block_weight[blocks]
    return _Linearization(r, jac, w * val, w * der)


def objective_value(problem: RefinementProblem, offsets) -> float:
    """Total weighted robust loss at ``offsets`` (indexed by graph node id)."""
    return float(_evaluate(problem, np.asarray(offsets, dtype=np.float64)).value.sum())


def block_jacobians(problem: RefinementProblem, offsets: np.ndarray):
    """Residuals and their jacobians w.r.t. the source and target offsets."""
    lin = _evaluate(problem, np.asarray(offsets, dtype=np.float64))
    eye = np.broadcast_to(np.eye(2), lin.flow_jac.shape)
    return lin.residual, -eye - lin.flow_jac, eye.copy()


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveReport:
    component: int
    iterations: int = 0
    initial_objective: float = 0.0
    final_objective: float = 0.0
    max_step: float = 0.0
    moved: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: bool = True
    num_free: int = 0
    num_blocks: int = 0
    objective_history: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "component": self.component,
            "iterations": self.iterations,
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "max_step": self.max_step,
            "max_moved": float(self.moved.max()) if len(self.moved) else 0.0,
            "converged": self.converged,
            "num_free": self.num_free,
            "num_blocks": self.num_blocks,
        }


class _Layout:
    """Variable numbering and normal-matrix storage for a batch of components."""

    def __init__(self, problem: RefinementProblem, num_graph_nodes: int):
        self.problem = problem
        ncomp = problem.num_components
        free = problem.nodes[~problem.fixed]
        free_comp = problem.node_component[~problem.fixed]
        order = np.lexsort((free, free_comp))
        free, free_comp = free[order], free_comp[order]
        self.free = free
        self.n_var = len(free)
        self.var_of = np.full(num_graph_nodes, -1, dtype=np.int64)
        self.var_of[free] = np.arange(len(free))
        self.var_comp = free_comp
        self.n_free = np.bincount(free_comp, minlength=ncomp)
        self.var_start = np.concatenate([[0], np.cumsum(self.n_free)[:-1]]).astype(np.int64)
        self.local = np.arange(len(free)) - self.var_start[free_comp]
        comp_of_node = np.full(num_graph_nodes, -1, dtype=np.int64)
        comp_of_node[problem.nodes] = problem.node_component
        self.block_comp = comp_of_node[problem.block_src]
        self.vu = self.var_of[problem.block_src]
        self.vv = self.var_of[problem.block_dst]
        local = np.append(self.local, -1)  # index -1 (fixed node) reads the sentinel
        self.lu = local[self.vu]
        self.lv = local[self.vv]
        # dense storage: small components share stacks grouped by size
        dims = 2 * self.n_free
        self.dense = (dims > 0) & (dims <= DENSE_LIMIT)
        self.groups: dict[int, np.ndarray] = {}
        self.h_start = np.full(ncomp, -1, dtype=np.int64)
        pos = 0
        for d in np.unique(dims[self.dense]):
            comps = np.flatnonzero(self.dense & (dims == d))
            self.groups[int(d)] = comps
            self.h_start[comps] = pos + np.arange(len(comps)) * d * d
            pos += len(comps) * d * d
        self.h_size = pos
        self.sparse = {int(c): _SparsePattern(self, int(c)) for c in np.flatnonzero(dims > DENSE_LIMIT)}

    def hessian_index(self, la: np.ndarray, lb: np.ndarray, comp: np.ndarray) -> np.ndarray:
        """Flat dense positions ``(B, 4)`` of the 2x2 sub-block (la, lb) of each block."""
        dims = 2 * self.n_free[comp]
        rows = 2 * la[:, None] + _IJ[None, :, 0]
        cols = 2 * lb[:, None] + _IJ[None, :, 1]
        return self.h_start[comp][:, None] + rows * dims[:, None] + cols


_IJ = np.array([(i, j) for i in range(2) for j in range(2)])
_PAIRS = ("uu", "uv", "vu", "vv")


class _SparsePattern:
    """Fixed CSC pattern of one large component's normal matrix (symmetric)."""

    def __init__(self, lay: _Layout, c: int):
        self.comp = c
        self.start = int(lay.var_start[c])
        self.nv = int(lay.n_free[c])
        d = 2 * self.nv
        self.blocks = np.flatnonzero(lay.block_comp == c)
        keys, self.masks = [], []
        for la, lb in ((lay.lu, lay.lu), (lay.lu, lay.lv), (lay.lv, lay.lu), (lay.lv, lay.lv)):
            a, b = la[self.blocks], lb[self.blocks]
            ok = (a >= 0) & (b >= 0)
            self.masks.append(ok)
            rows = 2 * a[ok, None] + _IJ[None, :, 0]
            cols = 2 * b[ok, None] + _IJ[None, :, 1]
            keys.append((cols * d + rows).ravel())  # column-major for CSC
        diag = np.arange(d) * (d + 1)
        uniq, inverse = np.unique(np.concatenate(keys + [diag]), return_inverse=True)
        self.inverse = inverse[: sum(len(k) for k in keys)]
        self.diag_pos = inverse[-d:]
        self.indices = (uniq % d).astype(np.int32)
        cols = uniq // d
        self.indptr = np.searchsorted(cols, np.arange(d + 1)).astype(np.int32)
        self.size = len(uniq)
        self.dim = d

    def step(self, hblocks: dict, block_pos: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
        """Damped Gauss-Newton step; ``block_pos`` maps this component's blocks
        to rows of ``hblocks``."""
        vals = np.concatenate([
            hblocks[name][block_pos[ok]].reshape(-1) for name, ok in zip(_PAIRS, self.masks)
        ])
        data = np.bincount(self.inverse, weights=vals, minlength=self.size)
        data[self.diag_pos] += lam * np.clip(data[self.diag_pos], 1e-6, 1e32)
        a = sp.csc_matrix((data, self.indices, self.indptr), shape=(self.dim, self.dim))
        rhs = -g[self.start:self.start + self.nv].ravel()
        if self.dim <= CHOLESKY_LIMIT:
            # match graphs are well connected, so sparse factors fill in heavily
            try:
                factor = sla.cho_factor(a.toarray(), check_finite=False)
                return sla.cho_solve(factor, rhs, check_finite=False).reshape(self.nv, 2)
            except np.linalg.LinAlgError:
                pass
        return splu(a, permc_spec="MMD_AT_PLUS_A").solve(rhs).reshape(self.nv, 2)


def _normal_blocks(lin: _Linearization):
    """Per-block weighted J^T J sub-blocks and J^T r pieces.

    Jacobians: d r / d x_u = -I - J_T, d r / d x_v = I.
    """
    w = lin.weight
    ju = -np.eye(2)[None] - lin.flow_jac
    r = lin.residual
    gu = w[:, None] * (ju[:, 0, :] * r[:, 0, None] + ju[:, 1, :] * r[:, 1, None])
    gv = w[:, None] * r
    jtj = ju[:, 0, :, None] * ju[:, 0, None, :] + ju[:, 1, :, None] * ju[:, 1, None, :]
    huu = w[:, None, None] * jtj
    huv = w[:, None, None] * np.transpose(ju, (0, 2, 1))  # J_u^T J_v
    hvu = np.transpose(huv, (0, 2, 1))
    hvv = w[:, None, None] * np.eye(2)[None]
    return gu, gv, {"uu": huu, "uv": huv, "vu": hvu, "vv": hvv}


def solve_component(
    problem: RefinementProblem, num_graph_nodes: int | None = None
) -> tuple[np.ndarray, list[SolveReport]]:
    """Projected Levenberg-Marquardt on every component of ``problem``.

    Returns offsets for all graph nodes (zero outside the problem and at fixed
    nodes) and one report per component. Each iteration only touches blocks
    of components that are still running; per-component arithmetic is the
    same however components are batched.
    """
    opts = problem.options
    n_graph = num_graph_nodes if num_graph_nodes is not None else (
        int(max(problem.nodes.max(initial=-1), problem.block_src.max(initial=-1),
                problem.block_dst.max(initial=-1))) + 1
    )
    ncomp = problem.num_components
    lay = _Layout(problem, n_graph)
    x = np.zeros((n_graph, 2))
    reports = [SolveReport(c, num_free=int(lay.n_free[c])) for c in range(ncomp)]
    for c, cnt in enumerate(np.bincount(lay.block_comp, minlength=ncomp)):
        reports[c].num_blocks = int(cnt)

    lin = _evaluate(problem, x)
    _check_finite(problem, lin, np.arange(problem.num_blocks))
    f = np.bincount(lay.block_comp, weights=lin.value, minlength=ncomp)
    for c in range(ncomp):
        reports[c].initial_objective = float(f[c])
        reports[c].objective_history.append(float(f[c]))
    lam = np.full(ncomp, opts.initial_damping)
    active = (lay.n_free > 0) & (opts.max_iterations > 0)
    iters = np.zeros(ncomp, dtype=np.int64)
    block_pos = np.full(problem.num_blocks, -1, dtype=np.int64)

    while active.any():
        ab = np.flatnonzero(active[lay.block_comp])
        block_pos[ab] = np.arange(len(ab))
        sub = _Linearization(lin.residual[ab], lin.flow_jac[ab], lin.value[ab], lin.weight[ab])
        gu, gv, hblocks = _normal_blocks(sub)
        vu, vv = lay.vu[ab], lay.vv[ab]
        ok_u, ok_v = vu >= 0, vv >= 0
        g = (np.bincount(np.repeat(2 * vu[ok_u], 2) + np.tile([0, 1], ok_u.sum()),
                         weights=gu[ok_u].ravel(), minlength=2 * lay.n_var)
             + np.bincount(np.repeat(2 * vv[ok_v], 2) + np.tile([0, 1], ok_v.sum()),
                           weights=gv[ok_v].ravel(), minlength=2 * lay.n_var)).reshape(-1, 2)

        step = np.zeros((lay.n_var, 2))
        _dense_steps(lay, ab, hblocks, g, lam, active, step)
        for c, pattern in lay.sparse.items():
            if active[c]:
                s0 = pattern.start
                step[s0:s0 + pattern.nv] = pattern.step(hblocks, block_pos[pattern.blocks], g, lam[c])

        av = np.flatnonzero(active[lay.var_comp])
        nodes = lay.free[av]
        cand = project_l1(x[nodes] + step[av], problem.K)
        x_trial = x.copy()
        x_trial[nodes] = cand
        trial = _evaluate(problem, x_trial, ab)
        f_trial = np.full(ncomp, np.inf)
        f_trial[active] = np.bincount(lay.block_comp[ab], weights=trial.value,
                                      minlength=ncomp)[active]
        accept = active & np.isfinite(f_trial) & (f_trial <= f)

        comp_step = np.zeros(ncomp)
        if len(av):
            np.maximum.at(comp_step, lay.var_comp[av], np.abs(cand - x[nodes]).max(axis=1))

        iters[active] += 1
        acc_var = accept[lay.var_comp[av]]
        x[nodes[acc_var]] = cand[acc_var]
        acc = accept[lay.block_comp[ab]]
        take, src = ab[acc], np.flatnonzero(acc)
        lin.residual[take] = trial.residual[src]
        lin.flow_jac[take] = trial.flow_jac[src]
        lin.value[take] = trial.value[src]
        lin.weight[take] = trial.weight[src]
        if len(take):
            _check_finite(problem, lin, take)

        decrease = f - f_trial
        small_f = accept & (decrease <= opts.function_tolerance * f)
        small_x = accept & (comp_step < opts.step_tolerance)
        done = small_f | small_x | (accept & (f_trial == 0))
        f = np.where(accept, f_trial, f)
        lam = np.where(active, np.where(accept, lam * 0.3, lam * 10.0), lam)
        stalled = active & ~accept & (lam > 1e16)
        for c in np.flatnonzero(accept):
            reports[c].max_step = max(reports[c].max_step, float(comp_step[c]))
            reports[c].objective_history.append(float(f[c]))
        finished = active & (done | stalled | (iters >= opts.max_iterations))
        for c in np.flatnonzero(finished):
            reports[c].converged = bool(done[c] or stalled[c])
        active &= ~finished

    for c in range(ncomp):
        rep = reports[c]
        rep.iterations = int(iters[c])
        rep.final_objective = float(f[c])
        vars_c = lay.free[lay.var_comp == c]
        rep.moved = np.linalg.norm(x[vars_c], axis=1)
    return x, reports


def _check_finite(problem: RefinementProblem, lin: _Linearization, blocks: np.ndarray) -> None:
    r, j = lin.residual[blocks], lin.flow_jac[blocks]
    bad = ~(np.isfinite(r).all(axis=1) & np.isfinite(j).all(axis=(1, 2)))
    if bad.any():
        b = int(blocks[np.flatnonzero(bad)[0]])
        raise SolveError(
            f"non-finite residual or jacobian on edge {int(problem.block_edge[b])} "
            f"({int(problem.block_src[b])} -> {int(problem.block_dst[b])})"
        )


def _damped(h: np.ndarray, lam: np.ndarray) -> np.ndarray:
    diag = np.clip(np.diagonal(h, axis1=-2, axis2=-1), 1e-6, 1e32)
    out = h.copy()
    idx = np.arange(h.shape[-1])
    out[..., idx, idx] += lam[:, None] * diag
    return out


def _dense_steps(lay: _Layout, ab: np.ndarray, hblocks, g, lam, active, step) -> None:
    if not lay.groups:
        return
    comp = lay.block_comp[ab]
    dense = lay.dense[comp]
    h_flat = np.zeros(lay.h_size)
    for name, la, lb in zip(_PAIRS, (lay.lu, lay.lu, lay.lv, lay.lv), (lay.lu, lay.lv, lay.lu, lay.lv)):
        a, b = la[ab], lb[ab]
        ok = dense & (a >= 0) & (b >= 0)
        index = lay.hessian_index(a[ok], b[ok], comp[ok])
        h_flat += np.bincount(index.ravel(), weights=hblocks[name][ok].reshape(-1),
                              minlength=lay.h_size)
    for d, comps in lay.groups.items():
        comps = comps[active[comps]]
        if not len(comps):
            continue
        idx = lay.h_start[comps][:, None] + np.arange(d * d)[None]
        h = h_flat[idx].reshape(-1, d, d)
        nv = d // 2
        var_idx = lay.var_start[comps][:, None] + np.arange(nv)[None]
        rhs = -g[var_idx].reshape(-1, d)
        delta = np.linalg.solve(_damped(h, lam[comps]), rhs[..., None])[..., 0]
        step[var_idx.ravel()] = delta.reshape(-1, 2)


# ---------------------------------------------------------------------------
# query refinement


def refine_query(x0, hypotheses) -> list[tuple[np.ndarray, int]]:
    """Closed-form refinement of a query keypoint against 3D-point hypotheses.

    ``hypotheses`` is a sequence of ``(similarities, flows)`` pairs, one per
    hypothesis; each yields ``x0 + sum(s_i d_i) / sum(s_i)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    out = []
    for pid, (sims, flows) in enumerate(hypotheses):
        s = np.asarray(sims, dtype=np.float64).ravel()
        d = np.asarray(flows, dtype=np.float64).reshape(-1, 2)
        if len(s) == 0 or len(s) != len(d):
            raise ValueError(f"hypothesis {pid}: need one similarity per flow")
        if np.any(s <= 0):
            raise ValueError(f"hypothesis {pid}: similarities must be positive")
        out.append((x0 + (s[:, None] * d).sum(axis=0) / s.sum(), pid))
    return out
