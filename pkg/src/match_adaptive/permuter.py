"""Support and sampling of the treatment distribution given the realized match.

A flip vector assigns one bit per connected component; a set bit swaps the
treated and control labels of every pair in the component. Components in
the same meta-component interact through the unmatched units at the meta's
boundaries, so each meta-component carries its own support and its own
renormalized probabilities, and meta-components are independent.

Three representations are used for a meta-component's distribution:

``product``
    every flip vector is compatible (no usable boundary), components are
    independent Bernoulli variables;
``explicit``
    the compatible vectors are enumerated with their probabilities;
``rejection``
    too many components to enumerate; draws come from the independent
    component distribution and are filtered by the compatibility check.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import MatchedDesign, Sample, ValidationError
from .propensity import odds
from .structure import ConnectedComponent, DesignStructure, MetaComponent, analyze

TOL = 1e-12
EXPLICIT_LIMIT = 20  # components per meta-component enumerated exactly
CALIPER_EXPLICIT_LIMIT = 12
PRODUCT_CHUNK = 2_000_000  # cells per chunk when drawing wide product metas


class SupportTooLarge(ValidationError):
    pass


class SamplingError(ArithmeticError):
    pass


def _rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


# ---------------------------------------------------------------------------
# probabilities


def component_flip_probability(pair_scores: np.ndarray) -> float:
    """Probability that a component is flipped.

    ``pair_scores`` holds one row ``(score of observed treated, score of
    observed control)`` per pair of the component. The keep and switch
    weights are the products of the within-pair treatment probabilities of
    the observed and the swapped arrangement.
    """
    ps = np.asarray(pair_scores, dtype=float).reshape(-1, 2)
    if ps.shape[0] == 0:
        raise ValidationError("component has no pairs")
    lt = np.log(odds(ps[:, 0]))
    lc = np.log(odds(ps[:, 1]))
    # log p_T = lt - logaddexp(lt, lc); log(1 - p_T) = lc - logaddexp(lt, lc)
    norm = np.logaddexp(lt, lc)
    log_keep = float(np.sum(lt - norm))
    log_switch = float(np.sum(lc - norm))
    return float(np.exp(log_switch - np.logaddexp(log_keep, log_switch)))


def vector_log_weights(vectors: np.ndarray, flip_prob: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=bool)
    f = np.clip(flip_prob, 1e-300, 1.0)
    g = np.clip(1.0 - flip_prob, 1e-300, 1.0)
    return v @ np.log(f) + (~v) @ np.log(g)


def normalized_probabilities(vectors: np.ndarray, flip_prob: np.ndarray) -> np.ndarray:
    lw = vector_log_weights(vectors, flip_prob)
    lw = lw - lw.max()
    w = np.exp(lw)
    return w / w.sum()


# ---------------------------------------------------------------------------
# uncalipered compatibility


@dataclass(frozen=True)
class MetaGeometry:
    """Per-component arrays of one meta-component, in increasing score order."""

    lo: np.ndarray
    hi: np.ndarray
    low_arm: np.ndarray  # observed treatment of each component's lowest unit
    high_arm: np.ndarray
    lower: float
    upper: float
    lower_arm: int | None
    upper_arm: int | None

    @property
    def m(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @classmethod
    def build(cls, meta: MetaComponent, components: Sequence[ConnectedComponent]) -> "MetaGeometry":
        comps = [components[r] for r in meta.component_indices]
        return cls(
            np.array([c.low for c in comps]),
            np.array([c.high for c in comps]),
            np.array([c.lowest_arm for c in comps], dtype=np.int8),
            np.array([c.highest_arm for c in comps], dtype=np.int8),
            meta.lower_boundary,
            meta.upper_boundary,
            meta.lower_arm,
            meta.upper_arm,
        )


def valid_mask(geo: MetaGeometry, flips: np.ndarray, tol: float = TOL) -> np.ndarray:
    """Vectorised compatibility check for a batch of flip vectors ``(n, m)``.

    Upward, the lower boundary unit may take over the lowest unit of any
    component whose lowest unit has the opposite treatment; the chain then
    continues from that component's highest unit. Entering component j from
    frontier q adds ``lo_j - q`` to the new cost and the component width to
    the old cost; a vector is rejected as soon as some chain has a smaller
    new cost. The best chain ending at each component is found with one
    running minimum, so the scan is linear in m. Downward is the mirror image.
    """
    W = np.asarray(flips, dtype=bool)
    if W.ndim == 1:
        W = W[None, :]
    n = W.shape[0]
    ok = np.ones(n, dtype=bool)
    width = geo.width
    if geo.lower_arm is not None and math.isfinite(geo.lower):
        M = np.full(n, -geo.lower)  # min over chains of (new - old - frontier)
        for j in range(geo.m):
            enter = (geo.low_arm[j] ^ W[:, j]) != geo.lower_arm
            best = geo.lo[j] - width[j] + M
            ok &= ~(enter & (best < -tol))
            M = np.where(enter, np.minimum(M, best - geo.hi[j]), M)
    if geo.upper_arm is not None and math.isfinite(geo.upper):
        M = np.full(n, geo.upper)  # min over chains of (new - old + frontier)
        for j in range(geo.m - 1, -1, -1):
            enter = (geo.high_arm[j] ^ W[:, j]) != geo.upper_arm
            best = M - geo.hi[j] - width[j]
            ok &= ~(enter & (best < -tol))
            M = np.where(enter, np.minimum(M, best + geo.lo[j]), M)
    return ok


@dataclass
class RecursionState:
    index: int
    running_min: float  # min over chains of new cost - old cost -/+ frontier
    bits: int  # partial flip vector, bit j = component j


def _check_direction(geo: MetaGeometry, up: bool, tol: float = TOL) -> set[int]:
    """All flip vectors (as bitmasks) that survive the one-sided recursion.

    Depth-first over components with an explicit stack. A branch is cut as
    soon as a chain would lower the cost; once no remaining component can
    ever produce a rejection the branch is accepted with all completions.
    """
    m = geo.m
    order = list(range(m)) if up else list(range(m - 1, -1, -1))
    arms = geo.low_arm if up else geo.high_arm
    bound_arm = geo.lower_arm if up else geo.upper_arm
    width = geo.width
    if up:
        gain = geo.lo - width  # best = gain + running_min
        exit_shift = -geo.hi
        start = -geo.lower
    else:
        gain = -geo.hi - width
        exit_shift = geo.lo
        start = geo.upper
    # entering a component lowers the running minimum by twice its width, so
    # suffix_min[pos] bounds every future chain from below
    suffix_min = np.full(m + 1, math.inf)
    for pos in range(m - 1, -1, -1):
        j = order[pos]
        suffix_min[pos] = min(gain[j], suffix_min[pos + 1] - 2.0 * width[j])

    out: set[int] = set()
    stack = [RecursionState(0, start, 0)]
    while stack:
        st = stack.pop()
        if st.index == m:
            out.add(st.bits)
            continue
        if suffix_min[st.index] + st.running_min >= -tol:
            free = [order[p] for p in range(st.index, m)]
            for sub in range(1 << len(free)):
                bits = st.bits
                for b, j in enumerate(free):
                    if sub >> b & 1:
                        bits |= 1 << j
                out.add(bits)
            continue
        j = order[st.index]
        for w in (0, 1):
            bits = st.bits | (w << j)
            if (int(arms[j]) ^ w) != bound_arm:
                best = gain[j] + st.running_min
                if best < -tol:
                    continue
                stack.append(RecursionState(st.index + 1, min(st.running_min, best + exit_shift[j]), bits))
            else:
                stack.append(RecursionState(st.index + 1, st.running_min, bits))
    return out


def _bits_to_array(masks: Sequence[int], m: int) -> np.ndarray:
    arr = np.array(sorted(masks), dtype=np.int64)
    return ((arr[:, None] >> np.arange(m)) & 1).astype(bool)


def _all_vectors(m: int) -> np.ndarray:
    return _bits_to_array(range(1 << m), m)


def compatible_vectors(geo: MetaGeometry, method: str = "vectorized") -> np.ndarray:
    """Compatible flip vectors of a meta-component as a bool array, identity first.

    ``method='recursive'`` intersects the upward and downward depth-first
    searches; ``'vectorized'`` checks every vector with :func:`valid_mask`.
    Both give the same set.
    """
    m = geo.m
    if method == "recursive":
        full = (1 << m) - 1
        if geo.lower_arm is not None and math.isfinite(geo.lower):
            ups = _check_direction(geo, True)
        else:
            ups = set(range(full + 1))
        if geo.upper_arm is not None and math.isfinite(geo.upper):
            downs = _check_direction(geo, False)
        else:
            downs = set(range(full + 1))
        return _bits_to_array(ups & downs, m)
    if method != "vectorized":
        raise ValueError(f"unknown method {method!r}")
    rows = []
    chunk = 1 << 16
    for start in range(0, 1 << m, chunk):
        masks = np.arange(start, min(start + chunk, 1 << m), dtype=np.int64)
        W = ((masks[:, None] >> np.arange(m)) & 1).astype(bool)
        rows.append(W[valid_mask(geo, W)])
    return np.concatenate(rows)


# ---------------------------------------------------------------------------
# caliper compatibility


@dataclass
class LocalCaliperCheck:
    """Exact check of one meta-component under caliper matching.

    The region is the meta's units plus the nearest unmatched unit on each
    side. A flip vector is compatible iff the caliper-optimal match of the
    region under the flipped labels has as many pairs and no smaller total
    distance than the meta's own pairs.
    """

    scores: np.ndarray  # region units
    z: np.ndarray  # observed treatments
    unit_component: np.ndarray  # local component index, -1 for boundary units
    n_pairs: int
    objective: float
    caliper: float
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, flips: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(np.asarray(flips, dtype=bool))
        out = np.empty(W.shape[0], dtype=bool)
        keys = np.packbits(W, axis=1)
        for i, key in enumerate(map(bytes, keys)):
            hit = self._cache.get(key)
            if hit is None:
                hit = self._check(W[i])
                self._cache[key] = hit
            out[i] = hit
        return out

    def _check(self, w: np.ndarray) -> bool:
        flip_unit = np.zeros(self.z.size, dtype=bool)
        inside = self.unit_component >= 0
        flip_unit[inside] = w[self.unit_component[inside]]
        z = self.z ^ flip_unit
        k, obj = caliper_optimum(self.scores, z, self.caliper)
        if k != self.n_pairs:
            return k < self.n_pairs
        return obj >= self.objective - 1e-12 * max(1.0, self.objective)


def caliper_optimum(scores: np.ndarray, z: np.ndarray, caliper: float) -> tuple[int, float]:
    """(pairs, total distance) of the caliper-optimal match of a small unit set."""
    from scipy.optimize import linear_sum_assignment

    t = scores[z == 1]
    c = scores[z == 0]
    if t.size == 0 or c.size == 0:
        return 0, 0.0
    d = np.abs(t[:, None] - c[None, :])
    feas = d <= caliper
    if not feas.any():
        return 0, 0.0
    bonus = 2.0 * (min(t.size, c.size) + 1) * min(caliper, 1.0) + 1.0
    cost = np.where(feas, d - bonus, 0.0)
    rows, cols = linear_sum_assignment(cost)
    used = feas[rows, cols]
    return int(used.sum()), float(d[rows[used], cols[used]].sum())


# ---------------------------------------------------------------------------
# distributions


@dataclass
class MetaComponentDistribution:
    components: tuple[int, ...]  # global component indices
    flip_prob: np.ndarray
    mode: str  # 'product' | 'explicit' | 'rejection'
    support: np.ndarray | None = None  # (S, m) bool, identity first
    probabilities: np.ndarray | None = None
    validator: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.mode == "explicit":
            assert self.support is not None and self.support.shape[0] > 0
            assert not self.support[0].any(), "identity must be compatible"
            self.probabilities = normalized_probabilities(self.support, self.flip_prob)
            self._cdf = np.cumsum(self.probabilities)
            self._cdf[-1] = 1.0

    @property
    def m(self) -> int:
        return len(self.components)

    @property
    def support_size(self) -> int | None:
        if self.mode == "product":
            return 1 << self.m if self.m < 63 else None
        if self.mode == "explicit":
            return int(self.support.shape[0])
        return None

    def enumerate(self) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == "explicit":
            return self.support, self.probabilities
        if self.mode == "product" and self.m <= EXPLICIT_LIMIT:
            vecs = _all_vectors(self.m)
            return vecs, normalized_probabilities(vecs, self.flip_prob)
        raise SupportTooLarge(f"meta-component with {self.m} components is not enumerated")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``(n, m)`` bool flip vectors."""
        if self.mode == "product":
            return rng.random((n, self.m)) < self.flip_prob
        if self.mode == "explicit":
            idx = np.searchsorted(self._cdf, rng.random(n), side="right")
            return self.support[np.minimum(idx, self._cdf.size - 1)]
        return self._sample_rejection(n, rng)

    def _sample_rejection(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, self.m), dtype=bool)
        filled = 0
        rate = 0.5
        for _ in range(10_000):
            if filled == n:
                return out
            batch = int(min(max(64, 1.2 * (n - filled) / rate), 1_000_000))
            cand = rng.random((batch, self.m)) < self.flip_prob
            keep = cand[self.validator(cand)]
            rate = max(keep.shape[0] / batch, 1e-4)
            take = min(keep.shape[0], n - filled)
            out[filled : filled + take] = keep[:take]
            filled += take
        raise SamplingError("rejection sampler made no progress; compatible set has negligible mass")


@dataclass
class AssignmentDistribution:
    """Joint law of the component flips; metas are independent."""

    n_pairs: int
    component_pairs: list[np.ndarray]  # pair indices per global component
    metas: list[MetaComponentDistribution]
    structure: DesignStructure | None = None

    @property
    def n_components(self) -> int:
        return len(self.component_pairs)

    @property
    def support_size(self) -> int | None:
        total = 1
        for meta in self.metas:
            s = meta.support_size
            if s is None:
                return None
            total *= s
        return total

    def pair_signs(self, comp_flips: np.ndarray) -> np.ndarray:
        """+1 for kept pairs, -1 for swapped pairs, per row of component flips."""
        F = np.atleast_2d(comp_flips)
        signs = np.ones((F.shape[0], self.n_pairs))
        for r, idx in enumerate(self.component_pairs):
            signs[:, idx] = np.where(F[:, r : r + 1], -1.0, 1.0)
        return signs

    def _component_values(self, values: np.ndarray) -> np.ndarray:
        return np.stack([values[idx].sum(axis=0) for idx in self.component_pairs])

    def draw_flips(self, n: int, seed: int) -> np.ndarray:
        """``(n, R)`` bool component flips, reproducible per (seed, meta index)."""
        out = np.zeros((n, self.n_components), dtype=bool)
        for i, meta in enumerate(self.metas):
            out[:, list(meta.components)] = self._sample_meta(i, meta, n, seed, None)
        return out

    def _sample_meta(self, i, meta, n, seed, comp_values):
        rng = _rng(seed, i)
        if meta.mode == "product" and comp_values is not None and n * meta.m > PRODUCT_CHUNK:
            step = max(1, PRODUCT_CHUNK // meta.m)
            parts = [
                meta.sample(min(step, n - a), rng) @ comp_values for a in range(0, n, step)
            ]
            return np.concatenate(parts)
        flips = meta.sample(n, rng)
        return flips if comp_values is None else flips @ comp_values

    def draw_linear(self, values: np.ndarray, n: int, seed: int) -> np.ndarray:
        """``sum_k s_k values[k]`` for ``n`` draws, where ``s_k = -1`` on swapped pairs.

        ``values`` is ``(K,)`` or ``(K, q)``; the result is ``(n,)`` or ``(n, q)``.
        Same seed gives the same draws as :meth:`draw_flips`.
        """
        v = np.asarray(values, dtype=float)
        squeeze = v.ndim == 1
        v = v.reshape(self.n_pairs, -1)
        cv = self._component_values(v) if self.n_components else np.zeros((0, v.shape[1]))
        total = np.broadcast_to(v.sum(axis=0), (n, v.shape[1])).copy()
        for i, meta in enumerate(self.metas):
            total -= 2.0 * self._sample_meta(i, meta, n, seed, cv[list(meta.components)])
        return total[:, 0] if squeeze else total

    def enumerate(self, cap: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
        """All global flip vectors ``(S, R)`` with probabilities, if ``S <= cap``."""
        size = self.support_size
        if size is None or size > cap:
            raise SupportTooLarge(f"global support size {size if size is not None else 'unknown'} exceeds {cap}")
        flips = np.zeros((1, self.n_components), dtype=bool)
        probs = np.ones(1)
        for meta in self.metas:
            vecs, p = meta.enumerate()
            cols = list(meta.components)
            S0, S1 = flips.shape[0], vecs.shape[0]
            flips = np.repeat(flips, S1, axis=0)
            flips[:, cols] = np.tile(vecs, (S0, 1))
            probs = (probs[:, None] * p[None, :]).ravel()
        return flips, probs

    def enumerate_linear(self, values: np.ndarray, cap: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
        flips, probs = self.enumerate(cap)
        v = np.asarray(values, dtype=float)
        squeeze = v.ndim == 1
        v = v.reshape(self.n_pairs, -1)
        cv = self._component_values(v)
        out = v.sum(axis=0)[None, :] - 2.0 * flips.astype(float) @ cv
        return (out[:, 0] if squeeze else out), probs

    def support_json(self, design: MatchedDesign, cap: int = 10_000) -> str:
        flips, probs = self.enumerate(cap)
        signs = self.pair_signs(flips)
        rows = []
        for s, p in zip(signs, probs):
            rows.append(
                {
                    "flipped_pairs": [list(design.pairs[k]) for k in np.flatnonzero(s < 0)],
                    "probability": float(p),
                }
            )
        return json.dumps({"support_size": len(rows), "assignments": rows}, indent=2)


def _score_map(scores) -> Mapping[str, float]:
    if isinstance(scores, Sample):
        return {u.id: u.score for u in scores.units}
    return scores


def _region(design: MatchedDesign, structure: DesignStructure, meta: MetaComponent, sm, caliper):
    """Units and arms for the caliper check of one meta-component."""
    scores, z, comp = [], [], []
    n_pairs = 0
    obj = 0.0
    for local, r in enumerate(meta.component_indices):
        for k in structure.components[r].pair_indices:
            t, c = design.pairs[k]
            scores += [sm[t], sm[c]]
            z += [1, 0]
            comp += [local, local]
            n_pairs += 1
            obj += abs(sm[t] - sm[c])
    lo = min(scores)
    hi = max(scores)
    reach = False
    for bid, barm in ((meta.lower_id, meta.lower_arm), (meta.upper_id, meta.upper_arm)):
        if bid is None:
            continue
        s = sm[bid]
        if min(abs(s - lo), abs(s - hi)) <= caliper:
            reach = True
        scores.append(s)
        z.append(int(barm))
        comp.append(-1)
    check = LocalCaliperCheck(
        np.array(scores), np.array(z, dtype=np.int8), np.array(comp), n_pairs, obj, caliper
    )
    return check, reach


def build_distribution(
    design: MatchedDesign,
    scores: Mapping[str, float] | Sample,
    prob_scores: Mapping[str, float] | Sample | None = None,
    structure: DesignStructure | None = None,
    explicit_limit: int = EXPLICIT_LIMIT,
) -> AssignmentDistribution:
    """Match-adaptive distribution of component flips for ``design``.

    ``scores`` are the scores the design was matched on; ``prob_scores``
    (default: the same) give the within-pair treatment probabilities, which
    allows matching on estimated scores while weighting with true ones.
    """
    sm = _score_map(scores)
    pm = sm if prob_scores is None else _score_map(prob_scores)
    st = analyze(design, sm) if structure is None else structure
    comp_pairs = [np.array(c.pair_indices, dtype=np.int64) for c in st.components]
    flip = np.array(
        [
            component_flip_probability([(pm[design.pairs[k][0]], pm[design.pairs[k][1]]) for k in idx])
            for idx in comp_pairs
        ]
    )
    metas = []
    for meta in st.metas:
        cols = tuple(meta.component_indices)
        f = flip[list(cols)]
        m = len(cols)
        if design.caliper is not None:
            check, reach = _region(design, st, meta, sm, design.caliper)
            if not reach:
                metas.append(MetaComponentDistribution(cols, f, "product"))
            elif m <= min(explicit_limit, CALIPER_EXPLICIT_LIMIT):
                vecs = _all_vectors(m)
                metas.append(MetaComponentDistribution(cols, f, "explicit", support=vecs[check(vecs)]))
            else:
                metas.append(MetaComponentDistribution(cols, f, "rejection", validator=check))
            continue
        geo = MetaGeometry.build(meta, st.components)
        bounded = (geo.lower_arm is not None) or (geo.upper_arm is not None)
        if not bounded:
            metas.append(MetaComponentDistribution(cols, f, "product"))
        elif m <= explicit_limit:
            metas.append(MetaComponentDistribution(cols, f, "explicit", support=compatible_vectors(geo)))
        else:
            metas.append(
                MetaComponentDistribution(cols, f, "rejection", validator=lambda W, g=geo: valid_mask(g, W))
            )
    return AssignmentDistribution(design.K, comp_pairs, metas, st)


def independent_distribution(flip_prob: np.ndarray) -> AssignmentDistribution:
    """Each pair flips on its own with the given probability (uniform or covariate-adaptive)."""
    f = np.asarray(flip_prob, dtype=float)
    K = f.size
    comps = [np.array([k]) for k in range(K)]
    meta = MetaComponentDistribution(tuple(range(K)), f, "product")
    return AssignmentDistribution(K, comps, [meta] if K else [])


def apply_flips(design: MatchedDesign, signs: np.ndarray) -> dict[str, int]:
    """Treatment of every design unit under one row of pair signs."""
    out = {uid: z for uid, z in design.unmatched}
    for (t, c), s in zip(design.pairs, signs):
        out[t], out[c] = (1, 0) if s > 0 else (0, 1)
    return out


def sample_assignments(dist: AssignmentDistribution, design: MatchedDesign, n: int, seed: int):
    """``n`` treatment dictionaries drawn from ``dist``."""
    signs = dist.pair_signs(dist.draw_flips(n, seed))
    return [apply_flips(design, s) for s in signs]
