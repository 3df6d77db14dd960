"""Exact checks of the divergence identities and bounds on small discrete worlds.

A world has finite supports for x, z_c and z_d.  The ground-truth side is a
joint p(z_c, z_d) (independent factors) and a decoder p(x | z_c, z_d); the
candidate encoder is q(z_c | x).  Worlds used for the marginal relaxation also
carry a q-side generative model q(z_c, z_d), q(x | z_c, z_d) from which the
encoder is obtained by Bayes' rule.  Every expectation is an exact sum.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import ContractError, VdnError

REPORT_SCHEMA_VERSION = 1
RESIDUAL_TOL = 1e-10
SLACK_TOL = -1e-10
MAX_SUPPORT = 8
SUITES = ("lemma1", "thm1", "relax", "thm2")


class WorldInvariantError(VdnError):
    """The world itself is malformed; no theorem is being tested."""


class InfeasibleBetaError(ContractError):
    def __init__(self, z_index: int, lhs: float, rhs: float):
        self.z_index = z_index
        super().__init__(f"domination fails at z_c={z_index}: q_target={lhs!r} > sum beta q_source={rhs!r}")


class AssumptionViolation(ContractError):
    pass


def kl(a, b) -> float:
    """Exact KL(a || b) with 0 log 0 = 0; +inf if b vanishes where a does not."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = a > 0
    if np.any(b[mask] <= 0):
        return math.inf
    return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))


@dataclass
class DiscreteWorld:
    p_cd: np.ndarray                   # (n_c, n_d) ground-truth latent joint
    p_x_given_cd: np.ndarray           # (n_c, n_d, n_x)
    q_c_given_x: np.ndarray            # (n_x, n_c)
    q_cd: np.ndarray | None = None     # q-side latent joint
    q_x_given_cd: np.ndarray | None = None
    seed: int | None = None
    n_styles: int | None = None        # factorised worlds: x = a * n_styles + b

    def __post_init__(self):
        self.p_cd = np.asarray(self.p_cd, dtype=np.float64)
        self.p_x_given_cd = np.asarray(self.p_x_given_cd, dtype=np.float64)
        self.q_c_given_x = np.asarray(self.q_c_given_x, dtype=np.float64)
        if self.q_cd is not None:
            self.q_cd = np.asarray(self.q_cd, dtype=np.float64)
            self.q_x_given_cd = np.asarray(self.q_x_given_cd, dtype=np.float64)

    @property
    def sizes(self) -> tuple[int, int, int]:
        n_c, n_d, n_x = self.p_x_given_cd.shape
        return n_x, n_c, n_d

    def validate(self, tol: float = 1e-12) -> "DiscreteWorld":
        if self.p_cd.ndim != 2 or self.p_x_given_cd.shape[:2] != self.p_cd.shape:
            raise WorldInvariantError("p_x_given_cd must be (n_c, n_d, n_x) matching p_cd")
        n_x, n_c, _ = self.sizes
        if self.q_c_given_x.shape != (n_x, n_c):
            raise WorldInvariantError(f"q_c_given_x must be ({n_x}, {n_c})")
        if max(self.p_x_given_cd.shape) > MAX_SUPPORT:
            raise WorldInvariantError(f"supports are limited to {MAX_SUPPORT} values")
        arrays = [("p_cd", self.p_cd, None), ("p_x_given_cd", self.p_x_given_cd, -1),
                  ("q_c_given_x", self.q_c_given_x, -1)]
        if self.q_cd is not None:
            arrays += [("q_cd", self.q_cd, None), ("q_x_given_cd", self.q_x_given_cd, -1)]
        for name, arr, axis in arrays:
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise WorldInvariantError(f"{name} has negative or non-finite entries")
            total = arr.sum() if axis is None else arr.sum(axis=axis)
            if np.max(np.abs(total - 1.0)) > tol:
                raise WorldInvariantError(f"{name} is not normalised (off by {np.max(np.abs(total - 1.0)):.3g})")
        dep = np.max(np.abs(self.p_cd - np.outer(self.p_c, self.p_d)))
        if dep > tol:
            raise WorldInvariantError(f"z_c and z_d are dependent under p (gap {dep:.3g})")
        if np.any(self.q_c_given_x <= 0):
            raise WorldInvariantError("q(z_c|x) must be strictly positive")
        if self.q_cd is not None:
            if self.q_cd.shape != self.p_cd.shape or self.q_x_given_cd.shape != self.p_x_given_cd.shape:
                raise WorldInvariantError("q-side shapes differ from the p side")
            ok = self.q_x > 0
            bayes = self.q_c_and_x[:, ok].T / self.q_x[ok, None]
            if np.max(np.abs(bayes - self.q_c_given_x[ok])) > 1e-10:
                raise WorldInvariantError("q(z_c|x) disagrees with the q-side generative model")
        return self

    # ground-truth marginals
    @property
    def p_c(self):
        return self.p_cd.sum(axis=1)

    @property
    def p_d(self):
        return self.p_cd.sum(axis=0)

    @property
    def p_x(self):
        return np.einsum("cd,cdx->x", self.p_cd, self.p_x_given_cd)

    @property
    def p_x_given_c(self):
        """(n_c, n_x); z_d marginalised with p(z_d | z_c)."""
        joint = np.einsum("cd,cdx->cx", self.p_cd, self.p_x_given_cd)
        pc = self.p_c
        out = np.zeros_like(joint)
        np.divide(joint, pc[:, None], out=out, where=pc[:, None] > 0)
        return out

    def p_c_given_x(self, x: int):
        joint = np.einsum("cd,cd->c", self.p_cd, self.p_x_given_cd[:, :, x])
        return joint / joint.sum()

    # q-side marginals
    def _require_q(self):
        if self.q_cd is None:
            raise ContractError("this world has no q-side generative model")

    @property
    def q_c(self):
        self._require_q()
        return self.q_cd.sum(axis=1)

    @property
    def q_c_and_x(self):
        self._require_q()
        return np.einsum("cd,cdx->cx", self.q_cd, self.q_x_given_cd)

    @property
    def q_x(self):
        return self.q_c_and_x.sum(axis=0)

    @property
    def q_x_given_c(self):
        return self.q_c_and_x / self.q_c[:, None]

    def disentanglement_ratio(self) -> float:
        """sup q(z_c | z_d) / q(z_c) = sup q(z_c, z_d) / (q(z_c) q(z_d))."""
        self._require_q()
        outer = np.outer(self.q_cd.sum(1), self.q_cd.sum(0))
        ok = outer > 0
        return float(np.max(self.q_cd[ok] / outer[ok]))


def _px_positive(world: DiscreteWorld, x: int) -> float:
    n_x = world.sizes[0]
    if not 0 <= x < n_x:
        raise ContractError(f"x={x} outside support of size {n_x}")
    px = float(world.p_x[x])
    if px <= 0:
        raise ContractError(f"p(x={x}) = 0")
    return px


def check_lemma1(world: DiscreteWorld, x: int) -> float:
    """|D(Q(z_c|x)||P(z_c|x)) - [D(Q||P(z_c)) - E_Q log p(x|z_c) + log p(x)]|."""
    px = _px_positive(world, x)
    q = world.q_c_given_x[x]
    lhs = kl(q, world.p_c_given_x(x))
    lik = world.p_x_given_c[:, x]
    if np.any(lik[q > 0] <= 0):
        # both sides are +inf
        return 0.0 if math.isinf(lhs) else math.inf
    rhs = kl(q, world.p_c) - float(np.sum(q * np.log(lik))) + math.log(px)
    return abs(lhs - rhs)


def thm1_bound(world: DiscreteWorld, x: int, prior_d=None) -> float:
    """D(Q(z_c|x)||P(z_c)) - E_{Q, P_d} log p(x|z_c,z_d) + log p(x); +inf if a log is -inf."""
    px = _px_positive(world, x)
    prior_d = world.p_d if prior_d is None else np.asarray(prior_d, dtype=np.float64)
    if prior_d.shape != world.p_d.shape or abs(prior_d.sum() - 1) > 1e-12 or np.any(prior_d < 0):
        raise ContractError("prior_d must be a distribution over z_d")
    q = world.q_c_given_x[x]
    lik = world.p_x_given_cd[:, :, x]
    weight = q[:, None] * prior_d[None, :]
    if np.any(lik[weight > 0] <= 0):
        return math.inf
    mask = weight > 0
    expected = float(np.sum(weight[mask] * np.log(lik[mask])))
    return kl(q, world.p_c) - expected + math.log(px)


def check_thm1(world: DiscreteWorld, x: int, prior_d=None) -> float:
    """Upper bound minus D(Q(z_c|x)||P(z_c|x)); +inf flags a vacuous bound."""
    bound = thm1_bound(world, x, prior_d)
    if math.isinf(bound):
        return math.inf
    return bound - kl(world.q_c_given_x[x], world.p_c_given_x(x))


def check_relaxation(world: DiscreteWorld, x: int) -> tuple[float, float]:
    """(M, M D(Q(z_c)||P(z_c)) + M log M - D(Q(z_c|x)||P(z_c))) with M = max_z q(x|z)/q(x)."""
    qx = float(world.q_x[x])
    if qx <= 0:
        raise ContractError(f"q(x={x}) = 0")
    m = float(np.max(world.q_x_given_c[:, x]) / qx)
    slack = m * kl(world.q_c, world.p_c) + m * math.log(m) - kl(world.q_c_given_x[x], world.p_c)
    return m, slack


def _dominates(q_target, q_sources, betas, tol=1e-12):
    mix = sum(b * q for b, q in zip(betas, q_sources))
    bad = np.flatnonzero(q_target > mix * (1 + tol) + tol)
    return (None, mix) if bad.size == 0 else (int(bad[0]), mix)


def thm2_slack(q_target, p_target, q_sources, p_sources, betas) -> float:
    """sum_i beta_i D(q_i||p_i) - D(q_t||p_t) after checking both premises."""
    q_target = np.asarray(q_target, dtype=np.float64)
    q_sources = [np.asarray(q, dtype=np.float64) for q in q_sources]
    if not (len(q_sources) == len(p_sources) == len(betas)) or not q_sources:
        raise ContractError("need matching, non-empty source lists and betas")
    if any(b < 0 for b in betas):
        raise ContractError("betas must be non-negative")
    bad, mix = _dominates(q_target, q_sources, betas)
    if bad is not None:
        raise InfeasibleBetaError(bad, float(q_target[bad]), float(mix[bad]))
    for i, p in enumerate(p_sources):
        if np.max(np.abs(np.asarray(p) - p_target)) > 1e-12:
            raise AssumptionViolation(f"source {i} has a different ground-truth posterior over z_c")
    return float(sum(b * kl(q, p) for b, q, p in zip(betas, q_sources, p_sources))) - kl(q_target, p_target)


def check_thm2(world: DiscreteWorld, x_target: int, x_sources, betas) -> float:
    x_sources = list(x_sources)
    _px_positive(world, x_target)
    for x in x_sources:
        _px_positive(world, x)
    return thm2_slack(
        world.q_c_given_x[x_target], world.p_c_given_x(x_target),
        [world.q_c_given_x[x] for x in x_sources], [world.p_c_given_x(x) for x in x_sources],
        betas,
    )


@dataclass
class BetaChoice:
    indices: tuple[int, ...]
    betas: tuple[float, ...]
    bound: float


def find_feasible_beta(q_target, q_sources, source_divergences=None, grid: int = 9) -> BetaChoice:
    """Best sum_i beta_i D_i over singletons and a grid of source pairs.

    Without ``source_divergences`` the objective is sum_i beta_i.
    """
    q_target = np.asarray(q_target, dtype=np.float64)
    q_sources = [np.asarray(q, dtype=np.float64) for q in q_sources]
    if not q_sources:
        raise ContractError("need at least one source")
    if np.any(q_target <= 0) or any(np.any(q <= 0) for q in q_sources):
        raise ContractError("densities must be strictly positive")
    div = np.ones(len(q_sources)) if source_divergences is None else np.asarray(source_divergences, float)
    best = None

    def consider(idx, weights):
        nonlocal best
        mix = sum(w * q_sources[i] for i, w in zip(idx, weights))
        scale = float(np.max(q_target / mix))
        betas = tuple(scale * w for w in weights)
        bound = float(sum(b * div[i] for i, b in zip(idx, betas)))
        if best is None or bound < best.bound:
            best = BetaChoice(tuple(idx), betas, bound)

    for i in range(len(q_sources)):
        consider((i,), (1.0,))
    ws = np.linspace(0.0, 1.0, grid + 2)[1:-1]
    for i, j in itertools.combinations(range(len(q_sources)), 2):
        for w in ws:
            consider((i, j), (float(w), float(1.0 - w)))
    bad, _ = _dominates(q_target, [q_sources[i] for i in best.indices], best.betas, tol=1e-9)
    assert bad is None
    return best


# -- random worlds ----------------------------------------------------------------------------

def _dirichlet(rng, n, size=None):
    # floor keeps every entry strictly positive while preserving exact normalisation
    p = rng.dirichlet(np.ones(n), size=size)
    p = np.maximum(p, 1e-6)
    return p / p.sum(axis=-1, keepdims=True)


def random_world(rng: np.random.Generator, seed: int | None = None, max_size: int = 6) -> DiscreteWorld:
    n_x, n_c, n_d = rng.integers(2, max_size + 1, size=3)
    p_c, p_d = _dirichlet(rng, n_c), _dirichlet(rng, n_d)
    return DiscreteWorld(
        np.outer(p_c, p_d), _dirichlet(rng, n_x, size=(n_c, n_d)), _dirichlet(rng, n_c, size=n_x),
        seed=seed,
    ).validate()


def factorized_world(rng: np.random.Generator, seed: int | None = None, max_size: int = 6) -> DiscreteWorld:
    """x = (a, b) with a drawn from p(a|z_c) and b from p(b|z_d); x index = a * n_b + b.

    Every x sharing the content part a has the same ground-truth posterior over z_c,
    so the style values b act as domains.
    """
    n_c, n_d = rng.integers(2, max_size + 1, size=2)
    n_a, n_b = 2, int(rng.integers(3, MAX_SUPPORT // 2 + 1))
    p_c, p_d = _dirichlet(rng, n_c), _dirichlet(rng, n_d)
    a_given_c, b_given_d = _dirichlet(rng, n_a, size=n_c), _dirichlet(rng, n_b, size=n_d)
    dec = np.einsum("ca,db->cdab", a_given_c, b_given_d).reshape(n_c, n_d, n_a * n_b)
    return DiscreteWorld(np.outer(p_c, p_d), dec, _dirichlet(rng, n_c, size=n_a * n_b),
                         seed=seed, n_styles=n_b).validate()


def relax_world(rng: np.random.Generator, decoder: np.ndarray, seed: int | None = None) -> DiscreteWorld:
    """q-side latent joint (1 - a) q(z_c) q(z_d) + a R with a ~ U(0, 1) and a shared decoder."""
    n_c, n_d, n_x = decoder.shape
    q_c, q_d = _dirichlet(rng, n_c), _dirichlet(rng, n_d)
    mixing = _dirichlet(rng, n_c * n_d).reshape(n_c, n_d)
    alpha = rng.uniform()
    q_cd = (1 - alpha) * np.outer(q_c, q_d) + alpha * mixing
    q_cd /= q_cd.sum()
    p_c, p_d = _dirichlet(rng, n_c), _dirichlet(rng, n_d)
    cx = np.einsum("cd,cdx->cx", q_cd, decoder)
    q_c_given_x = (cx / cx.sum(axis=0, keepdims=True)).T
    return DiscreteWorld(np.outer(p_c, p_d), decoder, q_c_given_x, q_cd, decoder, seed=seed).validate()


# -- suites ---------------------------------------------------------------------------------

def world_seed(seed: int, suite: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, SUITES.index(suite), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def suite_decoder(seed: int) -> np.ndarray:
    """Decoder shared by every world of one relax suite run."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, SUITES.index("relax"), 2**31]))
    n_x, n_c, n_d = rng.integers(2, 7, size=3)
    return _dirichlet(rng, n_x, size=(n_c, n_d))


def make_world(suite: str, wseed: int, seed: int = 0) -> DiscreteWorld:
    rng = np.random.default_rng(wseed)
    if suite in ("lemma1", "thm1"):
        return random_world(rng, wseed)
    if suite == "relax":
        return relax_world(rng, suite_decoder(seed), wseed)
    if suite == "thm2":
        return factorized_world(rng, wseed)
    raise ContractError(f"unknown suite {suite!r}")


def _thm2_world_slacks(world: DiscreteWorld) -> list[float]:
    n_b = world.n_styles
    n_a = world.sizes[0] // n_b
    out = []
    for a in range(n_a):
        target = a * n_b
        sources = [a * n_b + b for b in range(1, n_b)]
        divs = [kl(world.q_c_given_x[x], world.p_c_given_x(x)) for x in sources]
        choice = find_feasible_beta(world.q_c_given_x[target], [world.q_c_given_x[x] for x in sources], divs)
        out.append(check_thm2(world, target, [sources[i] for i in choice.indices], choice.betas))
    return out


def _run_one(suite: str, world: DiscreteWorld) -> dict:
    n_x = world.sizes[0]
    if suite == "lemma1":
        return {"value": max(check_lemma1(world, x) for x in range(n_x))}
    if suite == "thm1":
        return {"value": min(check_thm1(world, x) for x in range(n_x))}
    if suite == "relax":
        pairs = [check_relaxation(world, x) for x in range(n_x) if world.q_x[x] > 0]
        return {"value": min(s for _, s in pairs), "M": max(m for m, _ in pairs),
                "ratio": world.disentanglement_ratio()}
    return {"value": min(_thm2_world_slacks(world))}


def run_suite(suite: str, n_worlds: int, seed: int) -> dict:
    """Deterministic report for one suite; ``passed`` follows the residual/slack thresholds."""
    if n_worlds < 1:
        raise ContractError("n_worlds must be >= 1")
    is_identity = suite == "lemma1"
    values, failing, rejected, extras = [], [], [], []
    for i in range(n_worlds):
        wseed = world_seed(seed, suite, i)
        try:
            world = make_world(suite, wseed, seed)
        except WorldInvariantError as exc:
            rejected.append({"world_seed": wseed, "reason": str(exc)})
            continue
        res = _run_one(suite, world)
        values.append(res["value"])
        extras.append(res)
        ok = res["value"] < RESIDUAL_TOL if is_identity else res["value"] >= SLACK_TOL
        if not ok:
            failing.append({"world_seed": wseed, "index": i, "value": res["value"]})
    worst = (max(values) if is_identity else min(values)) if values else None
    report = {
        "suite": suite,
        "metric": "max_residual" if is_identity else "min_slack",
        "worst": worst,
        "threshold": RESIDUAL_TOL if is_identity else SLACK_TOL,
        "n_worlds": n_worlds,
        "n_checked": len(values),
        "n_failed": len(failing),
        "failing_worlds": failing,
        "rejected_worlds": rejected,
        "passed": not failing and bool(values),
    }
    if suite == "relax" and len(extras) >= 3:
        rho = spearmanr([e["ratio"] for e in extras], [e["M"] for e in extras]).statistic
        report["tightness"] = {
            "spearman_ratio_vs_M": float(rho),
            "n_worlds": len(extras),
            "positive": bool(rho > 0),
        }
    return report


def verify(suites, n_worlds: int, seed: int) -> dict:
    reports = {s: run_suite(s, n_worlds, seed) for s in suites}
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": seed,
        "n_worlds": n_worlds,
        "suites": reports,
        "passed": all(r["passed"] for r in reports.values()),
    }
