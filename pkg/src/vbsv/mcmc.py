"""Gibbs sampler for the univariate stochastic-volatility model.

``z_t = exp(h_t / 2) u_t``, ``h_t = h_{t-1} + v_t``, ``v_t ~ N(0, sigma_h^2)``,
``h_0 ~ N(0, V_h0)``, ``sigma_h^2 ~ IG(nu, S)``.

The latent path is drawn by independence Metropolis-Hastings with Laplace
proposals of its exact conditional, so the chain targets the exact
posterior. By default the path is split into short contiguous blocks; blocks
alternate between two passes so that the blocks within a pass are
conditionally independent and share one band Newton solve. The remaining
two parameters have conjugate conditionals.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from vbsv.band import BandCholeskyFactor, BandSymMatrix, backward_solve, band_cholesky, band_solve, build_hth
from vbsv.errors import DimensionError, IterationLimitError, VBSVError
from vbsv.prior import PriorSpec
from vbsv.svapprox import SVTarget, find_mode, smoothed_log, target_log_kernel

logger = logging.getLogger(__name__)

LOW_ACCEPTANCE = 0.10


class LowAcceptanceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class MCMCConfig:
    n_draws: int = 10000
    n_burn: int = 1000
    seed: object = 0
    proposal_inflation: float = 1.2
    block_size: int | None = 5  # None: the whole path in one block

    def __post_init__(self):
        if self.n_draws < 1 or self.n_burn < 0:
            raise ValueError("n_draws must be >= 1 and n_burn >= 0")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block_size must be positive or None")
        if not self.proposal_inflation >= 1.0:
            raise ValueError("proposal_inflation must be >= 1")


@dataclass
class MCMCDraws:
    h_draws: np.ndarray  # (n_draws, T)
    sigma_h2_draws: np.ndarray
    h0_draws: np.ndarray
    acceptance_rate: float
    low_acceptance: bool = False

    @property
    def n_draws(self) -> int:
        return self.h_draws.shape[0]


def univariate_prior(V_h0: float = 10.0, nu: float = 5.0, S: float = 0.16) -> PriorSpec:
    """Prior for a regression-free equation (empty coefficient block)."""
    return PriorSpec(np.zeros(0), np.zeros(0), V_h0=V_h0, nu=nu, S=S)


class SVGibbs:
    """One chain. ``z=None`` with ``T`` set runs the prior-only chain."""

    def __init__(self, z, prior: PriorSpec, cfg: MCMCConfig, T: int | None = None):
        if z is None:
            if T is None or T < 2:
                raise DimensionError("prior-only chain needs T >= 2")
            self.z2 = None
            self.T = int(T)
        else:
            z = np.asarray(z, dtype=np.float64)
            if z.ndim != 1 or z.size < 2:
                raise DimensionError("z must be a vector with T >= 2")
            if not np.all(np.isfinite(z)):
                raise ValueError("z contains non-finite values")
            self.z2 = z * z
            self.T = z.size
        self.prior = prior
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.hth = build_hth(self.T)
        self.sigma_h2 = prior.S / (prior.nu - 1.0)
        if self.z2 is None:
            self.h = np.zeros(self.T)
        else:
            self.h = smoothed_log(np.maximum(self.z2, 1e-10))
        self.h0 = float(self.h[0])
        self._mode = None
        self.accepted = 0
        self.proposed = 0

    def _draw_h(self) -> None:
        if self.z2 is None:
            self.h = self.h0 + np.cumsum(self.rng.standard_normal(self.T) * math.sqrt(self.sigma_h2))
        elif self.cfg.block_size is None or self.cfg.block_size >= self.T:
            self._draw_h_joint()
        else:
            B = self.cfg.block_size
            offset = int(self.rng.integers(B))
            starts = np.arange(offset - B if offset else 0, self.T, B)
            labels = np.repeat(np.arange(starts.size), np.diff(np.append(np.maximum(starts, 0), self.T)))
            for parity in (0, 1):
                self._draw_blocks(labels, parity)

    def _draw_blocks(self, labels: np.ndarray, parity: int) -> None:
        """Update every block whose label has the given parity, given the rest."""
        rng, T, c = self.rng, self.T, 1.0 / self.sigma_h2
        free = np.flatnonzero(labels % 2 == parity)
        if free.size == 0:
            return
        block_of = np.full(T, -1)
        block_of[free] = labels[free] // 2
        n_blocks = int(block_of[free].max()) + 1
        # an edge t links h_{t-1} and h_t (h_{-1} = h0); blocks in one pass never share an edge
        prev = np.concatenate([[-1], block_of[:-1]])
        edge_owner = np.where(block_of >= 0, block_of, prev)
        adjacent = np.diff(free) == 1
        z2 = self.z2
        blk = block_of[free]
        has_edge = edge_owner >= 0
        edge_blk = edge_owner[has_edge]
        diag_prior = c * self.hth.bands[0][free]
        off = np.where(adjacent, -c, 0.0)
        d = np.empty(T)

        def block_log_kernel(h):
            d[0] = h[0] - self.h0
            np.subtract(h[1:], h[:-1], out=d[1:])
            hf = h[free]
            out = np.bincount(blk, -0.5 * hf - 0.5 * z2[free] * np.exp(-hf), n_blocks)
            out += np.bincount(edge_blk, -0.5 * c * d[has_edge] ** 2, n_blocks)
            return out

        def grad_and_curv(h):
            w = z2[free] * np.exp(-h[free])
            g = -0.5 + 0.5 * w - c * self.hth.matvec(h - self.h0)[free]
            bands = np.zeros((2, free.size))
            bands[0] = diag_prior + 0.5 * w
            bands[1, :-1] = off
            return g, BandSymMatrix(bands)

        h = self.h.copy()
        f = block_log_kernel(h).sum()
        for _ in range(50):
            g, K = grad_and_curv(h)
            L = band_cholesky(K)
            if float(np.max(np.abs(g))) <= 1e-8:
                break
            step = band_solve(L, g)
            for _ in range(30):
                trial = h.copy()
                trial[free] += step
                f_trial = block_log_kernel(trial).sum()
                if f_trial >= f - 1e-12 * (1.0 + abs(f)):
                    break
                step *= 0.5
            h, f = trial, f_trial
        else:
            raise IterationLimitError("block mode search did not converge", last=h)
        mode = h[free]
        infl = self.cfg.proposal_inflation
        cand_free = mode + backward_solve(BandCholeskyFactor(L.bands / math.sqrt(infl)),
                                          rng.standard_normal(free.size))
        cand = self.h.copy()
        cand[free] = cand_free

        def block_log_q(x):
            d = x - mode
            return np.bincount(block_of[free], -0.5 * d * K.matvec(d) / infl, n_blocks)

        log_ratio = (block_log_kernel(cand) - block_log_q(cand_free)
                     - block_log_kernel(self.h) + block_log_q(self.h[free]))
        accept = np.log(rng.uniform(size=n_blocks)) < log_ratio
        take = accept[block_of[free]]
        self.h[free[take]] = cand_free[take]
        self.accepted += int(accept.sum())
        self.proposed += n_blocks

    def _draw_h_joint(self) -> None:
        rng = self.rng
        t = SVTarget(self.z2, 1.0 / self.sigma_h2, self.h0, self.hth)
        try:
            mode, K, L, _ = find_mode(t, self._mode)
        except VBSVError:
            mode, K, L, _ = find_mode(t, None)
        self._mode = mode
        infl = self.cfg.proposal_inflation
        prop_L = BandCholeskyFactor(L.bands / math.sqrt(infl))
        cand = mode + backward_solve(prop_L, rng.standard_normal(self.T))

        def log_q(x):
            d = x - mode
            return -0.5 * K.quad(d) / infl

        log_ratio = (target_log_kernel(t, cand) - log_q(cand)) - (target_log_kernel(t, self.h) - log_q(self.h))
        self.proposed += 1
        if math.log(rng.uniform()) < log_ratio:
            self.h = cand
            self.accepted += 1

    def _draw_sigma(self) -> None:
        d = np.diff(self.h, prepend=self.h0)
        shape = self.prior.nu + 0.5 * self.T
        scale = self.prior.S + 0.5 * float(d @ d)
        self.sigma_h2 = scale / self.rng.gamma(shape)

    def _draw_h0(self) -> None:
        K = 1.0 / self.prior.V_h0 + 1.0 / self.sigma_h2
        mean = (self.h[0] / self.sigma_h2) / K
        self.h0 = mean + self.rng.standard_normal() / math.sqrt(K)

    def step(self) -> None:
        self._draw_h()
        self._draw_sigma()
        self._draw_h0()

    def run(self) -> MCMCDraws:
        cfg = self.cfg
        for _ in range(cfg.n_burn):
            self.step()
        self.accepted = self.proposed = 0
        H = np.empty((cfg.n_draws, self.T))
        s2 = np.empty(cfg.n_draws)
        h0 = np.empty(cfg.n_draws)
        for j in range(cfg.n_draws):
            self.step()
            H[j] = self.h
            s2[j] = self.sigma_h2
            h0[j] = self.h0
        rate = self.accepted / self.proposed if self.proposed else 1.0
        low = self.z2 is not None and rate < LOW_ACCEPTANCE
        if low:
            warnings.warn(f"MH acceptance rate {rate:.3f} below {LOW_ACCEPTANCE}", LowAcceptanceWarning,
                          stacklevel=3)
        return MCMCDraws(H, s2, h0, rate, low)


def sample_sv_univariate(z, prior: PriorSpec, cfg: MCMCConfig | None = None) -> MCMCDraws:
    return SVGibbs(z, prior, cfg or MCMCConfig()).run()


def posterior_means(d: MCMCDraws) -> np.ndarray:
    if d.h_draws.shape[0] == 0:
        raise ValueError("no retained draws")
    return d.h_draws.mean(axis=0)
