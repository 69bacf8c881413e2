"""
Backward solution of the adjoint BSDE with jumps along a fixed forward ensemble
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .config import Config
from .exceptions import BlowUp
from .models import RegressionConfig
from .noise import NoiseBundle
from .problem import ControlledColumn, JumpMeasure, LinearColumn, ModelSpec, _call
from .regression import GroupMeanProjector, RidgeProjector
from .simulator import ParticleEnsemble

logger = logging.getLogger(__name__)


@dataclass
class AdjointEnsemble:
    """Adjoint triple (P, Q, R) on the grid of a forward ensemble.

    Attributes:
        P: (steps+1) x N x n
        Q: steps x N x n x n, Q[k, i, :, j] pairs with Brownian coordinate j
        R: steps x N x A x n, one slot per jump atom
        P_cond: steps x N x n regression estimates E[P_{k+1} | Y_k]
        mf_moments: steps x K mean-field average c_k read through Dpsi(Y)^T c_k
        mf_linear: steps x n mean-field average entering through linear columns and jumps
        terminal_moments: K mean of g_M over the terminal cross-section
    """

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P_cond: np.ndarray
    mf_moments: np.ndarray
    mf_linear: np.ndarray
    terminal_moments: np.ndarray

    @property
    def steps(self) -> int:
        return self.Q.shape[0]


def terminal_condition(
    m: ModelSpec,
    final_states: np.ndarray,
    cross=None,
    terminal_moments: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """P_T^i = g_x(Y_T^i, mu_T) + (1/N) sum_k D_y(dg/dnu)(Y_T^k, mu_T)(Y_T^i).

    The average runs over the first argument with the derivative taken at
    particle i, which factors as Dpsi(Y_T^i)^T mean_k g_M(Y_T^k).

    Returns:
        (P_T, the averaged g_M used)
    """
    cross = cross if cross is not None else m.cross_section(final_states)
    g = m.terminal_cost

    g_x = _call("terminal_cost_dx", g.dx, final_states, cross.moments)
    if terminal_moments is None:
        terminal_moments = _call("terminal_cost_dm", g.dm, final_states, cross.moments).mean(axis=0)
    psi_jac = m.features.jacobian(final_states)
    return g_x + np.einsum("ikb,k->ib", psi_jac, terminal_moments), terminal_moments


def mean_field_averages(
    m: ModelSpec,
    jm: JumpMeasure,
    t: float,
    Y: np.ndarray,
    cross,
    u: np.ndarray,
    E: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """The two ensemble averages the mean-field part of the driver factors into.

    c = mean_i [B_M^T E + sum_j A^j_M^T Q^j + sum_j f^j_M] is read through
    Dpsi(Y)^T; the linear part sums sigma2^T mean Q^j over control-free columns
    and lambda_a gamma2^T mean R_a over atoms.
    """
    blocks = m.split_controls(u)
    b_m = m.drift_coefficient.dm(t, Y, cross.moments, blocks[0])
    moments = np.einsum("iak,ia->ik", b_m, E)
    linear = np.zeros(m.dim_state)
    for j, column in enumerate(m.diffusion_cols, start=1):
        if isinstance(column, ControlledColumn):
            a_m = column.coefficient.dm(t, Y, cross.moments, blocks[j])
            moments = moments + np.einsum("iak,ia->ik", a_m, Q[:, :, j - 1])
        else:
            linear = linear + column.sigma2(t).T @ Q[:, :, j - 1].mean(axis=0)
    for j, term in enumerate(m.running_cost_terms):
        if term is not None:
            moments = moments + term.dm(t, Y, cross.moments, blocks[j])
    for a, (mark, weight) in enumerate(jm.atoms):
        _, _, g2 = m.jump_coefficients(t, mark)
        linear = linear + weight * g2.T @ R[:, a].mean(axis=0)
    return moments.mean(axis=0), linear


def local_driver(
    m: ModelSpec,
    jm: JumpMeasure,
    t: float,
    Y: np.ndarray,
    cross,
    u: np.ndarray,
    E: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
) -> np.ndarray:
    """Particle-wise part of H_x: B_x^T E + sum_j (column x-derivative)^T Q^j + jumps + sum_j f^j_x"""
    blocks = m.split_controls(u)
    driver = np.einsum("iab,ia->ib", m.drift_dx(t, Y, cross, blocks[0]), E)
    for j, column in enumerate(m.diffusion_cols, start=1):
        q_j = Q[:, :, j - 1]
        if isinstance(column, LinearColumn):
            driver = driver + q_j @ column.sigma1(t)
        else:
            a_x = column.coefficient.dx(t, Y, cross.moments, blocks[j])
            driver = driver + np.einsum("iab,ia->ib", a_x, q_j)
    for a, (mark, weight) in enumerate(jm.atoms):
        _, g1, _ = m.jump_coefficients(t, mark)
        driver = driver + weight * R[:, a] @ g1
    for j, term in enumerate(m.running_cost_terms):
        if term is not None:
            driver = driver + term.dx(t, Y, cross.moments, blocks[j])
    return driver


def solve_adjoint(
    m: ModelSpec,
    jm: JumpMeasure,
    ens: ParticleEnsemble,
    noise: Optional[NoiseBundle] = None,
    cfg: Optional[RegressionConfig] = None,
    cap: float = Config.BLOWUP_CAP,
    frozen: Optional[AdjointEnsemble] = None,
    initial_groups: Optional[np.ndarray] = None,
) -> AdjointEnsemble:
    """Explicit backward Euler for (P, Q, R) with regression conditional expectations.

    At step k, with E = E[P_{k+1} | Y_k]:
        Q^j = E[(P_{k+1} - E) dB^j / dt | Y_k]
        R_a = E[(P_{k+1} - E) (dN_a - lambda_a dt) / (lambda_a dt) | Y_k]
        P_k = E + dt * (local driver + Dpsi(Y_k)^T c_k + linear_k)

    Args:
        m: The model
        jm: Jump intensity measure
        ens: Forward ensemble
        noise: Noise the ensemble was simulated with (defaults to ens.noise)
        cfg: Regression settings
        cap: Blow-up threshold on |P|
        frozen: Adjoint whose mean-field averages are reused instead of being
            computed from this ensemble (pinned particles)
        initial_groups: Labels of particles sharing an initial point; step-0
            conditional expectations become within-group means

    Raises:
        SingularRegression: If a regression cannot be repaired by the ridge term
        BlowUp: If |P| exceeds cap
    """
    noise = noise or ens.noise
    cfg = cfg or RegressionConfig()
    K, N, n = ens.steps, ens.particles, ens.dim
    A = jm.size
    dt = ens.grid.dt

    P = np.empty((K + 1, N, n))
    Q = np.zeros((K, N, n, n))
    R = np.zeros((K, N, A, n))
    P_cond = np.empty((K, N, n))
    mf_moments = np.empty((K, m.feature_dim))
    mf_linear = np.empty((K, n))

    P[K], terminal_moments = terminal_condition(
        m, ens.states[K], ens.cross_sections[K], None if frozen is None else frozen.terminal_moments
    )
    _check_adjoint(P[K], K, cap)

    for k in range(K - 1, -1, -1):
        t = ens.grid.time(k)
        Y, cross, u = ens.states[k], ens.cross_sections[k], ens.controls[k]
        if k == 0 and initial_groups is not None:
            projector = GroupMeanProjector(initial_groups)
        else:
            projector = RidgeProjector(cfg).fit(Y)
        E = projector.project(P[k + 1])
        innovation = P[k + 1] - E
        dB = noise.brownian[k]
        Q[k] = projector.project(innovation[:, :, None] * dB[:, None, :] / dt)
        for a, weight in enumerate(jm.weights):
            jumps = (noise.counts[k, :, a] - weight * dt) / (weight * dt)
            R[k, :, a] = projector.project(innovation * jumps[:, None])

        if frozen is None:
            mf_moments[k], mf_linear[k] = mean_field_averages(m, jm, t, Y, cross, u, E, Q[k], R[k])
        else:
            mf_moments[k], mf_linear[k] = frozen.mf_moments[k], frozen.mf_linear[k]
        driver = local_driver(m, jm, t, Y, cross, u, E, Q[k], R[k])
        driver = driver + np.einsum("ikb,k->ib", m.features.jacobian(Y), mf_moments[k]) + mf_linear[k]
        P_cond[k] = E
        P[k] = E + dt * driver
        _check_adjoint(P[k], k, cap)

    logger.debug(f"Adjoint solved over {K} steps for {N} particles")
    return AdjointEnsemble(
        P=P, Q=Q, R=R, P_cond=P_cond, mf_moments=mf_moments, mf_linear=mf_linear, terminal_moments=terminal_moments
    )


def _check_adjoint(values: np.ndarray, step: int, cap: float = Config.BLOWUP_CAP):
    norms = np.linalg.norm(values, axis=1)
    bad = ~np.isfinite(norms) | (norms > cap)
    if np.any(bad):
        particle = int(np.argmax(bad))
        raise BlowUp(step, particle, float(norms[particle]))


def mean_field_driver_pairwise(
    m: ModelSpec, jm: JumpMeasure, ens: ParticleEnsemble, adj: AdjointEnsemble, k: int
) -> np.ndarray:
    """Mean-field part of the driver at step k by explicit double sums.

    For each particle i, averages D_y(dH/dnu)(theta_l)(Y_i)^T over every
    particle l, using the public drift_dnu pairing. Cost is O(N^2); this is
    the reference evaluation order for the factored form used in solve_adjoint.
    """
    t = ens.grid.time(k)
    Y, cross, u = ens.states[k], ens.cross_sections[k], ens.controls[k]
    blocks = m.split_controls(u)
    E, Qk, Rk = adj.P_cond[k], adj.Q[k], adj.R[k]
    N, n = Y.shape
    out = np.zeros((N, n))
    cost_m = [
        None if term is None else term.dm(t, Y, cross.moments, blocks[j]) for j, term in enumerate(m.running_cost_terms)
    ]
    for i in range(N):
        y = np.broadcast_to(Y[i], Y.shape)
        psi_i = m.features.jacobian(Y[i : i + 1])[0]
        total = np.einsum("lab,la->b", m.drift_dnu(t, Y, cross, blocks[0], y), E)
        for j, column in enumerate(m.diffusion_cols, start=1):
            if isinstance(column, ControlledColumn):
                a_m = column.coefficient.dm(t, Y, cross.moments, blocks[j])
                total = total + np.einsum("lak,kb,la->b", a_m, psi_i, Qk[:, :, j - 1])
            else:
                total = total + np.einsum("ab,la->b", column.sigma2(t), Qk[:, :, j - 1])
        for f_m in cost_m:
            if f_m is not None:
                total = total + np.einsum("lk,kb->b", f_m, psi_i)
        for a, (mark, weight) in enumerate(jm.atoms):
            _, _, g2 = m.jump_coefficients(t, mark)
            total = total + weight * np.einsum("ab,la->b", g2, Rk[:, a])
        out[i] = total / N
    return out


def fubini_pairing(
    m: ModelSpec, ens: ParticleEnsemble, adj: AdjointEnsemble, k: int, delta: np.ndarray
) -> Tuple[float, float]:
    """Both sides of E[dX^T Ehat[(D_y dB/dnu(theta_hat)(X))^T P_hat]] = E[P^T Ehat[D_y dB/dnu(theta)(X_hat) dX_hat]].

    The left side sums over the copy inside, particle by particle; the right
    side swaps the order. Both are explicit O(N^2) double sums.
    """
    t = ens.grid.time(k)
    Y, cross = ens.states[k], ens.cross_sections[k]
    v0 = m.split_controls(ens.controls[k])[0]
    E = adj.P_cond[k]
    N = len(Y)
    lhs = 0.0
    for i in range(N):
        pairing = m.drift_dnu(t, Y, cross, v0, np.broadcast_to(Y[i], Y.shape))
        lhs += float(delta[i] @ np.einsum("lab,la->b", pairing, E)) / N
    rhs = 0.0
    for l in range(N):
        pairing = m.drift_dnu(t, np.broadcast_to(Y[l], Y.shape), cross, np.broadcast_to(v0[l], v0.shape), Y)
        rhs += float(E[l] @ np.einsum("iab,ib->a", pairing, delta)) / N
    return lhs / N, rhs / N


def write_adjoint_csv(ens: ParticleEnsemble, adj: AdjointEnsemble, path: Union[str, Path]) -> Path:
    """Rows (step, time, particle, P_1..P_n, Q_a_j.., R_atom_a..); the terminal knot has NaN Q and R"""
    path = Path(path)
    K1, N, n = adj.P.shape
    A = adj.R.shape[2]
    steps = np.repeat(np.arange(K1), N)
    Q = np.concatenate([adj.Q, np.full((1, N, n, n), np.nan)], axis=0).reshape(-1, n * n)
    R = np.concatenate([adj.R, np.full((1, N, A, n), np.nan)], axis=0).reshape(K1 * N, A * n)
    header = ["step", "time", "particle"] + [f"P_{a + 1}" for a in range(n)]
    header += [f"Q_{a + 1}_{j + 1}" for a in range(n) for j in range(n)]
    header += [f"R_{atom + 1}_{a + 1}" for atom in range(A) for a in range(n)]
    table = np.hstack(
        [
            steps[:, None],
            ens.grid.times[steps][:, None],
            np.tile(np.arange(N), K1)[:, None],
            adj.P.reshape(-1, n),
            Q,
            R,
        ]
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    logger.info(f"Wrote adjoint to {path}")
    return path
