"""Variance-preserving diffusion over 3D keypoints, conditioned on 2D.

The forward process dX = -beta(t)/2 X dt + sqrt(beta(t)) dw with linear
beta(t) admits a closed-form Gaussian transition kernel, so training is
denoising score matching: the network regresses onto the kernel score
-(X(t) - a X(0))/s^2 with the beta(t) weighting. Sampling runs either a
DDIM iteration over a sparse timestep grid or the probability-flow ODE
(Dormand-Prince via scipy), from a Gaussian prior or warm-started from
the previous frame's estimate diffused to an intermediate time. The final
estimate averages K independent candidates.

Conditioning convention (all three uses: training, DDIM, ODE): the net
input is [state | time embedding | condition], where the condition packs
the 2D keypoints (invisible entries zeroed) followed by one visibility
bit per keypoint. Condition values are snapped to a 2^-20 absolute grid:
the snap is far below any detector noise but makes equal scenes seen
through different intrinsics produce bit-identical conditions, so lifting
results are reproducible across cameras.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from keylift import net
from keylift.camera import CAMERA_FRAME, Keypoints2D, Keypoints3D, NormalizedKeypoints2D
from keylift.config import SamplerSettings

_COND_GRID = float(2**20)


class SamplerFailureError(RuntimeError):
    """ODE integration failed; carries the last state reached."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta VP schedule; defaults match the reference setup."""

    beta0: float = 0.1
    beta1: float = 20.0
    t_max: float = 1.0
    t_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.beta0 < self.beta1:
            raise ValueError("need 0 < beta0 < beta1")
        if not 0.0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")


def _check_t(sched: DiffusionSchedule, t, lo: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < lo) or np.any(t > sched.t_max):
        raise ValueError(f"t={t} outside [{lo}, {sched.t_max}]")
    return t


def beta(sched: DiffusionSchedule, t):
    """beta(t) = beta0 + t (beta1 - beta0), t in [0, t_max]."""
    t = _check_t(sched, t, 0.0)
    return sched.beta0 + t * (sched.beta1 - sched.beta0)


def integral_beta(sched: DiffusionSchedule, t):
    """Closed-form integral of beta over [0, t]."""
    t = _check_t(sched, t, 0.0)
    return sched.beta0 * t + 0.5 * (sched.beta1 - sched.beta0) * t * t


def alpha_bar(sched: DiffusionSchedule, t):
    """exp(-integral beta): squared mean-shrink factor of the kernel."""
    return np.exp(-integral_beta(sched, t))


def marginal_coefficients(sched: DiffusionSchedule, t):
    """(a, s) with X(t) ~ a X(0) + s N(0, I)."""
    ib = integral_beta(sched, t)
    a = np.exp(-0.5 * ib)
    s = np.sqrt(-np.expm1(-ib))
    return a, s


def perturb(sched: DiffusionSchedule, x0: np.ndarray, t, rng: np.random.Generator):
    """Draw X(t) from the transition kernel; returns (x_t, kernel score).

    Works elementwise over any array shape; with array-valued t the
    leading axis is the batch. The returned target is the score of the
    Gaussian kernel at the drawn point, -z/s.
    """
    t = _check_t(sched, t, sched.t_min)
    x0 = np.asarray(x0, dtype=np.float64)
    a, s = marginal_coefficients(sched, t)
    if t.ndim == 1:
        a = a[:, None]
        s = s[:, None]
    z = rng.standard_normal(x0.shape)
    x_t = a * x0 + s * z
    return x_t, -z / s


def score_to_epsilon(sched: DiffusionSchedule, score_value: np.ndarray, t):
    """Noise-prediction form of a score value: eps = -s(t) * score."""
    _, s = marginal_coefficients(sched, t)
    return -s * np.asarray(score_value)


@dataclass
class ScoreModel:
    """Score network plus the conventions needed to drive it.

    state_dim is the flattened keypoint dimension (3N), cond_dim the
    condition length (2N values + N visibility bits); the toy 1D setup
    uses state_dim=1, cond_dim=0.
    """

    params: net.MlpParams
    state_dim: int
    cond_dim: int
    emb: net.TimeEmbedding
    condition_mode: str = "nccs"  # nccs | pixels (w/o-NCCS ablation)
    pixel_scale: float = 1e-3

    def __post_init__(self):
        expected = self.state_dim + self.emb.dim + self.cond_dim
        if self.params.input_dim != expected:
            raise ValueError(
                f"score net expects input dim {self.params.input_dim}, "
                f"model layout gives {expected}"
            )
        if self.params.output_dim != self.state_dim:
            raise ValueError("score net output dim must equal state dim")
        if self.condition_mode not in ("nccs", "pixels"):
            raise ValueError(f"unknown condition mode {self.condition_mode!r}")

    @property
    def n_keypoints(self) -> int:
        return self.state_dim // 3


def make_score_model(
    n_keypoints: int,
    rng: np.random.Generator,
    hidden=(256, 256, 256, 256),
    activation: str = "tanh",
    emb_dim: int = 64,
    emb_base: float = 1000.0,
    condition_mode: str = "nccs",
    pixel_scale: float = 1e-3,
) -> ScoreModel:
    state_dim = 3 * n_keypoints
    cond_dim = 3 * n_keypoints
    emb = net.TimeEmbedding(emb_dim, emb_base)
    dims = [state_dim + emb.dim + cond_dim, *hidden, state_dim]
    params = net.init_params(dims, rng, activation)
    return ScoreModel(params, state_dim, cond_dim, emb, condition_mode, pixel_scale)


def quantize_condition(values: np.ndarray) -> np.ndarray:
    """Snap condition values to the 2^-20 reproducibility grid."""
    return np.round(np.asarray(values, dtype=np.float64) * _COND_GRID) / _COND_GRID


def save_score_model(path, model: ScoreModel, extra: dict | None = None) -> None:
    meta = {
        "state_dim": model.state_dim,
        "cond_dim": model.cond_dim,
        "emb_dim": model.emb.dim,
        "emb_base": model.emb.base,
        "condition_mode": model.condition_mode,
        "pixel_scale": model.pixel_scale,
    }
    meta.update(extra or {})
    net.save_params(path, model.params, role="score", extra=meta)


def load_score_model(path):
    """Load a score-role weight file; returns (ScoreModel, extra metadata)."""
    params, role, extra = net.load_params(path)
    if role != "score":
        raise ValueError(f"expected a score-role weight file, got {role!r}")
    model = ScoreModel(
        params=params,
        state_dim=int(extra["state_dim"]),
        cond_dim=int(extra["cond_dim"]),
        emb=net.TimeEmbedding(int(extra["emb_dim"]), float(extra["emb_base"])),
        condition_mode=extra.get("condition_mode", "nccs"),
        pixel_scale=float(extra.get("pixel_scale", 1e-3)),
    )
    return model, extra


def pack_observation(observation, condition_mode: str, pixel_scale: float = 1e-3) -> np.ndarray:
    """Pack a 2D observation into the shared condition block layout.

    nccs mode expects NormalizedKeypoints2D; the pixels ablation expects
    raw Keypoints2D and scales them by pixel_scale. Invisible keypoints
    are zeroed and their visibility bit cleared; values are snapped to the
    reproducibility grid. Layout: [2N keypoint values, N visibility bits].
    """
    if condition_mode == "nccs":
        if not isinstance(observation, NormalizedKeypoints2D):
            raise TypeError("nccs conditioning needs NormalizedKeypoints2D")
        pts = observation.points
    elif condition_mode == "pixels":
        if not isinstance(observation, Keypoints2D):
            raise TypeError("pixel conditioning needs raw Keypoints2D")
        pts = observation.points * pixel_scale
    else:
        raise ValueError(f"unknown condition mode {condition_mode!r}")
    vis = observation.visibility
    pts = quantize_condition(pts)
    pts = np.where(vis[:, None], pts, 0.0)
    return np.concatenate([pts.ravel(), vis.astype(np.float64)])


def condition_vector(model: ScoreModel, observation) -> np.ndarray:
    """Pack an observation for this model's conditioning convention."""
    if model.cond_dim == 0:
        raise ValueError("model is unconditional")
    return pack_observation(observation, model.condition_mode, model.pixel_scale)


def score_eval(model: ScoreModel, x: np.ndarray, t, cond: np.ndarray | None):
    """Evaluate the score network on a batch; returns (scores, cache)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    xb = x.reshape(1, -1) if squeeze else x
    b = xb.shape[0]
    emb = net.embed_time(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)), model.emb)
    blocks = [xb, emb]
    if model.cond_dim:
        if cond is None:
            raise ValueError("conditional model called without a condition")
        cond = np.asarray(cond, dtype=np.float64)
        blocks.append(np.broadcast_to(cond.reshape(-1, model.cond_dim), (b, model.cond_dim)))
    inp = np.ascontiguousarray(np.concatenate(blocks, axis=1))
    out, cache = net.forward(model.params, inp)
    return (out[0] if squeeze else out), cache


def dsm_loss(
    sched: DiffusionSchedule,
    model: ScoreModel,
    x0: np.ndarray,
    cond: np.ndarray | None,
    rng: np.random.Generator,
):
    """Denoising score-matching loss and exact parameter gradients.

    Per sample: t ~ U(t_min, t_max), X(t) from the kernel, residual
    against the kernel score, weighted by beta(t); the batch loss is the
    mean over samples of the summed squared residual.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    b = x0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    t = rng.uniform(sched.t_min, sched.t_max, b)
    x_t, target = perturb(sched, x0, t, rng)
    out, cache = score_eval(model, x_t, t, cond)
    resid = out - target
    lam = beta(sched, t)
    loss = float(np.mean(lam * np.sum(resid * resid, axis=1)))
    grad_out = (2.0 / b) * lam[:, None] * resid
    grads, _ = net.backward(model.params, cache, grad_out)
    return loss, grads


def train_score(
    sched: DiffusionSchedule,
    model: ScoreModel,
    x0: np.ndarray,
    cond: np.ndarray | None,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    hygiene_every: int = 100,
) -> net.TrainLog:
    """Adam over dsm_loss; deterministic under the rng. Returns the loss log."""
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    state = net.init_adam(model.params, lr)
    log = net.TrainLog()
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch_cond = None if cond is None else cond[idx]
            loss, grads = dsm_loss(sched, model, x0[idx], batch_cond, rng)
            net.adam_step(model.params, grads, state)
            total += loss * len(idx)
            batch_losses.append(loss)
            log.steps += 1
            if hygiene_every and log.steps % hygiene_every == 0 and not model.params.finite():
                raise net.GradientPoisonedError(f"non-finite parameter at step {log.steps}")
        log.epoch_losses.append(total / n)
        log.epoch_medians.append(float(np.median(batch_losses)))
    return log


def timestep_grid(sched: DiffusionSchedule, t_hi: float, m: int, kind: str = "uniform") -> np.ndarray:
    """Increasing grid tau_1..tau_m from t_min to t_hi."""
    if m < 2:
        raise ValueError("need at least 2 timesteps")
    if not sched.t_min < t_hi <= sched.t_max:
        raise ValueError(f"t_hi={t_hi} outside ({sched.t_min}, {sched.t_max}]")
    u = np.linspace(0.0, 1.0, m)
    if kind == "quadratic":
        u = u * u
    elif kind != "uniform":
        raise ValueError(f"unknown grid kind {kind!r}")
    return sched.t_min + (t_hi - sched.t_min) * u


def ddim_iterate(
    sched: DiffusionSchedule,
    grid: np.ndarray,
    score_fn,
    x_init: np.ndarray,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run the DDIM recursion from grid[-1] down to grid[0].

    score_fn(x, t) maps a (B, D) batch at scalar t to (B, D) scores; with
    eta = 0 no noise is drawn and the result is deterministic in x_init.
    """
    if np.any(np.diff(grid) <= 0):
        raise ValueError("timestep grid must be strictly increasing")
    x = np.asarray(x_init, dtype=np.float64)
    ab = alpha_bar(sched, grid)
    for i in range(len(grid) - 1, 0, -1):
        ab_cur, ab_prev = ab[i], ab[i - 1]
        eps = -np.sqrt(1.0 - ab_cur) * score_fn(x, float(grid[i]))
        x0_pred = (x - np.sqrt(1.0 - ab_cur) * eps) / np.sqrt(ab_cur)
        if eta > 0.0:
            sigma = (
                eta
                * np.sqrt((1.0 - ab_prev) / (1.0 - ab_cur))
                * np.sqrt(1.0 - ab_cur / ab_prev)
            )
        else:
            sigma = 0.0
        x = (
            np.sqrt(ab_prev) * x0_pred
            + np.sqrt(np.maximum(1.0 - ab_prev - sigma * sigma, 0.0)) * eps
        )
        if sigma > 0.0:
            if rng is None:
                raise ValueError("eta > 0 needs an rng")
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def ode_iterate(
    beta_fn,
    score_fn,
    x_init: np.ndarray,
    t_hi: float,
    t_lo: float,
    rtol: float,
    atol: float,
) -> np.ndarray:
    """Integrate the probability-flow ODE dX = -beta(t)/2 (X + score) dt
    backward from t_hi to t_lo with adaptive Dormand-Prince 5(4).
    """
    x_init = np.asarray(x_init, dtype=np.float64)
    shape = x_init.shape

    def rhs(t, y):
        x = y.reshape(shape)
        return (-0.5 * beta_fn(t) * (x + score_fn(x, t))).ravel()

    sol = solve_ivp(rhs, (t_hi, t_lo), x_init.ravel(), method="RK45", rtol=rtol, atol=atol)
    if not sol.success:
        raise SamplerFailureError(
            f"probability-flow ODE failed: {sol.message}", last_state=sol.y[:, -1].reshape(shape)
        )
    return sol.y[:, -1].reshape(shape)


def _sample_batch(
    sched: DiffusionSchedule,
    cfg: SamplerSettings,
    model: ScoreModel,
    cond: np.ndarray | None,
    n_candidates: int,
    rng: np.random.Generator,
    previous_flat: np.ndarray | None = None,
) -> np.ndarray:
    """Shared sampler driver; returns (n_candidates, state_dim)."""
    warm = cfg.init == "warm" and previous_flat is not None
    if warm:
        t_hi = cfg.t_start
        m = cfg.warm_num_steps
        a, s = marginal_coefficients(sched, t_hi)
        x = a * previous_flat + s * rng.standard_normal((n_candidates, model.state_dim))
    else:
        t_hi = sched.t_max
        m = cfg.num_steps
        x = rng.standard_normal((n_candidates, model.state_dim))

    def score_fn(xb, t):
        return score_eval(model, xb, t, cond)[0]

    if cfg.kind == "ddim":
        grid = timestep_grid(sched, t_hi, m, cfg.grid)
        return ddim_iterate(sched, grid, score_fn, x, cfg.eta, rng)
    if cfg.kind == "ode":
        return ode_iterate(
            lambda t: beta(sched, t), score_fn, x, t_hi, sched.t_min, cfg.rtol, cfg.atol
        )
    raise ValueError(f"unknown sampler kind {cfg.kind!r}")


def _previous_flat(model: ScoreModel, previous_estimate) -> np.ndarray | None:
    if previous_estimate is None:
        return None
    pts = previous_estimate.points if isinstance(previous_estimate, Keypoints3D) else previous_estimate
    return np.asarray(pts, dtype=np.float64).reshape(1, model.state_dim)


def ddim_sample(
    sched: DiffusionSchedule,
    cfg: SamplerSettings,
    model: ScoreModel,
    observation,
    rng: np.random.Generator,
    previous_estimate=None,
) -> Keypoints3D:
    """One DDIM candidate, returned as camera-frame keypoints."""
    if cfg.kind != "ddim":
        raise ValueError("sampler config kind must be 'ddim'")
    cond = condition_vector(model, observation)
    x = _sample_batch(sched, cfg, model, cond, 1, rng, _previous_flat(model, previous_estimate))
    return Keypoints3D(x.reshape(-1, 3), CAMERA_FRAME)


def ode_sample(
    sched: DiffusionSchedule,
    cfg: SamplerSettings,
    model: ScoreModel,
    observation,
    rng: np.random.Generator,
    previous_estimate=None,
) -> Keypoints3D:
    """One probability-flow ODE candidate, as camera-frame keypoints."""
    if cfg.kind != "ode":
        raise ValueError("sampler config kind must be 'ode'")
    cond = condition_vector(model, observation)
    x = _sample_batch(sched, cfg, model, cond, 1, rng, _previous_flat(model, previous_estimate))
    return Keypoints3D(x.reshape(-1, 3), CAMERA_FRAME)


def lift(
    sched: DiffusionSchedule,
    cfg: SamplerSettings,
    model: ScoreModel,
    observation,
    rng: np.random.Generator,
    previous_estimate=None,
) -> Keypoints3D:
    """Average of K independent sampler candidates (shared condition).

    Candidates run as one batch with independent noise; warm-start
    initialization is used when a previous estimate is supplied and the
    config asks for it.
    """
    if cfg.num_candidates < 1:
        raise ValueError("need at least one candidate")
    cond = condition_vector(model, observation)
    x = _sample_batch(
        sched, cfg, model, cond, cfg.num_candidates, rng, _previous_flat(model, previous_estimate)
    )
    return Keypoints3D(x.mean(axis=0).reshape(-1, 3), CAMERA_FRAME)
