"""Dense tanh equilibrium model with spectral projection and a training driver.

Each sample i carries its own state w_i, updated by the shared map
``w_i <- tanh(A w_i + B x_i + c)``. Stacking the per-sample states into one
vector makes the batch a single fixed-point problem, block-diagonal in the
samples. Keeping ||A|| <= 1 - eps makes the stacked map a contraction (tanh
is 1-Lipschitz), which is enforced during training by clipping the singular
values of A after every upper-level step.

The upper level trains (A, B, c) through the fixed point and a multiclass
logistic readout (W, b) through the outer objective only, with Nesterov
momentum. The training log carries loss, test accuracy, hypergradient norm
and the spectral norm of A per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bilevel import BilevelProblem, Method
from .errors import DivergedError
from .hypergrad import Adjoint, aid, itd
from .lower import iterate
from .numkit import Mat, Rng, Vec, spectral_norm, svd

EQM_METHODS = (Method.ITD, Method.AID_FP, Method.AID_CGN)


@dataclass(frozen=True)
class EqmParams:
    """Model parameters: state map (A, B, c) plus logistic readout (W, b_out)."""

    A: Mat
    B: Mat
    c: Vec
    W: Mat
    b_out: Vec

    def pack(self) -> Vec:
        return np.concatenate(
            [self.A.ravel(), self.B.ravel(), self.c, self.W.ravel(), self.b_out]
        )

    @staticmethod
    def unpack(lam: Vec, hidden: int, inputs: int, classes: int) -> "EqmParams":
        sizes = [hidden * hidden, hidden * inputs, hidden, classes * hidden, classes]
        parts = np.split(lam, np.cumsum(sizes)[:-1])
        return EqmParams(
            A=parts[0].reshape(hidden, hidden),
            B=parts[1].reshape(hidden, inputs),
            c=parts[2],
            W=parts[3].reshape(classes, hidden),
            b_out=parts[4],
        )


def project_spectral(a: Mat, eps: float) -> Mat:
    """Clip the singular values of a to [0, 1 - eps] and reconstruct."""
    if not (0.0 < eps < 1.0):
        raise ValueError("eps must lie in (0, 1)")
    u, s, vt = svd(a)
    return (u * np.minimum(s, 1.0 - eps)) @ vt


def eqm_phi(params: EqmParams, inputs: Mat, w_stacked: Vec) -> Vec:
    """One blockwise update tanh(A w_i + B x_i + c) on the stacked state."""
    n = inputs.shape[0]
    wm = w_stacked.reshape(n, -1)
    return np.tanh(wm @ params.A.T + inputs @ params.B.T + params.c).ravel()


def _cross_entropy(logits: Mat, onehot: Mat) -> tuple[float, Mat]:
    """Average cross-entropy and its gradient w.r.t. the logits, numerically stable."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(lse - np.sum(shifted * onehot, axis=1)))
    probs = np.exp(shifted - lse[:, None])
    return loss, (probs - onehot) / n


def make_eqm_problem(inputs: Mat, labels: np.ndarray, hidden: int, classes: int) -> BilevelProblem:
    """The stacked-state bilevel problem for one batch.

    The map Jacobian w.r.t. the state is block diag(sech^2) A, which is not
    symmetric, so AID with CG must go through the normal equations; the
    untransposed product is supplied for that.
    """
    n, p = inputs.shape
    onehot = np.eye(classes)[labels]

    def unpack(lam: Vec) -> EqmParams:
        return EqmParams.unpack(lam, hidden, p, classes)

    def preactivation_slope(params: EqmParams, wm: Mat) -> Mat:
        z = wm @ params.A.T + inputs @ params.B.T + params.c
        return 1.0 - np.tanh(z) ** 2

    def phi(w: Vec, lam: Vec) -> Vec:
        return eqm_phi(unpack(lam), inputs, w)

    def d1phi_tvec(w: Vec, lam: Vec, v: Vec) -> Vec:
        params = unpack(lam)
        wm = w.reshape(n, hidden)
        sv = preactivation_slope(params, wm) * v.reshape(n, hidden)
        return (sv @ params.A).ravel()

    def d1phi_vec(w: Vec, lam: Vec, v: Vec) -> Vec:
        params = unpack(lam)
        wm = w.reshape(n, hidden)
        s = preactivation_slope(params, wm)
        return (s * (v.reshape(n, hidden) @ params.A.T)).ravel()

    def d2phi_tvec(w: Vec, lam: Vec, v: Vec) -> Vec:
        params = unpack(lam)
        wm = w.reshape(n, hidden)
        sv = preactivation_slope(params, wm) * v.reshape(n, hidden)
        grad_a = sv.T @ wm
        grad_b = sv.T @ inputs
        grad_c = sv.sum(axis=0)
        zeros_readout = np.zeros(classes * hidden + classes)
        return np.concatenate([grad_a.ravel(), grad_b.ravel(), grad_c, zeros_readout])

    def outer_E(w: Vec, lam: Vec) -> float:
        params = unpack(lam)
        logits = w.reshape(n, hidden) @ params.W.T + params.b_out
        return _cross_entropy(logits, onehot)[0]

    def grad1_E(w: Vec, lam: Vec) -> Vec:
        params = unpack(lam)
        logits = w.reshape(n, hidden) @ params.W.T + params.b_out
        dz = _cross_entropy(logits, onehot)[1]
        return (dz @ params.W).ravel()

    def grad2_E(w: Vec, lam: Vec) -> Vec:
        params = unpack(lam)
        wm = w.reshape(n, hidden)
        dz = _cross_entropy(wm @ params.W.T + params.b_out, onehot)[1]
        zeros_map = np.zeros(hidden * hidden + hidden * p + hidden)
        return np.concatenate([zeros_map, (dz.T @ wm).ravel(), dz.sum(axis=0)])

    return BilevelProblem(
        dim_w=n * hidden,
        dim_lambda=hidden * hidden + hidden * p + hidden + classes * hidden + classes,
        phi=phi,
        d1phi_tvec=d1phi_tvec,
        d2phi_tvec=d2phi_tvec,
        grad1_E=grad1_E,
        grad2_E=grad2_E,
        outer_E=outer_E,
        symmetric_d1phi=False,
        d1phi_vec=d1phi_vec,
        name="eqm",
    )


def make_blobs(
    n: int, dim: int, rng: Rng, separation: float = 4.0, noise: float = 1.0
) -> tuple[Mat, np.ndarray]:
    """Two Gaussian blobs straddling the origin; labels 0/1, balanced."""
    direction = np.ones(dim) / np.sqrt(dim)
    labels = np.arange(n) % 2
    centers = np.where(labels[:, None] == 0, -0.5, 0.5) * separation * direction
    return centers + noise * rng.normal(n, dim), labels


@dataclass(frozen=True)
class EqmConfig:
    """One training run of the equilibrium model on internal blob data."""

    method: Method = Method.AID_FP
    hidden: int = 50
    eps: float = 1e-3
    project: bool = True
    t: int = 20
    k: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    steps: int = 300
    seed: int = 0
    n_train: int = 500
    n_test: int = 200
    input_dim: int = 10
    classes: int = 2


@dataclass(frozen=True)
class EqmStepRecord:
    """One training-log row (step 0 is the initial state)."""

    step: int
    loss: float
    test_acc: float
    grad_norm: float
    spectral_norm_A: float


def _init_params(config: EqmConfig, rng: Rng) -> EqmParams:
    h, p, c = config.hidden, config.input_dim, config.classes
    a = rng.normal(h, h)
    a *= 0.9 / spectral_norm(a)
    return EqmParams(
        A=a,
        B=rng.normal(h, p) / np.sqrt(p),
        c=np.zeros(h),
        W=rng.normal(c, h) / np.sqrt(h),
        b_out=np.zeros(c),
    )


def _accuracy(params: EqmParams, inputs: Mat, labels: np.ndarray, t: int) -> float:
    w = np.zeros(inputs.shape[0] * params.A.shape[0])
    for _ in range(t):
        w = eqm_phi(params, inputs, w)
    logits = w.reshape(inputs.shape[0], -1) @ params.W.T + params.b_out
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def eqm_train(config: EqmConfig) -> list[EqmStepRecord]:
    """Nesterov-momentum training of the equilibrium model on blob data.

    Per step: hypergradient of the t-step approximate objective via the
    configured method (itd, aid-fp, or aid-cgn on the normal equations),
    momentum update of the flattened parameters, then singular-value
    projection of the A block when enabled. Lower-level divergence is
    surfaced in the log (non-finite row) rather than raised.
    """
    method = Method(config.method)
    if method not in EQM_METHODS:
        raise ValueError(f"eqm supports {[m.value for m in EQM_METHODS]}, got {method.value!r}")
    rng = Rng(config.seed)
    train_x, train_y = make_blobs(config.n_train, config.input_dim, rng.child(1))
    test_x, test_y = make_blobs(config.n_test, config.input_dim, rng.child(2))
    problem = make_eqm_problem(train_x, train_y, config.hidden, config.classes)

    params = _init_params(config, rng.child(3))
    if config.project:
        params = EqmParams(
            A=project_spectral(params.A, config.eps),
            B=params.B, c=params.c, W=params.W, b_out=params.b_out,
        )
    lam = params.pack()
    a_size = config.hidden * config.hidden

    def hypergrad_at(point: Vec) -> Vec:
        if method == Method.ITD:
            return itd(problem, point, config.t).grad
        solver = Adjoint.FP if method == Method.AID_FP else Adjoint.CGNORMAL
        return aid(problem, point, config.t, config.k, solver)[0].grad

    def metrics(point: Vec, grad_norm: float, step: int) -> EqmStepRecord:
        current = EqmParams.unpack(point, config.hidden, config.input_dim, config.classes)
        loss = problem.outer_E(iterate(problem, point, config.t).final, point)
        acc = _accuracy(current, test_x, test_y, config.t)
        return EqmStepRecord(
            step=step,
            loss=loss,
            test_acc=acc,
            grad_norm=grad_norm,
            spectral_norm_A=spectral_norm(current.A),
        )

    log: list[EqmStepRecord] = []
    velocity = np.zeros_like(lam)
    try:
        grad = hypergrad_at(lam)  # velocity is zero, so the first lookahead is lam itself
        log.append(metrics(lam, float(np.linalg.norm(grad)), step=0))
        for step in range(1, config.steps + 1):
            if step > 1:
                grad = hypergrad_at(lam + config.momentum * velocity)
            velocity = config.momentum * velocity - config.lr * grad
            lam = lam + velocity
            if config.project:
                a_block = lam[:a_size].reshape(config.hidden, config.hidden)
                lam = lam.copy()
                lam[:a_size] = project_spectral(a_block, config.eps).ravel()
            log.append(metrics(lam, float(np.linalg.norm(grad)), step=step))
    except DivergedError:
        log.append(
            EqmStepRecord(
                step=len(log), loss=float("nan"), test_acc=float("nan"),
                grad_norm=float("inf"), spectral_norm_A=float("nan"),
            )
        )
    return log
