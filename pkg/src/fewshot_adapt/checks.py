"""Finite-difference gradient checks and loss invariants, shared by the CLI and the tests.

Each check builds seeded random instances, chains the loss gradient through
the descriptor head with ``describe_backward`` and compares it with central
differences over every entry of ``W``.  The head is kept small (6 x 10) so
the full difference quotient stays cheap; the code paths are the same as
at the default size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feature_model import describe, describe_backward
from .losses import (SoftMatchConfig, calibrate_from_values, cd_sos_loss, correspondence_loss,
                     soft_argmax_match, softmatch_loss, vw_coral_loss)

FD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
CHECK_D, CHECK_D_PRE = 6, 10


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max error {self.max_error:.3e}{'  ' + self.detail if self.detail else ''}"


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _head(rng):
    return rng.standard_normal((CHECK_D, CHECK_D_PRE)) * 0.5


def _pre(rng, W, n, gap=1e-2):
    """``n`` pre-descriptors with a live relu and no pre-activation within ``gap`` of the kink."""
    rows = []
    while len(rows) < n:
        u = rng.standard_normal(CHECK_D_PRE)
        z = W @ u
        if (z > 0).any() and np.abs(z).min() > gap:
            rows.append(u)
    return np.array(rows)


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_difference(f, W, step=FD_STEP) -> np.ndarray:
    g = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += step
        Wm[idx] -= step
        g[idx] = (f(Wp) - f(Wm)) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# instances: each maps (rng, W) to (loss(W) -> float, grad(W) -> dL/dW)


def corres_instance(rng, W, n=8):
    U = _pre(rng, W, 2 * n)
    xs = _unit(rng, n, CHECK_D)
    ss, sp = rng.uniform(0.2, 1, n), rng.uniform(0.2, 1, n)
    pos, neg = np.arange(n), np.arange(n, 2 * n)

    def parts(W):
        X = describe(W, U)
        return X, correspondence_loss(xs, ss, X[pos], sp, X[neg], margin=1.0)

    def grad(W):
        X, res = parts(W)
        g = np.zeros_like(X)
        g[pos] += res.grad_positive
        g[neg] += res.grad_negative
        return describe_backward(W, U, g)

    return (lambda W: parts(W)[1].value), grad


def _grouped_instance(fn, rng, W, n=12, words=3):
    U = _pre(rng, W, n)
    xs = _unit(rng, n, CHECK_D)
    w = rng.integers(0, words, n)
    w[:2 * words] = np.repeat(np.arange(words), 2)   # every word has at least two pairs

    def grad(W):
        return describe_backward(W, U, fn(xs, describe(W, U), w).grad_target)

    return (lambda W: fn(xs, describe(W, U), w).value), grad


def vwcoral_instance(rng, W):
    return _grouped_instance(vw_coral_loss, rng, W)


def cdsos_instance(rng, W):
    return _grouped_instance(cd_sos_loss, rng, W)


def softmatch_instance(rng, W, n=5, m=12):
    U = _pre(rng, W, m)
    kp = rng.uniform(0, [640, 480], size=(m, 2))
    targets = rng.uniform(0, [640, 480], size=(n, 2))
    xs = _unit(rng, n, CHECK_D)
    cfg = SoftMatchConfig(beta=3.0, diagonal=800.0)

    def grad(W):
        return describe_backward(W, U, softmatch_loss(xs, describe(W, U), kp, targets, cfg).grad_candidates)

    return (lambda W: softmatch_loss(xs, describe(W, U), kp, targets, cfg).value), grad


INSTANCES = {
    "corres": corres_instance,
    "vwcoral": vwcoral_instance,
    "cdsos": cdsos_instance,
    "softmatch": softmatch_instance,
}


def gradient_check(term: str, n_instances: int = 100, seed: int = 0, perturb: float = 0.0) -> CheckResult:
    """Worst relative error between analytic and central-difference ``dL/dW``.

    ``perturb`` adds a fixed offset to the analytic gradient; it exists so the
    failure path of the checker itself can be exercised.
    """
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i, len(term)])
        W = _head(rng)
        loss, grad = INSTANCES[term](rng, W)
        analytic = grad(W) + perturb
        worst = max(worst, relative_error(analytic, central_difference(loss, W)))
    return CheckResult(f"gradient {term}", worst < GRAD_TOLERANCE, worst,
                       f"({n_instances} instances, step {FD_STEP:g}, tol {GRAD_TOLERANCE:g})")


# ---------------------------------------------------------------------------
# invariants


def check_closed_forms() -> CheckResult:
    errs = []
    # one word, d = 2: covariances diag(2, 0) and diag(0, 2)
    errs.append(abs(vw_coral_loss([[1, 0], [-1, 0]], [[0, 1], [0, -1]], [0, 0]).value - 0.5))
    # two points, source distance 1, target distance 1.5
    errs.append(abs(cd_sos_loss([[0, 0], [1, 0]], [[0, 0], [1.5, 0]], [0, 0]).value - np.sqrt(0.5) / 2))
    # p_hat = (0, 0), target (3, 4), l = 100
    errs.append(abs(softmatch_loss([[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 0.0]], [[3.0, 4.0]],
                                   SoftMatchConfig(10.0, 100.0)).value - 0.05))
    # unit vectors with d^2 = 2 - 2 cos: d_pos^2 = 1.5, d_neg^2 = 0.5, m = 1
    xs, xp, xn = [1.0, 0.0], [0.25, np.sqrt(1 - 0.25 ** 2)], [0.75, np.sqrt(1 - 0.75 ** 2)]
    errs.append(abs(correspondence_loss([xs], [0.7], [xp], [0.3], [xn]).value - 2.0))
    worst = float(max(errs))
    return CheckResult("closed-form loss values", worst < 1e-9, worst)


def check_isometries(n_instances: int = 100, seed: int = 0) -> CheckResult:
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i, 99])
        xs = _unit(rng, 10, CHECK_D)
        w = np.repeat([0, 1], 5)
        worst = max(worst, vw_coral_loss(xs, xs.copy(), w).value)
        xt = xs.copy()
        for k in (0, 1):
            Q, _ = np.linalg.qr(rng.standard_normal((CHECK_D, CHECK_D)))
            xt[w == k] = xs[w == k] @ Q.T
        worst = max(worst, cd_sos_loss(xs, xt, w).value)
    return CheckResult("VW-CORAL / CD-SOS zero cases", worst < 1e-9, worst)


def check_soft_argmax(n_instances: int = 100, seed: int = 0) -> CheckResult:
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i, 7])
        xt = _unit(rng, 20, CHECK_D)
        kp = rng.uniform(0, [640, 480], size=(20, 2))
        # "distinct similarities": redraw until the top two differ by at least 1e-2
        while True:
            x = _unit(rng, 1, CHECK_D)[0]
            top2 = np.sort(xt @ x)[-2:]
            if top2[1] - top2[0] >= 1e-2:
                break
        p, _ = soft_argmax_match(x, xt, kp, beta=1e4)
        worst = max(worst, float(np.linalg.norm(p - kp[np.argmax(xt @ x)])))
    return CheckResult("soft-argmax at beta=1e4 vs argmax (px)", worst < 1e-3, worst)


def check_calibration(n_instances: int = 100, seed: int = 0) -> CheckResult:
    worst = 0.0
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i, 5])
        per_view = {t: rng.uniform(0, 3, rng.integers(2, 20)) for t in INSTANCES}
        w = calibrate_from_values(per_view)
        for t, (mu, sigma) in w.stats.items():
            worst = max(worst, abs(w[t] * 4 * (mu + 3 * sigma) - 1))
    return CheckResult("lambda calibration identity", worst < 1e-9, worst)


def run_all(n_instances: int = 100, seed: int = 0, perturb: dict | None = None) -> list:
    perturb = perturb or {}
    results = [gradient_check(t, n_instances, seed, perturb.get(t, 0.0)) for t in INSTANCES]
    results += [check_closed_forms(), check_isometries(n_instances, seed), check_soft_argmax(n_instances, seed),
                check_calibration(n_instances, seed)]
    return results
