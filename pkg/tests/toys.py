"""Closed-form toy objectives and classifiers used as oracles in the tests.

Objectives follow the ``objective(theta, x, y, wrt) -> (losses, g_theta, g_x)``
convention: gradients are of the summed loss; a (B, P) theta yields
per-example parameter gradients.
"""
import numpy as np


def _want(wrt, part):
    return wrt in ("both", part)


def _reduce_theta(g_rows, theta):
    return g_rows if np.ndim(theta) == 2 else g_rows.sum(axis=0)


class Zero:
    """L == 0 everywhere."""

    def __call__(self, theta, x, y, wrt="both"):
        x = np.asarray(x, dtype=float)
        return (np.zeros(len(x)),
                np.zeros_like(theta, dtype=float) if _want(wrt, "theta") else None,
                np.zeros_like(x) if _want(wrt, "x") else None)


class HalfSquare:
    """L = |x|^2 / 2, independent of theta."""

    def __call__(self, theta, x, y, wrt="both"):
        x = np.asarray(x, dtype=float)
        losses = 0.5 * np.sum(x.reshape(len(x), -1) ** 2, axis=1)
        return (losses,
                np.zeros_like(theta, dtype=float) if _want(wrt, "theta") else None,
                x.copy() if _want(wrt, "x") else None)


class LinearRegression:
    """L = (theta . x - y)^2 / 2 with x of shape (B, P)."""

    def __call__(self, theta, x, y, wrt="both"):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        r = np.sum(theta * x, axis=-1) - y
        g_t = _reduce_theta(r[:, None] * x, theta) if _want(wrt, "theta") else None
        g_x = r[:, None] * np.broadcast_to(theta, x.shape) if _want(wrt, "x") else None
        return 0.5 * r**2, g_t, g_x

    @staticmethod
    def mixed(theta, x, y, g):
        """Analytic d/dx [g . grad_theta L] = (g.x) theta + (theta.x - y) g."""
        return np.dot(g, x) * theta + (np.dot(theta, x) - y) * g


class Logistic:
    """L = log(1 + exp(-y theta.x)) with y in {-1, +1}."""

    def __call__(self, theta, x, y, wrt="both"):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        m = np.sum(theta * x, axis=-1)
        s = 1.0 / (1.0 + np.exp(y * m))  # sigma(-y m)
        g_t = _reduce_theta((-y * s)[:, None] * x, theta) if _want(wrt, "theta") else None
        g_x = (-y * s)[:, None] * np.broadcast_to(theta, x.shape) if _want(wrt, "x") else None
        return np.logaddexp(0.0, -y * m), g_t, g_x

    @staticmethod
    def mixed(theta, x, y, g):
        # grad_theta L = -y s x, s = sigma(-y m), ds/dm = -y s (1 - s)
        m = np.dot(theta, x)
        s = 1.0 / (1.0 + np.exp(y * m))
        return s * (1 - s) * np.dot(g, x) * theta - y * s * g


class ScalarParabola:
    """L = (theta - 1)^2 / 2 for a scalar parameter; inputs are ignored."""

    def __call__(self, theta, x, y, wrt="both"):
        theta = np.asarray(theta, dtype=float)
        n = len(x)
        r = theta[..., 0] - 1.0
        losses = np.broadcast_to(0.5 * r**2, (n,)).copy()
        g_t = None
        if _want(wrt, "theta"):
            g_t = r[..., None] * np.ones_like(theta) if theta.ndim == 2 else n * r * np.ones(1)
        g_x = np.zeros_like(np.asarray(x, dtype=float)) if _want(wrt, "x") else None
        return losses, g_t, g_x


class ScalarCoupled:
    """L = (theta - x)^2 / 2 for scalar theta and scalar-per-example x of shape (B, 1)."""

    def __call__(self, theta, x, y, wrt="both"):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        r = theta[..., :1] - x  # (B, 1)
        g_t = None
        if _want(wrt, "theta"):
            g_t = r if theta.ndim == 2 else r.sum(axis=0)
        g_x = -r if _want(wrt, "x") else None
        return 0.5 * r[:, 0] ** 2, g_t, g_x


class LinearBinary:
    """Two-class classifier with logits [0, w.x + b] for flat inputs (B, D)."""

    n_classes = 2

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=float)
        self.b = float(b)

    def logits(self, x):
        x = np.asarray(x, dtype=float)
        z = x.reshape(len(x), -1) @ self.w + self.b
        return np.stack([np.zeros_like(z), z], axis=1)

    def loss_input_grad(self, x, y):
        x = np.asarray(x, dtype=float)
        z = self.logits(x)
        lse = np.logaddexp(z[:, 0], z[:, 1])
        losses = lse - z[np.arange(len(x)), y]
        p1 = np.exp(z[:, 1] - lse)
        dz1 = p1 - (np.asarray(y) == 1)
        return losses, (dz1[:, None] * self.w).reshape(x.shape)

    def logit_input_grad(self, x, coeffs):
        x = np.asarray(x, dtype=float)
        return self.logits(x), (np.asarray(coeffs)[:, 1:2] * self.w).reshape(x.shape)
