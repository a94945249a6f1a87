import numpy as np

from d3lab.nn.tensor import mse_loss


def set_params(model, values: dict) -> None:
    for (layer, role), val in values.items():
        model.theta.view(model.theta.segment(layer, role))[...] = val


def fd_gradient(model, x, y, loss=mse_loss, h: float = 1e-5) -> np.ndarray:
    p = model.theta.params
    fd = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        lp = float(loss(model.graph(x, False)[0], y).data)
        p[i] = orig - h
        lm = float(loss(model.graph(x, False)[0], y).data)
        p[i] = orig
        fd[i] = (lp - lm) / (2 * h)
    return fd


def autodiff_gradient(model, x, y, loss=mse_loss) -> np.ndarray:
    out, leaves = model.graph(x)
    return model.flat_grad(loss(out, y), leaves)


def fd_max_rel_error(model, x, y, loss=mse_loss, h: float = 1e-5, floor: float = 1e-6) -> float:
    """max_i |g_i - fd_i| / max(|g_i|, |fd_i|, floor)."""
    g = autodiff_gradient(model, x, y, loss)
    fd = fd_gradient(model, x, y, loss, h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    return float(np.max(np.abs(g - fd) / denom))
