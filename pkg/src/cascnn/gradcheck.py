"""Central finite-difference gradient oracle."""
import numpy as np


def numerical_grad(loss_fn, tensor, step=1e-5):
    """d loss_fn() / d tensor.values by central differences, element by element.

    ``loss_fn`` must rebuild the graph from the current ``tensor.values`` and
    return a scalar (Tensor or float).
    """
    grad = np.zeros_like(tensor.values)
    flat = tensor.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = _scalar(loss_fn())
        flat[i] = orig - step
        down = _scalar(loss_fn())
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return grad


def _scalar(value):
    v = getattr(value, "values", value)
    return float(np.asarray(v).reshape(()))


def relative_error(analytic, numeric, floor=1e-10):
    """Norm-wise relative error; falls back to absolute error when both are ~0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return diff
    return diff / scale


def check_gradients(loss_fn, tensors, step=1e-5):
    """Return {index: relative error} comparing backward() to finite differences."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    errors = {}
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.values)
        errors[i] = relative_error(analytic, numerical_grad(loss_fn, t, step))
    return errors
