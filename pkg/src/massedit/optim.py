"""Adaptive-moment updates and gradient clipping over name -> ndarray dicts."""
import numpy as np


def _scaled_norm(grads):
    """``(amax, r)`` with ``norm = amax * r``; avoids overflow in the squares."""
    amax = max((float(np.max(np.abs(g))) for g in grads.values() if np.size(g)), default=0.0)
    if amax == 0.0 or not np.isfinite(amax):
        return amax, 1.0
    return amax, float(np.sqrt(sum(float(np.vdot(g / amax, g / amax)) for g in grads.values())))


def global_norm(grads):
    sq = sum(float(np.vdot(g, g)) for g in grads.values())
    if np.isfinite(sq):
        return float(np.sqrt(sq))
    amax, r = _scaled_norm(grads)
    return amax * r


def clip_by_global_norm(grads, max_norm):
    """Scale every gradient by ``min(1, max_norm / norm)``.

    Returns ``(clipped, norm_before, norm_after)``.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return dict(grads), norm, norm
    if np.isfinite(norm):
        scale = max_norm / norm
    else:
        amax, r = _scaled_norm(grads)
        scale = (max_norm / amax) / r if np.isfinite(amax) else np.nan
    clipped = {k: g * scale for k, g in grads.items()}
    return clipped, norm, global_norm(clipped)


class Adam:
    """Adam with optional decoupled weight decay (AdamW when ``weight_decay > 0``).

    ``step`` returns new parameter arrays and leaves the inputs untouched.
    """

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            new = p.astype(np.float64)
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * new
            new = new - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = new.astype(p.dtype)
        return out

    def state_arrays(self):
        arrays = {"t": np.array(self.t, dtype=np.int64)}
        for name in self.m:
            arrays[f"m/{name}"] = self.m[name]
            arrays[f"v/{name}"] = self.v[name]
        return arrays

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"])
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}
