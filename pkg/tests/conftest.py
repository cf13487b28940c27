import numpy as np


def fd_check(loss_fn, params, grads, rng, n_coords=20, h=1e-5, skip_zero=True):
    """Central-difference check of `grads` against `loss_fn(params)`.

    `params` is a plain dict of float64 arrays (mutated and restored in
    place). Returns the max relative error over sampled coordinates.
    """
    names = [n for n in grads if params[n].size > 0]
    gscale = max(float(np.abs(g).max()) for g in grads.values())
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        arr = params[name]
        flat = arr.reshape(-1)
        i = rng.integers(flat.size)
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        lp = loss_fn(params)
        flat[i] = orig - step
        lm = loss_fn(params)
        flat[i] = orig
        fd = (lp - lm) / (2 * step)
        an = grads[name].reshape(-1)[i]
        denom = max(abs(fd), abs(an))
        # coordinates whose true gradient is ~0 (e.g. key biases under
        # softmax shift invariance) carry only roundoff; skip them
        if denom < 1e-10 or denom < 1e-4 * gscale:
            continue
        worst = max(worst, abs(fd - an) / denom)
    return worst


def to_f64(params):
    """ParameterSet -> plain dict of float64 copies (shadow-mode params)."""
    return {n: params[n].astype(np.float64) for n in params.names()}
