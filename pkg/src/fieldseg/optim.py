"""Adam optimizer and finite-difference gradient checking."""

import numpy as np

ADAM_DEFAULTS = dict(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)


def zero_grad(params):
    for p in params:
        p.grad = None


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; parameters without gradients are skipped."""
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def grad_check(closure, params, h=1e-5, max_entries=64, rng=None):
    """Compare reverse-mode gradients against central finite differences.

    ``closure`` re-evaluates the scalar loss from the current parameter
    values. At most ``max_entries`` coordinates per parameter are probed
    (seeded choice), and the worst relative error is returned. Parameters
    should be float64 for the stated tolerances to be meaningful.

    Coordinates sitting on a ReLU kink (the two one-sided differences
    disagree at scale h) are skipped: central differences are not a valid
    derivative estimate there. A wrong backward still shows up, since both
    sides then agree with each other and disagree with the analytic value.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grad(params)
    loss = closure()
    loss.backward()
    analytic = [np.array(p.grad if p.grad is not None else np.zeros_like(p.data))
                for p in params]
    f_zero = loss.item()

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if n <= max_entries:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = closure().item()
            flat[i] = orig - h
            f_minus = closure().item()
            flat[i] = orig
            fwd = (f_plus - f_zero) / h
            bwd = (f_zero - f_minus) / h
            if abs(fwd - bwd) > 1e-4 * max(1.0, abs(fwd), abs(bwd)):
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(a.reshape(-1)[i])
            rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            worst = max(worst, rel)
    return worst
