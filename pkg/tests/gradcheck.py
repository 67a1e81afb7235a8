"""Central-difference gradient checking that is honest about its resolution.

Two measurement artifacts are handled explicitly rather than by loosening
the tolerance:

- A ReLU/LeakyReLU kink inside [theta-h, theta+h] makes the central
  difference an average slope, not a derivative estimate. Both evaluations
  record the sign of every activation input; coordinates whose signs differ
  are skipped (and counted, so a systematic problem cannot hide).
- A parameter whose true gradient is zero (e.g. conv bias cancelled by the
  following instance norm) yields pure float roundoff in the difference.
  Values below the finite-difference resolution eps*|loss|/h are treated
  as zero on both sides.

A genuinely wrong analytic gradient passes neither guard: the interval is
sign-stable, the difference is well above resolution, and the mismatch is
reported.
"""
import numpy as np
import torch


def _eval_with_signs(value_fn, nets):
    signs = []
    handles = []

    def hook(module, inputs):
        signs.append(torch.sign(inputs[0].detach()).flatten())

    for net in nets:
        for m in net.modules():
            if isinstance(m, (torch.nn.ReLU, torch.nn.LeakyReLU)):
                handles.append(m.register_forward_pre_hook(hook))
    try:
        loss = float(value_fn())
    finally:
        for h in handles:
            h.remove()
    return loss, torch.cat(signs) if signs else torch.zeros(0)


def central_difference_check(
    value_fn, params, nets, n_checks, rng, h=1e-5, max_skips=None
):
    """Compare autograd against (f(x+h) - f(x-h)) / 2h on sampled coordinates.

    Returns (worst_rel_error, n_checked, n_skipped). ``value_fn`` must be a
    deterministic closure over the models (fresh identically-seeded sampling
    per call).
    """
    loss0 = value_fn()
    grads = torch.autograd.grad(loss0, params, allow_unused=True)
    # resolution of the difference quotient at 64-bit
    atol = abs(float(loss0)) * 2.2e-16 / h * 30 + 1e-12
    max_skips = max_skips if max_skips is not None else 5 * n_checks

    checked = skipped = 0
    worst = 0.0
    while checked < n_checks:
        assert skipped <= max_skips, "too many kink-straddling samples"
        pi = int(rng.integers(len(params)))
        if grads[pi] is None:
            continue
        flat = params[pi].data.view(-1)
        idx = int(rng.integers(flat.numel()))
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + h
        up, sign_up = _eval_with_signs(value_fn, nets)
        with torch.no_grad():
            flat[idx] = orig - h
        down, sign_down = _eval_with_signs(value_fn, nets)
        with torch.no_grad():
            flat[idx] = orig
        if len(sign_up) != len(sign_down) or not torch.equal(sign_up, sign_down):
            skipped += 1
            continue
        fd = (up - down) / (2 * h)
        an = float(grads[pi].view(-1)[idx])
        if max(abs(an), abs(fd)) >= atol:
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd)))
        checked += 1
    return worst, checked, skipped
