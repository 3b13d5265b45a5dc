"""Independent reference computations used by the test-suite.

Nothing here imports the package under test.
"""

import math

import numpy as np
import torch


def gaussian_weights(size, sigma):
    half = (size - 1) / 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    total = sum(g)
    g = [v / total for v in g]
    return [[g[i] * g[j] for j in range(size)] for i in range(size)]


def ssim_loop(x, y, size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """SSIM averaged over every valid window position and channel, one window at a time.

    x, y: arrays shaped (C, H, W). Uses centered second moments.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = gaussian_weights(size, sigma)
    channels, h, wd = x.shape
    values = []
    for c in range(channels):
        for i in range(h - size + 1):
            for j in range(wd - size + 1):
                mx = my = 0.0
                for a in range(size):
                    for b in range(size):
                        mx += w[a][b] * x[c, i + a, j + b]
                        my += w[a][b] * y[c, i + a, j + b]
                vx = vy = cxy = 0.0
                for a in range(size):
                    for b in range(size):
                        dx = x[c, i + a, j + b] - mx
                        dy = y[c, i + a, j + b] - my
                        vx += w[a][b] * dx * dx
                        vy += w[a][b] * dy * dy
                        cxy += w[a][b] * dx * dy
                values.append(((2 * mx * my + c1) * (2 * cxy + c2))
                              / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(values) / len(values)


def fd_gradient_error(loss_of, tensors, analytic_dtype, eps=1e-6, n_dirs=4,
                      n_elems=32, seed=0):
    """Largest relative gap between autograd and central finite differences.

    ``loss_of(list_of_tensors)`` must be a pure function of its inputs. The
    analytic gradient is taken at ``analytic_dtype``; the finite differences
    always run in float64 at the exactly upcast point, so the reference is
    not limited by float32 rounding. Two probes are combined: directional
    derivatives along random unit directions (relative to their own size),
    and single entries of the first tensor (relative to its largest gradient
    entry).
    """
    gen = torch.Generator().manual_seed(seed)
    ta = [t.detach().to(analytic_dtype).requires_grad_(True) for t in tensors]
    grads = torch.autograd.grad(loss_of(ta), ta, allow_unused=True)
    grads = [torch.zeros_like(t, dtype=torch.float64) if g is None else g.double()
             for t, g in zip(ta, grads)]
    base = [t.detach().to(analytic_dtype).double() for t in tensors]

    def f(shifted):
        with torch.no_grad():
            return float(loss_of(shifted))

    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=torch.float64) for t in base]
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        up = f([b + eps * d for b, d in zip(base, dirs)])
        down = f([b - eps * d for b, d in zip(base, dirs)])
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300))

    g0 = grads[0].reshape(-1)
    scale = float(g0.abs().max())
    for i in torch.randperm(g0.numel(), generator=gen)[:n_elems].tolist():
        bump = torch.zeros(g0.numel(), dtype=torch.float64)
        bump[i] = eps
        bump = bump.view(base[0].shape)
        up = f([base[0] + bump, *base[1:]])
        down = f([base[0] - bump, *base[1:]])
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(float(g0[i]) - numeric) / max(abs(float(g0[i])), abs(numeric), scale))
    return worst


def module_loss(module, loss_fn):
    """Turn ``loss_fn(module, x)`` into a pure function of ``[x, *params]``.

    Buffers (BN running statistics) are copied per call so repeated
    evaluations do not interact.
    """
    from torch.func import functional_call

    names = [n for n, _ in module.named_parameters()]
    buffers = dict(module.named_buffers())

    def loss_of(tensors):
        x, *params = tensors
        state = dict(zip(names, params))
        for n, b in buffers.items():
            state[n] = b.clone().to(x.dtype) if b.is_floating_point() else b.clone()
        return loss_fn(lambda inp: functional_call(module, state, (inp,)), x)

    return loss_of, [p for p in module.parameters()]
