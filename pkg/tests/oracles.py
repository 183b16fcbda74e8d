"""Slow reference implementations written as explicit per-pixel loops.

They share no code with the package; the tests compare the vectorized
versions against these on small random instances.
"""
import math

import numpy as np


def census_loop(I, J, O, sigma_T=0.9, sigma_G=0.1, eps=1e-8):
    """Occlusion-aware census on (C,H,W) arrays in [0,1] with an (H,W) mask."""
    li = I.mean(0) * 255.0
    lj = J.mean(0) * 255.0
    h, w = li.shape
    total = 0.0
    visible = 0.0
    for y in range(h):
        for x in range(w):
            if O[y, x] == 0:
                continue
            num = 0.0
            den = 0.0
            for dy in range(-3, 4):
                for dx in range(-3, 4):
                    qy, qx = y + dy, x + dx
                    o = O[qy, qx] if 0 <= qy < h and 0 <= qx < w else 0.0
                    # replicate padding for the images
                    ry, rx = min(max(qy, 0), h - 1), min(max(qx, 0), w - 1)
                    a = li[ry, rx] - li[y, x]
                    b = lj[ry, rx] - lj[y, x]
                    ta = a / math.sqrt(a * a + sigma_T ** 2)
                    tb = b / math.sqrt(b * b + sigma_T ** 2)
                    g = (ta - tb) ** 2
                    num += g / (g + sigma_G) * o
                    den += o
            total += O[y, x] * num / (den + eps)
            visible += O[y, x]
    if visible == 0:
        return 0.0
    return total / (visible + eps)


def outlier_loop(est, gt, valid):
    """est/gt: (C,H,W); valid: (H,W) bool. Returns a (H,W) bool map."""
    c, h, w = gt.shape
    out = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            if not valid[y, x]:
                continue
            err = math.sqrt(sum((est[k, y, x] - gt[k, y, x]) ** 2 for k in range(c)))
            mag = math.sqrt(sum(gt[k, y, x] ** 2 for k in range(c)))
            out[y, x] = not (err <= 3.0 or err <= 0.05 * mag)
    return out


def metrics_loop(est, gt, masks):
    """Percentages (d1, d2, fl, sf) from dicts of (C,H,W) arrays and (H,W) masks."""
    maps = {k: outlier_loop(est[k], gt[k], masks[k]) for k in ("d1", "d2", "flow")}
    rates = []
    for k in ("d1", "d2", "flow"):
        n = int(masks[k].sum())
        rates.append(100.0 * int(maps[k].sum()) / n if n else math.nan)
    h, w = masks["d1"].shape
    n_sf = out_sf = 0
    for y in range(h):
        for x in range(w):
            if masks["d1"][y, x] and masks["d2"][y, x] and masks["flow"][y, x]:
                n_sf += 1
                out_sf += maps["d1"][y, x] or maps["d2"][y, x] or maps["flow"][y, x]
    rates.append(100.0 * out_sf / n_sf if n_sf else math.nan)
    return rates, maps


def epe_loop(est, gt, valid):
    c, h, w = gt.shape
    total, n = 0.0, 0
    for y in range(h):
        for x in range(w):
            if valid[y, x]:
                total += math.sqrt(sum((est[k, y, x] - gt[k, y, x]) ** 2 for k in range(c)))
                n += 1
    return total / n


def splat_sum_loop(src, flow):
    """Bilinear forward splat of (C,H,W) src along (2,H,W) flow, sum mode."""
    c, h, w = src.shape
    out = np.zeros_like(src)
    for y in range(h):
        for x in range(w):
            qx, qy = x + flow[0, y, x], y + flow[1, y, x]
            x0, y0 = math.floor(qx), math.floor(qy)
            fx, fy = qx - x0, qy - y0
            for tx, ty, wt in ((x0, y0, (1 - fx) * (1 - fy)), (x0 + 1, y0, fx * (1 - fy)),
                               (x0, y0 + 1, (1 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)):
                if 0 <= tx < w and 0 <= ty < h:
                    out[:, ty, tx] += src[:, y, x] * wt
    return out


def warp_loop(img, flow):
    """Bilinear backward warp with zero fill outside the image."""
    c, h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            qx, qy = x + flow[0, y, x], y + flow[1, y, x]
            x0, y0 = math.floor(qx), math.floor(qy)
            fx, fy = qx - x0, qy - y0
            for tx, ty, wt in ((x0, y0, (1 - fx) * (1 - fy)), (x0 + 1, y0, fx * (1 - fy)),
                               (x0, y0 + 1, (1 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)):
                if 0 <= tx < w and 0 <= ty < h:
                    out[:, y, x] += img[:, ty, tx] * wt
    return out


def smoothness_loop(field, guide, beta, normalizer=None):
    """Second-order edge-aware smoothness: interior second differences, forward guide gradient."""
    c, h, w = field.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            norm = 1.0 if normalizer is None else normalizer[y, x]
            if 1 <= x <= w - 2:
                d2 = sum(abs(field[k, y, x - 1] + field[k, y, x + 1] - 2 * field[k, y, x]) for k in range(c))
                g = np.mean(np.abs(guide[:, y, x + 1] - guide[:, y, x]))
                total += d2 * math.exp(-beta * g) / norm
            if 1 <= y <= h - 2:
                d2 = sum(abs(field[k, y - 1, x] + field[k, y + 1, x] - 2 * field[k, y, x]) for k in range(c))
                g = np.mean(np.abs(guide[:, y + 1, x] - guide[:, y, x]))
                total += d2 * math.exp(-beta * g) / norm
    return total / (h * w)


def correlation_loop(f1, f2, r):
    c, h, w = f1.shape
    k = 2 * r + 1
    out = np.zeros((k * k, h, w))
    for y in range(h):
        for x in range(w):
            for oy in range(-r, r + 1):
                for ox in range(-r, r + 1):
                    ty, tx = y + oy, x + ox
                    if 0 <= ty < h and 0 <= tx < w:
                        out[(oy + r) * k + ox + r, y, x] = float(np.dot(f1[:, y, x], f2[:, ty, tx])) / c
    return out


def grad_rel_error(fn, inputs, step=1e-4):
    """Largest relative error between autograd and central differences.

    ``fn`` maps the list ``inputs`` (float64 tensors) to a scalar tensor. For
    each input the error is ||g - n|| / ||n|| in the L2 norm over all of its
    entries; the worst input is returned.
    """
    import torch

    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(xs), xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for i, x in enumerate(xs):
            g = torch.zeros_like(x) if grads[i] is None else grads[i]
            num = torch.zeros_like(x)
            flat = x.view(-1)
            for j in range(flat.numel()):
                old = float(flat[j])
                flat[j] = old + step
                hi = float(fn(xs))
                flat[j] = old - step
                lo = float(fn(xs))
                flat[j] = old
                num.view(-1)[j] = (hi - lo) / (2 * step)
            scale = float(num.norm())
            err = float((g - num).norm())
            worst = max(worst, err / scale if scale > 0 else err)
    return worst
