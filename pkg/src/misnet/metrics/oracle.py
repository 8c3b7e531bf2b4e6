"""Pixel-loop reference implementations of the metrics.

Deliberately naive: plain Python loops over nested lists, no shared helpers
with :mod:`misnet.metrics.core`. Intended for cross-checking on small inputs.
"""
import math
import sys

EPS = sys.float_info.epsilon


def _lists(pred, gt):
    p = [[float(v) for v in row] for row in pred]
    g = [[1 if v else 0 for v in row] for row in gt]
    return p, g, len(g), len(g[0])


def dice_iou(pred, gt, threshold=0.5):
    p, g, h, w = _lists(pred, gt)
    inter = ps = gs = 0
    for i in range(h):
        for j in range(w):
            s = 1 if p[i][j] >= threshold else 0
            inter += s * g[i][j]
            ps += s
            gs += g[i][j]
    if ps + gs == 0:
        return 1.0, 1.0
    return 2.0 * inter / (ps + gs), inter / (ps + gs - inter)


def mae(pred, gt):
    p, g, h, w = _lists(pred, gt)
    total = 0.0
    for i in range(h):
        for j in range(w):
            total += abs(g[i][j] - p[i][j])
    return total / (h * w)


def weighted_fmeasure(pred, gt, beta2=1.0):
    p, g, h, w = _lists(pred, gt)
    fg = [(i, j) for i in range(h) for j in range(w) if g[i][j]]
    if not fg:
        return 0.0
    err = [[abs(p[i][j] - g[i][j]) for j in range(w)] for i in range(h)]
    # nearest foreground pixel by exhaustive search, first (row-major) wins ties
    dist = [[0.0] * w for _ in range(h)]
    err_t = [row[:] for row in err]
    for i in range(h):
        for j in range(w):
            if g[i][j]:
                continue
            best, best_d2 = None, None
            for (a, b) in fg:
                d2 = (a - i) ** 2 + (b - j) ** 2
                if best_d2 is None or d2 < best_d2:
                    best, best_d2 = (a, b), d2
            dist[i][j] = math.sqrt(best_d2)
            err_t[i][j] = err[best[0]][best[1]]
    # 7x7 gaussian, sigma 5, small entries zeroed, normalised
    raw = [[math.exp(-((u - 3) ** 2 + (v - 3) ** 2) / 50.0) for v in range(7)] for u in range(7)]
    peak = max(max(r) for r in raw)
    raw = [[x if x >= EPS * peak else 0.0 for x in r] for r in raw]
    norm = sum(sum(r) for r in raw)
    kern = [[x / norm for x in r] for r in raw]
    ew_fg_sum = ew_bg_sum = 0.0
    n_fg = 0
    for i in range(h):
        for j in range(w):
            ea = 0.0
            for u in range(7):
                for v in range(7):
                    a, b = i + u - 3, j + v - 3
                    if 0 <= a < h and 0 <= b < w:
                        ea += kern[u][v] * err_t[a][b]
            if g[i][j]:
                e = ea if ea < err[i][j] else err[i][j]
                ew_fg_sum += e
                n_fg += 1
            else:
                ew_bg_sum += err[i][j] * (2.0 - math.exp(math.log(0.5) / 5.0 * dist[i][j]))
    tp = n_fg - ew_fg_sum
    recall = 1.0 - ew_fg_sum / n_fg
    precision = tp / (tp + ew_bg_sum + EPS)
    return (1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS)


def _mean(vals):
    return sum(vals) / len(vals)


def _object(vals):
    mu = _mean(vals)
    if len(vals) > 1:
        sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / (len(vals) - 1))
    else:
        sd = 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sd + EPS)


def _ssim(pv, gv):
    n = len(pv)
    x, y = _mean(pv), _mean(gv)
    sx = sum((a - x) ** 2 for a in pv) / (n - 1 + EPS)
    sy = sum((b - y) ** 2 for b in gv) / (n - 1 + EPS)
    sxy = sum((a - x) * (b - y) for a, b in zip(pv, gv)) / (n - 1 + EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure(pred, gt, alpha=0.5):
    p, g, h, w = _lists(pred, gt)
    n = h * w
    n_fg = sum(sum(r) for r in g)
    if n_fg == 0:
        return min(max(1.0 - sum(sum(r) for r in p) / n, 0.0), 1.0)
    if n_fg == n:
        return min(max(sum(sum(r) for r in p) / n, 0.0), 1.0)
    # object term
    fg_vals = [p[i][j] for i in range(h) for j in range(w) if g[i][j]]
    bg_vals = [1.0 - p[i][j] for i in range(h) for j in range(w) if not g[i][j]]
    u = n_fg / n
    obj = u * _object(fg_vals) + (1 - u) * _object(bg_vals)
    # region term: split at the 1-based rounded centroid
    sx = sum(j + 1 for i in range(h) for j in range(w) if g[i][j]) / n_fg
    sy = sum(i + 1 for i in range(h) for j in range(w) if g[i][j]) / n_fg
    X, Y = math.floor(sx + 0.5), math.floor(sy + 0.5)
    reg = 0.0
    for rows, cols in (((0, Y), (0, X)), ((0, Y), (X, w)), ((Y, h), (0, X)), ((Y, h), (X, w))):
        pv, gv = [], []
        for i in range(*rows):
            for j in range(*cols):
                pv.append(p[i][j])
                gv.append(float(g[i][j]))
        if pv:
            reg += len(pv) / n * _ssim(pv, gv)
    score = alpha * obj + (1 - alpha) * reg
    return min(max(score, 0.0), 1.0)


def _e_binary(f, g, h, w):
    n = h * w
    n_gt = sum(sum(r) for r in g)
    if n_gt == 0:
        return sum(1 - f[i][j] for i in range(h) for j in range(w)) / n
    if n_gt == n:
        return sum(f[i][j] for i in range(h) for j in range(w)) / n
    mu_f = sum(sum(r) for r in f) / n
    mu_g = n_gt / n
    total = 0.0
    for i in range(h):
        for j in range(w):
            af, ag = f[i][j] - mu_f, g[i][j] - mu_g
            align = 2.0 * af * ag / (af * af + ag * ag + EPS)
            total += (align + 1.0) ** 2 / 4.0
    return total / n


def e_measure(pred, gt, mode="max", threshold=0.5):
    p, g, h, w = _lists(pred, gt)
    ts = [threshold] if mode == "fixed" else [k / 256.0 for k in range(1, 256)]
    best = -1.0
    for t in ts:
        f = [[1 if p[i][j] >= t else 0 for j in range(w)] for i in range(h)]
        best = max(best, _e_binary(f, g, h, w))
    return best


def all_metrics(pred, gt, threshold=0.5, e_mode="max"):
    d, i = dice_iou(pred, gt, threshold)
    return {
        "mdice": d,
        "miou": i,
        "wfm": weighted_fmeasure(pred, gt),
        "sm": s_measure(pred, gt),
        "em": e_measure(pred, gt, mode=e_mode, threshold=threshold),
        "mae": mae(pred, gt),
    }
