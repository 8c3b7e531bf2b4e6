"""Per-pixel loop references for the weighted losses (pure Python floats)."""
import math


def pixel_weight(mask, k=31, multiplier=5.0):
    h, w = len(mask), len(mask[0])
    r = k // 2
    out = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            total = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w:
                        total += mask[y][x]
            out[i][j] = 1.0 + multiplier * abs(total / (k * k) - mask[i][j])
    return out


def _bce(x, g):
    # -[g log s + (1 - g) log(1 - s)], s = sigmoid(x), in overflow-free form
    return max(x, 0.0) - x * g + math.log1p(math.exp(-abs(x)))


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def weighted_bce(logits, mask, weight):
    num = den = 0.0
    for lr, gr, wr in zip(logits, mask, weight):
        for x, g, w in zip(lr, gr, wr):
            num += w * _bce(x, g)
            den += w
    return num / den


def weighted_iou(logits, mask, weight, smooth=1.0):
    inter = union = 0.0
    for lr, gr, wr in zip(logits, mask, weight):
        for x, g, w in zip(lr, gr, wr):
            p = _sigmoid(x)
            inter += w * p * g
            union += w * (p + g - p * g)
    return 1.0 - (inter + smooth) / (union + smooth)
