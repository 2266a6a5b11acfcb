"""Independent S-measure evaluation used to freeze values in tests/metrics.rs.

Follows the reference MATLAB implementation (Fan et al., ICCV 2017):
StructureMeasure.m, S_object.m, S_region.m with 1-based centroids.
Run: python3 s_measure.py
"""
import numpy as np

EPS = np.finfo(np.float64).eps


def _object(pred, gt):
    x = pred[gt].mean()
    sigma = pred[gt].std(ddof=1) if gt.sum() > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def s_object(pred, gt):
    fg = np.where(gt, pred, 0.0)
    bg = np.where(gt, 0.0, 1.0 - pred)
    u = gt.mean()
    return u * _object(fg, gt) + (1 - u) * _object(bg, ~gt)


def centroid(gt):
    rows, cols = gt.shape
    if gt.sum() == 0:
        return round(cols / 2), round(rows / 2)
    total = gt.sum()
    i = np.arange(1, cols + 1)
    j = np.arange(1, rows + 1)
    x = int(np.floor(np.sum(gt.sum(axis=0) * i) / total + 0.5))
    y = int(np.floor(np.sum(gt.sum(axis=1) * j) / total + 0.5))
    return x, y


def ssim(pred, gt):
    gt = gt.astype(np.float64)
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx2 = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy2 = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx2 + sy2)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def s_region(pred, gt):
    h, w = gt.shape
    x, y = centroid(gt)
    area = h * w
    q = 0.0
    for rs, cs in [((0, y), (0, x)), ((0, y), (x, w)), ((y, h), (0, x)), ((y, h), (x, w))]:
        p = pred[rs[0]:rs[1], cs[0]:cs[1]]
        g = gt[rs[0]:rs[1], cs[0]:cs[1]]
        if p.size == 0:
            continue
        q += p.size / area * ssim(p, g)
    return q


def s_measure(pred, gt):
    y = gt.mean()
    if y == 0:
        return 1 - pred.mean()
    if y == 1:
        return pred.mean()
    return max(0.0, 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt))


def cases():
    gt = np.zeros((5, 6), dtype=bool)
    gt[1:4, 2:5] = True
    gt[4, 0] = True
    yy, xx = np.mgrid[0:5, 0:6]
    ramp = (yy * 6 + xx) / 29.0
    soft = np.clip(np.where(gt, 0.8, 0.15) + 0.05 * np.sin(yy * 1.3 + xx * 0.7), 0, 1)
    return {
        "constant_half": (np.full((5, 6), 0.5), gt),
        "ramp": (ramp, gt),
        "soft": (soft, gt),
        "inverted": (1.0 - gt.astype(np.float64), gt),
    }


if __name__ == "__main__":
    for name, (pred, gt) in cases().items():
        print(f"{name} {s_measure(pred, gt):.15f}")
