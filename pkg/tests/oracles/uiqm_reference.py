"""Straight-from-the-definition UIQM in plain Python, used once to freeze golden values.

Deliberately shares no code with the package: loops instead of array ops,
its own Sobel with mirrored borders, its own trimmed statistics.
"""
import math


def gradient_image(h=32, w=32):
    return [[(4.0 + 7 * x, 3.0 + 5 * y + 2 * x, 200.0 - 3 * x - 2 * y) for x in range(w)] for y in range(h)]


def _at(ch, y, x):
    h, w = len(ch), len(ch[0])
    y = -y - 1 if y < 0 else (2 * h - y - 1 if y >= h else y)
    x = -x - 1 if x < 0 else (2 * w - x - 1 if x >= w else x)
    return ch[y][x]


def sobel_mag(ch):
    h, w = len(ch), len(ch[0])
    out = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            gy = sum(s * (_at(ch, y + 1, x + dx) - _at(ch, y - 1, x + dx)) for dx, s in ((-1, 1), (0, 2), (1, 1)))
            gx = sum(s * (_at(ch, y + dy, x + 1) - _at(ch, y + dy, x - 1)) for dy, s in ((-1, 1), (0, 2), (1, 1)))
            out[y][x] = math.sqrt(gx * gx + gy * gy)
    peak = max(max(r) for r in out)
    if peak > 0:
        out = [[v * 255.0 / peak for v in r] for r in out]
    return out


def eme(ch, b=8):
    k2, k1 = len(ch) // b, len(ch[0]) // b
    total = 0.0
    for by in range(k2):
        for bx in range(k1):
            vals = [ch[y][x] for y in range(by * b, by * b + b) for x in range(bx * b, bx * b + b)]
            lo, hi = min(vals), max(vals)
            if lo > 0 and hi > 0:
                total += math.log(hi / lo)
    return 2.0 / (k1 * k2) * total


def uicm(img):
    rg, yb = [], []
    for row in img:
        for r, g, b in row:
            rg.append(r - g)
            yb.append((r + g) / 2.0 - b)

    def stats(v):
        v = sorted(v)
        k = len(v)
        lo, hi = math.ceil(0.1 * k), math.floor(0.1 * k)
        kept = v[lo:k - hi]
        mu = sum(kept) / len(kept)
        var = sum((a - mu) ** 2 for a in v) / k
        return mu, var

    mr, vr = stats(rg)
    my, vy = stats(yb)
    return -0.0268 * math.sqrt(mr * mr + my * my) + 0.1586 * math.sqrt(vr + vy)


def uism(img):
    total = 0.0
    for c, lam in enumerate((0.299, 0.587, 0.114)):
        ch = [[px[c] for px in row] for row in img]
        mag = sobel_mag(ch)
        edge = [[m * v for m, v in zip(mr, vr)] for mr, vr in zip(mag, ch)]
        total += lam * eme(edge)
    return total


def uiconm(img, b=8):
    k2, k1 = len(img) // b, len(img[0]) // b
    total = 0.0
    for by in range(k2):
        for bx in range(k1):
            vals = [v for y in range(by * b, by * b + b) for x in range(bx * b, bx * b + b) for v in img[y][x]]
            lo, hi = min(vals), max(vals)
            if hi - lo != 0 and hi + lo != 0:
                r = (hi - lo) / (hi + lo)
                total += r * math.log(r)
    return -1.0 / (k1 * k2) * total


def uiqm(img):
    return 0.0282 * uicm(img) + 0.2953 * uism(img) + 3.5753 * uiconm(img)


if __name__ == "__main__":
    img = gradient_image()
    for f in (uicm, uism, uiconm, uiqm):
        print(f.__name__, repr(f(img)))
