"""Independent scalar reference implementations used as test oracles.

Everything here is deliberately written with plain Python numbers, lists and
``math``/``cmath`` - no numpy vectorization, no reuse of the library's
compute paths - so agreement between the two is meaningful evidence.  Only
the pinned conventions (padding scheme, HTK mel points, DCT normalization)
are shared, because they are part of the product's contract.
"""

from __future__ import annotations

import cmath
import math


# -- scalar convolution --------------------------------------------------------


def conv1d_naive(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """x: list[Ci][L]; w: list[Co][Ci/g][K]; returns list[Co][L_out]."""
    Ci, L = len(x), len(x[0])
    Co, Cig, K = len(w), len(w[0]), len(w[0][0])
    L_out = (L + 2 * padding - dilation * (K - 1) - 1) // stride + 1
    out = [[0.0] * L_out for _ in range(Co)]
    for o in range(Co):
        g = o // (Co // groups)
        for l in range(L_out):
            acc = b[o] if b is not None else 0.0
            for i in range(Cig):
                ci = g * Cig + i
                for k in range(K):
                    pos = l * stride + k * dilation - padding
                    if 0 <= pos < L:
                        acc += x[ci][pos] * w[o][i][k]
            out[o][l] = acc
    return out


def conv_transpose1d_naive(x, w, b=None, stride=1, padding=0):
    """x: list[Ci][L]; w: list[Ci][Co][K]; returns list[Co][L_out]."""
    Ci, L = len(x), len(x[0])
    Co, K = len(w[0]), len(w[0][0])
    L_out = (L - 1) * stride - 2 * padding + K
    out = [[b[o] if b is not None else 0.0 for _ in range(L_out)] for o in range(Co)]
    for i in range(Ci):
        for l in range(L):
            for o in range(Co):
                for k in range(K):
                    n = l * stride + k - padding
                    if 0 <= n < L_out:
                        out[o][n] += x[i][l] * w[i][o][k]
    return out


def leaky_relu_naive(rows, slope=0.2):
    return [[v if v > 0 else slope * v for v in row] for row in rows]


def tanh_naive(rows):
    return [[math.tanh(v) for v in row] for row in rows]


def add_rows(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


# -- scalar generator forward -----------------------------------------------------


def generator_taps_naive(handle, mel):
    """Recompute the melgan_like forward taps with scalar loops.

    ``handle`` is a GeneratorHandle (parameters are read as nested lists);
    ``mel`` is list[n_mels][T].  Returns the list of per-block tap
    activations, mirroring the documented architecture: input conv,
    then per block [leaky -> transposed conv -> dilated residual stack].
    """
    cfg = handle.config
    assert cfg.kind == "melgan_like"
    p = {k: v.data.tolist() for k, v in handle.params.items()}
    pad_io = (cfg.io_kernel - 1) // 2
    x = conv1d_naive(mel, p["in.w"], p["in.b"], padding=pad_io)
    taps = []
    ks = cfg.resblock_kernels[0]
    for bi, stride in enumerate(cfg.upsample_strides):
        x = leaky_relu_naive(x)
        x = conv_transpose1d_naive(x, p[f"up{bi}.w"], p[f"up{bi}.b"],
                                   stride=stride, padding=stride // 2)
        for j, dil in enumerate(cfg.resblock_dilations):
            y = leaky_relu_naive(x)
            y = conv1d_naive(y, p[f"up{bi}.k{ks}.d{j}.c1.w"], p[f"up{bi}.k{ks}.d{j}.c1.b"],
                             padding=dil * (ks - 1) // 2, dilation=dil)
            y = leaky_relu_naive(y)
            y = conv1d_naive(y, p[f"up{bi}.k{ks}.d{j}.c2.w"], p[f"up{bi}.k{ks}.d{j}.c2.b"])
            x = add_rows(x, y)
        taps.append(x)
    return taps


# -- scalar similarity chain ---------------------------------------------------------


def cosine_naive(a, b, eps=1e-8):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (max(na, eps) * max(nb, eps))


def softmax_naive(xs):
    m = max(xs)
    es = [math.exp(v - m) for v in xs]
    z = sum(es)
    return [e / z for e in es]


def kl_naive(p, q, eps=1e-12):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * (math.log(max(pi, eps)) - math.log(max(qi, eps)))
    return total


def temporal_mean_naive(act):
    return [sum(row) / len(row) for row in act]


def cdc_loss_naive(source_handle, adapted_handle, mels, layer_indices=None, eps=1e-8):
    """Full scalar recomputation of the consistency loss (melgan_like)."""
    items = [[row[:] for row in m] for m in mels]
    taps_adapted = [generator_taps_naive(adapted_handle, m) for m in items]
    taps_source = [generator_taps_naive(source_handle, m) for m in items]
    n_items = len(items)
    layers = layer_indices if layer_indices is not None else range(len(taps_adapted[0]))
    total = 0.0
    for l in layers:
        vec_a = [temporal_mean_naive(taps_adapted[i][l]) for i in range(n_items)]
        vec_s = [temporal_mean_naive(taps_source[i][l]) for i in range(n_items)]
        for i in range(n_items):
            sims_a = [cosine_naive(vec_a[i], vec_a[j], eps) for j in range(n_items) if j != i]
            sims_s = [cosine_naive(vec_s[i], vec_s[j], eps) for j in range(n_items) if j != i]
            total += kl_naive(softmax_naive(sims_a), softmax_naive(sims_s))
    return total


# -- scalar spectral chain -------------------------------------------------------------


def fft_naive(xs):
    """Recursive radix-2 FFT over complex lists."""
    n = len(xs)
    if n == 1:
        return list(xs)
    if n % 2:
        raise ValueError("length must be a power of two")
    even = fft_naive(xs[0::2])
    odd = fft_naive(xs[1::2])
    out = [0j] * n
    for k in range(n // 2):
        tw = cmath.exp(-2j * math.pi * k / n) * odd[k]
        out[k] = even[k] + tw
        out[k + n // 2] = even[k] - tw
    return out


def rfft_naive(xs):
    return fft_naive([complex(v, 0.0) for v in xs])[:len(xs) // 2 + 1]


def reflect_index_naive(i, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    j = abs(i) % period
    return period - j if j >= n else j


def hann_naive(win_length, n_fft):
    w = [0.5 - 0.5 * math.cos(2.0 * math.pi * k / win_length) for k in range(win_length)]
    if win_length < n_fft:
        lpad = (n_fft - win_length) // 2
        w = [0.0] * lpad + w + [0.0] * (n_fft - win_length - lpad)
    return w


def stft_mags_naive(samples, n_fft, hop, win_length=None):
    """Magnitudes [T][bins] under the pinned padding convention."""
    win_length = win_length or n_fft
    xs = list(samples)
    T = -(-len(xs) // hop)
    xs = xs + [0.0] * (T * hop - len(xs))
    side = (n_fft - hop) // 2
    padded = [xs[reflect_index_naive(i, len(xs))] for i in range(-side, len(xs) + side)]
    w = hann_naive(win_length, n_fft)
    mags = []
    for t in range(T):
        frame = [padded[t * hop + j] * w[j] for j in range(n_fft)]
        mags.append([abs(c) for c in rfft_naive(frame)])
    return mags


def hz_to_mel_naive(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def mel_to_hz_naive(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_weights_naive(n_mels, n_fft, sr, fmin, fmax):
    """Triangular filter weights [n_mels][bins] on the HTK scale."""
    bins = n_fft // 2 + 1
    lo, hi = hz_to_mel_naive(fmin), hz_to_mel_naive(fmax)
    edges = [mel_to_hz_naive(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = []
    for i in range(n_mels):
        f_lo, f_c, f_hi = edges[i], edges[i + 1], edges[i + 2]
        row = []
        for k in range(bins):
            f = k * sr / n_fft
            rising = (f - f_lo) / (f_c - f_lo)
            falling = (f_hi - f) / (f_hi - f_c)
            row.append(max(0.0, min(rising, falling)))
        fb.append(row)
    return fb


def log_mel_naive(samples, n_fft, hop, n_mels, sr, fmin, fmax, log_floor, win_length=None):
    mags = stft_mags_naive(samples, n_fft, hop, win_length)
    fb = mel_weights_naive(n_mels, n_fft, sr, fmin, fmax)
    T, bins = len(mags), len(mags[0])
    out = []
    for i in range(n_mels):
        row = []
        for t in range(T):
            acc = sum(fb[i][k] * mags[t][k] for k in range(bins))
            row.append(math.log(max(acc, log_floor)))
        out.append(row)
    return out


def dct2_ortho_naive(xs):
    n = len(xs)
    out = []
    for m in range(n):
        scale = math.sqrt(1.0 / n) if m == 0 else math.sqrt(2.0 / n)
        out.append(scale * sum(xs[k] * math.cos(math.pi * m * (2 * k + 1) / (2 * n)) for k in range(n)))
    return out


def mcd_naive(ref_samples, gen_samples, order, n_fft, hop, n_mels, sr, fmin, fmax, log_floor):
    ref = log_mel_naive(ref_samples, n_fft, hop, n_mels, sr, fmin, fmax, log_floor)
    gen = log_mel_naive(gen_samples, n_fft, hop, n_mels, sr, fmin, fmax, log_floor)
    T = len(ref[0])
    total = 0.0
    for t in range(T):
        c_ref = dct2_ortho_naive([ref[i][t] for i in range(n_mels)])
        c_gen = dct2_ortho_naive([gen[i][t] for i in range(n_mels)])
        total += math.sqrt(sum((c_ref[m] - c_gen[m]) ** 2 for m in range(1, order + 1)))
    return (10.0 / math.log(10.0)) * math.sqrt(2.0) * total / T


def mr_stft_naive(ref_samples, gen_samples, fft_sizes=(512, 1024, 2048), floor=1e-7):
    gen = list(gen_samples)
    if len(gen) < len(ref_samples):
        gen = gen + [0.0] * (len(ref_samples) - len(gen))
    gen = gen[:len(ref_samples)]
    total = 0.0
    for n_fft in fft_sizes:
        hop = n_fft // 4
        R = stft_mags_naive(ref_samples, n_fft, hop)
        G = stft_mags_naive(gen, n_fft, hop)
        num = den = 0.0
        logsum = 0.0
        count = 0
        for t in range(len(R)):
            for k in range(len(R[0])):
                r = max(R[t][k], floor)
                g = max(G[t][k], floor)
                num += (r - g) ** 2
                den += r * r
                logsum += abs(math.log(r) - math.log(g))
                count += 1
        total += math.sqrt(num) / math.sqrt(den) + logsum / count
    return total


# -- scalar optimizer ---------------------------------------------------------------


def adam_trajectory_naive(x0, grads, lr, beta1, beta2, eps):
    """Positions after each textbook bias-corrected Adam step."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(x)
    return out
