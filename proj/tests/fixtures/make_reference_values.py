"""Regenerates the frozen reference values used by test_metrics and test_downstream.

Images come from the same 64-bit LCG as tests/support.hpp so that both sides
see identical pixels.
"""
import numpy as np
from nltk.translate.bleu_score import corpus_bleu
from skimage.metrics import structural_similarity

MASK = (1 << 64) - 1


def lcg_image(h, w, seed):
    state = seed & MASK
    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            for c in range(3):
                state = (state * 6364136223846793005 + 1442695040888963407) & MASK
                out[y, x, c] = (state >> 33) % 256
    return out


def lcg_noisy(img, seed, amplitude):
    state = seed & MASK
    out = img.copy()
    h, w, _ = img.shape
    for y in range(h):
        for x in range(w):
            for c in range(3):
                state = (state * 6364136223846793005 + 1442695040888963407) & MASK
                d = (state >> 33) % (2 * amplitude + 1) - amplitude
                out[y, x, c] = min(255, max(0, img[y, x, c] + d))
    return out


def ssim(a, b):
    return structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, data_range=255,
                                 channel_axis=2)


print("// SSIM: {h, w, seed, noise_seed, amplitude, value}")
for h, w, s, ns, amp in [(16, 16, 1, 2, 10), (24, 20, 3, 4, 40), (32, 32, 5, 6, 3),
                         (13, 29, 7, 8, 128), (40, 24, 9, 10, 20)]:
    a = lcg_image(h, w, s)
    b = lcg_noisy(a, ns, amp)
    print("{%d, %d, %d, %d, %d, %.12f}," % (h, w, s, ns, amp, ssim(a, b)))
a = np.full((32, 32, 3), 100.0)
b = np.full((32, 32, 3), 110.0)
print("// constant 100 vs 110:", "%.12f" % ssim(a, b))

print("// BLEU")
cands = [["a", "red-circle", "and", "a", "blue-square", "on", "a", "textured", "background"],
         ["a", "green-triangle", "on", "a", "textured", "background"],
         ["an", "empty", "scene"]]
refs = [["a", "red-circle", "and", "a", "red-square", "on", "a", "textured", "background"],
        ["a", "green-triangle", "and", "a", "yellow-circle", "on", "a", "textured", "background"],
        ["a", "blue-circle", "on", "a", "textured", "background"]]
# nltk counts max(1, #n-grams) per sentence in the precision denominator,
# so a candidate shorter than n adds a phantom n-gram. Orders 1..3 are
# unaffected for this corpus; order 4 is frozen on a second corpus whose
# candidates all have at least four tokens.
for n in range(1, 4):
    print(n, "%.12f" % corpus_bleu([[r] for r in refs], cands, weights=tuple([1.0 / n] * n)))
cands2 = cands[:2] + [["a", "blue-circle", "on", "a", "plain", "background"]]
for n in range(1, 5):
    print("long", n, "%.12f" % corpus_bleu([[r] for r in refs], cands2, weights=tuple([1.0 / n] * n)))
