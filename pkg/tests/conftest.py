import numpy as np
import pytest

from capsfeat import autodiff as ad
from capsfeat.autodiff import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def naive_conv2d(x, k, stride):
    """Direct nested-loop cross-correlation, accumulated in input dtype order."""
    B, C, H, W = x.shape
    K, _, kh, kw = k.shape
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((B, K, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for o in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                acc += float(x[b, c, i * stride + p, j * stride + q]) * float(k[o, c, p, q])
                    out[b, o, i, j] = acc
    return out


def numeric_grad(f, arr, idx, h):
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def _sigmoid_wrong_backward(x):
    # correct forward, backward off by 10%
    x = ad.as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e)).astype(x.data.dtype)
    return ad._finish(out, (x,), lambda g: (g * out * (1 - out) * 1.1,))


@pytest.fixture
def broken_sigmoid(monkeypatch):
    """Swap in a sigmoid whose backward rule is wrong."""
    monkeypatch.setattr(ad, "sigmoid", _sigmoid_wrong_backward)
    yield _sigmoid_wrong_backward
