"""Smoke test for the himamba extension module.

Build and run:
    cargo build --release -p himamba-py --features extension-module
    cp target/release/libhimamba.so python/himamba.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import himamba  # noqa: E402


def main():
    cfg = himamba.Config("tiny")
    assert cfg.scale == 2
    assert cfg.count_params() > 0
    assert cfg.count_flops(32, 32) > 0

    model = himamba.Model(cfg, seed=3)
    assert model.num_params() == cfg.count_params()

    c, h, w = 3, 12, 10
    img = [((i * 37) % 101) / 100.0 for i in range(c * h * w)]
    out, shape = model.upscale(img, (c, h, w))
    assert shape == (3, 24, 20), shape
    assert all(math.isfinite(v) for v in out)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.himb")
        model.save(path)
        again, _ = himamba.Model.load(path).upscale(img, (c, h, w))
        assert again == out

    y, yshape = himamba.rgb_to_y([1.0] * 3, (3, 1, 1))
    assert yshape == (1, 1, 1) and abs(y[0] - 235.0 / 255.0) < 1e-12

    a = [0.5] * (16 * 16)
    b = [0.5 + 1.0 / 255.0] * (16 * 16)
    assert abs(himamba.psnr(a, b, (1, 16, 16), 2) - 48.1308) < 1e-3
    assert himamba.ssim(a, a, (1, 16, 16)) == 1.0

    try:
        model.upscale(img[:-1], (c, h, w))
    except ValueError:
        pass
    else:
        raise AssertionError("bad shape accepted")

    for name, ok, msg in himamba.verify("scan"):
        assert ok, f"{name}: {msg}"

    print("python smoke test passed")


if __name__ == "__main__":
    main()
