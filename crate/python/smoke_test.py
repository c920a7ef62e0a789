#!/usr/bin/env python3
"""Smoke test for the scaled_nl extension module.

Builds are expected at target/{release,debug}/libscaled_nl.so; the script
copies the freshest one next to a temp directory as scaled_nl.so, imports
it, and exercises the main entry points. Exits nonzero on the first failure.

Usage:
    cargo build -p scaled-nl-py --release
    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def locate_library() -> Path:
    candidates = []
    for profile in ("release", "debug"):
        for name in ("libscaled_nl.so", "scaled_nl.dll", "libscaled_nl.dylib"):
            p = REPO / "target" / profile / name
            if p.exists():
                candidates.append(p)
    if not candidates:
        sys.exit(
            "scaled_nl library not found; run `cargo build -p scaled-nl-py` first"
        )
    return max(candidates, key=lambda p: p.stat().st_mtime)


def import_module():
    lib = locate_library()
    tmp = Path(tempfile.mkdtemp(prefix="scaled-nl-py-"))
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy2(lib, tmp / f"scaled_nl{suffix}")
    sys.path.insert(0, str(tmp))
    import scaled_nl

    return scaled_nl


CHECKS = []


def check(name):
    def wrap(fn):
        CHECKS.append((name, fn))
        return fn

    return wrap


@check("matmul matches a python loop")
def _(m):
    a = m.Tensor([2, 3], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    b = m.Tensor([3, 2], [7.0, 8.0, 9.0, 10.0, 11.0, 12.0])
    got = a.matmul(b).tolist()
    want = [
        1 * 7 + 2 * 9 + 3 * 11,
        1 * 8 + 2 * 10 + 3 * 12,
        4 * 7 + 5 * 9 + 6 * 11,
        4 * 8 + 5 * 10 + 6 * 12,
    ]
    assert got == [float(v) for v in want], (got, want)


@check("softmax rows sum to one")
def _(m):
    t = m.Tensor([2, 3], [0.0, 1.0, -1.0, 1000.0, 0.0, -1000.0])
    s = t.softmax_rows().tolist()
    for row in (s[0:3], s[3:6]):
        assert abs(sum(row) - 1.0) <= 1e-12, row


@check("scaled block groupings agree")
def _(m):
    x = m.FeatureMap.random(4, 4, 8, seed=0)
    cfg = m.AttentionConfig("scaled_nl", 8, 4)
    emb = m.init_embeddings(cfg, seed=1)
    ym = m.scaled_nl_forward(x, emb, cfg, mode="materialized").values().tolist()
    ya = m.scaled_nl_forward(x, emb, cfg, mode="associative").values().tolist()
    worst = max(
        abs(p - q) / max(abs(p), abs(q), 1.0) for p, q in zip(ym, ya)
    )
    assert worst <= 1e-10, worst


@check("softmax forward returns a normalized map")
def _(m):
    x = m.FeatureMap.random(3, 3, 4, seed=2)
    cfg = m.AttentionConfig("softmax_nl", 4, 2)
    emb = m.init_embeddings(cfg, seed=3)
    _, attn = m.softmax_nl_forward(x, emb, cfg)
    rows = attn.tolist()
    hw = 9
    for i in range(hw):
        assert abs(sum(rows[i * hw : (i + 1) * hw]) - 1.0) <= 1e-10


@check("magnitude/direction projections decompose the dot product")
def _(m):
    q = m.Tensor.standard_normal([5, 3], seed=4)
    mag = m.project_magnitude(q).tolist()
    direction = m.project_direction(q).tolist()
    raw = q.tolist()
    for i in range(5):
        norm = math.sqrt(sum(v * v for v in raw[i * 3 : (i + 1) * 3]))
        assert abs(mag[i] - norm) <= 1e-12
        unit = direction[i * 3 : (i + 1) * 3]
        assert abs(sum(v * v for v in unit) - 1.0) <= 1e-12


@check("gradient check passes for both variants")
def _(m):
    for variant in ("softmax_nl", "scaled_nl"):
        cfg = m.AttentionConfig(variant, 4, 2)
        report = m.grad_check(cfg, 2, 2, seed=0)
        assert report["passed"], (variant, report["max_rel_error"])


@check("cost model trends")
def _(m):
    soft = [
        m.cost_softmax_nl(8, 8, 16, 16 // nh, nh)["peak_activation_elements"]
        for nh in (1, 2, 4)
    ]
    assert soft[0] < soft[1] < soft[2], soft
    scaled = [
        m.cost_scaled_nl(8, 8, 16, 16 // nh, nh)["peak_activation_elements"]
        for nh in (1, 2, 4)
    ]
    assert max(scaled) - min(scaled) <= 8 * 8 * 16, scaled
    assert m.crossover(1) == 2 and m.crossover(16) == 17


@check("variance stabilization")
def _(m):
    v = m.variance_stability(16, 4, 2000, seed=5)
    assert 0.9 <= v <= 1.1, v
    u = m.variance_stability_unscaled(16, 4, 2000, seed=5)
    assert 0.9 * 16 <= u <= 1.1 * 16, u


@check("key dominance of a key-structured map is 1")
def _(m):
    row = [0.1, 0.2, 0.3, 0.4]
    t = m.Tensor([4, 4], row * 4)
    report = m.key_dominance(t, normalized=True)
    assert report["key_dominance"] == 1.0, report


@check("toy training descends")
def _(m):
    out = m.train_toy("scaled_nl", steps=200, samples=32, seed=0)
    assert not out["diverged"]
    assert out["final_loss"] < out["initial_loss"], out


def main():
    module = import_module()
    failed = 0
    for name, fn in CHECKS:
        try:
            fn(module)
        except AssertionError as e:
            print(f"FAIL {name}: {e}")
            failed += 1
        else:
            print(f"PASS {name}")
    if failed:
        sys.exit(f"{failed} of {len(CHECKS)} smoke checks failed")
    print(f"all {len(CHECKS)} smoke checks passed")


if __name__ == "__main__":
    main()
