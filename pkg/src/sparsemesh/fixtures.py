"""In-repo model fixtures with seeded random integer weights.

Four networks cover the shapes the estimator sweep cares about: a small
weight-heavy CNN, a VGG16-shaped feature extractor (13 convs, 5 pools,
224x224x3 in, 7x7x512 out), a Resnet-style bottleneck stack with eltwise
skips, and an Inception-style multi-branch net whose branches join through
eltwise adds (the IR has no concat).  The VGG front segment ships
separately for the depth-wise tiling study.
"""

from __future__ import annotations

from .graph import NetGraph, loads

_seed_counter = 0


def _conv(lid, src, dst, cout, kernel=3, stride=1, pad=1, seed=None, kern2=None):
    global _seed_counter
    _seed_counter += 1
    k = (kernel, kernel) if kern2 is None else (kernel, kern2)
    if isinstance(pad, int):
        pad = [pad] * 4
    return {
        "id": lid, "op": "conv", "inputs": [src], "output": dst,
        "kernel": list(k), "stride": stride, "pad": list(pad),
        "out_channels": cout, "block": [8, 8],
        "weights": {"kind": "seed", "seed": seed if seed is not None
                    else 1000 + _seed_counter, "low": -8, "high": 8},
        "bias": {"kind": "seed", "seed": 500 + _seed_counter, "low": -4, "high": 4},
    }


def _pool(lid, src, dst, kernel=2, stride=2, pad=0, mode="max"):
    if isinstance(pad, int):
        pad = [pad] * 4
    return {"id": lid, "op": "pool", "inputs": [src], "output": dst,
            "kernel": [kernel, kernel], "stride": stride, "pad": list(pad),
            "mode": mode}


def _doc(name, in_shape, layers, out):
    return {
        "schema_version": 1, "name": name,
        "inputs": [{"id": "x", "shape": list(in_shape), "dtype": "i8",
                    "scale_position": 4}],
        "outputs": [out],
        "layers": layers,
    }


def smallcnn() -> dict:
    """Weight-heavy little net: 5x5 kernels on a 16x16x64 map, so weight
    broadcasts dominate and oversized meshes pay for padded cohorts."""
    global _seed_counter
    _seed_counter = 0
    ls = [
        _conv("c1", "x", "t1", 64, kernel=5, pad=2, seed=11),
        _conv("c2", "t1", "t2", 64, kernel=5, pad=2, seed=12),
        _conv("c3", "t2", "t3", 64, kernel=5, pad=2, seed=13),
        _pool("p1", "t3", "t4"),
        _conv("c4", "t4", "t5", 64, kernel=5, pad=2, seed=14),
    ]
    return _doc("smallcnn", (16, 16, 64), ls, "t5")


_VGG_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


def vgg16() -> dict:
    """The 13-conv VGG16 feature extractor; classifier GEMMs are omitted."""
    global _seed_counter
    _seed_counter = 100
    ls = []
    src = "x"
    n = 0
    for si, (ch, reps) in enumerate(_VGG_STAGES, start=1):
        for ri in range(1, reps + 1):
            n += 1
            lid, dst = f"conv{si}_{ri}", f"t{n}"
            ls.append(_conv(lid, src, dst, ch, seed=200 + n))
            src = dst
        n += 1
        ls.append(_pool(f"pool{si}", src, f"t{n}"))
        src = f"t{n}"
    return _doc("vgg16", (224, 224, 3), ls, src)


def vgg16_front() -> dict:
    """The second VGG stage on its own: the chain the tiling study uses."""
    global _seed_counter
    _seed_counter = 300
    ls = [
        _conv("conv2_1", "x", "t1", 128, seed=301),
        _conv("conv2_2", "t1", "t2", 128, seed=302),
    ]
    return _doc("vgg16_front", (112, 112, 64), ls, "t2")


def _bottleneck(tag, src, mid, out, seed):
    return [
        _conv(f"{tag}_reduce", src, f"{tag}a", mid, kernel=1, pad=0, seed=seed),
        _conv(f"{tag}_conv", f"{tag}a", f"{tag}b", mid, kernel=3, pad=1, seed=seed + 1),
        _conv(f"{tag}_expand", f"{tag}b", f"{tag}c", out, kernel=1, pad=0, seed=seed + 2),
        _conv(f"{tag}_proj", src, f"{tag}p", out, kernel=1, pad=0, seed=seed + 3),
        {"id": f"{tag}_add", "op": "eltwise", "inputs": [f"{tag}c", f"{tag}p"],
         "output": f"{tag}o"},
    ]


def resnet_like() -> dict:
    """Three bottleneck stages with projection shortcuts and eltwise joins."""
    global _seed_counter
    _seed_counter = 400
    ls = [_conv("stem", "x", "t0", 64, kernel=3, pad=1, seed=401)]
    ls += _bottleneck("b1", "t0", 64, 256, seed=410)
    ls.append(_pool("pool1", "b1o", "t1"))
    ls += _bottleneck("b2", "t1", 128, 512, seed=420)
    ls.append(_pool("pool2", "b2o", "t2"))
    ls += _bottleneck("b3", "t2", 256, 1024, seed=430)
    ls.append(_pool("pool3", "b3o", "t3"))
    return _doc("resnet_like", (56, 56, 64), ls, "t3")


def inception_like() -> dict:
    """Parallel 1x1 / 3x3 / 5x5 / pooled branches joined by eltwise adds."""
    global _seed_counter
    _seed_counter = 600
    ls = [
        _conv("stem", "x", "t0", 192, kernel=3, pad=1, seed=601),
        _conv("br1", "t0", "m1", 64, kernel=1, pad=0, seed=602),
        _conv("br2_reduce", "t0", "r2", 64, kernel=1, pad=0, seed=603),
        _conv("br2", "r2", "m2", 64, kernel=3, pad=1, seed=604),
        _conv("br3_reduce", "t0", "r3", 64, kernel=1, pad=0, seed=605),
        _conv("br3", "r3", "m3", 64, kernel=5, pad=2, seed=606),
        _pool("br4_pool", "t0", "r4", kernel=3, stride=1, pad=1),
        _conv("br4", "r4", "m4", 64, kernel=1, pad=0, seed=607),
        {"id": "mix", "op": "eltwise", "inputs": ["m1", "m2", "m3", "m4"],
         "output": "t1"},
        _conv("tail1", "t1", "t2", 128, seed=608),
        _pool("pool1", "t2", "t3"),
        _conv("tail2", "t3", "t4", 128, seed=609),
    ]
    return _doc("inception_like", (28, 28, 192), ls, "t4")


FIXTURES = {
    "smallcnn": smallcnn,
    "vgg16": vgg16,
    "vgg16_front": vgg16_front,
    "resnet_like": resnet_like,
    "inception_like": inception_like,
}


def fixture_doc(name: str) -> dict:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; have {sorted(FIXTURES)}")
    return FIXTURES[name]()


def fixture_graph(name: str) -> NetGraph:
    return loads(fixture_doc(name))
