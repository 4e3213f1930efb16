"""Long training runs behind the acceptance suite, cached on disk.

Each run lives in ``<cache>/<name>-<key>`` where the key hashes the run config
and every source file that can change a training result. A finished run leaves
``done.json``; anything else is retrained from scratch.

    python3 tests/acceptance_runs.py          # populate the cache ahead of pytest

The cache root is ``$MPHPE_TEST_CACHE`` or ``<repo>/.cache/acceptance``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
SRC = REPO / "src" / "mphpe"
# modules whose code feeds a metric; cli/plotting changes keep the cache valid
RESULT_SOURCES = ("geometry.py", "labelgen.py", "synthgen.py", "datamodel.py", "net.py", "losses.py",
                  "trainer.py", "infer_eval.py", "_kernels/__init__.py", "_kernels/_fallback.py",
                  "_kernels/_core.pyx")

BENCH_SEED = 0
BENCH_COUNTS = (500, 100)
EPOCHS = 60


def cache_root() -> Path:
    root = Path(os.environ.get("MPHPE_TEST_CACHE") or REPO / ".cache" / "acceptance")
    root.mkdir(parents=True, exist_ok=True)
    return root


def source_hash() -> str:
    h = hashlib.sha256()
    for rel in RESULT_SOURCES:
        h.update(rel.encode())
        h.update((SRC / rel).read_bytes())
    return h.hexdigest()


def _key(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode() + source_hash().encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def benchmark():
    """The 500/100 image benchmark, rendered once per source version."""
    from mphpe.synthgen import BenchmarkResult, SceneSpec, generate_benchmark

    spec = SceneSpec(seed=BENCH_SEED)
    out = cache_root() / f"bench-{_key({'spec': spec.to_dict(), 'counts': BENCH_COUNTS})}"
    if not (out / "done.json").exists():
        shutil.rmtree(out, ignore_errors=True)
        generate_benchmark(spec, BENCH_COUNTS, out)
        (out / "done.json").write_text("{}\n")
    return BenchmarkResult(out, out / "train.json", out / "val.json",
                           {"train": out / "train_scene.json", "val": out / "val_scene.json"})


def run_config(name: str, **overrides):
    from mphpe.trainer import TrainConfig

    bench = benchmark()
    cfg = TrainConfig(train=str(bench.train), val=str(bench.val), epochs=EPOCHS).with_overrides(overrides)
    d = cfg.to_dict()
    d.pop("out")
    out = cache_root() / f"{name}-{_key(d)}"
    return cfg.with_overrides({"out": str(out)})


def trained(name: str, **overrides) -> dict:
    """Train (or reuse) a run; returns done.json: wall time, metrics and the final eval report."""
    from mphpe.trainer import HeadDataset, load_checkpoint, train, validate_model

    cfg = run_config(name, **overrides)
    out = Path(cfg.out)
    done = out / "done.json"
    if done.exists():
        return json.loads(done.read_text())
    shutil.rmtree(out, ignore_errors=True)
    t0 = time.perf_counter()
    res = train(cfg)
    wall = time.perf_counter() - t0
    info = {"name": name, "config": cfg.to_dict(), "wall_s": wall, "diverged": res.diverged, "error": res.error,
            "metrics": res.metrics}
    if not res.diverged:
        model, _ = load_checkpoint(res.checkpoint)
        val = HeadDataset.from_file(cfg.val, cfg.input_size)
        info["report_full"] = validate_model(model, val, cfg, "full")[0].to_dict()
        info["report_narrow"] = validate_model(model, val, cfg, "narrow")[0].to_dict()
    done.write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return info


PLAIN = ("e2e_plain", {})
WRAPPED = ("e2e_wrapped", {"wrapped": True})


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stdout)
    for name, over in (PLAIN, WRAPPED):
        info = trained(name, **over)
        last = info["metrics"][-1] if info["metrics"] else {}
        print(name, f"{info['wall_s']:.0f}s", json.dumps(last, sort_keys=True), flush=True)
