"""Acceptance criteria 1-11, one PASS/FAIL line each.

Criteria 1-5, 10 and 11 re-run the oracle tests that implement them in a fresh
interpreter and time them.  Criteria 6-9 train on the seeded desk benchmark;
runs are cached under ``.bench_cache`` (or ``$CMGNAV_BENCH_CACHE``) keyed by
configuration and source hash, so only the first invocation pays for training.

Run directly with ``python tests/test_acceptance.py`` or through pytest; the
summary lines appear at the end of the pytest report.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cmgnav.bench import BenchConfig, run_one

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("CMGNAV_BENCH_CACHE", ROOT / ".bench_cache"))
BENCH = BenchConfig()


def report(record_property, n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    record_property("acceptance", line)
    assert ok, line


def run_tests(*node_ids):
    t0 = time.time()
    r = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *node_ids],
                       cwd=ROOT, capture_output=True, text=True)
    summary = r.stdout.strip().splitlines()[-1] if r.stdout.strip() else r.stderr.strip()[-200:]
    return r.returncode == 0, time.time() - t0, summary


def timed(record_property, n, limit, *node_ids):
    ok, secs, summary = run_tests(*node_ids)
    report(record_property, n, ok and secs < limit, f"{summary}; {secs:.1f}s (limit {limit:.0f}s)")


# -- oracle criteria ----------------------------------------------------------------------------

def test_criterion_01_gradient_suite(record_property):
    timed(record_property, 1, 60, "tests/test_autodiff.py",
          "tests/test_navigator.py::test_end_to_end_gradient_check",
          "tests/test_navigator.py::test_decoder_gradient_wrt_grounded_features",
          "tests/test_discriminator.py::test_gradient_wrt_behaviour")


def test_criterion_02_equation_oracles(record_property):
    timed(record_property, 2, 60, "tests/test_navigator.py::test_equation_oracles_100_instances")


def test_criterion_03_metric_oracles(record_property):
    timed(record_property, 3, 60, "tests/test_metrics.py")


def test_criterion_04_update_order(record_property):
    timed(record_property, 4, 120, "tests/test_trainer.py::test_update_trace",
          "tests/test_trainer.py::test_mode_invariant",
          "tests/test_discriminator.py::test_fooling_update_leaves_discriminator_bitwise_unchanged")


def test_criterion_05_overfit(record_property):
    timed(record_property, 5, 300, "tests/test_trainer.py::test_teacher_overfits_32_episodes")


def test_criterion_10_discriminator_signal(record_property):
    timed(record_property, 10, 300, "tests/test_discriminator.py::test_signal_sanity")


def test_criterion_11_determinism(record_property):
    timed(record_property, 11, 300, "tests/test_cli.py::test_generation_is_byte_identical",
          "tests/test_cli.py::test_train_is_deterministic",
          "tests/test_cli.py::test_eval_twice_identical_and_dump_valid",
          "tests/test_trainer.py::test_same_seed_same_manifest",
          "tests/test_trainer.py::test_checkpoint_resume_is_exact",
          "tests/test_episodes.py::test_instruction_determinism",
          "tests/test_env.py::test_generation_deterministic")


# -- desk benchmark -------------------------------------------------------------------------------

def runs(regime, **kw):
    return [run_one(regime, s, BENCH, CACHE, **kw) for s in BENCH.seeds]


def per_seed(values, fmt="{:.3f}"):
    return "[" + ", ".join(fmt.format(v) for v in values) + "]"


@pytest.fixture(scope="module")
def core():
    return {"teacher": runs("teacher"), "student": runs("student"), "aal": runs("aal")}


@pytest.mark.slow
def test_criterion_06_regime_trends(core, record_property):
    tf, sf, aal = core["teacher"], core["student"], core["aal"]
    a = [s["TL"] > t["TL"] for s, t in zip(sf, tf)]
    b = [s["SR"] >= t["SR"] for s, t in zip(sf, tf)]
    c = [x["SPL"] >= max(t["SPL"], s["SPL"]) for x, t, s in zip(aal, tf, sf)]
    secs = sum(r["seconds"] for r in tf + sf + aal)
    ok = sum(a) >= 4 and sum(b) >= 4 and sum(c) >= 4 and secs < 3600
    detail = (f"(a) TL sf>tf {sum(a)}/5 (b) SR sf>=tf {sum(b)}/5 (c) SPL aal>=both {sum(c)}/5; "
              f"TL tf={per_seed([r['TL'] for r in tf], '{:.2f}')} sf={per_seed([r['TL'] for r in sf], '{:.2f}')}; "
              f"SR tf={per_seed([r['SR'] for r in tf])} sf={per_seed([r['SR'] for r in sf])}; "
              f"SPL tf={per_seed([r['SPL'] for r in tf])} sf={per_seed([r['SPL'] for r in sf])} "
              f"aal={per_seed([r['SPL'] for r in aal])}; train time {secs / 60:.1f} min")
    report(record_property, 6, ok, detail)


@pytest.mark.slow
def test_criterion_07_teacher_length_matching(core, record_property):
    tf = core["teacher"]
    rel = [abs(r["TL"] - r["gt_length"]) / r["gt_length"] for r in tf]
    hits = sum(x <= 0.15 for x in rel)
    report(record_property, 7, hits >= 4,
           f"within 15% on {hits}/5 seeds; TL={per_seed([r['TL'] for r in tf], '{:.2f}')} "
           f"gt={per_seed([r['gt_length'] for r in tf], '{:.2f}')} rel={per_seed(rel)}")


@pytest.mark.slow
def test_criterion_08_interval_sweep(core, record_property):
    k1 = core["aal"]
    k32 = runs("aal", interval=32)
    hits = [a["SPL"] >= b["SPL"] for a, b in zip(k1, k32)]
    secs = sum(r["seconds"] for r in k1 + k32)
    report(record_property, 8, sum(hits) >= 4 and secs < 5400,
           f"SPL k=1 >= k=32 on {sum(hits)}/5 seeds; k=1 {per_seed([r['SPL'] for r in k1])} "
           f"k=32 {per_seed([r['SPL'] for r in k32])}; mean {np.mean([r['SPL'] for r in k1]):.3f} vs "
           f"{np.mean([r['SPL'] for r in k32]):.3f}; train time {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_09_plug_and_play(record_property):
    aal = runs("aal", grounding="historical")
    sf = runs("student", grounding="historical")
    hits = [a["SPL"] > s["SPL"] for a, s in zip(aal, sf)]
    report(record_property, 9, sum(hits) >= 3,
           f"historical-only SPL aal > student on {sum(hits)}/5 seeds; aal {per_seed([r['SPL'] for r in aal])} "
           f"student {per_seed([r['SPL'] for r in sf])}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
