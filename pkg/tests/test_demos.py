"""Smoke-run the fast narrative demos; the heavy ones are exercised by CI hands."""

import runpy
from pathlib import Path

import matplotlib

DEMOS = Path(__file__).parent.parent / "demos"


def _run(name):
    matplotlib.use("Agg")
    runpy.run_path(str(DEMOS / name), run_name="__main__")


def test_density_models_demo_runs():
    _run("02_density_models.py")
    assert (DEMOS / "output" / "density_models.png").exists()


def test_pretraining_confusion_demo_runs():
    _run("04_pretraining_confusion.py")
    assert (DEMOS / "output" / "pretraining_confusion.png").exists()
