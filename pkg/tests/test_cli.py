import json

from dualspace.cli import main

SMALL_DATASET = """
dataset = synthetic-blobs
dataset.train_per_class = 40
dataset.test_per_class = 15
"""

FAST_TRAIN = """
train.epochs = 2
train.batch_size = 32
train.learning_rate = 1e-3
"""


def write_cfg(tmp_path, body, name="run.cfg"):
    path = tmp_path / name
    path.write_text(body)
    return str(path)


def run_cli(*argv):
    return main(list(argv))


# ---------------------------------------------------------------------------
# extract

def test_extract_idempotent_via_cache(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL_DATASET + "blocks = [3]\n")
    cache_dir = str(tmp_path / "cache")
    assert run_cli("extract", "--config", cfg, "--cache-dir", cache_dir) == 0
    first = capsys.readouterr().out
    assert "0 cache hits" in first
    assert run_cli("extract", "--config", cfg, "--cache-dir", cache_dir) == 0
    second = capsys.readouterr().out
    assert "extract: 0 entries written" in second  # warm cache, zero extraction


def test_extract_recovers_from_corrupted_cache(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL_DATASET + "blocks = [3]\n")
    cache_dir = tmp_path / "cache"
    assert run_cli("extract", "--config", cfg, "--cache-dir", str(cache_dir)) == 0
    capsys.readouterr()
    victim = sorted(cache_dir.glob("*.bin"))[0]
    victim.write_bytes(victim.read_bytes()[:16])  # truncate the binary payload
    assert run_cli("extract", "--config", cfg, "--cache-dir", str(cache_dir)) == 0
    out = capsys.readouterr().out
    assert "extract: 1 entries written" in out  # exactly the corrupted one


# ---------------------------------------------------------------------------
# train

def test_train_writes_checkpoint_and_resumes(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL_DATASET + FAST_TRAIN + "blocks = [2, 3]\n")
    out_dir = str(tmp_path / "out")
    assert run_cli("train", "--config", cfg, "--output-dir", out_dir) == 0
    first = capsys.readouterr().out
    assert "trained=[2, 3]" in first
    ckpt = next((tmp_path / "out").glob("students-*"))
    assert (ckpt / "manifest.json").exists()
    assert (ckpt / "block_02.npz").exists()
    assert (ckpt / "loss_curves.csv").read_text().startswith("block,epoch,loss")

    # resume: both blocks already on disk -> nothing retrained
    assert run_cli("train", "--config", cfg, "--output-dir", out_dir) == 0
    second = capsys.readouterr().out
    assert "trained=[] skipped=[2, 3]" in second

    # drop one block file -> only that block retrains
    (ckpt / "block_03.npz").unlink()
    assert run_cli("train", "--config", cfg, "--output-dir", out_dir) == 0
    third = capsys.readouterr().out
    assert "trained=[3] skipped=[2]" in third


# ---------------------------------------------------------------------------
# evaluate

EVAL_CFG = SMALL_DATASET + FAST_TRAIN + """
variant = pretrained-only, gaussian, 0.90
trials = 1
seed = 3
"""


def test_evaluate_reports_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, EVAL_CFG)
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert run_cli("evaluate", "--config", cfg, "--output-dir", out_a) == 0
    assert run_cli("evaluate", "--config", cfg, "--output-dir", out_b) == 0
    report_a = (tmp_path / "a" / "report.json").read_bytes()
    report_b = (tmp_path / "b" / "report.json").read_bytes()
    assert report_a == report_b
    csv_a = (tmp_path / "a" / "report.csv").read_bytes()
    csv_b = (tmp_path / "b" / "report.csv").read_bytes()
    assert csv_a == csv_b
    # wall-clock timing lives in the sidecar, not the report
    assert b"timing" not in report_a
    assert (tmp_path / "a" / "report.timing.json").exists()


def test_evaluate_csv_rows_equal_pivots_times_variants(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_DATASET + FAST_TRAIN + """
variants = ["pretrained-only, gaussian, 0.90", "pretrained-only, knn(k=2), 0.90"]
trials = 1
""")
    out = tmp_path / "out"
    assert run_cli("evaluate", "--config", cfg, "--output-dir", str(out)) == 0
    rows = (out / "report.csv").read_text().strip().splitlines()
    assert len(rows) - 1 == 4 * 2  # 4 pivot classes x 2 variants


def test_evaluate_energy_flag_overrides_variant(tmp_path):
    cfg = write_cfg(tmp_path, EVAL_CFG)
    out = tmp_path / "out"
    assert run_cli("evaluate", "--config", cfg, "--output-dir", str(out),
                   "--energy", "0.95") == 0
    doc = json.loads((out / "report.json").read_text())
    assert "0.95" in doc["reports"][0]["variant"]


# ---------------------------------------------------------------------------
# diagnose

def test_diagnose_confusion_writes_report_and_plot(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_DATASET)
    out = tmp_path / "out"
    assert run_cli("diagnose", "--config", cfg, "--output-dir", str(out),
                   "--cache-dir", str(tmp_path / "cache")) == 0
    doc = json.loads((out / "confusion.json").read_text())
    assert len(doc["pairwise_confusion"]) == 4
    assert (out / "confusion.png").stat().st_size > 0


def test_diagnose_toy_and_inflation(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "seed = 0\n")
    out = tmp_path / "out"
    assert run_cli("diagnose", "--config", cfg, "--output-dir", str(out),
                   "--demo", "toy") == 0
    toy = json.loads((out / "toy_confusion.json").read_text())
    assert toy["unimodal_auroc"] > toy["multimodal_auroc"]
    assert (out / "toy_confusion.png").exists()

    assert run_cli("diagnose", "--config", cfg, "--output-dir", str(out),
                   "--demo", "inflation") == 0
    inflation = json.loads((out / "auroc_inflation.json").read_text())
    assert inflation["auroc"] >= 0.95
    assert abs(inflation["precision_at_threshold"] - 0.5) <= 0.01


# ---------------------------------------------------------------------------
# report + exit codes

def test_report_command_renders_and_exports_csv(tmp_path, capsys):
    cfg = write_cfg(tmp_path, EVAL_CFG)
    out = tmp_path / "out"
    run_cli("evaluate", "--config", cfg, "--output-dir", str(out))
    capsys.readouterr()
    csv_out = tmp_path / "again.csv"
    assert run_cli("report", str(out / "report.json"), "--csv", str(csv_out)) == 0
    printed = capsys.readouterr().out
    assert "mean AUROC" in printed
    assert csv_out.exists()


def test_exit_codes_distinguish_error_classes(tmp_path, capsys):
    # config error: unknown key
    bad_cfg = write_cfg(tmp_path, "definitely_not_a_key = 1\n")
    assert run_cli("evaluate", "--config", bad_cfg) == 2
    # config error: malformed variant
    cfg = write_cfg(tmp_path, SMALL_DATASET + "variant = bogus-family\n", "v.cfg")
    assert run_cli("evaluate", "--config", cfg, "--output-dir", str(tmp_path / "o")) == 2
    # data error: unknown dataset
    assert run_cli("evaluate", "--dataset", "no-such-dataset",
                   "--output-dir", str(tmp_path / "o2")) == 3
    # data error: missing report file
    assert run_cli("report", str(tmp_path / "missing.json")) == 3
    capsys.readouterr()


def test_synthetic_end_to_end_fits_desk_scale_budget(tmp_path):
    # timed run: a combined-variant evaluation must stay well inside minutes
    import time
    cfg = write_cfg(tmp_path, SMALL_DATASET + FAST_TRAIN +
                    "variant = combined(m=1), gaussian, 0.90\n")
    start = time.perf_counter()
    assert run_cli("evaluate", "--config", cfg,
                   "--output-dir", str(tmp_path / "out")) == 0
    assert time.perf_counter() - start < 120.0


def test_numerical_failures_map_to_exit_code_4(monkeypatch, capsys):
    from dualspace import cli
    from dualspace.exceptions import NumericalError

    def boom(cfg):
        raise NumericalError("synthetic factorization breakdown")

    monkeypatch.setitem(cli.main.__globals__, "cmd_evaluate", boom)
    assert run_cli("evaluate", "--dataset", "synthetic-blobs") == 4
    assert "numerical failure" in capsys.readouterr().err
