"""Harness tests: IDX loading, persistence formats, waveforms, config, runner and CLI."""

from __future__ import annotations

import gzip
import math
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freegrad.harness import cli
from freegrad.harness.config import (ConfigError, ExperimentConfig, load_config, parse_config, parse_value,
                                     render_config)
from freegrad.harness.data import (IMAGES_MAGIC, LABELS_MAGIC, IdxFormatError, load_mnist, load_mnist_idx, one_hot,
                                   parse_idx, read_idx, write_idx)
from freegrad.harness.experiments import REGISTRY, ExperimentError, default_config, run_experiment
from freegrad.harness.io import (CheckpointError, MetricsRow, decode_checkpoint, emit_metrics_csv, emit_plot_svg,
                                 encode_checkpoint, load_checkpoint, metrics_csv_text, plot_svg_text,
                                 read_metrics_csv, save_checkpoint)
from freegrad.harness.waveforms import synth_waveforms
from freegrad.numcore import DomainError, FreegradError

DATA = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


def idx_bytes(magic: int, dims: tuple[int, ...], payload: bytes = b"") -> bytes:
    """Independent IDX writer used as the oracle for the reader."""
    return struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + payload


# --- IDX --------------------------------------------------------------------


def test_idx_header_of_full_size_training_file():
    raw = idx_bytes(IMAGES_MAGIC, (60000, 28, 28), bytes(60000 * 28 * 28))
    arr = parse_idx(raw, IMAGES_MAGIC)
    assert arr.shape == (60000, 28, 28)
    assert arr.dtype == np.uint8


def test_idx_all_zero_file_gives_zero_images(tmp_path):
    path = tmp_path / "zeros-idx3-ubyte"
    path.write_bytes(idx_bytes(IMAGES_MAGIC, (10, 28, 28), bytes(10 * 784)))
    arr = read_idx(path, IMAGES_MAGIC)
    assert arr.shape == (10, 28, 28)
    assert not arr.any()


def test_idx_first_image_checksum_matches_byte_reader():
    images = read_idx(DATA / "train-images-idx3-ubyte.gz", IMAGES_MAGIC)
    with gzip.open(DATA / "train-images-idx3-ubyte.gz", "rb") as fh:
        raw = fh.read()
    ndim = raw[3]
    offset = 4 + 4 * ndim
    assert int(images[0].sum()) == sum(raw[offset:offset + 784])
    assert images[0].tobytes() == raw[offset:offset + 784]


@pytest.mark.parametrize("raw, pattern", [
    (b"\x00\x00", "truncated header"),
    (b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00", "bad magic"),
    (b"\x00\x00\x07\x01" + struct.pack(">I", 1) + b"\x00", "bad magic"),
    (b"\x00\x00\x08\x03" + struct.pack(">I", 1), "dimension table"),
    (b"\x00\x00\x08\x01" + struct.pack(">I", 5) + b"\x00\x00", "truncated payload"),
])
def test_idx_malformed_inputs(raw, pattern):
    with pytest.raises(IdxFormatError, match=pattern):
        parse_idx(raw)


def test_idx_magic_mismatch():
    raw = idx_bytes(LABELS_MAGIC, (3,), b"\x01\x02\x03")
    with pytest.raises(IdxFormatError, match="expected"):
        parse_idx(raw, IMAGES_MAGIC)


def test_idx_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_idx(tmp_path / "absent")


def test_idx_image_label_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", np.zeros((4, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "lab", np.zeros(3, dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="4 images but 3 labels"):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab")


@pytest.mark.parametrize("name", ["a-idx", "a-idx.gz"])
@pytest.mark.parametrize("dtype", [np.uint8, np.int8, ">i2", ">i4", ">f4", ">f8"])
def test_idx_write_read_round_trip(tmp_path, name, dtype, rng):
    arr = (rng.normal(size=(3, 4, 5)) * 50).astype(dtype)
    write_idx(tmp_path / name, arr)
    back = read_idx(tmp_path / name)
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_idx_gzip_output_is_reproducible(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.gz", arr)
    write_idx(tmp_path / "b.gz", arr)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


def test_one_hot_smoothing():
    t = one_hot(np.array([2, 0]), 4, smoothing=0.1)
    np.testing.assert_allclose(t, [[0.1, 0.1, 0.9, 0.1], [0.9, 0.1, 0.1, 0.1]])
    np.testing.assert_array_equal(one_hot(np.array([1]), 3, smoothing=0.0), [[0.0, 1.0, 0.0]])
    with pytest.raises(FreegradError):
        one_hot(np.array([3]), 3)


def test_load_mnist_subset_scaling_and_targets():
    ds = load_mnist("train", DATA, limit=100)
    assert ds.images.shape == (100, 784)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(np.unique(ds.labels)) <= set(range(10))
    np.testing.assert_array_equal(np.argmax(ds.targets, axis=1), ds.labels)
    raw = read_idx(DATA / "train-images-idx3-ubyte.gz")
    np.testing.assert_array_equal(ds.images[5] * 255.0, raw[5].ravel().astype(float))


def test_load_mnist_bad_split_and_missing_root(tmp_path):
    with pytest.raises(ValueError):
        load_mnist("validation", DATA)
    with pytest.raises(FileNotFoundError, match="FREEGRAD_DATA_DIR"):
        load_mnist("train", tmp_path)


def test_dataset_batches_cover_every_example_once(rng):
    ds = load_mnist("test", DATA, limit=70)
    seen = np.concatenate([lab for _, _, lab in ds.batches(16, rng)])
    assert len(seen) == 70
    assert sorted(seen.tolist()) == sorted(ds.labels.tolist())


# --- checkpoints ------------------------------------------------------------

_names = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=12)
_shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple)


@given(st.dictionaries(_names, _shapes, max_size=4), st.integers(0, 2**31 - 1))
def test_checkpoint_round_trip_is_bit_exact(drawn, seed):
    rng = np.random.default_rng(seed)
    tensors = {name: rng.normal(size=shape) * 10.0 ** rng.integers(-300, 300) for name, shape in drawn.items()}
    back = decode_checkpoint(encode_checkpoint(tensors))
    assert list(back) == list(tensors)
    for name, value in tensors.items():
        assert back[name].shape == np.shape(value)
        assert back[name].tobytes() == np.asarray(value, dtype=np.float64).tobytes()


def test_checkpoint_special_values_and_files(tmp_path):
    tensors = {"w": np.array([[np.nan, np.inf], [-np.inf, -0.0]]), "s": np.array(3.5)}
    save_checkpoint(tmp_path / "c.fgck", tensors)
    back = load_checkpoint(tmp_path / "c.fgck")
    assert back["w"].tobytes() == tensors["w"].tobytes()
    assert back["s"].shape == () and back["s"] == 3.5
    assert decode_checkpoint(encode_checkpoint({})) == {}


def test_checkpoint_rejections():
    good = encode_checkpoint({"a": np.ones(3)})
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError, match="version 2"):
        decode_checkpoint(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(good[:-1])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(good + b"\x00")


# --- metrics CSV and SVG ----------------------------------------------------


def test_single_row_csv_has_header_plus_one_line():
    text = metrics_csv_text([MetricsRow("r", 0, 1, "loss", 0.5)])
    assert text.splitlines() == ["run,seed,step,metric,value", "r,0,1,loss,0.5"]


_rows = st.lists(st.tuples(st.sampled_from(["a", "b,c", 'q"x']), st.integers(0, 5), st.sampled_from(["m", "n"]),
                           st.floats(allow_nan=False, allow_infinity=False)), max_size=20)


@given(_rows)
def test_csv_parse_back(tmp_path_factory, drawn):
    rows = [MetricsRow(run, seed, step, metric, value) for step, (run, seed, metric, value) in enumerate(drawn)]
    path = tmp_path_factory.mktemp("csv") / "m.csv"
    emit_metrics_csv(rows, path)
    assert read_metrics_csv(path) == rows


def test_csv_rejects_non_finite_and_backwards_steps(tmp_path):
    with pytest.raises(FreegradError, match="non-finite"):
        emit_metrics_csv([MetricsRow("r", 0, 0, "m", float("nan"))], tmp_path / "a.csv")
    with pytest.raises(FreegradError, match="backwards"):
        emit_metrics_csv([MetricsRow("r", 0, 3, "m", 1.0), MetricsRow("r", 0, 2, "m", 1.0)], tmp_path / "b.csv")
    # Separate series may interleave freely.
    emit_metrics_csv([MetricsRow("r", 0, 3, "m", 1.0), MetricsRow("r", 1, 2, "m", 1.0)], tmp_path / "c.csv")


def test_csv_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n")
    with pytest.raises(FreegradError, match="header"):
        read_metrics_csv(tmp_path / "x.csv")


def test_svg_is_byte_identical_for_identical_input(tmp_path):
    rows = [MetricsRow("r", s, k, m, math.sin(k + s)) for s in (0, 1) for m in ("acc", "loss") for k in range(30)]
    emit_plot_svg(rows, tmp_path / "a.svg", "t")
    emit_plot_svg(list(rows), tmp_path / "b.svg", "t")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    text = plot_svg_text(rows, "t")
    assert text.count("<polyline") == 4
    assert text.startswith("<svg") and text.rstrip().endswith("</svg>")


def test_svg_handles_constant_series_and_escapes():
    text = plot_svg_text([MetricsRow("<r>", 0, 0, "m&n", 1.0)], "a<b")
    assert "&lt;r&gt;" in text and "m&amp;n" in text and "a&lt;b" in text
    with pytest.raises(FreegradError):
        emit_plot_svg([], "/nonexistent/x.svg")


# --- waveforms --------------------------------------------------------------


def test_sine_derivative_at_zero():
    w = synth_waveforms("sine", 10, 0.01, frequency=2.0, amplitude=3.0)
    assert w.signal[0] == 0.0
    assert w.d1[0] == pytest.approx(3.0 * 2 * math.pi * 2.0, rel=1e-15)
    assert w.d2[0] == pytest.approx(0.0, abs=1e-12)


def test_sawtooth_has_period_one_over_frequency():
    dt, f = 0.001, 4.0
    w = synth_waveforms("sawtooth", 2000, dt, frequency=f)
    lag = round(1.0 / (f * dt))
    np.testing.assert_allclose(w.signal[lag:], w.signal[:-lag], atol=1e-9)
    assert w.signal.min() >= -1.0 and w.signal.max() < 1.0


def test_square_values():
    w = synth_waveforms("square", 1000, 0.001, amplitude=2.0)
    assert set(np.unique(w.signal)) == {-2.0, 2.0}


def test_sine_derivatives_agree_with_finite_differences():
    dt = 1e-4
    w = synth_waveforms("sine", 5000, dt, frequency=1.5)
    fd1 = (w.signal[2:] - w.signal[:-2]) / (2 * dt)
    fd2 = (w.d1[2:] - w.d1[:-2]) / (2 * dt)
    assert np.max(np.abs(fd1 - w.d1[1:-1])) < 1e-4 * np.max(np.abs(w.d1))
    assert np.max(np.abs(fd2 - w.d2[1:-1])) < 1e-4 * np.max(np.abs(w.d2))


def test_waveform_orders_and_errors():
    w = synth_waveforms("sine", 10, 0.1)
    o = w.orders(3, 3)
    assert [x.shape for x in o] == [(1,)] * 3
    assert o[1][0] == w.d1[3]
    with pytest.raises(DomainError):
        synth_waveforms("triangle", 10, 0.1)
    with pytest.raises(DomainError):
        synth_waveforms("sine", 1, 0.1)
    with pytest.raises(DomainError):
        synth_waveforms("sine", 10, 0.0)


# --- config -----------------------------------------------------------------

_plain = st.text(alphabet="abcXYZ019 ._-/#,=", min_size=0, max_size=10)
_scalars = st.one_of(st.integers(-10**6, 10**6), st.floats(allow_nan=False), st.booleans(), _plain)
_values = st.one_of(_scalars, st.lists(_scalars, min_size=1, max_size=4))
_ident = st.from_regex(r"[a-z][a-z0-9_]{0,6}", fullmatch=True)


@given(name=_plain, seeds=st.lists(st.integers(0, 1000), min_size=1, max_size=3),
       epochs=st.integers(0, 50), batch=st.integers(1, 512),
       options=st.dictionaries(_ident.filter(lambda s: s not in ("experiment", "data", "train")),
                               st.dictionaries(_ident, _values, min_size=1, max_size=3), max_size=3))
def test_config_render_parse_round_trip(name, seeds, epochs, batch, options):
    # A section only exists through its keys, so generated sections are non-empty.
    cfg = ExperimentConfig(name=name, seeds=seeds, epochs=epochs, batch_size=batch, options=options,
                           algorithm="pc", out_dir="runs/x y")
    assert parse_config(render_config(cfg), check_paths=False) == cfg


def test_config_file_example(tmp_path):
    text = """
    # comment
    experiment.name = graph-pc
    experiment.seeds = 1, 2
    data.train_subset = 500
    pc.inference_rate = 0.2
    pc.models = 3
    pc.variants = baseline,
    """
    (tmp_path / "c.cfg").write_text(text)
    cfg = load_config(tmp_path / "c.cfg")
    assert cfg.name == "graph-pc" and cfg.seeds == [1, 2] and cfg.train_subset == 500
    assert cfg.options == {"pc": {"inference_rate": 0.2, "models": 3, "variants": ["baseline"]}}


@pytest.mark.parametrize("text, pattern", [
    ("experiment.seeds = 1", "experiment.name"),
    ("experiment.name = x\nnonsense", "line 2"),
    ("experiment.name = x\nnokey = 1", "bad key"),
    ("experiment.name = x\nexperiment.seeds = a, b", "integers"),
    ("experiment.name = x\ntrain.epochs = 1.5", "epochs"),
    ("experiment.name = x\ndata.batch_size = 0", "batch_size"),
    ('experiment.name = "x', "unterminated"),
    ("experiment.name = x\ndata.root = /definitely/not/here", "does not exist"),
])
def test_config_errors(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.cfg")


def test_parse_value_types():
    assert parse_value(" 3 ") == 3
    assert parse_value("1e-3") == 1e-3
    assert parse_value("true") is True
    assert parse_value('"12"') == "12"
    assert parse_value("a, 2, 3.5") == ["a", 2, 3.5]


# --- runner -----------------------------------------------------------------

EXPECTED_EXPERIMENTS = {"scalar-pc", "graph-pc", "pc-vs-bp-mnist", "relaxed-pc-mnist", "ar-adjoints", "ar-mnist",
                        "three-factor", "kalman-tracking", "kalman-learning", "objectives-sweep", "mixture-fit",
                        "dynamical-sine"}


def small_config(name: str, out_dir: Path, seeds=(0,)) -> ExperimentConfig:
    kw = {"train_subset": 96, "test_subset": 64, "epochs": 1} if "mnist" in name else {}
    return default_config(name, seeds=list(seeds), out_dir=str(out_dir), **kw)


def test_registry_contents():
    assert set(REGISTRY) == EXPECTED_EXPERIMENTS
    assert all(exp.description for exp in REGISTRY.values())


@pytest.mark.parametrize("name", sorted(EXPECTED_EXPERIMENTS))
def test_every_experiment_runs_and_writes_artifacts(tmp_path, name):
    outcome = run_experiment(small_config(name, tmp_path))
    (run,) = outcome.runs
    assert run.summary and all(isinstance(v, (int, float)) for v in run.summary.values())
    for path in outcome.artifacts:
        assert path.exists()
    combined = read_metrics_csv(tmp_path / name / "metrics.csv")
    assert combined == run.rows
    if run.tensors:
        back = load_checkpoint(tmp_path / name / "seed0" / "checkpoint.fgck")
        assert set(back) == set(run.tensors)


@pytest.mark.parametrize("name", ["scalar-pc", "kalman-tracking", "relaxed-pc-mnist", "mixture-fit"])
def test_runs_are_byte_identical_across_repeats(tmp_path, name):
    run_experiment(small_config(name, tmp_path / "a", seeds=(0, 3)))
    run_experiment(small_config(name, tmp_path / "b", seeds=(0, 3)))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_different_seeds_give_different_runs():
    out = run_experiment(default_config("kalman-tracking", seeds=[0, 1]), write=False)
    assert out.runs[0].summary != out.runs[1].summary


def test_unknown_experiment():
    with pytest.raises(ExperimentError):
        run_experiment(ExperimentConfig(name="nope"))
    with pytest.raises(ExperimentError):
        default_config("nope")


# --- CLI --------------------------------------------------------------------


def test_cli_list(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    for name in EXPECTED_EXPERIMENTS:
        assert name in out


def test_cli_run_by_name_and_config(tmp_path, capsys):
    assert cli.main(["run", "three-factor", "--out-dir", str(tmp_path), "--seed", "4"]) == 0
    assert "max_gradient_error" in capsys.readouterr().out
    assert (tmp_path / "three-factor" / "seed4" / "metrics.csv").exists()
    cfg = tmp_path / "a.cfg"
    cfg.write_text(render_config(default_config("ar-adjoints", out_dir=str(tmp_path / "o"))))
    assert cli.main(["run", str(cfg)]) == 0
    assert (tmp_path / "o" / "ar-adjoints" / "metrics.csv").exists()


def test_cli_check_exit_codes(tmp_path, capsys):
    assert cli.main(["check", "6", "--quiet", "--out-dir", str(tmp_path)]) == 0
    assert "[PASS]" in capsys.readouterr().out
    assert cli.main(["check", "2", "--quiet", "--out-dir", str(tmp_path)]) == 1
    assert "[FAIL]" in capsys.readouterr().out


def test_cli_errors_exit_2(tmp_path, capsys):
    assert cli.main(["run", "no-such-thing"]) == 2
    assert "error" in capsys.readouterr().err
    assert cli.main(["check", "99"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("experiment.name = x\ntrain.epochs = many\n")
    assert cli.main(["run", str(bad)]) == 2


def test_console_entry_point_is_invocable():
    proc = subprocess.run([sys.executable, "-m", "freegrad.harness.cli", "list"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "graph-pc" in proc.stdout


def test_shipped_example_configs_load():
    paths = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.cfg"))
    assert paths
    for path in paths:
        cfg = load_config(path)
        assert cfg.name in REGISTRY
        assert parse_config(render_config(cfg)) == cfg
