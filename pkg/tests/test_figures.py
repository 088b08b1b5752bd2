"""Figure rendering: every backed figure appears, missing tables are skipped,
and rendering stays a pure view over the delimited outputs."""
import shutil

import pytest

from marginlab.figures import render_all

EXPECTED_FIGURES = {
    "fig_val_error.png", "fig_curves.png", "fig_histograms.png",
    "fig_scatter_maxmargin.png", "fig_distance_matrix.png",
}


def test_render_all_from_reference_tables(blob_fixture, tmp_path):
    # copy only the tables: figures are derived from CSV + .bin, nothing else
    src = blob_fixture.exp
    for f in src.iterdir():
        if f.is_file() and not f.name.startswith("fig_"):
            shutil.copy2(f, tmp_path / f.name)
    written = render_all(tmp_path)
    assert {p.name for p in written} == EXPECTED_FIGURES
    for p in written:
        assert p.stat().st_size > 1000
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_render_all_skips_missing_tables(blob_fixture, tmp_path):
    shutil.copy2(blob_fixture.exp / "val_error.csv", tmp_path / "val_error.csv")
    written = render_all(tmp_path)
    assert [p.name for p in written] == ["fig_val_error.png"]


def test_render_all_empty_dir_is_noop(tmp_path):
    assert render_all(tmp_path) == []
    assert list(tmp_path.iterdir()) == []


def test_heatmap_needs_both_matrix_and_axes(blob_fixture, tmp_path):
    shutil.copy2(blob_fixture.exp / "distance_matrix.bin",
                 tmp_path / "distance_matrix.bin")
    shutil.copy2(blob_fixture.exp / "distance_matrix.bin.json",
                 tmp_path / "distance_matrix.bin.json")
    assert render_all(tmp_path) == []   # no distance_axes.csv: skipped
    shutil.copy2(blob_fixture.exp / "distance_axes.csv",
                 tmp_path / "distance_axes.csv")
    written = render_all(tmp_path)
    assert [p.name for p in written] == ["fig_distance_matrix.png"]
