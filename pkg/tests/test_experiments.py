import json

import numpy as np
import pytest

from evnet.accounting import FrameTrace
from evnet.errors import ConfigError, ReportError
from evnet.experiments import (
    SWEEP_COLUMNS,
    cmd_sweep,
    count_inversions,
    final_error_divergence,
    layer_report,
    run_pair,
    sweep_points,
    write_layer_report,
    write_rows_csv,
)
from evnet.demo import build_demo_graph
from evnet.policies import PolicyConfig
from evnet.scenes import preset, reversal_frames, scene_generate

BASE = PolicyConfig("threshold", 0.05)


def test_count_inversions():
    assert count_inversions([1, 2, 2, 3]) == 0
    assert count_inversions([1, 3, 2, 4, 3]) == 2
    assert count_inversions([3, 2, 1], increasing=False) == 0


def test_run_pair_modes(demo, moving_video):
    video = moving_video[:3]
    assert run_pair(demo, video, BASE, mode="conv").event is None
    only = run_pair(demo, video, BASE, mode="event")
    assert only.conventional is None and only.report is None and len(only.event.outputs) == 3
    with pytest.raises(ConfigError):
        run_pair(demo, video, BASE, mode="neither")


@pytest.mark.parametrize("kwargs", [dict(), dict(h_values=[0.1], chunks=[2, 4]), dict(h_values=[0.1]),
                                    dict(chunks=[2]), dict(chunks=[0, 2])])
def test_bad_sweeps_rejected(kwargs):
    with pytest.raises(ConfigError):
        sweep_points(BASE, **kwargs)


def test_sweep_points():
    pts = sweep_points(PolicyConfig("exact_h0", 0.0), h_values=[0.0, 0.1])
    assert [label for label, _ in pts] == ["0.0", "0.1"]
    assert all(cfg.kind == "threshold" for _, cfg in pts)
    pts = sweep_points(BASE, chunks=[1, 4])
    assert [label for label, _ in pts] == ["1x1", "4x4"]
    assert pts[1][1].chunk_threshold == pytest.approx(0.025)


def test_threshold_sweep_trends(demo, moving_video):
    rows = cmd_sweep(demo, moving_video, sweep_points(BASE, h_values=[0.01, 0.02, 0.05, 0.1, 0.2]), workers=1)
    assert [r["point"] for r in rows] == ["0.01", "0.02", "0.05", "0.1", "0.2"]
    assert count_inversions([r["savings_ratio"] for r in rows]) <= 1
    assert count_inversions([r["max_linf"] for r in rows]) <= 1
    assert len({r["conventional_macs"] for r in rows}) == 1


def test_parallel_sweep_equals_serial(tmp_path):
    g = build_demo_graph(8)
    video = scene_generate(preset("moving_sprite", frames=6, size=8, sprite_size=3))
    pts = sweep_points(BASE, chunks=[1, 2, 4])
    serial = cmd_sweep(g, video, pts, workers=1)
    parallel = cmd_sweep(g, video, pts, workers=2)
    assert serial == parallel
    write_rows_csv(serial, SWEEP_COLUMNS, tmp_path / "a.csv")
    write_rows_csv(parallel, SWEEP_COLUMNS, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == ",".join(SWEEP_COLUMNS)


# -- layer report ----------------------------------------------------------------

def test_static_layer_report_is_zero(demo, static_video):
    pair = run_pair(demo, static_video, BASE)
    rep = layer_report(pair.conventional.traces, pair.event.traces)
    assert [r["layer"] for r in rep.layers] == ["conv1", "conv2", "conv3", "fc"]
    assert all(r["ratio"] == 0.0 for r in rep.layers)
    assert rep.series[0]["event_macs"] == rep.series[0]["conventional_macs"]
    assert all(r["event_macs"] == 0 for r in rep.series[1:])


def test_layer_report_errors(demo, moving_video):
    pair = run_pair(demo, moving_video[:3], BASE)
    with pytest.raises(ReportError):
        layer_report(pair.event.traces, pair.event.traces)
    with pytest.raises(ReportError):
        layer_report(pair.conventional.traces, pair.event.traces[:2])
    with pytest.raises(ReportError):
        layer_report([], [])


def test_layer_report_files(tmp_path, demo, moving_video):
    pair = run_pair(demo, moving_video[:5], BASE)
    rep = layer_report(pair.conventional.traces, pair.event.traces)
    write_layer_report(rep, tmp_path)
    assert (tmp_path / "layer_report.csv").read_text().startswith("depth,layer,kind,group")
    assert len((tmp_path / "layer_timeseries.csv").read_text().splitlines()) == 6
    doc = json.loads((tmp_path / "layer_report.json").read_text())
    assert set(doc["group_mean_ratio"]) == {"shallow", "middle", "deep"}


def test_spike_frames_rule():
    from evnet.experiments import LayerReport
    series = [{"frame": i, "total_ops": v} for i, v in enumerate([1000, 10, 10, 40, 10])]
    assert LayerReport([], series, {}).spike_frames() == [3]


@pytest.fixture(scope="module")
def moving_report(demo, moving_video):
    pair = run_pair(demo, moving_video, BASE)
    return layer_report(pair.conventional.traces, pair.event.traces)


@pytest.mark.xfail(strict=True, reason="random-weight demo: per-layer cost ratio rises with depth "
                                       "because receptive fields spread each change; see decisions ledger")
def test_deep_layers_cheaper_than_shallow(moving_report):
    assert moving_report.group_means["deep"] <= moving_report.group_means["shallow"]


@pytest.mark.xfail(strict=True, reason="sprite reversals shorten the per-frame displacement, so cost "
                                       "dips rather than spikes; see decisions ledger")
def test_reversal_frames_spike(moving_report):
    rev = reversal_frames(preset("moving_sprite"))
    assert rev and set(rev) <= set(moving_report.spike_frames())


def test_ablation_diverges_on_drift(demo):
    video = scene_generate(preset("drift_sprite"), seed=0)
    memory, ablated = final_error_divergence(demo, video, 0.05)
    assert ablated > memory > 0
