import json
import os
from pathlib import Path

import pytest
import yaml

from dltsim.cli import main


def _write(path: Path, data) -> str:
    with open(path, "w") as f:
        yaml.safe_dump(data, f)
    return str(path)


@pytest.fixture
def inputs(tmp_path):
    model = _write(tmp_path / "model.yaml", {
        "name": "toy", "num_layers": 4, "hidden_size": 128,
        "seq_len": 64, "vocab_size": 512, "dtype": "bf16"})
    cluster = _write(tmp_path / "cluster.yaml", {
        "hosts": 1, "devices_per_host": 4,
        "device_memory_bytes": 2 * 2**30, "device": "fast"})
    config = _write(tmp_path / "config.yaml", {
        "tp": 2, "pp": 2, "micro_mult": 2, "virtual_stages": 1,
        "act_recompute": False, "seq_parallel": False,
        "dist_optimizer": False, "global_batch": 8})
    return {"model": model, "cluster": cluster, "config": config,
            "dir": tmp_path}


def _read_tree(out: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.is_file()}


class TestGenerate:
    def test_writes_trace_files(self, inputs, capsys):
        out = inputs["dir"] / "gen"
        rc = main(["generate", "--model", inputs["model"], "--cluster",
                   inputs["cluster"], "--config", inputs["config"],
                   "--out", str(out)])
        assert rc == 0
        files = sorted(p.name for p in out.iterdir())
        assert "job.manifest" in files
        assert "rank_0.trace" in files and "rank_2.trace" in files
        assert "unique workers: 2 of 4" in capsys.readouterr().out

    def test_invalid_config_names_knob(self, inputs, tmp_path, capsys):
        bad = _write(tmp_path / "bad.yaml", {"tp": 3, "global_batch": 8})
        rc = main(["generate", "--model", inputs["model"], "--cluster",
                   inputs["cluster"], "--config", bad,
                   "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "tp" in capsys.readouterr().err

    def test_same_seed_identical_files(self, inputs):
        out1, out2 = inputs["dir"] / "g1", inputs["dir"] / "g2"
        for out in (out1, out2):
            assert main(["generate", "--model", inputs["model"], "--cluster",
                         inputs["cluster"], "--config", inputs["config"],
                         "--seed", "11", "--out", str(out)]) == 0
        assert _read_tree(out1) == _read_tree(out2)


class TestCollate:
    def test_collate_generated_traces(self, inputs, capsys):
        gen = inputs["dir"] / "gen"
        main(["generate", "--model", inputs["model"], "--cluster",
              inputs["cluster"], "--config", inputs["config"], "--out", str(gen)])
        out = inputs["dir"] / "job"
        rc = main(["collate", "--cluster", inputs["cluster"],
                   "--traces", str(gen), "--out", str(out)])
        assert rc == 0
        assert (out / "job.manifest").exists()
        assert "collated 4 ranks" in capsys.readouterr().out

    def test_collate_plain_trace_dir(self, inputs, capsys):
        # post-hoc path: bare rank files without a manifest
        gen = inputs["dir"] / "gen"
        main(["generate", "--model", inputs["model"], "--cluster",
              inputs["cluster"], "--config", inputs["config"], "--out", str(gen)])
        bare = inputs["dir"] / "bare"
        bare.mkdir()
        # a dp=1, pp=1 single-worker job: its one trace covers rank 0 only
        cluster1 = _write(inputs["dir"] / "c1.yaml", {
            "hosts": 1, "devices_per_host": 1,
            "device_memory_bytes": 2 * 2**30, "device": "fast"})
        cfg1 = _write(inputs["dir"] / "cfg1.yaml", {"global_batch": 4})
        g1 = inputs["dir"] / "g1only"
        main(["generate", "--model", inputs["model"], "--cluster", cluster1,
              "--config", cfg1, "--out", str(g1)])
        os.remove(g1 / "job.manifest")
        rc = main(["collate", "--cluster", cluster1, "--traces", str(g1),
                   "--out", str(inputs["dir"] / "job1")])
        assert rc == 0


class TestPredict:
    def _predict(self, inputs, out, extra=()):
        return main(["predict", "--model", inputs["model"], "--cluster",
                     inputs["cluster"], "--config", inputs["config"],
                     "--out", str(out), *extra])

    def test_report_files(self, inputs, capsys):
        out = inputs["dir"] / "pred"
        assert self._predict(inputs, out) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["total_ns"] > 0
        assert report["oom"] is False
        assert 0 < report["mfu"] < 1
        assert (out / "summary.txt").exists()
        timeline = json.loads((out / "timeline.json").read_text())
        assert timeline["traceEvents"]

    def test_oom_config_still_exits_zero(self, inputs, tmp_path, capsys):
        small = _write(tmp_path / "small_cluster.yaml", {
            "hosts": 1, "devices_per_host": 4,
            "device_memory_bytes": 2 * 2**20, "device": "fast"})
        out = tmp_path / "pred_oom"
        rc = main(["predict", "--model", inputs["model"], "--cluster", small,
                   "--config", inputs["config"], "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["oom"] is True and report["mfu"] is None

    def test_determinism_byte_identical(self, inputs):
        out1, out2 = inputs["dir"] / "p1", inputs["dir"] / "p2"
        assert self._predict(inputs, out1, ("--seed", "5")) == 0
        assert self._predict(inputs, out2, ("--seed", "5")) == 0
        assert _read_tree(out1) == _read_tree(out2)

    def test_table_estimator_round_trips_oracle(self, inputs, tmp_path):
        # build a profile table from the roofline oracle over this workload,
        # then predictions through the table must match roofline predictions
        from dltsim.cluster import load_cluster
        from dltsim.estimate import ProfileTable, RooflineEstimator
        from dltsim.workload import (ScheduleKind, load_config, load_model,
                                     generate_representatives,
                                     profile_mode_annotate)
        model = load_model(inputs["model"])
        cluster = load_cluster(inputs["cluster"])
        config = load_config(inputs["config"])
        est = RooflineEstimator()
        traces, _ = generate_representatives(model, config, cluster,
                                             ScheduleKind.ONE_F_ONE_B)
        table = ProfileTable()
        for tr in traces:
            rows = profile_mode_annotate(
                tr, lambda op, a: est.estimate_kernel(op, a, cluster.device),
                cluster.device.name)
            for row in rows.rows:
                table.add(row)
        tpath = tmp_path / "oracle.table"
        table.save(str(tpath))

        out_roof = tmp_path / "roof"
        out_table = tmp_path / "table"
        assert self._predict(inputs, out_roof) == 0
        assert self._predict(inputs, out_table, ("--estimator", f"table:{tpath}")) == 0
        roof = json.loads((out_roof / "report.json").read_text())
        tab = json.loads((out_table / "report.json").read_text())
        assert roof["total_ns"] == tab["total_ns"]

    def test_single_device_time_is_serial_sum(self, inputs, tmp_path):
        from listsched import list_schedule_total
        from dltsim.cluster import load_cluster
        from dltsim.estimate import RooflineEstimator, kernel_view
        from dltsim.workload import (ScheduleKind, generate_trace, load_config,
                                     load_model)
        cluster1 = _write(tmp_path / "c1.yaml", {
            "hosts": 1, "devices_per_host": 1,
            "device_memory_bytes": 2 * 2**30, "device": "fast"})
        cfg1 = _write(tmp_path / "cfg1.yaml", {"global_batch": 4})
        out = tmp_path / "p1dev"
        rc = main(["predict", "--model", inputs["model"], "--cluster", cluster1,
                   "--config", cfg1, "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())

        model = load_model(inputs["model"])
        cluster = load_cluster(cluster1)
        trace = generate_trace(model, load_config(cfg1), cluster,
                               ScheduleKind.ONE_F_ONE_B, 0)
        est = RooflineEstimator()
        durations = {}
        for seq, ev in enumerate(trace.events):
            view = kernel_view(ev)
            if view is not None:
                durations[seq] = est.estimate_kernel(*view, cluster.device)
        assert report["total_ns"] == list_schedule_total(trace, durations)

    def test_usage_error_exit_one(self, capsys):
        assert main(["predict", "--model", "x"]) == 1

    def test_missing_file_exit_two(self, inputs, capsys):
        rc = main(["predict", "--model", "nope.yaml", "--cluster",
                   inputs["cluster"], "--config", inputs["config"],
                   "--out", str(inputs["dir"] / "x")])
        assert rc == 1  # flagged before any stage runs


class TestSearch:
    def _spec(self, tmp_path, **over):
        data = {
            "knobs": {"tp": [1, 2], "pp": [1, 2], "micro_mult": [1],
                      "virtual_stages": [1], "act_recompute": [False],
                      "seq_parallel": [False], "dist_optimizer": [False]},
            "global_batch": 8,
            "dispatch_overhead_ns": 0,
        }
        data.update(over)
        return _write(tmp_path / "search.yaml", data)

    def test_three_point_space_three_rows(self, inputs, tmp_path, capsys):
        spec = self._spec(tmp_path, knobs={
            "tp": [1, 2, 4], "pp": [1], "micro_mult": [1], "virtual_stages": [1],
            "act_recompute": [False], "seq_parallel": [False],
            "dist_optimizer": [False]})
        out = tmp_path / "s"
        rc = main(["search", "--model", inputs["model"], "--cluster",
                   inputs["cluster"], "--search-spec", spec, "--out", str(out)])
        assert rc == 0
        data = json.loads((out / "ranked.json").read_text())
        assert len(data["trials"]) == 3
        assert all(t["status"] == "completed" for t in data["trials"])
        assert (out / "ranked.txt").exists()
        assert (out / "time_distribution.svg").exists()
        assert (out / "mfu_vs_config.svg").exists()

    def test_no_tactics_same_best(self, inputs, tmp_path):
        spec = self._spec(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        main(["search", "--model", inputs["model"], "--cluster", inputs["cluster"],
              "--search-spec", spec, "--out", str(a)])
        main(["search", "--model", inputs["model"], "--cluster", inputs["cluster"],
              "--search-spec", spec, "--no-tactics", "--out", str(b)])
        ra = json.loads((a / "ranked.json").read_text())
        rb = json.loads((b / "ranked.json").read_text())
        assert ra["trials"][0]["config"] == rb["trials"][0]["config"]

    def test_search_byte_identical_across_runs(self, inputs, tmp_path):
        spec = self._spec(tmp_path, strategy="random")
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            rc = main(["search", "--model", inputs["model"], "--cluster",
                       inputs["cluster"], "--search-spec", spec,
                       "--strategy", "random", "--seed", "7", "--out", str(out)])
            assert rc == 0
        assert _read_tree(out1) == _read_tree(out2)
