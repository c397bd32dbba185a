import hashlib
import json

import numpy as np
import pytest

from ept import core
from ept.cli import main
from ept.pipeline import PipelineConfig, write_synth_dataset
from ept.videopool import load_video_vector


@pytest.fixture()
def dataset(tmp_path):
    data_dir = tmp_path / "data"
    write_synth_dataset(data_dir, seed=4, videos_per_class=4,
                        trajectories_per_video=12, length=16, dim=8, noise_scale=0.05)
    return data_dir


def run(argv):
    return main([str(a) for a in argv])


class TestStageCommands:
    def test_full_stage_chain(self, tmp_path, dataset):
        vids = sorted(p.stem for p in dataset.glob("*.eptv"))
        norm_dir = tmp_path / "norm"
        desc_dir = tmp_path / "desc"
        fv_dir = tmp_path / "fv"
        vec_dir = tmp_path / "vec"
        for d in (norm_dir, desc_dir, fv_dir, vec_dir):
            d.mkdir()

        for vid in vids:
            assert run(["normalize", "--kind", "in-voxel",
                        "--in", dataset / f"{vid}.eptv",
                        "--out", norm_dir / f"{vid}.eptv"]) == 0
            assert run(["traj-pool", "--kind", "approx-rank", "--direction", "forward",
                        "--window", "1", "--volume", norm_dir / f"{vid}.eptv",
                        "--trajectories", dataset / f"{vid}.eptt",
                        "--out", desc_dir / f"{vid}.eptd"]) == 0

        train_descs = [desc_dir / f"{v}.eptd" for v in vids
                       if core.read_label_table(dataset / "labels.txt")
                       .entries[v].split == "train"]
        model_pca = tmp_path / "pca.eptm"
        model_full = tmp_path / "full.eptm"
        assert run(["fit-pca", "--descriptors", *train_descs, "--dim", "4",
                    "--out", model_pca]) == 0
        assert run(["fit-gmm", "--model", model_pca, "--descriptors", *train_descs,
                    "--components", "2", "--out", model_full]) == 0

        for vid in vids:
            assert run(["encode", "--model", model_full,
                        "--descriptors", desc_dir / f"{vid}.eptd",
                        "--per-frame", "--frames", "16",
                        "--out", fv_dir / f"{vid}.eptq"]) == 0
            assert run(["video-pool", "--method", "hap",
                        "--in", fv_dir / f"{vid}.eptq",
                        "--out", vec_dir / f"{vid}.eptf"]) == 0

        fused = tmp_path / "fused.eptf"
        assert run(["fuse", "--out", fused, vec_dir / f"{vids[0]}.eptf",
                    vec_dir / f"{vids[0]}.eptf"]) == 0
        assert abs(np.linalg.norm(load_video_vector(fused)) - 1.0) < 1e-9

        model_out = tmp_path / "svm.npz"
        assert run(["train", "--c", "100", "--features",
                    *[vec_dir / f"{v}.eptf" for v in vids],
                    "--labels", dataset / "labels.txt", "--model-out", model_out]) == 0

        predictions = tmp_path / "predictions.txt"
        assert run(["predict", "--model", model_out, "--features",
                    *[vec_dir / f"{v}.eptf" for v in vids],
                    "--out", predictions]) == 0
        assert len(predictions.read_text().strip().splitlines()) == len(vids)

        report_prefix = tmp_path / "report"
        assert run(["eval", "--metric", "top1", "--predictions", predictions,
                    "--labels", dataset / "labels.txt", "--out", report_prefix]) == 0
        kv = dict(line.split("=", 1) for line in
                  (tmp_path / "report.kv").read_text().strip().splitlines())
        assert kv["metric"] == "top1"
        assert 0.0 <= float(kv["mean"]) <= 1.0

    def test_encode_aggregate_row(self, tmp_path, dataset):
        vid = sorted(p.stem for p in dataset.glob("*.eptv"))[0]
        desc = tmp_path / "d.eptd"
        assert run(["traj-pool", "--kind", "average", "--volume", dataset / f"{vid}.eptv",
                    "--trajectories", dataset / f"{vid}.eptt", "--out", desc]) == 0
        model_pca = tmp_path / "p.eptm"
        model_full = tmp_path / "m.eptm"
        assert run(["fit-pca", "--descriptors", desc, "--dim", "3",
                    "--out", model_pca]) == 0
        assert run(["fit-gmm", "--model", model_pca, "--descriptors", desc,
                    "--components", "2", "--out", model_full]) == 0
        out = tmp_path / "agg.eptq"
        assert run(["encode", "--model", model_full, "--descriptors", desc,
                    "--out", out]) == 0
        from ept.encode import load_frame_fvs

        assert load_frame_fvs(out).shape == (1, 2 * 2 * 3)


class TestErrors:
    def test_missing_file_exits_nonzero(self, tmp_path, capsys):
        code = run(["normalize", "--kind", "in-voxel",
                    "--in", tmp_path / "absent.eptv", "--out", tmp_path / "o.eptv"])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_run_reports_stage_on_failure(self, tmp_path, dataset, capsys):
        (dataset / "a000.eptt").write_text("#EPT-TRAJ v1 L=16\nbroken\n")
        code = run(["run", "--data-dir", dataset, "--out", tmp_path / "work",
                    "--pca-dim", "4", "--gmm-components", "2"])
        assert code == 1
        err = capsys.readouterr().err
        assert "traj-pool" in err and "a000" in err


class TestRunCommand:
    def test_config_file_and_flag_precedence(self, tmp_path, dataset):
        config_path = tmp_path / "cfg.json"
        config_path.write_text(json.dumps({
            "pooling": "average", "pca_dim": 4, "gmm_components": 2, "metric": "top1",
        }))
        out_dir = tmp_path / "work"
        assert run(["run", "--config", config_path, "--data-dir", dataset,
                    "--out", out_dir, "--pooling", "approx-rank"]) == 0
        written = json.loads((out_dir / "config.json").read_text())
        assert written["pooling"] == "approx-rank"  # flag wins
        assert written["pca_dim"] == 4  # file value kept
        lineage = json.loads((out_dir / "lineage.json").read_text())
        stages = {entry["stage"] for entry in lineage}
        assert {"normalize", "descriptors", "encoder", "frame-fvs",
                "video-vectors", "fused"} <= stages

    def test_deterministic_across_workdirs(self, tmp_path, dataset):
        args = ["run", "--data-dir", dataset, "--pca-dim", "4",
                "--gmm-components", "2", "--seed", "7"]
        assert run(args + ["--out", tmp_path / "w1"]) == 0
        assert run(args + ["--out", tmp_path / "w2"]) == 0
        first = (tmp_path / "w1" / "report.kv").read_text()
        second = (tmp_path / "w2" / "report.kv").read_text()
        assert first == second
        # intermediate artifacts bit-identical too
        for name in ("predictions.txt",):
            a = (tmp_path / "w1" / name).read_bytes()
            b = (tmp_path / "w2" / name).read_bytes()
            assert a == b
        digests = []
        for work in ("w1", "w2"):
            files = sorted((tmp_path / work / "artifacts").rglob("*.eptf"))
            digests.append([hashlib.sha256(f.read_bytes()).hexdigest() for f in files])
        assert digests[0] == digests[1]

    def test_cache_reuse_on_rerun(self, tmp_path, dataset):
        out_dir = tmp_path / "work"
        args = ["run", "--data-dir", dataset, "--out", out_dir,
                "--pca-dim", "4", "--gmm-components", "2"]
        assert run(args) == 0
        first = json.loads((out_dir / "lineage.json").read_text())
        assert not any(e["cache_hit"] for e in first)
        assert run(args) == 0
        second = json.loads((out_dir / "lineage.json").read_text())
        assert all(e["cache_hit"] for e in second)

    def test_train_split_isolation_recorded(self, tmp_path, dataset):
        out_dir = tmp_path / "work"
        assert run(["run", "--data-dir", dataset, "--out", out_dir,
                    "--pca-dim", "4", "--gmm-components", "2"]) == 0
        kv = dict(line.split("=", 1) for line in
                  (out_dir / "report.kv").read_text().strip().splitlines())
        assert kv["train_only_fit"] == "True"
        table = core.read_label_table(dataset / "labels.txt")
        test_ids = set(table.ids("test"))
        lineage = json.loads((out_dir / "lineage.json").read_text())
        for entry in lineage:
            if entry["stage"] == "encoder":
                assert entry["inputs"]
                for path in entry["inputs"]:
                    assert not any(vid in path for vid in test_ids)


class TestSynthCommand:
    def test_data_only_layout(self, tmp_path):
        out = tmp_path / "synth"
        assert run(["synth", "--seed", "1", "--out", out, "--videos-per-class", "2",
                    "--trajectories-per-video", "4", "--dim", "6", "--data-only"]) == 0
        files = sorted(p.name for p in (out / "data").iterdir())
        assert "labels.txt" in files
        assert "a000.eptv" in files and "b001.eptt" in files

    def test_experiment_report_contract(self, tmp_path, capsys):
        out = tmp_path / "exp"
        assert run(["synth", "--seed", "0", "--out", out, "--videos-per-class", "4",
                    "--trajectories-per-video", "16", "--dim", "8",
                    "--components", "2", "--pca-dim", "4"]) == 0
        kv_text = (out / "experiment.kv").read_text()
        assert "pooling=approx-rank" in kv_text and "pooling=average" in kv_text
        assert "config_hash=" in kv_text and "accuracy_gap=" in kv_text
        rank_hash = PipelineConfig.from_sources(overrides={
            "pooling": "approx-rank", "pca_dim": 4, "gmm_components": 2,
            "seed": 0, "metric": "top1"}).config_hash
        assert rank_hash in kv_text


def test_module_entry_point():
    import subprocess
    import sys

    result = subprocess.run([sys.executable, "-m", "ept", "--help"],
                            capture_output=True, text=True)
    assert result.returncode == 0
    for command in ("normalize", "traj-pool", "fit-pca", "fit-gmm", "encode",
                    "video-pool", "fuse", "train", "predict", "eval", "synth", "run"):
        assert command in result.stdout
