import json
import logging
import os

import numpy as np
import pytest

import sslgrader.cli as cli
from sslgrader.cli import (
    RunConfig,
    UsageError,
    _parse_counts,
    build_parser,
    main,
    make_run_dir,
    resolve_config,
)
from sslgrader.data import read_manifest, write_image

# miniature architecture shared by every training invocation below
TINY_FLAGS = ["--input-size", "16", "--stem-channels", "2", "--channels", "2,4",
              "--head-hidden", "8"]


def _only_run(base, command):
    dirs = [p for p in base.iterdir() if p.name.startswith(f"{command}-")]
    assert len(dirs) == 1, f"expected one {command} run dir, found {dirs}"
    return dirs[0]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth -> split -> pretrain -> transfer chain reused read-only."""
    base = tmp_path_factory.mktemp("cli-runs")
    out = ["--out-base", str(base)]

    assert main(out + ["synth-data", "--per-class", "2", "--target-size", "16",
                       "--seed", "1"]) == 0
    raw_manifest = _only_run(base, "synth-data") / "manifest.csv"

    assert main(out + ["split", "--manifest", str(raw_manifest)]) == 0
    manifest = _only_run(base, "split") / "manifest.csv"

    assert main(out + ["pretrain", "--manifest", str(manifest), "--split", "all",
                       "--pretext-epochs", "1"] + TINY_FLAGS) == 0
    pretrain_dir = _only_run(base, "pretrain")

    assert main(out + ["transfer", "--checkpoint", str(pretrain_dir / "cae.ckpt"),
                       "--transfer-levels", "21"] + TINY_FLAGS) == 0
    init_ckpt = _only_run(base, "transfer") / "classifier-init.ckpt"

    assert main(out + ["finetune", "--manifest", str(manifest),
                       "--checkpoint", str(init_ckpt), "--downstream-epochs", "1",
                       "--downstream-lr", "0.01"] + TINY_FLAGS) == 0
    clf_ckpt = _only_run(base, "finetune") / "classifier.ckpt"

    return {"base": base, "out": out, "manifest": manifest,
            "cae_ckpt": pretrain_dir / "cae.ckpt", "pretrain_dir": pretrain_dir,
            "init_ckpt": init_ckpt, "clf_ckpt": clf_ckpt}


class TestConfigResolution:
    def _resolve(self, argv):
        return resolve_config(build_parser().parse_args(argv))

    def test_defaults(self):
        cfg = self._resolve(["synth-data"])
        assert cfg == RunConfig()
        assert (cfg.patch_size, cfg.overlap, cfg.target_size) == (512, 0.5, 128)
        assert (cfg.pretext_lr, cfg.pretext_batch_size) == (5e-4, 16)
        assert (cfg.downstream_lr, cfg.transfer_levels) == (0.5, 29)

    def test_file_overrides_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 5, "pretext_lr": 1e-3}))
        cfg = self._resolve(["--config", str(path), "synth-data"])
        assert cfg.seed == 5 and cfg.pretext_lr == 1e-3
        assert cfg.patch_size == 512  # untouched default

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 5}))
        cfg = self._resolve(["--config", str(path), "synth-data", "--seed", "7"])
        assert cfg.seed == 7

    def test_file_values_are_cast(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": "12", "overlap": "0.25"}))
        cfg = self._resolve(["--config", str(path), "synth-data"])
        assert cfg.seed == 12 and cfg.overlap == 0.25

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"learning_rate": 1.0}))
        with pytest.raises(UsageError, match="unknown config keys.*learning_rate"):
            self._resolve(["--config", str(path), "synth-data"])

    def test_uncastable_value_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": "twelve"}))
        with pytest.raises(UsageError, match="bad config value"):
            self._resolve(["--config", str(path), "synth-data"])

    def test_counts_parsing(self):
        assert _parse_counts("8") == (8, 8, 8, 8)
        assert _parse_counts("1,2,3,4") == (1, 2, 3, 4)
        for bad in ("x", "1,2", "1,2,3,4,5"):
            with pytest.raises(UsageError):
                _parse_counts(bad)


class TestExitCodes:
    def test_bad_flag_value_is_usage(self, tmp_path, capsys):
        rc = main(["--out-base", str(tmp_path), "synth-data", "--seed", "abc"])
        assert rc == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_subcommand_is_usage(self, tmp_path, capsys):
        assert main(["--out-base", str(tmp_path)]) == 1

    def test_missing_config_file_is_data_error(self, tmp_path, capsys):
        rc = main(["--out-base", str(tmp_path), "--config",
                   str(tmp_path / "absent.json"), "synth-data"])
        assert rc == 2
        assert "config file not found" in capsys.readouterr().err

    def test_invalid_config_json_is_usage(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        rc = main(["--out-base", str(tmp_path), "--config", str(path), "synth-data"])
        assert rc == 1

    def test_missing_checkpoint_is_data_error(self, workspace, capsys):
        rc = main(workspace["out"] + [
            "eval", "--manifest", str(workspace["manifest"]),
            "--checkpoint", str(workspace["base"] / "absent.ckpt")] + TINY_FLAGS)
        assert rc == 2
        assert "absent.ckpt" in capsys.readouterr().err

    def test_wrong_checkpoint_kind_is_data_error(self, workspace, capsys):
        # an autoencoder checkpoint has no head entries, so loading it into
        # a classifier must fail as a data problem, not a crash
        rc = main(workspace["out"] + [
            "finetune", "--manifest", str(workspace["manifest"]),
            "--checkpoint", str(workspace["cae_ckpt"]),
            "--downstream-epochs", "1"] + TINY_FLAGS)
        assert rc == 2

    def test_divergence_is_numeric_failure(self, workspace, capsys):
        with np.errstate(over="ignore", invalid="ignore"):
            rc = main(workspace["out"] + [
                "pretrain", "--manifest", str(workspace["manifest"]),
                "--split", "all", "--pretext-lr", "1e12",
                "--pretext-epochs", "3"] + TINY_FLAGS)
        assert rc == 3
        assert "numeric failure" in capsys.readouterr().err

    def test_pipeline_without_source_is_usage(self, tmp_path, capsys):
        rc = main(["--out-base", str(tmp_path), "pipeline"])
        assert rc == 1
        assert "--synthetic" in capsys.readouterr().err


class TestRunDirs:
    def test_name_and_no_reuse(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli.time, "strftime", lambda fmt: "20260101-000000")
        first = make_run_dir(tmp_path, "eval", 7)
        second = make_run_dir(tmp_path, "eval", 7)
        assert first.name == "eval-20260101-000000-s7"
        assert second.name == "eval-20260101-000000-s7-1"
        assert first.is_dir() and second.is_dir()

    def test_config_snapshot_reusable(self, tmp_path):
        rc = main(["--out-base", str(tmp_path / "a"), "synth-data",
                   "--per-class", "1", "--target-size", "16", "--seed", "3"])
        assert rc == 0
        snapshot = _only_run(tmp_path / "a", "synth-data") / "config.json"
        saved = json.loads(snapshot.read_text())
        assert saved["seed"] == 3 and saved["target_size"] == 16

        rc = main(["--out-base", str(tmp_path / "b"), "--config", str(snapshot),
                   "synth-data", "--per-class", "1"])
        assert rc == 0
        again = json.loads(
            (_only_run(tmp_path / "b", "synth-data") / "config.json").read_text())
        assert again == saved

    def test_log_file_written_and_handler_detached(self, tmp_path):
        before = list(logging.getLogger("sslgrader").handlers)
        rc = main(["--out-base", str(tmp_path), "synth-data", "--per-class", "1",
                   "--target-size", "16"])
        assert rc == 0
        run_dir = _only_run(tmp_path, "synth-data")
        assert "synthesized" in (run_dir / "run.log").read_text()
        assert logging.getLogger("sslgrader").handlers == before


class TestThreadCap:
    def test_env_applied(self, monkeypatch):
        monkeypatch.setenv(cli.THREAD_ENV, "2")
        for var in cli._BLAS_VARS:
            monkeypatch.delenv(var, raising=False)
        cli._cap_threads()
        assert all(os.environ[var] == "2" for var in cli._BLAS_VARS)

    def test_absent_env_leaves_vars(self, monkeypatch):
        monkeypatch.delenv(cli.THREAD_ENV, raising=False)
        for var in cli._BLAS_VARS:
            monkeypatch.delenv(var, raising=False)
        cli._cap_threads()
        assert all(var not in os.environ for var in cli._BLAS_VARS)


class TestStages:
    def test_synth_data_artifacts(self, tmp_path):
        rc = main(["--out-base", str(tmp_path), "synth-data", "--per-class", "2",
                   "--target-size", "16", "--seed", "1"])
        assert rc == 0
        run_dir = _only_run(tmp_path, "synth-data")
        records = read_manifest(run_dir / "manifest.csv")
        assert len(records) == 8
        assert sorted({int(r.label) for r in records}) == [0, 1, 2, 3]
        assert len(list((run_dir / "patches").glob("*.png"))) == 8

    def test_patchify_canonical_count(self, tmp_path):
        image = np.random.default_rng(0).integers(0, 256, (1024, 1024, 3),
                                                  dtype=np.uint8)
        src = tmp_path / "slide.png"
        write_image(image, src)
        rc = main(["--out-base", str(tmp_path / "runs"), "patchify",
                   "--input", str(src), "--target-size", "16"])
        assert rc == 0
        run_dir = _only_run(tmp_path / "runs", "patchify")
        records = read_manifest(run_dir / "manifest.csv")
        assert len(records) == 9
        assert len(list((run_dir / "patches").glob("*.png"))) == 9

    def test_patchify_empty_dir_is_data_error(self, tmp_path, capsys):
        (tmp_path / "imgs").mkdir()
        rc = main(["--out-base", str(tmp_path / "runs"), "patchify",
                   "--input", str(tmp_path / "imgs")])
        assert rc == 2

    def test_split_assigns_and_keeps_test_rows(self, workspace, tmp_path):
        records = read_manifest(workspace["manifest"])
        assert {r.split for r in records} == {"train", "val"}
        per_class_train = sum(1 for r in records
                              if r.split == "train" and int(r.label) == 0)
        assert per_class_train == 1  # floor(0.8 * 2)

    def test_pretrain_artifacts(self, workspace):
        history = (workspace["pretrain_dir"] / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,val_loss,val_accuracy"
        assert len(history) == 2
        assert workspace["cae_ckpt"].stat().st_size > 0

    def test_eval_artifacts(self, workspace, tmp_path):
        rc = main(["--out-base", str(tmp_path)] + [
            "eval", "--manifest", str(workspace["manifest"]),
            "--checkpoint", str(workspace["clf_ckpt"])] + TINY_FLAGS)
        assert rc == 0
        run_dir = _only_run(tmp_path, "eval")
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert sorted(metrics) == ["accuracy", "confusion", "f1_macro",
                                   "f1_per_class", "kappa_quadratic"]
        assert sum(sum(row) for row in metrics["confusion"]) == 4  # val rows

    def test_embed_artifacts(self, workspace, tmp_path):
        # 8 embedded points cap the usable perplexity at 7/3, so asking for
        # 5 must clamp with a warning rather than fail
        with pytest.warns(UserWarning, match="clamped"):
            rc = main(["--out-base", str(tmp_path)] + [
                "embed", "--manifest", str(workspace["manifest"]),
                "--checkpoint", str(workspace["clf_ckpt"]), "--split", "all",
                "--perplexity", "5", "--tsne-iterations", "5"] + TINY_FLAGS)
        assert rc == 0
        run_dir = _only_run(tmp_path, "embed")
        emb = (run_dir / "embedding.csv").read_text().splitlines()
        assert emb[0] == "x,y,label"
        assert len(emb) == 9
        assert all(line.endswith(("NC", "G3", "G4", "G5")) for line in emb[1:])
        kl = (run_dir / "kl_history.csv").read_text().splitlines()
        assert kl[0] == "iteration,kl" and len(kl) == 6

    def test_pipeline_synthetic_end_to_end(self, tmp_path):
        import warnings as w
        with w.catch_warnings():
            w.simplefilter("ignore")
            rc = main(["--out-base", str(tmp_path), "pipeline", "--synthetic", "2",
                       "--target-size", "16", "--pretext-epochs", "1",
                       "--downstream-epochs", "1", "--downstream-lr", "0.01",
                       "--transfer-levels", "21", "--perplexity", "2",
                       "--tsne-iterations", "5"] + TINY_FLAGS)
        assert rc == 0
        run_dir = _only_run(tmp_path, "pipeline")
        for name in ("data", "split", "pretrain", "transfer", "finetune",
                     "eval", "embed"):
            assert (run_dir / name).is_dir()
        assert (run_dir / "eval" / "metrics.json").is_file()
        assert (run_dir / "embed" / "embedding.csv").is_file()

    def test_pipeline_ingests_folder_layout(self, tmp_path):
        rng = np.random.default_rng(5)
        for grade in ("NC", "G3", "G4", "G5"):
            for i in range(2):
                path = tmp_path / "ds" / grade / f"{grade.lower()}{i}.png"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_image(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), path)
        import warnings as w
        with w.catch_warnings():
            w.simplefilter("ignore")
            rc = main(["--out-base", str(tmp_path / "runs"), "pipeline",
                       "--sicap-dir", str(tmp_path / "ds"), "--pretext-epochs", "1",
                       "--downstream-epochs", "1", "--downstream-lr", "0.01",
                       "--transfer-levels", "21", "--perplexity", "2",
                       "--tsne-iterations", "5"] + TINY_FLAGS)
        assert rc == 0
        run_dir = _only_run(tmp_path / "runs", "pipeline")
        records = read_manifest(run_dir / "data" / "manifest.csv")
        assert len(records) == 8