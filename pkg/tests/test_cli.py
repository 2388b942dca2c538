import json

import pytest

from tsdet.cli import main, parse_and_validate, parse_grid_spec
from tsdet.errors import ValidationError


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture()
def fast_config(tmp_path):
    cfg = {
        "train": {"max_epochs": 4},
        "world": {
            "clutter_rate": 0.5,
        },
    }
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return p


class TestParseAndValidate:
    def test_policy_flags(self, tmp_path):
        cfg, _ = parse_and_validate([
            "--work-dir", str(tmp_path), "--policy", "progressive",
            "--tau-l", "0.9", "--tau-h", "1.0", "gen", "--images", "1"])
        p = cfg.policy()
        assert (p.variant, p.tau_l, p.tau_h) == ("progressive", 0.9, 1.0)

    def test_bad_tau_ordering_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            parse_and_validate([
                "--work-dir", str(tmp_path), "--policy", "doubt",
                "--tau-l", "0.99", "--tau-h", "0.9", "gen", "--images", "1"])

    def test_unknown_flag_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            parse_and_validate(["--work-dir", str(tmp_path), "--frobnicate", "gen",
                                "--images", "1"])

    def test_flag_overrides_config_file(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"seed": 5, "nms_iou": 0.4}))
        cfg, _ = parse_and_validate([
            "--config", str(conf), "--work-dir", str(tmp_path), "--seed", "9",
            "gen", "--images", "1"])
        assert cfg.seed == 9          # flag wins
        assert cfg.nms_iou == 0.4     # config file value survives
        assert cfg.train.seed == 9

    def test_conflicting_detector_sources(self, tmp_path):
        with pytest.raises(ValidationError, match="conflicting detector sources"):
            parse_and_validate([
                "--work-dir", str(tmp_path), "--detector", "reference",
                "--backend-cmd", "python3 x.py", "gen", "--images", "1"])

    def test_backend_requires_command(self, tmp_path):
        with pytest.raises(ValidationError, match="requires --backend-cmd"):
            parse_and_validate([
                "--work-dir", str(tmp_path), "--detector", "backend",
                "gen", "--images", "1"])

    def test_work_dir_required(self):
        with pytest.raises(ValidationError, match="work-dir"):
            parse_and_validate(["gen", "--images", "1"])


class TestGridSpec:
    def test_parse_mixed_points(self):
        grid = parse_grid_spec("single::0.9;doubt:0.5:0.9;progressive:0.9:1.0")
        assert [(g.variant, g.tau_l, g.tau_h) for g in grid] == [
            ("single", 0.0, 0.9), ("doubt", 0.5, 0.9), ("progressive", 0.9, 1.0)]

    def test_bad_point_rejected(self):
        with pytest.raises(ValidationError):
            parse_grid_spec("doubt:0.5")

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            parse_grid_spec(" ; ")


class TestEndToEnd:
    def test_gen_writes_dataset_and_echo(self, tmp_path):
        rc = run_cli("--work-dir", str(tmp_path), "--seed", "3", "gen", "--images", "5")
        assert rc == 0
        manifest = tmp_path / "data" / "manifest.json"
        assert manifest.exists()
        assert (tmp_path / "effective_config.json").exists()
        from tsdet.annotations import load_manifest
        assert len(load_manifest(manifest)) == 5

    def test_gen_deterministic_across_runs(self, tmp_path):
        rc1 = run_cli("--work-dir", str(tmp_path / "a"), "--seed", "3", "gen", "--images", "3")
        rc2 = run_cli("--work-dir", str(tmp_path / "b"), "--seed", "3", "gen", "--images", "3")
        assert rc1 == rc2 == 0
        a = (tmp_path / "a" / "data" / "manifest.json").read_text()
        b = (tmp_path / "b" / "data" / "manifest.json").read_text()
        assert a == b

    def test_echo_round_trips_as_config(self, tmp_path):
        run_cli("--work-dir", str(tmp_path), "--seed", "3", "--policy", "doubt",
                "--tau-l", "0.5", "--tau-h", "0.9", "gen", "--images", "1")
        echo = tmp_path / "effective_config.json"
        cfg, _ = parse_and_validate(["--config", str(echo), "gen", "--images", "1"])
        assert cfg.seed == 3
        assert cfg.policy().variant == "doubt"

    def test_full_small_run(self, tmp_path, fast_config):
        wd = tmp_path / "wd"
        steps = [
            ("gen labeled", ["gen", "--images", "12", "--subdir", "lab"]),
            ("gen unlabeled", ["gen", "--images", "8", "--subdir", "unl", "--unlabeled"]),
            ("gen val", ["gen", "--images", "6", "--subdir", "val"]),
        ]
        seeds = {"gen labeled": "1", "gen unlabeled": "2", "gen val": "3"}
        for name, args in steps:
            rc = run_cli("--config", str(fast_config), "--work-dir", str(wd),
                         "--seed", seeds[name], *args)
            assert rc == 0, name
        lab = wd / "lab" / "manifest.json"
        unl = wd / "unl" / "manifest.json"
        val = wd / "val" / "manifest.json"

        rc = run_cli("--config", str(fast_config), "--work-dir", str(wd), "teacher",
                     "--labeled", str(lab), "--val", str(val))
        assert rc == 0
        assert (wd / "teacher.ckpt").exists()
        assert (wd / "eval_teacher.report").exists()

        rc = run_cli("--config", str(fast_config), "--work-dir", str(wd), "pseudo",
                     "--model", str(wd / "teacher.ckpt"), "--unlabeled", str(unl))
        assert rc == 0
        assert (wd / "pseudo.manifest").exists()

        rc = run_cli("--config", str(fast_config), "--work-dir", str(wd),
                     "--policy", "doubt", "--tau-l", "0.3", "--tau-h", "0.6", "student",
                     "--labeled", str(lab), "--pseudo", str(wd / "pseudo.manifest"),
                     "--val", str(val))
        assert rc == 0
        assert (wd / "student.ckpt").exists()

        rc = run_cli("--config", str(fast_config), "--work-dir", str(wd), "finetune",
                     "--model", str(wd / "student.ckpt"), "--labeled", str(lab),
                     "--val", str(val))
        assert rc == 0
        assert (wd / "student_ft.ckpt").exists()
        assert (wd / "finetune_arrow.txt").read_text().count("->") == 1

        rc = run_cli("--config", str(fast_config), "--work-dir", str(wd), "eval",
                     "--model", str(wd / "student_ft.ckpt"), "--manifest", str(val))
        assert rc == 0
        report = json.loads((wd / "eval.report").read_text())
        assert 0.0 <= report["map_50_95"] <= 1.0

    def test_eval_catalog_mismatch_exits_one(self, tmp_path, fast_config):
        wd = tmp_path / "wd"
        run_cli("--work-dir", str(wd), "--seed", "1", "gen", "--images", "3",
                "--subdir", "lab")
        # a checkpoint whose catalog has different names
        from tsdet.detector import DetectorModel
        from tsdet.annotations import ClassCatalog
        model = DetectorModel.new(ClassCatalog.from_names(["cat", "dog", "fish"]))
        model.save(wd / "foreign.ckpt")
        rc = run_cli("--work-dir", str(wd), "eval", "--model", str(wd / "foreign.ckpt"),
                     "--manifest", str(wd / "lab" / "manifest.json"))
        assert rc == 1

    def test_eval_requires_exactly_one_source(self, tmp_path):
        wd = tmp_path / "wd"
        run_cli("--work-dir", str(wd), "--seed", "1", "gen", "--images", "3",
                "--subdir", "lab")
        rc = run_cli("--work-dir", str(wd), "eval",
                     "--manifest", str(wd / "lab" / "manifest.json"))
        assert rc == 1

    def test_missing_manifest_is_runtime_failure(self, tmp_path):
        rc = run_cli("--work-dir", str(tmp_path), "teacher",
                     "--labeled", str(tmp_path / "missing.json"),
                     "--val", str(tmp_path / "missing.json"))
        assert rc == 2

    def test_backend_mode_rejected_for_iterate(self, tmp_path):
        rc = run_cli("--work-dir", str(tmp_path), "--backend-cmd", "python3 x.py",
                     "--policy", "single", "--tau-h", "0.9", "iterate",
                     "--labeled", "a", "--unlabeled", "b", "--val", "c")
        assert rc == 1
