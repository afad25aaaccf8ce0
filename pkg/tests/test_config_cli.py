import json
import os

import pytest

from divelab import cli
from divelab.config import DEFAULTS, THREADS_ENV, RunConfig
from divelab.errors import ConfigError, DependencyError
from divelab.pipeline import LockError, Run, output_lock, run_stage


class TestConfig:
    def test_defaults_valid(self):
        cfg = RunConfig.from_dict({})
        assert cfg["diffusion"]["T"] == 1000
        assert cfg.guidance_config().gamma is None

    def test_unknown_key_path(self):
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict({"guidance": {"gama": 1.0}})
        assert err.value.key_path == "guidance.gama"

    def test_validation_names_section(self):
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict({"subject": {"subcluster_angle": 200.0}})
        assert err.value.key_path.startswith("subject")
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict({"guidance": {"steps": 2000}})
        assert err.value.key_path == "guidance.steps"
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict({"diffusion": {"beta_end": 2.0}})
        assert err.value.key_path == "diffusion"

    def test_hash_tracks_content(self):
        a, b = RunConfig.from_dict({}), RunConfig.from_dict({})
        assert a.config_hash() == b.config_hash()
        b.override("guidance.gamma", 130.0)
        assert a.config_hash() != b.config_hash()
        c = RunConfig.from_dict({"seed": 3})
        assert c.config_hash() != a.config_hash()

    def test_override_unknown(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({}).override("guidance.nope", 1)

    def test_subclusters_replaced(self):
        cfg = RunConfig.from_dict({"subject": {"subclusters": {"place": 3}}})
        assert cfg["subject"]["subclusters"] == {"place": 3}
        assert DEFAULTS["subject"]["subclusters"] == {"food": 2}

    def test_threads(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert RunConfig.from_dict({}).resolved_threads() == 1
        monkeypatch.setenv(THREADS_ENV, "3")
        assert RunConfig.from_dict({}).resolved_threads() == 3
        assert RunConfig.from_dict({"threads": 2}).resolved_threads() == 2

    def test_load_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 5, "world": {"n_images": 100}}))
        cfg = RunConfig.load(p)
        assert cfg.seed == 5 and cfg["world"]["n_images"] == 100
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            RunConfig.load(p)
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "missing.json")


class TestCLI:
    def test_config_error_exit(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"world": {"bogus": 1}}))
        assert cli.main(["world-gen", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
        assert "world.bogus" in capsys.readouterr().err

    def test_missing_upstream_exit(self, tmp_path, capsys):
        assert cli.main(["fit-encoder", "--out", str(tmp_path / "o")]) == 4
        assert "missing" in capsys.readouterr().err

    def test_bad_seed(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["world-gen", "--seed", str(2**64)])
        assert err.value.code == 2

    def test_lock(self, tmp_path):
        out = str(tmp_path / "o")
        with output_lock(out):
            with pytest.raises(LockError):
                with output_lock(out):
                    pass
            assert cli.main(["world-gen", "--out", out]) == 5
        assert not os.path.exists(os.path.join(out, ".lock"))

    def test_dependency_error_names_path(self, tmp_path):
        run = Run(RunConfig.from_dict({}), str(tmp_path))
        with pytest.raises(DependencyError) as err:
            run_stage(run, "subject-sim")
        assert "world" in err.value.path
