import pytest

from models.config import RunConfig, apply_env, emit_config, load_config, parse_config
from models.errors import ConfigError
from models.optim import cosine_lr


class TestParse:
    """ key = value config text """

    def test_emit_parse_fixpoint(self):
        cfg = RunConfig(seed=4, gate_mode="soft", attention_preset="c", use_frequency=False, train_kinds="haze,low_light")
        text = emit_config(cfg)
        assert parse_config(text).model_dump() == cfg.model_dump()
        assert emit_config(parse_config(text)) == text

    def test_lines_follow_field_order(self):
        lines = emit_config(RunConfig()).splitlines()
        assert lines[0] == "base_channels = 16"
        assert "use_decision_units = true" in lines
        assert len(lines) == len(RunConfig.model_fields)

    def test_comments_and_partial_files(self):
        cfg = parse_config("# tiny run\n\nN_stages = 4\nbase_channels = 8\n# end\n")
        assert (cfg.N_stages, cfg.base_channels, cfg.total_steps) == (4, 8, 500)

    @pytest.mark.parametrize("text", [
        "colour = red\n",
        "N_stages = zero\n",
        "seed\n",
        "patch_size = 12\n",
        "train_kinds = snow\n",
        "gate_mode = maybe\n",
        "workers = 2\n",
        "eval_manifest = corpus/manifest.csv\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestLoad:
    """ File, overrides and environment """

    def test_seed_from_environment(self):
        assert apply_env(RunConfig(seed=1), {"D3NET_SEED": "42"}).seed == 42
        assert apply_env(RunConfig(seed=1), {}).seed == 1

    def test_bad_environment_seed(self):
        with pytest.raises(ConfigError):
            apply_env(RunConfig(), {"D3NET_SEED": "abc"})

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 5\ntotal_steps = 20\nbatch_size = 2\n")
        cfg = load_config(path, environ={"D3NET_SEED": "9"}, total_steps=3, batch_size=None)
        assert (cfg.seed, cfg.total_steps, cfg.batch_size) == (9, 3, 2)

    def test_defaults_without_file(self):
        assert load_config(environ={}).model_dump() == RunConfig().model_dump()


class TestCosineLR:
    """ Cosine-annealed learning rate """

    def test_endpoints(self):
        assert cosine_lr(0, 100) == 1e-4
        assert cosine_lr(100, 100) == 1e-6

    def test_midpoint(self):
        assert cosine_lr(50, 100) == pytest.approx(5.05e-5, rel=1e-12)

    def test_monotone(self):
        values = [cosine_lr(s, 40) for s in range(41)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10)
