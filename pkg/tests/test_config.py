import pytest

from lidarvq.config import ConfigError, RunConfig, dump_config, load_config, parse_config


def test_defaults_build_component_configs():
    cfg = RunConfig()
    assert cfg.grid().shape == (128, 128, 16)
    assert cfg.gen_model().h == 16 and cfg.gen_model().n_codes == cfg.n_codes
    assert cfg.vq_train(3).seed == 3
    assert cfg.sampling(5).T == 12 and cfg.sampling(5).S == 6


def test_parse_overrides_and_comments():
    cfg = parse_config("""
        # short run
        vq_iterations = 20   # trailing comment
        reinit = off
        temperature = 0.5
    """)
    assert cfg.vq_iterations == 20 and cfg.reinit is False and cfg.temperature == 0.5
    assert cfg.n_codes == RunConfig().n_codes


def test_dump_parse_round_trip():
    cfg = parse_config("vq_iterations = 7\nreinit = false\nbandwidth = 0.25\n")
    assert parse_config(dump_config(cfg)) == cfg


def test_load_config(tmp_path):
    assert load_config() == RunConfig()
    path = tmp_path / "run.cfg"
    path.write_text("gen_iterations = 9\n")
    assert load_config(path).gen_iterations == 9


@pytest.mark.parametrize("text", ["no_such_key = 1", "vq_iterations = lots", "reinit = maybe", "just words"])
def test_bad_lines_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)
