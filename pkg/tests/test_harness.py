import xml.etree.ElementTree as ET

import numpy as np
import pytest

from agentcomm import harness
from agentcomm import numkit as nk
from agentcomm.harness import (ConfigError, RunConfig, compression_report, episode_bytes, load_config,
                               main, parse_config_lines, read_results, saturation_point, spearman)
from agentcomm.scenes import CorpusConfig, describe_scene_text, gen_corpus

TINY = ["data.n_train = 48", "data.n_test = 12", "pretrain.steps = 3", "pretrain.batch = 4",
        "train.steps = 60", "train.batch = 8", "snr_sweep = 0,15", "seeds = 0,1", "k_sweep = 1,2"]


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("# tiny run\n" + "\n".join(TINY) + "\n")
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


# -- configuration -------------------------------------------------------------


def test_config_dotted_keys_and_comments():
    cfg = parse_config_lines(["model.sensor.L_emb = 32  # narrower", "", "train.lr = 0.1",
                              "train.freeze_task_model = false", "snr_sweep = -5, 5"])
    assert cfg.sensor.L_emb == 32 and cfg.task.L_emb == 64
    assert cfg.train.lr == 0.1 and cfg.train.freeze_task_model is False
    assert cfg.snr_sweep == (-5.0, 5.0)


def test_config_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_lines(["train.momentum = 0.5"])
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_lines(["model.critic.L_emb = 4"])
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_lines(["K = five"])
    with pytest.raises(ConfigError):
        parse_config_lines(["K 5"])


def test_config_cross_module_validation():
    with pytest.raises(ConfigError, match="L_t"):
        load_config(None, {"L_t": "64"})
    with pytest.raises(ConfigError, match="allow_ridge"):
        load_config(None, {"A_r": "1"})
    load_config(None, {"A_r": "1", "allow_ridge": "true"})
    with pytest.raises(ConfigError, match="mode"):
        load_config(None, {"mode": "bench2"})
    with pytest.raises(ConfigError, match="K="):
        load_config(None, {"K": "17"})


def test_config_round_trip_and_digest():
    cfg = load_config(None)
    again = parse_config_lines([f"{k} = {v}" for k, v in cfg.flat().items()])
    assert again.flat() == cfg.flat() and again.digest() == cfg.digest()
    assert cfg.replace(K=3).digest() != cfg.digest()


# -- bytes, statistics, charts -------------------------------------------------


def test_byte_formulas_default():
    cfg = RunConfig()
    train, _ = gen_corpus(0, CorpusConfig(n_train=20, n_test=4))
    qa = train[0]
    assert episode_bytes(cfg, qa, "bench4") == 5 * 64 * 4 == 1280
    assert episode_bytes(cfg, qa, "proposed") == 5 * 16 * 4 == 320
    assert episode_bytes(cfg, qa, "bench3") == len(describe_scene_text(qa.scene).encode("utf-8"))
    assert episode_bytes(cfg, qa, "bench1") == len(qa.scene.serialize().encode("utf-8"))


def test_compression_ratio_exact():
    train, _ = gen_corpus(0, CorpusConfig(n_train=50, n_test=4))
    for L_t in (16, 8):
        cfg = RunConfig(L_t=L_t)
        table = {r[0]: r for r in compression_report(cfg, train)}
        assert float(table["bench4"][2]) == 64 / L_t


def test_saturation_point_and_spearman():
    assert saturation_point([1, 2, 3, 4, 5], [0.3, 0.5, 0.7, 0.72, 0.73]) == 3
    assert saturation_point([1, 2], [0.3, 0.6]) == 2
    assert spearman([1, 2, 3], [0.1, 0.2, 0.3]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [0.5, 0.5, 0.5]) == 0.0


def test_svg_is_well_formed(tmp_path):
    path = tmp_path / "c.svg"
    harness.write_svg(path, {"a": [(0, 0.2), (5, 0.6)], "b": [(0, 0.4), (5, 0.5)]}, "SNR (dB)", "accuracy")
    root = ET.parse(path).getroot()
    lines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(lines) == 2


# -- command line --------------------------------------------------------------


def test_cli_usage_errors(capsys, tmp_path):
    assert run("frobnicate") == 2
    assert run() == 2
    assert run("gen-data", "--bogus", 1) == 2
    assert run("gen-data", "--out", tmp_path, "--set", "nope=1") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 4 and all(line.startswith("error: ") for line in err)


def test_cli_missing_data_is_io_error(tmp_path, capsys):
    assert run("train", "--out", tmp_path) == 3
    assert capsys.readouterr().err.startswith("error: io:")


def test_cli_pipeline_and_contracts(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert run("gen-data", "--config", tiny_config, "--out", out) == 0
    assert (out / "data" / "train.jsonl").is_file() and (out / "data" / "manifest.txt").is_file()
    assert run("train", "--config", tiny_config, "--out", out) == 0
    cfg = load_config(tiny_config)

    # frozen contract: task model and both base weight sets equal the pretrained checkpoint
    base = next((out / "ckpt").glob("base-*.ckpt"))
    before, after = nk.load_tensors(base), nk.load_tensors(out / "ckpt" / "proposed-K5.ckpt")
    for name, value in before.items():
        if not name.startswith(("sensor.lora.", "sensor.scene_proj.")):
            assert np.array_equal(value, after[name]), name
    changed = [n for n in before if not np.array_equal(before[n], after[n])]
    assert changed and all(n.startswith(("sensor.lora.", "sensor.scene_proj.")) for n in changed)

    # loss decreases over the run
    log = read_results(out / "results" / "trainlog-proposed-K5.csv")
    losses = np.array([float(r["loss"]) for r in log])
    assert len(losses) == cfg.train.steps
    tenth = max(len(losses) // 10, 1)
    assert losses[-tenth:].mean() < losses[:tenth].mean()

    assert run("eval", "--config", tiny_config, "--out", out, "--snr", 10, "--trace") == 0
    rows = read_results(out / "results" / "eval-proposed-K5.csv")
    assert len(rows) == 1 and 0.0 <= float(rows[0]["accuracy"]) <= 1.0
    assert int(rows[0]["bytes_transmitted"]) == 320
    trace = (out / "results" / "traces" / "proposed-K5-10dB.jsonl").read_text().splitlines()
    assert len(trace) == cfg.data.n_test

    for mode in ("bench1", "bench3", "bench4"):
        assert run("train", "--config", tiny_config, "--out", out, "--mode", mode) == 0
    assert run("sweep-snr", "--config", tiny_config, "--out", out) == 0
    rows = read_results(out / "results" / "snr_sweep.csv")
    assert len(rows) == 4 * 2 * 2
    assert (out / "results" / "snr_sweep.svg").is_file()
    assert run("compression-report", "--config", tiny_config, "--out", out) == 0
    assert "config = " in (out / "manifest.txt").read_text()


def test_cli_unfrozen_task_model_trains_adapters(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert run("gen-data", "--config", tiny_config, "--out", out) == 0
    assert run("train", "--config", tiny_config, "--out", out, "--set", "train.freeze_task_model=false",
               "--set", "train.steps=5") == 0
    base = nk.load_tensors(next((out / "ckpt").glob("base-*.ckpt")))
    after = nk.load_tensors(out / "ckpt" / "proposed-K5.ckpt")
    changed = {n for n in base if not np.array_equal(base[n], after[n])}
    assert any(n.startswith("task.lora.") for n in changed)
    assert not any(n.startswith("task.") and not n.startswith("task.lora.") for n in changed)


def test_cli_same_seed_identical_outputs(tmp_path, tiny_config):
    manifests = []
    for rep in ("a", "b"):
        out = tmp_path / rep
        for cmd in ("gen-data", "train", "eval"):
            assert run(cmd, "--config", tiny_config, "--out", out, "--seed", 7, "--set", "train.steps=10") == 0
        manifests.append((out / "manifest.txt").read_text())
        ckpt = (out / "ckpt" / "proposed-K5.ckpt").read_bytes()
        manifests.append(nk.file_digest(out / "ckpt" / "proposed-K5.ckpt"))
        assert ckpt
    assert manifests[0] == manifests[2] and manifests[1] == manifests[3]
    other = tmp_path / "c"
    assert run("gen-data", "--config", tiny_config, "--out", other, "--seed", 8) == 0
    assert (other / "data" / "train.jsonl").read_bytes() != (tmp_path / "a" / "data" / "train.jsonl").read_bytes()
