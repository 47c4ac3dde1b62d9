import csv
import io
import json

import pytest

from teeagg import cli
from teeagg.config import JobConfig
from teeagg.crypto import EncryptedBlob
from teeagg.taint import PrivacyViolation


@pytest.fixture
def cfg_path(tmp_path):
    cfg = JobConfig(epochs=2, batches_per_epoch=2)
    p = tmp_path / "job.json"
    p.write_text(cfg.to_json())
    return p


def test_run_writes_outputs_and_is_repeatable(cfg_path, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        outs.append(out)
    files = ("metrics.csv", "final_model.blob", "provisioning.log", "taint.log")
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    blob = EncryptedBlob.from_bytes((outs[0] / "final_model.blob").read_bytes())
    assert b"CMDL" not in blob.ciphertext
    assert "eval_accuracy=" in capsys.readouterr().out


def test_seed_override_changes_the_model(cfg_path, tmp_path):
    cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--seed-override", "99"])
    assert (tmp_path / "a" / "final_model.blob").read_bytes() != (tmp_path / "b" / "final_model.blob").read_bytes()


def test_invalid_config_is_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_training": 0}))
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "n_training" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_privacy_violation_is_exit_3(cfg_path, tmp_path, monkeypatch, capsys):
    import teeagg.simnet

    def tripped(cfg):
        raise PrivacyViolation("raw gradient reached aggregator")

    monkeypatch.setattr(teeagg.simnet, "run_job", tripped)
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 3
    assert "privacy violation" in capsys.readouterr().err


def _rows(capsys):
    return list(csv.DictReader(io.StringIO(capsys.readouterr().out)))


def test_costmodel_table(cfg_path, capsys):
    assert cli.main(["costmodel", "--config", str(cfg_path), "--n", "1..8", "--c", "2"]) == 0
    rows = _rows(capsys)
    assert [int(r["n"]) for r in rows] == list(range(1, 9))
    t_mask = [float(r["t_mask"]) for r in rows]
    assert t_mask == sorted(t_mask)
    assert rows[0]["recommended"] == "mask"


def test_costmodel_tree_estimates_follow_round_count(tmp_path, capsys):
    cfg = JobConfig()
    cfg.costs.agg_per_update = 0.0
    p = tmp_path / "flat.json"
    p.write_text(cfg.to_json())
    assert cli.main(["costmodel", "--config", str(p), "--n", "64..64", "--c", "2,4,8"]) == 0
    t_tree = [float(r["t_tree"]) for r in _rows(capsys)]
    assert t_tree[0] > t_tree[1] > t_tree[2]


@pytest.mark.parametrize("n,c", [("0..3", "2"), ("5..2", "2"), ("x", "2"), ("1..3", "1"), ("1..3", "")])
def test_costmodel_bad_ranges(cfg_path, n, c):
    assert cli.main(["costmodel", "--config", str(cfg_path), "--n", n, "--c", c]) == 2


def test_verify_exit_codes(capsys):
    assert cli.main(["verify", "--suite", "zero-sum"]) == 0
    assert "[PASS] 1." in capsys.readouterr().out
    assert cli.main(["verify", "--suite", "planted-violation"]) == 1
    assert capsys.readouterr().err.strip()
    assert cli.main(["verify", "--suite", "nonsense"]) == 2


@pytest.mark.parametrize("name", ["mask", "tree", "ssp"])
def test_gen_config_round_trips(name, capsys, tmp_path):
    assert cli.main(["gen-config", "--template", name]) == 0
    p = tmp_path / "t.json"
    p.write_text(capsys.readouterr().out)
    assert JobConfig.load(p).mode == {"mask": "mask", "tree": "tree", "ssp": "mask_ssp"}[name]


def test_parse_range():
    assert cli.parse_range("3..5") == range(3, 6)
    assert cli.parse_range("4") == range(4, 5)


def test_default_crossover_flips_once_and_matches_exact_sweep(tmp_path, capsys):
    from fractions import Fraction as F

    from teeagg.costmodel import CostParams

    cfg = JobConfig()
    p = tmp_path / "d.json"
    p.write_text(cfg.to_json())
    assert cli.main(["costmodel", "--config", str(p), "--n", "1..256", "--c", "2"]) == 0
    recs = [r["recommended"] for r in _rows(capsys)]

    cp = CostParams.from_config(cfg)
    lat, co = cfg.latency, cfg.costs
    net = lambda s: F(lat.per_message_latency) + F(s) / F(lat.bandwidth)
    m, g = cp.mask_bytes, cp.update_bytes
    exact = []
    for n in range(1, 257):
        rounds = 1
        while 2 ** (rounds - 1) < n:
            rounds += 1
        t_mask = net(m) + F(co.dec_base) + F(co.t_mask) + F(co.enc_base) + net(g) + F(co.dec_base) + F(co.agg_per_update) * n
        t_tree = (F(co.enc_base) + F(co.dec_base) + F(co.agg_per_update) * 2 + net(g)) * rounds
        exact.append("tree" if t_tree < t_mask else "mask")
    assert recs == exact
    flips = [n for n in range(2, 257) if recs[n - 1] != recs[n - 2]]
    assert len(flips) == 1 and recs[0] == "mask"
