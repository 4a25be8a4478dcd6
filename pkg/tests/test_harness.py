import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from immalab.autodiff import ParamStore
from immalab.harness import checkpoint as ckpt
from immalab.harness import cli
from immalab.harness import config as cfgmod
from immalab.harness.report import Report, ReportError, summarize

# ----------------------------------------------------------- checkpoints


def _store():
    rng = np.random.default_rng(0)
    return ParamStore({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "c": np.float32(2.5)})


def test_checkpoint_round_trip_bit_exact(tmp_path):
    s = _store()
    path = ckpt.save_checkpoint(s, {"role": "pretrained", "seed": 1}, tmp_path / "m.json")
    back, meta = ckpt.load_checkpoint(path)
    assert meta == {"role": "pretrained", "seed": 1}
    assert list(back) == list(s)
    assert all(back[n].data.tobytes() == s[n].data.tobytes() and back[n].shape == s[n].shape for n in s)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 4)),
              elements=st.floats(width=32, allow_nan=False)))
def test_encode_decode_exact(a):
    assert ckpt.decode_array("x", ckpt.encode_array(a)).tobytes() == a.tobytes()


def _doc(tmp_path):
    path = ckpt.save_checkpoint(_store(), {"role": "erased", "target": "ring"}, tmp_path / "m.json")
    return path, json.loads(path.read_text())


def test_tampered_length_names_tensor(tmp_path):
    path, doc = _doc(tmp_path)
    doc["params"]["b"]["data"] = doc["params"]["b"]["data"][:-8]
    path.write_text(json.dumps(doc))
    with pytest.raises(ckpt.PayloadError, match="'b'") as e:
        ckpt.load_checkpoint(path)
    assert e.value.name == "b"


def test_shape_mismatch_names_tensor(tmp_path):
    path, doc = _doc(tmp_path)
    doc["params"]["a"]["shape"] = [4, 4]
    path.write_text(json.dumps(doc))
    with pytest.raises(ckpt.PayloadError, match="'a'"):
        ckpt.load_checkpoint(path)


def test_wrong_tag_and_unknown_field(tmp_path):
    path, doc = _doc(tmp_path)
    path.write_text(json.dumps({**doc, "format": "imma-ckpt-v0"}))
    with pytest.raises(ckpt.FormatTagError):
        ckpt.load_checkpoint(path)
    path.write_text(json.dumps({**doc, "extra": 1}))
    with pytest.raises(ckpt.CheckpointError, match="extra"):
        ckpt.load_checkpoint(path)


def test_metadata_only_skips_payloads(tmp_path):
    path, doc = _doc(tmp_path)
    doc["params"]["a"]["data"] = "!!not base64!!"
    path.write_text(json.dumps(doc))
    assert ckpt.read_metadata(path)["target"] == "ring"
    with pytest.raises(ckpt.PayloadError):
        ckpt.load_checkpoint(path)


def test_bad_role_and_missing_file(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.save_checkpoint(_store(), {"role": "mystery"}, tmp_path / "x.json")
    with pytest.raises(FileNotFoundError):
        ckpt.load_checkpoint(tmp_path / "nope.json")


# ---------------------------------------------------------------- config


def test_config_defaults_and_protocol_overrides():
    c = cfgmod.resolve({"protocol": "personalize"})
    assert len(c["targets"]) == 5 and len(c["methods"]) == 3
    assert cfgmod.resolve({})["imma"]["local"] is True


def test_config_unknown_keys_rejected():
    with pytest.raises(cfgmod.ConfigError, match="bogus"):
        cfgmod.resolve({"bogus": 1})
    with pytest.raises(cfgmod.ConfigError, match="imma.alpha"):
        cfgmod.resolve({"imma": {"alpha": 1}})
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve({"upper_lr_by_method": {"dreambooth": 1e-3}})


@pytest.mark.parametrize(
    "raw",
    [
        {"protocol": "nope"},
        {"protocol": "relearn", "targets": ["star"]},
        {"protocol": "relearn", "methods": ["token_inversion"]},
        {"protocol": "personalize", "targets": ["ring", "star"]},
        {"protocol": "crossed", "methods": ["lora"]},
        {"seed": -1},
        {"targets": ["hexagon"]},
    ],
)
def test_config_validation(raw):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(raw)


def test_run_id_ignores_output_directory():
    a = cfgmod.resolve({"out": "x"})
    b = cfgmod.resolve({"out": "y"})
    assert cfgmod.run_id(a) == cfgmod.run_id(b) != cfgmod.run_id(cfgmod.resolve({"seed": 3}))


# ---------------------------------------------------------------- report


def test_report_round_trip(tmp_path):
    rep = Report("abc", "relearn")
    rep.add("ring", "A/lora", 0, "sim_energy", 0.1 + 0.2)
    rep.add("ring", "lora", 3, "sgr_energy", float("nan"))
    rep.add("ring", "lora", 5, "sgr_energy", -1e-300)
    path = rep.to_csv(tmp_path / "r.csv")
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.startswith(b"run_id,protocol,concept,method,epoch,metric,value\n")
    back = Report.from_csv(path)
    assert back.run_id == "abc" and back.protocol == "relearn"
    assert back.rows[0] == rep.rows[0] and math.isnan(back.rows[1][4]) and back.rows[2] == rep.rows[2]
    assert back.last("ring", "lora", "sgr_energy") == -1e-300
    assert summarize(back) == [("lora", "sgr_energy", -1e-300, 1)]


def test_report_errors_name_line(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("run_id,protocol,concept,method,epoch,metric,value\nx,y,z,m,zero,s,1\n")
    with pytest.raises(ReportError, match=":2:"):
        Report.from_csv(path)
    path.write_text("a,b\n")
    with pytest.raises(ReportError, match=":1:"):
        Report.from_csv(path)


# ------------------------------------------------------------------- CLI

TINY = {
    "data": {"n_train": 64, "n_ref": 32},
    "pretrain": {"steps": 30, "batch_size": 32},
    "classifier": {"steps": 30},
    "erasure": {"steps": 5},
    "imma": {"iterations": 2},
    "adapt": {"epochs": 1},
    "eval": {"n_samples": 16, "n_other": 8},
}


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def test_cli_exit_codes_for_errors(tmp_path, capsys):
    bad = _write(tmp_path, "bad.json", {"unknown_key": 1})
    assert cli.main(["gen-data", "--config", bad]) == cli.EXIT_CONFIG
    assert cli.main(["gen-data", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_MISSING
    assert cli.main(["erase", "--ckpt", str(tmp_path / "missing.json")]) == cli.EXIT_MISSING
    assert cli.main(["erase"]) == cli.EXIT_CONFIG
    assert cli.main(["frobnicate"]) == cli.EXIT_CONFIG
    assert cli.main(["report", str(tmp_path / "none.csv")]) == cli.EXIT_MISSING
    capsys.readouterr()


def test_cli_pipeline_end_to_end(tmp_path, capsys):
    cfg = _write(tmp_path, "tiny.json", {**TINY, "targets": ["spiral"]})
    out = tmp_path / "run"
    assert cli.main(["gen-data", "--config", cfg, "--out", str(out / "data")]) == 0
    assert (out / "data" / "spiral" / "train.csv").exists()
    assert cli.main(["pretrain", "--config", cfg, "--out", str(out)]) == 0
    pre = str(out / "pretrained.json")
    assert cli.main(["erase", "--config", cfg, "--ckpt", pre, "--out", str(out / "erase")]) == 0
    erased = out / "erase" / "erased.json"
    assert ckpt.read_metadata(erased)["target"] == "spiral"
    assert cli.main(["immunize", "--config", cfg, "--ckpt", str(erased), "--out", str(out / "imm")]) == 0
    assert (out / "imm" / "trace.csv").exists()
    imm = str(out / "imm" / "immunized.json")
    assert ckpt.read_metadata(imm)["role"] == "immunized"
    assert cli.main(["adapt", "--config", cfg, "--ckpt", imm, "--out", str(out / "ad")]) == 0
    adapter = str(out / "ad" / "adapter.json")
    assert cli.main(["eval", "--config", cfg, "--ckpt", f"{imm},{adapter}", "--out", str(out / "ev")]) == 0
    assert "sim_energy" in capsys.readouterr().out
    # a pretrained checkpoint is not a valid immunization result for eval without a target row
    assert cli.main(["adapt", "--config", cfg, "--ckpt", adapter]) == cli.EXIT_CONFIG


def test_cli_protocol_check_failure_exits_4(tmp_path, capsys):
    pre_cfg = _write(tmp_path, "pre.json", TINY)
    assert cli.main(["pretrain", "--config", pre_cfg, "--out", str(tmp_path / "pre")]) == 0
    # no immunization iterations: every SGR is zero, so the crossed check cannot pass
    crossed = {**TINY, "protocol": "crossed", "targets": ["star"], "imma": {"iterations": 0}}
    cfg = _write(tmp_path, "crossed.json", crossed)
    rc = cli.main(["protocol", "--config", cfg, "--ckpt", str(tmp_path / "pre" / "pretrained.json"),
                   "--out", str(tmp_path / "p"), "--check"])
    assert rc == cli.EXIT_CHECK
    assert "A9 FAIL" in capsys.readouterr().out
    report = str(tmp_path / "p" / "report.csv")
    assert cli.main(["report", report, "--check", "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "merged.csv").exists()
    saved = json.loads((tmp_path / "p" / "config.json").read_text())
    assert saved["protocol"] == "crossed"


# ------------------------------------------------------------ acceptance


def test_true_generator_passes_split_half_bound():
    from immalab import concepts as cc
    from immalab import metrics as mt
    from immalab.harness.acceptance import split_half_ed

    for d in cc.make_datasets():
        floor = split_half_ed(d.reference)
        for seed in (77, 78, 79):
            fresh = cc.generate(d.spec, 0, 512, seed=seed).reference
            assert mt.energy_distance(fresh, d.reference) <= 2 * floor, (d.name, seed)
