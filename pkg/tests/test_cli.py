import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from revdarts.architecture import Architecture, SchemaError
from revdarts.checkpoint import ALPHA_JSON, load_theta, read_metrics, save_theta
from revdarts.candidate_ops import legal_kinds
from revdarts.cli import main
from revdarts.config import ConfigError, RunConfig, apply_overrides, load_config, parse_override
from revdarts.ledger import LedgerError, MemoryCapExceeded, MemoryLedger
from revdarts.model import Dims
from revdarts.profiler import CSV_HEADER, ProfileConfig, build_search_stack, measure, profile_memory, summarize
from revdarts.search import SuperNetwork
from revdarts.tensor import RngStream, Tensor

SMALL = {
    "dims": {"vocab": 16, "e": 8, "d": 32, "m": 2, "n": 3, "max_len": 16},
    "dataset": {"vocab": 16, "min_len": 3, "max_len": 6,
                "sizes": {"theta_train": 32, "alpha_val": 32, "retrain_train": 32, "retrain_val": 8, "test": 8}},
    "search": {"steps": 4, "checkpoint_interval": 2, "log_interval": 1, "batch_size": 4},
    "train": {"steps": 4, "batch_size": 4, "log_interval": 2},
    "eval": {"batch_size": 8},
}


def write_config(tmp_path, doc=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(SMALL if doc is None else doc), encoding="utf-8")
    return str(path)


def one_hot_alpha_doc(enc_kinds, dec_kinds, dims=None):
    net = SuperNetwork(Dims(**(dims or SMALL["dims"])), "max", 0, "f32")
    doc = net.alpha_document()
    for side, kinds in (("encoder", enc_kinds), ("decoder", dec_kinds)):
        legal = legal_kinds(side)
        doc[side] = [[[1000.0 if k == kind else 0.0 for k in legal] for kind in row] for row in kinds]
    return doc


# -- configuration ----------------------------------------------------------------------------

def test_defaults_validate():
    cfg = RunConfig.from_dict({})
    assert cfg.dims.d == 96 and cfg.pooling == "max" and cfg.dtype == "f32"


def test_parse_override_reads_json_values():
    assert parse_override("search.steps=7") == (["search", "steps"], 7)
    assert parse_override("pooling=avg") == (["pooling"], "avg")
    assert parse_override("memprofile.d=[32,64]") == (["memprofile", "d"], [32, 64])
    with pytest.raises(ConfigError):
        parse_override("nokey")
    with pytest.raises(ConfigError):
        parse_override("a..b=1")


def test_overrides_and_flags_take_precedence(tmp_path):
    cfg = load_config(write_config(tmp_path), ["search.steps=9", "pooling=avg"], seed=5, dtype="f64",
                      out=str(tmp_path / "o"))
    assert (cfg.search.steps, cfg.pooling, cfg.seed, cfg.dtype) == (9, "avg", 5, "f64")
    assert cfg.paths.out == str(tmp_path / "o")
    assert cfg.dims.d == 32


def test_apply_overrides_does_not_mutate_input():
    doc = {"search": {"steps": 1}}
    apply_overrides(doc, ["search.steps=2"])
    assert doc == {"search": {"steps": 1}}


@pytest.mark.parametrize("doc, field", [
    ({"mode": "bogus"}, "mode"),
    ({"dtype": "f16"}, "dtype"),
    ({"search": {"steps": "many"}}, "search.steps"),
    ({"search": {"stpes": 3}}, "search.stpes"),
    ({"dims": {"d": 30, "m": 4}}, "dims"),
    ({"dims": {"vocab": 20}}, "dims.vocab"),
    ({"train": {"dropout": 1.5}}, "train.dropout"),
    ({"memprofile": {"d": [33]}}, "memprofile.d"),
    ({"eval": {"shard": "nope"}}, "eval.shard"),
])
def test_invalid_config_names_the_field(doc, field):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(doc)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_missing_path_fails_fast(tmp_path):
    cfg = RunConfig.from_dict({"mode": "train", "paths": {"arch": str(tmp_path / "absent.json")}})
    with pytest.raises(ConfigError) as info:
        cfg.check_paths()
    assert info.value.field == "paths.arch"
    with pytest.raises(ConfigError, match="paths.checkpoint"):
        RunConfig.from_dict({"mode": "derive"}).check_paths()


def test_config_roundtrips_through_json():
    cfg = RunConfig.from_dict(SMALL)
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


# -- CLI exit codes and artifacts ---------------------------------------------------------------

def test_unknown_mode_exits_2_naming_field(capsys):
    assert main(["frobnicate"]) == 2
    assert "mode" in capsys.readouterr().err


def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"search": {"steps": -1}})
    assert main(["search", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "search.steps" in capsys.readouterr().err


def test_bad_flag_exits_2(capsys):
    assert main(["gradcheck", "--dtype", "f16"]) == 2


def test_gradcheck_linear_example_pass(tmp_path, capsys):
    out = tmp_path / "gc"
    code = main(["gradcheck", "--out", str(out), "--set", "gradcheck.quick=true"])
    text = capsys.readouterr().out
    assert code == 0
    assert "dX=[[0.0, 1.0]]" in text
    assert text.strip().splitlines()[-1] == "PASS"
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["passed"] and any("dX=(0,1)" in c["name"] for c in doc["checks"])


def test_search_then_derive_then_train_then_eval(tmp_path):
    cfg = write_config(tmp_path)
    s_out, d_out, t_out, e_out = (tmp_path / x for x in ("s", "d", "t", "e"))
    assert main(["search", "--config", cfg, "--out", str(s_out)]) == 0
    for name in ("config.json", "metrics.jsonl", ALPHA_JSON, "arch.json"):
        assert (s_out / name).exists(), name
    steps = sorted(p.name for p in (s_out / "checkpoints").iterdir())
    assert steps == ["step_000000", "step_000002", "step_000004"]
    assert (s_out / "checkpoints" / steps[-1] / "theta.bin").exists()
    snap = json.loads((s_out / "config.json").read_text())
    assert snap["mode"] == "search" and snap["paths"]["out"] == str(s_out)
    assert (s_out / "config.json").read_text().endswith("\n")

    assert main(["derive", "--config", cfg, "--out", str(d_out), "--set", f"paths.checkpoint={s_out}"]) == 0
    derived, searched = Architecture.load(d_out / "arch.json"), Architecture.load(s_out / "arch.json")
    assert (derived.encoder, derived.decoder, derived.dims) == (searched.encoder, searched.decoder, searched.dims)
    assert derived.provenance["step"] == 4

    assert main(["train", "--config", cfg, "--out", str(t_out), "--set", f"paths.arch={d_out / 'arch.json'}"]) == 0
    assert [r["step"] for r in read_metrics(t_out / "metrics.jsonl")] == [2, 4]
    ev_train = json.loads((t_out / "eval.json").read_text())

    assert main(["eval", "--config", cfg, "--out", str(e_out), "--set", f"paths.arch={t_out / 'arch.json'}",
                 "--set", f"paths.theta={t_out}", "--set", "eval.shard=retrain_val"]) == 0
    ev = json.loads((e_out / "eval.json").read_text())
    assert ev["shard"] == "retrain_val"
    assert ev["token_accuracy"] == ev_train["token_accuracy"]


def test_derive_one_hot_alphas_lists_exactly_those_kinds(tmp_path):
    enc = [["ffn", "dyn_conv_7"]]
    dec = [["self_attn", "cross_attn", "zero"]]
    ckpt = tmp_path / "ckpt"
    ckpt.mkdir()
    (ckpt / ALPHA_JSON).write_text(json.dumps(one_hot_alpha_doc(enc, dec)))
    out = tmp_path / "out"
    assert main(["derive", "--config", write_config(tmp_path), "--out", str(out),
                 "--set", f"paths.checkpoint={ckpt / ALPHA_JSON}"]) == 0
    arch = Architecture.load(out / "arch.json")
    assert arch.encoder == enc and arch.decoder == dec


def test_derive_warns_on_degenerate_layer(tmp_path, caplog):
    ckpt = tmp_path / "ckpt"
    ckpt.mkdir()
    (ckpt / ALPHA_JSON).write_text(json.dumps(one_hot_alpha_doc([["zero", "zero"]], [["glu", "ffn", "zero"]])))
    with caplog.at_level("WARNING", logger="revdarts"):
        assert main(["derive", "--config", write_config(tmp_path), "--out", str(tmp_path / "o"),
                     "--set", f"paths.checkpoint={ckpt}"]) == 0
    assert "encoder[0]" in caplog.text


def test_derive_version_mismatch_is_explicit(tmp_path):
    doc = one_hot_alpha_doc([["ffn", "glu"]], [["glu", "ffn", "zero"]])
    doc["version"] = 2
    (tmp_path / ALPHA_JSON).write_text(json.dumps(doc))
    out = tmp_path / "o"
    assert main(["derive", "--out", str(out), "--set", f"paths.checkpoint={tmp_path / ALPHA_JSON}"]) == 1
    err = json.loads((out / "error.json").read_text())
    assert err["mode"] == "derive" and err["type"] == "SchemaError" and "version" in err["message"]


def test_mid_run_failure_leaves_error_json(tmp_path):
    arch = tmp_path / "arch.json"
    arch.write_text("{not json")
    out = tmp_path / "o"
    assert main(["train", "--config", write_config(tmp_path), "--out", str(out), "--set", f"paths.arch={arch}"]) == 1
    assert (out / "config.json").exists()
    err = json.loads((out / "error.json").read_text())
    assert err["type"] == "SchemaError" and "traceback" in err


def test_memprofile_mode_writes_csv_and_summary(tmp_path):
    out = tmp_path / "mp"
    assert main(["memprofile", "--out", str(out), "--set", "memprofile.d=[16]", "--set", "memprofile.depths=[1,2]",
                 "--set", "memprofile.batch_size=2", "--set", "memprofile.seq_len=4"]) == 0
    lines = (out / "memprofile.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 5
    summary = json.loads((out / "memprofile.json").read_text())
    assert [p["depth"] for p in summary["points"]] == [1, 2]


@pytest.mark.skipif(shutil.which("revdarts") is None, reason="console script not installed")
def test_console_script_entry_point():
    proc = subprocess.run(["revdarts", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 2 and "mode" in proc.stderr


# -- architecture files --------------------------------------------------------------------------

# Illustrative searched architecture in the published configuration: two searched
# consecutive layers, two encoder splits, three decoder splits (last one fixed), max pooling.
SEARCHED_EXAMPLE = {
    "version": 1,
    "dims": {"d": 96, "e": 32, "m": 2, "n": 2, "s": 2},
    "encoder": [["dyn_conv_7", "ffn"], ["self_attn", "std_conv_3"]],
    "decoder": {"searched": [["self_attn", "glu"], ["dyn_conv_3", "ffn"]], "fixed_last_split": "cross_attn"},
    "provenance": {"pooling": "max", "note": "hand-encoded"},
}


def test_searched_example_validates_and_roundtrips(tmp_path):
    arch = Architecture.from_dict(SEARCHED_EXAMPLE)
    assert arch.dims["s"] == 2 and arch.provenance["pooling"] == "max"
    path = arch.save(tmp_path / "arch.json")
    assert Architecture.load(path) == arch
    assert Architecture.load(path).to_json() == path.read_text()


def test_exported_architecture_roundtrips_bit_identically(tmp_path):
    doc = one_hot_alpha_doc([["glu", "identity"]], [["ffn", "zero", "cross_attn"]])
    from revdarts.search import discretize_alphas
    arch = discretize_alphas(doc, {"checkpoint": "x"})
    text = arch.save(tmp_path / "a.json").read_text()
    assert Architecture.from_json(text).to_json() == text


def test_tampered_tag_is_rejected_by_name():
    doc = json.loads(json.dumps(SEARCHED_EXAMPLE))
    doc["encoder"][1][0] = "quantum_attn"
    with pytest.raises(SchemaError, match="quantum_attn"):
        Architecture.from_dict(doc)


def test_cross_attn_illegal_in_encoder():
    doc = json.loads(json.dumps(SEARCHED_EXAMPLE))
    doc["encoder"][0][0] = "cross_attn"
    with pytest.raises(SchemaError, match="cross_attn"):
        Architecture.from_dict(doc)


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d.update(version=3), "version"),
    (lambda d: d.pop("version"), "version"),
    (lambda d: d["dims"].pop("s"), "dims.s"),
    (lambda d: d["decoder"].update(fixed_last_split="glu"), "fixed_last_split"),
    (lambda d: d["encoder"].pop(), "encoder"),
])
def test_schema_violations_name_the_field(mutate, needle):
    doc = json.loads(json.dumps(SEARCHED_EXAMPLE))
    mutate(doc)
    with pytest.raises(SchemaError, match=needle):
        Architecture.from_dict(doc)


# -- weights on disk -----------------------------------------------------------------------------

@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_theta_roundtrip_is_exact(tmp_path, dtype):
    rng = RngStream(4)
    params = [(f"p{i}", Tensor(rng.child(i).normal(shape, 1.0), dtype=dtype))
              for i, shape in enumerate([(3, 4), (5,), (2, 2, 2)])]
    save_theta(tmp_path, params)
    meta = json.loads((tmp_path / "theta.json").read_text())
    assert meta["dtype"] == dtype and meta["byteorder"] == "little"
    back = load_theta(tmp_path)
    for name, p in params:
        assert back[name].dtype == p.data.dtype
        assert np.array_equal(back[name], p.data)


def test_truncated_theta_is_rejected(tmp_path):
    save_theta(tmp_path, [("w", Tensor(np.ones((4, 4)), dtype="f32"))])
    raw = (tmp_path / "theta.bin").read_bytes()
    (tmp_path / "theta.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="past end"):
        load_theta(tmp_path)


# -- activation ledger ---------------------------------------------------------------------------

def test_ledger_conservation_and_peak():
    led = MemoryLedger()
    led.retain(100, "a")
    led.retain(50, "b")
    assert led.retained_bytes == 150 and led.peak_bytes == 150
    led.release(100, "a")
    assert led.retained_bytes == 50 and led.peak_bytes == 150
    led.release(50, "b")
    led.assert_drained()


def test_ledger_refuses_negative_balance():
    led = MemoryLedger()
    led.retain(8, "a")
    with pytest.raises(LedgerError):
        led.release(16, "a")
    assert led.retained_bytes >= 0


def test_ledger_cap():
    led = MemoryLedger(cap=10)
    led.retain(8, "a")
    with pytest.raises(MemoryCapExceeded):
        led.retain(8, "b")


# -- memory profile ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def profile_rows():
    cfg = ProfileConfig(d=[96], depths=[1, 2, 4, 8], splits=2, batch_size=2, seq_len=8)
    return profile_memory(cfg)


def rows_for(rows, backbone):
    return {r["depth"]: r for r in rows if r["backbone"] == backbone}


def test_reversible_retained_bytes_are_depth_constant(profile_rows):
    rev = rows_for(profile_rows, "reversible")
    assert len({rev[d]["retained_bytes"] for d in (1, 2, 4, 8)}) == 1


def test_standard_retained_bytes_strictly_increase(profile_rows):
    std = rows_for(profile_rows, "standard")
    seq = [std[d]["retained_bytes"] for d in (1, 2, 4, 8)]
    assert all(a < b for a, b in zip(seq, seq[1:]))


def test_reversible_below_standard_from_depth_two(profile_rows):
    rev, std = rows_for(profile_rows, "reversible"), rows_for(profile_rows, "standard")
    for depth in (2, 4, 8):
        assert rev[depth]["retained_bytes"] < std[depth]["retained_bytes"]
    assert rev[4]["retained_bytes"] / std[4]["retained_bytes"] <= 0.55


def test_recompute_count_only_on_reversible(profile_rows):
    rev, std = rows_for(profile_rows, "reversible"), rows_for(profile_rows, "standard")
    for depth in (1, 2, 4, 8):
        assert rev[depth]["recompute_count"] == 2 * depth
        assert std[depth]["recompute_count"] == 0
        assert rev[depth]["peak_bytes"] >= rev[depth]["retained_bytes"]


def test_depth_one_identical_ops_within_factor_two():
    # one layer whose splits are the same single op: retained storage is comparable
    from revdarts.candidate_ops import make_operation
    from revdarts.model import FixedOp
    from revdarts.reversible import ReversibleLayer
    layer = ReversibleLayer([FixedOp(make_operation("identity", 48, RngStream(k), "f32"), "max") for k in range(2)])
    x = RngStream(0).normal((2, 8, 96), 1.0).astype(np.float32)
    rev = measure([layer], x, "reversible")["retained_bytes"]
    std = measure([layer], x, "standard")["retained_bytes"]
    assert 0.5 <= rev / std <= 2.0


def test_byte_cap_marks_row_and_sweep_continues(tmp_path):
    cfg = ProfileConfig(d=[16], depths=[1, 2], splits=2, batch_size=2, seq_len=4)
    free = profile_memory(cfg)
    rev_bytes = max(r["retained_bytes"] for r in free if r["backbone"] == "reversible")
    std_bytes = max(r["retained_bytes"] for r in free if r["backbone"] == "standard")
    cfg.byte_cap = (rev_bytes + std_bytes) // 2 + 4096
    rows = profile_memory(cfg, tmp_path)
    assert len(rows) == 4
    capped = [r for r in rows if r["cap_exceeded"]]
    assert capped and all(r["backbone"] == "standard" for r in capped)
    summary = summarize(rows)
    assert summary["cap_exceeded"]
    with open(tmp_path / "memprofile.csv", newline="") as fh:
        table = list(csv.reader(fh))
    assert ",".join(table[0]) == CSV_HEADER and len(table) == 5


def test_search_stack_has_full_op_sets():
    layers = build_search_stack(32, 2, 2, RngStream(0))
    assert len(layers) == 2
    assert all(len(g.ops) == 13 for layer in layers for g in layer.g)
