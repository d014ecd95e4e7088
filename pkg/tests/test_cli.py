import json

import pytest
from click.testing import CliRunner

from mrcmv.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(main, ["synth", "--out", str(root / "data"), "--videos", "8", "--seed", "2"])
    assert res.exit_code == 0, res.output
    cfg = {"model": {"d_model": 8, "n_heads": 2, "d_k": 4, "d_v": 4, "d_embed": 6}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    res = runner.invoke(main, ["train", "--data", str(root / "data"), "--out", str(root / "run"),
                               "--config", str(root / "cfg.json"), "--epochs", "2", "--lr", "0.01",
                               "--margin-scale", "0.01", "--batch-pairs", "4"])
    assert res.exit_code == 0, res.output
    return root


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_synth_rejects_zero_videos(tmp_path):
    assert invoke("synth", "--out", tmp_path / "x", "--videos", 0).exit_code == 2


def test_train_writes_checkpoint_and_report(workspace):
    header = json.loads((workspace / "run" / "final" / "header.json").read_text())
    assert header["model"]["d_model"] == 8 and header["model"]["n_labels"] == 6
    assert len(header["train_ids"]) == 6 and len(header["test_ids"]) == 2
    report = json.loads((workspace / "run" / "report.json").read_text())
    assert len(report["epochs"]) == 2


def test_banner_goes_to_stderr(workspace):
    res = CliRunner().invoke(main, ["eval", "--data", str(workspace / "data"),
                                    "--checkpoint", str(workspace / "run" / "final")])
    assert res.exit_code == 0
    assert "# resolved config" in res.stderr and "# resolved config" not in res.stdout


def test_eval_uses_held_out_split(workspace, tmp_path):
    out = tmp_path / "eval.json"
    res = invoke("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "final",
                 "--ks", "1,2", "--out", out)
    assert res.exit_code == 0, res.output
    report = json.loads(out.read_text())
    assert report["n_queries"] == 2 and set(report["recall_at_k"]) == {"1", "2"}
    res = invoke("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "final", "--split", "all")
    assert '"n_queries": 8' in res.output


def test_eval_is_reproducible(workspace):
    args = ("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "final")
    assert invoke(*args).stdout == invoke(*args).stdout


def test_bad_ks_is_usage_error(workspace):
    res = invoke("eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "final", "--ks", "0")
    assert res.exit_code == 2


def test_retrieve_prints_ranked_json_lines(workspace):
    feats = workspace / "data" / "features"
    res = invoke("retrieve", "--checkpoint", workspace / "run" / "final",
                 "--query-fast", feats / "vid0003.video_fast.mrcf", "--query-slow", feats / "vid0003.video_slow.mrcf",
                 "--query-vo", feats / "vid0003.voiceover.mrcf", "--catalog", workspace / "data", "--top", 3)
    assert res.exit_code == 0, res.output
    rows = [json.loads(line) for line in res.stdout.splitlines()]
    assert [r["rank"] for r in rows] == [1, 2, 3]
    assert rows[0]["score"] >= rows[1]["score"] >= rows[2]["score"]


def test_retrieve_from_file_catalog(workspace, tmp_path):
    feats = workspace / "data" / "features"
    cat = tmp_path / "catalog"
    cat.mkdir()
    for i in range(4):
        (cat / f"song{i}.mrcf").write_bytes((feats / f"vid000{i}.bgm.mrcf").read_bytes())
    res = invoke("retrieve", "--checkpoint", workspace / "run" / "final",
                 "--query-fast", feats / "vid0000.video_fast.mrcf", "--query-slow", feats / "vid0000.video_slow.mrcf",
                 "--query-vo", feats / "vid0000.voiceover.mrcf", "--catalog", cat, "--top", 10)
    assert res.exit_code == 0, res.output
    assert sorted(json.loads(line)["id"] for line in res.stdout.splitlines()) == [f"song{i}" for i in range(4)]


def test_retrieve_missing_file_is_input_error(workspace):
    res = invoke("retrieve", "--checkpoint", workspace / "run" / "final", "--query-fast", "nope.mrcf",
                 "--query-slow", "nope.mrcf", "--query-vo", "nope.mrcf", "--catalog", workspace / "data")
    assert res.exit_code == 2


def test_checkpoint_mismatch_exits_2(workspace, tmp_path):
    import shutil

    ck = tmp_path / "ck"
    shutil.copytree(workspace / "run" / "final", ck)
    (ck / "params" / "gate.wg.mrcf").unlink()
    res = invoke("eval", "--data", workspace / "data", "--checkpoint", ck)
    assert res.exit_code == 2 and "gate.wg" in res.stderr


def test_data_depth_mismatch_exits_2(workspace, tmp_path):
    other = tmp_path / "other"
    assert invoke("synth", "--out", other, "--videos", 4, "--d-bgm", 5).exit_code == 0
    res = invoke("eval", "--data", other, "--checkpoint", workspace / "run" / "final", "--split", "all")
    assert res.exit_code == 2 and "bgm_proj.w" in res.stderr


def test_invalid_config_is_usage_error(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"d_model": 10}}))
    res = invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", bad)
    assert res.exit_code == 2
    bad.write_text(json.dumps({"optimizer": {}}))
    assert invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", bad).exit_code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(workspace, tmp_path):
    res = invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", workspace / "cfg.json",
                 "--epochs", 30, "--lr", 1e12, "--batch-pairs", 4)
    assert res.exit_code == 3, res.output


def test_train_does_not_touch_dataset(workspace, tmp_path):
    before = sorted(p.name for p in (workspace / "data").rglob("*"))
    invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", workspace / "cfg.json",
           "--epochs", 1, "--batch-pairs", 4)
    assert sorted(p.name for p in (workspace / "data").rglob("*")) == before


def test_verify_oracles():
    res = invoke("verify", "--suite", "oracles", "--instances", 5)
    assert res.exit_code == 0 and "checks passed" in res.stdout


def test_verify_failure_exits_1(monkeypatch):
    import mrcmv.cli as cli
    from mrcmv.verify import CheckResult

    monkeypatch.setattr(cli, "run_oracle_suite", lambda n: [CheckResult("bad", 1.0, 0.1)])
    assert invoke("verify", "--suite", "oracles").exit_code == 1


def _digest(root):
    import hashlib

    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert invoke("synth", "--out", tmp_path / name, "--videos", 64, "--seed", 7).exit_code == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_synth_headers_match_default_depths(workspace):
    from mrcmv.data import read_header_shape

    feats = workspace / "data" / "features"
    depths = {"video_fast": 16, "video_slow": 64, "voiceover": 32, "bgm": 32}
    for stream, d in depths.items():
        assert read_header_shape(feats / f"vid0000.{stream}.mrcf")[1] == d


def test_zero_epochs_checkpoint_equals_init(workspace, tmp_path):
    from mrcmv.model import load_checkpoint
    from mrcmv.trainer import init_parameters

    res = invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", workspace / "cfg.json",
                 "--epochs", 0, "--seed", 4)
    assert res.exit_code == 0, res.output
    params, _ = load_checkpoint(tmp_path / "r" / "final")
    init = init_parameters(params.config, 4)
    assert all(p.value.tobytes() == init[p.name].value.tobytes() for p in params)


def test_paper_defaults_in_banner(workspace, tmp_path):
    res = invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--epochs", 0)
    assert res.exit_code == 0, res.output
    banner = json.loads(res.stderr.split("# resolved config: ", 1)[1].splitlines()[0])
    assert banner["train"]["learning_rate"] == 1e-6 and banner["train"]["momentum"] == 0.9
    assert banner["model"]["d_embed"] == 512 and banner["train"]["loss"]["margin_base"] == 30


def test_flags_override_config_file(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"d_model": 8, "n_heads": 2, "d_k": 4, "d_v": 4, "d_embed": 6},
                               "train": {"learning_rate": 0.5, "momentum": 0.5}}))
    res = invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--config", cfg,
                 "--epochs", 0, "--lr", 0.25)
    banner = json.loads(res.stderr.split("# resolved config: ", 1)[1].splitlines()[0])
    assert banner["train"]["learning_rate"] == 0.25 and banner["train"]["momentum"] == 0.5


def test_zero_lr_is_usage_error(workspace, tmp_path):
    assert invoke("train", "--data", workspace / "data", "--out", tmp_path / "r", "--lr", 0).exit_code == 2


@pytest.fixture(scope="module")
def oracle_setup(tmp_path_factory):
    from mrcmv.data import SyntheticSpec, generate_synthetic
    from mrcmv.model import ModelConfig, save_checkpoint
    from mrcmv.verify import oracle_parameters

    root = tmp_path_factory.mktemp("oracle")
    ds = generate_synthetic(SyntheticSpec(n_videos=8, noise_std=0.0, seed=4), root / "data")
    save_checkpoint(root / "ck", oracle_parameters(ModelConfig(), ds.mixing))
    return root


def test_oracle_checkpoint_eval(oracle_setup):
    res = invoke("eval", "--data", oracle_setup / "data", "--checkpoint", oracle_setup / "ck")
    assert res.exit_code == 0, res.output
    assert json.loads(res.stdout.split("\nMethod")[0])["recall_at_k"]["1"] == 100.0


def test_oracle_retrieve_top1_and_oversized_top(oracle_setup):
    feats = oracle_setup / "data" / "features"
    base = ["retrieve", "--checkpoint", oracle_setup / "ck", "--query-fast", feats / "vid0005.video_fast.mrcf",
            "--query-slow", feats / "vid0005.video_slow.mrcf", "--query-vo", feats / "vid0005.voiceover.mrcf",
            "--catalog", oracle_setup / "data"]
    top1 = invoke(*base, "--top", 1)
    assert top1.exit_code == 0, top1.output
    # whole files are resampled, so the query covers the full video; the catalog
    # uses beginning clips, and the oracle still ranks the paired BGM first
    assert json.loads(top1.stdout)["id"] == "vid0005"
    assert len(invoke(*base, "--top", 100).stdout.splitlines()) == 8


def test_unknown_suite_exits_2():
    assert invoke("verify", "--suite", "everything").exit_code == 2


FIXTURE = __import__("pathlib").Path(__file__).parent / "fixtures" / "train_digest.json"


@pytest.mark.slow
def test_training_fixture_digest(tmp_path):
    """64 synthetic videos, 60 epochs: the loss-trace digest matches the recorded one."""
    import os

    assert invoke("synth", "--out", tmp_path / "d", "--videos", 64, "--seed", 0).exit_code == 0
    res = invoke("train", "--data", tmp_path / "d", "--out", tmp_path / "r", "--epochs", 60, "--seed", 0,
                 "--margin-scale", 0.01)
    assert res.exit_code == 0, res.output
    digest = json.loads(res.stdout)["loss_trace_digest"]
    if os.environ.get("MRCMV_RECORD_FIXTURE"):
        FIXTURE.parent.mkdir(exist_ok=True)
        FIXTURE.write_text(json.dumps({"loss_trace_digest": digest}) + "\n")
    assert digest == json.loads(FIXTURE.read_text())["loss_trace_digest"]
