import logging

import numpy as np
import pytest

from kitseg import cli
from kitseg.networks import InitSpec, ResNetSpec, build_res_net
from kitseg.volume_io import read_volume, save_checkpoint


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def _error_line(err):
    lines = [l for l in err.splitlines() if l.startswith("error:")]
    assert len(lines) == 1
    return lines[0]


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["phantom", "--desk", "--count", "3", "--seed", "2", "--out", str(root / "ph")]) == 0
    assert cli.main(["preprocess", "--desk", "--in", str(root / "ph"), "--out", str(root / "pp")]) == 0
    return root


def test_phantom_layout_and_determinism(phantom_dir, tmp_path):
    cases = sorted(p.name for p in (phantom_dir / "ph").iterdir())
    assert cases == ["case_00000", "case_00001", "case_00002"]
    assert cli.main(["phantom", "--desk", "--count", "3", "--seed", "2", "--out", str(tmp_path)]) == 0
    for c in cases:
        for f in ("imaging.kvl", "segmentation.kvl"):
            assert (tmp_path / c / f).read_bytes() == (phantom_dir / "ph" / c / f).read_bytes()


def test_preprocess_output(phantom_dir):
    v = read_volume(phantom_dir / "pp" / "case_00000" / "imaging.kvl")
    assert v.spacing == (1.0, 1.0, 3.0) and v.shape == (30, 128, 128)
    assert abs(float(v.data.mean())) < 1e-4


def test_gradcheck_table(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0
    assert out.count("pass") == 11 and "FAIL" not in out


def test_usage_errors(capsys):
    code, _, err = run(["bogus"], capsys)
    assert code == cli.EXIT_USAGE
    assert _error_line(err).startswith("error: category=usage message=")
    code, _, err = run(["gradcheck", "--op", "sigmoid"], capsys)
    assert code == cli.EXIT_USAGE
    code, _, err = run(["phantom", "--out", "x", "--bogus"], capsys)
    assert code == cli.EXIT_USAGE


def test_missing_input(capsys, tmp_path):
    code, _, err = run(["preprocess", "--in", str(tmp_path / "nope"), "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_MISSING
    assert "category=missing-file" in _error_line(err)


def test_bad_format(capsys, tmp_path):
    bad = tmp_path / "bad.kck"
    bad.write_bytes(b"NOPE" + bytes(20))
    code, _, err = run(["predict", "--stage1", str(bad), "--stage1-only", "--in", str(bad),
                        "--out", str(tmp_path / "o.kvl")], capsys)
    assert code == cli.EXIT_FORMAT
    assert "category=bad-magic" in _error_line(err)


def test_incompatible_checkpoint(capsys, tmp_path, phantom_dir):
    net = build_res_net(ResNetSpec(base_channels=2), InitSpec("he_uniform"))
    good = tmp_path / "good.kck"
    save_checkpoint(net.state_dict(), None, {"arch": net.arch, "stage": 2}, good)
    state = net.state_dict()
    state["block1.pre1.conv.kernel_renamed"] = state.pop("block1.pre1.conv.kernel")
    bad = tmp_path / "bad.kck"
    save_checkpoint(state, None, {"arch": net.arch, "stage": 2}, bad)
    code, _, err = run(["predict", "--desk", "--stage1", str(good), "--stage2", str(bad),
                        "--in", str(phantom_dir / "ph"), "--out", str(tmp_path / "pred")], capsys)
    assert code == cli.EXIT_CHECKPOINT
    assert "category=incompatible-checkpoint" in _error_line(err)


def test_config_precedence(tmp_path, caplog):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count = 1\ntumor-fraction = 0.0\nnoise = 0\n")
    with caplog.at_level(logging.INFO, logger="kitseg"):
        assert cli.main(["phantom", "--desk", "--config", str(cfg), "--count", "2",
                         "--out", str(tmp_path / "o")]) == 0
    line = next(r.getMessage() for r in caplog.records if "resolved config" in r.getMessage())
    assert '"count": 2' in line and '"tumor_fraction": 0.0' in line and '"noise": 0.0' in line
    lab = read_volume(tmp_path / "o" / "case_00001" / "segmentation.kvl")
    assert not np.any(lab.data == 2)
    cfg.write_text("colour = red\n")
    assert cli.main(["phantom", "--config", str(cfg), "--out", str(tmp_path / "p")]) == cli.EXIT_USAGE


def test_train_predict_evaluate_round(phantom_dir, tmp_path, capsys):
    ck = tmp_path / "s1.kck"
    common = ["--desk", "--max-epochs", "1", "--epoch-iterations", "1", "--base-channels", "2"]
    assert cli.main(["train", "--preset", "res-unet1", "--data", str(phantom_dir / "pp"),
                     "--out", str(ck)] + common) == 0
    log = (tmp_path / "s1.kck.log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,dice_kidney,dice_tumor" and len(log) == 2
    assert cli.main(["train", "--preset", "res-net", "--stage", "2", "--data",
                     str(phantom_dir / "pp"), "--out", str(tmp_path / "rn.kck")] + common) == 0
    pred = tmp_path / "pred"
    assert cli.main(["predict", "--desk", "--stage1", str(ck), "--stage2", str(tmp_path / "rn.kck"),
                     "--in", str(phantom_dir / "ph"), "--out", str(pred), "--jobs", "2",
                     "--overlay", str(tmp_path / "ov")]) == 0
    raw = read_volume(phantom_dir / "ph" / "case_00001" / "imaging.kvl")
    mask = read_volume(pred / "case_00001.kvl")
    assert mask.shape == raw.shape and mask.spacing == raw.spacing
    assert len(list((tmp_path / "ov").glob("case_00001_z*.png"))) == raw.shape[0]
    capsys.readouterr()
    code, out, _ = run(["evaluate", "--pred", f"ens={pred}", "--gt", str(phantom_dir / "ph"),
                        "--report", str(tmp_path / "r.csv"), "--table", str(tmp_path / "t.csv")],
                       capsys)
    assert code == 0 and out.startswith("ens: dice_kidney")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "volume_id,dice_kidney,dice_tumor" and len(rows) == 5
    assert rows[-1].startswith("summary,")
