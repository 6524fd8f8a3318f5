import csv

import numpy as np
import pytest

from hlora_lab import bench, cli
from hlora_lab.config import CodecConfig, RunConfig, dump_config
from hlora_lab.data import random_scene, render
from hlora_lab.training import StagePlan
from hlora_lab.vision import ToyImage

from conftest import TINY_SIZES, tiny_config


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    rc = RunConfig(
        model=tiny_config(),
        plan=StagePlan(steps={"1c": 10, "1g": 15, "2": 5, "3c": 15, "3g": 15}, batch_size=4),
        data=TINY_SIZES,
        codec=CodecConfig(corpus_size=120),
        sweep_base_steps=5,
    )
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(dump_config(rc))
    return path


@pytest.fixture(scope="module")
def pipeline(cfg_path, tmp_path_factory):
    """Runs 1c, 1g, 2, 3c, 3g through the CLI, each resuming the previous checkpoint."""
    root = tmp_path_factory.mktemp("run")
    prev = None
    for stage in ("1c", "1g", "2", "3c", "3g"):
        out = root / stage
        argv = ["train", "--stage", stage, "--config", str(cfg_path), "--out", str(out), "--no-eval"]
        if prev:
            argv += ["--resume", str(prev / cli.CKPT_NAME)]
        assert cli.main(argv) == 0
        prev = out
    return prev


def test_pipeline_outputs(pipeline):
    from hlora_lab import checkpoint

    state, _, stages = checkpoint.load(pipeline / cli.CKPT_NAME)
    assert stages == ["1c", "1g", "2", "3c", "3g"]
    assert (pipeline / cli.CONFIG_NAME).read_text().startswith("format: hlora-lab-config/1")
    assert (pipeline / cli.METRICS_NAME).read_text().startswith("# hlora-lab metrics v1\n")


def test_stage3_needs_stage2(cfg_path, tmp_path, capsys):
    assert cli.main(["train", "--stage", "3c", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2
    assert "needs completed stage" in capsys.readouterr().err


def test_resume_checks(cfg_path, pipeline, tmp_path, capsys):
    ckpt = str(pipeline / cli.CKPT_NAME)
    assert cli.main(["train", "--stage", "3g", "--config", str(cfg_path), "--resume", ckpt, "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--stage", "1c", "--config", str(cfg_path), "--resume", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
    other = tmp_path / "other.yaml"
    other.write_text(cfg_path.read_text().replace("d_model: 32", "d_model: 16"))
    assert cli.main(["train", "--stage", "3g", "--config", str(other), "--resume", ckpt, "--out", str(tmp_path)]) == 2
    assert "config hash" in capsys.readouterr().err


def test_seeded_runs_identical(cfg_path, tmp_path):
    for name in ("a", "b"):
        argv = ["train", "--stage", "1g", "--config", str(cfg_path), "--seed", "7", "--out", str(tmp_path / name)]
        assert cli.main(argv) == 0
    a = (tmp_path / "a" / cli.METRICS_NAME).read_bytes()
    assert a == (tmp_path / "b" / cli.METRICS_NAME).read_bytes()
    assert (tmp_path / "a" / cli.CKPT_NAME).read_bytes() == (tmp_path / "b" / cli.CKPT_NAME).read_bytes()
    assert b"eval" in a


def test_mixed_stage(cfg_path, tmp_path):
    assert cli.main(["train", "--stage", "mixed", "--config", str(cfg_path), "--out", str(tmp_path), "--no-eval"]) == 0
    assert "arch: shared" in (tmp_path / cli.CONFIG_NAME).read_text()


def test_generate_comp_prints_text_only(pipeline, tmp_path, capsys):
    img = tmp_path / "in.pgm"
    cli.write_pgm(img, render(random_scene(np.random.default_rng(0), 2)))
    capsys.readouterr()
    code = cli.main(["generate", "--ckpt", str(pipeline / cli.CKPT_NAME), "--task", "comp", "--prompt", "count ?", "--image", str(img), "--max-new", "8"])
    out, err = capsys.readouterr()
    if code == 1:
        assert "truncated" in err
    else:
        assert code == 0
        from hlora_lab.text import TEXT_TOKENS

        assert all(w in TEXT_TOKENS for w in out.split())


def test_generate_gen_writes_image(pipeline, tmp_path):
    out = tmp_path / "g.pgm"
    code = cli.main(["generate", "--ckpt", str(pipeline / cli.CKPT_NAME), "--task", "gen", "--prompt", "draw ; shape square size 2 row 3 col 4", "--out", str(out)])
    assert code == 0
    img = cli.read_pgm(out)
    assert img.shape == (12, 12)
    assert out.read_text().splitlines()[1] == cli.PGM_TAG
    idx = out.with_suffix(".idx.txt").read_text().splitlines()
    assert idx[0] == "# hlora-lab indices v1" and len(idx[1].split()) == 9


def test_generate_truncation_exit_code(pipeline, tmp_path, capsys):
    code = cli.main(["generate", "--ckpt", str(pipeline / cli.CKPT_NAME), "--task", "gen", "--prompt", "draw", "--out", str(tmp_path / "x.pgm"), "--max-new", "4"])
    assert code == 1
    assert "truncated after 4 tokens" in capsys.readouterr().err


def test_generate_usage_errors(pipeline, tmp_path):
    assert cli.main(["generate", "--ckpt", str(tmp_path / "missing.ckpt"), "--task", "comp"]) == 2
    assert cli.main(["generate", "--ckpt", str(pipeline / cli.CKPT_NAME), "--task", "comp", "--prompt", "count ?"]) == 2
    assert cli.main(["generate", "--ckpt", str(pipeline / cli.CKPT_NAME), "--task", "gen", "--prompt", "zebra", "--out", "x.pgm"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate", "--task", "comp"])
    assert exc.value.code == 2


def test_pgm_roundtrip_and_errors(tmp_path):
    g = np.round(np.random.default_rng(0).random((12, 12)) * 255) / 255
    path = tmp_path / "a.pgm"
    cli.write_pgm(path, ToyImage(g))
    np.testing.assert_allclose(cli.read_pgm(path).grid, g)
    path.write_text("P5\n2 2\n255\n")
    with pytest.raises(cli.UsageError):
        cli.read_pgm(path)
    path.write_text("P2\n2 2\n255\n1 2 3\n")
    with pytest.raises(cli.UsageError):
        cli.read_pgm(path)


def test_bench_command(tmp_path, capsys):
    path = tmp_path / "b.csv"
    argv = ["bench", "--experts", "2,4,8,32", "--rank", "2", "--tokens", "32", "--repetitions", "5", "--warmup", "2", "--csv", str(path)]
    assert cli.main(argv) == 0
    rows = list(csv.DictReader(path.read_text().splitlines()[1:]))
    assert len(rows) == 12
    assert {(r["kind"], r["k"]) for r in rows} == {(kd, str(k)) for kd in bench.KINDS for k in (2, 4, 8, 32)}
    assert "vs_lora" in capsys.readouterr().out


def test_bench_gate(monkeypatch):
    monkeypatch.setattr(bench, "expected_opcount", lambda kind, k: -1)
    assert cli.main(["bench", "--experts", "2", "--tokens", "8"]) == 1


def test_bench_usage_errors():
    assert cli.main(["bench", "--repetitions", "2"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["bench", "--experts", "a,b"])
    assert exc.value.code == 2


def test_sweep_command(cfg_path, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["sweep", "--config", str(cfg_path), "--ratios", "0,0.25,0.5,1", "--seeds", "0", "--steps", "4", "--out", str(out)]
        assert cli.main(argv) == 0
        outs.append(out)
    for arch in ("shared", "hlora"):
        a = (outs[0] / f"sweep_{arch}.csv").read_text()
        assert a == (outs[1] / f"sweep_{arch}.csv").read_text()
        lines = a.splitlines()
        assert lines[0] == "# hlora-lab sweep v1"
        assert [row.split(",")[1] for row in lines[2:]] == ["0", "0.25", "0.5", "1"]
    with pytest.raises(SystemExit):
        cli.main(["sweep", "--ratios", "0,2", "--out", str(tmp_path)])
