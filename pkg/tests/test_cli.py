import pytest

from irim import cli, mri, phantom, train
from irim.nn import load_checkpoint

SMALL = ["--set", "steps=2", "--set", "scales=1", "--set", "latent_channels=8",
         "--set", "channels_per_scale=4,4", "--set", "head_channels=4", "--set", "image_size=16",
         "--set", "batch_size=2", "--set", "epochs=2"]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.irim"
    assert cli.main(["generate-data", "--size", "16", "--count", "4", "--seed", "3", "--out", str(path)]) == 0
    return path


def run_train(data, out, *extra):
    return cli.main(["train", "--data", str(data), "--out", str(out), *SMALL, *extra])


class TestGenerate:
    def test_readable_and_deterministic(self, tmp_path, data):
        assert len(phantom.read_dataset(data)) == 4
        again = tmp_path / "e.irim"
        cli.main(["generate-data", "--size", "16", "--count", "4", "--seed", "3", "--out", str(again)])
        assert again.read_bytes() == data.read_bytes()

    def test_count_zero(self, tmp_path, capsys):
        rc = cli.main(["generate-data", "--count", "0", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "--count" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        rc = cli.main(["generate-data", "--size", "16", "--count", "1",
                       "--out", str(tmp_path / "missing" / "x.irim")])
        assert rc == 2


class TestTrain:
    def test_trains_and_logs(self, tmp_path, data):
        out = tmp_path / "m.ckpt"
        assert run_train(data, out) == 0
        _, cfg, _, tc, step = train.load_model(out)
        assert (cfg.steps, cfg.scales, tc.image_size, step) == (2, 1, 16, 4)
        lines = (tmp_path / "m.ckpt.metrics.csv").read_text().splitlines()
        assert lines[0] == train.LOG_HEADER
        assert all(train.parse_metrics_line(l)["split"] == "train" for l in lines[1:])

    def test_preset_contract(self):
        desk = cli.PRESETS["desk-single"]
        assert (desk.model.steps, desk.model.scales, desk.model.latent_channels,
                desk.model.coil_count, desk.image_size) == (4, 2, 16, 1, 64)
        big = cli.PRESETS["paper-multi"]
        assert (big.model.steps, big.model.scales, big.model.latent_channels,
                big.model.layers_per_block, big.model.coil_count,
                big.image_size) == (8, 12, 96, 5, 15, 368)
        big.model.validate()

    def test_large_preset_refused(self, tmp_path, data, capsys):
        rc = cli.main(["train", "--data", str(data), "--out", str(tmp_path / "p"), "--preset", "paper-multi"])
        assert rc == 1
        assert "--allow-large" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, data):
        assert run_train(data, tmp_path / "m", "--set", "bogus=1") == 1

    def test_config_file(self, tmp_path, data):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# desk override\nsteps = 2\nscales=1\nchannels_per_scale=4,4\n"
                       "latent_channels=8\nhead_channels=4\nimage_size=16\nbatch_size=4\nmax_steps=1\n")
        out = tmp_path / "m"
        assert cli.main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg)]) == 0
        assert train.load_model(out)[4] == 1

    def test_coil_mismatch(self, tmp_path, data):
        assert run_train(data, tmp_path / "m", "--set", "coil_count=2") == 1

    def test_resume_bit_exact(self, tmp_path, data):
        full = tmp_path / "full.ckpt"
        assert run_train(data, full) == 0
        part = tmp_path / "part.ckpt"
        assert run_train(data, part, "--set", "max_steps=2") == 0
        assert cli.main(["train", "--data", str(data), "--out", str(part), "--resume",
                         "--set", "max_steps=0"]) == 0
        a, _ = load_checkpoint(full)
        b, _ = load_checkpoint(part)
        for name in a:
            assert a[name].value.tobytes() == b[name].value.tobytes()
        # the resumed log continues the original one
        full_log = (tmp_path / "full.ckpt.metrics.csv").read_text()
        part_log = (tmp_path / "part.ckpt.metrics.csv").read_text()
        assert full_log == part_log

    def test_resume_locks_model(self, tmp_path, data):
        out = tmp_path / "m"
        assert run_train(data, out, "--set", "max_steps=1") == 0
        rc = cli.main(["train", "--data", str(data), "--out", str(out), "--resume", "--set", "steps=3"])
        assert rc == 1


class TestReconstructEvaluate:
    @pytest.fixture
    def ckpt(self, tmp_path, data):
        out = tmp_path / "m.ckpt"
        assert run_train(data, out, "--set", "max_steps=1") == 0
        return out

    def test_reconstruct(self, tmp_path, data, ckpt):
        out = tmp_path / "recon"
        assert cli.main(["reconstruct", "--data", str(data), "--checkpoint", str(ckpt),
                         "--accel", "8", "--out-dir", str(out)]) == 0
        assert len(list(out.glob("*.pgm"))) == 3 * 4
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == train.LOG_HEADER
        rows = [train.parse_metrics_line(l) for l in lines[1:]]
        assert len(rows) == 4 and all(r["accel"] == 8 for r in rows)
        # zero-filled image recomputed straight from the operator
        rec = phantom.read_dataset(data)[2]
        mask = mri.make_mask(16, 8, train.eval_mask_seed(2))
        zf = phantom.rss(mri.adjoint_op(mri.forward_op(mri.ifft2c(rec.kdata), mask), mask))
        phantom.write_pgm(zf, tmp_path / "zf.pgm")
        assert (tmp_path / "zf.pgm").read_bytes() == (out / "record0002_zero_filled.pgm").read_bytes()

    def test_export_matches_reconstruct(self, tmp_path, data, ckpt):
        out = tmp_path / "recon"
        cli.main(["reconstruct", "--data", str(data), "--checkpoint", str(ckpt), "--out-dir", str(out)])
        assert cli.main(["export-image", "--data", str(data), "--index", "1", "--kind", "zero-filled",
                         "--out", str(tmp_path / "z.pgm")]) == 0
        assert (tmp_path / "z.pgm").read_bytes() == (out / "record0001_zero_filled.pgm").read_bytes()
        assert cli.main(["export-image", "--data", str(data), "--index", "9",
                         "--out", str(tmp_path / "t.pgm")]) == 1

    def test_evaluate(self, tmp_path, data, ckpt, capsys):
        log = tmp_path / "eval.csv"
        assert cli.main(["evaluate", "--data", str(data), "--checkpoint", str(ckpt), "--log", str(log)]) == 0
        table = capsys.readouterr().out
        assert "zero-filled" in table and "4x" in table and "8x" in table
        rows = [train.parse_metrics_line(l) for l in log.read_text().splitlines()]
        assert {(r["split"], r["accel"]) for r in rows} == {
            ("eval", 4), ("eval", 8), ("eval-zf", 4), ("eval-zf", 8)}

    def test_missing_checkpoint(self, tmp_path, data):
        assert cli.main(["evaluate", "--data", str(data), "--checkpoint", str(tmp_path / "nope")]) == 2

    def test_coil_mismatch(self, tmp_path, ckpt):
        multi = tmp_path / "k2.irim"
        cli.main(["generate-data", "--size", "16", "--count", "1", "--coils", "2", "--out", str(multi)])
        assert cli.main(["evaluate", "--data", str(multi), "--checkpoint", str(ckpt)]) == 1


class TestCheck:
    def test_passes(self, capsys):
        assert cli.main(["check"]) == 0
        out = capsys.readouterr().out
        assert "summary=pass" in out
        assert "peak_cached_states.reversible.T2=" in out and "peak_cached_states.reversible.T16=" in out

    def test_sabotage_fails(self, capsys):
        assert cli.main(["check", "--sabotage", "store-grad"]) == 3
        assert "gradient_equivalence.status=FAIL" in capsys.readouterr().out


@pytest.mark.parametrize("command", ["generate-data", "train", "reconstruct", "evaluate", "check",
                                     "export-image"])
def test_help_lists_flags(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[command]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate-data"])
    assert exc.value.code == 1
