import numpy as np
import pytest

from vills import cli
from vills import ufla as U
from vills.config import Config
from vills.container import load_container


@pytest.fixture(scope="module")
def small_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(
        "\n".join(
            [
                "# desk-size test configuration",
                "encoder.dim = 16",
                "encoder.depth = 1",
                "encoder.heads = 2",
                "ufla.prototypes = 8",
                "ufla.head_hidden = 8",
                "ufla.head_bottleneck = 4",
                "train.batch_videos = 2",
                "train.batch_images = 2",
            ]
        ),
        encoding="utf-8",
    )
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, small_config_file):
    """Shared gen-data -> pretrain artifacts for the command tests."""
    root = tmp_path_factory.mktemp("ws")
    data = str(root / "data.vil")
    ckpt = str(root / "pre.vil")
    assert cli.main(
        ["gen-data", "--seed", "0", "--identities", "4", "--clips-per-id", "4",
         "--frames", "4", "--out", data]
    ) == 0
    assert cli.main(
        ["pretrain", "--config", small_config_file, "--data", data, "--steps", "3",
         "--seed", "0", "--out", ckpt]
    ) == 0
    return {"root": root, "data": data, "ckpt": ckpt, "config": small_config_file}


class TestGenData:
    def test_deterministic_bytes(self, tmp_path):
        args = ["gen-data", "--seed", "5", "--identities", "2", "--clips-per-id", "2",
                "--frames", "3"]
        assert cli.main(args + ["--out", str(tmp_path / "a.vil")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b.vil")]) == 0
        assert (tmp_path / "a.vil").read_bytes() == (tmp_path / "b.vil").read_bytes()

    def test_clip_count_recorded_in_header(self, tmp_path):
        out = tmp_path / "d.vil"
        assert cli.main(
            ["gen-data", "--seed", "0", "--identities", "16", "--clips-per-id", "8",
             "--frames", "2", "--out", str(out)]
        ) == 0
        entries = load_container(out)
        assert int(entries["meta.video_count"][0]) == 128

    def test_single_frame_dataset(self, tmp_path):
        out = tmp_path / "d1.vil"
        assert cli.main(
            ["gen-data", "--seed", "0", "--identities", "2", "--clips-per-id", "2",
             "--frames", "1", "--out", str(out)]
        ) == 0
        entries = load_container(out)
        assert entries["video0.pixels"].shape[0] == 1

    def test_unwritable_path_exits_2(self, tmp_path):
        code = cli.main(
            ["gen-data", "--seed", "0", "--identities", "2", "--clips-per-id", "2",
             "--frames", "2", "--out", str(tmp_path / "missing-dir" / "d.vil")]
        )
        assert code == 2


class TestPretrain:
    def test_zero_steps_checkpoint_equals_initialization(self, tmp_path, workspace):
        out = tmp_path / "zero.vil"
        assert cli.main(
            ["pretrain", "--config", workspace["config"], "--data", workspace["data"],
             "--steps", "0", "--seed", "0", "--out", str(out)]
        ) == 0
        entries = load_container(out)
        from vills.config import load_config

        model = U.init_model(load_config(workspace["config"]), seed=0)
        expected = U.model_entries(model)
        assert entries.keys() == expected.keys()
        for name in expected:
            assert entries[name].tobytes() == np.asarray(expected[name]).tobytes(), name

    def test_loss_csv_has_exactly_steps_rows(self, workspace):
        rows = open(workspace["ckpt"] + ".losses.csv", encoding="utf-8").read().splitlines()
        assert len(rows) == 3

    def test_fixed_seed_identical_checkpoint(self, tmp_path, workspace):
        a, b = str(tmp_path / "a.vil"), str(tmp_path / "b.vil")
        for out in (a, b):
            assert cli.main(
                ["pretrain", "--config", workspace["config"], "--data", workspace["data"],
                 "--steps", "2", "--seed", "7", "--out", out]
            ) == 0
        assert open(a, "rb").read() == open(b, "rb").read()
        assert open(a + ".losses.csv").read() == open(b + ".losses.csv").read()

    def test_unknown_config_key_exits_1(self, tmp_path, workspace):
        bad = tmp_path / "bad.cfg"
        bad.write_text("encoder.bogus = 3\n", encoding="utf-8")
        code = cli.main(
            ["pretrain", "--config", str(bad), "--data", workspace["data"],
             "--steps", "1", "--seed", "0", "--out", str(tmp_path / "x.vil")]
        )
        assert code == 1

    def test_extent_mismatch_exits_1(self, tmp_path, workspace):
        bad = tmp_path / "bad.cfg"
        bad.write_text(
            "encoder.frame_height = 32\nencoder.frame_width = 16\n"
            "lse.crop_height = 32\nlse.crop_width = 16\n",
            encoding="utf-8",
        )
        code = cli.main(
            ["pretrain", "--config", str(bad), "--data", workspace["data"],
             "--steps", "1", "--seed", "0", "--out", str(tmp_path / "x.vil")]
        )
        assert code == 1


class TestFinetune:
    def test_output_drops_student_and_head_entries(self, tmp_path, workspace):
        out = str(tmp_path / "ft.vil")
        assert cli.main(
            ["finetune", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
             "--steps", "2", "--out", out]
        ) == 0
        entries = load_container(out)
        assert not [k for k in entries if k.startswith(("student.", "head."))]
        assert entries["classifier.weight"].shape == (4, 16)  # [identities, pooled dim]

    def test_zero_steps_preserves_teacher_bitwise(self, tmp_path, workspace):
        out = str(tmp_path / "ft0.vil")
        assert cli.main(
            ["finetune", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
             "--steps", "0", "--out", out]
        ) == 0
        pre = load_container(workspace["ckpt"])
        post = load_container(out)
        for name in post:
            if name.startswith("teacher."):
                assert post[name].tobytes() == pre[name].tobytes(), name

    def test_missing_entries_exit_4(self, tmp_path, workspace):
        from vills.container import save_container

        entries = load_container(workspace["ckpt"])
        broken = {k: v for k, v in entries.items() if k != "teacher.resampler.queries"}
        path = str(tmp_path / "broken.vil")
        save_container(path, broken)
        code = cli.main(
            ["finetune", "--ckpt", path, "--data", workspace["data"], "--steps", "1",
             "--out", str(tmp_path / "out.vil")]
        )
        assert code == 4


@pytest.fixture(scope="module")
def finetuned(tmp_path_factory, workspace):
    out = str(tmp_path_factory.mktemp("ft") / "ft.vil")
    assert cli.main(
        ["finetune", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
         "--steps", "2", "--out", out]
    ) == 0
    return out


class TestEval:
    @pytest.mark.parametrize("protocol", ["image", "video", "mix"])
    def test_metrics_written_in_unit_interval(self, tmp_path, workspace, finetuned, protocol):
        out = tmp_path / f"{protocol}.csv"
        assert cli.main(
            ["eval", "--ckpt", finetuned, "--data", workspace["data"],
             "--protocol", protocol, "--far", "0.1", "--out", str(out)]
        ) == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "metric,protocol,value"
        assert len(lines) == 5
        for line in lines[1:]:
            name, proto, value = line.split(",")
            assert proto == protocol
            assert 0.0 <= float(value) <= 1.0

    def test_rerun_identical_bytes(self, tmp_path, workspace, finetuned):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert cli.main(
                ["eval", "--ckpt", finetuned, "--data", workspace["data"],
                 "--protocol", "mix", "--far", "0.01", "--out", str(out)]
            ) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_eval_works_on_pretrain_checkpoint(self, tmp_path, workspace):
        out = tmp_path / "m.csv"
        assert cli.main(
            ["eval", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
             "--protocol", "video", "--far", "0.5", "--out", str(out)]
        ) == 0

    def test_unsatisfiable_protocol_exits_5(self, tmp_path, workspace):
        data1 = str(tmp_path / "one-clip.vil")
        assert cli.main(
            ["gen-data", "--seed", "0", "--identities", "2", "--clips-per-id", "1",
             "--frames", "2", "--out", data1]
        ) == 0
        code = cli.main(
            ["eval", "--ckpt", workspace["ckpt"], "--data", data1,
             "--protocol", "video", "--far", "0.1", "--out", str(tmp_path / "m.csv")]
        )
        assert code == 5


class TestVizAttn:
    def test_artifacts_and_pgm_header(self, tmp_path, workspace):
        out = tmp_path / "attn"
        assert cli.main(
            ["viz-attn", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
             "--index", "0", "--layer", "0", "--out", str(out)]
        ) == 0
        pgms = sorted(out.glob("*.pgm"))
        csvs = sorted(out.glob("*.csv"))
        assert len(pgms) == 2 and len(csvs) == 2  # one per head
        raw = pgms[0].read_bytes()
        assert raw.startswith(b"P5\n8 16\n255\n")
        rows = csvs[0].read_text(encoding="utf-8").splitlines()
        assert len(rows) == 8  # token count at 16x8 / patch 4

    def test_bad_index_exits_6(self, tmp_path, workspace):
        code = cli.main(
            ["viz-attn", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
             "--index", "9999", "--layer", "0", "--out", str(tmp_path / "x")]
        )
        assert code == 6

    def test_bad_layer_exits_1(self, tmp_path, workspace):
        code = cli.main(
            ["viz-attn", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
             "--index", "0", "--layer", "99", "--out", str(tmp_path / "x")]
        )
        assert code == 1


class TestStderrDiscipline:
    def test_success_prints_nothing_to_stderr(self, tmp_path, workspace, capsys):
        out = tmp_path / "m.csv"
        assert cli.main(
            ["eval", "--ckpt", workspace["ckpt"], "--data", workspace["data"],
             "--protocol", "video", "--far", "0.1", "--out", str(out)]
        ) == 0
        captured = capsys.readouterr()
        assert captured.err == ""
